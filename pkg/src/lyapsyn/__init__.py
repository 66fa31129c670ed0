"""Neural-network controller and Lyapunov function synthesis with exact
mixed-integer certification for discrete-time leaky-ReLU dynamics.

The package is organized as a pipeline:

* :mod:`lyapsyn.nets` - dense leaky-ReLU networks with manual forward and
  backward passes.
* :mod:`lyapsyn.milp` - mixed-integer linear model container and exact
  big-M encoders for networks, 1-norms, and saturation.
* :mod:`lyapsyn.solver` - LP relaxations plus branch-and-bound search,
  counter-example pools, and active-set certificates.
* :mod:`lyapsyn.certify` - closed-loop problem types, the two Lyapunov
  verification programs, and region-of-attraction estimation.
* :mod:`lyapsyn.trainer` - counter-example set training and min-max
  training driven by verifier gradients.
* :mod:`lyapsyn.plants` - benchmark plants, dynamics regression, and
  closed-loop simulation.
* :mod:`lyapsyn.cli` - command-line front end emitting reports, delimited
  data, and figures.
"""

import importlib

_SUBMODULES = ("nets", "milp", "solver", "certify", "trainer", "plants", "config", "plots", "cli")

__version__ = "0.1.0"
__all__ = list(_SUBMODULES)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f"lyapsyn.{name}")
    raise AttributeError(f"module 'lyapsyn' has no attribute {name!r}")
