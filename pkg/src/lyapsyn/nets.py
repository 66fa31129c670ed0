"""Dense feedforward networks with leaky-ReLU hidden layers.

All arithmetic is float64 numpy. Networks are immutable after construction;
updates go through :func:`with_params`, which returns a new network. The
backward passes are written by hand so that the subgradient convention at
kinks (the slope-1 branch is used when a preactivation is exactly zero) is
explicit and shared by every consumer.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Sequence

import numpy as np


@dataclasses.dataclass(frozen=True)
class FeedforwardNetwork:
    """Dense network: linear layers with leaky-ReLU after every hidden layer.

    ``weights[i]`` has shape (fan_out, fan_in) and acts as ``y = W x + b``.
    The final layer is purely linear. ``leak`` is the negative-side slope c
    with 0 <= c < 1.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    leak: float

    def __post_init__(self):
        if len(self.weights) == 0:
            raise ValueError("network needs at least one layer")
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up layer by layer")
        if not (0.0 <= self.leak < 1.0):
            raise ValueError(f"leak slope must lie in [0, 1), got {self.leak}")
        ws = []
        bs = []
        last = None
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.ascontiguousarray(np.asarray(w, dtype=np.float64))
            b = np.ascontiguousarray(np.asarray(b, dtype=np.float64))
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight must be 2-d and match bias length")
            if last is not None and w.shape[1] != last:
                raise ValueError(
                    f"layer {i}: expected fan-in {last}, got {w.shape[1]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: parameters must be finite")
            last = w.shape[0]
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))
        object.__setattr__(self, "leak", float(self.leak))

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_count(self) -> int:
        return len(self.weights)

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights[:-1])


def leaky_relu(y, c):
    return np.maximum(y, c * y)


def leaky_relu_slope(y, c):
    # y == 0 takes the slope-1 branch
    return np.where(np.asarray(y) >= 0.0, 1.0, c)


def _as_batch(x, dim, what):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"{what}: expected trailing dimension {dim}, got shape {x.shape}")
    return x, single


def forward(net: FeedforwardNetwork, x):
    """Evaluate the network.

    Accepts a single input of shape (n_in,) or a batch (B, n_in). Returns
    ``(output, preactivations)`` where ``preactivations`` lists the linear
    values feeding each hidden activation, one array per hidden layer.
    """
    xb, single = _as_batch(x, net.input_dim, "forward input")
    a = xb
    pre = []
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        y = a @ w.T + b
        pre.append(y)
        a = leaky_relu(y, net.leak)
    out = a @ net.weights[-1].T + net.biases[-1]
    if single:
        return out[0], [p[0] for p in pre]
    return out, pre


def _forward_cache(net, xb):
    acts = [xb]
    pre = []
    a = xb
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        y = a @ w.T + b
        pre.append(y)
        a = leaky_relu(y, net.leak)
        acts.append(a)
    out = a @ net.weights[-1].T + net.biases[-1]
    return out, pre, acts


def _backward(net, pre, acts, cot):
    """Shared reverse pass.

    ``cot`` has shape (B, n_out). Returns the parameter gradient summed over
    the batch (flat, in :func:`parameter_vector` layout) and the per-sample
    input gradients of shape (B, n_in).
    """
    d = np.asarray(cot, dtype=np.float64)
    gw = [None] * net.layer_count
    gb = [None] * net.layer_count
    for i in range(net.layer_count - 1, -1, -1):
        gw[i] = d.T @ acts[i]
        gb[i] = d.sum(axis=0)
        d = d @ net.weights[i]
        if i > 0:
            d = d * leaky_relu_slope(pre[i - 1], net.leak)
    flat = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(gw, gb)])
    return flat, d


def value_and_grads(net: FeedforwardNetwork, x, cot):
    """Forward plus reverse pass for a batch of cotangents.

    ``x`` is (B, n_in) or (n_in,) and ``cot`` matches the output shape.
    Returns ``(output, param_grad, input_grad)`` with the parameter gradient
    summed over the batch.
    """
    xb, single = _as_batch(x, net.input_dim, "backward input")
    cotb, csingle = _as_batch(cot, net.output_dim, "cotangent")
    if single != csingle or cotb.shape[0] != xb.shape[0]:
        raise ValueError("input and cotangent batches must match")
    out, pre, acts = _forward_cache(net, xb)
    pgrad, igrad = _backward(net, pre, acts, cotb)
    if single:
        return out[0], pgrad, igrad[0]
    return out, pgrad, igrad


def grad_params(net: FeedforwardNetwork, x, cot) -> np.ndarray:
    """Gradient of ``cot . net(x)`` with respect to the flat parameter vector."""
    return value_and_grads(net, x, cot)[1]


def grad_input(net: FeedforwardNetwork, x, cot) -> np.ndarray:
    """Gradient of ``cot . net(x)`` with respect to the input."""
    return value_and_grads(net, x, cot)[2]


def parameter_count(net: FeedforwardNetwork) -> int:
    return sum(w.size + b.size for w, b in zip(net.weights, net.biases))


def parameter_vector(net: FeedforwardNetwork) -> np.ndarray:
    """Flatten parameters layer by layer: row-major weights, then the bias."""
    return np.concatenate(
        [np.concatenate([w.ravel(), b]) for w, b in zip(net.weights, net.biases)]
    )


def with_params(net: FeedforwardNetwork, flat) -> FeedforwardNetwork:
    """Rebuild the network from a flat vector in :func:`parameter_vector` layout."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (parameter_count(net),):
        raise ValueError(
            f"expected {parameter_count(net)} parameters, got shape {flat.shape}"
        )
    ws = []
    bs = []
    k = 0
    for w, b in zip(net.weights, net.biases):
        ws.append(flat[k : k + w.size].reshape(w.shape))
        k += w.size
        bs.append(flat[k : k + b.size])
        k += b.size
    return FeedforwardNetwork(tuple(ws), tuple(bs), net.leak)


def slice_params(net: FeedforwardNetwork, flat) -> list[tuple]:
    """Views of a flat vector as (weight, bias) pairs without copying.

    Works for any 1-d sequence that supports slicing and reshape-by-index,
    including autograd tensors; used when replaying encodings symbolically.
    """
    out = []
    k = 0
    for w, b in zip(net.weights, net.biases):
        rows, cols = w.shape
        wv = flat[k : k + w.size]
        k += w.size
        bv = flat[k : k + b.size]
        k += b.size
        out.append((wv.reshape(rows, cols) if hasattr(wv, "reshape") else wv, bv))
    return out


def random_network(
    sizes: Sequence[int], leak: float, rng: np.random.Generator, scale: float = 1.0
) -> FeedforwardNetwork:
    """He-initialized network for the layer widths ``sizes`` (input first)."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    ws = []
    bs = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        std = scale * np.sqrt(2.0 / fan_in)
        ws.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return FeedforwardNetwork(tuple(ws), tuple(bs), leak)


def exact_linear_network(matrix, leak: float, depth: int = 1) -> FeedforwardNetwork:
    """Network with ``depth`` hidden layers computing exactly ``matrix @ x``.

    Uses the identity sigma(y) - sigma(-y) = (1 + c) y: every hidden layer
    carries each signal as a (+, -) pair and the next layer recombines it.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("matrix must be 2-d")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    m = a.shape[0]
    rec = 1.0 / (1.0 + leak)
    ws = []
    bs = []
    # first hidden layer: pairs (+a_j x, -a_j x)
    w = np.zeros((2 * m, a.shape[1]))
    w[0::2] = a
    w[1::2] = -a
    ws.append(w)
    bs.append(np.zeros(2 * m))
    # recombination matrix from a pair layer back to the m signals
    comb = np.zeros((m, 2 * m))
    for j in range(m):
        comb[j, 2 * j] = rec
        comb[j, 2 * j + 1] = -rec
    for _ in range(depth - 1):
        w = np.zeros((2 * m, 2 * m))
        w[0::2] = comb
        w[1::2] = -comb
        ws.append(w)
        bs.append(np.zeros(2 * m))
    ws.append(comb)
    bs.append(np.zeros(m))
    return FeedforwardNetwork(tuple(ws), tuple(bs), leak)


def save_weights(net: FeedforwardNetwork, path) -> None:
    """Write the network to the JSON weight format.

    The file holds ``leak_slope`` and a ``layers`` list of objects with
    row-major ``weight`` matrices (one row per output neuron) and ``bias``
    vectors, input layer first.
    """
    doc = {
        "leak_slope": net.leak,
        "layers": [
            {"weight": w.tolist(), "bias": b.tolist()}
            for w, b in zip(net.weights, net.biases)
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_weights(path) -> FeedforwardNetwork:
    """Read a network from the JSON weight format written by :func:`save_weights`."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        leak = float(doc["leak_slope"])
        layers = doc["layers"]
        ws = tuple(np.asarray(layer["weight"], dtype=np.float64) for layer in layers)
        bs = tuple(np.asarray(layer["bias"], dtype=np.float64) for layer in layers)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed weight file: {exc}") from exc
    return FeedforwardNetwork(ws, bs, leak)
