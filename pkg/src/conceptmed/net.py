"""Small deterministic feedforward network engine.

Images are channels-last ``(h, w, l)`` float64 arrays.  Every public function
accepts a single sample or a batch with a leading sample axis.  A split index
``s`` cuts the layer stack into ``phi1 = layers[:s]`` and ``phi2 = layers[s:]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from conceptmed.errors import ConfigError, DivergenceError, ShapeError, SplitError
from conceptmed.io import atomic_write_bytes, atomic_write_text

LAYER_KINDS = ("dense", "conv3x3", "relu", "maxpool2x2", "flatten", "softmax")


@dataclass
class LayerSpec:
    kind: str
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self) -> bool:
        return self.weights is not None

    def copy(self) -> LayerSpec:
        if not self.has_params:
            return LayerSpec(self.kind)
        return LayerSpec(self.kind, self.weights.copy(), self.bias.copy())


@dataclass
class LayeredNetwork:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    split_candidates: list[int]
    seed: int = 0
    shapes: list[tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.split_candidates = [int(s) for s in self.split_candidates]
        self.shapes = _infer_shapes(self.layers, self.input_shape)
        for i, layer in enumerate(self.layers):
            if layer.kind == "softmax" and i != len(self.layers) - 1:
                raise ValueError("softmax may only be the final layer")
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ValueError("network must end with a softmax layer")
        for s in self.split_candidates:
            if not 0 < s < len(self.layers):
                raise SplitError(f"split candidate {s} not strictly inside the stack")

    @property
    def n_classes(self) -> int:
        return self.shapes[-1][0]

    def shape_at(self, s: int) -> tuple[int, ...]:
        """Per-sample shape of the activation entering layer ``s``."""
        return self.shapes[s]

    def n_units(self, s: int, granularity: str = "scalar") -> int:
        shape = self.shape_at(s)
        if granularity == "channel":
            if len(shape) != 3:
                raise ShapeError(f"split {s} is flat; no channel units")
            return shape[-1]
        return int(np.prod(shape))

    def copy(self) -> LayeredNetwork:
        return LayeredNetwork(
            [layer.copy() for layer in self.layers],
            self.input_shape,
            list(self.split_candidates),
            self.seed,
        )


@dataclass
class Activation:
    """Value of phi1 at split ``split``; ``tensor`` may carry a batch axis."""

    tensor: np.ndarray
    split: int
    spatial: bool

    @property
    def batched(self) -> bool:
        return self.tensor.ndim == (4 if self.spatial else 2)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 12
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("must be > 0", "train.learning_rate")
        if self.epochs < 0:
            raise ConfigError("must be >= 0", "train.epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "train.batch_size")
        if not 0 <= self.momentum < 1:
            raise ConfigError("must lie in [0, 1)", "train.momentum")


def _infer_shapes(layers, input_shape):
    shapes = [tuple(input_shape)]
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        k = layer.kind
        if k == "dense":
            if len(shape) != 1 or layer.weights.shape[0] != shape[0]:
                raise ShapeError(f"layer {i}: dense expects flat input of {layer.weights.shape[0]}, got {shape}")
            if layer.bias.shape != (layer.weights.shape[1],):
                raise ShapeError(f"layer {i}: dense bias shape {layer.bias.shape}")
            shape = (layer.weights.shape[1],)
        elif k == "conv3x3":
            if len(shape) != 3 or layer.weights.shape[:3] != (3, 3, shape[2]):
                raise ShapeError(f"layer {i}: conv3x3 weights {layer.weights.shape} vs input {shape}")
            if layer.bias.shape != (layer.weights.shape[3],):
                raise ShapeError(f"layer {i}: conv3x3 bias shape {layer.bias.shape}")
            shape = shape[:2] + (layer.weights.shape[3],)
        elif k == "maxpool2x2":
            if len(shape) != 3 or shape[0] % 2 or shape[1] % 2:
                raise ShapeError(f"layer {i}: maxpool2x2 needs even spatial dims, got {shape}")
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        elif k == "flatten":
            shape = (int(np.prod(shape)),)
        elif k == "softmax":
            if len(shape) != 1:
                raise ShapeError(f"layer {i}: softmax expects flat input")
        shapes.append(shape)
    return shapes


# ---------------------------------------------------------------------------
# layer kernels (batched)


def _im2col(x):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 9, c))
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, 3 * di + dj, :] = xp[:, di:di + h, dj:dj + w, :]
    return cols.reshape(n, h, w, 9 * c)


def _col2im(dcols, c):
    n, h, w, _ = dcols.shape
    dcols = dcols.reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c))
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + h, dj:dj + w, :] += dcols[:, :, :, 3 * di + dj, :]
    return dxp[:, 1:-1, 1:-1, :]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _layer_forward(layer, x):
    """Return (output, cache) for one layer on a batch."""
    k = layer.kind
    if k == "dense":
        return x @ layer.weights + layer.bias, x
    if k == "conv3x3":
        cols = _im2col(x)
        w = layer.weights.reshape(-1, layer.weights.shape[3])
        return cols @ w + layer.bias, cols
    if k == "relu":
        return np.maximum(x, 0.0), x
    if k == "maxpool2x2":
        n, h, w, c = x.shape
        blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)
    if k == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    # softmax: the cache is the logits; backward works in log space
    return _softmax(x), x


def _layer_backward(layer, cache, dout):
    """Return (d_input, d_weights, d_bias) for one layer on a batch."""
    k = layer.kind
    if k == "dense":
        x = cache
        return dout @ layer.weights.T, x.T @ dout, dout.sum(axis=0)
    if k == "conv3x3":
        cols = cache
        cout = layer.weights.shape[3]
        w = layer.weights.reshape(-1, cout)
        dw = cols.reshape(-1, cols.shape[-1]).T @ dout.reshape(-1, cout)
        dcols = dout @ w.T
        return _col2im(dcols, layer.weights.shape[2]), dw.reshape(layer.weights.shape), dout.sum(axis=(0, 1, 2))
    if k == "relu":
        return dout * (cache > 0), None, None
    if k == "maxpool2x2":
        shape, arg = cache
        n, h, w, c = shape
        grad = np.zeros(arg.shape + (4,))
        np.put_along_axis(grad, arg[..., None], dout[..., None], axis=-1)
        grad = grad.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return grad.reshape(shape), None, None
    if k == "flatten":
        return dout.reshape(cache), None, None
    raise ValueError("softmax backward is handled by the caller")


def _run(net, x, start, stop, keep_cache=False):
    caches = []
    for layer in net.layers[start:stop]:
        x, cache = _layer_forward(layer, x)
        if keep_cache:
            caches.append(cache)
    return x, caches


def _backprop(net, caches, start, stop, dout, param_grads=None):
    """Backpropagate ``dout`` (gradient at the output of layer stop-1) to the input of layer ``start``."""
    for i in range(stop - 1, start - 1, -1):
        dout, dw, db = _layer_backward(net.layers[i], caches[i - start], dout)
        if param_grads is not None and dw is not None:
            param_grads[i] = (dw, db)
    return dout


# ---------------------------------------------------------------------------
# public operations


def _as_batch(x, shape):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == shape:
        return x[None], False
    if x.shape[1:] == shape:
        return x, True
    raise ShapeError(f"expected shape {shape} or (n, *{shape}), got {x.shape}")


def _check_split(net, s):
    if s not in net.split_candidates:
        raise SplitError(f"split {s} not among candidates {net.split_candidates}")


def forward(net: LayeredNetwork, x: np.ndarray) -> np.ndarray:
    """Class probabilities f(x)."""
    xb, batched = _as_batch(x, net.input_shape)
    out, _ = _run(net, xb, 0, len(net.layers))
    return out if batched else out[0]


def forward_split(net: LayeredNetwork, x: np.ndarray, s: int) -> Activation:
    _check_split(net, s)
    xb, batched = _as_batch(x, net.input_shape)
    out, _ = _run(net, xb, 0, s)
    return Activation(out if batched else out[0], s, len(net.shape_at(s)) == 3)


def _activation_batch(net, a, s):
    _check_split(net, s)
    if a.split != s:
        raise SplitError(f"activation taken at split {a.split}, requested {s}")
    return _as_batch(a.tensor, net.shape_at(s))


def forward_from(net: LayeredNetwork, a: Activation, s: int) -> np.ndarray:
    """phi2 applied to an activation at split ``s``."""
    ab, batched = _activation_batch(net, a, s)
    out, _ = _run(net, ab, s, len(net.layers))
    return out if batched else out[0]


def _unit_mask(shape, indices, granularity):
    """Boolean mask over a per-sample activation shape selecting the given units."""
    indices = np.asarray(list(indices), dtype=np.int64)
    mask = np.zeros(shape, dtype=bool)
    if granularity == "channel":
        if len(shape) != 3:
            raise ShapeError("channel units require a spatial activation")
        if indices.size and (indices.min() < 0 or indices.max() >= shape[-1]):
            raise IndexError(f"channel index out of range for {shape[-1]} channels")
        mask[..., indices] = True
        return mask
    n = mask.size
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise IndexError(f"unit index out of range for {n} units")
    mask.reshape(-1)[indices] = True
    return mask


def splice(base: Activation, donor: Activation, units) -> Activation:
    """do-intervention: copy ``donor`` values into ``base`` at the given units.

    ``units`` is a :class:`conceptmed.concepts.UnitSet` (or anything with
    ``indices`` and ``granularity``).  In channel granularity whole channel
    planes are swapped.
    """
    if base.split != donor.split:
        raise SplitError(f"split mismatch: {base.split} vs {donor.split}")
    if base.tensor.shape != donor.tensor.shape:
        raise ShapeError(f"shape mismatch: {base.tensor.shape} vs {donor.tensor.shape}")
    split = getattr(units, "split", base.split)
    if split != base.split:
        raise SplitError(f"unit set belongs to split {split}, activation to {base.split}")
    unit_shape = base.tensor.shape[1:] if base.batched else base.tensor.shape
    mask = _unit_mask(unit_shape, units.indices, units.granularity)
    return Activation(np.where(mask, donor.tensor, base.tensor), base.split, base.spatial)


def _targets(t, n, n_classes):
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    if t.min() < 0 or t.max() >= n_classes:
        raise IndexError(f"class index out of range for {n_classes} classes")
    return t


def _log_prob_grad(net, xb, start, t):
    """Gradient of log softmax_t w.r.t. the input of layer ``start`` (batched)."""
    stop = len(net.layers) - 1
    logits, caches = _run(net, xb, start, stop, keep_cache=True)
    p = _softmax(logits)
    dlogits = -p
    dlogits[np.arange(len(t)), t] += 1.0
    return _backprop(net, caches, start, stop, dlogits)


def input_gradient(net: LayeredNetwork, x: np.ndarray, t) -> np.ndarray:
    """d log f_t(x) / dx, same shape as ``x``.  ``t`` may be per-sample."""
    xb, batched = _as_batch(x, net.input_shape)
    g = _log_prob_grad(net, xb, 0, _targets(t, len(xb), net.n_classes))
    return g if batched else g[0]


def activation_gradient(net: LayeredNetwork, a: Activation, s: int, t) -> np.ndarray:
    """d log phi2(a)_t / da at split ``s``."""
    ab, batched = _activation_batch(net, a, s)
    g = _log_prob_grad(net, ab, s, _targets(t, len(ab), net.n_classes))
    return g if batched else g[0]


def backprop_through_phi1(net: LayeredNetwork, x: np.ndarray, s: int, grad_a: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the activation at ``s`` back to the input."""
    _check_split(net, s)
    xb, batched = _as_batch(x, net.input_shape)
    gb, _ = _as_batch(grad_a, net.shape_at(s))
    _, caches = _run(net, xb, 0, s, keep_cache=True)
    g = _backprop(net, caches, 0, s, gb)
    return g if batched else g[0]


# ---------------------------------------------------------------------------
# construction and training


def init_network(layers: Sequence[LayerSpec], input_shape, split_candidates, seed: int) -> LayeredNetwork:
    """Seeded fan-in scaled uniform init of every parameterised layer, zero biases."""
    rng = np.random.default_rng(seed)
    fresh = []
    for layer in layers:
        if layer.has_params:
            fan_in = int(np.prod(layer.weights.shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=layer.weights.shape)
            fresh.append(LayerSpec(layer.kind, w, np.zeros_like(layer.bias, dtype=np.float64)))
        else:
            fresh.append(LayerSpec(layer.kind))
    return LayeredNetwork(fresh, input_shape, split_candidates, seed)


def default_network(input_shape=(16, 16, 1), n_classes: int = 2, seed: int = 0) -> LayeredNetwork:
    """conv(8)-relu-pool-conv(16)-relu-flatten-dense(32)-relu-dense(D)-softmax.

    Split candidates sit right after each relu.
    """
    h, w, c = input_shape
    flat = (h // 2) * (w // 2) * 16
    layers = [
        LayerSpec("conv3x3", np.zeros((3, 3, c, 8)), np.zeros(8)),
        LayerSpec("relu"),
        LayerSpec("maxpool2x2"),
        LayerSpec("conv3x3", np.zeros((3, 3, 8, 16)), np.zeros(16)),
        LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("dense", np.zeros((flat, 32)), np.zeros(32)),
        LayerSpec("relu"),
        LayerSpec("dense", np.zeros((32, n_classes)), np.zeros(n_classes)),
        LayerSpec("softmax"),
    ]
    return init_network(layers, input_shape, [2, 5, 8], seed)


def train(net: LayeredNetwork, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> LayeredNetwork:
    """Mini-batch SGD with momentum on mean cross-entropy.

    ``y`` is one-hot ``(n, D)``.  The returned network is a new object whose
    parameters start from ``net``'s; shuffling uses ``cfg.seed``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty training set")
    if y.shape != (len(x), net.n_classes):
        raise ShapeError(f"labels must be one-hot of shape {(len(x), net.n_classes)}, got {y.shape}")
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"inputs must have shape (n, *{net.input_shape}), got {x.shape}")
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    velocity = {i: (np.zeros_like(l.weights), np.zeros_like(l.bias))
                for i, l in enumerate(net.layers) if l.has_params}
    stop = len(net.layers) - 1
    n = len(x)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            logits, caches = _run(net, x[idx], 0, stop, keep_cache=True)
            z = logits - logits.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            total += -(y[idx] * logp).sum()
            dlogits = (np.exp(logp) - y[idx]) / len(idx)
            grads = {}
            _backprop(net, caches, 0, stop, dlogits, grads)
            for i, (dw, db) in grads.items():
                vw, vb = velocity[i]
                vw *= cfg.momentum
                vw -= cfg.learning_rate * dw
                vb *= cfg.momentum
                vb -= cfg.learning_rate * db
                net.layers[i].weights += vw
                net.layers[i].bias += vb
        if not np.isfinite(total):
            raise DivergenceError(f"non-finite training loss at epoch {epoch}")
    return net


def accuracy(net: LayeredNetwork, x: np.ndarray, y: np.ndarray) -> float:
    pred = forward(net, x).argmax(axis=1)
    return float((pred == np.asarray(y).argmax(axis=1)).mean())


# ---------------------------------------------------------------------------
# serialization


def save_network(net: LayeredNetwork, directory) -> None:
    """Write ``network.json`` (manifest) and ``network.bin`` (float64 LE blob)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "input_shape": list(net.input_shape),
        "split_candidates": net.split_candidates,
        "seed": net.seed,
        "layers": [],
    }
    blobs = []
    for layer in net.layers:
        entry = {"kind": layer.kind}
        if layer.has_params:
            entry["weights_shape"] = list(layer.weights.shape)
            entry["bias_shape"] = list(layer.bias.shape)
            blobs += [layer.weights.ravel(), layer.bias.ravel()]
        manifest["layers"].append(entry)
    blob = np.concatenate(blobs).astype("<f8") if blobs else np.zeros(0, "<f8")
    atomic_write_text(directory / "network.json", json.dumps(manifest, indent=2) + "\n")
    atomic_write_bytes(directory / "network.bin", blob.tobytes())


def load_network(directory) -> LayeredNetwork:
    directory = Path(directory)
    manifest = json.loads((directory / "network.json").read_text())
    blob = np.frombuffer((directory / "network.bin").read_bytes(), dtype="<f8").astype(np.float64)
    pos = 0
    layers = []
    for entry in manifest["layers"]:
        if "weights_shape" in entry:
            ws, bs = tuple(entry["weights_shape"]), tuple(entry["bias_shape"])
            nw, nb = int(np.prod(ws)), int(np.prod(bs))
            w = blob[pos:pos + nw].reshape(ws).copy()
            pos += nw
            b = blob[pos:pos + nb].reshape(bs).copy()
            pos += nb
            layers.append(LayerSpec(entry["kind"], w, b))
        else:
            layers.append(LayerSpec(entry["kind"]))
    if pos != blob.size:
        raise ShapeError(f"parameter blob has {blob.size} values, manifest needs {pos}")
    return LayeredNetwork(layers, manifest["input_shape"], manifest["split_candidates"], manifest["seed"])
