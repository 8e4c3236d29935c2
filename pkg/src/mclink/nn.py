"""Minimal dense neural toolkit with reverse-mode gradients.

Just enough autodiff for this project: float64 tensors holding a dense
array, a gradient slot, and a backward closure. Graphs are built by the
ops below (affine layers, the four activations, elementwise math, gather,
concat) and walked once per loss evaluation. Training is single-threaded
by contract so runs are reproducible bit for bit for a fixed seed.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable

import numpy as np

LEAKY_SLOPE = 0.01
LOG_EPS = 1e-12          # floor inside cross-entropy logs
ACTIVATIONS = ("leaky_relu", "sigmoid", "identity", "softmax")


class Tensor:
    """Dense array with a gradient accumulator.

    ``grad`` is populated by :meth:`backward` on every tensor with
    ``requires_grad`` and reset by the optimizer (or ``zero_grad``).
    """

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward: Callable[[], None] | None = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        """Populate gradients of every upstream tensor of this scalar."""
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, out_data, da, db) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    req = a.requires_grad or b.requires_grad
    out = Tensor(out_data(a.data, b.data), requires_grad=req, parents=(a, b))

    def backward_fn():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(da(g, a.data, b.data), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(db(g, a.data, b.data), b.data.shape))

    out._backward = backward_fn
    return out


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def matmul(a, b) -> Tensor:
    return _binary(
        a, b,
        lambda x, y: x @ y,
        lambda g, x, y: g @ y.T,
        lambda g, x, y: x.T @ g,
    )


def _unary(a, out_data, da) -> Tensor:
    a = as_tensor(a)
    out = Tensor(out_data(a.data), requires_grad=a.requires_grad, parents=(a,))

    def backward_fn():
        if a.requires_grad:
            a._accumulate(da(out.grad, a.data, out.data))

    out._backward = backward_fn
    return out


def power(a, exponent: float) -> Tensor:
    e = float(exponent)
    return _unary(a, lambda x: x ** e, lambda g, x, y: g * e * x ** (e - 1.0))


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda g, x, y: g * y)


def log(a) -> Tensor:
    return _unary(a, np.log, lambda g, x, y: g / x)


def sqrt(a) -> Tensor:
    return _unary(a, np.sqrt, lambda g, x, y: g * 0.5 / y)


def maximum_scalar(a, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes only above the floor."""
    f = float(floor)
    return _unary(a, lambda x: np.maximum(x, f), lambda g, x, y: g * (x > f))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    return _unary(
        a,
        lambda x: np.clip(x, lo, hi),
        lambda g, x, y: g * ((x > lo) & (x < hi)),
    )


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    return _unary(
        a,
        lambda x: np.where(x > 0, x, slope * x),
        lambda g, x, y: g * np.where(x > 0, 1.0, slope),
    )


def sigmoid(a) -> Tensor:
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(a, fwd, lambda g, x, y: g * y * (1.0 - y))


def softmax(a, axis: int = -1) -> Tensor:
    def fwd(x):
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)

    def da(g, x, y):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return y * (g - inner)

    return _unary(a, fwd, da)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def da(g, x, y):
        if axis is None:
            return np.broadcast_to(g, x.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, x.shape).copy()

    return _unary(a, lambda x: x.sum(axis=axis, keepdims=keepdims), da)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _unary(a, lambda x: x.reshape(shape), lambda g, x, y: g.reshape(x.shape))


def getitem(a, idx) -> Tensor:
    """Basic slicing with gradient scatter (no fancy indexing; see take_rows)."""
    a = as_tensor(a)

    def da(g, x, y):
        z = np.zeros_like(x)
        z[idx] = g
        return z

    return _unary(a, lambda x: x[idx].copy(), da)


def take_rows(a, col_index: np.ndarray) -> Tensor:
    """out[i] = a[i, col_index[i]] with scatter-add gradient."""
    a = as_tensor(a)
    rows = np.arange(a.data.shape[0])
    col_index = np.asarray(col_index, dtype=np.intp)

    def da(g, x, y):
        z = np.zeros_like(x)
        np.add.at(z, (rows, col_index), g)
        return z

    return _unary(a, lambda x: x[rows, col_index].copy(), da)


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    req = any(t.requires_grad for t in tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(data, requires_grad=req, parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    out._backward = backward_fn
    return out


def apply_activation(x: Tensor, tag: str) -> Tensor:
    if tag == "leaky_relu":
        return leaky_relu(x)
    if tag == "sigmoid":
        return sigmoid(x)
    if tag == "identity":
        return x
    if tag == "softmax":
        return softmax(x, axis=-1)
    raise ValueError(f"unknown activation {tag!r}; expected one of {ACTIVATIONS}")


class DenseNet:
    """Stack of affine layers, each with one of the four activation tags."""

    def __init__(self, dims, activations, rng: np.random.Generator | None = None):
        dims = list(dims)
        activations = list(activations)
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        for tag in activations:
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.dims = dims
        self.activations = activations
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))

    @classmethod
    def from_arrays(cls, weights, biases, activations) -> "DenseNet":
        dims = [weights[0].shape[0]] + [w.shape[1] for w in weights]
        net = cls.__new__(cls)
        net.dims = dims
        net.activations = list(activations)
        net.weights = [Tensor(np.array(w, dtype=np.float64), requires_grad=True) for w in weights]
        net.biases = [Tensor(np.array(b, dtype=np.float64), requires_grad=True) for b in biases]
        return net

    def forward(self, x) -> Tensor:
        """Affine + activation per layer; accepts (B, d) or (d,) input."""
        h = as_tensor(x)
        squeeze = h.data.ndim == 1
        if squeeze:
            h = reshape(h, (1, -1))
        if h.data.shape[1] != self.dims[0]:
            raise ValueError(
                f"input width {h.data.shape[1]} does not match first layer ({self.dims[0]})"
            )
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            h = apply_activation(add(matmul(h, w), b), tag)
        if squeeze:
            h = reshape(h, (-1,))
        return h

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag

    def state_arrays(self) -> list[np.ndarray]:
        """Parameter snapshot (copies), weights/biases interleaved."""
        return [t.data.copy() for t in self.parameters()]

    def load_state_arrays(self, arrays) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError("parameter count mismatch")
        for t, a in zip(params, arrays):
            if t.data.shape != a.shape:
                raise ValueError("parameter shape mismatch")
            t.data = np.array(a, dtype=np.float64)


def cross_entropy(y, z, reduction: str = "mean"):
    """Cross-entropy -sum z_i log y_i between predictions y and one-hot z.

    ``y`` may be a Tensor (returns a Tensor on the graph) or an array
    (returns a float). Each y row must sum to 1 within 1e-6; z must be
    exactly one-hot. Logs are floored at 1e-12.
    """
    y_t = y if isinstance(y, Tensor) else None
    y_data = y.data if y_t is not None else np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if y_data.shape != z.shape:
        raise ValueError(f"shape mismatch: y {y_data.shape} vs z {z.shape}")
    z2 = z.reshape(-1, z.shape[-1])
    if not (np.isin(z2, (0.0, 1.0)).all() and (z2.sum(axis=1) == 1.0).all()):
        raise ValueError("z must be one-hot")
    sums = y_data.reshape(-1, y_data.shape[-1]).sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ValueError("each y row must sum to 1 within 1e-6")
    if reduction not in ("mean", "sum"):
        raise ValueError("reduction must be 'mean' or 'sum'")
    if y_t is None:
        per = -(z * np.log(np.maximum(y_data, LOG_EPS))).sum(axis=-1)
        return float(per.mean() if reduction == "mean" else per.sum())
    per = mul(tsum(mul(Tensor(z), log(maximum_scalar(y_t, LOG_EPS))), axis=-1), -1.0)
    if per.data.ndim == 0:
        return per
    return tmean(per) if reduction == "mean" else tsum(per)


def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. Standard stabilizer for stiff losses
    (mixture NLL gradients blow up as variances shrink).
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class SGD:
    """Plain SGD with classical momentum; step() applies and resets grads."""

    def __init__(self, params, lr: float = 1e-2, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
        self.zero_grad()


def gradient_check(loss_fn: Callable[[], Tensor], params, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the graph on every call (it is re-evaluated
    2 x n times). Elements where both gradients are below 1e-7 are treated
    as matching zeros.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.zero_grad()
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            ai = a_flat[i]
            if abs(ai) < 1e-7 and abs(numeric) < 1e-7:
                continue
            worst = max(worst, abs(ai - numeric) / max(abs(ai), abs(numeric)))
    return worst


# ----------------------------------------------------------------------
# Checkpoint container: magic + version + JSON header + packed float64.
# All integers and floats little-endian; arrays row-major.

CHECKPOINT_MAGIC = b"MCLCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, wrong-version, or wrong-role checkpoint file."""


def save_checkpoint(path, role: str, nets: dict[str, DenseNet], meta: dict | None = None) -> None:
    header = {
        "role": role,
        "meta": meta or {},
        "nets": {
            name: {"dims": list(net.dims), "activations": list(net.activations)}
            for name, net in nets.items()
        },
    }
    blob = json.dumps(header, sort_keys=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name in header["nets"]:
            for arr in nets[name].state_arrays():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expect_role: str | None = None):
    """Read a checkpoint; returns (role, nets, meta).

    Rejects unknown magic bytes, version mismatches, truncated payloads,
    and (when ``expect_role`` is given) checkpoints saved for another role.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )
        header = json.loads(fh.read(header_len).decode("utf-8"))
        role = header["role"]
        if expect_role is not None and role != expect_role:
            raise CheckpointError(f"{path}: role {role!r}, expected {expect_role!r}")
        nets: dict[str, DenseNet] = {}
        for name, spec in header["nets"].items():
            dims = spec["dims"]
            weights, biases = [], []
            for fan_in, fan_out in zip(dims[:-1], dims[1:]):
                w_bytes = fh.read(8 * fan_in * fan_out)
                b_bytes = fh.read(8 * fan_out)
                if len(w_bytes) != 8 * fan_in * fan_out or len(b_bytes) != 8 * fan_out:
                    raise CheckpointError(f"{path}: truncated parameter payload")
                weights.append(np.frombuffer(w_bytes, dtype="<f8").reshape(fan_in, fan_out))
                biases.append(np.frombuffer(b_bytes, dtype="<f8"))
            nets[name] = DenseNet.from_arrays(weights, biases, spec["activations"])
    return role, nets, header["meta"]
