"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds its output eagerly and, when gradients are enabled, keeps a
reference to its inputs plus a closure that maps the output gradient onto the
inputs. ``backward`` linearises that graph into a :class:`Tape` and replays it
in reverse. Arrays are plain numpy under the hood, and most ops broadcast the
way numpy does, so the same code runs on single examples and on batches.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
import json
from pathlib import Path

import numpy as np

LEAKY_SLOPE = 0.01

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_ids = itertools.count()


class ContractError(ValueError):
    """Raised when an op is called outside its contract."""


class DimensionError(ContractError):
    pass


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def slice_(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(data, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# reductions and linear algebra


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")

    def backward(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis. ``-inf`` entries receive exactly zero weight."""
    a = as_tensor(a)
    top = np.max(a.data, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(a.data - top)
    p = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p, (a,), backward)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine part)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), backward)


def rotate_pairs(a, cos, sin) -> Tensor:
    """Rotate consecutive (even, odd) feature pairs of the last axis.

    Pair ``c`` is treated as the complex number ``a[2c] + j a[2c+1]`` and
    multiplied by ``cos[c] + j sin[c]``. ``cos``/``sin`` broadcast against
    ``a[..., ::2]``.
    """
    a = as_tensor(a)
    if a.shape[-1] % 2:
        raise DimensionError("rotate_pairs needs an even last axis")
    cos = np.asarray(cos, dtype=np.float64)
    sin = np.asarray(sin, dtype=np.float64)
    re, im = a.data[..., 0::2], a.data[..., 1::2]
    out = np.empty(np.broadcast_shapes(a.shape, cos.shape[:-1] + (a.shape[-1],)))
    out[..., 0::2] = re * cos - im * sin
    out[..., 1::2] = re * sin + im * cos

    def backward(g):
        gr, gi = g[..., 0::2], g[..., 1::2]
        da = np.empty_like(g)
        da[..., 0::2] = gr * cos + gi * sin
        da[..., 1::2] = -gr * sin + gi * cos
        return (_unbroadcast(da, a.shape),)

    return _make(out, (a,), backward)


def _pad_hw(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (B, C, H, W), w: (O, C, kh, kw), b: (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shapes {x.shape} and {w.shape} do not agree")
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = _pad_hw(x.data, padding)
    # cols: (B, Ho, Wo, C, kh, kw)
    cols = np.empty((bsz, ho, wo, cin, kh, kw))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[..., i, j] = patch.transpose(0, 2, 3, 1)
    flat = cols.reshape(bsz * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = (flat @ wmat.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)

    def backward(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (gflat.T @ flat).reshape(w.shape)
        dcols = (gflat @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        grads = (dx, dw)
        if b is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return _make(out, parents, backward)


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences over every entry."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shapes {pred.shape} and {target.shape} differ")
    return mean(square(sub(pred, target)))


def bilinear_downsample(image, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes with bilinear interpolation (forward only).

    Pixel centres are aligned the usual way (half-pixel offsets, no corner
    alignment); samples outside the input are clamped to the edge.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[-2:]

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        return lo, hi, frac

    r0, r1, fr = axis_weights(h, out_h)
    c0, c1, fc = axis_weights(w, out_w)
    rows = img[..., r0, :] * (1 - fr)[:, None] + img[..., r1, :] * fr[:, None]
    return rows[..., c0] * (1 - fc) + rows[..., c1] * fc


# ---------------------------------------------------------------------------
# tape and backward


class Tape:
    """Operations reachable from a loss, in topological order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg


def backward(loss: Tensor, tape: Tape | None = None):
    """Populate ``.grad`` on every leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    (tape or Tape.from_loss(loss)).backward(loss)


def numerical_grad(fn, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` with respect to ``x``."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# parameter checkpoints


def save_params(params: dict, path) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f8)."""
    path = Path(path)
    entries, offset, chunks = [], 0, []
    for name, t in params.items():
        raw = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(t.data if isinstance(t, Tensor) else t)), "offset": offset, "nbytes": len(raw)})
        offset += len(raw)
        chunks.append(raw)
    manifest_path = path.with_suffix(".json")
    blob_path = path.with_suffix(".bin")
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps({"format": "madp-params/1", "blob": blob_path.name, "tensors": entries}, indent=1))


def load_params(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = (path.parent / manifest["blob"]).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        out[e["name"]] = Tensor(arr.reshape(e["shape"]).copy(), requires_grad=True, name=e["name"])
    return out
