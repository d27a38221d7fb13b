"""Small reverse-mode autodiff engine over dense numpy arrays.

Only the operations needed by the reading model are provided. Every op records
its parents and a closure mapping the output gradient to parent gradients.
Creation order doubles as the tape: ``backward`` replays reachable nodes in
exact reverse order of recording.

Gradients accumulate (``+=``) across repeated ``backward`` calls until
``zero_grad`` is called on the tensors involved.
"""
from __future__ import annotations

import itertools
import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()
_recording = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "order", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn = None
        self.order = next(_counter)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self):
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def tape_of(loss: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``loss``, in recording order."""
    seen = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack.extend(p for p in node.parents if p.requires_grad)
    return sorted(seen.values(), key=lambda t: t.order)


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (nothing requires grad)")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape_of(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    x2 = x * x
    inner = c * (x + k * x2 * x)
    t = np.tanh(inner)
    half = x.dtype.type(0.5)
    out = half * x * (1 + t)

    def bw(g):
        dinner = c * (1 + 3 * k * x2)
        return (g * (half * (1 + t) + half * x * (1 - t * t) * dinner),)

    return make_op(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2 and ad.ndim > 2:
        # fold batch axes into rows: one gemm instead of many
        lead = ad.shape[:-1]
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*lead, bd.shape[-1])

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb

        return make_op(out, (a, b), bw)

    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_op(out, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return make_op(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, orig),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_op(a.data[idx], (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat of nothing")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts:
        if len(p.shape) != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat mismatch along axis {axis}: {[q.shape for q in parts]}")
    sizes = [p.shape[ax] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return make_op(np.concatenate([p.data for p in parts], axis=ax), tuple(parts),
                   lambda g: tuple(np.split(g, cuts, axis=ax)))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack row blocks ``[n_i x d]`` into ``[sum n_i x d]``."""
    return concat(parts, axis=-2)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    return concat(parts, axis=-1)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- normalisation

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if np.isnan(x).any():
        raise ValueError("softmax input contains NaN")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (a,), bw)


def softmax_rows(a: Tensor) -> Tensor:
    return softmax(a, axis=-1)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data
    n = x.shape[-1]

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, n)
        return gx, (g2 * xhat.reshape(-1, n)).sum(axis=0), g2.sum(axis=0)

    return make_op(xhat * gd + beta.data, (a, gamma, beta), bw)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean over slots of ``-log softmax(logits)[target]``.

    ``targets`` is an integer index array of shape ``logits.shape[:-1]`` or a
    one-hot / probability array with the same shape as ``logits``. Slots where
    ``mask`` is False are ignored.
    """
    z = logits.data
    V = z.shape[-1]
    if V < 2:
        raise ValueError("cross_entropy needs at least two classes")
    targets = np.asarray(targets)
    if targets.shape == z.shape:
        dist = targets.astype(z.dtype)
    else:
        if targets.shape != z.shape[:-1]:
            raise ValueError(f"targets shape {targets.shape} does not match logits {z.shape}")
        if targets.size and (targets.min() < 0 or targets.max() >= V):
            raise IndexError(f"target index out of range [0, {V})")
        dist = np.zeros_like(z)
        np.put_along_axis(dist, targets[..., None].astype(np.int64), 1.0, axis=-1)
    w = np.ones(z.shape[:-1], dtype=z.dtype) if mask is None else np.asarray(mask, dtype=z.dtype)
    count = w.sum()
    if count == 0:
        raise ValueError("cross_entropy with every slot masked")
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsum
    per_slot = -(dist * logp).sum(axis=-1)
    loss = (per_slot * w).sum() / count
    p = np.exp(logp)

    def bw(g):
        return ((p * dist.sum(axis=-1, keepdims=True) - dist) * (w / count)[..., None] * g,)

    return make_op(np.asarray(loss, dtype=z.dtype), (logits,), bw)


# ---------------------------------------------------------------- checking

def gradcheck(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
              max_entries: int | None = None, rng: np.random.Generator | None = None) -> dict:
    """Compare analytic gradients with central finite differences.

    Returns ``{name_or_index: relative_error}`` where the error is
    ``||analytic - numeric|| / max(||analytic||, ||numeric||)`` over the
    checked entries of each tensor. ``max_entries`` caps the number of
    randomly chosen entries probed per tensor.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    result = {}
    for k, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(len(idx))
        with no_grad():
            for j, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + eps
                fp = float(fn().data)
                flat[i] = old - eps
                fm = float(fn().data)
                flat[i] = old
                num[j] = (fp - fm) / (2 * eps)
        ana = analytic.reshape(-1)[idx]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num))
        err = 0.0 if denom == 0 else float(np.linalg.norm(ana - num) / denom)
        result[p.name or k] = err
    return result


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MTRLCKPT"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays as little-endian fp32.

    Layout: magic(8) | version u32 | count u32 | per tensor:
    name_len u32 | name utf-8 | rank u32 | extents u64 * rank | payload f32 * prod(extents)
    """
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    return out
