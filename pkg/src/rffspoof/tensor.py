"""A small reverse-mode autodiff core over float64 numpy arrays.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded in order; :func:`backward` walks the tape in reverse, visiting
each node once. Inputs are never mutated. The active tape lives in a context
variable, so each thread works on its own tape.

Also here: SGD and Adam steps over ``{name: array}`` parameter dicts, and the
``SPL1`` checkpoint format::

    b"SPL1"
    repeat per tensor:
        u32 name length, name (utf-8)
        u32 rank, rank x u64 dims
        float64 little-endian data, C order
    u32 CRC32 of every preceding byte

All integers are little-endian.
"""
from __future__ import annotations

import contextvars
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import CrcError, DataError, NumericError, ValidationError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("rffspoof_tape", default=None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None   # tape that produced this tensor, None for leaves

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Append-only record of operations, in execution order."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.used = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable):
        out._tape = self
        self.nodes.append((out, parents, backward_fn))

    def reset(self):
        self.nodes.clear()
        self.used = False

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad and feeds ``loss``."""
    if loss.data.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape:
        raise ValidationError("loss is not on this tape (detached graph)")
    if tape.used:
        raise ValidationError("backward already run on this tape; call tape.reset() first")
    tape.used = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgrads = fn(g)
        for p, pg in zip(parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if p._tape is None:
                leaves[key] = p
    for key, leaf in leaves.items():
        leaf.grad = grads[key]


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite output")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        tape.record(out, parents, fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _shape_error(op: str, *shapes) -> ValidationError:
    return ValidationError(f"{op}: incompatible shapes " + ", ".join(str(s) for s in shapes))


# --------------------------------------------------------------------------
# forward ops


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for x (n, i), w (i, o), b (o,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise _shape_error("dense", x.shape, w.shape)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise _shape_error("dense", x.shape, w.shape, b.shape)
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def fn(g):
        grads = [g @ wd.T, xd.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, fn, "dense")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]          # (B, C, Ho, Wo, kh, kw)
    bsz, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x: Tensor, k: Tensor, stride: int = 1, b: Tensor | None = None) -> Tensor:
    """Valid-mode cross-correlation. x (B, C, H, W), k (F, C, kh, kw), b (F,)."""
    x, k = _as_tensor(x), _as_tensor(k)
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1] or stride < 1:
        raise _shape_error("conv2d", x.shape, k.shape)
    bsz, c, h, w = x.shape
    f, _, kh, kw = k.shape
    if kh > h or kw > w:
        raise _shape_error("conv2d", x.shape, k.shape)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (f,):
            raise _shape_error("conv2d", x.shape, k.shape, b.shape)
    cols, ho, wo = _im2col(x.data, kh, kw, stride)
    kmat = k.data.reshape(f, -1)
    out = cols @ kmat.T                        # the matmul kernel: (B*Ho*Wo, F)
    if b is not None:
        out = out + b.data
    out = out.reshape(bsz, ho, wo, f).transpose(0, 3, 1, 2)

    def fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dk = (g2.T @ cols).reshape(k.shape)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(bsz, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2)
            dcols = np.ascontiguousarray(dcols)    # (kh, kw, B, C, Ho, Wo)
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
        grads = [dx, dk]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, k) if b is None else (x, k, b)
    return _result(np.ascontiguousarray(out), parents, fn, "conv2d")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: [g * mask], "relu")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, over the last two axes (odd edges cropped)."""
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise _shape_error("maxpool2", x.shape)
    bsz, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x.data[:, :, :2 * h2, :2 * w2].reshape(bsz, c, h2, 2, w2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        onehot = np.zeros((bsz, c, h2, w2, 4))
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        d = onehot.reshape(bsz, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, 2 * h2, 2 * w2)
        dx = np.zeros_like(x.data)
        dx[:, :, :2 * h2, :2 * w2] = d
        return [dx]

    return _result(out, (x,), fn, "maxpool2")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.data.size
        return _result(np.array(x.data.mean()), (x,), lambda g: [np.full(x.shape, g / n)], "mean")
    n = x.shape[axis]

    def fn(g):
        return [np.broadcast_to(np.expand_dims(g, axis), x.shape) / n]

    return _result(x.data.mean(axis=axis), (x,), fn, "mean")


def concat(x: Tensor, y: Tensor, axis: int = -1) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    ax = axis % x.ndim if x.ndim else 0
    if x.ndim != y.ndim or any(a != b for i, (a, b) in enumerate(zip(x.shape, y.shape)) if i != ax):
        raise _shape_error("concat", x.shape, y.shape)
    split = x.shape[ax]

    def fn(g):
        return np.split(g, [split], axis=ax)

    return _result(np.concatenate([x.data, y.data], axis=ax), (x, y), fn, "concat")


def sq_euclidean_rows(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared distances ``D[i, j] = ||a_i - b_j||^2``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise _shape_error("sq_euclidean_rows", a.shape, b.shape)
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def fn(g):
        gd = 2.0 * g[:, :, None] * diff
        return [gd.sum(axis=1), -gd.sum(axis=0)]

    return _result(out, (a, b), fn, "sq_euclidean_rows")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise _shape_error("softmax_cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValidationError("softmax_cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def fn(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return [g * p / n]

    return _result(np.array(loss), (logits,), fn, "softmax_cross_entropy")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", x.shape, tuple(shape)) from None
    return _result(out, (x,), lambda g: [g.reshape(x.shape)], "reshape")


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: [g * c], "scale")


def add(x: Tensor, y: Tensor) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise _shape_error("add", x.shape, y.shape)
    return _result(x.data + y.data, (x, y), lambda g: [g, g], "add")


def group_mean(x: Tensor, groups: Sequence[Sequence[int]]) -> Tensor:
    """Row means over each index group: (n, d) -> (len(groups), d)."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise _shape_error("group_mean", x.shape)
    groups = [np.asarray(gi, dtype=np.int64) for gi in groups]
    if any(len(gi) == 0 for gi in groups):
        raise ValidationError("group_mean: empty group")
    out = np.stack([x.data[gi].mean(axis=0) for gi in groups])

    def fn(g):
        dx = np.zeros_like(x.data)
        for row, gi in enumerate(groups):
            np.add.at(dx, gi, g[row] / len(gi))
        return [dx]

    return _result(out, (x,), fn, "group_mean")


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a vector (d,) as ``n`` rows (n, d)."""
    v = _as_tensor(v)
    if v.ndim != 1:
        raise _shape_error("tile_rows", v.shape)
    return _result(np.tile(v.data, (n, 1)), (v,), lambda g: [g.sum(axis=0)], "tile_rows")


OPS = {
    "dense": dense, "conv2d": conv2d, "relu": relu, "maxpool2": maxpool2, "mean": mean,
    "concat": concat, "sq_euclidean_rows": sq_euclidean_rows,
    "softmax_cross_entropy": softmax_cross_entropy, "reshape": reshape, "scale": scale,
    "add": add, "group_mean": group_mean, "tile_rows": tile_rows,
}


# --------------------------------------------------------------------------
# gradients of plain-array functions

Params = Mapping[str, np.ndarray]


def value_and_grad(fn: Callable[[dict[str, Tensor]], Tensor], params: Params) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``fn`` on leaf tensors wrapping ``params``; return loss and grads.

    Parameters that do not influence the loss get zero gradients.
    """
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    with Tape() as tape:
        loss = fn(leaves)
    if loss._tape is tape:
        backward(tape, loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return loss.item(), grads


# --------------------------------------------------------------------------
# optimisers


def _check_shapes(params: Params, grads: Params):
    if params.keys() != grads.keys():
        raise ValidationError(f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))}")
    for k in params:
        if np.shape(params[k]) != np.shape(grads[k]):
            raise ValidationError(f"shape mismatch for {k}: {np.shape(params[k])} vs {np.shape(grads[k])}")


def sgd_step(params: Params, grads: Params, lr: float) -> dict[str, np.ndarray]:
    _check_shapes(params, grads)
    return {k: params[k] - lr * grads[k] for k in params}


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Params, grads: Params, lr: float) -> dict[str, np.ndarray]:
    """Bias-corrected Adam; advances ``state`` in place and returns new params."""
    _check_shapes(params, grads)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    out = {}
    for k in params:
        g = grads[k]
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[k] = m
        state.v[k] = v
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        out[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"SPL1"


def encode_checkpoint(params: Params) -> bytes:
    buf = bytearray(CHECKPOINT_MAGIC)
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8", order="C")   # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(buf))
    return bytes(buf)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise DataError("not an SPL1 checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CrcError("checkpoint CRC mismatch")
    out = {}
    pos = 4
    try:
        while pos < len(body):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"truncated or malformed checkpoint: {exc}") from None
    return out


def save_checkpoint(path: str | Path, params: Params) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
