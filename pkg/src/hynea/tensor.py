"""Dense float64 N-D arrays with reverse-mode automatic differentiation.

Everything downstream (autoencoder, denoiser, control branch, SUTs, losses)
is built from the ops in this module, so the whole generation chain can be
differentiated end to end. Gradients are recorded on an explicit
:class:`Tape`; long chains (the unrolled denoising loop) use
:func:`checkpoint` to drop interior activations and recompute them during
the backward sweep.

Design constraints worth knowing:

* float64 only; 32-bit drifts too much over the unrolled chain for
  finite-difference validation to stay meaningful.
* broadcasting follows numpy's trailing-dimension alignment; an extent of 1
  stretches, and gradients are summed back over stretched dimensions.
* convolutions are stride-1 with odd kernels and ``same``/``valid`` padding,
  which is all the architectures here need.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "tensor",
    "checkpoint",
    "backward",
    "grad_check",
    "no_grad",
    "set_debug_checks",
    "save_tensor",
    "load_tensor",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class DomainError(ValueError):
    """Raised when values lie outside an operation's mathematical domain."""


_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle post-op NaN/Inf assertions (used by the test suite)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def _recording_paused() -> bool:
    return getattr(_STATE, "paused", 0) > 0


class no_grad:
    """Context manager that suspends tape recording (forward values only)."""

    def __enter__(self):
        _STATE.paused = getattr(_STATE, "paused", 0) + 1
        return self

    def __exit__(self, *exc):
        _STATE.paused -= 1
        return False


class Node:
    """One executed op: inputs, a backward rule, and the produced tensor."""

    __slots__ = ("inputs", "out", "bwd")

    def __init__(self, inputs: Sequence["Tensor"], out: "Tensor", bwd):
        self.inputs = tuple(inputs)
        self.out = out
        self.bwd = bwd  # (grad_out: ndarray) -> tuple of per-input ndarray|None


class CheckpointNode:
    """Tape entry whose interior ops are recomputed during backward."""

    __slots__ = ("inputs", "out", "fn")

    def __init__(self, inputs: Sequence["Tensor"], out: "Tensor", fn):
        self.inputs = tuple(inputs)
        self.out = out
        self.fn = fn


class Tape:
    """Ordered record of executed ops for one backward pass.

    A tape and the tensors recorded on it are confined to a single thread;
    independent tapes may run concurrently. ``clear`` drops every node and
    with it all activations the backward pass would have needed.
    """

    def __init__(self):
        self.nodes: list = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def clear(self) -> None:
        self.nodes.clear()

    @property
    def checkpoint_marks(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if isinstance(n, CheckpointNode)]


class Tensor:
    """Dense float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "node", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; every operator defers to the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def sum(self, axes=None, keepdims: bool = False):
        return reduce(self, "sum", axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return reduce(self, "mean", axes, keepdims)

    def var(self, axes=None, keepdims: bool = False):
        return reduce(self, "var", axes, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Create a tensor (alias kept for call-site readability)."""
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(out: Tensor, inputs: Sequence[Tensor], bwd) -> Tensor:
    """Attach the result to the active tape when gradients are wanted."""
    if _DEBUG_CHECKS and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if tape is not None and needs and not _recording_paused():
        node = Node(inputs, out, bwd)
        out.node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the dimensions that were stretched to produce it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: zero denominator")
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _finish(out, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0

    def bwd(g):
        return (g * mask,)

    return _finish(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # evaluated branch-wise so neither tail overflows
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(s)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _finish(out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = Tensor(e)

    def bwd(g):
        return (g * e,)

    return _finish(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log: non-positive input")
    out = Tensor(np.log(x.data))

    def bwd(g):
        return (g / x.data,)

    return _finish(out, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t)

    def bwd(g):
        return (g * (1.0 - t * t),)

    return _finish(out, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root; the subgradient at 0 is taken as 0.

    The zero choice keeps the image-distance term finite when the generated
    image still equals the origin (the first evaluation of every adaptation
    run), where the true derivative is unbounded.
    """
    if np.any(x.data < 0.0):
        raise DomainError("sqrt: negative input")
    r = np.sqrt(x.data)
    out = Tensor(r)

    def bwd(g):
        return (np.where(x.data > 0.0, g / (2.0 * np.maximum(r, np.finfo(np.float64).tiny)), 0.0),)

    return _finish(out, (x,), bwd)


def clip01(x: Tensor) -> Tensor:
    """Clamp to [0, 1]; gradient passes only inside the admissible range."""
    out = Tensor(np.clip(x.data, 0.0, 1.0))
    mask = (x.data >= 0.0) & (x.data <= 1.0)

    def bwd(g):
        return (g * mask,)

    return _finish(out, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra & convolutions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _finish(out, (a, b), bwd)


def _conv_check(xs, ws, nd, padding):
    if padding not in ("same", "valid"):
        raise ShapeError(f"conv: unknown padding mode {padding!r}")
    k = ws[-1]
    if any(kk != k for kk in ws[2:]):
        raise ShapeError(f"conv: kernel must be square, got {ws}")
    if k % 2 == 0:
        raise ShapeError(f"conv: kernel extent must be odd, got {k}")
    if xs[-nd - 1] != ws[1]:
        raise ShapeError(f"conv: input channels {xs[-nd - 1]} != kernel channels {ws[1]}")
    if padding == "valid" and any(xs[i] < k for i in range(-nd, 0)):
        raise ShapeError(f"conv: kernel {k} larger than input {xs} under valid padding")
    return k


def _im2col2d(x: np.ndarray, k: int) -> np.ndarray:
    """(N,C,H,W) -> (N, C*k*k, H'*W') view-copy for stride-1 windows."""
    n, c, h, w = x.shape
    oh, ow = h - k + 1, w - k + 1
    s = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, shape=(n, c, k, k, oh, ow), strides=(s[0], s[1], s[2], s[3], s[2], s[3])
    )
    return win.reshape(n, c * k * k, oh * ow)


def conv2d(x: Tensor, w: Tensor, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation.

    ``x`` is (C_in,H,W) or batched (N,C_in,H,W); ``w`` is (C_out,C_in,k,k)
    with odd k. ``same`` zero-pads to preserve the spatial extent.
    """
    squeeze = x.ndim == 3
    xs = x.shape if not squeeze else (1,) + x.shape
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape} / {w.shape}")
    k = _conv_check(xs, w.shape, 2, padding)
    xd = x.data.reshape(xs)
    pad = (k - 1) // 2 if padding == "same" else 0
    if pad:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = xd
    n, c, hp, wp = xp.shape
    oh, ow = hp - k + 1, wp - k + 1
    cols = _im2col2d(xp, k)  # (N, CKK, P)
    wmat = w.data.reshape(w.shape[0], -1)  # (C_out, CKK)
    res = np.matmul(wmat, cols).reshape(n, w.shape[0], oh, ow)
    out = Tensor(res[0] if squeeze else res)

    def bwd(g):
        gd = g.reshape(n, w.shape[0], oh, ow)
        gmat = gd.reshape(n, w.shape[0], oh * ow)
        gw = np.einsum("nop,nkp->ok", gmat, cols).reshape(w.shape)
        gcols = np.matmul(wmat.T, gmat)  # (N, CKK, P)
        gxp = np.zeros_like(xp)
        gc = gcols.reshape(n, c, k, k, oh, ow)
        for di in range(k):
            for dj in range(k):
                gxp[:, :, di : di + oh, dj : dj + ow] += gc[:, :, di, dj]
        gx = gxp[:, :, pad : pad + xs[2], pad : pad + xs[3]] if pad else gxp
        return (gx[0] if squeeze else gx), gw

    return _finish(out, (x, w), bwd)


def conv1d(x: Tensor, w: Tensor, padding: str = "same") -> Tensor:
    """1-D analogue of :func:`conv2d`; ``x`` is (C_in,L) or (N,C_in,L)."""
    squeeze = x.ndim == 2
    xs = x.shape if not squeeze else (1,) + x.shape
    if x.ndim not in (2, 3) or w.ndim != 3:
        raise ShapeError(f"conv1d: bad ranks {x.shape} / {w.shape}")
    k = _conv_check(xs, w.shape, 1, padding)
    xd = x.data.reshape(xs)
    pad = (k - 1) // 2 if padding == "same" else 0
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad))) if pad else xd
    n, c, lp = xp.shape
    ol = lp - k + 1
    s = xp.strides
    win = np.lib.stride_tricks.as_strided(xp, shape=(n, c, k, ol), strides=(s[0], s[1], s[2], s[2]))
    cols = win.reshape(n, c * k, ol)
    wmat = w.data.reshape(w.shape[0], -1)
    res = np.matmul(wmat, cols)  # (N, C_out, L')
    out = Tensor(res[0] if squeeze else res)

    def bwd(g):
        gd = g.reshape(n, w.shape[0], ol)
        gw = np.einsum("nop,nkp->ok", gd, cols).reshape(w.shape)
        gcols = np.matmul(wmat.T, gd).reshape(n, c, k, ol)
        gxp = np.zeros_like(xp)
        for di in range(k):
            gxp[:, :, di : di + ol] += gcols[:, :, di]
        gx = gxp[:, :, pad : pad + xs[2]] if pad else gxp
        return (gx[0] if squeeze else gx), gw

    return _finish(out, (x, w), bwd)


# ---------------------------------------------------------------------------
# reductions & stable exponentials


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % ndim for a in axes)
    if len(set(axes)) != len(axes) or any(a >= ndim for a in axes):
        raise ShapeError(f"reduce: invalid axes {axes} for rank {ndim}")
    return axes


def reduce(x: Tensor, kind: str, axes=None, keepdims: bool = False) -> Tensor:
    """Sum/mean/population-variance reduction over `axes`."""
    if kind not in ("sum", "mean", "var"):
        raise ShapeError(f"reduce: unknown kind {kind!r}")
    ax = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    if count == 0:
        raise ShapeError("reduce: empty reduction extent")

    if kind == "sum":
        out = Tensor(x.data.sum(axis=ax, keepdims=keepdims))

        def bwd(g):
            gg = g if keepdims else np.expand_dims(g, ax)
            return (np.broadcast_to(gg, x.shape).copy(),)

    elif kind == "mean":
        out = Tensor(x.data.mean(axis=ax, keepdims=keepdims))

        def bwd(g):
            gg = g if keepdims else np.expand_dims(g, ax)
            return (np.broadcast_to(gg / count, x.shape).copy(),)

    else:  # population variance
        mean = x.data.mean(axis=ax, keepdims=True)
        centered = x.data - mean
        out = Tensor((centered * centered).mean(axis=ax, keepdims=keepdims))

        def bwd(g):
            gg = g if keepdims else np.expand_dims(g, ax)
            return (2.0 / count * centered * gg,)

    return _finish(out, (x,), bwd)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp along `axis` (shift-invariant, no overflow)."""
    ax = axis % x.ndim
    m = np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=ax, keepdims=True)
    res = m + np.log(s)
    out = Tensor(res if keepdims else np.squeeze(res, axis=ax))
    soft = e / s

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, ax)
        return (gg * soft,)

    return _finish(out, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along `axis`; rows sum to one."""
    ax = axis % x.ndim
    m = np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=ax, keepdims=True)
    out = Tensor(s)

    def bwd(g):
        dot = (g * s).sum(axis=ax, keepdims=True)
        return ((g - dot) * s,)

    return _finish(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        return (g.reshape(x.shape),)

    return _finish(out, (x,), bwd)


def transpose(x: Tensor, axes=None) -> Tensor:
    perm = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    out = Tensor(np.transpose(x.data, perm))
    inv = np.argsort(perm)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _finish(out, (x,), bwd)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows along axis 0 by integer index (backward scatter-adds)."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(x.data[idx])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _finish(out, (x,), bwd)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 stride-2 average pooling over the trailing two dimensions."""
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial extents must be even, got {x.shape}")
    lead = x.shape[:-2]
    v = x.data.reshape(lead + (h // 2, 2, w // 2, 2))
    out = Tensor(v.mean(axis=(-3, -1)))

    def bwd(g):
        gg = g.reshape(lead + (h // 2, 1, w // 2, 1)) / 4.0
        return (np.broadcast_to(gg, lead + (h // 2, 2, w // 2, 2)).reshape(x.shape).copy(),)

    return _finish(out, (x,), bwd)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the trailing two dimensions."""
    h, w = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1))

    def bwd(g):
        return (g.reshape(lead + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return _finish(out, (x,), bwd)


# ---------------------------------------------------------------------------
# backward, checkpointing, finite differences


def checkpoint(fn: Callable[..., Tensor], *inputs: Tensor) -> Tensor:
    """Run ``fn(*inputs)`` without saving interior activations.

    The forward result is computed immediately, but only a single tape entry
    is recorded; during :func:`backward` the segment is replayed once on a
    private tape to rebuild its interior nodes. ``fn`` must be pure: given
    the same inputs it must execute the identical op sequence, which also
    guarantees bit-identical gradients versus non-checkpointed execution.
    """
    tape = active_tape()
    if tape is None or _recording_paused() or not any(t.requires_grad for t in inputs):
        return fn(*inputs)
    with no_grad():
        out = fn(*inputs)
    out = Tensor(out.data)
    out.requires_grad = True
    node = CheckpointNode(inputs, out, fn)
    out.node = node
    tape.nodes.append(node)
    return out


def _sweep(nodes: list, grads: dict) -> None:
    """Propagate grads through `nodes` in reverse creation order."""
    for node in reversed(nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        if isinstance(node, CheckpointNode):
            sub = Tape()
            # the saved inputs are re-presented as fresh leaves so the replay
            # records a self-contained graph
            proxies = [Tensor(t.data, requires_grad=t.requires_grad) for t in node.inputs]
            with sub:
                replay_out = node.fn(*proxies)
            sub_grads = {id(replay_out): g}
            _sweep(sub.nodes, sub_grads)
            for proxy, original in zip(proxies, node.inputs):
                if not original.requires_grad:
                    continue
                pg = sub_grads.get(id(proxy))
                if pg is None:
                    continue
                acc = grads.get(id(original))
                grads[id(original)] = pg if acc is None else acc + pg
            continue
        input_grads = node.bwd(g)
        for t, ig in zip(node.inputs, input_grads):
            if ig is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = ig if acc is None else acc + ig


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every requires_grad leaf on the tape.

    Returns a map from ``id(tensor)`` to gradient array and also stores each
    leaf's gradient on ``tensor.grad``. Raises if `loss` is not a scalar
    recorded on the tape (e.g. a detached tensor).
    """
    if tape is None:
        tape = active_tape()
    if tape is None:
        raise ValueError("backward: no active tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None or loss.node not in _id_set(tape):
        raise ValueError("backward: loss tensor is detached from the given tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    _sweep(tape.nodes, grads)

    leaves: dict[int, np.ndarray] = {}
    seen: set[int] = set()
    for node in tape.nodes:
        for t in node.inputs:
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.requires_grad and t.node is None and id(t) in grads:
                t.grad = grads[id(t)]
                leaves[id(t)] = grads[id(t)]
    return leaves


def _id_set(tape: Tape):
    # identity membership (Node instances are unhashable-by-value on purpose)
    return {n for n in tape.nodes}


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued. The error for coordinate i is
    ``|analytic_i - numeric_i| / max(1, |analytic_i|)``.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
        if out.data.size != 1:
            raise ShapeError("grad_check: f must be scalar-valued")
        backward(out, tape)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    flat = x.data.copy().reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - h
        lo = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * h)

    a = analytic.reshape(-1)
    err = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------------------
# on-disk tensor format

_MAGIC = b"HYNT"
_VERSION = 1


def save_tensor(path, arr: np.ndarray) -> None:
    """Write one array: magic, version u32, rank u32, extents u64 LE, f64 LE data."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(arr.astype("<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a HYNT tensor file")
        version, rank = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported HYNT version {version}")
        shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
        if data.size != n:
            raise ValueError(f"{path}: truncated HYNT payload")
    return data.reshape(shape)
