"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Operations executed inside an active :class:`Tape` are recorded and can be
differentiated with :meth:`Tape.backward`. Outside a tape the same functions
run as plain numpy code, which is what inference paths use.
"""
from __future__ import annotations

import struct
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF_BIAS = -1e30


class TapeError(RuntimeError):
    pass


class GradientCheckError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: ContextVar["Tape | None"] = ContextVar("rtdlab_active_tape", default=None)


@dataclass
class Tape:
    """Records primitive applications while active; replays them in reverse."""

    nodes: list[_Node] = field(default_factory=list)
    _used: bool = False
    _token: object = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def record(self, out: Tensor, parents: tuple[Tensor, ...], vjp) -> None:
        if self._used:
            raise TapeError("tape already replayed; call reset() before recording again")
        self.nodes.append(_Node(out, parents, vjp))

    def reset(self) -> None:
        self.nodes = []
        self._used = False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(x) into ``x.grad`` for every recorded input."""
        if self._used:
            raise TapeError("backward already ran on this tape; reset() first")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._used = True
        produced = {id(n.out) for n in self.nodes}
        # intermediate grads live here so leaf .grad accumulation stays explicit
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise TapeError(
                        f"gradient shape {pg.shape} does not match operand {parent.data.shape}"
                    )
                key = id(parent)
                if key in produced:
                    grads[key] = grads[key] + pg if key in grads else pg
                else:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        for node in self.nodes:
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in produced and parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    tape = _ACTIVE.get()
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = needs and tape is not None
    if out.requires_grad:
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_bias_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or b.ndim == 0:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ValueError(f"shape mismatch: {a.shape} vs {b.shape} (only trailing bias broadcast)")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    _check_bias_shape(a.data, b.data)
    sa, sb = a.data.shape, b.data.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    return add(a, mul(as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    _check_bias_shape(a.data, b.data)
    ad, bd = a.data, b.data
    return _record(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass; sends an all-zero gradient upstream."""
    return _record(x.data.copy(), (x,), lambda g: (np.zeros_like(g),))


# ---------------------------------------------------------------- shape / linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    if bd.ndim == 2 and ad.ndim > 2:
        # (..., n, k) @ (k, m): one flat gemm instead of a broadcast batch
        flat = ad.reshape(-1, ad.shape[-1])

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = flat.T @ g2 if b.requires_grad else None
            return ga, gb

        return _record((flat @ bd).reshape(ad.shape[:-1] + bd.shape[-1:]), (a, b), vjp)

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(ad @ bd, (a, b), vjp)


def transpose(x: Tensor) -> Tensor:
    return _record(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.data.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` with the bias broadcast over rows."""
    if x.data.ndim < 2:
        raise ValueError(f"affine expects at least 2-D input, got {x.shape}")
    if W.data.ndim != 2 or b.data.shape != (W.data.shape[1],):
        raise ValueError(f"affine parameter shapes W={W.shape} b={b.shape} disagree")
    return add(matmul(x, W), b)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.data.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return mul(sum_(x), 1.0 / n)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in xs]
    ax = axis % datas[0].ndim
    sizes = np.cumsum([d.shape[ax] for d in datas])[:-1]
    return _record(
        np.concatenate(datas, axis=ax), tuple(xs),
        lambda g: tuple(np.split(g, sizes, axis=ax)),
    )


def stack(xs: Sequence[Tensor]) -> Tensor:
    n = len(xs)
    return _record(
        np.stack([t.data for t in xs]), tuple(xs),
        lambda g: tuple(g[i] for i in range(n)),
    )


def diagonal(x: Tensor) -> Tensor:
    n = x.data.shape[0]

    def vjp(g):
        out = np.zeros((n, n))
        out[np.arange(n), np.arange(n)] = g
        return (out,)

    return _record(np.diagonal(x.data).copy(), (x,), vjp)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.data.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(x.data[idx], (x,), vjp)


# ---------------------------------------------------------------- reductions with masks

def softmax(x: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``bias`` is an additive constant mask."""
    z = x.data if bias is None else x.data + bias
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), vjp)


def logsumexp(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """log-sum-exp over the last axis with max subtraction.

    ``mask`` (bool, same shape) marks the entries that take part.
    """
    xd = x.data
    z = xd if mask is None else np.where(mask, xd, -np.inf)
    if mask is not None and not np.all(mask.any(axis=-1)):
        raise ValueError("logsumexp over an empty (fully masked) row")
    m = z.max(axis=-1, keepdims=True)
    # nan/inf inputs propagate to the output so callers can report them
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    w = e / s

    return _record(out, (x,), lambda g: (w * g[..., None],))


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis -2 of ``x`` (..., L, d) counting rows where ``mask`` (..., L) is true."""
    m = mask.astype(np.float64)[..., None]
    cnt = m.sum(axis=-2)
    if np.any(cnt == 0):
        raise ValueError("masked_mean over an empty sequence")
    out = (x.data * m).sum(axis=-2) / cnt
    return _record(out, (x,), lambda g: (m * (g / cnt)[..., None, :],))


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero-norm vector")
    y = x.data / n

    def vjp(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return _record(y, (x,), vjp)


def embed(table: Tensor, positions: Tensor, ids: np.ndarray,
          pseudo: Tensor | None = None, pseudo_pos: np.ndarray | None = None) -> Tensor:
    """Token + position lookup for a padded batch ``ids`` (N, L).

    Row ``n`` whose ``pseudo_pos[n] >= 0`` takes ``pseudo[n]`` instead of a
    table entry at that slot.
    """
    ids = np.asarray(ids, dtype=np.int64)
    N, L = ids.shape
    out = table.data[ids] + positions.data[:L][None]
    has_pseudo = pseudo is not None and pseudo_pos is not None
    if has_pseudo:
        pseudo_pos = np.asarray(pseudo_pos, dtype=np.int64)
        rows = np.nonzero(pseudo_pos >= 0)[0]
        slots = pseudo_pos[rows]
        out[rows, slots] = pseudo.data[rows] + positions.data[slots]
    tshape, pshape = table.data.shape, positions.data.shape

    def vjp(g):
        gw = g
        gp_rows = None
        if has_pseudo:
            gp_rows = np.zeros_like(pseudo.data)
            gp_rows[rows] = g[rows, slots]
            gw = g.copy()
            gw[rows, slots] = 0.0
        gt = np.zeros(tshape)
        np.add.at(gt, ids.reshape(-1), gw.reshape(-1, tshape[1]))
        gpos = np.zeros(pshape)
        gpos[:L] = g.sum(axis=0)
        if has_pseudo:
            return gt, gpos, gp_rows
        return gt, gpos

    parents = (table, positions, pseudo) if has_pseudo else (table, positions)
    return _record(out, parents, vjp)


# ---------------------------------------------------------------- composites

def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of two 1-D vectors; raises on a zero-norm argument."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.data.shape != b.data.shape or a.data.size == 0:
        raise ValueError(f"cosine_similarity needs equal-length vectors, got {a.shape}, {b.shape}")
    if not np.any(a.data) or not np.any(b.data):
        raise ValueError("cosine_similarity of a zero-norm vector is undefined")
    return sum_(mul(l2_normalize(a), l2_normalize(b)))


def softmax_logsumexp(logits: Tensor) -> Tensor:
    logits = as_tensor(logits)
    if logits.data.ndim != 1 or logits.data.size == 0:
        raise ValueError("softmax_logsumexp expects a non-empty vector")
    return logsumexp(logits)


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    worst: tuple[str, int] | None = None


def check_gradients(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-4,
                    tol: float = 1e-4, max_entries: int | None = None,
                    rng: np.random.Generator | None = None,
                    floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` with central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    entries whose true gradient is numerically zero from dominating.
    """
    if not (0 < eps <= 1e-2):
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    again = f()
    if not np.array_equal(loss.data, again.data):
        raise GradientCheckError("f is not deterministic: two forward passes disagree")
    tape.backward(loss)

    worst, worst_at, checked = 0.0, None, 0
    for pi, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            top = np.argsort(-np.abs(analytic.reshape(-1)))[: max_entries // 2]
            rest = rng.choice(flat.size, size=max_entries - top.size, replace=False)
            idx = np.unique(np.concatenate([top, rest]))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            ana = float(analytic.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            if err > worst or worst_at is None:
                worst, worst_at = max(err, worst), (p.name or f"param{pi}", int(i))
    return GradCheckReport(worst, worst < tol, checked, worst_at)


# ---------------------------------------------------------------- binary dump format

MAGIC = b"RTDT"


def dump_tensor(t: Tensor | np.ndarray) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def load_tensor(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one dump starting at ``offset``; returns the tensor and the end offset."""
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError(f"bad tensor magic at offset {offset}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    dims = struct.unpack_from(f"<{rank}Q", buf, offset + 8)
    start = offset + 8 + 8 * rank
    n = int(np.prod(dims)) if rank else 1
    end = start + 8 * n
    if end > len(buf):
        raise ValueError("truncated tensor dump")
    arr = np.frombuffer(buf[start:end], dtype="<f8").reshape(dims).astype(np.float64)
    return Tensor(arr), end
