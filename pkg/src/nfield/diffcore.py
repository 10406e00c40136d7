"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A `Value` wraps an ndarray plus a backward recipe; calling `backward()` on a
scalar output visits each node exactly once in reverse topological order and
accumulates exact gradients into every `Value` leaf, including both operands
of `matmul` (required because generated weight matrices are intermediate
nodes, not leaves).

Ownership rule for backward implementations: the array handed to
`_accum(parent, g)` must either be freshly allocated or alias memory that no
*other* parent receives; views of the consumed upstream gradient are fine.

A computation graph is confined to one thread; distinct graphs over shared
read-only parameter data may run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Value",
    "NumericalError",
    "CheckpointError",
    "add",
    "sub",
    "mul",
    "matmul",
    "linear",
    "transpose",
    "reshape",
    "concat",
    "narrow",
    "reduce_sum",
    "reduce_mean",
    "relu",
    "silu",
    "layer_norm",
    "mse",
    "conv2d",
    "conv1d",
    "avg_pool2d",
    "AdamState",
    "adam_step",
    "LrSchedule",
    "lr_at",
    "grad_check",
    "GradCheckReport",
    "save_checkpoint",
    "load_checkpoint",
]


class NumericalError(RuntimeError):
    """Non-finite value where a finite one is required."""


class CheckpointError(ValueError):
    """Malformed checkpoint file; `.code` is machine readable."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class Value:
    """Node in the computation graph: data, accumulated grad, backward recipe."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Value(shape={self.shape})"


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Value) else np.asarray(x, dtype=np.float64)


def _accum(node, g):
    # safe to add in place: every buffer reaching here is either fresh or a
    # view of an upstream gradient that has already been consumed
    if node.grad is None:
        node.grad = g
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shapes_error(op: str, *shapes) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


def add(a, b) -> Value:
    da, db = _data(a), _data(b)
    try:
        out_data = da + db
    except ValueError:
        raise _shapes_error("add", da.shape, db.shape) from None

    def bwd(out):
        g = out.grad
        if isinstance(a, Value):
            _accum(a, _unbroadcast(g, da.shape) if g.shape != da.shape else g)
        if isinstance(b, Value):
            # copy so that two parents never share one buffer
            _accum(b, _unbroadcast(g, db.shape) if g.shape != db.shape else g.copy())

    return Value(out_data, tuple(p for p in (a, b) if isinstance(p, Value)), bwd)


def sub(a, b) -> Value:
    da, db = _data(a), _data(b)
    try:
        out_data = da - db
    except ValueError:
        raise _shapes_error("sub", da.shape, db.shape) from None

    def bwd(out):
        g = out.grad
        if isinstance(a, Value):
            _accum(a, _unbroadcast(g, da.shape) if g.shape != da.shape else g)
        if isinstance(b, Value):
            _accum(b, _unbroadcast(-g, db.shape))

    return Value(out_data, tuple(p for p in (a, b) if isinstance(p, Value)), bwd)


def mul(a, b) -> Value:
    da, db = _data(a), _data(b)
    try:
        out_data = da * db
    except ValueError:
        raise _shapes_error("mul", da.shape, db.shape) from None

    def bwd(out):
        g = out.grad
        if isinstance(a, Value):
            _accum(a, _unbroadcast(g * db, da.shape))
        if isinstance(b, Value):
            _accum(b, _unbroadcast(g * da, db.shape))

    return Value(out_data, tuple(p for p in (a, b) if isinstance(p, Value)), bwd)


def matmul(a, b) -> Value:
    """Matrix product; operands may be 2D or batched 3D, both differentiable."""
    da, db = _data(a), _data(b)
    try:
        out_data = np.matmul(da, db)
    except ValueError:
        raise _shapes_error("matmul", da.shape, db.shape) from None

    def bwd(out):
        g = out.grad
        if isinstance(a, Value):
            ga = np.matmul(g, np.swapaxes(db, -1, -2))
            _accum(a, _unbroadcast(ga, da.shape))
        if isinstance(b, Value):
            gb = np.matmul(np.swapaxes(da, -1, -2), g)
            _accum(b, _unbroadcast(gb, db.shape))

    return Value(out_data, tuple(p for p in (a, b) if isinstance(p, Value)), bwd)


def linear(x, w, b=None) -> Value:
    """x[..., in] -> x @ w.T + b with weight w[out, in]."""
    out = matmul(x, transpose(w))
    return out if b is None else add(out, b)


def transpose(v, axes=None) -> Value:
    dv = _data(v)
    if axes is None:
        axes = tuple(reversed(range(dv.ndim)))
    inv = tuple(np.argsort(axes))
    out_data = dv.transpose(axes)

    def bwd(out):
        _accum(v, out.grad.transpose(inv))

    return Value(out_data, (v,) if isinstance(v, Value) else (), bwd)


def reshape(v, shape) -> Value:
    dv = _data(v)
    out_data = dv.reshape(shape)

    def bwd(out):
        _accum(v, out.grad.reshape(dv.shape))

    return Value(out_data, (v,) if isinstance(v, Value) else (), bwd)


def concat(vs: Sequence, axis: int = 0) -> Value:
    datas = [_data(v) for v in vs]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(out):
        for v, lo, hi in zip(vs, offsets[:-1], offsets[1:]):
            if isinstance(v, Value):
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                _accum(v, out.grad[tuple(idx)])

    return Value(out_data, tuple(v for v in vs if isinstance(v, Value)), bwd)


def narrow(v, axis: int, start: int, length: int) -> Value:
    dv = _data(v)
    idx = [slice(None)] * dv.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = dv[idx]

    def bwd(out):
        g = np.zeros_like(dv)
        g[idx] = out.grad
        _accum(v, g)

    return Value(out_data, (v,) if isinstance(v, Value) else (), bwd)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(v, axis=None, keepdims=False) -> Value:
    dv = _data(v)
    ax = _norm_axis(axis, dv.ndim)
    out_data = dv.sum(axis=ax, keepdims=keepdims)

    def bwd(out):
        g = out.grad
        if not keepdims and ax is not None:
            g = np.expand_dims(g, ax)
        _accum(v, np.broadcast_to(g, dv.shape).copy())

    return Value(out_data, (v,) if isinstance(v, Value) else (), bwd)


def reduce_mean(v, axis=None, keepdims=False) -> Value:
    dv = _data(v)
    ax = _norm_axis(axis, dv.ndim)
    out_data = dv.mean(axis=ax, keepdims=keepdims)
    denom = dv.size if ax is None else int(np.prod([dv.shape[a] for a in ax]))

    def bwd(out):
        g = out.grad
        if not keepdims and ax is not None:
            g = np.expand_dims(g, ax)
        _accum(v, np.broadcast_to(g, dv.shape) / denom)

    return Value(out_data, (v,) if isinstance(v, Value) else (), bwd)


def relu(v) -> Value:
    dv = _data(v)
    out_data = np.maximum(dv, 0.0)

    def bwd(out):
        # subgradient at 0 is defined as 0
        _accum(v, out.grad * (dv > 0.0))

    return Value(out_data, (v,) if isinstance(v, Value) else (), bwd)


def silu(v) -> Value:
    dv = _data(v)
    sig = 1.0 / (1.0 + np.exp(-dv))
    out_data = dv * sig

    def bwd(out):
        _accum(v, out.grad * (sig * (1.0 + dv * (1.0 - sig))))

    return Value(out_data, (v,) if isinstance(v, Value) else (), bwd)


def layer_norm(v, gain, bias, eps: float = 1e-5) -> Value:
    """Normalize over the last axis, then apply learnable scale and shift."""
    dv = _data(v)
    dg, db = _data(gain), _data(bias)
    if dg.shape != dv.shape[-1:] or db.shape != dv.shape[-1:]:
        raise _shapes_error("layer_norm", dv.shape, dg.shape, db.shape)
    mu = dv.mean(axis=-1, keepdims=True)
    xc = dv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out_data = y * dg + db
    lead = tuple(range(dv.ndim - 1))

    def bwd(out):
        g = out.grad
        if isinstance(gain, Value):
            _accum(gain, (g * y).sum(axis=lead))
        if isinstance(bias, Value):
            _accum(bias, g.sum(axis=lead))
        if isinstance(v, Value):
            dy = g * dg
            m1 = dy.mean(axis=-1, keepdims=True)
            m2 = (dy * y).mean(axis=-1, keepdims=True)
            _accum(v, inv * (dy - m1 - y * m2))

    parents = tuple(p for p in (v, gain, bias) if isinstance(p, Value))
    return Value(out_data, parents, bwd)


def mse(pred, target) -> Value:
    """Mean squared error over all elements; scalar output."""
    dp, dt = _data(pred), _data(target)
    if dp.shape != dt.shape:
        raise _shapes_error("mse", dp.shape, dt.shape)
    diff = dp - dt
    out_data = np.array((diff * diff).mean())

    def bwd(out):
        g = out.grad * (2.0 / diff.size) * diff
        if isinstance(pred, Value):
            _accum(pred, g)
        if isinstance(target, Value):
            _accum(target, -g)

    parents = tuple(p for p in (pred, target) if isinstance(p, Value))
    return Value(out_data, parents, bwd)


# ---------------------------------------------------------------------------
# convolutions (im2col) and pooling
# ---------------------------------------------------------------------------


def _conv_geometry(n: int, k: int, stride: int) -> tuple[int, int]:
    pad = k // 2
    return pad, (n + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1) -> Value:
    """2D convolution, NCHW, odd square kernel, 'same' padding, stride 1 or 2."""
    dx, dw = _data(x), _data(w)
    if dx.ndim != 4 or dw.ndim != 4 or dx.shape[1] != dw.shape[1]:
        raise _shapes_error("conv2d", dx.shape, dw.shape)
    B, C, H, W = dx.shape
    Cout, _, kh, kw = dw.shape
    ph, Ho = _conv_geometry(H, kh, stride)
    pw, Wo = _conv_geometry(W, kw, stride)
    xp = np.pad(dx, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((B, C, kh * kw, Ho * Wo))
    for di in range(kh):
        for dj in range(kw):
            patch = xp[
                :, :, di : di + (Ho - 1) * stride + 1 : stride,
                dj : dj + (Wo - 1) * stride + 1 : stride,
            ]
            cols[:, :, di * kw + dj, :] = patch.reshape(B, C, Ho * Wo)
    cols = cols.reshape(B, C * kh * kw, Ho * Wo)
    wm = dw.reshape(Cout, C * kh * kw)
    out_flat = np.matmul(wm, cols)
    if b is not None:
        out_flat = out_flat + _data(b)[:, None]
    out_data = out_flat.reshape(B, Cout, Ho, Wo)

    def bwd(out):
        g = out.grad.reshape(B, Cout, Ho * Wo)
        if isinstance(b, Value):
            _accum(b, g.sum(axis=(0, 2)))
        if isinstance(w, Value):
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, gw.reshape(dw.shape))
        if isinstance(x, Value):
            gcols = np.matmul(wm.T, g).reshape(B, C, kh * kw, Ho * Wo)
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[
                        :, :, di : di + (Ho - 1) * stride + 1 : stride,
                        dj : dj + (Wo - 1) * stride + 1 : stride,
                    ] += gcols[:, :, di * kw + dj, :].reshape(B, C, Ho, Wo)
            _accum(x, gxp[:, :, ph : ph + H, pw : pw + W])

    parents = tuple(p for p in (x, w, b) if isinstance(p, Value))
    return Value(out_data, parents, bwd)


def conv1d(x, w, b=None) -> Value:
    """1D convolution over the last axis, NCL, odd kernel, 'same' padding."""
    dx, dw = _data(x), _data(w)
    if dx.ndim != 3 or dw.ndim != 3 or dx.shape[1] != dw.shape[1]:
        raise _shapes_error("conv1d", dx.shape, dw.shape)
    B, C, L = dx.shape
    Cout, _, k = dw.shape
    p, Lo = _conv_geometry(L, k, 1)
    xp = np.pad(dx, ((0, 0), (0, 0), (p, p)))
    cols = np.empty((B, C, k, Lo))
    for d in range(k):
        cols[:, :, d, :] = xp[:, :, d : d + Lo]
    cols = cols.reshape(B, C * k, Lo)
    wm = dw.reshape(Cout, C * k)
    out_data = np.matmul(wm, cols)
    if b is not None:
        out_data = out_data + _data(b)[:, None]

    def bwd(out):
        g = out.grad
        if isinstance(b, Value):
            _accum(b, g.sum(axis=(0, 2)))
        if isinstance(w, Value):
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, gw.reshape(dw.shape))
        if isinstance(x, Value):
            gcols = np.matmul(wm.T, g).reshape(B, C, k, Lo)
            gxp = np.zeros_like(xp)
            for d in range(k):
                gxp[:, :, d : d + Lo] += gcols[:, :, d, :]
            _accum(x, gxp[:, :, p : p + L])

    parents = tuple(p for p in (x, w, b) if isinstance(p, Value))
    return Value(out_data, parents, bwd)


def avg_pool2d(x, factor: int) -> Value:
    """Non-overlapping mean pooling by an integer factor (NCHW)."""
    dx = _data(x)
    B, C, H, W = dx.shape
    if H % factor or W % factor:
        raise _shapes_error(f"avg_pool2d(factor={factor})", dx.shape)
    Ho, Wo = H // factor, W // factor
    out_data = dx.reshape(B, C, Ho, factor, Wo, factor).mean(axis=(3, 5))

    def bwd(out):
        g = out.grad / (factor * factor)
        g = np.broadcast_to(
            g[:, :, :, None, :, None], (B, C, Ho, factor, Wo, factor)
        ).reshape(B, C, H, W)
        _accum(x, g.copy())

    return Value(out_data, (x,) if isinstance(x, Value) else (), bwd)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments; lr may be reassigned between steps by a schedule."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Value], lr: float = 1e-4,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        st = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        return st


def adam_step(params: Mapping[str, Value], grads: Mapping[str, np.ndarray],
              state: AdamState) -> None:
    """Bias-corrected Adam update, in place on param data."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    scale = state.lr / c1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter '{name}'")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        p.data -= scale * m / denom


@dataclass(frozen=True)
class LrSchedule:
    """Step schedule: halve the rate at each milestone epoch."""

    base_lr: float = 1e-4
    milestones: tuple[int, ...] = (60, 96, 108, 114)
    factor: float = 0.5

    def __post_init__(self):
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    hits = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_lr * schedule.factor**hits


# ---------------------------------------------------------------------------
# finite-difference gradient audit
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    n_checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_err <= tol


@dataclass
class GradCheckReport:
    entries: list
    tol: float
    h: float

    @property
    def ok(self) -> bool:
        return all(e.ok(self.tol) for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for e in self.entries:
            status = "ok" if e.ok(self.tol) else "FAIL"
            out.append(
                f"{status:4s} {e.name:32s} max_rel_err={e.max_rel_err:.3e} "
                f"({e.n_checked} elements)"
            )
        return out


def grad_check(
    f: Callable[[dict], Value],
    inputs: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar f against central differences.

    `f` receives a dict name -> Value and must return a scalar Value. For each
    input, up to `max_elements` entries (seeded choice) are perturbed.
    """
    leaves = {k: Value(np.array(v, dtype=np.float64)) for k, v in inputs.items()}
    out = f(leaves)
    out.backward()
    rng = np.random.default_rng(seed)
    entries = []
    for name, leaf in leaves.items():
        n = leaf.data.size
        if max_elements is not None and n > max_elements:
            idxs = rng.choice(n, size=max_elements, replace=False)
        else:
            idxs = np.arange(n)
        analytic = np.zeros(leaf.data.size) if leaf.grad is None else leaf.grad.ravel()
        worst = 0.0
        for idx in idxs:
            arrays = {k: v.copy() for k, v in inputs.items()}
            flat = arrays[name].reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = float(f({k: Value(v) for k, v in arrays.items()}).data)
            flat[idx] = orig - h
            f_minus = float(f({k: Value(v) for k, v in arrays.items()}).data)
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            worst = max(worst, rel)
        entries.append(GradCheckEntry(name=name, max_rel_err=worst, n_checked=len(idxs)))
    return GradCheckReport(entries=entries, tol=tol, h=h)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = "NFCKPT"
CKPT_VERSION = 1


def save_checkpoint(params: Mapping[str, "Value | np.ndarray"], path: str | Path) -> None:
    """Write (name, shape, float64 LE payload) records in mapping order."""
    with open(path, "wb") as fh:
        fh.write(f"{CKPT_MAGIC} {CKPT_VERSION}\n".encode("ascii"))
        fh.write(f"count={len(params)}\n".encode("ascii"))
        for name, p in params.items():
            data = np.asarray(p.data if isinstance(p, Value) else p, dtype=np.float64)
            if any(c.isspace() for c in name):
                raise CheckpointError("bad_name", f"whitespace in parameter name {name!r}")
            dims = " ".join(str(d) for d in data.shape)
            fh.write(f"{name} {data.ndim} {dims}".rstrip().encode("ascii") + b"\n")
            fh.write(data.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint; returns name -> array preserving file order."""
    with open(path, "rb") as fh:
        raw = fh.read()

    def next_line(pos):
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError("bad_header", f"truncated checkpoint {path}")
        return raw[pos:nl].decode("ascii"), nl + 1

    line, pos = next_line(0)
    parts = line.split()
    if len(parts) != 2 or parts[0] != CKPT_MAGIC:
        raise CheckpointError("bad_magic", f"not an {CKPT_MAGIC} file: {path}")
    if parts[1] != str(CKPT_VERSION):
        raise CheckpointError("bad_version", f"unsupported version {parts[1]}")
    line, pos = next_line(pos)
    if not line.startswith("count="):
        raise CheckpointError("bad_header", f"missing count in {path}")
    count = int(line.split("=", 1)[1])
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        line, pos = next_line(pos)
        fields = line.split()
        if len(fields) < 2:
            raise CheckpointError("bad_header", f"malformed record header {line!r}")
        name = fields[0]
        ndim = int(fields[1])
        if len(fields) != 2 + ndim:
            raise CheckpointError("bad_header", f"malformed shape in {line!r}")
        shape = tuple(int(d) for d in fields[2:])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        payload = raw[pos : pos + nbytes]
        if len(payload) != nbytes:
            raise CheckpointError("shape_mismatch", f"truncated payload for '{name}'")
        arr = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if not np.isfinite(arr).all():
            raise CheckpointError("non_finite", f"non-finite payload for '{name}'")
        out[name] = arr
        pos += nbytes
    return out
