"""Dense float tensors with reverse-mode autodiff over a closed op set.

The op set is exactly what the tracker's network and losses need: dilated
convolution, depthwise cross-correlation, bilinear sampling, a handful of
activations and elementwise arithmetic, and masked reductions.  There is no
general tape for arbitrary user ops; every backward here is hand-derived and
checked against central finite differences (see `grad_check`).

A `Tensor` is both the value and the graph node: `data` holds the array,
`grad` accumulates the adjoint, and `_parents`/`_backward` record how the
value was produced.  Graphs are acyclic by construction, so CPython's
refcounting frees them as soon as the root goes out of scope.

Numeric policy: float64 by default (float32 selectable for speed runs),
every op checks its output for NaN/Inf and raises instead of propagating,
and reductions use numpy's deterministic accumulation so a given build is
bit-reproducible run to run.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created tensors."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise UsageError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A leaf sharing this tensor's values, cut off from the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{tag})"

    # Operator sugar; scalars go through scale/shift, tensors through the ops.
    def __add__(self, other):
        return shift(self, other) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return shift(self, -other) if _is_number(other) else sub(self, other)

    def __rsub__(self, other):
        if _is_number(other):
            return shift(neg(self), other)
        return sub(other, self)

    def __mul__(self, other):
        return scale(self, other) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_number(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtypes {a.data.dtype} and {b.data.dtype} differ")


def _make(data: np.ndarray, parents: Sequence[Tensor], bw: Callable) -> Tensor:
    """Wrap an op result, recording the graph edge only when grads can flow."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bw
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    out = a.data + b.data
    _check_finite(out, "add")

    def bw(g):
        _acc(a, g)
        _acc(b, g)

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    out = a.data - b.data
    _check_finite(out, "sub")

    def bw(g):
        _acc(a, g)
        _acc(b, -g)

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    out = a.data * b.data
    _check_finite(out, "mul")

    def bw(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _make(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    _check_finite(out, "div")

    def bw(g):
        _acc(a, g / b.data)
        _acc(b, -g * out / b.data)

    return _make(out, (a, b), bw)


def scale(a: Tensor, s) -> Tensor:
    s = float(s)
    out = a.data * s
    _check_finite(out, "scale")

    def bw(g):
        _acc(a, g * s)

    return _make(out, (a,), bw)


def shift(a: Tensor, s) -> Tensor:
    s = float(s)
    out = a.data + s
    _check_finite(out, "shift")

    def bw(g):
        _acc(a, g)

    return _make(out, (a,), bw)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")

    def bw(g):
        _acc(a, g * out)

    return _make(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    _check_finite(out, "log")

    def bw(g):
        _acc(a, g / a.data)

    return _make(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bw(g):
        _acc(a, g * (a.data > 0.0))

    return _make(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # Saturation underflows past the representable range; pin the output
    # inside the open interval so the (0,1) contract stays total.
    fi = np.finfo(x.dtype)
    np.clip(out, fi.tiny, 1.0 - fi.eps, out=out)

    def bw(g):
        _acc(a, g * out * (1.0 - out))

    return _make(out, (a,), bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min.  Ties route the gradient to the first argument."""
    _same_shape(a, b, "minimum")
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def bw(g):
        _acc(a, g * take_a)
        _acc(b, g * ~take_a)

    return _make(out, (a, b), bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max.  Ties route the gradient to the first argument."""
    _same_shape(a, b, "maximum")
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def bw(g):
        _acc(a, g * take_a)
        _acc(b, g * ~take_a)

    return _make(out, (a, b), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the value was kept."""
    if not lo <= hi:
        raise UsageError(f"clamp: lo {lo} exceeds hi {hi}")
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _acc(a, g * inside)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# Reductions and structure


def reduce_sum(a: Tensor) -> Tensor:
    out = a.data.sum()

    def bw(g):
        _acc(a, np.full_like(a.data, float(g)))

    return _make(out, (a,), bw)


def reduce_mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ShapeError("reduce_mean of an empty tensor")
    out = a.data.mean()

    def bw(g):
        _acc(a, np.full_like(a.data, float(g) / n))

    return _make(out, (a,), bw)


def channel(a: Tensor, idx: int) -> Tensor:
    """Select channel `idx` from a (C, H, W) tensor."""
    if a.data.ndim != 3:
        raise ShapeError(f"channel: expected rank 3, got shape {a.data.shape}")
    if not 0 <= idx < a.data.shape[0]:
        raise UsageError(f"channel index {idx} out of range for {a.data.shape}")
    out = a.data[idx].copy()

    def bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[idx] += g

    return _make(out, (a,), bw)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("stack of zero tensors")
    for p in parts[1:]:
        _same_shape(parts[0], p, "stack")
    out = np.stack([p.data for p in parts])

    def bw(g):
        for i, p in enumerate(parts):
            _acc(p, g[i])

    return _make(out, tuple(parts), bw)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (C,) to a (C, H, W) map."""
    if x.data.ndim != 3 or b.data.ndim != 1 or b.data.shape[0] != x.data.shape[0]:
        raise ShapeError(f"bias_add: got {x.data.shape} and {b.data.shape}")
    out = x.data + b.data[:, None, None]
    _check_finite(out, "bias_add")

    def bw(g):
        _acc(x, g)
        _acc(b, g.sum(axis=(1, 2)))

    return _make(out, (x, b), bw)


# ---------------------------------------------------------------------------
# Convolution and correlation


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    dilation: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
    stride: int = 1,
) -> Tensor:
    """2-D convolution of a (C, H, W) map with (Cout, C, kh, kw) weights.

    `dilation` is (rows, cols): the first component spaces taps along H,
    the second along W, so axis-asymmetric kernels are expressible.
    Padding is explicit zeros; output height is
    (H + 2*ph - (dh*(kh-1)+1)) // stride + 1 and analogously for width.
    """
    dh, dw = int(dilation[0]), int(dilation[1])
    ph, pw = int(padding[0]), int(padding[1])
    st = int(stride)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: got input {x.data.shape}, weight {w.data.shape}")
    C, H, W = x.data.shape
    Cout, Cin, kh, kw = w.data.shape
    if Cin != C:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} must be odd")
    if dh < 1 or dw < 1 or st < 1 or ph < 0 or pw < 0:
        raise UsageError("conv2d: dilation/stride must be >= 1 and padding >= 0")
    eh = dh * (kh - 1) + 1
    ew = dw * (kw - 1) + 1
    Ho = (H + 2 * ph - eh) // st + 1
    Wo = (W + 2 * pw - ew) // st + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(
            f"conv2d: kernel footprint {eh}x{ew} exceeds padded input "
            f"{H + 2 * ph}x{W + 2 * pw}"
        )

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    n = Ho * Wo
    out = np.zeros((Cout, n), dtype=x.data.dtype)
    # Tap-major accumulation: matches the aligned sampler's loop order so the
    # zero-offset degeneration is reproduced term for term.
    for p in range(kh):
        for q in range(kw):
            sl = xp[:, p * dh : p * dh + (Ho - 1) * st + 1 : st,
                    q * dw : q * dw + (Wo - 1) * st + 1 : st]
            out += w.data[:, :, p, q] @ sl.reshape(C, n)
    out = out.reshape(Cout, Ho, Wo)
    if b is not None:
        if b.data.shape != (Cout,):
            raise ShapeError(f"conv2d: bias {b.data.shape} does not match {Cout} outputs")
        out = out + b.data[:, None, None]
    _check_finite(out, "conv2d")

    def bw(g):
        gflat = g.reshape(Cout, n)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for p in range(kh):
                for q in range(kw):
                    sl = xp[:, p * dh : p * dh + (Ho - 1) * st + 1 : st,
                            q * dw : q * dw + (Wo - 1) * st + 1 : st]
                    gw[:, :, p, q] = gflat @ sl.reshape(C, n).T
            _acc(w, gw)
        if x.requires_grad:
            gxp = np.zeros((C, H + 2 * ph, W + 2 * pw), dtype=x.data.dtype)
            for p in range(kh):
                for q in range(kw):
                    contrib = (w.data[:, :, p, q].T @ gflat).reshape(C, Ho, Wo)
                    gxp[:, p * dh : p * dh + (Ho - 1) * st + 1 : st,
                        q * dw : q * dw + (Wo - 1) * st + 1 : st] += contrib
            _acc(x, gxp[:, ph : ph + H, pw : pw + W])
        if b is not None and b.requires_grad:
            _acc(b, g.sum(axis=(1, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def depthwise_xcorr(search: Tensor, kernel: Tensor) -> Tensor:
    """Valid cross-correlation of each search channel with its kernel channel.

    Accumulates tap by tap in row-major kernel order, which keeps the result
    identical to a naive per-element loop in exact arithmetic.
    """
    if search.data.ndim != 3 or kernel.data.ndim != 3:
        raise ShapeError(
            f"depthwise_xcorr: got {search.data.shape} and {kernel.data.shape}"
        )
    C, Hs, Ws = search.data.shape
    Ck, Hk, Wk = kernel.data.shape
    if C != Ck:
        raise ShapeError(f"depthwise_xcorr: channel mismatch {C} vs {Ck}")
    if Hk > Hs or Wk > Ws:
        raise ShapeError(
            f"depthwise_xcorr: kernel {Hk}x{Wk} larger than search {Hs}x{Ws}"
        )
    Ho = Hs - Hk + 1
    Wo = Ws - Wk + 1
    out = np.zeros((C, Ho, Wo), dtype=search.data.dtype)
    for p in range(Hk):
        for q in range(Wk):
            out += search.data[:, p : p + Ho, q : q + Wo] * kernel.data[:, p, q, None, None]
    _check_finite(out, "depthwise_xcorr")

    def bw(g):
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for p in range(Hk):
                for q in range(Wk):
                    gk[:, p, q] = (search.data[:, p : p + Ho, q : q + Wo] * g).sum(axis=(1, 2))
            _acc(kernel, gk)
        if search.requires_grad:
            gs = np.zeros_like(search.data)
            for p in range(Hk):
                for q in range(Wk):
                    gs[:, p : p + Ho, q : q + Wo] += kernel.data[:, p, q, None, None] * g
            _acc(search, gs)

    return _make(out, (search, kernel), bw)


# ---------------------------------------------------------------------------
# Bilinear sampling

# Neighbor corners in (dy, dx) order; weights follow the same order.
_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _bilinear_plan(hw: tuple[int, int], pos: np.ndarray):
    """Precompute neighbor indices and weights for positions (N, 2) as (y, x).

    Out-of-range neighbors get weight zero, the zero-padding convention that
    keeps sampling continuous across the image border.
    """
    H, W = hw
    y = pos[:, 0]
    x = pos[:, 1]
    y0 = np.floor(y)
    x0 = np.floor(x)
    ty = y - y0
    tx = x - x0
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)
    wy = (1.0 - ty, ty)
    wx = (1.0 - tx, tx)
    plan = []
    for dy, dx in _CORNERS:
        yi = y0i + dy
        xi = x0i + dx
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        wgt = wy[dy] * wx[dx] * valid
        plan.append((np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1), wgt, valid))
    return plan, (tx, ty)


def _bilinear_gather(arr: np.ndarray, plan) -> np.ndarray:
    # arr: (C, H, W) -> (C, N)
    out = None
    for yi, xi, wgt, _ in plan:
        term = arr[:, yi, xi] * wgt
        out = term if out is None else out + term
    return out


def _bilinear_scatter(garr: np.ndarray, plan, gvals: np.ndarray) -> None:
    # gvals: (C, N) adjoint of the gathered values, accumulated into garr.
    C, H, W = garr.shape
    flat = garr.reshape(C, H * W)
    rows = np.arange(C)[:, None]
    for yi, xi, wgt, valid in plan:
        lin = (yi[valid] * W + xi[valid])[None, :]
        np.add.at(flat, (rows, lin), (gvals * wgt)[:, valid])


def _bilinear_pos_grad(arr: np.ndarray, plan, frac, gvals: np.ndarray):
    """Adjoints of the sample positions (y then x), shape (N,) each."""
    tx, ty = frac
    vals = [arr[:, yi, xi] * valid for yi, xi, _, valid in plan]
    v00, v01, v10, v11 = vals
    dy = (v10 - v00) * (1.0 - tx) + (v11 - v01) * tx
    dx = (v01 - v00) * (1.0 - ty) + (v11 - v10) * ty
    gy = (gvals * dy).sum(axis=0)
    gx = (gvals * dx).sum(axis=0)
    return gy, gx


def bilinear_sample(feature: Tensor, positions: np.ndarray) -> Tensor:
    """Sample a (C, H, W) map at float positions (N, 2) given as (y, x).

    Returns (C, N).  Positions are data, not graph nodes; gradients flow to
    the feature map only.
    """
    if feature.data.ndim != 3:
        raise ShapeError(f"bilinear_sample: expected (C,H,W), got {feature.data.shape}")
    pos = np.asarray(positions, dtype=feature.data.dtype)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: positions must be (N,2), got {pos.shape}")
    if not np.all(np.isfinite(pos)):
        raise UsageError("bilinear_sample: non-finite positions")
    C, H, W = feature.data.shape
    plan, _ = _bilinear_plan((H, W), pos)
    out = _bilinear_gather(feature.data, plan)
    _check_finite(out, "bilinear_sample")

    def bw(g):
        if feature.requires_grad:
            gf = np.zeros_like(feature.data)
            _bilinear_scatter(gf, plan, g)
            _acc(feature, gf)

    return _make(out, (feature,), bw)


# ---------------------------------------------------------------------------
# Backward pass


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root, visiting each node once."""
    if root.data.ndim != 0:
        raise UsageError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        raise UsageError("backward root does not require grad")

    topo: list[Tensor] = []
    seen = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    worst_param: str | None = None
    worst_index: tuple | None = None

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        where = f" at {self.worst_param}{list(self.worst_index or ())}" if self.worst_param else ""
        return f"grad_check {verdict}: max_rel_err={self.max_rel_err:.3e} (tol={self.tol:.0e}){where}"


def _rel_err(a: float, f: float) -> float:
    # Absolute comparison when both are tiny, else relative to the larger.
    denom = max(abs(a), abs(f))
    if denom < 1e-8:
        return abs(a - f)
    return abs(a - f) / denom


def _fd_probe(build, params, flat: np.ndarray, i: int, step: float,
              analytic: float) -> float:
    keep = flat[i]
    flat[i] = keep + step
    hi = float(build(params).data)
    flat[i] = keep - step
    lo = float(build(params).data)
    flat[i] = keep
    return _rel_err(analytic, (hi - lo) / (2.0 * step))


def grad_check(
    build: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    tol: float = 1e-4,
    step: float = 1e-5,
    refine: Sequence[float] = (),
) -> GradCheckReport:
    """Compare analytic gradients of `build(params)` to central differences.

    `build` must be a pure function of the parameter values; it is called
    once for the analytic pass and twice per parameter element for the
    finite-difference probe.  Checks every element of every parameter.

    `refine` lists fallback steps tried, in order, for elements that miss
    the tolerance at `step`.  A central difference whose secant straddles a
    relu-style kink is wrong by O(1) but the straddle window shrinks with
    the step, so a kink artifact vanishes under refinement while a genuine
    gradient error converges to a fixed nonzero value.
    """
    for t in params.values():
        if not t.requires_grad:
            raise UsageError("grad_check: every checked param must require grad")
        t.zero_grad()

    root = build(params)
    if root.data.ndim != 0:
        raise UsageError("grad_check: build must return a scalar")
    backward(root)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }

    worst = 0.0
    worst_param = None
    worst_index: tuple | None = None
    for name, t in params.items():
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            a = float(analytic[name].reshape(-1)[i])
            err = _fd_probe(build, params, flat, i, step, a)
            if err > tol:
                for h in refine:
                    err = min(err, _fd_probe(build, params, flat, i, h, a))
                    if err <= tol:
                        break
            if err > worst:
                worst = err
                worst_param = name
                worst_index = np.unravel_index(i, t.data.shape)
    return GradCheckReport(
        max_rel_err=worst,
        passed=worst <= tol,
        tol=tol,
        worst_param=worst_param,
        worst_index=worst_index,
    )
