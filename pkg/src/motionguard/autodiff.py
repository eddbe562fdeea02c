"""Reverse-mode automatic differentiation over dense numpy arrays.

A flat, append-only tape records every primitive operation. Forward values
live on the tape nodes; calling :func:`backward` on a scalar root seeds its
adjoint with 1 and sweeps the tape in reverse, accumulating adjoints into
every node that requires gradients. Graphs are single-use: each optimization
step re-traces from scratch, and the tape can be replayed to audit that the
recorded values are reproducible bit-for-bit.

Two numeric modes exist: float32 for experiments and float64 for
verification (finite-difference checks). The mode is a process-global
setting captured by each tape at construction; tensors of different modes
never share a graph.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class AutodiffError(Exception):
    """Base class for autodiff engine failures."""


class ShapeMismatchError(AutodiffError):
    """Operands have incompatible shapes for the requested primitive."""


class GraphConsumedError(AutodiffError):
    """A backward pass was requested on an already-consumed tape."""


class NonScalarRootError(AutodiffError):
    """backward() was called on a tensor that is not scalar-shaped."""


class DivisionByZeroError(AutodiffError):
    """Exact zero divisor encountered in float64 verification mode."""


_PRECISION = np.float32


def set_precision(mode):
    """Set the global numeric mode: 'float32' or 'float64'."""
    global _PRECISION
    if mode not in ("float32", "float64"):
        raise ValueError(f"unknown precision mode: {mode!r}")
    _PRECISION = np.float32 if mode == "float32" else np.float64


def get_precision():
    return "float32" if _PRECISION is np.float32 else "float64"


class precision:
    """Context manager that temporarily switches the numeric mode."""

    def __init__(self, mode):
        self.mode = mode

    def __enter__(self):
        self.saved = get_precision()
        set_precision(self.mode)
        return self

    def __exit__(self, *exc):
        set_precision(self.saved)
        return False


class DiffTensor:
    """A node in the differentiation graph: value plus lazily-built adjoint."""

    __slots__ = ("values", "_adjoint", "node_id", "requires_grad", "tape")

    def __init__(self, values, node_id, requires_grad, tape):
        self.values = values
        self._adjoint = None
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self):
        return self.values.shape

    @property
    def adjoint(self):
        if self._adjoint is None:
            self._adjoint = np.zeros_like(self.values)
        return self._adjoint

    def accumulate(self, grad):
        if self._adjoint is None:
            self._adjoint = grad.astype(self.values.dtype, copy=True)
        else:
            self._adjoint += grad

    # Convenience arithmetic; scalars (python numbers) are allowed operands.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class OpRecord:
    """One tape entry: enough to re-run forward and to apply the adjoint rule."""

    __slots__ = ("op", "input_ids", "output_id", "params")

    def __init__(self, op, input_ids, output_id, params):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.params = params


class Tape:
    """Flat append-only operation tape; one tape per optimization step."""

    def __init__(self):
        self.dtype = _PRECISION
        self.nodes = []
        self.records = []
        self.consumed = False

    def tensor(self, values, requires_grad=False):
        """Create a leaf tensor owned by this tape."""
        arr = np.asarray(values, dtype=self.dtype)
        t = DiffTensor(arr, len(self.nodes), requires_grad, self)
        self.nodes.append(t)
        return t

    def _emit(self, op, inputs, out_values, params=None, requires_grad=None):
        if requires_grad is None:
            requires_grad = any(t.requires_grad for t in inputs)
        out = DiffTensor(out_values, len(self.nodes), requires_grad, self)
        self.nodes.append(out)
        self.records.append(
            OpRecord(op, tuple(t.node_id for t in inputs), out.node_id, params or {})
        )
        return out

    def reset(self):
        """Clear all adjoints and allow a fresh backward pass."""
        for t in self.nodes:
            t._adjoint = None
        self.consumed = False

    def replay(self):
        """Re-run every record forward and check bit-exact reproduction.

        Returns True when all recomputed node values equal the stored ones.
        """
        for rec in self.records:
            ins = [self.nodes[i].values for i in rec.input_ids]
            ref = self.nodes[rec.output_id].values
            out = _FORWARD[rec.op](ins, rec.params)
            if out.dtype != ref.dtype or out.shape != ref.shape:
                return False
            if not np.array_equal(out, ref):
                return False
        return True


def _tape_of(*tensors):
    for t in tensors:
        if isinstance(t, DiffTensor):
            return t.tape
    raise AutodiffError("no DiffTensor operand")


def _check_binary_shapes(a, b):
    if a.size == 1 or b.size == 1:
        return
    if a.shape != b.shape:
        raise ShapeMismatchError(f"operand shapes {a.shape} vs {b.shape}")


def _unbroadcast(grad, shape):
    # Only scalar-vs-array broadcasting is supported.
    if grad.shape == shape:
        return grad
    return grad.sum().reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

_FORWARD = {}
_BACKWARD = {}


def _register(name, fwd, bwd):
    _FORWARD[name] = fwd
    _BACKWARD[name] = bwd


def _binary(op, a, b):
    tape = _tape_of(a, b)
    if not isinstance(a, DiffTensor):
        a = tape.tensor(a)
    if not isinstance(b, DiffTensor):
        b = tape.tensor(b)
    _check_binary_shapes(a.values, b.values)
    if op == "div" and tape.dtype is np.float64 and np.any(b.values == 0.0):
        raise DivisionByZeroError("exact zero divisor in float64 mode")
    out = _FORWARD[op]([a.values, b.values], {})
    return tape._emit(op, (a, b), out, {})


_register(
    "add",
    lambda ins, p: ins[0] + ins[1],
    lambda ins, g, p: (_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)),
)
_register(
    "sub",
    lambda ins, p: ins[0] - ins[1],
    lambda ins, g, p: (_unbroadcast(g, ins[0].shape), _unbroadcast(-g, ins[1].shape)),
)
_register(
    "mul",
    lambda ins, p: ins[0] * ins[1],
    lambda ins, g, p: (
        _unbroadcast(g * ins[1], ins[0].shape),
        _unbroadcast(g * ins[0], ins[1].shape),
    ),
)
_register(
    "div",
    lambda ins, p: ins[0] / ins[1],
    lambda ins, g, p: (
        _unbroadcast(g / ins[1], ins[0].shape),
        _unbroadcast(-g * ins[0] / (ins[1] * ins[1]), ins[1].shape),
    ),
)


def add(a, b):
    return _binary("add", a, b)


def sub(a, b):
    return _binary("sub", a, b)


def mul(a, b):
    return _binary("mul", a, b)


def div(a, b):
    return _binary("div", a, b)


def _unary(op, a, params=None):
    tape = _tape_of(a)
    out = _FORWARD[op]([a.values], params or {})
    return tape._emit(op, (a,), out, params or {})


# abs adjoint at 0 is 0 (subgradient convention); np.sign implements that.
_register(
    "abs",
    lambda ins, p: np.abs(ins[0]),
    lambda ins, g, p: (g * np.sign(ins[0]),),
)
_register(
    "charbonnier",
    lambda ins, p: np.sqrt(ins[0] * ins[0] + p["kappa"] ** 2) - p["kappa"],
    lambda ins, g, p: (g * ins[0] / np.sqrt(ins[0] * ins[0] + p["kappa"] ** 2),),
)
_register(
    "exp",
    lambda ins, p: np.exp(ins[0]),
    lambda ins, g, p: (g * np.exp(ins[0]),),
)
_register(
    "log",
    lambda ins, p: np.log(ins[0]),
    lambda ins, g, p: (g / ins[0],),
)
_register(
    "relu",
    lambda ins, p: np.maximum(ins[0], 0),
    lambda ins, g, p: (g * (ins[0] > 0),),
)
_register(
    "clamp01",
    lambda ins, p: np.clip(ins[0], 0.0, 1.0),
    lambda ins, g, p: (g * ((ins[0] >= 0.0) & (ins[0] <= 1.0)),),
)


def abs_(a):
    return _unary("abs", a)


def charbonnier_abs(a, kappa=1e-3):
    """Smooth absolute value sqrt(x^2 + kappa^2) - kappa."""
    return _unary("charbonnier", a, {"kappa": float(kappa)})


def exp(a):
    return _unary("exp", a)


def log(a):
    return _unary("log", a)


def relu(a):
    return _unary("relu", a)


def clamp01(a):
    return _unary("clamp01", a)


def elementwise(op_kind, a, b=None):
    """Dispatch by op-kind name; binary kinds take b (tensor or scalar)."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {
        "abs": abs_,
        "charbonnier-abs": charbonnier_abs,
        "exp": exp,
        "relu": relu,
        "clamp01": clamp01,
    }
    if op_kind in binary:
        return binary[op_kind](a, b)
    if op_kind in unary:
        if b is not None:
            raise AutodiffError(f"{op_kind} is unary")
        return unary[op_kind](a)
    raise AutodiffError(f"unknown op-kind: {op_kind!r}")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _reduce_fwd(ins, p):
    a = ins[0]
    if p["kind"] == "sum":
        return np.asarray(a.sum(axis=p["axes"]), dtype=a.dtype)
    return np.asarray(a.mean(axis=p["axes"]), dtype=a.dtype)


def _reduce_bwd(ins, g, p):
    a = ins[0]
    axes = p["axes"]
    if axes is None:
        grad = np.broadcast_to(g, a.shape)
        count = a.size
    else:
        shape = list(a.shape)
        for ax in axes:
            shape[ax] = 1
        grad = np.broadcast_to(g.reshape(shape), a.shape)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    if p["kind"] == "mean":
        grad = grad / count
    return (np.ascontiguousarray(grad),)


_register("reduce", _reduce_fwd, _reduce_bwd)


def reduce(op_kind, a, axes=None):
    if op_kind not in ("sum", "mean"):
        raise AutodiffError(f"unknown reduce kind: {op_kind!r}")
    if axes is not None:
        axes = tuple(ax % a.values.ndim for ax in axes)
        for ax in axes:
            if a.values.shape[ax] == 0:
                raise ShapeMismatchError("empty reduction axis")
    elif a.values.size == 0:
        raise ShapeMismatchError("empty reduction axis")
    return _unary("reduce", a, {"kind": op_kind, "axes": axes})


def sum_(a, axes=None):
    return reduce("sum", a, axes)


def mean(a, axes=None):
    return reduce("mean", a, axes)


# ---------------------------------------------------------------------------
# Shifts and spatial derivatives (replicate boundary)
# ---------------------------------------------------------------------------


def _shift1_fwd(a, axis, d):
    """Sample a at index+d along axis, clamped to the valid range."""
    if d == 0:
        return a.copy()
    n = a.shape[axis]
    idx = [slice(None)] * a.ndim
    edge = [slice(None)] * a.ndim
    if d == 1:
        idx[axis] = slice(1, n)
        edge[axis] = slice(n - 1, n)
        return np.concatenate([a[tuple(idx)], a[tuple(edge)]], axis=axis)
    idx[axis] = slice(0, n - 1)
    edge[axis] = slice(0, 1)
    return np.concatenate([a[tuple(edge)], a[tuple(idx)]], axis=axis)


def _shift1_bwd(g, axis, d):
    """Transpose of _shift1_fwd."""
    if d == 0:
        return g.copy()
    n = g.shape[axis]
    out = np.zeros_like(g)
    dst = [slice(None)] * g.ndim
    src = [slice(None)] * g.ndim
    edge_dst = [slice(None)] * g.ndim
    edge_src = [slice(None)] * g.ndim
    if d == 1:
        # y[i] = x[i+1] for i<n-1; y[n-1] = x[n-1]
        dst[axis] = slice(1, n)
        src[axis] = slice(0, n - 1)
        edge_dst[axis] = slice(n - 1, n)
        edge_src[axis] = slice(n - 1, n)
    else:
        # y[i] = x[i-1] for i>0; y[0] = x[0]
        dst[axis] = slice(0, n - 1)
        src[axis] = slice(1, n)
        edge_dst[axis] = slice(0, 1)
        edge_src[axis] = slice(0, 1)
    out[tuple(dst)] = g[tuple(src)]
    out[tuple(edge_dst)] += g[tuple(edge_src)]
    return out


def _shift2d_fwd(ins, p):
    return _shift1_fwd(_shift1_fwd(ins[0], -2, p["dy"]), -1, p["dx"])


def _shift2d_bwd(ins, g, p):
    return (_shift1_bwd(_shift1_bwd(g, -1, p["dx"]), -2, p["dy"]),)


_register("shift2d", _shift2d_fwd, _shift2d_bwd)


def shift2d(a, dy, dx):
    """y[..., i, j] = a[..., clamp(i+dy), clamp(j+dx)], replicate boundary."""
    if dy not in (-1, 0, 1) or dx not in (-1, 0, 1):
        raise AutodiffError("shift2d supports offsets in {-1, 0, 1}")
    return _unary("shift2d", a, {"dy": dy, "dx": dx})


def spatial_derivatives(a, order, axis):
    """Central first difference or second difference along x (width) or y.

    Operates on the trailing two dimensions; replicate boundary handling.
    """
    if axis not in ("x", "y"):
        raise AutodiffError(f"axis must be 'x' or 'y', got {axis!r}")
    if order not in (1, 2):
        raise AutodiffError(f"order must be 1 or 2, got {order}")
    h, w = a.values.shape[-2], a.values.shape[-1]
    if h < 3 or w < 3:
        raise ShapeMismatchError("spatial_derivatives needs H, W >= 3")
    if axis == "x":
        plus, minus = shift2d(a, 0, 1), shift2d(a, 0, -1)
    else:
        plus, minus = shift2d(a, 1, 0), shift2d(a, -1, 0)
    if order == 1:
        return mul(sub(plus, minus), 0.5)
    return sub(add(plus, minus), mul(a, 2.0))


def neighbor_average(a):
    """Mean of the four axis-aligned neighbors, replicate boundary."""
    up, down = shift2d(a, -1, 0), shift2d(a, 1, 0)
    left, right = shift2d(a, 0, -1), shift2d(a, 0, 1)
    return mul(add(add(up, down), add(left, right)), 0.25)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _conv_windows(x, kh, kw, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_cols(x, kh, kw, stride, padding):
    # im2col: contiguous (n*ho*wo, c*kh*kw) patch matrix for BLAS matmuls
    win = _conv_windows(x, kh, kw, stride, padding)
    n, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * ho * wo, c * kh * kw), (n, ho, wo)


def _conv2d_fwd(ins, p):
    x, k = ins[0], ins[1]
    co, c, kh, kw = k.shape
    cols, (n, ho, wo) = _conv_cols(x, kh, kw, p["stride"], p["padding"])
    # stash the patch matrix so the backward pass skips a second im2col
    p["_cols"] = cols
    p["_dims"] = (n, ho, wo)
    out = (cols @ k.reshape(co, c * kh * kw).T).reshape(n, ho, wo, co)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if len(ins) == 3:
        out = out + ins[2][None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def _conv2d_bwd(ins, g, p):
    x, k = ins[0], ins[1]
    s, pad = p["stride"], p["padding"]
    co, c, kh, kw = k.shape
    if "_cols" in p:
        cols, (n, ho, wo) = p["_cols"], p["_dims"]
    else:
        cols, (n, ho, wo) = _conv_cols(x, kh, kw, s, pad)
    gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
    gk = (gmat.T @ cols).reshape(co, c, kh, kw)
    # (c*kh*kw, n*ho*wo) layout keeps each (di, dj) slice contiguous below
    gcols = (k.reshape(co, c * kh * kw).T @ gmat.T).reshape(c, kh, kw, n, ho, wo)
    h, w = x.shape[2], x.shape[3]
    gxp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            gxp[:, :, di : di + s * ho : s, dj : dj + s * wo : s] += gcols[
                :, di, dj
            ]
    gx = gxp[:, :, pad : pad + h, pad : pad + w].transpose(1, 0, 2, 3)
    grads = (np.ascontiguousarray(gx), gk)
    if len(ins) == 3:
        grads = grads + (g.sum(axis=(0, 2, 3)),)
    return grads


_register("conv2d", _conv2d_fwd, _conv2d_bwd)


def conv2d(x, kernel, stride=1, padding=0, bias=None):
    """2-D cross-correlation; input [Cin,H,W] or [N,Cin,H,W], kernel [Cout,Cin,kh,kw]."""
    tape = _tape_of(x, kernel)
    squeeze = x.values.ndim == 3
    kh, kw = kernel.values.shape[2], kernel.values.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatchError("kernel sides must be odd")
    if stride < 1:
        raise AutodiffError("stride must be >= 1")
    xv = x.values[None] if squeeze else x.values
    h, w = xv.shape[2], xv.shape[3]
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeMismatchError("kernel larger than padded input")
    if xv.shape[1] != kernel.values.shape[1]:
        raise ShapeMismatchError("input channels do not match kernel")
    params = {"stride": int(stride), "padding": int(padding), "squeeze": squeeze}
    if squeeze:
        x = reshape(x, (1,) + x.values.shape)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    vals = [t.values for t in inputs]
    out = tape._emit("conv2d", inputs, _conv2d_fwd(vals, params), params)
    if squeeze:
        out = reshape(out, out.values.shape[1:])
    return out


# ---------------------------------------------------------------------------
# Bilinear sampling / warping
# ---------------------------------------------------------------------------


def _bilinear_parts(coords, h, w):
    x = np.clip(coords[..., 0], 0.0, w - 1.0)
    y = np.clip(coords[..., 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, h - 2).astype(np.int64)
    wx = (x - x0).astype(coords.dtype)
    wy = (y - y0).astype(coords.dtype)
    return x0, y0, wx, wy


def _bilinear_flat(img, coords):
    # channels-last flat view plus per-pixel flat index of the NW corner
    n, c, h, w = img.shape
    x0, y0, wx, wy = _bilinear_parts(coords, h, w)
    imgf = np.ascontiguousarray(img.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    idx = ((np.arange(n)[:, None, None] * h + y0) * w + x0).ravel()
    return imgf, idx, wx.reshape(-1, 1), wy.reshape(-1, 1)


def _bilinear_fwd(ins, p):
    # img (N,C,H,W), coords (N,Hc,Wc,2) with (x, y) in pixel units
    img, coords = ins[0], ins[1]
    n, c, h, w = img.shape
    hc, wc = coords.shape[1], coords.shape[2]
    imgf, idx, wxe, wye = _bilinear_flat(img, coords)
    i00, i01 = imgf[idx], imgf[idx + 1]
    i10, i11 = imgf[idx + w], imgf[idx + w + 1]
    # stash the gather state so the backward pass skips index rebuilds
    p["_flat"] = (idx, wxe, wye, i00, i01, i10, i11)
    out = (1 - wye) * ((1 - wxe) * i00 + wxe * i01) + wye * ((1 - wxe) * i10 + wxe * i11)
    out = out.reshape(n, hc, wc, c)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2), dtype=img.dtype)


def _bilinear_bwd(ins, g, p):
    img, coords = ins[0], ins[1]
    n, c, h, w = img.shape
    hc, wc = coords.shape[1], coords.shape[2]
    if "_flat" in p:
        idx, wxe, wye, i00, i01, i10, i11 = p["_flat"]
    else:
        imgf, idx, wxe, wye = _bilinear_flat(img, coords)
        i00, i01 = imgf[idx], imgf[idx + 1]
        i10, i11 = imgf[idx + w], imgf[idx + w + 1]
    gc = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * hc * wc, c)
    # fused scatter-add: all four corners in one index array, one bincount
    # per channel over pixel indices
    idx4 = np.concatenate([idx, idx + 1, idx + w, idx + w + 1])
    wall = np.concatenate(
        [(1 - wye) * (1 - wxe), (1 - wye) * wxe, wye * (1 - wxe), wye * wxe]
    )
    weighted = wall * np.concatenate([gc, gc, gc, gc])
    gimgf = np.empty((c, n * h * w))
    for ch in range(c):
        gimgf[ch] = np.bincount(idx4, weighted[:, ch], minlength=n * h * w)
    gimg = np.ascontiguousarray(
        gimgf.reshape(c, n, h, w).transpose(1, 0, 2, 3), dtype=img.dtype
    )

    dval_dwx = (1 - wye) * (i01 - i00) + wye * (i11 - i10)
    dval_dwy = (1 - wxe) * (i10 - i00) + wxe * (i11 - i01)
    xin = (coords[..., 0] > 0.0) & (coords[..., 0] < w - 1.0)
    yin = (coords[..., 1] > 0.0) & (coords[..., 1] < h - 1.0)
    gx = (gc * dval_dwx).sum(axis=-1).reshape(n, hc, wc) * xin
    gy = (gc * dval_dwy).sum(axis=-1).reshape(n, hc, wc) * yin
    gcoords = np.stack([gx, gy], axis=-1).astype(coords.dtype)
    return gimg, gcoords


_register("bilinear", _bilinear_fwd, _bilinear_bwd)


def bilinear_sample(image, coords):
    """Sample image [C,H,W] at coords [H,W,2] (x, y) with clamp-to-edge."""
    tape = _tape_of(image, coords)
    if coords.values.shape[-1] != 2:
        raise ShapeMismatchError("coords last dimension must be 2")
    img4 = reshape(image, (1,) + image.values.shape)
    crd4 = reshape(coords, (1,) + coords.values.shape)
    params = {}
    out = tape._emit(
        "bilinear", (img4, crd4), _bilinear_fwd([img4.values, crd4.values], params), params
    )
    return reshape(out, out.values.shape[1:])


def bilinear_sample_batch(images, coords):
    """Batched variant: images [N,C,H,W], coords [N,Hc,Wc,2]."""
    tape = _tape_of(images, coords)
    params = {}
    out = _bilinear_fwd([images.values, coords.values], params)
    return tape._emit("bilinear", (images, coords), out, params)


# ---------------------------------------------------------------------------
# Structural primitives
# ---------------------------------------------------------------------------

_register(
    "reshape",
    lambda ins, p: ins[0].reshape(p["shape"]),
    lambda ins, g, p: (g.reshape(ins[0].shape),),
)


def reshape(a, shape):
    return _unary("reshape", a, {"shape": tuple(shape)})


def _transpose_bwd(ins, g, p):
    inv = np.argsort(p["axes"])
    return (np.ascontiguousarray(np.transpose(g, inv)),)


_register(
    "transpose",
    lambda ins, p: np.ascontiguousarray(np.transpose(ins[0], p["axes"])),
    _transpose_bwd,
)


def transpose(a, axes):
    return _unary("transpose", a, {"axes": tuple(axes)})


def _slice0_bwd(ins, g, p):
    out = np.zeros_like(ins[0])
    out[p["start"] : p["stop"]] = g
    return (out,)


_register(
    "slice0",
    lambda ins, p: ins[0][p["start"] : p["stop"]].copy(),
    _slice0_bwd,
)


def slice0(a, start, stop):
    """Slice along the leading axis; adjoint scatters back into place."""
    return _unary("slice0", a, {"start": int(start), "stop": int(stop)})


def _stack_last_bwd(ins, g, p):
    return (np.ascontiguousarray(g[..., 0]), np.ascontiguousarray(g[..., 1]))


_register(
    "stack_last",
    lambda ins, p: np.stack([ins[0], ins[1]], axis=-1),
    _stack_last_bwd,
)


def stack_last(a, b):
    """Stack two equal-shape tensors along a new trailing axis."""
    tape = _tape_of(a, b)
    if a.values.shape != b.values.shape:
        raise ShapeMismatchError("stack_last operands must match")
    out = np.stack([a.values, b.values], axis=-1)
    return tape._emit("stack_last", (a, b), out, {})


def _select_last_bwd(ins, g, p):
    out = np.zeros_like(ins[0])
    out[..., p["index"]] = g
    return (out,)


_register(
    "select_last",
    lambda ins, p: ins[0][..., p["index"]].copy(),
    _select_last_bwd,
)


def select_last(a, index):
    """Pick one slot of the trailing axis."""
    return _unary("select_last", a, {"index": int(index)})


def _chanw_bwd(ins, g, p):
    w = np.asarray(p["weights"], dtype=ins[0].dtype)
    return (g[..., None] * w,)


_register(
    "channel_weighted_sum",
    lambda ins, p: ins[0] @ np.asarray(p["weights"], dtype=ins[0].dtype),
    _chanw_bwd,
)


def channel_weighted_sum(a, weights):
    """Weighted sum over the trailing channel axis (e.g. luminance)."""
    if a.values.shape[-1] != len(weights):
        raise ShapeMismatchError("weights do not match channel count")
    return _unary("channel_weighted_sum", a, {"weights": tuple(float(w) for w in weights)})


def _bfc_bwd(ins, g, p):
    return (g.sum(axis=(1, 2)),)


_register(
    "broadcast_frame_channel",
    lambda ins, p: np.ascontiguousarray(
        np.broadcast_to(ins[0][:, None, None, :], p["shape"])
    ),
    _bfc_bwd,
)


def broadcast_frame_channel(d, shape):
    """Broadcast per-frame per-channel offsets [T,C] to a clip shape [T,H,W,C]."""
    if d.values.shape != (shape[0], shape[3]):
        raise ShapeMismatchError("offsets must be [T,C]")
    return _unary("broadcast_frame_channel", d, {"shape": tuple(shape)})


def _linear_bwd(ins, g, p):
    x, w = ins[0], ins[1]
    grads = (g @ w.T, np.outer(x, g))
    if len(ins) == 3:
        grads = grads + (g.copy(),)
    return grads


_register(
    "linear",
    lambda ins, p: (ins[0] @ ins[1] + ins[2]) if len(ins) == 3 else ins[0] @ ins[1],
    _linear_bwd,
)


def linear(x, w, bias=None):
    """Affine map: x [F] @ w [F,K] (+ bias [K])."""
    tape = _tape_of(x, w)
    if x.values.shape[-1] != w.values.shape[0]:
        raise ShapeMismatchError("linear dimensions do not match")
    inputs = (x, w) if bias is None else (x, w, bias)
    out = _FORWARD["linear"]([t.values for t in inputs], {})
    return tape._emit("linear", inputs, out, {})


def _gather_bwd(ins, g, p):
    out = np.zeros_like(ins[0])
    out.reshape(-1)[p["index"]] = g
    return (out,)


_register(
    "gather_scalar",
    lambda ins, p: ins[0].reshape(-1)[p["index"]].copy().reshape(()),
    _gather_bwd,
)


def gather_scalar(a, index):
    """Extract one element (flat index) as a scalar tensor."""
    return _unary("gather_scalar", a, {"index": int(index)})


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(root):
    """Accumulate d(root)/d(node) into every requires-grad node of the tape."""
    if not isinstance(root, DiffTensor):
        raise AutodiffError("backward root must be a DiffTensor")
    if root.values.size != 1:
        raise NonScalarRootError(f"root has shape {root.shape}")
    tape = root.tape
    if tape.consumed:
        raise GraphConsumedError("tape already consumed by a backward pass")
    tape.consumed = True
    root._adjoint = np.ones_like(root.values)
    for rec in reversed(tape.records):
        out = tape.nodes[rec.output_id]
        if not out.requires_grad or out._adjoint is None:
            continue
        ins = [tape.nodes[i].values for i in rec.input_ids]
        grads = _BACKWARD[rec.op](ins, out._adjoint, rec.params)
        for node_id, grad in zip(rec.input_ids, grads):
            node = tape.nodes[node_id]
            if node.requires_grad and grad is not None:
                node.accumulate(grad)
