"""Differentiable primitives: arithmetic, convolutions, pooling, sampling.

Forward passes are plain numpy. When a Tape is active and gradients can
flow, each op records a vector-Jacobian closure. Convolution input
gradients are computed as flipped-kernel convolutions (with zero dilation
for strided cases) so no scatter-add is needed on the hot path.
"""

from __future__ import annotations

import math

import numpy as np

from .core import Tensor, active_tape

ACTIVATION_KINDS = ("relu", "silu", "tanh", "sigmoid")


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _maybe_record(out: Tensor, inputs, vjp_builder) -> Tensor:
    out.requires_grad = any(i.requires_grad for i in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, vjp_builder())
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def vjp():
        return lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return _maybe_record(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def vjp():
        return lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    return _maybe_record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def vjp():
        ad, bd = a.data, b.data
        return lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape))
    return _maybe_record(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)

    def vjp():
        return lambda g: (-g,)
    return _maybe_record(out, (a,), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)

    def vjp():
        return lambda g: (g * c,)
    return _maybe_record(out, (a,), vjp)


def absval(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))

    def vjp():
        s = np.sign(a.data)
        return lambda g: (g * s,)
    return _maybe_record(out, (a,), vjp)


def rsqrt(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / np.sqrt(a.data)
    out = Tensor(y)

    def vjp():
        return lambda g: (g * (-0.5 * y * y * y),)
    return _maybe_record(out, (a,), vjp)


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * a.data)

    def vjp():
        ad = a.data
        return lambda g: (g * (2.0 * ad),)
    return _maybe_record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))

    def vjp():
        orig = a.shape
        return lambda g: (g.reshape(orig),)
    return _maybe_record(out, (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = Tensor(np.broadcast_to(a.data, shape).copy())

    def vjp():
        orig = a.shape
        return lambda g: (_unbroadcast(g, orig),)
    return _maybe_record(out, (a,), vjp)


def concat(tensors, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))

    def vjp():
        sizes = [t.shape[axis] for t in ts]
        splits = np.cumsum(sizes)[:-1]
        return lambda g: tuple(np.split(g, splits, axis=axis))
    return _maybe_record(out, tuple(ts), vjp)


def tsum(a, axes=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def vjp():
        shape = a.shape

        def back(g):
            if axes is not None and not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape).copy(),)
        return back
    return _maybe_record(out, (a,), vjp)


def mean(a, axes=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))

    def vjp():
        shape = a.shape
        if axes is None:
            n = a.size
        else:
            ax = (axes,) if isinstance(axes, int) else axes
            n = math.prod(shape[i] for i in ax)

        def back(g):
            if axes is not None and not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g / n, shape).copy(),)
        return back
    return _maybe_record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# activations


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def vjp():
        m = (a.data > 0).astype(a.dtype)
        return lambda g: (g * m,)
    return _maybe_record(out, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)

    def vjp():
        return lambda g: (g * (y * (1.0 - y)),)
    return _maybe_record(out, (a,), vjp)


def tanh_(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def vjp():
        return lambda g: (g * (1.0 - y * y),)
    return _maybe_record(out, (a,), vjp)


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * s)

    def vjp():
        d = s * (1.0 + a.data * (1.0 - s))
        return lambda g: (g * d,)
    return _maybe_record(out, (a,), vjp)


def activation(a, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "silu":
        return silu(a)
    if kind == "tanh":
        return tanh_(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation kind {kind!r}; expected one of {ACTIVATION_KINDS}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2D operands, got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def vjp():
        ad, bd = a.data, b.data
        return lambda g: (g @ bd.T, ad.T @ g)
    return _maybe_record(out, (a, b), vjp)


def linear(x, weight, bias) -> Tensor:
    """Affine map of row vectors: [N, F_in] x [F_out, F_in] + [F_out]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
    out = Tensor(x.data @ weight.data.T + bias.data)

    def vjp():
        xd, wd = x.data, weight.data
        need_x = x.requires_grad

        def back(g):
            return (g @ wd if need_x else None, g.T @ xd, g.sum(axis=0))
        return back
    return _maybe_record(out, (x, weight, bias), vjp)


# ---------------------------------------------------------------------------
# convolutions

def _split_batch(x: np.ndarray, spatial: int):
    """Normalize input to [N, C, *spatial]; return (array, had_batch)."""
    if x.ndim == spatial + 1:
        return x[None], False
    if x.ndim == spatial + 2:
        return x, True
    raise ValueError(f"expected {spatial + 1}D or {spatial + 2}D input, got shape {x.shape}")


def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded extent {size + 2 * padding}")
    if span % stride != 0:
        raise ValueError(
            f"non-integral output extent: (size {size} + 2*pad {padding} - k {k}) "
            f"not divisible by stride {stride}")
    return span // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int, nd: int):
    """Patch matrix [N*prod(out), k^nd * Cin] in (offsets, channel) order.

    Works channels-last internally: with channels innermost, each window
    gathers contiguous runs, which is several times faster than the
    channels-first layout at these sizes.
    """
    n = x.shape[0]
    xt = np.ascontiguousarray(np.moveaxis(x, 1, -1))    # [N, *S, C]
    if padding:
        pad = ((0, 0),) + ((padding, padding),) * nd + ((0, 0),)
        xt = np.pad(xt, pad)
    out_sp = tuple((xt.shape[1 + i] - k) // stride + 1 for i in range(nd))
    win = np.lib.stride_tricks.sliding_window_view(xt, (k,) * nd,
                                                   axis=tuple(range(1, 1 + nd)))
    if stride > 1:
        sl = (slice(None),) + (slice(None, None, stride),) * nd
        win = win[sl]
    # [N, *out, C, *k] -> [N, *out, *k, C]
    perm = tuple(range(1 + nd)) + tuple(range(2 + nd, 2 + 2 * nd)) + (1 + nd,)
    cols = win.transpose(perm).reshape(n * math.prod(out_sp), -1)
    return cols, out_sp


def _kernel_cl(w: np.ndarray) -> np.ndarray:
    """Kernel as [Cout, k^nd * Cin] matching _im2col's column order."""
    nd = w.ndim - 2
    perm = (0,) + tuple(range(2, 2 + nd)) + (1,)
    return np.ascontiguousarray(w.transpose(perm)).reshape(w.shape[0], -1)


def _corr_nd(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Strided cross-correlation of [N, Cin, *S] with [Cout, Cin, *k]."""
    nd = w.ndim - 2
    n = x.shape[0]
    cout = w.shape[0]
    cols, out_sp = _im2col(x, w.shape[2], stride, padding, nd)
    out = cols @ _kernel_cl(w).T
    out = out.reshape((n,) + out_sp + (cout,))
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, padding: int,
                     in_spatial: tuple[int, ...]) -> np.ndarray:
    """Gradient w.r.t. conv input: correlate with the flipped, transposed kernel."""
    nd = w.ndim - 2
    k = w.shape[2]
    flip = (slice(None), slice(None)) + (slice(None, None, -1),) * nd
    w_ft = np.ascontiguousarray(np.swapaxes(w[flip], 0, 1))
    if stride > 1:
        dil_shape = g.shape[:2] + tuple((s - 1) * stride + 1 for s in g.shape[2:])
        gd = np.zeros(dil_shape, dtype=g.dtype)
        sl = (slice(None), slice(None)) + (slice(None, None, stride),) * nd
        gd[sl] = g
        g = gd
    gx_padded = _corr_nd(g, w_ft, stride=1, padding=k - 1)
    if padding:
        crop = (slice(None), slice(None)) + tuple(
            slice(padding, padding + s) for s in in_spatial)
        gx_padded = gx_padded[crop]
    return np.ascontiguousarray(gx_padded)


def _conv(x, kernel, bias, stride: int, padding: int, nd: int) -> Tensor:
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.ndim != nd + 2:
        raise ValueError(f"kernel must be {nd + 2}D, got shape {kernel.shape}")
    xd, batched = _split_batch(x.data, nd)
    cout, cin = kernel.shape[:2]
    k = kernel.shape[2]
    if any(e != k for e in kernel.shape[2:]):
        raise ValueError(f"only cubic kernels supported, got {kernel.shape}")
    if xd.shape[1] != cin:
        raise ValueError(f"input channels {xd.shape[1]} != kernel C_in {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    for s in xd.shape[2:]:
        _out_extent(s, k, stride, padding)
    n = xd.shape[0]

    cols, out_sp = _im2col(xd, k, stride, padding, nd)
    flat = cols @ _kernel_cl(kernel.data).T + bias.data
    od = flat.reshape((n,) + out_sp + (cout,))
    od = np.ascontiguousarray(np.moveaxis(od, -1, 1))
    out = Tensor(od if batched else od[0])

    def vjp():
        in_spatial = xd.shape[2:]
        need_x = x.requires_grad
        need_w = kernel.requires_grad
        inv_perm = (0, 1 + nd) + tuple(range(1, 1 + nd))

        def back(g):
            gb = g if batched else g[None]
            g_flat = np.moveaxis(gb, 1, -1).reshape(-1, cout)
            if need_w:
                gw_cl = g_flat.T @ cols
                gw = np.ascontiguousarray(
                    gw_cl.reshape((cout,) + (k,) * nd + (cin,)).transpose(inv_perm))
            else:
                gw = None
            gbias = g_flat.sum(axis=0)
            if need_x:
                gx = _conv_input_grad(gb, kernel.data, stride, padding, in_spatial)
                gx = gx if batched else gx[0]
            else:
                gx = None
            return (gx, gw, gbias)
        return back
    return _maybe_record(out, (x, kernel, bias), vjp)


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution of [C,H,W] (or [N,C,H,W]) with [C_out,C_in,k,k]."""
    return _conv(x, kernel, bias, stride, padding, nd=2)


def conv3d(x, kernel, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """3D convolution of [C,H,W,D] (or [N,C,H,W,D]) with [C_out,C_in,k,k,k]."""
    return _conv(x, kernel, bias, stride, padding, nd=3)


# ---------------------------------------------------------------------------
# pooling and resampling


def avg_pool2d(x, window: int) -> Tensor:
    """Non-overlapping window mean over the last two axes."""
    x = as_tensor(x)
    a, b = x.shape[-2:]
    if a % window or b % window:
        raise ValueError(f"extents {(a, b)} not divisible by window {window}")
    lead = x.shape[:-2]
    xr = x.data.reshape(lead + (a // window, window, b // window, window))
    out = Tensor(xr.mean(axis=(-3, -1)))

    def vjp():
        inv = 1.0 / (window * window)

        def back(g):
            ge = np.broadcast_to(g[..., :, None, :, None],
                                 lead + (a // window, window, b // window, window))
            return ((ge * inv).reshape(x.shape),)
        return back
    return _maybe_record(out, (x,), vjp)


def avg_pool(x, axes=None, window: int | None = None) -> Tensor:
    """Mean pooling: full-axis collapse over `axes`, or 2D windowed mode."""
    if (axes is None) == (window is None):
        raise ValueError("specify exactly one of axes / window")
    if window is not None:
        return avg_pool2d(x, window)
    x = as_tensor(x)
    ax = (axes,) if isinstance(axes, int) else tuple(axes)
    for a in ax:
        if not -x.ndim <= a < x.ndim:
            raise ValueError(f"axis {a} out of range for shape {x.shape}")
    return mean(x, axes=ax)


_UPSAMPLE_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).name)
    m = _UPSAMPLE_CACHE.get(key)
    if m is None:
        m = np.zeros((2 * n, n), dtype=dtype)
        src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
        src = np.clip(src, 0.0, n - 1.0)
        i0 = np.minimum(np.floor(src).astype(int), max(n - 2, 0))
        t = src - i0
        m[np.arange(2 * n), i0] += 1.0 - t
        m[np.arange(2 * n), np.minimum(i0 + 1, n - 1)] += t
        _UPSAMPLE_CACHE[key] = m
    return m


def upsample2x(x) -> Tensor:
    """Bilinear x2 upsampling of the last two axes (half-pixel centers)."""
    x = as_tensor(x)
    a, b = x.shape[-2:]
    la = _upsample_matrix(a, x.dtype)
    lb = _upsample_matrix(b, x.dtype)
    out = Tensor(np.matmul(np.matmul(la, x.data), lb.T))

    def vjp():
        return lambda g: (np.matmul(np.matmul(la.T, g), lb),)
    return _maybe_record(out, (x,), vjp)


def bilinear_interp2d(featuremap, points) -> Tensor:
    """Sample a [C,A,B] map at [N,2] points in [-1,1]^2 (cell centers, border clamp)."""
    featuremap, points = as_tensor(featuremap), as_tensor(points)
    if featuremap.ndim != 3:
        raise ValueError(f"featuremap must be [C,A,B], got {featuremap.shape}")
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError(f"points must be [N,2], got {points.shape}")
    c, a, b = featuremap.shape
    pts = points.data
    n = pts.shape[0]

    ia = np.clip((pts[:, 0] + 1.0) * 0.5 * a - 0.5, 0.0, a - 1.0)
    ib = np.clip((pts[:, 1] + 1.0) * 0.5 * b - 0.5, 0.0, b - 1.0)
    i0 = np.minimum(np.floor(ia).astype(np.int64), max(a - 2, 0))
    j0 = np.minimum(np.floor(ib).astype(np.int64), max(b - 2, 0))
    ta = (ia - i0)[:, None]
    tb = (ib - j0)[:, None]
    i1 = np.minimum(i0 + 1, a - 1)
    j1 = np.minimum(j0 + 1, b - 1)

    fm = featuremap.data.reshape(c, a * b)
    g00 = fm[:, i0 * b + j0].T
    g10 = fm[:, i1 * b + j0].T
    g01 = fm[:, i0 * b + j1].T
    g11 = fm[:, i1 * b + j1].T
    w00 = (1.0 - ta) * (1.0 - tb)
    w10 = ta * (1.0 - tb)
    w01 = (1.0 - ta) * tb
    w11 = ta * tb
    out = Tensor(w00 * g00 + w10 * g10 + w01 * g01 + w11 * g11)

    def vjp():
        idx = np.concatenate([i0 * b + j0, i1 * b + j0, i0 * b + j1, i1 * b + j1])
        need_pts = points.requires_grad
        if need_pts:
            interior_a = ((ia > 0.0) & (ia < a - 1.0)).astype(fm.dtype)
            interior_b = ((ib > 0.0) & (ib < b - 1.0)).astype(fm.dtype)

        def back(g):
            vals = np.concatenate([w00 * g, w10 * g, w01 * g, w11 * g])
            if len(idx) >= 2048:
                # sparse matmul scatter; row-ordered CSR keeps summation
                # order fixed
                from scipy import sparse
                mat = sparse.csr_matrix(
                    (np.ones(len(idx), dtype=fm.dtype),
                     (idx, np.arange(len(idx)))), shape=(a * b, len(idx)))
                gf = mat @ vals
            else:
                gf = np.zeros((a * b, c), dtype=fm.dtype)
                np.add.at(gf, idx, vals)
            gmap = gf.T.reshape(c, a, b)
            if not need_pts:
                return (gmap, None)
            # point gradients: derivative of the lerp, zero once clamped
            d_ia = ((g10 - g00) * (1.0 - tb) + (g11 - g01) * tb) * g
            d_ib = ((g01 - g00) * (1.0 - ta) + (g11 - g10) * ta) * g
            gp = np.stack([
                d_ia.sum(axis=1) * (0.5 * a) * interior_a,
                d_ib.sum(axis=1) * (0.5 * b) * interior_b,
            ], axis=1)
            return (gmap, gp)
        return back
    return _maybe_record(out, (featuremap, points), vjp)


# ---------------------------------------------------------------------------
# normalization


def normalize(x, kind: str, groups: int, scale_t, shift_t, eps: float = 1e-5,
              spatial_ndim: int = 2, frozen_stats: bool = False,
              stats=None) -> Tensor:
    """Instance or group normalization with per-channel affine output.

    Channels sit at axis -(spatial_ndim+1); any leading axes are batch.
    With frozen_stats the data statistics are bypassed (identity mean 0,
    variance 1), a test hook for receptive-field measurements. `stats`
    supplies fixed (mean, var) arrays instead of data statistics, the
    eval-mode used when decoding must stay independent of latent extents.
    """
    x = as_tensor(x)
    scale_t, shift_t = as_tensor(scale_t), as_tensor(shift_t)
    ch_axis = x.ndim - spatial_ndim - 1
    channels = x.shape[ch_axis]
    if kind == "instance":
        groups = channels
    elif kind != "group":
        raise ValueError(f"unknown normalization kind {kind!r}")
    if channels % groups != 0:
        raise ValueError(f"groups {groups} does not divide channels {channels}")
    if scale_t.shape != (channels,) or shift_t.shape != (channels,):
        raise ValueError("scale/shift must be per-channel vectors")

    affine_shape = (channels,) + (1,) * spatial_ndim
    if frozen_stats:
        y = x
    elif stats is not None:
        mu, var = stats
        mu = np.asarray(mu, dtype=x.dtype).reshape(affine_shape)
        var = np.asarray(var, dtype=x.dtype).reshape(affine_shape)
        inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
        y = mul(sub(x, as_tensor(mu)), as_tensor(inv))
    else:
        lead = x.shape[:ch_axis]
        grouped = reshape(x, lead + (groups, channels // groups) + x.shape[ch_axis + 1:])
        red_axes = tuple(range(ch_axis + 1, x.ndim + 1))
        mu = mean(grouped, axes=red_axes, keepdims=True)
        centered = sub(grouped, mu)
        var = mean(square(centered), axes=red_axes, keepdims=True)
        y = mul(centered, rsqrt(add(var, as_tensor(np.asarray(eps, dtype=x.dtype)))))
        y = reshape(y, x.shape)
    return add(mul(y, reshape(scale_t, affine_shape)), reshape(shift_t, affine_shape))


# ---------------------------------------------------------------------------
# time embedding


def time_embedding(t, dim: int, dtype=np.float64) -> Tensor:
    """Sinusoidal features of a timestep: pairs (sin t*w_k, cos t*w_k).

    Frequencies are geometric, w_k = 10000**(-2k/dim), so w_0 = 1.
    Accepts a single step (dim-vector result) or an array of steps.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    ts = np.asarray(t, dtype=dtype)
    if np.any(ts < 1):
        raise ValueError("timestep must be >= 1")
    k = np.arange(dim // 2, dtype=dtype)
    omega = 10000.0 ** (-2.0 * k / dim)
    ang = ts[..., None] * omega
    emb = np.empty(ang.shape[:-1] + (dim,), dtype=dtype)
    emb[..., 0::2] = np.sin(ang)
    emb[..., 1::2] = np.cos(ang)
    return Tensor(emb)
