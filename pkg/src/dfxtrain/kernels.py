"""Integer-only tensor kernels over shared-exponent fixed-point tensors.

Inner products multiply mantissas exactly (int16-range products, int32-range
accumulation; the guard below rejects inner dimensions that could wrap) and
add the shared exponents, so a GEMM or convolution introduces no rounding at
all.  Rounding happens once per layer boundary when the wide accumulator is
renormalized back to k-bit mantissas.

Accumulator values stay below 2^31, so the exact products and partial sums
all fit in float64 integers; matmuls therefore run on the float64 BLAS path
and are cast back, which is bit-identical to an int32 datapath that does not
overflow.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numfmt as nf
from .errors import (
    AccumulatorOverflow,
    CacheMismatch,
    DegenerateBatch,
    NonPositiveInput,
    ShapeMismatch,
)
from .numfmt import FxpTensor, RoundingContext

_ACC_LIMIT = 2 ** 31 - 1


# -------------------------------------------------------------------
# Wide accumulator tensor
# -------------------------------------------------------------------

@dataclass(frozen=True)
class AccTensor:
    """int32 accumulator tensor; element i represents values[i] * 2**scale_exponent."""

    values: np.ndarray
    scale_exponent: int

    @property
    def shape(self):
        return self.values.shape

    def dequantize(self) -> np.ndarray:
        """Exact float64 values (oracle side)."""
        return np.ldexp(self.values.astype(np.float64), self.scale_exponent)

    def to_float32(self) -> np.ndarray:
        """Pipeline-format float view (binary32, nearest-even on excess bits)."""
        return nf.wide_to_float(self.values, self.scale_exponent)


def renormalize_acc(acc: AccTensor, k: int, ctx: RoundingContext) -> FxpTensor:
    """Round a layer's accumulator output back to the k-bit tensor format."""
    return nf.renormalize(acc.values, acc.scale_exponent, k, ctx)


def _mantissa_limit(k: int) -> int:
    return (1 << (k - 1)) - 1


def _check_inner_dim(inner: int, ka: int, kb: int):
    if inner * _mantissa_limit(ka) * _mantissa_limit(kb) > _ACC_LIMIT:
        raise AccumulatorOverflow(
            f"inner dimension {inner} can overflow int32 accumulation "
            f"for bit widths ({ka}, {kb})")


def _exact_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Products and partial sums are integers below 2^31 << 2^53: float64 is exact.
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.int64)


# -------------------------------------------------------------------
# GEMM / convolution
# -------------------------------------------------------------------

def fxp_gemm(a: FxpTensor, b: FxpTensor) -> AccTensor:
    """Exact integer matrix product; exponents add, no rounding inside.

    scale_exponent = e_a + e_b - (k_a - 2) - (k_b - 2), so the dequantized
    output equals the exact real product of the dequantized operands.
    """
    if a.mantissas.ndim != 2 or b.mantissas.ndim != 2:
        raise ShapeMismatch("fxp_gemm expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} x {b.shape}")
    out_shape = (a.shape[0], b.shape[1])
    if a.is_zero or b.is_zero:
        return AccTensor(np.zeros(out_shape, dtype=np.int32), 0)
    _check_inner_dim(a.shape[1], a.bit_width, b.bit_width)
    prod = _exact_matmul(a.mantissas, b.mantissas)
    scale = a.unit_exponent() + b.unit_exponent()
    return AccTensor(prod.astype(np.int32), scale)


def _pair(v, name):
    if isinstance(v, int):
        return (v, v)
    if len(v) == 2:
        return tuple(int(x) for x in v)
    raise ShapeMismatch(f"{name} must be an int or a pair")


def _im2col(m: np.ndarray, kh: int, kw: int, stride, padding):
    """Patch matrix of an NCHW mantissa tensor: (N*OH*OW, C*kh*kw)."""
    sh, sw = stride
    ph, pw = padding
    n, c, h, w = m.shape
    padded = np.pad(m, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeMismatch("kernel larger than padded input")
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]                      # (N, C, OH, OW, kh, kw)
    patches = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return patches, oh, ow


def fxp_conv2d(x: FxpTensor, w: FxpTensor, stride=1, padding=0) -> AccTensor:
    """2-D convolution as im2col + fxp_gemm: same exactness contract.

    x is NCHW, w is OIHW.  Output is an (N, O, OH, OW) accumulator.
    """
    stride = _pair(stride, "stride")
    padding = _pair(padding, "padding")
    if x.mantissas.ndim != 4 or w.mantissas.ndim != 4:
        raise ShapeMismatch("fxp_conv2d expects NCHW input and OIHW weights")
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise ShapeMismatch(f"channel mismatch: input {c}, weights {i}")
    oh = (h + 2 * padding[0] - kh) // stride[0] + 1
    ow = (wd + 2 * padding[1] - kw) // stride[1] + 1
    if x.is_zero or w.is_zero:
        return AccTensor(np.zeros((n, o, oh, ow), dtype=np.int32), 0)
    _check_inner_dim(i * kh * kw, x.bit_width, w.bit_width)
    patches, oh, ow = _im2col(x.mantissas, kh, kw, stride, padding)
    wmat = w.mantissas.reshape(o, i * kh * kw)
    acc = _exact_matmul(patches, wmat.T).reshape(n, oh, ow, o)
    scale = x.unit_exponent() + w.unit_exponent()
    return AccTensor(acc.transpose(0, 3, 1, 2).astype(np.int32), scale)


# -------------------------------------------------------------------
# Element-wise addition
# -------------------------------------------------------------------

_ADD_GUARD = 23  # alignment guard bits kept before the sticky truncation


def _widen_to_unit(t: FxpTensor, unit: int) -> np.ndarray:
    """Mantissas of t expressed at 2**unit, sticky truncation beyond the guard."""
    d = t.unit_exponent() - unit
    m = t.mantissas.astype(np.int64)
    if d >= 0:
        return m << d
    mag = np.abs(m)
    a = nf._align24(mag, np.full(mag.shape, -d, dtype=np.int64))
    return np.where(m < 0, -a, a)


def fxp_add(a: FxpTensor, b: FxpTensor, ctx: RoundingContext) -> FxpTensor:
    """Element-wise sum, renormalized to the operands' bit width.

    The smaller-exponent operand is aligned by an arithmetic right shift
    with a sticky bit, but only past 23 guard bits, so the pre-rounding sum
    is exact whenever the scales are within 2^23 of each other.  Broadcast
    shapes follow numpy rules; adding the all-zero sentinel returns the
    other operand unchanged (no rounding, no draw consumed).
    """
    if a.bit_width != b.bit_width:
        raise ShapeMismatch("fxp_add operands must share a bit width")
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    if b.is_zero:
        return a if a.shape == out_shape else _broadcast_fxp(a, out_shape)
    if a.is_zero:
        return b if b.shape == out_shape else _broadcast_fxp(b, out_shape)
    unit = max(a.unit_exponent(), b.unit_exponent()) - _ADD_GUARD
    wa = np.broadcast_to(_widen_to_unit(a, unit), out_shape)
    wb = np.broadcast_to(_widen_to_unit(b, unit), out_shape)
    return nf.renormalize(wa + wb, unit, a.bit_width, ctx)


def _broadcast_fxp(t: FxpTensor, shape) -> FxpTensor:
    return FxpTensor(np.broadcast_to(t.mantissas, shape).copy(),
                     t.shared_exponent, t.bit_width, _checked=True)


# -------------------------------------------------------------------
# Integer reciprocal and inverse square root
# -------------------------------------------------------------------

_RECIP_BITS = 21


def fixed_reciprocal(n: int, bits: int = _RECIP_BITS):
    """Nearest-rounded fixed-point 1/n as a (mantissa, exponent) pair.

    The mantissa has `bits` significant bits; products against int32-range
    sums then stay inside the exact float64 integer range.
    """
    if n <= 0:
        raise NonPositiveInput(f"reciprocal of non-positive {n}")
    t = n.bit_length() - 1
    m = ((1 << (t + bits + 1)) + n) // (2 * n)  # round(2^(t+bits) / n)
    return m, -(t + bits)


_RSQRT_LUT = np.array(
    [round(2 ** 30 / np.sqrt(1.0 + 3.0 * (i + 0.5) / 64.0)) for i in range(64)],
    dtype=np.int64,
)


def fxp_rsqrt(m, e):
    """Fixed-point 1/sqrt(m * 2**e) for positive integer mantissas.

    The exponent is halved with its parity absorbed into the mantissa,
    giving an argument w in [1, 4) as Q2.30; a 64-entry table seeds three
    Newton steps y <- y(3 - w*y^2)/2 run in integer arithmetic with
    rounding shifts.  Returns (mantissa, exponent) with a 16-bit mantissa
    in (2^14, 2^15]; relative error is below 2^-10.

    Accepts scalars or arrays (per-element exponents allowed).
    """
    m_arr = np.atleast_1d(np.asarray(m, dtype=np.int64))
    e_arr = np.broadcast_to(np.asarray(e, dtype=np.int64), m_arr.shape)
    if np.any(m_arr <= 0):
        raise NonPositiveInput("fxp_rsqrt requires strictly positive mantissas")
    # Reduce wide mantissas to <= 24 bits so the Q2.30 argument fits int64.
    _, m24, exp = nf._to_m24(m_arr.ravel(), e_arr.ravel())
    if np.any(m24 == 0):
        raise NonPositiveInput("fxp_rsqrt argument underflowed to zero")
    t = exp  # value = (m24 / 2^23) * 2^t with m24 in [2^23, 2^24)
    s = t >> 1
    odd = t & 1
    w = m24 << (7 + odd)  # Q2.30 in [2^30, 2^32)
    idx = np.clip(((w - (1 << 30)) * 64) // (3 << 30), 0, 63)  # 64 cells over [1, 4)
    y = _RSQRT_LUT[idx]
    for _ in range(3):
        p = (y * y + (1 << 29)) >> 30
        q = (w * p + (1 << 29)) >> 30
        y = (y * (3 * (1 << 30) - q) + (1 << 30)) >> 31
    y16 = (y + (1 << 14)) >> 15
    out_m = y16.reshape(m_arr.shape)
    out_e = (-15 - s).reshape(m_arr.shape)
    if np.isscalar(m) or np.asarray(m).ndim == 0:
        return int(out_m[0]), int(out_e[0])
    return out_m, out_e


# -------------------------------------------------------------------
# ReLU
# -------------------------------------------------------------------

def fxp_relu(x: FxpTensor):
    """max(0, x) by mantissa sign test; returns (output, positive mask)."""
    mask = x.mantissas > 0
    if x.is_zero or not mask.any():
        return nf.zeros(x.shape, x.bit_width), mask
    return FxpTensor(np.where(mask, x.mantissas, 0), x.shared_exponent,
                     x.bit_width, _checked=True), mask


def fxp_relu_backward(g: FxpTensor, mask: np.ndarray) -> FxpTensor:
    if mask.shape != g.shape:
        raise ShapeMismatch("relu mask shape differs from gradient shape")
    if g.is_zero:
        return g
    m = np.where(mask, g.mantissas, 0)
    if not m.any():
        return nf.zeros(g.shape, g.bit_width)
    return FxpTensor(m, g.shared_exponent, g.bit_width, _checked=True)


# -------------------------------------------------------------------
# Batch / layer normalization
# -------------------------------------------------------------------

@dataclass
class BatchNormParams:
    """Scale, shift, epsilon, and the float running-stat mirror for inference."""

    gamma: FxpTensor
    beta: FxpTensor
    eps_mantissa: int = 1
    eps_exponent: int = -10
    momentum: float = 0.1
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape:
            raise ShapeMismatch("gamma and beta shapes differ")
        if self.eps_mantissa <= 0:
            raise NonPositiveInput("eps must be positive")
        n = self.gamma.mantissas.size
        if self.running_mean is None:
            self.running_mean = np.zeros(n, dtype=np.float32)
        if self.running_var is None:
            self.running_var = np.ones(n, dtype=np.float32)


@dataclass
class NormCache:
    """Forward-pass products a normalization backward needs."""

    kind: str
    centered: FxpTensor
    invstd_m: np.ndarray   # per-group 16-bit mantissas
    invstd_e: np.ndarray   # per-group exponents
    count: int
    axes: tuple
    x_shape: tuple
    bit_width: int
    stages: dict = field(default_factory=dict)


def _reduce_axes_bn(x: FxpTensor):
    if x.mantissas.ndim == 2:
        return (0,)
    if x.mantissas.ndim == 4:
        return (0, 2, 3)
    raise ShapeMismatch("batchnorm expects a 2-D or 4-D tensor")


def _group_shape(x_ndim: int, axes: tuple):
    """Broadcast shape that re-expands per-group values across `axes`."""
    shape = [1] * x_ndim
    kept = [d for d in range(x_ndim) if d not in axes]
    return shape, kept


def _expand(values: np.ndarray, x_ndim: int, axes: tuple) -> np.ndarray:
    shape, kept = _group_shape(x_ndim, axes)
    out = list(shape)
    for d, size in zip(kept, values.shape):
        out[d] = size
    return values.reshape(out)


def _sum_guard(count: int, k: int):
    lim = _mantissa_limit(k)
    if count * lim * lim > _ACC_LIMIT:
        raise AccumulatorOverflow(
            f"{count} reduced elements can overflow int32 accumulation at k={k}")


def _norm_statistics(x: FxpTensor, axes: tuple, eps_m: int, eps_e: int,
                     k: int, ctx: RoundingContext):
    """Integer mean and inverse-std over `axes`.

    Returns (mu FxpTensor over groups, invstd (m, e) arrays, count).
    The second moment uses sum-of-squares minus the squared quantized mean,
    keeping every term an exact integer until the final pairing with eps.
    """
    m = x.mantissas.astype(np.int64)
    count = int(np.prod([x.shape[d] for d in axes]))
    if count < 2:
        raise DegenerateBatch(f"need at least 2 elements per group, got {count}")
    _sum_guard(count, k)
    u = x.unit_exponent()
    s1 = m.sum(axis=axes)
    s2 = (m * m).sum(axis=axes)
    rm, re = fixed_reciprocal(count)
    mu = nf.renormalize(s1 * rm, u + re, k, ctx)
    # E[x^2] and mu^2 as exact pairs, aligned and subtracted with guard bits.
    ex2 = s2 * rm
    ex2_u = 2 * u + re
    mu2 = mu.mantissas.astype(np.int64) ** 2
    mu2_u = 2 * mu.unit_exponent()
    unit = max(ex2_u, mu2_u) - _ADD_GUARD
    var = _shift_to(ex2, ex2_u - unit) - _shift_to(mu2, mu2_u - unit)
    var = np.maximum(var, 0)
    # Absorb eps at a unit picked from the actual magnitudes so the wide
    # values stay inside the exact integer range, then the inverse sqrt.
    var_top = int(var.max())
    var_exp = unit + (var_top.bit_length() - 1 if var_top else 0)
    eps_exp = eps_e + eps_m.bit_length() - 1
    ue = max(var_exp, eps_exp) - 40
    veps = _shift_to(var, unit - ue) + _shift_to(np.int64(eps_m), eps_e - ue)
    inv_m, inv_e = fxp_rsqrt(veps, ue)
    return mu, inv_m, inv_e, count


def _shift_to(v, d):
    """Exact left shift for d >= 0, sticky right shift otherwise."""
    v = np.asarray(v, dtype=np.int64)
    d = int(d)
    if d >= 0:
        return v << d
    mag = np.abs(v)
    a = nf._align24(mag, np.full(mag.shape, -d, dtype=np.int64))
    return np.where(v < 0, -a, a)


def fxp_batchnorm_forward(x: FxpTensor, p: BatchNormParams, ctx: RoundingContext):
    """Integer batch normalization: gamma * (x - mu)/sqrt(var + eps) + beta.

    Statistics are per channel over batch and spatial axes.  Returns
    (y, cache); the cache holds the centered tensor and the inverse std the
    backward pass reuses.  The float running-stat mirror is updated out of
    the integer path.
    """
    axes = _reduce_axes_bn(x)
    k = x.bit_width
    if x.is_zero:
        count = int(np.prod([x.shape[d] for d in axes]))
        if count < 2:
            raise DegenerateBatch("degenerate all-zero batch")
        inv_m, inv_e = fxp_rsqrt(p.eps_mantissa, p.eps_exponent)
        c = x.shape[1]
        cache = NormCache("batchnorm", x, np.full(c, inv_m), np.full(c, inv_e),
                          count, axes, x.shape, k)
        y = _broadcast_fxp(
            FxpTensor(_expand(p.beta.mantissas, x.mantissas.ndim, axes),
                      p.beta.shared_exponent, k, _checked=True), x.shape)
        return y, cache
    mu, inv_m, inv_e, count = _norm_statistics(
        x, axes, p.eps_mantissa, p.eps_exponent, k, ctx)
    ndim = x.mantissas.ndim
    centered = fxp_add(
        x, FxpTensor(_expand(-mu.mantissas, ndim, axes), mu.shared_exponent,
                     k, _checked=True), ctx)
    # gamma * centered * invstd in one wide product, then a single rounding
    ge = _expand(p.gamma.mantissas.astype(np.int64), ndim, axes)
    ie_m = _expand(inv_m, ndim, axes)
    ie_e = _expand(inv_e, ndim, axes)
    prod = centered.mantissas.astype(np.int64) * ie_m * ge
    unit = centered.unit_exponent() + ie_e + p.gamma.unit_exponent()
    scaled = nf.renormalize_pairs(prod, unit, k, ctx)
    beta_full = FxpTensor(_expand(p.beta.mantissas, ndim, axes),
                          p.beta.shared_exponent, k, _checked=True)
    y = fxp_add(scaled, beta_full, ctx)
    cache = NormCache("batchnorm", centered, np.asarray(inv_m), np.asarray(inv_e),
                      count, axes, x.shape, k)
    _update_running_stats(p, x, axes)
    return y, cache


def _update_running_stats(p: BatchNormParams, x: FxpTensor, axes: tuple):
    vals = x.dequantize()
    mean = vals.mean(axis=axes)
    var = vals.var(axis=axes)
    p.running_mean = ((1 - p.momentum) * p.running_mean
                      + p.momentum * mean).astype(np.float32)
    p.running_var = ((1 - p.momentum) * p.running_var
                     + p.momentum * var).astype(np.float32)


def _normalized_input(cache: NormCache, ctx: RoundingContext) -> FxpTensor:
    """(x - mu) * invstd rounded to k bits."""
    c = cache.centered
    if c.is_zero:
        return c
    ndim = c.mantissas.ndim
    ie_m = _expand(cache.invstd_m, ndim, cache.axes)
    ie_e = _expand(cache.invstd_e, ndim, cache.axes)
    prod = c.mantissas.astype(np.int64) * ie_m
    return nf.renormalize_pairs(prod, c.unit_exponent() + ie_e,
                                cache.bit_width, ctx)


def fxp_batchnorm_backward(g: FxpTensor, cache: NormCache, p: BatchNormParams,
                           ctx: RoundingContext):
    """Integer batch-norm gradients.

    dBeta = sum(G); dGamma = sum(G * xn);
    dX = gamma * invstd * (G - mean(G) - xn * mean(G * xn)),
    with xn the cached normalized input; every reduction and product runs
    through the integer kernel set with one rounding per stage.
    """
    if cache.kind != "batchnorm" or g.shape != cache.x_shape:
        raise CacheMismatch("gradient does not match the cached forward pass")
    return _norm_backward_core(g, cache, p.gamma, ctx, per_feature_gamma=False)


def _norm_backward_core(g: FxpTensor, cache: NormCache, gamma: FxpTensor,
                        ctx: RoundingContext, per_feature_gamma: bool):
    k = cache.bit_width
    axes = cache.axes
    ndim = len(cache.x_shape)
    count = cache.count
    rm, re = fixed_reciprocal(count)
    # Parameter gradients reduce over everything but the parameter axis:
    # the stat axes for batchnorm, the batch axis for layernorm.
    param_axes = (0,) if per_feature_gamma else axes

    if g.is_zero:
        z = nf.zeros(gamma.shape, k)
        return nf.zeros(cache.x_shape, k), z, z

    xn = _normalized_input(cache, ctx)
    cache.stages["xn"] = xn
    mg = g.mantissas.astype(np.int64)
    ug = g.unit_exponent()

    if per_feature_gamma:
        # layernorm: gamma rides inside the per-sample reductions, h = gamma * G
        ge = _expand(gamma.mantissas.astype(np.int64), ndim, axes)
        h = nf.renormalize(mg * ge, ug + gamma.unit_exponent(), k, ctx)
    else:
        h = g
    mh = h.mantissas.astype(np.int64)
    uh = h.unit_exponent()

    # Parameter gradients: exact integer sums, one rounding each.
    pcount = int(np.prod([cache.x_shape[d] for d in param_axes]))
    _sum_guard(max(count, pcount), k)
    s_g = mg.sum(axis=param_axes)
    s_gx = (mg * xn.mantissas.astype(np.int64)).sum(axis=param_axes)
    d_beta = nf.renormalize(s_g, ug, k, ctx)
    d_gamma = nf.renormalize(s_gx, ug + xn.unit_exponent(), k, ctx)

    # Means of H and H*xn over the stat axes feed the input gradient.
    s_h = mh.sum(axis=axes)
    s_hx = (mh * xn.mantissas.astype(np.int64)).sum(axis=axes)
    mean_h = nf.renormalize(s_h * rm, uh + re, k, ctx)
    mean_hx = nf.renormalize(s_hx * rm, uh + xn.unit_exponent() + re, k, ctx)
    cache.stages["mean_h"] = mean_h
    cache.stages["mean_hx"] = mean_hx

    inner = fxp_add(
        h, FxpTensor(_expand(-mean_h.mantissas, ndim, axes),
                     mean_h.shared_exponent, k, _checked=True), ctx)
    corr = nf.renormalize(
        xn.mantissas.astype(np.int64)
        * _expand(-mean_hx.mantissas.astype(np.int64), ndim, axes),
        xn.unit_exponent() + mean_hx.unit_exponent(), k, ctx)
    inner = fxp_add(inner, corr, ctx)
    cache.stages["inner"] = inner

    ie_m = _expand(cache.invstd_m, ndim, axes)
    ie_e = _expand(cache.invstd_e, ndim, axes)
    if per_feature_gamma:
        prod = inner.mantissas.astype(np.int64) * ie_m
        unit = inner.unit_exponent() + ie_e
    else:
        ge = _expand(gamma.mantissas.astype(np.int64), ndim, axes)
        prod = inner.mantissas.astype(np.int64) * ie_m * ge
        unit = inner.unit_exponent() + ie_e + gamma.unit_exponent()
    dx = nf.renormalize_pairs(prod, unit, k, ctx)
    return dx, d_gamma, d_beta


def fxp_layernorm_forward(x: FxpTensor, p: BatchNormParams, ctx: RoundingContext):
    """Integer layer normalization over the feature axis of an (N, F) tensor."""
    if x.mantissas.ndim != 2:
        raise ShapeMismatch("layernorm expects an (N, F) tensor")
    axes = (1,)
    k = x.bit_width
    if x.is_zero:
        count = x.shape[1]
        if count < 2:
            raise DegenerateBatch("degenerate all-zero feature row")
        inv_m, inv_e = fxp_rsqrt(p.eps_mantissa, p.eps_exponent)
        n = x.shape[0]
        cache = NormCache("layernorm", x, np.full(n, inv_m), np.full(n, inv_e),
                          count, axes, x.shape, k)
        y = _broadcast_fxp(
            FxpTensor(p.beta.mantissas.reshape(1, -1), p.beta.shared_exponent,
                      k, _checked=True), x.shape)
        return y, cache
    mu, inv_m, inv_e, count = _norm_statistics(
        x, axes, p.eps_mantissa, p.eps_exponent, k, ctx)
    centered = fxp_add(
        x, FxpTensor(-mu.mantissas.reshape(-1, 1), mu.shared_exponent, k,
                     _checked=True), ctx)
    prod = (centered.mantissas.astype(np.int64)
            * inv_m.reshape(-1, 1)
            * p.gamma.mantissas.astype(np.int64).reshape(1, -1))
    unit = (centered.unit_exponent() + inv_e.reshape(-1, 1)
            + p.gamma.unit_exponent())
    scaled = nf.renormalize_pairs(prod, unit, k, ctx)
    beta_row = FxpTensor(p.beta.mantissas.reshape(1, -1),
                         p.beta.shared_exponent, k, _checked=True)
    y = fxp_add(scaled, beta_row, ctx)
    cache = NormCache("layernorm", centered, np.asarray(inv_m),
                      np.asarray(inv_e), count, axes, x.shape, k)
    return y, cache


def fxp_layernorm_backward(g: FxpTensor, cache: NormCache, p: BatchNormParams,
                           ctx: RoundingContext):
    """Integer layer-norm gradients; same structure as batchnorm with
    per-sample statistics and gamma kept inside the reductions."""
    if cache.kind != "layernorm" or g.shape != cache.x_shape:
        raise CacheMismatch("gradient does not match the cached forward pass")
    return _norm_backward_core(g, cache, p.gamma, ctx, per_feature_gamma=True)
