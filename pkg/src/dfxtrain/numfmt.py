"""Dynamic fixed-point number format: float32 <-> shared-exponent integer tensors.

A tensor is stored as one shared power-of-two scale plus per-element signed
integer mantissas:

    value_i = mantissa_i * 2 ** (shared_exponent - (bit_width - 2))

The shared exponent is the maximum unbiased binary32 exponent over the
tensor's nonzero elements, so a freshly mapped tensor puts the implicit
leading 1 of its largest element on mantissa bit (bit_width - 2); e.g. for
bit_width 8 the largest element lands in [64, 127] and every element is a
7-bit magnitude plus sign.  Elements smaller than the maximum are shifted
right into the sub-normal region (leading mantissa bit 0) before rounding.

Forward mapping (`map_to_fixed`) is linear: unpack each float into
(sign, exponent, 24-bit mantissa), align every mantissa to the shared
exponent by a right shift, then round 24 bits down to (bit_width - 1)
magnitude bits, stochastically or to nearest-even.  The inverse mapping
(`inverse_map`) is non-linear: each mantissa is re-normalized by a
leading-zero shift with a per-element exponent adjustment, then packed back
into binary32.

Rounding randomness is counter-based: the draw for flat element j of
operation t under seed s is a pure function of (s, t, j), so any
element-parallel or tiled execution reproduces the sequential result.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ExponentOverflow,
    InvalidBitWidth,
    NonFiniteInput,
    ShapeMismatch,
)

STOCHASTIC = "stochastic"
NEAREST = "nearest"

MIN_BIT_WIDTH = 4
MAX_BIT_WIDTH = 8
# Master-weight tensors in the optimizer reuse this format at 16 bits.
WIDE_BIT_WIDTH = 16

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_SEED_SALT = 0xD1342543DE82EF95
_OP_SALT = 0x632BE59BD9B4E019

# Serialized shared-exponent sentinel for all-zero tensors.
ZERO_EXP_SENTINEL = -32768


# -------------------------------------------------------------------
# Counter-based randomness
# -------------------------------------------------------------------

def _splitmix64(x: np.ndarray) -> np.ndarray:
    """Finalizing mix of splitmix64; input and output are uint64 arrays."""
    x = (x + np.uint64(_GOLDEN)).astype(np.uint64)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _mix64(x: int) -> int:
    """Scalar splitmix64 mix in Python integers (numpy warns on u64 overflow)."""
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def element_draws(seed: int, op_index: int, flat_index: np.ndarray) -> np.ndarray:
    """64-bit uniform draw per element: a pure function of (seed, op, index).

    `flat_index` may be any integer array; the result has the same shape.
    Identical (seed, op_index, flat_index) triples give identical draws
    regardless of how the index set is split across calls, which is what
    makes tiled or parallel execution reproducible.
    """
    base = _mix64((seed * _SEED_SALT + op_index * _GOLDEN + _OP_SALT) & _MASK64)
    lanes = (np.asarray(flat_index, dtype=np.uint64) * np.uint64(_GOLDEN)
             + np.uint64(base))
    return _splitmix64(lanes)


class RoundingContext:
    """Deterministic rounding state: seed, operation counter, and mode.

    Every rounding-capable operation consumes exactly one operation slot
    via `next_op`, in both modes, so stochastic and nearest runs of the
    same program stay schedule-aligned.
    """

    __slots__ = ("seed", "op_counter", "mode")

    def __init__(self, seed: int, mode: str = STOCHASTIC, op_counter: int = 0):
        if mode not in (STOCHASTIC, NEAREST):
            raise ValueError(f"unknown rounding mode: {mode!r}")
        self.seed = int(seed) & _MASK64
        self.op_counter = int(op_counter)
        self.mode = mode

    def next_op(self) -> int:
        t = self.op_counter
        self.op_counter += 1
        return t

    def draws(self, op_index: int, n: int) -> np.ndarray:
        return element_draws(self.seed, op_index, np.arange(n))

    def __repr__(self):
        return (f"RoundingContext(seed={self.seed}, mode={self.mode!r}, "
                f"op_counter={self.op_counter})")


# -------------------------------------------------------------------
# binary32 unpack / pack
# -------------------------------------------------------------------

@dataclass(frozen=True)
class UnpackedFloat:
    """(sign, unbiased exponent, 24-bit mantissa) view of one binary32 value.

    Normal values carry the hidden bit explicitly (mantissa24 in
    [2^23, 2^24)); subnormals report exponent -126 with mantissa24 < 2^23;
    zero reports mantissa24 == 0.
    """

    sign: int
    exponent: int
    mantissa24: int


def unpack(f: float) -> UnpackedFloat:
    """Split a finite binary32 value into sign, exponent and 24-bit mantissa."""
    bits = int(np.float32(f).view(np.uint32))
    s = bits >> 31
    eb = (bits >> 23) & 0xFF
    frac = bits & 0x7FFFFF
    if eb == 0xFF:
        raise NonFiniteInput(f"cannot unpack non-finite value {f!r}")
    if eb == 0:
        return UnpackedFloat(s, -126, frac)
    return UnpackedFloat(s, eb - 127, frac | 0x800000)


def pack(u: UnpackedFloat) -> np.float32:
    """Rebuild the binary32 value of an UnpackedFloat, bit-exactly."""
    if u.mantissa24 == 0:
        bits = u.sign << 31
    elif u.mantissa24 >= 1 << 23:
        if not -126 <= u.exponent <= 127:
            raise ExponentOverflow(f"exponent {u.exponent} not representable")
        bits = (u.sign << 31) | ((u.exponent + 127) << 23) | (u.mantissa24 & 0x7FFFFF)
    else:
        if u.exponent != -126:
            raise ExponentOverflow("subnormal mantissa requires exponent -126")
        bits = (u.sign << 31) | u.mantissa24
    return np.uint32(bits).view(np.float32)


def _unpack_array(x: np.ndarray):
    """Vectorized unpack: returns (sign, exponent, mantissa24) int64 arrays."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    bits = arr.view(np.uint32)
    eb = ((bits >> np.uint32(23)) & np.uint32(0xFF)).astype(np.int64)
    if np.any(eb == 0xFF):
        raise NonFiniteInput("tensor contains NaN or Inf")
    sign = (bits >> np.uint32(31)).astype(np.int64)
    frac = (bits & np.uint32(0x7FFFFF)).astype(np.int64)
    normal = eb > 0
    m24 = np.where(normal, frac | (1 << 23), frac)
    exp = np.where(normal, eb - 127, -126)
    return sign, exp, m24


# -------------------------------------------------------------------
# Fixed-point tensor
# -------------------------------------------------------------------

class FxpTensor:
    """Shared-exponent integer tensor.

    `shared_exponent` is None for the all-zero tensor (the format's bottom
    sentinel); otherwise every mantissa satisfies
    |m| <= 2**(bit_width - 1) - 1 and element i represents
    mantissas[i] * 2**(shared_exponent - (bit_width - 2)).
    """

    __slots__ = ("mantissas", "shared_exponent", "bit_width")

    def __init__(self, mantissas: np.ndarray, shared_exponent, bit_width: int,
                 _checked: bool = False):
        if not MIN_BIT_WIDTH <= bit_width <= WIDE_BIT_WIDTH:
            raise InvalidBitWidth(f"bit_width {bit_width} outside [4, 16]")
        if not _checked:
            wide = np.asarray(mantissas, dtype=np.int64)
            limit = (1 << (bit_width - 1)) - 1
            if np.any(np.abs(wide) > limit):
                raise ValueError(f"mantissa magnitude exceeds {limit}")
            if shared_exponent is None and np.any(wide != 0):
                raise ValueError("zero-sentinel tensor with nonzero mantissas")
        m = np.array(mantissas, dtype=np.int16)
        m.flags.writeable = False
        self.mantissas = m
        self.shared_exponent = None if shared_exponent is None else int(shared_exponent)
        self.bit_width = int(bit_width)

    @property
    def shape(self):
        return self.mantissas.shape

    @property
    def is_zero(self) -> bool:
        return self.shared_exponent is None

    def unit_exponent(self) -> int:
        """Exponent u such that value = mantissa * 2**u (0 for the sentinel)."""
        if self.shared_exponent is None:
            return 0
        return self.shared_exponent - (self.bit_width - 2)

    def dequantize(self) -> np.ndarray:
        """Exact float64 values (test/oracle side; the pipeline uses inverse_map)."""
        if self.shared_exponent is None:
            return np.zeros(self.shape, dtype=np.float64)
        return np.ldexp(self.mantissas.astype(np.float64), self.unit_exponent())

    def reshape(self, shape) -> "FxpTensor":
        return FxpTensor(self.mantissas.reshape(shape), self.shared_exponent,
                         self.bit_width, _checked=True)

    def __neg__(self) -> "FxpTensor":
        return FxpTensor(-self.mantissas, self.shared_exponent, self.bit_width,
                         _checked=True)

    def __repr__(self):
        e = "⊥" if self.shared_exponent is None else self.shared_exponent
        return (f"FxpTensor(shape={self.shape}, k={self.bit_width}, "
                f"e_max={e})")


def zeros(shape, bit_width: int = 8) -> FxpTensor:
    return FxpTensor(np.zeros(shape, dtype=np.int16), None, bit_width,
                     _checked=True)


# -------------------------------------------------------------------
# Rounding primitives
# -------------------------------------------------------------------

def stochastic_round(m24, keep_bits: int, draw):
    """Round 24-bit mantissas to `keep_bits` bits using explicit draws.

    With lo the discarded low (24 - keep_bits) bits and hi the kept high
    bits, returns hi + 1 when draw < lo and hi otherwise, so the result is
    an exactly unbiased estimator of m24 / 2**(24 - keep_bits).  `draw`
    must be uniform on [0, 2**(24 - keep_bits)).  hi + 1 may overflow to
    2**keep_bits; saturation is the caller's job.  Accepts scalars or
    arrays.
    """
    if not 3 <= keep_bits <= 8:
        raise InvalidBitWidth(f"keep_bits {keep_bits} outside [3, 8]")
    m = np.asarray(m24, dtype=np.int64)
    d = np.asarray(draw, dtype=np.int64)
    drop = 24 - keep_bits
    lo = m & ((1 << drop) - 1)
    hi = m >> drop
    out = hi + (d < lo)
    return out if out.shape else int(out)


def _round24(m24: np.ndarray, keep_bits: int, mode: str,
             draw64: np.ndarray | None) -> np.ndarray:
    """Round aligned 24-bit mantissas to keep_bits; may return 2**keep_bits."""
    drop = 24 - keep_bits
    lo = m24 & ((1 << drop) - 1)
    hi = m24 >> drop
    if mode == STOCHASTIC:
        # Top `drop` bits of the 64-bit draw give a uniform value on [0, 2^drop).
        up = (draw64 >> np.uint64(64 - drop)).astype(np.int64) < lo
    else:
        half = 1 << (drop - 1)
        up = (lo > half) | ((lo == half) & ((hi & 1) == 1))
    return hi + up


def _align24(m24: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """Right-shift 24-bit mantissas, ORing discarded bits into a sticky LSB."""
    d = np.minimum(dist, 32)
    dropped = m24 & ((np.int64(1) << d) - 1)
    return (m24 >> d) | (dropped != 0)


def _bit_length(a: np.ndarray) -> np.ndarray:
    """Exact bit length per element; valid for 0 <= a < 2**53."""
    return np.frexp(a.astype(np.float64))[1].astype(np.int64)


def _to_m24(values: np.ndarray, unit_exponent):
    """Normalize integer magnitudes to 24-bit mantissas with per-element exponents.

    values * 2**unit_exponent == ±m24 * 2**(exp - 23) after nearest-even
    rounding of any bits beyond 24 (the same rounding inverse_map applies
    to accumulator tensors).  Elements whose exponent falls below -126
    flush to zero, mirroring binary32 packing; exponents above 127 raise.
    Returns (sign, m24, exp) int64 arrays.
    """
    v = np.asarray(values, dtype=np.int64)
    mag = np.abs(v)
    if np.any(mag >= (1 << 53)):
        raise OverflowError("magnitude exceeds the exact 2^53 range")
    sign = (v < 0).astype(np.int64)
    n = _bit_length(mag)
    drop = np.maximum(n - 24, 0)
    lo = mag & ((np.int64(1) << drop) - 1)
    hi = mag >> drop
    half = np.where(drop > 0, np.int64(1) << np.maximum(drop - 1, 0), np.int64(0))
    up = (drop > 0) & ((lo > half) | ((lo == half) & ((hi & 1) == 1)))
    m = hi + up
    # Rounding may carry 0xFFFFFF -> 0x1000000.
    carry = m == (1 << 24)
    m = np.where(carry, m >> 1, m)
    n = n + carry
    nz = m != 0
    shift_up = np.where(nz, np.maximum(24 - n + drop, 0), 0)
    m24 = m << np.where(drop > 0, 0, shift_up)
    exp = np.where(nz, unit_exponent + n - 1, 0)
    if np.any(nz & (exp > 127)):
        raise ExponentOverflow("normalized exponent exceeds 127")
    flush = nz & (exp < -126)
    m24 = np.where(flush, 0, m24)
    return sign, m24, exp


def _pack_float32(sign: np.ndarray, m24: np.ndarray, exp: np.ndarray) -> np.ndarray:
    """Pack normalized (sign, m24, exp) triples into binary32; zeros become +0.0."""
    nz = m24 != 0
    bits = np.where(
        nz,
        (sign.astype(np.uint32) << np.uint32(31))
        | ((exp + 127).astype(np.uint32) << np.uint32(23))
        | (m24 & 0x7FFFFF).astype(np.uint32),
        np.uint32(0),
    ).astype(np.uint32)
    return bits.view(np.float32)


def _map_m24(sign: np.ndarray, m24: np.ndarray, exp: np.ndarray, k: int,
             ctx: RoundingContext, shape) -> FxpTensor:
    """Shared tail of map_to_fixed/renormalize: align to e_max, round, saturate.

    Consumes one operation slot of `ctx` unconditionally.
    """
    t = ctx.next_op()
    nz = m24 != 0
    if not np.any(nz):
        return zeros(shape, k)
    e_max = int(exp[nz].max())
    aligned = _align24(m24, e_max - exp)
    if ctx.mode == STOCHASTIC:
        draws = element_draws(ctx.seed, t, np.arange(m24.size).reshape(m24.shape))
    else:
        draws = None
    r = _round24(aligned, k - 1, ctx.mode, draws)
    limit = (1 << (k - 1)) - 1
    r = np.minimum(r, limit)
    mantissas = np.where(sign == 1, -r, r).astype(np.int16).reshape(shape)
    return FxpTensor(mantissas, e_max, k, _checked=True)


# -------------------------------------------------------------------
# Public mapping operations
# -------------------------------------------------------------------

def shared_exponent(t: np.ndarray):
    """Maximum unbiased exponent over nonzero elements; None if all zero."""
    _, exp, m24 = _unpack_array(t)
    nz = m24 != 0
    if not np.any(nz):
        return None
    return int(exp[nz].max())


def _check_bit_width(k: int, wide_ok: bool = False):
    hi = WIDE_BIT_WIDTH if wide_ok else MAX_BIT_WIDTH
    if not MIN_BIT_WIDTH <= k <= hi:
        raise InvalidBitWidth(f"bit_width {k} outside [{MIN_BIT_WIDTH}, {hi}]")


def map_to_fixed(t: np.ndarray, k: int, ctx: RoundingContext,
                 _wide_ok: bool = False) -> FxpTensor:
    """Linear fixed-point mapping of a float tensor to k-bit mantissas.

    Each element's 24-bit mantissa is shifted right by (e_max - e_i),
    deliberately pushing small elements sub-normal relative to the shared
    scale, then rounded to (k - 1) magnitude bits per the context mode.
    Shift distances >= 24 zero the pre-round mantissa but keep a sticky
    bit, so tiny elements can still round up stochastically.  Round-up
    overflow at the mantissa ceiling saturates to 2**(k-1) - 1; a
    per-tensor exponent cannot absorb a single element's carry.
    """
    _check_bit_width(k, _wide_ok)
    arr = np.ascontiguousarray(t, dtype=np.float32)
    sign, exp, m24 = _unpack_array(arr)
    return _map_m24(sign.ravel(), m24.ravel(), exp.ravel(), k, ctx, arr.shape)


def inverse_map(t: FxpTensor, extra_bits: int = 0) -> np.ndarray:
    """Non-linear inverse mapping of a fixed-point tensor back to float32.

    The shared exponent is conceptually replicated per element, then each
    mantissa is normalized by a leading-zero shift that decrements its own
    exponent.  `extra_bits` counts additional low-order mantissa bits of
    accumulator-valued tensors (0 for a plain FxpTensor); mantissas wider
    than 24 bits are rounded to nearest-even, the only rounding this
    direction ever needs.  Zero mantissas pack to +0.0 and exponents
    underflowing -126 flush to zero.
    """
    if t.shared_exponent is None:
        return np.zeros(t.shape, dtype=np.float32)
    unit = t.unit_exponent() - extra_bits
    sign, m24, exp = _to_m24(t.mantissas.ravel(), unit)
    return _pack_float32(sign, m24, exp).reshape(t.shape)


def wide_to_float(values: np.ndarray, unit_exponent: int) -> np.ndarray:
    """inverse_map for raw accumulator contents: values * 2**unit_exponent."""
    v = np.asarray(values, dtype=np.int64)
    sign, m24, exp = _to_m24(v.ravel(), unit_exponent)
    return _pack_float32(sign, m24, exp).reshape(v.shape)


def renormalize(values: np.ndarray, exponent: int, k: int,
                ctx: RoundingContext, _wide_ok: bool = False) -> FxpTensor:
    """Convert a wide-integer tensor (unit 2**exponent) to a k-bit FxpTensor.

    Bit-for-bit equal to map_to_fixed(wide_to_float(values, exponent))
    under the same RoundingContext schedule: normalize each element to a
    24-bit mantissa (nearest-even on excess bits, -126 underflow flush),
    derive the shared exponent from the max magnitude, shift, round per
    the context mode, saturate.
    """
    _check_bit_width(k, _wide_ok)
    v = np.asarray(values, dtype=np.int64)
    sign, m24, exp = _to_m24(v.ravel(), exponent)
    return _map_m24(sign, m24, exp, k, ctx, v.shape)


def renormalize_pairs(values: np.ndarray, unit_exponents: np.ndarray, k: int,
                      ctx: RoundingContext, _wide_ok: bool = False) -> FxpTensor:
    """renormalize for tensors whose elements carry individual unit exponents.

    Needed where per-channel scales meet inside a layer (normalization
    kernels); semantics per element are identical to `renormalize`.
    """
    _check_bit_width(k, _wide_ok)
    v = np.asarray(values, dtype=np.int64)
    u = np.broadcast_to(np.asarray(unit_exponents, dtype=np.int64), v.shape)
    sign, m24, exp = _to_m24(v.ravel(), u.ravel())
    return _map_m24(sign, m24, exp, k, ctx, v.shape)


# -------------------------------------------------------------------
# Serialization: DFXT little-endian container records
# -------------------------------------------------------------------

_DFXT_MAGIC = b"DFXT"
_DFXT_VERSION = 1


def to_bytes(t: FxpTensor) -> bytes:
    """Serialize one FxpTensor: magic, version u16, k u8, rank u8, dims u32[],
    shared exponent i16 (sentinel -32768), mantissas i8[]."""
    if t.bit_width > 8:
        raise InvalidBitWidth("DFXT records store i8 mantissas (k <= 8)")
    e = ZERO_EXP_SENTINEL if t.shared_exponent is None else t.shared_exponent
    head = struct.pack("<4sHBB", _DFXT_MAGIC, _DFXT_VERSION, t.bit_width,
                       len(t.shape))
    dims = struct.pack(f"<{len(t.shape)}I", *t.shape)
    body = t.mantissas.astype(np.int8).tobytes(order="C")
    return head + dims + struct.pack("<h", e) + body


def from_bytes(buf: bytes, offset: int = 0):
    """Deserialize one FxpTensor; returns (tensor, next_offset)."""
    magic, version, k, rank = struct.unpack_from("<4sHBB", buf, offset)
    if magic != _DFXT_MAGIC:
        raise ValueError(f"bad DFXT magic {magic!r}")
    if version != _DFXT_VERSION:
        raise ValueError(f"unsupported DFXT version {version}")
    offset += 8
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    (e,) = struct.unpack_from("<h", buf, offset)
    offset += 2
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    m = np.frombuffer(buf, dtype=np.int8, count=n, offset=offset).reshape(dims)
    offset += n
    exponent = None if e == ZERO_EXP_SENTINEL else e
    return FxpTensor(m.astype(np.int16), exponent, k), offset


def save(t: FxpTensor, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(t))


def load(path) -> FxpTensor:
    with open(path, "rb") as fh:
        t, _ = from_bytes(fh.read())
    return t


# -------------------------------------------------------------------
# Golden-vector text format for rounding tests
# -------------------------------------------------------------------

def format_golden_line(m24: int, keep_bits: int, draw: int, expected: int) -> str:
    return f"{m24:06x} {keep_bits} {draw:x} {expected:x}"


def parse_golden_line(line: str):
    """One case per line: `m24_hex keep_bits draw_hex expected_hex`."""
    m24_hex, keep, draw_hex, expected_hex = line.split()
    return int(m24_hex, 16), int(keep), int(draw_hex, 16), int(expected_hex, 16)


def load_golden_vectors(path):
    cases = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                cases.append(parse_golden_line(line))
    return cases
