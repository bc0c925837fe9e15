"""Reference range coder and quantized Gaussian CDF tables.

The coder is a carry-propagating, byte-oriented range coder with 32-bit
state and 16-bit cumulative-frequency precision. Every encoded segment is
terminated by a 5-byte flush, which is what makes each segment independently
decodable (and therefore truncatable at segment boundaries).

CDF construction deliberately avoids platform libm: ``portable_exp`` and
``portable_erfc`` are built from exactly-rounded IEEE-754 primitives only,
so an alternative coder backend written in another language can rebuild
bit-identical frequency tables from the same (mu, sigma, lo, hi).
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
TOP = 1 << 24
MASK32 = 0xFFFFFFFF
FLUSH_BYTES = 5

# Fixed-point scale used when converting float bin masses to integers.
_MASS_SCALE = float(1 << 30)


# ---------------------------------------------------------------------------
# Portable Gaussian math (exactly reproducible across implementations)
# ---------------------------------------------------------------------------

_INV_LN2 = 1.4426950408889634
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_INV_SQRT2 = 0.7071067811865476

# 1/k! for k = 12 .. 2, then the linear and constant terms; Horner order.
_EXP_COEFFS = (
    2.08767569878681e-09,
    2.505210838544172e-08,
    2.755731922398589e-07,
    2.7557319223985893e-06,
    2.48015873015873e-05,
    0.0001984126984126984,
    0.001388888888888889,
    0.008333333333333333,
    0.041666666666666664,
    0.16666666666666666,
    0.5,
    1.0,
    1.0,
)

# Rational erfc approximation (fractional error < 1.3e-7 for all arguments).
_ERFC_COEFFS = (
    0.17087277,
    -0.82215223,
    1.48851587,
    -1.13520398,
    0.27886807,
    -0.18628806,
    0.09678418,
    0.37409196,
    1.00002368,
)
_ERFC_C0 = -1.26551223


def portable_exp(x: np.ndarray) -> np.ndarray:
    """exp(x) from exactly-rounded primitives; valid for x <= ~1."""
    x = np.asarray(x, dtype=np.float64)
    x = np.clip(x, -745.0, 1.0)
    k = np.floor(x * _INV_LN2 + 0.5)
    r = (x - k * _LN2_HI) - k * _LN2_LO
    acc = np.full_like(r, _EXP_COEFFS[0])
    for c in _EXP_COEFFS[1:]:
        acc = acc * r + c
    return np.ldexp(acc, k.astype(np.int32))


def portable_erfc(x: np.ndarray) -> np.ndarray:
    """erfc(x) to ~1e-7 relative accuracy, from portable primitives."""
    x = np.asarray(x, dtype=np.float64)
    z = np.abs(x)
    t = 1.0 / (1.0 + 0.5 * z)
    poly = np.full_like(z, _ERFC_COEFFS[0])
    for c in _ERFC_COEFFS[1:]:
        poly = poly * t + c
    arg = -(z * z) + (poly * t + _ERFC_C0)
    ans = t * portable_exp(arg)
    ans = np.where(z > 26.0, 0.0, ans)
    return np.where(x >= 0.0, ans, 2.0 - ans)


def normal_bin_masses(
    mu: np.ndarray, sigma: np.ndarray, lo: int, hi: int
) -> np.ndarray:
    """Unit-bin Gaussian masses for symbols lo..hi.

    mu and sigma broadcast to (T,); the result has shape (T, hi-lo+1) with
    row t holding P(s - 0.5 < N(mu_t, sigma_t^2) <= s + 0.5) for each s.
    """
    if lo > hi:
        raise ValueError(f"empty symbol range [{lo}, {hi}]")
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    sv = np.arange(lo, hi + 1, dtype=np.float64)[None, :]
    d = sv - mu[:, None]
    s = sigma[:, None]
    a = (d - 0.5) / s
    b = (d + 0.5) / s
    # Three numerically-stable branches keep relative accuracy in the tails.
    right = 0.5 * (portable_erfc(a * _INV_SQRT2) - portable_erfc(b * _INV_SQRT2))
    left = 0.5 * (portable_erfc(-b * _INV_SQRT2) - portable_erfc(-a * _INV_SQRT2))
    center = 1.0 - 0.5 * (portable_erfc(-a * _INV_SQRT2) + portable_erfc(b * _INV_SQRT2))
    m = np.where(a >= 0.0, right, np.where(b <= 0.0, left, center))
    return np.maximum(m, 0.0)


def freqs_from_masses(masses: np.ndarray) -> np.ndarray:
    """Quantize float bin masses to integer frequencies summing to TOTAL.

    All-integer renormalization: only elementwise float ops feed it, so two
    implementations agree bit-exactly. Every bin ends >= 1; the rounding
    deficit goes to the (first) largest bin, and raising zero bins steals
    from the largest bins.
    """
    m = np.atleast_2d(np.asarray(masses, dtype=np.float64))
    nt, n = m.shape
    if n > TOTAL:
        raise ValueError(f"{n} symbols cannot share {TOTAL} frequency units")
    u = np.floor(m * _MASS_SCALE).astype(np.int64)
    total = u.sum(axis=1)
    degenerate = total <= 0
    if degenerate.any():
        u[degenerate] = 1
        total[degenerate] = n
    f = (u * TOTAL) // total[:, None]
    deficit = TOTAL - f.sum(axis=1)
    rows = np.arange(nt)
    f[rows, f.argmax(axis=1)] += deficit
    need = (f == 0).sum(axis=1)
    if need.any():
        f = np.maximum(f, 1)
        while need.any():
            imax = f.argmax(axis=1)
            take = np.minimum(need, f[rows, imax] - 1)
            f[rows, imax] -= take
            need -= take
    return f


@dataclass(frozen=True)
class CdfTable:
    """One symbol distribution: support [lo, hi] and 16-bit frequencies."""

    lo: int
    hi: int
    freq: np.ndarray  # (n,) int64, sum == TOTAL, all >= 1
    cum: np.ndarray  # (n+1,) int64, cum[0] == 0, cum[-1] == TOTAL

    @property
    def n_symbols(self) -> int:
        return self.hi - self.lo + 1


@dataclass(frozen=True)
class CdfTableSet:
    """A batch of distributions sharing one support [lo, hi]."""

    lo: int
    hi: int
    freq: np.ndarray  # (T, n) int64
    cum: np.ndarray  # (T, n+1) int64

    @property
    def n_tables(self) -> int:
        return self.freq.shape[0]


def _attach_cum(freq: np.ndarray) -> np.ndarray:
    cum = np.zeros(freq.shape[:-1] + (freq.shape[-1] + 1,), dtype=np.int64)
    np.cumsum(freq, axis=-1, out=cum[..., 1:])
    return cum


def table_from_freqs(lo: int, hi: int, freq: np.ndarray) -> CdfTable:
    freq = np.asarray(freq, dtype=np.int64)
    if freq.shape != (hi - lo + 1,):
        raise ValueError("frequency array does not match symbol range")
    if freq.min() < 1 or freq.sum() != TOTAL:
        raise ValueError("frequencies must be >= 1 and sum to %d" % TOTAL)
    return CdfTable(lo, hi, freq, _attach_cum(freq))


def build_cdf(mu: float, sigma: float, lo: int, hi: int) -> CdfTable:
    """Quantized Gaussian CDF table over the symbol range [lo, hi]."""
    if lo > hi:
        raise ValueError(f"lo={lo} exceeds hi={hi}")
    masses = normal_bin_masses(np.array([mu]), np.array([sigma]), lo, hi)
    freq = freqs_from_masses(masses)[0]
    return CdfTable(lo, hi, freq, _attach_cum(freq))


def build_cdf_batch(
    mu: np.ndarray, sigma: np.ndarray, lo: int, hi: int
) -> CdfTableSet:
    """Per-element Gaussian tables sharing one support."""
    if lo > hi:
        raise ValueError(f"lo={lo} exceeds hi={hi}")
    freq = freqs_from_masses(normal_bin_masses(mu, sigma, lo, hi))
    return CdfTableSet(lo, hi, freq, _attach_cum(freq))


def tableset_from_freqs(lo: int, hi: int, freq: np.ndarray) -> CdfTableSet:
    freq = np.asarray(freq, dtype=np.int64)
    if freq.ndim != 2 or freq.shape[1] != hi - lo + 1:
        raise ValueError("frequency matrix does not match symbol range")
    return CdfTableSet(lo, hi, freq, _attach_cum(freq))


# ---------------------------------------------------------------------------
# Coder
# ---------------------------------------------------------------------------


class RangeEncoder:
    """Byte-oriented range encoder with carry propagation."""

    def __init__(self) -> None:
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        low32 = self.low & MASK32
        carry = self.low >> 32
        if low32 < 0xFF000000 or carry:
            self.out.append((self.cache + carry) & 0xFF)
            fill = (0xFF + carry) & 0xFF
            for _ in range(self.cache_size - 1):
                self.out.append(fill)
            self.cache = (low32 >> 24) & 0xFF
            self.cache_size = 0
        self.cache_size += 1
        self.low = (low32 << 8) & MASK32

    def encode(self, cum_lo: int, cum_hi: int) -> None:
        """Encode one symbol given its cumulative bounds (total = TOTAL)."""
        r = self.range >> PRECISION
        self.low += r * cum_lo
        self.range = r * (cum_hi - cum_lo)
        while self.range < TOP:
            self._shift_low()
            self.range = (self.range << 8) & MASK32

    def finish(self) -> bytes:
        for _ in range(FLUSH_BYTES):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    """Decoder mirror of RangeEncoder; reads zero past end of input."""

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 1  # leading byte is always zero
        self.range = MASK32
        code = 0
        for _ in range(4):
            code = (code << 8) | self._next_byte()
        self.code = code

    def _next_byte(self) -> int:
        b = self.data[self.pos] if self.pos < len(self.data) else 0
        self.pos += 1
        return b

    def decode(self, cum) -> int:
        """Decode one symbol index against a cumulative table (list)."""
        r = self.range >> PRECISION
        target = self.code // r
        if target > TOTAL - 1:
            target = TOTAL - 1
        s = bisect_right(cum, target) - 1
        self.code -= r * cum[s]
        self.range = r * (cum[s + 1] - cum[s])
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next_byte()) & MASK32
            self.range = (self.range << 8) & MASK32
        return s


def _cum_rows(tables) -> tuple[list, bool]:
    if isinstance(tables, CdfTable):
        return tables.cum.tolist(), False
    return tables.cum.tolist(), True


def rc_encode(symbols, tables, table_idx=None) -> bytes:
    """Encode symbol values against per-symbol CDF tables.

    ``tables`` is a CdfTable (shared by all symbols) or a CdfTableSet with
    ``table_idx`` selecting the row per symbol (defaults to symbol order).
    """
    syms = np.asarray(symbols, dtype=np.int64).ravel()
    cum, batched = _cum_rows(tables)
    if syms.size and (syms.min() < tables.lo or syms.max() > tables.hi):
        raise ValueError(
            f"symbol out of table range [{tables.lo}, {tables.hi}]"
        )
    offs = (syms - tables.lo).tolist()
    enc = RangeEncoder()
    if not batched:
        for s in offs:
            enc.encode(cum[s], cum[s + 1])
        return enc.finish()
    if table_idx is None:
        idx = range(len(offs))
    else:
        idx = np.asarray(table_idx, dtype=np.int64).ravel().tolist()
        if len(idx) != len(offs):
            raise ValueError("table_idx length does not match symbols")
    for t, s in zip(idx, offs):
        row = cum[t]
        enc.encode(row[s], row[s + 1])
    return enc.finish()


def rc_decode(data: bytes, tables, count: int, table_idx=None) -> np.ndarray:
    """Decode ``count`` symbol values; inverse of rc_encode."""
    if count == 0:
        return np.zeros(0, dtype=np.int32)
    cum, batched = _cum_rows(tables)
    dec = RangeDecoder(data)
    out = np.empty(count, dtype=np.int32)
    if not batched:
        for i in range(count):
            out[i] = dec.decode(cum)
    else:
        if table_idx is None:
            idx = range(count)
        else:
            idx = np.asarray(table_idx, dtype=np.int64).ravel().tolist()
            if len(idx) != count:
                raise ValueError("table_idx length does not match count")
        for i, t in enumerate(idx):
            out[i] = dec.decode(cum[t])
    return out + tables.lo
