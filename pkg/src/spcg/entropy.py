"""Integer range coder plus a Laplace factorized model for integer features.

The coder is LZMA-style: 32-bit range, byte-wise renormalisation below
2^24, carry propagation through a cached byte.  All coder state is Python
integers, so encoder and decoder agree bit-for-bit on every platform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_BITS = 16
PROB_ONE = 1 << PROB_BITS
P_CLAMP = 1e-6
FREQ_BITS = 20

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class TruncatedPayload(ValueError):
    pass


def clamp_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.size and not np.all(np.isfinite(p)):
        raise ValueError("probability outside (0,1) after clamping")
    p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    return p


def quantize_probs(probs) -> np.ndarray:
    """P(bit = 1) as 16-bit integers in [1, 2^16 - 1]."""
    p = clamp_probs(probs)
    q = np.rint(p * PROB_ONE).astype(np.int64)
    return np.clip(q, 1, PROB_ONE - 1)


def ideal_bits(symbols, probs) -> float:
    """Sum of -log2 q_j over a binary stream, q_j the probability of the coded symbol."""
    s = np.asarray(symbols, dtype=np.int64)
    p = clamp_probs(probs)
    q = np.where(s == 1, p, 1.0 - p)
    return float(-np.log2(q).sum())


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._done = False

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self.cache
            out = self.out
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, lo: int, hi: int, bits: int):
        """Narrow to the cumulative-frequency interval [lo, hi) out of 2^bits."""
        r = self.range
        a = (r * lo) >> bits
        self.low += a
        self.range = ((r * hi) >> bits) - a
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, bits: Sequence[int], p16: Sequence[int]):
        low, rng = self.low, self.range
        for b, p in zip(bits, p16):
            bound = (rng * p) >> PROB_BITS
            if b:
                rng = bound
            else:
                low += bound
                rng -= bound
            while rng < _TOP:
                rng <<= 8
                self.low = low
                self._shift_low()
                low = self.low
        self.low, self.range = low, rng

    def encode_equiprobable(self, value: int, nbits: int):
        for i in range(nbits - 1, -1, -1):
            self.encode_bits(((value >> i) & 1,), (PROB_ONE // 2,))

    def finish(self) -> bytes:
        if not self._done:
            for _ in range(5):
                self._shift_low()
            self._done = True
        # the first emitted byte is always zero: low + range never exceeds 2^32
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, payload: bytes):
        self.data = bytes(payload)
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedPayload("truncated payload")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _normalize(self):
        while self.range < _TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next()) & _MASK32

    def decode(self, cum: Sequence[int], bits: int) -> int:
        """Symbol s with cum[s] <= target < cum[s+1]; ``cum`` starts at 0, ends at 2^bits."""
        r, code = self.range, self.code
        lo_i, hi_i = 0, len(cum) - 1
        while hi_i - lo_i > 1:
            mid = (lo_i + hi_i) >> 1
            if (r * cum[mid]) >> bits <= code:
                lo_i = mid
            else:
                hi_i = mid
        a = (r * cum[lo_i]) >> bits
        b = (r * cum[lo_i + 1]) >> bits
        if not a <= code < b:
            raise ValueError("corrupt payload")
        self.code = code - a
        self.range = b - a
        self._normalize()
        return lo_i

    def decode_bits(self, p16: Iterable[int]) -> list[int]:
        out = []
        rng, code = self.range, self.code
        data, pos, n = self.data, self.pos, len(self.data)
        for p in p16:
            bound = (rng * p) >> PROB_BITS
            if code < bound:
                rng = bound
                out.append(1)
            else:
                code -= bound
                rng -= bound
                out.append(0)
            while rng < _TOP:
                if pos >= n:
                    raise TruncatedPayload("truncated payload")
                rng <<= 8
                code = ((code << 8) | data[pos]) & _MASK32
                pos += 1
        self.range, self.code, self.pos = rng, code, pos
        return out

    def decode_equiprobable(self, nbits: int) -> int:
        v = 0
        for _ in range(nbits):
            v = (v << 1) | self.decode_bits((PROB_ONE // 2,))[0]
        return v


class BinaryEncoder:
    """Binary arithmetic encoder fed with externally supplied probabilities.

    Tracks the ideal cost sum(-log2 q) alongside the bytes it produces.
    """

    def __init__(self):
        self._rc = RangeEncoder()
        self.count = 0
        self.ideal_bits = 0.0

    def encode(self, symbols, probs):
        s = np.asarray(symbols, dtype=np.int64).ravel()
        p = np.asarray(probs, dtype=np.float64).ravel()
        if s.shape != p.shape:
            raise ValueError("symbols and probabilities must align")
        if s.size and not np.all((s == 0) | (s == 1)):
            raise ValueError("symbols must be 0/1")
        p16 = quantize_probs(p)
        self.ideal_bits += ideal_bits(s, p)
        self.count += s.size
        self._rc.encode_bits(s.tolist(), p16.tolist())

    def finish(self) -> bytes:
        return self._rc.finish()


class BinaryDecoder:
    def __init__(self, payload: bytes):
        self._rc = RangeDecoder(payload)
        self.count = 0

    def decode(self, probs) -> np.ndarray:
        p16 = quantize_probs(np.asarray(probs, dtype=np.float64).ravel())
        bits = self._rc.decode_bits(p16.tolist())
        self.count += len(bits)
        return np.asarray(bits, dtype=np.int64)


@dataclass
class BinarySymbolStream:
    symbols: Sequence[int]
    probs: Sequence[float]

    def __post_init__(self):
        if len(self.symbols) != len(self.probs):
            raise ValueError("symbols and probs must have equal length")


def ac_encode(stream: BinarySymbolStream) -> bytes:
    enc = BinaryEncoder()
    enc.encode(stream.symbols, stream.probs)
    return enc.finish()


def ac_decode(payload: bytes, probs: "Sequence[float] | Callable[[int], float]", n: int) -> np.ndarray:
    """Decode ``n`` bits.  ``probs`` is a sequence or a callable ``j -> p_j`` queried lazily."""
    dec = BinaryDecoder(payload)
    if callable(probs):
        return np.array([dec.decode([probs(j)])[0] for j in range(n)], dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)[:n]
    if probs.shape[0] < n:
        raise ValueError("fewer probabilities than symbols")
    return dec.decode(probs)


# ---------------------------------------------------------------------------
# Laplace factorized model


_LOG2E = 1.0 / math.log(2.0)


def laplace_log_mass(y, b):
    """ln of the Laplace(0, b) mass on [y - 0.5, y + 0.5], elementwise, stable in the tails."""
    y = np.asarray(y, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ay = np.abs(y)
    tail = ay >= 0.5
    # outside the central bin both bin edges lie on one side of zero
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        log_tail = math.log(0.5) - (ay - 0.5) / b + np.log(-np.expm1(-1.0 / b))
        centre = 1.0 - 0.5 * (np.exp(-(0.5 - y) / b) + np.exp(-(0.5 + y) / b))
        log_centre = np.log(centre)
    return np.where(tail, log_tail, log_centre)


def laplace_rate_and_grads(y, b):
    """Bits -log2 mass(y, b) with derivatives with respect to y and b."""
    y = np.asarray(y, dtype=np.float64)
    b = np.broadcast_to(np.asarray(b, dtype=np.float64), y.shape)
    ay = np.abs(y)
    sgn = np.sign(y)
    tail = ay >= 0.5
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        e1 = np.expm1(1.0 / b)  # e^{1/b} - 1
        # tail: ln m = ln .5 - (|y| - .5)/b + ln(1 - e^{-1/b})
        dln_dy_tail = -sgn / b
        dln_db_tail = (ay - 0.5) / b**2 - (1.0 / b**2) / e1
        a1 = np.exp(-(0.5 - y) / b)
        a2 = np.exp(-(0.5 + y) / b)
        m = 1.0 - 0.5 * (a1 + a2)
        dm_dy = 0.5 * (a2 - a1) / b
        dm_db = -0.5 * (a1 * (0.5 - y) + a2 * (0.5 + y)) / b**2
        dln_dy_c = dm_dy / m
        dln_db_c = dm_db / m
    ln_m = laplace_log_mass(y, b)
    dln_dy = np.where(tail, dln_dy_tail, dln_dy_c)
    dln_db = np.where(tail, dln_db_tail, dln_db_c)
    return -ln_m * _LOG2E, -dln_dy * _LOG2E, -dln_db * _LOG2E


def factorized_rate(q, b) -> float | np.ndarray:
    """-log2 of the Laplace(0, b) mass of the unit bin around integer ``q``."""
    if np.any(np.asarray(b) <= 0):
        raise ValueError("Laplace scale must be positive")
    r = -laplace_log_mass(q, b) * _LOG2E
    return float(r) if np.ndim(r) == 0 else r


def _exp_golomb_bits(v: int) -> int:
    return 2 * (v + 1).bit_length() - 1


def escape_bits(q: int, L: int) -> int:
    """Raw bits spent after the escape symbol: sign plus Exp-Golomb magnitude."""
    return 1 + _exp_golomb_bits(abs(q) - L - 1)


def support_bound(b: float) -> int:
    """Symbols within [-L, L] get their own table slot; the Laplace tail past L is < 1e-6."""
    return int(min(max(2, math.ceil(14.0 * b) + 1), 4096))


class FactorizedModel:
    """Per-channel zero-mean Laplace model for integer feature values.

    ``scales`` are the learned b_c.  Each channel gets a frequency table
    over [-L_c, L_c] plus one escape slot; escaped values send a sign bit
    and an Exp-Golomb magnitude with equiprobable bits.
    """

    def __init__(self, scales):
        scales = np.asarray(scales, dtype=np.float64).ravel()
        if scales.size == 0 or np.any(~(scales > 0)):
            raise ValueError("Laplace scales must be positive")
        self.scales = scales
        self.bounds = [support_bound(b) for b in scales]
        self._tables = [self._table(b, L) for b, L in zip(scales, self.bounds)]

    @property
    def channels(self) -> int:
        return self.scales.size

    @staticmethod
    def _table(b: float, L: int) -> list[int]:
        support = np.arange(-L, L + 1)
        mass = np.exp(laplace_log_mass(support, b))
        esc = max(1.0 - mass.sum(), 0.0)
        mass = np.append(mass, esc)
        total = 1 << FREQ_BITS
        nsym = mass.size
        freq = 1 + np.floor(mass * (total - nsym)).astype(np.int64)
        freq[int(np.argmax(mass))] += total - int(freq.sum())
        cum = np.concatenate([[0], np.cumsum(freq)])
        return [int(v) for v in cum]

    def rate(self, q) -> float:
        """Ideal bits (model masses, escape raw bits included) for an (n, C) integer array."""
        q = np.asarray(q, dtype=np.int64).reshape(-1, self.channels)
        total = 0.0
        for c in range(self.channels):
            col = q[:, c]
            L = self.bounds[c]
            inside = np.abs(col) <= L
            total += float(factorized_rate(col[inside], self.scales[c]).sum()) if inside.any() else 0.0
            if (~inside).any():
                cum = self._tables[c]
                p_esc = (cum[-1] - cum[-2]) / (1 << FREQ_BITS)
                for v in col[~inside]:
                    total += -math.log2(p_esc) + escape_bits(int(v), L)
        return total

    def encode(self, q, enc: RangeEncoder | None = None) -> bytes:
        q = np.asarray(q, dtype=np.int64).reshape(-1, self.channels)
        own = enc is None
        enc = enc or RangeEncoder()
        for row in q.tolist():
            for c, v in enumerate(row):
                L = self.bounds[c]
                cum = self._tables[c]
                if -L <= v <= L:
                    s = v + L
                    enc.encode(cum[s], cum[s + 1], FREQ_BITS)
                else:
                    s = 2 * L + 1
                    enc.encode(cum[s], cum[s + 1], FREQ_BITS)
                    enc.encode_equiprobable(1 if v < 0 else 0, 1)
                    mag = abs(v) - L
                    nb = mag.bit_length()
                    enc.encode_equiprobable(0, nb - 1)
                    enc.encode_equiprobable(mag, nb)
        return enc.finish() if own else b""

    def decode(self, payload_or_dec, n: int) -> np.ndarray:
        dec = payload_or_dec if isinstance(payload_or_dec, RangeDecoder) else RangeDecoder(payload_or_dec)
        out = np.zeros((n, self.channels), dtype=np.int64)
        for i in range(n):
            for c in range(self.channels):
                L = self.bounds[c]
                s = dec.decode(self._tables[c], FREQ_BITS)
                if s <= 2 * L:
                    out[i, c] = s - L
                    continue
                neg = dec.decode_equiprobable(1)
                zeros = 0
                while dec.decode_equiprobable(1) == 0:
                    zeros += 1
                    if zeros > 64:
                        raise ValueError("corrupt escape code")
                mag = (1 << zeros) | dec.decode_equiprobable(zeros)
                v = mag + L
                out[i, c] = -v if neg else v
        return out


def factorized_encode(q, model: FactorizedModel) -> bytes:
    return model.encode(q)


def factorized_decode(payload: bytes, model: FactorizedModel, n: int) -> np.ndarray:
    return model.decode(payload, n)
