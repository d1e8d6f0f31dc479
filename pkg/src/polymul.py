"""
ScaForge Polynomial Arithmetic
~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~
Multiplication in R_q = Z_{2^13}[x]/(x^256 + 1) for Saber.

The fast path is a striding Toom-Cook-4: a polynomial is split with stride 4
into limbs A_i(y), y = x^4, living in the subring y^64 = -1, so the seven
pointwise products are 64-coefficient negacyclic products. Evaluations are
carried in 16-bit words; the three guard bits above q make the final
division by 8 exact. Matrix-vector products accumulate pointwise products in
the evaluation domain and interpolate once per output polynomial.

MemoryMeter counts the work and the live 16-bit words, result path and
operand evaluations separately, so the lazy schedule can be compared with an
eager one on the same striding split and with conventional contiguous Toom-4.
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, InterpolationOverflow, UsageError
from .workers import ordered_map, resolve_threads

logger = logging.getLogger(__name__)

N = 256
Q_BITS = 13
Q = 1 << Q_BITS
Q_MASK = Q - 1
WORD_MASK = 0xFFFF

N_LIMBS = 4
LIMB = N // N_LIMBS                     # 64
POINTS = (0, 1, -1, 2, -2, 3)           # plus infinity
N_SLOTS = len(POINTS) + 1               # 7

# PolyRq: (256,) integer array with coefficients in [0, 2^13).
# PolyEval: (7, 64) integer array of 16-bit words, one row per evaluation point.
PolyRq = np.ndarray
PolyEval = np.ndarray


# ── Metering ───────────────────────────────────────────────────────────────

@dataclass
class MemoryMeter:
    """
    Work counters and live 16-bit words.

    Live words sit in two pools: the result path (slot products,
    accumulators, interpolation outputs, row sums) and operand evaluations.
    `peak_total_words` is the largest sum of both pools at one moment.
    """
    multiplications: int = 0
    evaluations: int = 0
    pointwise: int = 0
    interpolations: int = 0
    current_words: int = 0
    peak_words: int = 0
    operand_words: int = 0
    peak_operand_words: int = 0
    peak_total_words: int = 0

    def alloc(self, words: int, operand: bool = False) -> None:
        if operand:
            self.operand_words += words
        else:
            self.current_words += words
        self.peak_words = max(self.peak_words, self.current_words)
        self.peak_operand_words = max(self.peak_operand_words, self.operand_words)
        self.peak_total_words = max(self.peak_total_words, self.current_words + self.operand_words)

    def free(self, words: int, operand: bool = False) -> None:
        if operand:
            self.operand_words -= words
        else:
            self.current_words -= words
        assert self.current_words >= 0 and self.operand_words >= 0, "freed more words than allocated"

    def absorb(self, tasks: Sequence["MemoryMeter"], concurrency: int = 1) -> "MemoryMeter":
        """
        Fold finished sub-task meters into this one.

        Counters add. Up to `concurrency` tasks were live together, so each
        peak grows by the sum of that many of the largest task peaks.
        """
        live = max(1, min(concurrency, len(tasks)))

        def top(values: list[int]) -> int:
            return sum(sorted(values, reverse=True)[:live])

        for t in tasks:
            self.multiplications += t.multiplications
            self.evaluations += t.evaluations
            self.pointwise += t.pointwise
            self.interpolations += t.interpolations
        if tasks:
            self.peak_words = max(self.peak_words, self.current_words + top([t.peak_words for t in tasks]))
            self.peak_operand_words = max(
                self.peak_operand_words, self.operand_words + top([t.peak_operand_words for t in tasks])
            )
            self.peak_total_words = max(
                self.peak_total_words,
                self.current_words + self.operand_words + top([t.peak_total_words for t in tasks]),
            )
        return self

    def to_dict(self) -> dict:
        return {
            "multiplications": self.multiplications,
            "evaluations": self.evaluations,
            "pointwise": self.pointwise,
            "interpolations": self.interpolations,
            "peak_words": self.peak_words,
            "peak_operand_words": self.peak_operand_words,
            "peak_total_words": self.peak_total_words,
        }


def _meter(meter: Optional[MemoryMeter]) -> MemoryMeter:
    return meter if meter is not None else MemoryMeter()


# ── Ring Helpers ───────────────────────────────────────────────────────────

def as_poly(a: Sequence[int]) -> PolyRq:
    """Validate and normalise a ring element to int64 coefficients."""
    a = np.asarray(a, dtype=np.int64)
    if a.shape != (N,):
        raise DimensionError(f"ring element needs {N} coefficients, got shape {a.shape}")
    return a & Q_MASK


def monomial(degree: int, coeff: int = 1) -> PolyRq:
    p = np.zeros(N, dtype=np.int64)
    p[degree] = coeff & Q_MASK
    return p


def _negacyclic_fold(full: np.ndarray, n: int) -> np.ndarray:
    """Reduce a product of two length-n polynomials modulo x^n + 1."""
    out = full[:n].copy()
    out[: n - 1] -= full[n:]
    return out


def poly_mul_schoolbook(a: PolyRq, b: PolyRq) -> PolyRq:
    """Negacyclic convolution mod 2^13."""
    a, b = as_poly(a), as_poly(b)
    return _negacyclic_fold(np.convolve(a, b), N) & Q_MASK


def poly_add(a: PolyRq, b: PolyRq) -> PolyRq:
    return (np.asarray(a, dtype=np.int64) + np.asarray(b, dtype=np.int64)) & Q_MASK


# ── Striding Split ─────────────────────────────────────────────────────────

def striding_split(a: PolyRq) -> np.ndarray:
    """(4, 64) limbs with limb_i[t] = a[4t + i]."""
    return as_poly(a).reshape(LIMB, N_LIMBS).T.copy()


def striding_merge(limbs: np.ndarray) -> PolyRq:
    limbs = np.asarray(limbs, dtype=np.int64)
    if limbs.shape != (N_LIMBS, LIMB):
        raise DimensionError(f"need ({N_LIMBS}, {LIMB}) limbs, got {limbs.shape}")
    return limbs.T.reshape(N).copy()


# ── Evaluation ─────────────────────────────────────────────────────────────

EVAL_MATRIX = np.array(
    [[p ** i for i in range(N_LIMBS)] for p in POINTS] + [[0, 0, 0, 1]],
    dtype=np.int64,
)


def toom4_evaluate(limbs: np.ndarray, meter: Optional[MemoryMeter] = None) -> PolyEval:
    """Evaluate sum_i limb_i * X^i at 0, 1, -1, 2, -2, 3 and infinity, mod 2^16."""
    limbs = np.asarray(limbs, dtype=np.int64)
    if limbs.shape[0] != N_LIMBS:
        raise DimensionError(f"need {N_LIMBS} limbs, got {limbs.shape[0]}")
    if meter is not None:
        meter.evaluations += 1
    return (EVAL_MATRIX @ limbs) & WORD_MASK


def toom4_evaluate_slot(limbs: np.ndarray, slot: int) -> np.ndarray:
    """One row of toom4_evaluate, computed on its own."""
    return (EVAL_MATRIX[slot] @ np.asarray(limbs, dtype=np.int64)) & WORD_MASK


def _slot_product_schoolbook(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    return np.convolve(a, b), a.size * b.size


def _slot_product_karatsuba(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    """One Karatsuba level over schoolbook halves."""
    h = a.size // 2
    a0, a1, b0, b1 = a[:h], a[h:], b[:h], b[h:]
    low = np.convolve(a0, b0)
    high = np.convolve(a1, b1)
    mid = np.convolve(a0 + a1, b0 + b1) - low - high
    out = np.zeros(2 * a.size - 1, dtype=np.int64)
    out[: low.size] += low
    out[h: h + mid.size] += mid
    out[2 * h: 2 * h + high.size] += high
    return out, 3 * h * h


def _slot_product(a: np.ndarray, b: np.ndarray, karatsuba: bool) -> tuple[np.ndarray, int]:
    if karatsuba:
        return _slot_product_karatsuba(a, b)
    return _slot_product_schoolbook(a, b)


def _slot_mul(ea_k: np.ndarray, eb_k: np.ndarray, meter: MemoryMeter, karatsuba: bool) -> np.ndarray:
    """Negacyclic slot product mod 2^16; the raw 127-word product is live while it is folded."""
    meter.alloc(2 * LIMB - 1)
    full, mults = _slot_product(ea_k, eb_k, karatsuba)
    meter.multiplications += mults
    product = _negacyclic_fold(full, LIMB) & WORD_MASK
    meter.free(2 * LIMB - 1)
    return product


def eval_pointwise_mul(
    ea: PolyEval,
    eb: PolyEval,
    meter: Optional[MemoryMeter] = None,
    karatsuba: bool = False,
    acc: Optional[PolyEval] = None,
) -> PolyEval:
    """
    Slot-wise negacyclic (y^64 = -1) products mod 2^16.

    With `acc` given, each slot product is added into it as soon as it is
    formed and `acc` is returned; only one slot's temporary is ever live.
    """
    ea = np.asarray(ea, dtype=np.int64)
    eb = np.asarray(eb, dtype=np.int64)
    if ea.shape != (N_SLOTS, LIMB) or eb.shape != (N_SLOTS, LIMB):
        raise DimensionError(f"evaluations must have shape ({N_SLOTS}, {LIMB})")
    m = _meter(meter)
    out = acc if acc is not None else np.zeros((N_SLOTS, LIMB), dtype=np.int64)
    if acc is None:
        m.alloc(N_SLOTS * LIMB)

    for k in range(N_SLOTS):
        product = _slot_mul(ea[k], eb[k], m, karatsuba)
        out[k] = product if acc is None else (out[k] + product) & WORD_MASK
    m.pointwise += N_SLOTS
    if acc is None:
        m.free(N_SLOTS * LIMB)
    return out


def eval_accumulate(acc: PolyEval, prod: PolyEval) -> PolyEval:
    acc = np.asarray(acc, dtype=np.int64)
    prod = np.asarray(prod, dtype=np.int64)
    if acc.shape != prod.shape:
        raise DimensionError(f"shape mismatch {acc.shape} vs {prod.shape}")
    return (acc + prod) & WORD_MASK


# ── Interpolation ──────────────────────────────────────────────────────────

def _scaled_inverse_vandermonde() -> tuple[np.ndarray, int]:
    """Integer matrix D * V^-1 for the finite points, with D the smallest common denominator."""
    size = len(POINTS)
    rows = [[Fraction(p) ** k for k in range(size)] + [Fraction(int(i == r)) for i in range(size)]
            for r, p in enumerate(POINTS)]
    for col in range(size):
        pivot = next(r for r in range(col, size) if rows[r][col] != 0)
        rows[col], rows[pivot] = rows[pivot], rows[col]
        inv = 1 / rows[col][col]
        rows[col] = [v * inv for v in rows[col]]
        for r in range(size):
            if r != col and rows[r][col] != 0:
                f = rows[r][col]
                rows[r] = [v - f * w for v, w in zip(rows[r], rows[col])]
    inverse = [row[size:] for row in rows]
    denom = 1
    for row in inverse:
        for v in row:
            denom = denom * v.denominator // math.gcd(denom, v.denominator)
    scaled = np.array([[int(v * denom) for v in row] for row in inverse], dtype=np.int64)
    return scaled, denom


INTERP_MATRIX, INTERP_DENOM = _scaled_inverse_vandermonde()      # denominator 120 = 8 * 15
INTERP_SHIFT = 3
INTERP_ODD = INTERP_DENOM >> INTERP_SHIFT
assert INTERP_ODD << INTERP_SHIFT == INTERP_DENOM and INTERP_ODD % 2 == 1
INTERP_ODD_INV = pow(INTERP_ODD, -1, Q)
INF_POWERS = np.array([p ** 6 for p in POINTS], dtype=np.int64)


def _interpolate_limbs(w: np.ndarray) -> np.ndarray:
    """Seven X-limb coefficient blocks of the degree-6 product, mod 2^13."""
    w = np.asarray(w, dtype=np.int64)
    c6 = w[-1]
    shifted = (w[:-1] - INF_POWERS[:, None] * c6[None, :]) & WORD_MASK
    scaled = (INTERP_MATRIX @ shifted) & WORD_MASK
    if np.any(scaled & ((1 << INTERP_SHIFT) - 1)):
        raise InterpolationOverflow("guard bits not clear before the division by 8")
    limbs = ((scaled >> INTERP_SHIFT) * INTERP_ODD_INV) & Q_MASK
    return np.vstack([limbs, c6 & Q_MASK])


def _multiply_by_y(c: np.ndarray) -> np.ndarray:
    """c(y) * y in Z[y]/(y^64 + 1)."""
    out = np.empty_like(c)
    out[1:] = c[:-1]
    out[0] = -c[-1]
    return out


def toom4_interpolate(acc: PolyEval, meter: Optional[MemoryMeter] = None) -> PolyRq:
    """Interpolate seven slots back to a ring element; x^4 = y folds limbs 4..6."""
    acc = np.asarray(acc, dtype=np.int64)
    if acc.shape != (N_SLOTS, LIMB):
        raise DimensionError(f"evaluations must have shape ({N_SLOTS}, {LIMB})")
    c = _interpolate_limbs(acc)
    limbs = c[:N_LIMBS].copy()
    for k in range(N_LIMBS, N_SLOTS):
        limbs[k - N_LIMBS] += _multiply_by_y(c[k])
    if meter is not None:
        meter.interpolations += 1
    return striding_merge(limbs & Q_MASK) & Q_MASK


def poly_mul_toom4(a: PolyRq, b: PolyRq, meter: Optional[MemoryMeter] = None, karatsuba: bool = False) -> PolyRq:
    """Single product through split -> evaluate -> pointwise -> interpolate."""
    ea = toom4_evaluate(striding_split(a), meter)
    eb = toom4_evaluate(striding_split(b), meter)
    return toom4_interpolate(eval_pointwise_mul(ea, eb, meter, karatsuba), meter)


# ── Lazy Matrix-Vector ─────────────────────────────────────────────────────

def _as_poly_vector(v: Sequence, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.int64)
    if v.ndim != 2 or v.shape[1] != N:
        raise DimensionError(f"{name} must be a vector of ring elements, got shape {v.shape}")
    return v & Q_MASK


def _as_poly_matrix(a: Sequence) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    if a.ndim != 3 or a.shape[0] != a.shape[1] or a.shape[2] != N:
        raise DimensionError(f"matrix must be l x l ring elements, got shape {a.shape}")
    return a & Q_MASK


def _cache_evaluations(
    vec: np.ndarray,
    meter: MemoryMeter,
    split: Optional[Callable[[PolyRq], np.ndarray]] = None,
) -> list[PolyEval]:
    """Evaluate each vector entry once; the cache stays live as operand words."""
    split = striding_split if split is None else split
    evals = [toom4_evaluate(split(v), meter) for v in vec]
    meter.alloc(len(evals) * N_SLOTS * LIMB, operand=True)
    return evals


def _lazy_row(row_polys: Sequence[np.ndarray], evals: Sequence[PolyEval], karatsuba: bool) -> tuple[PolyRq, MemoryMeter]:
    """
    One output polynomial: multiply-accumulate into a 7x64 accumulator,
    evaluating each a_ij one slot at a time, then interpolate once.
    """
    meter = MemoryMeter()
    acc = np.zeros((N_SLOTS, LIMB), dtype=np.int64)
    meter.alloc(acc.size)
    for a_ij, es in zip(row_polys, evals):
        limbs = striding_split(a_ij)
        meter.evaluations += 1
        for k in range(N_SLOTS):
            meter.alloc(LIMB, operand=True)
            ea_k = toom4_evaluate_slot(limbs, k)
            acc[k] = (acc[k] + _slot_mul(ea_k, es[k], meter, karatsuba)) & WORD_MASK
            meter.free(LIMB, operand=True)
        meter.pointwise += N_SLOTS
    meter.alloc(N)
    out = toom4_interpolate(acc, meter)
    meter.free(acc.size)
    meter.free(N)
    return out, meter


def matvec_mul_lazy(
    a: Sequence,
    s: Sequence,
    meter: Optional[MemoryMeter] = None,
    transpose: bool = False,
    karatsuba: bool = False,
    threads: Optional[int] = 1,
) -> np.ndarray:
    """
    A.s (or A^T.s) with one interpolation per output polynomial.

    Evaluations of s are computed once and reused across rows; each row
    accumulates its pointwise products in a single 7x64 accumulator. Rows
    running on separate threads add their peaks.
    """
    mat = _as_poly_matrix(a)
    vec = _as_poly_vector(s, "s")
    l = mat.shape[0]
    if vec.shape[0] != l:
        raise DimensionError(f"matrix is {l}x{l} but vector has {vec.shape[0]} entries")
    if transpose:
        mat = mat.transpose(1, 0, 2)
    m = _meter(meter)
    n_threads = resolve_threads() if threads is None else max(1, threads)

    evals = _cache_evaluations(vec, m)
    rows = ordered_map(lambda i: _lazy_row(mat[i], evals, karatsuba), range(l), threads=n_threads)
    m.absorb([row_meter for _, row_meter in rows], concurrency=n_threads)
    m.free(l * N_SLOTS * LIMB, operand=True)
    return np.stack([r for r, _ in rows])


def inner_prod_lazy(
    b: Sequence,
    s: Sequence,
    meter: Optional[MemoryMeter] = None,
    karatsuba: bool = False,
) -> PolyRq:
    """sum_j b_j * s_j with a single interpolation."""
    bv = _as_poly_vector(b, "b")
    sv = _as_poly_vector(s, "s")
    if bv.shape != sv.shape:
        raise DimensionError(f"vector shapes differ: {bv.shape} vs {sv.shape}")
    m = _meter(meter)
    evals = _cache_evaluations(sv, m)
    out, row_meter = _lazy_row(bv, evals, karatsuba)
    m.absorb([row_meter])
    m.free(len(sv) * N_SLOTS * LIMB, operand=True)
    return out


def matvec_mul_schoolbook(a: Sequence, s: Sequence, transpose: bool = False) -> np.ndarray:
    mat = _as_poly_matrix(a)
    vec = _as_poly_vector(s, "s")
    if transpose:
        mat = mat.transpose(1, 0, 2)
    out = np.zeros((mat.shape[0], N), dtype=np.int64)
    for i in range(mat.shape[0]):
        for j in range(mat.shape[1]):
            out[i] = poly_add(out[i], poly_mul_schoolbook(mat[i, j], vec[j]))
    return out


# ── Eager References ───────────────────────────────────────────────────────

EAGER_SPLITS = ("striding", "contiguous")


def _contiguous_split(a: PolyRq) -> np.ndarray:
    return as_poly(a).reshape(N_LIMBS, LIMB)


def _eager_striding_product(a: PolyRq, eb: PolyEval, m: MemoryMeter, karatsuba: bool) -> PolyRq:
    """Same slots as the lazy row, but the product is interpolated on its own."""
    limbs = striding_split(a)
    m.evaluations += 1
    products = np.zeros((N_SLOTS, LIMB), dtype=np.int64)
    m.alloc(products.size)
    for k in range(N_SLOTS):
        m.alloc(LIMB, operand=True)
        products[k] = _slot_mul(toom4_evaluate_slot(limbs, k), eb[k], m, karatsuba)
        m.free(LIMB, operand=True)
    m.pointwise += N_SLOTS
    m.alloc(N)
    out = toom4_interpolate(products, m)
    m.free(products.size)
    m.free(N)
    return out


def _eager_contiguous_product(a: PolyRq, eb: PolyEval, m: MemoryMeter, karatsuba: bool) -> PolyRq:
    """
    Conventional Toom-4: contiguous 64-coefficient limbs, full 127-coefficient
    slot products, a 511-coefficient unreduced product, then x^256 = -1.
    """
    ea = toom4_evaluate(_contiguous_split(a), m)
    m.alloc(ea.size, operand=True)

    width = 2 * LIMB - 1
    products = np.zeros((N_SLOTS, width), dtype=np.int64)
    m.alloc(products.size)
    for k in range(N_SLOTS):
        full, mults = _slot_product(ea[k], eb[k], karatsuba)
        m.multiplications += mults
        products[k] = full & WORD_MASK
    m.pointwise += N_SLOTS
    m.free(ea.size, operand=True)

    unreduced = np.zeros(2 * N - 1, dtype=np.int64)
    m.alloc(unreduced.size)
    blocks = _interpolate_limbs(products)
    m.interpolations += 1
    for k in range(N_SLOTS):
        unreduced[k * LIMB: k * LIMB + width] += blocks[k]
    m.free(products.size)
    m.alloc(N)
    out = _negacyclic_fold(unreduced, N) & Q_MASK
    m.free(unreduced.size)
    m.free(N)
    return out


def _eager_split(split: str) -> tuple[Callable, Callable]:
    if split not in EAGER_SPLITS:
        raise UsageError(f"split must be one of {EAGER_SPLITS}, got {split!r}")
    if split == "striding":
        return striding_split, _eager_striding_product
    return _contiguous_split, _eager_contiguous_product


def poly_mul_toom4_eager(
    a: PolyRq,
    b: PolyRq,
    meter: Optional[MemoryMeter] = None,
    karatsuba: bool = False,
    split: str = "contiguous",
) -> PolyRq:
    """Single product through one of the eager schedules."""
    splitter, product = _eager_split(split)
    m = _meter(meter)
    eb = _cache_evaluations(as_poly(b)[None, :], m, splitter)[0]
    out = product(a, eb, m, karatsuba)
    m.free(eb.size, operand=True)
    return out


def matvec_mul_eager(
    a: Sequence,
    s: Sequence,
    meter: Optional[MemoryMeter] = None,
    transpose: bool = False,
    karatsuba: bool = False,
    split: str = "contiguous",
) -> np.ndarray:
    """
    Reference schedule: every product is interpolated on its own and added
    into a row sum. Evaluations of s are cached exactly as in the lazy path.
    """
    splitter, product = _eager_split(split)
    mat = _as_poly_matrix(a)
    vec = _as_poly_vector(s, "s")
    l = mat.shape[0]
    if vec.shape[0] != l:
        raise DimensionError(f"matrix is {l}x{l} but vector has {vec.shape[0]} entries")
    if transpose:
        mat = mat.transpose(1, 0, 2)
    m = _meter(meter)
    evals = _cache_evaluations(vec, m, splitter)
    out = np.zeros((l, N), dtype=np.int64)
    for i in range(l):
        m.alloc(N)
        row = np.zeros(N, dtype=np.int64)
        for j in range(l):
            row = poly_add(row, product(mat[i, j], evals[j], m, karatsuba))
        out[i] = row
        m.free(N)
    m.free(l * N_SLOTS * LIMB, operand=True)
    return out
