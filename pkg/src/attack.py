"""
ScaForge CPA Engine
~~~~~~~~~~~~~~~~~~~
Streaming correlation power analysis against the first-round S-box output,
key ranking, and minimum-traces-to-disclosure (MTD) measurement.

Pearson sums are kept per state byte in float64 against a fixed sample
offset, so states can be updated batch by batch and merged in any grouping.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import LEAKAGE_MODELS, N_STATE_BYTES, TraceSet, hypothesis_table
from .errors import ConfigError, DataError, DegenerateTraces, DimensionError
from .workers import ordered_map

logger = logging.getLogger(__name__)

N_HYPOTHESES = 256
DEFAULT_BATCH = 4096

# Two-sided 99.99 % normal quantile for the rule-of-thumb MTD estimate.
MTD_CONFIDENCE_Z = 3.719


# ── Settings ───────────────────────────────────────────────────────────────

@dataclass
class AttackSettings:
    model: str = "hamming_weight"
    target_bytes: list[int] = field(default_factory=lambda: list(range(N_STATE_BYTES)))
    checkpoint_start: int = 100
    checkpoint_factor: float = 1.5
    stability_window: int = 3
    budget: int = 2000
    batch_size: int = DEFAULT_BATCH

    def validate(self, prefix: str = "attack") -> None:
        if self.model not in LEAKAGE_MODELS:
            raise ConfigError(f"must be one of {LEAKAGE_MODELS}", field=f"{prefix}.model")
        if not self.target_bytes or any(not 0 <= b < N_STATE_BYTES for b in self.target_bytes):
            raise ConfigError("must be a non-empty list of byte indices 0..15", field=f"{prefix}.target_bytes")
        if len(set(self.target_bytes)) != len(self.target_bytes):
            raise ConfigError("duplicate byte index", field=f"{prefix}.target_bytes")
        if self.checkpoint_start < 1:
            raise ConfigError("must be >= 1", field=f"{prefix}.checkpoint_start")
        if not self.checkpoint_factor > 1:
            raise ConfigError("must be > 1", field=f"{prefix}.checkpoint_factor")
        if self.stability_window < 1:
            raise ConfigError("must be >= 1", field=f"{prefix}.stability_window")
        if self.budget < 2:
            raise ConfigError("must be >= 2", field=f"{prefix}.budget")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", field=f"{prefix}.batch_size")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ── Results ────────────────────────────────────────────────────────────────

@dataclass
class ByteResult:
    """CPA outcome for one state byte."""
    byte_index: int
    correlations: np.ndarray    # (256,) signed rho at each hypothesis' peak sample
    best_samples: np.ndarray    # (256,) sample index of peak |rho|
    ranking: np.ndarray         # (256,) key guesses, best first

    @property
    def best_guess(self) -> int:
        return int(self.ranking[0])

    def rank_of(self, key_byte: int) -> int:
        """1-based rank of a key guess."""
        return int(np.flatnonzero(self.ranking == key_byte)[0]) + 1


@dataclass
class CpaResult:
    n_traces: int
    model: str
    bytes: list[ByteResult]

    def key_guess(self) -> bytes:
        return bytes(b.best_guess for b in self.bytes)

    def byte(self, index: int) -> ByteResult:
        for b in self.bytes:
            if b.byte_index == index:
                return b
        raise KeyError(index)

    def true_key_rank(self, key: bytes) -> int:
        """Worst rank of the true key over the attacked bytes (1 = full key first)."""
        return max(b.rank_of(key[b.byte_index]) for b in self.bytes)

    def true_key_corr(self, key: bytes) -> float:
        """Weakest peak |rho| of the true key over the attacked bytes."""
        return float(min(abs(b.correlations[key[b.byte_index]]) for b in self.bytes))


def rank_hypotheses(correlations: np.ndarray) -> np.ndarray:
    """Order by |rho| descending, ties to the lower key value."""
    return np.lexsort((np.arange(len(correlations)), -np.abs(correlations)))


# ── Streaming State ────────────────────────────────────────────────────────

class CpaState:
    """
    Mergeable Pearson accumulators for every (byte, hypothesis, sample).

    Trace samples are stored relative to `offset` (the first trace seen), so
    constant columns accumulate exact zeros.
    """

    def __init__(
        self,
        n_samples: int,
        model: str = "hamming_weight",
        target_bytes: Optional[Sequence[int]] = None,
    ):
        if model not in LEAKAGE_MODELS:
            raise ConfigError(f"must be one of {LEAKAGE_MODELS}", field="model")
        self.n_samples = n_samples
        self.model = model
        self.target_bytes = list(range(N_STATE_BYTES)) if target_bytes is None else list(target_bytes)
        self.table = hypothesis_table(model).astype(np.float64)

        self.count = 0
        self.offset: Optional[np.ndarray] = None
        self.sum_x = np.zeros(n_samples)
        self.sum_xx = np.zeros(n_samples)
        nb = len(self.target_bytes)
        self.sum_h = np.zeros((nb, N_HYPOTHESES))
        self.sum_hh = np.zeros((nb, N_HYPOTHESES))
        self.sum_hx = np.zeros((nb, N_HYPOTHESES, n_samples))

    def _hypotheses(self, plaintexts: np.ndarray, byte_index: int) -> np.ndarray:
        guesses = np.arange(N_HYPOTHESES, dtype=np.uint8)
        return self.table[plaintexts[:, byte_index, None] ^ guesses[None, :]]

    def update(self, samples: np.ndarray, plaintexts: np.ndarray, threads: Optional[int] = None) -> "CpaState":
        samples = np.asarray(samples)
        plaintexts = np.asarray(plaintexts, dtype=np.uint8)
        if samples.ndim != 2 or samples.shape[1] != self.n_samples:
            raise DimensionError(f"batch has shape {samples.shape}, state expects (*, {self.n_samples})")
        if plaintexts.shape != (samples.shape[0], N_STATE_BYTES):
            raise DimensionError(f"plaintexts shape {plaintexts.shape} does not match batch")
        if samples.shape[0] == 0:
            return self

        if self.offset is None:
            self.offset = samples[0].astype(np.float64)
        x = samples.astype(np.float64) - self.offset
        self.count += x.shape[0]
        self.sum_x += x.sum(axis=0)
        self.sum_xx += np.einsum("ij,ij->j", x, x)

        def accumulate(slot: int) -> None:
            h = self._hypotheses(plaintexts, self.target_bytes[slot])
            self.sum_h[slot] += h.sum(axis=0)
            self.sum_hh[slot] += np.einsum("ij,ij->j", h, h)
            self.sum_hx[slot] += h.T @ x

        ordered_map(accumulate, range(len(self.target_bytes)), threads=threads)
        return self

    def merge(self, other: "CpaState") -> "CpaState":
        """New state equal to having processed both states' traces."""
        if other.n_samples != self.n_samples or other.model != self.model or other.target_bytes != self.target_bytes:
            raise DimensionError("cannot merge CPA states with different shapes or models")
        merged = CpaState(self.n_samples, self.model, self.target_bytes)
        if other.count == 0 or self.count == 0:
            src = self if other.count == 0 else other
            merged.count = src.count
            merged.offset = None if src.offset is None else src.offset.copy()
            for name in ("sum_x", "sum_xx", "sum_h", "sum_hh", "sum_hx"):
                setattr(merged, name, getattr(src, name).copy())
            return merged

        # Shift other's sums onto self's offset.
        delta = other.offset - self.offset
        n2 = other.count
        sx2 = other.sum_x + n2 * delta
        sxx2 = other.sum_xx + 2.0 * delta * other.sum_x + n2 * delta ** 2
        shx2 = other.sum_hx + other.sum_h[:, :, None] * delta[None, None, :]

        merged.count = self.count + n2
        merged.offset = self.offset.copy()
        merged.sum_x = self.sum_x + sx2
        merged.sum_xx = self.sum_xx + sxx2
        merged.sum_h = self.sum_h + other.sum_h
        merged.sum_hh = self.sum_hh + other.sum_hh
        merged.sum_hx = self.sum_hx + shx2
        return merged

    def correlations(self, slot: int) -> np.ndarray:
        """(256, n_samples) Pearson rho for the slot-th target byte."""
        n = float(self.count)
        if n < 2:
            return np.zeros((N_HYPOTHESES, self.n_samples))
        mean_x = self.sum_x / n
        mean_h = self.sum_h[slot] / n
        var_x = np.maximum(self.sum_xx / n - mean_x ** 2, 0.0)
        var_h = np.maximum(self.sum_hh[slot] / n - mean_h ** 2, 0.0)
        cov = self.sum_hx[slot] / n - mean_h[:, None] * mean_x[None, :]
        denom = np.sqrt(var_h[:, None] * var_x[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = np.where(denom > 0, cov / denom, 0.0)
        return np.clip(rho, -1.0, 1.0)

    def result(self) -> CpaResult:
        out = []
        for slot, byte_index in enumerate(self.target_bytes):
            rho = self.correlations(slot)
            best = np.argmax(np.abs(rho), axis=1)
            peak = rho[np.arange(N_HYPOTHESES), best]
            out.append(ByteResult(
                byte_index=byte_index,
                correlations=peak,
                best_samples=best,
                ranking=rank_hypotheses(peak),
            ))
        return CpaResult(n_traces=self.count, model=self.model, bytes=out)


def cpa_stream_update(state: CpaState, batch: TraceSet, threads: Optional[int] = None) -> CpaState:
    return state.update(batch.samples, batch.plaintexts, threads=threads)


# ── Attack ─────────────────────────────────────────────────────────────────

def iter_batches(traces: TraceSet, start: int, stop: int, batch_size: int) -> Iterable[tuple[np.ndarray, np.ndarray]]:
    for lo in range(start, stop, batch_size):
        hi = min(lo + batch_size, stop)
        yield traces.samples[lo:hi], traces.plaintexts[lo:hi]


def cpa_attack(
    traces: TraceSet,
    model: str = "hamming_weight",
    target_bytes: Optional[Sequence[int]] = None,
    batch_size: int = DEFAULT_BATCH,
    threads: Optional[int] = None,
) -> CpaResult:
    """Correlate every hypothesis of every targeted byte with every sample."""
    if traces.n_traces < 2:
        raise DimensionError(f"CPA needs at least 2 traces, got {traces.n_traces}")
    if np.ptp(traces.samples) == 0:
        raise DegenerateTraces("every sample in the trace set is the same value")
    state = CpaState(traces.n_samples, model, target_bytes)
    for samples, plaintexts in iter_batches(traces, 0, traces.n_traces, batch_size):
        state.update(samples, plaintexts, threads=threads)
    return state.result()


def leak_correlation(
    traces: TraceSet,
    key: bytes,
    model: str = "hamming_weight",
    target_bytes: Optional[Sequence[int]] = None,
    threads: Optional[int] = None,
) -> float:
    """
    Mean signed rho of the true key at each byte's leak sample.

    Reading the known sample keeps the estimate unbiased when the signal is
    below the largest spurious peak over the trace.
    """
    if traces.n_traces < 2:
        raise DimensionError(f"CPA needs at least 2 traces, got {traces.n_traces}")
    state = CpaState(traces.n_samples, model, target_bytes)
    for samples, plaintexts in iter_batches(traces, 0, traces.n_traces, DEFAULT_BATCH):
        state.update(samples, plaintexts, threads=threads)
    values = [
        state.correlations(slot)[key[byte_index], traces.leak_positions[byte_index]]
        for slot, byte_index in enumerate(state.target_bytes)
    ]
    return float(np.mean(values))


# ── MTD ────────────────────────────────────────────────────────────────────

@dataclass
class RankPoint:
    checkpoint: int
    rank: int
    best_corr: float


@dataclass
class MtdReport:
    mtd: Optional[int]
    rank_curve: list[RankPoint]
    stability_window: int
    n_traces: int

    @property
    def disclosed(self) -> bool:
        return self.mtd is not None

    def summary(self) -> str:
        if self.mtd is None:
            return f"not disclosed within {self.n_traces} traces"
        return f"MTD = {self.mtd} traces"


def default_checkpoints(n_max: int, start: int = 100, factor: float = 1.5) -> list[int]:
    """Geometric schedule start, start*factor, ... capped by (and ending at) n_max."""
    points: list[int] = []
    c = float(start)
    while round(c) <= n_max:
        value = int(round(c))
        if not points or value > points[-1]:
            points.append(value)
        c *= factor
    if not points or points[-1] < n_max:
        points.append(n_max)
    return points


def disclosure_index(ranks: Sequence[int], stability_window: int) -> Optional[int]:
    """First index starting a run of `stability_window` rank-1 checkpoints."""
    run = 0
    for i, rank in enumerate(ranks):
        run = run + 1 if rank == 1 else 0
        if run == stability_window:
            return i - stability_window + 1
    return None


def compute_mtd(
    traces: TraceSet,
    settings: Optional[AttackSettings] = None,
    checkpoints: Optional[Sequence[int]] = None,
    stability_window: Optional[int] = None,
    key: Optional[bytes] = None,
    threads: Optional[int] = None,
) -> MtdReport:
    """
    Run CPA incrementally over growing prefixes of the trace set.

    At each checkpoint the true key's worst byte rank is recorded; the MTD is
    the first checkpoint that starts `stability_window` consecutive rank-1
    checkpoints.
    """
    settings = settings or AttackSettings()
    settings.validate()
    window = settings.stability_window if stability_window is None else stability_window
    if window < 1:
        raise ConfigError("must be >= 1", field="stability_window")
    key = key if key is not None else traces.key
    if key is None:
        raise DataError("MTD ranking needs the true key; the trace set carries none")

    if checkpoints is None:
        checkpoints = default_checkpoints(traces.n_traces, settings.checkpoint_start, settings.checkpoint_factor)
    checkpoints = list(checkpoints)
    if any(b <= a for a, b in zip(checkpoints, checkpoints[1:])) or not checkpoints or checkpoints[0] < 1:
        raise ConfigError("checkpoints must be positive and strictly increasing", field="checkpoints")
    checkpoints = [c for c in checkpoints if c <= traces.n_traces] or [traces.n_traces]

    state = CpaState(traces.n_samples, settings.model, settings.target_bytes)
    curve: list[RankPoint] = []
    done = 0
    for checkpoint in checkpoints:
        for samples, plaintexts in iter_batches(traces, done, checkpoint, settings.batch_size):
            state.update(samples, plaintexts, threads=threads)
        done = checkpoint
        result = state.result()
        point = RankPoint(checkpoint, result.true_key_rank(key), result.true_key_corr(key))
        logger.debug("checkpoint %d: rank %d, corr %.4f", point.checkpoint, point.rank, point.best_corr)
        curve.append(point)

    idx = disclosure_index([p.rank for p in curve], window)
    mtd = None if idx is None else curve[idx].checkpoint
    logger.info("MTD over %d traces: %s", traces.n_traces, mtd if mtd is not None else "not disclosed")
    return MtdReport(mtd=mtd, rank_curve=curve, stability_window=window, n_traces=traces.n_traces)


def estimate_mtd_from_correlation(rho: float, z: float = MTD_CONFIDENCE_Z) -> float:
    """Rule-of-thumb traces needed to distinguish a correlation rho from zero."""
    rho = min(abs(float(rho)), 1.0 - 1e-12)
    if rho == 0:
        return math.inf
    fisher = math.log((1.0 + rho) / (1.0 - rho))
    return 3.0 + 8.0 * (z / fisher) ** 2
