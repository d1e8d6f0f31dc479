"""
ScaForge Countermeasures
~~~~~~~~~~~~~~~~~~~~~~~~
Trace-domain models of the circuit countermeasures:

  - DSAC: current-source slices regulated by a switched-mode control loop,
    dividing the data-dependent demand seen at the supply pin by A_eff.
  - RO bleed: randomized shunt current injected per window.
  - TVTF: windowed permutation plus gain jitter of the supply waveform.

Plus the supply-voltage-dependent attenuation model and the voltage-drop
attack search that exploits it.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .core import (
    STREAM_BLEED,
    STREAM_TVTF,
    LeakageConfig,
    RngStream,
    TraceSet,
    add_measurement_noise,
    per_trace_rows,
    simulate_noiseless_demand,
)
from .errors import ConfigError, DimensionError, NoAttackFound, SupplyFailure, UsageError

logger = logging.getLogger(__name__)

COUNTERMEASURES = ("dsac", "bleed", "tvtf")
BLEED_JITTER_FRACTION = 0.1


# ── Configuration ──────────────────────────────────────────────────────────

@dataclass
class DsacConfig:
    attenuation: float = 8.0
    i_unit: float = 1.0
    v_low: float = -1.0
    v_high: float = 1.0
    cap: float = 200.0
    max_slices: int = 64

    def validate(self, prefix: str = "dsac") -> None:
        if not self.attenuation >= 1:
            raise ConfigError("must be >= 1", field=f"{prefix}.attenuation")
        if not self.i_unit > 0:
            raise ConfigError("must be > 0", field=f"{prefix}.i_unit")
        if not self.v_low < self.v_high:
            raise ConfigError("v_low must be < v_high", field=f"{prefix}.v_low")
        if not self.cap > 0:
            raise ConfigError("must be > 0", field=f"{prefix}.cap")
        if self.max_slices < 1:
            raise ConfigError("must be >= 1", field=f"{prefix}.max_slices")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class BleedConfig:
    max_strength: float = 4.0
    window: int = 8

    def validate(self, prefix: str = "bleed") -> None:
        if not self.max_strength >= 0:
            raise ConfigError("must be >= 0", field=f"{prefix}.max_strength")
        if self.window < 1:
            raise ConfigError("must be >= 1", field=f"{prefix}.window")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TvtfConfig:
    window: int = 8
    gain_spread: float = 0.2

    def validate(self, prefix: str = "tvtf") -> None:
        if self.window < 1:
            raise ConfigError("must be >= 1", field=f"{prefix}.window")
        if not 0 <= self.gain_spread < 1:
            raise ConfigError("must be in [0, 1)", field=f"{prefix}.gain_spread")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SupplyConfig:
    vdd: float = 1.0
    v_sat: float = 0.9
    v_lin: float = 0.7
    v_fail: float = 0.6

    def validate(self, prefix: str = "supply") -> None:
        if not self.v_fail < self.v_lin < self.v_sat:
            raise ConfigError("need v_fail < v_lin < v_sat", field=f"{prefix}.v_lin")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class DeviceModel:
    """Leakage plus countermeasure configuration of one simulated device."""
    leakage: LeakageConfig = field(default_factory=LeakageConfig)
    dsac: DsacConfig = field(default_factory=DsacConfig)
    bleed: BleedConfig = field(default_factory=BleedConfig)
    tvtf: TvtfConfig = field(default_factory=TvtfConfig)
    supply: SupplyConfig = field(default_factory=SupplyConfig)
    n_samples: int = 64

    def validate(self) -> None:
        self.leakage.validate()
        self.dsac.validate()
        self.bleed.validate()
        self.tvtf.validate()
        self.supply.validate()

    def with_vdd(self, vdd: float) -> "DeviceModel":
        return dataclasses.replace(self, supply=dataclasses.replace(self.supply, vdd=vdd))


def parse_countermeasures(text: Optional[str]) -> tuple[str, ...]:
    """'dsac,tvtf' -> ('dsac', 'tvtf'); empty string means none."""
    if not text:
        return ()
    names = tuple(part.strip().lower() for part in text.split(",") if part.strip())
    unknown = [n for n in names if n not in COUNTERMEASURES]
    if unknown:
        raise UsageError(f"unknown countermeasure(s): {', '.join(unknown)}; choose from {', '.join(COUNTERMEASURES)}")
    return names


# ── DSAC / SMC Loop ────────────────────────────────────────────────────────

def effective_attenuation(dsac: DsacConfig, supply: SupplyConfig) -> float:
    """Attenuation left once the current source leaves saturation."""
    if supply.vdd >= supply.v_sat:
        return float(dsac.attenuation)
    if supply.vdd <= supply.v_lin:
        return 1.0
    frac = (supply.vdd - supply.v_lin) / (supply.v_sat - supply.v_lin)
    return 1.0 + (dsac.attenuation - 1.0) * frac


def apply_dsac(traces: TraceSet, dsac: DsacConfig, supply: SupplyConfig) -> TraceSet:
    """
    Regulate every trace through the switched-mode control loop.

    The integrator tracks supplied minus demanded current; crossing v_high
    drops one slice, crossing v_low adds one. The pin sees the slice current
    plus the residual demand divided by the effective attenuation.
    """
    if supply.vdd < supply.v_fail:
        raise SupplyFailure(
            f"vdd={supply.vdd} V is below v_fail={supply.v_fail} V; the AES core stops working"
        )
    a_eff = effective_attenuation(dsac, supply)
    demand = traces.samples.astype(np.float64, copy=False)
    n_traces, n_samples = demand.shape

    slices = np.clip(np.rint(demand[:, 0] / dsac.i_unit), 0, dsac.max_slices)
    v = np.full(n_traces, (dsac.v_low + dsac.v_high) / 2.0)
    out = np.empty_like(demand)

    for t in range(n_samples):
        d = demand[:, t]
        supplied = slices * dsac.i_unit
        out[:, t] = supplied + d / a_eff
        v = v + (supplied - d) / dsac.cap
        slices = slices - (v > dsac.v_high) + (v < dsac.v_low)
        np.clip(slices, 0, dsac.max_slices, out=slices)

    logger.debug("dsac applied: A_eff=%.3f over %d traces", a_eff, n_traces)
    return traces.with_samples(out)


def smc_integrator_trace(demand: np.ndarray, dsac: DsacConfig) -> tuple[np.ndarray, np.ndarray]:
    """Integrator voltage and slice count over one demand waveform (for inspection)."""
    demand = np.asarray(demand, dtype=np.float64)
    slices = float(np.clip(np.rint(demand[0] / dsac.i_unit), 0, dsac.max_slices))
    v = (dsac.v_low + dsac.v_high) / 2.0
    vs = np.empty_like(demand)
    ns = np.empty_like(demand)
    for t, d in enumerate(demand):
        v += (slices * dsac.i_unit - d) / dsac.cap
        if v > dsac.v_high:
            slices -= 1
        elif v < dsac.v_low:
            slices += 1
        slices = min(max(slices, 0), dsac.max_slices)
        vs[t] = v
        ns[t] = slices
    return vs, ns


# ── RO Bleed ───────────────────────────────────────────────────────────────

def bleed_variance(max_strength: float, jitter_fraction: float = BLEED_JITTER_FRACTION) -> float:
    """Per-sample variance added by apply_ro_bleed."""
    m2 = max_strength ** 2
    return m2 * ((1 + jitter_fraction ** 2) / 36.0 + (1 + jitter_fraction) ** 2 / 48.0)


def apply_ro_bleed(
    traces: TraceSet,
    cfg: BleedConfig,
    rng: RngStream,
    threads: Optional[int] = None,
) -> TraceSet:
    """Add a randomized bleed level per window plus per-sample jitter."""
    cfg.validate()
    if cfg.max_strength == 0:
        return traces.with_samples(traces.samples.copy())
    window = cfg.window

    def draw(gen: np.random.Generator, width: int) -> np.ndarray:
        n_windows = -(-width // window)
        strength = gen.uniform(0.0, cfg.max_strength, size=n_windows)
        level = gen.uniform(0.0, 1.0, size=n_windows) * strength
        per_sample = np.repeat(strength, window)[:width]
        jitter = gen.uniform(0.0, 1.0, size=width) * (BLEED_JITTER_FRACTION * per_sample)
        return np.repeat(level, window)[:width] + jitter

    bleed = per_trace_rows(rng.spawn(STREAM_BLEED), traces.n_traces, traces.n_samples, draw, threads=threads)
    return traces.with_samples(traces.samples + bleed)


# ── TVTF ───────────────────────────────────────────────────────────────────

def tvtf_permutation(gen: np.random.Generator, n_samples: int, window: int) -> np.ndarray:
    """Source index for every output sample; each window is shuffled within itself."""
    idx = np.arange(n_samples, dtype=np.int64)
    full = (n_samples // window) * window
    if window > 1 and full:
        idx[:full] = gen.permuted(idx[:full].reshape(-1, window), axis=1).ravel()
    if full < n_samples:
        idx[full:] = gen.permutation(idx[full:])
    return idx


def apply_tvtf(
    traces: TraceSet,
    cfg: TvtfConfig,
    rng: RngStream,
    threads: Optional[int] = None,
) -> TraceSet:
    """Permute samples inside each window and scale each by a factor in [1-g, 1+g]."""
    cfg.validate()
    if traces.n_samples < cfg.window:
        raise DimensionError(f"n_samples={traces.n_samples} is shorter than the TVTF window {cfg.window}")
    stream = rng.spawn(STREAM_TVTF)
    window = cfg.window

    index = per_trace_rows(
        stream,
        traces.n_traces,
        traces.n_samples,
        lambda gen, width: tvtf_permutation(gen, width, window),
        dtype=np.int64,
        threads=threads,
    )
    out = np.take_along_axis(traces.samples, index, axis=1)
    if cfg.gain_spread > 0:
        g = cfg.gain_spread
        gains = per_trace_rows(
            stream.spawn(1),
            traces.n_traces,
            traces.n_samples,
            lambda gen, width: gen.uniform(1.0 - g, 1.0 + g, size=width),
            threads=threads,
        )
        out = out * gains
    return traces.with_samples(out)


# ── Pipeline ───────────────────────────────────────────────────────────────

def simulate_pipeline(
    device: DeviceModel,
    n_traces: int,
    rng: RngStream,
    countermeasures: Iterable[str] = (),
    with_ciphertexts: bool = False,
    threads: Optional[int] = None,
) -> TraceSet:
    """
    Demand -> DSAC -> bleed -> TVTF -> measurement noise.

    Stage order is fixed whatever order `countermeasures` lists them in; with
    no countermeasure this equals simulate_demand_traces.
    """
    enabled = set(countermeasures)
    unknown = enabled.difference(COUNTERMEASURES)
    if unknown:
        raise UsageError(f"unknown countermeasure(s): {', '.join(sorted(unknown))}")
    device.validate()
    if device.supply.vdd < device.supply.v_fail:
        raise SupplyFailure(
            f"vdd={device.supply.vdd} V is below v_fail={device.supply.v_fail} V; the AES core stops working"
        )

    traces = simulate_noiseless_demand(
        device.leakage, n_traces, device.n_samples, rng, with_ciphertexts, threads
    )
    if "dsac" in enabled:
        traces = apply_dsac(traces, device.dsac, device.supply)
    if "bleed" in enabled:
        traces = apply_ro_bleed(traces, device.bleed, rng, threads)
    if "tvtf" in enabled:
        traces = apply_tvtf(traces, device.tvtf, rng, threads)
    return add_measurement_noise(traces, device.leakage.sigma, rng, threads)


def signal_attenuation(unprotected: TraceSet, protected: TraceSet) -> float:
    """Mean ratio of leak-position signal std-dev, unprotected over protected."""
    lp = unprotected.leak_positions
    before = unprotected.samples[:, lp].std(axis=0)
    after = protected.samples[:, lp].std(axis=0)
    if np.all(after == 0):
        return float("inf")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(after > 0, before / after, np.nan)
    return float(np.nanmean(ratio))


# ── Voltage-Drop Attack ────────────────────────────────────────────────────

@dataclass
class SweepPoint:
    vdd: float
    attenuation: float
    rho: float
    mtd: float


@dataclass
class VoltageDropResult:
    vdd_star: float
    mtd_estimate: float
    nominal_mtd: float
    points: list[SweepPoint]


def voltage_grid(lo: float, hi: float, step: float) -> np.ndarray:
    if not step > 0:
        raise UsageError(f"step must be > 0, got {step}")
    if hi < lo:
        raise UsageError(f"range upper bound {hi} is below lower bound {lo}")
    count = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(count), 12)


def find_voltage_drop_attack(
    device: DeviceModel,
    supply_range: tuple[float, float],
    step: float,
    attack_budget: int,
    rng: RngStream,
    model: str = "hamming_weight",
    threads: Optional[int] = None,
) -> VoltageDropResult:
    """
    Sweep VDD and pick the point with the lowest estimated MTD.

    Every point reuses the same random stream, so differences between points
    come from the attenuation alone. Each point runs a fixed-budget CPA and
    turns the mean true-key correlation at the leak samples into an MTD
    estimate. Only voltages strictly between v_lin and v_sat are candidates:
    at or below v_lin the current source no longer regulates, and at v_sat
    nothing has changed. The winner must strictly beat the nominal (v_sat)
    estimate; ties go to the higher voltage.
    """
    from .attack import estimate_mtd_from_correlation, leak_correlation

    lo, hi = supply_range
    supply = device.supply
    if not lo > supply.v_fail:
        raise UsageError(f"range must start above v_fail={supply.v_fail} V, got {lo}")
    if attack_budget < 2:
        raise UsageError(f"attack budget must be >= 2 traces, got {attack_budget}")
    grid = voltage_grid(lo, hi, step)
    key = device.leakage.key

    def evaluate(vdd: float) -> SweepPoint:
        dev = device.with_vdd(float(vdd))
        traces = simulate_pipeline(dev, attack_budget, rng, ("dsac",), threads=threads)
        rho = max(leak_correlation(traces, key, model, threads=threads), 0.0)
        point = SweepPoint(
            vdd=float(vdd),
            attenuation=effective_attenuation(dev.dsac, dev.supply),
            rho=rho,
            mtd=estimate_mtd_from_correlation(rho),
        )
        logger.info("vdd=%.4f A_eff=%.2f rho=%.4f mtd~%.0f", point.vdd, point.attenuation, point.rho, point.mtd)
        return point

    nominal = evaluate(supply.v_sat)
    points = [evaluate(v) for v in grid]

    best: Optional[SweepPoint] = None
    for p in points:
        if not supply.v_lin < p.vdd < supply.v_sat:
            continue
        if best is None or p.mtd < best.mtd or (p.mtd == best.mtd and p.vdd > best.vdd):
            best = p
    if best is None or not best.mtd < nominal.mtd:
        raise NoAttackFound(
            f"no swept voltage in ({supply.v_lin}, {supply.v_sat}) within [{lo}, {hi}] "
            f"beats the nominal MTD estimate of {nominal.mtd:.0f} traces",
            points=points,
        )
    return VoltageDropResult(
        vdd_star=best.vdd,
        mtd_estimate=best.mtd,
        nominal_mtd=nominal.mtd,
        points=points,
    )
