"""
ScaForge Attack Detection
~~~~~~~~~~~~~~~~~~~~~~~~~
On-chip self-awareness models:

  - a simulated H-field sensor producing benign, clock-glitch,
    voltage-glitch and EM-probe waveforms,
  - a small fully-connected classifier trained with mini-batch SGD,
  - the ring-oscillator tracker pair that raises an alarm when VDD drops
    while the regulated AES node holds.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .core import (
    N_STATE_BYTES,
    STREAM_INIT,
    STREAM_SENSOR,
    STREAM_SHUFFLE,
    RngStream,
    TraceSet,
    default_leak_positions,
)
from .errors import ConfigError, DataError, DimensionError, TrainingDiverged, UsageError
from .workers import ordered_map

logger = logging.getLogger(__name__)

SCENARIOS = ("benign", "clock_glitch", "voltage_glitch", "em_probe")
MIN_SENSOR_SAMPLES = 32


# ── Sensor Simulation ──────────────────────────────────────────────────────

@dataclass
class SensorParams:
    n_samples: int = 128
    sample_rate: float = 1e6
    baseline: float = 2.0
    sigma: float = 1.0
    pulse_amplitude: float = 10.0       # in units of sigma
    pulse_width: int = 8
    sag_depth: tuple[float, float] = (4.0, 8.0)
    sag_width: tuple[int, int] = (16, 40)
    coupling: float = 3.0

    def validate(self, prefix: str = "sensor") -> None:
        if self.n_samples < MIN_SENSOR_SAMPLES:
            raise ConfigError(f"must be >= {MIN_SENSOR_SAMPLES}", field=f"{prefix}.n_samples")
        if not self.sample_rate > 0:
            raise ConfigError("must be > 0", field=f"{prefix}.sample_rate")
        if not self.sigma >= 0:
            raise ConfigError("must be >= 0", field=f"{prefix}.sigma")
        if not 1 <= self.pulse_width <= self.n_samples:
            raise ConfigError("must be in [1, n_samples]", field=f"{prefix}.pulse_width")
        lo, hi = self.sag_depth
        if not 0 <= lo <= hi:
            raise ConfigError("need 0 <= min <= max", field=f"{prefix}.sag_depth")
        lo, hi = self.sag_width
        if not 1 <= lo <= hi <= self.n_samples:
            raise ConfigError("need 1 <= min <= max <= n_samples", field=f"{prefix}.sag_width")
        if not self.coupling >= 1:
            raise ConfigError("must be >= 1", field=f"{prefix}.coupling")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sag_depth"] = list(self.sag_depth)
        d["sag_width"] = list(self.sag_width)
        return d


@dataclass
class SensorTrace:
    samples: np.ndarray
    label: str
    sample_rate: float

    def __post_init__(self):
        if self.label not in SCENARIOS:
            raise DataError(f"unknown sensor label {self.label!r}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("sensor samples contain non-finite values")

    @property
    def label_index(self) -> int:
        return SCENARIOS.index(self.label)


def _sensor_waveform(gen: np.random.Generator, scenario: str, n: int, p: SensorParams) -> np.ndarray:
    noise = gen.normal(0.0, p.sigma, size=n) if p.sigma > 0 else np.zeros(n)
    x = p.baseline + noise
    sigma_unit = p.sigma if p.sigma > 0 else 1.0

    if scenario == "clock_glitch":
        start = int(gen.integers(0, n - p.pulse_width + 1))
        x[start:start + p.pulse_width] += p.pulse_amplitude * sigma_unit
    elif scenario == "voltage_glitch":
        depth = gen.uniform(*p.sag_depth) * sigma_unit
        width = int(gen.integers(p.sag_width[0], p.sag_width[1] + 1))
        start = int(gen.integers(0, n - width + 1))
        x[start:start + width] -= depth
    elif scenario == "em_probe":
        # Coupling grows as the probe approaches.
        envelope = np.linspace(1.0, p.coupling, n)
        x = envelope * x
    return x


def simulate_sensor(
    scenario: str,
    n_samples: int,
    rng: RngStream,
    params: Optional[SensorParams] = None,
    index: int = 0,
) -> SensorTrace:
    """One sensor waveform; `index` selects the trace's own counter range."""
    if scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    params = dataclasses.replace(params or SensorParams(), n_samples=n_samples)
    params.validate()
    gen = rng.spawn(STREAM_SENSOR).generator(index)
    return SensorTrace(
        samples=_sensor_waveform(gen, scenario, n_samples, params),
        label=scenario,
        sample_rate=params.sample_rate,
    )


@dataclass
class SensorDataset:
    samples: np.ndarray     # (n, n_samples)
    labels: np.ndarray      # (n,) scenario indices

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or self.labels.shape != (self.samples.shape[0],):
            raise DimensionError(
                f"dataset shapes disagree: samples {self.samples.shape}, labels {self.labels.shape}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(SCENARIOS)):
            raise DataError("labels out of range")

    def __len__(self) -> int:
        return self.samples.shape[0]

    def split(self, n_first: int) -> tuple["SensorDataset", "SensorDataset"]:
        return (
            SensorDataset(self.samples[:n_first], self.labels[:n_first]),
            SensorDataset(self.samples[n_first:], self.labels[n_first:]),
        )

    def as_trace_set(self) -> TraceSet:
        """Samples wrapped for the trace-file writer (zero plaintexts, no key)."""
        n, n_samples = self.samples.shape
        return TraceSet(
            samples=self.samples,
            plaintexts=np.zeros((n, N_STATE_BYTES), dtype=np.uint8),
            leak_positions=default_leak_positions(n_samples),
        )


def generate_dataset(
    n_traces: int,
    rng: RngStream,
    params: Optional[SensorParams] = None,
    threads: Optional[int] = None,
) -> SensorDataset:
    """Balanced dataset; trace i has scenario i mod 4."""
    params = params or SensorParams()
    params.validate()
    labels = np.arange(n_traces, dtype=np.int64) % len(SCENARIOS)
    stream = rng.spawn(STREAM_SENSOR)

    def build(i: int) -> np.ndarray:
        return _sensor_waveform(stream.generator(i), SCENARIOS[labels[i]], params.n_samples, params)

    rows = ordered_map(build, range(n_traces), threads=threads)
    samples = np.stack(rows) if rows else np.empty((0, params.n_samples))
    return SensorDataset(samples, labels)


# ── Fully-Connected Detector ───────────────────────────────────────────────

@dataclass
class DetectorSettings:
    hidden_sizes: list[int] = field(default_factory=lambda: [64, 32])
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 40
    batch_size: int = 32
    n_train: int = 3000
    n_test: int = 1000

    def validate(self, prefix: str = "detector") -> None:
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("every hidden size must be >= 1", field=f"{prefix}.hidden_sizes")
        if not self.learning_rate > 0:
            raise ConfigError("must be > 0", field=f"{prefix}.learning_rate")
        if not 0 <= self.momentum < 1:
            raise ConfigError("must be in [0, 1)", field=f"{prefix}.momentum")
        if self.epochs < 0:
            raise ConfigError("must be >= 0", field=f"{prefix}.epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", field=f"{prefix}.batch_size")
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("dataset sizes must be positive", field=f"{prefix}.n_train")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class DetectorModel:
    """Rectifier hidden layers, softmax output, per-input standardisation."""
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_mean: np.ndarray
    input_scale: np.ndarray
    labels: list[str] = field(default_factory=lambda: list(SCENARIOS))
    final_loss: Optional[float] = None
    degenerate: bool = False

    def __post_init__(self):
        sizes = self.layer_sizes
        if len(sizes) < 2 or len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise DimensionError("layer sizes and parameter lists disagree")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise DimensionError(f"layer {i}: weight {w.shape} / bias {b.shape} do not match {sizes[i]}->{sizes[i + 1]}")
        if self.input_mean.shape != (sizes[0],) or self.input_scale.shape != (sizes[0],):
            raise DimensionError("standardisation vectors must match the input size")
        if len(self.labels) != sizes[-1]:
            raise DimensionError("one label per output unit required")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int]) -> "DetectorModel":
        sizes = list(layer_sizes)
        return cls(
            layer_sizes=sizes,
            weights=[np.zeros((a, b)) for a, b in zip(sizes, sizes[1:])],
            biases=[np.zeros(b) for b in sizes[1:]],
            input_mean=np.zeros(sizes[0]),
            input_scale=np.ones(sizes[0]),
            labels=list(SCENARIOS)[:sizes[-1]] if sizes[-1] <= len(SCENARIOS) else [str(i) for i in range(sizes[-1])],
        )

    @classmethod
    def initialise(cls, layer_sizes: Sequence[int], gen: np.random.Generator) -> "DetectorModel":
        """He-normal weights, zero biases."""
        model = cls.zeros(layer_sizes)
        model.weights = [
            gen.normal(0.0, math.sqrt(2.0 / a), size=(a, b))
            for a, b in zip(model.layer_sizes, model.layer_sizes[1:])
        ]
        return model

    def copy(self) -> "DetectorModel":
        return dataclasses.replace(
            self,
            layer_sizes=list(self.layer_sizes),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            input_mean=self.input_mean.copy(),
            input_scale=self.input_scale.copy(),
            labels=list(self.labels),
        )

    def standardise(self, x: np.ndarray) -> np.ndarray:
        return (x - self.input_mean) / self.input_scale

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.n_inputs:
            raise DimensionError(f"input length {x.shape[1]} != model input size {self.n_inputs}")
        _, _, probs = _forward(self, self.standardise(x))
        return probs


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(model: DetectorModel, x: np.ndarray):
    activations = [x]
    pre = []
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        pre.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        activations.append(a)
    return activations, pre, softmax(pre[-1])


def cross_entropy(probs: np.ndarray, y: np.ndarray) -> float:
    picked = probs[np.arange(len(y)), y]
    return float(-np.mean(np.log(np.maximum(picked, 1e-300))))


def loss_and_gradients(model: DetectorModel, x: np.ndarray, y: np.ndarray):
    """
    Mean cross-entropy and its gradients for network inputs `x`.

    `x` is fed to the first layer as-is (no standardisation).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    activations, pre, probs = _forward(model, x)
    loss = cross_entropy(probs, y)

    delta = probs.copy()
    delta[np.arange(len(y)), y] -= 1.0
    delta /= len(y)
    grad_w: list[np.ndarray] = [None] * len(model.weights)
    grad_b: list[np.ndarray] = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        grad_w[i] = activations[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (pre[i - 1] > 0)
    return loss, grad_w, grad_b


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float


def fit_standardisation(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale


def train_detector(
    dataset: SensorDataset,
    settings: Optional[DetectorSettings] = None,
    rng: Optional[RngStream] = None,
) -> tuple[DetectorModel, list[EpochRecord]]:
    """
    Mini-batch SGD with momentum on softmax cross-entropy.

    Returns the trained model and one history record per epoch (full
    training-set loss and accuracy after the epoch).
    """
    settings = settings or DetectorSettings()
    settings.validate()
    rng = rng or RngStream(0)
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")

    x_raw, y = dataset.samples, dataset.labels
    sizes = [x_raw.shape[1], *settings.hidden_sizes, len(SCENARIOS)]
    model = DetectorModel.initialise(sizes, rng.spawn(STREAM_INIT).generator(0))
    model.input_mean, model.input_scale = fit_standardisation(x_raw)
    model.degenerate = len(np.unique(y)) < 2
    if model.degenerate:
        logger.warning("training set holds a single class (%s); model is degenerate", SCENARIOS[y[0]])

    x = model.standardise(x_raw)
    history: list[EpochRecord] = []
    if settings.epochs == 0:
        return model, history

    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    shuffle = rng.spawn(STREAM_SHUFFLE)
    n = len(dataset)

    for epoch in range(1, settings.epochs + 1):
        order = shuffle.generator(epoch).permutation(n)
        for lo in range(0, n, settings.batch_size):
            idx = order[lo:lo + settings.batch_size]
            loss, gw, gb = loss_and_gradients(model, x[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}; lower the learning rate")
            for i in range(len(model.weights)):
                vel_w[i] = settings.momentum * vel_w[i] - settings.learning_rate * gw[i]
                vel_b[i] = settings.momentum * vel_b[i] - settings.learning_rate * gb[i]
                model.weights[i] += vel_w[i]
                model.biases[i] += vel_b[i]

        _, _, probs = _forward(model, x)
        loss = cross_entropy(probs, y)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(w)) for w in model.weights):
            raise TrainingDiverged(f"loss became {loss} in epoch {epoch}; lower the learning rate")
        acc = float(np.mean(np.argmax(probs, axis=1) == y))
        history.append(EpochRecord(epoch, loss, acc))
        logger.debug("epoch %d: loss %.5f acc %.4f", epoch, loss, acc)

    model.final_loss = history[-1].loss
    logger.info("trained detector: loss %.5f, train accuracy %.4f", history[-1].loss, history[-1].accuracy)
    return model, history


def classify(model: DetectorModel, trace: Union[SensorTrace, np.ndarray]) -> tuple[str, float]:
    """Most probable label (ties to the lowest class index) and its probability."""
    samples = trace.samples if isinstance(trace, SensorTrace) else np.asarray(trace)
    if samples.ndim != 1:
        raise DimensionError("classify takes a single trace")
    probs = model.predict_proba(samples)[0]
    k = int(np.argmax(probs))
    return model.labels[k], float(probs[k])


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray   # rows = true class, columns = predicted
    recall: np.ndarray

    @property
    def n(self) -> int:
        return int(self.confusion.sum())


def evaluate_detector(model: DetectorModel, dataset: SensorDataset) -> Evaluation:
    if dataset.samples.shape[1] != model.n_inputs:
        raise DimensionError(
            f"dataset traces have {dataset.samples.shape[1]} samples, model expects {model.n_inputs}"
        )
    k = model.layer_sizes[-1]
    predicted = np.argmax(model.predict_proba(dataset.samples), axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (dataset.labels, predicted), 1)
    support = confusion.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        recall = np.where(support > 0, np.diag(confusion) / support, np.nan)
    accuracy = float(np.trace(confusion) / max(len(dataset), 1))
    return Evaluation(accuracy=accuracy, confusion=confusion, recall=recall)


# ── Gradient Check ─────────────────────────────────────────────────────────

def _relu_masks(model: DetectorModel, x: np.ndarray) -> list[np.ndarray]:
    _, pre, _ = _forward(model, x)
    return [z > 0 for z in pre[:-1]]


def gradient_check(
    model: DetectorModel,
    example: np.ndarray,
    label: Union[int, Sequence[int]] = 0,
    step: float = 1e-4,
) -> float:
    """
    Max relative error between backprop and central finite differences.

    Parameters whose perturbation flips a rectifier are skipped, since the
    loss is not differentiable there.
    """
    if model.n_parameters > 1000:
        raise UsageError(f"gradient check is meant for small models, got {model.n_parameters} parameters")
    x = np.atleast_2d(np.asarray(example, dtype=np.float64))
    y = np.broadcast_to(np.atleast_1d(np.asarray(label, dtype=np.int64)), (x.shape[0],)).copy()
    perturbed = model.copy()
    _, grad_w, grad_b = loss_and_gradients(perturbed, x, y)
    base_masks = _relu_masks(perturbed, x)

    worst = 0.0
    for params, grads in ((perturbed.weights, grad_w), (perturbed.biases, grad_b)):
        for p, g in zip(params, grads):
            flat, gflat = p.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                masks_plus = _relu_masks(perturbed, x)
                loss_plus = loss_and_gradients(perturbed, x, y)[0]
                flat[j] = orig - step
                masks_minus = _relu_masks(perturbed, x)
                loss_minus = loss_and_gradients(perturbed, x, y)[0]
                flat[j] = orig
                if any(np.any(a != b) for a, b in zip(masks_plus, base_masks)) or \
                        any(np.any(a != b) for a, b in zip(masks_minus, base_masks)):
                    continue
                numeric = (loss_plus - loss_minus) / (2.0 * step)
                analytic = gflat[j]
                err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-3)
                worst = max(worst, err)
    return worst


# ── RO Voltage-Drop Detector ───────────────────────────────────────────────

@dataclass
class RoTrackerConfig:
    k_ro: float = 1e6           # Hz per volt
    epoch: int = 100            # samples per comparison
    tau: int = 4                # consecutive mismatching epochs
    divider: float = 0.5
    sample_rate: float = 1e6

    def validate(self, prefix: str = "ro_tracker") -> None:
        if not self.k_ro > 0:
            raise ConfigError("must be > 0", field=f"{prefix}.k_ro")
        if self.epoch < 1:
            raise ConfigError("must be >= 1", field=f"{prefix}.epoch")
        if self.tau < 1:
            raise ConfigError("must be >= 1", field=f"{prefix}.tau")
        if not 0 < self.divider <= 1:
            raise ConfigError("must be in (0, 1]", field=f"{prefix}.divider")
        if not self.sample_rate > 0:
            raise ConfigError("must be > 0", field=f"{prefix}.sample_rate")

    @property
    def epoch_seconds(self) -> float:
        return self.epoch / self.sample_rate

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def ro_counts(series: np.ndarray, cfg: RoTrackerConfig) -> np.ndarray:
    """RO edge count per full epoch for a voltage series."""
    n_epochs = len(series) // cfg.epoch
    means = series[:n_epochs * cfg.epoch].reshape(n_epochs, cfg.epoch).mean(axis=1)
    return np.floor(cfg.k_ro * means * cfg.epoch_seconds).astype(np.int64)


def voltage_drop_detect(
    vdd_series: np.ndarray,
    aes_node_series: np.ndarray,
    cfg: Optional[RoTrackerConfig] = None,
) -> Optional[int]:
    """
    Compare the divided-VDD tracker against the AES-node tracker each epoch.

    Returns the first sample of the tau-th consecutive mismatching epoch, or
    None when the alarm never fires.
    """
    cfg = cfg or RoTrackerConfig()
    cfg.validate()
    vdd = np.asarray(vdd_series, dtype=np.float64)
    v_aes = np.asarray(aes_node_series, dtype=np.float64)
    if vdd.shape != v_aes.shape or vdd.ndim != 1:
        raise DimensionError(f"series lengths differ: {vdd.shape} vs {v_aes.shape}")

    reference = ro_counts(cfg.divider * vdd, cfg)
    node = ro_counts(v_aes, cfg)
    run = 0
    for e, mismatch in enumerate(np.abs(reference - node) >= 1):
        run = run + 1 if mismatch else 0
        if run == cfg.tau:
            alarm = e * cfg.epoch
            logger.info("voltage-drop alarm at sample %d (%.3f ms)", alarm, 1e3 * alarm / cfg.sample_rate)
            return alarm
    return None


def simulate_supply_drop(
    n_samples: int = 4000,
    onset: int = 1000,
    drop_fraction: float = 0.2,
    vdd_nominal: float = 1.0,
    divider: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Step drop of VDD at `onset` while the regulation loop holds the AES node.

    Returns (vdd, v_aes).
    """
    if not 0 <= onset < n_samples:
        raise UsageError(f"onset must lie in [0, {n_samples}), got {onset}")
    if not 0 <= drop_fraction < 1:
        raise UsageError(f"drop fraction must be in [0, 1), got {drop_fraction}")
    vdd = np.full(n_samples, vdd_nominal)
    vdd[onset:] *= 1.0 - drop_fraction
    v_aes = np.full(n_samples, divider * vdd_nominal)
    return vdd, v_aes
