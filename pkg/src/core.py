"""
ScaForge Leakage Core
~~~~~~~~~~~~~~~~~~~~~
Domain types shared by every module, the counter-based randomness contract,
and the first-round AES leakage simulation that produces the raw "current
demand" every countermeasure transforms.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from Crypto.Cipher import AES

from .errors import ConfigError, DimensionError
from .workers import ordered_map

logger = logging.getLogger(__name__)

N_STATE_BYTES = 16
MASK64 = (1 << 64) - 1

LEAKAGE_MODELS = ("hamming_weight", "hamming_distance")
AES_VARIANTS = {"AES-128": 16, "AES-256": 32}

DEFAULT_KEY = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")

# Sub-stream tags; each consumer of randomness owns one.
STREAM_PLAINTEXT = 1
STREAM_NOISE = 2
STREAM_BLEED = 3
STREAM_TVTF = 4
STREAM_SENSOR = 5
STREAM_INIT = 6
STREAM_SHUFFLE = 7

GENERATION_CHUNK = 2048


# ── AES S-box ──────────────────────────────────────────────────────────────

SBOX = np.array([
    0x63, 0x7C, 0x77, 0x7B, 0xF2, 0x6B, 0x6F, 0xC5, 0x30, 0x01, 0x67, 0x2B, 0xFE, 0xD7, 0xAB, 0x76,
    0xCA, 0x82, 0xC9, 0x7D, 0xFA, 0x59, 0x47, 0xF0, 0xAD, 0xD4, 0xA2, 0xAF, 0x9C, 0xA4, 0x72, 0xC0,
    0xB7, 0xFD, 0x93, 0x26, 0x36, 0x3F, 0xF7, 0xCC, 0x34, 0xA5, 0xE5, 0xF1, 0x71, 0xD8, 0x31, 0x15,
    0x04, 0xC7, 0x23, 0xC3, 0x18, 0x96, 0x05, 0x9A, 0x07, 0x12, 0x80, 0xE2, 0xEB, 0x27, 0xB2, 0x75,
    0x09, 0x83, 0x2C, 0x1A, 0x1B, 0x6E, 0x5A, 0xA0, 0x52, 0x3B, 0xD6, 0xB3, 0x29, 0xE3, 0x2F, 0x84,
    0x53, 0xD1, 0x00, 0xED, 0x20, 0xFC, 0xB1, 0x5B, 0x6A, 0xCB, 0xBE, 0x39, 0x4A, 0x4C, 0x58, 0xCF,
    0xD0, 0xEF, 0xAA, 0xFB, 0x43, 0x4D, 0x33, 0x85, 0x45, 0xF9, 0x02, 0x7F, 0x50, 0x3C, 0x9F, 0xA8,
    0x51, 0xA3, 0x40, 0x8F, 0x92, 0x9D, 0x38, 0xF5, 0xBC, 0xB6, 0xDA, 0x21, 0x10, 0xFF, 0xF3, 0xD2,
    0xCD, 0x0C, 0x13, 0xEC, 0x5F, 0x97, 0x44, 0x17, 0xC4, 0xA7, 0x7E, 0x3D, 0x64, 0x5D, 0x19, 0x73,
    0x60, 0x81, 0x4F, 0xDC, 0x22, 0x2A, 0x90, 0x88, 0x46, 0xEE, 0xB8, 0x14, 0xDE, 0x5E, 0x0B, 0xDB,
    0xE0, 0x32, 0x3A, 0x0A, 0x49, 0x06, 0x24, 0x5C, 0xC2, 0xD3, 0xAC, 0x62, 0x91, 0x95, 0xE4, 0x79,
    0xE7, 0xC8, 0x37, 0x6D, 0x8D, 0xD5, 0x4E, 0xA9, 0x6C, 0x56, 0xF4, 0xEA, 0x65, 0x7A, 0xAE, 0x08,
    0xBA, 0x78, 0x25, 0x2E, 0x1C, 0xA6, 0xB4, 0xC6, 0xE8, 0xDD, 0x74, 0x1F, 0x4B, 0xBD, 0x8B, 0x8A,
    0x70, 0x3E, 0xB5, 0x66, 0x48, 0x03, 0xF6, 0x0E, 0x61, 0x35, 0x57, 0xB9, 0x86, 0xC1, 0x1D, 0x9E,
    0xE1, 0xF8, 0x98, 0x11, 0x69, 0xD9, 0x8E, 0x94, 0x9B, 0x1E, 0x87, 0xE9, 0xCE, 0x55, 0x28, 0xDF,
    0x8C, 0xA1, 0x89, 0x0D, 0xBF, 0xE6, 0x42, 0x68, 0x41, 0x99, 0x2D, 0x0F, 0xB0, 0x54, 0xBB, 0x16,
], dtype=np.uint8)

HAMMING_WEIGHT = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1).sum(axis=1).astype(np.uint8)


def sbox_lookup(byte: int) -> int:
    """FIPS-197 forward S-box."""
    if not 0 <= byte <= 255:
        raise ValueError(f"byte out of range: {byte}")
    return int(SBOX[byte])


# ── Randomness ─────────────────────────────────────────────────────────────

def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """
    Counter-based random stream.

    Output is a pure function of (seed, stream_id, counter) and the index
    passed to generator(); index i owns its own 2^64-block counter range, so
    per-trace draws never depend on how traces are chunked or scheduled.
    """
    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id", "counter"):
            value = getattr(self, name)
            if not 0 <= value <= MASK64:
                raise ConfigError(f"must be a 64-bit unsigned integer, got {value}", field=name)

    def generator(self, index: int = 0) -> np.random.Generator:
        key = self.seed | (self.stream_id << 64)
        counter = (self.counter << 128) | ((index & MASK64) << 64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def spawn(self, tag: int) -> "RngStream":
        """Independent sub-stream identified by tag."""
        return RngStream(self.seed, _splitmix64(self.stream_id ^ _splitmix64(tag)), self.counter)

    def advance(self, steps: int = 1) -> "RngStream":
        return RngStream(self.seed, self.stream_id, (self.counter + steps) & MASK64)


# ── Domain Types ───────────────────────────────────────────────────────────

def default_leak_positions(n_samples: int) -> np.ndarray:
    """One leak sample per state byte, spread evenly over the trace."""
    if n_samples < N_STATE_BYTES:
        raise DimensionError(f"n_samples must be >= {N_STATE_BYTES}, got {n_samples}")
    j = np.arange(N_STATE_BYTES, dtype=np.int64)
    return (2 * j + 1) * n_samples // (2 * N_STATE_BYTES)


@dataclass
class TraceSet:
    """Simulated power samples plus per-trace plaintext/ciphertext metadata."""
    samples: np.ndarray
    plaintexts: np.ndarray
    leak_positions: np.ndarray
    ciphertexts: Optional[np.ndarray] = None
    key: Optional[bytes] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.dtype not in (np.float32, np.float64):
            self.samples = self.samples.astype(np.float64)
        self.plaintexts = np.asarray(self.plaintexts, dtype=np.uint8)
        self.leak_positions = np.asarray(self.leak_positions, dtype=np.int64)

        if self.samples.ndim != 2:
            raise DimensionError(f"samples must be 2-D, got shape {self.samples.shape}")
        n_traces, n_samples = self.samples.shape
        if self.plaintexts.shape != (n_traces, N_STATE_BYTES):
            raise DimensionError(
                f"plaintexts shape {self.plaintexts.shape} != ({n_traces}, {N_STATE_BYTES})"
            )
        if self.ciphertexts is not None:
            self.ciphertexts = np.asarray(self.ciphertexts, dtype=np.uint8)
            if self.ciphertexts.shape != (n_traces, N_STATE_BYTES):
                raise DimensionError(
                    f"ciphertexts shape {self.ciphertexts.shape} != ({n_traces}, {N_STATE_BYTES})"
                )
        lp = self.leak_positions
        if lp.shape != (N_STATE_BYTES,):
            raise DimensionError(f"need {N_STATE_BYTES} leak positions, got {lp.shape}")
        if np.any(np.diff(lp) <= 0) or lp[0] < 0 or lp[-1] >= n_samples:
            raise DimensionError("leak_positions must be strictly increasing and < n_samples")
        if not np.all(np.isfinite(self.samples)):
            raise DimensionError("samples contain non-finite values")
        if self.key is not None and len(self.key) not in AES_VARIANTS.values():
            raise DimensionError(f"key must be 16 or 32 bytes, got {len(self.key)}")

    @property
    def n_traces(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def with_samples(self, samples: np.ndarray) -> "TraceSet":
        """Same metadata, new sample matrix (dimensions must match)."""
        if samples.shape != self.samples.shape:
            raise DimensionError(f"shape {samples.shape} != {self.samples.shape}")
        return dataclasses.replace(self, samples=samples)

    def head(self, n: int) -> "TraceSet":
        """First n traces."""
        return TraceSet(
            samples=self.samples[:n],
            plaintexts=self.plaintexts[:n],
            leak_positions=self.leak_positions,
            ciphertexts=None if self.ciphertexts is None else self.ciphertexts[:n],
            key=self.key,
        )


@dataclass
class LeakageConfig:
    """Leakage model of the simulated AES core."""
    model: str = "hamming_weight"
    alpha: float = 1.0
    baseline: float = 10.0
    sigma: float = 2.0
    key: bytes = DEFAULT_KEY
    aes_variant: str = "AES-128"

    def validate(self, prefix: str = "leakage") -> None:
        if self.model not in LEAKAGE_MODELS:
            raise ConfigError(f"must be one of {LEAKAGE_MODELS}", field=f"{prefix}.model")
        if self.aes_variant not in AES_VARIANTS:
            raise ConfigError(f"must be one of {tuple(AES_VARIANTS)}", field=f"{prefix}.aes_variant")
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError("must be >= 0", field=f"{prefix}.alpha")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigError("must be >= 0", field=f"{prefix}.sigma")
        if not np.isfinite(self.baseline):
            raise ConfigError("must be finite", field=f"{prefix}.baseline")
        if len(self.key) != AES_VARIANTS[self.aes_variant]:
            raise ConfigError(
                f"{self.aes_variant} needs a {AES_VARIANTS[self.aes_variant]}-byte key, got {len(self.key)}",
                field=f"{prefix}.key",
            )

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "alpha": self.alpha,
            "baseline": self.baseline,
            "sigma": self.sigma,
            "key": self.key.hex(),
            "aes_variant": self.aes_variant,
        }


# ── Leakage Model ──────────────────────────────────────────────────────────

def leakage_value(
    cfg: LeakageConfig,
    pt_byte: int,
    key_byte: int,
    prev_state_byte: Optional[int] = None,
) -> float:
    """
    Noise-free leakage of one state byte.

    Hamming-distance mode compares the S-box output against the register's
    previous content, which defaults to pt ^ key.
    """
    state = pt_byte ^ key_byte
    out = sbox_lookup(state)
    if cfg.model == "hamming_weight":
        bits = int(HAMMING_WEIGHT[out])
    else:
        prev = state if prev_state_byte is None else prev_state_byte
        bits = int(HAMMING_WEIGHT[out ^ prev])
    return cfg.alpha * float(bits) + cfg.baseline


def hypothesis_table(model: str) -> np.ndarray:
    """Leakage bit count indexed by the S-box input (pt ^ key)."""
    states = np.arange(256, dtype=np.uint8)
    if model == "hamming_weight":
        return HAMMING_WEIGHT[SBOX[states]]
    return HAMMING_WEIGHT[SBOX[states] ^ states]


def leakage_matrix(cfg: LeakageConfig, plaintexts: np.ndarray) -> np.ndarray:
    """Vectorised leakage_value for every (trace, state byte)."""
    key = np.frombuffer(cfg.key[:N_STATE_BYTES], dtype=np.uint8)
    bits = hypothesis_table(cfg.model)[plaintexts ^ key[None, :]]
    return cfg.alpha * bits.astype(np.float64) + cfg.baseline


def aes_encrypt_blocks(key: bytes, plaintexts: np.ndarray) -> np.ndarray:
    """ECB-encrypt each 16-byte row."""
    cipher = AES.new(key, AES.MODE_ECB)
    out = cipher.encrypt(np.ascontiguousarray(plaintexts, dtype=np.uint8).tobytes())
    return np.frombuffer(out, dtype=np.uint8).reshape(-1, N_STATE_BYTES).copy()


# ── Trace Generation ───────────────────────────────────────────────────────

def per_trace_rows(
    rng: RngStream,
    n_traces: int,
    width: int,
    draw: Callable[[np.random.Generator, int], np.ndarray],
    dtype=np.float64,
    threads: Optional[int] = None,
) -> np.ndarray:
    """
    Build an (n_traces, width) matrix where row i is draw(rng.generator(i), width).

    Rows are produced in chunks on the worker pool; because each row has its
    own counter range the result does not depend on the chunking.
    """
    starts = range(0, n_traces, GENERATION_CHUNK)

    def build(start: int) -> np.ndarray:
        stop = min(start + GENERATION_CHUNK, n_traces)
        block = np.empty((stop - start, width), dtype=dtype)
        for i in range(start, stop):
            block[i - start] = draw(rng.generator(i), width)
        return block

    blocks = ordered_map(build, starts, threads=threads)
    if not blocks:
        return np.empty((0, width), dtype=dtype)
    return np.concatenate(blocks, axis=0)


def simulate_noiseless_demand(
    cfg: LeakageConfig,
    n_traces: int,
    n_samples: int,
    rng: RngStream,
    with_ciphertexts: bool = False,
    threads: Optional[int] = None,
) -> TraceSet:
    """Current demand before any countermeasure or acquisition noise."""
    cfg.validate()
    if n_traces < 1:
        raise DimensionError(f"n_traces must be >= 1, got {n_traces}")
    leak_positions = default_leak_positions(n_samples)

    plaintexts = per_trace_rows(
        rng.spawn(STREAM_PLAINTEXT),
        n_traces,
        N_STATE_BYTES,
        lambda gen, width: gen.integers(0, 256, size=width, dtype=np.uint8),
        dtype=np.uint8,
        threads=threads,
    )
    samples = np.full((n_traces, n_samples), cfg.baseline, dtype=np.float64)
    samples[:, leak_positions] = leakage_matrix(cfg, plaintexts)

    ciphertexts = aes_encrypt_blocks(cfg.key, plaintexts) if with_ciphertexts else None
    logger.debug("simulated %d x %d demand traces", n_traces, n_samples)
    return TraceSet(
        samples=samples,
        plaintexts=plaintexts,
        leak_positions=leak_positions,
        ciphertexts=ciphertexts,
        key=cfg.key,
    )


def add_measurement_noise(
    traces: TraceSet,
    sigma: float,
    rng: RngStream,
    threads: Optional[int] = None,
) -> TraceSet:
    """Add i.i.d. Gaussian acquisition noise, one counter range per trace."""
    if sigma < 0:
        raise ConfigError("must be >= 0", field="sigma")
    if sigma == 0:
        return traces.with_samples(traces.samples.copy())
    noise = per_trace_rows(
        rng.spawn(STREAM_NOISE),
        traces.n_traces,
        traces.n_samples,
        lambda gen, width: gen.normal(0.0, sigma, size=width),
        threads=threads,
    )
    return traces.with_samples(traces.samples + noise)


def simulate_demand_traces(
    cfg: LeakageConfig,
    n_traces: int,
    n_samples: int,
    rng: RngStream,
    with_ciphertexts: bool = False,
    threads: Optional[int] = None,
) -> TraceSet:
    """Unprotected AES current-demand traces: first-round leakage plus noise."""
    demand = simulate_noiseless_demand(cfg, n_traces, n_samples, rng, with_ciphertexts, threads)
    return add_measurement_noise(demand, cfg.sigma, rng, threads)
