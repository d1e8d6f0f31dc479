"""
ScaForge Store
~~~~~~~~~~~~~~
Persistence for every artifact the CLI writes:

  - .scat trace files (fixed little-endian header, per-trace records),
  - label sidecars (<trace file>.labels.csv) for sensor datasets,
  - CSV reports (MTD curves, CPA results, training history, VDD sweeps),
  - detector model files (versioned JSON),
  - raw key / ciphertext blobs.

Artifacts are written to "<name>.partial" and renamed only on success.
"""

import contextlib
import csv
import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .attack import CpaResult, MtdReport, RankPoint
from .core import N_STATE_BYTES, TraceSet, default_leak_positions
from .countermeasure import SweepPoint, VoltageDropResult
from .detect import SCENARIOS, DetectorModel, EpochRecord
from .errors import (
    BadMagic,
    DataError,
    DimensionOverflow,
    ModelFormatError,
    TraceFormatError,
    TruncatedFile,
    VersionMismatch,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TRACE_MAGIC = b"SCAT"
TRACE_VERSION = 1
HEADER = struct.Struct("<4sIIIBB2x")
META_LEN = struct.Struct("<I")

FLAG_CIPHERTEXTS = 0x01
FLAG_LABELS = 0x02
FLAG_METADATA = 0x04

SAMPLE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {"float32": 0, "float64": 1}
MAX_FILE_BYTES = 1 << 40
U32_MAX = 0xFFFFFFFF

MODEL_FORMAT = "scaforge-detector"
MODEL_VERSION = 1

PARTIAL_SUFFIX = ".partial"


# ── Atomic Writes ──────────────────────────────────────────────────────────

@contextlib.contextmanager
def atomic_path(path: PathLike) -> Iterator[Path]:
    """Yield a temporary sibling path that replaces `path` when the block succeeds."""
    final = Path(path)
    final.parent.mkdir(parents=True, exist_ok=True)
    partial = final.with_name(final.name + PARTIAL_SUFFIX)
    try:
        yield partial
    except BaseException:
        with contextlib.suppress(OSError):
            partial.unlink()
        raise
    os.replace(partial, final)


def write_bytes(path: PathLike, data: bytes) -> None:
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)


def read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}")


# ── Trace Files ────────────────────────────────────────────────────────────

@dataclass
class TraceFileHeader:
    n_traces: int
    n_samples: int
    dtype_code: int = 0
    flags: int = FLAG_METADATA
    version: int = TRACE_VERSION

    @property
    def has_ciphertexts(self) -> bool:
        return bool(self.flags & FLAG_CIPHERTEXTS)

    @property
    def has_labels(self) -> bool:
        return bool(self.flags & FLAG_LABELS)

    @property
    def has_metadata(self) -> bool:
        return bool(self.flags & FLAG_METADATA)

    @property
    def sample_dtype(self) -> np.dtype:
        return SAMPLE_DTYPES[self.dtype_code]

    def record_dtype(self) -> np.dtype:
        fields = [("pt", np.uint8, (N_STATE_BYTES,))]
        if self.has_ciphertexts:
            fields.append(("ct", np.uint8, (N_STATE_BYTES,)))
        fields.append(("x", self.sample_dtype, (self.n_samples,)))
        return np.dtype(fields)

    def pack(self) -> bytes:
        return HEADER.pack(TRACE_MAGIC, self.version, self.n_traces, self.n_samples, self.dtype_code, self.flags)


def _dtype_code(samples: np.ndarray, dtype: Optional[str]) -> int:
    if dtype is None:
        return 1 if samples.dtype == np.float64 else 0
    if dtype not in DTYPE_CODES:
        raise DataError(f"unsupported sample dtype {dtype!r}; use float32 or float64")
    return DTYPE_CODES[dtype]


def labels_path(path: PathLike) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".labels.csv")


def write_traces(
    path: PathLike,
    ts: TraceSet,
    dtype: Optional[str] = None,
    labels: Optional[Sequence[int]] = None,
) -> None:
    """
    Header, JSON metadata block, then per trace
    [16-byte plaintext][optional 16-byte ciphertext][samples].

    `dtype` defaults to the sample matrix's own precision.
    """
    if ts.n_traces > U32_MAX or ts.n_samples > U32_MAX:
        raise DimensionOverflow(f"{ts.n_traces} x {ts.n_samples} does not fit the u32 header fields")
    flags = FLAG_METADATA
    if ts.ciphertexts is not None:
        flags |= FLAG_CIPHERTEXTS
    if labels is not None:
        if len(labels) != ts.n_traces:
            raise DataError(f"{len(labels)} labels for {ts.n_traces} traces")
        flags |= FLAG_LABELS
    header = TraceFileHeader(ts.n_traces, ts.n_samples, _dtype_code(ts.samples, dtype), flags)

    records = np.zeros(ts.n_traces, dtype=header.record_dtype())
    records["pt"] = ts.plaintexts
    if ts.ciphertexts is not None:
        records["ct"] = ts.ciphertexts
    records["x"] = ts.samples

    meta = json.dumps({
        "key": None if ts.key is None else ts.key.hex(),
        "leak_positions": [int(v) for v in ts.leak_positions],
    }).encode("utf-8")

    with atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            f.write(header.pack())
            f.write(META_LEN.pack(len(meta)))
            f.write(meta)
            f.write(records.tobytes())
        if labels is not None:
            write_labels(labels_path(path), labels)
    logger.debug("wrote %d traces to %s", ts.n_traces, path)


class TraceFileReader:
    """Validated view of a trace file that can be read whole or in chunks."""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        try:
            self._size = self.path.stat().st_size
            with open(self.path, "rb") as f:
                raw = f.read(HEADER.size)
                self.header, self.metadata, self._data_offset = self._parse_header(f, raw)
        except OSError as e:
            raise DataError(f"cannot read {path}: {e.strerror}")
        self._record = self.header.record_dtype()

        expected = self._data_offset + self.header.n_traces * self._record.itemsize
        if self._size < expected:
            raise TruncatedFile(
                f"{self.path}: {self._size} bytes on disk, header promises {expected}"
            )
        if self._size > expected:
            raise TraceFormatError(f"{self.path}: {self._size - expected} unexpected trailing bytes")

        key = self.metadata.get("key")
        self.key = bytes.fromhex(key) if key else None
        positions = self.metadata.get("leak_positions")
        self.leak_positions = (
            np.asarray(positions, dtype=np.int64) if positions is not None
            else default_leak_positions(self.header.n_samples)
        )

    def _parse_header(self, f, raw: bytes) -> tuple[TraceFileHeader, dict, int]:
        if len(raw) < 4 or raw[:4] != TRACE_MAGIC:
            raise BadMagic(f"{self.path}: not a trace file (magic {raw[:4]!r})")
        if len(raw) < HEADER.size:
            raise TruncatedFile(f"{self.path}: header cut short")
        magic, version, n_traces, n_samples, dtype_code, flags = HEADER.unpack(raw)
        if version != TRACE_VERSION:
            raise VersionMismatch(f"{self.path}: format version {version}, this build reads {TRACE_VERSION}")
        if dtype_code not in SAMPLE_DTYPES:
            raise TraceFormatError(f"{self.path}: unknown sample dtype code {dtype_code}")
        if n_samples < N_STATE_BYTES:
            raise DimensionOverflow(f"{self.path}: n_samples={n_samples} is below {N_STATE_BYTES}")
        header = TraceFileHeader(n_traces, n_samples, dtype_code, flags, version)
        if n_traces * header.record_dtype().itemsize > MAX_FILE_BYTES:
            raise DimensionOverflow(f"{self.path}: {n_traces} x {n_samples} exceeds the supported file size")

        offset = HEADER.size
        metadata: dict = {}
        if header.has_metadata:
            length_raw = f.read(META_LEN.size)
            if len(length_raw) < META_LEN.size:
                raise TruncatedFile(f"{self.path}: metadata length cut short")
            (length,) = META_LEN.unpack(length_raw)
            blob = f.read(length)
            if len(blob) < length:
                raise TruncatedFile(f"{self.path}: metadata block cut short")
            try:
                metadata = json.loads(blob.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                raise TraceFormatError(f"{self.path}: metadata block is not valid JSON")
            offset += META_LEN.size + length
        return header, metadata, offset

    @property
    def n_traces(self) -> int:
        return self.header.n_traces

    def read(self, start: int = 0, count: Optional[int] = None) -> TraceSet:
        available = max(0, self.n_traces - start)
        count = available if count is None else min(count, available)
        if count == 0:
            records = np.empty(0, dtype=self._record)
        else:
            with open(self.path, "rb") as f:
                f.seek(self._data_offset + start * self._record.itemsize)
                records = np.fromfile(f, dtype=self._record, count=count)
        if len(records) != count:
            raise TruncatedFile(f"{self.path}: expected {count} records, read {len(records)}")
        try:
            return TraceSet(
                samples=records["x"].astype(self.header.sample_dtype.newbyteorder("=")),
                plaintexts=records["pt"].copy(),
                leak_positions=self.leak_positions,
                ciphertexts=records["ct"].copy() if self.header.has_ciphertexts else None,
                key=self.key,
            )
        except DataError as e:
            raise TraceFormatError(f"{self.path}: {e}")

    def chunks(self, size: int) -> Iterator[TraceSet]:
        for start in range(0, self.n_traces, size):
            yield self.read(start, size)


def read_traces(path: PathLike) -> TraceSet:
    return TraceFileReader(path).read()


# ── Label Sidecar ──────────────────────────────────────────────────────────

def write_labels(path: PathLike, labels: Sequence[int]) -> None:
    with atomic_path(path) as tmp:
        with open(tmp, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["index", "label"])
            for i, lab in enumerate(labels):
                w.writerow([i, SCENARIOS[int(lab)]])


def read_labels(path: PathLike) -> np.ndarray:
    """Labels for a trace file (pass the trace file or the sidecar itself)."""
    p = Path(path)
    if not p.name.endswith(".labels.csv"):
        p = labels_path(p)
    rows = _read_csv(p, ["index", "label"])
    out = np.empty(len(rows), dtype=np.int64)
    for i, row in enumerate(rows):
        if int(row["index"]) != i:
            raise DataError(f"{p}: row {i + 2} has index {row['index']}")
        if row["label"] not in SCENARIOS:
            raise DataError(f"{p}: unknown label {row['label']!r}")
        out[i] = SCENARIOS.index(row["label"])
    return out


# ── CSV Reports ────────────────────────────────────────────────────────────

def _fmt(value: float) -> str:
    return format(float(value), ".9g")


def write_csv(path: PathLike, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with atomic_path(path) as tmp:
        with open(tmp, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rows)


def _read_csv(path: PathLike, header: Sequence[str]) -> list[dict]:
    try:
        with open(path, "r", newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or list(reader.fieldnames) != list(header):
                raise DataError(f"{path}: expected columns {','.join(header)}, got {reader.fieldnames}")
            return list(reader)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}")


MTD_COLUMNS = ["checkpoint", "rank", "best_corr"]
HISTORY_COLUMNS = ["epoch", "loss", "accuracy"]
CPA_COLUMNS = ["byte", "key_guess", "correlation", "sample", "true_key_rank"]
SWEEP_COLUMNS = ["vdd", "attenuation", "rho", "mtd"]


def emit_report(path: PathLike, report, key: Optional[bytes] = None) -> None:
    """Write a report object as CSV with its documented header."""
    if isinstance(report, MtdReport):
        rows = [[p.checkpoint, p.rank, _fmt(p.best_corr)] for p in report.rank_curve]
        write_csv(path, MTD_COLUMNS, rows)
    elif isinstance(report, CpaResult):
        rows = []
        for b in report.bytes:
            guess = b.best_guess
            rows.append([
                b.byte_index,
                guess,
                _fmt(b.correlations[guess]),
                int(b.best_samples[guess]),
                "" if key is None else b.rank_of(key[b.byte_index]),
            ])
        write_csv(path, CPA_COLUMNS, rows)
    elif isinstance(report, VoltageDropResult):
        write_sweep(path, report.points)
    elif isinstance(report, list) and all(isinstance(r, EpochRecord) for r in report):
        rows = [[r.epoch, _fmt(r.loss), _fmt(r.accuracy)] for r in report]
        write_csv(path, HISTORY_COLUMNS, rows)
    else:
        raise TypeError(f"no CSV layout for {type(report).__name__}")


def write_sweep(path: PathLike, points: Sequence[SweepPoint]) -> None:
    rows = [[_fmt(p.vdd), _fmt(p.attenuation), _fmt(p.rho), _fmt(p.mtd)] for p in points]
    write_csv(path, SWEEP_COLUMNS, rows)


def read_rank_curve(path: PathLike) -> list[RankPoint]:
    return [
        RankPoint(int(r["checkpoint"]), int(r["rank"]), float(r["best_corr"]))
        for r in _read_csv(path, MTD_COLUMNS)
    ]


def read_history(path: PathLike) -> list[EpochRecord]:
    return [
        EpochRecord(int(r["epoch"]), float(r["loss"]), float(r["accuracy"]))
        for r in _read_csv(path, HISTORY_COLUMNS)
    ]


def read_voltage_series(path: PathLike) -> tuple[np.ndarray, np.ndarray]:
    """(vdd, v_aes) columns of a monitor replay CSV."""
    rows = _read_csv(path, ["vdd", "v_aes"])
    try:
        vdd = np.array([float(r["vdd"]) for r in rows])
        v_aes = np.array([float(r["v_aes"]) for r in rows])
    except ValueError as e:
        raise DataError(f"{path}: {e}")
    return vdd, v_aes


# ── Detector Models ────────────────────────────────────────────────────────

def save_model(path: PathLike, model: DetectorModel) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "layer_sizes": model.layer_sizes,
        "labels": model.labels,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "input_mean": model.input_mean.tolist(),
        "input_scale": model.input_scale.tolist(),
        "final_loss": model.final_loss,
        "degenerate": model.degenerate,
    }
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(doc, f)


def load_model(path: PathLike) -> DetectorModel:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}")
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: not JSON (line {e.lineno}, column {e.colno})")

    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{path}: not a detector model file")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"{path}: model version {doc.get('version')}, this build reads {MODEL_VERSION}")
    try:
        return DetectorModel(
            layer_sizes=[int(v) for v in doc["layer_sizes"]],
            weights=[np.asarray(w, dtype=np.float64) for w in doc["weights"]],
            biases=[np.asarray(b, dtype=np.float64) for b in doc["biases"]],
            input_mean=np.asarray(doc["input_mean"], dtype=np.float64),
            input_scale=np.asarray(doc["input_scale"], dtype=np.float64),
            labels=list(doc["labels"]),
            final_loss=doc.get("final_loss"),
            degenerate=bool(doc.get("degenerate", False)),
        )
    except (KeyError, TypeError, ValueError, DataError) as e:
        raise ModelFormatError(f"{path}: {e}")
