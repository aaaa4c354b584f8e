"""File formats, run manifests, and the checkpoint sweep driver.

Matrix file layout (little-endian throughout):

    offset  size  field
    0       8     magic, ASCII "SPECGEO1"
    8       1     dtype code: 1 = float32, 2 = float64
    9       8     rows, unsigned 64-bit
    17      8     cols, unsigned 64-bit
    25      ...   payload, rows*cols values in row-major order

float64 is the canonical dtype; float32 payloads are widened exactly on
read.  The payload length must match the header exactly, so truncated
and padded files are both rejected.

A run manifest is a JSON file listing labelled matrix files (typically
training checkpoints) plus processing options; ``sweep`` turns it into a
metrics report, continuing past per-entry failures so one bad checkpoint
does not sink a long run.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .spectral import (
    FeatureMatrix,
    ablate_spectrum,
    center_features,
    covariance_spectrum,
    rankme,
    spectral_metrics,
)

__all__ = [
    "MAGIC",
    "MatrixFormatError",
    "BadMagicError",
    "BadDtypeError",
    "SizeMismatchError",
    "read_matrix",
    "write_matrix",
    "RunManifest",
    "ManifestEntry",
    "SweepOptions",
    "MetricsReport",
    "load_manifest",
    "sweep",
]

MAGIC = b"SPECGEO1"
_HEADER = struct.Struct("<8sBQQ")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {"f32": 1, "f64": 2}


class MatrixFormatError(ValueError):
    """Base class for matrix-file format violations."""


class BadMagicError(MatrixFormatError):
    pass


class BadDtypeError(MatrixFormatError):
    pass


class SizeMismatchError(MatrixFormatError):
    pass


def write_matrix(f: FeatureMatrix, path, dtype: str = "f64") -> None:
    """Write a feature matrix; float64 round-trips bit-exactly."""
    if dtype not in _DTYPE_CODES:
        raise BadDtypeError(f"dtype must be f32 or f64, got {dtype!r}")
    code = _DTYPE_CODES[dtype]
    data = np.ascontiguousarray(f.data, dtype=_DTYPES[code])
    header = _HEADER.pack(MAGIC, code, f.m, f.d)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_matrix(path) -> FeatureMatrix:
    """Read a matrix file, widening float32 payloads to float64 exactly."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise SizeMismatchError(f"file is shorter than the {_HEADER.size}-byte header")
    magic, code, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if code not in _DTYPES:
        raise BadDtypeError(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    expected = rows * cols * dtype.itemsize
    payload = raw[_HEADER.size :]
    if len(payload) != expected:
        raise SizeMismatchError(
            f"payload is {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(rows, cols)
    return FeatureMatrix(data.astype(np.float64), centered=False)


@dataclass(frozen=True)
class ManifestEntry:
    label: str
    path: str


@dataclass(frozen=True)
class SweepOptions:
    center: bool = True
    alpha_window: Optional[tuple[int, int]] = None
    ablation_k: Optional[int] = None
    ablation_mode: str = "retain_top"


@dataclass(frozen=True)
class RunManifest:
    entries: tuple[ManifestEntry, ...]
    options: SweepOptions = field(default_factory=SweepOptions)

    def __post_init__(self):
        if not self.entries:
            raise ValueError("manifest has no entries")
        labels = [e.label for e in self.entries]
        if len(set(labels)) != len(labels):
            raise ValueError("manifest labels must be unique")


def load_manifest(path) -> RunManifest:
    """Parse a JSON manifest and verify every listed file exists."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    entries = tuple(
        ManifestEntry(label=str(e["label"]), path=str(e["path"]))
        for e in doc.get("entries", [])
    )
    opts = doc.get("options", {})
    window = opts.get("alpha_window")
    ablation = opts.get("ablation") or {}
    manifest = RunManifest(
        entries=entries,
        options=SweepOptions(
            center=bool(opts.get("center", True)),
            alpha_window=tuple(window) if window else None,
            ablation_k=ablation.get("k"),
            ablation_mode=ablation.get("mode", "retain_top"),
        ),
    )
    base = Path(path).parent
    for entry in manifest.entries:
        p = Path(entry.path)
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            raise FileNotFoundError(f"manifest entry {entry.label!r}: missing {p}")
    return manifest


@dataclass
class MetricsReport:
    """Per-label metric records plus provenance; deterministic ordering."""

    records: list
    errors: list
    toolkit_version: str = __version__

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_json(self) -> str:
        doc = {
            "toolkit_version": self.toolkit_version,
            "records": self.records,
            "errors": self.errors,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        cols = ["label", "rankme", "alpha_req", "fit_r2", "fit_window_lo",
                "fit_window_hi", "m", "d", "sha256"]
        lines = [",".join(cols)]
        for rec in self.records:
            lines.append(",".join([
                rec["label"],
                repr(rec["rankme"]),
                repr(rec["alpha_req"]),
                repr(rec["fit_r2"]),
                str(rec["fit_window"][0]),
                str(rec["fit_window"][1]),
                str(rec["m"]),
                str(rec["d"]),
                rec["sha256"],
            ]))
        return "\n".join(lines) + "\n"


def _sweep_entry(entry: ManifestEntry, options: SweepOptions, base: Path) -> dict:
    path = Path(entry.path)
    if not path.is_absolute():
        path = base / path
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    fm = read_matrix(path)
    if options.center:
        fm = center_features(fm)
    metrics = spectral_metrics(fm, options.alpha_window)
    record = {"label": entry.label, "sha256": digest, **metrics.to_record()}
    if options.ablation_k is not None:
        ablated = ablate_spectrum(fm, options.ablation_k, options.ablation_mode)
        spec_full = covariance_spectrum(fm)
        spec_abl = covariance_spectrum(ablated)
        total = float(spec_full.values.sum())
        record["ablation"] = {
            "k": options.ablation_k,
            "mode": options.ablation_mode,
            "retained_energy": float(spec_abl.values.sum()) / total if total else 0.0,
            "rankme": rankme(spec_abl) if spec_abl.values.sum() > 0 else None,
        }
    return record


def _max_workers() -> int:
    raw = os.environ.get("SPECGEO_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return max(1, n)


def sweep(manifest: RunManifest, base_dir=".") -> MetricsReport:
    """Compute spectral metrics for every manifest entry.

    Entries are processed in parallel up to SPECGEO_THREADS workers, but
    the report is assembled in manifest order, so output bytes do not
    depend on scheduling.  Per-entry failures become error records and
    processing continues.
    """
    base = Path(base_dir)
    workers = min(_max_workers(), len(manifest.entries))
    results: list = [None] * len(manifest.entries)
    if workers == 1:
        for i, entry in enumerate(manifest.entries):
            results[i] = _run_one(entry, manifest.options, base)
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_run_one, entry, manifest.options, base): i
                for i, entry in enumerate(manifest.entries)
            }
            for fut in concurrent.futures.as_completed(futures):
                results[futures[fut]] = fut.result()

    records, errors = [], []
    for entry, outcome in zip(manifest.entries, results):
        kind, payload = outcome
        if kind == "ok":
            records.append(payload)
        else:
            errors.append({"label": entry.label, "error": payload})
    return MetricsReport(records=records, errors=errors)


def _run_one(entry: ManifestEntry, options: SweepOptions, base: Path):
    try:
        return "ok", _sweep_entry(entry, options, base)
    except Exception as exc:  # recorded, sweep continues
        return "error", f"{type(exc).__name__}: {exc}"
