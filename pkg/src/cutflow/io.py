"""CSV and JSON artifact handling: sample files, manifests, atomic writes.

Sample CSV schema (shared by every method so `compare` is method-agnostic):
header ``eta_1..eta_k,theta_1..theta_d``, one draw per row. Floats are
written with `repr` so files byte-round-trip.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile

import numpy as np

from .engine import CutPosteriorDraws, UpstreamSamples

__all__ = [
    "CsvFormatError",
    "atomic_write",
    "write_json",
    "write_manifest",
    "load_upstream_csv",
    "save_upstream_csv",
    "write_samples_csv",
    "read_samples_csv",
]


class CsvFormatError(ValueError):
    pass


def atomic_write(path, text):
    """Write-temp-then-rename so partial artifacts never appear."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(path, *, seed, config_text="", extra=None):
    """Provenance sidecar: enough to re-run and to detect config drift."""
    manifest = {
        "format": "cutflow-manifest v1",
        "seed": int(seed),
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "package_version": _package_version(),
        "numpy_version": np.__version__,
    }
    if extra:
        manifest.update(extra)
    write_json(path, manifest)
    return manifest


def _package_version():
    from . import __version__
    return __version__


def _format_rows(header, matrix):
    lines = [",".join(header)]
    for row in matrix:
        lines.append(",".join(repr(v) for v in row.tolist()))
    return "\n".join(lines) + "\n"


def _parse_numeric_csv(path):
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise CsvFormatError(f"{path}: empty file") from None
            rows = list(reader)
    except OSError as exc:
        raise CsvFormatError(f"{path}: {exc}") from exc
    header = [h.strip() for h in header]
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    width = len(header)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise CsvFormatError(
                f"{path}: row {i + 2} has {len(row)} cells, expected {width}")
    try:
        matrix = np.array(rows, dtype=np.float64)
    except ValueError:
        # slow path only to locate the offending cell
        for i, row in enumerate(rows):
            for j, cell in enumerate(row):
                try:
                    float(cell)
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: row {i + 2}, column {header[j]!r}: "
                        f"non-numeric value {cell!r}") from None
        raise
    bad = np.argwhere(~np.isfinite(matrix))
    if bad.size:
        i, j = bad[0]
        raise CsvFormatError(
            f"{path}: row {i + 2}, column {header[j]!r}: non-finite value")
    return header, matrix


def load_upstream_csv(path):
    """Read an upstream sample matrix; header names the columns."""
    header, matrix = _parse_numeric_csv(path)
    return UpstreamSamples(matrix, names=header)


def save_upstream_csv(path, upstream):
    names = upstream.names or [f"eta_{j + 1}" for j in range(upstream.dim)]
    atomic_write(path, _format_rows(names, upstream.matrix))


def write_samples_csv(path, draws):
    """Paired (eta, theta) draws in the shared benchmark schema."""
    k = draws.eta.shape[1]
    d = draws.theta.shape[1]
    header = [f"eta_{j + 1}" for j in range(k)] + [f"theta_{j + 1}" for j in range(d)]
    matrix = np.concatenate([draws.eta, draws.theta], axis=1)
    atomic_write(path, _format_rows(header, matrix))


def read_samples_csv(path):
    """Read a paired-sample CSV back into CutPosteriorDraws."""
    header, matrix = _parse_numeric_csv(path)
    eta_cols = [j for j, h in enumerate(header) if h.startswith("eta_")]
    theta_cols = [j for j, h in enumerate(header) if h.startswith("theta_")]
    if not theta_cols:
        raise CsvFormatError(f"{path}: no theta_* columns in header")
    if not eta_cols:
        eta = np.zeros((matrix.shape[0], 1))
    else:
        eta = matrix[:, eta_cols]
    return CutPosteriorDraws(eta, matrix[:, theta_cols],
                             {"source": os.path.basename(str(path))})
