"""On-disk artifact formats: sample dumps, manifests, CSV reports.

Sample dumps are row-major little-endian float64 matrices (``<name>.bin``)
with a JSON sidecar (``<name>.json``) recording shape, geometry, schedule,
the producing checkpoint hash and seed.  Optional per-sample log-weights sit
in ``<name>.logw.bin``.  Nothing in a dump depends on wall-clock time, so
identical runs produce byte-identical artifacts.

Every artifact directory also gets a ``manifest.json`` listing file checksums
plus the seed and resolved-config hash of the run that produced it.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

__all__ = ["write_samples", "read_samples", "write_manifest", "append_csv_row",
           "write_json"]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_samples(base: str | Path, x: np.ndarray, sidecar: dict,
                  log_weights: np.ndarray | None = None) -> Path:
    base = Path(base)
    x = np.ascontiguousarray(np.atleast_2d(x), dtype="<f8")
    base.with_suffix(".bin").write_bytes(x.tobytes())
    meta = dict(sidecar)
    meta.update({"rows": int(x.shape[0]), "cols": int(x.shape[1]),
                 "dtype": "<f8", "order": "C"})
    if log_weights is not None:
        lw = np.ascontiguousarray(log_weights, dtype="<f8")
        base.with_suffix(".logw.bin").write_bytes(lw.tobytes())
        meta["log_weights"] = base.with_suffix(".logw.bin").name
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return base


def read_samples(base: str | Path):
    """Returns (matrix, sidecar dict, log_weights or None)."""
    base = Path(base)
    if base.suffix in (".bin", ".json"):
        base = base.with_suffix("")
    meta = json.loads(base.with_suffix(".json").read_text())
    raw = np.frombuffer(base.with_suffix(".bin").read_bytes(), dtype="<f8")
    x = raw.reshape(meta["rows"], meta["cols"]).astype(np.float64)
    lw = None
    if meta.get("log_weights"):
        lw = np.frombuffer(
            (base.parent / meta["log_weights"]).read_bytes(), dtype="<f8"
        ).astype(np.float64)
    return x, meta, lw


def write_manifest(out_dir: str | Path, seed: int, config_hash: str) -> Path:
    out_dir = Path(out_dir)
    files = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            files[str(path.relative_to(out_dir))] = _sha256(path)
    manifest = {"seed": int(seed), "config_hash": config_hash, "files": files}
    target = out_dir / "manifest.json"
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return target


def write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)  # full round-trip precision
    return str(value)


def append_csv_row(path: str | Path, header: list[str], row: list) -> None:
    path = Path(path)
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(header)
        writer.writerow([_fmt(v) for v in row])
