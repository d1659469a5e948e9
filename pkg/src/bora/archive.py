"""On-disk formats: snapshot archives, run manifests and metric CSVs.

A snapshot archive is a directory holding ``manifest.json`` and
``weights.bin``.  The binary file is every snapshot's merged weight,
row-major float64 little-endian, concatenated in manifest order.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dynamics import DynamicsSeries, SeriesPoint, WeightSnapshot

ARCHIVE_VERSION = 1
SNAPSHOT_DIR = "snapshots"
CSV_HEADER = ("run_id", "layer", "matrix", "timestep", "dim", "mode", "delta_m", "delta_d")
_LE_F64 = np.dtype("<f8")


class ArchiveError(OSError):
    """Archive missing or inconsistent."""


def _sort_key(s: WeightSnapshot):
    return (s.layer_id, s.matrix_label, s.timestep)


def write_archive(directory, snapshots: Iterable[WeightSnapshot]) -> Path:
    """Write snapshots atomically: build in a sibling temp dir, then rename."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    snaps = sorted(snapshots, key=_sort_key)
    entries, offset = [], 0
    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        with open(tmp / "weights.bin", "wb") as fh:
            for s in snaps:
                arr = np.ascontiguousarray(s.merged, dtype=_LE_F64)
                rows, cols = arr.shape
                fh.write(arr.tobytes(order="C"))
                entries.append(
                    {
                        "layer_id": s.layer_id,
                        "matrix_label": s.matrix_label,
                        "timestep": s.timestep,
                        "rows": rows,
                        "cols": cols,
                        "offset": offset,
                    }
                )
                offset += rows * cols * 8
        manifest = {"version": ARCHIVE_VERSION, "dtype": "f64", "byte_order": "little", "entries": entries}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def read_archive(directory) -> list[WeightSnapshot]:
    directory = Path(directory)
    manifest_path, weights_path = directory / "manifest.json", directory / "weights.bin"
    if not manifest_path.is_file() or not weights_path.is_file():
        raise ArchiveError(f"no snapshot archive at {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("dtype") != "f64" or manifest.get("byte_order") != "little":
        raise ArchiveError(f"unsupported archive encoding in {manifest_path}")
    blob = weights_path.read_bytes()
    snaps = []
    for e in manifest["entries"]:
        size = e["rows"] * e["cols"] * 8
        if e["offset"] < 0 or e["offset"] + size > len(blob):
            raise ArchiveError(f"entry {e} runs past the end of weights.bin")
        arr = np.frombuffer(blob, dtype=_LE_F64, count=e["rows"] * e["cols"], offset=e["offset"])
        merged = arr.reshape(e["rows"], e["cols"]).astype(np.float64)
        snaps.append(WeightSnapshot(e["timestep"], e["layer_id"], e["matrix_label"], merged))
    if [_sort_key(s) for s in snaps] != sorted(_sort_key(s) for s in snaps):
        raise ArchiveError("archive entries are not sorted by (layer_id, matrix_label, timestep)")
    return snaps


def run_id_for(config_bytes: bytes, code_version: str) -> str:
    return hashlib.sha256(config_bytes + b"\0" + code_version.encode()).hexdigest()[:16]


def write_json_atomic(path, payload) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# metrics CSV


def _fmt(x: float) -> str:
    return format(x, ".17g")


def series_to_csv(run_id: str, series: Sequence[DynamicsSeries]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for s in series:
        for p in s.points:
            writer.writerow(
                [run_id, s.layer_id, s.matrix_label, p.timestep, s.dim, s.mode, _fmt(p.delta_m), _fmt(p.delta_d)]
            )
    return buf.getvalue()


def write_csv(path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def series_from_csv(text: str) -> list[DynamicsSeries]:
    """Inverse of :func:`series_to_csv`; the run id is dropped."""
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    grouped: dict[tuple, DynamicsSeries] = {}
    for row in reader:
        key = (row["layer"], row["matrix"], row["dim"], row["mode"])
        if key not in grouped:
            grouped[key] = DynamicsSeries(row["dim"], row["mode"], [], row["layer"], row["matrix"])
        grouped[key].points.append(
            SeriesPoint(int(row["timestep"]), float(row["delta_m"]), float(row["delta_d"]))
        )
    return list(grouped.values())
