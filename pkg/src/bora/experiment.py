"""Run directories: training runs on disk, metric export and run comparison.

Layout of a run directory::

    config.json     byte-for-byte copy of the input config
    run.json        manifest: run id, code version, seed, timestamps, paths
    report.json     TrainReport
    snapshots/      snapshot archive (manifest.json + weights.bin)
"""

from __future__ import annotations

import datetime as dt
import itertools
import json
import logging
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import engine as E
from .adapters import AdapterConfig, ArchSpec, Method, count_trainable, init_adapter
from .archive import (
    SNAPSHOT_DIR,
    read_archive,
    run_id_for,
    series_to_csv,
    write_archive,
    write_json_atomic,
)
from .dynamics import DIMS, aggregate_layers, group_snapshots, run_series, symmetry_ratio, total_change
from .errors import AlignmentError
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def load_config(path) -> tuple[TrainConfig, bytes]:
    raw = Path(path).read_bytes()
    return TrainConfig.model_validate_json(raw), raw


def run_experiment(config_path, out_dir) -> Path:
    """Train from a JSON config and write every run artifact under ``out_dir``.

    Raises pydantic ``ValidationError`` for bad configs and
    ``TrainingDiverged`` if the loss goes non-finite.
    """
    config, raw = load_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_id = run_id_for(raw, __version__)
    started = _now()
    report, snapshots = train(config)
    (out / "config.json").write_bytes(raw)
    write_archive(out / SNAPSHOT_DIR, snapshots)
    write_json_atomic(out / "report.json", {"run_id": run_id, **report.to_dict()})
    write_json_atomic(
        out / "run.json",
        {
            "run_id": run_id,
            "code_version": __version__,
            "seed": config.seed,
            "method": config.adapter.method.value,
            "started": started,
            "finished": _now(),
            "snapshot_cadence": f"every {config.snapshot_every} optimizer steps",
            "timestep_unit": "optimizer_step",
            "regime": "desk-scale synthetic task; step counts are not mapped from any full-scale epoch schedule",
            "artifacts": {"config": "config.json", "report": "report.json", "snapshots": SNAPSHOT_DIR},
        },
    )
    return out


def _run_meta(run_dir: Path) -> dict:
    path = run_dir / "run.json"
    if path.is_file():
        return json.loads(path.read_text())
    return {"run_id": run_dir.name}


def export_metrics(run_dir, mode: str = "consecutive", dim: str = "both", strict: bool = True) -> str:
    """CSV text of every series point in a run."""
    run_dir = Path(run_dir)
    snaps = read_archive(run_dir / SNAPSHOT_DIR)
    dims = DIMS if dim == "both" else (dim,)
    series = run_series(snaps, mode=mode, dims=dims, strict=strict)
    skipped = sum(p.excluded for s in series for p in s.points)
    if skipped:
        log.warning("excluded %d degenerate vector comparison(s) from delta_d", skipped)
    return series_to_csv(_run_meta(run_dir)["run_id"], series)


# --------------------------------------------------------------------------
# parameter tables

BUILTIN_ARCHS = ("llama-2-7b", "mistral-7b-v0.1", "llama-3-8b")


def load_arch(ref) -> ArchSpec:
    """Arch from a JSON path, or one of :data:`BUILTIN_ARCHS` by name."""
    if str(ref) in BUILTIN_ARCHS:
        text = resources.files("bora").joinpath("archs", f"{ref}.json").read_text()
        return ArchSpec.model_validate_json(text)
    return ArchSpec.from_json(ref)


def params_table(arch: ArchSpec, methods: Sequence[str], ranks: Sequence[int], targets=None) -> list[dict]:
    rows = []
    for method, rank in itertools.product(methods, ranks):
        count, percent = count_trainable(arch, Method(method), rank, targets)
        rows.append({"method": Method(method).value, "rank": rank, "count": count, "percent": percent})
    return rows


# --------------------------------------------------------------------------
# comparison


def _grid(snaps) -> dict:
    return {key: [s.timestep for s in group] for key, group in group_snapshots(snaps).items()}


def summarize_run(run_dir, strict: bool = True) -> dict:
    run_dir = Path(run_dir)
    snaps = read_archive(run_dir / SNAPSHOT_DIR)
    meta = _run_meta(run_dir)
    report = json.loads((run_dir / "report.json").read_text()) if (run_dir / "report.json").is_file() else {}
    consecutive = run_series(snaps, "consecutive", strict=strict)

    totals: dict[str, dict] = {}
    by_label: dict[str, float] = {}
    for label in sorted({s.matrix_label for s in snaps}):
        groups = [g for (_, lbl), g in group_snapshots(snaps).items() if lbl == label]
        totals[label] = {}
        for dim in DIMS:
            pairs = [total_change(g, dim, strict=strict) for g in groups]
            totals[label][dim] = {
                "delta_m": sum(p[0] for p in pairs) / len(pairs),
                "delta_d": sum(p[1] for p in pairs) / len(pairs),
            }
        by_label[label] = symmetry_ratio([s for s in consecutive if s.matrix_label == label])

    curve = report.get("loss_curve") or [{}]
    return {
        "run_dir": str(run_dir),
        "run_id": meta.get("run_id"),
        "method": meta.get("method"),
        "final_train_loss": curve[-1].get("train_loss"),
        "final_eval_loss": curve[-1].get("eval_loss"),
        "final_eval_metric": report.get("final_eval_metric"),
        "total_change": totals,
        "symmetry_ratio": symmetry_ratio(consecutive),
        "symmetry_ratio_by_matrix": by_label,
        "_grid": _grid(snaps),
    }


def mean_consecutive(run_dir, label: str, dim: str) -> list[tuple[int, float, float]]:
    """Layer-averaged consecutive series of one matrix label, as plain tuples."""
    snaps = read_archive(Path(run_dir) / SNAPSHOT_DIR)
    series = [s for s in run_series(snaps, "consecutive", (dim,)) if s.matrix_label == label]
    agg = aggregate_layers(series)
    return [(p.timestep, p.delta_m, p.delta_d) for p in agg.points]


def compare_runs(run_dirs: Sequence, strict: bool = True) -> dict:
    """Summaries of several runs plus the ordering of their symmetry ratios."""
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two runs")
    runs = [summarize_run(d, strict) for d in run_dirs]
    grid = runs[0]["_grid"]
    for r in runs[1:]:
        if r["_grid"] != grid:
            raise AlignmentError(f"{r['run_dir']} has a different snapshot grid from {runs[0]['run_dir']}")
    for r in runs:
        del r["_grid"]

    def name(i):
        return f"{runs[i]['method']}@{runs[i]['run_dir']}"

    pairwise = []
    for i, j in itertools.combinations(range(len(runs)), 2):
        a, b = runs[i]["symmetry_ratio"], runs[j]["symmetry_ratio"]
        pairwise.append(
            {
                "a": name(i),
                "b": name(j),
                "a_ratio": a,
                "b_ratio": b,
                "greater": "tie" if a == b else ("a" if a > b else "b"),
            }
        )
    ordering = sorted(range(len(runs)), key=lambda i: -runs[i]["symmetry_ratio"])
    return {
        "code_version": __version__,
        "runs": runs,
        "pairwise": pairwise,
        "ratio_ordering": [name(i) for i in ordering],
    }


# --------------------------------------------------------------------------
# gradient check


def perturbed_layer(method, h_r: int, h_c: int, rank: int, seed: int = 0, alpha: float = 2.0, **config):
    """Random adapted layer moved off its initialization so every gradient is nontrivial."""
    rng = np.random.default_rng(seed)
    cfg = AdapterConfig(method=Method(method), rank=rank, alpha=alpha, seed=seed, **config)
    layer = init_adapter(rng.standard_normal((h_r, h_c)), cfg, rng=rng)
    layer.B.value = 0.3 * rng.standard_normal(layer.B.shape)
    for m in (layer.m_row, layer.m_col):
        if m is not None:
            m.value = m.value * rng.uniform(0.5, 1.5, size=m.shape)
    return layer


def gradcheck_report(method, h_r: int, h_c: int, rank: int, seed: int = 0, step: float = 1e-5) -> dict:
    """Max relative gradient error of an mse loss, per trainable parameter."""
    layer = perturbed_layer(method, h_r, h_c, rank, seed)
    rng = np.random.default_rng(seed + 1)
    X = E.Matrix(rng.standard_normal((5, h_c)))
    Y = rng.standard_normal((5, h_r))

    def loss():
        return E.mse_loss(layer.forward(X), Y)

    names = ["A", "B", "m_row", "m_col"]
    errors = {}
    for name in names:
        p = getattr(layer, name)
        if p is not None:
            errors[name] = E.grad_check(loss, [p], step)
    return {"method": Method(method).value, "dims": [h_r, h_c], "rank": rank, "step": step, "max_rel_error": errors}
