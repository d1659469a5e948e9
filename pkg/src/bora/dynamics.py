"""Magnitude and direction change metrics between merged-weight snapshots.

For two same-shape weights and a dimension (``"row"`` or ``"col"``):

* ``delta_magnitude`` is the mean absolute difference of per-vector norms;
* ``delta_direction`` is the mean of ``1 - cos`` between matching vectors.

Series are built from snapshots of one adapted matrix, either between
consecutive snapshots or between the first and the last one.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .engine import DEFAULT_FLOOR
from .errors import AlignmentError, DegenerateNormError, InsufficientDataError, ShapeError

log = logging.getLogger(__name__)

DIMS = ("row", "col")
MODES = ("consecutive", "total")


@dataclass(frozen=True)
class WeightSnapshot:
    timestep: int
    layer_id: str
    matrix_label: str
    merged: np.ndarray

    @property
    def key(self) -> tuple[str, str]:
        return (self.layer_id, self.matrix_label)


@dataclass(frozen=True)
class SeriesPoint:
    timestep: int
    delta_m: float
    delta_d: float
    excluded: int = 0


@dataclass
class DynamicsSeries:
    dim: str
    mode: str
    points: list[SeriesPoint] = field(default_factory=list)
    layer_id: str | None = None
    matrix_label: str | None = None

    @property
    def timesteps(self) -> list[int]:
        return [p.timestep for p in self.points]

    @property
    def delta_m(self) -> np.ndarray:
        return np.array([p.delta_m for p in self.points])

    @property
    def delta_d(self) -> np.ndarray:
        return np.array([p.delta_d for p in self.points])


def _vectors(W: np.ndarray, dim: str) -> np.ndarray:
    """Rows of ``W`` for ``"row"``, rows of ``W.T`` for ``"col"``."""
    if dim == "row":
        return W
    if dim == "col":
        return W.T
    raise ValueError(f"dim must be 'row' or 'col', got {dim!r}")


def _pair(W1, W2) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(W1, dtype=np.float64)
    b = np.asarray(W2, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"snapshot shapes {a.shape} and {b.shape} differ")
    return a, b


def delta_magnitude(W1, W2, dim: str) -> float:
    a, b = _pair(W1, W2)
    n1 = np.linalg.norm(_vectors(a, dim), axis=1)
    n2 = np.linalg.norm(_vectors(b, dim), axis=1)
    return float(np.sum(np.abs(n1 - n2)) / n1.size)


def direction_terms(W1, W2, dim: str, floor: float = DEFAULT_FLOOR, strict: bool = True):
    """Mean ``1 - cos`` over vector pairs and the number of pairs skipped.

    A pair is degenerate when either vector's norm is below ``floor``.  Strict
    mode raises on the first one; lenient mode leaves it out of the mean.
    """
    a, b = _pair(W1, W2)
    va, vb = _vectors(a, dim), _vectors(b, dim)
    na = np.linalg.norm(va, axis=1)
    nb = np.linalg.norm(vb, axis=1)
    ok = (na >= floor) & (nb >= floor)
    excluded = int(np.count_nonzero(~ok))
    if excluded and strict:
        raise DegenerateNormError(
            f"{dim} vector(s) {np.flatnonzero(~ok).tolist()} have norm below {floor:g}"
        )
    if excluded == ok.size:
        raise DegenerateNormError(f"every {dim} vector is degenerate")
    # 1 - cos(u, v) = |u/|u| - v/|v||^2 / 2, which is exactly 0 for equal
    # vectors and avoids cancellation at small angles
    ua = va[ok] / na[ok, None]
    ub = vb[ok] / nb[ok, None]
    terms = np.clip(0.5 * np.sum((ua - ub) ** 2, axis=1), 0.0, 2.0)
    return float(np.sum(terms) / terms.size), excluded


def delta_direction(W1, W2, dim: str, floor: float = DEFAULT_FLOOR, strict: bool = True) -> float:
    value, excluded = direction_terms(W1, W2, dim, floor, strict)
    if excluded:
        log.warning("delta_direction skipped %d degenerate %s vector(s)", excluded, dim)
    return value


def _point(prev: WeightSnapshot, cur: WeightSnapshot, timestep: int, dim, floor, strict) -> SeriesPoint:
    dm = delta_magnitude(cur.merged, prev.merged, dim)
    dd, excluded = direction_terms(cur.merged, prev.merged, dim, floor, strict)
    return SeriesPoint(timestep, dm, dd, excluded)


def _ordered(snaps: Sequence[WeightSnapshot]) -> list[WeightSnapshot]:
    snaps = list(snaps)
    if len(snaps) < 2:
        raise InsufficientDataError(f"need at least 2 snapshots, got {len(snaps)}")
    keys = {s.key for s in snaps}
    if len(keys) != 1:
        raise ValueError(f"snapshots mix several matrices: {sorted(keys)}")
    steps = [s.timestep for s in snaps]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError(f"snapshot timesteps must strictly increase, got {steps}")
    return snaps


def consecutive_series(
    snaps: Sequence[WeightSnapshot], dim: str, floor: float = DEFAULT_FLOOR, strict: bool = True
) -> DynamicsSeries:
    """Metrics between each snapshot and its predecessor, one point per step after the first."""
    snaps = _ordered(snaps)
    points = [_point(p, c, c.timestep, dim, floor, strict) for p, c in zip(snaps, snaps[1:])]
    layer, label = snaps[0].key
    return DynamicsSeries(dim, "consecutive", points, layer, label)


def total_change(
    snaps: Sequence[WeightSnapshot], dim: str, floor: float = DEFAULT_FLOOR, strict: bool = True
) -> tuple[float, float]:
    snaps = _ordered(snaps)
    p = _point(snaps[0], snaps[-1], snaps[-1].timestep, dim, floor, strict)
    return p.delta_m, p.delta_d


def total_series(
    snaps: Sequence[WeightSnapshot], dim: str, floor: float = DEFAULT_FLOOR, strict: bool = True
) -> DynamicsSeries:
    """:func:`total_change` wrapped as a one-point series stamped with the final timestep."""
    snaps = _ordered(snaps)
    layer, label = snaps[0].key
    point = _point(snaps[0], snaps[-1], snaps[-1].timestep, dim, floor, strict)
    return DynamicsSeries(dim, "total", [point], layer, label)


def aggregate_layers(series: Iterable[DynamicsSeries]) -> DynamicsSeries:
    """Pointwise mean across layers of series sharing dim, mode and timesteps."""
    series = list(series)
    if not series:
        raise InsufficientDataError("no series to aggregate")
    first = series[0]
    for s in series[1:]:
        if (s.dim, s.mode) != (first.dim, first.mode):
            raise AlignmentError(f"cannot mix {(s.dim, s.mode)} with {(first.dim, first.mode)}")
        if s.timesteps != first.timesteps:
            raise AlignmentError("series timestep grids differ")
    labels = {s.matrix_label for s in series}
    n = len(series)
    points = []
    for i, t in enumerate(first.timesteps):
        # fixed summation order keeps the result independent of scheduling
        dm = sum(s.points[i].delta_m for s in series) / n
        dd = sum(s.points[i].delta_d for s in series) / n
        points.append(SeriesPoint(t, dm, dd, sum(s.points[i].excluded for s in series)))
    label = labels.pop() if len(labels) == 1 else None
    return DynamicsSeries(first.dim, first.mode, points, None, label)


def group_snapshots(snaps: Iterable[WeightSnapshot]) -> dict[tuple[str, str], list[WeightSnapshot]]:
    groups: dict[tuple[str, str], list[WeightSnapshot]] = defaultdict(list)
    for s in snaps:
        groups[s.key].append(s)
    return {k: sorted(v, key=lambda s: s.timestep) for k, v in sorted(groups.items())}


def run_series(
    snaps: Iterable[WeightSnapshot],
    mode: str = "consecutive",
    dims: Sequence[str] = DIMS,
    floor: float = DEFAULT_FLOOR,
    strict: bool = True,
) -> list[DynamicsSeries]:
    """Series for every (layer, matrix) in a run and every requested dim."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    build = consecutive_series if mode == "consecutive" else total_series
    out = []
    for group in group_snapshots(snaps).values():
        for dim in dims:
            out.append(build(group, dim, floor, strict))
    return out


def symmetry_ratio(series: Iterable[DynamicsSeries]) -> float:
    """Time-mean column-wise delta_m over time-mean row-wise delta_m.

    Points of every consecutive series in the run are pooled per dimension.
    """
    pooled: Mapping[str, list[float]] = {"row": [], "col": []}
    for s in series:
        if s.mode == "consecutive":
            pooled[s.dim].extend(p.delta_m for p in s.points)
    if not pooled["row"] or not pooled["col"]:
        raise InsufficientDataError("symmetry_ratio needs both row and col consecutive series")
    row = float(np.mean(pooled["row"]))
    col = float(np.mean(pooled["col"]))
    if row == 0.0:
        raise ZeroDivisionError("row-wise mean delta_m is zero; ratio undefined")
    return col / row
