"""LoRA, DoRA, DoRA(row) and BoRA adapted linear layers.

Weights are stored out x in: ``W0`` has ``h_r`` rows (output features) and
``h_c`` columns (input features), so a forward pass is ``Y = X @ W.T`` and
"column" always means an input feature.  ``A`` is ``h_r x rank`` and ``B`` is
``rank x h_c``; the low-rank update is ``s * A @ B`` with ``s = alpha / rank``
(or ``alpha / sqrt(rank)`` when rank-stabilized).

BoRA composes two normalizations::

    V_r = (W0 + sAB) / rownorms(W0 + sAB)          # unit rows
    H_c = m_row * V_r / colnorms(m_row * V_r)      # unit columns
    W   = m_col * H_c
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import engine as E
from .engine import Matrix, Tensor, Vector
from .errors import DegenerateNormError, ShapeError


class Method(str, Enum):
    LORA = "lora"
    DORA = "dora"
    DORA_ROW = "dora_row"
    BORA = "bora"

    @property
    def uses_row_magnitude(self) -> bool:
        return self in (Method.DORA_ROW, Method.BORA)

    @property
    def uses_col_magnitude(self) -> bool:
        return self in (Method.DORA, Method.BORA)


class Scaling(str, Enum):
    STANDARD = "standard"
    RANK_STABILIZED = "rank_stabilized"


class NormMode(str, Enum):
    EXACT = "exact"
    DETACHED = "detached"


class AdapterConfig(BaseModel):
    """Adapter hyperparameters.

    ``init_scale`` multiplies the ``1/sqrt(rank)`` half-width of the uniform
    distribution ``A`` is drawn from.  ``strict`` selects whether norms below
    ``floor`` raise or are clamped.
    """

    model_config = ConfigDict(extra="forbid", frozen=True, use_enum_values=False)

    method: Method
    rank: int = Field(gt=0)
    alpha: float = Field(gt=0)
    scaling: Scaling = Scaling.STANDARD
    norm_mode: NormMode = NormMode.EXACT
    floor: float = Field(default=E.DEFAULT_FLOOR, gt=0)
    strict: bool = True
    init_scale: float = Field(default=1.0, ge=0)
    seed: int = 0

    @property
    def scale(self) -> float:
        if self.scaling is Scaling.RANK_STABILIZED:
            return self.alpha / math.sqrt(self.rank)
        return self.alpha / self.rank


@dataclass(eq=False)
class AdaptedLinear:
    W0: Matrix
    A: Matrix
    B: Matrix
    config: AdapterConfig
    m_row: Vector | None = None
    m_col: Vector | None = None
    name: str = field(default="")

    @property
    def out_features(self) -> int:
        return self.W0.rows

    @property
    def in_features(self) -> int:
        return self.W0.cols

    def trainable_params(self) -> list[Tensor]:
        params: list[Tensor] = [self.A, self.B]
        if self.m_row is not None:
            params.append(self.m_row)
        if self.m_col is not None:
            params.append(self.m_col)
        return params

    def zero_grad(self) -> None:
        for p in self.trainable_params():
            p.zero_grad()

    def _norms(self, M: Matrix, dim: str) -> Vector:
        n = E.dim_norms(M, dim)
        if self.config.norm_mode is NormMode.DETACHED:
            n = E.detach(n)
        return n

    def _normalize(self, M: Matrix, dim: str) -> Matrix:
        cfg = self.config
        return E.div_dim(M, self._norms(M, dim), dim, cfg.floor, cfg.strict)

    def decompose(self) -> dict[str, Matrix]:
        """Merged weight plus the intermediate matrices of the composition.

        Keys: ``"adapted"`` (W0 + sAB) and ``"merged"`` always; ``"V_c"`` for
        DoRA, ``"V_r"`` for DoRA(row), ``"V_r"`` and ``"H_c"`` for BoRA.
        """
        method = self.config.method
        update = E.mul_scalar(E.matmul(self.A, self.B), self.config.scale)
        adapted = E.add(self.W0, update)
        parts = {"adapted": adapted}
        if method is Method.LORA:
            merged = adapted
        elif method is Method.DORA:
            parts["V_c"] = self._normalize(adapted, "col")
            merged = E.scale_dim(parts["V_c"], self.m_col, "col")
        elif method is Method.DORA_ROW:
            parts["V_r"] = self._normalize(adapted, "row")
            merged = E.scale_dim(parts["V_r"], self.m_row, "row")
        else:
            parts["V_r"] = self._normalize(adapted, "row")
            rescaled = E.scale_dim(parts["V_r"], self.m_row, "row")
            parts["H_c"] = self._normalize(rescaled, "col")
            merged = E.scale_dim(parts["H_c"], self.m_col, "col")
        parts["merged"] = merged
        return parts

    def merged_weight(self) -> Matrix:
        return self.decompose()["merged"]

    def forward(self, X: Tensor) -> Matrix:
        if X.value.ndim != 2 or X.value.shape[1] != self.in_features:
            raise ShapeError(f"forward: input {X.shape} does not feed {self.W0.shape} weight")
        return E.matmul(X, E.transpose(self.merged_weight()))

    def merge_and_freeze(self) -> Matrix:
        """Plain read-only copy of the merged weight for deployment."""
        with E.no_tape():
            frozen = Matrix(self.merged_weight().value)
        frozen.value.setflags(write=False)
        return frozen


def init_adapter(
    W0,
    config: AdapterConfig,
    rng: np.random.Generator | None = None,
    name: str = "",
) -> AdaptedLinear:
    """Wrap a frozen weight with freshly initialized adapter parameters.

    ``B`` starts at zero and the magnitudes at the norms of ``W0`` so the
    merged weight equals ``W0`` exactly.
    """
    base = np.array(W0.value if isinstance(W0, Tensor) else W0, dtype=np.float64)
    if base.ndim != 2:
        raise ShapeError(f"W0 must be 2-D, got shape {base.shape}")
    h_r, h_c = base.shape
    r = config.rank
    if r >= min(h_r, h_c):
        raise ValueError(f"rank={r} must be < min(h_r, h_c) = {min(h_r, h_c)}")
    if rng is None:
        rng = np.random.default_rng(config.seed)

    frozen = Matrix(base, name=_n(name, "W0"))
    frozen.value.setflags(write=False)
    bound = config.init_scale / math.sqrt(r)
    A = Matrix(rng.uniform(-bound, bound, size=(h_r, r)), requires_grad=True, name=_n(name, "A"))
    B = Matrix(np.zeros((r, h_c)), requires_grad=True, name=_n(name, "B"))

    row_norms = E.dim_norms(frozen, "row").value
    col_norms = E.dim_norms(frozen, "col").value
    if config.strict:
        _check_nondegenerate(row_norms, "row", config.floor)
        _check_nondegenerate(col_norms, "col", config.floor)
    m_row = m_col = None
    if config.method.uses_row_magnitude:
        m_row = Vector(row_norms, requires_grad=True, name=_n(name, "m_row"))
    if config.method.uses_col_magnitude:
        m_col = Vector(col_norms, requires_grad=True, name=_n(name, "m_col"))
    return AdaptedLinear(W0=frozen, A=A, B=B, config=config, m_row=m_row, m_col=m_col, name=name)


def _n(prefix: str, leaf: str) -> str:
    return f"{prefix}.{leaf}" if prefix else leaf


def _check_nondegenerate(norms: np.ndarray, dim: str, floor: float) -> None:
    bad = np.flatnonzero(norms < floor)
    if bad.size:
        raise DegenerateNormError(f"W0 has degenerate {dim}(s) at index {bad.tolist()}")


# --------------------------------------------------------------------------
# parameter accounting


class ArchMatrix(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    label: str
    out: int = Field(gt=0)
    in_: int = Field(gt=0, alias="in")


class ArchSpec(BaseModel):
    """Per-layer adaptable matrices of a model and its total parameter count."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    n_layers: int = Field(gt=0)
    base_param_total: int = Field(gt=0)
    matrices: list[ArchMatrix]

    @model_validator(mode="after")
    def _check(self) -> "ArchSpec":
        labels = [m.label for m in self.matrices]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate matrix labels in {labels}")
        listed = self.n_layers * sum(m.out * m.in_ for m in self.matrices)
        if self.base_param_total <= listed:
            raise ValueError("base_param_total must exceed the listed matrix sizes")
        return self

    @classmethod
    def from_json(cls, path) -> "ArchSpec":
        return cls.model_validate(json.loads(Path(path).read_text()))

    @property
    def labels(self) -> list[str]:
        return [m.label for m in self.matrices]


class ParamCount(NamedTuple):
    count: int
    percent: float


def adapter_param_count(method: Method, rank: int, h_r: int, h_c: int) -> int:
    """Trainable parameters one adapted ``h_r x h_c`` matrix adds."""
    n = rank * (h_r + h_c)
    if method.uses_row_magnitude:
        n += h_r
    if method.uses_col_magnitude:
        n += h_c
    return n


def count_trainable(arch: ArchSpec, method: Method | str, rank: int, targets=None) -> ParamCount:
    """Trainable count and its share of base + trainable parameters.

    The percentage is rounded half-up to two decimals.  ``targets`` defaults
    to every matrix in ``arch``.
    """
    method = Method(method)
    if rank <= 0:
        raise ValueError(f"rank must be positive, got {rank}")
    by_label = {m.label: m for m in arch.matrices}
    targets = list(by_label) if targets is None else list(targets)
    unknown = [t for t in targets if t not in by_label]
    if unknown:
        raise KeyError(f"unknown target(s) {unknown} for {arch.name}; known: {list(by_label)}")
    per_layer = sum(adapter_param_count(method, rank, by_label[t].out, by_label[t].in_) for t in set(targets))
    count = arch.n_layers * per_layer
    exact = Decimal(100 * count) / Decimal(arch.base_param_total + count)
    return ParamCount(count, float(exact.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)))
