"""Desk-scale training harness for adapted linear stacks.

Two synthetic tasks stand in for real fine-tuning data:

``planted_lowrank_regression``
    One frozen ``W0`` and a planted update ``P @ Q`` of rank ``planted_rank``;
    targets are ``X @ (W0 + P Q).T`` plus Gaussian noise.  A rank-``r``
    adapter with ``r >= planted_rank`` can fit it exactly.
``toy_classification``
    Gaussian clusters with integer labels fed to a tanh MLP whose frozen
    weights are random; every linear map is adapted.

Optimization follows AdamW with a linear-warmup/cosine learning-rate
schedule.  Randomness is drawn from numpy ``Generator`` streams keyed by
``(seed, purpose)`` so each consumer is independent of the others.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import engine as E
from .adapters import AdaptedLinear, AdapterConfig, adapter_param_count, init_adapter
from .dynamics import WeightSnapshot
from .engine import Matrix, Tensor
from .errors import NumericError, TrainingDiverged

log = logging.getLogger(__name__)

# stream identifiers for (seed, purpose) generator splitting
STREAM_TASK_DATA = 1
STREAM_TASK_BASE = 2
STREAM_ADAPTER = 3
STREAM_BATCHES = 4


def stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, purpose])))


class TaskKind(str, Enum):
    PLANTED_LOWRANK_REGRESSION = "planted_lowrank_regression"
    TOY_CLASSIFICATION = "toy_classification"


class TaskSpec(BaseModel):
    """Synthetic task description.

    ``hidden_dim`` > 0 inserts ``hidden_layers`` tanh hidden layers
    (classification only).
    ``planted_scale`` sets the entry scale of the planted factors.
    ``noise_std`` is label noise for regression and cluster spread for
    classification.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: TaskKind
    input_dim: int = Field(gt=0)
    output_dim: int = Field(gt=0)
    n_train: int = Field(gt=0)
    n_eval: int = Field(gt=0)
    planted_rank: int = Field(default=0, ge=0)
    planted_scale: float = Field(default=1.0, ge=0)
    noise_std: float = Field(default=0.0, ge=0)
    hidden_dim: int = Field(default=0, ge=0)
    hidden_layers: int = Field(default=1, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "TaskSpec":
        if self.planted_rank > min(self.input_dim, self.output_dim):
            raise ValueError("planted_rank must be <= min(input_dim, output_dim)")
        if self.kind is TaskKind.PLANTED_LOWRANK_REGRESSION and self.hidden_dim:
            raise ValueError("hidden_dim is only supported for toy_classification")
        if self.kind is TaskKind.TOY_CLASSIFICATION and self.output_dim < 2:
            raise ValueError("toy_classification needs output_dim >= 2 classes")
        return self

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) of each adapted matrix, input side first."""
        if self.hidden_dim:
            h = self.hidden_dim
            shapes = [(h, self.input_dim)] + [(h, h)] * (self.hidden_layers - 1)
            return shapes + [(self.output_dim, h)]
        return [(self.output_dim, self.input_dim)]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    adapter: AdapterConfig
    task: TaskSpec
    steps: int = Field(ge=0)
    batch_size: int = Field(gt=0)
    base_lr: float = Field(gt=0)
    warmup_ratio: float = Field(default=0.1, ge=0, le=1)
    weight_decay: float = Field(default=0.0, ge=0)
    snapshot_every: int = Field(default=1, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        smallest = min(min(shape) for shape in self.task.layer_shapes())
        if self.adapter.rank >= smallest:
            raise ValueError(
                f"rank={self.adapter.rank} must be < the smallest adapted dimension ({smallest})"
            )
        if self.warmup_ratio > 0 and self.steps > 0 and self.warmup_ratio * self.steps < 1:
            raise ValueError("warmup_ratio * steps must be >= 1 when warmup_ratio > 0")
        return self


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_eval: np.ndarray
    y_eval: np.ndarray
    base_weights: list[np.ndarray]
    planted: np.ndarray | None = None

    @property
    def is_classification(self) -> bool:
        return self.y_train.dtype.kind == "i"


def make_task(spec: TaskSpec) -> Dataset:
    """Sample a dataset and the frozen base weights it is posed against."""
    data_rng = stream(spec.seed, STREAM_TASK_DATA)
    base_rng = stream(spec.seed, STREAM_TASK_BASE)
    n = spec.n_train + spec.n_eval

    base = [base_rng.standard_normal((o, i)) / math.sqrt(i) for o, i in spec.layer_shapes()]

    if spec.kind is TaskKind.PLANTED_LOWRANK_REGRESSION:
        d_in, d_out, k = spec.input_dim, spec.output_dim, spec.planted_rank
        P = base_rng.standard_normal((d_out, k)) * spec.planted_scale / math.sqrt(max(k, 1))
        Q = base_rng.standard_normal((k, d_in)) / math.sqrt(d_in)
        planted = P @ Q
        X = data_rng.standard_normal((n, d_in))
        Y = X @ (base[0] + planted).T + spec.noise_std * data_rng.standard_normal((n, d_out))
        return Dataset(X[: spec.n_train], Y[: spec.n_train], X[spec.n_train :], Y[spec.n_train :], base, planted)

    centers = data_rng.standard_normal((spec.output_dim, spec.input_dim)) * 2.0
    labels = data_rng.integers(0, spec.output_dim, size=n)
    X = centers[labels] + spec.noise_std * data_rng.standard_normal((n, spec.input_dim))
    labels = labels.astype(np.int64)
    return Dataset(X[: spec.n_train], labels[: spec.n_train], X[spec.n_train :], labels[spec.n_train :], base)


# --------------------------------------------------------------------------
# model


@dataclass
class AdaptedStack:
    """Adapted linear layers with tanh between them; no biases."""

    layers: list[AdaptedLinear]
    labels: list[str]

    def forward(self, X: Tensor) -> Matrix:
        h = X
        for i, layer in enumerate(self.layers):
            if i:
                h = E.tanh(h)
            h = layer.forward(h)
        return h

    def trainable_params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.trainable_params()]

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def snapshot(self, timestep: int) -> list[WeightSnapshot]:
        return [
            WeightSnapshot(timestep, str(i), label, layer.merge_and_freeze().value)
            for i, (layer, label) in enumerate(zip(self.layers, self.labels))
        ]


def build_model(config: TrainConfig, data: Dataset) -> AdaptedStack:
    rng = stream(config.adapter.seed, STREAM_ADAPTER)
    n = len(data.base_weights)
    labels = ["W"] if n == 1 else ["hidden"] * (n - 1) + ["head"]
    layers = [
        init_adapter(W0, config.adapter, rng=rng, name=f"{i}.{label}")
        for i, (W0, label) in enumerate(zip(data.base_weights, labels))
    ]
    return AdaptedStack(layers, labels)


def expected_trainable(config: TrainConfig) -> int:
    return sum(
        adapter_param_count(config.adapter.method, config.adapter.rank, o, i)
        for o, i in config.task.layer_shapes()
    )


# --------------------------------------------------------------------------
# optimization


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)


def adamw_step(
    params: Sequence[Tensor],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamWState:
    """One AdamW update of ``params`` from their ``.grad`` fields.

    Weight decay is decoupled: the parameter shrinks by ``lr * weight_decay``
    before the Adam step.  A missing gradient counts as zero.
    """
    if not state.exp_avg:
        state.exp_avg = [np.zeros_like(p.value) for p in params]
        state.exp_avg_sq = [np.zeros_like(p.value) for p in params]
    grads = []
    for p in params:
        g = np.zeros_like(p.value) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {p.name or p!r}")
        grads.append(g)
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        value = p.value * (1.0 - lr * weight_decay)
        value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.value = value
    return state


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return math.ceil(warmup_ratio * total_steps)


def lr_schedule(step: int, total_steps: int, warmup_ratio: float, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over the warmup, then cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, warmup_ratio)
    if step < warm:
        return base_lr * step / warm
    if total_steps == warm:
        return base_lr
    progress = (step - warm) / (total_steps - warm)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# loop


@dataclass
class LossPoint:
    step: int
    train_loss: float
    eval_loss: float


@dataclass
class TrainReport:
    loss_curve: list[LossPoint]
    final_eval_metric: float
    eval_metric_name: str
    trainable_params: int
    wall_clock_seconds: float
    snapshot_steps: list[int]

    @property
    def initial_eval_loss(self) -> float:
        return self.loss_curve[0].eval_loss

    @property
    def final_eval_loss(self) -> float:
        return self.loss_curve[-1].eval_loss

    def to_dict(self) -> dict:
        return {
            "loss_curve": [vars(p) for p in self.loss_curve],
            "final_eval_metric": self.final_eval_metric,
            "eval_metric_name": self.eval_metric_name,
            "trainable_params": self.trainable_params,
            "wall_clock_seconds": self.wall_clock_seconds,
            "snapshot_steps": self.snapshot_steps,
        }


def _loss(model: AdaptedStack, X: np.ndarray, y: np.ndarray, classification: bool):
    out = model.forward(Matrix(X))
    if classification:
        return E.softmax_cross_entropy(out, y), out
    return E.mse_loss(out, y), out


def _evaluate(model: AdaptedStack, data: Dataset) -> tuple[float, float]:
    """Eval loss and eval metric (mse for regression, accuracy for classification)."""
    with E.no_tape():
        loss, out = _loss(model, data.X_eval, data.y_eval, data.is_classification)
    if data.is_classification:
        return loss.item(), float(np.mean(out.value.argmax(axis=1) == data.y_eval))
    return loss.item(), loss.item()


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless minibatch indices; each epoch is a fresh full permutation."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def train(config: TrainConfig, data: Dataset | None = None) -> tuple[TrainReport, list[WeightSnapshot]]:
    """Run the optimization loop and collect merged-weight snapshots.

    Snapshots are taken at step 0, every ``snapshot_every`` optimizer steps,
    and after the last step.  A step's learning rate is
    ``lr_schedule(k, steps, ...)`` for the zero-based step index ``k``.
    """
    started = time.perf_counter()
    data = make_task(config.task) if data is None else data
    model = build_model(config, data)
    params = model.trainable_params()
    frozen = [layer.W0.value.copy() for layer in model.layers]
    classify = data.is_classification
    metric_name = "accuracy" if classify else "mse"

    with E.no_tape():
        train_loss = _loss(model, data.X_train, data.y_train, classify)[0].item()
    eval_loss, metric = _evaluate(model, data)
    curve = [LossPoint(0, train_loss, eval_loss)]
    snapshots = model.snapshot(0)
    snapshot_steps = [0]
    state = AdamWState()
    batches = _batches(len(data.X_train), config.batch_size, stream(config.seed, STREAM_BATCHES))

    for k in range(config.steps):
        idx = next(batches)
        model.zero_grad()
        with E.Tape() as tape:
            loss, _ = _loss(model, data.X_train[idx], data.y_train[idx], classify)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(k + 1, value)
        E.backward(tape, loss)
        lr = lr_schedule(k, config.steps, config.warmup_ratio, config.base_lr)
        adamw_step(params, state, lr, weight_decay=config.weight_decay)

        step = k + 1
        if step % config.snapshot_every == 0 or step == config.steps:
            eval_loss, metric = _evaluate(model, data)
            if not math.isfinite(eval_loss):
                raise TrainingDiverged(step, eval_loss)
            curve.append(LossPoint(step, value, eval_loss))
            snapshots.extend(model.snapshot(step))
            snapshot_steps.append(step)
            log.debug("step %d train %.6g eval %.6g lr %.3g", step, value, eval_loss, lr)

    for before, layer in zip(frozen, model.layers):
        if not np.array_equal(before, layer.W0.value):  # pragma: no cover - invariant guard
            raise AssertionError(f"frozen weight {layer.W0.name} changed during training")

    report = TrainReport(
        loss_curve=curve,
        final_eval_metric=metric,
        eval_metric_name=metric_name,
        trainable_params=sum(p.value.size for p in params),
        wall_clock_seconds=time.perf_counter() - started,
        snapshot_steps=snapshot_steps,
    )
    return report, snapshots
