"""Optimisation loops: pre-training, distillation into a reduced student, fine-tuning, evaluation."""

from __future__ import annotations

import csv
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset
from .model import (
    Checkpoint,
    FeatureBundle,
    GraphBatch,
    LossWeights,
    ModelConfig,
    Prediction,
    as_tensors,
    collate,
    energy_force_loss,
    forward,
    glorot,
    init_checkpoint,
    make_graph,
)
from .tensor import Tensor

__all__ = [
    "TrainBudget",
    "KDConfig",
    "EvalMetrics",
    "TrainingLog",
    "NonFiniteLossError",
    "Adam",
    "prepare_graphs",
    "optimize",
    "pretrain",
    "kd_loss",
    "distill",
    "distill_subset",
    "finetune",
    "from_scratch",
    "evaluate",
    "write_metrics",
]

LOG_FIELDS = ["step", "loss_total", "loss_energy", "loss_force", "loss_kd", "val_force_mae"]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainBudget:
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    mode: str = "steps"  # or "wall_clock"
    seconds: float = 0.0
    eval_interval: int = 0  # steps between validation passes; 0 disables
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.mode not in ("steps", "wall_clock"):
            raise ValueError(f"unknown budget mode {self.mode!r}")
        if self.mode == "steps" and self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.mode == "wall_clock" and not self.seconds > 0:
            raise ValueError("wall-clock budgets need seconds > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class KDConfig:
    lam: float = 1.0
    distill_output: bool = True
    distill_energy: bool = False
    distill_mlp_layers: int = 1  # n'
    distill_n2n: bool = True
    distill_e2e: bool = True
    # None matches only the deepest retained block
    n2n_blocks: tuple[int, ...] | None = None
    e2e_blocks: tuple[int, ...] | None = None
    include_ground_truth_loss: bool = False
    data_fraction: float = 0.015

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.distill_mlp_layers < 0:
            raise ValueError("n' must be >= 0")
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must lie in (0, 1]")
        if self.lam > 0 and not self.any_term:
            raise ValueError("lambda > 0 needs at least one distillation term")

    @property
    def any_term(self) -> bool:
        return (
            self.distill_output
            or self.distill_energy
            or self.distill_mlp_layers > 0
            or self.distill_n2n
            or self.distill_e2e
        )


@dataclass
class EvalMetrics:
    force_mae: float
    energy_mae_per_atom: float
    sample_count: int
    split: str = "test"


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)
    # (wall-clock seconds excluding evaluation, validation force MAE)
    curve: list[tuple[float, float]] = field(default_factory=list)

    def write(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_FIELDS)
            for row in self.rows:
                w.writerow([_cell(row.get(k)) for k in LOG_FIELDS])


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class Adam:
    """Adam (no weight decay) over a name -> array mapping, updated in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: "OrderedDict[str, np.ndarray]", grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def prepare_graphs(dataset, config: ModelConfig) -> list[GraphBatch]:
    return [make_graph(s, config) for s in dataset]


Objective = Callable[[dict[str, Tensor], GraphBatch, list[int]], tuple[Tensor, dict[str, float]]]


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale


def optimize(
    checkpoint: Checkpoint,
    graphs: list[GraphBatch],
    budget: TrainBudget,
    objective: Objective,
    val_graphs: list[GraphBatch] | None = None,
) -> tuple[Checkpoint, TrainingLog]:
    """Shared Adam loop.  Batches are drawn from a generator seeded by ``budget.seed``."""
    if not graphs:
        raise ValueError("training set is empty")
    ckpt = checkpoint.copy()
    log = TrainingLog()
    opt = Adam(budget.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([budget.seed, 0xBA7C]))
    bs = min(budget.batch_size, len(graphs))
    clock = 0.0

    def validate(step: int):
        mae = _force_mae(ckpt, val_graphs)
        log.curve.append((clock, mae))
        return mae

    if val_graphs and budget.eval_interval > 0:
        log.rows.append({"step": 0, "val_force_mae": validate(0)})

    step = 0
    while True:
        if budget.mode == "steps" and step >= budget.steps:
            break
        if budget.mode == "wall_clock" and clock >= budget.seconds:
            break
        t0 = time.perf_counter()
        idx = sorted(rng.choice(len(graphs), size=bs, replace=False).tolist())
        batch = collate([graphs[i] for i in idx])
        params = as_tensors(ckpt, requires_grad=True)
        with T.Tape() as tape:
            loss, parts = objective(params, batch, idx)
        step += 1
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(step)
        if loss.requires_grad:
            tape.backward(loss)
            grads = {k: p.grad for k, p in params.items()}
            _clip(grads, budget.clip_norm)
            opt.step(ckpt.tensors, grads)
        clock += time.perf_counter() - t0
        row = {"step": step, "loss_total": value, **parts}
        if val_graphs and budget.eval_interval > 0 and step % budget.eval_interval == 0:
            row["val_force_mae"] = validate(step)
        log.rows.append(row)
    return ckpt, log


def _supervised(config: ModelConfig, weights: LossWeights) -> Objective:
    def objective(params, batch, _idx):
        pred = forward(config, params, batch)
        total, le, lf = energy_force_loss(pred, batch, weights)
        return total, {"loss_energy": le.item(), "loss_force": lf.item(), "loss_kd": 0.0}

    return objective


def pretrain(
    config: ModelConfig,
    dataset: Dataset,
    budget: TrainBudget,
    loss_weights: LossWeights = LossWeights(),
    val: Dataset | None = None,
    init: Checkpoint | None = None,
) -> tuple[Checkpoint, TrainingLog]:
    """Train from ``init`` (default: a fresh seeded initialisation of ``config``)."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    start = init if init is not None else init_checkpoint(config)
    cfg = start.config
    val_graphs = prepare_graphs(val, cfg) if val is not None else None
    return optimize(start, prepare_graphs(dataset, cfg), budget, _supervised(cfg, loss_weights), val_graphs)


# ------------------------------------------------------------ distillation


def _deepest(count: int) -> tuple[int, ...]:
    return (count - 1,)


def kd_loss(teacher: Prediction, student: Prediction, kd: KDConfig, atoms_per_sample=None) -> Tensor:
    """Sum of the enabled mean-L1 matching terms; teacher values are treated as constants."""
    terms: list[Tensor] = []

    def match(s: Tensor, t: Tensor, what: str):
        if s.shape != t.shape:
            raise ValueError(f"{what}: student shape {s.shape} vs teacher shape {t.shape}")
        terms.append(T.l1_loss(s, t.data))

    if kd.distill_output:
        match(student.forces, teacher.forces, "forces")
    if kd.distill_energy:
        if atoms_per_sample is not None:
            inv_n = 1.0 / np.asarray(atoms_per_sample, dtype=np.float64)[:, None]
            terms.append(T.l1_loss(T.mul(student.energy, inv_n), teacher.energy.data * inv_n))
        else:
            match(student.energy, teacher.energy, "energy")
    n_prime = kd.distill_mlp_layers
    if n_prime > len(student.mlp_layer_outputs) or n_prime > len(teacher.mlp_layer_outputs):
        raise ValueError(f"n' = {n_prime} exceeds the FinalMLP depth")
    for i in range(n_prime):
        match(student.mlp_layer_outputs[i], teacher.mlp_layer_outputs[i], f"FinalMLP layer {i + 1}")
    s_nodes, t_nodes = student.features.block_node_features, teacher.features.block_node_features
    if kd.distill_n2n:
        for i in kd.n2n_blocks if kd.n2n_blocks is not None else _deepest(len(s_nodes)):
            if i >= len(t_nodes) or i >= len(s_nodes):
                raise ValueError(f"n2n block {i} missing in teacher or student")
            match(s_nodes[i], t_nodes[i], f"node features of block {i}")
    s_edges, t_edges = student.features.block_edge_features, teacher.features.block_edge_features
    if kd.distill_e2e:
        # edge feature list starts at the first interaction block (block index 1)
        for i in kd.e2e_blocks if kd.e2e_blocks is not None else _deepest(len(s_edges) + 1):
            j = i - 1
            if j < 0 or j >= len(t_edges) or j >= len(s_edges):
                raise ValueError(f"e2e block {i} missing in teacher or student")
            match(s_edges[j], t_edges[j], f"edge features of block {i}")
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def _stack_predictions(preds: list[Prediction]) -> Prediction:
    if len(preds) == 1:
        return preds[0]

    def cat(ts):
        return Tensor(np.concatenate([t.data for t in ts]))

    first = preds[0]
    bundle = FeatureBundle(
        [cat([p.features.block_node_features[i] for p in preds]) for i in range(len(first.features.block_node_features))],
        [cat([p.features.block_edge_features[i] for p in preds]) for i in range(len(first.features.block_edge_features))],
        cat([p.features.concatenated for p in preds]),
        first.features.partition_width,
    )
    return Prediction(
        cat([p.energy for p in preds]),
        cat([p.forces for p in preds]),
        bundle,
        [cat([p.mlp_layer_outputs[i] for p in preds]) for i in range(len(first.mlp_layer_outputs))],
    )


def _check_compatible(teacher: Checkpoint, student: Checkpoint) -> None:
    a, b = teacher.config, student.config
    same = ("m", "d", "d_e", "n_rbf", "cutoff", "species_count")
    bad = [k for k in same if getattr(a, k) != getattr(b, k)]
    if bad or b.b > a.b:
        raise ValueError(f"student is not a block reduction of the teacher (differs in {bad or ['b']})")


def distill_subset(count: int, fraction: float, seed: int) -> np.ndarray:
    """floor(fraction * count) distinct indices (at least one), ascending."""
    k = max(1, int(math.floor(fraction * count + 1e-9)))
    if k >= count:
        return np.arange(count)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD157]))
    return np.sort(rng.choice(count, size=k, replace=False))


def distill(
    teacher: Checkpoint,
    student: Checkpoint,
    dataset: Dataset,
    kd: KDConfig,
    budget: TrainBudget,
    loss_weights: LossWeights = LossWeights(),
    val: Dataset | None = None,
) -> tuple[Checkpoint, TrainingLog]:
    """Minimise [L0] + lambda * L_KD over a ``kd.data_fraction`` subsample; the teacher stays frozen."""
    _check_compatible(teacher, student)
    if kd.lam == 0 and not kd.include_ground_truth_loss:
        return student.copy(), TrainingLog()
    subset = distill_subset(len(dataset), kd.data_fraction, budget.seed)
    graphs = prepare_graphs(dataset.subset(subset), student.config)
    t_cfg, s_cfg = teacher.config, student.config
    t_params = as_tensors(teacher)
    # teacher outputs are fixed, so compute them once per sample when the subset is small
    per_sample = [forward(t_cfg, t_params, g) for g in graphs] if kd.lam > 0 and len(graphs) <= 4000 else None

    def objective(params, batch, idx):
        pred = forward(s_cfg, params, batch)
        parts = {"loss_energy": 0.0, "loss_force": 0.0, "loss_kd": 0.0}
        total = None
        if kd.include_ground_truth_loss:
            total, le, lf = energy_force_loss(pred, batch, loss_weights)
            parts.update(loss_energy=le.item(), loss_force=lf.item())
        if kd.lam > 0:
            if per_sample is not None:
                t_pred = _stack_predictions([per_sample[i] for i in idx])
            else:
                t_pred = forward(t_cfg, t_params, batch)
            lkd = kd_loss(t_pred, pred, kd, batch.atoms_per_sample)
            parts["loss_kd"] = lkd.item()
            scaled = T.mul(lkd, kd.lam)
            total = scaled if total is None else T.add(total, scaled)
        return total, parts

    val_graphs = prepare_graphs(val, s_cfg) if val is not None else None
    return optimize(student, graphs, budget, objective, val_graphs)


# ------------------------------------------------------------ fine-tuning


def reset_heads(checkpoint: Checkpoint, seed: int) -> Checkpoint:
    out = checkpoint.copy()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EAD]))
    for name in out.tensors:
        if name.startswith("head."):
            shape = out.tensors[name].shape
            out.tensors[name] = np.zeros(shape) if name.endswith(".bias") else glorot(rng, shape)
    return out


def finetune(
    checkpoint: Checkpoint,
    train: Dataset,
    budget: TrainBudget,
    loss_weights: LossWeights = LossWeights(),
    head_reset: bool = False,
    val: Dataset | None = None,
    test: Dataset | None = None,
) -> tuple[Checkpoint, EvalMetrics | None, TrainingLog]:
    """Full-model fine-tuning; returns metrics on ``test`` when given."""
    start = reset_heads(checkpoint, budget.seed) if head_reset else checkpoint
    cfg = start.config
    val_graphs = prepare_graphs(val, cfg) if val is not None else None
    ckpt, log = optimize(start, prepare_graphs(train, cfg), budget, _supervised(cfg, loss_weights), val_graphs)
    metrics = evaluate(ckpt, test) if test is not None else None
    return ckpt, metrics, log


def from_scratch(config: ModelConfig, *args, **kwargs):
    """Fine-tune a freshly initialised model; the baseline for reduced-from-pretrained runs."""
    return finetune(init_checkpoint(config), *args, **kwargs)


# ------------------------------------------------------------- evaluation


def _per_sample_errors(checkpoint: Checkpoint, graphs: list[GraphBatch], batch_size: int):
    params = as_tensors(checkpoint)
    force_sums: list[float] = []
    energy_errs: list[float] = []
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start:start + batch_size]
        batch = collate(chunk)
        pred = forward(checkpoint.config, params, batch)
        err = np.abs(pred.forces.data - batch.forces).sum(axis=1)
        bounds = np.cumsum([0] + [g.n_atoms for g in chunk])
        for i, g in enumerate(chunk):
            force_sums.append(math.fsum(err[bounds[i]:bounds[i + 1]]))
        e = np.abs(pred.energy.data[:, 0] - batch.energy) / batch.atoms_per_sample
        energy_errs.extend(e.tolist())
    return force_sums, energy_errs


def _force_mae(checkpoint: Checkpoint, graphs: list[GraphBatch], batch_size: int = 32) -> float:
    sums, _ = _per_sample_errors(checkpoint, graphs, batch_size)
    return math.fsum(sums) / (3 * sum(g.n_atoms for g in graphs))


def evaluate(checkpoint: Checkpoint, dataset: Dataset, batch_size: int = 32, split: str | None = None) -> EvalMetrics:
    """Force MAE over all components; energy MAE per atom averaged over samples."""
    if len(dataset) == 0:
        raise ValueError("evaluation split is empty")
    graphs = prepare_graphs(dataset, checkpoint.config)
    sums, e_errs = _per_sample_errors(checkpoint, graphs, batch_size)
    n_components = 3 * sum(g.n_atoms for g in graphs)
    return EvalMetrics(
        force_mae=math.fsum(sums) / n_components,
        energy_mae_per_atom=math.fsum(e_errs) / len(e_errs),
        sample_count=len(graphs),
        split=split or dataset.metadata.get("split", "test"),
    )


def write_metrics(metrics: list[EvalMetrics], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "force_mae", "energy_mae_per_atom", "n_samples"])
        for m in metrics:
            w.writerow([m.split, repr(m.force_mae), repr(m.energy_mae_per_atom), m.sample_count])
