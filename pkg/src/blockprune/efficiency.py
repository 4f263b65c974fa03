"""FLOP estimates, inference throughput and the sweep that writes the result tables.

FLOP formula (per sample, 2 * rows * cols per affine map)::

    embedding   2 (2d + n_rbf) d_e                      * n_e
    per block   2 [(d_e + 2d + n_rbf) d_e + d_e^2]       * n_e
              + 2 [d_e d + d^2]                          * n
    FinalMLP    2 [d b d + (m - 1) d^2]                  * n
    heads       2 d * n  +  2 [(2d + d_e) d + d]         * n_e
"""

from __future__ import annotations

import csv
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .model import Checkpoint, ModelConfig, as_tensors, collate, forward
from .relevance import block_relevance, relevance_report
from .surgery import param_count, reduce_blocks
from .training import KDConfig, TrainBudget, distill, evaluate, finetune, prepare_graphs

__all__ = [
    "FLOP_FORMULA",
    "BenchResult",
    "EfficiencyReport",
    "DatasetBundle",
    "SweepBudgets",
    "flops_estimate",
    "throughput_bench",
    "efficiency_reports",
    "write_table2",
    "convergence_curves",
    "sweep_report",
]

FLOP_FORMULA = (
    "flops = 2*(2d+n_rbf)*d_e*n_e"
    " + (b-1)*(2*((d_e+2d+n_rbf)*d_e + d_e^2)*n_e + 2*(d_e*d + d^2)*n)"
    " + 2*(d*b*d + (m-1)*d^2)*n + 2*d*n + 2*((2d+d_e)*d + d)*n_e"
)


def flops_estimate(config: ModelConfig, n: float, n_e: float) -> float:
    """Closed-form multiply-add count (x2) of one forward pass on a graph with n atoms, n_e edges."""
    if n < 1 or n_e < 1:
        raise ValueError("reference graph needs n >= 1 and n_e >= 1")
    d, de, nr, b, m = config.d, config.d_e, config.n_rbf, config.b, config.m
    edge_terms = 2 * (2 * d + nr) * de
    edge_terms += (b - 1) * 2 * ((de + 2 * d + nr) * de + de * de)
    edge_terms += 2 * ((2 * d + de) * d + d)
    node_terms = (b - 1) * 2 * (de * d + d * d)
    node_terms += 2 * (d * b * d + (m - 1) * d * d)
    node_terms += 2 * d
    return float(edge_terms * n_e + node_terms * n)


@dataclass
class BenchResult:
    median: float
    min: float
    max: float
    passes: list[float]


def _timed_passes(checkpoint: Checkpoint, graphs, warmup: int, timed: int, batch_size: int) -> list[float]:
    params = as_tensors(checkpoint)
    batches = [collate(graphs[i:i + batch_size]) for i in range(0, len(graphs), batch_size)]
    count = len(graphs)

    def one_pass():
        for batch in batches:
            forward(checkpoint.config, params, batch)

    for _ in range(warmup):
        one_pass()
    rates = []
    for _ in range(timed):
        t0 = time.perf_counter()
        one_pass()
        rates.append(count / (time.perf_counter() - t0))
    return rates


def _worker(args):
    return _timed_passes(*args)


def throughput_bench(
    checkpoint: Checkpoint,
    dataset: Dataset,
    warmup_passes: int = 1,
    timed_passes: int = 5,
    batch_size: int = 16,
    workers: int = 1,
) -> BenchResult:
    """Samples per second of inference; graphs are built before timing starts.

    With ``workers > 1`` the samples are split across processes and the
    per-worker rates are summed pass by pass.
    """
    if len(dataset) == 0:
        raise ValueError("cannot benchmark on an empty dataset")
    if timed_passes < 3:
        raise ValueError("need at least 3 timed passes")
    graphs = prepare_graphs(dataset, checkpoint.config)
    if workers <= 1:
        rates = _timed_passes(checkpoint, graphs, warmup_passes, timed_passes, batch_size)
    else:
        parts = [graphs[i::workers] for i in range(workers)]
        jobs = [(checkpoint, p, warmup_passes, timed_passes, batch_size) for p in parts if p]
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            per_worker = list(pool.map(_worker, jobs))
        rates = [sum(r[i] for r in per_worker) for i in range(timed_passes)]
    return BenchResult(statistics.median(rates), min(rates), max(rates), rates)


@dataclass
class EfficiencyReport:
    block_count: int  # interaction blocks
    throughput_samples_per_s: float
    flops_per_sample: float
    parameter_count: int
    throughput_delta: float = 0.0
    flops_delta: float = 0.0
    params_pct_delta: float = 0.0


def reference_size(dataset: Dataset, config: ModelConfig) -> tuple[float, float]:
    graphs = prepare_graphs(dataset, config)
    return float(np.mean([g.n_atoms for g in graphs])), float(np.mean([g.n_edges for g in graphs]))


def efficiency_reports(
    teacher: Checkpoint,
    dataset: Dataset,
    interaction_blocks=(6, 5, 4, 3, 2),
    warmup_passes: int = 1,
    timed_passes: int = 5,
    workers: int = 1,
) -> list[EfficiencyReport]:
    """One report per retained interaction-block count; deltas are relative to the first entry."""
    n, n_e = reference_size(dataset, teacher.config)
    reports = []
    for k in interaction_blocks:
        model = teacher if k + 1 == teacher.config.b else reduce_blocks(teacher, k + 1)
        bench = throughput_bench(model, dataset, warmup_passes, timed_passes, workers=workers)
        reports.append(
            EfficiencyReport(k, bench.median, flops_estimate(model.config, n, n_e), param_count(model)["total"])
        )
    base = reports[0]
    for r in reports:
        r.throughput_delta = r.throughput_samples_per_s - base.throughput_samples_per_s
        r.flops_delta = r.flops_per_sample - base.flops_per_sample
        r.params_pct_delta = 100.0 * (r.parameter_count - base.parameter_count) / base.parameter_count
    return reports


def write_table2(reports: list[EfficiencyReport], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["blocks", "throughput", "throughput_delta", "flops", "flops_delta", "params", "params_pct_delta"])
        for r in reports:
            w.writerow([
                r.block_count,
                f"{r.throughput_samples_per_s:.3f}",
                f"{r.throughput_delta:+.3f}",
                f"{r.flops_per_sample:.1f}",
                f"{r.flops_delta:+.1f}",
                r.parameter_count,
                f"{r.params_pct_delta:+.2f}",
            ])


def convergence_curves(
    teacher: Checkpoint,
    train: Dataset,
    val: Dataset,
    interaction_blocks=(3, 4, 6),
    seconds: float = 30.0,
    eval_interval: int = 50,
    seed: int = 0,
    learning_rate: float = 3e-4,
    batch_size: int = 8,
) -> dict[int, list[tuple[float, float]]]:
    """Validation force MAE against training wall-clock for sliced reductions of ``teacher``."""
    curves = {}
    for k in interaction_blocks:
        model = teacher if k + 1 == teacher.config.b else reduce_blocks(teacher, k + 1)
        budget = TrainBudget(
            mode="wall_clock", seconds=seconds, seed=seed, learning_rate=learning_rate,
            batch_size=batch_size, eval_interval=eval_interval,
        )
        _, _, log = finetune(model, train, budget, val=val)
        curves[k] = log.curve
    return curves


@dataclass
class DatasetBundle:
    upstream_train: Dataset
    upstream_val: Dataset
    downstream_train: Dataset
    downstream_val: Dataset
    downstream_test: Dataset

    FILES = {
        "upstream_train": "upstream_train.xyzf",
        "upstream_val": "upstream_val.xyzf",
        "downstream_train": "downstream_train.xyzf",
        "downstream_val": "downstream_val.xyzf",
        "downstream_test": "downstream_test.xyzf",
    }


@dataclass
class SweepBudgets:
    finetune_steps: int = 1000
    distill_steps: int = 1000
    batch_size: int = 8
    finetune_lr: float = 3e-4
    distill_lr: float = 3e-4
    kd: KDConfig = field(default_factory=KDConfig)
    relevance_samples: int = 1000
    bench_timed_passes: int = 5
    convergence_seconds: float = 30.0
    convergence_eval_interval: int = 50
    seed: int = 0


STRATEGY_LABELS = {"BR": "sliced", "BR/RandomMLP": "random", "BR+KD": "sliced"}


def sweep_report(
    teacher: Checkpoint,
    data: DatasetBundle,
    out_dir,
    strategies=("BR", "BR/RandomMLP", "BR+KD"),
    budgets: SweepBudgets = SweepBudgets(),
    interaction_blocks=(5, 4, 3, 2),
) -> dict[str, Path]:
    """Run every (retained blocks, strategy) arm and write the CSV tables into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = budgets.seed
    ft = TrainBudget(steps=budgets.finetune_steps, batch_size=budgets.batch_size,
                     learning_rate=budgets.finetune_lr, seed=seed)
    kd_budget = TrainBudget(steps=budgets.distill_steps, batch_size=budgets.batch_size,
                            learning_rate=budgets.distill_lr, seed=seed)
    full_blocks = teacher.config.b - 1

    rel = block_relevance(teacher, data.upstream_train.samples[: budgets.relevance_samples])
    relevance_report(rel, out / "figure2.csv")

    teacher_up = evaluate(teacher, data.upstream_val).force_mae
    table1 = [(full_blocks, "teacher", teacher_up, 0.0)]
    _, teacher_ft, _ = finetune(teacher, data.downstream_train, ft, test=data.downstream_test)
    figure3 = [(full_blocks, "teacher", teacher_ft.force_mae, teacher_ft.energy_mae_per_atom)]

    for k in interaction_blocks:
        for name in strategies:
            if name not in STRATEGY_LABELS:
                raise ValueError(f"unknown sweep strategy {name!r}")
            student = reduce_blocks(teacher, k + 1, STRATEGY_LABELS[name], seed=seed)
            if name == "BR+KD":
                student, _ = distill(teacher, student, data.upstream_train, budgets.kd, kd_budget)
            if name in ("BR", "BR+KD"):
                mae = evaluate(student, data.upstream_val).force_mae
                table1.append((k, name, mae, teacher_up - mae))
            _, metrics, _ = finetune(student, data.downstream_train, ft, test=data.downstream_test)
            figure3.append((k, name, metrics.force_mae, metrics.energy_mae_per_atom))

    paths = {}
    paths["table1"] = out / "table1.csv"
    with paths["table1"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["blocks", "strategy", "upstream_force_mae", "delta_vs_teacher"])
        for k, name, mae, delta in table1:
            w.writerow([k, name, f"{mae:.6f}", f"{delta:+.6f}"])
    paths["figure3"] = out / "figure3.csv"
    with paths["figure3"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["blocks", "strategy", "test_force_mae", "test_energy_mae_per_atom"])
        for k, name, fm, em in figure3:
            w.writerow([k, name, f"{fm:.6f}", f"{em:.6f}"])

    reports = efficiency_reports(
        teacher, data.downstream_val, (full_blocks,) + tuple(interaction_blocks),
        timed_passes=budgets.bench_timed_passes,
    )
    paths["table2"] = out / "table2.csv"
    write_table2(reports, paths["table2"])

    curves = convergence_curves(
        teacher, data.downstream_train, data.downstream_val,
        tuple(k for k in (3, 4, full_blocks) if k <= full_blocks),
        seconds=budgets.convergence_seconds, eval_interval=budgets.convergence_eval_interval,
        seed=seed, learning_rate=budgets.finetune_lr, batch_size=budgets.batch_size,
    )
    paths["figure4"] = out / "figure4.csv"
    with paths["figure4"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["blocks", "wall_clock_s", "val_force_mae"])
        for k, curve in curves.items():
            for t, mae in curve:
                w.writerow([k, f"{t:.3f}", f"{mae:.6f}"])
    paths["figure2"] = out / "figure2.csv"
    return paths
