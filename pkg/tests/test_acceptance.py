"""Acceptance criteria, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is printed in the
terminal summary, then asserts at the stated tolerance.
"""

import statistics
import time
from collections import OrderedDict

import numpy as np
import pytest
from scipy.stats import spearmanr

from blockprune import tensor as T
from blockprune.data import (
    GenerationSpec,
    MolecularSample,
    format_dataset,
    generate_dataset,
    make_lj_params,
    oracle_energy_forces,
    parse_dataset,
    read_dataset,
    write_dataset,
)
from blockprune.efficiency import convergence_curves, efficiency_reports
from blockprune.model import (
    LossWeights,
    ModelConfig,
    as_tensors,
    checkpoint_bytes,
    collate,
    energy_force_loss,
    forward,
    init_checkpoint,
    load_checkpoint,
    make_graph,
    predict,
    save_checkpoint,
)
from blockprune.relevance import block_relevance, relevance_report
from blockprune.surgery import ablate_block, param_count, reduce_blocks
from blockprune.training import KDConfig, TrainBudget, distill, evaluate, finetune, from_scratch, pretrain

from conftest import random_rotation, record_criterion

TEACHER_STEPS = 2000
FINETUNE = dict(steps=1000, learning_rate=3e-4)


@pytest.fixture(scope="module")
def corpus():
    return {
        "up_train": generate_dataset(GenerationSpec(count=10_000, seed=1)),
        "up_val": generate_dataset(GenerationSpec(count=200, seed=1, split="val")),
        "dn_train": generate_dataset(GenerationSpec(count=500, seed=1, task="downstream")),
        "dn_val": generate_dataset(GenerationSpec(count=100, seed=1, task="downstream", split="val")),
        "dn_test": generate_dataset(GenerationSpec(count=100, seed=1, task="downstream", split="test")),
    }


_TEACHERS: dict[int, object] = {}


def teacher_for(corpus, seed: int):
    if seed not in _TEACHERS:
        cfg = ModelConfig(seed=seed)
        _TEACHERS[seed], _ = pretrain(cfg, corpus["up_train"].subset(range(2000)), TrainBudget(steps=TEACHER_STEPS, seed=seed))
    return _TEACHERS[seed]


# ----------------------------------------------------------------------- 1


def _primitive_fns(rng):
    w = rng.normal(size=(5, 3))
    proj = rng.normal(size=(4, 5))
    idx = np.array([0, 3, 3, 1, 2, 0])
    return {
        "matmul": lambda x: T.sum(T.matmul(x, w)),
        "add": lambda x: T.sum(T.mul(T.add(x, proj), proj)),
        "sub": lambda x: T.sum(T.mul(T.sub(proj, x), x)),
        "mul": lambda x: T.sum(T.mul(T.mul(x, x), proj)),
        "relu": lambda x: T.sum(T.mul(T.relu(x), proj)),
        "silu": lambda x: T.sum(T.mul(T.silu(x), proj)),
        "concat": lambda x: T.sum(T.mul(T.concat([x, T.mul(x, x)]), np.hstack([proj, proj]))),
        "slice": lambda x: T.sum(T.mul(T.slice_last(T.mul(x, x), 1, 4), proj[:, 1:4])),
        "sum_axis": lambda x: T.sum(T.mul(T.sum(T.mul(x, x), axis=1), proj[:, 0])),
        "mean": lambda x: T.mean(T.mul(T.mean(T.mul(x, x), axis=0), proj[0])),
        "l1": lambda x: T.l1_loss(T.mul(x, proj), proj),
        "l2": lambda x: T.l2_loss(T.mul(x, x), proj),
        "gather": lambda x: T.sum(T.mul(T.gather(T.mul(x, x), idx), np.arange(30.0).reshape(6, 5))),
        "scatter_add": lambda x: T.sum(T.mul(T.scatter_add(T.mul(x, x), np.array([2, 0, 2, 1]), 3), proj[:3])),
    }


def _smooth_point(rng, shape):
    p = rng.normal(size=shape)
    return np.where(np.abs(p) < 0.05, 0.5, p)  # away from relu / abs kinks


def test_criterion_01_gradient_correctness(upstream):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {}
    for point_index in range(20):
        fns = _primitive_fns(rng)
        point = _smooth_point(rng, (4, 5))
        for name, fn in fns.items():
            if name == "l1":
                point_l1 = np.where(np.abs(point - 1.0) < 0.05, point + 0.2, point)
                err = T.grad_check(fn, point_l1, step=1e-5)
            else:
                err = T.grad_check(fn, point, step=1e-5)
            worst[name] = max(worst.get(name, 0.0), err)

    cfg = ModelConfig(b=3, m=2, d=4, d_e=3, n_rbf=3, seed=4)
    base = init_checkpoint(cfg)
    names = list(base.tensors)
    shapes = [base.tensors[k].shape for k in names]
    sizes = [base.tensors[k].size for k in names]
    batch = collate([make_graph(s, cfg) for s in upstream.samples[:2]])
    lw = LossWeights()

    flat0 = np.concatenate([base.tensors[k].reshape(-1) for k in names])

    def loss_at(flat):
        tensors, start = OrderedDict(), 0
        for name, shape, size in zip(names, shapes, sizes):
            tensors[name] = T.Tensor(flat[start:start + size].reshape(shape))
            start += size
        return energy_force_loss(forward(cfg, tensors, batch), batch, lw)[0].item()

    e2e = 0.0
    h = 1e-5
    for _ in range(20):
        flat = flat0 + 0.1 * rng.normal(size=flat0.size)
        params, start = OrderedDict(), 0
        for name, shape, size in zip(names, shapes, sizes):
            params[name] = T.Tensor(flat[start:start + size].reshape(shape), requires_grad=True)
            start += size
        with T.Tape() as tape:
            loss = energy_force_loss(forward(cfg, params, batch), batch, lw)[0]
        tape.backward(loss)
        analytic = np.concatenate([params[k].grad.reshape(-1) for k in names])
        for j in rng.choice(flat.size, size=25, replace=False):
            hi, lo = flat.copy(), flat.copy()
            hi[j] += h
            lo[j] -= h
            fd = (loss_at(hi) - loss_at(lo)) / (2 * h)
            e2e = max(e2e, abs(analytic[j] - fd) / max(1.0, abs(fd)))
    worst["end_to_end_L0"] = e2e
    elapsed = time.perf_counter() - t0
    passed = max(worst.values()) < 1e-5 and elapsed < 60
    name = max(worst, key=worst.get)
    record_criterion(1, passed, f"max rel err {worst[name]:.2e} ({name}) over 20 points, {elapsed:.1f}s")
    assert passed


# ----------------------------------------------------------------------- 2


def _silu(x):
    return x / (1.0 + np.exp(-x))


def test_criterion_02_sliced_mlp_identity(upstream):
    rng = np.random.default_rng(202)
    full = init_checkpoint(ModelConfig(seed=5))
    for k in full.tensors:
        full.tensors[k] = full.tensors[k] + 0.05 * rng.normal(size=full.tensors[k].shape)
    worst = 0.0
    for trial in range(10):
        sample = upstream[trial]
        b_prime = int(rng.integers(2, 7))
        red = reduce_blocks(full, b_prime, "sliced")
        pred = forward(red.config, as_tensors(red), make_graph(sample, red.config))
        f_hat = pred.features.concatenated.data
        ext = np.hstack([f_hat, np.zeros((f_hat.shape[0], full.config.d * (full.config.b - b_prime)))])
        g_full = _silu(ext @ full.tensors["mlp1.weight"] + full.tensors["mlp1.bias"])
        worst = max(worst, float(np.max(np.abs(pred.mlp_layer_outputs[0].data - g_full))))
    passed = worst < 1e-12
    record_criterion(2, passed, f"max abs err {worst:.2e} over 10 inputs")
    assert passed


# ----------------------------------------------------------------------- 3


def test_criterion_03_relevance_validity(small_ckpt, upstream):
    t0 = time.perf_counter()
    samples = upstream.samples[:12]
    rel = block_relevance(small_ckpt, samples)
    nonneg = all(s >= 0 for s in rel.scores)
    total_ok = abs(sum(rel.scores) - 1.0) <= 1e-9
    perm = np.random.default_rng(3).permutation(len(samples))
    order_ok = block_relevance(small_ckpt, [samples[i] for i in perm]).scores == rel.scores

    # 2-block hand-built model; gradient oracle by central differences on every f entry
    cfg = ModelConfig(b=2, m=1, d=2, d_e=2, n_rbf=2, seed=13)
    ck = init_checkpoint(cfg)
    rng = np.random.default_rng(33)
    for k in ck.tensors:
        ck.tensors[k] = ck.tensors[k] + 0.2 * rng.normal(size=ck.tensors[k].shape)
    pair = MolecularSample([1, 3], [[0, 0, 0], [0.7, -0.4, 0.3]], -0.4, [[1.0, 0.2, -0.3], [-1.0, -0.2, 0.3]])
    lw = LossWeights()
    batch = make_graph(pair, cfg)
    params = as_tensors(ck)
    f = forward(cfg, params, batch).features.concatenated.data

    def loss(feats):
        return energy_force_loss(forward(cfg, params, batch, concatenated_override=feats), batch, lw)[0].item()

    grad = np.zeros_like(f)
    for idx in np.ndindex(*f.shape):
        hi, lo = f.copy(), f.copy()
        hi[idx] += 1e-6
        lo[idx] -= 1e-6
        grad[idx] = (loss(hi) - loss(lo)) / 2e-6
    raw = np.maximum(f * grad, 0).reshape(f.shape[0], cfg.b, cfg.d).mean(axis=(0, 2))
    oracle = raw / raw.sum()
    got = np.array(block_relevance(ck, [pair], lw).scores)
    fd_err = float(np.max(np.abs(got - oracle) / np.abs(oracle)))
    elapsed = time.perf_counter() - t0
    passed = nonneg and total_ok and order_ok and fd_err < 1e-4 and elapsed < 60
    record_criterion(3, passed, f"nonneg={nonneg} sum_ok={total_ok} order_ok={order_ok} fd rel err {fd_err:.2e}")
    assert passed


# ----------------------------------------------------------------------- 4


def test_criterion_04_relevance_matches_ablation(corpus):
    t0 = time.perf_counter()
    correlations = []
    for seed in range(5):
        teacher = teacher_for(corpus, seed)
        rel = block_relevance(teacher, corpus["up_train"].samples[:1000])
        budget = TrainBudget(steps=300, learning_rate=3e-4, seed=seed)
        _, base, _ = finetune(teacher, corpus["dn_train"], budget, test=corpus["dn_val"])
        degradation = []
        for k in range(1, teacher.config.b):
            _, m, _ = finetune(ablate_block(teacher, k), corpus["dn_train"], budget, test=corpus["dn_val"])
            degradation.append(m.force_mae - base.force_mae)
        correlations.append(spearmanr(rel.scores[1:], degradation).correlation)
    median = statistics.median(correlations)
    elapsed = time.perf_counter() - t0
    passed = median > 0 and elapsed < 1800
    record_criterion(4, passed, f"median Spearman {median:.3f} over 5 seeds {np.round(correlations, 3).tolist()}, {elapsed:.0f}s")
    assert passed


# ----------------------------------------------------------------------- 5


def test_criterion_05_kd_recovers_pruning_loss(corpus):
    t0 = time.perf_counter()
    teacher = teacher_for(corpus, 0)
    student = reduce_blocks(teacher, 3)  # two interaction blocks
    kd_mae, br_mae = [], []
    for seed in range(3):
        kd_student, _ = distill(teacher, student, corpus["up_train"], KDConfig(data_fraction=0.015),
                                TrainBudget(steps=1000, learning_rate=3e-4, seed=seed))
        budget = TrainBudget(seed=seed, **FINETUNE)
        kd_mae.append(finetune(kd_student, corpus["dn_train"], budget, test=corpus["dn_test"])[1].force_mae)
        br_mae.append(finetune(student, corpus["dn_train"], budget, test=corpus["dn_test"])[1].force_mae)
    kd_med, br_med = statistics.median(kd_mae), statistics.median(br_mae)
    elapsed = time.perf_counter() - t0
    passed = kd_med <= br_med and elapsed < 1200
    record_criterion(5, passed, f"median test force MAE BR+KD {kd_med:.4f} vs BR {br_med:.4f}, {elapsed:.0f}s")
    assert passed


def test_distilled_student_improves_upstream(corpus):
    teacher = teacher_for(corpus, 0)
    student = reduce_blocks(teacher, 3)
    kd_student, _ = distill(teacher, student, corpus["up_train"], KDConfig(), TrainBudget(steps=1000, learning_rate=3e-4))
    assert evaluate(kd_student, corpus["up_val"]).force_mae < evaluate(student, corpus["up_val"]).force_mae


# ----------------------------------------------------------------------- 6


def test_criterion_06_efficiency_monotonicity(corpus):
    t0 = time.perf_counter()
    teacher = teacher_for(corpus, 0)
    reports = efficiency_reports(teacher, corpus["dn_val"], (6, 5, 4, 3, 2), timed_passes=7)
    params = [r.parameter_count for r in reports]
    flops = [r.flops_per_sample for r in reports]
    params_ok = all(a > b for a, b in zip(params, params[1:]))
    flops_ok = all(a > b for a, b in zip(flops, flops[1:]))
    by_blocks = {r.block_count: r for r in reports}
    ratio = by_blocks[4].throughput_samples_per_s / by_blocks[6].throughput_samples_per_s
    exact = all(r.parameter_count == param_count(teacher if r.block_count == 6 else reduce_blocks(teacher, r.block_count + 1))["total"]
                for r in reports)
    elapsed = time.perf_counter() - t0
    passed = params_ok and flops_ok and ratio > 1.0 and exact and elapsed < 300
    record_criterion(6, passed, f"params/flops strictly decreasing={params_ok and flops_ok}, 4-block/6-block throughput {ratio:.2f}x")
    assert passed


# ----------------------------------------------------------------------- 7


def test_criterion_07_pretrained_beats_scratch(corpus):
    t0 = time.perf_counter()
    teacher = teacher_for(corpus, 0)
    reduced = reduce_blocks(teacher, 5)  # four interaction blocks
    pre, scratch = [], []
    for seed in range(5):
        budget = TrainBudget(seed=seed, **FINETUNE)
        pre.append(finetune(reduced, corpus["dn_train"], budget, test=corpus["dn_test"])[1].force_mae)
        cfg = ModelConfig(**{**reduced.config.__dict__, "seed": seed})
        scratch.append(from_scratch(cfg, corpus["dn_train"], budget, test=corpus["dn_test"])[1].force_mae)
    pre_med, scratch_med = statistics.median(pre), statistics.median(scratch)
    elapsed = time.perf_counter() - t0
    passed = pre_med < scratch_med and elapsed < 1200
    record_criterion(7, passed, f"median test force MAE pretrained-reduced {pre_med:.4f} vs scratch {scratch_med:.4f}, {elapsed:.0f}s")
    assert passed


# ----------------------------------------------------------------------- 8


def test_criterion_08_physics_invariants(corpus):
    teacher = teacher_for(corpus, 0)
    params = make_lj_params(3, 0)
    rng = np.random.default_rng(808)
    worst = {"oracle_energy": 0.0, "oracle_forces": 0.0, "oracle_net_force": 0.0, "model_energy": 0.0, "model_forces": 0.0}
    for s in corpus["up_val"].samples[:20]:
        rot = random_rotation(rng)
        shift = rng.normal(size=3) * 3
        moved_pos = s.positions @ rot.T + shift
        e0, f0 = oracle_energy_forces(s.positions, s.atomic_numbers, params)
        e1, f1 = oracle_energy_forces(moved_pos, s.atomic_numbers, params)
        worst["oracle_energy"] = max(worst["oracle_energy"], abs(e1 - e0))
        worst["oracle_forces"] = max(worst["oracle_forces"], float(np.max(np.abs(f1 - f0 @ rot.T))))
        worst["oracle_net_force"] = max(worst["oracle_net_force"], float(np.max(np.abs(f0.sum(axis=0)))))
        moved = MolecularSample(s.atomic_numbers, moved_pos, s.energy, s.forces)
        p0, _ = predict(teacher, s)
        p1, _ = predict(teacher, moved)
        worst["model_energy"] = max(worst["model_energy"], abs(p1.energy.item() - p0.energy.item()))
        worst["model_forces"] = max(worst["model_forces"], float(np.max(np.abs(p1.forces.data - p0.forces.data @ rot.T))))
    passed = max(worst.values()) < 1e-9
    record_criterion(8, passed, "max deviations " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    assert passed


# ----------------------------------------------------------------------- 9


def test_criterion_09_reproducibility_and_formats(tmp_path, upstream):
    cfg = ModelConfig(b=4, m=2, d=6, d_e=4, n_rbf=4, seed=21)
    budget = TrainBudget(steps=20, batch_size=4, seed=21, eval_interval=5)
    for name in ("a", "b"):
        ck, log = pretrain(cfg, upstream, budget, val=upstream.subset(range(6)))
        save_checkpoint(ck, tmp_path / f"{name}.ckpt")
        log.write(tmp_path / f"{name}.log.csv")
        relevance_report(block_relevance(ck, upstream.samples[:5]), tmp_path / f"{name}.rel.csv")
        write_dataset(generate_dataset(GenerationSpec(count=15, seed=21)), tmp_path / f"{name}.xyzf")
    same_files = all(
        (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()
        for ext in (".ckpt", ".rel.csv", ".xyzf")
    )
    # the log carries no wall-clock column, so it must match too
    same_log = (tmp_path / "a.log.csv").read_bytes() == (tmp_path / "b.log.csv").read_bytes()
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    ckpt_roundtrip = checkpoint_bytes(loaded) == (tmp_path / "a.ckpt").read_bytes()
    text = (tmp_path / "a.xyzf").read_text()
    data_roundtrip = format_dataset(read_dataset(tmp_path / "a.xyzf")) == text == format_dataset(parse_dataset(text))
    passed = same_files and same_log and ckpt_roundtrip and data_roundtrip
    record_criterion(9, passed, f"bit-identical reruns={same_files and same_log} ckpt roundtrip={ckpt_roundtrip} dataset roundtrip={data_roundtrip}")
    assert passed


# ---------------------------------------------------------------------- 10


def _first_time_below(curve, threshold):
    for t, mae in curve:
        if mae <= threshold:
            return t
    return float("inf")


def test_criterion_10_convergence_pattern(corpus):
    t0 = time.perf_counter()
    teacher = teacher_for(corpus, 0)
    reach3, reach6, final3, final6 = [], [], [], []
    for seed in range(3):
        curves = convergence_curves(teacher, corpus["dn_train"], corpus["dn_val"], (3, 6),
                                    seconds=30.0, eval_interval=10, seed=seed, learning_rate=3e-4)
        c3, c6 = curves[3], curves[6]
        # mid-training threshold: halfway between the 6-block model's first and last validation MAE
        threshold = 0.5 * (c6[0][1] + c6[-1][1])
        reach3.append(_first_time_below(c3, threshold))
        reach6.append(_first_time_below(c6, threshold))
        final3.append(c3[-1][1])
        final6.append(c6[-1][1])
    r3, r6 = statistics.median(reach3), statistics.median(reach6)
    f3, f6 = statistics.median(final3), statistics.median(final6)
    elapsed = time.perf_counter() - t0
    passed = r3 < r6 and f3 > f6 and elapsed < 1800
    record_criterion(10, passed, f"median time to threshold 3-block {r3:.2f}s vs 6-block {r6:.2f}s; "
                                 f"median final val MAE 3-block {f3:.4f} vs 6-block {f6:.4f}")
    assert passed
