import csv

import numpy as np
import pytest

from blockprune.data import Dataset, GenerationSpec, MolecularSample, generate_dataset
from blockprune.model import FeatureBundle, LossWeights, ModelConfig, Prediction, init_checkpoint, predict
from blockprune.surgery import reduce_blocks
from blockprune.tensor import Tensor
from blockprune.training import (
    KDConfig,
    NonFiniteLossError,
    TrainBudget,
    distill,
    distill_subset,
    evaluate,
    finetune,
    from_scratch,
    kd_loss,
    pretrain,
    write_metrics,
)

STEPS = TrainBudget(steps=15, batch_size=4, seed=1)


def _same(a, b):
    return list(a.tensors) == list(b.tensors) and all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


def _pred(forces, nodes=(), edges=(), mlp=(), energy=0.0):
    t = lambda x: Tensor(np.asarray(x, dtype=float))  # noqa: E731
    nodes = [t(x) for x in nodes]
    return Prediction(
        t([[energy]]), t(forces),
        FeatureBundle(nodes, [t(x) for x in edges], t(np.hstack([n.data for n in nodes]) if nodes else [[0.0]]), 2),
        [t(x) for x in mlp],
    )


def test_zero_step_pretrain_returns_init(small_config, upstream):
    ck, log = pretrain(small_config, upstream, TrainBudget(steps=0))
    assert _same(ck, init_checkpoint(small_config))
    assert log.rows == []


def test_pretrain_is_deterministic(small_config, upstream):
    a, la = pretrain(small_config, upstream, STEPS)
    b, lb = pretrain(small_config, upstream, STEPS)
    assert _same(a, b)
    assert la.rows == lb.rows
    assert not _same(a, init_checkpoint(small_config))


def test_training_log_csv(small_config, upstream, tmp_path):
    budget = TrainBudget(steps=6, batch_size=4, eval_interval=3)
    _, log = pretrain(small_config, upstream, budget, val=upstream.subset(range(5)))
    log.write(tmp_path / "log.csv")
    rows = list(csv.reader((tmp_path / "log.csv").open()))
    assert rows[0] == ["step", "loss_total", "loss_energy", "loss_force", "loss_kd", "val_force_mae"]
    assert [r[0] for r in rows[1:]] == [str(i) for i in range(7)]
    assert rows[4][5] != "" and rows[2][5] == ""
    assert len(log.curve) == 3


def test_non_finite_loss_aborts_with_step(small_config, upstream):
    bad = upstream[0]
    poisoned = Dataset([MolecularSample(bad.atomic_numbers, bad.positions, np.inf, bad.forces)])
    with pytest.raises(NonFiniteLossError) as err:
        pretrain(small_config, poisoned, STEPS)
    assert err.value.step == 1


def test_budget_validation():
    with pytest.raises(ValueError):
        TrainBudget(batch_size=0)
    with pytest.raises(ValueError):
        TrainBudget(mode="wall_clock", seconds=0)
    with pytest.raises(ValueError):
        TrainBudget(learning_rate=0)


def test_pretrain_beats_untrained_model():
    train = generate_dataset(GenerationSpec(count=500, seed=21))
    val = generate_dataset(GenerationSpec(count=100, seed=21, split="val"))
    cfg = ModelConfig()
    before = evaluate(init_checkpoint(cfg), val).force_mae
    ck, _ = pretrain(cfg, train, TrainBudget(steps=2000))
    assert evaluate(ck, val).force_mae < before


def test_kd_loss_zero_for_identical(small_ckpt, upstream):
    p, _ = predict(small_ckpt, upstream[0])
    kd = KDConfig(distill_energy=True, distill_mlp_layers=small_ckpt.config.m,
                  n2n_blocks=(0, 1, 2, 3), e2e_blocks=(1, 2, 3))
    assert kd_loss(p, p, kd).item() == 0.0


def test_kd_loss_output_offset_of_one():
    f = np.random.default_rng(0).normal(size=(4, 3))
    kd = KDConfig(distill_mlp_layers=0, distill_n2n=False, distill_e2e=False)
    assert kd_loss(_pred(f), _pred(f + 1.0), kd).item() == pytest.approx(1.0, abs=1e-15)


def test_kd_loss_hand_computed_mlp_terms():
    f = np.zeros((2, 3))
    t_mlp = [[[1.0, 2.0], [3.0, 4.0]], [[0.0, 0.0], [1.0, -1.0]], [[9.0, 9.0], [9.0, 9.0]]]
    s_mlp = [[[1.5, 2.0], [2.0, 4.0]], [[0.0, 1.0], [1.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]]]
    kd = KDConfig(distill_output=False, distill_mlp_layers=2, distill_n2n=False, distill_e2e=False)
    # layer 1: (0.5 + 0 + 1 + 0) / 4; layer 2: (0 + 1 + 0 + 2) / 4; layer 3 not matched
    assert kd_loss(_pred(f, mlp=t_mlp), _pred(f, mlp=s_mlp), kd).item() == pytest.approx(0.375 + 0.75, abs=1e-15)


def test_kd_loss_matches_deepest_retained_block():
    f = np.zeros((2, 3))
    t_nodes = [np.zeros((2, 2)), np.ones((2, 2)), np.full((2, 2), 5.0)]
    s_nodes = [np.full((2, 2), 7.0), np.full((2, 2), 3.0)]
    t_edges = [np.zeros((3, 2)), np.full((3, 2), 2.0)]
    s_edges = [np.full((3, 2), 0.5)]
    kd = KDConfig(distill_output=False, distill_mlp_layers=0)
    # student block 1 against teacher block 1: nodes |3 - 1| = 2, edges |0.5 - 0| = 0.5
    val = kd_loss(_pred(f, t_nodes, t_edges), _pred(f, s_nodes, s_edges), kd).item()
    assert val == pytest.approx(2.5)


def test_kd_loss_shape_mismatch():
    kd = KDConfig(distill_mlp_layers=0, distill_n2n=False, distill_e2e=False)
    with pytest.raises(ValueError, match="shape"):
        kd_loss(_pred(np.zeros((3, 3))), _pred(np.zeros((4, 3))), kd)


def test_kd_config_validation():
    with pytest.raises(ValueError):
        KDConfig(distill_output=False, distill_mlp_layers=0, distill_n2n=False, distill_e2e=False)
    with pytest.raises(ValueError):
        KDConfig(data_fraction=0.0)
    KDConfig(lam=0.0, distill_output=False, distill_mlp_layers=0, distill_n2n=False, distill_e2e=False)


def test_distill_lambda_zero_is_identity(small_ckpt, upstream):
    student = reduce_blocks(small_ckpt, 3)
    out, _ = distill(small_ckpt, student, upstream, KDConfig(lam=0.0), STEPS)
    assert _same(out, student)


def test_distill_subset_size():
    idx = distill_subset(10_000, 0.015, seed=3)
    assert len(idx) == 150 and len(set(idx.tolist())) == 150
    assert np.all(np.diff(idx) > 0)
    assert len(distill_subset(10, 0.015, seed=3)) == 1


def test_distill_without_kd_equals_pretrain(small_ckpt, upstream):
    student = reduce_blocks(small_ckpt, 3)
    kd = KDConfig(lam=0.0, include_ground_truth_loss=True, data_fraction=1.0)
    a, _ = distill(small_ckpt, student, upstream, kd, STEPS)
    b, _ = pretrain(student.config, upstream, STEPS, init=student)
    assert _same(a, b)


def test_distill_is_deterministic_and_teacher_frozen(small_ckpt, upstream):
    teacher = small_ckpt.copy()
    student = reduce_blocks(teacher, 2)
    kd = KDConfig(data_fraction=0.5)
    a, _ = distill(teacher, student, upstream, kd, STEPS)
    b, _ = distill(teacher, student, upstream, kd, STEPS)
    assert _same(a, b)
    assert _same(teacher, small_ckpt)
    assert not _same(a, student)


def test_distill_rejects_incompatible(small_ckpt, upstream):
    other = init_checkpoint(ModelConfig(b=3, m=2, d=5, d_e=4, n_rbf=4))
    with pytest.raises(ValueError, match="reduction"):
        distill(small_ckpt, other, upstream, KDConfig(), STEPS)


def test_zero_budget_finetune_equals_zero_shot(small_ckpt, downstream):
    ck, metrics, _ = finetune(small_ckpt, downstream, TrainBudget(steps=0), test=downstream)
    assert _same(ck, small_ckpt)
    assert metrics == evaluate(small_ckpt, downstream)


def test_finetune_is_deterministic(small_ckpt, downstream):
    a = finetune(small_ckpt, downstream, STEPS, test=downstream)[1]
    b = finetune(small_ckpt, downstream, STEPS, test=downstream)[1]
    assert a == b


def test_head_reset_changes_only_heads(small_ckpt, downstream):
    ck, _, _ = finetune(small_ckpt, downstream, TrainBudget(steps=0), head_reset=True)
    for k in ck.tensors:
        if k.startswith("head.") and k.endswith("weight"):
            assert not np.array_equal(ck.tensors[k], small_ckpt.tensors[k])
        elif not k.startswith("head."):
            np.testing.assert_array_equal(ck.tensors[k], small_ckpt.tensors[k])


def test_from_scratch_uses_fresh_init(small_config, downstream):
    ck, _, _ = from_scratch(small_config, downstream, TrainBudget(steps=0))
    assert _same(ck, init_checkpoint(small_config))


def test_wall_clock_budget_stops(small_ckpt, downstream):
    budget = TrainBudget(mode="wall_clock", seconds=0.3, batch_size=4, eval_interval=2)
    _, _, log = finetune(small_ckpt, downstream, budget, val=downstream.subset(range(4)))
    assert log.rows[-1]["step"] >= 1
    times = [t for t, _ in log.curve]
    assert times == sorted(times) and times[-1] < 1.5


def test_perfect_predictions_have_zero_mae(small_ckpt, upstream):
    graphs_pred = []
    for s in upstream.samples[:5]:
        p, _ = predict(small_ckpt, s)
        graphs_pred.append(MolecularSample(s.atomic_numbers, s.positions, p.energy.item(), p.forces.data))
    m = evaluate(small_ckpt, Dataset(graphs_pred))
    assert m.force_mae == 0.0 and m.energy_mae_per_atom == 0.0


def test_zero_force_model_mae_equals_mean_abs_force(small_ckpt, upstream, tmp_path):
    from blockprune.data import read_dataset, write_dataset

    zero = small_ckpt.copy()
    zero.tensors["head.force2.weight"][:] = 0.0
    zero.tensors["head.force2.bias"][:] = 0.0
    write_dataset(upstream, tmp_path / "u.xyzf")
    # oracle straight from the file text: columns 5..7 of every atom line
    comps = []
    for line in (tmp_path / "u.xyzf").read_text().splitlines():
        parts = line.split()
        if len(parts) == 7:
            comps += [abs(float(v)) for v in parts[4:]]
    assert evaluate(zero, read_dataset(tmp_path / "u.xyzf")).force_mae == pytest.approx(np.mean(comps), rel=1e-12)


def test_metrics_order_and_batching_invariant(small_ckpt, upstream):
    base = evaluate(small_ckpt, upstream)
    perm = np.random.default_rng(5).permutation(len(upstream))
    shuffled = evaluate(small_ckpt, upstream.subset(perm))
    for other in (shuffled, evaluate(small_ckpt, upstream, batch_size=1), evaluate(small_ckpt, upstream, batch_size=7)):
        assert other.force_mae == pytest.approx(base.force_mae, rel=1e-13)
        assert other.energy_mae_per_atom == pytest.approx(base.energy_mae_per_atom, rel=1e-13)
        assert other.sample_count == base.sample_count


def test_evaluate_empty_split(small_ckpt):
    with pytest.raises(ValueError):
        evaluate(small_ckpt, Dataset([]))


def test_metrics_csv(small_ckpt, upstream, tmp_path):
    m = evaluate(small_ckpt, upstream, split="val")
    write_metrics([m], tmp_path / "m.csv")
    rows = list(csv.reader((tmp_path / "m.csv").open()))
    assert rows[0] == ["split", "force_mae", "energy_mae_per_atom", "n_samples"]
    assert rows[1][0] == "val" and float(rows[1][1]) == m.force_mae and rows[1][3] == str(len(upstream))
