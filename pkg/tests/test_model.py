import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FAST
from memtl.errors import InvalidParameterError, TrainingDiverged
from memtl.mec import OffloadStrategy, check_feasible, total_cost
from memtl.model import (
    ArchSpec,
    MemtlModel,
    MultiTaskOutput,
    TrainConfig,
    postprocess,
    postprocess_batch,
    predict_batch,
    predict_ensemble,
    select_heads,
    train_backbone,
    train_head,
    train_memtl,
    train_mtfnn,
)
from memtl.nn import DenseLayer, Network

seeds = st.integers(0, 2**32 - 1)


# -- post-processing ---------------------------------------------------------------------


def test_all_local_when_logits_negative():
    s = postprocess(MultiTaskOutput(np.full(3, -10.0), np.array([0.3, 0.2, 0.9])))
    assert s.d.tolist() == [0, 0, 0] and s.r.tolist() == [0.0, 0.0, 0.0]


def test_single_offloader_gets_everything():
    s = postprocess(MultiTaskOutput(np.array([-1.0, 2.0]), np.array([0.5, 0.07])))
    assert s.d.tolist() == [0, 1] and s.r.tolist() == [0.0, 1.0]


def test_renormalisation():
    s = postprocess(MultiTaskOutput(np.array([1.0, 1.0]), np.array([0.2, 0.6])))
    assert s.r == pytest.approx([0.25, 0.75], rel=1e-15)


def test_zero_logit_means_offload():
    assert postprocess(MultiTaskOutput(np.array([0.0]), np.array([0.3]))).d.tolist() == [1]


def test_all_clipped_falls_back_to_even_split():
    s = postprocess(MultiTaskOutput(np.array([1.0, 1.0, -1.0]), np.array([-0.2, -0.6, 0.5])))
    assert s.r.tolist() == [0.5, 0.5, 0.0]


@given(seeds, st.integers(1, 6))
def test_postprocess_satisfies_c1_c3_c4(seed, n):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(50, 2 * n)) * 3
    d, r = postprocess_batch(raw, n)
    assert set(np.unique(d)) <= {0, 1}
    assert np.all((r >= 0) & (r <= 1))
    assert np.all(r[d == 0] == 0)
    sums = r.sum(axis=1)
    assert np.all(np.where(d.any(axis=1), np.abs(sums - 1) <= 1e-12, sums == 0))


# -- selection ---------------------------------------------------------------------------


def test_argmin_selection():
    choice, ok = select_heads(np.array([[5.0], [3.2], [4.1]]), np.ones((3, 1), dtype=bool))
    assert choice.tolist() == [1] and ok.tolist() == [True]


def test_infeasible_heads_are_skipped():
    choice, _ = select_heads(np.array([[1.0], [3.0], [2.0]]), np.array([[False], [True], [True]]))
    assert choice.tolist() == [2]


def test_all_infeasible_returns_cheapest_violator():
    choice, ok = select_heads(np.array([[4.0], [np.inf], [2.0]]), np.zeros((3, 1), dtype=bool))
    assert choice.tolist() == [2] and ok.tolist() == [False]


def test_ties_go_to_lowest_index():
    choice, _ = select_heads(np.array([[2.0, 1.0], [2.0, 1.0]]), np.ones((2, 2), dtype=bool))
    assert choice.tolist() == [0, 0]


# -- training contracts -------------------------------------------------------------------


def test_backbone_is_frozen_and_head_reinitialised(small_split):
    train = small_split[0]
    bb, head, log = train_backbone(ArchSpec(), train, FAST, seed=1)
    assert all(not layer.trainable for layer in bb.layers)
    assert len(log) == FAST.epochs
    # the provisional head trained alongside the backbone is discarded
    _, twin, _ = train_backbone(ArchSpec(), train, TrainConfig(epochs=1), seed=1)
    assert head.to_bytes() == twin.to_bytes()
    mtfnn, _ = train_mtfnn(train, cfg=FAST, seed=1)
    assert mtfnn.heads[0].param_bytes() != head.param_bytes()
    assert mtfnn.backbone.param_bytes() == bb.param_bytes()


def test_backbone_training_is_deterministic(small_split):
    a = train_backbone(ArchSpec(), small_split[0], FAST, seed=2)[0]
    b = train_backbone(ArchSpec(), small_split[0], FAST, seed=2)[0]
    assert a.to_bytes() == b.to_bytes()


def test_memtl_training_is_deterministic(small_split, small_memtl):
    again, _ = train_memtl(small_split[0], 3, cfg=FAST, seed=3)
    assert again.bundle_files() == small_memtl[0].bundle_files()


def test_head_training_isolation(small_split):
    model, _ = train_memtl(small_split[0], 3, cfg=TrainConfig(epochs=1), seed=5)
    X, D, R = small_split[0].X, small_split[0].D, small_split[0].R
    backbone = model.backbone.param_bytes()
    for idx in range(model.m):
        others = [h.param_bytes() for i, h in enumerate(model.heads) if i != idx]
        mine = model.heads[idx].param_bytes()
        train_head(model, idx, X, D, R, TrainConfig(epochs=1), np.random.default_rng(idx))
        assert model.backbone.param_bytes() == backbone
        assert [h.param_bytes() for i, h in enumerate(model.heads) if i != idx] == others
        assert model.heads[idx].param_bytes() != mine


def test_head_training_requires_frozen_backbone(small_memtl, small_split):
    model = small_memtl[0]
    copy = MemtlModel(model.backbone.copy(), [h.copy() for h in model.heads], model.ranges)
    copy.backbone.set_trainable(True)
    tr = small_split[0]
    with pytest.raises(InvalidParameterError):
        train_head(copy, 0, tr.X, tr.D, tr.R, FAST, np.random.default_rng(0))


def test_memtl_logs(small_memtl):
    _, logs = small_memtl
    assert len(logs["backbone"]) == FAST.epochs
    assert [len(l) for l in logs["heads"]] == [FAST.epochs] * 3


def test_mtfnn_structure(small_mtfnn, small_memtl):
    mtfnn, logs = small_mtfnn
    memtl = small_memtl[0]
    assert mtfnn.kind == "mtfnn" and mtfnn.m == 1
    assert [l.spec["n_out"] for l in mtfnn.backbone.layers + mtfnn.heads[0].layers] == \
           [l.spec["n_out"] for l in memtl.backbone.layers + memtl.heads[0].layers]
    assert len(logs["mtfnn"]) == FAST.epochs


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_partial_log(small_split):
    with pytest.raises(TrainingDiverged) as info:
        train_mtfnn(small_split[0], cfg=TrainConfig(epochs=3, lr=1e300), seed=0)
    assert isinstance(info.value.log, list)


def test_need_a_head(small_split):
    with pytest.raises(InvalidParameterError):
        train_memtl(small_split[0], 0, cfg=FAST)


# -- inference ------------------------------------------------------------------------------


def test_ensemble_is_never_worse_than_any_head(small_memtl, small_split):
    model = small_memtl[0]
    test = small_split[1]
    pred = predict_batch(model, [s.raw_env for s in test.samples], test.X)
    for j, s in enumerate(test.samples):
        feasible = pred.head_feasible[:, j]
        pool = pred.head_costs[feasible, j] if feasible.any() else pred.head_costs[:, j]
        assert pred.head_costs[pred.choice[j], j] == pool.min()
        if pred.feasible[j]:
            strat = OffloadStrategy(pred.d[j], pred.r[j])
            assert check_feasible(s.raw_env, strat).ok
            assert total_cost(s.raw_env, strat) == pytest.approx(pred.head_costs[pred.choice[j], j], rel=1e-12)


def test_predict_ensemble_single_env(small_memtl, small_split):
    model = small_memtl[0]
    env = small_split[1].samples[0].raw_env
    best, heads = predict_ensemble(model, env)
    assert [h.head_index for h in heads] == [0, 1, 2]
    pool = [h.cost for h in heads if h.feasible] or [h.cost for h in heads]
    assert best.cost == min(pool)
    assert best.feasible == any(h.feasible for h in heads)
    again, _ = predict_ensemble(model, env)
    assert again.strategy == best.strategy and again.cost == best.cost


def test_identical_heads_give_single_head_output(small_memtl, small_split):
    model = small_memtl[0]
    clone = MemtlModel(model.backbone, [model.heads[1]] * 3, model.ranges, model.arch)
    single = MemtlModel(model.backbone, [model.heads[1]], model.ranges, model.arch)
    test = small_split[1]
    envs = [s.raw_env for s in test.samples]
    a, b = predict_batch(clone, envs, test.X), predict_batch(single, envs, test.X)
    np.testing.assert_array_equal(a.d, b.d)
    np.testing.assert_array_equal(a.r, b.r)


def test_mtfnn_prediction_is_its_only_head(small_mtfnn, small_split):
    model = small_mtfnn[0]
    test = small_split[1]
    pred = predict_batch(model, [s.raw_env for s in test.samples], test.X)
    raw = model.heads[0].predict(model.backbone.predict(test.X))
    d, r = postprocess_batch(raw, model.n)
    np.testing.assert_array_equal(pred.d, d)
    np.testing.assert_array_equal(pred.r, r)


def test_featurize_path_matches_precomputed(small_memtl, small_split):
    model = small_memtl[0]
    test = small_split[1]
    envs = [s.raw_env for s in test.samples]
    np.testing.assert_array_equal(predict_batch(model, envs).d, predict_batch(model, envs, test.X).d)


def test_mse_selection_needs_truth(small_memtl, small_split):
    with pytest.raises(InvalidParameterError):
        predict_batch(small_memtl[0], [small_split[1].samples[0].raw_env], mode="mse")
    with pytest.raises(InvalidParameterError):
        predict_batch(small_memtl[0], [small_split[1].samples[0].raw_env], mode="vote")


# -- bundle ------------------------------------------------------------------------------------


def test_bundle_round_trip(small_memtl, small_split, tmp_path):
    model = small_memtl[0]
    size = model.save(tmp_path / "m")
    names = sorted(p.name for p in (tmp_path / "m").iterdir())
    assert names == ["backbone.bin", "head_00.bin", "head_01.bin", "head_02.bin", "manifest.json"]
    assert size == sum(p.stat().st_size for p in (tmp_path / "m").iterdir()) == model.bundle_size()
    back = MemtlModel.load(tmp_path / "m")
    assert back.bundle_files() == model.bundle_files()
    manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
    assert manifest["m"] == 3 and manifest["n"] == 2 and manifest["seed"] == 3
    assert manifest["dataset_digest"] == small_split[0].digest()
    X = small_split[1].X
    np.testing.assert_array_equal(back.head_outputs(X), model.head_outputs(X))


def test_saving_fewer_heads_removes_stale_files(small_memtl, tmp_path):
    model = small_memtl[0]
    model.save(tmp_path)
    model.with_heads(1).save(tmp_path)
    assert sorted(p.name for p in tmp_path.glob("head_*.bin")) == ["head_00.bin"]
    assert MemtlModel.load(tmp_path).m == 1


def test_storage_grows_by_a_constant_per_head(small_split):
    model, _ = train_memtl(small_split[0], 6, cfg=TrainConfig(epochs=1), seed=0)
    sizes = [model.with_heads(m).bundle_size() for m in range(1, 7)]
    steps = np.diff(sizes)
    assert np.all(steps == steps[0]) and steps[0] > 0


def test_head_shape_validation(small_memtl):
    model = small_memtl[0]
    bad = Network([DenseLayer(np.zeros((4, 10)), np.zeros(4), "identity")])
    with pytest.raises(InvalidParameterError):
        MemtlModel(model.backbone, [bad], model.ranges)
