"""Trainer tests: objective semantics, sampler contract, Adam, loops, grid."""

import logging
import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from cabada.data import DatasetIndex, SynthConfig, synth_generate
from cabada.discrepancy import FeatureBatch, KernelConfig, cdd_with_grad, resolve_kernel
from cabada.errors import ConfigError, DataError, NumericalError
from cabada.mixer import MixerConfig, MixerParams, backward, forward, init_params
from cabada.trainer import (
    AdamState,
    SamplerPlan,
    TrainBatch,
    TrainConfig,
    adam_step,
    carve_validation,
    evaluate_ce,
    finite_diff_check,
    grid_search,
    objective,
    objective_with_grads,
    run_fold,
    sample_minibatch,
    softmax_cross_entropy,
    train_fold,
)
from cabada.splits import kfold_by_subject

TINY = MixerConfig(timesteps=8, groups=2, group_features=2, width=4, depth=1,
                   temporal_hidden=8, channel_hidden=8, classes=2)

FIXED_KERNEL = KernelConfig(bandwidths=[1.3])


def rng_of(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def tiny_corpus(**overrides):
    base = dict(subjects=2, sessions_per_subject=1, blocks_per_session=2,
                trials_per_block=8, timesteps=8, features=4, spatial_groups=2,
                class_count=2, noise_std=0.1, class_signal=1.5, seed=3)
    base.update(overrides)
    return synth_generate(SynthConfig(**base))


def fake_trace(pooled, logits):
    return SimpleNamespace(pooled_features=np.asarray(pooled, dtype=np.float64),
                           logits=np.asarray(logits, dtype=np.float64))


def manual_batch(labels, keys, src, tgt, class_count=2):
    labels = np.asarray(labels, dtype=np.int64)
    keys = np.asarray(keys, dtype=np.int64)
    n = labels.shape[0]
    return TrainBatch(values=np.zeros((n, 2, 2)), labels=labels, keys=keys,
                      source_rows=np.asarray(src, dtype=np.int64),
                      target_rows=np.asarray(tgt, dtype=np.int64),
                      class_count=class_count)


# --- config validation -------------------------------------------------------


@pytest.mark.parametrize("field,value", [
    ("alpha", -0.1), ("learning_rate", 0.0), ("dropout", 1.0),
    ("dropout", -0.2), ("batch_size", 0), ("patience", 0),
    ("max_epochs", 0), ("beta1", 1.0), ("beta2", -0.1),
    ("epsilon", 0.0), ("da_mode", "both"),
])
def test_train_config_rejects_bad_values(field, value):
    cfg = replace(TrainConfig(), **{field: value})
    with pytest.raises(ConfigError):
        cfg.validate()


def test_train_config_accepts_defaults():
    TrainConfig().validate()


# --- objective ---------------------------------------------------------------


def test_uniform_logits_give_log_class_count():
    for m in (2, 3, 7):
        n = 5
        batch = manual_batch(labels=[i % m for i in range(n)],
                             keys=[[0, 0, 0, i] for i in range(n)],
                             src=[], tgt=[], class_count=m)
        trace = fake_trace(np.zeros((n, 4)), np.full((n, m), 0.37))
        loss, comp = objective(trace, batch, TrainConfig(da_mode="none"))
        assert abs(loss - math.log(m)) < 1e-14
        assert comp["ce"] == loss


def test_alpha_zero_loss_equals_ce_with_components_reported():
    rng = rng_of(0)
    pooled = rng.standard_normal((8, 3))
    logits = rng.standard_normal((8, 2))
    labels = [0, 1, 0, 1, 0, 1, 0, 1]
    keys = [[0, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0], [0, 0, 1, 1],
            [1, 0, 0, 0], [1, 0, 0, 1], [1, 0, 1, 0], [1, 0, 1, 1]]
    batch = manual_batch(labels, keys, src=[0, 1, 2, 3], tgt=[4, 5, 6, 7])
    cfg = TrainConfig(alpha=0.0, da_mode="block")
    loss, comp = objective(fake_trace(pooled, logits), batch, cfg, FIXED_KERNEL)
    assert loss == comp["ce"]
    assert comp["cdd"] != 0.0
    assert comp["caba"] != 0.0


def test_identical_pooled_features_zero_discrepancies():
    pooled = np.tile([0.4, -1.2, 0.9], (8, 1))
    logits = rng_of(1).standard_normal((8, 2))
    labels = [0, 1, 0, 1, 0, 1, 0, 1]
    keys = [[0, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0], [0, 0, 1, 1],
            [1, 0, 0, 0], [1, 0, 0, 1], [1, 0, 1, 0], [1, 0, 1, 1]]
    batch = manual_batch(labels, keys, src=[0, 1, 2, 3], tgt=[4, 5, 6, 7])
    cfg = TrainConfig(alpha=1.0, da_mode="block")
    loss, comp, _, d_pooled = objective_with_grads(
        fake_trace(pooled, logits), batch, cfg, FIXED_KERNEL)
    assert comp["cdd"] == 0.0
    assert comp["caba"] == 0.0
    assert loss == comp["ce"]
    assert np.all(d_pooled == 0.0)


def test_da_mode_none_returns_ce_only():
    rng = rng_of(2)
    batch = manual_batch([0, 1, 0, 1], [[0, 0, 0, 0], [0, 0, 1, 0],
                                        [1, 0, 0, 0], [1, 0, 1, 0]],
                         src=[0, 1], tgt=[2, 3])
    trace = fake_trace(rng.standard_normal((4, 3)), rng.standard_normal((4, 2)))
    loss, comp, _, d_pooled = objective_with_grads(
        trace, batch, TrainConfig(da_mode="none"), FIXED_KERNEL)
    assert loss == comp["ce"]
    assert comp["cdd"] == 0.0 and comp["caba"] == 0.0
    assert np.all(d_pooled == 0.0)


def test_da_mode_subject_zeroes_caba():
    rng = rng_of(3)
    labels = [0, 1, 0, 1, 0, 1, 0, 1]
    keys = [[0, 0, b, t] for b in (0, 1) for t in (0, 1)] + \
           [[1, 0, b, t] for b in (0, 1) for t in (0, 1)]
    batch = manual_batch(labels, keys, src=[0, 1, 2, 3], tgt=[4, 5, 6, 7])
    trace = fake_trace(rng.standard_normal((8, 3)), rng.standard_normal((8, 2)))
    loss, comp = objective(trace, batch, TrainConfig(da_mode="subject"),
                           FIXED_KERNEL)
    assert comp["caba"] == 0.0
    assert comp["cdd"] != 0.0
    assert abs(loss - (comp["ce"] + comp["cdd"])) < 1e-15


def test_loss_decomposition_to_1e12():
    rng = rng_of(4)
    labels = [0, 1, 0, 1, 0, 1, 0, 1]
    keys = [[0, 0, b, t] for b in (0, 1) for t in (0, 1)] + \
           [[1, 0, b, t] for b in (0, 1) for t in (0, 1)]
    batch = manual_batch(labels, keys, src=[0, 1, 2, 3], tgt=[4, 5, 6, 7])
    for mode in ("none", "subject", "session", "block"):
        for alpha in (0.0, 0.5, 1.0, 1.1):
            trace = fake_trace(rng.standard_normal((8, 3)),
                               rng.standard_normal((8, 2)))
            cfg = TrainConfig(alpha=alpha, da_mode=mode)
            loss, comp = objective(trace, batch, cfg, FIXED_KERNEL)
            want = comp["ce"] + alpha * (comp["cdd"] + comp["caba"])
            assert abs(loss - want) < 1e-12


def test_cdd_component_matches_direct_call():
    rng = rng_of(5)
    pooled = rng.standard_normal((8, 3))
    labels = np.array([0, 1, 0, 1, 0, 1, 0, 1])
    keys = [[0, 0, b, t] for b in (0, 1) for t in (0, 1)] + \
           [[1, 0, b, t] for b in (0, 1) for t in (0, 1)]
    batch = manual_batch(labels, keys, src=[0, 1, 2, 3], tgt=[4, 5, 6, 7])
    trace = fake_trace(pooled, rng.standard_normal((8, 2)))
    _, comp = objective(trace, batch, TrainConfig(da_mode="subject"),
                        FIXED_KERNEL)
    kern = resolve_kernel(FIXED_KERNEL, pooled)
    want, _, _ = cdd_with_grad(
        FeatureBatch(pooled[:4], labels[:4]),
        FeatureBatch(pooled[4:], labels[4:]), 2, kern)
    assert comp["cdd"] == want


def test_ce_gradient_matches_finite_differences():
    rng = rng_of(6)
    logits = rng.standard_normal((5, 3))
    labels = np.array([0, 2, 1, 2, 0])
    _, grad = softmax_cross_entropy(logits, labels)
    eps = 1e-6
    for i in range(5):
        for j in range(3):
            up, down = logits.copy(), logits.copy()
            up[i, j] += eps
            down[i, j] -= eps
            num = (softmax_cross_entropy(up, labels)[0]
                   - softmax_cross_entropy(down, labels)[0]) / (2 * eps)
            assert abs(grad[i, j] - num) < 1e-8


def test_objective_pooled_gradient_matches_finite_differences():
    rng = rng_of(7)
    pooled = rng.standard_normal((8, 3))
    logits = rng.standard_normal((8, 2))
    labels = [0, 1, 0, 1, 0, 1, 0, 1]
    keys = [[0, 0, b, t] for b in (0, 1) for t in (0, 1)] + \
           [[1, 0, b, t] for b in (0, 1) for t in (0, 1)]
    batch = manual_batch(labels, keys, src=[0, 1, 2, 3], tgt=[4, 5, 6, 7])
    cfg = TrainConfig(alpha=0.7, da_mode="block")
    kern = resolve_kernel(KernelConfig(), pooled)
    _, _, _, d_pooled = objective_with_grads(fake_trace(pooled, logits),
                                             batch, cfg, kern)
    eps = 1e-6
    num = np.zeros_like(pooled)
    for i in range(pooled.shape[0]):
        for j in range(pooled.shape[1]):
            up, down = pooled.copy(), pooled.copy()
            up[i, j] += eps
            down[i, j] -= eps
            lu, _ = objective(fake_trace(up, logits), batch, cfg, kern)
            ld, _ = objective(fake_trace(down, logits), batch, cfg, kern)
            num[i, j] = (lu - ld) / (2 * eps)
    scale = max(np.abs(d_pooled).max(), np.abs(num).max(), 1e-8)
    assert np.abs(d_pooled - num).max() / scale < 1e-7


def test_unpairable_cdd_skipped_with_warning(caplog):
    rng = rng_of(8)
    labels = [0, 0, 1, 1]
    keys = [[0, 0, 0, 0], [0, 0, 0, 1], [1, 0, 0, 0], [1, 0, 0, 1]]
    batch = manual_batch(labels, keys, src=[0, 1], tgt=[2, 3])
    trace = fake_trace(rng.standard_normal((4, 3)), rng.standard_normal((4, 2)))
    with caplog.at_level(logging.WARNING, logger="cabada.trainer"):
        loss, comp = objective(trace, batch, TrainConfig(da_mode="subject"),
                               FIXED_KERNEL)
    assert comp["cdd"] == 0.0
    assert loss == comp["ce"]
    assert any("cdd skipped" in rec.message for rec in caplog.records)


# --- sampler -----------------------------------------------------------------


def test_sampler_composition_counts():
    index = tiny_corpus()
    cfg = TrainConfig(batch_size=16, da_mode="block")
    for seed in range(5):
        batch = sample_minibatch(index, cfg, rng_of(seed))
        assert len(batch) == 16
        assert not batch.fallback
        assert batch.source_subject != batch.target_subject
        for side in (batch.source_rows, batch.target_rows):
            labels = batch.labels[side]
            for label in (0, 1):
                assert (labels == label).sum() >= 2
        assert np.all(batch.keys[batch.source_rows, 0] == batch.source_subject)
        assert np.all(batch.keys[batch.target_rows, 0] == batch.target_subject)


def test_sampler_source_class_spans_blocks_of_one_session():
    index = tiny_corpus()
    cfg = TrainConfig(batch_size=16, da_mode="block")
    batch = sample_minibatch(index, cfg, rng_of(11))
    for label in (0, 1):
        rows = batch.source_rows[batch.labels[batch.source_rows] == label]
        assert len(set(batch.keys[rows, 2])) >= 2
        assert len(set(batch.keys[rows, 1])) == 1


def test_sampler_session_mode_spans_sessions():
    index = tiny_corpus(sessions_per_subject=2, blocks_per_session=1)
    cfg = TrainConfig(batch_size=16, da_mode="session")
    batch = sample_minibatch(index, cfg, rng_of(12))
    for label in (0, 1):
        rows = batch.source_rows[batch.labels[batch.source_rows] == label]
        assert len(set(batch.keys[rows, 1])) >= 2


def test_sampler_determinism():
    index = tiny_corpus()
    cfg = TrainConfig(batch_size=16, da_mode="block")
    a = sample_minibatch(index, cfg, rng_of(13))
    b = sample_minibatch(index, cfg, rng_of(13))
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.keys, b.keys)
    assert np.array_equal(a.source_rows, b.source_rows)
    assert np.array_equal(a.target_rows, b.target_rows)
    assert (a.source_subject, a.target_subject) == (b.source_subject, b.target_subject)


def test_sampler_single_subject_falls_back_uniform():
    index = tiny_corpus(subjects=1)
    cfg = TrainConfig(batch_size=8, da_mode="block")
    batch = sample_minibatch(index, cfg, rng_of(14))
    assert batch.fallback
    assert len(batch) == 8
    assert batch.source_rows.size == 0 and batch.target_rows.size == 0
    batch.plan.validate(index.class_count, cfg.da_mode)


def test_sampler_empty_index_raises():
    index = tiny_corpus().subset([])
    with pytest.raises(DataError):
        sample_minibatch(index, TrainConfig(), rng_of(0))


def test_sampler_guarantee_over_1000_batches():
    index = synth_generate(SynthConfig(
        subjects=4, sessions_per_subject=1, blocks_per_session=3,
        trials_per_block=6, timesteps=8, features=4, spatial_groups=2,
        class_count=2, seed=21))
    cfg = TrainConfig(batch_size=32, da_mode="block")
    rng = rng_of(22)
    for _ in range(1000):
        batch = sample_minibatch(index, cfg, rng)
        batch.plan.validate(index.class_count, cfg.da_mode)
        groups = {}
        for label, key in zip(batch.labels, batch.keys):
            groups.setdefault((key[0], key[1], label), set()).add(key[2])
        assert any(len(blocks) >= 2 for blocks in groups.values())


def test_sampler_plan_catches_bad_quotas():
    plan = SamplerPlan(quotas=[(0, (0, 0, 0), 3)], batch_size=4)
    with pytest.raises(ConfigError):
        plan.validate(2, "block")
    single_class = SamplerPlan(quotas=[(0, (0, 0, 0), 2), (0, (0, 0, 1), 2)],
                               batch_size=4)
    with pytest.raises(ConfigError):
        single_class.validate(2, "none")
    single_block = SamplerPlan(quotas=[(0, (0, 0, 0), 2), (1, (0, 0, 0), 2)],
                               batch_size=4)
    with pytest.raises(ConfigError):
        single_block.validate(2, "block")
    single_block.validate(2, "subject")


# --- adam --------------------------------------------------------------------


def scalar_params(value=0.0):
    return MixerParams({"w": np.array([value])})


def test_adam_zero_gradient_leaves_params_unchanged():
    params = scalar_params(0.7)
    state = AdamState.fresh(params)
    new, state2 = adam_step(params, {"w": np.zeros(1)}, state, TrainConfig())
    assert new.tensors["w"][0] == 0.7
    assert state2.step == 1


def test_adam_first_step_hand_value():
    params = scalar_params(0.0)
    state = AdamState.fresh(params)
    cfg = TrainConfig(learning_rate=0.1)
    new, _ = adam_step(params, {"w": np.ones(1)}, state, cfg)
    assert abs(new.tensors["w"][0] - (-0.1)) < 1e-8
    assert new.tensors["w"][0] == -(0.1 / (1.0 + 1e-8))


def test_adam_determinism_and_purity():
    rng = rng_of(30)
    params = MixerParams({"a": rng.standard_normal((3, 2)),
                          "b": rng.standard_normal(4)})
    grads = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(4)}
    state = AdamState.fresh(params)
    before = {k: v.copy() for k, v in params.tensors.items()}
    p1, s1 = adam_step(params, grads, state, TrainConfig())
    p2, s2 = adam_step(params, grads, state, TrainConfig())
    for k in params.tensors:
        assert np.array_equal(p1.tensors[k], p2.tensors[k])
        assert np.array_equal(s1.m[k], s2.m[k])
        assert np.array_equal(params.tensors[k], before[k])
    assert s1.step == s2.step == 1


def test_adam_shape_mismatch_raises():
    params = scalar_params()
    state = AdamState.fresh(params)
    with pytest.raises(ConfigError):
        adam_step(params, {"w": np.zeros(2)}, state, TrainConfig())
    with pytest.raises(ConfigError):
        adam_step(params, {"x": np.zeros(1)}, state, TrainConfig())


# --- carve_validation ----------------------------------------------------------


def test_carve_validation_stratified_and_disjoint():
    index = tiny_corpus()
    fit, val = carve_validation(index, seed=5, fraction=0.25)
    assert len(fit) + len(val) == len(index)
    fit_ids = {s.identity() for s in fit.samples}
    val_ids = {s.identity() for s in val.samples}
    assert not fit_ids & val_ids
    for label in (0, 1):
        assert (val.labels_array == label).sum() >= 1
        assert (fit.labels_array == label).sum() >= 1


def test_carve_validation_deterministic():
    index = tiny_corpus()
    a_fit, a_val = carve_validation(index, seed=9)
    b_fit, b_val = carve_validation(index, seed=9)
    assert a_fit.equals(b_fit) and a_val.equals(b_val)


def test_carve_validation_rejects_bad_fraction():
    with pytest.raises(ConfigError):
        carve_validation(tiny_corpus(), seed=0, fraction=0.0)


# --- train_fold ----------------------------------------------------------------


def fold_data(**overrides):
    index = tiny_corpus(**overrides)
    return carve_validation(index, seed=1, fraction=0.2)


def test_train_fold_max_epochs_one():
    train, val = fold_data()
    cfg = TrainConfig(max_epochs=1, batch_size=8, da_mode="none", seed=0)
    params, history = train_fold(train, val, TINY, cfg)
    assert len(history) == 1
    row = history[0]
    assert set(row) == {"epoch", "ce", "cdd", "caba", "loss", "val_ce", "val_acc"}
    assert row["epoch"] == 1


def test_train_fold_history_decomposes():
    train, val = fold_data()
    cfg = TrainConfig(alpha=0.8, max_epochs=3, batch_size=8, da_mode="block",
                      seed=1)
    _, history = train_fold(train, val, TINY, cfg, FIXED_KERNEL)
    for row in history:
        want = row["ce"] + cfg.alpha * (row["cdd"] + row["caba"])
        assert abs(row["loss"] - want) < 1e-12


def test_train_fold_bit_exact_determinism():
    train, val = fold_data()
    cfg = TrainConfig(alpha=0.5, max_epochs=3, batch_size=8, da_mode="block",
                      dropout=0.2, seed=7)
    p1, h1 = train_fold(train, val, TINY, cfg, FIXED_KERNEL)
    p2, h2 = train_fold(train, val, TINY, cfg, FIXED_KERNEL)
    assert h1 == h2
    for name in p1.tensors:
        assert np.array_equal(p1.tensors[name], p2.tensors[name])


def test_train_fold_returns_minimal_val_loss_params():
    train, val = fold_data()
    cfg = TrainConfig(learning_rate=5e-2, max_epochs=15, patience=50,
                      batch_size=8, da_mode="none", seed=2)
    params, history = train_fold(train, val, TINY, cfg)
    best = min(row["val_ce"] for row in history)
    got, _ = evaluate_ce(params, replace(TINY, dropout=cfg.dropout), val)
    assert abs(got - best) < 1e-12


def test_train_fold_early_stop_counts_patience():
    train, val = fold_data(noise_std=1.1, class_signal=1.0)
    cfg = TrainConfig(learning_rate=0.05, max_epochs=60, patience=2,
                      batch_size=8, da_mode="none", seed=0)
    _, history = train_fold(train, val, TINY, cfg)
    assert len(history) < cfg.max_epochs
    vals = [row["val_ce"] for row in history]
    best_i = vals.index(min(vals))
    assert len(history) - 1 - best_i == cfg.patience


def test_train_fold_improving_val_runs_to_max_epochs():
    train, val = fold_data(noise_std=0.05, class_signal=2.0)
    cfg = TrainConfig(learning_rate=5e-3, max_epochs=5, patience=50,
                      batch_size=8, da_mode="none", seed=0)
    _, history = train_fold(train, val, TINY, cfg)
    vals = [row["val_ce"] for row in history]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert len(history) == cfg.max_epochs


@pytest.mark.filterwarnings("ignore:overflow encountered")
@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_train_fold_nonfinite_loss_aborts_with_snapshot():
    train, val = fold_data()
    cfg = TrainConfig(learning_rate=1e200, max_epochs=5, batch_size=8,
                      da_mode="none", seed=0)
    with pytest.raises(NumericalError):
        train_fold(train, val, TINY, cfg)


def test_train_fold_fits_separable_data():
    train, val = fold_data(noise_std=0.05, class_signal=2.0)
    cfg = TrainConfig(learning_rate=1e-2, max_epochs=200, patience=200,
                      batch_size=8, da_mode="none", seed=0)
    params, history = train_fold(train, val, TINY, cfg)
    assert len(history) <= 200
    _, acc = evaluate_ce(params, TINY, train)
    assert acc == 1.0


def test_alpha_zero_full_batch_descent_monotone_10_steps():
    index = tiny_corpus()
    batch_rows = list(range(16))
    values = index.values_array[batch_rows]
    labels = index.labels_array[batch_rows]
    lr = 1e-3
    for seed in range(10):
        params = init_params(TINY, seed)
        losses = []
        for _ in range(10):
            trace = forward(params, TINY, values, mode="eval")
            loss, d_logits = softmax_cross_entropy(trace.logits, labels)
            losses.append(loss)
            grads, _ = backward(trace, params, TINY, d_logits=d_logits)
            params = MixerParams({k: v - lr * grads[k]
                                  for k, v in params.tensors.items()})
        for a, b in zip(losses, losses[1:]):
            assert b <= a


# --- run_fold / grid_search -----------------------------------------------------


def grid_corpus():
    return synth_generate(SynthConfig(
        subjects=2, sessions_per_subject=1, blocks_per_session=2,
        trials_per_block=6, timesteps=8, features=4, spatial_groups=2,
        class_count=2, noise_std=0.1, class_signal=1.5, seed=17))


FAST = TrainConfig(max_epochs=1, patience=1, batch_size=8, da_mode="none",
                   seed=0)


def test_run_fold_returns_history_and_accuracy():
    index = grid_corpus()
    plan = kfold_by_subject(index, k=2, seed=0)
    params, history, acc = run_fold(index, plan, 0, TINY, FAST)
    assert len(history) == 1
    assert 0.0 <= acc <= 1.0


def test_grid_singleton_space():
    index = grid_corpus()
    plan = kfold_by_subject(index, k=2, seed=0)
    best, rows, curve = grid_search(index, plan, TINY, FAST,
                                    {"alpha": [0.0]})
    assert len(rows) == 1
    assert rows[0]["status"] == "ok"
    assert 0.0 <= rows[0]["mean_accuracy"] <= 1.0
    assert len(rows[0]["fold_accuracies"]) == 2
    assert best.alpha == 0.0
    assert curve == [{"alpha": 0.0, "accuracy": rows[0]["mean_accuracy"]}]


def test_grid_four_by_four_has_sixteen_rows():
    index = grid_corpus()
    plan = kfold_by_subject(index, k=2, seed=0)
    space = {"learning_rate": [1e-4, 1e-3, 1e-2, 1e-1],
             "dropout": [0.0, 0.25, 0.5, 0.75]}
    _, rows, _ = grid_search(index, plan, TINY, FAST, space)
    assert len(rows) == 16
    combos = {(r["learning_rate"], r["dropout"]) for r in rows}
    assert len(combos) == 16


@pytest.mark.filterwarnings("ignore:overflow encountered")
@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_grid_diverging_lr_loses():
    index = grid_corpus()
    plan = kfold_by_subject(index, k=2, seed=0)
    space = {"learning_rate": [1e-3, 1e200]}
    best, rows, _ = grid_search(index, plan, TINY,
                                replace(FAST, max_epochs=2), space)
    assert best.learning_rate == 1e-3
    by_lr = {r["learning_rate"]: r for r in rows}
    assert by_lr[1e200]["status"] == "failed"
    assert math.isnan(by_lr[1e200]["mean_accuracy"])
    assert by_lr[1e-3]["status"] == "ok"


def test_grid_ties_break_toward_lower_values(monkeypatch):
    import cabada.trainer as trainer_mod
    monkeypatch.setattr(trainer_mod, "run_fold",
                        lambda *a, **k: (None, [], 0.75))
    index = grid_corpus()
    plan = kfold_by_subject(index, k=2, seed=0)
    space = {"learning_rate": [1e-2, 1e-3], "dropout": [0.5, 0.0],
             "alpha": [1.0, 0.5]}
    best, rows, _ = grid_search(index, plan, TINY, FAST, space)
    assert len(rows) == 8
    assert best.learning_rate == 1e-3
    assert best.dropout == 0.0
    assert best.alpha == 0.5


def test_grid_alpha_curve_tracks_best_per_alpha():
    index = grid_corpus()
    plan = kfold_by_subject(index, k=2, seed=0)
    space = {"learning_rate": [1e-3, 1e-2], "alpha": [0.0, 1.0]}
    _, rows, curve = grid_search(index, plan, replace(TINY, dropout=0.0),
                                 replace(FAST, da_mode="block"), space)
    for point in curve:
        accs = [r["mean_accuracy"] for r in rows if r["alpha"] == point["alpha"]]
        assert point["accuracy"] == max(accs)


def test_grid_empty_space_raises():
    index = grid_corpus()
    plan = kfold_by_subject(index, k=2, seed=0)
    with pytest.raises(ConfigError):
        grid_search(index, plan, TINY, FAST, {"alpha": []})


# --- finite_diff_check -----------------------------------------------------------


def check_batch(index, cfg, seed):
    return sample_minibatch(index, cfg, rng_of(seed))


def test_finite_diff_check_alpha_zero():
    index = tiny_corpus()
    cfg = TrainConfig(alpha=0.0, batch_size=8, da_mode="none", seed=0)
    batch = check_batch(index, cfg, 40)
    assert finite_diff_check(TINY, cfg, batch) < 1e-6


def test_finite_diff_check_alpha_one_block_mode():
    index = tiny_corpus()
    cfg = TrainConfig(alpha=1.0, batch_size=8, da_mode="block", seed=1)
    batch = check_batch(index, cfg, 41)
    assert finite_diff_check(TINY, cfg, batch) < 1e-6


def test_finite_diff_check_with_dropout():
    index = tiny_corpus()
    cfg = TrainConfig(alpha=1.0, batch_size=8, da_mode="block", dropout=0.3,
                      seed=2)
    batch = check_batch(index, cfg, 42)
    assert finite_diff_check(TINY, cfg, batch) < 1e-6


def test_finite_diff_check_zero_epsilon_raises():
    index = tiny_corpus()
    cfg = TrainConfig(batch_size=8, da_mode="none")
    batch = check_batch(index, cfg, 43)
    with pytest.raises(ConfigError):
        finite_diff_check(TINY, cfg, batch, epsilon=0.0)


def test_use_caba_toggle_drops_only_caba_term():
    rng = rng_of(50)
    pooled = rng.standard_normal((8, 3))
    logits = rng.standard_normal((8, 2))
    labels = [0, 1, 0, 1, 0, 1, 0, 1]
    keys = [[0, 0, b, t] for b in (0, 1) for t in (0, 1)] + \
           [[1, 0, b, t] for b in (0, 1) for t in (0, 1)]
    batch = manual_batch(labels, keys, src=[0, 1, 2, 3], tgt=[4, 5, 6, 7])
    on = TrainConfig(alpha=1.0, da_mode="block", use_caba=True)
    off = TrainConfig(alpha=1.0, da_mode="block", use_caba=False)
    loss_on, comp_on = objective(fake_trace(pooled, logits), batch, on,
                                 FIXED_KERNEL)
    loss_off, comp_off = objective(fake_trace(pooled, logits), batch, off,
                                   FIXED_KERNEL)
    assert comp_on["caba"] != 0.0
    assert comp_off["caba"] == 0.0
    assert comp_on["cdd"] == comp_off["cdd"]
    assert loss_off == comp_off["ce"] + comp_off["cdd"]
