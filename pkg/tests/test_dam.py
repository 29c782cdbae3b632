from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, max_rel_err, well_conditioned
from damlab import dam as D
from damlab import merging as M
from damlab import nn
from damlab.mask import rescale_flat
from damlab.tensor import Rng


def test_clip_examples():
    np.testing.assert_array_equal(D.clip_l1(np.array([3.0, -1.0]), 2.0), [1.5, -0.5])
    np.testing.assert_array_equal(D.clip_l1(np.array([3.0, -1.0]), 10.0), [3.0, -1.0])
    np.testing.assert_array_equal(D.clip_l1(np.zeros(3), 1.0), np.zeros(3))
    with pytest.raises(ValueError):
        D.clip_l1(np.ones(2), 0.0)


def _check_clip(delta, xi):
    out = D.clip_l1(delta, xi)
    assert np.abs(out).sum() <= xi + 1e-12
    if np.any(delta):
        a, b = out / np.abs(out).max(), delta / np.abs(delta).max()  # avoid under/overflow in the norms
        cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        assert abs(cos - 1.0) <= 1e-12


def test_clip_invariant_1000_random():
    rng = Rng(77)
    for i in range(1000):
        d = int(rng.integers(1, 300))
        scale = 10.0 ** rng.uniform01_open() * 6 - 3
        delta = rng.normal(d, scale)
        if i % 10 == 0:
            delta[: d // 2] = 0.0
        _check_clip(delta, float(10.0 ** (rng.uniform01_open() * 4 - 2)))


@settings(max_examples=200)
@given(st.lists(st.floats(-1e8, 1e8, allow_subnormal=False), min_size=1, max_size=50), st.floats(1e-6, 1e6))
def test_clip_invariant_property(vals, xi):
    _check_clip(np.array(vals), xi)


def test_perturbation_gradient_fd(small_net):
    arch, p = small_net
    rng = Rng(5)
    X = 0.2 + 0.6 * rng.uniform01_open((8, 196))
    delta = rng.normal(196, 0.05)  # keeps X + delta strictly inside (0, 1)
    _, g = D.perturbation_gradient(p, X, delta)
    f = lambda d: nn.entropy_loss(p, D.perturb(X, d))
    idx = well_conditioned(g, 250, rng)
    assert len(idx) >= 150
    assert max_rel_err(g[idx], central_diff(f, delta, idx)) <= 1e-4


def test_perturbation_gradient_zero_outside_clamp(small_net):
    arch, p = small_net
    X = np.full((2, 196), 0.5)
    delta = np.zeros(196)
    delta[:10] = 2.0
    _, g = D.perturbation_gradient(p, X, delta)
    assert np.all(g[:10] == 0) and np.any(g[10:] != 0)


def test_masked_coefficient_gradient_fd(small_net):
    arch, pre = small_net
    rng = Rng(6)
    taus = rng.normal((3, arch.param_count), 0.05)
    m = 0.2 + 0.6 * rng.uniform01_open(arch.param_count)
    X = rng.uniform01_open((10, 196))
    c = M.MergeCoefficients("layer_wise", 0.2 + 0.5 * rng.uniform01_open((3, 4)))
    theta = D.masked_merge(pre, taus, m, c)
    _, g_theta, _ = nn.loss_and_grads(theta, X, "entropy")
    rescaled = np.stack([rescale_flat(t, m) for t in taus])
    g = M.coefficient_gradient(arch, g_theta, rescaled, "layer_wise")
    f = lambda v: nn.entropy_loss(D.masked_merge(pre, taus, m, M.MergeCoefficients("layer_wise", v)), X)
    assert max_rel_err(g.ravel(), central_diff(f, c.values, np.arange(g.size))) <= 1e-4


def test_config_validation():
    with pytest.raises(ValueError):
        D.DamConfig(alpha=-1)
    with pytest.raises(ValueError):
        D.DamConfig(granularity="neuron")
    with pytest.raises(ValueError):
        D.DamConfig(perturbed_loss="mse")


# end-to-end on the default zoo ------------------------------------------


def _inputs(cfg, zoo):
    ids = [t.task_id for t in cfg.tasks]
    return ids, zoo.task_vectors(ids), [zoo.tests[t].inputs for t in ids]


def test_zero_epochs_is_plain_coefficient_merge(cfg, zoo):
    ids, tvs, batches = _inputs(cfg, zoo)
    res = D.run_dam(zoo.pre.params, tvs, batches, replace(cfg.dam, epochs=0))
    assert np.all(res.mask.logits == 0) and res.trace == []
    assert np.all(res.coefficients.values == cfg.dam.lambda_init)
    merged = D.deployed_model(zoo.pre.params, tvs, res)
    plain = M.merge_with_coefficients(zoo.pre.params, tvs, res.coefficients)
    np.testing.assert_allclose(merged.flat, plain.flat, rtol=0, atol=1e-15)


def test_clip_holds_after_every_epoch(cfg, zoo):
    ids, tvs, batches = _inputs(cfg, zoo)
    res = D.run_dam(zoo.pre.params, tvs, batches, replace(cfg.dam, epochs=15))
    assert len(res.trace) == 15
    for row in res.trace:
        assert max(row["delta_l1"]) <= cfg.dam.xi + 1e-12
    assert max(res.trace[-1]["delta_l1"]) > 0.5 * cfg.dam.xi  # the budget is actually used
    for d in res.perturbations:
        assert np.abs(d).sum() <= cfg.dam.xi + 1e-12


def test_alpha_zero_is_performance_only(cfg, zoo):
    ids, tvs, batches = _inputs(cfg, zoo)
    base = replace(cfg.dam, epochs=10, alpha=0.0)
    a = D.run_dam(zoo.pre.params, tvs, batches, base)
    b = D.run_dam(zoo.pre.params, tvs, batches, replace(base, update_delta=False))
    np.testing.assert_array_equal(a.mask.logits, b.mask.logits)
    np.testing.assert_array_equal(a.coefficients.values, b.coefficients.values)
    assert [r["clean_entropy"] for r in a.trace] == [r["clean_entropy"] for r in b.trace]


def test_determinism_and_duplicate_alphas(cfg, zoo):
    ids, tvs, batches = _inputs(cfg, zoo)
    c = replace(cfg.dam, epochs=8)
    a = D.run_dam(zoo.pre.params, tvs, batches, c)
    b = D.run_dam(zoo.pre.params, tvs, batches, c)
    np.testing.assert_array_equal(a.mask.logits, b.mask.logits)
    np.testing.assert_array_equal(a.perturbations, b.perturbations)
    assert a.trace == b.trace

    def evaluate(model):
        return float(nn.entropy_loss(model, batches[0])), 0.0

    rows = D.sweep_alpha(zoo.pre.params, tvs, batches, c, [0.0, 1.0, 1.0], evaluate)
    assert rows[1]["acc_avg"] == rows[2]["acc_avg"]
    single = D.sweep_alpha(zoo.pre.params, tvs, batches, c, [0.0], evaluate)
    assert len(single) == 1 and single[0]["non_dominated"]


def test_hard_deploy_is_binary(cfg, zoo):
    ids, tvs, batches = _inputs(cfg, zoo)
    res = D.run_dam(zoo.pre.params, tvs, batches, replace(cfg.dam, epochs=3, deploy="hard"))
    assert set(np.unique(res.deployed_mask())) <= {0.0, 1.0}


def test_trigger_recovery(cfg, zoo):
    """Delta synthesised on a backdoored model acts like its trigger; on a clean model it does not."""
    trig = cfg.zoo["task0"].trigger
    bd, clean = zoo.models["task0"].params, zoo.models["task2"].params
    X = zoo.tests["task0"].inputs[:64]
    delta = np.zeros(196)
    for _ in range(cfg.dam.delta_steps):
        _, g = D.perturbation_gradient(bd, X, delta)
        delta = D.clip_l1(delta - cfg.dam.lr_delta * g, cfg.dam.xi)

    def hit_rate(model, tid):
        ds = zoo.tests[tid]
        xs = ds.inputs[ds.labels != trig.target_class]  # clean, untriggered, non-target
        return float(np.mean(nn.predict(model, D.perturb(xs, delta)) == trig.target_class))

    assert hit_rate(bd, "task0") >= 0.60
    assert hit_rate(clean, "task2") < 0.30
