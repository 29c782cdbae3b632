import numpy as np
import pytest

from conftest import central_diff, max_rel_err, well_conditioned
from damlab import nn
from damlab.tensor import Rng


def _batch(arch, B, seed):
    return Rng(seed).uniform01_open((B, arch.input_dim))


def test_param_layout():
    arch = nn.ArchSpec(196, (64, 64), 4)
    assert arch.param_count == 196 * 64 + 64 + 64 * 64 + 64 + 64 * 4 + 4
    names = [s[0] for s in arch.segments()]
    assert names == ["layers.0.weight", "layers.0.bias", "layers.1.weight", "layers.1.bias", "layers.2.weight", "layers.2.bias"]
    p = nn.init_params(arch, Rng(0))
    np.testing.assert_array_equal(nn.flatten(p.layers()), p.flat)


def test_zero_net_uniform_and_class0():
    arch = nn.ArchSpec(4, (3,), 4)
    p = nn.ParamVector(arch, np.zeros(arch.param_count))
    X = Rng(0).uniform01_open((5, 4))
    assert np.all(nn.forward(p, X) == 0)
    assert nn.entropy_loss(p, X) == pytest.approx(np.log(4), abs=1e-12)
    assert nn.predict(p, X).tolist() == [0] * 5
    np.testing.assert_allclose(nn.grad_params(p, X, "entropy"), 0.0, atol=1e-12)
    assert nn.cross_entropy_loss(p, X, [0, 1, 2, 3, 0]) == pytest.approx(np.log(4))


def test_identity_single_layer_selects_column():
    arch = nn.ArchSpec(4, (), 4)
    W = np.arange(16.0).reshape(4, 4)
    p = nn.ParamVector(arch, nn.flatten([(W, np.zeros(4))]))
    x = np.eye(4)[2]
    np.testing.assert_array_equal(nn.forward(p, x)[0], W[:, 2])


def test_predict_tie_rule():
    arch = nn.ArchSpec(1, (), 2)
    p = nn.ParamVector(arch, np.array([0.0, 0.0, 0.1, 0.9]))
    assert nn.predict(p, [[0.0]]).tolist() == [1]
    p = nn.ParamVector(arch, np.array([0.0, 0.0, 0.5, 0.5]))
    assert nn.predict(p, [[0.0]]).tolist() == [0]


def test_loss_values():
    arch = nn.ArchSpec(1, (), 2)
    p = nn.ParamVector(arch, np.zeros(4))
    assert nn.cross_entropy_loss(p, [[0.3]], [1]) == pytest.approx(np.log(2), abs=1e-12)
    sharp = nn.ParamVector(arch, np.array([0.0, 0.0, 100.0, -100.0]))
    assert nn.entropy_loss(sharp, [[0.0]]) < 1e-80
    assert nn.cross_entropy_loss(sharp, [[0.0]], [0]) < 1e-80


def test_entropy_against_high_precision():
    import mpmath

    mpmath.mp.dps = 40
    arch = nn.ArchSpec(6, (5,), 3)
    p = nn.init_params(arch, Rng(1))
    X = Rng(2).uniform01_open((7, 6)) * 3
    logits = nn.forward(p, X)
    ref = mpmath.mpf(0)
    for row in logits:
        z = [mpmath.mpf(float(v)) for v in row]
        s = mpmath.fsum(mpmath.exp(v) for v in z)
        ref += -mpmath.fsum((mpmath.exp(v) / s) * (v - mpmath.log(s)) for v in z)
    assert nn.entropy_loss(p, X) == pytest.approx(float(ref / len(logits)), rel=1e-13)


def test_label_validation():
    arch = nn.ArchSpec(2, (), 3)
    p = nn.ParamVector(arch, np.zeros(arch.param_count))
    with pytest.raises(ValueError, match="labels"):
        nn.cross_entropy_loss(p, [[0, 0]], [3])
    with pytest.raises(ValueError):
        nn.loss_and_grads(p, [[0, 0]], "mse")


@pytest.mark.parametrize("kind", ["entropy", "cross_entropy"])
def test_param_gradient_2_16_4(kind):
    arch = nn.ArchSpec(2, (16,), 4)
    p = nn.init_params(arch, Rng(11))
    X = Rng(12).uniform01_open((9, 2)) * 4 - 2
    y = np.arange(9) % 4
    f = lambda flat: nn.loss_and_grads(nn.ParamVector(arch, flat), X, kind, y, want_params=False)[0]
    g = nn.grad_params(p, X, kind, y)
    idx = well_conditioned(g, 10_000, Rng(0))
    assert max_rel_err(g[idx], central_diff(f, p.flat, idx)) <= 1e-6


@pytest.mark.parametrize("kind", ["entropy", "cross_entropy"])
def test_input_gradient(kind, small_net):
    arch, p = small_net
    X = _batch(arch, 3, 5)
    y = np.array([0, 2, 3])
    g = nn.grad_input(p, X, kind, y)
    f = lambda Xf: nn.loss_and_grads(p, Xf, kind, y, want_params=False)[0]
    idx = well_conditioned(g.ravel(), 250, Rng(1))
    assert len(idx) >= 200
    assert max_rel_err(g.ravel()[idx], central_diff(f, X, idx)) <= 1e-6


def test_input_gradient_is_per_sample(small_net):
    arch, p = small_net
    X = _batch(arch, 4, 6)
    g = nn.grad_input(p, X, "entropy")
    for s in range(4):
        np.testing.assert_allclose(g[s], nn.grad_input(p, X[s : s + 1], "entropy")[0] / 4, rtol=1e-12, atol=1e-15)


def test_zero_first_layer_gives_zero_input_grad(small_net):
    arch, p = small_net
    flat = p.flat.copy()
    flat[: 16 * 196] = 0.0
    g = nn.grad_input(nn.ParamVector(arch, flat), _batch(arch, 3, 0), "entropy")
    assert np.all(g == 0)


def test_duplicated_batch_same_gradient(small_net):
    arch, p = small_net
    X = _batch(arch, 5, 1)
    g1 = nn.grad_params(p, X, "entropy")
    g2 = nn.grad_params(p, np.concatenate([X, X]), "entropy")
    np.testing.assert_allclose(g1, g2, rtol=0, atol=1e-12)


def test_fisher_matches_per_sample_gradients(small_net):
    arch, p = small_net
    X = _batch(arch, 6, 2)
    yhat = nn.predict(p, X)
    ref = np.mean([nn.grad_params(p, X[s : s + 1], "cross_entropy", yhat[s : s + 1]) ** 2 for s in range(6)], axis=0)
    np.testing.assert_allclose(nn.fisher_diagonal(p, X), ref, rtol=1e-10, atol=1e-18)


def test_finite_logits_random(small_net):
    arch, p = small_net
    assert np.all(np.isfinite(nn.forward(p, _batch(arch, 32, 9) * 100)))
