import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import gradcheck, param
from gateadd.autodiff import ShapeError, Tensor
from gateadd.losses import (LossWeights, autoencoder_loss, consistency_loss, distance_loss,
                            lf_displacement, mapping_loss, mse, regression_loss, total_loss)


def T(x):
    return Tensor(np.asarray(x, dtype=float))


def val(t):
    return t.item()


# -- worked examples --------------------------------------------------------

def test_mse_examples():
    assert val(mse(T([1, 2]), T([1, 2]))) == 0.0
    assert val(mse(T([1, 2]), T([1, 3]))) == 0.5
    assert val(mse(T([0]), T([2]))) == 4.0
    with pytest.raises(ShapeError):
        mse(T([1, 2]), T([1, 2, 3]))


def test_regression_loss_is_task_mean():
    preds = {"a": T([1.0, 1.0]), "b": T([0.0, 0.0])}
    labels = {"a": T([1.0, 1.0]), "b": T([0.0, 0.0])}
    assert val(regression_loss(preds, labels)) == 0.0
    # per-task MSEs 0.2 and 0.6
    preds = {"a": T([np.sqrt(0.2)]), "b": T([np.sqrt(0.6)])}
    labels = {"a": T([0.0]), "b": T([0.0])}
    assert val(regression_loss(preds, labels)) == pytest.approx(0.4, abs=1e-15)
    one = regression_loss({"a": T([1.0, 3.0])}, {"a": T([0.0, 0.0])})
    assert val(one) == val(mse(T([1.0, 3.0]), T([0.0, 0.0])))
    with pytest.raises(ValueError):
        regression_loss({}, {})


def test_autoencoder_loss_sums_over_tasks():
    z = T(np.zeros(10))
    off = T(np.full(10, np.sqrt(0.3)))
    assert val(autoencoder_loss([(z, z)])) == 0.0
    assert val(autoencoder_loss([(z, off), (z, off)])) == pytest.approx(0.6, abs=1e-15)
    assert val(autoencoder_loss([(z, off)])) == val(mse(z, off))
    with pytest.raises(ValueError):
        autoencoder_loss([])


def test_consistency_loss_examples():
    t = T([[0.0, 0.0]])
    assert val(consistency_loss([t, t], t)) == 0.0
    assert val(consistency_loss([T([[1.0, 1.0]])], t)) == 1.0
    src = T([[2.0, 0.0]])
    m = val(mse(src, t))
    assert val(consistency_loss([src, src, src], t)) == pytest.approx(3 * m)


def test_mapping_loss_examples():
    y = T([[1.0]])
    assert val(mapping_loss(y, [y, y])) == 0.0
    assert val(mapping_loss(y, [T([[3.0]])])) == 4.0
    d = T([[2.0]])
    assert val(mapping_loss(y, [d, d])) == 2 * val(mapping_loss(y, [d]))


def test_lf_displacement_examples():
    assert val(lf_displacement(T([[0.0, 0.0]]), T([[3.0, 4.0]])).sum()) == 5.0
    a, b = T([[1.0, -2.0, 0.5]]), T([[0.0, 1.0, 2.0]])
    assert np.array_equal(lf_displacement(a, b).data, lf_displacement(b, a).data)
    assert np.array_equal(lf_displacement(a, a).data, [0.0])
    with pytest.raises(ShapeError):
        lf_displacement(T([[0.0, 0.0]]), T([[0.0, 0.0, 0.0]]))


def test_lf_displacement_matches_independent_norms(rng):
    a = rng.standard_normal((100, 7))
    b = rng.standard_normal((100, 7))
    ref = np.array([np.sqrt(sum((bi - ai) ** 2 for ai, bi in zip(ra, rb))) for ra, rb in zip(a, b)])
    np.testing.assert_allclose(lf_displacement(T(a), T(b)).data, ref, rtol=0, atol=1e-12)


def test_lf_displacement_stacked_perturbations(rng):
    c = rng.standard_normal((4, 3))
    p = rng.standard_normal((5, 4, 3))
    out = lf_displacement(T(c), T(p)).data
    assert out.shape == (5, 4)
    np.testing.assert_allclose(out, np.linalg.norm(p - c[None], axis=-1), atol=1e-12)


def test_distance_loss_examples():
    s = T(np.ones((3, 4)))
    assert val(distance_loss({"a": s, "b": s}, s)) == 0.0
    # M=2 perturbations with per-perturbation MSEs 0.4 and 0.8
    target = T(np.zeros((2, 1)))
    src = T([[np.sqrt(0.4)], [np.sqrt(0.8)]])
    assert val(distance_loss({"a": src}, target, {"a": 1.0})) == pytest.approx(0.6, abs=1e-15)
    one = val(distance_loss({"a": src, "b": src}, target, {"a": 1.0, "b": 1.0}))
    two = val(distance_loss({"a": src, "b": src}, target, {"a": 2.0, "b": 1.0}))
    assert two == pytest.approx(one * 1.5)
    with pytest.raises(ShapeError):
        distance_loss({"a": T(np.zeros((3, 1)))}, target)


def test_distance_loss_missing_weight_defaults_to_one(caplog):
    target = T(np.zeros((2, 3)))
    src = T(np.ones((2, 3)))
    with caplog.at_level("DEBUG", logger="gateadd.losses"):
        v = val(distance_loss({"x": src}, target, {}))
    assert v == val(distance_loss({"x": src}, target, {"x": 1.0}))
    assert "no distance weight" in caplog.text


def test_total_loss_examples():
    parts = [T([float(k)]) for k in (1, 2, 3, 4, 5)]
    assert val(total_loss(*parts, weights=LossWeights()).total) == 15.0
    only = total_loss(*parts, weights=LossWeights(0, 0, 0, 0))
    assert val(only.total) == val(only.reg) == 1.0
    doubled = total_loss(*parts, weights=LossWeights(delta=2.0))
    assert val(doubled.total) == 20.0
    assert val(total_loss(T([2.0])).total) == 2.0
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)


# -- identity fixed points ----------------------------------------------------

def test_identity_transfer_fixed_points(rng):
    from gateadd.autodiff import Mlp

    ident = Mlp.identity(6)
    for _ in range(5):
        z = Tensor(rng.standard_normal((8, 6)))
        zp = ident(z)
        assert val(autoencoder_loss([(z, ident(zp))])) == 0.0
        assert val(consistency_loss([ident(z), ident(z)], zp)) == 0.0
        pert = Tensor(z.data[None] + rng.standard_normal((5, 8, 6)) * 0.01)
        s = lf_displacement(zp, ident(pert.reshape(40, 6)).reshape(5, 8, 6))
        assert val(distance_loss({"a": s, "b": s}, s)) == 0.0


# -- properties -------------------------------------------------------------

finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(a=arrays(np.float64, (3, 4), elements=finite), b=arrays(np.float64, (3, 4), elements=finite))
def test_losses_are_nonnegative(a, b):
    assert val(mse(T(a), T(b))) >= 0
    assert val(consistency_loss([T(a)], T(b))) >= 0
    assert val(distance_loss({"s": T(np.abs(a))}, T(np.abs(b)))) >= 0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 4), b=st.integers(1, 6), d=st.integers(1, 8))
def test_all_losses_gradcheck(seed, m, b, d):
    r = np.random.default_rng(seed)
    z, zr, zs, zt = (param(r, b, d) for _ in range(4))
    y, yh = param(r, b, 1), param(r, b, 1)
    c = param(r, b, d)
    pert = param(r, m, b, d)
    pert_t = param(r, m, b, d)
    w = LossWeights(0.7, 1.3, 0.5, 2.0, {"s": 1.5})

    def loss():
        s_src = lf_displacement(c, pert)
        s_tgt = lf_displacement(zt, pert_t)
        return total_loss(regression_loss({"t": yh}, {"t": y}), autoencoder_loss([(z, zr)]),
                          consistency_loss([zs], zt), mapping_loss(y, [yh]),
                          distance_loss({"s": s_src}, s_tgt, w.c_alpha), w).total

    assert gradcheck(loss, [z, zr, zs, zt, y, yh, c, pert, pert_t]) < 1e-4
