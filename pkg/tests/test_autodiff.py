import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gradcheck, param
from gateadd.autodiff import (AdamW, DenseLayer, GraphConsumedError, Mlp, NonFiniteError, ShapeError,
                              Tensor, clip_grad_norm, concat, forward_mlp, is_grad_enabled, no_grad)


def layer(weight, bias, activation="identity"):
    w = np.asarray(weight, dtype=float)
    lay = DenseLayer(w.shape[1], w.shape[0], activation)
    lay.weight.data[...] = w
    lay.bias.data[...] = bias
    return lay


# -- forward examples ------------------------------------------------------

def test_identity_layer_passes_input_through():
    out = forward_mlp(Mlp([layer(np.eye(2), [0, 0])]), Tensor([[1.0, 2.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_hand_matrix_multiply():
    out = forward_mlp(Mlp([layer([[2, 0], [0, 3]], [1, 1])]), Tensor([[1.0, 1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0, 4.0]])


def test_relu_clamps_negative_preactivation():
    out = forward_mlp(Mlp([layer([[1]], [-5], "relu")]), Tensor([[3.0]]))
    np.testing.assert_array_equal(out.data, [[0.0]])


def test_forward_rejects_bad_shape_and_nonfinite():
    mlp = Mlp.build([3, 4, 2])
    with pytest.raises(ShapeError):
        mlp(Tensor(np.ones((2, 5))))
    with pytest.raises(NonFiniteError):
        mlp(Tensor(np.array([[1.0, np.nan, 0.0]])))


def test_layers_must_chain():
    with pytest.raises(ShapeError):
        Mlp([DenseLayer(3, 4), DenseLayer(5, 2)])


def test_eval_mode_is_deterministic_and_train_mode_uses_rng():
    mlp = Mlp.build([4, 8, 8, 1], dropout=0.5, rng=np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((6, 4)))
    np.testing.assert_array_equal(mlp(x, "eval").data, mlp(x, "eval").data)
    a = mlp(x, "train", np.random.default_rng(7)).data
    b = mlp(x, "train", np.random.default_rng(7)).data
    c = mlp(x, "train", np.random.default_rng(8)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError):
        mlp(x, "train")


def test_inverted_dropout_preserves_expectation():
    lay = layer(np.eye(1), [0.0])
    lay.dropout = 0.3
    x = Tensor(np.ones((200_000, 1)))
    out = lay(x, train=True, rng=np.random.default_rng(0)).data
    assert abs(out.mean() - 1.0) < 0.01
    assert set(np.unique(np.round(out, 12))) <= {0.0, round(1 / 0.7, 12)}


# -- backward examples -----------------------------------------------------

def test_linear_gradient():
    w = Tensor([1.0, 2.0], requires_grad=True)
    (w * Tensor([3.0, 4.0])).sum().backward()
    np.testing.assert_array_equal(w.grad, [3.0, 4.0])


def test_squared_error_gradient():
    w = Tensor([1.0], requires_grad=True)
    ((w * 2.0 - 0.0).square()).mean().backward()
    np.testing.assert_array_equal(w.grad, [8.0])


def test_disconnected_parameter_gets_zero_gradient():
    w = Tensor([1.0, 2.0], requires_grad=True)
    p = Tensor([5.0, 6.0, 7.0], requires_grad=True)
    (w * w).sum().backward()
    np.testing.assert_array_equal(p.grad, [0.0, 0.0, 0.0])


def test_gradients_accumulate_across_graphs():
    w = Tensor([2.0], requires_grad=True)
    (w * 3.0).sum().backward()
    (w * 3.0).sum().backward()
    np.testing.assert_array_equal(w.grad, [6.0])


def test_backward_requires_scalar_and_single_use():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (w * 2.0).backward()
    loss = (w * w).sum()
    loss.backward()
    with pytest.raises(GraphConsumedError):
        loss.backward()


def test_no_grad_builds_no_graph():
    w = Tensor([1.0], requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        out = w * 2.0
    assert is_grad_enabled()
    assert not out.requires_grad


def test_shared_subexpression_gradient():
    w = Tensor([3.0], requires_grad=True)
    y = w * w
    (y + y).sum().backward()
    np.testing.assert_allclose(w.grad, [12.0])


# -- gradient checks --------------------------------------------------------

@pytest.mark.parametrize("activation", ["relu", "tanh", "identity"])
def test_dense_layer_gradcheck(rng, activation):
    lay = DenseLayer(5, 4, activation, rng=rng)
    lay.bias.data[...] = rng.standard_normal(4) * 0.1
    x = param(rng, 6, 5)
    y = Tensor(rng.standard_normal((6, 4)))
    err = gradcheck(lambda: (lay(x) - y).square().mean(), [lay.weight, lay.bias, x])
    assert err < 1e-4


def test_elementwise_ops_gradcheck(rng):
    a, b = param(rng, 3, 4), param(rng, 1, 4)
    c = Tensor(rng.uniform(1, 2, (3, 4)), requires_grad=True)

    def loss():
        z = (a * b - a / 3.0 + c.sqrt()).tanh()
        return concat([z, a.relu()], axis=0).sum(axis=0).mean() + (a @ b.reshape(4, 1)).mean()

    assert gradcheck(loss, [a, b, c]) < 1e-4


def test_norm_rows_and_indexing_gradcheck(rng):
    a = param(rng, 2, 5, 3)

    def loss():
        return a.norm_rows().mean() + a[1].square().sum() + a[:, 2:4].mean()

    assert gradcheck(loss, [a]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), dims=st.lists(st.integers(1, 8), min_size=2, max_size=4),
       batch=st.integers(1, 8))
def test_mlp_gradcheck_property(seed, dims, batch):
    r = np.random.default_rng(seed)
    mlp = Mlp.build(dims, hidden_activation="tanh", rng=r)
    for p in mlp.parameters():
        p.data += r.standard_normal(p.shape) * 0.1
    x = Tensor(r.standard_normal((batch, dims[0])))
    y = Tensor(r.standard_normal((batch, dims[-1])))
    assert gradcheck(lambda: (mlp(x) - y).square().mean(), mlp.parameters()) < 1e-4


# -- optimiser -------------------------------------------------------------

def test_adamw_zero_gradient_is_fixed_point():
    p = Tensor([1.5, -2.0], requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    assert opt.step_count == 1


def test_adamw_first_step_closed_form():
    p = Tensor([1.0], requires_grad=True)
    p.grad[...] = 1.0
    AdamW([p], lr=0.1, betas=(0.9, 0.999), weight_decay=0.0).step()
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [1.0 - 0.1 / (1.0 + 1e-8)], rtol=0, atol=1e-15)


def test_adamw_decay_is_decoupled():
    p = Tensor([2.0], requires_grad=True)
    AdamW([p], lr=0.1, weight_decay=0.5).step()
    np.testing.assert_allclose(p.data, [2.0 * (1 - 0.05)])


def test_adamw_two_steps_match_reference():
    g = [0.3, -0.7]
    p = Tensor([0.5], requires_grad=True)
    opt = AdamW([p], lr=0.01, betas=(0.8, 0.9), eps=1e-6, weight_decay=0.1)
    ref, m, v = 0.5, 0.0, 0.0
    for t, gt in enumerate(g, start=1):
        p.grad[...] = gt
        opt.step()
        ref *= 1 - 0.01 * 0.1
        m = 0.8 * m + 0.2 * gt
        v = 0.9 * v + 0.1 * gt * gt
        ref -= 0.01 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.9 ** t)) + 1e-6)
    np.testing.assert_allclose(p.data, [ref], rtol=1e-14)


def test_adamw_errors():
    p = Tensor([1.0], requires_grad=True)
    p.grad = None
    with pytest.raises(ValueError):
        AdamW([p]).step()
    q = Tensor([1.0], requires_grad=True)
    q.grad[...] = np.inf
    with pytest.raises(NonFiniteError):
        AdamW([q]).step()


def test_frozen_mlp_unchanged_after_training_loop():
    r = np.random.default_rng(0)
    frozen = Mlp.build([3, 5, 2], rng=r)
    live = Mlp.build([2, 4, 1], rng=r)
    frozen.frozen = True
    before = [p.data.copy() for p in frozen.parameters()]
    opt = AdamW(live.parameters(), lr=1e-2)
    x = Tensor(r.standard_normal((8, 3)))
    for _ in range(100):
        opt.zero_grad()
        live(frozen(x)).square().mean().backward()
        opt.step()
    for a, p in zip(before, frozen.parameters()):
        assert np.array_equal(a, p.data)
    with pytest.raises(ValueError):
        AdamW(frozen.parameters()).step()


def test_clip_grad_norm():
    a = Tensor([0.0, 0.0], requires_grad=True)
    a.grad[...] = [3.0, 4.0]
    assert clip_grad_norm([a], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.linalg.norm(a.grad), 1.0, rtol=1e-9)


def test_seeded_training_is_bitwise_deterministic():
    def run():
        r = np.random.default_rng(3)
        mlp = Mlp.build([4, 6, 1], dropout=0.2, rng=r)
        opt = AdamW(mlp.parameters(), lr=1e-2)
        x = Tensor(r.standard_normal((10, 4)))
        for _ in range(5):
            opt.zero_grad()
            mlp(x, "train", r).square().mean().backward()
            opt.step()
        return [p.data.copy() for p in mlp.parameters()]

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)
