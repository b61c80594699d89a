import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifold_inversion import autodiff as ad
from manifold_inversion.autodiff import MLP, FunctionMap, Tensor
from manifold_inversion.errors import CapacityError, DimensionError, NumericError


def straight_line_mlp(params, x):
    """Independent forward pass for a linear-tanh-linear stack."""
    h = np.tanh(params["0.weight"] @ x + params["0.bias"])
    return params["2.weight"] @ h + params["2.bias"]


def two_layer(seed=0, sizes=(3, 5, 2), act="tanh"):
    return MLP.create(list(sizes), act, np.random.default_rng(seed))


def test_identity_map():
    f = FunctionMap(lambda x: x, 3, 3)
    np.testing.assert_array_equal(ad.evaluate(f, [1.0, 2.0, 3.0]).data, [1.0, 2.0, 3.0])


def test_identity_linear_layer():
    net = MLP([{"type": "linear", "in": 4, "out": 4}], {"0.weight": np.eye(4), "0.bias": np.zeros(4)})
    x = np.array([0.3, -1.0, 2.5, 7.0])
    np.testing.assert_array_equal(ad.evaluate(net, x).data, x)


def test_forward_matches_straight_line_evaluator():
    net = two_layer(0)
    params = {k: v.data for k, v in net.parameters().items()}
    x = np.random.default_rng(0).standard_normal(3)
    np.testing.assert_allclose(ad.evaluate(net, x).data, straight_line_mlp(params, x), rtol=0, atol=1e-14)


def test_forward_dimension_error():
    with pytest.raises(DimensionError, match="expected shape"):
        ad.evaluate(two_layer(), np.zeros(4))


def test_forward_is_deterministic():
    net = two_layer(3)
    x = np.linspace(-1, 1, 3)
    assert np.array_equal(ad.evaluate(net, x).data, ad.evaluate(net, x).data)


def test_gradient_of_sum_is_ones():
    f = FunctionMap(lambda x: x.sum(), 5, 1)
    np.testing.assert_array_equal(ad.gradient(f, np.arange(5.0), 1.0), np.ones(5))


def test_gradient_of_half_square_norm_is_identity():
    f = FunctionMap(lambda x: (x * x).sum() * 0.5, 4, 1)
    x = np.array([1.0, -2.0, 0.5, 3.0])
    np.testing.assert_allclose(ad.gradient(f, x, 1.0), x, rtol=0, atol=1e-15)


def test_gradient_matches_finite_differences():
    net = two_layer(1, (4, 7, 3))
    rng = np.random.default_rng(1)
    x, s = rng.standard_normal(4), rng.standard_normal(3)
    g = ad.gradient(net, x, s)
    with ad.no_grad():
        fd = ad.finite_difference_jacobian(lambda v: s @ net(Tensor(v)).data, x, 1e-5)
    assert ad.relative_error(g, fd) < 1e-6


def test_gradient_seed_shape_checked():
    with pytest.raises(DimensionError):
        ad.gradient(two_layer(), np.zeros(3), np.ones(3))


def test_gradient_reports_non_finite_node():
    f = FunctionMap(lambda x: ad.log(x).sum(), 2, 1)
    with pytest.raises(NumericError, match="log"):
        ad.gradient(f, np.array([0.0, 1.0]), 1.0)


def test_gradient_leaves_parameters_untouched():
    net = two_layer(2)
    before = net.flat_parameters().copy()
    ad.gradient(net, np.ones(3), np.ones(2))
    assert np.array_equal(before, net.flat_parameters())


def test_jacobian_of_linear_map_is_weight():
    W = np.random.default_rng(4).standard_normal((3, 5))
    net = MLP([{"type": "linear", "in": 5, "out": 3}], {"0.weight": W, "0.bias": np.ones(3)})
    np.testing.assert_array_equal(ad.jacobian(net, np.zeros(5)), W)


def test_jacobian_hand_example():
    f = FunctionMap(lambda z: ad.concat([z[0:1] * z[0:1], z[0:1] * z[1:2]]), 2, 2)
    np.testing.assert_array_equal(ad.jacobian(f, [1.0, 2.0]), [[2.0, 0.0], [2.0, 1.0]])


def test_jacobian_rows_equal_unit_seed_gradients():
    net = two_layer(5, (4, 6, 3))
    x = np.random.default_rng(5).standard_normal(4)
    J = ad.jacobian(net, x)
    for i in range(3):
        assert np.array_equal(J[i], ad.gradient(net, x, np.eye(3)[i]))


def test_jacobian_capacity_error():
    with pytest.raises(CapacityError) as info:
        ad.jacobian(two_layer(), np.zeros(3), max_entries=5)
    assert info.value.required == 6 and info.value.allowed == 5


def test_batch_jacobian_matches_per_point():
    net = two_layer(6, (3, 4, 5))
    X = np.random.default_rng(6).standard_normal((4, 3))
    JB = ad.batch_jacobian(net, X)
    for i in range(4):
        np.testing.assert_allclose(JB[i], ad.jacobian(net, X[i]), rtol=0, atol=1e-14)


def test_grad_check_linear_map_is_exact():
    net = MLP.create([4, 3], rng=np.random.default_rng(0))
    assert ad.grad_check(net, np.ones(4)) < 1e-10


def test_grad_check_tanh_mlp():
    net = two_layer(7, (5, 8, 4))
    assert ad.grad_check(net, np.random.default_rng(7).standard_normal(5), 1e-5) < 1e-6


def test_grad_check_catches_corrupted_backward_rule():
    def bad_tanh(a):
        # forward is tanh, backward pretends the derivative is 1
        return ad._node(np.tanh(a.data), "tanh", (a,), lambda g: (g,))

    f = FunctionMap(lambda x: bad_tanh(x * 2.0), 3, 3)
    assert ad.grad_check(f, np.array([0.5, -1.0, 1.5])) > 1e-2


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_vjp_is_linear_in_seed(a, b, seed):
    rng = np.random.default_rng(seed)
    net = two_layer(seed % 7, (4, 6, 3))
    x, s1, s2 = rng.standard_normal(4), rng.standard_normal(3), rng.standard_normal(3)
    lhs = ad.gradient(net, x, a * s1 + b * s2)
    rhs = a * ad.gradient(net, x, s1) + b * ad.gradient(net, x, s2)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_second_order_gradient_matches_finite_differences():
    # d/dW of ||d f / d x||^2, the shape of computation the aligned objective needs
    net = two_layer(8, (3, 4, 2))
    x = Tensor(np.array([0.2, -0.4, 0.9]), requires_grad=True)
    W = net.parameters()["0.weight"]

    def value(w):
        saved = W.data
        W.data = w
        with ad.no_grad():
            J = ad.jacobian(net, x.data)
        W.data = saved
        return np.sum(J[0] ** 2)

    gx = ad.grad(net(x)[0], x, create_graph=True)
    gW = ad.grad((gx * gx).sum(), W).data
    fd = ad.finite_difference_jacobian(lambda w: value(w.reshape(W.shape)), W.data.ravel(), 1e-6)
    assert ad.relative_error(gW.ravel(), fd.ravel()) < 1e-6


def test_unrelated_input_gets_zero_gradient():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    ga, gb = ad.grad((a * 3.0).sum(), [a, b])
    np.testing.assert_array_equal(ga.data, [3.0, 3.0])
    np.testing.assert_array_equal(gb.data, [0.0, 0.0])


def test_broadcast_gradients_are_summed():
    a = Tensor(np.ones((3, 2)), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ga, gb = ad.grad((a * b).sum(), [a, b])
    np.testing.assert_array_equal(gb.data, [3.0, 3.0])
    np.testing.assert_array_equal(ga.data, np.tile([1.0, 2.0], (3, 1)))


def test_checkpoint_round_trip(tmp_path):
    net = two_layer(9, (6, 10, 4), "relu")
    net.save(tmp_path / "net.json")
    doc = json.loads((tmp_path / "net.json").read_text())
    assert set(doc) == {"arch", "params"}
    back = MLP.load(tmp_path / "net.json")
    X = np.random.default_rng(9).standard_normal((5, 6))
    assert ad.relative_error(back(X).data, net(X).data) < 1e-12


def test_flat_parameter_round_trip():
    net = two_layer(10)
    flat = net.flat_parameters() * 2.0
    net.set_flat_parameters(flat)
    assert np.array_equal(net.flat_parameters(), flat)


def test_features_are_penultimate_layer():
    net = two_layer(11, (3, 5, 2))
    x = np.array([0.1, 0.2, 0.3])
    W = net.parameters()["0.weight"].data
    np.testing.assert_allclose(net.features(x).data, np.tanh(W @ x), atol=1e-15)
    assert net.feature_dim == 5
