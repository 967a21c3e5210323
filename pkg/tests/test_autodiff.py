import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semcast import autodiff as ad
from semcast.optim import Adam, Sgd, make_optimizer


def test_matmul_identity():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = rng.normal(size=(2, 2))
        out = ad.matmul(ad.constant(np.eye(2)), ad.constant(a))
        np.testing.assert_array_equal(out.data, a)


def test_softmax_uniform_on_equal_logits():
    out = ad.softmax(ad.constant([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-12)


def test_relu_definition():
    out = ad.relu(ad.constant([-1.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 2.0])


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 2))))


def test_apply_primitive_dispatch_and_unknown():
    out = ad.apply_primitive("relu", ad.constant([-1.0, 1.0]))
    np.testing.assert_array_equal(out.data, [0.0, 1.0])
    with pytest.raises(ValueError, match="unknown primitive"):
        ad.apply_primitive("conv2d", ad.constant([0.0]))


def test_backward_square_sum():
    x = ad.parameter([3.0])
    loss = ad.tensor_sum(ad.mul(x, x))
    grads = ad.backward(loss, {"x": x})
    np.testing.assert_allclose(grads["x"], [6.0])


def test_backward_log_softmax_pick():
    # d log_softmax(z)[j] / dz = e_j - softmax(z), checked both in closed form
    # and against the central-difference oracle at eps=1e-5.
    rng = np.random.default_rng(1)
    z = ad.parameter(rng.normal(size=5))
    j = 2

    def closure():
        return ad.slice_tensor(ad.log_softmax(z), j)

    grads = ad.backward(closure(), {"z": z})
    sm = np.exp(z.data - z.data.max())
    sm /= sm.sum()
    expected = -sm
    expected[j] += 1.0
    np.testing.assert_allclose(grads["z"], expected, atol=1e-12)
    assert ad.finite_difference_check(closure, {"z": z}, eps=1e-5) < 1e-6


def test_backward_unused_parameter_gets_zero_grad():
    x = ad.parameter([2.0])
    unused = ad.parameter([[1.0, 5.0]])
    loss = ad.tensor_sum(ad.mul(x, x))
    grads = ad.backward(loss, {"x": x, "unused": unused})
    np.testing.assert_array_equal(grads["unused"], np.zeros((1, 2)))


def test_backward_rejects_non_scalar():
    x = ad.parameter([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.mul(x, x), {"x": x})


def test_backward_is_linear():
    rng = np.random.default_rng(2)
    x = ad.parameter(rng.normal(size=4))

    def l1():
        return ad.tensor_sum(ad.mul(x, x))

    def l2():
        return ad.tensor_sum(ad.relu(x))

    a, b = 1.7, -0.4
    combined = ad.add(ad.scale(l1(), a), ad.scale(l2(), b))
    g_comb = ad.backward(combined, {"x": x})["x"]
    g1 = ad.backward(l1(), {"x": x})["x"]
    g2 = ad.backward(l2(), {"x": x})["x"]
    np.testing.assert_allclose(g_comb, a * g1 + b * g2, atol=1e-9)


def test_shared_subexpression_accumulates():
    x = ad.parameter([1.5])
    y = ad.mul(x, x)            # y used twice below
    loss = ad.tensor_sum(ad.add(y, y))
    grads = ad.backward(loss, {"x": x})
    np.testing.assert_allclose(grads["x"], [2 * 2 * 1.5])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_softmax_rows_are_distributions(logits):
    out = ad.softmax(ad.constant(logits)).data
    assert (out >= 0).all()
    assert abs(out.sum() - 1.0) < 1e-9


def test_layer_norm_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = ad.parameter(rng.normal(size=(3, 6)))
    g = ad.parameter(rng.normal(size=6))
    b = ad.parameter(rng.normal(size=6))

    def closure():
        return ad.tensor_sum(ad.mul(ad.layer_norm(x, g, b), ad.constant(w)))

    w = rng.normal(size=(3, 6))
    err = ad.finite_difference_check(closure, {"x": x, "g": g, "b": b}, eps=1e-5)
    assert err < 1e-6


def test_mixed_graph_matches_finite_differences():
    # A composite touching most primitives: embedding, matmul, layer_norm,
    # relu, concat, softmax, slicing, reductions.
    rng = np.random.default_rng(4)
    table = ad.parameter(rng.normal(size=(7, 4)))
    w1 = ad.parameter(rng.normal(size=(4, 5)) * 0.5)
    w2 = ad.parameter(rng.normal(size=(10, 3)) * 0.5)
    gain = ad.parameter(np.ones(4))
    bias = ad.parameter(np.zeros(4))
    ids = np.array([[1, 4, 6], [0, 2, 3]])
    params = {"table": table, "w1": w1, "w2": w2, "gain": gain, "bias": bias}

    def closure():
        e = ad.embedding_lookup(table, ids)
        n = ad.layer_norm(e, gain, bias)
        h = ad.relu(ad.matmul(n, w1))
        both = ad.concat([h, ad.mul(h, h)], axis=-1)
        logits = ad.matmul(both, w2)
        lp = ad.log_softmax(logits)
        picked = ad.take_along_last(lp, np.array([[0, 1, 2], [2, 0, 1]]))
        return ad.tensor_mean(picked)

    err = ad.finite_difference_check(closure, params, eps=1e-5, max_coords=120)
    assert err < 1e-6


def test_finite_difference_quadratic_tight():
    x = ad.parameter([0.3, -1.2, 2.0])

    def closure():
        return ad.tensor_sum(ad.mul(x, x))

    assert ad.finite_difference_check(closure, {"x": x}) < 1e-6


def test_finite_difference_zero_parameters():
    def closure():
        return ad.tensor_sum(ad.constant([1.0, 2.0]))

    assert ad.finite_difference_check(closure, {}) == 0.0


def test_finite_difference_rejects_nondeterministic_closure():
    rng = np.random.default_rng(5)
    x = ad.parameter([1.0])

    def closure():
        return ad.tensor_sum(ad.mul(x, ad.constant(rng.normal(size=1))))

    with pytest.raises(ad.NondeterministicClosureError):
        ad.finite_difference_check(closure, {"x": x})


def test_finite_difference_rejects_bad_eps():
    x = ad.parameter([1.0])
    with pytest.raises(ValueError, match="eps"):
        ad.finite_difference_check(lambda: ad.tensor_sum(x), {"x": x}, eps=1e-2)


def test_deterministic_replay_bit_identical():
    rng_a = np.random.default_rng(42)
    rng_b = np.random.default_rng(42)

    def run(rng):
        x = ad.parameter(rng.normal(size=(4, 4)))
        w = ad.parameter(rng.normal(size=(4, 2)))
        return ad.tensor_sum(ad.softmax(ad.matmul(ad.relu(x), w))).item()

    assert run(rng_a) == run(rng_b)


def test_ste_threshold_identity_gradient():
    x = ad.parameter([-0.5, 0.2, 3.0])
    out = ad.ste_threshold(x)
    np.testing.assert_array_equal(out.data, [0.0, 1.0, 1.0])
    grads = ad.backward(ad.tensor_sum(ad.mul(out, ad.constant([2.0, 3.0, 4.0]))), {"x": x})
    np.testing.assert_array_equal(grads["x"], [2.0, 3.0, 4.0])


def test_repeat_rows_gradient_groups():
    x = ad.parameter([[1.0], [2.0]])
    out = ad.repeat_rows(x, 3)
    assert out.data.shape == (6, 1)
    loss = ad.tensor_sum(ad.mul(out, ad.constant(np.arange(6.0).reshape(6, 1))))
    grads = ad.backward(loss, {"x": x})
    np.testing.assert_array_equal(grads["x"], [[0 + 1 + 2], [3 + 4 + 5]])


def test_detach_shares_storage_but_blocks_gradient():
    params = ad.parameters({"w": np.array([1.0, 2.0])})
    frozen = ad.detach(params)
    assert frozen["w"].data is params["w"].data
    loss = ad.tensor_sum(ad.mul(frozen["w"], frozen["w"]))
    assert not loss.requires_grad


class TestOptimizers:
    def test_plain_ascent_definition(self):
        p = ad.parameters({"p": np.array([1.0])})
        opt = Sgd(lr=0.1, direction="ascent")
        opt.step(p, {"p": np.array([2.0])})
        np.testing.assert_allclose(p["p"].data, [1.2])
        assert opt.step_count == 1

    def test_zero_gradient_is_noop(self):
        p = ad.parameters({"p": np.array([1.0, -4.0])})
        before = p["p"].data.copy()
        Sgd(lr=0.5, direction="descent").step(p, {"p": np.zeros(2)})
        np.testing.assert_array_equal(p["p"].data, before)

    def test_two_sgd_steps_equal_one_summed_step(self):
        g1, g2 = np.array([0.3, -1.0]), np.array([2.0, 0.7])
        a = ad.parameters({"p": np.array([1.0, 1.0])})
        opt = Sgd(lr=0.05, direction="ascent")
        opt.step(a, {"p": g1})
        opt.step(a, {"p": g2})
        b = ad.parameters({"p": np.array([1.0, 1.0])})
        Sgd(lr=0.05, direction="ascent").step(b, {"p": g1 + g2})
        np.testing.assert_allclose(a["p"].data, b["p"].data, atol=1e-12)

    def test_missing_gradient_rejected(self):
        p = ad.parameters({"p": np.array([1.0]), "q": np.array([2.0])})
        with pytest.raises(ValueError, match="q"):
            Sgd(lr=0.1).step(p, {"p": np.array([1.0])})

    def test_direction_override_and_validation(self):
        p = ad.parameters({"p": np.array([0.0])})
        opt = Sgd(lr=1.0, direction="descent")
        opt.step(p, {"p": np.array([1.0])}, direction="ascent")
        np.testing.assert_allclose(p["p"].data, [1.0])
        with pytest.raises(ValueError):
            Sgd(lr=1.0, direction="sideways")
        with pytest.raises(ValueError):
            Sgd(lr=0.0)

    def test_adam_moves_against_gradient_sign(self):
        p = ad.parameters({"p": np.array([1.0])})
        opt = Adam(lr=0.01, direction="descent")
        for _ in range(3):
            opt.step(p, {"p": np.array([2.0])})
        assert p["p"].data[0] < 1.0

    def test_factory(self):
        assert isinstance(make_optimizer("adam", 0.1), Adam)
        assert isinstance(make_optimizer("sgd", 0.1), Sgd)
        with pytest.raises(ValueError):
            make_optimizer("rmsprop", 0.1)
