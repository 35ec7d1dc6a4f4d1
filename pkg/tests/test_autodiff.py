import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptive_length import autodiff as ad
from adaptive_length.autodiff import Tape, Value
from adaptive_length.errors import ConfigError, NumericDomainError, UsageError

FD_TOL = 1e-4


def grad_of(f, *arrays):
    params = [Value(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    with Tape() as tape:
        tape.backward(f(*params))
    return [p.grad for p in params]


# ---------------------------------------------------------------- worked values


def test_matmul_row_by_column():
    out = ad.matmul(Value([[1.0, 2.0]]), Value([[3.0], [4.0]]))
    assert out.data.item() == 11.0


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(ad.softmax(Value(np.zeros(3))).data, np.full(3, 1 / 3), atol=1e-15)


def test_exp_at_zero():
    (g,) = grad_of(lambda x: ad.sum(ad.exp(x)), [0.0])
    assert ad.exp(Value(0.0)).item() == 1.0
    assert g[0] == 1.0


def test_square_gradient():
    (g,) = grad_of(lambda x: x * x, 3.0)
    assert float(g) == 6.0


def test_softmax_first_component_gradient():
    (g,) = grad_of(lambda x: ad.softmax(x)[0], [0.0, 0.0])
    np.testing.assert_allclose(g, [0.25, -0.25], atol=1e-15)


def test_sum_exp_gradient_at_zero():
    (g,) = grad_of(lambda m: ad.sum(ad.exp(m)), [0.0, 0.0])
    np.testing.assert_array_equal(g, [1.0, 1.0])


def test_fd_check_on_quadratic_is_exact():
    assert ad.finite_difference_check(lambda x: ad.sum(x * x), [np.array([3.0])], step=1e-4) <= 1e-6


def test_fd_check_on_constant_is_zero():
    assert ad.finite_difference_check(lambda x: ad.sum(ad.scale(x, 0.0)), [np.array([1.0, 2.0])]) == 0.0


def test_fd_check_two_layer_net_with_100_params():
    rng = np.random.default_rng(0)
    w1, b1, w2, b2 = rng.normal(size=(8, 10)), rng.normal(size=10), rng.normal(size=(10, 1)), rng.normal(size=1)
    assert w1.size + b1.size + w2.size + b2.size >= 100
    x = rng.normal(size=(5, 8))

    def net(w1, b1, w2, b2):
        return ad.mean(ad.linear(ad.tanh(ad.linear(Value(x), w1, b1)), w2, b2))

    assert ad.finite_difference_check(net, [w1, b1, w2, b2]) <= FD_TOL


# ---------------------------------------------------------------- tape semantics


def test_tape_records_in_topological_order():
    x = Value(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.exp(x)
        z = ad.sum(ad.mul(y, x))
        seen = set()
        for node in tape.nodes:
            assert all(p in seen or not p.parents for p in node.parents)
            seen.add(node)
        tape.backward(z)


def test_tape_is_single_use():
    x = Value(2.0, requires_grad=True)
    with Tape() as tape:
        y = x * x
        tape.backward(y)
        with pytest.raises(UsageError):
            tape.backward(y)
    assert tape.nodes == []


def test_non_scalar_root_rejected():
    x = Value(np.ones(2), requires_grad=True)
    with Tape() as tape, pytest.raises(UsageError):
        tape.backward(ad.exp(x))


def test_backward_without_tape():
    with pytest.raises(UsageError):
        ad.backward(Value(1.0))


def test_no_grad_records_nothing():
    x = Value(1.0, requires_grad=True)
    with Tape() as tape:
        with ad.no_grad():
            y = ad.exp(x)
        assert tape.nodes == [] and not y.requires_grad


def test_frozen_blocks_gradient_and_restores():
    w = Value(np.ones(2), requires_grad=True)
    with Tape() as tape, ad.frozen([w]):
        x = Value(np.ones(2), requires_grad=True)
        tape.backward(ad.sum(ad.mul(w, x)))
    assert not w._touched and w.requires_grad


@pytest.mark.parametrize("k", [1, 2, 5])
def test_fan_out_multiplies_gradient(k):
    x = Value(np.array([0.3, -1.2]), requires_grad=True)
    with Tape() as tape:
        y = ad.tanh(x)
        total = y
        for _ in range(k - 1):
            total = ad.add(total, y)
        tape.backward(ad.sum(total))
    single = 1 - np.tanh(x.data) ** 2
    np.testing.assert_allclose(x.grad, k * single, rtol=1e-14)


# ---------------------------------------------------------------- errors


def test_shape_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        ad.add(Value(np.ones(3)), Value(np.ones(2)))
    with pytest.raises(ConfigError):
        ad.matmul(Value(np.ones((2, 3))), Value(np.ones((2, 3))))


def test_log_of_nonpositive_is_domain_error():
    with pytest.raises(NumericDomainError):
        ad.log(Value([1.0, 0.0]))


def test_kl_with_zero_q_is_domain_error():
    with pytest.raises(NumericDomainError):
        ad.kl_divergence(Value([0.5, 0.5]), Value([1.0, 0.0]))


def test_clamped_kl_is_finite():
    q = ad.clamp_min(Value([1.0, 0.0]))
    assert np.isfinite(ad.kl_divergence(Value([0.5, 0.5]), q).item())


# ---------------------------------------------------------------- properties


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_a_distribution(xs):
    p = ad.softmax(Value(xs)).data
    assert (p >= 0).all()
    assert abs(p.sum() - 1) <= 1e-9


def _primitives(rng):
    """(name, function of Values, input arrays) for every differentiable primitive."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    p = rng.dirichlet(np.ones(5), size=2)
    q = rng.dirichlet(np.ones(5), size=2)
    w = rng.normal(size=(4, 2))
    bias = rng.normal(size=4)
    t = rng.integers(0, 4, size=3)
    cond = rng.random((3, 4)) > 0.5
    idx = rng.integers(0, 5, size=6)
    table = rng.normal(size=(5, 4))
    weights = rng.normal(size=(3, 4))

    def wsum(x):
        # random projection so every coordinate gets a distinct, non-trivial gradient
        return ad.sum(ad.mul(x, weights[..., : x.shape[-1]] if x.ndim == 2 and x.shape[0] == 3 else 1.0))

    return [
        ("add_broadcast", lambda x, y: wsum(ad.add(x, y)), [a, bias]),
        ("sub", lambda x, y: wsum(ad.sub(x, y)), [a, b]),
        ("mul", lambda x, y: wsum(ad.mul(x, y)), [a, b]),
        ("div", lambda x, y: wsum(ad.div(x, y)), [a, pos]),
        ("scale", lambda x: wsum(ad.scale(x, -1.7)), [a]),
        ("exp", lambda x: wsum(ad.exp(x)), [a]),
        ("log", lambda x: wsum(ad.log(x)), [pos]),
        ("tanh", lambda x: wsum(ad.tanh(x)), [a]),
        ("sigmoid", lambda x: wsum(ad.sigmoid(x)), [a]),
        ("softplus", lambda x: wsum(ad.softplus(x)), [a]),
        ("gelu", lambda x: wsum(ad.gelu(x)), [a]),
        ("where", lambda x, y: wsum(ad.where(cond, x, y)), [a, b]),
        ("sum_axis", lambda x: ad.sum(ad.mul(ad.sum(x, axis=0), bias)), [a]),
        ("mean", lambda x: ad.sum(ad.mul(ad.mean(x, axis=-1), bias[:3])), [a]),
        ("reshape", lambda x: ad.sum(ad.mul(ad.reshape(x, (4, 3)), weights.T)), [a]),
        ("transpose", lambda x: ad.sum(ad.mul(ad.transpose(x, (1, 0)), weights.T)), [a]),
        ("getitem", lambda x: ad.sum(ad.mul(x[1:, 2], bias[:2])), [a]),
        ("getitem_fancy", lambda x: ad.sum(ad.mul(x[np.arange(3), t], bias[:3])), [a]),
        ("embedding", lambda tb: ad.sum(ad.mul(ad.embedding(tb, idx), rng_fixed(idx.size, 4))), [table]),
        ("concat", lambda x, y: ad.sum(ad.mul(ad.concat([x, y], axis=-1), rng_fixed(3, 8))), [a, b]),
        ("matmul", lambda x, y: ad.sum(ad.mul(ad.matmul(x, y), rng_fixed(3, 2))), [a, w]),
        ("batched_matmul", lambda x, y: ad.sum(ad.matmul(x, y)), [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 3))]),
        ("l2_norm", lambda x: ad.sum(ad.mul(ad.l2_norm(x), bias[:3])), [a]),
        ("softmax", lambda x: wsum(ad.softmax(x)), [a]),
        ("log_softmax", lambda x: wsum(ad.log_softmax(x)), [a]),
        ("cross_entropy", lambda x: ad.cross_entropy(x, t), [a]),
        ("kl_both", lambda x, y: ad.sum(ad.kl_divergence(x, y)), [p, q]),
        ("layer_norm", lambda x, g, be: wsum(ad.layer_norm(x, g, be)), [a, rng.normal(size=4), rng.normal(size=4)]),
        ("masked_bias", lambda x: wsum(ad.softmax(ad.add(x, np.where(cond, 0.0, -3.0)))), [a]),
    ]


def rng_fixed(*shape):
    return np.random.default_rng(12345).normal(size=shape)


PRIMITIVE_NAMES = [name for name, _, _ in _primitives(np.random.default_rng(0))]


@pytest.mark.parametrize("name", PRIMITIVE_NAMES)
def test_primitive_gradients_over_100_seeds(name):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        fn, arrays = next((f, arr) for n, f, arr in _primitives(rng) if n == name)
        worst = max(worst, ad.finite_difference_check(fn, arrays))
    assert worst <= FD_TOL, f"{name}: max relative error {worst:.2e}"


@given(st.floats(0.1, 10.0), st.floats(-3, 3))
def test_division_gradient_matches_closed_form(y, x):
    gx, gy = grad_of(lambda a, b: ad.div(a, b), x, y)
    assert gx == pytest.approx(1 / y)
    assert gy == pytest.approx(-x / y**2, abs=1e-12)
