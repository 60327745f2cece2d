import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mmdt import autodiff as ad
from mmdt.autodiff import Tape, Tensor, backward, grad_check
from mmdt.errors import NumericalError, ParameterError, ShapeError, UsageError
from mmdt.flow import joint_loss, make_flow_sample
from mmdt.harness import oracles as O
from mmdt.harness.verify import primitive_grad_error, primitive_probes, rng_for

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    out = ad.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_row_times_column():
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
    assert np.abs(ad.matmul(Tensor(a), Tensor(b)).data - O.matmul_loops(a, b)).max() <= 1e-12


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_matmul_loop_oracle_property(n, k, m, seed):
    r = rng_for(seed)
    a, b = r.standard_normal((n, k)), r.standard_normal((k, m))
    assert np.abs(ad.matmul(Tensor(a), Tensor(b)).data - O.matmul_loops(a, b)).max() <= 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_batched_matmul_gradient(rng):
    b = rng.standard_normal((2, 4, 3))
    w = rng.standard_normal((2, 5, 3))
    assert grad_check(lambda x: ad.tsum(ad.matmul(x, b) * w), Tensor(rng.standard_normal((2, 5, 4)))) < 1e-8


# -- softmax -----------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_logits_stable():
    p = ad.softmax_lastdim(Tensor([1000.0, 0.0])).data
    assert abs(p[0] - 1) <= 1e-12 and abs(p[1]) <= 1e-12


def test_softmax_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    ref = np.exp(x) / np.exp(x).sum()
    assert np.abs(ad.softmax_lastdim(Tensor(x)).data - ref).max() <= 1e-12


def test_softmax_mask_zeroes_excluded_entries():
    p = ad.softmax_lastdim(Tensor([[1.0, 5.0, 2.0]]), np.array([[True, False, True]])).data
    assert p[0, 1] == 0.0
    assert abs(p.sum() - 1) <= 1e-15


def test_softmax_fully_masked_row_rejected():
    with pytest.raises(UsageError):
        ad.softmax_lastdim(Tensor([[1.0, 2.0]]), np.array([[False, False]]))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_are_distributions(x):
    p = ad.softmax_lastdim(Tensor(x)).data
    assert np.all(p >= 0)
    assert np.abs(p.sum(-1) - 1).max() <= 1e-12


# -- layer norm --------------------------------------------------------------

def test_layer_norm_constant_row_collapses_to_bias():
    out = ad.layer_norm(Tensor([[5.0, 5.0, 5.0]]), np.ones(3), np.zeros(3)).data
    np.testing.assert_array_equal(out, [[0.0, 0.0, 0.0]])


def test_layer_norm_two_points():
    out = ad.layer_norm(Tensor([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=1e-300).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-15)


def test_layer_norm_mean_var_oracle(rng):
    x, g, b = rng.standard_normal((1, 7)), rng.standard_normal(7), rng.standard_normal(7)
    ref = (x - x.mean()) / np.sqrt(x.var() + 1e-6) * g + b
    assert np.abs(ad.layer_norm(Tensor(x), g, b).data - ref).max() <= 1e-10


@pytest.mark.parametrize("eps", [0.0, -1e-5])
def test_layer_norm_rejects_nonpositive_eps(eps):
    with pytest.raises(ParameterError):
        ad.layer_norm(Tensor([[1.0, 2.0]]), eps=eps)


# -- backward ----------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(x)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(x * x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_accumulates_over_reuse():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(x * x + x * 3.0)
    tape.backward(loss)
    assert x.grad.tolist() == [7.0]


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(UsageError):
        tape.backward(y)


def test_backward_rejects_loss_from_another_tape():
    x = Tensor([1.0], requires_grad=True)
    with Tape():
        loss = ad.tsum(x)
    with Tape() as other:
        ad.tsum(x)
    with pytest.raises(UsageError):
        other.backward(loss)


def test_nothing_recorded_without_tape():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert y._node is None


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_output_raises():
    with pytest.raises(NumericalError):
        ad.mul(Tensor([1e300]), Tensor([1e300]))


# -- grad_check --------------------------------------------------------------

def test_grad_check_on_sum(rng):
    assert grad_check(ad.tsum, Tensor(rng.standard_normal((3, 4)))) < 1e-10


def test_grad_check_constant_softmax_sum(rng):
    x = Tensor(rng.standard_normal(5))
    with Tape() as tape:
        x.requires_grad = True
        y = ad.tsum(ad.softmax_lastdim(x))
    tape.backward(y)
    assert np.abs(x.grad).max() < 1e-12
    assert grad_check(lambda t: ad.tsum(ad.softmax_lastdim(t)), Tensor(x.data)) < 1e-8


def test_grad_check_flow_loss(rng):
    s = make_flow_sample(rng.standard_normal((2, 2, 2, 2)), rng.standard_normal((3, 2)), 0.4, rng)
    pa = Tensor(rng.standard_normal((3, 2)))
    assert grad_check(lambda p: joint_loss(p * p, pa, s), Tensor(rng.standard_normal((2, 2, 2, 2)))) < 1e-4


def test_grad_check_restores_input(rng):
    x = Tensor(rng.standard_normal(4))
    before = x.data.copy()
    grad_check(lambda t: ad.tsum(t * t), x)
    np.testing.assert_array_equal(x.data, before)


def test_grad_check_rejects_bad_step():
    with pytest.raises(ParameterError):
        grad_check(ad.tsum, Tensor([1.0]), h=0.5)


@pytest.mark.filterwarnings("ignore:overflow")
def test_grad_check_surfaces_non_finite():
    with pytest.raises(NumericalError):
        grad_check(lambda t: ad.tsum(t * 1e306 * 1e306), Tensor([1.0]))


@pytest.mark.parametrize("name", sorted(ad.PRIMITIVES))
def test_every_primitive_grad_checks_over_20_seeds(name):
    assert name in primitive_probes(rng_for(0))
    assert max(primitive_grad_error(name, s) for s in range(20)) < 1e-4


def test_tape_replay_bit_identical():
    from mmdt.harness.verify import _tape_run
    a, b = _tape_run(11), _tape_run(11)
    assert len(a) == len(b)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_split_gradient_routes_to_slices(rng):
    x = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    with Tape() as tape:
        a, b = ad.split(x, [2, 3], axis=1)
        loss = ad.tsum(a) + ad.tsum(b * 2.0)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [[1, 1, 2, 2, 2]] * 2)


def test_index_gradient_scatter_adds():
    x = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(ad.index(x, np.array([0, 0, 2])))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])
