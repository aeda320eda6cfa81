import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfunlearn.errors import DivergenceError, PreconditionError
from hfunlearn.numkit import (
    MASK64,
    Rng,
    axpy,
    fnv1a64,
    gaussian_vector,
    hex_digest,
    l2_norm,
    min_eigenvalue,
    pearson,
    power_iteration,
    spearman,
    splitmix64,
)


def test_splitmix64_reference_vector():
    x, out = 1234567, []
    for _ in range(5):
        x, z = splitmix64(x)
        out.append(z)
    assert out == [
        6457827717110365317,
        3203168211198807973,
        9817491932198370423,
        4593380528125082431,
        16408922859458223821,
    ]


def test_xoshiro_reference_vector():
    rng = Rng.from_state([1, 2, 3, 4])
    got = [rng.next_u64() for _ in range(6)]
    assert got == [11520, 0, 1509978240, 1215971899390074240, 1216172134540287360, 607988272756665600]


def test_bulk_fill_matches_scalar_path():
    a, b = Rng(99), Rng(99)
    bulk = a.u64_array(1000)
    scalar = [b.next_u64() for _ in range(1000)]
    assert [int(v) for v in bulk] == scalar
    assert a.state == b.state


def test_reproducible_first_10k_outputs():
    assert np.array_equal(Rng(2024).u64_array(10_000), Rng(2024).u64_array(10_000))
    assert not np.array_equal(Rng(2024).u64_array(16), Rng(2025).u64_array(16))


def test_jump_polynomial_is_linear_in_the_state():
    # a polynomial with a single set bit k advances the generator by exactly k steps
    for k in (0, 1, 5, 63):
        a, b = Rng(7), Rng(7)
        a._apply_jump((1 << k, 0, 0, 0))
        for _ in range(k):
            b.next_u64()
        assert a.state == b.state


def test_streams_and_splits_are_distinct_and_deterministic():
    base = Rng(3)
    firsts = {base.stream(i).next_u64() for i in range(4)} | {base.split(i).next_u64() for i in range(1, 4)}
    assert len(firsts) == 7
    assert Rng(3).stream(2).state == Rng(3).stream(2).state
    assert base.state == Rng(3).state  # deriving children leaves the parent alone


def test_integers_unbiased_range_and_permutation():
    rng = Rng(11)
    draws = [rng.integers(6) for _ in range(6000)]
    assert set(draws) == set(range(6))
    counts = np.bincount(draws)
    assert counts.min() > 850
    perm = Rng(11).permutation(50)
    assert sorted(perm.tolist()) == list(range(50))
    with pytest.raises(PreconditionError):
        rng.integers(0)


def test_uniform_in_unit_interval():
    u = Rng(5).uniform_array(10_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01


def test_fnv1a64_known_values():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert hex_digest(fnv1a64(b"a")) == "af63dc4c8601ec8c"
    assert fnv1a64(np.frombuffer(b"foobar", dtype=np.uint8)) == 0x85944171F73967E8


def test_axpy_examples():
    x, y = np.array([1.0, 2.0]), np.array([3.0, 4.0])
    assert np.array_equal(axpy(0.0, x, y), y)
    assert np.array_equal(axpy(1.0, x, y), [4.0, 6.0])
    assert np.array_equal(axpy(-2.0, np.array([1.0, 0.0, 3.0]), np.full(3, 5.0)), [3.0, 5.0, -1.0])
    with pytest.raises(PreconditionError):
        axpy(1.0, x, np.zeros(3))
    with pytest.raises(DivergenceError):
        axpy(np.inf, x, y)


def test_l2_norm_examples():
    assert l2_norm(np.zeros(3)) == 0.0
    assert l2_norm(np.array([3.0, 4.0])) == 5.0
    assert l2_norm(np.ones(4)) == 2.0


def test_gaussian_vector_zero_sigma_and_errors():
    rng = Rng(1)
    before = rng.state
    assert np.array_equal(gaussian_vector(rng, 0.0, 5), np.zeros(5))
    assert rng.state == before
    with pytest.raises(PreconditionError):
        gaussian_vector(rng, -1.0, 3)


@pytest.mark.parametrize("sigma", [1.0, 0.377652])
def test_gaussian_vector_sample_std(sigma):
    z = gaussian_vector(Rng(7), sigma, 100_000)
    assert abs(z.std() / sigma - 1) < 0.02
    assert abs(z.mean()) < 5 * sigma / math.sqrt(len(z))


def test_gaussian_scaling_property():
    assert np.allclose(gaussian_vector(Rng(4), 2.0, 1000), 2.0 * gaussian_vector(Rng(4), 1.0, 1000), rtol=0, atol=0)


def test_normal_odd_length_is_prefix_of_even():
    assert np.array_equal(Rng(8).normal(7), Rng(8).normal(8)[:7])


def _matop(A):
    return lambda v: A @ v


def test_power_iteration_examples():
    tol = 1e-10
    res = power_iteration(_matop(np.diag([3.0, 1.0, 0.5])), 3, tol=tol)
    assert res.converged and abs(res.value - 3.0) < 1e-8
    res = power_iteration(_matop(np.array([[2.0, 1.0], [1.0, 2.0]])), 2, tol=tol)
    assert abs(res.value - 3.0) < 1e-8
    res = power_iteration(lambda v: v, 4)
    assert res.value == pytest.approx(1.0, abs=1e-12)


def test_power_iteration_reports_nonconvergence():
    # rotation-like operator with two dominant eigenvalues of opposite sign never settles
    res = power_iteration(_matop(np.diag([1.0, -1.0])), 2, max_iters=20)
    assert res.iterations <= 20


def test_min_eigenvalue_examples():
    res = min_eigenvalue(_matop(np.diag([3.0, 1.0, 0.5])), 3.0, 3, tol=1e-12)
    assert abs(res.value - 0.5) < 1e-8
    assert min_eigenvalue(lambda v: v, 1.0, 3).value == pytest.approx(1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_power_iteration_matches_dense_eigensolve(seed):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(5, 5))
    A = B @ B.T + np.eye(5)  # SPD keeps the dominant eigenvalue unique and positive
    ev = np.linalg.eigvalsh(A)
    if ev[-1] - ev[-2] < 1e-2 * ev[-1]:
        return
    res = power_iteration(_matop(A), 5, max_iters=20_000, tol=1e-13)
    assert abs(res.value - ev[-1]) <= 1e-6 * max(1.0, ev[-1])


def test_pearson_examples():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    assert pearson([1, 1, 1], [1, 2, 3]) is None
    with pytest.raises(PreconditionError):
        pearson([1], [2])


def test_spearman_examples():
    assert spearman([10, 20, 30], [1, 5, 9]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [9, 4, 1]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    # ties get average ranks
    assert spearman([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(pearson([1, 2.5, 2.5, 4], [1, 2, 3, 4]))


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=2, max_size=30))
def test_correlations_bounded(pairs):
    xs, ys = zip(*pairs)
    for f in (pearson, spearman):
        r = f(xs, ys)
        assert r is None or -1.0 <= r <= 1.0


def test_mask_constant():
    assert MASK64 == 2**64 - 1
