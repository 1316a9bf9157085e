import itertools
import math

import numpy as np
import pytest
import scipy.integrate
from hypothesis import given, strategies as st

from homodyne_qed.conditional import (
    block_trace_ratio, block_traces, coefficient_table, conditional_state, count_superop,
    eigenvalue_ratio, eigenvalue_weights, exp_poly_integral, ordered_exponential_integral,
    ratio_parameter, real_beta_invariance, smooth_on_steady, total_weight)
from homodyne_qed.dynamics import build_rho_ss
from homodyne_qed.errors import CostError, DomainError, ZeroProbability
from homodyne_qed.hilbert import SystemParams, check_density_matrix, trace_distance
from homodyne_qed.jumps import dyson_oracle

from conftest import random_density


def low_state(p, rng, levels=6):
    return random_density(p.dim, 3, rng, levels=levels, n_fock=p.n_fock)


@given(st.floats(1e-6, 8.0), st.floats(0.3, 3.0))
def test_coefficient_table_quadrature(dt, gamma):
    T = coefficient_table(dt, gamma)
    c = lambda t: np.array([math.exp(-gamma * t / 2), -math.expm1(-gamma * t / 2), 1.0])  # noqa: E731
    for i, j in [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2)]:
        ref = scipy.integrate.quad(lambda t: c(t)[i] * c(t)[j], 0, dt, epsabs=0, epsrel=1e-13)[0]
        assert T[i, j] == pytest.approx(ref, rel=1e-10, abs=1e-300)
    assert np.array_equal(T, T.T)


def test_exp_poly_integral_branches_agree():
    c = [0.3, -1.2, 0.9]
    for h in (0.4999999, 0.5):
        ref = 0.3 * h + (-1.2) * -math.expm1(-h) + 0.9 * -math.expm1(-2 * h) / 2
        assert exp_poly_integral(c, h) == pytest.approx(ref, rel=1e-13)


@given(st.lists(st.floats(0.0, 3.0), min_size=1, max_size=3), st.floats(0.01, 3.0))
def test_ordered_exponential_integral(rates, T):
    m = len(rates)
    if m == 1:
        r = rates[0]
        ref = T if r == 0 else -math.expm1(-r * T) / r
    else:
        # nested quadrature over the ordered simplex
        def inner(p, top):
            if p < 0:
                return 1.0
            return scipy.integrate.quad(
                lambda t: math.exp(-rates[p] * t) * inner(p - 1, t), 0, top, epsrel=1e-12)[0]
        if m == 3:
            return  # too slow by nested quad
        ref = inner(m - 1, T)
    assert ordered_exponential_integral(rates, T) == pytest.approx(ref, rel=1e-9)


@pytest.fixture
def p():
    return SystemParams(g=1.0, E=0.5, beta=0.3 + 0.4j, n_fock=40)


@pytest.mark.parametrize("labels", [(), (1,), (2,), (1, 2), (2, 1), (1, 1), (2, 1, 2)])
def test_ordered_engine_matches_dyson(p, labels, rng):
    rho0 = low_state(p, rng)
    ref = dyson_oracle(rho0, labels, 0.6, 12, p, use_exact=False)
    res = conditional_state(rho0, labels, 0.6, p, ordering="ordered")
    assert res.weight == pytest.approx(ref.weight, rel=1e-8)
    assert trace_distance(res.rho_c, ref.rho_c) < 1e-8


@pytest.mark.parametrize("labels", [(1,), (2, 2), (1, 1, 1)])
def test_symmetric_engine_exact_for_equal_labels(p, labels, rng):
    rho0 = low_state(p, rng)
    ref = dyson_oracle(rho0, labels, 0.6, 12, p, use_exact=False)
    res = conditional_state(rho0, labels, 0.6, p)
    assert res.weight == pytest.approx(ref.weight, rel=1e-8)
    assert trace_distance(res.rho_c, ref.rho_c) < 1e-8


def test_symmetric_engine_averages_orders(p, rng):
    rho0 = low_state(p, rng)
    labels = (1, 2, 2)
    sym = conditional_state(rho0, labels, 0.6, p)
    perms = list(itertools.permutations(labels))
    avg = sum(conditional_state(rho0, q, 0.6, p, ordering="ordered").weight
              * conditional_state(rho0, q, 0.6, p, ordering="ordered").rho_c for q in perms)
    avg /= len(perms)
    assert np.allclose(sym.weight * sym.rho_c, avg, atol=1e-12)


def test_ordered_budget(p, rng):
    with pytest.raises(CostError):
        conditional_state(low_state(p, rng), (1,) * 8, 0.1, p, ordering="ordered")


def test_argument_errors(p, rng):
    rho0 = low_state(p, rng)
    with pytest.raises(ValueError):
        conditional_state(rho0, (3,), 0.1, p)
    with pytest.raises(ValueError):
        conditional_state(rho0, (1,), 0.1, p, ordering="reverse")
    with pytest.raises(ValueError):
        conditional_state(rho0, (1,), 0.1, p, precision="quad")
    with pytest.raises(ZeroProbability):
        conditional_state(rho0, (1,), 0.0, p)
    with pytest.raises(ValueError):
        count_superop(1, 0.0, p)


def test_conditional_state_is_density(p, rng):
    res = conditional_state(low_state(p, rng), (2, 1), 0.4, p)
    check_density_matrix(res.rho_c, 1e-10, p.dim)
    assert res.log_weight == pytest.approx(math.log(res.weight))
    assert res.record.labels == (2, 1)


def test_total_weight_complete():
    q = SystemParams(g=1.0, E=0.5, beta=0.5, n_fock=30)
    assert total_weight(build_rho_ss(q), 0.1, q, 3) == pytest.approx(1.0, abs=1e-4)


def test_smooth_on_steady_double_and_extended():
    q = SystemParams(g=1.0, E=0.5, n_fock=40)
    for prec in ("double", "extended"):
        chk = smooth_on_steady(0.5, q, precision=prec)
        assert chk.residual < 1e-9
        assert chk.scalar_residual < 1e-14
    with pytest.raises(ValueError):
        smooth_on_steady(0.5, q, precision="quad")


@pytest.mark.parametrize("labels", [(1,), (2, 1), (1, 1, 2)])
def test_real_beta_invariance_small(labels):
    q = SystemParams(g=1.0, E=0.5, beta=0.7, n_fock=40)
    chk = real_beta_invariance(labels, 0.5, q, precision="double")
    assert chk.distance < 1e-9
    assert chk.scalar_error < 1e-9
    with pytest.raises(DomainError):
        real_beta_invariance(labels, 0.5, q.replace(beta=0.7j))


def test_eigenvalue_weights():
    q = SystemParams(g=1.0, E=0.5, beta=0.5j, n_fock=40)
    assert eigenvalue_weights((), 0.3, q) == (0.5, 0.5)
    l1, l2 = eigenvalue_weights((1, 2, 2), 0.3, q, "corrected")
    assert l1 + l2 == pytest.approx(1.0)
    assert ratio_parameter(q) == pytest.approx((1 + 1 + 0.25) / (2 * 0.5))
    with pytest.raises(DomainError):
        ratio_parameter(q.replace(beta=0.5))
    with pytest.raises(ValueError):
        eigenvalue_ratio((1,), 0.3, q, form="other")


@pytest.mark.parametrize("labels", [(1,), (2,), (1, 2), (2, 2, 1)])
def test_corrected_ratio_matches_blocks(labels):
    q = SystemParams(g=1.0, E=0.5, beta=0.5j, n_fock=40)
    res = conditional_state(build_rho_ss(q), labels, 0.7, q)
    assert block_trace_ratio(res.rho_c, q.n_fock) == pytest.approx(
        eigenvalue_ratio(labels, 0.7, q, "corrected"), rel=1e-10)
    assert sum(block_traces(res.rho_c, q.n_fock)) == pytest.approx(1.0)


def test_printed_ratio_is_small_dt_limit():
    q = SystemParams(g=1.0, E=0.5, beta=0.5j, n_fock=40)
    for labels in [(1,), (2, 1)]:
        a = eigenvalue_ratio(labels, 1e-4, q, "printed")
        b = eigenvalue_ratio(labels, 1e-4, q, "corrected")
        assert a == pytest.approx(b, rel=1e-3)
