import numpy as np
import pytest
from flint import acb, ctx
from hypothesis import given, strategies as st

from homodyne_qed.conditional import (
    block_trace_ratio, coefficient_table, conditional_state, count_superop, eigenvalue_ratio)
from homodyne_qed.disentangle import build_N
from homodyne_qed.dynamics import build_rho_ss
from homodyne_qed.errors import TruncationError
from homodyne_qed.extended import (
    InputPrecisionError, LowRankState, coherent_block, count_step, lower, propagate, steady_low_rank)
from homodyne_qed.hilbert import SystemParams, coherent_amplitudes, trace_distance

from conftest import random_density


@pytest.fixture
def p():
    return SystemParams(g=1.0, E=0.5, beta=0.3 + 0.4j, n_fock=40)


def test_coherent_block_matches_double():
    v = np.array([complex(x) for x in coherent_block(1.2 - 0.5j, 30)])
    ref = coherent_amplitudes(1.2 - 0.5j, 30)
    assert np.allclose(v, ref / np.linalg.norm(ref), atol=1e-15)


def test_steady_low_rank_density(p):
    lr = steady_low_rank(p)
    assert np.allclose(lr.to_dm(), build_rho_ss(p), atol=1e-14)
    assert float(lr.trace().mid()) == pytest.approx(1.0)


def test_from_density_roundtrip(p, rng):
    rho = random_density(p.dim, 3, rng, levels=8, n_fock=p.n_fock)
    lr = LowRankState.from_density(rho, p)
    assert len(lr.factors) == 3
    assert np.allclose(lr.to_dm(), rho, atol=1e-13)


def test_lower_is_annihilator():
    v = [complex(x) for x in coherent_amplitudes(0.7, 12)]
    out = [complex(x) for x in lower([acb(z.real, z.imag) for z in v])]
    a = np.diag(np.sqrt(np.arange(1, 12.0)), 1)
    assert np.allclose(out, a @ np.array(v), atol=1e-15)


@given(st.floats(0.0, 2.0))
def test_propagate_matches_dense(t):
    q = SystemParams(g=1.0, E=0.5, beta=0.2j, n_fock=40)
    rho = random_density(q.dim, 2, np.random.default_rng(5), levels=6, n_fock=q.n_fock)
    out = propagate(LowRankState.from_density(rho, q), t, q).to_dm()
    N = build_N(t, q, guard=False)
    assert np.allclose(out, N @ rho @ N.conj().T, atol=1e-13)


def test_count_step_matches_superop(p, rng):
    rho = random_density(p.dim, 2, rng, levels=8, n_fock=p.n_fock)
    table = coefficient_table(0.4, p.gamma)
    for k in (1, 2):
        with ctx.workprec(128):
            out = count_step(LowRankState.from_density(rho, p), k, table, p).to_dm()
        ref = count_superop(k, 0.4, p)(rho)
        assert np.allclose(out, ref, atol=1e-13)


@pytest.mark.parametrize("labels", [(), (1,), (2, 1), (1, 2, 2)])
def test_extended_matches_double_at_small_amplitude(p, labels, rng):
    rho = random_density(p.dim, 2, rng, levels=6, n_fock=p.n_fock)
    a = conditional_state(rho, labels, 0.5, p)
    b = conditional_state(rho, labels, 0.5, p, precision="extended")
    assert trace_distance(a.rho_c, b.rho_c) < 1e-12
    assert b.log_weight == pytest.approx(a.log_weight, rel=1e-12, abs=1e-12)


def test_tail_of_input_guarded():
    # N shrinks the bulk of |alpha> by e^{-gamma |alpha|^2 dt / 2} but
    # amplifies its top levels, so 300 levels suffice at dt=1 and not at dt=3
    for n, dt, ok in ((300, 1.0, True), (300, 3.0, False), (400, 3.0, True)):
        q = SystemParams(g=10.0, E=3.0, beta=0.5j, n_fock=n)
        if ok:
            res = conditional_state(steady_low_rank(q), (1, 2), dt, q, precision="extended")
            assert block_trace_ratio(res.rho_c, n) == pytest.approx(
                eigenvalue_ratio((1, 2), dt, q, form="corrected"), rel=1e-10)
        else:
            with pytest.raises(TruncationError):
                conditional_state(steady_low_rank(q), (1, 2), dt, q, precision="extended")


def test_extended_requires_symmetric(p):
    with pytest.raises(ValueError):
        conditional_state(steady_low_rank(p), (1,), 0.5, p, ordering="ordered",
                          precision="extended")


def test_precision_independence():
    # the result must not depend on the bits the input was built with
    q = SystemParams(g=10.0, E=3.0, beta=0.7, n_fock=300)
    a = propagate(steady_low_rank(q, 1024), 1.0, q)
    b = propagate(steady_low_rank(q, 2048), 1.0, q)
    assert np.allclose(a.to_dm(), b.to_dm(), atol=1e-14)


def test_steady_state_survives_strong_damping():
    # gamma |alpha|^2 t = 136: the dense double-precision sandwich is noise here
    q = SystemParams(g=10.0, E=3.0, n_fock=300)
    with pytest.raises(InputPrecisionError):
        propagate(steady_low_rank(q, 256), 1.0, q)
    out = propagate(steady_low_rank(q, 1024), 1.0, q)
    tr = out.trace()
    rho = out.scaled(1 / tr.sqrt()).to_dm()
    assert np.linalg.norm(rho - build_rho_ss(q)) < 1e-9
