import numpy as np
import pytest
from hypothesis import given, strategies as st

from fcald.elliptic import harmonic_extension
from fcald.errors import SmallnessError, SolverError
from fcald.forward import (ForwardOptions, default_gate, expansion_check, linearized_solve, pde_residual,
                           picard_solve, solve_semilinear)
from fcald.grid import boundary_index, build_grid
from fcald.nonlinearity import NonlinearitySpec, PowerTerm

from conftest import gaussian_field


@pytest.fixture(scope="module")
def setup():
    g = build_grid((0, 0, 1, 1), 33)
    b = boundary_index(g)
    q = gaussian_field(g)
    return g, b, q, np.cos(np.pi * b.s)


def test_empty_spec_is_harmonic_extension(setup):
    g, b, _, f = setup
    sol = solve_semilinear(g, NonlinearitySpec.empty(), 0.01 * f)
    assert sol.iterations <= 1
    assert np.max(np.abs(sol.u - harmonic_extension(g, 0.01 * f))) < 1e-15


def test_zero_data_gives_zero(setup):
    g, b, q, _ = setup
    sol = solve_semilinear(g, NonlinearitySpec.single(q, 1.5), np.zeros(len(b)))
    assert np.all(sol.u == 0) and sol.method == "trivial"


@pytest.mark.parametrize("r", [1.5, 2.5, 3.5])
def test_gaussian_solution_against_picard_oracle(setup, r):
    g, b, q, f = setup
    spec = NonlinearitySpec.single(q, r)
    sol = solve_semilinear(g, spec, 0.01 * f)
    oracle = picard_solve(g, spec, 0.01 * f, tol=1e-13)
    assert sol.residual <= 1e-10
    assert np.max(np.abs(pde_residual(g, spec, sol.u))) <= 1e-10 * 0.01
    assert np.array_equal(sol.u[b.i, b.j], 0.01 * f)
    assert sol.smallness_ratio <= 1.2
    assert np.max(np.abs(oracle)) / 0.01 == pytest.approx(sol.smallness_ratio, rel=1e-6)
    # uniqueness probe: independent iterations land on the same small solution
    assert np.max(np.abs(sol.u - oracle)) <= 10 * 1e-10


def test_smallness_gate_refuses_large_data(setup):
    g, b, q, f = setup
    spec = NonlinearitySpec.single(q, 1.5)
    assert default_gate(spec) == pytest.approx(0.05)
    with pytest.raises(SmallnessError):
        solve_semilinear(g, spec, 0.06 * f)
    solve_semilinear(g, spec, 0.06 * f, ForwardOptions(smallness_gate=0.1))


def test_nonconvergence_raises_with_trace(setup):
    g, b, q, f = setup
    spec = NonlinearitySpec.single(q, 1.5)
    opts = ForwardOptions(newton_tol=1e-30, max_newton=2, picard_fallback=False)
    with pytest.raises(SolverError) as exc:
        solve_semilinear(g, spec, 0.01 * f, opts)
    assert exc.value.trace and exc.value.report["method"] == "newton"


def test_options_validation():
    for bad in ({"newton_tol": 0}, {"max_newton": 0}, {"damping": 0}, {"damping": 1.5}):
        with pytest.raises(ValueError):
            ForwardOptions(**bad)


def test_small_branch_stability_on_amplitude_ladder(setup):
    g, b, q, f = setup
    spec = NonlinearitySpec.single(q, 1.5)
    ratios = [solve_semilinear(g, spec, a * f).smallness_ratio for a in np.geomspace(1e-3, 0.05, 10)]
    # one stability constant serves the whole ladder, bounded above and below
    assert max(ratios) / min(ratios) <= 1.5
    assert 0.5 <= min(ratios) and max(ratios) <= 1.5


@given(st.floats(1e-3, 0.035), st.sampled_from([1.5, 2.5]))
def test_sign_equivariance(amp, r):
    g = build_grid((0, 0, 1, 1), 17)
    b = boundary_index(g)
    spec = NonlinearitySpec.single(gaussian_field(g), r)
    f = amp * np.cos(np.pi * b.s) + 0.3 * amp
    u_pos = solve_semilinear(g, spec, f).u
    u_neg = solve_semilinear(g, spec, -f).u
    assert np.max(np.abs(u_neg + u_pos)) <= 20 * 1e-10 * amp


def test_linearized_solve(setup):
    g, b, q, f = setup
    spec = NonlinearitySpec.single(q, 2.5)
    assert np.max(np.abs(linearized_solve(g, spec, np.zeros(g.shape), f) - harmonic_extension(g, f))) < 1e-12
    assert np.all(linearized_solve(g, spec, np.zeros(g.shape), np.zeros(len(b))) == 0)
    f0 = 0.02 * np.ones(len(b))
    base = solve_semilinear(g, spec, f0).u
    v = linearized_solve(g, spec, base, f)
    errs = []
    for tau in (1e-3, 5e-4):
        plus = solve_semilinear(g, spec, f0 + tau * f).u
        minus = solve_semilinear(g, spec, f0 - tau * f).u
        errs.append(np.max(np.abs((plus - minus) / (2 * tau) - v)))
    assert errs[0] < 1e-5
    # O(τ²): halving τ cuts the error roughly by four (until roundoff)
    assert errs[1] < 0.5 * errs[0] or errs[1] < 1e-8


def test_expansion_check_zero_coefficient():
    g = build_grid((0, 0, 1, 1), 17)
    b = boundary_index(g)
    spec = NonlinearitySpec.single(np.zeros(g.shape), 1.5)
    rep = expansion_check(g, spec, np.cos(np.pi * b.s), [2.0**-k for k in range(4, 8)])
    assert rep.passed and np.all(rep.remainder == 0)


def test_expansion_check_requires_single_fractional_term(setup):
    g, b, q, f = setup
    with pytest.raises(ValueError):
        expansion_check(g, NonlinearitySpec.single(q, 2.5), f, [0.01, 0.005])
    with pytest.raises(ValueError):
        expansion_check(g, NonlinearitySpec((PowerTerm(q, 1.5), PowerTerm(q, 1.7))), f, [0.01, 0.005])
