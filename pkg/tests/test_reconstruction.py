import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fcald.dnmap import DifferenceDN, LiveDN
from fcald.errors import ConfigError, ExtractionError, IllPosedError
from fcald.grid import boundary_index, build_grid, restrict_mask
from fcald.hol import EpsilonLadder
from fcald.nonlinearity import NonlinearitySpec
from fcald.reconstruction import (FourierEstimate, StageLedger, StageRecord, bspline_basis, cosine_basis,
                                  direct_modes, expansion_powers, mode_frequency, mode_set, recover_full,
                                  recover_mode, recover_modes, recover_partial, relative_l2, sine_pairs,
                                  stage_basis, staged_recovery, synthesize_modes, tikhonov, truncation_floor)

from conftest import gaussian_field

SMALL_LADDER = EpsilonLadder.geometric(0.02, 0.5, 5)


def fft_modes(grid, q, ns):
    """Trapezoid Fourier coefficients via a periodic fold and numpy's FFT."""
    n = grid.nx - 1
    w = np.ones(grid.shape)
    w[[0, -1], :] *= 0.5
    w[:, [0, -1]] *= 0.5
    fold = (w * q)[:n, :n].copy()
    fold[0, :] += (w * q)[n, :n]
    fold[:, 0] += (w * q)[:n, n]
    fold[0, 0] += (w * q)[n, n]
    F = np.fft.fft2(fold) * grid.h**2
    return {k: F[k[0] % n, k[1] % n] for k in ns}


def test_direct_modes_against_fft_oracle(grid33):
    q = gaussian_field(grid33, (0.4, 0.6), 0.2)
    ns = mode_set(4, "square")
    a, b = direct_modes(grid33, q, ns), fft_modes(grid33, q, ns)
    assert max(abs(a[k] - b[k]) for k in ns) < 1e-14


def test_synthesis_truncation_oracle(grid33):
    q = gaussian_field(grid33, sigma=0.15)
    ns = mode_set(4)
    modes = fft_modes(grid33, q, ns)
    X, Y = grid33.mesh()
    direct = sum((modes[k] * np.exp(2j * np.pi * (k[0] * X + k[1] * Y))).real for k in ns)
    assert np.allclose(synthesize_modes(grid33, modes), direct, atol=1e-13)
    assert truncation_floor(grid33, q, 4) == pytest.approx(relative_l2(grid33, direct, q), rel=1e-10)
    assert np.all(synthesize_modes(grid33, {k: 0j for k in ns}) == 0)


def test_relative_l2():
    g = build_grid((0, 0, 1, 1), 9)
    one = np.ones(g.shape)
    assert relative_l2(g, 1.1 * one, one) == pytest.approx(0.1)
    assert relative_l2(g, 0.5 * one, 0 * one) == pytest.approx(0.5)


def test_mode_frequency_matches_probe_convention():
    g = build_grid((0, 0, 2, 1), 17)
    assert np.allclose(mode_frequency(g, (1, 2)), [-np.pi / 2, -2 * np.pi])


@pytest.fixture(scope="module")
def modes65():
    g = build_grid((0, 0, 1, 1), 65)
    q = gaussian_field(g)
    ns = [n for n in mode_set(4) if n[0] >= 0]
    est = recover_modes(LiveDN(g, NonlinearitySpec.single(q, 1.5)), 1.5, ns)
    return est, direct_modes(g, q, ns)


def test_recovered_modes_match_quadrature(modes65):
    est, truth = modes65
    mean = abs(truth[(0, 0)])
    for n, t in truth.items():
        err = abs(est[n].value - t)
        assert err <= 0.02 * mean, n
        if abs(t) >= 0.1 * mean:
            assert err <= 0.02 * abs(t), n
        assert est[n].flagged == 0


@pytest.mark.xfail(strict=True, reason="modes below ~2% of the mean sit under the O(h^2) discretization floor")
def test_recovered_modes_within_ten_percent_each(modes65):
    est, truth = modes65
    assert all(abs(est[n].value - t) <= 0.1 * abs(t) for n, t in truth.items())


def test_recover_mode_examples(grid17):
    assert recover_mode(LiveDN(grid17, NonlinearitySpec.empty()), 1.5, (np.pi, 0), SMALL_LADDER) == 0
    # ∫ e^{2πix} = 0; the weak trace reaches the ladder floor, the stencil trace converges at O(h^1.5)
    weak = LiveDN(grid17, NonlinearitySpec.single(np.ones(grid17.shape), 1.5), kind="weak")
    assert abs(recover_mode(weak, 1.5, (np.pi, 0), SMALL_LADDER)) <= 1e-4
    errs = []
    for n in (17, 33):
        g = build_grid((0, 0, 1, 1), n)
        errs.append(abs(recover_mode(LiveDN(g, NonlinearitySpec.single(np.ones(g.shape), 1.5)), 1.5, (np.pi, 0),
                                     SMALL_LADDER)))
    assert errs[1] < 0.4 * errs[0] and errs[0] < 0.02
    one = LiveDN(grid17, NonlinearitySpec.single(np.ones(grid17.shape), 1.5))
    mean = recover_modes(weak, 1.5, [(0, 0)], SMALL_LADDER)[(0, 0)].value
    assert mean == pytest.approx(1.0, rel=0.02)
    with pytest.raises(ConfigError):
        recover_mode(one, 1.5, (1.0, 0.0))
    with pytest.raises(ConfigError):
        recover_modes(one, 2.5, [(1, 0)])


def test_mode_linearity(grid33):
    qa = gaussian_field(grid33, (0.4, 0.5), 0.15, 1.0)
    qb = gaussian_field(grid33, (0.6, 0.6), 0.2, 0.5)
    f = lambda q, xi: recover_mode(LiveDN(grid33, NonlinearitySpec.single(q, 1.5)), 1.5, xi, SMALL_LADDER)
    for n in [(1, 0), (1, 1)]:
        xi = mode_frequency(grid33, n)
        a, b, c = f(qa, xi), f(qb, xi), f(qa + qb, xi)
        assert abs(c - a - b) <= 0.02 * abs(c)


def test_full_recovery_small_grid_and_hermitian(grid17):
    q = gaussian_field(grid17, sigma=0.2)
    field, est = recover_full(LiveDN(grid17, NonlinearitySpec.single(q, 1.5)), 1.5, m=2, ladder=SMALL_LADDER)
    assert isinstance(est, FourierEstimate) and not est.low_confidence
    for n, c in est.modes.items():
        assert c == np.conj(est.modes[(-n[0], -n[1])])
    assert field.dtype == np.float64
    assert relative_l2(grid17, field, q) <= truncation_floor(grid17, q, 2) + 0.05


def test_gauge_consistency_under_refinement():
    fields = []
    for n in (17, 33):
        g = build_grid((0, 0, 1, 1), n)
        q = gaussian_field(g, sigma=0.2)
        fields.append((g, recover_full(LiveDN(g, NonlinearitySpec.single(q, 1.5)), 1.5, m=2,
                                       ladder=SMALL_LADDER)[0], q))
    (g1, a, q1), (_, b, _) = fields
    assert relative_l2(g1, b[::2, ::2], a) <= 0.15
    assert relative_l2(g1, b[::2, ::2], q1) <= relative_l2(g1, a, q1) + 1e-3


@pytest.fixture(scope="module")
def difference_access():
    g = build_grid((0, 0, 1, 1), 17)
    live = LiveDN(g, NonlinearitySpec.single(gaussian_field(g), 1.5))
    return g, DifferenceDN(live, live)


def test_zero_fidelity_full(difference_access):
    g, diff = difference_access
    field, est = recover_full(diff, 1.5, m=2, ladder=SMALL_LADDER)
    assert np.max(np.abs(field)) <= 1e-8


def test_zero_fidelity_partial():
    g = build_grid((0, 0, 1, 1), 17)
    mask = restrict_mask(boundary_index(g), "left")
    live = LiveDN(g, NonlinearitySpec.single(gaussian_field(g), 1.5), mask=mask)
    res = recover_partial(DifferenceDN(live, live), 1.5, d=16, n_pairs=20, ladder=SMALL_LADDER)
    assert np.max(np.abs(res.field)) <= 1e-8


def test_zero_fidelity_staged(difference_access):
    g, diff = difference_access
    ledger = staged_recovery(diff, [1.5, 2.5], m=1, ladder=EpsilonLadder.geometric(0.03, 0.6, 6))
    assert all(np.max(np.abs(f)) <= 1e-8 for f in ledger.fields())


def test_zero_potential_controls(grid17):
    live = LiveDN(grid17, NonlinearitySpec.empty())
    field, _ = recover_full(live, 1.5, m=2, ladder=SMALL_LADDER)
    assert np.max(np.abs(field)) <= 1e-6
    mask = restrict_mask(boundary_index(grid17), "left")
    res = recover_partial(LiveDN(grid17, NonlinearitySpec.empty(), mask=mask), 1.5, d=16, n_pairs=20,
                          ladder=SMALL_LADDER)
    assert np.linalg.norm(res.solve.coefficients) <= 1e-6


def test_partial_recovery_small_grid():
    g = build_grid((0, 0, 1, 1), 17)
    mask = restrict_mask(boundary_index(g), "left")
    q = gaussian_field(g, sigma=0.25)
    live = LiveDN(g, NonlinearitySpec.single(q, 1.5), mask=mask, kind="weak")
    res = recover_partial(live, 1.5, d=16, n_pairs=40, lam_scale=1e-5, ladder=SMALL_LADDER)
    assert res.n_pairs == 40 and res.basis == "bspline"
    assert relative_l2(g, res.field, q) < 0.5
    with pytest.raises(ConfigError):
        recover_partial(LiveDN(g, NonlinearitySpec.single(q, 1.5)), 1.5)
    bad = np.ones(len(boundary_index(g)))
    with pytest.raises(ConfigError):
        recover_partial(live, 1.5, probe_pairs=[(bad, bad)], ladder=SMALL_LADDER)


@settings(max_examples=25)
@given(st.integers(2, 8), st.integers(2, 6), st.floats(0, 1e-2), st.integers(0, 2**31 - 1))
def test_tikhonov_matches_normal_equations(rows, cols, lam_scale, seed):
    rng = np.random.default_rng(seed)
    A, b = rng.normal(size=(rows, cols)), rng.normal(size=rows)
    res = tikhonov(A, b, lam_scale=lam_scale + 1e-6)
    lam = res.lam
    ref = np.linalg.solve(A.T @ A + lam * np.eye(cols), A.T @ b)
    assert np.allclose(res.coefficients, ref, rtol=1e-8, atol=1e-10)
    assert lam == pytest.approx((lam_scale + 1e-6) * np.linalg.norm(A, 2) ** 2)


def test_tikhonov_errors():
    with pytest.raises(IllPosedError):
        tikhonov(np.zeros((3, 2)), np.ones(3))
    with pytest.raises(IllPosedError):
        tikhonov(np.array([[1.0, 1.0], [1.0, 1.0]]), np.ones(2), lam=0.0)
    with pytest.raises(ConfigError):
        tikhonov(np.eye(2), np.ones(2), lam=-1.0)


def test_bases(grid17):
    cb = cosine_basis(grid17, 9)
    assert cb.shape == (9,) + grid17.shape and np.all(cb[0] == 1)
    bb = bspline_basis(grid17, 25)
    assert np.allclose(bb.sum(axis=0), 1.0)  # partition of unity
    with pytest.raises(ConfigError):
        cosine_basis(grid17, 10)
    with pytest.raises(ConfigError):
        bspline_basis(grid17, 9)


def test_sine_pairs_order():
    assert sine_pairs(6) == [(1, 1), (1, 2), (2, 2), (1, 3), (2, 3), (3, 3)]
    assert len(sine_pairs(200)) == 200 and len(set(sine_pairs(200))) == 200


def test_expansion_powers_and_stage_basis():
    assert expansion_powers([1.5, 2.5], 5) == [0.5, 1.0, 1.5, 2.0, 2.5]
    assert expansion_powers([1.5], 3) == [0.5, 1.0, 1.5]
    assert stage_basis([1.5, 2.5], 0, 3) == (0.0, 0.5, 1.0)
    assert stage_basis([1.5, 2.5], 1, 4) == (-1.0, -0.5, 0.0, 0.5)


@given(st.lists(st.floats(1.05, 4.0), min_size=1, max_size=3, unique=True))
def test_expansion_powers_property(rs):
    rs = sorted(rs)
    ps = expansion_powers(rs, 8)
    assert ps == sorted(ps) and ps[0] == pytest.approx(rs[0] - 1)
    for r in rs:
        if r - 1 <= ps[-1]:
            assert any(abs(p - (r - 1)) < 1e-9 for p in ps)


def test_stage_ledger_invariants(grid17):
    g = grid17
    est = FourierEstimate(g, {}, {}, False, 0.0)
    led = StageLedger()
    led.append(StageRecord(1.5, np.zeros(g.shape), est, (0.0,), 0.0))
    with pytest.raises(ConfigError):
        led.append(StageRecord(1.5, np.zeros(g.shape), est, (0.0,), 0.0))
    with pytest.raises(ExtractionError):
        led.append(StageRecord(2.5, np.full(g.shape, np.nan), est, (0.0,), 0.0))
    led.append(StageRecord(2.5, np.ones(g.shape), est, (0.0,), 0.0))
    assert len(led) == 2 and led.spec(g).exponents == [1.5, 2.5]
    with pytest.raises(ConfigError):
        staged_recovery(LiveDN(g, NonlinearitySpec.empty()), [2.5, 1.5])


def test_single_stage_matches_full(grid17):
    live = LiveDN(grid17, NonlinearitySpec.single(gaussian_field(grid17, sigma=0.2), 1.5))
    lad = EpsilonLadder.geometric(0.03, 0.5, 6)
    full, _ = recover_full(live, 1.5, m=2, ladder=lad)
    ledger = staged_recovery(live, [1.5], ladder=lad, m=2, n_basis=[2])
    assert np.allclose(ledger.fields()[0], full, rtol=0, atol=1e-12 * np.max(np.abs(full)))
