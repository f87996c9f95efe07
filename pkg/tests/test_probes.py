import numpy as np
import pytest
from hypothesis import given, strategies as st

from fcald.elliptic import harmonic_extension
from fcald.errors import ConfigError, DomainError
from fcald.grid import boundary_index, build_grid, mask_arc_parameter, restrict_mask
from fcald.probes import (calderon_pair, discrete_decay, fourier_orthogonality, frequency_set, positive_probe,
                          real_expand, rot90, sine_family)


def lap5(grid, v):
    """Independent five-point Laplacian on interior nodes."""
    return (v[2:, 1:-1] + v[:-2, 1:-1] + v[1:-1, 2:] + v[1:-1, :-2] - 4 * v[1:-1, 1:-1]) / grid.h**2


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_rot90_contract(a, b):
    xi = np.array([a, b])
    z = rot90(xi)
    assert abs(z @ xi) <= 1e-15 * max(xi @ xi, 1e-300)
    assert np.linalg.norm(z) == pytest.approx(np.linalg.norm(xi), rel=1e-15)


def test_rot90_axis_aligned_exact():
    for xi in ([np.pi, 0], [0, -2.0], [3.0, 0]):
        z = rot90(xi)
        assert z @ np.asarray(xi) == 0.0 and np.linalg.norm(z) == np.linalg.norm(xi)
    assert np.array_equal(rot90((np.pi, 0)), [0.0, np.pi])


def test_calderon_pair_examples(grid17):
    p = calderon_pair(grid17, (np.pi, 0))
    assert np.array_equal(p.zeta, [0.0, np.pi])
    X, Y = grid17.mesh()
    assert np.allclose(p.product(), np.exp(2j * np.pi * X), rtol=0, atol=1e-13)
    assert p.v2.real[0, 0] == 1.0 and p.v1.real[0, 0] == 1.0
    b = boundary_index(grid17)
    assert np.allclose(p.b1, p.v1[b.i, b.j], rtol=0, atol=1e-15)


@pytest.mark.parametrize("xi", [(np.pi, 0), (np.pi, 2 * np.pi), (-3.0, 1.0)])
def test_analytic_probes_discretely_harmonic_second_order(xi):
    errs = []
    # compare at the interior nodes of the coarsest grid so the sample points stay fixed
    for n, stride in ((17, 1), (33, 2), (65, 4)):
        g = build_grid((0, 0, 1, 1), n)
        p = calderon_pair(g, xi)
        errs.append(max(np.max(np.abs(lap5(g, f)[stride - 1::stride, stride - 1::stride])) for f in p.real_fields))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.9) and np.all(rates < 2.1), rates
    bound = np.linalg.norm(xi) ** 4 * np.exp(np.linalg.norm(xi) * np.sqrt(2))
    assert errs[-1] <= bound * (1 / 64) ** 2


def test_discrete_dispersion_probes_are_exactly_harmonic(grid33):
    for xi in [(np.pi, 0), (2 * np.pi, -np.pi), (np.pi, 3 * np.pi)]:
        p = calderon_pair(grid33, xi, dispersion="discrete")
        scale = np.max(np.abs(p.v2)) / grid33.h**2
        assert max(np.max(np.abs(lap5(grid33, f))) for f in p.real_fields) <= 1e-12 * scale
        X, Y = grid33.mesh()
        assert np.allclose(p.product(), np.exp(2j * (xi[0] * X + xi[1] * Y)), rtol=1e-12, atol=1e-12)
        assert np.linalg.norm(p.zeta - rot90(xi)) <= 0.05 * np.linalg.norm(xi)


def test_discrete_decay_converges_to_analytic():
    xi = (np.pi, 2 * np.pi)
    gaps = [np.linalg.norm(discrete_decay(xi, h) - rot90(xi)) for h in (1 / 16, 1 / 32, 1 / 64)]
    assert gaps[0] / gaps[1] == pytest.approx(4, rel=0.1) and gaps[1] / gaps[2] == pytest.approx(4, rel=0.1)


def test_guard_and_zero_frequency(grid17):
    with pytest.raises(DomainError):
        calderon_pair(grid17, (30.0, 20.0))
    with pytest.raises(DomainError):
        calderon_pair(grid17, (0.0, 0.0))
    with pytest.raises(ConfigError):
        calderon_pair(grid17, (1.0, 0.0), dispersion="spectral")
    calderon_pair(grid17, (30.0, 20.0), guard=100.0)


def test_real_expand_structure():
    a, b, c, d = 2.0, 3.0, 5.0, 7.0
    one = real_expand([np.array(a + 1j * b)])
    assert [(t[0], t[2]) for t in one.terms] == [(1, (a,)), (1j, (b,))]
    two = real_expand([np.array(a + 1j * b), np.array(c + 1j * d)])
    assert len(two) == 4
    assert two.recombine(lambda fs: fs[0] * fs[1]) == (a * c - b * d) + 1j * (a * d + b * c)


@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_real_expand_recombination(k, seed):
    rng = np.random.default_rng(seed)
    fields = [rng.normal(size=(6, 5)) + 1j * rng.normal(size=(6, 5)) for _ in range(k)]
    weight = rng.normal(size=(6, 5))
    exact = np.sum(weight * np.prod(fields, axis=0))
    got = real_expand(fields).recombine(lambda fs: np.sum(weight * np.prod(fs, axis=0)))
    assert abs(got - exact) <= 1e-13 * np.sum(np.abs(weight) * np.prod(np.abs(fields), axis=0))
    assert len(real_expand(fields)) == 2**k


def test_positive_probe_examples(grid17):
    b = boundary_index(grid17)
    assert np.all(positive_probe(b, restrict_mask(b, "all"), "constant") == 1.0)
    left = restrict_mask(b, "left")
    f = positive_probe(b, left)
    vals = f[left.positions]
    t = mask_arc_parameter(b, left)
    assert vals.max() == pytest.approx(1.0)
    assert np.all(vals[(t == t.min()) | (t == t.max())] == 0)
    ind = left.indicator(len(b))
    assert np.all(f[~ind] == 0) and np.all(f >= 0)
    mid = b.points[left.positions[np.argmax(vals)]]
    assert mid[1] == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        positive_probe(b, restrict_mask(b, "arc:0:0.1"))


@pytest.mark.parametrize("sel", ["all", "left", "left+top", "arc:0.3:1.7", "bottom+right"])
@pytest.mark.parametrize("profile", ["bump", "constant"])
def test_positive_probe_maximum_principle(grid17, sel, profile):
    b = boundary_index(grid17)
    f = positive_probe(b, restrict_mask(b, sel), profile)
    v = harmonic_extension(grid17, f)
    assert np.all(v[1:-1, 1:-1] > 0)


def test_sine_family_support(grid17):
    b = boundary_index(grid17)
    m = restrict_mask(b, "left+top")
    for k in (1, 2, 5):
        f = sine_family(b, m, k)
        assert np.all(f[~m.indicator(len(b))] == 0) and np.max(np.abs(f)) > 0.9


def test_fourier_orthogonality_second_order():
    xi = (np.pi, 2 * np.pi)
    errs = []
    for n in (17, 33, 65):
        num, exact = fourier_orthogonality(build_grid((0, 0, 1, 1), n), xi)
        errs.append(abs(num - exact))
    # ξ = π·(1, 2): the closed form vanishes and the trapezoid sum is exact
    assert max(errs) < 1e-12
    errs = []
    for n in (17, 33, 65):
        num, exact = fourier_orthogonality(build_grid((0, 0, 1, 1), n), (1.0, 0.7))
        errs.append(abs(num - exact))
    assert errs[0] / errs[1] == pytest.approx(4, rel=0.05) and errs[1] / errs[2] == pytest.approx(4, rel=0.05)


def test_frequency_set():
    disc = frequency_set(4, "disc")
    assert (0, 0) not in disc and len(disc) == 48
    assert len(frequency_set(2, "square")) == 24
    with pytest.raises(ConfigError):
        frequency_set(2, "hex")
