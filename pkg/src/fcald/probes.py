"""Harmonic probe families: Calderón exponentials, real expansions, positive bumps."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .grid import BoundaryIndex, GridSpec, SupportMask, boundary_index, mask_arc_parameter

OVERFLOW_GUARD = 40.0


def rot90(xi) -> np.ndarray:
    """Counterclockwise quarter turn, ``(a, b) ↦ (-b, a)``."""
    a, b = (float(t) for t in xi)
    return np.array([-b, a])


@dataclass(frozen=True, eq=False)
class CalderonPair:
    """``v₁ = e^{(-ζ+iξ)·x}`` and ``v₂ = e^{(ζ+iξ)·x}`` with ``ζ = rot90(ξ)``.

    ``x`` is measured from the box origin.  ``v1``/``v2`` are complex node
    fields and ``b1``/``b2`` their analytic boundary traces.
    """

    xi: np.ndarray
    zeta: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray

    @property
    def real_fields(self):
        return (self.v1.real, self.v1.imag, self.v2.real, self.v2.imag)

    @property
    def real_traces(self):
        return (self.b1.real, self.b1.imag, self.b2.real, self.b2.imag)

    def product(self) -> np.ndarray:
        return self.v1 * self.v2


def discrete_decay(xi, h: float, tol: float = 1e-15, max_iter: int = 50) -> np.ndarray:
    """Real ``z`` near ``rot90(ξ)`` making ``e^{(±z+iξ)·x}`` exactly five-point harmonic.

    Solves ``cosh((z₁+iξ₁)h) + cosh((z₂+iξ₂)h) = 2`` by Newton's method.
    """
    xi = np.asarray(xi, dtype=float)
    z = rot90(xi)
    for _ in range(max_iter):
        a = (z + 1j * xi) * h
        g = np.cosh(a[0]) + np.cosh(a[1]) - 2.0
        if abs(g) <= tol:
            break
        d = h * np.sinh(a)
        J = np.array([[d[0].real, d[1].real], [d[0].imag, d[1].imag]])
        z = z - np.linalg.solve(J, np.array([g.real, g.imag]))
    else:
        raise DomainError(f"discrete dispersion relation did not converge for ξ={xi.tolist()}")
    return z


def calderon_pair(grid: GridSpec, xi, guard: float = OVERFLOW_GUARD,
                  dispersion: str = "analytic") -> CalderonPair:
    """Calderón exponentials sampled on ``grid``.

    ``dispersion="discrete"`` replaces ``ζ`` by the nearby root of the
    five-point dispersion relation, so both fields are exactly discrete
    harmonic while ``v₁v₂ = e^{2iξ·x}`` still holds; ``ζ·ξ = 0`` is then only
    true up to ``O(h²)``.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (2,) or not np.any(xi != 0):
        raise DomainError("frequency must be a nonzero 2-vector")
    x0, y0, x1, y1 = grid.box
    diam = math.hypot(x1 - x0, y1 - y0)
    if float(np.linalg.norm(xi)) * diam > guard:
        raise DomainError(f"|ξ|·diam = {np.linalg.norm(xi) * diam:.3g} exceeds the amplitude guard {guard}")
    if dispersion == "analytic":
        zeta = rot90(xi)
    elif dispersion == "discrete":
        zeta = discrete_decay(xi, grid.h)
    else:
        raise ConfigError(f"unknown dispersion {dispersion!r}")
    X, Y = grid.mesh()
    X, Y = X - x0, Y - y0
    bidx = boundary_index(grid)
    bx, by = bidx.points[:, 0] - x0, bidx.points[:, 1] - y0

    def field(s, x, y):
        return np.exp(s * (zeta[0] * x + zeta[1] * y)) * np.exp(1j * (xi[0] * x + xi[1] * y))

    return CalderonPair(xi, zeta, field(-1, X, Y), field(1, X, Y), field(-1, bx, by), field(1, bx, by))


@dataclass(frozen=True, eq=False)
class ProbeCombo:
    """``Π_j (a_j + i b_j) = Σ_terms c · Π_j w_j`` with ``c ∈ {±1, ±i}``.

    Each term is ``(coefficient, selection, fields)`` where ``selection[j]``
    is 0 for the real part and 1 for the imaginary part of factor ``j``.
    """

    terms: tuple

    def __len__(self):
        return len(self.terms)

    def recombine(self, func) -> complex:
        """``Σ c · func(fields)`` in a fixed order."""
        total = 0j
        for coef, _, fields in self.terms:
            total += coef * func(fields)
        return total

    def product(self) -> np.ndarray:
        return self.recombine(lambda fs: math.prod(fs, start=np.ones_like(np.asarray(fs[0], dtype=float))))


def real_expand(fields) -> ProbeCombo:
    """Split a product of complex fields into ``2^k`` real products."""
    fields = [np.asarray(f) for f in fields]
    if not fields:
        raise ValueError("need at least one complex field")
    parts = [(f.real.astype(float), np.imag(f).astype(float)) for f in fields]
    terms = []
    for sel in itertools.product((0, 1), repeat=len(fields)):
        coef = 1j ** sum(sel)
        coef = complex(round(coef.real), round(coef.imag))
        terms.append((coef, sel, tuple(p[s] for p, s in zip(parts, sel))))
    return ProbeCombo(tuple(terms))


def positive_probe(bidx: BoundaryIndex, mask: SupportMask, profile: str = "bump") -> np.ndarray:
    """Nonnegative boundary data supported in ``mask``.

    ``"constant"`` is the indicator of the mask; ``"bump"`` is
    ``sin(πt)`` along the arc parameter of the mask, with maximum 1 at the
    midpoint and zeros at the arc endpoints.
    """
    if len(mask) < 3:
        raise ConfigError("mask too small for a positive probe (need >= 3 nodes)")
    f = np.zeros(len(bidx))
    if profile == "constant":
        f[mask.positions] = 1.0
    elif profile == "bump":
        t = mask_arc_parameter(bidx, mask)
        if len(mask) == len(bidx):
            # closed loop: raised cosine, positive except at the start node
            f[mask.positions] = 0.5 * (1.0 - np.cos(2.0 * np.pi * t))
        else:
            f[mask.positions] = np.sin(np.pi * t)
        f[np.abs(f) < 1e-15] = 0.0
    else:
        raise ConfigError(f"unknown probe profile {profile!r}")
    return f


def sine_family(bidx: BoundaryIndex, mask: SupportMask, m: int) -> np.ndarray:
    """``sin(mπt)`` along the arc of ``mask``, zero elsewhere."""
    t = mask_arc_parameter(bidx, mask)
    f = np.zeros(len(bidx))
    f[mask.positions] = np.sin(m * np.pi * t)
    f[np.abs(f) < 1e-15] = 0.0
    return f


def fourier_orthogonality(grid: GridSpec, xi) -> tuple[complex, complex]:
    """``∫ v₁v₂ dx`` by quadrature and the closed form ``Π (e^{2iξ_j L_j} - 1)/(2iξ_j)``."""
    pair = calderon_pair(grid, xi)
    prod = pair.product()
    num = grid.integrate(prod.real) + 1j * grid.integrate(prod.imag)
    x0, y0, x1, y1 = grid.box
    exact = 1.0 + 0j
    for x, L in zip(pair.xi, (x1 - x0, y1 - y0)):
        exact *= L if x == 0 else (np.exp(2j * x * L) - 1.0) / (2j * x)
    return num, exact


def frequency_set(m: int = 4, shape: str = "disc") -> list[tuple[int, int]]:
    """Lattice indices ``n`` with ``ξ = π n`` (unit box), excluding 0.

    ``"disc"`` keeps ``|n| <= m``, ``"square"`` keeps ``max|n_j| <= m``.
    """
    out = []
    for a in range(-m, m + 1):
        for b in range(-m, m + 1):
            if (a, b) == (0, 0):
                continue
            if shape == "disc" and a * a + b * b > m * m:
                continue
            if shape not in ("disc", "square"):
                raise ConfigError(f"unknown frequency set shape {shape!r}")
            out.append((a, b))
    return out
