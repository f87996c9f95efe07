"""Higher-order linearization of DN data and the fractional scaling limit.

The k-th mixed derivative ``(D^k Λ_q)_{ε₀f₀}(f₁, …, f_k)`` is estimated by
the central tensor stencil over the ``2^k`` sign patterns with steps
``δ_ℓ = θ ε₀ / max|f_ℓ / f₀|``, which keeps every stencil input a small
perturbation of ``ε₀ f₀``.  Pairing with ``f_{k+1}`` over a descending
ladder of ``ε₀`` gives a series ``P(ε₀) ~ A ε₀^α`` whose amplitude ``A`` is
the left-hand side of the integral identity

    lim ε₀^{-α} ∫ (D^kΛ_q)_{ε₀f₀}(f₁…f_k) f_{k+1} dS
        = c_r ∫ q |v₀|^{r-1} v₀^{1-k} v₁ ⋯ v_{k+1} dV.

For ``k = 1`` the linear part ``∫ Λ₀(f₁) f₂`` is subtracted first.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .dnmap import DNAccess, boundary_pairing
from .elliptic import harmonic_extensions
from .errors import DomainError, ExtractionError
from .grid import GridSpec, boundary_index
from .nonlinearity import dky_power, homogeneity_constants

DEFAULT_THETA = 0.5
EXPONENT_TOL = 0.15
NOISE_FLOOR = 1e-10
MAX_FDB_ORDER = 3


@dataclass(frozen=True)
class EpsilonLadder:
    """Descending ``ε₀`` values and the step fraction ``θ``."""

    eps: tuple
    theta: float = DEFAULT_THETA

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps)
        if not eps or any(e <= 0 for e in eps):
            raise ValueError("ladder values must be positive")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("ladder must be strictly descending")
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        object.__setattr__(self, "eps", eps)

    @classmethod
    def geometric(cls, start: float, ratio: float, count: int, theta: float = DEFAULT_THETA):
        if not 0 < ratio < 1:
            raise ValueError("ratio must lie in (0, 1)")
        return cls(tuple(start * ratio**i for i in range(count)), theta)

    def __len__(self):
        return len(self.eps)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.eps)

    def to_json(self) -> dict:
        return {"eps": list(self.eps), "theta": self.theta}


def step_size(eps0: float, f0, f, theta: float = DEFAULT_THETA) -> float:
    """``θ ε₀ / max|f / f₀|`` over the support of ``f``.

    If ``f`` is nonzero where ``f₀`` vanishes the ratio is replaced by
    ``max|f| / max|f₀|``.
    """
    f0 = np.abs(np.asarray(f0, dtype=float))
    f = np.abs(np.asarray(f, dtype=float))
    fmax = f.max(initial=0.0)
    if fmax == 0.0:
        return theta * eps0
    if np.any((f > 0) & (f0 <= 0)):
        ratio = fmax / f0.max()
    else:
        sup = f > 0
        ratio = float(np.max(f[sup] / f0[sup]))
    return theta * eps0 / ratio


def sign_patterns(k: int) -> list[tuple]:
    return list(itertools.product((1, -1), repeat=k))


def canonical_directions(dirs) -> list[np.ndarray]:
    """Directions in a fixed order so the stencil sum is permutation invariant."""
    arrs = [np.ascontiguousarray(d, dtype=np.float64) for d in dirs]
    return sorted(arrs, key=lambda a: a.tobytes())


@dataclass(frozen=True, eq=False)
class Stencil:
    inputs: np.ndarray
    signs: np.ndarray
    denom: float


def stencil_inputs(f0, dirs, eps0: float, theta: float = DEFAULT_THETA) -> Stencil:
    """The ``2^k`` Dirichlet inputs ``ε₀f₀ + Σ σ_ℓ δ_ℓ f_ℓ``."""
    f0 = np.asarray(f0, dtype=float)
    dirs = canonical_directions(dirs)
    deltas = [step_size(eps0, f0, d, theta) for d in dirs]
    pats = sign_patterns(len(dirs))
    inputs = []
    for pat in pats:
        x = eps0 * f0
        for s, d, dl in zip(pat, dirs, deltas):
            x = x + (s * dl) * d
        inputs.append(x)
    signs = np.array([math.prod(p) for p in pats], dtype=float)
    denom = math.prod(2.0 * d for d in deltas)
    return Stencil(np.array(inputs), signs, denom)


def combine(outputs: np.ndarray, st: Stencil) -> np.ndarray:
    """Fixed-order signed sum of stencil outputs divided by ``Π 2δ_ℓ``."""
    acc = np.zeros(outputs.shape[1])
    for s, out in zip(st.signs, outputs):
        acc = acc + s * out
    return acc / st.denom


def derivative_traces(access: DNAccess, f0, dirs, ladder: EpsilonLadder) -> np.ndarray:
    """FD estimates of ``(D^kΛ)_{ε₀f₀}(f₁…f_k)`` for every ladder point, ``(L, nb)``."""
    stencils = [stencil_inputs(f0, dirs, e, ladder.theta) for e in ladder.eps]
    outs = access.apply_many(np.concatenate([s.inputs for s in stencils]))
    n = len(stencils[0].signs)
    return np.array([combine(outs[i * n:(i + 1) * n], s) for i, s in enumerate(stencils)])


def abs_pairing(bidx, g, h, include_corners: bool = False) -> float:
    """``Σ_b s_b |g_b h_b|``, the roundoff reference of a pairing."""
    return boundary_pairing(bidx, np.abs(g), np.abs(h), include_corners)


@dataclass(frozen=True, eq=False)
class MixedPairing:
    value: float
    raw: float
    linear: float


@dataclass(frozen=True, eq=False)
class PairingSeries:
    """Ladder values ``P(ε₀)``, Λ₀-subtracted when ``k = 1``.

    ``scale`` is the largest absolute-value pairing ``Σ s|t g|`` seen while
    forming the series; it is the roundoff reference of the zero-signal test.
    """

    eps: np.ndarray
    values: np.ndarray
    k: int
    raw: np.ndarray | None = None
    linear: float = 0.0
    scale: float = 0.0

    def __post_init__(self):
        eps = np.asarray(self.eps, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if eps.shape != vals.shape or not np.all(np.isfinite(vals)):
            raise ValueError("series values must be finite and match the ladder")
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "values", vals)
        if self.scale == 0.0:
            object.__setattr__(self, "scale", float(np.max(np.abs(vals), initial=0.0)))

    def to_rows(self):
        raw = self.raw if self.raw is not None else self.values
        return [(float(e), float(v), float(w)) for e, v, w in zip(self.eps, self.values, raw)]


def mixed_pairing(access: DNAccess, f0, dirs, f_test, eps0: float, theta: float = DEFAULT_THETA):
    """``∫ (D^kΛ)_{ε₀f₀}(f₁…f_k) f_{k+1} dS`` at a single ``ε₀``.

    For ``k = 1`` the returned ``value`` has ``∫ Λ₀(f₁) f_{k+1}`` subtracted;
    ``raw`` and ``linear`` expose both parts.
    """
    series = pairing_series(access, f0, dirs, f_test, EpsilonLadder((eps0,), theta))
    return MixedPairing(float(series.values[0]), float(series.raw[0]), series.linear)


def pairing_series(access: DNAccess, f0, dirs, f_test, ladder: EpsilonLadder) -> PairingSeries:
    dirs = list(dirs)
    k = len(dirs)
    if k < 1:
        raise ValueError("need at least one direction")
    bidx = boundary_index(access.grid)
    corners = access.include_corners
    traces = derivative_traces(access, f0, dirs, ladder)
    raw = np.array([boundary_pairing(bidx, t, f_test, corners) for t in traces])
    linear = 0.0
    scale = max(abs_pairing(bidx, t, f_test, corners) for t in traces)
    if k == 1:
        lin = access.background(dirs[0])[0]
        linear = boundary_pairing(bidx, lin, f_test, corners)
        scale = max(scale, abs_pairing(bidx, lin, f_test, corners))
    vals = raw - linear
    return PairingSeries(ladder.as_array(), vals, k, raw, linear, scale)


def pairing_table(access: DNAccess, f0, dirs_list, tests_list, ladder: EpsilonLadder):
    """Series for many first-order probe pairs with one batched DN request.

    ``dirs_list[p]`` is the direction ``f₁`` and ``tests_list[p]`` the test
    function ``f₂`` of pair ``p``.  Returns a list of :class:`PairingSeries`.
    """
    bidx = boundary_index(access.grid)
    corners = access.include_corners
    uniq: dict[bytes, int] = {}
    dirs_u = []
    for d in dirs_list:
        key = np.ascontiguousarray(d, dtype=np.float64).tobytes()
        if key not in uniq:
            uniq[key] = len(dirs_u)
            dirs_u.append(np.asarray(d, dtype=float))
    stencils = [[stencil_inputs(f0, [d], e, ladder.theta) for e in ladder.eps] for d in dirs_u]
    flat = np.concatenate([s.inputs for row in stencils for s in row]) if dirs_u else np.zeros((0,))
    outs = access.apply_many(flat) if dirs_u else np.zeros((0, len(bidx)))
    traces = []
    pos = 0
    for row in stencils:
        tr = []
        for s in row:
            n = len(s.signs)
            tr.append(combine(outs[pos:pos + n], s))
            pos += n
        traces.append(np.array(tr))
    lin = access.background(np.array(dirs_u)) if dirs_u else np.zeros((0, len(bidx)))
    out = []
    for d, g in zip(dirs_list, tests_list):
        u = uniq[np.ascontiguousarray(d, dtype=np.float64).tobytes()]
        raw = np.array([boundary_pairing(bidx, t, g, corners) for t in traces[u]])
        linear = boundary_pairing(bidx, lin[u], g, corners)
        scale = max(abs_pairing(bidx, lin[u], g, corners),
                    max(abs_pairing(bidx, t, g, corners) for t in traces[u]))
        out.append(PairingSeries(ladder.as_array(), raw - linear, 1, raw, linear, scale))
    return out


@dataclass(frozen=True)
class LimitFit:
    """Extrapolated limit with diagnostics.

    ``exponent`` is the log-log slope of ``|P|`` (``None`` when the series
    changes sign or is below the noise floor).  ``flagged`` marks a failed
    exponent check; ``fallback`` is the smallest-``ε₀`` scaled value.
    """

    limit: float
    exponent: float | None
    residual: float
    flagged: bool
    fallback: float
    zero_signal: bool
    coefficients: tuple = field(default=())

    def to_json(self) -> dict:
        return {"limit": self.limit, "exponent": self.exponent, "residual": self.residual,
                "flagged": self.flagged, "fallback": self.fallback, "zero_signal": self.zero_signal}


def fit_limit(eps, values, scale_exponent: float, basis_exponents, *, expected_exponent=None,
              exponent_tol: float = EXPONENT_TOL, noise_scale: float | None = None,
              noise_floor: float = NOISE_FLOOR, accept_subleading: bool = False) -> LimitFit:
    """Least-squares fit of ``P/ε^s`` against ``{ε^b}``; returns the ``b = 0`` coefficient.

    ``basis_exponents`` must contain 0.  The exponent check compares the
    log-log slope of ``|P|`` with ``expected_exponent`` (default ``s``).
    With ``accept_subleading`` a slope matching ``s + b`` for a positive
    basis exponent ``b`` also passes: the limit is then genuinely close to
    zero and the series is dominated by its first correction.
    """
    eps = np.asarray(eps, dtype=float)
    vals = np.asarray(values, dtype=float)
    basis_exponents = tuple(float(b) for b in basis_exponents)
    if 0.0 not in basis_exponents:
        raise ValueError("basis must include the constant term")
    if len(eps) < len(basis_exponents):
        raise ValueError(f"need at least {len(basis_exponents)} ladder points, got {len(eps)}")
    order = np.argsort(eps)
    fallback = float(vals[order[0]] / eps[order[0]] ** scale_exponent)
    ref = noise_scale if noise_scale is not None else float(np.max(np.abs(vals), initial=0.0))
    peak = float(np.max(np.abs(vals), initial=0.0))
    if peak == 0.0 or (ref > 0 and peak / ref < noise_floor):
        return LimitFit(0.0, None, 0.0, False, 0.0, True, tuple(0.0 for _ in basis_exponents))

    y = vals / eps**scale_exponent
    # scale columns to O(1) so the normal equations are well conditioned
    M = np.column_stack([eps**b for b in basis_exponents])
    norms = np.linalg.norm(M, axis=0)
    coef, *_ = np.linalg.lstsq(M / norms, y, rcond=None)
    coef = coef / norms
    resid = float(np.linalg.norm(M @ coef - y) / max(np.linalg.norm(y), 1e-300))
    limit = float(coef[basis_exponents.index(0.0)])

    expected = scale_exponent if expected_exponent is None else expected_exponent
    exponent = None
    if np.all(vals > 0) or np.all(vals < 0):
        exponent = float(np.polyfit(np.log(eps), np.log(np.abs(vals)), 1)[0])
    targets = [expected]
    if accept_subleading:
        targets += [expected + b for b in basis_exponents if b > 0]
    flagged = exponent is None or min(abs(exponent - t) for t in targets) > exponent_tol
    return LimitFit(limit, exponent, resid, bool(flagged), fallback, False, tuple(float(c) for c in coef))


def correction_exponent(alpha: float) -> float:
    return min(alpha, 1.0 - alpha) if 0 < alpha < 1 else 1.0


def limit_basis(alpha: float, n_terms: int = 2) -> tuple:
    g = correction_exponent(alpha)
    return tuple(i * g for i in range(n_terms))


def fit_alpha_limit(series: PairingSeries, alpha: float, n_terms: int = 2,
                    exponent_tol: float = EXPONENT_TOL) -> LimitFit:
    return fit_limit(series.eps, series.values, alpha, limit_basis(alpha, n_terms),
                     exponent_tol=exponent_tol, noise_scale=series.scale)


def alpha_limit(series: PairingSeries, alpha: float, n_terms: int = 2,
                exponent_tol: float = EXPONENT_TOL) -> float:
    """``lim ε₀^{-α} P(ε₀)`` by extrapolation in the basis ``{1, ε₀^γ, …}``.

    ``γ = min(α, 1-α)``.  Raises :class:`ExtractionError` when the fitted
    log-log exponent of ``|P|`` is more than ``exponent_tol`` away from ``α``;
    the error carries the smallest-ladder-point value as ``fallback``.
    """
    if len(series.eps) < 4:
        raise ValueError("alpha_limit needs at least 4 ladder points")
    fit = fit_alpha_limit(series, alpha, n_terms, exponent_tol)
    if fit.flagged:
        raise ExtractionError(f"fitted exponent {fit.exponent} inconsistent with alpha={alpha}",
                              fallback=fit.fallback, exponent=fit.exponent)
    return fit.limit


def identity_weight(r: float, k: int, v0: np.ndarray) -> np.ndarray:
    """``c_r |v₀|^{r-1} v₀^{1-k}`` as a node field."""
    v0 = np.asarray(v0, dtype=float)
    if k > 1 and np.any(v0[1:-1, 1:-1] == 0.0 if v0.ndim == 2 else v0 == 0.0):
        raise DomainError("v0 vanishes at an interior node; the weight is singular for k > 1")
    return -dky_power(r, k, v0)


def rhs_quadrature(grid: GridSpec, q, r: float, fields) -> float:
    """``c_r ∫ q |v₀|^{r-1} v₀^{1-k} v₁ ⋯ v_{k+1} dV`` by trapezoid quadrature.

    ``fields`` are the node fields ``v₀, …, v_{k+1}``; ``k = len(fields) - 2``.
    """
    fields = [np.asarray(v, dtype=float) for v in fields]
    k = len(fields) - 2
    if k < 1:
        raise ValueError("need v0, v1 and at least one test field")
    integrand = identity_weight(r, k, fields[0]) * np.asarray(q, dtype=float)
    for v in fields[1:]:
        integrand = integrand * v
    return grid.integrate(integrand)


@dataclass(frozen=True, eq=False)
class IdentityReport:
    lhs: float
    rhs: float
    rel_error: float
    exponent: float | None
    alpha: float
    k: int
    passed: bool
    flagged: bool
    series: PairingSeries

    def to_json(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "rel_error": self.rel_error, "exponent": self.exponent,
                "alpha": self.alpha, "k": self.k, "passed": self.passed, "flagged": self.flagged}


def verify_identity(access: DNAccess, q, r: float, f0, fs, ladder: EpsilonLadder, threshold: float = 0.05,
                    abs_tol: float = 1e-8, n_terms: int = 2) -> IdentityReport:
    """Compare the extrapolated DN pairing with the interior quadrature.

    ``fs = [f₁, …, f_k, f_{k+1}]`` with ``k = ⌊r⌋``.  ``q`` is used only for
    the right-hand side.  Relative error is measured against ``|RHS|``; when
    both sides are below ``abs_tol`` the check passes.
    """
    const = homogeneity_constants(r)
    k = const.k
    fs = [np.asarray(f, dtype=float) for f in fs]
    if len(fs) != k + 1:
        raise ValueError(f"r={r} needs k+1={k + 1} probe functions, got {len(fs)}")
    series = pairing_series(access, f0, fs[:k], fs[k], ladder)
    fit = fit_alpha_limit(series, const.alpha, n_terms)
    lhs = fit.fallback if fit.flagged and not fit.zero_signal else fit.limit
    vs = harmonic_extensions(access.grid, np.array([f0] + fs))
    rhs = rhs_quadrature(access.grid, q, r, list(vs))
    if abs(rhs) <= abs_tol and abs(lhs) <= abs_tol:
        rel, passed = 0.0, True
    else:
        rel = abs(lhs - rhs) / max(abs(rhs), abs_tol)
        passed = rel <= threshold
    return IdentityReport(lhs, rhs, float(rel), fit.exponent, const.alpha, k, bool(passed), fit.flagged, series)


# Faà di Bruno structure of ∂_{ε₁}⋯∂_{ε_k} φ(u(ε)) with φ(y) = |y|^{r-1} y.

def set_partitions(items):
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def phi_derivative(r: float, j: int, y):
    """``d^j/dy^j |y|^{r-1} y`` for ``0 <= j <= ⌊r⌋``."""
    if j == 0:
        y = np.asarray(y, dtype=float)
        return np.abs(y) ** (r - 1.0) * y
    return dky_power(r, j, y)


@dataclass(frozen=True)
class FaaDiBrunoReport:
    r: float
    k: int
    leading: float
    closed_form: float
    fd_value: float
    error: float
    passed: bool
    n_partitions: int

    def to_json(self) -> dict:
        return {"r": self.r, "k": self.k, "leading": self.leading, "closed_form": self.closed_form,
                "fd_value": self.fd_value, "error": self.error, "passed": self.passed,
                "partitions": self.n_partitions}


def _u_of_eps(u0, v, w, z, eps):
    """Polynomial path ``u(ε) = u₀ + Σ ε_ℓ v_ℓ + Σ_{ℓ<m} ε_ℓε_m w_ℓm + ε₁ε₂ε₃ z``."""
    k = len(v)
    out = u0 + sum(eps[l] * v[l] for l in range(k))
    for (l, m), wl in w.items():
        out = out + eps[l] * eps[m] * wl
    if z is not None and k >= 3:
        out = out + eps[0] * eps[1] * eps[2] * z
    return out


def _block_derivative(block, v, w, z):
    """``∂_B u`` at ``ε = 0`` for the polynomial path."""
    if len(block) == 1:
        return v[block[0]]
    if len(block) == 2:
        return w.get(tuple(sorted(block)), 0.0)
    if len(block) == 3:
        return z if z is not None else 0.0
    return 0.0


_FD6 = (np.array([-3, -2, -1, 1, 2, 3]), np.array([-1 / 60, 3 / 20, -3 / 4, 3 / 4, -3 / 20, 1 / 60]))


def faa_di_bruno_check(r: float, k: int, u0: float, v, w=None, z=None, step: float = 1e-2,
                       tol: float = 1e-4) -> FaaDiBrunoReport:
    """Check the partition expansion of ``∂_{ε₁}⋯∂_{ε_k} φ(u(ε))`` at ``ε = 0``.

    ``u(ε)`` is the polynomial path with first-order directions ``v``,
    second-order coefficients ``w[(l, m)]`` and third-order ``z``.  The
    closed form sums ``φ^{(|π|)}(u₀) Π_{B∈π} ∂_B u`` over set partitions;
    its single-block-per-direction term ``φ^{(k)}(u₀) v₁⋯v_k =
    -c_r |u₀|^{r-1} u₀^{1-k} v₁⋯v_k`` is reported as ``leading``.  The
    reference is a tensor sixth-order central difference.
    """
    k = int(k)
    if not 1 <= k <= MAX_FDB_ORDER:
        raise DomainError(f"partition enumeration is limited to k <= {MAX_FDB_ORDER}")
    if k > math.floor(r):
        raise DomainError(f"k={k} exceeds floor(r)={math.floor(r)}")
    v = [float(x) for x in v]
    if len(v) != k:
        raise ValueError("need one first-order direction per derivative")
    w = {tuple(sorted(key)): float(val) for key, val in (w or {}).items()}
    z = None if z is None else float(z)

    parts = list(set_partitions(range(k)))
    closed = 0.0
    for p in parts:
        term = float(phi_derivative(r, len(p), u0))
        for block in p:
            term *= _block_derivative(block, v, w, z)
        closed += term
    leading = float(phi_derivative(r, k, u0)) * math.prod(v)

    offs, coefs = _FD6
    fd = 0.0
    for idx in itertools.product(range(len(offs)), repeat=k):
        eps = [offs[i] * step for i in idx]
        c = math.prod(coefs[i] for i in idx)
        fd += c * float(phi_derivative(r, 0, _u_of_eps(u0, v, w, z, eps)))
    fd /= step**k
    err = abs(fd - closed) / max(abs(closed), 1.0)
    return FaaDiBrunoReport(float(r), k, leading, closed, fd, err, err <= tol, len(parts))


def dky_fd_error(r: float, k: int, ys, step: float = 1e-3) -> float:
    """Max deviation of ``dky_power`` from an eighth-order FD derivative of ``φ^{(k-1)}``."""
    offs = np.array([-4, -3, -2, -1, 1, 2, 3, 4])
    coefs = np.array([1 / 280, -4 / 105, 1 / 5, -4 / 5, 4 / 5, -1 / 5, 4 / 105, -1 / 280])
    worst = 0.0
    for y in np.atleast_1d(ys):
        fd = sum(c * float(phi_derivative(r, k - 1, y + o * step)) for o, c in zip(offs, coefs)) / step
        worst = max(worst, abs(fd - float(dky_power(r, k, y))))
    return worst


__all__ = ["EpsilonLadder", "PairingSeries", "LimitFit", "IdentityReport", "FaaDiBrunoReport",
           "mixed_pairing", "pairing_series", "pairing_table", "alpha_limit", "fit_limit", "fit_alpha_limit",
           "rhs_quadrature", "verify_identity", "faa_di_bruno_check", "step_size", "stencil_inputs",
           "derivative_traces"]
