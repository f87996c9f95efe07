"""Coefficient recovery from DN data.

Three paths share the first-order pairing machinery of :mod:`fcald.hol`:

* ``recover_full``: Fourier coefficients ``∫ q e^{2iξ·x}`` from Calderón
  exponential probes, synthesized on the box.
* ``recover_partial``: Tikhonov inversion of pairings of products of
  harmonic extensions whose data live on a boundary part ``Γ``.
* ``staged_recovery``: successive recovery of the coefficients of a
  polyhomogeneous nonlinearity, subtracting already recovered stages by
  simulating them through the same measurement pipeline.

All paths only ever see a :class:`~fcald.dnmap.DNAccess`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dnmap import DNAccess, LiveDN
from .elliptic import harmonic_extensions
from .errors import ConfigError, ExtractionError, IllPosedError
from .forward import ForwardOptions
from .grid import GridSpec, SupportMask, boundary_index
from .hol import EpsilonLadder, PairingSeries, correction_exponent, fit_limit, pairing_table
from .nonlinearity import NonlinearitySpec, PowerTerm, homogeneity_constants
from .probes import calderon_pair, frequency_set, positive_probe, real_expand, sine_family

log = logging.getLogger(__name__)

LOW_CONFIDENCE_FRACTION = 0.25


def default_ladder() -> EpsilonLadder:
    return EpsilonLadder.geometric(0.03, 0.5, 6)


def relative_l2(grid: GridSpec, approx, truth) -> float:
    """``‖approx - truth‖ / ‖truth‖`` in the trapezoid L² norm (absolute if truth is 0)."""
    approx, truth = np.asarray(approx, dtype=float), np.asarray(truth, dtype=float)
    num = math.sqrt(max(grid.integrate((approx - truth) ** 2), 0.0))
    den = math.sqrt(max(grid.integrate(truth**2), 0.0))
    return num / den if den > 0 else num


def l2_norm(grid: GridSpec, u) -> float:
    return math.sqrt(max(grid.integrate(np.asarray(u, dtype=float) ** 2), 0.0))


# ----------------------------------------------------------------------------
# first-order pairings of real probe pairs


@dataclass(frozen=True)
class PairLimit:
    """Symmetrized first-order limit ``c_r ∫ q w w'`` for one real probe pair."""

    limit: float
    exponent: float | None
    flagged: bool
    zero_signal: bool


def _symmetric_series(s1: PairingSeries, s2: PairingSeries) -> PairingSeries:
    vals = 0.5 * (s1.values + s2.values)
    raw = 0.5 * (s1.raw + s2.raw)
    return PairingSeries(s1.eps, vals, 1, raw, 0.5 * (s1.linear + s2.linear), max(s1.scale, s2.scale))


def pair_limits(access: DNAccess, f0, pairs, ladder: EpsilonLadder, scale_exponent: float,
                basis_exponents, expected_exponent=None) -> tuple[list[PairLimit], list[PairingSeries]]:
    """Extrapolated limits for probe pairs ``(w, w')``, symmetrized over both orders."""
    dirs, tests = [], []
    for w, w2 in pairs:
        dirs += [w, w2]
        tests += [w2, w]
    series = pairing_table(access, f0, dirs, tests, ladder)
    out, sym = [], []
    for p in range(len(pairs)):
        s = _symmetric_series(series[2 * p], series[2 * p + 1])
        fit = fit_limit(s.eps, s.values, scale_exponent, basis_exponents,
                        expected_exponent=expected_exponent, noise_scale=s.scale, accept_subleading=True)
        val = fit.fallback if fit.flagged and not fit.zero_signal else fit.limit
        out.append(PairLimit(val, fit.exponent, fit.flagged and not fit.zero_signal, fit.zero_signal))
        sym.append(s)
    return out, sym


# ----------------------------------------------------------------------------
# full data


@dataclass(frozen=True, eq=False)
class ModeEstimate:
    n: tuple
    xi: tuple
    value: complex
    flagged: int
    exponents: tuple

    def to_json(self) -> dict:
        return {"n": list(self.n), "xi": list(self.xi), "re": self.value.real, "im": self.value.imag,
                "flagged_pairings": self.flagged,
                "exponents": [e if e is None else round(e, 6) for e in self.exponents]}


@dataclass(frozen=True, eq=False)
class FourierEstimate:
    """Hermitian-averaged estimates of ``∫ q e^{-2πi n·x̃} dx`` on the box.

    ``x̃`` is the box coordinate scaled to the unit square, so ``n`` indexes
    box-periodic Fourier coefficients.
    """

    grid: GridSpec
    modes: dict
    raw: dict
    low_confidence: bool
    flagged_fraction: float

    def synthesize(self, grid: GridSpec | None = None) -> np.ndarray:
        return synthesize_modes(grid or self.grid, self.modes)

    def to_json(self) -> dict:
        return {"modes": [self.raw[n].to_json() | {"hermitian": [self.modes[n].real, self.modes[n].imag]}
                          for n in sorted(self.raw)],
                "low_confidence": self.low_confidence, "flagged_fraction": self.flagged_fraction}


def mode_frequency(grid: GridSpec, n) -> np.ndarray:
    """``ξ`` such that ``e^{2iξ·x} = e^{-2πi n·x̃}`` up to the origin phase."""
    x0, y0, x1, y1 = grid.box
    return -np.pi * np.array([n[0] / (x1 - x0), n[1] / (y1 - y0)])


def synthesize_modes(grid: GridSpec, modes: dict) -> np.ndarray:
    """``Σ_n c_n e^{2πi n·x̃} / |box|`` evaluated on the nodes (real part)."""
    x0, y0, x1, y1 = grid.box
    area = (x1 - x0) * (y1 - y0)
    X, Y = grid.mesh()
    tx, ty = (X - x0) / (x1 - x0), (Y - y0) / (y1 - y0)
    out = np.zeros(grid.shape)
    for n in sorted(modes):
        c = modes[n]
        out += (c * np.exp(2j * np.pi * (n[0] * tx + n[1] * ty))).real
    return out / area


def direct_modes(grid: GridSpec, q, ns) -> dict:
    """Quadrature oracle ``∫ q e^{-2πi n·x̃} dx`` for each index ``n``."""
    x0, y0, x1, y1 = grid.box
    X, Y = grid.mesh()
    tx, ty = (X - x0) / (x1 - x0), (Y - y0) / (y1 - y0)
    out = {}
    for n in ns:
        e = np.exp(-2j * np.pi * (n[0] * tx + n[1] * ty)) * q
        out[tuple(n)] = complex(grid.integrate(e.real), grid.integrate(e.imag))
    return out


def mode_set(m: int = 4, shape: str = "disc", include_mean: bool = True) -> list[tuple]:
    ns = frequency_set(m, shape)
    return ([(0, 0)] if include_mean else []) + ns


def truncation_floor(grid: GridSpec, q, m: int = 4, shape: str = "disc") -> float:
    """Relative L² error of the exact ``m``-mode synthesis of ``q``."""
    return relative_l2(grid, synthesize_modes(grid, direct_modes(grid, q, mode_set(m, shape))), q)


def _mode_probe_pairs(grid: GridSpec, n, dispersion: str = "discrete"):
    """Real probe pairs, recombination coefficients and trace scales for one mode."""
    bidx = boundary_index(grid)
    if tuple(n) == (0, 0):
        one = np.ones(len(bidx))
        return [(one, one)], [1.0 + 0j], [1.0]
    xi = mode_frequency(grid, n)
    pair = calderon_pair(grid, xi, dispersion=dispersion)
    # e^{2iξ·x} is measured from the box origin; the phase maps it to the box coordinate
    x0, y0 = grid.box[0], grid.box[1]
    phase = np.exp(2j * (xi[0] * x0 + xi[1] * y0))
    combo = real_expand([pair.b1, pair.b2])
    pairs, coefs, scales = [], [], []
    for coef, _, (w1, w2) in combo.terms:
        s1, s2 = np.max(np.abs(w1)), np.max(np.abs(w2))
        pairs.append((w1 / s1, w2 / s2))
        coefs.append(coef * phase)
        scales.append(float(s1 * s2))
    return pairs, coefs, scales


def recover_modes(access: DNAccess, r: float, ns, ladder: EpsilonLadder | None = None,
                  n_terms: int = 2, dispersion: str = "discrete") -> dict:
    """Per-mode estimates ``∫ q e^{-2πi n·x̃}`` (no Hermitian averaging)."""
    ladder = ladder or default_ladder()
    const = homogeneity_constants(r, 1)
    alpha = r - 1.0
    if not 0 < alpha < 1:
        raise ConfigError(f"first-order Fourier recovery needs 1 < r < 2, got r={r}")
    grid = access.grid
    f0 = np.ones(len(boundary_index(grid)))
    basis = tuple(i * correction_exponent(alpha) for i in range(n_terms))
    all_pairs, meta = [], []
    for n in ns:
        pairs, coefs, scales = _mode_probe_pairs(grid, n, dispersion)
        meta.append((tuple(n), len(all_pairs), coefs, scales))
        all_pairs += pairs
    limits, _ = pair_limits(access, f0, all_pairs, ladder, alpha, basis)
    out = {}
    for n, start, coefs, scales in meta:
        vals = limits[start:start + len(coefs)]
        total = 0j
        for c, s, lim in zip(coefs, scales, vals):
            total += c * s * lim.limit
        xi = tuple(float(x) for x in mode_frequency(grid, n)) if n != (0, 0) else (0.0, 0.0)
        out[n] = ModeEstimate(n, xi, total / const.c_r, sum(v.flagged for v in vals),
                              tuple(v.exponent for v in vals))
    return out


def recover_mode(access: DNAccess, r: float, xi, ladder: EpsilonLadder | None = None,
                 dispersion: str = "discrete") -> complex:
    """``∫ q e^{2iξ·x} dx`` (x from the box origin) for a single lattice frequency."""
    grid = access.grid
    x0, y0, x1, y1 = grid.box
    xi = np.asarray(xi, dtype=float)
    n = (-xi[0] * (x1 - x0) / np.pi, -xi[1] * (y1 - y0) / np.pi)
    if not all(abs(t - round(t)) < 1e-9 for t in n):
        raise ConfigError(f"ξ={xi.tolist()} is not on the box frequency lattice")
    n = (int(round(n[0])), int(round(n[1])))
    est = recover_modes(access, r, [n], ladder, dispersion=dispersion)[n].value
    phase = np.exp(2j * (xi[0] * x0 + xi[1] * y0))
    return complex(est * phase)


def recover_full(access: DNAccess, r: float, m: int = 4, ladder: EpsilonLadder | None = None,
                 shape: str = "disc", n_terms: int = 2,
                 dispersion: str = "discrete") -> tuple[np.ndarray, FourierEstimate]:
    """Fourier reconstruction of ``q`` from full-boundary DN data.

    Returns the synthesized field and the mode estimates.  More than a
    quarter of modes with a flagged pairing marks the result low-confidence.
    """
    ns = mode_set(m, shape)
    raw = recover_modes(access, r, ns, ladder, n_terms, dispersion)
    modes = {}
    for n in ns:
        nn = (-n[0], -n[1])
        modes[n] = 0.5 * (raw[n].value + np.conj(raw[nn].value))
    flagged = sum(1 for n in ns if raw[n].flagged)
    frac = flagged / len(ns)
    est = FourierEstimate(access.grid, modes, raw, frac > LOW_CONFIDENCE_FRACTION, frac)
    return est.synthesize(), est


# ----------------------------------------------------------------------------
# partial data


def cosine_basis(grid: GridSpec, d: int) -> np.ndarray:
    """``cos(aπx̃) cos(bπỹ)`` for ``0 <= a, b < √d``, shape ``(d, nx, ny)``."""
    p = int(round(math.sqrt(d)))
    if p * p != d:
        raise ConfigError(f"cosine basis dimension must be a perfect square, got {d}")
    x0, y0, x1, y1 = grid.box
    X, Y = grid.mesh()
    tx, ty = (X - x0) / (x1 - x0), (Y - y0) / (y1 - y0)
    return np.array([np.cos(a * np.pi * tx) * np.cos(b * np.pi * ty) for a in range(p) for b in range(p)])


def bspline_basis(grid: GridSpec, d: int, degree: int = 3) -> np.ndarray:
    """Tensor B-splines with ``√d`` uniform functions per axis, shape ``(d, nx, ny)``."""
    from scipy.interpolate import BSpline

    p = int(round(math.sqrt(d)))
    if p * p != d or p <= degree:
        raise ConfigError(f"B-spline basis needs a square dimension with more than {degree + 1}² functions")
    inner = np.linspace(0.0, 1.0, p - degree + 1)
    knots = np.concatenate([np.zeros(degree), inner, np.ones(degree)])
    x0, y0, x1, y1 = grid.box
    tx = (grid.x - x0) / (x1 - x0)
    ty = (grid.y - y0) / (y1 - y0)
    Bx = BSpline.design_matrix(np.clip(tx, 0, 1), knots, degree).toarray()
    By = BSpline.design_matrix(np.clip(ty, 0, 1), knots, degree).toarray()
    return np.array([np.outer(Bx[:, a], By[:, b]) for a in range(p) for b in range(p)])


def spatial_basis(grid: GridSpec, kind: str, d: int) -> np.ndarray:
    if kind == "cosine":
        return cosine_basis(grid, d)
    if kind == "bspline":
        return bspline_basis(grid, d)
    raise ConfigError(f"unknown basis {kind!r}")


def sine_pairs(n_pairs: int) -> list[tuple[int, int]]:
    """The first ``n_pairs`` index pairs ``m₁ <= m₂`` ordered by ``(m₂, m₁)``."""
    out, m2 = [], 1
    while len(out) < n_pairs:
        for m1 in range(1, m2 + 1):
            out.append((m1, m2))
            if len(out) == n_pairs:
                break
        m2 += 1
    return out


@dataclass(frozen=True, eq=False)
class TikhonovResult:
    coefficients: np.ndarray
    lam: float
    singular_values: np.ndarray
    residual: float

    def to_json(self) -> dict:
        return {"lambda": self.lam, "residual": self.residual,
                "singular_values": [float(s) for s in self.singular_values],
                "coefficients": [float(c) for c in self.coefficients]}


def tikhonov(A: np.ndarray, b: np.ndarray, lam: float | None = None, lam_scale: float = 1e-4) -> TikhonovResult:
    """``argmin ‖Ac - b‖² + λ‖c‖²``; default ``λ = lam_scale·‖A‖₂²``.

    Raises :class:`IllPosedError` when ``A`` carries no information or, for
    ``λ = 0``, is numerically rank deficient.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0.0 or not np.all(np.isfinite(s)):
        raise IllPosedError("system matrix carries no information", singular_values=s)
    lam = lam_scale * s[0] ** 2 if lam is None else float(lam)
    if lam < 0:
        raise ConfigError("regularization weight must be nonnegative")
    if lam == 0.0 and s[-1] <= s[0] * 1e-14 * max(A.shape):
        raise IllPosedError("unregularized system is rank deficient", singular_values=s)
    filt = s / (s**2 + lam)
    c = Vt.T @ (filt * (U.T @ b))
    res = float(np.linalg.norm(A @ c - b) / max(np.linalg.norm(b), 1e-300))
    return TikhonovResult(c, lam, s, res)


@dataclass(frozen=True, eq=False)
class PartialResult:
    field: np.ndarray
    solve: TikhonovResult
    flagged: int
    n_pairs: int
    basis: str

    def to_json(self) -> dict:
        return {"basis": self.basis, "pairs": self.n_pairs, "flagged_pairings": self.flagged,
                "tikhonov": self.solve.to_json()}


def recover_partial(access: DNAccess, r: float, mask: SupportMask | None = None, basis: str = "bspline",
                    d: int = 25, n_pairs: int = 200, lam: float | None = None, lam_scale: float = 1e-4,
                    ladder: EpsilonLadder | None = None, f0=None, probe_pairs=None,
                    row_normalize: bool = False, n_terms: int = 2) -> PartialResult:
    """Regularized recovery of ``q`` from DN data on a boundary part ``Γ``.

    Each probe pair ``(f₁, f₂)`` supported in ``Γ`` yields the limit
    ``c_r ∫ q |v₀|^{r-1} v₁ v₂``; with ``q = Σ c_j φ_j`` this is the row
    ``A_pj = ∫ φ_j W v₁ v₂``, ``W = c_r |v₀|^{r-1}``, built from discrete
    harmonic extensions.  The default probes are the sine family along
    ``Γ`` and ``f₀`` is a positive bump on ``Γ``.
    """
    ladder = ladder or default_ladder()
    alpha = r - 1.0
    if not 0 < alpha < 1:
        raise ConfigError(f"first-order partial recovery needs 1 < r < 2, got r={r}")
    const = homogeneity_constants(r, 1)
    grid = access.grid
    bidx = boundary_index(grid)
    mask = mask if mask is not None else access.mask
    if mask is None:
        raise ConfigError("partial recovery needs a boundary mask")
    if f0 is None:
        f0 = positive_probe(bidx, mask, "bump")
    f0 = np.asarray(f0, dtype=float)
    if probe_pairs is None:
        fam = {}
        probe_pairs = []
        for m1, m2 in sine_pairs(n_pairs):
            for m in (m1, m2):
                if m not in fam:
                    fam[m] = sine_family(bidx, mask, m)
            probe_pairs.append((fam[m1], fam[m2]))
    probe_pairs = [(np.asarray(a, dtype=float), np.asarray(b, dtype=float)) for a, b in probe_pairs]
    outside = ~mask.indicator(len(bidx))
    for a, b in probe_pairs:
        if np.any(a[outside] != 0) or np.any(b[outside] != 0):
            raise ConfigError("partial-data probes must vanish outside the mask")

    basis_exp = tuple(i * correction_exponent(alpha) for i in range(n_terms))
    limits, _ = pair_limits(access, f0, probe_pairs, ladder, alpha, basis_exp)
    rhs = np.array([lim.limit for lim in limits])

    phis = spatial_basis(grid, basis, d)
    uniq = {}
    for a, b in probe_pairs:
        for f in (a, b):
            uniq.setdefault(f.tobytes(), f)
    keys = list(uniq)
    ext = harmonic_extensions(grid, np.array([f0] + [uniq[k] for k in keys]))
    v0, vs = ext[0], dict(zip(keys, ext[1:]))
    W = const.c_r * np.abs(v0) ** alpha * grid.area_weights()
    rows = []
    for a, b in probe_pairs:
        prod = W * vs[a.tobytes()] * vs[b.tobytes()]
        rows.append(np.tensordot(phis, prod, axes=([1, 2], [0, 1])))
    A = np.array(rows)
    if row_normalize:
        norms = np.linalg.norm(A, axis=1)
        norms[norms == 0] = 1.0
        A, rhs = A / norms[:, None], rhs / norms
    sol = tikhonov(A, rhs, lam, lam_scale)
    field_ = np.tensordot(sol.coefficients, phis, axes=1)
    return PartialResult(field_, sol, sum(l.flagged for l in limits), len(probe_pairs), basis)


# ----------------------------------------------------------------------------
# staged recovery of polyhomogeneous terms


def expansion_powers(exponents, count: int = 12) -> list[float]:
    """Smallest values of ``Σ n_l (r_l - 1)`` with integer ``n_l >= 0``, not all zero.

    These are the powers of ``ε₀`` appearing in the first-order pairing of a
    power-sum nonlinearity with ``v₀ ≡ 1``.
    """
    gaps = sorted(r - 1.0 for r in exponents)
    found = {0.0}
    frontier = [0.0]
    out = set()
    while frontier:
        nxt = []
        for p in frontier:
            for gp in gaps:
                v = round(p + gp, 12)
                if v not in found and v <= gaps[0] * count + gaps[-1]:
                    found.add(v)
                    out.add(v)
                    nxt.append(v)
        frontier = nxt
    return sorted(out)[:count]


def stage_basis(exponents, stage: int, n_basis: int) -> tuple:
    """Relative fit exponents for stage ``stage`` (0-based).

    Powers below ``r_l - 1`` come from imperfect subtraction of earlier
    stages and are kept in the basis so they can be fitted out.
    """
    target = exponents[stage] - 1.0
    rel = [round(p - target, 12) for p in expansion_powers(exponents, 4 * n_basis)]
    below = [p for p in rel if p < 0]
    above = [p for p in rel if p >= 0]
    if 0.0 not in above:
        above = [0.0] + above
    return tuple(below + above[: max(1, n_basis - len(below))])


@dataclass(frozen=True, eq=False)
class StageRecord:
    r: float
    field: np.ndarray
    estimate: FourierEstimate
    basis: tuple
    residual_norm: float

    def to_json(self) -> dict:
        return {"r": self.r, "basis": list(self.basis), "residual_norm": self.residual_norm,
                "flagged_fraction": self.estimate.flagged_fraction,
                "low_confidence": self.estimate.low_confidence}


@dataclass
class StageLedger:
    """Per-stage exponents, recovered fields and post-subtraction residuals."""

    stages: list = field(default_factory=list)

    def append(self, rec: StageRecord) -> None:
        if self.stages and rec.r <= self.stages[-1].r:
            raise ConfigError("stage exponents must be strictly increasing")
        if not np.all(np.isfinite(rec.field)):
            raise ExtractionError(f"stage r={rec.r} produced a non-finite field")
        self.stages.append(rec)

    def __len__(self):
        return len(self.stages)

    def fields(self) -> list[np.ndarray]:
        return [s.field for s in self.stages]

    def spec(self, grid: GridSpec) -> NonlinearitySpec:
        return NonlinearitySpec(tuple(PowerTerm(s.field, s.r) for s in self.stages))

    def to_json(self) -> dict:
        return {"stages": [s.to_json() for s in self.stages]}


def _mode_series(access, f0, all_pairs, ladder):
    dirs, tests = [], []
    for w, w2 in all_pairs:
        dirs += [w, w2]
        tests += [w2, w]
    series = pairing_table(access, f0, dirs, tests, ladder)
    return [_symmetric_series(series[2 * p], series[2 * p + 1]) for p in range(len(all_pairs))]


def staged_recovery(access: DNAccess, exponents, ladder: EpsilonLadder | None = None, m: int = 4,
                    shape: str = "disc", n_basis=None, dispersion: str = "discrete",
                    sim_opts: ForwardOptions | None = None, jobs: int = 1) -> StageLedger:
    """Recover ``q_1, …, q_L`` of ``a = Σ q_l |u|^{r_l-1} u`` stage by stage.

    Every stage uses the same Fourier probe pairs and ladder with ``f₀ ≡ 1``.
    Stage ``l`` subtracts the pairings predicted by the stages recovered so
    far, obtained by running the same DN stencil on a solver loaded with the
    recovered coefficients, then extrapolates ``D(ε₀)/ε₀^{r_l-1}``.
    """
    exponents = [float(r) for r in exponents]
    if any(b <= a for a, b in zip(exponents, exponents[1:])) or exponents[0] <= 1:
        raise ConfigError("stage exponents must satisfy 1 < r_1 < r_2 < ...")
    ladder = ladder or EpsilonLadder.geometric(0.03, 0.6, 8)
    n_basis = list(n_basis) if n_basis is not None else [3] + [4] * (len(exponents) - 1)
    grid = access.grid
    f0 = np.ones(len(boundary_index(grid)))
    ns = mode_set(m, shape)
    all_pairs, meta = [], []
    for n in ns:
        pairs, coefs, scales = _mode_probe_pairs(grid, n, dispersion)
        meta.append((n, len(all_pairs), coefs, scales))
        all_pairs += pairs
    measured = _mode_series(access, f0, all_pairs, ladder)
    sim_opts = sim_opts or ForwardOptions(smallness_gate=1.0)
    eps = ladder.as_array()

    ledger = StageLedger()
    for stage, r in enumerate(exponents):
        if stage == 0 or not any(np.any(f) for f in ledger.fields()):
            vals = [s.values for s in measured]
        else:
            model = LiveDN(grid, ledger.spec(grid), sim_opts, access.mask, access.kind, jobs)
            predicted = _mode_series(model, f0, all_pairs, ladder)
            vals = [s.values - p.values for s, p in zip(measured, predicted)]
        basis = stage_basis(exponents, stage, n_basis[stage])
        scale_exp = r - 1.0
        lims = []
        for v, s in zip(vals, measured):
            fit = fit_limit(eps, v, scale_exp, basis, noise_scale=s.scale, accept_subleading=True,
                            expected_exponent=scale_exp + min(basis))
            flagged = False
            if not fit.zero_signal:
                # the slope check is informative only when no leak terms are fitted
                flagged = min(basis) == 0.0 and fit.flagged
            lims.append(PairLimit(fit.limit, fit.exponent, flagged, fit.zero_signal))
        c_r = homogeneity_constants(r, 1).c_r
        raw = {}
        for n, start, coefs, scales in meta:
            chunk = lims[start:start + len(coefs)]
            total = sum((c * s * lim.limit for c, s, lim in zip(coefs, scales, chunk)), 0j)
            xi = tuple(float(x) for x in mode_frequency(grid, n)) if n != (0, 0) else (0.0, 0.0)
            raw[n] = ModeEstimate(n, xi, total / c_r, sum(l.flagged for l in chunk),
                                  tuple(l.exponent for l in chunk))
        modes = {n: 0.5 * (raw[n].value + np.conj(raw[(-n[0], -n[1])].value)) for n in ns}
        frac = sum(1 for n in ns if raw[n].flagged) / len(ns)
        est = FourierEstimate(grid, modes, raw, frac > LOW_CONFIDENCE_FRACTION, frac)
        resid = float(max(np.max(np.abs(v / eps**scale_exp)) for v in vals))
        ledger.append(StageRecord(r, est.synthesize(), est, basis, resid))
        log.info("stage %d (r=%.3g): flagged %.0f%%", stage + 1, r, 100 * frac)
    return ledger
