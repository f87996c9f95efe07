"""Small-data solutions of ``Δu + a(x, u) = 0`` with Dirichlet data.

Newton's method starts from the harmonic extension of the data and uses
the exact Jacobian ``Δ_h + ∂_y a(x, u)``.  Steps are halved while the
residual does not decrease; after ``max_newton // 2`` failed steps the solver
switches to the Picard iteration ``-Δ_h u_{m+1} = a(x, u_m)``, which
contracts for small data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .elliptic import (apply_laplacian, assemble_laplacian, harmonic_extension, laplace_operator,
                       poisson_zero_bc, solve_dirichlet)
from .errors import SmallnessError, SolverError
from .grid import GridSpec, boundary_index
from .nonlinearity import NonlinearitySpec, eval_a, eval_dy_a

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForwardOptions:
    """Forward solver settings.

    ``newton_tol`` bounds the interior residual ``‖Δ_h u + a(x,u)‖_∞``
    relative to ``‖f‖_∞``.  ``smallness_gate`` of ``None`` means the default
    ``0.1 / (1 + max_l ‖q_l‖_∞)``.
    """

    newton_tol: float = 1e-10
    max_newton: int = 30
    damping: float = 1.0
    picard_fallback: bool = True
    max_picard: int = 500
    smallness_gate: float | None = None
    max_halvings: int = 10

    def __post_init__(self):
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if self.max_newton < 1:
            raise ValueError("max_newton must be >= 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")

    def gate(self, spec: NonlinearitySpec) -> float:
        if self.smallness_gate is not None:
            return float(self.smallness_gate)
        return default_gate(spec)

    def to_json(self) -> dict:
        return {"newton_tol": self.newton_tol, "max_newton": self.max_newton,
                "damping": self.damping, "picard_fallback": self.picard_fallback,
                "max_picard": self.max_picard, "smallness_gate": self.smallness_gate}


def default_gate(spec: NonlinearitySpec) -> float:
    return 0.1 / (1.0 + spec.max_abs_q())


@dataclass(frozen=True, eq=False)
class ForwardSolution:
    u: np.ndarray
    iterations: int
    residual: float
    method: str
    smallness_ratio: float
    trace: list = field(default_factory=list)

    def report(self) -> dict:
        return {"iterations": self.iterations, "residual": self.residual, "method": self.method,
                "smallness_ratio": self.smallness_ratio}


def pde_residual(grid: GridSpec, spec: NonlinearitySpec, u: np.ndarray) -> np.ndarray:
    """Interior values of ``Δ_h u + a(x, u)``."""
    return apply_laplacian(grid, u) + eval_a(spec, u)[1:-1, 1:-1]


def solve_semilinear(grid: GridSpec, spec: NonlinearitySpec, f, opts: ForwardOptions | None = None):
    """Small solution of ``Δ_h u + a(x, u) = 0``, ``u = f`` on the boundary.

    Raises
    ------
    SmallnessError
        ``‖f‖_∞`` exceeds the smallness gate.
    SolverError
        Newton and the Picard fallback both failed; ``trace`` holds the
        residual history.
    """
    opts = opts or ForwardOptions()
    f = np.asarray(f, dtype=float)
    bidx = boundary_index(grid)
    if f.shape != (len(bidx),):
        raise ValueError(f"boundary data has shape {f.shape}, expected ({len(bidx)},)")
    fmax = float(np.max(np.abs(f), initial=0.0))
    gate = opts.gate(spec)
    if fmax > gate * (1 + 1e-12):
        raise SmallnessError(f"‖f‖_∞ = {fmax:.4g} exceeds smallness gate {gate:.4g}")
    if fmax == 0.0:
        return ForwardSolution(np.zeros(grid.shape), 0, 0.0, "trivial", 0.0)

    tol = opts.newton_tol * fmax
    u = harmonic_extension(grid, f)
    res = _resnorm(grid, spec, u)
    trace = [res]
    iterations, failures, method = 0, 0, "newton"

    while res > tol and iterations < opts.max_newton and failures < max(1, opts.max_newton // 2):
        iterations += 1
        F = pde_residual(grid, spec, u)
        A = assemble_laplacian(grid, eval_dy_a(spec, u))
        rhs = np.zeros(grid.shape)
        rhs[1:-1, 1:-1] = F
        try:
            du, _ = solve_dirichlet(A, rhs, np.zeros(len(bidx)), tol=1e-8)
        except SolverError:
            failures += 1
            continue
        step = opts.damping
        for _ in range(opts.max_halvings + 1):
            trial = u + step * du
            trial_res = _resnorm(grid, spec, trial)
            if trial_res < res:
                break
            step *= 0.5
        else:
            failures += 1
            trace.append(res)
            continue
        if step < opts.damping:
            failures += 1
        u, res = trial, trial_res
        trace.append(res)

    if res > tol and opts.picard_fallback:
        method = "picard"
        log.debug("newton stalled at residual %.3e, switching to picard", res)
        u, res, n_pic, ptrace = _picard(grid, spec, f, u, tol, opts.max_picard)
        iterations += n_pic
        trace.extend(ptrace)

    if not res <= tol:
        raise SolverError(f"forward solve did not converge (residual {res:.3e} > {tol:.3e})",
                          report={"iterations": iterations, "residual": res, "method": method},
                          trace=trace)
    umax = float(np.max(np.abs(u)))
    return ForwardSolution(u, iterations, res, method, umax / fmax, trace)


def _resnorm(grid, spec, u) -> float:
    return float(np.max(np.abs(pde_residual(grid, spec, u)), initial=0.0))


def _picard(grid, spec, f, u, tol, max_iter):
    A0 = laplace_operator(grid)
    trace = []
    res = _resnorm(grid, spec, u)
    for it in range(1, max_iter + 1):
        u, _ = solve_dirichlet(A0, eval_a(spec, u), f, tol=1e-8)
        res = _resnorm(grid, spec, u)
        trace.append(res)
        if res <= tol:
            return u, res, it, trace
        if not np.isfinite(res):
            break
    return u, res, max_iter, trace


def picard_solve(grid: GridSpec, spec: NonlinearitySpec, f, tol: float = 1e-13, max_iter: int = 2000):
    """Plain Picard iteration from zero; an independent route to the small solution."""
    f = np.asarray(f, dtype=float)
    u0 = np.zeros(grid.shape)
    u0[boundary_index(grid).i, boundary_index(grid).j] = f
    u, res, it, _ = _picard(grid, spec, f, u0, tol, max_iter)
    if res > tol:
        raise SolverError(f"picard did not converge (residual {res:.3e})")
    return u


def linearized_solve(grid: GridSpec, spec: NonlinearitySpec, u_base: np.ndarray, f) -> np.ndarray:
    """Solve ``(Δ_h + ∂_y a(x, u_base)) v = 0`` with ``v = f`` on the boundary."""
    A = assemble_laplacian(grid, eval_dy_a(spec, u_base))
    v, _ = solve_dirichlet(A, 0.0, np.asarray(f, dtype=float))
    return v


@dataclass(frozen=True, eq=False)
class ExpansionReport:
    eps: np.ndarray
    remainder: np.ndarray
    slope: float | None
    expected: float
    passed: bool
    w_direct: np.ndarray
    w_ladder: np.ndarray | None
    w_rel_diff: float | None

    def to_json(self) -> dict:
        return {"eps": self.eps.tolist(), "remainder": self.remainder.tolist(), "slope": self.slope,
                "expected_exponent": self.expected, "passed": self.passed,
                "w_rel_diff": self.w_rel_diff}


def expansion_check(grid: GridSpec, spec: NonlinearitySpec, f, eps, opts: ForwardOptions | None = None,
                    slack: float = 0.1) -> ExpansionReport:
    """Verify ``u_ε = εv + ε^(1+α) w + O(ε^(1+2α))`` for one term with ``1 < r < 2``.

    ``v`` is the harmonic extension of ``f`` and ``w`` solves
    ``Δ_h w = -q |v|^α v`` with zero boundary values.  The max-norm remainder
    is regressed against ``ε`` on a log-log scale; the check passes when the
    slope is at least ``1 + 2α - slack``.  ``w`` is also recovered per node by
    fitting ``(u_ε - εv)/ε^(1+α)`` against ``{1, ε^α}`` as a cross-check.
    """
    if len(spec) != 1 or not 1.0 < spec.terms[0].r < 2.0:
        raise ValueError("expansion check needs a single term with 1 < r < 2")
    term = spec.terms[0]
    alpha = term.r - 1.0
    eps = np.sort(np.asarray(eps, dtype=float))[::-1]
    f = np.asarray(f, dtype=float)
    v = harmonic_extension(grid, f)
    w = poisson_zero_bc(grid, term.value(v))

    rems, scaled = [], []
    for e in eps:
        u = solve_semilinear(grid, spec, e * f, opts).u
        rems.append(float(np.max(np.abs(u - e * v - e ** (1 + alpha) * w))))
        scaled.append(((u - e * v) / e ** (1 + alpha)).ravel())
    rems = np.asarray(rems)
    expected = 1.0 + 2.0 * alpha
    wmax = float(np.max(np.abs(w)))
    if wmax == 0.0:
        return ExpansionReport(eps, rems, None, expected, bool(np.all(rems <= 1e-14 * eps)), w, None, None)

    good = rems > 0
    slope = float(np.polyfit(np.log(eps[good]), np.log(rems[good]), 1)[0])
    basis = np.column_stack([np.ones_like(eps), eps**alpha])
    coef, *_ = np.linalg.lstsq(basis, np.asarray(scaled), rcond=None)
    w_ladder = coef[0].reshape(grid.shape)
    w_diff = float(np.max(np.abs(w_ladder - w)) / wmax)
    return ExpansionReport(eps, rems, slope, expected, slope >= expected - slack, w, w_ladder, w_diff)
