"""Five-point Laplacian with Dirichlet elimination and its linear solves."""

from __future__ import annotations

import functools
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError
from .grid import GridSpec, boundary_index

DIRECT_MAX_N = 129
DEFAULT_TOL = 1e-10


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    residual_norm: float
    method: str

    def to_json(self) -> dict:
        return {"iterations": self.iterations, "residual_norm": self.residual_norm,
                "method": self.method}


@dataclass(eq=False)
class SparseOperator:
    """Interior system ``(-Δ_h - c) u_I = rhs - B u_B`` for one grid.

    ``matrix`` acts on interior unknowns (C-order of the interior block),
    ``coupling`` maps boundary values (boundary order) into the interior
    right-hand side.  The LU factor is built lazily once and shared by all
    later solves.
    """

    grid: GridSpec
    matrix: sp.csr_matrix
    coupling: sp.csr_matrix
    _lu: object = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def shape(self):
        return self.matrix.shape

    def factor(self):
        with self._lock:
            if self._lu is None:
                self._lu = spla.splu(self.matrix.tocsc())
            return self._lu

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_lu"] = None
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()


@functools.lru_cache(maxsize=8)
def _laplacian_blocks(grid: GridSpec):
    """``-Δ_h`` rows for interior nodes split into interior/boundary columns."""
    nx, ny, h = grid.nx, grid.ny, grid.h
    mi, mj = nx - 2, ny - 2
    inv_h2 = 1.0 / h**2

    I, J = np.meshgrid(np.arange(1, nx - 1), np.arange(1, ny - 1), indexing="ij")
    I, J = I.ravel(), J.ravel()
    row = (I - 1) * mj + (J - 1)

    bidx = boundary_index(grid)
    bpos = -np.ones((nx, ny), dtype=int)
    bpos[bidx.i, bidx.j] = np.arange(len(bidx))

    rows_a, cols_a, vals_a = [row], [row], [np.full(row.size, 4.0 * inv_h2)]
    rows_b, cols_b = [], []
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ni, nj = I + di, J + dj
        inside = (ni >= 1) & (ni <= nx - 2) & (nj >= 1) & (nj <= ny - 2)
        rows_a.append(row[inside])
        cols_a.append((ni[inside] - 1) * mj + (nj[inside] - 1))
        vals_a.append(np.full(inside.sum(), -inv_h2))
        rows_b.append(row[~inside])
        cols_b.append(bpos[ni[~inside], nj[~inside]])
    n_int = mi * mj
    A = sp.csr_matrix((np.concatenate(vals_a), (np.concatenate(rows_a), np.concatenate(cols_a))),
                      shape=(n_int, n_int))
    rb = np.concatenate(rows_b)
    B = sp.csr_matrix((np.full(rb.size, -inv_h2), (rb, np.concatenate(cols_b))),
                      shape=(n_int, len(bidx)))
    A.sort_indices()
    B.sort_indices()
    return A, B


@functools.lru_cache(maxsize=8)
def laplace_operator(grid: GridSpec) -> SparseOperator:
    """Shared ``-Δ_h`` operator for harmonic extensions and Picard steps."""
    return assemble_laplacian(grid)


def assemble_laplacian(grid: GridSpec, zeroth_order=None) -> SparseOperator:
    """Assemble ``-Δ_h - c`` on interior nodes.

    Parameters
    ----------
    grid : GridSpec
    zeroth_order : (nx, ny) array or None
        Coefficient ``c(x)``; only interior values are used.  With ``c``
        the first-linearization coefficient ``∂_y a(x, u)`` this is the
        Newton operator of ``Δu + a(x, u) = 0``.
    """
    A, B = _laplacian_blocks(grid)
    if zeroth_order is not None:
        c = np.asarray(zeroth_order, dtype=float)
        if c.shape != grid.shape:
            raise ValueError(f"zeroth-order field has shape {c.shape}, expected {grid.shape}")
        A = (A - sp.diags(c[1:-1, 1:-1].ravel())).tocsr()
    return SparseOperator(grid, A, B)


def interior(grid: GridSpec, u: np.ndarray) -> np.ndarray:
    return np.asarray(u)[1:-1, 1:-1].ravel()


def embed(grid: GridSpec, u_int: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Full node field from interior values and boundary data."""
    bidx = boundary_index(grid)
    u = np.empty(grid.shape)
    u[1:-1, 1:-1] = u_int.reshape(grid.nx - 2, grid.ny - 2)
    u[bidx.i, bidx.j] = f
    return u


def apply_laplacian(grid: GridSpec, u: np.ndarray) -> np.ndarray:
    """Five-point ``Δ_h u`` on interior nodes, as an ``(nx-2, ny-2)`` array."""
    h2 = grid.h**2
    return (u[2:, 1:-1] + u[:-2, 1:-1] + u[1:-1, 2:] + u[1:-1, :-2] - 4.0 * u[1:-1, 1:-1]) / h2


def _choose_method(grid: GridSpec, method: str) -> str:
    if method == "auto":
        return "direct" if max(grid.nx, grid.ny) <= DIRECT_MAX_N else "cg"
    if method not in ("direct", "cg"):
        raise ValueError(f"unknown linear solver method {method!r}")
    return method


def solve_dirichlet(A: SparseOperator, rhs, f, tol: float = DEFAULT_TOL, method: str = "auto",
                    maxiter: int | None = None):
    """Solve ``A u = rhs`` on interior nodes with ``u = f`` on the boundary.

    ``rhs`` is a node field (interior values used) or a scalar.  The
    reported residual is ``‖A u_I - b‖_∞ h²/4 / max|u|`` and must not exceed
    ``tol``.  Conjugate gradients fall back to the direct factorization on
    grids with at most 129 nodes per axis.

    Returns
    -------
    u : (nx, ny) array
    report : SolveReport
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    grid = A.grid
    f = np.asarray(f, dtype=float)
    if np.isscalar(rhs) or np.ndim(rhs) == 0:
        r_int = np.full(grid.n_interior, float(rhs))
    else:
        r_int = interior(grid, rhs)
    if not (np.all(np.isfinite(r_int)) and np.all(np.isfinite(f))):
        raise ValueError("non-finite right-hand side or boundary data")
    b = r_int - A.coupling @ f
    method = _choose_method(grid, method)

    scale = 4.0 / grid.h**2

    def residual(x):
        umax = max(np.max(np.abs(x), initial=0.0), np.max(np.abs(f), initial=0.0))
        if umax == 0.0:
            return 0.0
        return float(np.max(np.abs(A.matrix @ x - b), initial=0.0) / scale / umax)

    if method == "cg":
        diag = A.matrix.diagonal()
        M = spla.LinearOperator(A.shape, matvec=lambda v: v / diag)
        count = [0]

        def cb(_):
            count[0] += 1

        x, info = spla.cg(A.matrix, b, rtol=tol * 1e-2, atol=0.0, M=M,
                          maxiter=maxiter or 10 * grid.n_interior, callback=cb)
        res = residual(x)
        if info == 0 and res <= tol:
            return embed(grid, x, f), SolveReport(count[0], res, "cg")
        if max(grid.nx, grid.ny) > DIRECT_MAX_N:
            raise SolverError("conjugate gradients did not converge",
                              report=SolveReport(count[0], res, "cg"))
        method = "direct"

    x = A.factor().solve(b)
    res = residual(x)
    if res > tol:
        raise SolverError(f"direct solve residual {res:.3e} above tolerance {tol:.1e}",
                          report=SolveReport(1, res, "direct"))
    return embed(grid, x, f), SolveReport(1, res, "direct")


def harmonic_extension(grid: GridSpec, f, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Discrete harmonic function with boundary values ``f``."""
    u, _ = solve_dirichlet(laplace_operator(grid), 0.0, f, tol=tol)
    return u


def harmonic_extensions(grid: GridSpec, fs) -> np.ndarray:
    """Harmonic extensions of the rows of ``fs``, shape ``(m, nx, ny)``."""
    fs = np.atleast_2d(np.asarray(fs, dtype=float))
    A = laplace_operator(grid)
    X = A.factor().solve(np.ascontiguousarray((-(A.coupling @ fs.T))))
    out = np.empty((fs.shape[0],) + grid.shape)
    bidx = boundary_index(grid)
    for k in range(fs.shape[0]):
        out[k, 1:-1, 1:-1] = X[:, k].reshape(grid.nx - 2, grid.ny - 2)
        out[k, bidx.i, bidx.j] = fs[k]
    return out


def poisson_zero_bc(grid: GridSpec, source: np.ndarray) -> np.ndarray:
    """Solve ``-Δ_h w = source`` with ``w = 0`` on the boundary."""
    nb = len(boundary_index(grid))
    w, _ = solve_dirichlet(laplace_operator(grid), source, np.zeros(nb))
    return w
