"""Dirichlet-to-Neumann maps, boundary pairings and DN data access.

Two discrete normal derivatives are provided.  ``"stencil"`` is the
pointwise one-sided second-order difference with corners set to zero.
``"weak"`` is the Green-identity flux: for a solution ``u`` it returns the
boundary values ``t`` with

    Σ_b s_b t_b g_b = E(u, G) - Σ_i A_i a(x_i, u_i) G_i

for every extension ``G`` of ``g``, where ``E`` is the edge energy of the
five-point stencil (edges along the boundary carry weight 1/2).  The weak
trace makes the discrete linear DN map exactly symmetric.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .elliptic import harmonic_extension, harmonic_extensions
from .errors import DatasetError
from .forward import ForwardOptions, solve_semilinear
from .grid import BoundaryIndex, GridSpec, SupportMask, boundary_index
from .nonlinearity import NonlinearitySpec, eval_a

log = logging.getLogger(__name__)

TRACE_KINDS = ("stencil", "weak")


@dataclass(frozen=True, eq=False)
class BoundaryFunction:
    """Values on the boundary nodes, optionally supported in a mask."""

    values: np.ndarray
    mask: SupportMask | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("boundary function must be a finite 1-D array")
        if self.mask is not None:
            outside = ~self.mask.indicator(len(v))
            if np.any(v[outside] != 0.0):
                raise ValueError("boundary function does not vanish outside its mask")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


def neumann_trace(grid: GridSpec, u: np.ndarray, kind: str = "stencil", spec=None) -> np.ndarray:
    """Outward normal derivative of a node field at the boundary nodes.

    ``kind="weak"`` needs the nonlinearity ``spec`` whose equation ``u``
    solves (``None`` for harmonic fields).
    """
    if kind == "stencil":
        return _stencil_trace(grid, u)
    if kind == "weak":
        return _weak_trace(grid, u, spec)
    raise ValueError(f"unknown trace kind {kind!r}")


def _stencil_trace(grid, u):
    u = np.asarray(u, dtype=float)
    if u.shape != grid.shape:
        raise ValueError(f"field has shape {u.shape}, expected {grid.shape}")
    bidx = boundary_index(grid)
    h = grid.h
    n = bidx.normals.astype(int)
    i, j = bidx.i, bidx.j
    # step inward along -normal
    i1, j1 = i - n[:, 0], j - n[:, 1]
    i2, j2 = i - 2 * n[:, 0], j - 2 * n[:, 1]
    out = (3.0 * u[i, j] - 4.0 * u[i1, j1] + u[i2, j2]) / (2.0 * h)
    out[bidx.corner] = 0.0
    return out


def _weak_trace(grid, u, spec):
    u = np.asarray(u, dtype=float)
    if u.shape != grid.shape:
        raise ValueError(f"field has shape {u.shape}, expected {grid.shape}")
    h = grid.h
    flux = np.zeros(grid.shape)
    # x-directed edges; those on the bottom/top rows lie along the boundary
    dx = u[1:, :] - u[:-1, :]
    wx = np.ones(dx.shape)
    wx[:, [0, -1]] = 0.5
    flux[:-1, :] -= wx * dx
    flux[1:, :] += wx * dx
    dy = u[:, 1:] - u[:, :-1]
    wy = np.ones(dy.shape)
    wy[[0, -1], :] = 0.5
    flux[:, :-1] -= wy * dy
    flux[:, 1:] += wy * dy
    bidx = boundary_index(grid)
    F = flux[bidx.i, bidx.j]
    if spec is not None and not spec.is_empty:
        area = np.where(bidx.corner, h * h / 4.0, h * h / 2.0)
        F = F - area * eval_a(spec, u)[bidx.i, bidx.j]
    return F / bidx.weights


def boundary_pairing(bidx: BoundaryIndex, g, h, include_corners: bool = False) -> float:
    """``Σ_b s_b g_b h_b``; corners are skipped unless ``include_corners``."""
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    if g.shape != (len(bidx),) or h.shape != (len(bidx),):
        raise ValueError("boundary functions do not match the boundary index")
    w = bidx.weights if include_corners else np.where(bidx.corner, 0.0, bidx.weights)
    return float(np.dot(w * g, h))


def dn_apply(grid: GridSpec, spec: NonlinearitySpec, f, opts: ForwardOptions | None = None,
             mask: SupportMask | None = None, kind: str = "stencil") -> np.ndarray:
    """``Λ_q f`` on the whole boundary, or zero outside ``mask`` when given."""
    if isinstance(f, BoundaryFunction):
        mask = mask if mask is not None else f.mask
        f = f.values
    u = solve_semilinear(grid, spec, f, opts).u
    out = neumann_trace(grid, u, kind, spec)
    if mask is not None:
        out = np.where(mask.indicator(len(out)), out, 0.0)
    return out


def linear_dn(grid: GridSpec, fs, kind: str = "stencil", mask: SupportMask | None = None) -> np.ndarray:
    """``Λ_0`` applied to the rows of ``fs``; needs no knowledge of ``q``."""
    fs = np.atleast_2d(np.asarray(fs, dtype=float))
    vs = harmonic_extensions(grid, fs)
    out = np.array([neumann_trace(grid, v, kind) for v in vs])
    if mask is not None:
        out[:, ~mask.indicator(out.shape[1])] = 0.0
    return out


def _fkey(f: np.ndarray) -> bytes:
    return np.ascontiguousarray(f, dtype=np.float64).tobytes()


class DNAccess:
    """Boundary-measurement oracle ``f ↦ Λ_q f`` (restricted to ``mask``).

    Reconstruction code sees only this interface.  ``background`` evaluates
    the linear map ``Λ_0`` of the same discretization, which involves no
    unknown coefficient.
    """

    grid: GridSpec
    mask: SupportMask | None
    kind: str

    def apply_many(self, fs) -> np.ndarray:
        raise NotImplementedError

    def apply(self, f) -> np.ndarray:
        return self.apply_many(np.asarray(f, dtype=float)[None, :])[0]

    def background(self, fs) -> np.ndarray:
        return linear_dn(self.grid, fs, self.kind, self.mask)

    @property
    def include_corners(self) -> bool:
        return self.kind == "weak"


def _solve_job(args):
    grid, spec, opts, kind, f = args
    u = solve_semilinear(grid, spec, f, opts).u
    return neumann_trace(grid, u, kind, spec)


class LiveDN(DNAccess):
    """Solver-backed DN oracle with a per-input cache."""

    def __init__(self, grid: GridSpec, spec: NonlinearitySpec, opts: ForwardOptions | None = None,
                 mask: SupportMask | None = None, kind: str = "stencil", jobs: int = 1):
        if kind not in TRACE_KINDS:
            raise ValueError(f"unknown trace kind {kind!r}")
        self.grid, self.spec, self.opts = grid, spec, opts or ForwardOptions()
        self.mask, self.kind, self.jobs = mask, kind, max(1, int(jobs))
        self._cache: dict[bytes, np.ndarray] = {}
        self.solves = 0

    def apply_many(self, fs) -> np.ndarray:
        fs = np.atleast_2d(np.asarray(fs, dtype=float))
        keys = [_fkey(f) for f in fs]
        todo, seen = [], set()
        for k, f in zip(keys, fs):
            if k not in self._cache and k not in seen:
                seen.add(k)
                todo.append((k, f))
        if todo:
            jobs = [(self.grid, self.spec, self.opts, self.kind, f) for _, f in todo]
            if self.jobs > 1 and len(jobs) > 1:
                with ProcessPoolExecutor(max_workers=min(self.jobs, len(jobs))) as pool:
                    results = list(pool.map(_solve_job, jobs, chunksize=max(1, len(jobs) // (4 * self.jobs))))
            else:
                results = [_solve_job(j) for j in jobs]
            for (k, _), r in zip(todo, results):
                if self.mask is not None:
                    r = np.where(self.mask.indicator(len(r)), r, 0.0)
                r.setflags(write=False)
                self._cache[k] = r
            self.solves += len(todo)
        return np.array([self._cache[k] for k in keys])

    def records(self):
        """Cached ``(f, Λf)`` pairs in insertion order."""
        for k, v in self._cache.items():
            yield np.frombuffer(k, dtype=np.float64), v


class RecordingDN(DNAccess):
    """Dry-run access that records every requested input and answers zeros."""

    def __init__(self, grid: GridSpec, mask: SupportMask | None = None, kind: str = "stencil"):
        self.grid, self.mask, self.kind = grid, mask, kind
        self.requests: dict[bytes, np.ndarray] = {}

    def apply_many(self, fs) -> np.ndarray:
        fs = np.atleast_2d(np.asarray(fs, dtype=float))
        for f in fs:
            self.requests.setdefault(_fkey(f), f.copy())
        return np.zeros_like(fs)

    def inputs(self) -> list[np.ndarray]:
        return list(self.requests.values())


@dataclass
class DNDataset:
    """Persisted measurement campaign, one JSON record per boundary input."""

    grid: GridSpec
    spec_fingerprint: str
    kind: str
    mask: SupportMask | None
    inputs: list
    outputs: list
    meta: dict | None = None

    def header(self) -> dict:
        return {"format": "fcald-dn/1", "grid": self.grid.to_json(), "grid_fingerprint": self.grid.fingerprint(),
                "spec_fingerprint": self.spec_fingerprint, "trace": self.kind,
                "mask": self.mask.to_list() if self.mask is not None else None,
                "records": len(self.inputs), "meta": self.meta or {}}

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
            for f, df in zip(self.inputs, self.outputs):
                fh.write(json.dumps(_record(f, df, self.mask)) + "\n")

    @classmethod
    def read(cls, path) -> "DNDataset":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise DatasetError(f"{path}: empty dataset file")
        head = json.loads(lines[0])
        if head.get("format") != "fcald-dn/1":
            raise DatasetError(f"{path}: not a DN dataset")
        grid = GridSpec.from_json(head["grid"])
        if grid.fingerprint() != head["grid_fingerprint"]:
            raise DatasetError(f"{path}: grid fingerprint mismatch")
        mask = SupportMask(head["mask"]) if head["mask"] is not None else None
        nb = len(boundary_index(grid))
        inputs, outputs = [], []
        for line in lines[1:]:
            rec = json.loads(line)
            f = np.asarray(rec["f"], dtype=float)
            df = np.zeros(nb)
            if rec["mask"] is None:
                df[:] = rec["df"]
            else:
                df[np.asarray(rec["mask"], dtype=int)] = rec["df"]
            inputs.append(f)
            outputs.append(df)
        return cls(grid, head["spec_fingerprint"], head["trace"], mask, inputs, outputs, head.get("meta"))

    @classmethod
    def from_live(cls, live: LiveDN, inputs, meta=None) -> "DNDataset":
        inputs = [np.asarray(f, dtype=float) for f in inputs]
        outputs = list(live.apply_many(inputs)) if inputs else []
        return cls(live.grid, live.spec.fingerprint(), live.kind, live.mask, inputs, outputs, meta)


def _record(f, df, mask):
    if mask is None:
        return {"f": [float(x) for x in f], "df": [float(x) for x in df], "mask": None}
    pos = mask.positions
    return {"f": [float(x) for x in f], "df": [float(x) for x in np.asarray(df)[pos]],
            "mask": [int(p) for p in pos]}


class DatasetDN(DNAccess):
    """DN access backed by a dataset; unknown inputs are refused, never interpolated."""

    def __init__(self, dataset: DNDataset):
        self.dataset = dataset
        self.grid, self.mask, self.kind = dataset.grid, dataset.mask, dataset.kind
        self._table = {_fkey(f): df for f, df in zip(dataset.inputs, dataset.outputs)}

    def apply_many(self, fs) -> np.ndarray:
        fs = np.atleast_2d(np.asarray(fs, dtype=float))
        out = []
        for f in fs:
            try:
                out.append(self._table[_fkey(f)])
            except KeyError:
                raise DatasetError("boundary input not present in the dataset "
                                   f"(‖f‖_∞ = {np.max(np.abs(f)):.4g})") from None
        return np.array(out)


class DifferenceDN(DNAccess):
    """``Λ_a - Λ_b + Λ_0``: difference data seen through the single-dataset interface.

    Every recovery path then estimates the difference of the two unknown
    coefficients; identical inputs give exactly ``Λ_0`` and a zero signal.
    """

    def __init__(self, a: DNAccess, b: DNAccess):
        if a.grid.fingerprint() != b.grid.fingerprint() or a.kind != b.kind:
            raise DatasetError("difference data needs matching grids and trace kinds")
        self.a, self.b = a, b
        self.grid, self.mask, self.kind = a.grid, a.mask, a.kind

    def apply_many(self, fs) -> np.ndarray:
        fs = np.atleast_2d(np.asarray(fs, dtype=float))
        return self.a.apply_many(fs) - self.b.apply_many(fs) + self.background(fs)


def check_compatible(a: DNDataset, b: DNDataset) -> None:
    """Refuse to combine datasets recorded on different grids or traces."""
    if a.grid.fingerprint() != b.grid.fingerprint():
        raise DatasetError("datasets were recorded on different grids")
    if a.kind != b.kind:
        raise DatasetError("datasets use different normal-derivative discretizations")


def dataset_digest(path) -> str:
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def default_jobs() -> int:
    return os.cpu_count() or 1
