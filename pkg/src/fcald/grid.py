"""Uniform node grids on a rectangle, boundary indexing and quadrature.

Fields live on the closed box as ``(nx, ny)`` arrays indexed ``u[i, j]`` with
``x = x0 + i*h`` and ``y = y0 + j*h``.  Node ids follow the C-order flattening
``id = i*ny + j``.

Boundary nodes are listed counterclockwise starting at the corner
``(x0, y0)``: the bottom side (both corners), the right side without its
bottom corner, the top side without its right corner and the left side
without either corner.  A boundary function is a 1-D array in that order.
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SIDES = ("bottom", "right", "top", "left")
MIN_NODES = 8
# GridSpec itself only needs one interior node; build_grid enforces MIN_NODES
MIN_STENCIL_NODES = 3


@dataclass(frozen=True)
class GridSpec:
    """Square-cell node grid on ``[x0, x1] x [y0, y1]``."""

    box: tuple[float, float, float, float]
    nx: int
    ny: int

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x1 > x0 and y1 > y0):
            raise ConfigError(f"degenerate box {self.box}")
        if self.nx < MIN_STENCIL_NODES or self.ny < MIN_STENCIL_NODES:
            raise ConfigError(f"need at least {MIN_STENCIL_NODES} nodes per axis, got {self.nx}x{self.ny}")
        hx = (x1 - x0) / (self.nx - 1)
        hy = (y1 - y0) / (self.ny - 1)
        if abs(hx - hy) > 1e-12 * max(hx, hy):
            raise ConfigError(f"cells are not square: hx={hx}, hy={hy}")

    @property
    def h(self) -> float:
        return (self.box[2] - self.box[0]) / (self.nx - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def x(self) -> np.ndarray:
        x0, _, x1, _ = self.box
        xs = x0 + self.h * np.arange(self.nx)
        xs[-1] = x1
        return xs

    @property
    def y(self) -> np.ndarray:
        _, y0, _, y1 = self.box
        ys = y0 + self.h * np.arange(self.ny)
        ys[-1] = y1
        return ys

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate arrays ``(X, Y)`` of shape ``(nx, ny)``."""
        return np.meshgrid(self.x, self.y, indexing="ij")

    def interior_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[1:-1, 1:-1] = True
        return m

    @property
    def n_interior(self) -> int:
        return (self.nx - 2) * (self.ny - 2)

    def area_weights(self) -> np.ndarray:
        """Tensor-product trapezoid weights on all nodes."""
        return _area_weights(self)

    def integrate(self, values: np.ndarray) -> float:
        """Trapezoid quadrature of a node field over the box."""
        return float(np.sum(self.area_weights() * values))

    def sample(self, func) -> np.ndarray:
        X, Y = self.mesh()
        return np.asarray(func(X, Y), dtype=float) * np.ones(self.shape)

    def to_json(self) -> dict:
        return {"box": list(self.box), "n": self.nx}

    @classmethod
    def from_json(cls, data: dict) -> "GridSpec":
        try:
            box = data.get("box", [0.0, 0.0, 1.0, 1.0])
            n = int(data["n"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad grid config {data!r}") from exc
        return build_grid(box, n)

    def fingerprint(self) -> str:
        payload = json.dumps({"box": [float(b) for b in self.box], "nx": self.nx, "ny": self.ny},
                             sort_keys=True)
        return hashlib.blake2b(payload.encode(), digest_size=8).hexdigest()


def build_grid(box=(0.0, 0.0, 1.0, 1.0), n: int = 65) -> GridSpec:
    """Grid with ``n`` nodes along x and square cells.

    The node count along y follows from the box aspect ratio and must come
    out integral.
    """
    if len(box) != 4:
        raise ConfigError(f"box must be [x0, y0, x1, y1], got {box!r}")
    box = tuple(float(b) for b in box)
    n = int(n)
    if n < MIN_NODES:
        raise ConfigError(f"n must be >= {MIN_NODES}, got {n}")
    width, height = box[2] - box[0], box[3] - box[1]
    if width <= 0 or height <= 0:
        raise ConfigError(f"degenerate box {box}")
    h = width / (n - 1)
    ny_float = height / h + 1
    ny = int(round(ny_float))
    if abs(ny - ny_float) > 1e-9:
        raise ConfigError(f"box height {height} is not a multiple of h={h}")
    return GridSpec(box, n, ny)


@functools.lru_cache(maxsize=16)
def _area_weights(grid: GridSpec) -> np.ndarray:
    wx = np.full(grid.nx, grid.h)
    wx[[0, -1]] = grid.h / 2
    wy = np.full(grid.ny, grid.h)
    wy[[0, -1]] = grid.h / 2
    w = np.outer(wx, wy)
    w.setflags(write=False)
    return w


@dataclass(frozen=True, eq=False)
class BoundaryIndex:
    """Ordered boundary nodes with arc-length weights and outward normals.

    ``weights`` are trapezoid arc-length weights (corners carry ``h/2`` from
    each incident side).  ``s`` is the arc-length coordinate measured
    counterclockwise from ``(x0, y0)``.
    """

    grid: GridSpec
    i: np.ndarray
    j: np.ndarray
    weights: np.ndarray
    normals: np.ndarray
    s: np.ndarray
    side: np.ndarray
    corner: np.ndarray
    side_members: dict = field(repr=False)

    def __len__(self):
        return len(self.i)

    @property
    def ids(self) -> np.ndarray:
        return self.i * self.grid.ny + self.j

    @property
    def perimeter(self) -> float:
        return float(self.weights.sum())

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.grid.x[self.i], self.grid.y[self.j]])

    def trace(self, u: np.ndarray) -> np.ndarray:
        """Boundary values of a node field."""
        return u[self.i, self.j]

    def sample(self, func) -> np.ndarray:
        """Evaluate ``func(x, y)`` at the boundary nodes."""
        pts = self.points
        return np.asarray(func(pts[:, 0], pts[:, 1]), dtype=float) * np.ones(len(self))

    def integrate(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights, values))


@functools.lru_cache(maxsize=16)
def boundary_index(grid: GridSpec) -> BoundaryIndex:
    nx, ny, h = grid.nx, grid.ny, grid.h
    i_parts, j_parts, sides = [], [], []
    i_parts.append(np.arange(nx)); j_parts.append(np.zeros(nx, int)); sides += [0] * nx
    i_parts.append(np.full(ny - 1, nx - 1)); j_parts.append(np.arange(1, ny)); sides += [1] * (ny - 1)
    i_parts.append(np.arange(nx - 2, -1, -1)); j_parts.append(np.full(nx - 1, ny - 1)); sides += [2] * (nx - 1)
    i_parts.append(np.zeros(ny - 2, int)); j_parts.append(np.arange(ny - 2, 0, -1)); sides += [3] * (ny - 2)
    bi = np.concatenate(i_parts).astype(int)
    bj = np.concatenate(j_parts).astype(int)
    side = np.asarray(sides, dtype=int)

    corner = ((bi == 0) | (bi == nx - 1)) & ((bj == 0) | (bj == ny - 1))
    # edge-interior nodes get h, corners h/2 + h/2
    weights = np.full(len(bi), h)

    outward = np.array([[0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    normals = outward[side]
    s = np.concatenate([[0.0], np.cumsum(np.full(len(bi) - 1, h))])

    members = {}
    for k, name in enumerate(SIDES):
        on_side = {0: bj == 0, 1: bi == nx - 1, 2: bj == ny - 1, 3: bi == 0}[k]
        members[name] = np.flatnonzero(on_side)
    for arr in (bi, bj, weights, normals, s, side, corner):
        arr.setflags(write=False)
    return BoundaryIndex(grid, bi, bj, weights, normals, s, side, corner, members)


@dataclass(frozen=True, eq=False)
class SupportMask:
    """Subset Γ of the boundary, as sorted positions into the boundary order."""

    positions: np.ndarray
    label: str = ""

    def __post_init__(self):
        pos = np.unique(np.asarray(self.positions, dtype=int))
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return len(self.positions)

    def indicator(self, n_boundary: int) -> np.ndarray:
        ind = np.zeros(n_boundary, dtype=bool)
        ind[self.positions] = True
        return ind

    def to_list(self) -> list[int]:
        return [int(p) for p in self.positions]


def restrict_mask(bidx: BoundaryIndex, selector: str) -> SupportMask:
    """Select boundary nodes by side names or an arc-length range.

    ``selector`` is ``"all"``, side names joined by ``+`` (``"left+top"``),
    or ``"arc:s0:s1"`` for nodes with arc coordinate in ``[s0, s1]``.
    """
    sel = selector.strip().lower()
    if sel == "all":
        pos = np.arange(len(bidx))
    elif sel.startswith("arc:"):
        try:
            _, a, b = sel.split(":")
            s0, s1 = float(a), float(b)
        except ValueError as exc:
            raise ConfigError(f"bad arc selector {selector!r}") from exc
        pos = np.flatnonzero((bidx.s >= s0 - 1e-12) & (bidx.s <= s1 + 1e-12))
    else:
        parts = [p for p in sel.split("+") if p]
        unknown = [p for p in parts if p not in SIDES]
        if unknown or not parts:
            raise ConfigError(f"unknown boundary side(s) {unknown or selector!r}")
        pos = np.unique(np.concatenate([bidx.side_members[p] for p in parts]))
    if len(pos) == 0:
        raise ConfigError(f"selector {selector!r} selects no boundary nodes")
    return SupportMask(pos, label=sel)


def full_mask(bidx: BoundaryIndex) -> SupportMask:
    return SupportMask(np.arange(len(bidx)), label="all")


def mask_arc_parameter(bidx: BoundaryIndex, mask: SupportMask) -> np.ndarray:
    """Normalized arc parameter ``t in [0, 1]`` along a contiguous mask.

    Returned in the order of ``mask.positions``.  The full boundary is
    treated as a closed loop starting at ``(x0, y0)``.
    """
    nb = len(bidx)
    ind = mask.indicator(nb)
    if ind.all():
        return bidx.s[mask.positions] / bidx.perimeter
    starts = [p for p in mask.positions if not ind[(p - 1) % nb]]
    if len(starts) != 1:
        raise ConfigError(f"mask {mask.label!r} is not a single contiguous arc")
    start = starts[0]
    offset = (mask.positions - start) % nb
    length = offset.max()
    if length == 0:
        raise ConfigError("mask arc has zero length")
    return offset / length
