"""Artifact formats: field CSV, 8-bit PGM with a scaling sidecar, JSON, series CSV.

Field CSV layout: a ``# nx=..,ny=..,box=x0,y0,x1,y1`` header line, then one
row per ``y`` index (ascending), values ordered by ``x`` index.  Floats are
written with ``repr`` so files round-trip exactly and are byte-stable.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .grid import GridSpec, build_grid


def _num(x) -> str:
    return repr(float(x))


def write_field_csv(path, grid: GridSpec, u) -> Path:
    u = np.asarray(u, dtype=float)
    if u.shape != grid.shape:
        raise ValueError(f"field shape {u.shape} does not match grid {grid.shape}")
    path = Path(path)
    box = ",".join(_num(b) for b in grid.box)
    lines = [f"# nx={grid.nx},ny={grid.ny},box={box}"]
    for j in range(grid.ny):
        lines.append(",".join(_num(v) for v in u[:, j]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_field_csv(path) -> tuple[GridSpec, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"field file {path} does not exist")
    with path.open(encoding="utf-8") as fh:
        head = fh.readline().strip()
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    try:
        meta = dict(item.split("=", 1) for item in head.lstrip("# ").split(",", 2))
        nx, ny = int(meta["nx"]), int(meta["ny"])
        box = [float(b) for b in meta["box"].split(",")]
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed field header {head!r}") from exc
    grid = build_grid(box, nx)
    arr = np.asarray(rows, dtype=float)
    if grid.ny != ny or arr.shape != (ny, nx):
        raise ConfigError(f"{path}: data shape {arr.shape} does not match header ({ny}, {nx})")
    return grid, arr.T.copy()


def write_pgm(path, u) -> dict:
    """Binary P5 image (top row = largest ``y``) plus ``<path>.json`` scaling sidecar."""
    u = np.asarray(u, dtype=float)
    lo, hi = float(np.min(u)), float(np.max(u))
    span = hi - lo
    scaled = np.zeros_like(u) if span == 0 else (u - lo) / span
    img = np.rint(255.0 * scaled).astype(np.uint8).T[::-1]
    path = Path(path)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + img.tobytes())
    side = {"image": path.name, "min": lo, "max": hi, "scaling": "linear", "levels": 255,
            "orientation": "row 0 is the top edge (largest y)"}
    write_json(path.with_name(path.name + ".json"), side)
    return side


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps(obj), encoding="utf-8")
    return path


def write_rows_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path
