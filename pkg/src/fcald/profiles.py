"""Named field and boundary-data profiles used by configs.

A profile is a string ``"kind:key=value,..."``, for example
``"gaussian:center=(0.5,0.5),sigma=0.15,amp=1"`` or ``"constant:1.0"``.
Values are Python literals.  ``expr:`` profiles accept an arithmetic
expression in the node coordinates, evaluated by a whitelist walker.
"""

from __future__ import annotations

import ast
import math
import operator
import re
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .grid import GridSpec, boundary_index, restrict_mask

FIELD_KINDS = ("constant", "gaussian", "bumps", "expr", "csv")
BOUNDARY_KINDS = ("constant", "cos", "sin", "bump", "expr")


def parse_profile(text: str) -> tuple[str, dict, list]:
    """Split ``"kind:args"`` into the kind, keyword and positional literals."""
    kind, _, rest = text.partition(":")
    kind = kind.strip()
    if not kind:
        raise ConfigError(f"empty profile kind in {text!r}")
    if kind in ("expr", "csv"):
        return kind, {}, [rest]
    if not rest.strip():
        return kind, {}, []
    src = f"_({rest})"
    try:
        call = ast.parse(src, mode="eval").body
        args = [_literal(a, src) for a in call.args]
        kwargs = {k.arg: _literal(k.value, src) for k in call.keywords}
    except (SyntaxError, ValueError) as exc:
        raise ConfigError(f"cannot parse profile {text!r}: {exc}") from None
    return kind, kwargs, args


_WORD = re.compile(r"[A-Za-z_][A-Za-z0-9_+]*")


def _literal(node, src: str):
    """Python literal, or the raw text for bare words such as ``left+top``."""
    try:
        return ast.literal_eval(node)
    except ValueError:
        raw = ast.get_source_segment(src, node)
        if raw is not None and _WORD.fullmatch(raw.replace(" ", "")):
            return raw.replace(" ", "")
        raise


def _take(kwargs: dict, allowed: dict, text: str) -> dict:
    extra = set(kwargs) - set(allowed)
    if extra:
        raise ConfigError(f"unknown parameters {sorted(extra)} in profile {text!r}")
    return {k: kwargs.get(k, v) for k, v in allowed.items()}


# ----------------------------------------------------------------------------
# restricted expressions

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNOPS = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCS = {name: getattr(np, name) for name in
          ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "sinh", "cosh", "tanh", "arctan", "minimum",
           "maximum", "sign")}
_CONSTS = {"pi": math.pi, "e": math.e}


def eval_expr(expr: str, names: dict) -> np.ndarray:
    """Evaluate an arithmetic expression over numpy arrays.

    Only numbers, the variables in ``names``, ``pi``/``e``, the operators
    ``+ - * / **`` and a fixed set of numpy functions are accepted.
    """
    try:
        tree = ast.parse(expr.strip(), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"bad expression {expr!r}: {exc.msg}") from None

    def walk(node):
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return node.value
        if isinstance(node, ast.Name):
            if node.id in names:
                return names[node.id]
            if node.id in _CONSTS:
                return _CONSTS[node.id]
            raise ConfigError(f"unknown name {node.id!r} in expression")
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](walk(node.left), walk(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            return _UNOPS[type(node.op)](walk(node.operand))
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS
                and not node.keywords):
            return _FUNCS[node.func.id](*(walk(a) for a in node.args))
        raise ConfigError(f"disallowed syntax {type(node).__name__} in expression {expr!r}")

    with np.errstate(all="ignore"):
        out = walk(tree)
    shape = np.broadcast(*names.values()).shape
    out = np.broadcast_to(np.asarray(out, dtype=float), shape).copy()
    if not np.all(np.isfinite(out)):
        raise ConfigError(f"expression {expr!r} produced non-finite values")
    return out


# ----------------------------------------------------------------------------
# interior fields


def gaussian(grid: GridSpec, center=(0.5, 0.5), sigma: float = 0.15, amp: float = 1.0) -> np.ndarray:
    X, Y = grid.mesh()
    return amp * np.exp(-((X - center[0]) ** 2 + (Y - center[1]) ** 2) / (2.0 * sigma**2))


def bumps(grid: GridSpec, centers=((0.3, 0.3), (0.7, 0.6)), sigma: float = 0.1, amp=1.0) -> np.ndarray:
    amps = amp if isinstance(amp, (list, tuple)) else [amp] * len(centers)
    if len(amps) != len(centers):
        raise ConfigError("bumps: amp list must match centers")
    out = np.zeros(grid.shape)
    for c, a in zip(centers, amps):
        out += gaussian(grid, c, sigma, a)
    return out


def make_field(grid: GridSpec, text: str, base: Path | None = None) -> np.ndarray:
    """Field profile sampled on ``grid``.

    ``csv:<path>`` loads a field written by :func:`fcald.io.write_field_csv`
    (relative to ``base``) and checks its grid header.
    """
    kind, kw, args = parse_profile(text)
    if kind == "constant":
        value = args[0] if args else kw.get("value", 1.0)
        return np.full(grid.shape, float(value))
    if kind == "gaussian":
        p = _take(kw, {"center": (0.5, 0.5), "sigma": 0.15, "amp": 1.0}, text)
        if p["sigma"] <= 0:
            raise ConfigError("gaussian sigma must be positive")
        return gaussian(grid, tuple(p["center"]), float(p["sigma"]), float(p["amp"]))
    if kind == "bumps":
        p = _take(kw, {"centers": ((0.3, 0.3), (0.7, 0.6)), "sigma": 0.1, "amp": 1.0}, text)
        return bumps(grid, p["centers"], float(p["sigma"]), p["amp"])
    if kind == "expr":
        X, Y = grid.mesh()
        return eval_expr(args[0], {"x": X, "y": Y})
    if kind == "csv":
        from .io import read_field_csv

        path = Path(args[0].strip())
        if base is not None and not path.is_absolute():
            path = base / path
        g2, field = read_field_csv(path)
        if g2.fingerprint() != grid.fingerprint():
            raise ConfigError(f"{path}: grid header does not match the configured grid")
        return field
    raise ConfigError(f"unknown field profile {kind!r} (expected one of {FIELD_KINDS})")


def profile_files(text: str) -> list[str]:
    kind, _, args = parse_profile(text)
    return [args[0].strip()] if kind == "csv" else []


# ----------------------------------------------------------------------------
# boundary data


def make_boundary(grid: GridSpec, text: str) -> np.ndarray:
    """Boundary-data profile on the boundary nodes.

    ``s`` is arc length from the start corner, ``x``/``y`` are the node
    coordinates.  ``cos:k=1`` is ``cos(kπs)``; ``bump:mask=left`` is the
    positive masked bump; ``sin:m=2,mask=left`` the masked sine family.
    """
    from .probes import positive_probe, sine_family

    bidx = boundary_index(grid)
    kind, kw, args = parse_profile(text)
    if kind == "constant":
        value = args[0] if args else kw.get("value", 1.0)
        return np.full(len(bidx), float(value))
    if kind == "cos":
        p = _take(kw, {"k": 1.0, "phase": 0.0}, text)
        return np.cos(p["k"] * np.pi * bidx.s + p["phase"])
    if kind == "sin":
        p = _take(kw, {"m": 1, "mask": "all"}, text)
        return sine_family(bidx, restrict_mask(bidx, p["mask"]), int(p["m"]))
    if kind == "bump":
        p = _take(kw, {"mask": "all", "profile": "bump"}, text)
        return positive_probe(bidx, restrict_mask(bidx, p["mask"]), p["profile"])
    if kind == "expr":
        pts = bidx.points
        return eval_expr(args[0], {"x": pts[:, 0], "y": pts[:, 1], "s": bidx.s})
    raise ConfigError(f"unknown boundary profile {kind!r} (expected one of {BOUNDARY_KINDS})")
