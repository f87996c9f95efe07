"""Power-sum nonlinearities ``a(x, y) = Σ_l q_l(x) |y|^(r_l-1) y``.

Every term is positively homogeneous of degree ``r_l > 1`` in ``y``.  A term
may carry a separate coefficient for negative ``y`` (``q_neg``), which
covers every positively homogeneous profile ``f(y)`` with ``f(1) = q`` and
``f(-1) = -q_neg``; the default is the odd form ``q_neg = q``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError

MAX_TERMS = 8


@dataclass(frozen=True, eq=False)
class PowerTerm:
    q: np.ndarray
    r: float
    q_neg: np.ndarray | None = None

    def __post_init__(self):
        r = float(self.r)
        if not r > 1.0:
            raise ConfigError(f"exponent must exceed 1, got {r}")
        q = np.array(self.q, dtype=float)
        if not np.all(np.isfinite(q)):
            raise ConfigError("coefficient field has non-finite values")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)
        if self.q_neg is not None:
            qn = np.array(self.q_neg, dtype=float)
            if qn.shape != q.shape or not np.all(np.isfinite(qn)):
                raise ConfigError("q_neg must be a finite field shaped like q")
            qn.setflags(write=False)
            object.__setattr__(self, "q_neg", qn)

    @property
    def k(self) -> int:
        return math.floor(self.r)

    @property
    def alpha(self) -> float:
        return self.r - self.k

    @property
    def is_fractional(self) -> bool:
        return self.alpha > 0.0

    @property
    def symmetric(self) -> bool:
        return self.q_neg is None

    def coefficient(self, u: np.ndarray) -> np.ndarray:
        if self.q_neg is None:
            return self.q
        return np.where(u >= 0, self.q, self.q_neg)

    def max_abs(self) -> float:
        m = float(np.max(np.abs(self.q), initial=0.0))
        if self.q_neg is not None:
            m = max(m, float(np.max(np.abs(self.q_neg), initial=0.0)))
        return m

    def value(self, u):
        u = np.asarray(u, dtype=float)
        return self.coefficient(u) * np.abs(u) ** (self.r - 1.0) * u

    def dy(self, u):
        u = np.asarray(u, dtype=float)
        return self.r * self.coefficient(u) * np.abs(u) ** (self.r - 1.0)


@dataclass(frozen=True, eq=False)
class NonlinearitySpec:
    """Ordered power terms with strictly increasing exponents."""

    terms: tuple = ()
    refs: tuple = field(default=(), compare=False)

    def __post_init__(self):
        terms = tuple(self.terms)
        if len(terms) > MAX_TERMS:
            raise ConfigError(f"at most {MAX_TERMS} terms supported, got {len(terms)}")
        rs = [t.r for t in terms]
        if any(b <= a for a, b in zip(rs, rs[1:])):
            raise ConfigError(f"exponents must be strictly increasing, got {rs}")
        shapes = {t.q.shape for t in terms}
        if len(shapes) > 1:
            raise ConfigError(f"coefficient fields on different grids: {shapes}")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def single(cls, q, r: float, q_neg=None) -> "NonlinearitySpec":
        return cls((PowerTerm(q, r, q_neg),))

    @classmethod
    def empty(cls) -> "NonlinearitySpec":
        return cls(())

    def __len__(self):
        return len(self.terms)

    @property
    def exponents(self) -> list[float]:
        return [t.r for t in self.terms]

    @property
    def is_empty(self) -> bool:
        return len(self.terms) == 0

    def max_abs_q(self) -> float:
        return max((t.max_abs() for t in self.terms), default=0.0)

    def truncated(self, n: int) -> "NonlinearitySpec":
        return NonlinearitySpec(self.terms[:n], self.refs[:n])

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        for t in self.terms:
            h.update(np.float64(t.r).tobytes())
            h.update(np.ascontiguousarray(t.q, dtype=np.float64).tobytes())
            if t.q_neg is not None:
                h.update(b"neg")
                h.update(np.ascontiguousarray(t.q_neg, dtype=np.float64).tobytes())
        return h.hexdigest()

    def to_json(self) -> dict:
        terms = []
        for idx, t in enumerate(self.terms):
            ref = self.refs[idx] if idx < len(self.refs) else None
            terms.append({"r": t.r, "q": ref})
        return {"terms": terms}


def homogeneity_constants(r: float, k: int | None = None):
    """``(r, k, alpha, c_r)`` with ``c_r = -r(r-1)...(r-(k-1))``."""
    k = math.floor(r) if k is None else int(k)
    if k < 1:
        raise DomainError(f"derivative order must be >= 1, got {k}")
    c = -r
    for j in range(1, k):
        c *= r - j
    return HomogeneityConstants(r=float(r), k=k, alpha=float(r - math.floor(r)), c_r=float(c))


@dataclass(frozen=True)
class HomogeneityConstants:
    r: float
    k: int
    alpha: float
    c_r: float


def eval_a(spec: NonlinearitySpec, u) -> np.ndarray:
    """Pointwise ``a(x, u(x))``; zero wherever ``u = 0``."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    for t in spec.terms:
        out = out + t.value(u)
    return out


def eval_dy_a(spec: NonlinearitySpec, u) -> np.ndarray:
    """Pointwise ``∂_y a(x, u(x)) = Σ r_l q_l |u|^(r_l-1)``."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    for t in spec.terms:
        out = out + t.dy(u)
    return out


def falling_factorial(r: float, k: int) -> float:
    out = 1.0
    for j in range(k):
        out *= r - j
    return out


def dky_power(r: float, k: int, y):
    """k-th derivative of ``|y|^(r-1) y``, i.e. ``-c_r |y|^(r-1) y^(1-k)``.

    Defined for ``1 <= k <= floor(r)``.  At ``k = floor(r)`` the derivative
    is only Hölder continuous at 0, where the continuous value 0 is returned.
    """
    k = int(k)
    if k < 1 or k > math.floor(r):
        raise DomainError(f"derivative order {k} outside 1..floor({r})")
    y = np.asarray(y, dtype=float)
    # |y|^(r-1) y^(1-k) = |y|^(r-k) sign(y)^(k-1)
    sign = np.sign(y) ** ((k - 1) % 2)
    return falling_factorial(r, k) * np.abs(y) ** (r - k) * sign


def remainder_bound_check(spec: NonlinearitySpec, N: int, ys, exponent_tol: float = 0.05):
    """Check ``|β_N| + |y||∂_y β_N| <= C_N |y|^(r_N)`` on sample values ``ys``.

    ``β_N = a - Σ_{l<N} b_l`` with 1-based stage ``N``.  The constant is fitted
    as the largest observed ratio and the decay exponent by log-log
    regression; the check holds when the remainder vanishes identically or
    decays at least like ``|y|^(r_N - exponent_tol)``.
    """
    ys = np.asarray(ys, dtype=float)
    if np.any(np.abs(ys) > 1.0) or np.any(ys == 0.0):
        raise ValueError("samples must satisfy 0 < |y| <= 1")
    if N < 1:
        raise ValueError("stage N is 1-based")
    head = spec.truncated(N - 1)
    rN = spec.terms[N - 1].r if N <= len(spec) else None
    vals = []
    for y in ys:
        u = np.full(spec.terms[0].q.shape if spec.terms else (1,), y)
        beta = eval_a(spec, u) - eval_a(head, u)
        dbeta = eval_dy_a(spec, u) - eval_dy_a(head, u)
        vals.append(np.max(np.abs(beta)) + abs(y) * np.max(np.abs(dbeta)))
    vals = np.asarray(vals)
    if np.all(vals == 0.0):
        return RemainderReport(N, rN, 0.0, None, True, vals)
    pos = vals > 0
    slope = float(np.polyfit(np.log(np.abs(ys[pos])), np.log(vals[pos]), 1)[0]) if pos.sum() > 1 else None
    if rN is None:
        return RemainderReport(N, None, float(vals.max()), slope, False, vals)
    C = float(np.max(vals / np.abs(ys) ** rN))
    holds = slope is not None and slope >= rN - exponent_tol
    return RemainderReport(N, rN, C, slope, bool(holds), vals)


@dataclass(frozen=True, eq=False)
class RemainderReport:
    stage: int
    exponent: float | None
    constant: float
    fitted_exponent: float | None
    holds: bool
    values: np.ndarray

    def to_json(self) -> dict:
        return {"stage": self.stage, "r_N": self.exponent, "C_N": self.constant,
                "fitted_exponent": self.fitted_exponent, "holds": self.holds}


def spec_from_terms(grid, terms, refs=None) -> NonlinearitySpec:
    """Build a spec from ``[(q_field_or_scalar, r), ...]`` sampled on ``grid``."""
    out = []
    for q, r in terms:
        q = np.broadcast_to(np.asarray(q, dtype=float), grid.shape).copy()
        out.append(PowerTerm(q, r))
    return NonlinearitySpec(tuple(out), tuple(refs or ()))


def spec_to_canonical_json(spec: NonlinearitySpec) -> str:
    return json.dumps({"exponents": spec.exponents, "fingerprint": spec.fingerprint()}, sort_keys=True)
