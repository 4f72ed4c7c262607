"""Gaussian quadrature rules: Legendre, Lobatto, Jacobi, composites, 2D products.

All constructors are pure and deterministic; rules are immutable after
construction.  Nodes are kept in canonical (strictly increasing) order and 2D
tensor rules in row-major order (x outer, y inner) so that every reduction has
a fixed, reproducible summation order.

Node computation uses Newton iteration on the three-term Jacobi recurrence
with cos-type initial guesses ``theta_k = (k + a/2 - 1/4) pi / (n + (a+b+1)/2)``
(the classical Chebyshev-like guess for Legendre), converging to machine
precision for n <= 512.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Rule1D",
    "Rule2D",
    "BoundaryRule",
    "gauss_legendre",
    "gauss_lobatto",
    "gauss_jacobi",
    "compose",
    "concat1d",
    "tensor_product",
    "difference",
    "polar_disk",
    "circle_boundary",
    "segment_boundary",
    "concat_boundary",
]

_NEWTON_TOL = 1e-15
_NEWTON_MAXIT = 100


@dataclass(frozen=True)
class Rule1D:
    """1D quadrature rule: sum(w_i * f(x_i)) approximates the integral on `interval`.

    For kind 'jacobi' the weight function (1-x)^alpha (1+x)^beta is folded into
    the weights, i.e. the rule approximates the *weighted* integral.
    """

    nodes: np.ndarray
    weights: np.ndarray
    interval: tuple[float, float]
    kind: str  # 'legendre' | 'lobatto' | 'jacobi'
    jacobi_ab: tuple[float, float] | None = None

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=np.float64)
        weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise ValueError("nodes and weights must be equal-length 1D arrays")
        if nodes.size > 1 and not np.all(np.diff(nodes) > 0):
            raise ValueError("nodes must be strictly increasing")
        if np.any(weights <= 0):
            raise ValueError("weights must be positive")
        a, b = self.interval
        if not (nodes.size == 0 or (a <= nodes[0] and nodes[-1] <= b)):
            raise ValueError("nodes must lie inside the interval")

    @property
    def n(self) -> int:
        return self.nodes.size

    def integrate(self, f) -> float:
        """Apply the rule to a callable or an array of node values."""
        vals = f(self.nodes) if callable(f) else np.asarray(f)
        return float(np.dot(self.weights, vals))


@dataclass(frozen=True)
class Rule2D:
    """2D quadrature rule over a list of planar points.

    `provenance` is 'tensor' (Cartesian product, row-major x-outer), 'polar_disk'
    or 'difference'.  Difference rules carry signed weights (outer minus inner);
    all other provenances have positive weights.  Tensor rules keep references to
    their 1D factors in `rx`, `ry` so separable evaluations can stay 1D.
    """

    points: np.ndarray
    weights: np.ndarray
    provenance: str
    rx: Rule1D | None = field(default=None, repr=False)
    ry: Rule1D | None = field(default=None, repr=False)

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] != w.size:
            raise ValueError("points must be (M, 2) with matching weights")
        if self.provenance != "difference" and np.any(w <= 0):
            raise ValueError("weights must be positive except for difference rules")

    @property
    def n(self) -> int:
        return self.weights.size

    def integrate(self, f) -> float:
        vals = f(self.points) if callable(f) else np.asarray(f)
        return float(np.dot(self.weights, vals))


@dataclass(frozen=True)
class BoundaryRule:
    """Quadrature along a curve with arc-length measure; weights sum to the length.

    `normals` (unit, per point) are set when the rule is used for flux jumps.
    """

    points: np.ndarray
    weights: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        if self.normals is not None:
            object.__setattr__(
                self, "normals", np.ascontiguousarray(self.normals, dtype=np.float64)
            )

    @property
    def n(self) -> int:
        return self.weights.size

    def integrate(self, f) -> float:
        vals = f(self.points) if callable(f) else np.asarray(f)
        return float(np.dot(self.weights, vals))


# ---------------------------------------------------------------------------
# Jacobi polynomial machinery
# ---------------------------------------------------------------------------


def _jacobi_eval(n: int, a: float, b: float, x: np.ndarray):
    """Values of P_n^(a,b) and P_{n-1}^(a,b) at x by the three-term recurrence."""
    x = np.asarray(x, dtype=np.float64)
    pm1 = np.ones_like(x)
    if n == 0:
        return pm1, np.zeros_like(x)
    p = 0.5 * (a + b + 2.0) * x + 0.5 * (a - b)
    for k in range(2, n + 1):
        c1 = 2.0 * k * (k + a + b) * (2.0 * k + a + b - 2.0)
        c2 = (2.0 * k + a + b - 1.0) * (a * a - b * b)
        c3 = (2.0 * k + a + b - 2.0) * (2.0 * k + a + b - 1.0) * (2.0 * k + a + b)
        c4 = 2.0 * (k + a - 1.0) * (k + b - 1.0) * (2.0 * k + a + b)
        p, pm1 = ((c2 + c3 * x) * p - c4 * pm1) / c1, p
    return p, pm1


def _jacobi_deriv(n: int, a: float, b: float, x: np.ndarray) -> np.ndarray:
    """d/dx P_n^(a,b)(x) = (n+a+b+1)/2 * P_{n-1}^(a+1,b+1)(x)."""
    if n == 0:
        return np.zeros_like(np.asarray(x, dtype=np.float64))
    p, _ = _jacobi_eval(n - 1, a + 1.0, b + 1.0, x)
    return 0.5 * (n + a + b + 1.0) * p


def _jacobi_nodes(n: int, a: float, b: float) -> np.ndarray:
    """Roots of P_n^(a,b), ascending, by Newton iteration from cos-type guesses."""
    k = np.arange(1, n + 1, dtype=np.float64)
    theta = (k + 0.5 * a - 0.25) * math.pi / (n + 0.5 * (a + b + 1.0))
    x = np.cos(theta)  # descending in x
    for _ in range(_NEWTON_MAXIT):
        p, _ = _jacobi_eval(n, a, b, x)
        dp = _jacobi_deriv(n, a, b, x)
        dx = p / dp
        x = x - dx
        if np.max(np.abs(dx)) < _NEWTON_TOL:
            break
    else:
        raise RuntimeError(f"Jacobi-node Newton iteration failed for n={n}, a={a}, b={b}")
    x = x[::-1].copy()
    if n > 1 and not np.all(np.diff(x) > 0):
        raise RuntimeError(f"Jacobi nodes failed to separate for n={n}, a={a}, b={b}")
    return x


# ---------------------------------------------------------------------------
# Rule constructors
# ---------------------------------------------------------------------------


def gauss_legendre(n: int) -> Rule1D:
    """n-point Gauss-Legendre rule on [-1, 1]; exact for degree <= 2n-1."""
    if n < 1:
        raise ValueError("gauss_legendre requires n >= 1")
    x = _jacobi_nodes(n, 0.0, 0.0)
    dp = _jacobi_deriv(n, 0.0, 0.0, x)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    return Rule1D(x, w, (-1.0, 1.0), "legendre")


def gauss_lobatto(n: int) -> Rule1D:
    """n-point Gauss-Lobatto rule on [-1, 1] including both endpoints.

    Exact for polynomials of degree <= 2n-3.  Interior nodes are the roots of
    P'_{n-1}, i.e. of the Jacobi polynomial P_{n-2}^(1,1).
    """
    if n < 2:
        raise ValueError("gauss_lobatto requires n >= 2")
    endpoint_w = 2.0 / (n * (n - 1.0))
    if n == 2:
        return Rule1D([-1.0, 1.0], [1.0, 1.0], (-1.0, 1.0), "lobatto")
    xi = _jacobi_nodes(n - 2, 1.0, 1.0)
    pnm1, _ = _jacobi_eval(n - 1, 0.0, 0.0, xi)
    wi = endpoint_w / (pnm1 * pnm1)
    x = np.concatenate(([-1.0], xi, [1.0]))
    w = np.concatenate(([endpoint_w], wi, [endpoint_w]))
    return Rule1D(x, w, (-1.0, 1.0), "lobatto")


def gauss_jacobi(n: int, alpha: float, beta: float) -> Rule1D:
    """n-point Gauss-Jacobi rule for the weight (1-x)^alpha (1+x)^beta on [-1, 1].

    sum(w_i f(x_i)) approximates  int_{-1}^{1} f(x) (1-x)^alpha (1+x)^beta dx,
    exactly for polynomials f of degree <= 2n-1.  Weights use

        w_i = 2^(a+b+1) Gamma(n+a+1) Gamma(n+b+1)
              / ( n! Gamma(n+a+b+1) (1-x_i^2) [P_n^(a,b)'(x_i)]^2 ).
    """
    if n < 1:
        raise ValueError("gauss_jacobi requires n >= 1")
    if alpha <= -1.0 or beta <= -1.0:
        raise ValueError("gauss_jacobi requires alpha > -1 and beta > -1")
    x = _jacobi_nodes(n, alpha, beta)
    dp = _jacobi_deriv(n, alpha, beta, x)
    logc = (
        (alpha + beta + 1.0) * math.log(2.0)
        + math.lgamma(n + alpha + 1.0)
        + math.lgamma(n + beta + 1.0)
        - math.lgamma(n + 1.0)
        - math.lgamma(n + alpha + beta + 1.0)
    )
    w = math.exp(logc) / ((1.0 - x * x) * dp * dp)
    return Rule1D(x, w, (-1.0, 1.0), "jacobi", jacobi_ab=(alpha, beta))


def compose(rule: Rule1D, target: tuple[float, float], m: int) -> Rule1D:
    """Composite rule: affine images of `rule` on m equal subintervals of `target`.

    Weights scale by (subinterval length / reference length).  Coincident
    subinterval endpoints (Lobatto) are merged, summing their weights, so the
    node sequence stays strictly increasing.
    """
    a, b = float(target[0]), float(target[1])
    if not a < b:
        raise ValueError("compose requires a non-degenerate interval a < b")
    if m < 1:
        raise ValueError("compose requires m >= 1")
    ra, rb = rule.interval
    s = (rule.nodes - ra) / (rb - ra)  # reference nodes mapped to [0, 1]
    scale = ((b - a) / m) / (rb - ra)
    bp = a + (b - a) * np.arange(m + 1) / m
    bp[0], bp[-1] = a, b
    nodes = []
    weights = []
    for i in range(m):
        # endpoints land exactly on bp[i], bp[i+1] so duplicates merge exactly
        xi = bp[i] * (1.0 - s) + bp[i + 1] * s
        wi = rule.weights * scale
        if nodes and xi[0] == nodes[-1][-1]:
            weights[-1][-1] += wi[0]
            xi, wi = xi[1:], wi[1:]
        nodes.append(xi)
        weights.append(wi.copy())
    return Rule1D(
        np.concatenate(nodes), np.concatenate(weights), (a, b), rule.kind, rule.jacobi_ab
    )


def concat1d(rules: list[Rule1D]) -> Rule1D:
    """Join rules on adjacent intervals into one rule; shared endpoints merge."""
    nodes = [rules[0].nodes]
    weights = [rules[0].weights.copy()]
    for r in rules[1:]:
        xi, wi = r.nodes, r.weights
        if xi[0] == nodes[-1][-1]:
            weights[-1][-1] += wi[0]
            xi, wi = xi[1:], wi[1:]
        nodes.append(xi)
        weights.append(wi.copy())
    kinds = {r.kind for r in rules}
    kind = kinds.pop() if len(kinds) == 1 else "legendre"
    interval = (rules[0].interval[0], rules[-1].interval[1])
    return Rule1D(np.concatenate(nodes), np.concatenate(weights), interval, kind)


def tensor_product(rx: Rule1D, ry: Rule1D) -> Rule2D:
    """Cartesian-product rule; points row-major (x outer, y inner), weights multiply."""
    X, Y = np.meshgrid(rx.nodes, ry.nodes, indexing="ij")
    W = np.multiply.outer(rx.weights, ry.weights)
    points = np.column_stack([X.ravel(), Y.ravel()])
    return Rule2D(points, W.ravel(), "tensor", rx=rx, ry=ry)


def difference(outer: Rule2D, inner: Rule2D) -> Rule2D:
    """Signed rule computing integral(outer region) - integral(inner region)."""
    points = np.vstack([outer.points, inner.points])
    weights = np.concatenate([outer.weights, -inner.weights])
    return Rule2D(points, weights, "difference")


def polar_disk(r_rule: Rule1D, n_theta: int) -> Rule2D:
    """Unit-disk rule from a radial rule on [0, 1] and n_theta equispaced angles.

    Point (r cos t, r sin t) carries weight w_r * r * (2 pi / n_theta); the
    equispaced (periodic trapezoid) angular rule is spectrally accurate for
    smooth integrands.
    """
    if n_theta < 4:
        raise ValueError("polar_disk requires n_theta >= 4")
    if not (abs(r_rule.interval[0]) < 1e-14 and abs(r_rule.interval[1] - 1.0) < 1e-14):
        raise ValueError("radial rule must live on [0, 1]")
    theta = 2.0 * math.pi * np.arange(n_theta) / n_theta
    # r = 0 nodes (Lobatto endpoint) carry zero measure; drop them
    keep = r_rule.nodes * r_rule.weights > 0
    r = r_rule.nodes[keep]
    R, T = np.meshgrid(r, theta, indexing="ij")
    points = np.column_stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()])
    w = np.multiply.outer(
        r_rule.weights[keep] * r, np.full(n_theta, 2.0 * math.pi / n_theta)
    )
    return Rule2D(points, w.ravel(), "polar_disk")


def circle_boundary(n_theta: int) -> BoundaryRule:
    """Equispaced rule on the unit circle with arc-length weights 2 pi / n_theta.

    Total weight equals the circumference 2 pi so that boundary norms are true
    line integrals.  Normals point radially outward.
    """
    if n_theta < 4:
        raise ValueError("circle_boundary requires n_theta >= 4")
    theta = 2.0 * math.pi * np.arange(n_theta) / n_theta
    points = np.column_stack([np.cos(theta), np.sin(theta)])
    weights = np.full(n_theta, 2.0 * math.pi / n_theta)
    return BoundaryRule(points, weights, normals=points.copy())


def segment_boundary(start, end, rule: Rule1D, normal=None) -> BoundaryRule:
    """Map a 1D rule onto the straight segment start -> end with arc-length weights."""
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    length = float(np.hypot(*(end - start)))
    ra, rb = rule.interval
    s = (rule.nodes - ra) / (rb - ra)
    points = start[None, :] * (1.0 - s[:, None]) + end[None, :] * s[:, None]
    weights = rule.weights * (length / (rb - ra))
    normals = None
    if normal is not None:
        normals = np.broadcast_to(
            np.asarray(normal, dtype=np.float64), points.shape
        ).copy()
    return BoundaryRule(points, weights, normals=normals)


def concat_boundary(rules: list[BoundaryRule]) -> BoundaryRule:
    """Concatenate boundary rules (e.g. the four edges of a rectangle)."""
    points = np.vstack([r.points for r in rules])
    weights = np.concatenate([r.weights for r in rules])
    normals = None
    if all(r.normals is not None for r in rules):
        normals = np.vstack([r.normals for r in rules])
    return BoundaryRule(points, weights, normals=normals)
