"""Catalog of 2D elliptic benchmark problems and their trial compositions.

Each problem provides: subdomains with piecewise-constant diffusion alpha, the
reaction coefficient beta, source f (per subdomain branch), interface flux-jump
data g, the exact solution with derivatives (when known), and a trial recipe --
a list of boundary-factor functions times networks whose sum vanishes on the
outer boundary and is continuous across every internal interface by
construction.

`build_rules` turns a problem plus resolution options into a `PreparedRules`
bundle: per-region volume rules, load rules for (f, v) (including the
Gauss-Jacobi splitting of the singular right-hand side), interface rules with
normals and g values, and the outer-boundary rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .quadrature import (
    BoundaryRule,
    Rule1D,
    Rule2D,
    circle_boundary,
    compose,
    concat1d,
    concat_boundary,
    difference,
    gauss_jacobi,
    gauss_legendre,
    gauss_lobatto,
    polar_disk,
    segment_boundary,
    tensor_product,
)

__all__ = [
    "AxisPoly",
    "ProductFactor",
    "RadialFactor",
    "TrialTerm",
    "RegionSpec",
    "InterfaceSpec",
    "ExactSolution",
    "ProblemSpec",
    "LoadPiece",
    "PreparedInterface",
    "PreparedRules",
    "catalog",
    "list_problems",
    "TEST_CASES",
    "build_rules",
    "homogenize_circle",
]


# ---------------------------------------------------------------------------
# Boundary factors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AxisPoly:
    """Low-degree polynomial in one variable with first two derivatives."""

    coeffs: tuple[float, ...]  # power basis, ascending

    def eval012(self, x):
        x = np.asarray(x, dtype=np.float64)
        v = np.zeros_like(x)
        d = np.zeros_like(x)
        s = np.zeros_like(x)
        for c in self.coeffs[::-1]:  # Horner on (value, value', value'')
            s = s * x + 2.0 * d
            d = d * x + v
            v = v * x + c
        return v, d, s


def vanish(a: float, b: float) -> AxisPoly:
    """(x - a)(b - x): vanishes at both interval endpoints."""
    return AxisPoly((-a * b, a + b, -1.0))


@dataclass(frozen=True)
class ProductFactor:
    """Separable boundary factor fx(x1) * fy(x2)."""

    fx: AxisPoly
    fy: AxisPoly

    separable = True

    def jets(self, points):
        vx, dx, sx = self.fx.eval012(points[:, 0])
        vy, dy, sy = self.fy.eval012(points[:, 1])
        grad = np.stack([dx * vy, vx * dy], axis=1)
        return vx * vy, grad, sx * vy + vx * sy


@dataclass(frozen=True)
class RadialFactor:
    """x1^2 + x2^2 - r^2: vanishes on the circle of radius r."""

    radius: float = 1.0

    separable = False

    def jets(self, points):
        v = points[:, 0] ** 2 + points[:, 1] ** 2 - self.radius**2
        return v, 2.0 * points.copy(), np.full(points.shape[0], 4.0)


@dataclass(frozen=True)
class TrialTerm:
    """One summand of the trial function: factor(x) * network(x) on its support."""

    name: str
    network: str
    regions: tuple[str, ...]
    factor: object


# ---------------------------------------------------------------------------
# Problem description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegionSpec:
    name: str
    alpha: float
    rect: tuple[tuple[float, float], tuple[float, float]] | None = None
    disk_radius: float | None = None  # disk centered at the origin
    minus_disk: float | None = None  # rect minus the disk of this radius


@dataclass(frozen=True)
class InterfaceSpec:
    """Internal interface segment with jump orientation side_a -> side_b."""

    name: str
    kind: str  # 'vline' | 'hline' | 'circle'
    position: float  # x (vline), y (hline) or radius (circle)
    span: tuple[float, float]  # parameter range along the segment
    side_a: str
    side_b: str
    normal: tuple[float, float] | None  # constant normal for straight segments


@dataclass(frozen=True)
class ExactSolution:
    """Branchwise exact solution; `region` selects the (smooth) branch."""

    value: object  # callable(points, region) -> (M,)
    gradient: object  # callable(points, region) -> (M, 2)
    laplacian: object  # callable(points, region) -> (M,)


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    label: str
    domain: tuple[tuple[float, float], tuple[float, float]]
    beta: float
    regions: tuple[RegionSpec, ...]
    interfaces: tuple[InterfaceSpec, ...]
    f: object  # callable(points, region) -> (M,)
    g: dict | None  # interface name -> callable(points) -> (M,)
    dirichlet: object | None  # nonzero boundary data b(points), None if homogeneous
    exact: ExactSolution | None
    trial_terms: tuple[TrialTerm, ...]
    params: dict = field(default_factory=dict)
    # evaluating u_N for metrics adds this background field (circle problem: b_N)
    offset_field: object | None = None

    def region_index(self, points) -> np.ndarray:
        """Branch selector with the paper's half-open conventions (omega1 first)."""
        return _REGION_INDEX[self.name.split(":")[0]](self, points)

    def region_named(self, name: str) -> RegionSpec:
        for r in self.regions:
            if r.name == name:
                return r
        raise KeyError(name)

    def alpha_of(self, name: str) -> float:
        return self.region_named(name).alpha

    def network_keys(self) -> tuple[str, ...]:
        seen = []
        for t in self.trial_terms:
            if t.network not in seen:
                seen.append(t.network)
        return tuple(seen)


# ---------------------------------------------------------------------------
# Shared sin-product helpers
# ---------------------------------------------------------------------------


def _sinsin(c, k1, k2):
    """c sin(k1 pi x) sin(k2 pi y) with gradient and Laplacian closures."""
    k1p, k2p = k1 * math.pi, k2 * math.pi

    def value(p):
        return c * np.sin(k1p * p[:, 0]) * np.sin(k2p * p[:, 1])

    def gradient(p):
        sx, cx = np.sin(k1p * p[:, 0]), np.cos(k1p * p[:, 0])
        sy, cy = np.sin(k2p * p[:, 1]), np.cos(k2p * p[:, 1])
        return np.stack([c * k1p * cx * sy, c * k2p * sx * cy], axis=1)

    def laplacian(p):
        return -(k1p**2 + k2p**2) * value(p)

    return value, gradient, laplacian


def _branch_exact(branches: dict) -> ExactSolution:
    """Exact solution from per-region (value, gradient, laplacian) triples."""

    def value(p, region):
        return branches[region][0](p)

    def gradient(p, region):
        return branches[region][1](p)

    def laplacian(p, region):
        return branches[region][2](p)

    return ExactSolution(value, gradient, laplacian)


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------


def _manufactured_beta(beta=1.0, kx=1, ky=1):
    val, grad, lap = _sinsin(1.0, kx, ky)
    omega = RegionSpec("omega", alpha=1.0, rect=((0.0, 1.0), (0.0, 1.0)))

    def f(p, region):
        return -lap(p) + beta * val(p)

    exact = _branch_exact({"omega": (val, grad, lap)})
    terms = (TrialTerm("main", "u", ("omega",), ProductFactor(vanish(0, 1), vanish(0, 1))),)
    return ProblemSpec(
        name="manufactured_beta",
        label=f"manufactured sine problem, beta={beta}",
        domain=((0.0, 1.0), (0.0, 1.0)),
        beta=float(beta),
        regions=(omega,),
        interfaces=(),
        f=f,
        g=None,
        dirichlet=None,
        exact=exact,
        trial_terms=terms,
        params={"beta": beta, "kx": kx, "ky": ky},
    )


def _abs_pow(t, e):
    """Sign-symmetric real power |t|^e (the singular factors are even in t)."""
    return np.abs(t) ** e


def _singular_laplace():
    # u = x(1-x) y(1-y) ( |x-1/2|^{4/3} + |y-1/2|^{4/3} ), -Laplace(u) = f
    def s(t):
        return _abs_pow(t, 4.0 / 3.0)

    def sp(t):
        return (4.0 / 3.0) * np.sign(t) * _abs_pow(t, 1.0 / 3.0)

    def spp(t):
        return (4.0 / 9.0) * _abs_pow(t, -2.0 / 3.0)

    def value(p, region=None):
        x, y = p[:, 0], p[:, 1]
        return x * (1 - x) * y * (1 - y) * (s(x - 0.5) + s(y - 0.5))

    def gradient(p, region=None):
        x, y = p[:, 0], p[:, 1]
        px, py = x * (1 - x), y * (1 - y)
        dpx, dpy = 1 - 2 * x, 1 - 2 * y
        gsum = s(x - 0.5) + s(y - 0.5)
        gx = dpx * py * gsum + px * py * sp(x - 0.5)
        gy = px * dpy * gsum + px * py * sp(y - 0.5)
        return np.stack([gx, gy], axis=1)

    def laplacian(p, region=None):
        x, y = p[:, 0], p[:, 1]
        px, py = x * (1 - x), y * (1 - y)
        dpx, dpy = 1 - 2 * x, 1 - 2 * y
        gsum = s(x - 0.5) + s(y - 0.5)
        lxx = -2 * py * gsum + 2 * dpx * py * sp(x - 0.5) + px * py * spp(x - 0.5)
        lyy = -2 * px * gsum + 2 * px * dpy * sp(y - 0.5) + px * py * spp(y - 0.5)
        return lxx + lyy

    def f(p, region=None):
        x, y = p[:, 0], p[:, 1]
        tx, ty = x - 0.5, y - 0.5
        bracket_x = _abs_pow(tx, -2.0 / 3.0) * ((70.0 / 9.0) * x * (x - 1) + 11.0 / 6.0)
        bracket_y = _abs_pow(ty, -2.0 / 3.0) * ((70.0 / 9.0) * y * (y - 1) + 11.0 / 6.0)
        return -y * (y - 1) * (bracket_x + 2.0 * s(ty)) - x * (x - 1) * (
            bracket_y + 2.0 * s(tx)
        )

    omega = RegionSpec("omega", alpha=1.0, rect=((0.0, 1.0), (0.0, 1.0)))
    exact = ExactSolution(value, gradient, laplacian)
    terms = (TrialTerm("main", "u", ("omega",), ProductFactor(vanish(0, 1), vanish(0, 1))),)
    return ProblemSpec(
        name="singular_laplace",
        label="Poisson problem with line singularities at x1=1/2, x2=1/2",
        domain=((0.0, 1.0), (0.0, 1.0)),
        beta=0.0,
        regions=(omega,),
        interfaces=(),
        f=f,
        g=None,
        dirichlet=None,
        exact=exact,
        trial_terms=terms,
        params={},
    )


def _two_material(
    alpha1=4.0,
    alpha2=1.0,
    c1=1.0,
    c2=1.0,
    k11=1,
    k12=2,
    k21=4,
    k22=2,
    x_if=2.0 / 3.0,
    name="two_material",
    label="two-material diffusion",
):
    v1, g1, l1 = _sinsin(c1, k11, k12)
    v2, g2, l2 = _sinsin(c2, k21, k22)
    r1 = RegionSpec("omega1", alpha=alpha1, rect=((0.0, x_if), (0.0, 1.0)))
    r2 = RegionSpec("omega2", alpha=alpha2, rect=((x_if, 1.0), (0.0, 1.0)))
    lap = {"omega1": l1, "omega2": l2}
    alpha = {"omega1": alpha1, "omega2": alpha2}

    def f(p, region):
        return -alpha[region] * lap[region](p)

    def g_gamma(p):
        y = p[:, 1]
        t1 = alpha1 * c1 * k11 * math.pi * math.cos(k11 * math.pi * x_if) * np.sin(
            k12 * math.pi * y
        )
        t2 = alpha2 * c2 * k21 * math.pi * math.cos(k21 * math.pi * x_if) * np.sin(
            k22 * math.pi * y
        )
        return t1 - t2

    exact = _branch_exact({"omega1": (v1, g1, l1), "omega2": (v2, g2, l2)})
    gamma = InterfaceSpec(
        "gamma", "vline", x_if, (0.0, 1.0), "omega1", "omega2", normal=(1.0, 0.0)
    )
    ey = vanish(0, 1)
    terms = (
        TrialTerm("left", "u1", ("omega1",), ProductFactor(vanish(0, x_if), ey)),
        TrialTerm("right", "u2", ("omega2",), ProductFactor(vanish(x_if, 1), ey)),
        TrialTerm("global", "u3", ("omega1", "omega2"), ProductFactor(vanish(0, 1), ey)),
    )
    return ProblemSpec(
        name=name,
        label=label,
        domain=((0.0, 1.0), (0.0, 1.0)),
        beta=0.0,
        regions=(r1, r2),
        interfaces=(gamma,),
        f=f,
        g={"gamma": g_gamma},
        dirichlet=None,
        exact=exact,
        trial_terms=terms,
        params={
            "alpha1": alpha1,
            "alpha2": alpha2,
            "c1": c1,
            "c2": c2,
            "k11": k11,
            "k12": k12,
            "k21": k21,
            "k22": k22,
            "x_if": x_if,
        },
    )


def _four_material(
    alphas=(4.0, 1.0, 1.0, 2.0),
    cs=(1.0, 4.0, 4.0, 2.0),
    ks=((1, 1), (1, 1), (1, 1), (1, 1)),
):
    rects = {
        "omega1": ((-1.0, 0.0), (-1.0, 0.0)),
        "omega2": ((0.0, 1.0), (-1.0, 0.0)),
        "omega3": ((-1.0, 0.0), (0.0, 1.0)),
        "omega4": ((0.0, 1.0), (0.0, 1.0)),
    }
    names = tuple(rects)
    regions = tuple(
        RegionSpec(n, alpha=alphas[i], rect=rects[n]) for i, n in enumerate(names)
    )
    branch = {}
    for i, n in enumerate(names):
        branch[n] = _sinsin(cs[i], ks[i][0], ks[i][1])

    def f(p, region):
        i = names.index(region)
        return -alphas[i] * branch[region][2](p)

    def seg_g(a_idx, b_idx, axis):
        # flux jump across x=0 (axis=0) or y=0 (axis=1); cos(k pi 0) = 1
        ka, kb = ks[a_idx], ks[b_idx]
        ca, cb = cs[a_idx], cs[b_idx]
        aa, ab = alphas[a_idx], alphas[b_idx]

        def g(p):
            t = p[:, 1] if axis == 0 else p[:, 0]
            ga = aa * ca * ka[axis] * math.pi * np.sin(ka[1 - axis] * math.pi * t)
            gb = ab * cb * kb[axis] * math.pi * np.sin(kb[1 - axis] * math.pi * t)
            return ga - gb

        return g

    interfaces = (
        InterfaceSpec("gamma_v_low", "vline", 0.0, (-1.0, 0.0), "omega1", "omega2", (1.0, 0.0)),
        InterfaceSpec("gamma_v_up", "vline", 0.0, (0.0, 1.0), "omega3", "omega4", (1.0, 0.0)),
        InterfaceSpec("gamma_h_left", "hline", 0.0, (-1.0, 0.0), "omega1", "omega3", (0.0, 1.0)),
        InterfaceSpec("gamma_h_right", "hline", 0.0, (0.0, 1.0), "omega2", "omega4", (0.0, 1.0)),
    )
    g = {
        "gamma_v_low": seg_g(0, 1, 0),
        "gamma_v_up": seg_g(2, 3, 0),
        "gamma_h_left": seg_g(0, 2, 1),
        "gamma_h_right": seg_g(1, 3, 1),
    }
    exact = _branch_exact(branch)

    def rect_factor(rect):
        (ax, bx), (ay, by) = rect
        return ProductFactor(vanish(ax, bx), vanish(ay, by))

    terms = (
        TrialTerm("q1", "u1", ("omega1",), rect_factor(rects["omega1"])),
        TrialTerm("q2", "u2", ("omega2",), rect_factor(rects["omega2"])),
        TrialTerm("q3", "u3", ("omega3",), rect_factor(rects["omega3"])),
        TrialTerm("q4", "u4", ("omega4",), rect_factor(rects["omega4"])),
        TrialTerm(
            "lower", "u5", ("omega1", "omega2"), rect_factor(((-1.0, 1.0), (-1.0, 0.0)))
        ),
        TrialTerm(
            "left", "u6", ("omega1", "omega3"), rect_factor(((-1.0, 0.0), (-1.0, 1.0)))
        ),
        TrialTerm(
            "right", "u7", ("omega2", "omega4"), rect_factor(((0.0, 1.0), (-1.0, 1.0)))
        ),
        TrialTerm(
            "upper", "u8", ("omega3", "omega4"), rect_factor(((-1.0, 1.0), (0.0, 1.0)))
        ),
        TrialTerm("global", "u9", names, rect_factor(((-1.0, 1.0), (-1.0, 1.0)))),
    )
    return ProblemSpec(
        name="four_material",
        label="four-material diffusion on (-1,1)^2",
        domain=((-1.0, 1.0), (-1.0, 1.0)),
        beta=0.0,
        regions=regions,
        interfaces=interfaces,
        f=f,
        g=g,
        dirichlet=None,
        exact=exact,
        trial_terms=terms,
        params={"alphas": alphas, "cs": cs, "ks": ks},
    )


def _circle_inclusion():
    # alpha = 1 inside the unit disk, 4 outside; exact u = sin(pi (r^2-1)) inside,
    # sin(pi/4 (r^2-1)) outside; nonhomogeneous Dirichlet data on [-2,2]^2.
    def branch(scale):
        # u = sin(scale (r^2 - 1))
        def value(p):
            return np.sin(scale * (p[:, 0] ** 2 + p[:, 1] ** 2 - 1.0))

        def gradient(p):
            c = np.cos(scale * (p[:, 0] ** 2 + p[:, 1] ** 2 - 1.0))
            return 2.0 * scale * c[:, None] * p

        def laplacian(p):
            r2 = p[:, 0] ** 2 + p[:, 1] ** 2
            phi = scale * (r2 - 1.0)
            return 4.0 * scale * np.cos(phi) - 4.0 * scale**2 * r2 * np.sin(phi)

        return value, gradient, laplacian

    inner = branch(math.pi)
    outer = branch(math.pi / 4.0)
    regions = (
        RegionSpec("omega1", alpha=1.0, disk_radius=1.0),
        RegionSpec("omega2", alpha=4.0, rect=((-2.0, 2.0), (-2.0, 2.0)), minus_disk=1.0),
    )
    lap = {"omega1": inner[2], "omega2": outer[2]}
    alpha = {"omega1": 1.0, "omega2": 4.0}

    def f(p, region):
        # source Q = -alpha Laplace(u)
        return -alpha[region] * lap[region](p)

    exact = _branch_exact({"omega1": inner, "omega2": outer})
    gamma = InterfaceSpec("gamma", "circle", 1.0, (0.0, 2.0 * math.pi), "omega1", "omega2", None)
    terms = (
        TrialTerm(
            "bulk",
            "psi",
            ("omega1", "omega2"),
            ProductFactor(vanish(-2.0, 2.0), vanish(-2.0, 2.0)),
        ),
        TrialTerm("inclusion", "psi1", ("omega1",), RadialFactor(1.0)),
    )
    return ProblemSpec(
        name="circle_inclusion",
        label="heterogeneous circular inclusion on (-2,2)^2",
        domain=((-2.0, 2.0), (-2.0, 2.0)),
        beta=0.0,
        regions=regions,
        interfaces=(gamma,),
        f=f,
        g=None,  # flux of the exact solution is continuous across the circle
        dirichlet=outer[0],
        exact=exact,
        trial_terms=terms,
        params={},
    )


def _region_index_single(spec, points):
    return np.zeros(len(points), dtype=np.intp)


def _region_index_two(spec, points):
    x_if = spec.params["x_if"]
    return np.where(points[:, 0] <= x_if, 0, 1).astype(np.intp)


def _region_index_four(spec, points):
    left = points[:, 0] <= 0.0
    low = points[:, 1] <= 0.0
    idx = np.empty(len(points), dtype=np.intp)
    idx[left & low] = 0
    idx[~left & low] = 1
    idx[left & ~low] = 2
    idx[~left & ~low] = 3
    return idx


def _region_index_circle(spec, points):
    inside = points[:, 0] ** 2 + points[:, 1] ** 2 <= 1.0
    return np.where(inside, 0, 1).astype(np.intp)


_REGION_INDEX = {
    "manufactured_beta": _region_index_single,
    "singular_laplace": _region_index_single,
    "two_material": _region_index_two,
    "two_material_highfreq": _region_index_two,
    "four_material": _region_index_four,
    "circle_inclusion": _region_index_circle,
}

_CATALOG = {
    "manufactured_beta": _manufactured_beta,
    "singular_laplace": _singular_laplace,
    "two_material": _two_material,
    "two_material_highfreq": lambda **kw: _two_material(
        alpha1=10.0,
        alpha2=2.0,
        c1=1.0,
        c2=1.0,
        k11=1,
        k12=2,
        k21=10,
        k22=2,
        x_if=2.0 / 9.0,
        name="two_material_highfreq",
        label="two-material diffusion, high-frequency right region",
        **kw,
    ),
    "four_material": _four_material,
    "circle_inclusion": _circle_inclusion,
}

# Paper test labels -> (catalog name, parameter overrides)
TEST_CASES = {
    "1.1": ("two_material", {"alpha1": 4.0, "alpha2": 1.0}),
    "1.2": ("two_material", {"alpha1": 4.0, "alpha2": 2.0}),
    "2.1": ("two_material", {"alpha1": 4e-4, "alpha2": 1.0}),
    "2.2": ("two_material", {"alpha1": 4.0, "alpha2": 1.0}),
    "2.3": ("two_material", {"alpha1": 4000.0, "alpha2": 1.0}),
    "3.1": ("two_material_highfreq", {}),
    "4.1": ("four_material", {"alphas": (4.0, 1.0, 1.0, 2.0), "cs": (1.0, 4.0, 4.0, 2.0)}),
    "4.2": (
        "four_material",
        {
            "alphas": (4.0, 1.0, 1.0, 10.0),
            "cs": (2.0, 5.0, 2.0, 4.0),
            "ks": ((3, 1), (1, 2), (1, 4), (2, 2)),
        },
    ),
    "circle": ("circle_inclusion", {}),
    "singular": ("singular_laplace", {}),
}


def catalog(name: str, **params) -> ProblemSpec:
    """Problem by catalog name with parameter overrides."""
    if name not in _CATALOG:
        raise KeyError(f"unknown problem {name!r}; choices: {sorted(_CATALOG)}")
    if any(k.startswith("alpha") for k in params):
        bad = [k for k, v in params.items() if k.startswith("alpha") and np.min(v) <= 0]
        if bad:
            raise ValueError(f"diffusion coefficients must be positive: {bad}")
    return _CATALOG[name](**params)


def from_test_case(label: str) -> ProblemSpec:
    """Problem configured as one of the paper's numbered tests."""
    if label not in TEST_CASES:
        raise KeyError(f"unknown test {label!r}; choices: {sorted(TEST_CASES)}")
    name, params = TEST_CASES[label]
    spec = catalog(name, **params)
    return replace(spec, label=f"Test ({label})" if label[0].isdigit() else spec.label)


def list_problems() -> str:
    lines = []
    for name, builder in _CATALOG.items():
        spec = builder()
        lines.append(f"{name}: {spec.label}")
        if spec.params:
            lines.append(f"    defaults: {spec.params}")
    lines.append("test cases: " + ", ".join(sorted(TEST_CASES)))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Prepared quadrature
# ---------------------------------------------------------------------------


@dataclass
class LoadPiece:
    """One additive contribution to the load functional (f, v).

    Either lives on the region's own volume rule (`on_volume=True`, coef has
    the rule's length and already includes weights and f) or on a dedicated
    tensor grid carrying a full coefficient grid W with (f, v) = sum W v(grid).
    `coef_grad` pairs with grad(v) (used by the homogenized circle problem).
    """

    region: str
    on_volume: bool = False
    coef: np.ndarray | None = None
    coef_grad: np.ndarray | None = None
    x_nodes: np.ndarray | None = None
    y_nodes: np.ndarray | None = None
    wgrid: np.ndarray | None = None

    @property
    def points(self):
        if self.on_volume:
            raise ValueError("on-volume pieces have no dedicated points")
        X, Y = np.meshgrid(self.x_nodes, self.y_nodes, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])


@dataclass
class PreparedInterface:
    spec: InterfaceSpec
    rule: BoundaryRule
    gvals: np.ndarray  # flux-jump data at the rule points (zeros when g is None)


@dataclass
class PreparedRules:
    """Problem-bound quadrature: volume, load, interface and boundary rules."""

    volume: dict[str, Rule2D]
    loads: dict[str, list[LoadPiece]]
    fvals: dict[str, np.ndarray]  # f at the volume rule points, per region
    interfaces: dict[str, PreparedInterface]
    boundary: BoundaryRule | None
    options: dict

    def volume_integral(self, region: str, values) -> float:
        return float(np.dot(self.volume[region].weights, values))


def _composite(kind: str, q: int, interval, m: int) -> Rule1D:
    base = gauss_lobatto(q) if kind == "lobatto" else gauss_legendre(q)
    return compose(base, interval, m)


def _rect_volume(spec, opts):
    """Per-region tensor rules for problems whose regions are rectangles."""
    out = {}
    for r in spec.regions:
        (ax, bx), (ay, by) = r.rect
        rx = _composite(opts["kind"], opts["q"], (ax, bx), opts["m"])
        ry = _composite(opts["kind"], opts["q"], (ay, by), opts["m"])
        out[r.name] = tensor_product(rx, ry)
    return out


def _refined_axis(q, base_m, lo, hi, windows) -> Rule1D:
    """Composite rule with `base_m` outer density, refined inside `windows`."""
    base = gauss_legendre(q)
    pieces = []
    cursor = lo
    for a, b, m_in in windows:
        if a > cursor:
            m_out = max(1, round(base_m * (a - cursor) / (hi - lo)))
            pieces.append(compose(base, (cursor, a), m_out))
        pieces.append(compose(base, (a, b), m_in))
        cursor = b
    if cursor < hi:
        m_out = max(1, round(base_m * (hi - cursor) / (hi - lo)))
        pieces.append(compose(base, (cursor, hi), m_out))
    return concat1d(pieces)


def _singular_rules(spec, opts):
    plan = opts.get("load_plan", "jacobi")
    if plan == "jacobi":
        rx = _composite("legendre", opts["q"], (0.0, 1.0), opts["m"])
        vol = tensor_product(rx, rx)
        loads = _singular_jacobi_loads(vol, opts)
    elif plan == "naive":
        n1 = _composite("legendre", opts["q"], (0.0, 1.0), opts["naive_m"])
        vol = tensor_product(n1, n1)
        loads = [LoadPiece("omega", on_volume=True)]
    elif plan == "refined":
        # naive grid with extra subdivisions inside the window around x = 1/2
        w = opts.get("refine_window", 0.01)
        m_in = opts.get("refine_m", opts["naive_m"])
        r1 = _refined_axis(
            opts["q"], opts["naive_m"], 0.0, 1.0, [(0.5 - w, 0.5 + w, m_in)]
        )
        vol = tensor_product(r1, r1)
        loads = [LoadPiece("omega", on_volume=True)]
    else:
        raise ValueError(f"unknown singular load plan {plan!r}")
    return {"omega": vol}, {"omega": loads}


def _singular_jacobi_loads(vol: Rule2D, opts) -> list[LoadPiece]:
    """(f, v) = I1 + I2 + I3 + I4 for the line-singular Poisson source.

    I1/I2 carry the |t - 1/2|^{-2/3} factors: each splits at 1/2 and maps onto
    [-1, 1] with x = (t+1)/4 resp. (t+3)/4, turning the singular factor into the
    Gauss-Jacobi weights (1 -+ x)^{-2/3} with an overall 4^{-1/3}; the smooth
    companion factors are folded into the coefficient grid.  I3/I4 are smooth
    and ride on the volume rule.
    """
    nj = opts["jacobi_n"]
    jr = gauss_jacobi(nj, -2.0 / 3.0, 0.0)  # weight (1-x)^(-2/3)
    jl = gauss_jacobi(nj, 0.0, -2.0 / 3.0)  # weight (1+x)^(-2/3)
    smooth = _composite("legendre", opts["q"], (0.0, 1.0), opts["m"])
    scale = 4.0 ** (-1.0 / 3.0)

    def poly_part(t):
        return (70.0 / 9.0) * t * (t - 1.0) + 11.0 / 6.0

    pieces = []
    for jrule, shift in ((jr, 1.0), (jl, 3.0)):
        x = (jrule.nodes + shift) / 4.0
        wx = scale * jrule.weights * poly_part(x)
        wy = smooth.weights * (-smooth.nodes * (smooth.nodes - 1.0))  # -y(y-1)
        pieces.append(
            LoadPiece(
                "omega",
                x_nodes=x,
                y_nodes=smooth.nodes.copy(),
                wgrid=np.multiply.outer(wx, wy),
            )
        )
    for jrule, shift in ((jr, 1.0), (jl, 3.0)):
        y = (jrule.nodes + shift) / 4.0
        wy = scale * jrule.weights * poly_part(y)
        wx = smooth.weights * (-smooth.nodes * (smooth.nodes - 1.0))
        pieces.append(
            LoadPiece(
                "omega",
                x_nodes=smooth.nodes.copy(),
                y_nodes=y,
                wgrid=np.multiply.outer(wx, wy),
            )
        )
    # I3: -2 y(y-1) |y-1/2|^{4/3} u ; I4: the x-counterpart; both smooth
    xs, ys = vol.rx.nodes, vol.ry.nodes
    s43 = lambda t: _abs_pow(t, 4.0 / 3.0)
    fy = -2.0 * ys * (ys - 1.0) * s43(ys - 0.5)
    fx = -2.0 * xs * (xs - 1.0) * s43(xs - 0.5)
    coef_i3 = np.multiply.outer(vol.rx.weights, vol.ry.weights * fy).ravel()
    coef_i4 = np.multiply.outer(vol.rx.weights * fx, vol.ry.weights).ravel()
    pieces.append(LoadPiece("omega", on_volume=True, coef=coef_i3 + coef_i4))
    return pieces


def _interface_rules(spec, opts):
    out = {}
    gm = opts.get("gamma_m", opts["m"])
    gq = opts.get("gamma_q", opts["q"])
    for iface in spec.interfaces:
        if iface.kind == "circle":
            rule = circle_boundary(opts["n_theta"])
        else:
            r1 = _composite(opts["kind"], gq, iface.span, gm)
            lo, hi = iface.span
            if iface.kind == "vline":
                start, end = (iface.position, lo), (iface.position, hi)
            else:
                start, end = (lo, iface.position), (hi, iface.position)
            rule = segment_boundary(start, end, r1, normal=iface.normal)
        gfun = (spec.g or {}).get(iface.name)
        gvals = gfun(rule.points) if gfun is not None else np.zeros(rule.n)
        out[iface.name] = PreparedInterface(iface, rule, gvals)
    return out


def _rect_boundary(domain, opts) -> BoundaryRule:
    (x0, x1), (y0, y1) = domain
    m = opts.get("boundary_m", opts["m"])
    q = opts.get("boundary_q", opts["q"])
    rx = _composite("lobatto", q, (x0, x1), m)
    ry = _composite("lobatto", q, (y0, y1), m)
    edges = [
        segment_boundary((x0, y0), (x1, y0), rx),
        segment_boundary((x0, y1), (x1, y1), rx),
        segment_boundary((x0, y0), (x0, y1), ry),
        segment_boundary((x1, y0), (x1, y1), ry),
    ]
    return concat_boundary(edges)


DESK_OPTIONS = {"m": 40, "q": 8, "kind": "lobatto", "jacobi_n": 200, "naive_m": 80,
                "n_theta": 80, "r_m": 10, "r_q": 8, "boundary_m": 40, "boundary_q": 8}
PAPER_OPTIONS = {"m": 100, "q": 16, "kind": "lobatto", "jacobi_n": 200, "naive_m": 500,
                 "n_theta": 160, "r_m": 20, "r_q": 8, "boundary_m": 100, "boundary_q": 16}


def build_rules(spec: ProblemSpec, scale: str = "desk", **overrides) -> PreparedRules:
    """Quadrature for `spec` at scale 'desk' or 'paper', plus keyword overrides.

    Square/rectangular problems use composite Gauss-Lobatto tensor rules per
    region (composite Gauss-Legendre for the singular problem, whose load
    follows the Gauss-Jacobi plan unless `load_plan` says otherwise); the
    circular-inclusion problem uses a polar rule on the disk and a signed
    square-minus-disk rule outside.
    """
    opts = dict(PAPER_OPTIONS if scale == "paper" else DESK_OPTIONS)
    opts.update(overrides)
    opts["scale"] = scale
    name = spec.name
    loads = None
    boundary = None
    if name == "singular_laplace":
        opts.setdefault("load_plan", "jacobi")
        volume, loads = _singular_rules(spec, opts)
    elif name == "circle_inclusion":
        radial = compose(gauss_lobatto(opts["r_q"]), (0.0, 1.0), opts["r_m"])
        disk = polar_disk(radial, opts["n_theta"])
        sq = _composite("lobatto", opts["q"], (-2.0, 2.0), opts["m"])
        square = tensor_product(sq, sq)
        volume = {"omega1": disk, "omega2": difference(square, disk)}
        boundary = _rect_boundary(spec.domain, opts)
    else:
        volume = _rect_volume(spec, opts)
    if loads is None:
        loads = {r.name: [LoadPiece(r.name, on_volume=True)] for r in spec.regions}
    fvals = {}
    for r in spec.regions:
        vals = spec.f(volume[r.name].points, r.name)
        fvals[r.name] = np.asarray(vals, dtype=np.float64)
        for piece in loads[r.name]:
            if piece.on_volume and piece.coef is None:
                piece.coef = volume[r.name].weights * fvals[r.name]
    interfaces = _interface_rules(spec, opts)
    return PreparedRules(volume, loads, fvals, interfaces, boundary, opts)


def homogenize_circle(spec: ProblemSpec, b_field) -> ProblemSpec:
    """Shift the circle problem by a fitted boundary field b_N.

    Solving for phi = u - b_N turns the nonhomogeneous Dirichlet data into
    zero; the source gains div(alpha grad b_N) = alpha Laplace(b_N), and the
    interface inherits the flux jump g = -(alpha1 - alpha2) dn(b_N) of the
    smooth background.  `b_field` must expose value/gradient/laplacian.
    """
    if spec.name != "circle_inclusion":
        raise ValueError("homogenize_circle applies to the circle problem")
    base_f = spec.f
    a1 = spec.alpha_of("omega1")
    a2 = spec.alpha_of("omega2")

    def f(p, region):
        return base_f(p, region) + spec.alpha_of(region) * b_field.laplacian(p)

    def g_gamma(p):
        # n is the outward unit normal of the disk, i.e. p itself on the circle
        dn = np.einsum("md,md->m", b_field.gradient(p), p)
        return (a2 - a1) * dn

    return replace(
        spec,
        name="circle_inclusion:homogenized",
        label=spec.label + " (homogenized by fitted boundary network)",
        f=f,
        g={"gamma": g_gamma},
        dirichlet=None,
        offset_field=b_field,
    )
