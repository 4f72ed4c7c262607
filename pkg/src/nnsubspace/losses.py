"""Loss functions and a-posteriori error indicators for the trained subspace.

All losses are discrete quadrature functionals of the trial field's jets at
the prepared rules, with optional reverse-mode adjoints (per-point
sensitivities w.r.t. field value / gradient / Laplacian) that the composition
engine turns into parameter gradients.

* `ritz_loss`       L(u) = 1/2 a(u, u) - (f, u) - <g, u>
* `residual_loss`   L(u) = || f - beta u + div(alpha grad u) ||_0^2, summed
                    per subdomain (piecewise-constant alpha)
* `interface_loss`  residual_loss + || g - [n . (alpha grad u)] ||_{0,Gamma}^2
* `eta_indicator`   the hypercircle functional eta(u, p) for an arbitrary
                    admissible momentum field p: the beta-weighted elliptic
                    form when the problem has no interfaces, the unweighted
                    interface form (with the jump term) otherwise
* `boundary_fit_loss`  relative L2(boundary) misfit ||b_N - b|| / ||b||
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .composition import BundleAdjoint, FieldAdjoint, FieldBundle
from .problems import PreparedRules, ProblemSpec

__all__ = [
    "LossValue",
    "ritz_loss",
    "residual_loss",
    "interface_loss",
    "eta_indicator",
    "boundary_fit_loss",
    "AnalyticFlux",
    "TrialFlux",
]


@dataclass
class LossValue:
    total: float
    components: dict

    def __float__(self):
        return self.total


def _empty_adjoint(bundle: FieldBundle) -> BundleAdjoint:
    adj = BundleAdjoint()
    adj.volume = {r: None for r in bundle.volume}
    adj.loads = {r: [None] * len(pieces) for r, pieces in bundle.loads.items()}
    adj.interface = {n: [None, None] for n in bundle.interface}
    return adj


def _vol_adj(adj: BundleAdjoint, region, m) -> FieldAdjoint:
    if adj.volume[region] is None:
        adj.volume[region] = FieldAdjoint(
            values=np.zeros(m), gradients=np.zeros((m, 2)), laplacians=np.zeros(m)
        )
    return adj.volume[region]


def _side_adj(adj: BundleAdjoint, name, side_index, m) -> FieldAdjoint:
    if adj.interface[name][side_index] is None:
        adj.interface[name][side_index] = FieldAdjoint(
            values=np.zeros(m), gradients=np.zeros((m, 2))
        )
    return adj.interface[name][side_index]


def ritz_loss(
    bundle: FieldBundle,
    problem: ProblemSpec,
    rules: PreparedRules,
    with_adjoint: bool = False,
):
    """1/2 a(u, u) - (f, u) - <g, u>; the Galerkin solution minimizes it.

    The load (f, u) is evaluated through the prepared load pieces, so a
    Gauss-Jacobi singular plan is honored here exactly as in assembly.
    """
    adj = _empty_adjoint(bundle) if with_adjoint else None
    energy = 0.0
    load = 0.0
    for region, jets in bundle.volume.items():
        w = rules.volume[region].weights
        alpha = problem.alpha_of(region)
        beta = problem.beta
        g2 = np.einsum("md,md->m", jets.gradients, jets.gradients)
        energy += 0.5 * alpha * float(w @ g2)
        if beta:
            energy += 0.5 * beta * float(w @ jets.values**2)
        if with_adjoint:
            va = _vol_adj(adj, region, w.size)
            va.gradients += (alpha * w)[:, None] * jets.gradients
            if beta:
                va.values += beta * w * jets.values
    for region, pieces in rules.loads.items():
        for i, piece in enumerate(pieces):
            jets = bundle.loads[region][i] or bundle.volume[region]
            if piece.on_volume:
                load += float(piece.coef @ jets.values)
                if with_adjoint:
                    _vol_adj(adj, region, piece.coef.size).values -= piece.coef
                if piece.coef_grad is not None:
                    load += float(np.einsum("md,md->", piece.coef_grad, jets.gradients))
                    if with_adjoint:
                        adj.volume[region].gradients -= piece.coef_grad
            else:
                coef = piece.wgrid.ravel()
                load += float(coef @ jets.values)
                if with_adjoint:
                    adj.loads[region][i] = FieldAdjoint(values=-coef)
    for name, prep in rules.interfaces.items():
        if not np.any(prep.gvals):
            continue
        side_a = bundle.interface[name][0]
        coef = prep.rule.weights * prep.gvals
        load += float(coef @ side_a.values)
        if with_adjoint:
            _side_adj(adj, name, 0, coef.size).values -= coef
    value = LossValue(energy - load, {"energy": energy, "load": load})
    return (value, adj) if with_adjoint else value


def _volume_residual(bundle, problem, rules, adj):
    total = 0.0
    for region, jets in bundle.volume.items():
        w = rules.volume[region].weights
        alpha = problem.alpha_of(region)
        res = rules.fvals[region] - problem.beta * jets.values + alpha * jets.laplacians
        total += float(w @ res**2)
        if adj is not None:
            va = _vol_adj(adj, region, w.size)
            wr2 = 2.0 * w * res
            if problem.beta:
                va.values -= problem.beta * wr2
            va.laplacians += alpha * wr2
    return total


def residual_loss(
    bundle: FieldBundle,
    problem: ProblemSpec,
    rules: PreparedRules,
    with_adjoint: bool = False,
):
    """|| f - beta u + div(alpha grad u) ||_0^2 summed per subdomain."""
    adj = _empty_adjoint(bundle) if with_adjoint else None
    total = _volume_residual(bundle, problem, rules, adj)
    value = LossValue(total, {"volume_residual": total})
    return (value, adj) if with_adjoint else value


def _normal_flux_jump(bundle, problem, rules, name):
    prep = rules.interfaces[name]
    side_a, side_b = bundle.interface[name]
    n = prep.rule.normals
    a_a = problem.alpha_of(prep.spec.side_a)
    a_b = problem.alpha_of(prep.spec.side_b)
    fa = a_a * np.einsum("md,md->m", side_a.gradients, n)
    fb = a_b * np.einsum("md,md->m", side_b.gradients, n)
    return fa - fb


def interface_loss(
    bundle: FieldBundle,
    problem: ProblemSpec,
    rules: PreparedRules,
    with_adjoint: bool = False,
):
    """Volume residual plus the interface flux-jump misfit against g."""
    adj = _empty_adjoint(bundle) if with_adjoint else None
    vol = _volume_residual(bundle, problem, rules, adj)
    jump = 0.0
    for name, prep in rules.interfaces.items():
        n = prep.rule.normals
        w = prep.rule.weights
        mis = prep.gvals - _normal_flux_jump(bundle, problem, rules, name)
        jump += float(w @ mis**2)
        if adj is not None:
            a_a = problem.alpha_of(prep.spec.side_a)
            a_b = problem.alpha_of(prep.spec.side_b)
            wm2 = (2.0 * w * mis)[:, None] * n
            _side_adj(adj, name, 0, w.size).gradients -= a_a * wm2
            _side_adj(adj, name, 1, w.size).gradients += a_b * wm2
    value = LossValue(
        vol + jump, {"volume_residual": vol, "interface_jump": jump}
    )
    return (value, adj) if with_adjoint else value


# ---------------------------------------------------------------------------
# Hypercircle indicator
# ---------------------------------------------------------------------------


class AnalyticFlux:
    """Momentum field p given in closed form: p(x) and div p(x), branchwise."""

    def __init__(self, p_fn, divp_fn):
        self.p_fn = p_fn
        self.divp_fn = divp_fn

    def at(self, points, region):
        return self.p_fn(points, region), self.divp_fn(points, region)

    def normal_jump(self, points, normals, side_a, side_b):
        pa = self.p_fn(points, side_a)
        pb = self.p_fn(points, side_b)
        return np.einsum("md,md->m", pa - pb, normals)


class TrialFlux:
    """p = alpha grad u_N read off a field bundle (div p = alpha lap u_N)."""

    def __init__(self, bundle: FieldBundle, problem: ProblemSpec, rules: PreparedRules):
        self.bundle = bundle
        self.problem = problem
        self.rules = rules

    def at(self, points, region):
        jets = self.bundle.volume[region]
        alpha = self.problem.alpha_of(region)
        return alpha * jets.gradients, alpha * jets.laplacians

    def normal_jump(self, points, normals, side_a, side_b):
        for name, prep in self.rules.interfaces.items():
            if prep.spec.side_a == side_a and prep.spec.side_b == side_b:
                return _normal_flux_jump(self.bundle, self.problem, self.rules, name)
        raise KeyError(f"no interface between {side_a!r} and {side_b!r}")


def eta_indicator(
    bundle: FieldBundle,
    flux,
    problem: ProblemSpec,
    rules: PreparedRules,
    weighted: bool | None = None,
) -> float:
    """Hypercircle indicator eta(u_N, p) for an admissible momentum field p.

    Without interfaces (and beta > 0) this is the weighted form

        eta^2 = ||beta^{-1/2} (f - beta u + div p)||^2
                + ||alpha^{-1/2} (p - alpha grad u)||^2,

    whose infimum over p bounds ||u - u_N||_a from above and which equals the
    energy error exactly at the dual solution p = alpha grad u.  With
    interfaces the unweighted form adds ||g - [n . p]||_{0, Gamma}^2; its
    unknown stability constants are dropped (argmin is unaffected), so it is
    a loss, not a certified bound.
    """
    if weighted is None:
        weighted = not problem.interfaces
    if weighted and problem.beta <= 0.0:
        raise ValueError("the beta-weighted indicator requires beta > 0")
    acc = 0.0
    for region, jets in bundle.volume.items():
        rule = rules.volume[region]
        w = rule.weights
        alpha = problem.alpha_of(region)
        p, divp = flux.at(rule.points, region)
        res = rules.fvals[region] - problem.beta * jets.values + divp
        acc += float(w @ res**2) / (problem.beta if weighted else 1.0)
        diff = p - alpha * jets.gradients
        acc += float(w @ np.einsum("md,md->m", diff, diff)) / alpha
    if not weighted:
        for name, prep in rules.interfaces.items():
            jmp = flux.normal_jump(
                prep.rule.points, prep.rule.normals, prep.spec.side_a, prep.spec.side_b
            )
            acc += float(prep.rule.weights @ (prep.gvals - jmp) ** 2)
    return float(np.sqrt(max(acc, 0.0)))


def dual_norm_error(flux_a, flux_b, problem: ProblemSpec, rules: PreparedRules) -> float:
    """||p_a - p_b||_* with ||p||_*^2 = int beta^{-1} (div p)^2 + alpha^{-1} |p|^2.

    The norm of the dual (momentum) space; with p = alpha y this is the
    a*(y, y) norm of the flux variable.  Requires beta > 0.
    """
    if problem.beta <= 0.0:
        raise ValueError("the dual norm requires beta > 0")
    acc = 0.0
    for region, rule in rules.volume.items():
        w = rule.weights
        alpha = problem.alpha_of(region)
        pa, da = flux_a.at(rule.points, region)
        pb, db = flux_b.at(rule.points, region)
        acc += float(w @ (da - db) ** 2) / problem.beta
        diff = pa - pb
        acc += float(w @ np.einsum("md,md->m", diff, diff)) / alpha
    return float(np.sqrt(max(acc, 0.0)))


def boundary_fit_loss(b_n_values, b_values, rule, with_adjoint: bool = False):
    """Relative L2(boundary) misfit ||b_N - b|| / ||b||; b must be nonzero."""
    w = rule.weights
    den = float(w @ np.asarray(b_values) ** 2)
    if den <= 0.0:
        raise ValueError("boundary data has zero L2 norm")
    diff = np.asarray(b_n_values) - np.asarray(b_values)
    num = float(w @ diff**2)
    rel = float(np.sqrt(num / den))
    if not with_adjoint:
        return rel
    if num == 0.0:
        grad = np.zeros_like(diff)
    else:
        grad = w * diff / np.sqrt(num * den)
    return rel, grad
