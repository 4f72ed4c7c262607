"""Alternating training driver: Galerkin solves for c, gradient updates for theta.

One outer step rebuilds the subspace at the current parameters, assembles and
solves the Galerkin system for the coefficients c, evaluates the configured
loss at the solved trial field, and updates theta by Adam (first phase) or
L-BFGS with Armijo backtracking (second phase) while c stays frozen.  History
is recorded per step and is bitwise reproducible for a fixed config and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import galerkin as gk
from . import losses as ls
from . import networks as nets
from .composition import ComposedTrial, LinearField, Network, init_networks
from .problems import PreparedRules, ProblemSpec

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainingError",
    "adam_step",
    "lbfgs_step",
    "run_algorithm3",
    "fit_boundary_network",
]

_LOSS_FNS = {
    "ritz": ls.ritz_loss,
    "residual": ls.residual_loss,
    "interface_posterior": ls.interface_loss,
}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    adam_steps: int = 2000
    adam_lr: float = 1e-3
    lbfgs_steps: int = 50
    lbfgs_lr: float = 0.1
    lbfgs_history: int = 10
    seed: int = 0
    loss_kind: str = "ritz"  # 'ritz' | 'residual' | 'interface_posterior'
    galerkin_every: int = 1
    schedule: tuple | None = None  # ((fraction_of_adam_steps, lr_factor), ...)
    rcond: float = 1e-12
    record_every: int = 1
    track_presolve_loss: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.adam_steps < 0 or self.lbfgs_steps < 0 or self.galerkin_every < 1:
            raise ValueError("step counts must be >= 0 and galerkin_every >= 1")
        if self.adam_lr <= 0 or self.lbfgs_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.loss_kind not in _LOSS_FNS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")

    def lr_at(self, step: int) -> float:
        lr = self.adam_lr
        if self.schedule:
            for frac, factor in self.schedule:
                if step >= frac * self.adam_steps:
                    lr *= factor
        return lr

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["schedule"] = list(map(list, self.schedule)) if self.schedule else None
        return d


@dataclass
class TrainState:
    """Parameters, coefficients, optimizer internals and per-step history."""

    params: np.ndarray
    c: np.ndarray | None = None
    step: int = 0
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_t: int = 0
    lbfgs_pairs: list = field(default_factory=list)
    last_eval: tuple | None = None
    events: list = field(default_factory=list)
    history: list = field(default_factory=list)

    @staticmethod
    def fresh(params: np.ndarray) -> "TrainState":
        return TrainState(
            params=params.copy(),
            adam_m=np.zeros_like(params),
            adam_v=np.zeros_like(params),
        )


def adam_step(state: TrainState, gradient, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update of state.params in place."""
    g = np.asarray(gradient)
    if not np.all(np.isfinite(g)):
        raise TrainingError(f"non-finite gradient at step {state.step}")
    state.adam_t += 1
    state.adam_m = beta1 * state.adam_m + (1.0 - beta1) * g
    state.adam_v = beta2 * state.adam_v + (1.0 - beta2) * g * g
    mhat = state.adam_m / (1.0 - beta1**state.adam_t)
    vhat = state.adam_v / (1.0 - beta2**state.adam_t)
    state.params = state.params - lr * mhat / (np.sqrt(vhat) + eps)
    return state


def lbfgs_step(state: TrainState, evaluator, lr, history=10):
    """One two-loop-recursion step with Armijo backtracking (c1=1e-4, shrink 1/2).

    `evaluator(theta, need_grad=True)` returns (value, grad) or value only.
    Stored pairs are Powell-damped against the diagonal seed so every
    productive step feeds the curvature model.  A failed line search falls
    back to a gradient step of size lr * 1e-2 and logs the event.
    """
    if state.last_eval is None:
        state.last_eval = evaluator(state.params)
    f0, g0 = state.last_eval
    if not np.any(g0):
        return state
    q = g0.copy()
    pairs = state.lbfgs_pairs[-history:]
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        q -= a * y
        alphas.append(a)
    gamma = 1.0
    if pairs:
        s, y, _ = pairs[-1]
        gamma = (s @ y) / (y @ y)
        q *= gamma
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    d = -q
    gd = float(g0 @ d)
    if gd >= 0.0:  # stale curvature produced an ascent direction
        d = -g0
        gd = -float(g0 @ g0)
    t = lr
    accepted = False
    for _ in range(25):
        f1 = evaluator(state.params + t * d, need_grad=False)
        if np.isfinite(f1) and f1 <= f0 + 1e-4 * t * gd:
            accepted = True
            break
        t *= 0.5
    if not accepted:
        # bounded fallback: gradient step of length lr * 1e-2
        state.events.append(("line_search_failure", state.step))
        gnorm = float(np.linalg.norm(g0))
        t = lr * 1e-2 / max(gnorm, 1.0)
        d = -g0
    new_params = state.params + t * d
    f_new, g_new = evaluator(new_params)
    s = new_params - state.params
    y = g_new - g0
    ss = float(s @ s)
    if ss > 0.0:
        # Powell damping against B0 = I/gamma keeps s.y safely positive
        s_bs = ss / gamma
        sy = float(s @ y)
        if sy < 0.2 * s_bs:
            theta = 0.8 * s_bs / (s_bs - sy)
            y = theta * y + (1.0 - theta) * (s / gamma)
            sy = float(s @ y)
        if sy > 1e-14 * s_bs:
            state.lbfgs_pairs.append((s, y, 1.0 / sy))
            del state.lbfgs_pairs[:-history]
    state.params = new_params
    state.last_eval = (f_new, g_new)
    return state


# ---------------------------------------------------------------------------
# Algorithm driver
# ---------------------------------------------------------------------------


class _ExactCache:
    """Exact-solution jets at the volume rules, for per-step error recording."""

    def __init__(self, problem: ProblemSpec, rules: PreparedRules):
        self.ok = problem.exact is not None
        if not self.ok:
            return
        self.vals = {}
        self.grads = {}
        self.offset = {}
        norm_a2 = 0.0
        norm_l2 = 0.0
        for region, rule in rules.volume.items():
            pts = rule.points
            v = problem.exact.value(pts, region)
            g = problem.exact.gradient(pts, region)
            if problem.offset_field is not None:
                jets = problem.offset_field.jets(pts)
                self.offset[region] = jets
            self.vals[region] = v
            self.grads[region] = g
            alpha = problem.alpha_of(region)
            w = rule.weights
            norm_a2 += alpha * float(w @ np.einsum("md,md->m", g, g))
            if problem.beta:
                norm_a2 += problem.beta * float(w @ v**2)
            norm_l2 += float(w @ v**2)
        self.norm_a = math.sqrt(max(norm_a2, 0.0))
        self.norm_l2 = math.sqrt(max(norm_l2, 0.0))

    def errors(self, bundle, problem, rules):
        """(e_E, e_L2, absolute energy error) of the current trial field."""
        err_a2 = 0.0
        err_l2 = 0.0
        for region, rule in rules.volume.items():
            jets = bundle.volume[region]
            uv, ug = jets.values, jets.gradients
            if region in self.offset:
                uv = uv + self.offset[region].values
                ug = ug + self.offset[region].gradients
            dv = self.vals[region] - uv
            dg = self.grads[region] - ug
            w = rule.weights
            alpha = problem.alpha_of(region)
            err_a2 += alpha * float(w @ np.einsum("md,md->m", dg, dg))
            if problem.beta:
                err_a2 += problem.beta * float(w @ dv**2)
            err_l2 += float(w @ dv**2)
        e_abs = math.sqrt(max(err_a2, 0.0))
        return e_abs / self.norm_a, math.sqrt(max(err_l2, 0.0)) / self.norm_l2, e_abs


def _resolve_networks(problem, networks, config) -> dict:
    if isinstance(networks, nets.ArchitectureSpec):
        return init_networks(problem, networks, config.seed)
    return {k: Network(v.arch, v.params.copy()) for k, v in networks.items()}


def run_algorithm3(
    problem: ProblemSpec, networks, rules: PreparedRules, config: TrainConfig
) -> TrainState:
    """Alternate Galerkin solves with loss-gradient updates of theta.

    `networks` is an ArchitectureSpec (one per trial-recipe key, seeded from
    config.seed) or an explicit name -> Network mapping.  Returns the final
    TrainState; state.history holds one record per step plus a final record
    evaluated after the last solve.
    """
    loss_fn = _LOSS_FNS[config.loss_kind]
    if config.loss_kind == "interface_posterior" and not problem.interfaces:
        raise ValueError("interface_posterior loss requires an interface problem")
    need_lap = config.loss_kind != "ritz"
    networks = _resolve_networks(problem, networks, config)
    trial = ComposedTrial(problem, networks)
    state = TrainState.fresh(trial.params_flat())
    cache = _ExactCache(problem, rules)
    total = config.adam_steps + config.lbfgs_steps

    def evaluate(flat, c, need_grad=True):
        t = trial.with_params(flat)
        frame = t.frame(rules)
        bundle = frame.bundle(c, need_lap=need_lap)
        if not need_grad:
            return loss_fn(bundle, problem, rules).total
        value, adj = loss_fn(bundle, problem, rules, with_adjoint=True)
        return value.total, frame.theta_gradient(c, adj)

    c = None
    for step in range(total):
        state.step = step
        cur = trial.with_params(state.params)
        frame = cur.frame(rules)
        record = {"step": step}
        if step % config.galerkin_every == 0 or c is None:
            if config.track_presolve_loss and c is not None:
                pre = loss_fn(frame.bundle(c, need_lap=need_lap), problem, rules)
                record["loss_presolve"] = pre.total
            try:
                system = gk.assemble(problem, frame, rules)
                c = gk.solve(system, config.rcond)
            except gk.DegenerateSubspaceError as exc:
                raise TrainingError(f"degenerate subspace at step {step}: {exc}") from exc
            record["truncated_modes"] = system.truncated_modes
        bundle = frame.bundle(c, need_lap=need_lap)
        value, adj = loss_fn(bundle, problem, rules, with_adjoint=True)
        grad = frame.theta_gradient(c, adj)
        record["loss_total"] = value.total
        record.update(value.components)
        if config.loss_kind != "ritz" and problem.beta > 0 and not problem.interfaces:
            record["eta"] = math.sqrt(max(value.total / problem.beta, 0.0))
        elif config.loss_kind == "interface_posterior":
            record["eta"] = math.sqrt(max(value.total, 0.0))
        if cache.ok and (step % config.record_every == 0 or step == total - 1):
            e_e, e_l2, e_abs = cache.errors(bundle, problem, rules)
            record.update({"e_E": e_e, "e_L2": e_l2, "energy_error": e_abs})
        state.history.append(record)
        if step < config.adam_steps:
            record["phase"] = "adam"
            adam_step(
                state,
                grad,
                config.lr_at(step),
                config.adam_beta1,
                config.adam_beta2,
                config.adam_eps,
            )
            state.last_eval = None
        else:
            record["phase"] = "lbfgs"
            state.last_eval = (value.total, grad)
            cc = c
            lbfgs_step(
                state,
                lambda th, need_grad=True, _c=cc: evaluate(th, _c, need_grad),
                config.lbfgs_lr,
                config.lbfgs_history,
            )
    # final solve at the last parameters
    cur = trial.with_params(state.params)
    frame = cur.frame(rules)
    system = gk.assemble(problem, frame, rules)
    c = gk.solve(system, config.rcond)
    bundle = frame.bundle(c, need_lap=need_lap)
    value = loss_fn(bundle, problem, rules)
    final = {"step": total, "loss_total": value.total, "phase": "final"}
    final.update(value.components)
    if cache.ok:
        e_e, e_l2, e_abs = cache.errors(bundle, problem, rules)
        final.update({"e_E": e_e, "e_L2": e_l2, "energy_error": e_abs})
    state.history.append(final)
    state.c = c
    state.step = total
    return state


def final_trial(problem, networks, state: TrainState) -> ComposedTrial:
    """Composed trial at the trained parameters (networks give the shapes)."""
    base = ComposedTrial(problem, _resolve_networks(problem, networks, TrainConfig()))
    return base.with_params(state.params)


# ---------------------------------------------------------------------------
# Boundary network fit (nonhomogeneous Dirichlet data)
# ---------------------------------------------------------------------------


def fit_boundary_network(
    b, arch: nets.ArchitectureSpec, rules: PreparedRules, config: TrainConfig
):
    """Fit b_N = sum_j c_j phi_j to boundary data b in the relative L2 norm.

    c is the discrete L2(boundary) projection (Gram solve) refreshed every
    step; theta follows the gradient of the relative misfit at frozen c.
    Returns (LinearField b_N, history); history records the misfit per step.
    """
    rule = rules.boundary
    if rule is None:
        raise ValueError("rules carry no outer-boundary rule")
    target = b(rule.points) if callable(b) else np.asarray(b, dtype=np.float64)
    params = nets.init_params(arch, config.seed)
    state = TrainState.fresh(params)
    w = rule.weights

    def project(theta):
        ev = nets.eval_basis(arch, theta, rule.points)
        V = ev.values
        gram = gk.GalerkinSystem((V * w) @ V.T, V @ (w * target))
        gram.A = 0.5 * (gram.A + gram.A.T)
        coef = gk.solve(gram, config.rcond)
        return ev, coef

    def evaluate(theta, need_grad=True):
        ev, coef = project(theta)
        vals = coef @ ev.values
        if not need_grad:
            return ls.boundary_fit_loss(vals, target, rule)
        rel, dvals = ls.boundary_fit_loss(vals, target, rule, with_adjoint=True)
        adj = nets.BasisAdjoint(values=coef[:, None] * dvals[None, :])
        return rel, nets.loss_param_gradient(arch, theta, adj, ev)

    total = config.adam_steps + config.lbfgs_steps
    coef = None
    for step in range(total):
        state.step = step
        rel, grad = evaluate(state.params)
        state.history.append({"step": step, "loss_total": rel, "boundary_misfit": rel})
        if step < config.adam_steps:
            adam_step(
                state,
                grad,
                config.lr_at(step),
                config.adam_beta1,
                config.adam_beta2,
                config.adam_eps,
            )
            state.last_eval = None
        else:
            state.last_eval = (rel, grad)
            lbfgs_step(state, evaluate, config.lbfgs_lr, config.lbfgs_history)
    ev, coef = project(state.params)
    rel = ls.boundary_fit_loss(coef @ ev.values, target, rule)
    state.history.append({"step": total, "loss_total": rel, "boundary_misfit": rel})
    state.c = coef
    return LinearField(arch, state.params, coef), state
