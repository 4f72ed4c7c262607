"""Evaluation engine for composed trial functions.

A trial function is a sum of terms, each a boundary factor times one output
block of a network, supported on a subset of regions.  The engine binds a
problem's trial recipe to concrete networks and evaluates, per quadrature
site, the stacked basis jets, the trial field u = sum_j c_j B_j, and the
reverse-mode map from per-point field sensitivities to parameter gradients.

On tensor-product rules with separable factors and tnn networks everything
stays factorized per axis (the tensor-network fast path): the term basis on a
grid is B_j(x, y) = TX_j(x) TY_j(y) with TX = fx * X folded once per frame,
so stiffness blocks reduce to Hadamard products of 1D Gram matrices and field
evaluations to rank-p contractions.  Everywhere else a dense path evaluates
(p, M) jets directly; both paths are exercised against each other in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import networks as nets
from .networks import ArchitectureSpec, AxesEvaluation, BasisAdjoint, BasisEvaluation
from .problems import LoadPiece, PreparedRules, ProblemSpec, TrialTerm

__all__ = [
    "Network",
    "FieldJet",
    "FieldAdjoint",
    "FieldBundle",
    "BundleAdjoint",
    "LinearField",
    "ComposedTrial",
    "TrialFrame",
    "init_networks",
    "pack_params",
    "unpack_params",
]


@dataclass
class Network:
    arch: ArchitectureSpec
    params: np.ndarray


def init_networks(spec: ProblemSpec, arch: ArchitectureSpec, seed: int) -> dict:
    """One network per trial-recipe key, seeds derived deterministically."""
    out = {}
    for i, key in enumerate(spec.network_keys()):
        out[key] = Network(arch, nets.init_params(arch, seed + 1000 * i))
    return out


def pack_params(networks: dict) -> np.ndarray:
    return np.concatenate([networks[k].params for k in networks])


def unpack_params(networks: dict, flat: np.ndarray) -> dict:
    out = {}
    off = 0
    for k, net in networks.items():
        n = net.params.size
        out[k] = Network(net.arch, flat[off : off + n].copy())
        off += n
    if off != flat.size:
        raise ValueError("flat parameter vector length mismatch")
    return out


@dataclass
class FieldJet:
    """Trial-field jets at one site's points: u (M,), grad u (M,2), lap u (M,)."""

    values: np.ndarray
    gradients: np.ndarray | None = None
    laplacians: np.ndarray | None = None


@dataclass
class FieldAdjoint:
    """Loss sensitivities w.r.t. field jets at one site (None = zero)."""

    values: np.ndarray | None = None
    gradients: np.ndarray | None = None
    laplacians: np.ndarray | None = None


@dataclass
class FieldBundle:
    """Field jets at every site a loss can touch.

    `loads[region][i]` is None for pieces riding on the volume rule (the
    volume jets apply); dedicated pieces carry their own jets.
    """

    volume: dict
    loads: dict
    interface: dict  # name -> (side_a jets, side_b jets), values + gradients


@dataclass
class BundleAdjoint:
    volume: dict = field(default_factory=dict)
    loads: dict = field(default_factory=dict)
    interface: dict = field(default_factory=dict)


class LinearField:
    """Frozen field sum_j c_j phi_j of one network; value/gradient/laplacian."""

    def __init__(self, arch: ArchitectureSpec, params: np.ndarray, coef: np.ndarray):
        self.arch = arch
        self.params = np.asarray(params, dtype=np.float64)
        self.coef = np.asarray(coef, dtype=np.float64)

    def _eval(self, points) -> BasisEvaluation:
        return nets.eval_basis(self.arch, self.params, points)

    def value(self, points):
        return self.coef @ self._eval(points).values

    def gradient(self, points):
        ev = self._eval(points)
        return np.einsum("p,pmd->md", self.coef, ev.gradients)

    def laplacian(self, points):
        return self.coef @ self._eval(points).laplacians

    def jets(self, points):
        ev = self._eval(points)
        return FieldJet(
            self.coef @ ev.values,
            np.einsum("p,pmd->md", self.coef, ev.gradients),
            self.coef @ ev.laplacians,
        )


# ---------------------------------------------------------------------------
# Per-term site representations
# ---------------------------------------------------------------------------


class _SeparableTermRep:
    """Term basis on a tensor grid, kept as per-axis folded jets TX, TY."""

    separable = True

    def __init__(self, term, net, sl, x_nodes, y_nodes):
        self.term = term
        self.net = net
        self.sl = sl
        self.axes = nets.eval_axes(net.arch, net.params, x_nodes, y_nodes)
        self.fx = term.factor.fx.eval012(x_nodes)
        self.fy = term.factor.fy.eval012(y_nodes)
        self.TX = _fold(self.fx, self.axes.x)
        self.TY = _fold(self.fy, self.axes.y)
        self._dense = None

    def dense_jets(self):
        """Materialized (p, M) jets, row-major; for mixed-path assembly."""
        if self._dense is None:
            TX, TXd, TXdd = self.TX
            TY, TYd, TYdd = self.TY
            p = TX.shape[0]
            m = TX.shape[1] * TY.shape[1]
            val = np.einsum("pa,pb->pab", TX, TY).reshape(p, m)
            gx = np.einsum("pa,pb->pab", TXd, TY).reshape(p, m)
            gy = np.einsum("pa,pb->pab", TX, TYd).reshape(p, m)
            lap = (
                np.einsum("pa,pb->pab", TXdd, TY) + np.einsum("pa,pb->pab", TX, TYdd)
            ).reshape(p, m)
            self._dense = (val, np.stack([gx, gy], axis=2), lap)
        return self._dense

    def field_add(self, c, acc, need_grad, need_lap):
        cs = c[self.sl]
        TX, TXd, TXdd = self.TX
        TY, TYd, TYdd = self.TY
        cTX = cs[:, None] * TX
        acc["values"] += np.einsum("pa,pb->ab", cTX, TY)
        if need_grad:
            acc["gx"] += np.einsum("pa,pb->ab", cs[:, None] * TXd, TY)
            acc["gy"] += np.einsum("pa,pb->ab", cTX, TYd)
        if need_lap:
            acc["lap"] += np.einsum("pa,pb->ab", cs[:, None] * TXdd, TY)
            acc["lap"] += np.einsum("pa,pb->ab", cTX, TYdd)

    def adjoint_grad(self, c, adj_grids):
        """Parameter gradient of this term from field-adjoint grids."""
        VB, GXB, GYB, LB = adj_grids
        cs = c[self.sl]
        TX, TXd, TXdd = self.TX
        TY, TYd, TYdd = self.TY
        zx = np.zeros_like(TX)
        zy = np.zeros_like(TY)
        TXb, TXdb, TXddb = zx.copy(), zx.copy(), zx.copy()
        TYb, TYdb, TYddb = zy.copy(), zy.copy(), zy.copy()
        if VB is not None:
            TXb += np.einsum("ab,pb->pa", VB, TY)
            TYb += np.einsum("ab,pa->pb", VB, TX)
        if GXB is not None:
            TXdb += np.einsum("ab,pb->pa", GXB, TY)
            TYb += np.einsum("ab,pa->pb", GXB, TXd)
        if GYB is not None:
            TXb += np.einsum("ab,pb->pa", GYB, TYd)
            TYdb += np.einsum("ab,pa->pb", GYB, TX)
        if LB is not None:
            TXddb += np.einsum("ab,pb->pa", LB, TY)
            TXb += np.einsum("ab,pb->pa", LB, TYdd)
            TYddb += np.einsum("ab,pa->pb", LB, TX)
            TYb += np.einsum("ab,pa->pb", LB, TXdd)
        for arr in (TXb, TXdb, TXddb):
            arr *= cs[:, None]
        for arr in (TYb, TYdb, TYddb):
            arr *= cs[:, None]
        xbar = _unfold(self.fx, TXb, TXdb, TXddb)
        ybar = _unfold(self.fy, TYb, TYdb, TYddb)
        return nets.axes_param_gradient(self.net.arch, self.net.params, self.axes, xbar, ybar)


def _fold(fjets, axis: nets.AxisJets):
    """(f * X) jets from factor jets (f, f', f'') and subnet jets (X, X', X'')."""
    f, fd, fdd = fjets
    TX = f * axis.values
    TXd = fd * axis.values + f * axis.deriv
    TXdd = fdd * axis.values + 2.0 * fd * axis.deriv + f * axis.second
    return TX, TXd, TXdd


def _unfold(fjets, Tb, Tdb, Tddb):
    """Transpose of `_fold`: term-jet adjoints -> subnet-jet adjoints."""
    f, fd, fdd = fjets
    xb = f * Tb + fd * Tdb + fdd * Tddb
    xdb = f * Tdb + 2.0 * fd * Tddb
    xddb = f * Tddb
    return xb, xdb, xddb


class _DenseTermRep:
    """Term basis as materialized (p, M) jets at arbitrary points."""

    separable = False

    def __init__(self, term, net, sl, points):
        self.term = term
        self.net = net
        self.sl = sl
        self.points = points
        self.eval = nets.eval_basis(net.arch, net.params, points)
        self.F, self.Fg, self.Fl = term.factor.jets(points)
        ev = self.eval
        val = self.F[None, :] * ev.values
        grad = (
            self.Fg[None, :, :] * ev.values[:, :, None]
            + self.F[None, :, None] * ev.gradients
        )
        lap = (
            self.Fl[None, :] * ev.values
            + 2.0 * np.einsum("md,pmd->pm", self.Fg, ev.gradients)
            + self.F[None, :] * ev.laplacians
        )
        self._dense = (val, grad, lap)

    def dense_jets(self):
        return self._dense

    def adjoint_grad(self, c, adj):
        """Parameter gradient from a dense FieldAdjoint via the product rule."""
        cs = c[self.sl]
        vb = adj.values
        gb = adj.gradients
        lb = adj.laplacians
        m = self.points.shape[0]
        k_val = np.zeros(m)
        k_grad = np.zeros((m, 2))
        k_lap = np.zeros(m)
        if vb is not None:
            k_val += self.F * vb
        if gb is not None:
            k_val += np.einsum("md,md->m", self.Fg, gb)
            k_grad += self.F[:, None] * gb
        if lb is not None:
            k_val += self.Fl * lb
            k_grad += 2.0 * self.Fg * lb[:, None]
            k_lap += self.F * lb
        adjoint = BasisAdjoint(
            values=cs[:, None] * k_val[None, :],
            gradients=cs[:, None, None] * k_grad[None, :, :],
            laplacians=cs[:, None] * k_lap[None, :],
        )
        return nets.loss_param_gradient(self.net.arch, self.net.params, adjoint, self.eval)


class _Site:
    """All active term reps at one point collection (grid or dense)."""

    def __init__(self, reps, grid_shape=None, n_points=None):
        self.reps = reps
        self.grid_shape = grid_shape  # (nx, ny) when every rep is separable
        self.n_points = n_points if n_points is not None else (
            grid_shape[0] * grid_shape[1]
        )

    def field(self, c, need_grad=True, need_lap=True) -> FieldJet:
        if self.grid_shape is not None:
            nx, ny = self.grid_shape
            acc = {
                "values": np.zeros((nx, ny)),
                "gx": np.zeros((nx, ny)) if need_grad else None,
                "gy": np.zeros((nx, ny)) if need_grad else None,
                "lap": np.zeros((nx, ny)) if need_lap else None,
            }
            for rep in self.reps:
                rep.field_add(c, acc, need_grad, need_lap)
            grads = (
                np.stack([acc["gx"].ravel(), acc["gy"].ravel()], axis=1)
                if need_grad
                else None
            )
            return FieldJet(
                acc["values"].ravel(),
                grads,
                acc["lap"].ravel() if need_lap else None,
            )
        m = self.n_points
        acc = {
            "values": np.zeros(m),
            "gx": np.zeros(m) if need_grad else None,
            "gy": np.zeros(m) if need_grad else None,
            "lap": np.zeros(m) if need_lap else None,
        }
        for rep in self.reps:
            cs = c[rep.sl]
            val, grad, lap = rep.dense_jets()
            acc["values"] += cs @ val
            if need_grad:
                g = np.einsum("p,pmd->md", cs, grad)
                acc["gx"] += g[:, 0]
                acc["gy"] += g[:, 1]
            if need_lap:
                acc["lap"] += cs @ lap
        grads = np.stack([acc["gx"], acc["gy"]], axis=1) if need_grad else None
        return FieldJet(acc["values"], grads, acc["lap"] if need_lap else None)

    def accumulate_theta_grad(self, c, adj: FieldAdjoint, grads: dict):
        if self.grid_shape is not None:
            nx, ny = self.grid_shape
            VB = adj.values.reshape(nx, ny) if adj.values is not None else None
            GXB = adj.gradients[:, 0].reshape(nx, ny) if adj.gradients is not None else None
            GYB = adj.gradients[:, 1].reshape(nx, ny) if adj.gradients is not None else None
            LB = adj.laplacians.reshape(nx, ny) if adj.laplacians is not None else None
            for rep in self.reps:
                grads[rep.term.network] += rep.adjoint_grad(c, (VB, GXB, GYB, LB))
        else:
            for rep in self.reps:
                grads[rep.term.network] += rep.adjoint_grad(c, adj)


# ---------------------------------------------------------------------------
# Composed trial + frame
# ---------------------------------------------------------------------------


class ComposedTrial:
    """Trial recipe of `spec` bound to concrete networks."""

    def __init__(self, spec: ProblemSpec, networks: dict):
        need = set(spec.network_keys())
        have = set(networks)
        if need != have:
            raise ValueError(f"trial recipe needs networks {sorted(need)}, got {sorted(have)}")
        self.spec = spec
        self.networks = networks
        self.slices = {}
        off = 0
        for term in spec.trial_terms:
            p = networks[term.network].arch.output_dim
            self.slices[term.name] = slice(off, off + p)
            off += p
        self.dim = off

    def with_params(self, flat: np.ndarray) -> "ComposedTrial":
        return ComposedTrial(self.spec, unpack_params(self.networks, flat))

    def params_flat(self) -> np.ndarray:
        return pack_params(self.networks)

    def terms_on(self, region: str):
        return [t for t in self.spec.trial_terms if region in t.regions]

    def frame(self, rules: PreparedRules) -> "TrialFrame":
        return TrialFrame(self, rules)

    # -- dense field evaluation at arbitrary points (test grids, metrics) ----

    def basis_values(self, points, region: str, need_grad: bool = False):
        """Stacked basis values (dim, M) (and gradients) on one region branch."""
        m = points.shape[0]
        vals = np.zeros((self.dim, m))
        grads = np.zeros((self.dim, m, 2)) if need_grad else None
        for term in self.terms_on(region):
            net = self.networks[term.network]
            ev = nets.eval_basis(net.arch, net.params, points)
            F, Fg, _ = term.factor.jets(points)
            sl = self.slices[term.name]
            vals[sl] = F[None, :] * ev.values
            if need_grad:
                grads[sl] = (
                    Fg[None, :, :] * ev.values[:, :, None] + F[None, :, None] * ev.gradients
                )
        return (vals, grads) if need_grad else vals

    def field_values(self, points, region: str, c) -> np.ndarray:
        return c @ self.basis_values(points, region)

    def field_jets(self, points, region: str, c) -> FieldJet:
        m = points.shape[0]
        out_v = np.zeros(m)
        out_g = np.zeros((m, 2))
        out_l = np.zeros(m)
        for term in self.terms_on(region):
            net = self.networks[term.network]
            ev = nets.eval_basis(net.arch, net.params, points)
            F, Fg, Fl = term.factor.jets(points)
            cs = c[self.slices[term.name]]
            v = cs @ ev.values
            g = np.einsum("p,pmd->md", cs, ev.gradients)
            l = cs @ ev.laplacians
            out_v += F * v
            out_g += Fg * v[:, None] + F[:, None] * g
            out_l += Fl * v + 2.0 * np.einsum("md,md->m", Fg, g) + F * l
        return FieldJet(out_v, out_g, out_l)


class TrialFrame:
    """All quadrature-site evaluations of a composed trial at one theta state."""

    def __init__(self, trial: ComposedTrial, rules: PreparedRules):
        self.trial = trial
        self.rules = rules
        spec = trial.spec
        self.sites = {}
        for region, rule in rules.volume.items():
            self.sites[("vol", region)] = self._make_site(region, rule=rule)
        for region, pieces in rules.loads.items():
            for i, piece in enumerate(pieces):
                if not piece.on_volume:
                    self.sites[("load", region, i)] = self._make_site(region, piece=piece)
        for name, prep in rules.interfaces.items():
            iface = prep.spec
            for side in (iface.side_a, iface.side_b):
                self.sites[("iface", name, side)] = self._make_dense_site(
                    side, prep.rule.points
                )

    # -- site construction ---------------------------------------------------

    def _make_site(self, region, rule=None, piece=None):
        trial = self.trial
        if rule is not None and rule.provenance == "tensor":
            xn, yn = rule.rx.nodes, rule.ry.nodes
        elif piece is not None and piece.x_nodes is not None:
            xn, yn = piece.x_nodes, piece.y_nodes
        else:
            xn = yn = None
        terms = trial.terms_on(region)
        if xn is not None and all(
            t.factor.separable and trial.networks[t.network].arch.family == "tnn"
            for t in terms
        ):
            reps = [
                _SeparableTermRep(t, trial.networks[t.network], trial.slices[t.name], xn, yn)
                for t in terms
            ]
            return _Site(reps, grid_shape=(len(xn), len(yn)))
        points = rule.points if rule is not None else piece.points
        return self._make_dense_site(region, points)

    def _make_dense_site(self, region, points):
        trial = self.trial
        reps = [
            _DenseTermRep(t, trial.networks[t.network], trial.slices[t.name], points)
            for t in trial.terms_on(region)
        ]
        return _Site(reps, n_points=points.shape[0])

    # -- fields ---------------------------------------------------------------

    def bundle(self, c, need_lap: bool = True) -> FieldBundle:
        volume = {}
        for region in self.rules.volume:
            volume[region] = self.sites[("vol", region)].field(c, True, need_lap)
        loads = {}
        for region, pieces in self.rules.loads.items():
            jets = []
            for i, piece in enumerate(pieces):
                if piece.on_volume:
                    jets.append(None)
                else:
                    need_grad = piece.coef_grad is not None
                    jets.append(
                        self.sites[("load", region, i)].field(c, need_grad, False)
                    )
            loads[region] = jets
        interface = {}
        for name, prep in self.rules.interfaces.items():
            iface = prep.spec
            a = self.sites[("iface", name, iface.side_a)].field(c, True, False)
            b = self.sites[("iface", name, iface.side_b)].field(c, True, False)
            interface[name] = (a, b)
        return FieldBundle(volume, loads, interface)

    def theta_gradient(self, c, adjoint: BundleAdjoint) -> np.ndarray:
        grads = {k: np.zeros_like(net.params) for k, net in self.trial.networks.items()}
        for region, adj in adjoint.volume.items():
            if adj is not None:
                self.sites[("vol", region)].accumulate_theta_grad(c, adj, grads)
        for region, piece_adjs in adjoint.loads.items():
            for i, adj in enumerate(piece_adjs):
                if adj is not None:
                    self.sites[("load", region, i)].accumulate_theta_grad(c, adj, grads)
        for name, (adj_a, adj_b) in adjoint.interface.items():
            iface = self.rules.interfaces[name].spec
            if adj_a is not None:
                self.sites[("iface", name, iface.side_a)].accumulate_theta_grad(
                    c, adj_a, grads
                )
            if adj_b is not None:
                self.sites[("iface", name, iface.side_b)].accumulate_theta_grad(
                    c, adj_b, grads
                )
        return np.concatenate([grads[k] for k in self.trial.networks])

    # -- assembly helpers (used by galerkin.assemble) -------------------------

    def stiffness(self, beta_by_region=None) -> np.ndarray:
        """A[m, n] = sum_regions int_region (alpha grad B_n . grad B_m + beta B_n B_m)."""
        spec = self.trial.spec
        dim = self.trial.dim
        A = np.zeros((dim, dim))
        for region, rule in self.rules.volume.items():
            alpha = spec.alpha_of(region)
            beta = spec.beta if beta_by_region is None else beta_by_region[region]
            site = self.sites[("vol", region)]
            if site.grid_shape is not None:
                wx = rule.rx.weights
                wy = rule.ry.weights
                for r1 in site.reps:
                    for r2 in site.reps:
                        blk = _separable_block(r1, r2, wx, wy, alpha, beta)
                        A[r1.sl, r2.sl] += blk
            else:
                w = rule.weights
                for r1 in site.reps:
                    v1, g1, _ = r1.dense_jets()
                    for r2 in site.reps:
                        v2, g2, _ = r2.dense_jets()
                        blk = alpha * np.einsum("pmd,m,qmd->pq", g1, w, g2)
                        if beta:
                            blk += beta * np.einsum("pm,m,qm->pq", v1, w, v2)
                        A[r1.sl, r2.sl] += blk
        return A

    def load_vector(self) -> np.ndarray:
        """B[m] = (f, B_m) via the prepared load pieces + interface jump terms."""
        dim = self.trial.dim
        B = np.zeros(dim)
        for region, pieces in self.rules.loads.items():
            vol_site = self.sites[("vol", region)]
            for i, piece in enumerate(pieces):
                site = vol_site if piece.on_volume else self.sites[("load", region, i)]
                B += _load_contraction(self.trial, site, piece)
        for name, prep in self.rules.interfaces.items():
            if not np.any(prep.gvals):
                continue
            iface = prep.spec
            coef = prep.rule.weights * prep.gvals
            site = self.sites[("iface", name, iface.side_a)]
            for rep in site.reps:
                val = rep.dense_jets()[0]
                B[rep.sl] += val @ coef
        return B


def _separable_block(r1, r2, wx, wy, alpha, beta):
    TX1, TX1d, _ = r1.TX
    TY1, TY1d, _ = r1.TY
    TX2, TX2d, _ = r2.TX
    TY2, TY2d, _ = r2.TY
    kx = np.einsum("pa,a,qa->pq", TX1d, wx, TX2d)
    my = np.einsum("pb,b,qb->pq", TY1, wy, TY2)
    mx = np.einsum("pa,a,qa->pq", TX1, wx, TX2)
    ky = np.einsum("pb,b,qb->pq", TY1d, wy, TY2d)
    blk = alpha * (kx * my + mx * ky)
    if beta:
        blk += beta * (mx * my)
    return blk


def _load_contraction(trial, site, piece: LoadPiece):
    dim = trial.dim
    out = np.zeros(dim)
    if site.grid_shape is not None:
        nx, ny = site.grid_shape
        W = piece.wgrid if not piece.on_volume else piece.coef.reshape(nx, ny)
        for rep in site.reps:
            out[rep.sl] += np.einsum("ab,pa,pb->p", W, rep.TX[0], rep.TY[0])
        if piece.coef_grad is not None:
            raise NotImplementedError("gradient loads are dense-path only")
        return out
    coef = piece.coef if piece.on_volume else piece.wgrid.ravel()
    for rep in site.reps:
        val, grad, _ = rep.dense_jets()
        out[rep.sl] += val @ coef
        if piece.coef_grad is not None:
            out[rep.sl] += np.einsum("pmd,md->p", grad, piece.coef_grad)
    return out
