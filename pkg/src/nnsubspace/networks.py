"""Small sin-activated networks evaluated as subspace bases.

A network with p outputs spans a p-dimensional trial space.  For a batch of
points this module produces, per output, the value, spatial gradient and
Laplacian (exact forward jet propagation, not finite differences), and it
backpropagates per-point sensitivities of a scalar loss with respect to those
jets into a gradient over the flat parameter vector.

Families:

* ``fnn2d``    fully connected stack, input dim 1 or 2;
* ``resnet2d`` same, with the activated output of every ``skip_period``-th
  hidden layer added to the one ``skip_period`` layers back;
* ``tnn``      rank-p tensor network: two 1D sub-stacks mapping R -> R^p whose
  j-th outputs multiply, phi_j(x1, x2) = X_j(x1) * Y_j(x2).

The sin jet uses the closed forms (sin, cos, -sin).  With inputs carried as
(value Z, gradient G, Laplacian L), an affine layer maps them by (W Z + b,
W G, W L) and the activation by

    z = sin(a),  grad = cos(a) * Ga,  lap = cos(a) * La - sin(a) * |Ga|^2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ArchitectureSpec",
    "ParameterLayout",
    "BasisEvaluation",
    "BasisAdjoint",
    "AxisJets",
    "AxesEvaluation",
    "JetError",
    "layout_for",
    "init_params",
    "eval_basis",
    "eval_tnn_on_grid",
    "eval_axes",
    "loss_param_gradient",
    "axes_param_gradient",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = 1
_FAMILIES = ("fnn2d", "resnet2d", "tnn")


class JetError(RuntimeError):
    """Raised when a non-finite value appears during jet propagation."""


@dataclass(frozen=True)
class ArchitectureSpec:
    """Network family, sizes and (fixed) activation.

    ``output_dim`` is the subspace dimension p.  For family 'tnn' the network
    is two 1D sub-stacks with the given hidden widths each; ``input_dim`` must
    then be 2.  ``skip_period`` is only valid for 'resnet2d' and requires all
    hidden widths equal.
    """

    family: str
    input_dim: int
    output_dim: int
    hidden_widths: tuple[int, ...]
    activation: str = "sin"
    skip_period: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.activation != "sin":
            raise ValueError("only the sin activation is supported")
        if self.input_dim not in (1, 2):
            raise ValueError("input_dim must be 1 or 2")
        if self.family == "tnn" and self.input_dim != 2:
            raise ValueError("tnn requires input_dim == 2")
        if self.output_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ValueError("output_dim and hidden widths must be positive")
        if self.skip_period is not None:
            if self.family != "resnet2d":
                raise ValueError("skip_period is only valid for resnet2d")
            if self.skip_period < 1:
                raise ValueError("skip_period must be >= 1")
            if len(set(self.hidden_widths)) != 1:
                raise ValueError("resnet2d skips require equal hidden widths")
        if self.family == "resnet2d" and self.skip_period is None:
            raise ValueError("resnet2d requires skip_period")

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_widths": list(self.hidden_widths),
            "activation": self.activation,
            "skip_period": self.skip_period,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchitectureSpec":
        return ArchitectureSpec(
            family=d["family"],
            input_dim=int(d["input_dim"]),
            output_dim=int(d["output_dim"]),
            hidden_widths=tuple(d["hidden_widths"]),
            activation=d.get("activation", "sin"),
            skip_period=d.get("skip_period"),
        )


@dataclass(frozen=True)
class ParameterLayout:
    """Maps (layer, kind) names to index ranges of the flat parameter vector."""

    entries: tuple[tuple[str, tuple[int, ...], int], ...]
    size: int

    def views(self, params: np.ndarray) -> dict[str, np.ndarray]:
        """Reshaped views into `params`; pack/unpack round-trips by construction."""
        if params.shape != (self.size,):
            raise ValueError(f"parameter vector must have length {self.size}")
        out = {}
        for name, shape, offset in self.entries:
            n = int(np.prod(shape))
            out[name] = params[offset : offset + n].reshape(shape)
        return out

    def pack(self, arrays: dict[str, np.ndarray]) -> np.ndarray:
        vec = np.empty(self.size)
        for name, shape, offset in self.entries:
            n = int(np.prod(shape))
            vec[offset : offset + n] = np.asarray(arrays[name]).reshape(-1)
        return vec


def _stack_dims(arch: ArchitectureSpec, input_dim: int):
    widths = [input_dim, *arch.hidden_widths, arch.output_dim]
    return list(zip(widths[1:], widths[:-1]))  # (fan_out, fan_in) per affine layer


def layout_for(arch: ArchitectureSpec) -> ParameterLayout:
    entries = []
    offset = 0

    def add(prefix, dims):
        nonlocal offset
        for i, (out, inp) in enumerate(dims):
            tag = f"L{i}" if i < len(dims) - 1 else "out"
            for name, shape in ((f"{prefix}{tag}.W", (out, inp)), (f"{prefix}{tag}.b", (out,))):
                entries.append((name, shape, offset))
                offset += int(np.prod(shape))

    if arch.family == "tnn":
        add("x.", _stack_dims(arch, 1))
        add("y.", _stack_dims(arch, 1))
    else:
        add("", _stack_dims(arch, arch.input_dim))
    return ParameterLayout(tuple(entries), offset)


def init_params(arch: ArchitectureSpec, seed: int) -> np.ndarray:
    """Deterministic init suited to the sin activation.

    Hidden and output weights are uniform Glorot; biases and the first
    (input) layer's weights are uniform in [-pi, pi].  Phase-rich first-layer
    weights matter: with Glorot bounds on a fan-in-1 layer, sin(w x + b) is
    nearly affine over a unit domain and the spanned subspace collapses to a
    handful of numerically resolvable directions.  Draws happen in layout
    order from a PCG64 stream, so identical (arch, seed) give identical
    vectors on any platform.
    """
    rng = np.random.default_rng(seed)
    layout = layout_for(arch)
    parts = {}
    for name, shape, _ in layout.entries:
        if name.endswith(".W"):
            is_input = name.split(".")[-2] == "L0"
            bound = np.pi if is_input else np.sqrt(6.0 / (shape[0] + shape[1]))
            parts[name] = rng.uniform(-bound, bound, size=shape)
        else:
            parts[name] = rng.uniform(-np.pi, np.pi, size=shape)
    return layout.pack(parts)


# ---------------------------------------------------------------------------
# Jet containers
# ---------------------------------------------------------------------------


@dataclass
class BasisEvaluation:
    """Jets of the p basis functions at M points.

    values (p, M); gradients (p, M, d); laplacians (p, M).
    """

    values: np.ndarray
    gradients: np.ndarray
    laplacians: np.ndarray
    _prov: tuple = field(default=None, repr=False, compare=False)

    @property
    def n_points(self) -> int:
        return self.values.shape[1]


@dataclass
class BasisAdjoint:
    """Per-point sensitivities of a scalar loss w.r.t. basis jets (None = zero)."""

    values: np.ndarray | None = None
    gradients: np.ndarray | None = None
    laplacians: np.ndarray | None = None


@dataclass
class AxisJets:
    """1D jets of a tnn sub-stack on a node set: value, d/dx, d2/dx2, each (p, n)."""

    values: np.ndarray
    deriv: np.ndarray
    second: np.ndarray


@dataclass
class AxesEvaluation:
    """Per-axis 1D jets of a tnn on a tensor grid, with tapes for backprop."""

    x: AxisJets
    y: AxisJets
    _tapes: tuple = field(default=None, repr=False, compare=False)


# ---------------------------------------------------------------------------
# Forward / backward through one affine+sin stack
# ---------------------------------------------------------------------------


def _stack_params(arch: ArchitectureSpec, views: dict, prefix: str, input_dim: int):
    dims = _stack_dims(arch, input_dim)
    Ws, bs = [], []
    for i in range(len(dims)):
        tag = f"L{i}" if i < len(dims) - 1 else "out"
        Ws.append(views[f"{prefix}{tag}.W"])
        bs.append(views[f"{prefix}{tag}.b"])
    return Ws, bs


def _skip_source(arch: ArchitectureSpec, hidden_index: int) -> int | None:
    """Index of the hidden layer whose output is added to `hidden_index`'s, or None."""
    k = arch.skip_period
    if arch.family != "resnet2d" or k is None:
        return None
    if hidden_index > k and (hidden_index - 1) % k == 0:
        return hidden_index - k
    return None


def _stack_forward(arch, Ws, bs, X, tag=""):
    """Propagate (value, gradient, Laplacian) jets through the stack.

    X is (d, M).  Returns (values (p,M), grads (p,M,d), laps (p,M), tape).
    """
    d, m = X.shape
    Z = X
    G = np.zeros((d, m, d))
    for k in range(d):
        G[k, :, k] = 1.0
    L = np.zeros((d, m))
    tape = []
    hidden_out = {}  # hidden_index -> (Z, G, L) after activation (+skip)
    n_layers = len(Ws)
    for i, (W, b) in enumerate(zip(Ws, bs)):
        A = W @ Z + b[:, None]
        if not np.all(np.isfinite(A)):
            raise JetError(f"non-finite pre-activation at layer {tag}{i}")
        GA = np.tensordot(W, G, axes=(1, 0))
        LA = W @ L
        rec = {"Zin": Z, "Gin": G, "Lin": L}
        if i < n_layers - 1:
            S, C = np.sin(A), np.cos(A)
            Q = np.einsum("pmd,pmd->pm", GA, GA)
            Z = S
            G = C[:, :, None] * GA
            L = C * LA - S * Q
            hidden_index = i + 1
            src = _skip_source(arch, hidden_index)
            if src is not None:
                Zs, Gs, Ls = hidden_out[src]
                Z = Z + Zs
                G = G + Gs
                L = L + Ls
            hidden_out[hidden_index] = (Z, G, L)
            rec.update({"S": S, "C": C, "GA": GA, "LA": LA, "Q": Q, "skip_from": src})
        else:
            Z, G, L = A, GA, LA
            rec["skip_from"] = None
        tape.append(rec)
    return Z, G, L, tape


def _stack_backward(arch, Ws, tape, vbar, gbar, lbar):
    """Reverse the jet propagation; returns per-layer (Wbar, bbar) lists."""
    n_layers = len(Ws)
    Wbars = [None] * n_layers
    bbars = [None] * n_layers
    # adjoints of each hidden layer's (post-skip) output, fed by later skips
    pending = {}
    zb, gb, lb = vbar, gbar, lbar
    for i in range(n_layers - 1, -1, -1):
        rec = tape[i]
        if i < n_layers - 1:
            hidden_index = i + 1
            extra = pending.pop(hidden_index, None)
            if extra is not None:
                zb = zb + extra[0]
                gb = gb + extra[1]
                lb = lb + extra[2]
            src = rec["skip_from"]
            if src is not None:
                prev = pending.get(src)
                add = (zb, gb, lb)
                pending[src] = (
                    add
                    if prev is None
                    else (prev[0] + add[0], prev[1] + add[1], prev[2] + add[2])
                )
            S, C, GA, LA, Q = rec["S"], rec["C"], rec["GA"], rec["LA"], rec["Q"]
            # through the sin jet
            Abar = zb * C
            GAbar = gb * C[:, :, None]
            Abar -= S * np.einsum("pmd,pmd->pm", gb, GA)
            Abar += lb * (-S * LA - C * Q)
            GAbar += (lb * (-2.0 * S))[:, :, None] * GA
            LAbar = lb * C
        else:
            Abar, GAbar, LAbar = zb, gb, lb
        Zin, Gin, Lin = rec["Zin"], rec["Gin"], rec["Lin"]
        Wbars[i] = (
            Abar @ Zin.T
            + np.einsum("pmd,qmd->pq", GAbar, Gin)
            + LAbar @ Lin.T
        )
        bbars[i] = Abar.sum(axis=1)
        if i > 0:
            W = Ws[i]
            zb = W.T @ Abar
            gb = np.tensordot(W.T, GAbar, axes=(1, 0))
            lb = W.T @ LAbar
    return Wbars, bbars


def _zeros_like_adjoint(adj: BasisAdjoint, like: BasisEvaluation):
    v = adj.values if adj.values is not None else np.zeros_like(like.values)
    g = adj.gradients if adj.gradients is not None else np.zeros_like(like.gradients)
    l = adj.laplacians if adj.laplacians is not None else np.zeros_like(like.laplacians)
    return v, g, l


# ---------------------------------------------------------------------------
# Public evaluation API
# ---------------------------------------------------------------------------


def eval_basis(arch: ArchitectureSpec, params: np.ndarray, points) -> BasisEvaluation:
    """Exact jets of all p basis functions at `points` (M, d).

    For family 'tnn', output j at (x1, x2) is X_j(x1) Y_j(x2) with
    gradient (X'_j Y_j, X_j Y'_j) and Laplacian X''_j Y_j + X_j Y''_j.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[1] != arch.input_dim:
        raise ValueError(f"points must be (M, {arch.input_dim})")
    views = layout_for(arch).views(params)
    if arch.family == "tnn":
        jx, tx = _axis_forward(arch, views, "x.", points[:, 0])
        jy, ty = _axis_forward(arch, views, "y.", points[:, 1])
        values = jx.values * jy.values
        gradients = np.stack([jx.deriv * jy.values, jx.values * jy.deriv], axis=2)
        laplacians = jx.second * jy.values + jx.values * jy.second
        return BasisEvaluation(
            values, gradients, laplacians, _prov=("tnn_points", jx, jy, tx, ty)
        )
    Ws, bs = _stack_params(arch, views, "", arch.input_dim)
    V, G, L, tape = _stack_forward(arch, Ws, bs, points.T)
    return BasisEvaluation(V, G, L, _prov=("stack", tape, points))


def _axis_forward(arch, views, prefix, nodes):
    Ws, bs = _stack_params(arch, views, prefix, 1)
    nodes = np.asarray(nodes, dtype=np.float64)
    V, G, L, tape = _stack_forward(arch, Ws, bs, nodes[None, :], tag=prefix)
    return AxisJets(V, G[:, :, 0], L), tape


def eval_axes(arch: ArchitectureSpec, params: np.ndarray, grid_x, grid_y) -> AxesEvaluation:
    """1D jets of the two tnn sub-stacks on separate x/y node sets."""
    if arch.family != "tnn":
        raise ValueError("eval_axes requires a tnn architecture")
    views = layout_for(arch).views(params)
    jx, tx = _axis_forward(arch, views, "x.", grid_x)
    jy, ty = _axis_forward(arch, views, "y.", grid_y)
    return AxesEvaluation(jx, jy, _tapes=(tx, ty))


def eval_tnn_on_grid(
    arch: ArchitectureSpec, params: np.ndarray, grid_x, grid_y
) -> BasisEvaluation:
    """Jets on the tensor grid of (grid_x, grid_y), via per-axis 1D evaluation.

    Identical values to pointwise `eval_basis` on the Cartesian grid (row-major,
    x outer) at O((n_x + n_y) * p) network cost instead of O(n_x * n_y * p).
    """
    axes = eval_axes(arch, params, grid_x, grid_y)
    jx, jy = axes.x, axes.y
    p = arch.output_dim
    m = jx.values.shape[1] * jy.values.shape[1]
    values = np.einsum("pa,pb->pab", jx.values, jy.values).reshape(p, m)
    gx = np.einsum("pa,pb->pab", jx.deriv, jy.values).reshape(p, m)
    gy = np.einsum("pa,pb->pab", jx.values, jy.deriv).reshape(p, m)
    laplacians = (
        np.einsum("pa,pb->pab", jx.second, jy.values)
        + np.einsum("pa,pb->pab", jx.values, jy.second)
    ).reshape(p, m)
    return BasisEvaluation(
        values,
        np.stack([gx, gy], axis=2),
        laplacians,
        _prov=("tnn_grid", axes, jx.values.shape[1], jy.values.shape[1]),
    )


# ---------------------------------------------------------------------------
# Reverse mode
# ---------------------------------------------------------------------------


def loss_param_gradient(
    arch: ArchitectureSpec,
    params: np.ndarray,
    adjoint: BasisAdjoint,
    at: BasisEvaluation | np.ndarray,
) -> np.ndarray:
    """d(loss)/d(params) for a loss with the given per-point jet sensitivities.

    `at` is a prior `eval_basis`/`eval_tnn_on_grid` result (its tape is reused)
    or a point array to evaluate at.  Exact for the discrete loss; coefficients
    multiplying the basis are the caller's concern and stay fixed.
    """
    if not isinstance(at, BasisEvaluation):
        at = eval_basis(arch, params, at)
    vbar, gbar, lbar = _zeros_like_adjoint(adjoint, at)
    layout = layout_for(arch)
    views = layout.views(params)
    kind = at._prov[0]
    if kind == "stack":
        _, tape, points = at._prov
        Ws, _ = _stack_params(arch, views, "", arch.input_dim)
        Wb, bb = _stack_backward(arch, Ws, tape, vbar, gbar, lbar)
        return _pack_stack_grads(arch, layout, {"": (Wb, bb)})
    if kind == "tnn_points":
        _, jx, jy, tx, ty = at._prov
        xbar = (
            vbar * jy.values + gbar[:, :, 1] * jy.deriv + lbar * jy.second,
            gbar[:, :, 0] * jy.values,
            lbar * jy.values,
        )
        ybar = (
            vbar * jx.values + gbar[:, :, 0] * jx.deriv + lbar * jx.second,
            gbar[:, :, 1] * jx.values,
            lbar * jx.values,
        )
        return _axes_backward(arch, layout, views, (tx, ty), xbar, ybar)
    if kind == "tnn_grid":
        _, axes, nx, ny = at._prov
        p = arch.output_dim
        jx, jy = axes.x, axes.y
        vb = vbar.reshape(p, nx, ny)
        gxb = gbar[:, :, 0].reshape(p, nx, ny)
        gyb = gbar[:, :, 1].reshape(p, nx, ny)
        lb = lbar.reshape(p, nx, ny)
        xbar = (
            np.einsum("pab,pb->pa", vb, jy.values)
            + np.einsum("pab,pb->pa", gyb, jy.deriv)
            + np.einsum("pab,pb->pa", lb, jy.second),
            np.einsum("pab,pb->pa", gxb, jy.values),
            np.einsum("pab,pb->pa", lb, jy.values),
        )
        ybar = (
            np.einsum("pab,pa->pb", vb, jx.values)
            + np.einsum("pab,pa->pb", gxb, jx.deriv)
            + np.einsum("pab,pa->pb", lb, jx.second),
            np.einsum("pab,pa->pb", gyb, jx.values),
            np.einsum("pab,pa->pb", lb, jx.values),
        )
        return _axes_backward(arch, layout, views, axes._tapes, xbar, ybar)
    raise ValueError(f"unknown evaluation provenance {kind!r}")


def axes_param_gradient(
    arch: ArchitectureSpec,
    params: np.ndarray,
    axes: AxesEvaluation,
    xbar: tuple | None,
    ybar: tuple | None,
) -> np.ndarray:
    """Backprop from per-axis 1D jet adjoints (value, deriv, second), each (p, n)."""
    layout = layout_for(arch)
    views = layout.views(params)
    zero_x = tuple(np.zeros_like(a) for a in (axes.x.values,) * 3)
    zero_y = tuple(np.zeros_like(a) for a in (axes.y.values,) * 3)
    return _axes_backward(
        arch, layout, views, axes._tapes, xbar or zero_x, ybar or zero_y
    )


def _axes_backward(arch, layout, views, tapes, xbar, ybar):
    grads = {}
    for prefix, tape, (vb, db, sb) in (("x.", tapes[0], xbar), ("y.", tapes[1], ybar)):
        Ws, _ = _stack_params(arch, views, prefix, 1)
        Wb, bb = _stack_backward(arch, Ws, tape, vb, db[:, :, None], sb)
        grads[prefix] = (Wb, bb)
    return _pack_stack_grads(arch, layout, grads)


def _pack_stack_grads(arch, layout, grads_by_prefix):
    vec = np.zeros(layout.size)
    parts = layout.views(vec)
    for prefix, (Wb, bb) in grads_by_prefix.items():
        n = len(Wb)
        for i in range(n):
            tag = f"L{i}" if i < n - 1 else "out"
            parts[f"{prefix}{tag}.W"][:] = Wb[i]
            parts[f"{prefix}{tag}.b"][:] = bb[i]
    return vec


# ---------------------------------------------------------------------------
# Checkpoints: flat float64 array with a JSON header
# ---------------------------------------------------------------------------

_MAGIC = b"NNSBCKPT"


def save_checkpoint(path, networks: dict, extra: dict | None = None) -> None:
    """Write named parameter vectors: `networks` maps name -> (arch, seed, params).

    Layout: magic, little-endian uint64 header length, JSON header, raw float64
    data.  `extra` (JSON-serializable) rides along in the header.
    """
    header = {"format_version": CHECKPOINT_FORMAT, "networks": [], "extra": extra or {}}
    blocks = []
    offset = 0
    for name, (arch, seed, params) in networks.items():
        layout = layout_for(arch)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.size != layout.size:
            raise ValueError(f"parameter length mismatch for network {name!r}")
        header["networks"].append(
            {
                "name": name,
                "arch": arch.to_dict(),
                "seed": int(seed),
                "offset": offset,
                "length": int(layout.size),
                "layout": [
                    {"name": n, "shape": list(s), "offset": o}
                    for n, s, o in layout.entries
                ],
            }
        )
        blocks.append(params)
        offset += params.size
    raw = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint64(len(raw)).tobytes())
        fh.write(raw)
        for block in blocks:
            fh.write(block.tobytes())


def load_checkpoint(path):
    """Inverse of `save_checkpoint`: returns (networks dict, extra dict)."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = np.frombuffer(fh.read(8), dtype=np.uint64)
        header = json.loads(fh.read(int(hlen)).decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype=np.float64)
    networks = {}
    for net in header["networks"]:
        arch = ArchitectureSpec.from_dict(net["arch"])
        params = data[net["offset"] : net["offset"] + net["length"]].copy()
        networks[net["name"]] = (arch, net["seed"], params)
    return networks, header.get("extra", {})
