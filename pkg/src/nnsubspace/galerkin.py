"""Subspace Galerkin system: assembly of A c = B and its regularized solve.

A[m, n] = a(B_n, B_m) over the prepared volume rules, B[m] = (f, B_m) plus the
interface term <g, B_m> when the problem carries flux-jump data.  The solve
attempts a Cholesky factorization and falls back to an eigenvalue-truncated
pseudo-inverse when the basis has become numerically dependent (a routine
occurrence for trained network bases).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .composition import TrialFrame

__all__ = ["GalerkinSystem", "DegenerateSubspaceError", "assemble", "solve"]


class DegenerateSubspaceError(RuntimeError):
    """All stiffness eigenvalues fell below the truncation threshold."""


@dataclass
class GalerkinSystem:
    """Symmetric stiffness matrix, load vector and (after solve) coefficients."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray | None = None
    condition_estimate: float = np.inf
    truncated_modes: int = 0
    residual: float = np.nan

    @property
    def dim(self) -> int:
        return self.B.size


def assemble(problem, basis, rules, beta_by_region=None) -> GalerkinSystem:
    """Assemble (A, B) from a TrialFrame or per-region stacked basis jets.

    The dict form maps region name -> BasisEvaluation whose rows span the full
    subspace (zero rows for basis functions unsupported on that region); an
    optional key ("iface", name) supplies side-a values at the interface rule
    for the <g, v> term.  Assembly reduces in canonical point order, and A is
    symmetrized as A <- (A + A^T)/2 before returning.
    """
    if isinstance(basis, TrialFrame):
        A = basis.stiffness(beta_by_region)
        B = basis.load_vector()
    else:
        A, B = _assemble_dense(problem, basis, rules)
    A = 0.5 * (A + A.T)
    return GalerkinSystem(A, B)


def _assemble_dense(problem, basis: dict, rules):
    dims = {ev.values.shape[0] for key, ev in basis.items() if not isinstance(key, tuple)}
    if len(dims) != 1:
        raise ValueError("all per-region stacks must share the subspace dimension")
    (dim,) = dims
    A = np.zeros((dim, dim))
    B = np.zeros(dim)
    for region, rule in rules.volume.items():
        ev = basis[region]
        if ev.values.shape[1] != rule.n:
            raise ValueError(
                f"basis for region {region!r} evaluated at {ev.values.shape[1]} points, "
                f"rule has {rule.n}"
            )
        alpha = problem.alpha_of(region)
        w = rule.weights
        A += alpha * np.einsum("pmd,m,qmd->pq", ev.gradients, w, ev.gradients)
        if problem.beta:
            A += problem.beta * np.einsum("pm,m,qm->pq", ev.values, w, ev.values)
        for piece in rules.loads[region]:
            if not piece.on_volume:
                raise ValueError("dense assembly supports on-volume load pieces only")
            B += ev.values @ piece.coef
            if piece.coef_grad is not None:
                B += np.einsum("pmd,md->p", ev.gradients, piece.coef_grad)
    for name, prep in rules.interfaces.items():
        if not np.any(prep.gvals):
            continue
        ev = basis.get(("iface", name))
        if ev is None:
            raise ValueError(f"interface {name!r} has flux data but no basis values")
        B += ev.values @ (prep.rule.weights * prep.gvals)
    return A, B


def solve(system: GalerkinSystem, rcond: float = 1e-12) -> np.ndarray:
    """Solve A c = B; Cholesky when comfortably SPD, else truncated eigensolve.

    A is first symmetrically scaled by its diagonal (energy-normalizing the
    basis) so that the spectrum measures angular dependence rather than the
    wildly different natural scales of network basis functions.  Scaled
    eigenvalues below rcond * lambda_max are discarded (minimum-norm solution
    on the numerically resolvable subspace); if nothing survives the subspace
    is degenerate.  Updates and returns system.c.
    """
    A, B = system.A, system.B
    diag = np.sqrt(np.maximum(A.diagonal(), 0.0))
    if not np.all(diag > 0.0):
        raise DegenerateSubspaceError("stiffness matrix has nonpositive diagonal entries")
    d = 1.0 / diag
    As = A * np.outer(d, d)
    Bs = B * d
    w = np.linalg.eigvalsh(As)
    lam_max = float(w[-1])
    if lam_max <= 0.0:
        raise DegenerateSubspaceError(
            f"stiffness matrix has no positive eigenvalues (max {lam_max:.3e})"
        )
    lam_min = float(w[0])
    system.condition_estimate = (
        np.inf if lam_min <= lam_max * 1e-300 else lam_max / lam_min
    )
    if w[0] > rcond * lam_max:
        try:
            L = np.linalg.cholesky(As)
            cs = np.linalg.solve(L.T, np.linalg.solve(L, Bs))
            system.truncated_modes = 0
        except np.linalg.LinAlgError:
            cs = _truncated_solve(As, Bs, system, rcond)
    else:
        cs = _truncated_solve(As, Bs, system, rcond)
    c = cs * d
    system.c = c
    scale = np.linalg.norm(A, "fro") * np.linalg.norm(c) + np.linalg.norm(B)
    system.residual = float(np.linalg.norm(A @ c - B) / max(scale, np.finfo(float).tiny))
    return c


def _truncated_solve(As, Bs, system: GalerkinSystem, rcond: float) -> np.ndarray:
    w, V = np.linalg.eigh(As)
    keep = w > rcond * w[-1]
    if not np.any(keep):
        raise DegenerateSubspaceError(
            f"all {w.size} eigenvalues below truncation threshold {rcond * w[-1]:.3e}"
        )
    system.truncated_modes = int(np.count_nonzero(~keep))
    Vk = V[:, keep]
    return Vk @ ((Vk.T @ Bs) / w[keep])
