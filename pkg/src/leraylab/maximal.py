"""Hardy-Littlewood, Fefferman-Stein sharp, and nontangential maximal
operators over the quasi-metric ball structure and the approach regions."""

from dataclasses import dataclass

import numpy as np

from .geometry import BoundaryMesh, Domain, boundary_distance, unit_normals, as_real
from .levi import QuasiMetric, distance_matrix
from .weights import BallFamily, dyadic_ball_family


class MaximalError(RuntimeError):
    pass


def _resolve_family(mesh, qm, family, D, min_members):
    if isinstance(family, BallFamily):
        return family
    if family in (None, "dyadic"):
        return dyadic_ball_family(mesh, D=D, min_members=min_members)
    raise MaximalError(f"unknown ball family {family!r}")


def hl_maximal(f, mesh: BoundaryMesh, qm: QuasiMetric, family=None,
               measure="leray", min_members=1):
    """Mf(xi) = sup over family balls containing xi of the |f| ball-average."""
    f = np.asarray(f)
    if np.any(~np.isfinite(f)):
        raise MaximalError("f must be finite")
    D = distance_matrix(qm.ctx, mesh)
    fam = _resolve_family(mesh, qm, family, D, min_members)
    masses = mesh.masses(measure)
    absf = np.abs(f) * masses
    out = np.zeros(mesh.n_nodes)
    for c, r in zip(fam.centers, fam.radii):
        sel = D[c] < r
        mB = masses[sel].sum()
        if mB <= 0:
            continue
        avg = absf[sel].sum() / mB
        np.maximum.at(out, np.where(sel)[0], avg)
    return out


def sharp_maximal(f, mesh: BoundaryMesh, qm: QuasiMetric, family=None,
                  min_members=1):
    """Fefferman-Stein sharp function: sup ball-average of |f - f_B|,
    averages against the Leray-Levi measure."""
    f = np.asarray(f)
    if np.any(~np.isfinite(f)):
        raise MaximalError("f must be finite")
    D = distance_matrix(qm.ctx, mesh)
    fam = _resolve_family(mesh, qm, family, D, min_members)
    lam = mesh.lambda_w
    out = np.zeros(mesh.n_nodes)
    for c, r in zip(fam.centers, fam.radii):
        sel = D[c] < r
        mB = lam[sel].sum()
        if mB <= 0:
            continue
        fB = np.sum(f[sel] * lam[sel]) / mB
        osc = np.sum(np.abs(f[sel] - fB) * lam[sel]) / mB
        np.maximum.at(out, np.where(sel)[0], osc)
    return out


# ---------------------------------------------------------------------------
# nontangential maximal function over approach regions


@dataclass
class InteriorSampling:
    """Interior samples filling the aperture-alpha approach regions.

    points[k] belongs to the region of boundary node owner[k]; every stored
    sample passes the membership predicate.
    """

    alpha: float
    points: np.ndarray        # (M, n) complex interior points
    owner: np.ndarray         # (M,) node index
    depth: np.ndarray         # (M,) the inward parameter t

    def n_per_node(self, n_nodes):
        return np.bincount(self.owner, minlength=n_nodes)


def _membership_batch(domain: Domain, xi, nu, z, alpha):
    pairing = np.sum((z - xi) * np.conj(nu), axis=-1)
    d_tan = np.abs(pairing.real)
    d_bd = boundary_distance(domain, z)
    delta = np.minimum(d_bd, d_tan)
    close = np.sum(np.abs(z - xi) ** 2, axis=-1)
    return (np.abs(pairing) < (1.0 + alpha) * delta) & (close < alpha * delta)


def build_interior_sampling(domain: Domain, mesh: BoundaryMesh, alpha=1.0,
                            rng=None, t_max=0.3, jitters=2) -> InteriorSampling:
    """Radial samples (1-t)xi at dyadic depths t in [h, t_max] plus small
    tangential jitters, filtered through the membership predicate."""
    if rng is None:
        rng = np.random.default_rng(0)
    depths = []
    t = t_max
    while t >= 0.5 * mesh.h:       # deepest level lands within [h/2, h]
        depths.append(t)
        t *= 0.5
    if not depths:
        depths = [t_max]
    pts, owner, tval = [], [], []
    N = mesh.n_nodes
    idx = np.arange(N)
    for t in depths:
        base = (1.0 - t) * mesh.nodes
        member = _membership_batch(domain, mesh.nodes, mesh.normals, base, alpha)
        pts.append(base[member])
        owner.append(idx[member])
        tval.append(np.full(int(member.sum()), t))
        for _ in range(jitters):
            jit = rng.standard_normal(mesh.nodes.shape) \
                + 1j * rng.standard_normal(mesh.nodes.shape)
            # remove the normal component, keep a tangential displacement
            comp = np.sum(jit * np.conj(mesh.normals), axis=-1, keepdims=True)
            jit = jit - comp * mesh.normals
            jit *= 0.2 * t / np.maximum(
                np.linalg.norm(as_real(jit), axis=-1, keepdims=True), 1e-30)
            z = (1.0 - t) * (mesh.nodes + jit)
            inside = domain.rho(z) < 0
            member = np.zeros(N, dtype=bool)
            member[inside] = _membership_batch(
                domain, mesh.nodes[inside], mesh.normals[inside], z[inside], alpha)
            pts.append(z[member])
            owner.append(idx[member])
            tval.append(np.full(int(member.sum()), t))
    points = np.concatenate(pts)
    owner = np.concatenate(owner)
    covered = np.bincount(owner, minlength=N)
    if np.any(covered == 0):
        raise MaximalError(
            f"{int(np.sum(covered == 0))} nodes have no admissible samples")
    return InteriorSampling(alpha=float(alpha), points=points, owner=owner,
                            depth=np.concatenate(tval))


def nontangential_maximal(F, sampling: InteriorSampling, n_nodes):
    """N F(xi) = max over stored samples in the region of xi of |F|.

    A lower bound for the true supremum, refined by the sampling density.
    """
    vals = np.abs(np.asarray(F(sampling.points)))
    out = np.zeros(n_nodes)
    np.maximum.at(out, sampling.owner, vals)
    if np.any(np.bincount(sampling.owner, minlength=n_nodes) == 0):
        raise MaximalError("sampling does not cover every boundary node")
    return out


def weighted_maximal_norm(test_functions, omega_masses, mesh, qm,
                          family=None):
    """Lower bound for the L^2(Omega) operator norm of the maximal function:
    the best ratio over the supplied test family."""
    if len(test_functions) == 0:
        raise MaximalError("need a nontrivial test family")
    best = 0.0
    table = []
    for name, f in test_functions:
        Mf = hl_maximal(f, mesh, qm, family=family)
        num = np.sqrt(np.sum(np.abs(Mf) ** 2 * omega_masses))
        den = np.sqrt(np.sum(np.abs(f) ** 2 * omega_masses))
        ratio = float(num / den) if den > 0 else 0.0
        table.append((name, ratio))
        best = max(best, ratio)
    return {"norm_lower_bound": best, "table": table}
