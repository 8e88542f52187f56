"""Muckenhoupt A_p machinery on the discrete boundary.

Weights are per-node positive values against a tagged base measure (sigma or
the Leray-Levi measure); characteristics are suprema of the usual two-average
product over families of quasi-metric balls.  One code path serves both base
measures and both the default dyadic family and the exhaustive all-prefix
oracle family.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundaryMesh
from .levi import QuasiMetric, distance_matrix


class WeightError(ValueError):
    pass


@dataclass
class WeightOnMesh:
    values: np.ndarray              # (N,) strictly positive
    base: str = "sigma"             # measure the averages run against
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if np.any(~np.isfinite(self.values)) or np.any(self.values <= 0):
            raise WeightError("weight values must be positive and finite")

    def base_masses(self, mesh: BoundaryMesh):
        return mesh.masses(self.base)

    def omega_masses(self, mesh: BoundaryMesh):
        """Quadrature masses of the weighted measure psi * base."""
        return self.values * self.base_masses(mesh)


@dataclass
class ApReport:
    p: float
    characteristic: float
    max_center: int
    max_radius: float
    family: str
    n_balls: int
    n_skipped: int = 0

    def as_dict(self):
        return {"p": self.p, "characteristic": self.characteristic,
                "max_center": self.max_center, "max_radius": self.max_radius,
                "family": self.family, "n_balls": self.n_balls,
                "n_skipped": self.n_skipped}


@dataclass
class LerayLeviLikeMeasure:
    """omega = phi * lambda with a two-sided positive continuous density."""

    phi: np.ndarray
    m_omega: float
    M_omega: float

    def masses(self, mesh: BoundaryMesh):
        return self.phi * mesh.lambda_w


def make_leray_levi_like(phi, mesh: BoundaryMesh) -> LerayLeviLikeMeasure:
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (mesh.n_nodes,):
        raise WeightError("phi must be a per-node vector")
    if np.any(phi <= 0) or np.any(~np.isfinite(phi)):
        raise WeightError("phi must be positive and finite")
    return LerayLeviLikeMeasure(phi=phi, m_omega=float(np.min(phi)),
                                M_omega=float(np.max(phi)))


# ---------------------------------------------------------------------------
# weight constructors


def constant_weight(mesh, value=1.0, base="sigma"):
    return WeightOnMesh(np.full(mesh.n_nodes, float(value)), base,
                        {"kind": "constant", "value": value})


def power_weight(mesh: BoundaryMesh, qm: QuasiMetric, a, center=None,
                 base="sigma", p=None):
    """psi = d(., w0)^a with the center-node value floored at (h/2)^a.

    With p given, the exponent is checked against the finite-characteristic
    window -2n < a < 2n(p-1) of a 2n-homogeneous space.
    """
    n2 = 2 * mesh.domain.n
    if p is not None and not (-n2 < a < n2 * (p - 1.0)):
        raise WeightError(f"power exponent {a} outside (-{n2}, {n2*(p-1)}) for p={p}")
    if center is None:
        center = np.zeros(mesh.domain.n, dtype=complex)
        center[0] = 1.0
    center = np.asarray(center, dtype=complex)
    from .levi import quasi_distance_pairs
    d = quasi_distance_pairs(qm.ctx, mesh.nodes, center[None, :],
                             drho_w=mesh.drho, hess_w=mesh.h_hol)[:, 0]
    d = np.maximum(d, 0.5 * mesh.h)
    return WeightOnMesh(d ** float(a), base,
                        {"kind": "power", "a": float(a),
                         "center": [float(center.real[j]) for j in range(len(center))],
                         "floor": 0.5 * mesh.h})


def two_level_weight(mesh: BoundaryMesh, qm: QuasiMetric, ratio, center=None,
                     radius=0.5, base="sigma"):
    if center is None:
        center = mesh.nodes[0]
    from .levi import quasi_distance_pairs
    d = quasi_distance_pairs(qm.ctx, mesh.nodes,
                             np.asarray(center, dtype=complex)[None, :],
                             drho_w=mesh.drho, hess_w=mesh.h_hol)[:, 0]
    vals = np.where(d < radius, float(ratio), 1.0)
    return WeightOnMesh(vals, base, {"kind": "two_level", "ratio": float(ratio),
                                     "radius": float(radius)})


def dual_weight(psi: WeightOnMesh, p) -> WeightOnMesh:
    """The conjugate-exponent weight psi^(1-p'); for p = 2 this is 1/psi."""
    if not 1.0 < p < np.inf:
        raise WeightError("p must lie in (1, inf)")
    pprime = p / (p - 1.0)
    return WeightOnMesh(psi.values ** (1.0 - pprime), psi.base,
                        {"kind": "dual", "p": float(p), "of": psi.spec})


# ---------------------------------------------------------------------------
# ball families and the characteristic


@dataclass
class BallFamily:
    name: str
    centers: np.ndarray           # (B,) node indices
    radii: np.ndarray             # (B,) radii, aligned with centers


def dyadic_ball_family(mesh: BoundaryMesh, D=None, qm=None, min_members=3,
                       max_levels=24):
    """All (node, dyadic radius) pairs holding at least min_members nodes."""
    if D is None:
        D = distance_matrix(qm.ctx, mesh)
    diam = float(np.max(D))
    centers, radii = [], []
    for k in range(max_levels):
        r = diam * 2.0 ** (-k)
        counts = np.sum(D < r, axis=1)
        ok = counts >= min_members
        if not np.any(ok):
            break
        centers.append(np.where(ok)[0])
        radii.append(np.full(int(np.sum(ok)), r))
    return BallFamily("dyadic", np.concatenate(centers), np.concatenate(radii))


def ap_characteristic(psi: WeightOnMesh, p, mesh: BoundaryMesh,
                      qm: QuasiMetric, family="dyadic", D=None,
                      min_members=3) -> ApReport:
    """sup over the ball family of <psi>_B <psi^(1-p')>_B^(p-1).

    Averages run against the weight's base measure.  family may be "dyadic",
    "exhaustive" (every distance-prefix ball with >= min_members nodes, the
    oracle family), or an explicit BallFamily.
    """
    if not 1.0 < p < np.inf:
        raise WeightError("p must lie in (1, inf)")
    if D is None:
        D = distance_matrix(qm.ctx, mesh)
    masses = psi.base_masses(mesh)
    w1 = psi.values * masses
    pprime = p / (p - 1.0)
    w2 = psi.values ** (1.0 - pprime) * masses

    best = -np.inf
    best_center, best_radius = -1, 0.0
    n_balls = 0
    n_skipped = 0

    if family == "exhaustive":
        N = mesh.n_nodes
        for c in range(N):
            order = np.argsort(D[c], kind="stable")
            cm = np.cumsum(masses[order])
            c1 = np.cumsum(w1[order])
            c2 = np.cumsum(w2[order])
            lo = min_members - 1
            prod = (c1[lo:] / cm[lo:]) * (c2[lo:] / cm[lo:]) ** (p - 1.0)
            n_balls += len(prod)
            k = int(np.argmax(prod))
            if prod[k] > best:
                best = float(prod[k])
                best_center = c
                best_radius = float(D[c][order][lo + k]) if lo + k < N - 1 else float(np.max(D[c]))
        fam_name = "exhaustive"
    else:
        fam = family if isinstance(family, BallFamily) else \
            dyadic_ball_family(mesh, D=D, min_members=min_members)
        for c, r in zip(fam.centers, fam.radii):
            sel = D[c] < r
            mB = masses[sel].sum()
            if mB <= 0:
                n_skipped += 1
                continue
            prod = (w1[sel].sum() / mB) * (w2[sel].sum() / mB) ** (p - 1.0)
            n_balls += 1
            if prod > best:
                best = float(prod)
                best_center, best_radius = int(c), float(r)
        fam_name = fam.name

    return ApReport(p=float(p), characteristic=best, max_center=best_center,
                    max_radius=best_radius, family=fam_name, n_balls=n_balls,
                    n_skipped=n_skipped)


def ap_equivalence_ratio(psi_values, p, mesh, qm, D=None):
    """Diagnostic ratio of the sigma- and lambda-based characteristics."""
    a = ap_characteristic(WeightOnMesh(psi_values, "sigma"), p, mesh, qm, D=D)
    b = ap_characteristic(WeightOnMesh(psi_values, "leray"), p, mesh, qm, D=D)
    return a.characteristic / b.characteristic, a, b


# ---------------------------------------------------------------------------
# reverse Hoelder probe


def reverse_holder_probe(psi: WeightOnMesh, mesh: BoundaryMesh,
                         gammas=(1.0, 0.5, 0.25, 0.125, 0.0625), cap=None):
    """Measure the global reverse-Hoelder constant on a dyadic gamma grid.

    For each gamma the constant C(gamma) makes
        (avg psi^(1+gamma))^(1/(1+gamma)) = C * avg psi
    with averages against the Leray-Levi measure on the whole boundary.
    Returns the largest grid gamma whose constant stays below cap (cap=None
    accepts any finite value) together with the full table; violations of the
    uniform-theory expectations are reported, not raised.
    """
    lam = mesh.lambda_w
    total = lam.sum()
    avg = float(np.sum(psi.values * lam) / total)
    table = {}
    for g in gammas:
        lhs = float((np.sum(psi.values ** (1.0 + g) * lam) / total) ** (1.0 / (1.0 + g)))
        table[g] = lhs / avg
    chosen = None
    for g in sorted(gammas, reverse=True):
        if np.isfinite(table[g]) and (cap is None or table[g] <= cap):
            chosen = g
            break
    return {"gamma": chosen, "C": table.get(chosen, float("inf")),
            "table": table, "cap": cap}
