"""Levi polynomial, its smoothed variants, and the boundary quasi-metric.

The modified Levi polynomial g0 glues the second-order holomorphic Taylor
polynomial of rho to |w-z|^2 by a smooth cutoff; its square-rooted modulus is
the quasi-distance making (bD, d, lambda) a space of homogeneous type.  All
constants (coercivity, quasi-metric, measure growth) are estimated from data
and reported, never assumed.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import Domain, BoundaryMesh, as_real


class LeviError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# the C-infinity cutoff profile (1 on [0, 1/2], 0 on [1, inf))


# The transition kernel is a flattened bump exp(-eps (1/u + 1/(1-u))): its
# normalized primitive drops from 1 to 0 with max slope close to the linear
# ramp, keeping |d chi/dx| <= 2.5 over the half-width transition band.
_PROFILE_EPS = 0.03
_PROFILE_GRID = np.linspace(0.0, 1.0, 8193)


def _profile_kernel(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = (u > 1e-9) & (u < 1.0 - 1e-9)
    ui = u[inside]
    out[inside] = np.exp(-_PROFILE_EPS * (1.0 / ui + 1.0 / (1.0 - ui)))
    return out


_PROFILE_K = _profile_kernel(_PROFILE_GRID)
_PROFILE_CDF = np.concatenate([[0.0], np.cumsum(
    0.5 * (_PROFILE_K[1:] + _PROFILE_K[:-1]) * np.diff(_PROFILE_GRID))])
_PROFILE_NORM = _PROFILE_CDF[-1]
_PROFILE_CDF /= _PROFILE_NORM


def smooth_step(x):
    """C-infinity profile: 1 for x <= 1/2, 0 for x >= 1, monotone between."""
    x = np.asarray(x, dtype=float)
    u = np.clip(2.0 * x - 1.0, 0.0, 1.0)
    return 1.0 - np.interp(u, _PROFILE_GRID, _PROFILE_CDF)


def smooth_step_deriv(x):
    """d/dx of smooth_step (analytic kernel, supported on the transition)."""
    x = np.asarray(x, dtype=float)
    band = (x > 0.5) & (x < 1.0)
    out = np.zeros_like(x, dtype=float)
    out[band] = -2.0 * _profile_kernel(2.0 * x[band] - 1.0) / _PROFILE_NORM
    return out


# ---------------------------------------------------------------------------
# Levi polynomial and the glued g0


def _pair_diff(W, Z):
    return W[:, None, :] - Z[None, :, :]


def levi_polynomial_pairs(drho_w, hess_w, W, Z):
    """L(w, z) = <drho(w), w-z> - 1/2 sum hess(w)[j,k] (w-z)_j (w-z)_k.

    drho_w, hess_w are evaluated at the source points W; returns (Nw, Nz).
    """
    diff = _pair_diff(W, Z)
    lin = np.einsum("ij,ikj->ik", drho_w, diff)
    quad = np.einsum("ijl,ikj,ikl->ik", hess_w, diff, diff)
    return lin - 0.5 * quad


@dataclass
class LeviContext:
    """Cutoff radius, profile, and the validated coercivity constant."""

    domain: Domain
    mu: float
    c: float                       # measured coercivity constant in (E-c form)
    mu_grid: tuple = ()
    c_by_mu: dict = field(default_factory=dict)

    def chi(self, dist):
        return smooth_step(np.asarray(dist) / self.mu)

    def chi_deriv(self, dist):
        return smooth_step_deriv(np.asarray(dist) / self.mu) / self.mu


def _coercivity_samples(domain: Domain, mesh: BoundaryMesh, rng, n_pairs=100_000):
    """Random (w in bD, z in closure(D)) pairs for the coercivity estimate."""
    N = mesh.n_nodes
    wi = rng.integers(0, N, size=n_pairs)
    zi = rng.integers(0, N, size=n_pairs)
    t = rng.choice(np.array([0.0, 0.03, 0.1, 0.3, 0.7, 1.0]), size=n_pairs)
    W = mesh.nodes[wi]
    Z = (1.0 - t)[:, None] * mesh.nodes[zi]
    return wi, W, Z


def _coercivity_ratio(domain, mesh, wi, W, Z, mu):
    diff = W - Z
    dist = np.linalg.norm(as_real(diff), axis=-1)
    lin = np.einsum("ij,ij->i", mesh.drho[wi], diff)
    quad = np.einsum("ijl,ij,il->i", mesh.h_hol[wi], diff, diff)
    L = lin - 0.5 * quad
    chi = smooth_step(dist / mu)
    g0 = chi * L + (1.0 - chi) * dist ** 2
    denom = -domain.rho(Z) + dist ** 2
    ok = denom > 1e-12
    return np.min(g0.real[ok] / denom[ok])


def build_levi_context(domain: Domain, mesh: BoundaryMesh, rng, mu="auto",
                       n_pairs=100_000, c_floor=0.05) -> LeviContext:
    """Select the cutoff radius and validate coercivity on sampled pairs.

    The default picks the largest mu from a diameter-scaled grid whose
    measured constant c (in Re g0 >= c(-rho(z) + |w-z|^2)) stays above
    c_floor = 0.1 x (exact unit-ball plateau value 1/2).
    """
    wi, W, Z = _coercivity_samples(domain, mesh, rng, n_pairs)
    diam = domain.diameter()
    if mu != "auto":
        c = float(_coercivity_ratio(domain, mesh, wi, W, Z, float(mu)))
        if c <= 0:
            raise LeviError(f"coercivity fails for mu={mu}: c={c:.3g}")
        return LeviContext(domain=domain, mu=float(mu), c=c)
    grid = tuple(diam * f for f in (2.0, 1.0, 0.5, 0.25, 0.125, 0.0625))
    c_by_mu = {}
    for mu_try in grid:
        c_by_mu[mu_try] = float(_coercivity_ratio(domain, mesh, wi, W, Z, mu_try))
    for mu_try in grid:
        if c_by_mu[mu_try] >= c_floor:
            return LeviContext(domain=domain, mu=mu_try, c=c_by_mu[mu_try],
                               mu_grid=grid, c_by_mu=c_by_mu)
    raise LeviError(f"no cutoff radius in {grid} reaches coercivity {c_floor}; "
                    f"measured {c_by_mu}")


def levi_polynomial(ctx: LeviContext, w, z):
    """Scalar/batch Levi polynomial with derivatives evaluated at w."""
    w = np.atleast_2d(np.asarray(w, dtype=complex))
    z = np.atleast_2d(np.asarray(z, dtype=complex))
    out = levi_polynomial_pairs(ctx.domain.drho(w), ctx.domain.h_hol(w), w, z)
    return out[0, 0] if out.size == 1 else out


def g0(ctx: LeviContext, w, z):
    """Modified Levi polynomial: chi L0 + (1 - chi)|w-z|^2."""
    w = np.atleast_2d(np.asarray(w, dtype=complex))
    z = np.atleast_2d(np.asarray(z, dtype=complex))
    L = levi_polynomial_pairs(ctx.domain.drho(w), ctx.domain.h_hol(w), w, z)
    dist = np.linalg.norm(as_real(_pair_diff(w, z)), axis=-1)
    chi = ctx.chi(dist)
    out = chi * L + (1.0 - chi) * dist ** 2
    return out[0, 0] if out.size == 1 else out


def g0_pairs(ctx: LeviContext, W, Z, drho_w=None, hess_w=None):
    """Pairwise g0 on (Nw, Nz) with optional precomputed source data."""
    if drho_w is None:
        drho_w = ctx.domain.drho(W)
    if hess_w is None:
        hess_w = ctx.domain.h_hol(W)
    L = levi_polynomial_pairs(drho_w, hess_w, W, Z)
    dist = np.linalg.norm(as_real(_pair_diff(W, Z)), axis=-1)
    chi = ctx.chi(dist)
    return chi * L + (1.0 - chi) * dist ** 2


def quasi_distance(ctx: LeviContext, w, z):
    return np.sqrt(np.abs(g0(ctx, w, z)))


def quasi_distance_pairs(ctx: LeviContext, W, Z, block=2048, drho_w=None,
                         hess_w=None):
    """|g0|^(1/2) on all (W, Z) pairs, assembled in row blocks."""
    W = np.asarray(W, dtype=complex)
    Z = np.asarray(Z, dtype=complex)
    if drho_w is None:
        drho_w = ctx.domain.drho(W)
    if hess_w is None:
        hess_w = ctx.domain.h_hol(W)
    out = np.empty((W.shape[0], Z.shape[0]))
    for lo in range(0, W.shape[0], block):
        hi = min(lo + block, W.shape[0])
        out[lo:hi] = np.sqrt(np.abs(g0_pairs(
            ctx, W[lo:hi], Z, drho_w[lo:hi], hess_w[lo:hi])))
    return out


_DMAT_CACHE = {}


def distance_matrix(ctx: LeviContext, mesh: BoundaryMesh, block=2048):
    """Full pairwise quasi-distance matrix, cached per (context, mesh)."""
    key = (id(ctx), id(mesh))
    hit = _DMAT_CACHE.get(key)
    if hit is not None and hit[0] is ctx and hit[1] is mesh:
        return hit[2]
    if len(_DMAT_CACHE) > 2:
        _DMAT_CACHE.clear()
    D = quasi_distance_pairs(ctx, mesh.nodes, mesh.nodes, block=block,
                             drho_w=mesh.drho, hess_w=mesh.h_hol)
    _DMAT_CACHE[key] = (ctx, mesh, D)
    return D


# ---------------------------------------------------------------------------
# smoothed Hessian fields tau^eps


@dataclass
class SmoothedHessian:
    """C^1 surrogate for the holomorphic Hessian with dev = sup|H - tau|.

    tau is a surface kernel-smoothing of the sampled Hessian entries at radius
    r; trivial (tau = constant field) when the Hessian is constant.
    """

    domain: Domain
    eps: float
    r: float
    dev: float
    c_eps: float
    trivial: bool
    _pts: np.ndarray = None          # sample nodes
    _H: np.ndarray = None            # Hessians at samples
    _s: np.ndarray = None            # sample masses
    _const: np.ndarray = None        # constant field in trivial mode

    def tau(self, W):
        W = np.asarray(W, dtype=complex)
        if self.trivial:
            return np.broadcast_to(self._const, W.shape[:-1] + self._const.shape).copy()
        phi = self._bump_weights(W)
        num = np.einsum("qi,ijk->qjk", phi, self._H)
        den = np.sum(phi, axis=1)
        return num / den[:, None, None]

    def tau_derivs(self, W):
        """(tau, d tau/d w_m, d tau/d conj(w_m)) with m as the last index."""
        W = np.asarray(W, dtype=complex)
        n = self.domain.n
        if self.trivial:
            t = np.broadcast_to(self._const, W.shape[:-1] + self._const.shape).copy()
            zeros = np.zeros(W.shape[:-1] + (n, n, n), dtype=complex)
            return t, zeros, zeros.copy()
        phi, dphi_w, dphi_wbar = self._bump_weights(W, derivs=True)
        den = np.sum(phi, axis=1)
        num = np.einsum("qi,ijk->qjk", phi, self._H)
        t = num / den[:, None, None]
        dnum_w = np.einsum("qim,ijk->qjkm", dphi_w, self._H)
        dnum_wbar = np.einsum("qim,ijk->qjkm", dphi_wbar, self._H)
        dden_w = np.sum(dphi_w, axis=1)
        dden_wbar = np.sum(dphi_wbar, axis=1)
        dt_w = (dnum_w - t[..., None] * dden_w[:, None, None, :]) / den[:, None, None, None]
        dt_wbar = (dnum_wbar - t[..., None] * dden_wbar[:, None, None, :]) / den[:, None, None, None]
        return t, dt_w, dt_wbar

    def _bump_weights(self, W, derivs=False):
        diff = W[:, None, :] - self._pts[None, :, :]
        dist = np.linalg.norm(as_real(diff), axis=-1)
        x = dist / self.r
        phi = smooth_step(x) * self._s[None, :]
        if not derivs:
            return phi
        dstep = smooth_step_deriv(x) / self.r * self._s[None, :]
        safe = np.where(dist > 1e-14, dist, 1.0)
        # d|v|/dw_m = conj(v_m)/(2|v|), d|v|/dconj(w_m) = v_m/(2|v|)
        dphi_w = dstep[..., None] * np.conj(diff) / (2.0 * safe[..., None])
        dphi_wbar = dstep[..., None] * diff / (2.0 * safe[..., None])
        return phi, dphi_w, dphi_wbar


def _max_grad(sh: SmoothedHessian, W, block=256):
    out = 0.0
    for lo in range(0, W.shape[0], block):
        _, dt_w, dt_wbar = sh.tau_derivs(W[lo:lo + block])
        g2 = 2.0 * (np.abs(dt_w) ** 2 + np.abs(dt_wbar) ** 2)
        out = max(out, float(np.sqrt(np.max(np.sum(g2, axis=-1)))))
    return out


_EUCLID_CACHE = {}


def _euclid_matrix(mesh: BoundaryMesh):
    key = id(mesh)
    if key not in _EUCLID_CACHE or _EUCLID_CACHE[key][0] is not mesh:
        if len(_EUCLID_CACHE) > 2:
            _EUCLID_CACHE.clear()
        diff = mesh.nodes[:, None, :] - mesh.nodes[None, :, :]
        _EUCLID_CACHE[key] = (mesh, np.linalg.norm(as_real(diff), axis=-1))
    return _EUCLID_CACHE[key][1]


def build_smoothed_hessian(domain: Domain, mesh: BoundaryMesh, eps,
                           r="auto", bisect_steps=20) -> SmoothedHessian:
    """Smooth the sampled Hessian field until sup|H - tau| <= eps.

    With r="auto" a bisection finds the largest smoothing radius meeting the
    deviation budget (most smoothing, smallest measured gradient bound c_eps).
    An explicit radius is validated against the same budget.
    """
    H = mesh.h_hol
    Hbar = np.mean(H, axis=0)
    if np.max(np.abs(H - Hbar)) < 1e-14:
        return SmoothedHessian(domain=domain, eps=float(eps), r=np.inf,
                               dev=0.0, c_eps=0.0, trivial=True, _const=Hbar)

    dist = _euclid_matrix(mesh)
    Hflat = H.reshape(mesh.n_nodes, -1)

    def dev_at(rr):
        phi = smooth_step(dist / rr) * mesh.sigma_w[None, :]
        tau = (phi @ Hflat) / np.sum(phi, axis=1)[:, None]
        return float(np.max(np.abs(Hflat - tau)))

    def make(rr):
        sh = SmoothedHessian(domain=domain, eps=float(eps), r=float(rr),
                             dev=dev_at(rr), c_eps=0.0, trivial=False,
                             _pts=mesh.nodes, _H=H, _s=mesh.sigma_w)
        return sh

    if r != "auto":
        sh = make(float(r))
        if sh.dev > eps:
            raise LeviError(
                f"requested smoothing radius {r} gives dev={sh.dev:.3g} > eps={eps}")
        sh.c_eps = _max_grad(sh, mesh.nodes)
        return sh

    r_lo = mesh.h
    # cap below the diameter so the bump never flattens completely and the
    # measured gradient bound stays a usable (positive) regression input
    r_hi = 0.75 * domain.diameter()
    if dev_at(r_lo) > eps:
        raise LeviError(
            f"mesh resolution cannot reach dev <= {eps}: dev({r_lo:.3g}) = {dev_at(r_lo):.3g}")
    if dev_at(r_hi) <= eps:
        sh = make(r_hi)
    else:
        for _ in range(bisect_steps):
            mid = 0.5 * (r_lo + r_hi)
            if dev_at(mid) <= eps:
                r_lo = mid
            else:
                r_hi = mid
        sh = make(r_lo)
    sh.c_eps = _max_grad(sh, mesh.nodes)
    return sh


def g_eps_pairs(ctx: LeviContext, sh: SmoothedHessian, W, Z, drho_w=None,
                tau_w=None):
    """Pairwise g_eps = chi L_eps + (1 - chi)|w-z|^2 with tau in place of H."""
    W = np.asarray(W, dtype=complex)
    Z = np.asarray(Z, dtype=complex)
    if drho_w is None:
        drho_w = ctx.domain.drho(W)
    if tau_w is None:
        tau_w = sh.tau(W)
    L = levi_polynomial_pairs(drho_w, tau_w, W, Z)
    dist = np.linalg.norm(as_real(_pair_diff(W, Z)), axis=-1)
    chi = ctx.chi(dist)
    return chi * L + (1.0 - chi) * dist ** 2


def g_eps(ctx: LeviContext, sh: SmoothedHessian, w, z):
    out = g_eps_pairs(ctx, sh, np.atleast_2d(np.asarray(w, dtype=complex)),
                      np.atleast_2d(np.asarray(z, dtype=complex)))
    return out[0, 0] if out.size == 1 else out


def _pointwise_g(ctx, mesh, ii, jj, tau=None):
    """g0 (or g_eps when tau is given) on index pairs, no Nw x Nz blowup."""
    W, Z = mesh.nodes[ii], mesh.nodes[jj]
    diff = W - Z
    hess = mesh.h_hol[ii] if tau is None else tau[ii]
    lin = np.einsum("ij,ij->i", mesh.drho[ii], diff)
    quad = np.einsum("ijl,ij,il->i", hess, diff, diff)
    L = lin - 0.5 * quad
    dist = np.linalg.norm(as_real(diff), axis=-1)
    chi = ctx.chi(dist)
    return chi * L + (1.0 - chi) * dist ** 2, dist


def geps_comparability(ctx, sh: SmoothedHessian, mesh, rng, n_pairs=10_000):
    """Scan |g0 - g_eps| / |w-z|^2 and the two-sided ratio |g_eps| / |g0|.

    Returns a dict with the deviation constant K = sup |g0-g_eps|/|w-z|^2 and
    the comparability envelope over the sampled off-diagonal boundary pairs.
    """
    N = mesh.n_nodes
    ii = rng.integers(0, N, size=n_pairs)
    jj = rng.integers(0, N, size=n_pairs)
    keep = ii != jj
    ii, jj = ii[keep], jj[keep]
    tau = sh.tau(mesh.nodes)
    G0, dist = _pointwise_g(ctx, mesh, ii, jj)
    Ge, _ = _pointwise_g(ctx, mesh, ii, jj, tau=tau)
    K = float(np.max(np.abs(G0 - Ge) / dist ** 2))
    ratio = np.abs(Ge) / np.abs(G0)
    return {"K": K, "ratio_lo": float(np.min(ratio)),
            "ratio_hi": float(np.max(ratio)), "n_pairs": int(len(ii))}


# ---------------------------------------------------------------------------
# quasi-metric constants


@dataclass
class QuasiMetric:
    ctx: LeviContext
    A0: float
    Cd: float
    comp_lower: float       # sup |w-z| / d
    comp_upper: float       # sup d / |w-z|^(1/2)
    min_offdiag: float
    method: str
    growth: dict = None

    def pairs(self, W, Z):
        return quasi_distance_pairs(self.ctx, W, Z)


def estimate_quasimetric_constants(mesh: BoundaryMesh, ctx: LeviContext,
                                   rng=None, exhaustive_limit=500,
                                   n_random_triples=1_000_000,
                                   n_adversarial_pairs=2000,
                                   D=None) -> QuasiMetric:
    """Estimate A0 (symmetry) and C_d (quasi-triangle) from the mesh.

    Exhaustive triple scan below exhaustive_limit nodes, otherwise a random
    census plus adversarial near-collinear triples (denominator minimized over
    all midpoints for a sample of pairs).
    """
    if mesh.n_nodes < 2:
        raise LeviError("need at least 2 nodes")
    if rng is None:
        rng = np.random.default_rng(0)
    if D is None:
        D = distance_matrix(ctx, mesh)
    N = D.shape[0]
    off = ~np.eye(N, dtype=bool)
    min_off = float(np.min(D[off]))
    if min_off <= 0:
        raise LeviError("quasi-distance vanishes on distinct nodes")
    A0 = float(np.max(np.maximum(D[off] / D.T[off], D.T[off] / D[off])))

    Cd = 1.0
    if N <= exhaustive_limit:
        method = "exhaustive"
        for k in range(N):
            denom = D[:, k][:, None] + D[k, :][None, :]
            ratio = np.where(denom > 0, D / np.where(denom > 0, denom, 1.0), 0.0)
            Cd = max(Cd, float(np.max(ratio)))
    else:
        method = "randomized+adversarial"
        batch = 200_000
        done = 0
        while done < n_random_triples:
            b = min(batch, n_random_triples - done)
            ii = rng.integers(0, N, size=b)
            jj = rng.integers(0, N, size=b)
            kk = rng.integers(0, N, size=b)
            denom = D[ii, kk] + D[kk, jj]
            ok = denom > 0
            if np.any(ok):
                Cd = max(Cd, float(np.max(D[ii[ok], jj[ok]] / denom[ok])))
            done += b
        ii = rng.integers(0, N, size=n_adversarial_pairs)
        jj = rng.integers(0, N, size=n_adversarial_pairs)
        keep = ii != jj
        ii, jj = ii[keep], jj[keep]
        denom = D[ii, :] + D[:, jj].T
        denom[np.arange(len(ii)), ii] = np.inf
        denom[np.arange(len(ii)), jj] = np.inf
        Cd = max(Cd, float(np.max(D[ii, jj] / np.min(denom, axis=1))))

    diff = np.linalg.norm(as_real(mesh.nodes[:, None, :] - mesh.nodes[None, :, :]),
                          axis=-1) if N <= 3000 else None
    if diff is not None:
        comp_lower = float(np.max(diff[off] / D[off]))
        comp_upper = float(np.max(D[off] / np.sqrt(diff[off])))
    else:
        ii = rng.integers(0, N, size=200_000)
        jj = rng.integers(0, N, size=200_000)
        keep = ii != jj
        ii, jj = ii[keep], jj[keep]
        e = np.linalg.norm(as_real(mesh.nodes[ii] - mesh.nodes[jj]), axis=-1)
        comp_lower = float(np.max(e / D[ii, jj]))
        comp_upper = float(np.max(D[ii, jj] / np.sqrt(e)))

    return QuasiMetric(ctx=ctx, A0=A0, Cd=Cd, comp_lower=comp_lower,
                       comp_upper=comp_upper, min_offdiag=min_off, method=method)


def ball_query(mesh: BoundaryMesh, qm: QuasiMetric, center, radius):
    """Indices of mesh nodes with d(node, center) < radius."""
    if radius <= 0:
        raise LeviError("radius must be positive")
    if np.isscalar(center) or isinstance(center, (int, np.integer)):
        c = mesh.nodes[int(center)][None, :]
    else:
        c = np.asarray(center, dtype=complex)[None, :]
    d = quasi_distance_pairs(qm.ctx, mesh.nodes, c,
                             drho_w=mesh.drho, hess_w=mesh.h_hol)[:, 0]
    return np.where(d < radius)[0]


def measure_growth_diagnostic(mesh: BoundaryMesh, qm: QuasiMetric, masses,
                              rng=None, n_centers=50, r_max=1.0,
                              fit_cap=0.5, min_occupancy=16,
                              n_annulus_samples=200):
    """Ball-growth, doubling, and annulus diagnostics for a node-mass measure.

    Fits log measure(B_r) against log r on a sqrt(2)-geometric radius grid.
    The grid spans [r_lo, r_max] where r_lo is the smallest radius at which
    the median ball holds min_occupancy nodes; the slope is fitted on radii
    <= fit_cap * r_max (the upper radii enter the envelope and doubling
    constants but saturate near the diameter and would bias the exponent).
    The slope fit excludes the center node's own mass -- the guaranteed atom
    at distance zero overweights small balls; without it the ball mass is an
    unbiased sample of the continuum measure.  Centers are drawn from the
    measure itself, so chart-degenerate slivers of the product grid (which
    carry almost no mass but many nodes) do not dominate the census.
    """
    masses = np.asarray(masses, dtype=float)
    if np.any(masses <= 0) or masses.sum() <= 0:
        raise LeviError("measure must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    N = mesh.n_nodes
    centers = rng.choice(N, size=min(n_centers, N), replace=False,
                         p=masses / masses.sum())

    n_r = max(3, int(np.ceil(np.log(r_max / (0.02 * r_max)) / np.log(np.sqrt(2.0)))))
    radii_full = r_max * np.sqrt(2.0) ** (-np.arange(n_r))[::-1]

    # per-center sorted distances and mass prefix sums
    ball_mass = np.zeros((len(centers), len(radii_full)))
    fit_mass = np.zeros((len(centers), len(radii_full)))
    ball_count = np.zeros((len(centers), len(radii_full)), dtype=int)
    dcols = quasi_distance_pairs(qm.ctx, mesh.nodes, mesh.nodes[centers],
                                 drho_w=mesh.drho, hess_w=mesh.h_hol)
    for a, c in enumerate(centers):
        d = dcols[:, a]
        order = np.argsort(d, kind="stable")
        ds = d[order]
        cm = np.cumsum(masses[order])
        idx = np.searchsorted(ds, radii_full, side="left")
        ball_mass[a] = np.where(idx > 0, cm[np.maximum(idx - 1, 0)], 0.0)
        fit_mass[a] = ball_mass[a] - masses[c]
        ball_count[a] = idx

    count_excl = ball_count - 1
    med_count = np.median(count_excl, axis=0)
    low_count = np.min(count_excl, axis=0)
    usable = (med_count >= min_occupancy) & (low_count >= 4)
    if not np.any(usable):
        raise LeviError("no radius is resolvable at this mesh scale")
    r_lo_idx = int(np.argmax(usable))
    radii = radii_full[r_lo_idx:]
    M = ball_mass[:, r_lo_idx:]
    Mfit = fit_mass[:, r_lo_idx:]

    fit_mask = radii <= fit_cap * r_max
    if np.sum(fit_mask) < 3:
        fit_mask = np.ones_like(radii, dtype=bool)
    x = np.log(radii[fit_mask])
    y = np.log(np.maximum(Mfit[:, fit_mask], 1e-300))
    xc = x - x.mean()
    slope = float(np.mean(np.sum(xc * (y - y.mean(axis=1, keepdims=True)), axis=1)
                          / np.sum(xc ** 2)))

    dim = 2 * mesh.domain.n
    total = masses.sum()
    rel = M / total
    env = np.maximum(rel / radii[None, :] ** dim, radii[None, :] ** dim / rel)
    c_omega = float(np.max(env))

    # doubling: compare consecutive sqrt(2) steps two apart (factor 2 in r)
    doubling = 1.0
    for k in range(len(radii) - 2):
        ratio = M[:, k + 2] / np.maximum(M[:, k], 1e-300)
        doubling = max(doubling, float(np.max(ratio)))

    # annulus: mass(B_r(w) symdiff B_r(z)) <= C (d(w,z)/r)^eps_omega
    pts = []
    for a, c in enumerate(centers[: min(20, len(centers))]):
        d = dcols[:, a]
        for r in radii:
            cand = np.where((d > 0.05 * r) & (d <= r))[0]
            if len(cand) == 0:
                continue
            z = cand[rng.integers(0, len(cand))]
            dz = quasi_distance_pairs(qm.ctx, mesh.nodes, mesh.nodes[[z]],
                                      drho_w=mesh.drho, hess_w=mesh.h_hol)[:, 0]
            sym = np.sum(masses[(d < r) != (dz < r)]) / total
            if sym > 0:
                pts.append((d[z] / r, sym))
            if len(pts) >= n_annulus_samples:
                break
    if len(pts) >= 8:
        lx = np.log(np.array([p[0] for p in pts]))
        ly = np.log(np.array([p[1] for p in pts]))
        A = np.vstack([lx, np.ones_like(lx)]).T
        coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
        eps_omega = float(coef[0])
        C_omega_annulus = float(np.exp(np.max(ly - eps_omega * lx)))
    else:
        eps_omega = float("nan")
        C_omega_annulus = float("nan")

    table = {
        "radii": radii.tolist(),
        "median_mass": np.median(M, axis=0).tolist(),
        "median_count": np.median(ball_count[:, r_lo_idx:], axis=0).tolist(),
    }
    return {
        "exponent": slope,
        "expected_exponent": dim,
        "c_omega": c_omega,
        "doubling": doubling,
        "eps_omega": eps_omega,
        "C_omega_annulus": C_omega_annulus,
        "n_centers": int(len(centers)),
        "r_window": [float(radii[0]), float(radii[-1])],
        "fit_cap": float(fit_cap * r_max),
        "table": table,
    }
