"""Strongly pseudoconvex model domains and their boundary quadrature meshes.

Every domain is given by an explicit defining function rho (negative inside,
zero on the boundary, nonvanishing gradient there) with analytic first and
second complex derivatives.  Boundary meshes are product quadrature grids on
the unit sphere S^{2n-1}, radially projected onto {rho = 0}, carrying the
induced surface measure sigma and the Leray-Levi density Lambda.
"""

from dataclasses import dataclass, field
import json

import numpy as np
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    pass


class MeshError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class DomainSpec:
    """Parameters selecting one of the supported domain families."""

    kind: str                    # "unit_ball" | "ellipsoid" | "perturbed_ball"
    n: int = 2
    axes: tuple = ()             # ellipsoid semi-axis scales a_1..a_n > 0
    kappa: float = 0.0           # perturbed_ball amplitude
    alpha: float = 1.0           # perturbed_ball Hoelder exponent in (0, 1]
    direction: int = 0           # perturbed_ball coordinate index

    def as_dict(self):
        return {
            "kind": self.kind, "n": self.n, "axes": list(self.axes),
            "kappa": self.kappa, "alpha": self.alpha,
            "direction": self.direction,
        }


@dataclass(frozen=True)
class DefiningFunctionEval:
    """rho and its complex derivative blocks at one point."""

    value: float
    gradient: np.ndarray      # (n,) complex, d rho / d w_j
    h_hol: np.ndarray         # (n, n) complex symmetric, d2 rho / dw_j dw_k
    h_mix: np.ndarray         # (n, n) Hermitian, d2 rho / dw_j d conj(w_k)


class Domain:
    """Vectorized evaluators for rho, its gradient and complex Hessians.

    Points are complex arrays of shape (..., n).
    """

    def __init__(self, spec: DomainSpec):
        if spec.n < 2:
            raise GeometryError("dimension n must be >= 2")
        if spec.kind == "unit_ball":
            pass
        elif spec.kind == "ellipsoid":
            if len(spec.axes) != spec.n or any(a <= 0 for a in spec.axes):
                raise GeometryError("ellipsoid needs n positive axis scales")
        elif spec.kind == "perturbed_ball":
            if spec.kappa < 0:
                raise GeometryError("perturbation amplitude must be >= 0")
            if not (0.0 < spec.alpha <= 1.0):
                raise GeometryError("Hoelder exponent alpha must be in (0, 1]")
            if not (0 <= spec.direction < spec.n):
                raise GeometryError("perturbation direction out of range")
        else:
            raise GeometryError(f"unsupported domain kind {spec.kind!r}")
        self.spec = spec
        self.n = spec.n

    # -- defining function --------------------------------------------------

    def rho(self, z):
        z = np.asarray(z, dtype=complex)
        s = self.spec
        if s.kind == "unit_ball":
            return np.sum(np.abs(z) ** 2, axis=-1) - 1.0
        if s.kind == "ellipsoid":
            a = np.asarray(s.axes, dtype=float)
            return np.sum(np.abs(z / a) ** 2, axis=-1) - 1.0
        u = z[..., s.direction].real
        return (np.sum(np.abs(z) ** 2, axis=-1) - 1.0
                + s.kappa * np.abs(u) ** (2.0 + s.alpha))

    def drho(self, z):
        """Holomorphic gradient (d rho / d w_j), shape (..., n)."""
        z = np.asarray(z, dtype=complex)
        s = self.spec
        if s.kind == "unit_ball":
            return np.conj(z)
        if s.kind == "ellipsoid":
            a = np.asarray(s.axes, dtype=float)
            return np.conj(z) / a ** 2
        g = np.conj(z).copy()
        u = z[..., s.direction].real
        p = 2.0 + s.alpha
        # d/dz_m |Re z_m|^p = phi'(u)/2 with phi(u) = |u|^p
        g[..., s.direction] += 0.5 * s.kappa * p * np.abs(u) ** (p - 1.0) * np.sign(u)
        return g

    def h_hol(self, z):
        """Holomorphic Hessian (d2 rho / dw_j dw_k), shape (..., n, n)."""
        z = np.asarray(z, dtype=complex)
        s = self.spec
        out = np.zeros(z.shape + (self.n,), dtype=complex)
        if s.kind == "perturbed_ball":
            u = z[..., s.direction].real
            p = 2.0 + s.alpha
            out[..., s.direction, s.direction] = (
                0.25 * s.kappa * p * (p - 1.0) * np.abs(u) ** (p - 2.0))
        return out

    def h_mix(self, z):
        """Mixed Hessian (d2 rho / dw_j d conj(w_k)), shape (..., n, n)."""
        z = np.asarray(z, dtype=complex)
        s = self.spec
        eye = np.eye(self.n, dtype=complex)
        if s.kind == "unit_ball":
            return np.broadcast_to(eye, z.shape + (self.n,)).copy()
        if s.kind == "ellipsoid":
            a = np.asarray(s.axes, dtype=float)
            return np.broadcast_to(np.diag(1.0 / a ** 2).astype(complex),
                                   z.shape + (self.n,)).copy()
        out = np.broadcast_to(eye, z.shape + (self.n,)).copy()
        u = z[..., s.direction].real
        p = 2.0 + s.alpha
        out[..., s.direction, s.direction] += (
            0.25 * s.kappa * p * (p - 1.0) * np.abs(u) ** (p - 2.0))
        return out

    def diameter(self):
        s = self.spec
        if s.kind == "ellipsoid":
            return 2.0 * max(s.axes)
        return 2.0


def make_domain(kind, n=2, **kw):
    return Domain(DomainSpec(kind=kind, n=n, **kw))


def eval_defining(domain: Domain, z) -> DefiningFunctionEval:
    z = np.asarray(z, dtype=complex)
    return DefiningFunctionEval(
        value=float(domain.rho(z)),
        gradient=domain.drho(z),
        h_hol=domain.h_hol(z),
        h_mix=domain.h_mix(z),
    )


def fd_check_derivatives(domain: Domain, z, step=1e-5):
    """Max abs deviation of the analytic blocks from central differences of rho.

    Returns (err_grad, err_hol, err_mix).  Used as the self-test hook for the
    derivative formulas; on a C^2-but-not-C^3 domain the Hessian error near the
    kink is O(step^alpha) rather than O(step^2).
    """
    z = np.asarray(z, dtype=complex)
    n = domain.n
    ev = eval_defining(domain, z)

    def rho_at(dx):
        return domain.rho(z + dx)

    e = np.eye(n)
    grad_fd = np.zeros(n, dtype=complex)
    for j in range(n):
        dx = (rho_at(step * e[j]) - rho_at(-step * e[j])) / (2 * step)
        dy = (rho_at(1j * step * e[j]) - rho_at(-1j * step * e[j])) / (2 * step)
        # d/dz = (d/dx - i d/dy)/2 for the holomorphic Wirtinger derivative
        grad_fd[j] = 0.5 * (dx - 1j * dy)
    err_grad = np.max(np.abs(grad_fd - ev.gradient))

    def wirtinger_grad(point):
        g = np.zeros(n, dtype=complex)
        for j in range(n):
            dx = (domain.rho(point + step * e[j]) - domain.rho(point - step * e[j])) / (2 * step)
            dy = (domain.rho(point + 1j * step * e[j]) - domain.rho(point - 1j * step * e[j])) / (2 * step)
            g[j] = 0.5 * (dx - 1j * dy)
        return g

    hol_fd = np.zeros((n, n), dtype=complex)
    mix_fd = np.zeros((n, n), dtype=complex)
    for k in range(n):
        gp = wirtinger_grad(z + step * e[k])
        gm = wirtinger_grad(z - step * e[k])
        gip = wirtinger_grad(z + 1j * step * e[k])
        gim = wirtinger_grad(z - 1j * step * e[k])
        ddx = (gp - gm) / (2 * step)
        ddy = (gip - gim) / (2 * step)
        hol_fd[:, k] = 0.5 * (ddx - 1j * ddy)
        mix_fd[:, k] = 0.5 * (ddx + 1j * ddy)
    err_hol = np.max(np.abs(hol_fd - ev.h_hol))
    err_mix = np.max(np.abs(mix_fd - ev.h_mix))
    return err_grad, err_hol, err_mix


def check_strong_pseudoconvexity(domain: Domain, samples):
    """Min eigenvalue of the mixed Hessian over the sample points."""
    samples = np.asarray(samples, dtype=complex)
    if samples.size == 0:
        raise GeometryError("sample set is empty")
    H = domain.h_mix(samples)
    return float(np.min(np.linalg.eigvalsh(H)))


# ---------------------------------------------------------------------------
# real/complex views, tangent frames, Leray-Levi density


def as_real(z):
    """(..., n) complex -> (..., 2n) real, layout (x1, y1, x2, y2, ...)."""
    z = np.asarray(z, dtype=complex)
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def as_complex(x):
    x = np.asarray(x, dtype=float)
    return x[..., 0::2] + 1j * x[..., 1::2]


def unit_normals(domain: Domain, points):
    """Unit outer normals as complex vectors: conj(drho)/|drho|."""
    g = domain.drho(points)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    if np.any(norms < 1e-10):
        raise GeometryError("degenerate gradient: |drho| < 1e-10")
    return np.conj(g) / norms


def tangent_frames(normals):
    """Oriented orthonormal tangent frames for a batch of unit normals.

    normals: (N, n) complex.  Returns (N, 2n-1, n) complex: for each node an
    orthonormal real basis of the tangent space such that (normal, frame) is
    positively oriented in C^n = R^{2n}.
    """
    nu = as_real(normals)                       # (N, 2n)
    N, d = nu.shape
    frames = np.empty((N, d - 1, d))
    drop = np.argmax(np.abs(nu), axis=1)
    eye = np.eye(d)
    for k in np.unique(drop):
        sel = np.where(drop == k)[0]
        cols = [j for j in range(d) if j != k]
        M = np.empty((len(sel), d, d))
        M[:, :, 0] = nu[sel]
        M[:, :, 1:] = eye[:, cols][None, :, :]
        Q, _ = np.linalg.qr(M)
        # first QR column spans nu (up to sign); remaining span the tangent
        T = Q[:, :, 1:]
        det = np.linalg.det(np.concatenate([nu[sel][:, :, None], T], axis=2))
        T = np.transpose(T, (0, 2, 1)).copy()   # (sel, 2n-1, 2n)
        T[det < 0, -1, :] *= -1.0
        frames[sel] = T
    return as_complex(frames)


def _pfaffian(m):
    """Pfaffian of a (2k x 2k) antisymmetric complex matrix (tiny k)."""
    k2 = m.shape[0]
    if k2 == 0:
        return 1.0 + 0j
    if k2 == 2:
        return m[0, 1]
    total = 0.0 + 0j
    idx = list(range(1, k2))
    for pos, j in enumerate(idx):
        rest = [r for r in idx if r != j]
        sub = m[np.ix_(rest, rest)]
        total += (-1.0) ** pos * m[0, j] * _pfaffian(sub)
    return total


def _form_on_frame(eta, M, T):
    """Evaluate eta ^ (dbar eta)^{n-1} on the frame vectors T.

    eta: (..., n) complex coefficients of a (1,0)-form.
    M:   (..., n, n) matrix with M[j, m] = d eta_j / d conj(w_m).
    T:   (..., 2n-1, n) frame vectors.
    The 2-form B = sum M[j,m] dconj(w_m) ^ dw_j evaluates on vectors (u, v) as
    v.(M conj(u)) - u.(M conj(v)).
    """
    eta = np.asarray(eta)
    n = eta.shape[-1]
    k = 2 * n - 1
    a = np.einsum("...m,...rm->...r", eta, T)               # eta(t_r)
    Mc = np.einsum("...jm,...rm->...rj", M, np.conj(T))     # (M conj(t_r))_j
    B = (np.einsum("...sj,...rj->...rs", T, Mc)
             - np.einsum("...rj,...sj->...rs", T, Mc))      # B(t_r, t_s)
    if n == 2:
        return a[..., 0] * B[..., 1, 2] - a[..., 1] * B[..., 0, 2] \
            + a[..., 2] * B[..., 0, 1]
    # general n: expand along the 1-form, Pfaffian for the 2-form power
    fact = 1.0
    for i in range(2, n):
        fact *= i
    flat_a = a.reshape(-1, k)
    flat_B = B.reshape(-1, k, k)
    out = np.empty(flat_a.shape[0], dtype=complex)
    for i in range(flat_a.shape[0]):
        acc = 0.0 + 0j
        for j in range(k):
            rest = [r for r in range(k) if r != j]
            pf = _pfaffian(flat_B[i][np.ix_(rest, rest)])
            acc += (-1.0) ** j * flat_a[i, j] * pf
        out[i] = acc * fact
    return out.reshape(a.shape[:-1])


def leray_levi_density(domain: Domain, w, frames=None):
    """Leray-Levi density Lambda(w) > 0 with d(lambda) = Lambda d(sigma).

    Evaluates (1/(2 pi i)^n) j*(drho ^ (dbar d rho)^{n-1}) on an oriented
    orthonormal tangent frame at w.
    """
    w = np.atleast_2d(np.asarray(w, dtype=complex))
    if frames is None:
        frames = tangent_frames(unit_normals(domain, w))
    eta = domain.drho(w)
    M = domain.h_mix(w)
    n = domain.n
    val = _form_on_frame(eta, M, frames) / (2j * np.pi) ** n
    if np.max(np.abs(val.imag)) > 1e-8 * max(1.0, np.max(np.abs(val.real))):
        raise GeometryError("Leray-Levi form evaluated to a non-real density")
    lam = val.real
    if np.any(lam <= 0):
        raise GeometryError("Leray-Levi density is not positive")
    return lam


# ---------------------------------------------------------------------------
# boundary meshes


@dataclass
class BoundaryMesh:
    domain: Domain
    resolution: int
    nodes: np.ndarray           # (N, n) complex
    sigma_w: np.ndarray         # (N,) quadrature masses for sigma
    leray: np.ndarray           # (N,) Leray-Levi densities Lambda(w_i)
    normals: np.ndarray         # (N, n) complex unit outer normals
    h: float                    # max nearest-neighbor Euclidean distance
    tol_surface: float = 1e-10
    # per-node geometry caches, filled at construction
    drho: np.ndarray = None
    h_hol: np.ndarray = None
    h_mix: np.ndarray = None
    frames: np.ndarray = None

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def lambda_w(self):
        return self.leray * self.sigma_w

    def masses(self, measure="sigma"):
        if measure == "sigma":
            return self.sigma_w
        if measure in ("leray", "lambda"):
            return self.lambda_w
        raise GeometryError(f"unknown measure tag {measure!r}")

    def manifest(self):
        return {
            "domain": self.domain.spec.as_dict(),
            "resolution": self.resolution,
            "n_nodes": int(self.n_nodes),
            "tol_surface": self.tol_surface,
            "total_sigma": float(np.sum(self.sigma_w)),
            "total_lambda": float(np.sum(self.lambda_w)),
            "mesh_scale": float(self.h),
        }


def _simplex_coords(params, n):
    """Stick-breaking map from (n-1) unit-cube coordinates to the simplex.

    Returns (v, jac) with v of shape (N, n), sum v = 1, and jac the jacobian
    dv/dx of the map.
    """
    X = params[:, : n - 1]
    v = np.empty((params.shape[0], n))
    jac = np.ones(params.shape[0])
    rest = np.ones(params.shape[0])
    for k in range(n - 1):
        v[:, k] = rest * X[:, k]
        jac *= rest
        rest = rest * (1.0 - X[:, k])
    v[:, n - 1] = rest
    return v, jac


def _sphere_parametrization(n, resolution):
    """Product grid on S^{2n-1}: Gauss-Legendre radial simplex x uniform phases.

    Writes points as w_j = sqrt(v_j) exp(i phi_j) with v on the unit simplex;
    in these coordinates d sigma = 2^{-(n-1)} dv dphi, so Gauss-Legendre in v
    integrates polynomial (monomial-norm) integrands exactly.
    Returns (params, sphere_points, sphere_weights, cell_volumes) with params
    of shape (N, 2n-1): first n-1 cube coordinates in [0,1], then n phases.
    """
    if resolution < 3:
        raise MeshError("resolution must be >= 3")
    m = resolution
    P = 2 * resolution - 1
    x01, wx = np.polynomial.legendre.leggauss(m)
    x01 = 0.5 * (x01 + 1.0)
    wx = 0.5 * wx
    phi = np.arange(P) * (2 * np.pi / P)
    dphi = 2 * np.pi / P

    axes = [x01] * (n - 1) + [phi] * n
    waxes = [wx] * (n - 1) + [np.full(P, dphi)] * n
    grids = np.meshgrid(*axes, indexing="ij")
    params = np.stack([g.ravel() for g in grids], axis=1)
    wgrids = np.meshgrid(*waxes, indexing="ij")
    cell = np.ones(params.shape[0])
    for g in wgrids:
        cell = cell * g.ravel()

    v, jac = _simplex_coords(params, n)
    sphere_w = cell * jac / (2.0 ** (n - 1))
    phases = params[:, n - 1:]
    sphere = np.sqrt(v) * np.exp(1j * phases)
    return params, sphere, sphere_w, cell


def _radial_project(domain: Domain, directions, tol, max_iter=50):
    """Solve rho(t * dir) = 0 for t > 0 by vectorized Newton from t = 1."""
    t = np.ones(directions.shape[0])
    for _ in range(max_iter):
        pts = t[:, None] * directions
        r = domain.rho(pts)
        if np.max(np.abs(r)) <= tol:
            return t
        slope = 2.0 * np.real(np.einsum("ij,ij->i", domain.drho(pts), directions))
        slope = np.where(np.abs(slope) < 1e-14, 1e-14, slope)
        t = t - r / slope
    bad = int(np.argmax(np.abs(domain.rho(t[:, None] * directions))))
    raise MeshError(f"Newton projection failed to converge at node {bad}")


def _map_to_boundary(domain: Domain, params, tol):
    """(N, 2n-1) parameters -> boundary points, via the sphere + radial Newton."""
    n = domain.n
    phases = params[:, n - 1:]
    v, _ = _simplex_coords(params, n)
    sphere = np.sqrt(np.clip(v, 0.0, None)) * np.exp(1j * phases)
    if domain.spec.kind == "unit_ball":
        return sphere
    if domain.spec.kind == "ellipsoid":
        sphere = sphere * np.asarray(domain.spec.axes)
    t = _radial_project(domain, sphere, tol)
    return t[:, None] * sphere


def generate_mesh(domain: Domain, resolution, tol_surface=1e-10) -> BoundaryMesh:
    """Boundary quadrature mesh with sigma weights and Leray-Levi densities.

    Node count grows like resolution^(2n-1).  For the unit ball the sigma
    weights are exact in the simplex-phase coordinates; otherwise they are
    recomputed from the first fundamental form of the projected chart
    (finite-difference Jacobian).
    """
    n = domain.n
    params, sphere, sphere_w, cell = _sphere_parametrization(n, resolution)
    if domain.spec.kind == "unit_ball":
        nodes = sphere
        sigma_w = sphere_w.copy()
    else:
        nodes = _map_to_boundary(domain, params, tol_surface)
        # first fundamental form of the chart by central differences
        N = params.shape[0]
        k = 2 * n - 1
        J = np.empty((N, 2 * n, k))
        for d_ in range(k):
            step = 1e-6
            dp = np.zeros_like(params)
            dp[:, d_] = step
            pp = _map_to_boundary(domain, params + dp, tol_surface * 10)
            pm = _map_to_boundary(domain, params - dp, tol_surface * 10)
            J[:, :, d_] = (as_real(pp) - as_real(pm)) / (2 * step)
        G = np.einsum("nij,nik->njk", J, J)
        dets = np.linalg.det(G)
        if np.any(dets <= 0):
            raise MeshError("degenerate first fundamental form in mesh chart")
        sigma_w = np.sqrt(dets) * cell

    bad = np.abs(domain.rho(nodes)) > tol_surface
    if np.any(bad):
        raise MeshError(f"node {int(np.argmax(bad))} off the surface beyond tol")

    normals = unit_normals(domain, nodes)
    frames = tangent_frames(normals)
    leray = leray_levi_density(domain, nodes, frames=frames)

    tree = cKDTree(as_real(nodes))
    dist, _ = tree.query(as_real(nodes), k=2)
    h = float(np.max(dist[:, 1]))

    mesh = BoundaryMesh(domain=domain, resolution=resolution, nodes=nodes,
                        sigma_w=sigma_w, leray=leray, normals=normals, h=h,
                        tol_surface=tol_surface)
    mesh.drho = domain.drho(nodes)
    mesh.h_hol = domain.h_hol(nodes)
    mesh.h_mix = domain.h_mix(nodes)
    mesh.frames = frames
    return mesh


# ---------------------------------------------------------------------------
# interior geometry: boundary distance and approach regions


def boundary_distance(domain: Domain, z, tol=1e-12, max_iter=30):
    """Distance to the boundary via gradient-flow projection onto {rho = 0}."""
    z = np.atleast_2d(np.asarray(z, dtype=complex))
    p = z.copy()
    for _ in range(max_iter):
        r = domain.rho(p)
        if np.max(np.abs(r)) <= tol:
            break
        g = 2.0 * np.conj(domain.drho(p))      # real gradient as complex vector
        g2 = np.sum(np.abs(g) ** 2, axis=-1)
        p = p - (r / g2)[:, None] * g
    return np.linalg.norm(as_real(z) - as_real(p), axis=-1)


def approach_region(domain: Domain, xi, z, alpha):
    """Membership in the aperture-alpha approach region at boundary point xi.

    Returns (member, delta) where delta is the minimum of the distance of z to
    the boundary and to the tangent space at xi; membership requires
    |(z - xi) . conj(nu)| < (1 + alpha) delta and |z - xi|^2 < alpha delta.
    """
    xi = np.asarray(xi, dtype=complex)
    z = np.asarray(z, dtype=complex)
    if domain.rho(z) >= 0:
        raise GeometryError("approach_region expects an interior point")
    nu = unit_normals(domain, xi[None, :])[0]
    pairing = np.sum((z - xi) * np.conj(nu))
    d_tan = abs(pairing.real)
    d_bd = float(boundary_distance(domain, z[None, :])[0])
    delta = min(d_bd, d_tan)
    member = (abs(pairing) < (1.0 + alpha) * delta) and \
        (np.sum(np.abs(z - xi) ** 2) < alpha * delta)
    return bool(member), float(delta)


# ---------------------------------------------------------------------------
# mesh file format: CSV columns + JSON sidecar


def write_mesh(mesh: BoundaryMesh, csv_path, manifest_path=None):
    n = mesh.domain.n
    cols = []
    header = []
    for j in range(n):
        header += [f"re_w{j+1}", f"im_w{j+1}"]
        cols += [mesh.nodes[:, j].real, mesh.nodes[:, j].imag]
    header += ["sigma_weight", "leray_density"]
    cols += [mesh.sigma_w, mesh.leray]
    for j in range(n):
        header += [f"re_nu{j+1}", f"im_nu{j+1}"]
        cols += [mesh.normals[:, j].real, mesh.normals[:, j].imag]
    data = np.column_stack(cols)
    np.savetxt(csv_path, data, delimiter=",", header=",".join(header),
               comments="", fmt="%.17g")
    if manifest_path is not None:
        with open(manifest_path, "w") as f:
            json.dump(mesh.manifest(), f, indent=2, sort_keys=True)


def read_mesh(csv_path, domain: Domain, resolution=0, tol_surface=1e-10):
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1)
    n = domain.n
    nodes = data[:, 0:2 * n:2] + 1j * data[:, 1:2 * n:2]
    sigma_w = data[:, 2 * n]
    leray = data[:, 2 * n + 1]
    normals = data[:, 2 * n + 2::2] + 1j * data[:, 2 * n + 3::2]
    tree = cKDTree(as_real(nodes))
    dist, _ = tree.query(as_real(nodes), k=2)
    mesh = BoundaryMesh(domain=domain, resolution=resolution, nodes=nodes,
                        sigma_w=sigma_w, leray=leray, normals=normals,
                        h=float(np.max(dist[:, 1])), tol_surface=tol_surface)
    mesh.drho = domain.drho(nodes)
    mesh.h_hol = domain.h_hol(nodes)
    mesh.h_mix = domain.h_mix(nodes)
    mesh.frames = tangent_frames(normals)
    return mesh
