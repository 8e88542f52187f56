"""Cauchy-Leray boundary operators as dense Nystrom matrices.

The kernel is the Cauchy-Fantappie form generated by the smoothed Levi
polynomial: the generating (1,0)-form glues the Levi covector (with the
smoothed Hessian correction) to the Bochner-Martinelli covector through the
same cutoff as g_eps, so its pairing with w-z is exactly g_eps and the kernel
denominator is g_eps^n.  The numerator frozen at z = w is the Leray-Levi
density, which fixes the essential/remainder split:

    C_sharp(w, z) = Lambda(w) / g_eps(w, z)^n,      R = C - C_sharp.

Matrix convention: K[i, j] maps sources j to targets i, so row sums discretize
the integral and the reproducing diagonal rule K_ii = 1 - sum_{j != i} K_ij
makes K 1 = 1 exact.  Entries are identical for every measure tag (the kernel
density and the quadrature mass rescale inversely); the tag matters for
adjoints and norms.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundaryMesh, as_real
from .levi import LeviContext, SmoothedHessian, smooth_step, smooth_step_deriv


class OperatorError(RuntimeError):
    pass


KINDS = ("full", "essential", "remainder", "truncated",
         "truncated_remainder", "essential_truncated", "remainder_truncated")
_REPRODUCING_DIAG = {"full", "essential", "truncated", "essential_truncated"}


@dataclass
class TruncationCutoff:
    """chi_s(w,z) = step(|arg(w,z)|) step(|arg(z,w)|) with
    arg(w,z) = (Im<drho(w), w-z> + i |w-z|^2) / (c s^2)."""

    s: float
    c: float

    def one_sided(self, im_pairing, dist2):
        m = np.sqrt(im_pairing ** 2 + dist2 ** 2) / (self.c * self.s ** 2)
        return smooth_step(m)


@dataclass
class KernelSpec:
    which: str
    ctx: LeviContext
    sh: SmoothedHessian
    s: float = None
    cutoff: TruncationCutoff = None

    def __post_init__(self):
        if self.which not in KINDS:
            raise OperatorError(f"unknown kernel kind {self.which!r}")
        if "truncated" in self.which:
            if self.s is None:
                raise OperatorError("truncated kinds need a scale s")
            if self.cutoff is None:
                self.cutoff = TruncationCutoff(s=float(self.s), c=self.ctx.c)

    @property
    def eps(self):
        return self.sh.eps

    def provenance(self):
        return {"kind": self.which, "eps": float(self.sh.eps),
                "s": None if self.s is None else float(self.s),
                "mu": self.ctx.mu, "tau_r": float(self.sh.r),
                "c_eps": float(self.sh.c_eps)}


@dataclass
class OperatorMatrix:
    data: np.ndarray            # (N, N) complex
    masses: np.ndarray          # masses of the tagged measure
    measure: str
    diag_correction: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.data.shape[0]

    def apply(self, f):
        return self.data @ np.asarray(f)

    def compose(self, other, provenance=None):
        return OperatorMatrix(self.data @ other.data, self.masses, self.measure,
                              np.zeros(self.n),
                              provenance or {"composition": [self.provenance,
                                                             other.provenance]})


# ---------------------------------------------------------------------------
# source-side caches


_SRC_CACHE = {}


def _source_data(mesh: BoundaryMesh, sh: SmoothedHessian):
    key = (id(mesh), id(sh))
    hit = _SRC_CACHE.get(key)
    if hit is not None and hit[0] is mesh and hit[1] is sh:
        return hit[2]
    if len(_SRC_CACHE) > 3:
        _SRC_CACHE.clear()
    if sh.trivial:
        tau = sh.tau(mesh.nodes)
        dtau_wbar = None
    else:
        tau = np.empty((mesh.n_nodes, mesh.domain.n, mesh.domain.n), dtype=complex)
        dtau_wbar = np.empty(tau.shape + (mesh.domain.n,), dtype=complex)
        for lo in range(0, mesh.n_nodes, 256):
            hi = min(lo + 256, mesh.n_nodes)
            t, _, dwb = sh.tau_derivs(mesh.nodes[lo:hi])
            tau[lo:hi] = t
            dtau_wbar[lo:hi] = dwb
    data = {"tau": tau, "dtau_wbar": dtau_wbar,
            "im_self": None}
    _SRC_CACHE[key] = (mesh, sh, data)
    return data


def _pf4(B):
    """Pfaffian of batched 4x4 antisymmetric blocks."""
    return (B[..., 0, 1] * B[..., 2, 3] - B[..., 0, 2] * B[..., 1, 3]
            + B[..., 0, 3] * B[..., 1, 2])


def _numerator_and_g(ks: KernelSpec, mesh: BoundaryMesh, Z, src=None):
    """Kernel numerator (on the source frames) and g_eps for a target block.

    Z: (T, n) targets; returns (num, g, dist) arrays of shape (T, N_src).
    """
    ctx, sh = ks.ctx, ks.sh
    n = mesh.domain.n
    data = _source_data(mesh, sh)
    W = mesh.nodes
    drho = mesh.drho
    hmix = mesh.h_mix
    frames = mesh.frames
    tau = data["tau"]

    diff = W[None, :, :] - Z[:, None, :]              # (T, S, n) = w - z
    dist = np.linalg.norm(as_real(diff), axis=-1)
    chi = smooth_step(dist / ctx.mu)
    quad = np.einsum("sjk,tsk->tsj", tau, diff)
    eta_levi = drho[None, :, :] - 0.5 * quad
    eta_bm = np.conj(diff)
    eta = chi[..., None] * eta_levi + (1.0 - chi[..., None]) * eta_bm

    L = np.einsum("tsj,tsj->ts", eta_levi, diff)
    g = chi * L + (1.0 - chi) * dist ** 2

    M = chi[..., None, None] * hmix[None, :, :, :]
    if not sh.trivial:
        M = M - 0.5 * chi[..., None, None] * np.einsum(
            "sjkm,tsk->tsjm", data["dtau_wbar"], diff)
    eye = np.eye(n, dtype=complex)
    M = M + (1.0 - chi)[..., None, None] * eye
    on_band = (chi > 0.0) & (chi < 1.0)
    if np.any(on_band):
        safe = np.where(dist > 1e-300, dist, 1.0)
        dchi = smooth_step_deriv(dist / ctx.mu) / ctx.mu / (2.0 * safe)
        M = M + (dchi[..., None] * diff)[..., None, :] \
            * (eta_levi - eta_bm)[..., :, None]

    a = np.einsum("tsm,srm->tsr", eta, frames)
    Mc = np.einsum("tsjm,srm->tsrj", M, np.conj(frames))
    S = np.einsum("tsrj,sqj->tsrq", Mc, frames)
    B = S - np.swapaxes(S, -1, -2)
    if n == 2:
        val = (a[..., 0] * B[..., 1, 2] - a[..., 1] * B[..., 0, 2]
               + a[..., 2] * B[..., 0, 1])
    elif n == 3:
        k = 5
        val = np.zeros(a.shape[:-1], dtype=complex)
        for j in range(k):
            rest = [r for r in range(k) if r != j]
            sub = B[..., rest, :][..., :, rest]
            val += (-1.0) ** j * a[..., j] * _pf4(sub)
        val *= 2.0       # (n-1)!
    else:
        raise OperatorError("dense assembly supports n = 2 or 3")
    num = val / (2j * np.pi) ** n
    return num, g, dist


def _chi_s_block(ks: KernelSpec, mesh: BoundaryMesh, Z, drho_z, diff, dist):
    """Two-sided truncation cutoff chi_s(w, z) for a target block."""
    im_wz = np.einsum("sj,tsj->ts", mesh.drho, diff).imag       # Im<drho(w), w-z>
    im_zw = np.einsum("tj,tsj->ts", drho_z, -diff).imag         # Im<drho(z), z-w>
    cut = ks.cutoff
    return cut.one_sided(im_wz, dist ** 2) * cut.one_sided(im_zw, dist ** 2)


def kernel_block(ks: KernelSpec, mesh: BoundaryMesh, tgt_idx,
                 singular_tol=1e-14):
    """Entries K[i, j] = C(w_j, z_i) sigma_w[j] for target rows tgt_idx.

    Diagonal positions (j == i) are left at zero; assemble() fills them per
    the reproducing-constants rule.
    """
    Z = mesh.nodes[tgt_idx]
    num, g, dist = _numerator_and_g(ks, mesh, Z)
    n = mesh.domain.n
    T = len(tgt_idx)
    cols = np.arange(mesh.n_nodes)
    diag_mask = (cols[None, :] == np.asarray(tgt_idx)[:, None])

    bad = (np.abs(g) < singular_tol) & ~diag_mask
    if np.any(bad):
        t, s = np.argwhere(bad)[0]
        raise OperatorError(
            f"near-singular kernel between nodes {int(tgt_idx[t])} and {int(s)}")
    g_safe = np.where(diag_mask, 1.0, g)

    full = num / g_safe ** n * mesh.sigma_w[None, :]
    if ks.which == "full":
        out = full
    elif ks.which in ("essential", "remainder"):
        ess = mesh.lambda_w[None, :] / g_safe ** n
        out = ess if ks.which == "essential" else full - ess
    else:
        diff = mesh.nodes[None, :, :] - Z[:, None, :]
        chi_s = _chi_s_block(ks, mesh, Z, mesh.drho[tgt_idx], diff, dist)
        if ks.which == "truncated":
            out = full * chi_s
        elif ks.which == "truncated_remainder":
            out = full * (1.0 - chi_s)
        else:
            ess = mesh.lambda_w[None, :] / g_safe ** n
            if ks.which == "essential_truncated":
                out = ess * chi_s
            else:                                 # remainder_truncated
                out = (full - ess) * chi_s
    out[diag_mask] = 0.0
    # the full row sums set the shared diagonal of the reproducing kinds
    full_offdiag_rowsum = np.sum(np.where(diag_mask, 0.0, full), axis=1)
    return out, full_offdiag_rowsum


def assemble(ks: KernelSpec, mesh: BoundaryMesh, measure="leray",
             block=128) -> OperatorMatrix:
    """Dense Nystrom matrix of the requested kernel kind.

    Reproducing kinds share the diagonal of the full operator (the truncation
    and the essential/remainder split leave the near-diagonal singularity
    untouched); remainder kinds carry a zero diagonal, so the matrix
    identities C = C_sharp + R and C = C^s + R^s hold entrywise.
    """
    N = mesh.n_nodes
    K = np.empty((N, N), dtype=complex)
    diag = np.empty(N, dtype=complex)
    for lo in range(0, N, block):
        hi = min(lo + block, N)
        rows = np.arange(lo, hi)
        entries, full_rowsum = kernel_block(ks, mesh, rows)
        K[lo:hi] = entries
        diag[lo:hi] = 1.0 - full_rowsum
    if ks.which in _REPRODUCING_DIAG:
        K[np.arange(N), np.arange(N)] = diag
        record = diag
    else:
        record = np.zeros(N)
    return OperatorMatrix(data=K, masses=mesh.masses(measure).copy(),
                          measure=measure, diag_correction=np.asarray(record),
                          provenance=ks.provenance())


def apply_kernel(ks: KernelSpec, mesh: BoundaryMesh, F, block=128):
    """K @ F without materializing K (for meshes too large to store)."""
    F = np.asarray(F, dtype=complex)
    single = F.ndim == 1
    if single:
        F = F[:, None]
    N = mesh.n_nodes
    out = np.empty((N, F.shape[1]), dtype=complex)
    reproducing = ks.which in _REPRODUCING_DIAG
    for lo in range(0, N, block):
        rows = np.arange(lo, min(lo + block, N))
        entries, full_rowsum = kernel_block(ks, mesh, rows)
        acc = entries @ F
        if reproducing:
            acc += (1.0 - full_rowsum)[:, None] * F[rows]
        out[rows] = acc
    return out[:, 0] if single else out


def cauchy_leray_kernel(ks: KernelSpec, mesh: BoundaryMesh, src_idx, tgt_idx):
    """Pointwise sigma-normalized kernel values C(w_src, z_tgt) (pair-aligned)."""
    src_idx = np.atleast_1d(np.asarray(src_idx, dtype=int))
    tgt_idx = np.atleast_1d(np.asarray(tgt_idx, dtype=int))
    vals = np.empty(len(src_idx), dtype=complex)
    for k, (s, t) in enumerate(zip(src_idx, tgt_idx)):
        if s == t:
            raise OperatorError("kernel is singular on the diagonal")
        num, g, _ = _numerator_and_g(ks, mesh, mesh.nodes[[t]])
        if abs(g[0, s]) < 1e-14:
            raise OperatorError(f"near-singular kernel at pair ({s}, {t})")
        vals[k] = num[0, s] / g[0, s] ** mesh.domain.n
    return vals if len(vals) > 1 else vals[0]


def split_essential_remainder(ks: KernelSpec, mesh, src_idx, tgt_idx):
    """(C_sharp, R) at pair-aligned sample pairs; their sum is the kernel."""
    src_idx = np.atleast_1d(np.asarray(src_idx, dtype=int))
    tgt_idx = np.atleast_1d(np.asarray(tgt_idx, dtype=int))
    full = np.atleast_1d(cauchy_leray_kernel(ks, mesh, src_idx, tgt_idx))
    ess = np.empty_like(full)
    for k, (s, t) in enumerate(zip(src_idx, tgt_idx)):
        _, g, _ = _numerator_and_g(ks, mesh, mesh.nodes[[t]])
        ess[k] = mesh.leray[s] / g[0, s] ** mesh.domain.n
    return ess, full - ess


# ---------------------------------------------------------------------------
# adjoints, norms, and the quantitative checks


def adjoint_dagger(K: OperatorMatrix, omega_masses=None) -> OperatorMatrix:
    """Adjoint in L^2(omega): (K+)_ij = conj(K_ji) m_j / m_i."""
    m = K.masses if omega_masses is None else np.asarray(omega_masses)
    if m.shape != (K.n,):
        raise OperatorError("measure mass vector does not match the matrix")
    data = np.conj(K.data).T * (m[None, :] / m[:, None])
    return OperatorMatrix(data=data, masses=m, measure=K.measure,
                          diag_correction=np.zeros(K.n),
                          provenance={"adjoint_of": K.provenance})


def top_singular_value(A, rng=None, tol=1e-11, max_iter=5000):
    """Largest singular value by power iteration on A*A (deterministic)."""
    if rng is None:
        rng = np.random.default_rng(1234)
    N = A.shape[1]
    v = rng.standard_normal(N) + 1j * rng.standard_normal(N)
    v /= np.linalg.norm(v)
    sv = 0.0
    for _ in range(max_iter):
        w = A @ v
        sv_new = np.linalg.norm(w)
        u = np.conj(A.T) @ w
        nu = np.linalg.norm(u)
        if nu == 0:
            return 0.0
        v = u / nu
        if abs(sv_new - sv) <= tol * max(sv_new, 1e-300):
            return float(sv_new)
        sv = sv_new
    return float(sv)


def weighted_norm(f, masses, p=2.0):
    f = np.abs(np.asarray(f))
    return float(np.sum(f ** p * masses) ** (1.0 / p))


def operator_norm(data, Omega_masses, p=2.0, rng=None, n_trials=200):
    """L^p(Omega) -> L^p(Omega) norm of a matrix.

    p = 2: the largest singular value of D^(1/2) A D^(-1/2) (power iteration,
    converged to fixed tolerance).  p != 2: a lower-bound estimate by ratio
    maximization over random inputs plus the p = 2 extremizer.
    """
    D = np.asarray(Omega_masses)
    sq = np.sqrt(D)
    B = data * (sq[:, None] / sq[None, :])
    if rng is None:
        rng = np.random.default_rng(1234)
    if p == 2.0:
        return top_singular_value(B, rng)
    # p = 2 extremizer as a seed
    N = data.shape[0]
    v = rng.standard_normal(N) + 1j * rng.standard_normal(N)
    v /= np.linalg.norm(v)
    for _ in range(60):
        v = np.conj(B.T) @ (B @ v)
        nv = np.linalg.norm(v)
        if nv == 0:
            break
        v /= nv
    candidates = [v / np.maximum(sq, 1e-300)]
    for _ in range(n_trials):
        candidates.append(rng.standard_normal(N) + 1j * rng.standard_normal(N))
    best = 0.0
    for f in candidates:
        den = weighted_norm(f, D, p)
        if den > 0:
            best = max(best, weighted_norm(data @ f, D, p) / den)
    return float(best)


def adjoint_defect_norm(K: OperatorMatrix, omega_masses, Omega_masses,
                        p=2.0, rng=None):
    """|| K^dagger - K || on L^p(Omega), dagger taken in L^2(omega)."""
    Kd = adjoint_dagger(K, omega_masses)
    return operator_norm(Kd.data - K.data, Omega_masses, p=p, rng=rng)


def cancellation_norm(ctx, sh, mesh, s, omega_masses=None, Omega_masses=None,
                      p=2.0, rng=None, K=None):
    """Adjoint-cancellation norm of the truncated operator at scale s."""
    if K is None:
        K = assemble(KernelSpec("truncated", ctx, sh, s=s), mesh)
    if omega_masses is None:
        omega_masses = mesh.lambda_w
    if Omega_masses is None:
        Omega_masses = omega_masses
    return adjoint_defect_norm(K, omega_masses, Omega_masses, p=p, rng=rng)


def rescaled_remainder_norm(ctx, sh, mesh, s, Omega_masses=None, p=2.0,
                            rng=None, K=None):
    """|| s^-1 R_sharp_s || on L^p(Omega) for the truncated remainder kernel."""
    if K is None:
        K = assemble(KernelSpec("remainder_truncated", ctx, sh, s=s), mesh)
    if Omega_masses is None:
        Omega_masses = mesh.lambda_w
    return operator_norm(K.data / s, Omega_masses, p=p, rng=rng)


def smoothing_check(Rs: OperatorMatrix, omega_masses):
    """sup-norm amplification ||R f||_inf / ||f||_L1(omega) over bump family.

    The extremal single-node bumps reduce to a row scan of |kernel| / mass;
    the constant function is reported alongside.
    """
    m = np.asarray(omega_masses)
    col_amp = np.max(np.abs(Rs.data), axis=0) / m
    ones_amp = float(np.max(np.abs(Rs.data @ np.ones(Rs.n))) / np.sum(m))
    return {"bump_amplification": float(np.max(col_amp)),
            "ones_amplification": ones_amp}


def commutator_norm(phi, Ks: OperatorMatrix, lambda_masses, Omega_masses,
                    p=2.0, rng=None):
    """|| phi^-1 [phi, (C_s)*] || on L^p(Omega); * is the L^2(lambda) adjoint."""
    phi = np.asarray(phi, dtype=float)
    if np.any(phi <= 0):
        raise OperatorError("phi must be positive")
    Kstar = adjoint_dagger(Ks, lambda_masses).data
    comm = Kstar * (phi[:, None] - phi[None, :]) / phi[:, None]
    return operator_norm(comm, Omega_masses, p=p, rng=rng)


def verify_kernel_estimates(ks: KernelSpec, mesh: BoundaryMesh, D,
                            rng=None, d_cap=0.5, n_pairs=20000,
                            n_smooth_triples=4000, sep=2.0):
    """Measured size and smoothness constants of the split kernels.

    A1/A2 envelope |C_sharp| d^2n on pairs with d <= d_cap, C_R envelope
    |R| d^(2n-1), and the three smoothness quotients on triples with
    d(w, z) >= sep * d(w, w') (resp. the z-side analogue).
    """
    if rng is None:
        rng = np.random.default_rng(5)
    N = mesh.n_nodes
    n2 = 2 * mesh.domain.n
    ii, jj = np.where((D > 0) & (D <= d_cap))
    note = None
    if len(ii) == 0:
        return {"A1": float("nan"), "A2": float("nan"), "C_R": float("nan"),
                "note": "no pairs resolve the requested scale decade"}
    if len(ii) > n_pairs:
        sel = rng.choice(len(ii), size=n_pairs, replace=False)
        ii, jj = ii[sel], jj[sel]
    ess, rem = split_essential_remainder_bulk(ks, mesh, ii, jj)
    dloc = D[ii, jj]
    A1 = float(np.max(np.abs(ess) * dloc ** n2))
    A2 = float(np.min(np.abs(ess) * dloc ** n2))
    C_R = float(np.max(np.abs(rem) * dloc ** (n2 - 1)))

    # smoothness quotients on separated triples
    quots = {"ess_w": [], "ess_z": [], "rem_z": []}
    cand = rng.integers(0, N, size=(n_smooth_triples, 3))
    for w, wp, z in cand:
        if w == z or wp == z or w == wp:
            continue
        if D[w, z] >= sep * D[w, wp] and D[w, z] > 0 and D[w, wp] > 0:
            e1, r1 = split_essential_remainder_bulk(ks, mesh, [w], [z])
            e2, _ = split_essential_remainder_bulk(ks, mesh, [wp], [z])
            quots["ess_w"].append(abs(e1[0] - e2[0]) * D[w, z] ** (n2 + 1) / D[w, wp])
        if D[w, z] >= sep * D[z, wp] and D[w, z] > 0 and D[z, wp] > 0:
            e1, r1 = split_essential_remainder_bulk(ks, mesh, [w], [z])
            e3, r3 = split_essential_remainder_bulk(ks, mesh, [w], [wp])
            quots["ess_z"].append(abs(e1[0] - e3[0]) * D[w, z] ** (n2 + 1) / D[z, wp])
            quots["rem_z"].append(abs(r1[0] - r3[0]) * D[w, z] ** n2 / D[z, wp])
    out = {"A1": A1, "A2": A2, "C_R": C_R, "eps": ks.sh.eps,
           "c_eps": ks.sh.c_eps, "n_pairs": int(len(ii)), "note": note}
    for k, v in quots.items():
        out["smooth_" + k] = float(np.max(v)) if v else float("nan")
    return out


def split_essential_remainder_bulk(ks: KernelSpec, mesh, src_idx, tgt_idx,
                                   block=64):
    """Vectorized pair-aligned essential/remainder kernel values."""
    src_idx = np.asarray(src_idx, dtype=int)
    tgt_idx = np.asarray(tgt_idx, dtype=int)
    ess = np.empty(len(src_idx), dtype=complex)
    rem = np.empty(len(src_idx), dtype=complex)
    order = np.argsort(tgt_idx, kind="stable")
    k = 0
    while k < len(order):
        t = tgt_idx[order[k]]
        kk = k
        while kk < len(order) and tgt_idx[order[kk]] == t:
            kk += 1
        grp = order[k:kk]
        num, g, _ = _numerator_and_g(ks, mesh, mesh.nodes[[t]])
        s = src_idx[grp]
        n = mesh.domain.n
        full_v = num[0, s] / g[0, s] ** n
        ess_v = mesh.leray[s] / g[0, s] ** n
        ess[grp] = ess_v
        rem[grp] = full_v - ess_v
        k = kk
    return ess, rem


# ---------------------------------------------------------------------------
# flat binary container: one-line JSON header, then little-endian complex128


def write_operator(path, K: OperatorMatrix):
    header = {"n": int(K.n), "measure": K.measure,
              "provenance": K.provenance,
              "diag_correction_max": float(np.max(np.abs(K.diag_correction))),
              "dtype": "complex128-le"}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(K.data.astype("<c16").tobytes())
        f.write(K.masses.astype("<f8").tobytes())


def read_operator(path):
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        N = header["n"]
        data = np.frombuffer(f.read(16 * N * N), dtype="<c16").reshape(N, N).copy()
        masses = np.frombuffer(f.read(8 * N), dtype="<f8").copy()
    return OperatorMatrix(data=data, masses=masses, measure=header["measure"],
                          diag_correction=np.zeros(N),
                          provenance=header.get("provenance", {}))
