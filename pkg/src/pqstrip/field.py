"""Ruling-aligned 2-direction field optimization.

Alternates cheap implicit steps on the power representation (alignment,
smoothness, renormalization) with exact projections of the raw combed field
(divergence-free at working vertices, then scaled curl-free with box-bounded
density). The working vertex set excludes boundary, crease and currently
singular vertices; matching signs are recomputed every iteration.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field as dfield

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .operators import DiscreteOperators, RulingData, deinterleave, interleave
from .trimesh import LocalFrames, MassMatrices, TriMesh

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """A linear or QP solve failed to reach its tolerance."""


@dataclass
class OptimizerConfig:
    omega_align: float = 0.1
    omega_smooth: float = 0.005
    smooth_halving_period: int = 30
    tolerance: float = 1e-3
    max_iterations: int = 300
    qp_tolerance: float = 1e-6
    solver_tolerance: float = 1e-8
    gl_epsilon: float = 0.1          # diagnostic Ginzburg-Landau radius
    oscillation_patience: int = 10
    snapshot_every: int = 0          # 0 disables field snapshots
    snapshot_dir: str = "."

    def __post_init__(self):
        for name in ("omega_align", "omega_smooth", "tolerance", "qp_tolerance",
                     "solver_tolerance", "gl_epsilon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iterations <= 0 or self.smooth_halving_period <= 0:
            raise ValueError("iteration counts must be positive")


@dataclass
class PowerField:
    gamma_sq: np.ndarray     # (F,) complex


@dataclass
class RawField:
    gamma: np.ndarray            # (F,) complex, combed
    comb_sign: np.ndarray        # (F,) +-1 comb applied to the principal root
    matching: np.ndarray         # (E_int,) +-1 principal matching of gamma
    singularities: list          # [(vertex, half-integer index)]
    v_star: np.ndarray           # working vertex indices


@dataclass
class DensityField:
    s: np.ndarray
    s_low: float = 0.4
    s_high: float = 1.6


@dataclass
class IterationStats:
    iteration: int
    delta: float
    e_align: float
    e_smooth: float
    e_gl: float
    n_singular: int
    max_div: float
    max_curl: float
    qp_residual: float


@dataclass
class OptimizeResult:
    power: PowerField
    raw: RawField
    density: DensityField
    log: list
    converged: bool
    oscillating: bool
    iterations: int


# ---------------------------------------------------------------------------
# static problem data


class FieldProblem:
    """Per-mesh precomputation shared by all optimizer iterations."""

    def __init__(self, mesh: TriMesh, frames: LocalFrames, masses: MassMatrices,
                 ops: DiscreteOperators, ruling: RulingData,
                 config: OptimizerConfig | None = None):
        self.mesh = mesh
        self.frames = frames
        self.masses = masses
        self.ops = ops
        self.ruling = ruling
        self.config = config or OptimizerConfig()

        ie = mesh.interior_edges
        self.int_edges = ie
        self.edge_f = mesh.edge_faces[ie, 0]
        self.edge_g = mesh.edge_faces[ie, 1]
        self.transport = frames.transport(mesh)          # f -> g per interior edge
        self.edge_pos = np.full(mesh.n_edges, -1, dtype=np.int64)
        self.edge_pos[ie] = np.arange(len(ie))

        self._build_rings()
        self._build_smoothness()
        self.mu_align = self._lowest_nonzero_weight()
        self.mu_smooth = self._lowest_nonzero_smooth_eig()
        self._smooth_factor_cache = {}
        self._qp_state = None
        logger.debug("mu_align=%.3g mu_smooth=%.3g", self.mu_align, self.mu_smooth)

    # -- rings ------------------------------------------------------------

    def _build_rings(self):
        """Flatten the ordered one-ring of every interior non-crease vertex.

        Slot arrays are aligned: slot i holds (face, corner-slot, crossed
        edge to the next ring face, directed transport factor).
        """
        mesh = self.mesh
        ring_vertices, ptr = [], [0]
        flat_face, flat_slot, flat_edge, flat_rho = [], [], [], []
        interior = ~mesh.boundary_vertex_mask
        for v in np.nonzero(interior & ~mesh.crease_vertex_mask)[0]:
            fan, crossed = mesh.vertex_fan(v)
            if len(fan) == 0 or len(crossed) != len(fan):
                continue  # isolated or open fan (should not happen interior)
            slots = mesh._slot_by_vertex[mesh._slot_ptr[v]:mesh._slot_ptr[v + 1]]
            slot_of = {s // 3: s for s in slots}
            for i, f in enumerate(fan):
                e = crossed[i]
                rho = self.transport[self.edge_pos[e]]
                if self.edge_f[self.edge_pos[e]] != f:
                    rho = np.conj(rho)
                flat_face.append(f)
                flat_slot.append(slot_of[f])
                flat_edge.append(e)
                flat_rho.append(rho)
            ring_vertices.append(v)
            ptr.append(ptr[-1] + len(fan))
        self.ring_vertices = np.asarray(ring_vertices, dtype=np.int64)
        self.ring_ptr = np.asarray(ptr, dtype=np.int64)
        self.flat_face = np.asarray(flat_face, dtype=np.int64)
        self.flat_edge = np.asarray(flat_edge, dtype=np.int64)
        self.flat_rho = np.asarray(flat_rho, dtype=np.complex128)
        self.flat_next_face = np.empty_like(self.flat_face)
        for r in range(len(self.ring_vertices)):
            a, b = self.ring_ptr[r], self.ring_ptr[r + 1]
            self.flat_next_face[a:b] = np.roll(self.flat_face[a:b], -1)
        self.flat_ring_start = np.repeat(self.ring_ptr[:-1],
                                         np.diff(self.ring_ptr))
        self.defect = mesh.angle_defects()

        # divergence row coefficient of each corner slot: (1/2) * rotated
        # opposite edge, in the frame of the slot's face
        p = mesh.vertices[mesh.faces]
        coeff = np.empty((3 * mesh.n_faces,), dtype=np.complex128)
        for k in range(3):
            e = p[:, (k + 2) % 3] - p[:, (k + 1) % 3]
            ep = 0.5 * np.cross(self.frames.normal, e)
            coeff[3 * np.arange(mesh.n_faces) + k] = (
                np.einsum("ij,ij->i", ep, self.frames.e1)
                + 1j * np.einsum("ij,ij->i", ep, self.frames.e2))
        self.flat_coeff = coeff[np.asarray(flat_slot, dtype=np.int64)]

        # dual adjacency for combing walks
        F = mesh.n_faces
        self.dual_adj = [[] for _ in range(F)]
        for pos, e in enumerate(self.int_edges):
            f, g = self.edge_f[pos], self.edge_g[pos]
            self.dual_adj[f].append((g, pos))
            self.dual_adj[g].append((f, pos))

    # -- smoothness matrix --------------------------------------------------

    def _build_smoothness(self):
        """L2 = G_E^H M_E (I - W_E) G_E over interior edges with the conjugate
        squared edge factors."""
        mesh = self.mesh
        n = len(self.int_edges)
        ef2 = np.conj(self.frames.edge_complex[self.int_edges, 0]) ** 2
        eg2 = np.conj(self.frames.edge_complex[self.int_edges, 1]) ** 2
        rows = np.repeat(np.arange(n), 2)
        cols = np.stack([self.edge_f, self.edge_g], axis=1).ravel()
        vals = np.stack([ef2, -eg2], axis=1).ravel()
        GE = sparse.coo_matrix((vals, (rows, cols)),
                               shape=(n, mesh.n_faces)).tocsr()
        w_e = 0.5 * (self.ruling.w[self.edge_f] + self.ruling.w[self.edge_g])
        W = sparse.diags(self.masses.edge[self.int_edges] * (1.0 - w_e))
        self.GE = GE
        self.L2 = (GE.conj().T @ W @ GE).tocsc()

    def _lowest_nonzero_weight(self):
        # numerically-zero confidences (exactly flat faces up to roundoff)
        # must not masquerade as the lowest "nonzero" weight
        w = self.ruling.w
        floor = max(1e-8, 1e-3 * w.max(initial=0.0))
        pos = w[w >= floor]
        return float(pos.min()) if len(pos) else 0.0

    def _lowest_nonzero_smooth_eig(self):
        # relative zero threshold from a Gershgorin bound on the full
        # generalized spectrum (transport-flat null modes must not count)
        F = self.mesh.n_faces
        Mf = self.masses.face
        row_sum = np.asarray(np.abs(self.L2).sum(axis=1)).ravel()
        lam_bound = max(float((row_sum / Mf).max()), 1e-300)
        zero_tol = 1e-8 * lam_bound
        if F <= 1200:
            import scipy.linalg as sla
            vals = sla.eigh(self.L2.toarray(), np.diag(Mf.astype(complex)),
                            eigvals_only=True)
        else:
            k = 6
            while True:
                try:
                    vals = spla.eigsh(self.L2, k=k,
                                      M=sparse.diags(Mf.astype(complex)).tocsc(),
                                      sigma=-zero_tol, which="LM",
                                      return_eigenvectors=False)
                except Exception as exc:  # pragma: no cover - fallback path
                    logger.warning("sparse eig failed (%s); using dense", exc)
                    import scipy.linalg as sla
                    vals = sla.eigh(self.L2.toarray(), np.diag(Mf.astype(complex)),
                                    eigvals_only=True)
                    break
                if (np.real(vals) > zero_tol).any() or k >= 24:
                    break
                k *= 2
        vals = np.real(np.asarray(vals))
        nz = vals[vals > zero_tol]
        if len(nz) == 0:
            # fully smooth operator (single face etc.); neutral step scaling
            return 1.0
        return float(nz.min())

    # -- matching / combing --------------------------------------------------

    def principal_matching(self, gamma):
        """Per-interior-edge sign minimizing the rotation between transported
        gamma(f) and sigma * gamma(g)."""
        t = gamma[self.edge_f] * self.transport
        dot = np.real(gamma[self.edge_g] * np.conj(t))
        sig = np.where(dot >= 0, 1.0, -1.0)
        return sig

    def comb(self, sigma):
        """Per-face sign by BFS over the dual graph; tau(g) = sigma(e) tau(f)
        along tree edges, per connected component."""
        F = self.mesh.n_faces
        tau = np.zeros(F)
        for root in range(F):
            if tau[root] != 0:
                continue
            tau[root] = 1.0
            dq = deque([root])
            while dq:
                f = dq.popleft()
                for g, pos in self.dual_adj[f]:
                    if tau[g] == 0:
                        tau[g] = sigma[pos] * tau[f]
                        dq.append(g)
        return tau

    def singular_indices(self, gamma_sq):
        """Half-integer index per interior non-crease vertex from the power
        field's transported rotation, corrected by the angle defect."""
        g_next = gamma_sq[self.flat_next_face]
        g_here = gamma_sq[self.flat_face] * self.flat_rho**2
        delta = np.angle(g_next * np.conj(g_here))
        total = np.add.reduceat(delta, self.ring_ptr[:-1]) if len(delta) else np.zeros(0)
        k = self.defect[self.ring_vertices]
        raw = (total + 2.0 * k) / (4.0 * np.pi)
        idx2 = np.rint(2.0 * raw).astype(np.int64)
        drift = np.abs(2.0 * raw - idx2)
        if len(drift) and drift.max() > 0.2:
            logger.debug("index drift up to %.3f from half-integers", drift.max())
        return idx2  # aligned with self.ring_vertices, in units of 1/2

    def matched_operators(self, sigma, tau, singular_mask):
        """Matched curl matrix over all interior edges and matched divergence
        rows over the working vertex set, acting on the combed field."""
        mesh = self.mesh
        chi = sigma * tau[self.edge_f] * tau[self.edge_g]

        ef = self.frames.edge_vec_frame[self.int_edges, 0]
        eg = self.frames.edge_vec_frame[self.int_edges, 1]
        n = len(self.int_edges)
        rows = np.repeat(np.arange(n), 4)
        cols = np.stack([2 * self.edge_f, 2 * self.edge_f + 1,
                         2 * self.edge_g, 2 * self.edge_g + 1], axis=1).ravel()
        vals = np.stack([np.real(ef), np.imag(ef),
                         -chi * np.real(eg), -chi * np.imag(eg)], axis=1).ravel()
        C = sparse.coo_matrix((vals, (rows, cols)),
                              shape=(n, 2 * mesh.n_faces)).tocsr()

        # ring-local comb signs lambda relative to each ring's first face
        chi_full = np.ones(mesh.n_edges)
        chi_full[self.int_edges] = chi
        neg = (chi_full[self.flat_edge] < 0).astype(np.int64)
        cum = np.concatenate([[0], np.cumsum(neg)])
        pre = cum[np.arange(len(neg))] - cum[self.flat_ring_start]
        lam = 1.0 - 2.0 * (pre % 2)

        keep_ring = ~singular_mask
        keep_flat = np.repeat(keep_ring, np.diff(self.ring_ptr))
        v_star = self.ring_vertices[keep_ring]
        row_of = np.full(mesh.n_vertices, -1, dtype=np.int64)
        row_of[v_star] = np.arange(len(v_star))
        rr = row_of[np.repeat(self.ring_vertices, np.diff(self.ring_ptr))][keep_flat]
        cf = self.flat_face[keep_flat]
        cc = self.flat_coeff[keep_flat] * lam[keep_flat]
        rows = np.repeat(rr, 2)
        cols = np.stack([2 * cf, 2 * cf + 1], axis=1).ravel()
        vals = np.stack([np.real(cc), np.imag(cc)], axis=1).ravel()
        D = sparse.coo_matrix((vals, (rows, cols)),
                              shape=(len(v_star), 2 * mesh.n_faces)).tocsr()
        return C, D, v_star, chi


# ---------------------------------------------------------------------------
# algorithm steps


def principal_root(gamma_sq):
    """Square root with argument halved into (-pi/2, pi/2]."""
    return np.sqrt(np.abs(gamma_sq)) * np.exp(0.5j * np.angle(gamma_sq))


def implicit_align(gamma_sq, w, r_perp_sq, omega, mu):
    """Single implicit Euler step on the alignment energy; diagonal solve."""
    if mu <= 0:
        return gamma_sq.copy()
    c = (omega / mu) * w
    return (gamma_sq + c * r_perp_sq) / (1.0 + c)


def align_energy(gamma_sq, masses, w, r_perp_sq):
    d = gamma_sq - r_perp_sq
    return float(np.sum(masses.face * w * np.abs(d) ** 2))


def smooth_energy(problem: FieldProblem, gamma_sq):
    return float(np.real(np.vdot(gamma_sq, problem.L2 @ gamma_sq)))


def gl_energy(problem: FieldProblem, gamma, D_star, v_star, epsilon):
    """Diagnostic divergence + unit-norm deviation energy (reported only)."""
    d = D_star @ interleave(gamma)
    div_term = float(np.sum(d**2 / problem.masses.vertex[v_star])) if len(d) else 0.0
    mf = problem.masses.face
    norm_term = float(np.sum(mf * (np.abs(gamma) ** 2 - 1.0))) / epsilon**2
    return div_term + norm_term


def implicit_smooth(problem: FieldProblem, gamma_sq, omega):
    """Solve (M_F + (omega/mu) L2) out = M_F gamma_sq."""
    key = omega
    if key not in problem._smooth_factor_cache:
        c = omega / problem.mu_smooth
        A = (sparse.diags(problem.masses.face.astype(complex))
             + c * problem.L2).tocsc()
        try:
            problem._smooth_factor_cache[key] = spla.splu(A)
        except RuntimeError as exc:
            raise SolverError(f"smoothness solve factorization failed: {exc}") from exc
    rhs = problem.masses.face * gamma_sq
    return problem._smooth_factor_cache[key].solve(rhs)


def normalize_power(gamma_sq, fallback):
    """Per-face renormalization to unit modulus; near-zero entries keep the
    fallback's unit value."""
    mag = np.abs(gamma_sq)
    tiny = mag < 1e-14
    if tiny.any():
        logger.info("normalize: %d near-zero entries kept from previous iterate",
                    int(tiny.sum()))
    safe = np.where(tiny, 1.0, mag)
    out = gamma_sq / safe
    out[tiny] = fallback[tiny]
    return out


def project_div_free(gamma_il, D_star, tolerance=1e-8, max_refine=3):
    """Minimal Euclidean correction onto ker(D_star) via the normal equations
    D D^T w = -D gamma; returns the corrected interleaved field."""
    if D_star.shape[0] == 0:
        return gamma_il.copy()
    M = (D_star @ D_star.T).tocsc()
    try:
        lu = spla.splu(M)
    except RuntimeError:
        logger.warning("div projection rank-deficient; regularizing")
        lu = spla.splu((M + 1e-12 * sparse.eye(M.shape[0])).tocsc())
    out = gamma_il.copy()
    for _ in range(max_refine + 1):
        r = D_star @ out
        if np.abs(r).max() <= tolerance:
            break
        out = out + D_star.T @ lu.solve(-r)
    return out


class CurlProjector:
    """Scaled curl-free projection by operator splitting with fixed penalty.

    minimize ||gamma_c - s * gamma_d||^2  s.t.  C gamma_c = 0,
    s_low <= s <= s_high, via ADMM on the density bound with an exact
    equality-constrained KKT solve per iteration, then a final polish of
    gamma_c at the clipped density.
    """

    def __init__(self, rho=0.1, s_low=0.4, s_high=1.6, tolerance=1e-9,
                 max_iterations=20000, relaxation=1.6):
        self.rho = rho
        self.s_low = s_low
        self.s_high = s_high
        self.tolerance = tolerance
        self.max_iterations = max_iterations
        self.relaxation = relaxation
        self.z = None
        self.u = None

    def _pinned_solve(self, B, C, low, high, anchor):
        """Equality-constrained solve with the given bounds pinned; flat
        density directions are Tikhonov-anchored at ``anchor``."""
        F = len(low)
        nE = C.shape[0]
        free = ~(low | high)
        p = np.where(low, self.s_low, 0.0) + np.where(high, self.s_high, 0.0)
        nf = int(free.sum())
        reg = 1e-10
        blocks_rhs = [B @ p]
        if nf:
            Bf = B[:, free]
            BfTBf = sparse.diags(
                np.asarray(Bf.multiply(Bf).sum(axis=0)).ravel() + reg)
            rows = [[sparse.eye(B.shape[0]), -Bf],
                    [-Bf.T, BfTBf]]
            blocks_rhs.append(reg * anchor[free])
        else:
            rows = [[sparse.eye(B.shape[0])]]
        if nE:
            rows[0].append(C.T)
            if nf:
                rows[1].append(None)
            rows.append([C] + ([None] if nf else []) + [-reg * sparse.eye(nE)])
            blocks_rhs.append(np.zeros(nE))
        K = sparse.bmat(rows, format="csc")
        sol = spla.splu(K).solve(np.concatenate(blocks_rhs))
        twoF = B.shape[0]
        gamma_c = sol[:twoF]
        s = p.copy()
        if nf:
            s[free] = sol[twoF:twoF + nf]
        return gamma_c, s

    def _try_polish(self, B, C, z, max_passes=30):
        """Active-set refinement from the splitting iterate's bound pattern.

        Alternates pinned equality solves with moving box violations into the
        active set and releasing wrong-sign multipliers. Returns
        (gamma_c, s, kkt) or None if the active set fails to settle.
        """
        tol_act = 1e-9
        low = z <= self.s_low + tol_act
        high = z >= self.s_high - tol_act
        best = None
        for _ in range(max_passes):
            try:
                gamma_c, s = self._pinned_solve(B, C, low, high, z)
            except RuntimeError:
                return best
            free = ~(low | high)
            viol_low = free & (s < self.s_low - 1e-12)
            viol_high = free & (s > self.s_high + 1e-12)
            if viol_low.any() or viol_high.any():
                low |= viol_low
                high |= viol_high
                continue
            grad = np.asarray(B.T @ (B @ s - gamma_c)).ravel()
            rel_low = low & (grad < -1e-10)
            rel_high = high & (grad > 1e-10)
            kkt_box = np.where(free, np.abs(grad), 0.0)
            kkt_box = np.where(low, np.maximum(0.0, -grad), kkt_box)
            kkt_box = np.where(high, np.maximum(0.0, grad), kkt_box)
            curl_res = float(np.abs(C @ gamma_c).max()) if C.shape[0] else 0.0
            kkt = float(max(curl_res, kkt_box.max(initial=0.0)))
            cand = (gamma_c, np.clip(s, self.s_low, self.s_high), kkt)
            if best is None or kkt < best[2]:
                best = cand
            if not rel_low.any() and not rel_high.any():
                return cand
            low &= ~rel_low
            high &= ~rel_high
        return best

    def solve(self, gamma_d_il, C, target=1e-6):
        F = len(gamma_d_il) // 2
        nE = C.shape[0]
        B = sparse.coo_matrix((gamma_d_il,
                               (np.arange(2 * F), np.repeat(np.arange(F), 2))),
                              shape=(2 * F, F)).tocsr()
        BtB = sparse.diags(np.asarray((B.multiply(B)).sum(axis=0)).ravel())
        reg = 1e-12
        I2F = sparse.eye(2 * F)
        if nE:
            K = sparse.bmat([
                [I2F, -B, C.T],
                [-B.T, BtB + self.rho * sparse.eye(F), None],
                [C, None, -reg * sparse.eye(nE)],
            ], format="csc")
        else:
            K = sparse.bmat([
                [I2F, -B],
                [-B.T, BtB + self.rho * sparse.eye(F)],
            ], format="csc")
        try:
            lu = spla.splu(K)
        except RuntimeError as exc:
            raise SolverError(f"curl projection KKT factorization failed: {exc}") from exc

        if self.z is None or len(self.z) != F:
            self.z = np.ones(F)
            self.u = np.zeros(F)
        z, u = self.z, self.u
        rhs = np.zeros(K.shape[0])
        alpha = self.relaxation
        best = None
        for k in range(1, self.max_iterations + 1):
            rhs[2 * F:3 * F] = self.rho * (z - u)
            sol = lu.solve(rhs)
            s = sol[2 * F:3 * F]
            s_r = alpha * s + (1.0 - alpha) * z
            z_old = z
            z = np.clip(s_r + u, self.s_low, self.s_high)
            u = u + s_r - z
            r_prim = np.abs(s - z).max()
            r_dual = self.rho * np.abs(z - z_old).max()
            settled = max(r_prim, r_dual) <= self.tolerance
            if settled or k == 1 or k % 50 == 0:
                polished = self._try_polish(B, C, z)
                if polished is not None:
                    gamma_c, s_out, kkt = polished
                    if best is None or kkt < best[2]:
                        best = (gamma_c, s_out, kkt)
                    if kkt <= 0.5 * target:
                        self.z, self.u = s_out, u
                        return gamma_c, s_out, kkt
                if settled:
                    break
        self.z, self.u = z, u
        if best is not None and best[2] <= target:
            return best
        kkt = best[2] if best is not None else np.inf
        raise SolverError(f"curl projection did not reach KKT tolerance: "
                          f"{kkt:.3e} > {target:.1e}")


# ---------------------------------------------------------------------------
# the full alternation


def init_field(ruling: RulingData) -> PowerField:
    return PowerField(gamma_sq=ruling.R_perp.copy())


def optimize(mesh: TriMesh, frames: LocalFrames, masses: MassMatrices,
             ops: DiscreteOperators, ruling: RulingData,
             config: OptimizerConfig | None = None,
             problem: FieldProblem | None = None) -> OptimizeResult:
    """Run the alternating optimization until the power field stabilizes.

    Returns the final power field, combed raw field with matching and
    singularities, the density, and the per-iteration log. ``converged`` is
    False when the iteration cap was reached; ``oscillating`` marks a
    detected 2-cycle in the singularity configuration.
    """
    cfg = config or OptimizerConfig()
    prob = problem or FieldProblem(mesh, frames, masses, ops, ruling, cfg)
    qp = CurlProjector(s_low=0.4, s_high=1.6,
                       tolerance=min(1e-8, cfg.qp_tolerance * 1e-2))

    gamma_sq = ruling.R_perp.copy()
    last_unit = gamma_sq.copy()
    log = []
    sing_history = deque(maxlen=3)
    oscillating = False
    converged = False
    osc_count = 0
    it = 0
    raw = None
    s_density = np.ones(mesh.n_faces)

    for it in range(1, cfg.max_iterations + 1):
        omega_s = cfg.omega_smooth * 0.5 ** ((it - 1) // cfg.smooth_halving_period)

        g_prev = gamma_sq
        g_a = implicit_align(g_prev, ruling.w, ruling.R_perp,
                             cfg.omega_align, prob.mu_align)
        g_s = implicit_smooth(prob, g_a, omega_s)
        g_u = normalize_power(g_s, last_unit)
        last_unit = g_u

        gamma = principal_root(g_u)
        sigma = prob.principal_matching(gamma)
        tau = prob.comb(sigma)
        idx2 = prob.singular_indices(g_u)
        singular_mask = idx2 != 0
        C, D_star, v_star, chi = prob.matched_operators(sigma, tau, singular_mask)

        combed = interleave(tau * gamma)
        combed_d = project_div_free(combed, D_star, cfg.solver_tolerance)
        gamma_c_il, s_density, kkt = qp.solve(combed_d, C, cfg.qp_tolerance)

        gamma_c = deinterleave(gamma_c_il)
        gamma_sq = gamma_c**2
        delta = float(np.abs(gamma_sq - g_prev).max())

        # the projection postconditions: divergence measured on the
        # div-projected field, curl on the scaled curl-free field
        max_div = float(np.abs(D_star @ combed_d).max()) if D_star.shape[0] else 0.0
        max_curl = float(np.abs(C @ gamma_c_il).max()) if C.shape[0] else 0.0
        sing = [(int(v), int(i)) for v, i in
                zip(prob.ring_vertices[singular_mask], idx2[singular_mask])]
        stats = IterationStats(
            iteration=it, delta=delta,
            e_align=align_energy(gamma_sq, masses, ruling.w, ruling.R_perp),
            e_smooth=smooth_energy(prob, gamma_sq),
            e_gl=gl_energy(prob, gamma_c, D_star, v_star, cfg.gl_epsilon),
            n_singular=len(sing), max_div=max_div, max_curl=max_curl,
            qp_residual=kkt)
        log.append(stats)
        raw = RawField(gamma=gamma_c, comb_sign=tau,
                       matching=prob.principal_matching(gamma_c),
                       singularities=sing, v_star=v_star)

        if cfg.snapshot_every and it % cfg.snapshot_every == 0:
            _write_snapshot(prob, raw, it, cfg.snapshot_dir)

        sing_history.append(frozenset(sing))
        if len(sing_history) == 3 and sing_history[0] == sing_history[2] \
                and sing_history[0] != sing_history[1]:
            osc_count += 1
            if osc_count > cfg.oscillation_patience:
                oscillating = True
                logger.warning("singularity configuration oscillating; stopping")
                break
        else:
            osc_count = 0

        if delta < cfg.tolerance:
            converged = True
            break

    if not converged and not oscillating:
        logger.warning("field optimization hit the iteration cap (%d)", it)
    return OptimizeResult(power=PowerField(gamma_sq=gamma_sq), raw=raw,
                          density=DensityField(s=s_density), log=log,
                          converged=converged, oscillating=oscillating,
                          iterations=it)


def _write_snapshot(prob: FieldProblem, raw: RawField, it, outdir):
    import os

    path = os.path.join(outdir, f"field_snapshot_{it:04d}.csv")
    g3 = prob.frames.to_world(raw.gamma)
    with open(path, "w") as fh:
        fh.write("face,gx,gy,gz\n")
        for f in range(prob.mesh.n_faces):
            fh.write("%d,%.9g,%.9g,%.9g\n" % (f, g3[f, 0], g3[f, 1], g3[f, 2]))


def write_iteration_log(path, log):
    with open(path, "w") as fh:
        fh.write("iteration,delta,e_align,e_smooth,e_gl,n_singular,"
                 "max_div,max_curl,qp_residual\n")
        for s in log:
            fh.write("%d,%.9g,%.9g,%.9g,%.9g,%d,%.9g,%.9g,%.9g\n"
                     % (s.iteration, s.delta, s.e_align, s.e_smooth, s.e_gl,
                        s.n_singular, s.max_div, s.max_curl, s.qp_residual))


def export_singularities_csv(path, singularities, vertices):
    with open(path, "w") as fh:
        fh.write("vertex,index_halves,x,y,z\n")
        for v, i in singularities:
            fh.write("%d,%d,%.9g,%.9g,%.9g\n" % (v, i, *vertices[v]))
