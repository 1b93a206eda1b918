"""Separating-plane barrier contact model.

Each interacting hull (or body, under aggregation) pair carries a plane
(n, d) with |n| < 1 and all vertices strictly on opposite sides. The pair
potential is a sum of log barriers over the plane variables and the world
vertices; the plane is eliminated by inner minimization, and derivatives of
the eliminated potential follow from the envelope and implicit function
theorems. Normal contact forces are read off the vertex gradients.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from . import _kernels
from .geometry import rodrigues, rodrigues_second


class InfeasiblePair(Exception):
    """No strictly separating plane exists (hulls touch or overlap)."""


@dataclass
class SeparatingPlane:
    n: np.ndarray  # unnormalized normal, |n| < 1
    d: float  # offset, meters

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.float64).reshape(3)
        self.d = float(self.d)

    def copy(self):
        return SeparatingPlane(self.n.copy(), self.d)

    def unit_normal(self):
        return self.n / np.linalg.norm(self.n)


@dataclass
class BarrierConfig:
    mu: float = 5e-5  # complementarity gap
    inner_tol: float = 1e-10  # gradient norm at the inner optimum
    max_inner_iters: int = 200
    clamp_distance: float | None = None  # None: globally supported log

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")


@dataclass
class PairSide:
    body: int
    hull: int | None  # None: all hulls (plane aggregation)
    dynamic: bool
    vert_ids: np.ndarray  # indices into the body's stacked vertex array


@dataclass
class ContactPair:
    a: PairSide
    b: PairSide
    plane: SeparatingPlane | None = None  # warm start, owned by this pair


def enumerate_pairs(scene, aggregation=True):
    """All interacting pairs across distinct bodies (static-static skipped).

    With aggregation one pair per unordered body pair, each side carrying the
    body's full vertex set; without it one pair per hull pair.
    """
    pairs = []
    bodies = scene.bodies
    for i, bi in enumerate(bodies):
        slices_i = bi.hull_slices()
        for k in range(i + 1, len(bodies)):
            bk = bodies[k]
            if bi.is_static and bk.is_static:
                continue
            slices_k = bk.hull_slices()
            if aggregation:
                side_a = PairSide(i, None, not bi.is_static, np.arange(bi.num_vertices))
                side_b = PairSide(k, None, not bk.is_static, np.arange(bk.num_vertices))
                pairs.append(ContactPair(side_a, side_b))
            else:
                for j, sj in enumerate(slices_i):
                    ids_j = np.arange(sj.start, sj.stop)
                    for j2, sj2 in enumerate(slices_k):
                        ids_j2 = np.arange(sj2.start, sj2.stop)
                        pairs.append(
                            ContactPair(
                                PairSide(i, j, not bi.is_static, ids_j),
                                PairSide(k, j2, not bk.is_static, ids_j2),
                            )
                        )
    return pairs


def max_margin_plane(XA, XB):
    """Max-margin separating plane via an LP over (w, b, s).

    Maximizes s subject to <w, XA> + b >= s, <w, XB> + b <= -s, |w|_inf <= 1.
    Returns (unit_normal, offset, margin) with margin the per-side geometric
    clearance (negative or zero when no strict separator exists).
    """
    na, nb = XA.shape[0], XB.shape[0]
    A_ub = np.zeros((na + nb, 5))
    A_ub[:na, :3] = -XA
    A_ub[:na, 3] = -1.0
    A_ub[:na, 4] = 1.0
    A_ub[na:, :3] = XB
    A_ub[na:, 3] = 1.0
    A_ub[na:, 4] = 1.0
    b_ub = np.zeros(na + nb)
    c = np.zeros(5)
    c[4] = -1.0
    bounds = [(-1, 1)] * 3 + [(None, None), (0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if not res.success:
        return None, 0.0, -np.inf
    w = res.x[:3]
    b = res.x[3]
    s = res.x[4]
    norm = np.linalg.norm(w)
    if norm < 1e-14 or s <= 0.0:
        return None, 0.0, 0.0
    return w / norm, b / norm, s / norm


def separation_margin(XA, XB):
    """Geometric per-side clearance certificate of the pair (<= 0: none)."""
    _, _, margin = max_margin_plane(XA, XB)
    return margin


def initial_plane(XA, XB):
    """Strictly feasible (n, d) from the max-margin LP, or InfeasiblePair."""
    u, b, margin = max_margin_plane(XA, XB)
    if u is None or margin <= 1e-12:
        raise InfeasiblePair("no strictly separating plane exists")
    scale = 0.9
    return SeparatingPlane(scale * u, scale * b)


def _log_terms(s):
    """Value / first / second derivative of -log(s) per element."""
    return -np.log(s), -1.0 / s, 1.0 / s**2


def _clamped_terms(s, dhat):
    """IPC-style clamped barrier -(s/dhat - 1)^2 log(s/dhat), C^2 at dhat."""
    u = s / dhat
    active = u < 1.0
    val = np.zeros_like(s)
    t1 = np.zeros_like(s)
    t2 = np.zeros_like(s)
    if np.any(active):
        ua = u[active]
        ln = np.log(ua)
        val[active] = -((ua - 1.0) ** 2) * ln
        t1[active] = (-2.0 * (ua - 1.0) * ln - (ua - 1.0) ** 2 / ua) / dhat
        t2[active] = (-2.0 * ln - 4.0 * (ua - 1.0) / ua + (ua - 1.0) ** 2 / ua**2) / dhat**2
    return val, t1, t2


def barrier_value(XA, XB, plane, config=None):
    """Pair barrier at a given plane; +inf when any log argument <= 0."""
    n, d = plane.n, plane.d
    sA = XA @ n + d
    sB = -(XB @ n) - d
    r = np.linalg.norm(n)
    if 1.0 - r <= 0.0 or np.any(sA <= 0.0) or np.any(sB <= 0.0):
        return np.inf
    if config is not None and config.clamp_distance is not None:
        vA, _, _ = _clamped_terms(sA, config.clamp_distance)
        vB, _, _ = _clamped_terms(sB, config.clamp_distance)
        return float(-np.log(1.0 - r) + np.sum(vA) + np.sum(vB))
    return float(-np.log(1.0 - r) - np.sum(np.log(sA)) - np.sum(np.log(sB)))


def _clamped_nd(XA, XB, n, d, dhat):
    """Value/gradient/Hessian in (n, d) for the clamped barrier."""
    sA = XA @ n + d
    sB = -(XB @ n) - d
    r = float(np.linalg.norm(n))
    s0 = 1.0 - r
    if s0 <= 0.0 or np.any(sA <= 0.0) or np.any(sB <= 0.0):
        return np.inf, np.zeros(4), np.zeros((4, 4))
    vA, t1A, t2A = _clamped_terms(sA, dhat)
    vB, t1B, t2B = _clamped_terms(sB, dhat)
    value = -np.log(s0) + float(np.sum(vA) + np.sum(vB))
    u = n / max(r, 1e-300)
    g = np.empty(4)
    g[:3] = u / s0 + XA.T @ t1A - XB.T @ t1B
    g[3] = np.sum(t1A) - np.sum(t1B)
    uu = np.outer(u, u)
    H = np.empty((4, 4))
    H_nn = uu / s0**2 + (np.eye(3) - uu) / (max(r, 1e-300) * s0)
    H_nn += np.einsum("ki,kj,k->ij", XA, XA, t2A) + np.einsum("ki,kj,k->ij", XB, XB, t2B)
    H_nd = XA.T @ t2A + XB.T @ t2B
    H[:3, :3] = H_nn
    H[:3, 3] = H_nd
    H[3, :3] = H_nd
    H[3, 3] = np.sum(t2A) + np.sum(t2B)
    return value, g, H


def _plane_newton_clamped(XA, XB, n0, d0, tol, max_iter, dhat):
    v = np.concatenate([n0, [d0]])
    value, g, H = _clamped_nd(XA, XB, v[:3], v[3], dhat)
    it = 0
    gnorm = float(np.linalg.norm(g))
    while gnorm > tol and it < max_iter:
        try:
            step = -np.linalg.solve(H + 1e-12 * np.eye(4), g)
        except np.linalg.LinAlgError:
            break
        sA = XA @ v[:3] + v[3]
        sB = -(XB @ v[:3]) - v[3]
        dsA = XA @ step[:3] + step[3]
        dsB = -(XB @ step[:3]) - step[3]
        alpha = 1.0
        for s, ds in ((sA, dsA), (sB, dsB)):
            neg = ds < 0
            if np.any(neg):
                alpha = min(alpha, 0.99 * float(np.min(s[neg] / -ds[neg])))
        dn_norm = float(np.linalg.norm(step[:3]))
        if dn_norm > 0:
            alpha = min(alpha, 0.99 * (1.0 - float(np.linalg.norm(v[:3]))) / dn_norm)
        slope = float(g @ step)
        accepted = False
        while alpha > 1e-14:
            v_new = v + alpha * step
            val_new, g_new, H_new = _clamped_nd(XA, XB, v_new[:3], v_new[3], dhat)
            if np.isfinite(val_new):
                gnorm_new = float(np.linalg.norm(g_new))
                if val_new <= value + 1e-4 * alpha * slope or (
                    gnorm_new < 0.5 * gnorm and val_new <= value + 1e-9 * max(1.0, abs(value))
                ):
                    v, value, g, H = v_new, val_new, g_new, H_new
                    gnorm = gnorm_new
                    accepted = True
                    break
            alpha *= 0.5
        it += 1
        if not accepted:
            break
    return v[:3], float(v[3]), gnorm, it, gnorm <= tol


def solve_separating_plane(XA, XB, plane=None, config=None):
    """Inner optimum of the pair barrier over the plane variables.

    Warm-starts from the supplied plane when it is still strictly feasible;
    otherwise re-initializes from the max-margin LP. Strict feasibility is
    maintained at every Newton step by a fraction-to-boundary rule.
    Raises InfeasiblePair when no separating plane exists.
    """
    config = config or BarrierConfig()
    if plane is not None and np.isfinite(barrier_value(XA, XB, plane, config)):
        n0, d0 = plane.n, plane.d
    else:
        p0 = initial_plane(XA, XB)
        n0, d0 = p0.n, p0.d
    if config.clamp_distance is not None:
        n, d, gnorm, _, ok = _plane_newton_clamped(
            XA, XB, n0, d0, config.inner_tol, config.max_inner_iters, config.clamp_distance
        )
    else:
        n, d, gnorm, _, ok = _kernels.plane_newton(
            XA, XB, np.asarray(n0, dtype=np.float64), float(d0), config.inner_tol, config.max_inner_iters
        )
    if not ok and not np.isfinite(gnorm):
        raise InfeasiblePair("inner plane solve lost feasibility")
    return SeparatingPlane(n, d)


@dataclass
class PairBarrier:
    """Barrier derivatives of one pair at its inner plane optimum."""

    plane: SeparatingPlane
    value: float
    sA: np.ndarray
    sB: np.ndarray
    gA: np.ndarray  # (VA, 3) dPsi/dX for side A vertices
    gB: np.ndarray
    t2A: np.ndarray  # second derivative factors per vertex
    t2B: np.ndarray
    CA: np.ndarray  # (VA, 3, 4) d2Psi/dX dv
    CB: np.ndarray
    Hvv: np.ndarray  # (4, 4) inner Hessian
    W: np.ndarray  # (4, 4) its inverse


def evaluate_pair(XA, XB, plane=None, config=None):
    """Solve the inner plane problem and collect all per-vertex derivatives."""
    config = config or BarrierConfig()
    if config.clamp_distance is not None:
        # a pair whose clearance exceeds the clamp support contributes nothing
        u, b, margin = max_margin_plane(XA, XB)
        if margin <= 1e-12:
            raise InfeasiblePair("no strictly separating plane exists")
        if margin > config.clamp_distance:
            alpha = 0.5 * (config.clamp_distance / margin + 1.0)
            inert = SeparatingPlane(alpha * u, alpha * b)
            zero3 = np.zeros((XA.shape[0], 3)), np.zeros((XB.shape[0], 3))
            return PairBarrier(
                inert,
                0.0,
                XA @ inert.n + inert.d,
                -(XB @ inert.n) - inert.d,
                zero3[0],
                zero3[1],
                np.zeros(XA.shape[0]),
                np.zeros(XB.shape[0]),
                np.zeros((XA.shape[0], 3, 4)),
                np.zeros((XB.shape[0], 3, 4)),
                np.eye(4),
                np.eye(4),
            )
    opt = solve_separating_plane(XA, XB, plane, config)
    n, d = opt.n, opt.d
    sA = XA @ n + d
    sB = -(XB @ n) - d
    if config.clamp_distance is not None:
        value, _, Hvv = _clamped_nd(XA, XB, n, d, config.clamp_distance)
        _, t1A, t2A = _clamped_terms(sA, config.clamp_distance)
        _, t1B, t2B = _clamped_terms(sB, config.clamp_distance)
    else:
        value, _, Hvv = _kernels.barrier_nd(XA, XB, n, d)
        t1A, t2A = -1.0 / sA, 1.0 / sA**2
        t1B, t2B = -1.0 / sB, 1.0 / sB**2
    if not np.isfinite(value):
        raise InfeasiblePair("pair barrier infinite at inner optimum")
    gA = t1A[:, None] * n[None, :]
    gB = -t1B[:, None] * n[None, :]
    eye = np.eye(3)
    CA = np.empty((XA.shape[0], 3, 4))
    CA[:, :, :3] = t1A[:, None, None] * eye[None] + t2A[:, None, None] * n[None, :, None] * XA[:, None, :]
    CA[:, :, 3] = t2A[:, None] * n[None, :]
    CB = np.empty((XB.shape[0], 3, 4))
    CB[:, :, :3] = -t1B[:, None, None] * eye[None] + t2B[:, None, None] * n[None, :, None] * XB[:, None, :]
    CB[:, :, 3] = t2B[:, None] * n[None, :]
    W = np.linalg.inv(Hvv)
    return PairBarrier(opt, float(value), sA, sB, gA, gB, t2A, t2B, CA, CB, Hvv, W)


@dataclass
class SideChain:
    """Differentiation chain from world vertices back to (theta, t, x)."""

    X: np.ndarray  # (V, 3) world vertices
    dynamic: bool
    x: np.ndarray | None = None  # (V, 3) body-frame vertices
    R: np.ndarray | None = None
    dR: np.ndarray | None = None
    d2R: np.ndarray | None = None
    P: np.ndarray | None = field(default=None)  # (V, 3, 3): P[v, i, a] = dX_i/dtheta_a

    @classmethod
    def from_pose(cls, x, theta, t, second_order=True):
        R, dR = rodrigues(theta)
        d2R = rodrigues_second(theta) if second_order else None
        x = np.asarray(x, dtype=np.float64)
        X = x @ R.T + np.asarray(t, dtype=np.float64)
        P = np.einsum("aij,vj->via", dR, x)
        return cls(X, True, x, R, dR, d2R, P)

    @classmethod
    def static(cls, X):
        return cls(np.asarray(X, dtype=np.float64), False)

    @property
    def num_vertices(self):
        return self.X.shape[0]

    @property
    def num_cols(self):
        return 6 + 3 * self.num_vertices if self.dynamic else 0


@dataclass
class PairChainEval:
    """Pair potential chained to the participating (theta, t, x) coordinates.

    Column layout: [qA(6) | xA(3 VA)] for a dynamic side A, then the same for
    side B; static sides contribute no columns. Gradient and Hessian are of
    the eliminated potential (no mu factor); forces carry mu.
    """

    barrier: PairBarrier
    ny: int
    colA: int  # column offset of side A (or -1)
    colB: int
    grad: np.ndarray  # (ny,)
    hess: np.ndarray  # (ny, ny)
    f_perp_A: np.ndarray  # (VA, 3) normal forces, mu included
    f_perp_B: np.ndarray
    df_perp_A: np.ndarray  # (VA, 3, ny)
    df_perp_B: np.ndarray
    dplane: np.ndarray  # (4, ny) d(n, d)*/dy


def _side_gradient(chain, g):
    """Sum of J_k^T g_k over the side's vertices: (6 + 3V,) block."""
    out = np.empty(6 + 3 * chain.num_vertices)
    out[:3] = np.einsum("via,vi->a", chain.P, g)
    out[3:6] = g.sum(axis=0)
    out[6:] = (g @ chain.R).reshape(-1)
    return out


def _side_U(chain, C):
    """U block: sum_k J_k^T C_k, shape (6 + 3V, 4)."""
    V = chain.num_vertices
    out = np.empty((6 + 3 * V, 4))
    out[:3] = np.einsum("via,vif->af", chain.P, C)
    out[3:6] = C.sum(axis=0)
    out[6:] = np.einsum("ij,vif->vjf", chain.R, C).reshape(3 * V, 4)
    return out


def _side_diag_hessian(chain, n, t2, g):
    """Within-side Hessian: sum_k J_k^T D_k J_k + curvature, D_k = t2_k n n^T."""
    V = chain.num_vertices
    m = 6 + 3 * V
    H = np.zeros((m, m))
    p = np.einsum("via,i->va", chain.P, n)
    q = chain.R.T @ n
    # theta-theta
    H[:3, :3] = np.einsum("va,vb,v->ab", p, p, t2)
    # theta-t
    Htt = np.einsum("va,v->a", p, t2)
    H[:3, 3:6] = np.outer(Htt, n)
    H[3:6, :3] = H[:3, 3:6].T
    # t-t
    H[3:6, 3:6] = np.sum(t2) * np.outer(n, n)
    # vertex blocks
    pq = np.einsum("va,j,v->vaj", p, q, t2)  # theta-x_v
    nq = np.einsum("i,j->ij", n, q)
    qq = np.outer(q, q)
    for v in range(V):
        c0 = 6 + 3 * v
        H[:3, c0 : c0 + 3] += pq[v]
        H[c0 : c0 + 3, :3] += pq[v].T
        H[3:6, c0 : c0 + 3] += t2[v] * nq
        H[c0 : c0 + 3, 3:6] += t2[v] * nq.T
        H[c0 : c0 + 3, c0 : c0 + 3] += t2[v] * qq
    # curvature of the pose chart: d2X/dtheta2 and d2X/dtheta dx
    H[:3, :3] += np.einsum("abij,vj,vi->ab", chain.d2R, chain.x, g)
    cross = np.einsum("aij,vi->vja", chain.dR, g)  # (V, 3(j), 3(a))
    for v in range(V):
        c0 = 6 + 3 * v
        H[c0 : c0 + 3, :3] += cross[v]
        H[:3, c0 : c0 + 3] += cross[v].T
    return H


def _side_df(chain, n, t2, C, W_Ut, col, ny):
    """d f_perp / dy (without mu) for one side's vertices, shape (V, 3, ny).

    Row structure: t2_k * n (n^T J_k) on the side's own columns minus the
    implicit correction C_k (W U^T) over all participating columns.
    """
    V = C.shape[0]
    out = -np.einsum("vif,fy->viy", C, W_Ut)
    if chain is not None and chain.dynamic:
        p = np.einsum("via,i->va", chain.P, n)
        q = chain.R.T @ n
        for v in range(V):
            block = out[v]
            block[:, col : col + 3] += t2[v] * np.outer(n, p[v])
            block[:, col + 3 : col + 6] += t2[v] * np.outer(n, n)
            c0 = col + 6 + 3 * v
            block[:, c0 : c0 + 3] += t2[v] * np.outer(n, q)
    return out


def chain_pair(pb, chain_a, chain_b, mu):
    """Chain a PairBarrier through both sides' pose/shape parameterizations."""
    ny = chain_a.num_cols + chain_b.num_cols
    colA = 0 if chain_a.dynamic else -1
    colB = chain_a.num_cols if chain_b.dynamic else -1

    grad = np.zeros(ny)
    U = np.zeros((ny, 4))
    if chain_a.dynamic:
        grad[: chain_a.num_cols] = _side_gradient(chain_a, pb.gA)
        U[: chain_a.num_cols] = _side_U(chain_a, pb.CA)
    if chain_b.dynamic:
        grad[chain_a.num_cols :] = _side_gradient(chain_b, pb.gB)
        U[chain_a.num_cols :] = _side_U(chain_b, pb.CB)

    hess = np.zeros((ny, ny))
    if chain_a.dynamic:
        m = chain_a.num_cols
        hess[:m, :m] = _side_diag_hessian(chain_a, pb.plane.n, pb.t2A, pb.gA)
    if chain_b.dynamic:
        m0 = chain_a.num_cols
        hess[m0:, m0:] = _side_diag_hessian(chain_b, pb.plane.n, pb.t2B, pb.gB)
    WUt = pb.W @ U.T  # (4, ny)
    hess -= U @ WUt

    df_a = mu * _side_df(chain_a if chain_a.dynamic else None, pb.plane.n, pb.t2A, pb.CA, WUt, colA, ny)
    df_b = mu * _side_df(chain_b if chain_b.dynamic else None, pb.plane.n, pb.t2B, pb.CB, WUt, colB, ny)

    return PairChainEval(
        barrier=pb,
        ny=ny,
        colA=colA,
        colB=colB,
        grad=grad,
        hess=hess,
        f_perp_A=mu * pb.gA,
        f_perp_B=mu * pb.gB,
        df_perp_A=df_a,
        df_perp_B=df_b,
        dplane=-WUt,
    )


def normal_force(pb, side, k, mu):
    """Normal contact force mu * dPsi/dX on vertex k of the given side."""
    g = pb.gA if side == "a" else pb.gB
    return mu * g[k]
