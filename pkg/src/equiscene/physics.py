"""Quasistatic constraint system over the decision vector z.

z concatenates [q | x | f_par per pair]: poses and body-frame vertices of the
non-static bodies followed by one tangential force block per contact pair
(3 numbers per vertex of both sides). Constraint blocks:

  equi   force/torque equilibrium per dynamic body, the q-gradient of the
         total potential minus the virtual work of the tangential forces
  orth   <f_perp, f_par> per vertex of each pair
  cone   |f_par| - eta |f_perp| per vertex (inequality, <= 0 feasible)
  plane  force and tangential-torque balance of each pair's separating plane

C_eq stacks [equi | per pair (orth, plane)]; C_ineq stacks the cone blocks.
Jacobians are kept in the same per-pair structure the solver exploits.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .contact import BarrierConfig, SideChain, chain_pair, evaluate_pair
from .geometry import hat_rows


class InfeasibleState(Exception):
    """Some pair admits no separating plane (barrier infinite)."""


@dataclass
class PhysicsParams:
    barrier: BarrierConfig = field(default_factory=BarrierConfig)
    eta: float = 1.0  # friction coefficient
    cone_eps: float = 1e-10  # smoothing of |.| at the origin


@dataclass
class DecisionLayout:
    """Block offsets of z = [q | x | f_pair_1 | f_pair_2 | ...].

    With shapes=False the x block is dropped (pose-only optimization) and
    every Jacobian consumer restricts itself to the pose columns.
    """

    dyn: list
    body_q: dict  # body index -> q offset
    body_x: dict  # body index -> x offset within the x block
    body_nv: dict
    nq: int
    nx: int
    pair_f: list  # per pair: offset of its force block in z
    pair_nf: list
    nz: int
    shapes: bool = True
    friction: bool = True

    @classmethod
    def build(cls, scene, pairs, shapes=True, friction=True):
        dyn = scene.dynamic_indices()
        body_q, body_x, body_nv = {}, {}, {}
        off = 0
        for b in dyn:
            body_q[b] = off
            off += 6
        nq = off
        off = 0
        for b in dyn:
            body_nv[b] = scene.bodies[b].num_vertices
            if shapes:
                body_x[b] = off
                off += 3 * body_nv[b]
        nx = off
        pair_f, pair_nf = [], []
        z_off = nq + nx
        if friction:
            for p in pairs:
                nf = 3 * (p.a.vert_ids.size + p.b.vert_ids.size)
                pair_f.append(z_off)
                pair_nf.append(nf)
                z_off += nf
        return cls(dyn, body_q, body_x, body_nv, nq, nx, pair_f, pair_nf, z_off, shapes, friction)

    @property
    def nqx(self):
        return self.nq + self.nx

    def q_cols(self, body):
        return np.arange(self.body_q[body], self.body_q[body] + 6)

    def x_cols(self, body, vert_ids):
        base = self.nq + self.body_x[body]
        return base + 3 * np.repeat(vert_ids, 3) + np.tile(np.arange(3), vert_ids.size)

    def side_cols(self, side):
        """Global qx columns of a pair side, matching its local selection."""
        if not side.dynamic:
            return np.empty(0, dtype=np.int64)
        if not self.shapes:
            return self.q_cols(side.body)
        return np.concatenate([self.q_cols(side.body), self.x_cols(side.body, side.vert_ids)])

    def pair_local_sel(self, pair):
        """Local column indices of a pair's chained (ny) layout that are kept."""
        sel = []
        off = 0
        for side in (pair.a, pair.b):
            if not side.dynamic:
                continue
            width = 6 + 3 * side.vert_ids.size
            sel.append(np.arange(off, off + 6))
            if self.shapes:
                sel.append(np.arange(off + 6, off + width))
            off += width
        return np.concatenate(sel) if sel else np.empty(0, dtype=np.int64)

    def pack(self, scene, forces=None):
        z = np.zeros(self.nz)
        for b in self.dyn:
            body = scene.bodies[b]
            z[self.body_q[b] : self.body_q[b] + 3] = body.pose.theta
            z[self.body_q[b] + 3 : self.body_q[b] + 6] = body.pose.t
            if self.shapes:
                x0 = self.nq + self.body_x[b]
                z[x0 : x0 + 3 * self.body_nv[b]] = body.stacked_vertices().reshape(-1)
        if forces is not None:
            for off, nf, f in zip(self.pair_f, self.pair_nf, forces):
                z[off : off + nf] = np.asarray(f).reshape(-1)
        return z

    def apply(self, scene, z):
        """Write the q (and x, when optimized) entries of z into the scene."""
        for b in self.dyn:
            body = scene.bodies[b]
            body.pose.theta = z[self.body_q[b] : self.body_q[b] + 3].copy()
            body.pose.t = z[self.body_q[b] + 3 : self.body_q[b] + 6].copy()
            if self.shapes:
                x0 = self.nq + self.body_x[b]
                body.set_stacked_vertices(z[x0 : x0 + 3 * self.body_nv[b]].reshape(-1, 3))

    def forces(self, z):
        return [z[off : off + nf].reshape(-1, 3) for off, nf in zip(self.pair_f, self.pair_nf)]


class SceneState:
    """Immutable world-space snapshot of a scene at a decision vector z."""

    def __init__(self, scene, layout, z=None, second_order=True):
        self.scene = scene
        self.layout = layout
        self.z = z
        self.chains = {}
        if z is not None:
            work = scene.copy()
            layout.apply(work, z)
        else:
            work = scene
        self.work = work
        for i, body in enumerate(work.bodies):
            if body.is_static:
                self.chains[i] = SideChain.static(body.world_vertices())
            else:
                self.chains[i] = SideChain.from_pose(
                    body.stacked_vertices(), body.pose.theta, body.pose.t, second_order
                )

    def side_chain(self, side):
        full = self.chains[side.body]
        if side.hull is None and side.vert_ids.size == full.num_vertices:
            return full
        ids = side.vert_ids
        if not full.dynamic:
            return SideChain.static(full.X[ids])
        return SideChain(
            full.X[ids], True, full.x[ids], full.R, full.dR, full.d2R, full.P[ids]
        )


def hull_volume(vertices):
    return float(ConvexHull(vertices).volume)


@dataclass
class GravityModel:
    """Per-vertex lumped masses (kg) per dynamic body plus the gravity vector."""

    masses: dict  # body index -> (V,) array
    gravity: np.ndarray

    @classmethod
    def from_scene(cls, scene):
        masses = {}
        for b in scene.dynamic_indices():
            body = scene.bodies[b]
            volume = sum(hull_volume(h.vertices) for h in body.hulls)
            m = body.mass_density * volume / body.num_vertices
            masses[b] = np.full(body.num_vertices, m)
        return cls(masses, scene.gravity.copy())

    def body_mass(self, b):
        return float(np.sum(self.masses[b]))


def gravity_terms(X, masses, gravity):
    """Potential -sum_k m_k <X_k, g> and its gradient per world vertex."""
    value = -float(np.einsum("v,vi,i->", masses, X, gravity))
    grad = -masses[:, None] * gravity[None, :]
    return value, grad


def gravity_potential(state, model):
    """Gravity potential with exact gradients over q and x.

    Returns (value, grad_q (nq,), grad_x (nx,)); static bodies excluded.
    """
    lay = state.layout
    value = 0.0
    grad_q = np.zeros(lay.nq)
    grad_x = np.zeros(lay.nx)
    for b in lay.dyn:
        chain = state.chains[b]
        m = model.masses[b]
        val, gX = gravity_terms(chain.X, m, model.gravity)
        value += val
        q0 = lay.body_q[b]
        grad_q[q0 : q0 + 3] = np.einsum("via,vi->a", chain.P, gX)
        grad_q[q0 + 3 : q0 + 6] = gX.sum(axis=0)
        x0 = lay.body_x[b]
        grad_x[x0 : x0 + 3 * chain.num_vertices] = (gX @ chain.R).reshape(-1)
    return value, grad_q, grad_x


@dataclass
class PairBlock:
    """Constraint values and Jacobian pieces of one contact pair.

    cols: participating global qx columns (ordered as the pair's local
    chain layout). n_f: length of the pair's force block. The Jacobian of
    each row group splits into a qx part over `cols` and an f part.
    """

    cols: np.ndarray
    n_f: int
    orth: np.ndarray
    J_orth_qx: np.ndarray
    J_orth_f: np.ndarray
    cone: np.ndarray
    J_cone_qx: np.ndarray
    J_cone_f: np.ndarray
    plane: np.ndarray
    J_plane_qx: np.ndarray
    J_plane_f: np.ndarray
    f_perp: np.ndarray  # (VA+VB, 3) normal forces at the inner optimum
    plane_opt: object
    torque_normal: float  # plane torque component along the unit normal
    value: float  # pair barrier value


@dataclass
class ConstraintSystem:
    """Stacked constraints C_eq = [equi | per pair (orth, plane)], C_ineq = cones."""

    layout: DecisionLayout
    equi: np.ndarray
    J_equi_qx: np.ndarray  # (nq, nqx) dense
    J_equi_f: list  # per pair (nq, n_f)
    blocks: list  # PairBlock per pair
    psi_value: float  # total potential (gravity + mu * sum of barriers)

    def eq_vector(self):
        parts = [self.equi]
        for blk in self.blocks:
            parts.append(blk.orth)
            parts.append(blk.plane)
        return np.concatenate(parts) if parts else np.zeros(0)

    def ineq_vector(self):
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([blk.cone for blk in self.blocks])

    def eq_sizes(self):
        return [self.equi.size] + [blk.orth.size + 6 for blk in self.blocks]

    def dense_eq_jacobian(self):
        lay = self.layout
        rows = self.eq_vector().size
        J = np.zeros((rows, lay.nz))
        J[: self.equi.size, : lay.nqx] = self.J_equi_qx
        for p, blk in enumerate(self.blocks):
            J[: self.equi.size, lay.pair_f[p] : lay.pair_f[p] + blk.n_f] = self.J_equi_f[p]
        r = self.equi.size
        for p, blk in enumerate(self.blocks):
            f0 = lay.pair_f[p]
            no = blk.orth.size
            J[r : r + no, blk.cols] = blk.J_orth_qx
            J[r : r + no, f0 : f0 + blk.n_f] = blk.J_orth_f
            r += no
            J[r : r + 6, blk.cols] = blk.J_plane_qx
            J[r : r + 6, f0 : f0 + blk.n_f] = blk.J_plane_f
            r += 6
        return J

    def dense_ineq_jacobian(self):
        lay = self.layout
        rows = self.ineq_vector().size
        J = np.zeros((rows, lay.nz))
        r = 0
        for p, blk in enumerate(self.blocks):
            f0 = lay.pair_f[p]
            nc = blk.cone.size
            J[r : r + nc, blk.cols] = blk.J_cone_qx
            J[r : r + nc, f0 : f0 + blk.n_f] = blk.J_cone_f
            r += nc
        return J


def _smooth_norm(v, eps):
    return np.sqrt(np.einsum("vi,vi->v", v, v) + eps * eps)


def _pair_block(state, pair, ev, f_pair, params):
    """Assemble orth/cone/plane rows of one pair from its chained evaluation."""
    lay = state.layout
    va = pair.a.vert_ids.size
    vb = pair.b.vert_ids.size
    cols = np.concatenate([lay.side_cols(pair.a), lay.side_cols(pair.b)])
    sel = lay.pair_local_sel(pair)
    ny = ev.ny
    n_f = 3 * (va + vb)
    fA = f_pair[:va]
    fB = f_pair[va:]
    chain_a = state.side_chain(pair.a)
    chain_b = state.side_chain(pair.b)

    f_perp = np.vstack([ev.f_perp_A, ev.f_perp_B])
    df = np.concatenate([ev.df_perp_A, ev.df_perp_B], axis=0)  # (V,3,ny)
    f_par = np.vstack([fA, fB])

    # orthogonality rows
    orth = np.einsum("vi,vi->v", f_perp, f_par)
    J_orth_qx = np.einsum("vi,viy->vy", f_par, df)[:, sel]
    J_orth_f = np.zeros((va + vb, n_f))
    for v in range(va + vb):
        J_orth_f[v, 3 * v : 3 * v + 3] = f_perp[v]

    # cone rows (pre-clamp)
    eps = params.cone_eps
    npar = _smooth_norm(f_par, eps)
    nperp = _smooth_norm(f_perp, eps)
    cone = npar - params.eta * nperp
    J_cone_qx = -params.eta * np.einsum("vi,viy->vy", f_perp / nperp[:, None], df)[:, sel]
    J_cone_f = np.zeros((va + vb, n_f))
    for v in range(va + vb):
        J_cone_f[v, 3 * v : 3 * v + 3] = f_par[v] / npar[v]

    # plane balance rows
    n = ev.barrier.plane.n
    n_norm = np.linalg.norm(n)
    n_hat = n / n_norm
    X_all = np.vstack([chain_a.X, chain_b.X])
    tau = np.einsum("vi->i", np.cross(X_all, f_par))
    T = np.eye(3) - np.outer(n_hat, n_hat)
    plane = np.concatenate([f_par.sum(axis=0), T @ tau])

    J_plane_f = np.zeros((6, n_f))
    J_plane_f[:3] = np.tile(np.eye(3), va + vb)
    Thx = np.einsum("ij,vjk->vik", T, hat_rows(X_all))
    for v in range(va + vb):
        J_plane_f[3:, 3 * v : 3 * v + 3] = Thx[v]

    J_plane_qx = np.zeros((6, ny))
    # motion of the application points: d(X x f)/dX = -hat(f)
    col = 0
    for chain, f_side in ((chain_a, fA), (chain_b, fB)):
        if not chain.dynamic:
            continue
        V = chain.num_vertices
        hf = hat_rows(f_side)  # (V,3,3)
        Thf = -np.einsum("ij,vjk->vik", T, hf)
        J_plane_qx[3:, col : col + 3] += np.einsum("vik,vka->ia", Thf, chain.P)
        J_plane_qx[3:, col + 3 : col + 6] += Thf.sum(axis=0)
        block = np.einsum("vik,kj->vij", Thf, chain.R)
        J_plane_qx[3:, col + 6 : col + 6 + 3 * V] += block.transpose(1, 0, 2).reshape(3, 3 * V)
        col += 6 + 3 * V
    # motion of the projector through the optimal plane normal
    dn = ev.dplane[:3]  # (3, ny)
    dn_hat = (np.eye(3) - np.outer(n_hat, n_hat)) @ dn / n_norm
    J_plane_qx[3:] += -(np.outer(n_hat, tau @ dn_hat) + float(n_hat @ tau) * dn_hat)
    J_plane_qx = J_plane_qx[:, sel]

    torque_normal = float(n_hat @ tau)
    return PairBlock(
        cols,
        n_f,
        orth,
        J_orth_qx,
        J_orth_f,
        cone,
        J_cone_qx,
        J_cone_f,
        plane,
        J_plane_qx,
        J_plane_f,
        f_perp,
        ev.barrier.plane,
        torque_normal,
        ev.barrier.value,
    )


def assemble(state, pairs, forces, params, gravity_model, parallel_map=None):
    """Evaluate all constraint blocks and their structured Jacobians.

    forces: list of (VA+VB, 3) tangential force arrays, one per pair. Warm
    plane starts are read from and written back to each pair. Raises
    InfeasibleState if any pair has no separating plane.
    """
    from .contact import InfeasiblePair

    lay = state.layout
    mu = params.barrier.mu

    def eval_one(pair):
        chain_a = state.side_chain(pair.a)
        chain_b = state.side_chain(pair.b)
        pb = evaluate_pair(chain_a.X, chain_b.X, pair.plane, params.barrier)
        return pb, chain_pair(pb, chain_a, chain_b, mu)

    try:
        if parallel_map is None:
            evals = [eval_one(p) for p in pairs]
        else:
            evals = parallel_map(eval_one, pairs)
    except InfeasiblePair as exc:
        raise InfeasibleState(str(exc)) from exc

    for pair, (pb, _) in zip(pairs, evals):
        pair.plane = pb.plane.copy()

    # gravity contribution to C_equi and its Jacobian
    equi = np.zeros(lay.nq)
    J_equi_qx = np.zeros((lay.nq, lay.nqx))
    psi = 0.0
    for b in lay.dyn:
        chain = state.chains[b]
        m = gravity_model.masses[b]
        val, gX = gravity_terms(chain.X, m, gravity_model.gravity)
        psi += val
        q0 = lay.body_q[b]
        equi[q0 : q0 + 3] += np.einsum("via,vi->a", chain.P, gX)
        equi[q0 + 3 : q0 + 6] += gX.sum(axis=0)
        # d(grad_theta)/dtheta via the chart curvature
        J_equi_qx[q0 : q0 + 3, q0 : q0 + 3] += np.einsum("abij,vj,vi->ab", chain.d2R, chain.x, gX)
        if lay.shapes:
            # d(grad_theta)/dx_v: same 3x3 block per vertex (gX is constant)
            blockv = np.einsum("aij,vi->vaj", chain.dR, gX)  # (V,3,3)
            x0 = lay.nq + lay.body_x[b]
            for v in range(chain.num_vertices):
                J_equi_qx[q0 : q0 + 3, x0 + 3 * v : x0 + 3 * v + 3] += blockv[v]

    # contact contributions
    J_equi_f = []
    blocks = []
    for p, (pair, (pb, ev)) in enumerate(zip(pairs, evals)):
        psi += mu * pb.value
        cols = np.concatenate([lay.side_cols(pair.a), lay.side_cols(pair.b)])
        sel = lay.pair_local_sel(pair)
        # potential part: q-rows of the chained gradient / Hessian
        local = 0
        for side, chain in ((pair.a, state.side_chain(pair.a)), (pair.b, state.side_chain(pair.b))):
            if not side.dynamic:
                continue
            q0 = lay.body_q[side.body]
            equi[q0 : q0 + 6] += mu * ev.grad[local : local + 6]
            J_equi_qx[np.ix_(np.arange(q0, q0 + 6), cols)] += mu * ev.hess[local : local + 6][:, sel]
            local += 6 + 3 * side.vert_ids.size

        if not lay.friction:
            continue

        # virtual work of tangential forces: -sum <X_k, f_k>
        f_pair = forces[p]
        va = pair.a.vert_ids.size
        Jf = np.zeros((lay.nq, 3 * (va + pair.b.vert_ids.size)))
        off_f = 0
        for side, f_side in ((pair.a, f_pair[:va]), (pair.b, f_pair[va:])):
            chain = state.side_chain(side)
            if side.dynamic:
                q0 = lay.body_q[side.body]
                equi[q0 : q0 + 3] -= np.einsum("via,vi->a", chain.P, f_side)
                equi[q0 + 3 : q0 + 6] -= f_side.sum(axis=0)
                # d/df
                for v in range(chain.num_vertices):
                    Jf[q0 : q0 + 3, off_f + 3 * v : off_f + 3 * v + 3] = -chain.P[v].T
                    Jf[q0 + 3 : q0 + 6, off_f + 3 * v : off_f + 3 * v + 3] = -np.eye(3)
                # d/dtheta and d/dx of the theta rows
                J_equi_qx[q0 : q0 + 3, q0 : q0 + 3] -= np.einsum(
                    "abij,vj,vi->ab", chain.d2R, chain.x, f_side
                )
                if lay.shapes:
                    x0 = lay.nq + lay.body_x[side.body]
                    blockv = np.einsum("aij,vi->vaj", chain.dR, f_side)
                    for v, vid in enumerate(side.vert_ids):
                        J_equi_qx[q0 : q0 + 3, x0 + 3 * vid : x0 + 3 * vid + 3] -= blockv[v]
            off_f += 3 * chain.num_vertices
        J_equi_f.append(Jf)

        blocks.append(_pair_block(state, pair, ev, f_pair, params))

    return ConstraintSystem(lay, equi, J_equi_qx, J_equi_f, blocks, psi)


def full_constraint_eval(scene, pairs, params=None, gravity_model=None, forces=None, z=None, friction=True):
    """Convenience wrapper: constraint vector blocks + Jacobians at (scene, z)."""
    params = params or PhysicsParams()
    layout = DecisionLayout.build(scene, pairs, friction=friction)
    state = SceneState(scene, layout, z)
    if gravity_model is None:
        gravity_model = GravityModel.from_scene(state.work)
    if forces is None:
        forces = [np.zeros((p.a.vert_ids.size + p.b.vert_ids.size, 3)) for p in pairs]
    if not friction:
        forces = []
    return assemble(state, pairs, forces, params, gravity_model), layout
