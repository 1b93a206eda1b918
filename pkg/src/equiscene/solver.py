"""ALM outer loop, LM subproblem solver, and structured linear algebra.

The ALM subproblem is a nonlinear least-squares problem with residual

    r(z) = [ r_O ; sqrt(rho_eq/2) (C_eq + lambda_eq/rho_eq) ;
             sqrt(rho_ineq/2) ([C_ineq]_+ + lambda_ineq/rho_ineq) ]

so that |r|^2 equals the augmented Lagrangian up to the constant
sum |lambda|^2 / (2 rho). The Gauss-Newton matrix splits as H = A + C^T C
where C collects the (scaled) equilibrium rows - the only rows coupling
different pairs' force blocks - and A is block-structured: a dense (q, x)
core plus one small force block and coupling strip per contact pair. Solve-H
applies the Woodbury identity over C; Solve-A eliminates the per-pair blocks
by Schur complement into the core.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .contact import InfeasiblePair, enumerate_pairs
from .geometry import canonicalize_axis_angle
from .objective import ObjectiveWeights, evaluate_objective, refresh_correspondences, trim_terms
from .physics import (
    DecisionLayout,
    GravityModel,
    InfeasibleState,
    PhysicsParams,
    SceneState,
    assemble,
)


class SingularSystem(Exception):
    """A block factorization failed; the LM loop responds with more damping."""


class InfeasibleInitialization(Exception):
    """The starting scene violates a barrier (interpenetration)."""


# ---------------------------------------------------------------------------
# structured linear algebra (Algs. Solve-H / Solve-A)


@dataclass
class PairSystem:
    cols: np.ndarray  # participating qx columns
    B: np.ndarray  # (len(cols), nf) coupling strip
    D: np.ndarray  # (nf, nf) force block, damping included
    f_offset: int  # offset of the force block in z


@dataclass
class StructuredSystem:
    """Gauss-Newton matrix H = A + C^T C in block form; A carries the damping."""

    A_qx: np.ndarray
    pairs: list
    C_qx: np.ndarray | None  # (m, nqx) low-rank factor, or None
    C_f: list | None  # per pair (m, nf)
    nz: int

    @property
    def nqx(self):
        return self.A_qx.shape[0]

    def dense(self):
        """Assemble the full H (oracle/benchmark use only)."""
        H = np.zeros((self.nz, self.nz))
        H[: self.nqx, : self.nqx] = self.A_qx
        for ps in self.pairs:
            f = slice(ps.f_offset, ps.f_offset + ps.D.shape[0])
            H[f, f] += ps.D
            H[np.ix_(ps.cols, range(f.start, f.stop))] += ps.B
            H[np.ix_(range(f.start, f.stop), ps.cols)] += ps.B.T
        if self.C_qx is not None:
            m = self.C_qx.shape[0]
            C = np.zeros((m, self.nz))
            C[:, : self.nqx] = self.C_qx
            for ps, cf in zip(self.pairs, self.C_f):
                C[:, ps.f_offset : ps.f_offset + cf.shape[1]] = cf
            H += C.T @ C
        return H


class AFactor:
    """Factorization of A: per-pair Cholesky blocks + folded core Cholesky."""

    def __init__(self, system):
        self.system = system
        folded = system.A_qx.copy()
        self.pair_data = []
        for ps in system.pairs:
            try:
                Dc = scipy.linalg.cho_factor(ps.D, lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise SingularSystem(f"pair block not SPD: {exc}") from exc
            DiBt = scipy.linalg.cho_solve(Dc, ps.B.T)  # (nf, ncols)
            folded[np.ix_(ps.cols, ps.cols)] -= ps.B @ DiBt
            self.pair_data.append((Dc, DiBt))
        try:
            self.core = scipy.linalg.cho_factor(folded, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise SingularSystem(f"folded core not SPD: {exc}") from exc

    def solve(self, b):
        system = self.system
        b = np.asarray(b, dtype=np.float64)
        single = b.ndim == 1
        if single:
            b = b[:, None]
        x = np.zeros_like(b)
        b_qx = b[: system.nqx].copy()
        for ps, (Dc, _) in zip(system.pairs, self.pair_data):
            f = slice(ps.f_offset, ps.f_offset + ps.D.shape[0])
            b_qx[ps.cols] -= ps.B @ scipy.linalg.cho_solve(Dc, b[f])
        x_qx = scipy.linalg.cho_solve(self.core, b_qx)
        x[: system.nqx] = x_qx
        for ps, (Dc, _) in zip(system.pairs, self.pair_data):
            f = slice(ps.f_offset, ps.f_offset + ps.D.shape[0])
            x[f] = scipy.linalg.cho_solve(Dc, b[f] - ps.B.T @ x_qx[ps.cols])
        return x[:, 0] if single else x


def solve_A(b, system, factor=None):
    """A^{-1} b by per-pair Schur elimination into the (q, x) core."""
    return (factor or AFactor(system)).solve(b)


class HFactor:
    """Woodbury application of H^{-1} = (A + C^T C)^{-1} using Solve-A."""

    def __init__(self, system):
        self.system = system
        self.af = AFactor(system)
        if system.C_qx is None or system.C_qx.shape[0] == 0:
            self.G = None
            return
        m = system.C_qx.shape[0]
        Ct = np.zeros((system.nz, m))
        Ct[: system.nqx] = system.C_qx.T
        for ps, cf in zip(system.pairs, system.C_f):
            Ct[ps.f_offset : ps.f_offset + cf.shape[1]] = cf.T
        self.Ct = Ct
        Y = self.af.solve(Ct)  # (nz, m)
        G = np.eye(m) + Ct.T @ Y
        try:
            self.G = scipy.linalg.cho_factor(G, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise SingularSystem(f"Woodbury core not SPD: {exc}") from exc

    def solve(self, b):
        t = self.af.solve(b)
        if self.G is None:
            return t
        w = scipy.linalg.cho_solve(self.G, self.Ct.T @ t)
        return t - self.af.solve(self.Ct @ w)


def solve_H(b, system):
    """H^{-1} b via the Woodbury identity over the equilibrium rows."""
    return HFactor(system).solve(b)


def make_random_system(rng, n_pairs, nqx=60, nf=24, ncols=None, m_rows=6):
    """Random SPD structured system (for solver tests and benchmarks).

    Built as J^T J + damping with the contact sparsity: each pair's rows
    touch its force block plus a random subset of qx columns.
    """
    ncols = ncols or max(6, nqx // 2)
    A_qx = 1e-3 * np.eye(nqx)
    G0 = rng.normal(size=(nqx + 10, nqx)) / np.sqrt(nqx)
    A_qx += G0.T @ G0
    pairs = []
    f_off = nqx
    for _ in range(n_pairs):
        cols = np.sort(rng.choice(nqx, size=min(ncols, nqx), replace=False))
        rows = nf + 8
        Jqx = rng.normal(size=(rows, cols.size)) / np.sqrt(cols.size)
        Jf = rng.normal(size=(rows, nf)) / np.sqrt(nf)
        D = Jf.T @ Jf + 1e-3 * np.eye(nf)
        B = Jqx.T @ Jf
        A_qx[np.ix_(cols, cols)] += Jqx.T @ Jqx
        pairs.append(PairSystem(cols, B, D, f_off))
        f_off += nf
    nz = f_off
    C_qx = rng.normal(size=(m_rows, nqx)) / np.sqrt(nqx)
    C_f = [rng.normal(size=(m_rows, nf)) / np.sqrt(nf) for _ in range(n_pairs)]
    return StructuredSystem(A_qx, pairs, C_qx, C_f, nz)


# ---------------------------------------------------------------------------
# ALM machinery


@dataclass
class ALMConfig:
    rho_eq: float = 1e-2
    rho_ineq: float = 2.0
    gamma_eq: float = 0.25
    gamma_ineq: float = 0.25
    beta_eq: float = 8.0
    beta_ineq: float = 4.0
    eps_r: float = 1e-6
    eps_g: float = 1e-2
    eps_c: float = 5e-4
    max_outer: int = 15
    max_lm_iters: int = 400
    lm_damping_init: float = 1e-4
    stall_window: int = 20
    stall_fraction: float = 0.01
    kkt_stall_fraction: float = 0.01
    aggregation: bool = True
    optimize_shapes: bool = True


@dataclass
class ALMState:
    lambda_eq: np.ndarray
    lambda_ineq: np.ndarray
    rho_eq: float
    rho_ineq: float
    prev_eq_norm: float = np.inf
    prev_ineq_norm: float = np.inf


@dataclass
class LMState:
    damping: float
    iters: int = 0
    accepted: int = 0
    history: list = field(default_factory=list)  # best |r|^2 per iteration
    termination: str = "max_iterations"
    feasibility_violations: int = 0


@dataclass
class EvalParts:
    """Everything evaluated at one z: residual pieces plus Jacobian structure."""

    z: np.ndarray
    state: SceneState
    obj_value: float
    obj_ev: object
    csys: object
    r: np.ndarray
    phi: float


class AlmProblem:
    """Residual and structured system of the ALM subproblem at fixed multipliers."""

    def __init__(self, scene, layout, pairs, params, gravity_model, cset, alm, parallel_map=None):
        self.scene = scene
        self.layout = layout
        self.pairs = pairs
        self.params = params
        self.gravity_model = gravity_model
        self.cset = cset
        self.alm = alm
        self.parallel_map = parallel_map
        # multiplier slicing: lambda_eq = [equi | per pair (orth, plane)]
        self.m_equi = layout.nq
        self.orth_sizes = (
            [p.a.vert_ids.size + p.b.vert_ids.size for p in pairs] if layout.friction else []
        )

    def lambda_blocks(self):
        lam = self.alm.lambda_eq
        out = {"equi": lam[: self.m_equi]}
        off = self.m_equi
        orth, plane = [], []
        for n in self.orth_sizes:
            orth.append(lam[off : off + n])
            off += n
            plane.append(lam[off : off + 6])
            off += 6
        out["orth"] = orth
        out["plane"] = plane
        lam_in = self.alm.lambda_ineq
        off = 0
        cone = []
        for n in self.orth_sizes:
            cone.append(lam_in[off : off + n])
            off += n
        out["cone"] = cone
        return out

    def evaluate(self, z):
        """Full residual + Jacobian structure at z; raises InfeasibleState."""
        state = SceneState(self.scene, self.layout, z)
        forces = self.layout.forces(z)
        csys = assemble(
            state, self.pairs, forces, self.params, self.gravity_model, self.parallel_map
        )
        if self.cset is not None:
            obj_value, obj_ev = evaluate_objective(state, self.cset)
            r_obj = obj_ev.residual_vector()
        else:
            obj_value, obj_ev, r_obj = 0.0, None, np.zeros(0)

        lam = self.lambda_blocks()
        alm = self.alm
        se = np.sqrt(alm.rho_eq / 2.0)
        si = np.sqrt(alm.rho_ineq / 2.0)
        parts = [r_obj, se * (csys.equi + lam["equi"] / alm.rho_eq)]
        for p, blk in enumerate(csys.blocks):
            parts.append(se * (blk.orth + lam["orth"][p] / alm.rho_eq))
            parts.append(se * (blk.plane + lam["plane"][p] / alm.rho_eq))
        for p, blk in enumerate(csys.blocks):
            parts.append(si * (np.maximum(blk.cone, 0.0) + lam["cone"][p] / alm.rho_ineq))
        r = np.concatenate(parts)
        return EvalParts(z.copy(), state, obj_value, obj_ev, csys, r, float(r @ r))

    def build_system(self, parts, damping):
        """Structured Gauss-Newton system and gradient at an evaluated point."""
        lay = self.layout
        alm = self.alm
        csys = parts.csys
        se2 = alm.rho_eq / 2.0
        si2 = alm.rho_ineq / 2.0
        se = np.sqrt(se2)

        A_qx = np.zeros((lay.nqx, lay.nqx))
        g = np.zeros(lay.nz)
        if parts.obj_ev is not None:
            parts.obj_ev.accumulate_gauss_newton(A_qx, g[: lay.nqx])

        lam = self.lambda_blocks()
        pair_systems = []
        C_f = []
        for p, blk in enumerate(csys.blocks):
            nf = blk.n_f
            active = blk.cone > 0.0
            rows_qx = [blk.J_orth_qx, blk.J_plane_qx, blk.J_cone_qx[active]]
            rows_f = [blk.J_orth_f, blk.J_plane_f, blk.J_cone_f[active]]
            scale = np.concatenate(
                [
                    np.full(blk.orth.size, np.sqrt(se2)),
                    np.full(6, np.sqrt(se2)),
                    np.full(int(np.count_nonzero(active)), np.sqrt(si2)),
                ]
            )
            Jqx = np.vstack(rows_qx) * scale[:, None]
            Jf = np.vstack(rows_f) * scale[:, None]
            r_rows = np.concatenate(
                [
                    se * (blk.orth + lam["orth"][p] / alm.rho_eq),
                    se * (blk.plane + lam["plane"][p] / alm.rho_eq),
                    np.sqrt(si2)
                    * (blk.cone[active] + lam["cone"][p][active] / alm.rho_ineq),
                ]
            )
            A_qx[np.ix_(blk.cols, blk.cols)] += Jqx.T @ Jqx
            B = Jqx.T @ Jf
            D = Jf.T @ Jf
            g[blk.cols] += Jqx.T @ r_rows
            f0 = lay.pair_f[p]
            g[f0 : f0 + nf] += Jf.T @ r_rows
            # inactive cone rows with positive multipliers still contribute a
            # constant lambda/rho residual but no Jacobian row (clamp).
            pair_systems.append(PairSystem(blk.cols, B, D, f0))
            C_f.append(se * csys.J_equi_f[p])

        C_qx = se * csys.J_equi_qx
        r_equi = se * (csys.equi + lam["equi"] / alm.rho_eq)
        g[: lay.nqx] += C_qx.T @ r_equi
        for p, cf in enumerate(C_f):
            f0 = lay.pair_f[p]
            g[f0 : f0 + cf.shape[1]] += cf.T @ r_equi

        # Marquardt damping on the diagonal of A, scaled by the diagonal of the
        # full H (including the low-rank equilibrium rows, which otherwise
        # dominate the step in directions where A is nearly singular)
        diag_qx = np.abs(np.diag(A_qx)) + np.einsum("mi,mi->i", C_qx, C_qx)
        A_qx = A_qx + np.diag(damping * np.maximum(diag_qx, 1e-8))
        for ps, cf in zip(pair_systems, C_f):
            dd = np.abs(np.diag(ps.D)) + np.einsum("mi,mi->i", cf, cf)
            ps.D = ps.D + np.diag(damping * np.maximum(dd, 1e-8))

        system = StructuredSystem(A_qx, pair_systems, C_qx, C_f, lay.nz)
        return system, g

    def kkt_gradient_norm(self, parts):
        """Infinity norm of grad O + J_eq^T lambda_eq + J_ineq^T lambda_ineq."""
        lay = self.layout
        csys = parts.csys
        lam = self.lambda_blocks()
        g = np.zeros(lay.nz)
        if parts.obj_ev is not None:
            gO = np.zeros(lay.nqx)
            A_tmp = np.zeros((lay.nqx, lay.nqx))
            parts.obj_ev.accumulate_gauss_newton(A_tmp, gO)
            g[: lay.nqx] += 2.0 * gO
        g[: lay.nqx] += csys.J_equi_qx.T @ lam["equi"]
        for p, blk in enumerate(csys.blocks):
            f0 = lay.pair_f[p]
            g[blk.cols] += blk.J_orth_qx.T @ lam["orth"][p]
            g[f0 : f0 + blk.n_f] += blk.J_orth_f.T @ lam["orth"][p]
            g[blk.cols] += blk.J_plane_qx.T @ lam["plane"][p]
            g[f0 : f0 + blk.n_f] += blk.J_plane_f.T @ lam["plane"][p]
            active = blk.cone > 0.0
            lam_act = lam["cone"][p] * active
            g[blk.cols] += blk.J_cone_qx.T @ lam_act
            g[f0 : f0 + blk.n_f] += blk.J_cone_f.T @ lam_act
            g[f0 : f0 + blk.n_f] += csys.J_equi_f[p].T @ lam["equi"]
        return float(np.max(np.abs(g)))


def lm_minimize(problem, z0, config, damping=None, parts0=None):
    """Damped Gauss-Newton on |r(z)|^2 with the structured solver.

    Steps whose trial point is infeasible (infinite barrier) or fails to
    decrease |r|^2 are rejected with doubled damping. Terminates on
    |r|_inf <= eps_r, |J^T r|_inf <= eps_g, a <1% progress window over the
    accepted steps, a run of hopeless rejections, or the iteration cap.
    Returns (z, parts, LMState).
    """
    lm = LMState(damping=config.lm_damping_init if damping is None else damping)
    parts = parts0 if parts0 is not None else problem.evaluate(z0)
    z = z0.copy()
    lm.history.append(parts.phi)
    rejects = 0
    while lm.iters < config.max_lm_iters:
        if np.max(np.abs(parts.r)) <= config.eps_r:
            lm.termination = "eps_r"
            break
        system, g = problem.build_system(parts, lm.damping)
        if np.max(np.abs(g)) <= config.eps_g:
            lm.termination = "eps_g"
            break
        w = len(lm.history) - 1 - config.stall_window
        if w >= 0:
            past = lm.history[w]
            if past - parts.phi < config.stall_fraction * max(past, 1e-300):
                lm.termination = "stall"
                break
        try:
            step = -HFactor(system).solve(g)
        except SingularSystem:
            lm.iters += 1
            lm.damping = min(lm.damping * 2.0, 1e12)
            rejects += 1
            if rejects >= 30:
                lm.termination = "reject_limit"
                break
            continue
        # backtrack along the damped Gauss-Newton direction: infeasible or
        # non-decreasing trials shrink the search step size
        alpha = 1.0
        trial = None
        for _ in range(10):
            try:
                cand = problem.evaluate(z + alpha * step)
            except InfeasibleState:
                cand = None
            if cand is not None and np.isfinite(cand.phi) and cand.phi < parts.phi:
                trial = cand
                break
            alpha *= 0.5
        lm.iters += 1
        if trial is not None:
            if not np.isfinite(trial.csys.psi_value):
                lm.feasibility_violations += 1  # pragma: no cover - guarded by assemble
            z = z + alpha * step
            parts = trial
            lm.accepted += 1
            if alpha == 1.0:
                lm.damping = max(lm.damping * 0.5, 1e-12)
            lm.history.append(parts.phi)
            rejects = 0
        else:
            lm.damping = min(lm.damping * 2.0, 1e12)
            rejects += 1
            if rejects >= 30:
                lm.termination = "reject_limit"
                break
    return z, parts, lm


def alm_optimize(scene, observation, config=None, params=None, weights=None, parallel_map=None):
    """Full joint shape/pose estimation (outer ALM loop).

    With observation=None the visual objective is absent and the loop solves
    the pure physics projection (used for ground-truth equilibration).
    Returns (result scene, forces per pair, report dict). The report carries
    one entry per outer iteration with the convergence-history content.
    """
    config = config or ALMConfig()
    params = params or PhysicsParams()
    weights = weights or ObjectiveWeights()
    work = scene.copy()
    pairs = enumerate_pairs(work, config.aggregation)
    layout = DecisionLayout.build(work, pairs, shapes=config.optimize_shapes)
    z = layout.pack(work)

    state0 = SceneState(work, layout, z)
    try:
        assemble(
            state0,
            pairs,
            layout.forces(z),
            params,
            GravityModel.from_scene(state0.work),
            parallel_map,
        )
    except InfeasibleState as exc:
        raise InfeasibleInitialization(str(exc)) from exc

    m_eq = layout.nq + sum(p.a.vert_ids.size + p.b.vert_ids.size + 6 for p in pairs)
    m_in = sum(p.a.vert_ids.size + p.b.vert_ids.size for p in pairs)
    alm = ALMState(np.zeros(m_eq), np.zeros(m_in), config.rho_eq, config.rho_ineq)

    o_prev = np.inf
    cset = None
    prev_kkt = np.inf
    kkt_stalls = 0
    damping = None
    report = {"iterations": [], "termination": "max_outer", "config": {"mu": params.barrier.mu}}
    t_start = time.perf_counter()
    total_lm = 0

    for outer in range(1, config.max_outer + 1):
        # re-canonicalize the rotation chart between outer iterations only
        for b in layout.dyn:
            q0 = layout.body_q[b]
            theta = z[q0 : q0 + 3]
            if np.linalg.norm(theta) >= np.pi:
                z[q0 : q0 + 3] = canonicalize_axis_angle(theta)

        state = SceneState(work, layout, z)
        gravity_model = GravityModel.from_scene(state.work)
        if observation is not None:
            cset, deltas = refresh_correspondences(state, observation, prev=cset, weights=weights)
            o_refreshed, deleted = trim_terms(cset, deltas, o_prev, state)
        else:
            o_refreshed, deleted = 0.0, 0

        problem = AlmProblem(work, layout, pairs, params, gravity_model, cset, alm, parallel_map)
        z, parts, lm = lm_minimize(problem, z, config, damping=damping)
        damping = lm.damping  # warm-start the next subproblem's trust region
        total_lm += lm.iters

        C_eq = parts.csys.eq_vector()
        C_in = np.maximum(parts.csys.ineq_vector(), 0.0)
        eq_norm = float(np.max(np.abs(C_eq))) if C_eq.size else 0.0
        in_norm = float(np.max(C_in)) if C_in.size else 0.0

        alm.lambda_eq = alm.lambda_eq + alm.rho_eq * C_eq
        alm.lambda_ineq = np.maximum(alm.lambda_ineq + alm.rho_ineq * C_in, 0.0)

        kkt_grad = problem.kkt_gradient_norm(parts)
        kkt = max(kkt_grad, eq_norm, in_norm)
        o_end = evaluate_objective(parts.state, cset)[0] if cset is not None else 0.0

        grew_eq = eq_norm > config.gamma_eq * alm.prev_eq_norm and eq_norm > config.eps_c
        grew_in = in_norm > config.gamma_ineq * alm.prev_ineq_norm and in_norm > config.eps_c
        report["iterations"].append(
            {
                "outer": outer,
                "O_refreshed": float(o_refreshed),
                "O_end": float(o_end),
                "deleted_terms": int(deleted),
                "C_eq_inf": eq_norm,
                "C_ineq_inf": in_norm,
                "kkt_grad_inf": kkt_grad,
                "rho_eq": alm.rho_eq,
                "rho_ineq": alm.rho_ineq,
                "lm_iters": lm.iters,
                "lm_termination": lm.termination,
                "rho_eq_grew": bool(grew_eq),
                "rho_ineq_grew": bool(grew_in),
                "feasibility_violations": lm.feasibility_violations,
                "wall_time": time.perf_counter() - t_start,
            }
        )

        if eq_norm <= config.eps_c and in_norm <= config.eps_c:
            report["termination"] = "converged"
            break
        # stall only after two consecutive outer iterations without a >1%
        # improvement of the KKT residual (single fluctuations are routine
        # right after a multiplier update)
        if outer > 1 and kkt > (1.0 - config.kkt_stall_fraction) * prev_kkt:
            kkt_stalls += 1
            if kkt_stalls >= 2:
                report["termination"] = "kkt_stall"
                break
        else:
            kkt_stalls = 0
        if grew_eq:
            alm.rho_eq *= config.beta_eq
        if grew_in:
            alm.rho_ineq *= config.beta_ineq
        alm.prev_eq_norm = eq_norm
        alm.prev_ineq_norm = in_norm
        prev_kkt = kkt
        o_prev = o_end

    layout.apply(work, z)
    forces = layout.forces(z)
    report["outer_iterations"] = len(report["iterations"])
    report["total_lm_iterations"] = total_lm
    report["wall_time"] = time.perf_counter() - t_start
    last = report["iterations"][-1]
    report["C_eq_inf"] = last["C_eq_inf"]
    report["C_ineq_inf"] = last["C_ineq_inf"]
    return work, forces, report


def equilibrate_poses(scene, params=None, tol=1e-8, max_iters=400):
    """Frictionless pose-only equilibration of a scene.

    Runs the LM solver on the residual C_equi = grad_q(potential) with the
    shapes frozen and no friction variables; used to produce ground-truth
    scenes whose equilibrium residual vanishes. Returns an equilibrated copy.
    """
    params = params or PhysicsParams()
    work = scene.copy()
    pairs = enumerate_pairs(work, aggregation=True)
    layout = DecisionLayout.build(work, pairs, shapes=False, friction=False)
    alm = ALMState(np.zeros(layout.nq), np.zeros(0), 1.0, 1.0)
    gravity = GravityModel.from_scene(work)
    problem = AlmProblem(work, layout, pairs, params, gravity, None, alm)
    config = ALMConfig(
        eps_r=np.sqrt(0.5) * tol, eps_g=1e-18, max_lm_iters=max_iters, stall_window=80
    )
    z, parts, lm = lm_minimize(problem, layout.pack(work), config)
    layout.apply(work, z)
    return work
