"""Trimmed-ICP visual objective.

Three correspondence term types per body:

  I    hull vertex -> fixed closest point on the body's prior mesh
  II   observed cloud point -> moving closest point on the hull-union
       boundary (frozen convex weights over one hull's triangle)
  III  prior mesh vertex -> moving closest point, same construction

Targets and weights are frozen between refreshes so the objective is a plain
least-squares function of (q, x). After each refresh, terms whose
re-association would raise the objective are deleted greedily (largest
increment first) until the total does not exceed its previous value, which
keeps the outer loop monotone. Deleted terms come back at the next refresh.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import closest_points_on_union_boundary, triangulate_hull_points


class TrimExhausted(Exception):
    """All type II/III terms deleted and the objective still increased."""


@dataclass
class ObjectiveWeights:
    w1: float = 2e-2  # hull vertex -> prior mesh
    w2: float = 1e-1  # cloud point -> hull union
    w3: float = 2e-2  # prior vertex -> hull union


@dataclass
class Observation:
    """Per dynamic body: world-frame point cloud and prior mesh."""

    clouds: dict  # body index -> (P, 3) array (may be empty)
    priors: dict  # body index -> list of TriangulatedBoundary (world frame)

    def cloud(self, b):
        pts = self.clouds.get(b)
        return np.zeros((0, 3)) if pts is None else pts

    def prior_vertices(self, b):
        meshes = self.priors.get(b, [])
        if not meshes:
            return np.zeros((0, 3))
        return np.concatenate([m.vertices for m in meshes], axis=0)


@dataclass
class MovingTerms:
    """Type II or III records of one body (struct of arrays)."""

    points: np.ndarray  # (N, 3) fixed observed/prior points
    vert_ids: np.ndarray  # (N, 3) body-stacked vertex indices
    weights: np.ndarray  # (N, 3) frozen convex weights
    active: np.ndarray  # (N,) bool

    @classmethod
    def empty(cls):
        z = np.zeros((0, 3))
        return cls(z, np.zeros((0, 3), dtype=np.int64), z.copy(), np.zeros(0, dtype=bool))

    @property
    def count(self):
        return self.points.shape[0]

    def moving_points(self, chain):
        return np.einsum("nk,nki->ni", self.weights, chain.X[self.vert_ids])

    def residuals(self, chain):
        return self.moving_points(chain) - self.points


@dataclass
class BodyCorrespondences:
    targets: np.ndarray  # (V, 3) type-I fixed targets, one per body vertex
    type2: MovingTerms
    type3: MovingTerms
    has_prior: bool = True  # without a prior mesh there are no type-I terms


@dataclass
class CorrespondenceSet:
    weights: ObjectiveWeights
    bodies: dict = field(default_factory=dict)  # body index -> BodyCorrespondences


@dataclass
class TermDelta:
    body: int
    kind: int  # 2 or 3
    index: int
    delta: float


def _body_boundaries_from_chain(chain, body):
    out = []
    for j, sl in enumerate(body.hull_slices()):
        out.append(triangulate_hull_points(chain.X[sl], hull_index=j))
    return out


def _refresh_moving(points, boundaries, hull_starts):
    if points.shape[0] == 0:
        return MovingTerms.empty()
    cp, hull_idx, vids, w = closest_points_on_union_boundary(points, boundaries)
    vert_ids = hull_starts[hull_idx][:, None] + vids
    return MovingTerms(points.copy(), vert_ids, w, np.ones(points.shape[0], dtype=bool))


def refresh_correspondences(state, observation, prev=None, weights=None):
    """Recompute all targets and convex weights at the current (q, x).

    Returns (CorrespondenceSet, list of TermDelta). Deltas compare each
    moving term against its previous association, both evaluated at the
    current state; the first refresh defines every delta as 0.
    """
    from .geometry import closest_point_on_mesh  # local import to avoid cycle noise

    weights = weights or (prev.weights if prev is not None else ObjectiveWeights())
    cset = CorrespondenceSet(weights=weights)
    deltas = []
    for b in state.layout.dyn:
        body = state.work.bodies[b]
        chain = state.chains[b]
        boundaries = _body_boundaries_from_chain(chain, body)
        hull_starts = np.array([sl.start for sl in body.hull_slices()], dtype=np.int64)

        priors = observation.priors.get(b, [])
        if priors:
            from . import _kernels

            tris = np.concatenate([m.triangle_vertices() for m in priors], axis=0)
            _, targets, _, _ = _kernels.closest_points(chain.X, tris)
        else:
            targets = chain.X.copy()

        type2 = _refresh_moving(observation.cloud(b), boundaries, hull_starts)
        type3 = _refresh_moving(observation.prior_vertices(b), boundaries, hull_starts)

        prev_body = prev.bodies.get(b) if prev is not None else None
        for kind, terms in ((2, type2), (3, type3)):
            prev_terms = None
            if prev_body is not None:
                prev_terms = prev_body.type2 if kind == 2 else prev_body.type3
            if terms.count == 0:
                continue
            new_d2 = np.einsum("ni,ni->n", terms.residuals(chain), terms.residuals(chain))
            if prev_terms is None or prev_terms.count != terms.count:
                d = np.zeros(terms.count)
            else:
                prev_res = (
                    np.einsum("nk,nki->ni", prev_terms.weights, chain.X[prev_terms.vert_ids])
                    - terms.points
                )
                d = new_d2 - np.einsum("ni,ni->n", prev_res, prev_res)
            for i in range(terms.count):
                deltas.append(TermDelta(b, kind, i, float(d[i])))

        cset.bodies[b] = BodyCorrespondences(targets, type2, type3, bool(priors))
    return cset, deltas


def evaluate_objective(state, cset):
    """Objective value with residual blocks; O = |r_O|^2 exactly.

    Returns (O, ObjectiveEval). The evaluation object knows how to produce
    the dense residual/Jacobian (tests) and to accumulate the Gauss-Newton
    system (solver).
    """
    ev = ObjectiveEval(state, cset)
    return ev.value, ev


class ObjectiveEval:
    def __init__(self, state, cset):
        self.state = state
        self.cset = cset
        self.value = 0.0
        w = cset.weights
        for b, corr in cset.bodies.items():
            chain = state.chains[b]
            if corr.has_prior:
                r1 = chain.X - corr.targets
                self.value += w.w1 * float(np.einsum("ni,ni->", r1, r1))
            for weight, terms in ((w.w2, corr.type2), (w.w3, corr.type3)):
                if terms.count == 0:
                    continue
                res = terms.residuals(chain)[terms.active]
                self.value += weight * float(np.einsum("ni,ni->", res, res))

    def residual_vector(self):
        parts = []
        w = self.cset.weights
        for b, corr in self.cset.bodies.items():
            chain = self.state.chains[b]
            if corr.has_prior:
                parts.append((np.sqrt(w.w1) * (chain.X - corr.targets)).reshape(-1))
            for weight, terms in ((w.w2, corr.type2), (w.w3, corr.type3)):
                if terms.count:
                    res = terms.residuals(chain)[terms.active]
                    parts.append((np.sqrt(weight) * res).reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    def dense_jacobian(self):
        """Residual Jacobian over the global (q, x) columns (for tests)."""
        lay = self.state.layout
        w = self.cset.weights
        rows = []
        for b, corr in self.cset.bodies.items():
            chain = self.state.chains[b]
            q0 = lay.body_q[b]
            x0 = lay.nq + lay.body_x[b] if lay.shapes else 0
            if corr.has_prior:
                sw = np.sqrt(w.w1)
                for v in range(chain.num_vertices):
                    block = np.zeros((3, lay.nqx))
                    block[:, q0 : q0 + 3] = sw * chain.P[v]
                    block[:, q0 + 3 : q0 + 6] = sw * np.eye(3)
                    if lay.shapes:
                        block[:, x0 + 3 * v : x0 + 3 * v + 3] = sw * chain.R
                    rows.append(block)
            for weight, terms in ((w.w2, corr.type2), (w.w3, corr.type3)):
                if terms.count == 0:
                    continue
                sw = np.sqrt(weight)
                Q = np.einsum("nk,nkia->nia", terms.weights, chain.P[terms.vert_ids])
                for n in np.nonzero(terms.active)[0]:
                    block = np.zeros((3, lay.nqx))
                    block[:, q0 : q0 + 3] = sw * Q[n]
                    block[:, q0 + 3 : q0 + 6] = sw * np.eye(3)
                    if lay.shapes:
                        for k in range(3):
                            c = x0 + 3 * terms.vert_ids[n, k]
                            block[:, c : c + 3] += sw * terms.weights[n, k] * chain.R
                    rows.append(block)
        return np.vstack(rows) if rows else np.zeros((0, lay.nqx))

    def accumulate_gauss_newton(self, A, g):
        """Add J^T J into A (nqx, nqx) and J^T r into g (nqx,)."""
        lay = self.state.layout
        w = self.cset.weights
        for b, corr in self.cset.bodies.items():
            chain = self.state.chains[b]
            V = chain.num_vertices
            q0 = lay.body_q[b]
            x0 = lay.nq + lay.body_x[b] if lay.shapes else 0
            qc = slice(q0, q0 + 3)
            tc = slice(q0 + 3, q0 + 6)
            R = chain.R

            if corr.has_prior:
                # type I: one record per vertex; J = [P_v | I | R at x_v]
                r1 = chain.X - corr.targets
                A[qc, qc] += w.w1 * np.einsum("via,vib->ab", chain.P, chain.P)
                PT = w.w1 * chain.P.sum(axis=0)  # (3, 3): sum P_v
                A[qc, tc] += PT.T
                A[tc, qc] += PT
                A[tc, tc] += w.w1 * V * np.eye(3)
                if lay.shapes:
                    PtR = w.w1 * np.einsum("via,ij->vaj", chain.P, R)  # theta-x blocks
                    tR = w.w1 * R
                    for v in range(V):
                        c = x0 + 3 * v
                        A[qc, c : c + 3] += PtR[v]
                        A[c : c + 3, qc] += PtR[v].T
                        A[tc, c : c + 3] += tR
                        A[c : c + 3, tc] += tR.T
                        A[c : c + 3, c : c + 3] += w.w1 * np.eye(3)
                    g[x0 : x0 + 3 * V] += w.w1 * (r1 @ R).reshape(-1)
                g[qc] += w.w1 * np.einsum("via,vi->a", chain.P, r1)
                g[tc] += w.w1 * r1.sum(axis=0)

            for weight, terms in ((w.w2, corr.type2), (w.w3, corr.type3)):
                if terms.count == 0 or not np.any(terms.active):
                    continue
                act = terms.active
                ids = terms.vert_ids[act]
                wgt = terms.weights[act]
                res = terms.residuals(chain)[act]
                Q = np.einsum("nk,nkia->nia", wgt, chain.P[ids])
                N = ids.shape[0]

                A[qc, qc] += weight * np.einsum("nia,nib->ab", Q, Q)
                Qs = weight * Q.sum(axis=0)
                A[qc, tc] += Qs.T
                A[tc, qc] += Qs
                A[tc, tc] += weight * N * np.eye(3)

                if lay.shapes:
                    # x-x coupling: S[v, u] = sum_n w_nk w_nl over matching ids
                    S = np.zeros((V, V))
                    np.add.at(S, (ids[:, :, None], ids[:, None, :]), weight * wgt[:, :, None] * wgt[:, None, :])
                    Ax = A[x0 : x0 + 3 * V, x0 : x0 + 3 * V].reshape(V, 3, V, 3)
                    for c in range(3):
                        Ax[:, c, :, c] += S
                    # theta-x and t-x strips
                    QtR = np.einsum("nia,ij->naj", Q, R)  # (N, 3, 3)
                    Tmat = np.zeros((V, 3, 3))
                    np.add.at(Tmat, ids.reshape(-1), (weight * wgt[..., None, None] * QtR[:, None]).reshape(-1, 3, 3))
                    cv = np.zeros(V)
                    np.add.at(cv, ids.reshape(-1), (weight * wgt).reshape(-1))
                    for v in np.nonzero(cv)[0]:
                        c = x0 + 3 * v
                        A[qc, c : c + 3] += Tmat[v]
                        A[c : c + 3, qc] += Tmat[v].T
                        A[tc, c : c + 3] += cv[v] * R
                        A[c : c + 3, tc] += cv[v] * R.T
                    gx = np.zeros((V, 3))
                    np.add.at(gx, ids.reshape(-1), (weight * wgt[..., None] * (res @ R)[:, None]).reshape(-1, 3))
                    g[x0 : x0 + 3 * V] += gx.reshape(-1)

                g[qc] += weight * np.einsum("nia,ni->a", Q, res)
                g[tc] += weight * res.sum(axis=0)


def trim_terms(cset, deltas, o_prev, state):
    """Deactivate moving terms (largest delta first) until O <= o_prev.

    Type I terms are never deleted. Returns (O_after, deleted_count).
    Raises TrimExhausted if every II/III term is deleted and the objective
    still exceeds o_prev.
    """
    value, _ = evaluate_objective(state, cset)
    if value <= o_prev:
        return value, 0
    w = cset.weights
    order = sorted(deltas, key=lambda d: d.delta, reverse=True)
    deleted = 0
    for d in order:
        corr = cset.bodies[d.body]
        terms = corr.type2 if d.kind == 2 else corr.type3
        if not terms.active[d.index]:
            continue
        chain = state.chains[d.body]
        res = terms.residuals(chain)[d.index]
        weight = w.w2 if d.kind == 2 else w.w3
        terms.active[d.index] = False
        value -= weight * float(res @ res)
        deleted += 1
        if value <= o_prev:
            return value, deleted
    raise TrimExhausted(f"objective {value} still above {o_prev} after deleting all terms")
