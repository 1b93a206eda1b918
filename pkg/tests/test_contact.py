import math

import numpy as np
import pytest

from equiscene.contact import (
    BarrierConfig,
    ContactPair,
    InfeasiblePair,
    SeparatingPlane,
    SideChain,
    barrier_value,
    chain_pair,
    enumerate_pairs,
    evaluate_pair,
    initial_plane,
    max_margin_plane,
    normal_force,
    separation_margin,
    solve_separating_plane,
)
from equiscene.geometry import BodyFrameHull, Pose, RigidBody, SceneModel

from conftest import rel_err


def box(ext, center=(0, 0, 0)):
    e = np.asarray(ext, dtype=float) / 2.0
    c = np.asarray(center, dtype=float)
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    return corners * e + c


def random_hull(rng, n_verts=6, scale=0.1, center=(0, 0, 0)):
    pts = rng.normal(size=(n_verts, 3)) * scale + np.asarray(center, dtype=float)
    return pts


def random_separated_pair(rng, gap_scale=1.0):
    while True:
        XA = random_hull(rng, rng.integers(5, 9), 0.1)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        XB = random_hull(rng, rng.integers(5, 9), 0.1, center=direction * (0.35 * gap_scale + 0.15))
        if separation_margin(XA, XB) > 1e-3:
            return XA, XB


# --- independent oracle: plain-loop barrier and dense Newton, no package code ---


def oracle_value(XA, XB, n, d):
    r = math.sqrt(sum(c * c for c in n))
    if 1.0 - r <= 0:
        return math.inf
    total = -math.log(1.0 - r)
    for X in XA:
        s = float(np.dot(n, X)) + d
        if s <= 0:
            return math.inf
        total -= math.log(s)
    for X in XB:
        s = -float(np.dot(n, X)) - d
        if s <= 0:
            return math.inf
        total -= math.log(s)
    return total


def oracle_grad_hess(XA, XB, n, d):
    n = np.asarray(n, dtype=float)
    r = np.linalg.norm(n)
    u = n / r
    g = np.zeros(4)
    H = np.zeros((4, 4))
    g[:3] = u / (1 - r)
    H[:3, :3] = np.outer(u, u) / (1 - r) ** 2 + (np.eye(3) - np.outer(u, u)) / (r * (1 - r))
    for X, sgn in [(x, 1.0) for x in XA] + [(x, -1.0) for x in XB]:
        s = sgn * (float(np.dot(n, X)) + d)
        grad_s = np.concatenate([sgn * X, [sgn]])
        g += -grad_s / s
        H += np.outer(grad_s, grad_s) / s**2
    return g, H


def oracle_newton(XA, XB, n0, d0, tol=1e-12, iters=200):
    v = np.concatenate([np.asarray(n0, dtype=float), [d0]])
    for _ in range(iters):
        g, H = oracle_grad_hess(XA, XB, v[:3], v[3])
        if np.linalg.norm(g) <= tol:
            break
        step = -np.linalg.solve(H, g)
        alpha = 1.0
        base = oracle_value(XA, XB, v[:3], v[3])
        while alpha > 1e-16:
            cand = v + alpha * step
            if oracle_value(XA, XB, cand[:3], cand[3]) < base:
                v = cand
                break
            alpha *= 0.5
        else:
            break
    return v[:3], v[3]


def test_symmetric_cubes_plane():
    XA = box((1, 1, 1), (0, 0, 3.0))
    XB = box((1, 1, 1), (0, 0, 0.0))
    plane = solve_separating_plane(XA, XB)
    n_hat = plane.n / np.linalg.norm(plane.n)
    assert abs(abs(n_hat[2]) - 1.0) < 1e-8
    g, _ = oracle_grad_hess(XA, XB, plane.n, plane.d)
    assert np.linalg.norm(g) <= 1e-10


def test_intersecting_cubes_infeasible():
    XA = box((1, 1, 1), (0, 0, 0.4))
    XB = box((1, 1, 1), (0, 0, 0.0))
    with pytest.raises(InfeasiblePair):
        solve_separating_plane(XA, XB)


def test_inner_optimum_matches_dense_newton_oracle(rng):
    for _ in range(25):
        XA, XB = random_separated_pair(rng)
        plane = solve_separating_plane(XA, XB)
        p0 = initial_plane(XA, XB)
        n_ref, d_ref = oracle_newton(XA, XB, p0.n, p0.d)
        assert np.linalg.norm(plane.n - n_ref) < 1e-8
        assert abs(plane.d - d_ref) < 1e-8


def test_inner_hessian_positive_definite(rng):
    for _ in range(20):
        XA, XB = random_separated_pair(rng)
        pb = evaluate_pair(XA, XB)
        assert np.min(np.linalg.eigvalsh(pb.Hvv)) > 0


def test_barrier_value_hand_computed():
    XA = box((1, 1, 1), (0, 0, 3.0))
    XB = box((1, 1, 1), (0, 0, 0.0))
    # plane mid-gap: z = 1.75 separates, n = (0, 0, 0.5), d = -0.5 * 1.75
    plane = SeparatingPlane(np.array([0.0, 0.0, 0.5]), -0.875)
    val = barrier_value(XA, XB, plane)
    assert math.isfinite(val)
    assert abs(val - oracle_value(XA, XB, plane.n, plane.d)) < 1e-12


def test_barrier_value_infeasible_flags():
    XA = box((1, 1, 1), (0, 0, 3.0))
    XB = box((1, 1, 1), (0, 0, 0.0))
    assert barrier_value(XA, XB, SeparatingPlane(np.array([0.0, 0.0, 1.0]), -1.75)) == np.inf
    # plane through a vertex of XB: log(0)
    assert barrier_value(XA, XB, SeparatingPlane(np.array([0.0, 0.0, 0.5]), -0.25)) == np.inf


def _random_chain_pair(rng, static_b=False, gap_scale=1.0):
    xA = random_hull(rng, 6, 0.1)
    xB = random_hull(rng, 6, 0.1)
    thetaA, tA = rng.normal(size=3) * 0.4, rng.normal(size=3) * 0.05
    thetaB, tB = rng.normal(size=3) * 0.4, rng.normal(size=3) * 0.05
    direction = rng.normal(size=3)
    tB = tB + direction / np.linalg.norm(direction) * (0.45 * gap_scale)
    chain_a = SideChain.from_pose(xA, thetaA, tA)
    chain_b = SideChain.static(xB @ SideChain.from_pose(xB, thetaB, tB).R.T + tB) if static_b else SideChain.from_pose(xB, thetaB, tB)
    if separation_margin(chain_a.X, chain_b.X) <= 1e-3:
        return None
    return (xA, thetaA, tA, xB, thetaB, tB, chain_a, chain_b)


def _nested_value(xA, thetaA, tA, xB, thetaB, tB, config):
    chain_a = SideChain.from_pose(xA, thetaA, tA, second_order=False)
    chain_b = SideChain.from_pose(xB, thetaB, tB, second_order=False)
    pb = evaluate_pair(chain_a.X, chain_b.X, None, config)
    return pb.value


def _pack(xA, thetaA, tA, xB, thetaB, tB):
    return np.concatenate([thetaA, tA, xA.ravel(), thetaB, tB, xB.ravel()])


def _unpack(z, VA, VB):
    thetaA, tA = z[0:3], z[3:6]
    xA = z[6 : 6 + 3 * VA].reshape(VA, 3)
    off = 6 + 3 * VA
    thetaB, tB = z[off : off + 3], z[off + 3 : off + 6]
    xB = z[off + 6 :].reshape(VB, 3)
    return xA, thetaA, tA, xB, thetaB, tB


def test_collision_potential_gradient_fd(rng):
    config = BarrierConfig(inner_tol=1e-12)
    checked = 0
    while checked < 50:
        made = _random_chain_pair(rng)
        if made is None:
            continue
        xA, thetaA, tA, xB, thetaB, tB, chain_a, chain_b = made
        pb = evaluate_pair(chain_a.X, chain_b.X, None, config)
        ev = chain_pair(pb, chain_a, chain_b, mu=1.0)
        z0 = _pack(xA, thetaA, tA, xB, thetaB, tB)
        h = 1e-6
        fd = np.empty_like(z0)
        for i in range(z0.size):
            zp, zm = z0.copy(), z0.copy()
            zp[i] += h
            zm[i] -= h
            fd[i] = (
                _nested_value(*_unpack(zp, 6, 6), config) - _nested_value(*_unpack(zm, 6, 6), config)
            ) / (2 * h)
        assert rel_err(ev.grad, fd) < 1e-5
        checked += 1


def test_collision_potential_hessian_fd(rng):
    config = BarrierConfig(inner_tol=1e-12)
    checked = 0
    while checked < 8:
        made = _random_chain_pair(rng)
        if made is None:
            continue
        xA, thetaA, tA, xB, thetaB, tB, chain_a, chain_b = made
        pb = evaluate_pair(chain_a.X, chain_b.X, None, config)
        ev = chain_pair(pb, chain_a, chain_b, mu=1.0)
        z0 = _pack(xA, thetaA, tA, xB, thetaB, tB)

        def grad_at(z):
            args = _unpack(z, 6, 6)
            ca = SideChain.from_pose(args[0], args[1], args[2])
            cb = SideChain.from_pose(args[3], args[4], args[5])
            pb2 = evaluate_pair(ca.X, cb.X, None, config)
            return chain_pair(pb2, ca, cb, mu=1.0).grad

        h = 1e-6
        fd = np.empty((z0.size, z0.size))
        for i in range(z0.size):
            zp, zm = z0.copy(), z0.copy()
            zp[i] += h
            zm[i] -= h
            fd[:, i] = (grad_at(zp) - grad_at(zm)) / (2 * h)
        assert rel_err(ev.hess, fd) < 1e-3
        checked += 1


def test_translation_invariance(rng):
    config = BarrierConfig(inner_tol=1e-12)
    for _ in range(10):
        XA, XB = random_separated_pair(rng)
        pb = evaluate_pair(XA, XB, None, config)
        shift = rng.normal(size=3)
        pb2 = evaluate_pair(XA + shift, XB + shift, None, config)
        assert abs(pb.value - pb2.value) < 1e-10
        # optimal d shifts by -<n, shift>
        assert abs(pb2.plane.d - (pb.plane.d - pb.plane.n @ shift)) < 1e-8


def test_normal_force_direction_and_third_law(rng):
    mu = 5e-5
    # cube resting far above a table slab: globally supported log still pulls
    XA = box((0.1, 0.1, 0.1), (0, 0, 0.5))
    XB = box((1.0, 1.0, 0.1), (0, 0, -0.05))
    pb = evaluate_pair(XA, XB, None, BarrierConfig(mu=mu))
    fA = mu * pb.gA
    assert np.all(np.abs(fA @ pb.plane.n) > 0)  # nonzero
    assert np.all(fA @ pb.plane.n < 0)  # anti-parallel to n on side A
    total = fA.sum(axis=0) + (mu * pb.gB).sum(axis=0)
    assert np.linalg.norm(total) < 1e-8

    for _ in range(20):
        XA, XB = random_separated_pair(rng)
        pb = evaluate_pair(XA, XB)
        total = mu * (pb.gA.sum(axis=0) + pb.gB.sum(axis=0))
        assert np.linalg.norm(total) < 1e-8
        assert np.allclose(normal_force(pb, "a", 0, 2 * mu), 2 * normal_force(pb, "a", 0, mu))


def _scene_with_hulls(hull_counts, statics):
    bodies = []
    for m, is_static in zip(hull_counts, statics):
        hulls = [BodyFrameHull(box((0.1, 0.1, 0.1), (0.3 * j, 0, 0))) for j in range(m)]
        bodies.append(RigidBody(hulls, Pose(np.zeros(3), [0, 0, 2.0 * len(bodies)]), is_static=is_static))
    return SceneModel(bodies)


def test_enumerate_pairs_counts():
    scene = _scene_with_hulls([1, 4], [False, False])
    assert len(enumerate_pairs(scene, aggregation=False)) == 4
    assert len(enumerate_pairs(scene, aggregation=True)) == 1

    # scenario-1-sized scene: 6 hulls over 3 dynamic bodies (1, 2, 2) + table (1)
    scene = _scene_with_hulls([1, 2, 2, 1], [False, False, False, True])
    hulls = [1, 2, 2, 1]
    statics = [False, False, False, True]
    expect = 0
    for i in range(4):
        for k in range(i + 1, 4):
            if statics[i] and statics[k]:
                continue
            expect += hulls[i] * hulls[k]
    got = len(enumerate_pairs(scene, aggregation=False))
    assert got == expect == 13
    assert len(enumerate_pairs(scene, aggregation=True)) == 6


def test_enumerate_pairs_vert_ids():
    scene = _scene_with_hulls([2, 1], [False, True])
    (pair,) = enumerate_pairs(scene, aggregation=True)
    assert pair.a.vert_ids.size == 16
    assert pair.b.vert_ids.size == 8
    pairs = enumerate_pairs(scene, aggregation=False)
    assert [p.a.vert_ids.size for p in pairs] == [8, 8]


def test_clamped_barrier_far_pair_inactive(rng):
    config = BarrierConfig(clamp_distance=0.01)
    XA = box((0.1, 0.1, 0.1), (0, 0, 1.0))
    XB = box((0.1, 0.1, 0.1), (0, 0, 0.0))
    pb = evaluate_pair(XA, XB, None, config)
    assert pb.value < 1e-12
    assert np.allclose(pb.gA, 0.0) and np.allclose(pb.gB, 0.0)


def test_clamped_barrier_near_pair_gradient_fd(rng):
    config = BarrierConfig(inner_tol=1e-12, clamp_distance=0.05)
    checked = 0
    while checked < 5:
        made = _random_chain_pair(rng, gap_scale=0.15)
        if made is None:
            continue
        xA, thetaA, tA, xB, thetaB, tB, chain_a, chain_b = made
        pb = evaluate_pair(chain_a.X, chain_b.X, None, config)
        if pb.value < 1e-9:
            continue
        ev = chain_pair(pb, chain_a, chain_b, mu=1.0)
        z0 = _pack(xA, thetaA, tA, xB, thetaB, tB)
        h = 1e-6
        fd = np.empty_like(z0)
        for i in range(z0.size):
            zp, zm = z0.copy(), z0.copy()
            zp[i] += h
            zm[i] -= h
            fd[i] = (
                _nested_value(*_unpack(zp, 6, 6), config) - _nested_value(*_unpack(zm, 6, 6), config)
            ) / (2 * h)
        assert rel_err(ev.grad, fd) < 1e-4
        checked += 1
