import numpy as np
import pytest

from equiscene.geometry import (
    BodyFrameHull,
    Pose,
    RigidBody,
    SceneModel,
    body_boundaries,
    closest_point_on_mesh,
)
from equiscene.objective import (
    CorrespondenceSet,
    Observation,
    ObjectiveWeights,
    TrimExhausted,
    evaluate_objective,
    refresh_correspondences,
    trim_terms,
)
from equiscene.physics import DecisionLayout, SceneState

from conftest import rel_err
from test_contact import box


def simple_scene(two_hulls=False):
    hulls = [BodyFrameHull(box((0.3, 0.3, 0.2), (0, 0, 0.4)))]
    if two_hulls:
        hulls.append(BodyFrameHull(box((0.3, 0.3, 0.1), (0, 0, 0.05))))
    body = RigidBody(hulls, Pose(np.array([0.0, 0.0, 0.3]), np.array([0.01, -0.02, 0.05])))
    return SceneModel([body])


def exact_observation(scene, n_cloud=40):
    """Cloud points exactly on the boundary, prior mesh = exact boundary."""
    clouds, priors = {}, {}
    for b in scene.dynamic_indices():
        boundaries = body_boundaries(scene.bodies[b])
        pts = []
        for tb in boundaries:
            tv = tb.triangle_vertices()
            pts.append(tv.mean(axis=1))  # triangle centroids lie on the surface
        clouds[b] = np.concatenate(pts, axis=0)[:n_cloud]
        priors[b] = boundaries
    return Observation(clouds, priors)


def make_state(scene):
    layout = DecisionLayout.build(scene, [])
    return SceneState(scene, layout), layout


def test_perfect_alignment_zero_objective():
    scene = simple_scene()
    obs = exact_observation(scene)
    state, _ = make_state(scene)
    cset, deltas = refresh_correspondences(state, obs)
    assert all(d.delta == 0.0 for d in deltas)
    value, ev = evaluate_objective(state, cset)
    assert value < 1e-20
    assert np.linalg.norm(ev.residual_vector()) < 1e-10


def test_single_type1_unit_offset_weight():
    scene = simple_scene()
    obs = exact_observation(scene, n_cloud=0)
    state, _ = make_state(scene)
    cset, _ = refresh_correspondences(state, obs)
    corr = cset.bodies[0]
    corr.type2.active[:] = False
    corr.type3.active[:] = False
    corr.targets = state.chains[0].X.copy()
    corr.targets[0] += np.array([0.0, 0.0, 1.0])  # unit offset on one record
    value, _ = evaluate_objective(state, cset)
    assert abs(value - 2e-2) < 1e-15


def test_objective_residual_identity_and_jacobian_fd(rng):
    scene = simple_scene(two_hulls=True)
    obs = exact_observation(scene)
    state, layout = make_state(scene)
    cset, _ = refresh_correspondences(state, obs)

    # move away from perfect alignment so residuals are nonzero
    z0 = layout.pack(scene)
    z0 += rng.normal(size=z0.size) * 5e-3

    state1 = SceneState(scene, layout, z0)
    value, ev = evaluate_objective(state1, cset)
    r = ev.residual_vector()
    assert abs(value - r @ r) < 1e-12 * max(value, 1.0)

    J = ev.dense_jacobian()
    h = 1e-6
    fd = np.empty((r.size, layout.nqx))
    for i in range(layout.nqx):
        zp, zm = z0.copy(), z0.copy()
        zp[i] += h
        zm[i] -= h
        _, ev_p = evaluate_objective(SceneState(scene, layout, zp), cset)
        _, ev_m = evaluate_objective(SceneState(scene, layout, zm), cset)
        fd[:, i] = (ev_p.residual_vector() - ev_m.residual_vector()) / (2 * h)
    assert rel_err(J, fd) < 1e-6

    # Gauss-Newton accumulation matches the dense products
    A = np.zeros((layout.nqx, layout.nqx))
    g = np.zeros(layout.nqx)
    ev.accumulate_gauss_newton(A, g)
    assert rel_err(A, J.T @ J) < 1e-12
    assert rel_err(g, J.T @ r) < 1e-12


def test_type1_targets_on_prior_mesh():
    scene = simple_scene(two_hulls=True)
    obs = exact_observation(scene)
    state, layout = make_state(scene)
    # perturb so the closest points are nontrivial
    z0 = layout.pack(scene) + 0.01
    state1 = SceneState(scene, layout, z0)
    cset, _ = refresh_correspondences(state1, obs)
    for b, corr in cset.bodies.items():
        for target in corr.targets:
            _, d = closest_point_on_mesh(target, obs.priors[b])
            assert d < 1e-9


def test_refresh_same_state_nonpositive_deltas(rng):
    scene = simple_scene(two_hulls=True)
    obs = exact_observation(scene)
    state, layout = make_state(scene)
    z0 = layout.pack(scene) + rng.normal(size=layout.nz) * 3e-3
    state1 = SceneState(scene, layout, z0)
    cset, _ = refresh_correspondences(state1, obs)
    _, deltas = refresh_correspondences(state1, obs, prev=cset)
    assert all(d.delta <= 1e-15 for d in deltas)


def test_merging_hulls_positive_delta():
    # two stacked wide boxes with a gap; an observed point in the gap tracks
    # the upper box's bottom face; growing the lower box across the gap makes
    # the old association interior and the new closest point farther away
    top = BodyFrameHull(box((0.3, 0.3, 0.2), (0, 0, 0.4)))
    bottom = BodyFrameHull(box((0.3, 0.3, 0.1), (0, 0, 0.05)))
    body = RigidBody([top, bottom], Pose(np.zeros(3), np.zeros(3)))
    scene = SceneModel([body])
    p = np.array([[0.0, 0.0, 0.22]])
    obs = Observation({0: p}, {0: body_boundaries(scene.bodies[0])})
    state, layout = make_state(scene)
    cset, _ = refresh_correspondences(state, obs)
    rec = cset.bodies[0].type2
    assert abs(rec.moving_points(state.chains[0])[0][2] - 0.3) < 1e-12

    # grow the lower box upward past the upper box's bottom face: the hulls
    # merge, the old association becomes interior, and the nearest union
    # boundary for p moves to a side wall
    grown = scene.copy()
    vb = grown.bodies[0].hulls[1].vertices
    vb[vb[:, 2] > 0.09] += np.array([0.0, 0.0, 0.35])
    z1 = layout.pack(grown)
    state1 = SceneState(scene, layout, z1)
    new_set, deltas = refresh_correspondences(state1, obs, prev=cset)
    d2 = [d for d in deltas if d.kind == 2]
    assert len(d2) == 1
    # direct evaluation of both distances: previous weights still track the
    # old bottom face (|0.3 - 0.22| = 0.08); the new closest point is on a
    # side wall at lateral distance 0.15
    prev_pt = rec.moving_points(state1.chains[0])[0]
    assert abs(np.linalg.norm(prev_pt - p[0]) - 0.08) < 1e-12
    new_pt = new_set.bodies[0].type2.moving_points(state1.chains[0])[0]
    assert abs(np.linalg.norm(new_pt - p[0]) - 0.15) < 1e-12
    assert abs(d2[0].delta - (0.15**2 - 0.08**2)) < 1e-12


def test_trim_no_deletion_when_nonincreasing():
    scene = simple_scene()
    obs = exact_observation(scene)
    state, _ = make_state(scene)
    cset, deltas = refresh_correspondences(state, obs)
    value, deleted = trim_terms(cset, deltas, np.inf, state)
    assert deleted == 0
    value2, deleted2 = trim_terms(cset, deltas, value, state)
    assert deleted2 == 0


def test_trim_deletes_single_offender(rng):
    scene = simple_scene()
    obs = exact_observation(scene, n_cloud=2)
    state, layout = make_state(scene)
    cset, _ = refresh_correspondences(state, obs)
    corr = cset.bodies[0]
    corr.type3.active[:] = False
    # two moving records with controlled residuals: offset their fixed points
    corr.type2.points = corr.type2.points.copy()
    corr.type2.points[0] += np.array([0.0, 0.0, 0.2])  # big offender
    corr.type2.points[1] += np.array([0.0, 0.0, 0.05])
    from equiscene.objective import TermDelta

    deltas = [TermDelta(0, 2, 0, 0.04), TermDelta(0, 2, 1, 0.0025)]
    value, _ = evaluate_objective(state, cset)
    w2 = cset.weights.w2
    o_prev = value - w2 * 0.2**2 + 1e-12  # deleting the offender just suffices
    value_after, deleted = trim_terms(cset, deltas, o_prev, state)
    assert deleted == 1
    assert not corr.type2.active[0]
    assert corr.type2.active[1]
    assert value_after <= o_prev


def test_trim_exhausted():
    scene = simple_scene()
    obs = exact_observation(scene, n_cloud=3)
    state, _ = make_state(scene)
    cset, deltas = refresh_correspondences(state, obs)
    cset.bodies[0].targets[0] += 1.0  # type-I offset keeps O above any o_prev
    with pytest.raises(TrimExhausted):
        trim_terms(cset, deltas, -1.0, state)
