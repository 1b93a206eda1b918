import numpy as np
import pytest
from scipy.optimize import brentq

from equiscene.contact import BarrierConfig, enumerate_pairs
from equiscene.geometry import BodyFrameHull, Pose, RigidBody, SceneModel
from equiscene.physics import (
    DecisionLayout,
    GravityModel,
    InfeasibleState,
    PhysicsParams,
    SceneState,
    assemble,
    full_constraint_eval,
    gravity_potential,
    gravity_terms,
)

from conftest import rel_err
from test_contact import box, oracle_newton, oracle_value


def make_box_on_table(height=0.051, edge=0.1, density=800.0):
    table = RigidBody(
        [BodyFrameHull(box((1.0, 1.0, 0.1), (0, 0, -0.05)))],
        Pose(np.zeros(3), np.zeros(3)),
        is_static=True,
        name="table",
    )
    cube = RigidBody(
        [BodyFrameHull(box((edge, edge, edge)))],
        Pose(np.zeros(3), [0.0, 0.0, height]),
        mass_density=density,
        name="box",
    )
    return SceneModel([table, cube])


def two_body_scene(rng, gap=0.08):
    a = RigidBody(
        [BodyFrameHull(rng.normal(size=(6, 3)) * 0.05)],
        Pose(rng.normal(size=3) * 0.3, [0, 0, 0.0]),
        name="a",
    )
    b = RigidBody(
        [
            BodyFrameHull(rng.normal(size=(5, 3)) * 0.05),
            BodyFrameHull(rng.normal(size=(5, 3)) * 0.05 + np.array([0.12, 0, 0])),
        ],
        Pose(rng.normal(size=3) * 0.3, [0.0, 0.0, 0.3 + gap]),
        name="b",
    )
    return SceneModel([a, b])


def test_gravity_single_vertex():
    h = 0.7
    rho = 800.0
    g = np.array([0.0, 0.0, -9.81])
    X = np.array([[0.0, 0.0, h]])
    masses = np.array([rho])
    val, grad = gravity_terms(X, masses, g)
    assert abs(val - rho * 9.81 * h) < 1e-9
    assert np.allclose(-grad[0], rho * np.array([0, 0, -9.81]))  # force is m g
    assert np.allclose(grad[0], [0.0, 0.0, rho * 9.81])


def test_gravity_rigid_translation():
    scene = make_box_on_table()
    pairs = enumerate_pairs(scene)
    layout = DecisionLayout.build(scene, pairs)
    model = GravityModel.from_scene(scene)
    state = SceneState(scene, layout)
    val0, _, _ = gravity_potential(state, model)
    dt = np.array([0.01, -0.02, 0.05])
    scene2 = scene.copy()
    scene2.bodies[1].pose.t = scene2.bodies[1].pose.t + dt
    val1, _, _ = gravity_potential(SceneState(scene2, layout), model)
    m_total = model.body_mass(1)
    assert abs((val1 - val0) - (-m_total * dt @ scene.gravity)) < 1e-10


def test_gravity_gradients_fd(rng):
    scene = two_body_scene(rng)
    pairs = []
    layout = DecisionLayout.build(scene, pairs)
    model = GravityModel.from_scene(scene)
    z0 = layout.pack(scene)

    def value_at(z):
        return gravity_potential(SceneState(scene, layout, z), model)[0]

    state = SceneState(scene, layout, z0)
    _, gq, gx = gravity_potential(state, model)
    grad = np.concatenate([gq, gx])
    h = 1e-6
    fd = np.empty(layout.nqx)
    for i in range(layout.nqx):
        zp, zm = z0.copy(), z0.copy()
        zp[i] += h
        zm[i] -= h
        fd[i] = (value_at(zp) - value_at(zm)) / (2 * h)
    assert rel_err(grad, fd) < 1e-8


def test_free_floating_no_contact_zero_residual(rng):
    body = RigidBody([BodyFrameHull(box((0.1, 0.1, 0.1)))], Pose(rng.normal(size=3) * 0.2, [0, 0, 1.0]))
    scene = SceneModel([body], gravity=np.zeros(3))
    sys_, layout = full_constraint_eval(scene, [])
    assert sys_.eq_vector().size == 6
    assert np.allclose(sys_.eq_vector(), 0.0)
    assert sys_.ineq_vector().size == 0


def test_box_on_table_equilibrium_height_oracle():
    mu = 5e-5
    scene = make_box_on_table(height=0.051)
    cube = scene.bodies[1]
    table = scene.bodies[0]
    XB = table.world_vertices()
    model = GravityModel.from_scene(scene)
    m_total = model.body_mass(1)

    def psi(h):
        XA = cube.hulls[0].vertices + np.array([0.0, 0.0, h])
        lo = XA[:, 2].min()
        n0 = np.array([0.0, 0.0, 0.5])
        d0 = -0.5 * lo / 2.0
        n, d = oracle_newton(XA, XB, n0, d0, tol=1e-12)
        return m_total * 9.81 * h + mu * oracle_value(XA, XB, n, d)

    def dpsi(h, eps=1e-7):
        return (psi(h + eps) - psi(h - eps)) / (2 * eps)

    h_star = brentq(dpsi, 0.05 + 1e-6, 0.08, xtol=1e-12)

    scene.bodies[1].pose.t = np.array([0.0, 0.0, h_star])
    pairs = enumerate_pairs(scene)
    params = PhysicsParams(barrier=BarrierConfig(mu=mu))
    sys_, layout = full_constraint_eval(scene, pairs, params)
    assert np.max(np.abs(sys_.equi)) <= 5e-4


def _random_feasible_forces(rng, pairs):
    return [rng.normal(size=(p.a.vert_ids.size + p.b.vert_ids.size, 3)) * 1e-3 for p in pairs]


@pytest.mark.parametrize("gap,shapes", [(0.08, True), (1e-4, True), (0.08, False)])
def test_constraint_jacobians_fd(rng, gap, shapes):
    scene = two_body_scene(rng, gap=gap)
    pairs = enumerate_pairs(scene, aggregation=True)
    params = PhysicsParams(barrier=BarrierConfig(inner_tol=1e-12))
    layout = DecisionLayout.build(scene, pairs, shapes=shapes)
    model = GravityModel.from_scene(scene)
    forces = _random_feasible_forces(rng, pairs)
    z0 = layout.pack(scene, forces)

    def vectors_at(z):
        st = SceneState(scene, layout, z)
        fs = layout.forces(z)
        sys_ = assemble(st, pairs, fs, params, model)
        return sys_.eq_vector(), sys_.ineq_vector()

    state = SceneState(scene, layout, z0)
    sys0 = assemble(state, pairs, layout.forces(z0), params, model)
    J_eq = sys0.dense_eq_jacobian()
    J_in = sys0.dense_ineq_jacobian()

    h = 1e-6
    eq0, in0 = vectors_at(z0)
    fd_eq = np.empty((eq0.size, layout.nz))
    fd_in = np.empty((in0.size, layout.nz))
    for i in range(layout.nz):
        zp, zm = z0.copy(), z0.copy()
        zp[i] += h
        zm[i] -= h
        eq_p, in_p = vectors_at(zp)
        eq_m, in_m = vectors_at(zm)
        fd_eq[:, i] = (eq_p - eq_m) / (2 * h)
        fd_in[:, i] = (in_p - in_m) / (2 * h)
    assert rel_err(J_eq, fd_eq) < 1e-4
    assert rel_err(J_in, fd_in) < 1e-4


def test_orth_block_values(rng):
    scene = two_body_scene(rng)
    pairs = enumerate_pairs(scene)
    params = PhysicsParams()
    layout = DecisionLayout.build(scene, pairs)
    model = GravityModel.from_scene(scene)
    state = SceneState(scene, layout)

    zero = [np.zeros((p.a.vert_ids.size + p.b.vert_ids.size, 3)) for p in pairs]
    sys_ = assemble(state, pairs, zero, params, model)
    assert np.allclose(sys_.blocks[0].orth, 0.0)

    # forces projected orthogonal to f_perp
    f_perp = sys_.blocks[0].f_perp
    raw = rng.normal(size=f_perp.shape)
    proj = raw - (np.einsum("vi,vi->v", raw, f_perp) / np.einsum("vi,vi->v", f_perp, f_perp))[:, None] * f_perp
    sys2 = assemble(state, pairs, [proj], params, model)
    assert np.max(np.abs(sys2.blocks[0].orth)) < 1e-12


def test_cone_block_values(rng):
    scene = two_body_scene(rng)
    pairs = enumerate_pairs(scene)
    params = PhysicsParams(eta=1.0)
    layout = DecisionLayout.build(scene, pairs)
    model = GravityModel.from_scene(scene)
    state = SceneState(scene, layout)

    zero = [np.zeros((pairs[0].a.vert_ids.size + pairs[0].b.vert_ids.size, 3))]
    sys_ = assemble(state, pairs, zero, params, model)
    blk = sys_.blocks[0]
    nperp = np.linalg.norm(blk.f_perp, axis=1)
    assert np.allclose(blk.cone, -params.eta * np.sqrt(nperp**2 + params.cone_eps**2), atol=1e-12)
    assert np.all(blk.cone <= 0)
    # clamp zeroes strictly interior residuals
    assert np.allclose(np.maximum(blk.cone, 0.0), 0.0)

    # boundary: |f_par| = eta |f_perp| exactly
    t = np.cross(blk.f_perp, rng.normal(size=3))
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    f_par = t * (params.eta * nperp)[:, None]
    sys2 = assemble(state, pairs, [f_par], params, model)
    assert np.max(np.abs(sys2.blocks[0].cone)) < 1e-9


def test_plane_block_direct_oracle(rng):
    scene = two_body_scene(rng)
    pairs = enumerate_pairs(scene)
    params = PhysicsParams()
    layout = DecisionLayout.build(scene, pairs)
    model = GravityModel.from_scene(scene)
    state = SceneState(scene, layout)

    zero = [np.zeros((pairs[0].a.vert_ids.size + pairs[0].b.vert_ids.size, 3))]
    sys_ = assemble(state, pairs, zero, params, model)
    assert np.allclose(sys_.blocks[0].plane, 0.0)

    forces = _random_feasible_forces(rng, pairs)
    sys2 = assemble(state, pairs, forces, params, model)
    blk = sys2.blocks[0]
    # independent direct evaluation
    va = pairs[0].a.vert_ids.size
    XA = state.side_chain(pairs[0].a).X
    XB = state.side_chain(pairs[0].b).X
    f = forces[0]
    force_sum = f.sum(axis=0)
    tau = np.zeros(3)
    for X, fv in zip(np.vstack([XA, XB]), f):
        tau += np.cross(X, fv)
    n_hat = blk.plane_opt.n / np.linalg.norm(blk.plane_opt.n)
    T = np.eye(3) - np.outer(n_hat, n_hat)
    assert np.allclose(blk.plane[:3], force_sum, atol=1e-14)
    assert np.allclose(blk.plane[3:], T @ tau, atol=1e-12)

    # equal-and-opposite forces at one shared vertex position: zero residual
    f = np.zeros_like(f)
    f[0] = np.array([1.0, -2.0, 0.5])
    f[va] = -f[0]
    XB_shift = XB.copy()
    sys3 = assemble(state, pairs, [f], params, model)
    blk3 = sys3.blocks[0]
    assert np.allclose(blk3.plane[:3], 0.0, atol=1e-14)
    # the torque rows follow the direct sum over application points
    tau3 = np.cross(XA[0], f[0]) + np.cross(XB[0], f[va])
    n_hat3 = blk3.plane_opt.n / np.linalg.norm(blk3.plane_opt.n)
    T3 = np.eye(3) - np.outer(n_hat3, n_hat3)
    assert np.allclose(blk3.plane[3:], T3 @ tau3, atol=1e-12)


def test_static_bodies_no_equi_rows(rng):
    scene = make_box_on_table()
    pairs = enumerate_pairs(scene)
    sys_, layout = full_constraint_eval(scene, pairs)
    assert layout.nq == 6  # only the cube
    assert sys_.equi.size == 6
    # but the static side still carries normal force
    blk = sys_.blocks[0]
    assert np.linalg.norm(blk.f_perp[pairs[0].a.vert_ids.size :]) > 0


def test_third_law_with_plane_balance(rng):
    scene = two_body_scene(rng)
    pairs = enumerate_pairs(scene)
    sys_, layout = full_constraint_eval(scene, pairs)
    blk = sys_.blocks[0]
    # summed normal forces cancel at the inner optimum
    assert np.linalg.norm(blk.f_perp.sum(axis=0)) < 1e-8
    # when C_plane = 0 the tangential sums cancel by definition of the rows
    assert np.allclose(blk.plane[:3], 0.0)


def test_infeasible_state_raised(rng):
    scene = make_box_on_table(height=0.02)  # box sunk into the table
    pairs = enumerate_pairs(scene)
    with pytest.raises(InfeasibleState):
        full_constraint_eval(scene, pairs)
