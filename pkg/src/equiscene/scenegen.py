"""Synthetic ground-truth scenes, observations, and initialization defects.

Stands in for a real capture pipeline with a verifiable oracle: built-in
scenes are equilibrated before export, observations are sampled from the
true surfaces with controllable noise and visibility, and the perturbation
utilities inject exactly the kinds of defects (floating bodies,
interpenetrations) the estimator is meant to repair.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .contact import enumerate_pairs, separation_margin
from .geometry import (
    BodyFrameHull,
    DegenerateHull,
    Pose,
    RigidBody,
    SceneModel,
    body_boundaries,
    triangulate_hull_points,
)
from .objective import Observation
from .physics import PhysicsParams
from .solver import equilibrate_poses


class UnknownScene(Exception):
    pass


class ShrinkFailed(Exception):
    """Pathological overlap: shrink factor would fall below 0.5."""


@dataclass
class ObservationConfig:
    view: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    points_per_body: int = 150
    noise_sigma: float = 0.002  # meters
    prior_decimation: float = 0.7  # fraction of hull vertices kept
    prior_jitter: float = 0.002  # meters

    def __post_init__(self):
        self.view = np.asarray(self.view, dtype=np.float64).reshape(3)
        if self.noise_sigma < 0 or self.points_per_body < 0:
            raise ValueError("counts and sigmas must be nonnegative")


@dataclass
class PerturbationConfig:
    rot_sigma: float = 0.0  # radians
    trans_sigma: float = 0.0  # meters
    vertex_sigma: float = 0.0  # meters
    levitate: float = 0.0  # +z offset applied to every dynamic body
    penetrate: float = 0.0  # -z offset applied to every dynamic body


@dataclass
class GroundTruthScene:
    name: str
    scene: SceneModel

    def reference_meshes(self, body_index):
        return body_boundaries(self.scene.bodies[body_index])


def _box(ext, center=(0.0, 0.0, 0.0)):
    e = np.asarray(ext, dtype=np.float64) / 2.0
    c = np.asarray(center, dtype=np.float64)
    corners = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float
    )
    return corners * e + c


def _body(hull_boxes, t, density=800.0, theta=(0.0, 0.0, 0.0), name=""):
    """Body from (ext, center) hull specs, recentered on its vertex centroid."""
    verts = [np.asarray(_box(ext, center)) for ext, center in hull_boxes]
    centroid = np.concatenate(verts, axis=0).mean(axis=0)
    hulls = [BodyFrameHull(v - centroid) for v in verts]
    return RigidBody(hulls, Pose(np.asarray(theta, dtype=float), np.asarray(t, dtype=float) + centroid), density, False, name)


def _table(half=0.6):
    return RigidBody(
        [BodyFrameHull(_box((2 * half, 2 * half, 0.1), (0, 0, -0.05)))],
        Pose(np.zeros(3), np.zeros(3)),
        is_static=True,
        name="table",
    )


_GAP = 2e-4  # authoring clearance; equilibration settles the true gap


def _scene_box_on_table():
    cube = _body([((0.1, 0.1, 0.1), (0, 0, 0))], t=(0, 0, 0.05 + _GAP), name="box")
    return SceneModel([_table(), cube])


def _scene_stack3():
    b1 = _body([((0.12, 0.12, 0.08), (0, 0, 0))], t=(0, 0, 0.04 + _GAP), name="base")
    b2 = _body([((0.09, 0.09, 0.07), (0, 0, 0))], t=(0, 0, 0.08 + 0.035 + 3 * _GAP), name="mid")
    b3 = _body([((0.06, 0.06, 0.06), (0, 0, 0))], t=(0, 0, 0.15 + 0.03 + 6 * _GAP), name="top")
    return SceneModel([_table(), b1, b2, b3])


def _scene_lean():
    # plank leaning on a static block's top edge, its lower edge stopped by a
    # static lip on the table: frictionless-stable three-contact lean
    length, thick, phi, gap = 0.3, 0.02, 0.5, 5e-4
    c, s = math.cos(phi), math.sin(phi)
    lip_inner = 0.094
    # lowest corner (+x, -z in body frame) rests just above the table; the
    # lip-side corner (-x, -z) sits just right of the lip's inner face
    low_rot_z = -s * thick / 2 - c * length / 2
    lip_rot_x = -c * thick / 2 - s * length / 2
    center = np.array([lip_inner + gap - lip_rot_x, 0.0, gap - low_rot_z])
    block_top = 0.12
    # where the plank's +x face crosses the block-top height
    zb = (block_top - (center[2] - s * thick / 2)) / c
    face_x = center[0] + c * thick / 2 + s * zb
    block_inner = face_x + gap
    lip = RigidBody(
        [BodyFrameHull(_box((0.02, 0.2, 0.02), (lip_inner - 0.01, 0.0, 0.01)))],
        Pose(np.zeros(3), np.zeros(3)),
        is_static=True,
        name="lip",
    )
    block = RigidBody(
        [BodyFrameHull(_box((0.1, 0.2, block_top), (block_inner + 0.05, 0.0, block_top / 2)))],
        Pose(np.zeros(3), np.zeros(3)),
        is_static=True,
        name="block",
    )
    plank = _body(
        [((thick, 0.12, length), (0, 0, 0))],
        t=tuple(center),
        theta=(0.0, phi, 0.0),
        name="plank",
    )
    return SceneModel([_table(), lip, block, plank])


def _scene_chair_box():
    legs = [
        ((0.04, 0.04, 0.18), (-0.11, -0.11, 0.09)),
        ((0.04, 0.04, 0.18), (0.11, -0.11, 0.09)),
        ((0.04, 0.04, 0.18), (0.0, 0.11, 0.09)),
    ]
    seat = ((0.3, 0.3, 0.04), (0.0, 0.0, 0.2))
    chair = _body([seat] + legs, t=(0, 0, _GAP), name="chair")
    box = _body([((0.12, 0.12, 0.12), (0, 0, 0))], t=(0.02, -0.01, 0.22 + 0.06 + 3 * _GAP), name="box")
    return SceneModel([_table(), chair, box])


def _scene_clutter5():
    rack = _body(
        [
            ((0.2, 0.2, 0.03), (0.0, 0.0, 0.015)),
            ((0.03, 0.03, 0.1), (-0.08, -0.08, 0.08)),
            ((0.03, 0.03, 0.1), (0.08, -0.08, 0.08)),
            ((0.03, 0.03, 0.1), (-0.08, 0.08, 0.08)),
            ((0.03, 0.03, 0.1), (0.08, 0.08, 0.08)),
        ],
        t=(-0.3, -0.25, _GAP),
        name="rack",
    )
    steps = _body(
        [
            ((0.18, 0.1, 0.04), (0.0, 0.0, 0.02)),
            ((0.14, 0.1, 0.04), (0.02, 0.0, 0.06)),
            ((0.10, 0.1, 0.04), (0.04, 0.0, 0.10)),
            ((0.06, 0.1, 0.04), (0.06, 0.0, 0.14)),
            ((0.04, 0.1, 0.02), (0.07, 0.0, 0.17)),
        ],
        t=(0.28, -0.22, _GAP),
        name="steps",
    )
    bench = _body(
        [
            ((0.22, 0.1, 0.03), (0.0, 0.0, 0.095)),
            ((0.03, 0.1, 0.08), (-0.09, 0.0, 0.04)),
            ((0.03, 0.1, 0.08), (0.09, 0.0, 0.04)),
            ((0.16, 0.08, 0.02), (0.0, 0.0, 0.12)),
        ],
        t=(-0.28, 0.3, _GAP),
        name="bench",
    )
    ell = _body(
        [
            ((0.2, 0.08, 0.06), (0.0, 0.0, 0.03)),
            ((0.06, 0.08, 0.14), (-0.07, 0.0, 0.13)),
            ((0.05, 0.06, 0.05), (0.05, 0.0, 0.085)),
            ((0.04, 0.05, 0.04), (-0.07, 0.0, 0.22)),
        ],
        t=(0.3, 0.28, _GAP),
        name="ell",
    )
    tower = _body(
        [
            ((0.1, 0.1, 0.05), (0.0, 0.0, 0.025)),
            ((0.08, 0.08, 0.05), (0.005, -0.005, 0.075)),
            ((0.06, 0.06, 0.05), (-0.004, 0.004, 0.125)),
            ((0.04, 0.04, 0.04), (0.003, 0.003, 0.17)),
        ],
        t=(0.0, 0.02, _GAP),
        name="tower",
    )
    return SceneModel([_table(0.8), rack, steps, bench, ell, tower])


_BUILDERS = {
    "box_on_table": _scene_box_on_table,
    "stack3": _scene_stack3,
    "lean": _scene_lean,
    "chair_box": _scene_chair_box,
    "clutter5": _scene_clutter5,
}


def equilibrium_residual(scene, params=None, max_outer=12, eps_c=1e-5):
    """Best achievable |C_eq|_inf at the given shapes via a physics-only ALM.

    Solves for poses + tangential forces from a zero-friction start (shapes
    frozen). Multi-body scenes need nonzero static friction even at rest:
    the globally supported barrier makes every distant pair push, and those
    lateral micro-forces have no frictionless counterweight.
    Returns (residual, forces, polished scene copy).
    """
    from .solver import ALMConfig, alm_optimize

    cfg = ALMConfig(optimize_shapes=False, max_outer=max_outer, eps_c=eps_c)
    polished, forces, report = alm_optimize(scene, None, cfg, params)
    return max(report["C_eq_inf"], report["C_ineq_inf"]), forces, polished


def builtin_scene(name, params=None, equilibrate=True):
    """Deterministic ground-truth scene, equilibrated before export.

    Two stages: a frictionless pose-only settle, then a frictional polish
    (poses + tangential forces, shapes frozen) that absorbs the lateral
    micro-forces of the globally supported barrier.
    """
    if name not in _BUILDERS:
        raise UnknownScene(f"unknown scene {name!r}; choose from {sorted(_BUILDERS)}")
    scene = _BUILDERS[name]()
    if equilibrate:
        params = params or PhysicsParams()
        scene = equilibrate_poses(scene, params, max_iters=80)
        _, _, scene = equilibrium_residual(scene, params)
    return GroundTruthScene(name, scene)


def _hull_planes(tb):
    tv = tb.triangle_vertices()
    normals = tb.triangle_normals()
    offsets = np.einsum("ti,ti->t", normals, tv[:, 0])
    return normals, offsets


def _strictly_inside_any_sibling(points, boundaries, own_index, tol=1e-9):
    inside = np.zeros(points.shape[0], dtype=bool)
    for tb in boundaries:
        if tb.hull_index == own_index:
            continue
        normals, offsets = _hull_planes(tb)
        signed = points @ normals.T - offsets[None, :]
        inside |= np.max(signed, axis=1) < -tol
    return inside


def synthesize_observation(scene, cfg=None, seed=0):
    """Sample a half-visible noisy point cloud and a degraded prior per body.

    Surface points are drawn area-uniformly from union-boundary triangles
    whose outward normal faces the camera (normal . -view > 0), then
    Gaussian-perturbed. The prior mesh is the true boundary with a fraction
    of each hull's vertices kept and jittered.
    """
    cfg = cfg or ObservationConfig()
    rng = np.random.default_rng(seed)
    view = cfg.view / np.linalg.norm(cfg.view)
    clouds, priors = {}, {}
    for b in scene.dynamic_indices():
        body = scene.bodies[b]
        boundaries = body_boundaries(body)

        tris, areas, normals = [], [], []
        for tb in boundaries:
            tv = tb.triangle_vertices()
            a = tb.triangle_areas()
            n = tb.triangle_normals()
            centroid_ok = ~_strictly_inside_any_sibling(tv.mean(axis=1), boundaries, tb.hull_index)
            visible = (n @ -view) > 0.0
            keep = centroid_ok & visible
            tris.append(tv[keep])
            areas.append(a[keep])
            normals.append(n[keep])
        tris = np.concatenate(tris, axis=0) if tris else np.zeros((0, 3, 3))
        areas = np.concatenate(areas) if areas else np.zeros(0)

        points = np.zeros((0, 3))
        if cfg.points_per_body > 0 and tris.shape[0] > 0:
            collected = []
            remaining = cfg.points_per_body
            prob = areas / areas.sum()
            for _ in range(20):
                counts = rng.multinomial(remaining * 2, prob)
                samples = []
                for t_idx in np.nonzero(counts)[0]:
                    a, bb, c = tris[t_idx]
                    uv = rng.random(size=(counts[t_idx], 2))
                    flip = uv.sum(axis=1) > 1.0
                    uv[flip] = 1.0 - uv[flip]
                    samples.append(a + uv[:, :1] * (bb - a) + uv[:, 1:] * (c - a))
                samples = np.concatenate(samples, axis=0)
                inside = _strictly_inside_any_sibling(samples, boundaries, -1)
                samples = samples[~inside]
                collected.append(samples[:remaining])
                remaining -= min(remaining, samples.shape[0])
                if remaining == 0:
                    break
            points = np.concatenate(collected, axis=0)
            if cfg.noise_sigma > 0:
                points = points + rng.normal(size=points.shape) * cfg.noise_sigma
        clouds[b] = points

        prior = []
        for j, hull in enumerate(body.hulls):
            world = hull.vertices @ body.pose.matrix().T + body.pose.t
            keep = max(4, math.ceil(cfg.prior_decimation * world.shape[0]))
            idx = rng.choice(world.shape[0], size=min(keep, world.shape[0]), replace=False)
            verts = world[np.sort(idx)]
            if cfg.prior_jitter > 0:
                verts = verts + rng.normal(size=verts.shape) * cfg.prior_jitter
            try:
                prior.append(triangulate_hull_points(verts, hull_index=j))
            except DegenerateHull:
                prior.append(triangulate_hull_points(world, hull_index=j))
        priors[b] = prior
    return Observation(clouds, priors)


def perturb_initial(scene, cfg=None, seed=0):
    """Noisy copy of the scene: pose/vertex noise plus optional z defects.

    The result may interpenetrate (that is the point); resolve_penetration
    restores strict feasibility without touching poses.
    """
    cfg = cfg or PerturbationConfig()
    rng = np.random.default_rng(seed)
    out = scene.copy()
    for b in out.dynamic_indices():
        body = out.bodies[b]
        if cfg.rot_sigma > 0:
            body.pose.theta = body.pose.theta + rng.normal(size=3) * cfg.rot_sigma
        if cfg.trans_sigma > 0:
            body.pose.t = body.pose.t + rng.normal(size=3) * cfg.trans_sigma
        if cfg.vertex_sigma > 0:
            for hull in body.hulls:
                hull.vertices = hull.vertices + rng.normal(size=hull.vertices.shape) * cfg.vertex_sigma
        body.pose.t = body.pose.t + np.array([0.0, 0.0, cfg.levitate - cfg.penetrate])
    return out


def _shrink_body(body, factor):
    verts = body.stacked_vertices()
    centroid = verts.mean(axis=0)
    body.set_stacked_vertices(centroid + factor * (verts - centroid))


def resolve_penetration(scene, margin=1e-5, aggregation=True, rel_tol=1e-4):
    """Uniform per-body vertex shrink until every pair separates strictly.

    For each infeasible pair the minimal common shrink factor (per-side, both
    dynamic sides together; a static side is never scaled) is found by
    bisection over [0.5, 1]. Poses are never moved. Raises ShrinkFailed when
    even factor 0.5 cannot separate a pair.
    """
    out = scene.copy()
    pairs = enumerate_pairs(out, aggregation)

    def pair_margin(pair, factor=None):
        chains = []
        for side in (pair.a, pair.b):
            body = out.bodies[side.body]
            verts = body.stacked_vertices()[side.vert_ids]
            if factor is not None and side.dynamic:
                centroid = body.stacked_vertices().mean(axis=0)
                verts = centroid + factor * (verts - centroid)
            R = body.pose.matrix()
            chains.append(verts @ R.T + body.pose.t)
        return separation_margin(chains[0], chains[1])

    for pair in pairs:
        if pair_margin(pair) >= margin:
            continue
        if not (pair.a.dynamic or pair.b.dynamic):
            continue
        lo, hi = 0.5, 1.0
        if pair_margin(pair, lo) < margin:
            raise ShrinkFailed(
                f"pair ({pair.a.body}, {pair.b.body}) still penetrates at factor 0.5"
            )
        while hi - lo > rel_tol:
            mid = 0.5 * (lo + hi)
            if pair_margin(pair, mid) >= margin:
                lo = mid
            else:
                hi = mid
        for side in (pair.a, pair.b):
            if side.dynamic:
                _shrink_body(out.bodies[side.body], lo)

    for pair in pairs:
        if pair_margin(pair) < margin * 0.5:
            raise ShrinkFailed("penetration remained after per-pair shrink pass")
    return out
