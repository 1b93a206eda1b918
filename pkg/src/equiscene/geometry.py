"""Rigid bodies as unions of convex hulls, pose charts, and boundary queries.

Positions are meters, world z is up by convention of the built-in scenes.
Poses use the axis-angle chart (Rodrigues) with |theta| < pi; rotation
derivatives are exact so downstream constraint Jacobians can be checked
against finite differences.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import _kernels

HULL_DEGENERACY_TOL = 1e-9  # meters; tabletop scenes are 0.01-1 m


class DegenerateHull(Exception):
    """Hull vertices are affinely dependent within tolerance."""


# Cross-product matrices of the coordinate axes (so(3) generators).
_GEN = np.zeros((3, 3, 3))
_GEN[0, 1, 2], _GEN[0, 2, 1] = -1.0, 1.0
_GEN[1, 0, 2], _GEN[1, 2, 0] = 1.0, -1.0
_GEN[2, 0, 1], _GEN[2, 1, 0] = -1.0, 1.0


def hat(v):
    """Cross-product matrix: hat(v) @ w == cross(v, w)."""
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def hat_rows(v):
    """Batched hat: (V, 3) -> (V, 3, 3)."""
    out = np.zeros((v.shape[0], 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def _rot_coeffs(s):
    """Coefficients a = sin(t)/t, b = (1-cos(t))/t^2 with derivatives in s = t^2.

    Returns (a, b, a', b', a'', b''). Series branch below t = 0.1 keeps all
    six values accurate to ~1e-13 through the removable singularity at 0.
    """
    if s < 1e-2:
        a = 1.0 - s / 6.0 + s * s / 120.0 - s**3 / 5040.0 + s**4 / 362880.0
        b = 0.5 - s / 24.0 + s * s / 720.0 - s**3 / 40320.0 + s**4 / 3628800.0
        da = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0 + s**3 / 90720.0
        db = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0 + s**3 / 907200.0
        d2a = 1.0 / 60.0 - s / 840.0 + s * s / 30240.0
        d2b = 1.0 / 360.0 - s / 6720.0 + s * s / 302400.0
        return a, b, da, db, d2a, d2b
    t = np.sqrt(s)
    sin_t, cos_t = np.sin(t), np.cos(t)
    a = sin_t / t
    b = (1.0 - cos_t) / s
    da = (t * cos_t - sin_t) / (2.0 * t**3)
    db = (t * sin_t - 2.0 * (1.0 - cos_t)) / (2.0 * t**4)
    d2a = (3.0 * sin_t - 3.0 * t * cos_t - s * sin_t) / (4.0 * t**5)
    d2b = (s * cos_t - 5.0 * t * sin_t + 8.0 * (1.0 - cos_t)) / (4.0 * t**6)
    return a, b, da, db, d2a, d2b


def rodrigues(theta):
    """Rotation matrix R = exp(hat(theta)) and its derivatives dR/dtheta_i.

    Returns (R, dR) with dR[i] = dR/dtheta_i. Total function of any finite
    theta; a series branch handles small angles.
    """
    theta = np.asarray(theta, dtype=np.float64)
    s = float(theta @ theta)
    a, b, da, db, _, _ = _rot_coeffs(s)
    K = hat(theta)
    K2 = K @ K
    R = np.eye(3) + a * K + b * K2
    dR = np.empty((3, 3, 3))
    for i in range(3):
        Ki = _GEN[i]
        KiK = Ki @ K + K @ Ki
        dR[i] = 2.0 * theta[i] * (da * K + db * K2) + a * Ki + b * KiK
    return R, dR


def rodrigues_second(theta):
    """Second derivatives d2R[i, j] = d^2 R / dtheta_i dtheta_j (3,3,3,3)."""
    theta = np.asarray(theta, dtype=np.float64)
    s = float(theta @ theta)
    a, b, da, db, d2a, d2b = _rot_coeffs(s)
    K = hat(theta)
    K2 = K @ K
    B1 = da * K + db * K2
    d2R = np.empty((3, 3, 3, 3))
    sym = [_GEN[i] @ K + K @ _GEN[i] for i in range(3)]
    for i in range(3):
        for j in range(i, 3):
            out = 4.0 * theta[i] * theta[j] * (d2a * K + d2b * K2)
            if i == j:
                out = out + 2.0 * B1
            out = out + 2.0 * theta[i] * (da * _GEN[j] + db * sym[j])
            out = out + 2.0 * theta[j] * (da * _GEN[i] + db * sym[i])
            out = out + b * (_GEN[i] @ _GEN[j] + _GEN[j] @ _GEN[i])
            d2R[i, j] = out
            d2R[j, i] = out
    return d2R


def canonicalize_axis_angle(theta):
    """Wrap theta back into the |theta| < pi chart (same rotation)."""
    theta = np.asarray(theta, dtype=np.float64)
    t = float(np.linalg.norm(theta))
    if t < np.pi:
        return theta.copy()
    # remove whole turns, then flip to the short representative
    t_red = np.fmod(t, 2.0 * np.pi)
    theta = theta * (t_red / t)
    if t_red >= np.pi:
        theta = theta * (1.0 - 2.0 * np.pi / t_red)
    return theta


@dataclass
class Pose:
    """Axis-angle rotation (radians) and translation (meters)."""

    theta: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def matrix(self):
        return rodrigues(self.theta)[0]

    def copy(self):
        return Pose(self.theta.copy(), self.t.copy())


def transform_vertex(pose, x):
    """World position of a body-frame point with Jacobians.

    Returns (X, J_theta, J_t, J_x): X = R x + t, J_theta[:, i] = dX/dtheta_i,
    J_t = I, J_x = R.
    """
    R, dR = rodrigues(pose.theta)
    x = np.asarray(x, dtype=np.float64)
    X = R @ x + pose.t
    J_theta = np.stack([dR[i] @ x for i in range(3)], axis=1)
    return X, J_theta, np.eye(3), R


@dataclass
class BodyFrameHull:
    """Convex hull as a body-frame vertex list; every vertex is extreme."""

    vertices: np.ndarray  # (V, 3)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        if self.vertices.shape[0] < 4:
            raise DegenerateHull("hull needs at least 4 vertices")

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    def copy(self):
        return BodyFrameHull(self.vertices.copy())


@dataclass
class RigidBody:
    hulls: list
    pose: Pose
    mass_density: float = 800.0  # kg/m^3
    is_static: bool = False
    name: str = ""

    def __post_init__(self):
        if not self.hulls:
            raise ValueError("body needs at least one hull")
        if self.mass_density <= 0:
            raise ValueError("mass_density must be positive")

    @property
    def num_vertices(self):
        return sum(h.num_vertices for h in self.hulls)

    def stacked_vertices(self):
        """All body-frame vertices, hulls concatenated, shape (V, 3)."""
        return np.concatenate([h.vertices for h in self.hulls], axis=0)

    def hull_slices(self):
        """Index ranges of each hull inside the stacked vertex array."""
        out, lo = [], 0
        for h in self.hulls:
            out.append(slice(lo, lo + h.num_vertices))
            lo += h.num_vertices
        return out

    def set_stacked_vertices(self, verts):
        for h, sl in zip(self.hulls, self.hull_slices()):
            h.vertices = np.array(verts[sl], dtype=np.float64)

    def world_vertices(self):
        R = self.pose.matrix()
        return self.stacked_vertices() @ R.T + self.pose.t

    def copy(self):
        return RigidBody(
            [h.copy() for h in self.hulls],
            self.pose.copy(),
            self.mass_density,
            self.is_static,
            self.name,
        )


@dataclass
class SceneModel:
    bodies: list
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64).reshape(3)
        if not any(not b.is_static for b in self.bodies):
            raise ValueError("scene needs at least one non-static body")

    def dynamic_indices(self):
        return [i for i, b in enumerate(self.bodies) if not b.is_static]

    def copy(self):
        return SceneModel([b.copy() for b in self.bodies], self.gravity.copy())


@dataclass
class TriangulatedBoundary:
    """Watertight oriented triangle surface of one hull.

    Boundary vertices are the hull vertices themselves (triangle indices point
    straight back into the hull vertex list), which is the barycentric map
    used by the correspondence terms.
    """

    vertices: np.ndarray  # (V, 3) world frame
    triangles: np.ndarray  # (T, 3) int
    hull_index: int = -1

    def triangle_vertices(self):
        return self.vertices[self.triangles]

    def triangle_normals(self):
        tv = self.triangle_vertices()
        n = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def triangle_areas(self):
        tv = self.triangle_vertices()
        n = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
        return 0.5 * np.linalg.norm(n, axis=1)

    def area(self):
        return float(np.sum(self.triangle_areas()))


def check_hull_nondegenerate(vertices, tol=HULL_DEGENERACY_TOL):
    verts = np.asarray(vertices, dtype=np.float64)
    centered = verts - verts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv.size < 3 or sv[2] < tol:
        raise DegenerateHull(f"vertices coplanar within {tol}")


def triangulate_hull_points(points, hull_index=-1):
    """Oriented convex-hull triangulation over the given points."""
    points = np.asarray(points, dtype=np.float64)
    check_hull_nondegenerate(points)
    try:
        ch = ConvexHull(points)
    except QhullError as exc:  # pragma: no cover - SVD check catches flats first
        raise DegenerateHull(str(exc)) from exc
    tris = np.array(ch.simplices, dtype=np.int64)
    centroid = points.mean(axis=0)
    tv = points[tris]
    normals = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
    flip = np.einsum("ti,ti->t", normals, tv[:, 0] - centroid) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return TriangulatedBoundary(points.copy(), tris, hull_index)


def hull_boundary(hull, pose):
    """World-space triangulated boundary of one hull under a pose."""
    R = pose.matrix()
    world = hull.vertices @ R.T + pose.t
    return triangulate_hull_points(world)


def body_boundaries(body):
    """Per-hull world boundaries of a body, hull_index recorded."""
    R = body.pose.matrix()
    out = []
    for j, h in enumerate(body.hulls):
        world = h.vertices @ R.T + body.pose.t
        tb = triangulate_hull_points(world, hull_index=j)
        out.append(tb)
    return out


def closest_point_on_mesh(p, meshes):
    """Exact closest point of p over a list of TriangulatedBoundary.

    Returns (point, distance). Handles vertex/edge/face cases exactly.
    """
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    best = (np.inf, None)
    for mesh in meshes:
        d2, cp, _, _ = _kernels.closest_points(p, mesh.triangle_vertices())
        if d2[0] < best[0]:
            best = (d2[0], cp[0])
    return best[1], float(np.sqrt(best[0]))


def closest_points_on_union_boundary(points, boundaries, tol=HULL_DEGENERACY_TOL):
    """Batched union-boundary query over a body's hull boundaries.

    points: (N, 3). Returns (cp (N, 3), hull_idx (N,), vert_ids (N, 3),
    weights (N, 3)) with each closest point expressed as a convex combination
    of one hull's triangle vertices. Candidates strictly inside a sibling
    hull are rejected; if all candidates of a point are rejected, the
    least-inside one is kept.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    h = len(boundaries)
    d2 = np.empty((h, n))
    cps = np.empty((h, n, 3))
    vids = np.empty((h, n, 3), dtype=np.int64)
    bary = np.empty((h, n, 3))
    for hi, tb in enumerate(boundaries):
        dd, cp, ti, ba = _kernels.closest_points(points, tb.triangle_vertices())
        d2[hi] = dd
        cps[hi] = cp
        vids[hi] = tb.triangles[ti]
        bary[hi] = ba
    if h == 1:
        idx = np.zeros(n, dtype=np.int64)
        return cps[0], idx, vids[0], bary[0]

    planes = []
    for tb in boundaries:
        tv = tb.triangle_vertices()
        normals = tb.triangle_normals()
        offsets = np.einsum("ti,ti->t", normals, tv[:, 0])
        planes.append((normals, offsets))

    inset = np.full((h, n), -np.inf)  # depth inside the deepest sibling
    for hi in range(h):
        for ho in range(h):
            if ho == hi:
                continue
            normals, offsets = planes[ho]
            signed = cps[hi] @ normals.T - offsets[None, :]
            inset[hi] = np.maximum(inset[hi], -np.max(signed, axis=1))
    d2_adj = np.where(inset <= tol, d2, np.inf)
    best = np.argmin(d2_adj, axis=0)
    all_rejected = ~np.isfinite(d2_adj[best, np.arange(n)])
    if np.any(all_rejected):
        best[all_rejected] = np.argmin(inset[:, all_rejected], axis=0)
    rows = np.arange(n)
    hull_idx = np.array([boundaries[b].hull_index for b in best], dtype=np.int64)
    return cps[best, rows], hull_idx, vids[best, rows], bary[best, rows]


def closest_point_on_union_boundary(p, body, boundaries=None, tol=HULL_DEGENERACY_TOL):
    """Closest point of p on the boundary of the union of a body's hulls.

    Computed per hull with interior rejection (see the batched version).
    Returns (point, hull_index, vertex_ids (3,), weights (3,)) with weights
    >= 0 summing to 1 over vertices of the winning hull.
    """
    if boundaries is None:
        boundaries = body_boundaries(body)
    cp, hull_idx, vids, w = closest_points_on_union_boundary(
        np.asarray(p, dtype=np.float64).reshape(1, 3), boundaries, tol
    )
    return cp[0], int(hull_idx[0]), vids[0], w[0]


def export_obj(boundaries, path):
    """Write a list of TriangulatedBoundary to a Wavefront OBJ file."""
    lines = []
    offset = 1
    for k, tb in enumerate(boundaries):
        lines.append(f"o surface_{k}")
        for v in tb.vertices:
            lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
        for t in tb.triangles:
            lines.append(f"f {t[0] + offset} {t[1] + offset} {t[2] + offset}")
        offset += tb.vertices.shape[0]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def import_obj(path):
    """Read an OBJ written by export_obj back into boundary objects."""
    verts, tris, objects = [], [], []

    def flush():
        if verts:
            v = np.array(verts, dtype=np.float64)
            t = np.array(tris, dtype=np.int64)
            objects.append((v, t))

    base = 0
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "o":
                if verts:
                    flush()
                    base += len(verts)
                    verts, tris = [], []
            elif parts[0] == "v":
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                tris.append([int(p.split("/")[0]) - 1 - base for p in parts[1:4]])
    flush()
    return [TriangulatedBoundary(v, t) for v, t in objects]
