"""Pure-numpy implementations of the hot kernels.

Reference semantics for the compiled backend; also the import-time fallback.
"""

import numpy as np

_CHUNK_ELEMS = 2_000_000


def _closest_point_block(p, a, b, c):
    """Closest points of a block of query points on a set of triangles.

    p: (N, 3), a/b/c: (T, 3). Returns dist2 (N, T), cp (N, T, 3),
    bary (N, T, 3) using the standard region decomposition of the triangle.
    """
    ab = b - a
    ac = c - a
    ap = p[:, None, :] - a[None, :, :]
    d1 = np.einsum("tk,ntk->nt", ab, ap)
    d2 = np.einsum("tk,ntk->nt", ac, ap)

    bp = p[:, None, :] - b[None, :, :]
    d3 = np.einsum("tk,ntk->nt", ab, bp)
    d4 = np.einsum("tk,ntk->nt", ac, bp)

    cp_ = p[:, None, :] - c[None, :, :]
    d5 = np.einsum("tk,ntk->nt", ab, cp_)
    d6 = np.einsum("tk,ntk->nt", ac, cp_)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom

    n, t = d1.shape
    bary = np.empty((n, t, 3))
    # interior (fallback) region
    bary[..., 0] = 1.0 - v_in - w_in
    bary[..., 1] = v_in
    bary[..., 2] = w_in

    def put(mask, b0, b1, b2):
        bary[..., 0] = np.where(mask, b0, bary[..., 0])
        bary[..., 1] = np.where(mask, b1, bary[..., 1])
        bary[..., 2] = np.where(mask, b2, bary[..., 2])

    done = np.zeros_like(d1, dtype=bool)

    m = (d1 <= 0) & (d2 <= 0)
    put(m, 1.0, 0.0, 0.0)
    done |= m

    m = (d3 >= 0) & (d4 <= d3) & ~done
    put(m, 0.0, 1.0, 0.0)
    done |= m

    m = (d6 >= 0) & (d5 <= d6) & ~done
    put(m, 0.0, 0.0, 1.0)
    done |= m

    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0) & ~done
    put(m, 1.0 - v_ab, v_ab, 0.0)
    done |= m

    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0) & ~done
    put(m, 1.0 - w_ac, 0.0, w_ac)
    done |= m

    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0) & ~done
    put(m, 0.0, 1.0 - w_bc, w_bc)

    cp = (
        bary[..., 0, None] * a[None, :, :]
        + bary[..., 1, None] * b[None, :, :]
        + bary[..., 2, None] * c[None, :, :]
    )
    diff = p[:, None, :] - cp
    dist2 = np.einsum("ntk,ntk->nt", diff, diff)
    return dist2, cp, bary


def closest_points(points, tris):
    """Exact closest points of query points on a triangle soup.

    points: (N, 3); tris: (T, 3, 3) triangle vertex positions.
    Returns (dist2 (N,), cp (N, 3), tri_idx (N,), bary (N, 3)).
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    tris = np.ascontiguousarray(tris, dtype=np.float64)
    n = points.shape[0]
    t = tris.shape[0]
    out_d2 = np.empty(n)
    out_cp = np.empty((n, 3))
    out_ti = np.empty(n, dtype=np.int64)
    out_ba = np.empty((n, 3))
    a, b, c = tris[:, 0, :], tris[:, 1, :], tris[:, 2, :]
    block = max(1, _CHUNK_ELEMS // max(t, 1))
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        d2, cp, bary = _closest_point_block(points[lo:hi], a, b, c)
        ti = np.argmin(d2, axis=1)
        rows = np.arange(hi - lo)
        out_d2[lo:hi] = d2[rows, ti]
        out_cp[lo:hi] = cp[rows, ti]
        out_ti[lo:hi] = ti
        out_ba[lo:hi] = bary[rows, ti]
    return out_d2, out_cp, out_ti, out_ba


def barrier_nd(XA, XB, n, d):
    """Barrier value, gradient and Hessian in the plane variables (n, d).

    The barrier is -log(1 - |n|) - sum log(<n,XA>+d) - sum log(-<n,XB>-d).
    Returns (inf, zeros, zeros) when any log argument is non-positive.
    """
    n = np.asarray(n, dtype=np.float64)
    sA = XA @ n + d
    sB = -(XB @ n) - d
    r = float(np.linalg.norm(n))
    s0 = 1.0 - r
    if s0 <= 0.0 or np.any(sA <= 0.0) or np.any(sB <= 0.0):
        return np.inf, np.zeros(4), np.zeros((4, 4))

    value = -np.log(s0) - np.sum(np.log(sA)) - np.sum(np.log(sB))

    u = n / max(r, 1e-300)
    inv_a = 1.0 / sA
    inv_b = 1.0 / sB
    g = np.empty(4)
    g[:3] = u / s0 - XA.T @ inv_a + XB.T @ inv_b
    g[3] = -np.sum(inv_a) + np.sum(inv_b)

    H = np.empty((4, 4))
    uu = np.outer(u, u)
    H_nn = uu / s0**2 + (np.eye(3) - uu) / (max(r, 1e-300) * s0)
    H_nn += np.einsum("ki,kj,k->ij", XA, XA, inv_a**2)
    H_nn += np.einsum("ki,kj,k->ij", XB, XB, inv_b**2)
    H_nd = XA.T @ inv_a**2 + XB.T @ inv_b**2
    H[:3, :3] = H_nn
    H[:3, 3] = H_nd
    H[3, :3] = H_nd
    H[3, 3] = np.sum(inv_a**2) + np.sum(inv_b**2)
    return value, g, H


def plane_newton(XA, XB, n0, d0, tol, max_iter):
    """Minimize the plane barrier over (n, d) by damped Newton steps.

    Steps respect a fraction-to-boundary rule (every log argument keeps at
    least 1% of its current value) followed by Armijo backtracking; near the
    floating-point floor a gradient-norm contraction is accepted instead.
    Returns (n, d, gnorm, iters, ok) where ok means the gradient norm reached
    tol or the cancellation-noise floor of this pair's geometry.
    Requires a strictly feasible start.
    """
    v = np.empty(4)
    v[:3] = n0
    v[3] = d0
    value, g, H = barrier_nd(XA, XB, v[:3], v[3])
    if not np.isfinite(value):
        return v[:3], v[3], np.inf, 0, False
    it = 0
    gnorm = float(np.linalg.norm(g))
    best_gnorm = gnorm
    stale = 0
    while gnorm > tol and it < max_iter and stale < 8:
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = -np.linalg.solve(H + 1e-12 * np.eye(4), g)
        dn = step[:3]
        dd = step[3]

        alpha = 1.0
        dsA = XA @ dn + dd
        dsB = -(XB @ dn) - dd
        sA = XA @ v[:3] + v[3]
        sB = -(XB @ v[:3]) - v[3]
        neg = dsA < 0
        if np.any(neg):
            alpha = min(alpha, 0.99 * np.min(sA[neg] / -dsA[neg]))
        neg = dsB < 0
        if np.any(neg):
            alpha = min(alpha, 0.99 * np.min(sB[neg] / -dsB[neg]))
        dn_norm = float(np.linalg.norm(dn))
        if dn_norm > 0:
            alpha = min(alpha, 0.99 * (1.0 - float(np.linalg.norm(v[:3]))) / dn_norm)

        slope = float(g @ step)
        accepted = False
        while alpha > 1e-14:
            v_new = v + alpha * step
            val_new, g_new, H_new = barrier_nd(XA, XB, v_new[:3], v_new[3])
            if np.isfinite(val_new):
                gnorm_new = float(np.linalg.norm(g_new))
                # Armijo, or, at the roundoff floor of the value, a strict
                # gradient-norm contraction with a no-worse value guard
                if val_new <= value + 1e-4 * alpha * slope or (
                    gnorm_new < 0.5 * gnorm and val_new <= value + 1e-9 * max(1.0, abs(value))
                ):
                    v = v_new
                    value, g, H = val_new, g_new, H_new
                    gnorm = gnorm_new
                    accepted = True
                    break
            alpha *= 0.5
        it += 1
        if not accepted:
            break
        if gnorm < 0.9 * best_gnorm:
            best_gnorm = gnorm
            stale = 0
        else:
            stale += 1
    # cancellation-noise floor of the gradient for this geometry
    sA = XA @ v[:3] + v[3]
    sB = -(XB @ v[:3]) - v[3]
    gscale = float(
        np.sum((np.linalg.norm(XA, axis=1) + 1.0) / np.abs(sA))
        + np.sum((np.linalg.norm(XB, axis=1) + 1.0) / np.abs(sB))
        + 1.0 / max(1.0 - np.linalg.norm(v[:3]), 1e-300)
    )
    floor = 64.0 * np.finfo(np.float64).eps * gscale
    return v[:3].copy(), float(v[3]), gnorm, it, gnorm <= max(tol, floor)
