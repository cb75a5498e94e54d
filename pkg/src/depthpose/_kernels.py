"""Compiled inner loops: FK, capsule rendering, probe lookups, forest traversal.

Every kernel processes one sample at a time with identical arithmetic, so a
result never depends on batch size or on which caller produced it.
"""
import math

import numpy as np
from numba import njit

BACKGROUND = 1e5


@njit(cache=True)
def _axis_rot(ax, ay, az, angle, out):
    c = math.cos(angle)
    s = math.sin(angle)
    t = 1.0 - c
    out[0, 0] = c + t * ax * ax
    out[0, 1] = t * ax * ay - s * az
    out[0, 2] = t * ax * az + s * ay
    out[1, 0] = t * ax * ay + s * az
    out[1, 1] = c + t * ay * ay
    out[1, 2] = t * ay * az - s * ax
    out[2, 0] = t * ax * az - s * ay
    out[2, 1] = t * ay * az + s * ax
    out[2, 2] = c + t * az * az


@njit(cache=True)
def fk_batch(q, parents, offsets, rot_start, rot_stop, dof_axis, want_axes):
    n = q.shape[0]
    n_points = parents.shape[0]
    n_joints = rot_start.shape[0]
    pos = np.empty((n, n_points, 3))
    rot = np.empty((n, n_joints, 3, 3))
    axes = np.zeros((n, q.shape[1], 3))
    R = np.empty((3, 3))
    L = np.empty((3, 3))
    tmp = np.empty((3, 3))
    for s in range(n):
        for j in range(n_joints):
            p = parents[j]
            if p < 0:
                for a in range(3):
                    pos[s, j, a] = q[s, a]
                    for b in range(3):
                        R[a, b] = 1.0 if a == b else 0.0
            else:
                for a in range(3):
                    acc = pos[s, p, a]
                    for b in range(3):
                        acc += rot[s, p, a, b] * offsets[j, b]
                    pos[s, j, a] = acc
                    for b in range(3):
                        R[a, b] = rot[s, p, a, b]
            for d in range(rot_start[j], rot_stop[j]):
                if want_axes:
                    for a in range(3):
                        axes[s, d, a] = (R[a, 0] * dof_axis[d, 0] + R[a, 1] * dof_axis[d, 1]
                                         + R[a, 2] * dof_axis[d, 2])
                _axis_rot(dof_axis[d, 0], dof_axis[d, 1], dof_axis[d, 2], q[s, d], L)
                for a in range(3):
                    for b in range(3):
                        tmp[a, b] = R[a, 0] * L[0, b] + R[a, 1] * L[1, b] + R[a, 2] * L[2, b]
                for a in range(3):
                    for b in range(3):
                        R[a, b] = tmp[a, b]
            for a in range(3):
                for b in range(3):
                    rot[s, j, a, b] = R[a, b]
        for k in range(n_joints, n_points):
            p = parents[k]
            for a in range(3):
                acc = pos[s, p, a]
                for b in range(3):
                    acc += rot[s, p, a, b] * offsets[k, b]
                pos[s, k, a] = acc
    return pos, rot, axes


# ---------------------------------------------------------------------------
# rendering

@njit(cache=True)
def _sphere_hit(dx, dy, dz, cx, cy, cz, r):
    # entry depth of ray t*d (origin at camera) with sphere, inf on miss
    dd = dx * dx + dy * dy + dz * dz
    b = dx * cx + dy * cy + dz * cz
    c = cx * cx + cy * cy + cz * cz - r * r
    h = b * b - dd * c
    if h < 0.0:
        return np.inf
    t = (b - math.sqrt(h)) / dd
    if t <= 0.0:
        return np.inf
    return t


@njit(cache=True)
def capsule_hit(dx, dy, dz, ax, ay, az, bx, by, bz, r):
    """Smallest positive t with t*d on the capsule surface (inf on miss)."""
    best = _sphere_hit(dx, dy, dz, ax, ay, az, r)
    t2 = _sphere_hit(dx, dy, dz, bx, by, bz, r)
    if t2 < best:
        best = t2
    ux = bx - ax
    uy = by - ay
    uz = bz - az
    uu = ux * ux + uy * uy + uz * uz
    if uu > 0.0:
        # origin minus a
        ox = -ax
        oy = -ay
        oz = -az
        dd = dx * dx + dy * dy + dz * dz
        ud = ux * dx + uy * dy + uz * dz
        uo = ux * ox + uy * oy + uz * oz
        do = dx * ox + dy * oy + dz * oz
        oo = ox * ox + oy * oy + oz * oz
        qa = uu * dd - ud * ud
        if qa > 1e-12 * uu * dd:
            qb = uu * do - uo * ud
            qc = uu * oo - uo * uo - r * r * uu
            h = qb * qb - qa * qc
            if h >= 0.0:
                t = (-qb - math.sqrt(h)) / qa
                y = uo + t * ud
                if t > 0.0 and y >= 0.0 and y <= uu and t < best:
                    best = t
    return best


@njit(cache=True)
def render_capsules(A, B, radii, fx, fy, cx, cy, width, height):
    depth = np.full((height, width), np.float32(BACKGROUND))
    zbuf = np.full((height, width), np.inf)
    for c in range(A.shape[0]):
        r = radii[c]
        # conservative screen box from the projected axis-aligned bounds
        lo = np.empty(3)
        hi = np.empty(3)
        for a in range(3):
            lo[a] = min(A[c, a], B[c, a]) - r
            hi[a] = max(A[c, a], B[c, a]) + r
        if hi[2] <= 0.0:
            continue
        if lo[2] <= 1e-6:
            u0, u1, v0, v1 = 0, width - 1, 0, height - 1
        else:
            umin = np.inf
            umax = -np.inf
            vmin = np.inf
            vmax = -np.inf
            for ix in range(2):
                x = lo[0] if ix == 0 else hi[0]
                for iy in range(2):
                    y = lo[1] if iy == 0 else hi[1]
                    for iz in range(2):
                        z = lo[2] if iz == 0 else hi[2]
                        u = fx * x / z + cx
                        v = fy * y / z + cy
                        umin = min(umin, u)
                        umax = max(umax, u)
                        vmin = min(vmin, v)
                        vmax = max(vmax, v)
            u0 = max(0, int(math.floor(umin)))
            u1 = min(width - 1, int(math.ceil(umax)))
            v0 = max(0, int(math.floor(vmin)))
            v1 = min(height - 1, int(math.ceil(vmax)))
        for v in range(v0, v1 + 1):
            dy = (v - cy) / fy
            for u in range(u0, u1 + 1):
                dx = (u - cx) / fx
                t = capsule_hit(dx, dy, 1.0, A[c, 0], A[c, 1], A[c, 2],
                                B[c, 0], B[c, 1], B[c, 2], r)
                if t < zbuf[v, u]:
                    zbuf[v, u] = t
                    depth[v, u] = np.float32(t)
    return depth


# ---------------------------------------------------------------------------
# probes

@njit(cache=True)
def probe_depth(buf, off, x0, y0, w, h, width, height, fx, fy, cx, cy, X, Y, Z):
    """Depth under the nearest pixel of a world point; background if unseen."""
    if Z <= 0.0:
        return BACKGROUND
    u = fx * X / Z + cx
    v = fy * Y / Z + cy
    if not (u > -0.5 and u < width - 0.5 and v > -0.5 and v < height - 0.5):
        return BACKGROUND
    ui = int(math.floor(u + 0.5))
    vi = int(math.floor(v + 0.5))
    ui -= x0
    vi -= y0
    if ui < 0 or vi < 0 or ui >= w or vi >= h:
        return BACKGROUND
    return np.float64(buf[off + vi * w + ui])


@njit(cache=True)
def _feature(d, ji, jj, dp1, dp2, pos, rot, s, buf, off, x0, y0, w, h, cam, width, height):
    i = ji[d]
    X1 = pos[s, i, 0] + rot[s, i, 0, 0] * dp1[d, 0] + rot[s, i, 0, 1] * dp1[d, 1] + rot[s, i, 0, 2] * dp1[d, 2]
    Y1 = pos[s, i, 1] + rot[s, i, 1, 0] * dp1[d, 0] + rot[s, i, 1, 1] * dp1[d, 1] + rot[s, i, 1, 2] * dp1[d, 2]
    Z1 = pos[s, i, 2] + rot[s, i, 2, 0] * dp1[d, 0] + rot[s, i, 2, 1] * dp1[d, 1] + rot[s, i, 2, 2] * dp1[d, 2]
    j = jj[d]
    X2 = pos[s, j, 0] + rot[s, j, 0, 0] * dp2[d, 0] + rot[s, j, 0, 1] * dp2[d, 1] + rot[s, j, 0, 2] * dp2[d, 2]
    Y2 = pos[s, j, 1] + rot[s, j, 1, 0] * dp2[d, 0] + rot[s, j, 1, 1] * dp2[d, 1] + rot[s, j, 1, 2] * dp2[d, 2]
    Z2 = pos[s, j, 2] + rot[s, j, 2, 0] * dp2[d, 0] + rot[s, j, 2, 1] * dp2[d, 1] + rot[s, j, 2, 2] * dp2[d, 2]
    d1 = probe_depth(buf, off, x0, y0, w, h, width, height, cam[0], cam[1], cam[2], cam[3], X1, Y1, Z1)
    d2 = probe_depth(buf, off, x0, y0, w, h, width, height, cam[0], cam[1], cam[2], cam[3], X2, Y2, Z2)
    return d1 - d2


@njit(cache=True)
def feature_columns(cols, ji, jj, dp1, dp2, pos, rot, image_of, buf, offs, x0s, y0s, ws, hs,
                    cam, width, height):
    """Feature values for every sample (rows) and descriptor index in ``cols``."""
    n = pos.shape[0]
    out = np.empty((n, cols.shape[0]))
    for s in range(n):
        m = image_of[s]
        for c in range(cols.shape[0]):
            out[s, c] = _feature(cols[c], ji, jj, dp1, dp2, pos, rot, s, buf, offs[m], x0s[m],
                                 y0s[m], ws[m], hs[m], cam, width, height)
    return out


@njit(cache=True)
def forest_predict(roots, feature, threshold, right, value, ji, jj, dp1, dp2, pos, rot,
                   image_of, buf, offs, x0s, y0s, ws, hs, cam, width, height):
    """Mean leaf vector over trees per sample, plus pixel reads per sample.

    Nodes are preorder: the left child of an internal node is the next node.
    Leaves have ``feature == -1`` and their row of ``value`` holds the output.
    """
    n = pos.shape[0]
    k = value.shape[1]
    out = np.zeros((n, k))
    reads = np.zeros(n, dtype=np.int64)
    for s in range(n):
        m = image_of[s]
        for t in range(roots.shape[0]):
            node = roots[t]
            while feature[node] >= 0:
                f = _feature(feature[node], ji, jj, dp1, dp2, pos, rot, s, buf, offs[m], x0s[m],
                             y0s[m], ws[m], hs[m], cam, width, height)
                reads[s] += 2
                if f < threshold[node]:
                    node = node + 1
                else:
                    node = right[node]
            for a in range(k):
                out[s, a] += value[node, a]
        for a in range(k):
            out[s, a] /= roots.shape[0]
    return out, reads
