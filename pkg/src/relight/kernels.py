"""Numba-compiled ray traversal kernels.

Primitives are packed into flat float64 rows (see geometry.pack_primitives):
    sphere   kind 0: cx cy cz r
    triangle kind 1: v0 v1 v2 (9 floats)
    cylinder kind 2: p0 p1 r    (open side wall, no caps)

BVH node layout: inner nodes store the left child index in ``node_left``
(right child is left+1) and count 0; leaves store a start offset into the
``order`` permutation and a positive count.

Equal-t ties resolve to the lowest (instance_id, local_prim_index) pair so
renders are deterministic and BVH traversal matches brute force exactly.
"""

from __future__ import annotations

import numba as nb
import numpy as np

STACK_DEPTH = 64
MAX_SKIP_STEPS = 256


@nb.njit(cache=True, inline="always")
def _isect_sphere(data, ox, oy, oz, dx, dy, dz, tmin, tmax):
    cx = data[0] - ox
    cy = data[1] - oy
    cz = data[2] - oz
    r = data[3]
    b = cx * dx + cy * dy + cz * dz
    c = cx * cx + cy * cy + cz * cz - r * r
    disc = b * b - c
    if disc <= 0.0:
        return -1.0
    s = np.sqrt(disc)
    t = b - s
    if t <= tmin:
        t = b + s
    if tmin < t < tmax:
        return t
    return -1.0


@nb.njit(cache=True, inline="always")
def _isect_triangle(data, ox, oy, oz, dx, dy, dz, tmin, tmax):
    e1x = data[3] - data[0]
    e1y = data[4] - data[1]
    e1z = data[5] - data[2]
    e2x = data[6] - data[0]
    e2y = data[7] - data[1]
    e2z = data[8] - data[2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-14:
        return -1.0
    inv = 1.0 / det
    tx = ox - data[0]
    ty = oy - data[1]
    tz = oz - data[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if tmin < t < tmax:
        return t
    return -1.0


@nb.njit(cache=True, inline="always")
def _isect_cylinder(data, ox, oy, oz, dx, dy, dz, tmin, tmax):
    # axis p0 -> p1, radius r; hits only on the side wall within the segment
    wx = data[3] - data[0]
    wy = data[4] - data[1]
    wz = data[5] - data[2]
    length = np.sqrt(wx * wx + wy * wy + wz * wz)
    if length < 1e-300:
        return -1.0
    wx /= length
    wy /= length
    wz /= length
    r = data[6]
    ex = ox - data[0]
    ey = oy - data[1]
    ez = oz - data[2]
    dw = dx * wx + dy * wy + dz * wz
    ew = ex * wx + ey * wy + ez * wz
    a = 1.0 - dw * dw
    b = (ex * dx + ey * dy + ez * dz) - ew * dw
    c = (ex * ex + ey * ey + ez * ez) - ew * ew - r * r
    if a < 1e-14:
        return -1.0
    disc = b * b - a * c
    if disc <= 0.0:
        return -1.0
    s = np.sqrt(disc)
    t = (-b - s) / a
    for _ in range(2):
        if tmin < t < tmax:
            axial = ew + t * dw
            if 0.0 <= axial <= length:
                return t
        t = (-b + s) / a
    return -1.0


@nb.njit(cache=True, inline="always")
def _isect_prim(kind, data, ox, oy, oz, dx, dy, dz, tmin, tmax):
    if kind == 0:
        return _isect_sphere(data, ox, oy, oz, dx, dy, dz, tmin, tmax)
    elif kind == 1:
        return _isect_triangle(data, ox, oy, oz, dx, dy, dz, tmin, tmax)
    return _isect_cylinder(data, ox, oy, oz, dx, dy, dz, tmin, tmax)


@nb.njit(cache=True, inline="always")
def _slab(mn, mx, ox, oy, oz, ix, iy, iz, tmax):
    t1 = (mn[0] - ox) * ix
    t2 = (mx[0] - ox) * ix
    tn = min(t1, t2)
    tf = max(t1, t2)
    t1 = (mn[1] - oy) * iy
    t2 = (mx[1] - oy) * iy
    tn = max(tn, min(t1, t2))
    tf = min(tf, max(t1, t2))
    t1 = (mn[2] - oz) * iz
    t2 = (mx[2] - oz) * iz
    tn = max(tn, min(t1, t2))
    tf = min(tf, max(t1, t2))
    if tf >= max(tn, 0.0) and tn < tmax:
        return tn
    return np.inf


@nb.njit(cache=True, inline="always")
def _safe_inv(d):
    if abs(d) < 1e-300:
        return 1e300 if d >= 0.0 else -1e300
    return 1.0 / d


@nb.njit(cache=True, inline="always")
def _traverse_closest(node_min, node_max, node_left, node_right, node_count, order,
                      prim_kind, prim_data, prim_inst, prim_local,
                      ox, oy, oz, dx, dy, dz, tmin, tmax):
    """Nearest hit; returns (t, prim_index) with prim_index -1 on miss."""
    ix = _safe_inv(dx)
    iy = _safe_inv(dy)
    iz = _safe_inv(dz)
    ray_tmax = tmax
    best_t = tmax
    best_p = -1
    best_inst = 0x7FFFFFFF
    best_local = 0x7FFFFFFF
    stack = np.empty(STACK_DEPTH, dtype=np.int32)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if _slab(node_min[node], node_max[node], ox, oy, oz, ix, iy, iz, best_t) == np.inf:
            continue
        count = node_count[node]
        if count > 0:
            start = node_left[node]
            for k in range(start, start + count):
                p = order[k]
                t = _isect_prim(prim_kind[p], prim_data[p], ox, oy, oz, dx, dy, dz, tmin, ray_tmax)
                if t > 0.0 and t <= best_t:
                    better = t < best_t
                    if not better and t == best_t:
                        inst = prim_inst[p]
                        if inst < best_inst or (inst == best_inst and prim_local[p] < best_local):
                            better = True
                    if better:
                        best_t = t
                        best_p = p
                        best_inst = prim_inst[p]
                        best_local = prim_local[p]
        else:
            left = node_left[node]
            right = node_right[node]
            tl = _slab(node_min[left], node_max[left], ox, oy, oz, ix, iy, iz, best_t)
            tr = _slab(node_min[right], node_max[right], ox, oy, oz, ix, iy, iz, best_t)
            if tl <= tr:
                if tr != np.inf:
                    stack[top] = right
                    top += 1
                if tl != np.inf:
                    stack[top] = left
                    top += 1
            else:
                if tl != np.inf:
                    stack[top] = left
                    top += 1
                stack[top] = right
                top += 1
    if best_p < 0:
        return -1.0, -1
    return best_t, best_p


@nb.njit(cache=True, inline="always")
def _traverse_any(node_min, node_max, node_left, node_right, node_count, order,
                  prim_kind, prim_data, prim_inst, prim_local,
                  ox, oy, oz, dx, dy, dz, tmin, tmax):
    ix = _safe_inv(dx)
    iy = _safe_inv(dy)
    iz = _safe_inv(dz)
    stack = np.empty(STACK_DEPTH, dtype=np.int32)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if _slab(node_min[node], node_max[node], ox, oy, oz, ix, iy, iz, tmax) == np.inf:
            continue
        count = node_count[node]
        if count > 0:
            start = node_left[node]
            for k in range(start, start + count):
                p = order[k]
                t = _isect_prim(prim_kind[p], prim_data[p], ox, oy, oz, dx, dy, dz, tmin, tmax)
                if t > 0.0:
                    return True
        else:
            stack[top] = node_left[node]
            top += 1
            stack[top] = node_right[node]
            top += 1
    return False


@nb.njit(cache=True)
def closest_hit(node_min, node_max, node_left, node_right, node_count, order,
                prim_kind, prim_data, prim_inst, prim_local,
                origins, dirs, tmins, tmaxs, out_t, out_prim):
    for i in range(origins.shape[0]):
        t, p = _traverse_closest(node_min, node_max, node_left, node_right, node_count, order,
                                 prim_kind, prim_data, prim_inst, prim_local,
                                 origins[i, 0], origins[i, 1], origins[i, 2],
                                 dirs[i, 0], dirs[i, 1], dirs[i, 2],
                                 tmins[i], tmaxs[i])
        out_t[i] = t
        out_prim[i] = p


@nb.njit(cache=True)
def occluded(node_min, node_max, node_left, node_right, node_count, order,
             prim_kind, prim_data, prim_inst, prim_local,
             origins, dirs, tmins, tmaxs, out_hit):
    for i in range(origins.shape[0]):
        out_hit[i] = _traverse_any(node_min, node_max, node_left, node_right, node_count, order,
                                   prim_kind, prim_data, prim_inst, prim_local,
                                   origins[i, 0], origins[i, 1], origins[i, 2],
                                   dirs[i, 0], dirs[i, 1], dirs[i, 2],
                                   tmins[i], tmaxs[i])


@nb.njit(cache=True)
def skip_walk(node_min, node_max, node_left, node_right, node_count, order,
              prim_kind, prim_data, prim_inst, prim_local,
              origins, dirs, tmins, tmaxs, skip_inst, eps,
              out_t, out_prim, out_hint):
    """Closest hit ignoring a given instance id, walking past its surfaces.

    Hits on ``skip_inst`` flip the self-occlusion hint to 1 and the walk
    continues from just beyond them; the first hit on any other instance
    terminates the walk. out_prim is -1 when the ray escapes.
    """
    for i in range(origins.shape[0]):
        cursor = tmins[i]
        hint = np.uint8(0)
        out_t[i] = -1.0
        out_prim[i] = -1
        for _ in range(MAX_SKIP_STEPS):
            t, p = _traverse_closest(node_min, node_max, node_left, node_right, node_count, order,
                                     prim_kind, prim_data, prim_inst, prim_local,
                                     origins[i, 0], origins[i, 1], origins[i, 2],
                                     dirs[i, 0], dirs[i, 1], dirs[i, 2],
                                     cursor, tmaxs[i])
            if p < 0:
                break
            if prim_inst[p] == skip_inst[i]:
                hint = np.uint8(1)
                cursor = t + eps
                continue
            out_t[i] = t
            out_prim[i] = p
            break
        out_hint[i] = hint
