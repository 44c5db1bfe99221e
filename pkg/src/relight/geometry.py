"""Ray-traceable geometry: instanced meshes, spheres and fiber segments.

Instances carry an affine object-to-world transform; primitives are baked to
world space at scene build time, so the traversal kernels never transform
rays.  Fibers are piecewise linear open cylinders.  A binned-SAH BVH (max 4
primitives per leaf) accelerates intersection; ``brute_force_intersect``
implements the same math without the tree and serves as the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

SPHERE, TRIANGLE, CYLINDER = 0, 1, 2
SURFACE, FIBER = 0, 1

# Self-intersection offset, as a fraction of the scene diagonal.
EPS_SCALE = 1e-4


class GeometryError(ValueError):
    pass


def normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(n, 1e-300)


def orthonormal_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit tangents completing n (rows) to a right-handed frame."""
    n = np.atleast_2d(n)
    sign = np.where(n[:, 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t = np.stack([1.0 + sign * n[:, 0] ** 2 * a, sign * b, -sign * n[:, 0]], axis=1)
    s = np.stack([b, sign + n[:, 1] ** 2 * a, -n[:, 1]], axis=1)
    return t, s


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = np.inf

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise GeometryError("ray direction must be unit length")
        if not self.t_min < self.t_max:
            raise GeometryError("ray requires t_min < t_max")


@dataclass(frozen=True)
class Hit:
    t: float
    position: np.ndarray
    instance_id: int
    prim_index: int
    kind: int                      # SURFACE or FIBER
    geometric_normal: np.ndarray
    normal: np.ndarray | None = None    # surface hits
    tangent: np.ndarray | None = None   # fiber hits
    h: float | None = None              # fiber hits, in [-1, 1]


@dataclass
class Instance:
    """One placed geometry with a shading handle.

    ``geometry`` is ("sphere",), ("mesh", vertices, triangles) or
    ("fiber_set", polylines, radius).  ``material`` names an entry in the
    scene's material table; ``neural_asset`` holds a loaded asset instead.
    """

    id: int
    geometry: tuple
    object_to_world: np.ndarray         # 4x3: rows 0-2 linear map A, row 3 translation
    material: str | None = None
    neural_asset: object | None = None

    def linear(self) -> np.ndarray:
        return np.asarray(self.object_to_world, dtype=np.float64)[:3]

    def translation(self) -> np.ndarray:
        return np.asarray(self.object_to_world, dtype=np.float64)[3]

    def uniform_scale(self) -> float:
        """Scale factor c if the linear part is c*rotation, else raises."""
        a = self.linear()
        ata = a.T @ a
        c2 = ata[0, 0]
        if not np.allclose(ata, c2 * np.eye(3), atol=1e-9 * max(c2, 1.0)):
            raise GeometryError(
                f"instance {self.id}: sphere/fiber transforms must be uniform-scale rigid")
        return float(np.sqrt(c2))

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.linear().T + self.translation()

    def to_object(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.translation()) @ np.linalg.inv(self.linear()).T

    def dir_to_object(self, dirs: np.ndarray) -> np.ndarray:
        return normalize(dirs @ np.linalg.inv(self.linear()).T)


def _instance_primitives(inst: Instance) -> tuple[np.ndarray, np.ndarray]:
    """World-space packed rows + kind codes for one instance."""
    kind = inst.geometry[0]
    if kind == "sphere":
        c = inst.uniform_scale()
        row = np.zeros((1, 9))
        row[0, :3] = inst.translation()
        row[0, 3] = c
        return row, np.array([SPHERE], dtype=np.int8)
    if kind == "sphere_set":
        c = inst.uniform_scale()
        centers = inst.to_world(np.asarray(inst.geometry[1], dtype=np.float64))
        radii = np.asarray(inst.geometry[2], dtype=np.float64) * c
        if len(centers) != len(radii) or np.any(radii <= 0):
            raise GeometryError("sphere_set needs matching centers and positive radii")
        rows = np.zeros((len(centers), 9))
        rows[:, :3] = centers
        rows[:, 3] = radii
        return rows, np.full(len(rows), SPHERE, dtype=np.int8)
    if kind == "mesh":
        verts = inst.to_world(np.asarray(inst.geometry[1], dtype=np.float64))
        tris = np.asarray(inst.geometry[2], dtype=np.int64)
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise GeometryError("mesh triangles must be (n, 3) indices")
        rows = verts[tris].reshape(-1, 9)
        return rows, np.full(len(rows), TRIANGLE, dtype=np.int8)
    if kind == "fiber_set":
        c = inst.uniform_scale()
        radius = float(inst.geometry[2]) * c
        if radius <= 0.0:
            raise GeometryError("fiber radius must be positive")
        rows = []
        for line in inst.geometry[1]:
            pts = inst.to_world(np.asarray(line, dtype=np.float64))
            for a, b in zip(pts[:-1], pts[1:]):
                rows.append(np.concatenate([a, b, [radius, 0.0, 0.0]]))
        if not rows:
            raise GeometryError("fiber_set contains no segments")
        return np.asarray(rows), np.full(len(rows), CYLINDER, dtype=np.int8)
    raise GeometryError(f"unknown geometry type {kind!r}")


def _prim_bounds(kinds: np.ndarray, data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = len(kinds)
    lo = np.empty((n, 3))
    hi = np.empty((n, 3))
    sph = kinds == SPHERE
    if sph.any():
        c, r = data[sph, :3], data[sph, 3:4]
        lo[sph], hi[sph] = c - r, c + r
    tri = kinds == TRIANGLE
    if tri.any():
        v = data[tri].reshape(-1, 3, 3)
        lo[tri], hi[tri] = v.min(axis=1), v.max(axis=1)
    cyl = kinds == CYLINDER
    if cyl.any():
        p0, p1, r = data[cyl, :3], data[cyl, 3:6], data[cyl, 6:7]
        lo[cyl] = np.minimum(p0, p1) - r
        hi[cyl] = np.maximum(p0, p1) + r
    return lo, hi


def build_bvh(prim_lo: np.ndarray, prim_hi: np.ndarray,
              max_leaf: int = 4, n_bins: int = 16):
    """Binned-SAH BVH over primitive bounds; returns flattened node arrays."""
    n = len(prim_lo)
    if n == 0:
        raise GeometryError("cannot build a BVH over zero primitives")
    centroids = 0.5 * (prim_lo + prim_hi)
    order = np.arange(n, dtype=np.int32)
    node_min, node_max, node_left, node_right, node_count = [], [], [], [], []

    def push(lo, hi, left, count) -> int:
        node_min.append(lo)
        node_max.append(hi)
        node_left.append(left)
        node_right.append(-1)
        node_count.append(count)
        return len(node_min) - 1

    def split(start: int, end: int) -> int:
        idx = order[start:end]
        lo = prim_lo[idx].min(axis=0)
        hi = prim_hi[idx].max(axis=0)
        count = end - start
        me = push(lo, hi, start, count)
        if count <= max_leaf:
            return me
        cen = centroids[idx]
        cmin, cmax = cen.min(axis=0), cen.max(axis=0)
        extent = cmax - cmin
        axis = int(np.argmax(extent))
        if extent[axis] < 1e-12:
            mid = start + count // 2
        else:
            # SAH over n_bins candidate planes along the widest centroid axis
            rel = (cen[:, axis] - cmin[axis]) / extent[axis]
            bins = np.minimum((rel * n_bins).astype(np.int32), n_bins - 1)
            best_cost, best_bin = np.inf, -1
            counts = np.bincount(bins, minlength=n_bins)
            blo = np.full((n_bins, 3), np.inf)
            bhi = np.full((n_bins, 3), -np.inf)
            for b in range(n_bins):
                m = bins == b
                if m.any():
                    blo[b] = prim_lo[idx[m]].min(axis=0)
                    bhi[b] = prim_hi[idx[m]].max(axis=0)

            def area(l, h):
                d = np.maximum(h - l, 0.0)
                return d[0] * d[1] + d[1] * d[2] + d[2] * d[0]

            for b in range(1, n_bins):
                nl = counts[:b].sum()
                nr = counts[b:].sum()
                if nl == 0 or nr == 0:
                    continue
                cost = nl * area(blo[:b].min(axis=0), bhi[:b].max(axis=0)) + \
                    nr * area(blo[b:].min(axis=0), bhi[b:].max(axis=0))
                if cost < best_cost:
                    best_cost, best_bin = cost, b
            if best_bin < 0:
                mid = start + count // 2
            else:
                left_mask = bins < best_bin
                # stable partition keeps index order inside each side
                order[start:end] = np.concatenate([idx[left_mask], idx[~left_mask]])
                mid = start + int(left_mask.sum())
        if mid == start or mid == end:
            mid = start + count // 2
        node_count[me] = 0
        node_left[me] = split(start, mid)
        node_right[me] = split(mid, end)
        return me

    split(0, n)
    return (np.asarray(node_min), np.asarray(node_max),
            np.asarray(node_left, dtype=np.int32),
            np.asarray(node_right, dtype=np.int32),
            np.asarray(node_count, dtype=np.int32), order)


class Scene:
    """Immutable instanced geometry with a BVH; safe for concurrent queries."""

    def __init__(self, instances: list[Instance], lights: list | None = None,
                 materials: dict | None = None):
        if not instances:
            raise GeometryError("scene requires at least one instance")
        ids = [inst.id for inst in instances]
        if len(set(ids)) != len(ids):
            raise GeometryError("instance ids must be unique")
        self.instances = list(instances)
        self.by_id = {inst.id: inst for inst in instances}
        self.lights = list(lights or [])
        self.materials = dict(materials or {})

        kinds, data, inst_ids, locals_ = [], [], [], []
        for inst in instances:
            rows, k = _instance_primitives(inst)
            kinds.append(k)
            data.append(rows)
            inst_ids.append(np.full(len(rows), inst.id, dtype=np.int32))
            locals_.append(np.arange(len(rows), dtype=np.int32))
        self.prim_kind = np.concatenate(kinds)
        self.prim_data = np.ascontiguousarray(np.concatenate(data))
        self.prim_inst = np.concatenate(inst_ids)
        self.prim_local = np.concatenate(locals_)

        lo, hi = _prim_bounds(self.prim_kind, self.prim_data)
        self._prim_lo, self._prim_hi = lo, hi
        self.bounds_lo = lo.min(axis=0)
        self.bounds_hi = hi.max(axis=0)
        self.diagonal = float(np.linalg.norm(self.bounds_hi - self.bounds_lo))
        self.eps = EPS_SCALE * max(self.diagonal, 1e-12)
        self.bvh = build_bvh(lo, hi)

    def instance_kind(self, instance_id: int) -> int:
        return FIBER if self.by_id[instance_id].geometry[0] == "fiber_set" else SURFACE

    def _kernel_args(self):
        nmin, nmax, nleft, nright, ncount, order = self.bvh
        return (nmin, nmax, nleft, nright, ncount, order,
                self.prim_kind, self.prim_data, self.prim_inst, self.prim_local)

    # -- batch queries -----------------------------------------------------

    def intersect_batch(self, origins, dirs, t_min=None, t_max=None) -> "HitBatch":
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        n = len(origins)
        tmins = np.zeros(n) if t_min is None else np.broadcast_to(t_min, (n,)).astype(np.float64)
        tmaxs = np.full(n, np.inf) if t_max is None else np.broadcast_to(t_max, (n,)).astype(np.float64)
        out_t = np.empty(n)
        out_p = np.empty(n, dtype=np.int64)
        kernels.closest_hit(*self._kernel_args(), origins, dirs,
                            np.ascontiguousarray(tmins), np.ascontiguousarray(tmaxs),
                            out_t, out_p)
        return self._make_hits(origins, dirs, out_t, out_p)

    def occluded_batch(self, origins, dirs, t_min, t_max) -> np.ndarray:
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        n = len(origins)
        out = np.empty(n, dtype=np.uint8)
        kernels.occluded(*self._kernel_args(), origins, dirs,
                         np.ascontiguousarray(np.broadcast_to(t_min, (n,)).astype(np.float64)),
                         np.ascontiguousarray(np.broadcast_to(t_max, (n,)).astype(np.float64)),
                         out)
        return out.astype(bool)

    def skip_walk_batch(self, origins, dirs, skip_inst, t_min, t_max):
        """First non-self hit plus the self-occlusion hint (see kernels)."""
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        n = len(origins)
        out_t = np.empty(n)
        out_p = np.empty(n, dtype=np.int64)
        out_hint = np.empty(n, dtype=np.uint8)
        kernels.skip_walk(*self._kernel_args(), origins, dirs,
                          np.ascontiguousarray(np.broadcast_to(t_min, (n,)).astype(np.float64)),
                          np.ascontiguousarray(np.broadcast_to(t_max, (n,)).astype(np.float64)),
                          np.ascontiguousarray(np.broadcast_to(skip_inst, (n,)).astype(np.int32)),
                          self.eps, out_t, out_p, out_hint)
        return self._make_hits(origins, dirs, out_t, out_p), out_hint.astype(bool)

    def _make_hits(self, origins, dirs, t, prim) -> "HitBatch":
        return HitBatch.from_prims(self, origins, dirs, t, prim)

    # -- single-ray convenience --------------------------------------------

    def intersect(self, ray: Ray) -> Hit | None:
        batch = self.intersect_batch(ray.origin[None], ray.direction[None],
                                     ray.t_min, ray.t_max)
        if not batch.valid[0]:
            return None
        return batch.to_hit(0)


class HitBatch:
    """Struct-of-arrays intersection records for a ray batch."""

    __slots__ = ("valid", "t", "prim", "instance", "prim_index", "kind",
                 "position", "geom_normal", "normal", "tangent", "h")

    @classmethod
    def from_prims(cls, scene: Scene, origins, dirs, t, prim):
        self = cls()
        n = len(t)
        self.valid = prim >= 0
        self.t = np.where(self.valid, t, np.inf)
        self.prim = prim
        p = np.where(self.valid, prim, 0)
        self.instance = np.where(self.valid, scene.prim_inst[p], -1).astype(np.int32)
        self.prim_index = np.where(self.valid, scene.prim_local[p], -1).astype(np.int32)
        kinds = scene.prim_kind[p]
        self.kind = np.where(kinds == CYLINDER, FIBER, SURFACE).astype(np.int8)
        tt = np.where(self.valid, t, 0.0)
        self.position = origins + tt[:, None] * dirs
        self.geom_normal = np.zeros((n, 3))
        self.normal = np.zeros((n, 3))
        self.tangent = np.zeros((n, 3))
        self.h = np.zeros(n)

        data = scene.prim_data[p]
        sph = self.valid & (kinds == SPHERE)
        if sph.any():
            gn = normalize(self.position[sph] - data[sph, :3])
            self.geom_normal[sph] = gn
            self.normal[sph] = gn
        tri = self.valid & (kinds == TRIANGLE)
        if tri.any():
            v = data[tri].reshape(-1, 3, 3)
            gn = normalize(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]))
            self.geom_normal[tri] = gn
            self.normal[tri] = gn
        cyl = self.valid & (kinds == CYLINDER)
        if cyl.any():
            p0 = data[cyl, :3]
            axis = normalize(data[cyl, 3:6] - p0)
            radius = data[cyl, 6]
            rel = self.position[cyl] - p0
            axial = np.sum(rel * axis, axis=1, keepdims=True)
            radial = normalize(rel - axial * axis)
            self.geom_normal[cyl] = radial
            self.tangent[cyl] = axis
            self.h[cyl] = fiber_offset_batch(self.position[cyl], p0, axis,
                                             dirs[cyl], radius)
        return self

    def to_hit(self, i: int) -> Hit:
        fiber = self.kind[i] == FIBER
        return Hit(t=float(self.t[i]), position=self.position[i].copy(),
                   instance_id=int(self.instance[i]), prim_index=int(self.prim_index[i]),
                   kind=int(self.kind[i]), geometric_normal=self.geom_normal[i].copy(),
                   normal=None if fiber else self.normal[i].copy(),
                   tangent=self.tangent[i].copy() if fiber else None,
                   h=float(self.h[i]) if fiber else None)


def fiber_offset_batch(hit_points, axis_points, axis_dirs, view_dirs, radii):
    """Vectorized fiber cross-section offset; see fiber_offset."""
    vproj = view_dirs - np.sum(view_dirs * axis_dirs, axis=1, keepdims=True) * axis_dirs
    vn = np.linalg.norm(vproj, axis=1, keepdims=True)
    vproj = vproj / np.maximum(vn, 1e-300)
    side = np.cross(axis_dirs, vproj)
    h = np.sum((hit_points - axis_points) * side, axis=1) / radii
    return np.clip(h, -1.0, 1.0)


def fiber_offset(hit_point, axis_point, axis_dir, view_dir, radius: float) -> float:
    """Signed offset of the viewing ray from the fiber axis, in [-1, 1].

    Measured in the plane orthogonal to the axis and normalized by the
    radius; positive toward axis_dir x projected view direction.
    """
    if radius <= 0.0:
        raise GeometryError("fiber radius must be positive")
    axis_dir = np.asarray(axis_dir, dtype=np.float64)
    view_dir = np.asarray(view_dir, dtype=np.float64)
    vproj = view_dir - np.dot(view_dir, axis_dir) * axis_dir
    norm = np.linalg.norm(vproj)
    if norm < 1e-8:
        raise GeometryError("view direction parallel to fiber axis: frame degenerate")
    side = np.cross(axis_dir, vproj / norm)
    h = float(np.dot(np.asarray(hit_point) - np.asarray(axis_point), side) / radius)
    return float(np.clip(h, -1.0, 1.0))


def brute_force_intersect(scene: Scene, origins, dirs, t_min=0.0, t_max=np.inf):
    """All-primitives nearest hit; the oracle the BVH must agree with."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(origins)
    tmins = np.broadcast_to(t_min, (n,)).astype(np.float64)
    tmaxs = np.broadcast_to(t_max, (n,)).astype(np.float64)
    best_t = np.where(np.isfinite(tmaxs), tmaxs, np.inf).copy()
    best_p = np.full(n, -1, dtype=np.int64)
    best_key = np.full((n, 2), 0x7FFFFFFF, dtype=np.int64)
    for p in range(len(scene.prim_kind)):
        t = _prim_intersect_np(scene.prim_kind[p], scene.prim_data[p],
                               origins, dirs, tmins, tmaxs)
        hit = t > 0.0
        key_inst = scene.prim_inst[p]
        key_loc = scene.prim_local[p]
        better = hit & (
            (t < best_t)
            | ((t == best_t) & ((key_inst < best_key[:, 0])
                                | ((key_inst == best_key[:, 0]) & (key_loc < best_key[:, 1]))))
        )
        best_t[better] = t[better]
        best_p[better] = p
        best_key[better, 0] = key_inst
        best_key[better, 1] = key_loc
    return HitBatch.from_prims(scene, origins, dirs,
                               np.where(best_p >= 0, best_t, -1.0), best_p)


def _prim_intersect_np(kind, data, origins, dirs, tmins, tmaxs):
    """Vectorized single-primitive test mirroring the kernel math."""
    miss = -1.0
    if kind == SPHERE:
        oc = data[:3] - origins
        b = np.sum(oc * dirs, axis=1)
        c = np.sum(oc * oc, axis=1) - data[3] ** 2
        disc = b * b - c
        ok = disc > 0.0
        s = np.sqrt(np.where(ok, disc, 0.0))
        t = b - s
        t = np.where(t <= tmins, b + s, t)
        return np.where(ok & (t > tmins) & (t < tmaxs), t, miss)
    if kind == TRIANGLE:
        v0, e1, e2 = data[:3], data[3:6] - data[:3], data[6:9] - data[:3]
        p = np.cross(dirs, e2)
        det = p @ e1
        ok = np.abs(det) >= 1e-14
        inv = 1.0 / np.where(ok, det, 1.0)
        tv = origins - v0
        u = np.sum(tv * p, axis=1) * inv
        q = np.cross(tv, np.broadcast_to(e1, tv.shape))
        v = np.sum(dirs * q, axis=1) * inv
        t = (q @ e2) * inv
        ok &= (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0)
        return np.where(ok & (t > tmins) & (t < tmaxs), t, miss)
    # cylinder
    p0, p1, r = data[:3], data[3:6], data[6]
    w = p1 - p0
    length = np.linalg.norm(w)
    w = w / length
    e = origins - p0
    dw = dirs @ w
    ew = e @ w
    a = 1.0 - dw * dw
    b = np.sum(e * dirs, axis=1) - ew * dw
    c = np.sum(e * e, axis=1) - ew * ew - r * r
    ok = a >= 1e-14
    disc = b * b - a * c
    ok &= disc > 0.0
    s = np.sqrt(np.where(ok, disc, 0.0))
    safe_a = np.where(ok, a, 1.0)
    t_near = (-b - s) / safe_a
    t_far = (-b + s) / safe_a
    result = np.full(len(origins), miss)
    for t in (t_near, t_far):
        axial = ew + t * dw
        good = ok & (t > tmins) & (t < tmaxs) & (axial >= 0.0) & (axial <= length) & (result < 0.0)
        result = np.where(good, t, result)
    return result
