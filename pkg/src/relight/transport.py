"""Shared wavefront path-tracing machinery.

Both the baking renderer and the deployment renderer advance batches of
paths through classical material vertices with the same rules:

  * next-event estimation uses the deterministic reflective lobe;
  * continuation at a translucent surface picks the transmission branch
    with probability translucency_weight and runs a short internal random
    walk (<= 8 steps, exponential step lengths, isotropic scattering)
    confined to the entered primitive; the path re-emerges at the walk's
    exit with per-channel attenuation exp(-len/(2*mfp)) and behaves there
    as a diffuse transmission vertex;
  * triangles and fiber cylinders are treated as thin for the walk (zero
    interior length), spheres carry the full volumetric proxy.

Vertex batches are structs of arrays; every random draw comes from the
caller's stream in a fixed code order, so results are reproducible for a
fixed seed regardless of how tiles are scheduled.
"""

from __future__ import annotations

import numpy as np

from . import geometry
from .geometry import CYLINDER, SPHERE, normalize
from .materials import FiberMaterial, SurfaceMaterial, cosine_hemisphere, uniform_sphere

VERTEX_SURFACE = 0
VERTEX_FIBER = 1
VERTEX_EXIT = 2      # translucent-walk exit: diffuse transmission vertex

WALK_MAX_STEPS = 8


def material_of(scene, instance_id: int):
    inst = scene.by_id[int(instance_id)]
    return scene.materials[inst.material]


def instance_material_ids(scene, instance: np.ndarray) -> np.ndarray:
    """Dense material index per path for fast grouping."""
    names = sorted(scene.materials)
    lookup = {name: i for i, name in enumerate(names)}
    out = np.full(len(instance), -1, dtype=np.int32)
    for inst in scene.instances:
        if inst.material is not None:
            out[instance == inst.id] = lookup[inst.material]
    return out


class VertexBatch:
    """Active path vertices: positions, frames, throughput."""

    __slots__ = ("pos", "wo", "kind", "normal", "gnormal", "tangent", "h",
                 "instance", "prim", "throughput", "active")

    def __init__(self, n):
        self.pos = np.zeros((n, 3))
        self.wo = np.zeros((n, 3))
        self.kind = np.zeros(n, dtype=np.int8)
        self.normal = np.zeros((n, 3))
        self.gnormal = np.zeros((n, 3))
        self.tangent = np.zeros((n, 3))
        self.h = np.zeros(n)
        self.instance = np.full(n, -1, dtype=np.int32)
        self.prim = np.full(n, -1, dtype=np.int64)
        self.throughput = np.zeros((n, 3))
        self.active = np.zeros(n, dtype=bool)

    @classmethod
    def from_hits(cls, hits: geometry.HitBatch, wo, throughput, active):
        n = len(hits.t)
        batch = cls(n)
        batch.pos = hits.position.copy()
        batch.wo = np.array(wo, dtype=np.float64, copy=True)
        batch.kind = np.where(hits.kind == geometry.FIBER, VERTEX_FIBER,
                              VERTEX_SURFACE).astype(np.int8)
        batch.normal = hits.normal.copy()
        batch.gnormal = hits.geom_normal.copy()
        batch.tangent = hits.tangent.copy()
        batch.h = hits.h.copy()
        batch.instance = hits.instance.copy()
        batch.prim = hits.prim.copy()
        batch.throughput = np.array(throughput, dtype=np.float64, copy=True)
        batch.active = np.asarray(active, dtype=bool) & hits.valid
        return batch


def nee_lobe(scene, batch: VertexBatch, wi: np.ndarray) -> np.ndarray:
    """f * cos toward wi at every active vertex (no visibility yet)."""
    out = np.zeros((len(batch.pos), 3))
    for mask, mat in _material_groups(scene, batch):
        idx = np.where(mask)[0]
        if isinstance(mat, FiberMaterial):
            out[idx] = mat.eval(batch.tangent[idx], batch.h[idx], wi[idx],
                                batch.wo[idx])
        else:
            exit_rows = batch.kind[idx] == VERTEX_EXIT
            surf = idx[~exit_rows]
            if len(surf):
                albedo = mat.albedo_at(batch.pos[surf])
                f = mat.eval(batch.normal[surf], wi[surf], batch.wo[surf], albedo)
                cos = np.maximum(0.0, np.sum(wi[surf] * batch.normal[surf], axis=1))
                out[surf] = f * cos[:, None]
            ex = idx[exit_rows]
            if len(ex):
                albedo = mat.albedo_at(batch.pos[ex])
                cos = np.maximum(0.0, np.sum(wi[ex] * batch.normal[ex], axis=1))
                out[ex] = albedo / np.pi * cos[:, None]
    return out


def _material_groups(scene, batch: VertexBatch):
    mat_ids = instance_material_ids(scene, batch.instance)
    names = sorted(scene.materials)
    for i, name in enumerate(names):
        mask = batch.active & (mat_ids == i)
        if mask.any():
            yield mask, scene.materials[name]


def sample_continuation(scene, batch: VertexBatch, rng):
    """One scattering event per active vertex.

    Returns (dirs, weight, next_is_exit, exit_batch): paths flagged in
    next_is_exit teleported through the translucent walk and their new
    vertex lives in exit_batch; all others continue along dirs with
    throughput scaled by weight.
    """
    n = len(batch.pos)
    dirs = np.zeros((n, 3))
    weight = np.zeros((n, 3))
    is_exit = np.zeros(n, dtype=bool)
    exit_batch = VertexBatch(n)
    for mask, mat in _material_groups(scene, batch):
        idx = np.where(mask)[0]
        if isinstance(mat, FiberMaterial):
            u = rng.random((len(idx), 2))
            wi = uniform_sphere(u)
            f = mat.eval(batch.tangent[idx], batch.h[idx], wi, batch.wo[idx])
            dirs[idx] = wi
            weight[idx] = f * (4.0 * np.pi)
            continue
        exit_rows = batch.kind[idx] == VERTEX_EXIT
        surf = idx[~exit_rows]
        if len(surf):
            tw = mat.translucency_weight
            enter = rng.random(len(surf)) < tw
            refl = surf[~enter]
            if len(refl):
                u = rng.random((len(refl), 2))
                wi, cos = cosine_hemisphere(batch.normal[refl], u)
                albedo = mat.albedo_at(batch.pos[refl])
                f = mat.eval(batch.normal[refl], wi, batch.wo[refl], albedo)
                ok = cos > 1e-9
                dirs[refl] = wi
                weight[refl] = np.where(ok[:, None],
                                        f * np.pi / max(1.0 - tw, 1e-12), 0.0)
            ent = surf[enter]
            if len(ent):
                u = rng.random((len(ent), 2))
                wi, cos = cosine_hemisphere(-batch.normal[ent], u)
                exit_pos, exit_n, atten, alive = translucent_walk(
                    scene, batch.prim[ent], batch.pos[ent], wi,
                    np.asarray(mat.translucency_mfp, dtype=np.float64), rng)
                is_exit[ent] = True
                exit_batch.pos[ent] = exit_pos
                exit_batch.normal[ent] = exit_n
                exit_batch.gnormal[ent] = exit_n
                exit_batch.kind[ent] = VERTEX_EXIT
                exit_batch.instance[ent] = batch.instance[ent]
                exit_batch.prim[ent] = batch.prim[ent]
                exit_batch.wo[ent] = exit_n     # placeholder; exit lobe ignores wo
                exit_batch.throughput[ent] = batch.throughput[ent] * atten
                exit_batch.active[ent] = alive
        ex = idx[exit_rows]
        if len(ex):
            u = rng.random((len(ex), 2))
            wi, cos = cosine_hemisphere(batch.normal[ex], u)
            albedo = mat.albedo_at(batch.pos[ex])
            dirs[ex] = wi
            weight[ex] = np.where((cos > 1e-9)[:, None], albedo, 0.0)
    return dirs, weight, is_exit, exit_batch


def translucent_walk(scene, prim, pos, dir_in, mfp, rng):
    """Short isotropic random walk inside the entered primitive.

    Returns (exit_pos, exit_normal, per-channel attenuation, alive).
    Paths still inside after WALK_MAX_STEPS are absorbed.
    """
    n = len(pos)
    mean_mfp = float(np.mean(mfp))
    cur = pos.copy()
    d = dir_in.copy()
    total = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    exited = np.zeros(n, dtype=bool)
    exit_pos = pos.copy()
    exit_n = np.zeros((n, 3))
    for _ in range(WALK_MAX_STEPS):
        if not alive.any():
            break
        live = np.where(alive)[0]
        t_exit = _exit_distance(scene, prim[live], cur[live], d[live])
        step = rng.exponential(mean_mfp, size=len(live))
        leaves = step >= t_exit
        adv = np.where(leaves, t_exit, step)
        total[live] += adv
        cur[live] += adv[:, None] * d[live]
        out = live[leaves]
        if len(out):
            exit_pos[out] = cur[out]
            exit_n[out] = _outward_normal(scene, prim[out], cur[out], d[out])
            exited[out] = True
            alive[out] = False
        stay = live[~leaves]
        if len(stay):
            d[stay] = uniform_sphere(rng.random((len(stay), 2)))
    atten = np.exp(-total[:, None] * (0.5 / np.asarray(mfp)[None, :]))
    return exit_pos, exit_n, np.where(exited[:, None], atten, 0.0), exited


def _exit_distance(scene, prim, pos, d):
    """Distance to the entered primitive's far boundary (0 for thin prims)."""
    out = np.zeros(len(pos))
    kinds = scene.prim_kind[prim]
    sph = kinds == SPHERE
    if sph.any():
        data = scene.prim_data[prim[sph]]
        oc = data[:, :3] - pos[sph]
        b = np.sum(oc * d[sph], axis=1)
        c = np.sum(oc * oc, axis=1) - data[:, 3] ** 2
        disc = np.maximum(b * b - c, 0.0)
        out[sph] = np.maximum(b + np.sqrt(disc), 0.0)
    return out


def _outward_normal(scene, prim, pos, d):
    kinds = scene.prim_kind[prim]
    data = scene.prim_data[prim]
    n = np.zeros((len(pos), 3))
    sph = kinds == SPHERE
    if sph.any():
        n[sph] = normalize(pos[sph] - data[sph, :3])
    tri = kinds == 1
    if tri.any():
        v = data[tri].reshape(-1, 3, 3)
        gn = normalize(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]))
        # exit side follows the travel direction
        sign = np.sign(np.sum(gn * d[tri], axis=1))[:, None]
        n[tri] = gn * np.where(sign == 0, 1.0, sign)
    cyl = kinds == CYLINDER
    if cyl.any():
        p0 = data[cyl, :3]
        axis = normalize(data[cyl, 3:6] - p0)
        rel = pos[cyl] - p0
        axial = np.sum(rel * axis, axis=1, keepdims=True)
        n[cyl] = normalize(rel - axial * axis)
    return n


def offset_outgoing(scene, pos, geom_normal, dirs):
    """Ray origins nudged off the surface on the side they leave toward."""
    sign = np.sign(np.sum(dirs * geom_normal, axis=1))
    sign = np.where(sign == 0.0, 1.0, sign)
    return pos + scene.eps * sign[:, None] * geom_normal


def visibility(scene, pos, geom_normal, wi) -> np.ndarray:
    """1 where the straight segment toward wi leaves the scene unobstructed."""
    origins = offset_outgoing(scene, pos, geom_normal, wi)
    return ~scene.occluded_batch(origins, wi, 0.0, np.inf)
