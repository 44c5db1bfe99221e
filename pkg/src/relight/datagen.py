"""Baking renderer: turns an isolated asset into training slices.

Cameras sit on a sphere around the asset centroid and frame its bounds;
primary rays go through pixel centers so every alpha=1 pixel is a point
sample of the transport.  Each pixel gets its own uniformly random light
direction, and the recorded radiance is the response to a unit-irradiance
directional light from that direction, with every self-occlusion and
inter-reflection included.  Per-sample contributions are clamped: paths
with exactly one scattering vertex at clamp_direct, longer paths at
clamp_indirect.

Tiles are fixed row bands with RNG streams keyed by (seed, view, tile), so
output bytes do not depend on the worker count.
"""

from __future__ import annotations

import copy
import multiprocessing as mp
import os
from dataclasses import dataclass

import numpy as np

from . import transport
from .formats import TrainingSlice, write_slice
from .geometry import FIBER, Scene, normalize
from .rng import stream
from .transport import VertexBatch

TILE_ROWS = 32
SPP_CHUNK = 32


class BakeError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    origin: np.ndarray
    forward: np.ndarray
    up: np.ndarray
    right: np.ndarray
    fov_y: float         # radians, full vertical angle

    @classmethod
    def look_at(cls, origin, target, fov_y, up_hint=(0.0, 0.0, 1.0)):
        origin = np.asarray(origin, dtype=np.float64)
        forward = normalize(np.asarray(target, dtype=np.float64) - origin)
        hint = np.asarray(up_hint, dtype=np.float64)
        if abs(float(forward @ hint)) > 0.999:
            hint = np.array([1.0, 0.0, 0.0])
        right = normalize(np.cross(forward, hint))
        up = np.cross(right, forward)
        return cls(origin=origin, forward=forward, up=up, right=right, fov_y=fov_y)

    def rays(self, width: int, height: int, px: np.ndarray, py: np.ndarray):
        """Rays through pixel coordinates (px, py), in pixels, y down."""
        tan_half = np.tan(0.5 * self.fov_y)
        aspect = width / height
        ndc_x = (px / width * 2.0 - 1.0) * tan_half * aspect
        ndc_y = (1.0 - py / height * 2.0) * tan_half
        dirs = normalize(self.forward + ndc_x[:, None] * self.right
                         + ndc_y[:, None] * self.up)
        origins = np.broadcast_to(self.origin, dirs.shape).copy()
        return origins, dirs


@dataclass(frozen=True)
class BakeConfig:
    view_count: int = 400
    resolution: int = 1024
    spp: int = 128
    camera_radius: float = 3.0
    hemisphere_only: bool = False
    clamp_direct: float = 20.0
    clamp_indirect: float = 10.0
    max_depth: int = 4
    seed: int = 0
    val_views: int = 40
    fov_margin: float = 1.15
    threads: int = 1

    def __post_init__(self):
        if self.spp < 1:
            raise BakeError("spp must be >= 1")
        if self.clamp_direct <= 0 or self.clamp_indirect <= 0:
            raise BakeError("clamp values must be positive")


def clamp_contribution(value, limit: float):
    """Per-channel radiance clamp; monotone and idempotent."""
    return np.minimum(value, limit)


def scene_framing(scene: Scene) -> tuple[np.ndarray, float]:
    """Centroid and tight bounding-sphere radius (per-primitive bounds)."""
    centroid = 0.5 * (scene.bounds_lo + scene.bounds_hi)
    lo, hi = scene._prim_lo, scene._prim_hi
    corners = np.stack([np.linalg.norm(np.where(m, hi, lo) - centroid, axis=1)
                        for m in _CORNER_MASKS])
    return centroid, float(corners.max())


_CORNER_MASKS = [np.array([(i >> 2) & 1, (i >> 1) & 1, i & 1], dtype=bool)
                 for i in range(8)]


def sample_camera(index: int, config: BakeConfig, scene: Scene,
                  validation: bool = False) -> Camera:
    """Deterministic camera on the radius sphere, looking at the centroid."""
    centroid, bound_radius = scene_framing(scene)
    if config.camera_radius <= bound_radius:
        raise BakeError("camera_radius must exceed the asset bound radius")
    rng = stream(config.seed, "val-camera" if validation else "camera", index)
    u = rng.random(2)
    z = 1.0 - 2.0 * u[0]
    if config.hemisphere_only:
        z = abs(z)
    r = np.sqrt(max(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * u[1]
    origin = centroid + config.camera_radius * np.array(
        [r * np.cos(phi), r * np.sin(phi), z])
    half = np.arcsin(min(1.0, bound_radius / config.camera_radius))
    fov = min(2.0 * half * config.fov_margin, 0.95 * np.pi)
    return Camera.look_at(origin, centroid, fov)


def sample_light_direction(rng, hemisphere_only: bool = False) -> np.ndarray:
    """One uniform direction on the sphere (upper hemisphere if restricted)."""
    u = rng.random(2)
    z = 1.0 - 2.0 * u[0]
    if hemisphere_only:
        z = abs(z)
    r = np.sqrt(max(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * u[1]
    return np.array([r * np.cos(phi), r * np.sin(phi), z])


def _light_grid(config: BakeConfig, view: int) -> np.ndarray:
    """Per-pixel light directions for one training view, drawn up front."""
    rng = stream(config.seed, "light", view)
    n = config.resolution * config.resolution
    u = rng.random((n, 2))
    z = 1.0 - 2.0 * u[:, 0]
    if config.hemisphere_only:
        z = np.abs(z)
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * u[:, 1]
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def trace_transport_batch(scene: Scene, hits, wo, wi, config: BakeConfig, rng):
    """Per-hit transport estimate toward the per-hit light directions.

    Returns (radiance (N,3) float64, visibility bits (N,)).  The direct term
    (one scattering vertex) is deterministic for a delta light, so it is
    computed once; spp controls the indirect estimator only.
    """
    n = len(wi)
    vis = transport.visibility(scene, hits.position, hits.geom_normal, wi)
    v1 = VertexBatch.from_hits(hits, wo, np.ones((n, 3)), np.ones(n, dtype=bool))
    direct = transport.nee_lobe(scene, v1, wi) * vis[:, None]
    radiance = clamp_contribution(direct, config.clamp_direct)

    if config.max_depth < 2 or config.spp < 1:
        return radiance, vis

    indirect = np.zeros((n, 3))
    done = 0
    chunk_index = 0
    while done < config.spp:
        chunk = min(SPP_CHUNK, config.spp - done)
        indirect += _indirect_chunk(scene, hits, wo, wi, vis, config, rng, chunk)
        done += chunk
        chunk_index += 1
    return radiance + indirect / config.spp, vis


def _indirect_chunk(scene, hits, wo, wi, vis, config, rng, chunk):
    """Sum of `chunk` independent indirect path samples per pixel."""
    n = len(wi)
    m = n * chunk
    rep = lambda a: np.repeat(a[None], chunk, axis=0).reshape((m,) + a.shape[1:])

    batch = VertexBatch(m)
    batch.pos = rep(hits.position)
    batch.wo = rep(np.asarray(wo))
    batch.kind = rep(np.where(hits.kind == FIBER, transport.VERTEX_FIBER,
                              transport.VERTEX_SURFACE).astype(np.int8))
    batch.normal = rep(hits.normal)
    batch.gnormal = rep(hits.geom_normal)
    batch.tangent = rep(hits.tangent)
    batch.h = rep(hits.h)
    batch.instance = rep(hits.instance)
    batch.prim = rep(hits.prim)
    batch.throughput = np.ones((m, 3))
    batch.active = rep(hits.valid)
    wi_m = rep(np.asarray(wi))

    acc = np.zeros((m, 3))
    for _ in range(config.max_depth - 1):
        if not batch.active.any():
            break
        dirs, weight, is_exit, exit_batch = transport.sample_continuation(
            scene, batch, rng)
        # walk exits: already a new vertex on the same instance
        # traced continuations: find the next classical hit
        trace_mask = batch.active & ~is_exit
        nxt = VertexBatch(m)
        if trace_mask.any():
            idx = np.where(trace_mask)[0]
            origins = transport.offset_outgoing(scene, batch.pos[idx],
                                                batch.gnormal[idx], dirs[idx])
            sub = scene.intersect_batch(origins, dirs[idx])
            throughput = batch.throughput[idx] * weight[idx]
            live = sub.valid & (np.max(throughput, axis=1) > 1e-9)
            _scatter_vertex(nxt, idx, sub, -dirs[idx], throughput, live)
        if is_exit.any():
            for name in VertexBatch.__slots__:
                field = getattr(nxt, name)
                field[is_exit] = getattr(exit_batch, name)[is_exit]
        batch = nxt
        if not batch.active.any():
            break
        contrib = (batch.throughput
                   * transport.nee_lobe(scene, batch, wi_m)
                   * transport.visibility(scene, batch.pos, batch.gnormal,
                                          wi_m)[:, None])
        acc += clamp_contribution(contrib, config.clamp_indirect)
    return acc.reshape(chunk, n, 3).sum(axis=0)


def _scatter_vertex(dst: VertexBatch, idx, hits, wo, throughput, active):
    dst.pos[idx] = hits.position
    dst.wo[idx] = wo
    dst.kind[idx] = np.where(hits.kind == FIBER, transport.VERTEX_FIBER,
                             transport.VERTEX_SURFACE)
    dst.normal[idx] = hits.normal
    dst.gnormal[idx] = hits.geom_normal
    dst.tangent[idx] = hits.tangent
    dst.h[idx] = hits.h
    dst.instance[idx] = hits.instance
    dst.prim[idx] = hits.prim
    dst.throughput[idx] = throughput
    dst.active[idx] = active


def trace_transport(scene: Scene, ray, wi, config: BakeConfig, rng):
    """Single-ray transport probe: (radiance, visibility, aov record)."""
    hits = scene.intersect_batch(ray.origin[None], ray.direction[None],
                                 ray.t_min, ray.t_max)
    if not hits.valid[0]:
        return np.zeros(3), 0, {"alpha": 0.0}
    wi = np.atleast_2d(np.asarray(wi, dtype=np.float64))
    wo = -np.atleast_2d(ray.direction)
    radiance, vis = trace_transport_batch(scene, hits, wo, wi, config, rng)
    fiber = hits.kind[0] == FIBER
    aov = {"alpha": 1.0, "position": hits.position[0], "omega_o": wo[0],
           "omega_i": wi[0]}
    if fiber:
        aov["tangent"] = hits.tangent[0]
        aov["h"] = float(hits.h[0])
    else:
        aov["normal"] = hits.normal[0]
    return radiance[0], int(vis[0]), aov


def render_slice(scene: Scene, camera: Camera, light, config: BakeConfig,
                 view_tag) -> TrainingSlice:
    """One deep buffer; `light` is a per-pixel (H*W, 3) grid or a single dir."""
    res = config.resolution
    fiber_asset = scene.instances[0].geometry[0] == "fiber_set"
    px = (np.arange(res * res) % res + 0.5).astype(np.float64)
    py = (np.arange(res * res) // res + 0.5).astype(np.float64)
    origins, dirs = camera.rays(res, res, px, py)
    hits = scene.intersect_batch(origins, dirs)
    alpha = hits.valid

    light = np.asarray(light, dtype=np.float64)
    wi_full = np.broadcast_to(light, (res * res, 3)) if light.ndim == 1 else light

    radiance = np.zeros((res * res, 3))
    vis = np.zeros(res * res)
    rows_per_tile = TILE_ROWS
    for tile, row0 in enumerate(range(0, res, rows_per_tile)):
        sel = slice(row0 * res, min(row0 + rows_per_tile, res) * res)
        mask = alpha[sel]
        if not mask.any():
            continue
        rng = stream(config.seed, *view_tag, tile)
        sub = _subset_hits(hits, sel, mask)
        rad, v = trace_transport_batch(scene, sub, -dirs[sel][mask],
                                       wi_full[sel][mask], config, rng)
        block_r = np.zeros((sel.stop - sel.start, 3))
        block_v = np.zeros(sel.stop - sel.start)
        block_r[mask] = rad
        block_v[mask] = v
        radiance[sel] = block_r
        vis[sel] = block_v

    def plane(values, channels):
        out = np.zeros((res * res, channels), dtype=np.float32)
        vals = np.asarray(values).reshape(res * res, channels)
        out[alpha] = vals[alpha]
        return out.reshape(res, res, channels)

    planes = {
        "radiance": plane(radiance, 3),
        "alpha": alpha.astype(np.float32).reshape(res, res, 1),
        "position": plane(hits.position, 3),
        "omega_o": plane(-dirs, 3),
        "omega_i": plane(wi_full, 3),
        "visibility": plane(vis, 1),
    }
    if fiber_asset:
        planes["tangent"] = plane(hits.tangent, 3)
        planes["h"] = plane(hits.h, 1)
    else:
        planes["normal"] = plane(hits.normal, 3)
    return TrainingSlice(width=res, height=res, planes=planes, camera=camera)


def _subset_hits(hits, sel, mask):
    sub = copy.copy(hits)
    for name in ("valid", "t", "prim", "instance", "prim_index", "kind",
                 "position", "geom_normal", "normal", "tangent", "h"):
        setattr(sub, name, getattr(hits, name)[sel][mask])
    return sub


def _bake_one(args):
    scene, config, out_dir, index, validation = args
    camera = sample_camera(index, config, scene, validation=validation)
    if validation:
        light = sample_light_direction(stream(config.seed, "val-light", index),
                                       config.hemisphere_only)
        sl = render_slice(scene, camera, light, config, ("val", index))
        path = os.path.join(out_dir, "val", f"slice_{index:04d}.rnad")
    else:
        sl = render_slice(scene, camera, _light_grid(config, index), config,
                          ("bake", index))
        path = os.path.join(out_dir, "train", f"slice_{index:04d}.rnad")
    write_slice(sl, path)
    return path


def bake(scene: Scene, config: BakeConfig, out_dir) -> list:
    """Renders all training and validation slices; byte-stable given seed."""
    if len(scene.instances) != 1:
        raise BakeError("baking expects a scene containing exactly the asset")
    os.makedirs(os.path.join(out_dir, "train"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "val"), exist_ok=True)
    jobs = [(scene, config, out_dir, i, False) for i in range(config.view_count)]
    jobs += [(scene, config, out_dir, i, True) for i in range(config.val_views)]
    if config.threads > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(config.threads) as pool:
            paths = pool.map(_bake_one, jobs, chunksize=1)
    else:
        paths = [_bake_one(job) for job in jobs]
    return paths
