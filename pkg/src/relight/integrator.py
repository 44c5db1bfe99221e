"""Deployment path tracer: classical objects and neural assets in one scene.

Neural assets replace BSDF evaluation: a hit on one queries the feature grid
and decoder for two RGB responses (lit / self-shadowed) which ride on the
ray payload until the shadow or indirect segment resolves.  Self-occlusion
is tracked by instance id: segments originating on a neural asset walk past
hits on the same id (closest-hit walks, flipping the hint), terminate on any
other instance, and never re-enter the asset's own transport, which the bake
already integrated.  Direct light sampling and the uniform indirect
directions combine via balance-heuristic MIS.
"""

from __future__ import annotations

import copy
import multiprocessing as mp
from dataclasses import dataclass

import numpy as np

from . import neural, transport
from .formats import HdrImage
from .geometry import FIBER, Scene, normalize
from .materials import uniform_hemisphere, uniform_sphere
from .rng import stream
from .transport import VertexBatch

INV_2PI = 1.0 / (2.0 * np.pi)
INV_4PI = 1.0 / (4.0 * np.pi)

RR_START_DEPTH = 3
RR_MIN_SURVIVE = 0.05


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    resolution: int = 256
    spp: int = 16
    max_depth: int = 4
    seed: int = 0
    tonemap: bool = False
    threads: int = 1
    direct_strategy: str = "mis"       # "mis" | "light" | "bsdf"
    spp_chunk: int = 8

    def __post_init__(self):
        if self.spp < 1:
            raise RenderError("spp must be >= 1")
        if self.direct_strategy not in ("mis", "light", "bsdf"):
            raise RenderError(f"unknown strategy {self.direct_strategy!r}")


# -- lights --------------------------------------------------------------------

@dataclass(frozen=True)
class DirectionalLight:
    direction: tuple          # propagation direction (light -> scene)
    irradiance: tuple         # on a plane normal to the direction

    delta = True


@dataclass(frozen=True)
class PointLight:
    position: tuple
    intensity: tuple

    delta = True


@dataclass(frozen=True)
class RectLight:
    corner: tuple
    edge_u: tuple
    edge_v: tuple
    radiance: tuple           # emitted on the +normal side, normal = eu x ev

    delta = False

    def frame(self):
        eu = np.asarray(self.edge_u, dtype=np.float64)
        ev = np.asarray(self.edge_v, dtype=np.float64)
        n = np.cross(eu, ev)
        area = float(np.linalg.norm(n))
        return np.asarray(self.corner, dtype=np.float64), eu, ev, n / area, area


class EnvironmentLight:
    """Lat-long radiance map with a luminance-weighted texel CDF."""

    delta = False

    def __init__(self, image: np.ndarray, scale=1.0):
        self.image = np.asarray(image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise RenderError("environment map must be (H, W, 3)")
        self.scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (3,))
        lum = self.image @ np.array([0.2126, 0.7152, 0.0722])
        total = lum.sum()
        self.pmf = (lum / total).reshape(-1) if total > 0 else \
            np.full(lum.size, 1.0 / lum.size)
        self.cdf = np.cumsum(self.pmf)
        self.cdf[-1] = 1.0

    @property
    def shape(self):
        return self.image.shape[:2]

    def texel_of(self, dirs: np.ndarray):
        h, w = self.shape
        theta = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
        phi = np.mod(np.arctan2(dirs[:, 1], dirs[:, 0]), 2.0 * np.pi)
        row = np.minimum((theta / np.pi * h).astype(np.int64), h - 1)
        col = np.minimum((phi / (2.0 * np.pi) * w).astype(np.int64), w - 1)
        return row, col

    def eval(self, dirs: np.ndarray) -> np.ndarray:
        row, col = self.texel_of(dirs)
        return self.image[row, col] * self.scale

    def pdf(self, dirs: np.ndarray) -> np.ndarray:
        h, w = self.shape
        row, col = self.texel_of(dirs)
        theta = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
        sin_t = np.maximum(np.sin(theta), 1e-8)
        return self.pmf[row * w + col] * (h * w) / (2.0 * np.pi * np.pi * sin_t)

    def sample(self, n: int, rng):
        h, w = self.shape
        u = rng.random((n, 3))
        flat = np.searchsorted(self.cdf, u[:, 0], side="right")
        flat = np.minimum(flat, h * w - 1)
        row, col = flat // w, flat % w
        theta = (row + u[:, 1]) / h * np.pi
        phi = (col + u[:, 2]) / w * 2.0 * np.pi
        sin_t = np.sin(theta)
        dirs = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi),
                         np.cos(theta)], axis=1)
        pdf = self.pmf[flat] * (h * w) / (2.0 * np.pi * np.pi *
                                          np.maximum(sin_t, 1e-8))
        return dirs, pdf, self.image[row, col] * self.scale


def sample_light_batch(light, points: np.ndarray, rng):
    """Per-point light sample: (wi, distance, irradiance-weight, pdf, delta).

    The weight is the per-sample irradiance estimate without any surface
    cosine; classical shading multiplies f*cos, neural shading multiplies
    the transport response directly.
    """
    n = len(points)
    if isinstance(light, DirectionalLight):
        wi = np.broadcast_to(-normalize(np.asarray(light.direction, dtype=np.float64)),
                             (n, 3)).copy()
        weight = np.broadcast_to(np.asarray(light.irradiance, dtype=np.float64),
                                 (n, 3)).copy()
        return wi, np.full(n, np.inf), weight, np.zeros(n), True
    if isinstance(light, PointLight):
        delta_v = np.asarray(light.position, dtype=np.float64) - points
        dist = np.linalg.norm(delta_v, axis=1)
        wi = delta_v / np.maximum(dist[:, None], 1e-12)
        weight = np.asarray(light.intensity, dtype=np.float64) / \
            np.maximum(dist * dist, 1e-12)[:, None]
        return wi, dist, weight, np.zeros(n), True
    if isinstance(light, RectLight):
        corner, eu, ev, nl, area = light.frame()
        u = rng.random((n, 2))
        y = corner + u[:, :1] * eu + u[:, 1:] * ev
        delta_v = y - points
        dist = np.linalg.norm(delta_v, axis=1)
        wi = delta_v / np.maximum(dist[:, None], 1e-12)
        cos_l = np.maximum(0.0, -wi @ nl)
        weight = np.asarray(light.radiance, dtype=np.float64) * \
            (cos_l * area / np.maximum(dist * dist, 1e-12))[:, None]
        pdf = np.where(cos_l > 1e-9,
                       dist * dist / np.maximum(area * cos_l, 1e-12), 0.0)
        return wi, dist, weight, pdf, False
    if isinstance(light, EnvironmentLight):
        wi, pdf, radiance = light.sample(n, rng)
        weight = np.where(pdf[:, None] > 0, radiance / np.maximum(pdf, 1e-300)[:, None],
                          0.0)
        return wi, np.full(n, np.inf), weight, pdf, False
    raise RenderError(f"unknown light type {type(light)!r}")


def sample_light(light, point, rng):
    """Single-point convenience wrapper of sample_light_batch."""
    wi, dist, weight, pdf, delta = sample_light_batch(
        light, np.asarray(point, dtype=np.float64)[None], rng)
    return wi[0], float(dist[0]), weight[0], float(pdf[0]), delta


def mis_weight(pdf_a, pdf_b):
    """Balance heuristic; delta strategies pass pdf 0 on the other side."""
    pdf_a = np.asarray(pdf_a, dtype=np.float64)
    pdf_b = np.asarray(pdf_b, dtype=np.float64)
    total = pdf_a + pdf_b
    if np.any(total <= 0.0):
        raise RenderError("mis_weight requires at least one positive pdf")
    return pdf_a / total


def lights_hit(lights, origins, dirs, t_max):
    """Closest emitter along each segment: (emission, pdf_sa, t)."""
    n = len(origins)
    emission = np.zeros((n, 3))
    pdf = np.zeros(n)
    t_best = np.array(t_max, dtype=np.float64, copy=True)
    for light in lights:
        if not isinstance(light, RectLight):
            continue
        corner, eu, ev, nl, area = light.frame()
        denom = dirs @ nl
        facing = denom < -1e-12            # front side faces against the ray
        t = np.where(facing, ((corner - origins) @ nl) / np.where(facing, denom, 1.0),
                     -1.0)
        p = origins + t[:, None] * dirs - corner
        a = (p @ eu) / float(eu @ eu)
        b = (p @ ev) / float(ev @ ev)
        inside = facing & (t > 1e-9) & (t < t_best) & \
            (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
        if inside.any():
            cos_l = -denom[inside]
            emission[inside] = np.asarray(light.radiance, dtype=np.float64)
            pdf[inside] = (t[inside] ** 2) / (area * cos_l)
            t_best[inside] = t[inside]
    return emission, pdf, t_best


def environment_radiance(lights, dirs):
    out = np.zeros((len(dirs), 3))
    pdf = np.zeros(len(dirs))
    for light in lights:
        if isinstance(light, EnvironmentLight):
            out += light.eval(dirs)
            pdf += light.pdf(dirs)
    return out, pdf


# -- neural shading -------------------------------------------------------------

def shade_neural(scene: Scene, instance_id: int, pos, wo, wi,
                 normal=None, tangent=None, h=None):
    """Both decoder outputs at a hit, with inputs converted to training space."""
    inst = scene.by_id[int(instance_id)]
    asset = inst.neural_asset
    if asset is None:
        raise RenderError(f"instance {instance_id} carries no neural asset")
    kind = "fiber" if inst.geometry[0] == "fiber_set" else "surface"
    if asset.kind != kind:
        raise RenderError(
            f"asset kind {asset.kind!r} does not match geometry {kind!r}")
    x_obj = inst.to_object(np.atleast_2d(pos))
    wo_obj = inst.dir_to_object(np.atleast_2d(wo))
    wi_obj = inst.dir_to_object(np.atleast_2d(wi))
    kwargs = {}
    if asset.kind == "surface":
        kwargs["normal"] = inst.dir_to_object(np.atleast_2d(normal))
    else:
        kwargs["tangent"] = inst.dir_to_object(np.atleast_2d(tangent))
        kwargs["h"] = np.atleast_1d(h)
    lit, shadowed = neural.evaluate(asset, x_obj, wo_obj, wi_obj, **kwargs)
    return lit.astype(np.float64), shadowed.astype(np.float64)


def trace_shadow(scene: Scene, from_hit, toward, t_max=np.inf):
    """Spec shadow walk from a hit: (transmittance 0|1, self_hint bit)."""
    origin = from_hit.position + scene.eps * np.sign(
        float(np.dot(toward, from_hit.geometric_normal))) * from_hit.geometric_normal
    hits, hint = scene.skip_walk_batch(origin[None], np.asarray(toward)[None],
                                       np.array([from_hit.instance_id]), 0.0,
                                       t_max)
    return (0 if hits.valid[0] else 1), int(hint[0])


# -- render loop ----------------------------------------------------------------

class _PathState:
    __slots__ = ("origins", "dirs", "throughput", "prev_pdf", "prev_delta",
                 "skip_inst", "pending_lit", "pending_shadowed", "active",
                 "preset", "preset_mask")

    def __init__(self, origins, dirs):
        n = len(origins)
        self.origins = origins
        self.dirs = dirs
        self.throughput = np.ones((n, 3))
        self.prev_pdf = np.zeros(n)
        self.prev_delta = np.ones(n, dtype=bool)
        self.skip_inst = np.full(n, -1, dtype=np.int32)
        self.pending_lit = np.ones((n, 3))
        self.pending_shadowed = np.ones((n, 3))
        self.active = np.ones(n, dtype=bool)
        self.preset: VertexBatch | None = None
        self.preset_mask = np.zeros(n, dtype=bool)


def _neural_ids(scene: Scene) -> set:
    return {inst.id for inst in scene.instances if inst.neural_asset is not None}


def _pick_lights(lights, points, rng):
    """One uniformly chosen light per point; weight scaled by light count."""
    n = len(points)
    count = len(lights)
    if count == 0:
        return None
    pick = rng.integers(0, count, size=n) if count > 1 else np.zeros(n, dtype=np.int64)
    wi = np.zeros((n, 3))
    dist = np.zeros(n)
    weight = np.zeros((n, 3))
    pdf = np.zeros(n)
    delta = np.zeros(n, dtype=bool)
    for li, light in enumerate(lights):
        mask = pick == li
        if not mask.any():
            continue
        w, d, wt, p, is_delta = sample_light_batch(light, points[mask], rng)
        wi[mask] = w
        dist[mask] = d
        weight[mask] = wt * count
        pdf[mask] = p / count      # density of the combined picking strategy
        delta[mask] = is_delta
    return wi, dist, weight, pdf, delta


def trace_paths(scene: Scene, origins, dirs, rng, config: RenderConfig,
                debug: dict | None = None):
    """Radiance for a batch of camera rays; returns (rgb, primary_hit_mask)."""
    n = len(origins)
    state = _PathState(np.array(origins, dtype=np.float64),
                       np.array(dirs, dtype=np.float64))
    radiance = np.zeros((n, 3))
    primary_mask = np.zeros(n, dtype=bool)
    neural_ids = _neural_ids(scene)
    strategy = config.direct_strategy

    for depth in range(config.max_depth):
        if not state.active.any():
            break
        vertices, seg_radiance = _resolve_segments(scene, state, strategy)
        radiance += seg_radiance
        if depth == 0:
            primary_mask = vertices.active.copy()
        if not vertices.active.any():
            break

        is_neural = np.isin(vertices.instance, list(neural_ids)) & vertices.active
        classical = vertices.active & ~is_neural

        # next-event estimation
        if scene.lights and strategy in ("mis", "light"):
            picked = _pick_lights(scene.lights, vertices.pos, rng)
            if picked is not None:
                wi, dist, weight, pdf_l, delta = picked
                radiance += _nee_classical(scene, vertices, classical, wi, dist,
                                           weight, pdf_l, delta, strategy)
                radiance += _nee_neural(scene, vertices, is_neural, wi, dist,
                                        weight, pdf_l, delta, strategy, debug,
                                        depth)

        state = _continue_paths(scene, state, vertices, classical, is_neural,
                                rng, depth, config)
    return radiance, primary_mask


def _resolve_segments(scene: Scene, state: _PathState, strategy: str):
    """Trace pending segments, settle neural payloads, collect emitter hits."""
    n = len(state.origins)
    vertices = VertexBatch(n)
    seg_radiance = np.zeros((n, 3))

    preset = state.preset_mask & state.active
    traced = state.active & ~preset
    if preset.any():
        for name in VertexBatch.__slots__:
            getattr(vertices, name)[preset] = getattr(state.preset, name)[preset]
    if traced.any():
        idx = np.where(traced)[0]
        skip = state.skip_inst[idx]
        use_walk = skip >= 0
        hits_t = np.full(len(idx), np.inf)
        sub_hits = None
        if use_walk.any():
            w = idx[use_walk]
            sub_hits, hint = scene.skip_walk_batch(
                state.origins[w], state.dirs[w], state.skip_inst[w], 0.0, np.inf)
            sel = np.where(hint[:, None], state.pending_shadowed[w],
                           state.pending_lit[w])
            state.throughput[w] *= sel
            _scatter_from_hits(vertices, w, sub_hits, -state.dirs[w],
                               state.throughput[w])
            hits_t[use_walk] = sub_hits.t
        if (~use_walk).any():
            p = idx[~use_walk]
            hits = scene.intersect_batch(state.origins[p], state.dirs[p])
            _scatter_from_hits(vertices, p, hits, -state.dirs[p],
                               state.throughput[p])
            hits_t[~use_walk] = hits.t

        # emitter hits and escapes along the traced segments
        em, pdf_hit, t_light = lights_hit(scene.lights, state.origins[idx],
                                          state.dirs[idx], hits_t)
        esc = ~np.isfinite(hits_t)
        light_first = t_light < hits_t
        n_lights = max(len(scene.lights), 1)
        add = np.zeros((len(idx), 3))
        if light_first.any():
            w = _emitter_weight(state, idx, pdf_hit / n_lights, strategy)
            add[light_first] = (em * w[:, None])[light_first]
            vertices.active[idx[light_first]] = False
        if esc.any():
            env, env_pdf = environment_radiance(scene.lights, state.dirs[idx])
            w = _emitter_weight(state, idx, env_pdf / n_lights, strategy)
            add[esc & ~light_first] = (env * w[:, None])[esc & ~light_first]
        seg_radiance[idx] = state.throughput[idx] * add
    state.preset_mask[:] = False
    state.skip_inst[:] = -1
    return vertices, seg_radiance


def _emitter_weight(state, idx, light_pdf, strategy):
    """Weight for radiance the continued path found on its own."""
    prev_delta = state.prev_delta[idx]
    if strategy == "light":
        # emitters only count when the light strategy could not reach them
        return prev_delta.astype(np.float64)
    if strategy == "bsdf":
        return np.ones(len(idx))
    prev_pdf = state.prev_pdf[idx]
    w = np.ones(len(idx))
    m = ~prev_delta & (light_pdf > 0)
    w[m] = prev_pdf[m] / (prev_pdf[m] + light_pdf[m])
    return w


def _scatter_from_hits(dst: VertexBatch, idx, hits, wo, throughput):
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
    dst.active[idx] = hits.valid


def _bsdf_pdf_toward(scene, vertices, mask, wi):
    """Density of the continuation strategy in a given direction (for MIS)."""
    pdf = np.zeros(len(wi))
    surf = mask & (vertices.kind == transport.VERTEX_SURFACE)
    if surf.any():
        cos = np.maximum(0.0, np.sum(wi * vertices.normal, axis=1))
        # the reflect branch carries probability (1 - translucency_weight)
        for m, mat in transport._material_groups(scene, _with_active(vertices, surf)):
            pdf[m] = (1.0 - mat.translucency_weight) * cos[m] / np.pi
    exitv = mask & (vertices.kind == transport.VERTEX_EXIT)
    if exitv.any():
        cos = np.maximum(0.0, np.sum(wi[exitv] * vertices.normal[exitv], axis=1))
        pdf[exitv] = cos / np.pi
    fib = mask & (vertices.kind == transport.VERTEX_FIBER)
    if fib.any():
        pdf[fib] = INV_4PI
    return pdf


def _nee_classical(scene, vertices, mask, wi, dist, weight, pdf_l, delta,
                   strategy):
    out = np.zeros((len(wi), 3))
    if not mask.any():
        return out
    f_cos = transport.nee_lobe(scene, _with_active(vertices, mask), wi)
    idx = np.where(mask)[0]
    contributing = idx[np.max(f_cos[idx], axis=1) > 0]
    if len(contributing) == 0:
        return out
    origins = transport.offset_outgoing(scene, vertices.pos[contributing],
                                        vertices.gnormal[contributing],
                                        wi[contributing])
    tmax = np.where(np.isfinite(dist[contributing]),
                    dist[contributing] - scene.eps, np.inf)
    blocked = scene.occluded_batch(origins, wi[contributing], 0.0, tmax)
    vis = ~blocked
    misw = np.ones(len(contributing))
    if strategy == "mis":
        nd = ~delta[contributing]
        if nd.any():
            pdf_b = _bsdf_pdf_toward(scene, vertices, mask, wi)[contributing]
            misw[nd] = pdf_l[contributing][nd] / (pdf_l[contributing][nd]
                                                  + pdf_b[nd])
    out[contributing] = (vertices.throughput[contributing]
                         * f_cos[contributing] * weight[contributing]
                         * (vis * misw)[:, None])
    return out


def _nee_neural(scene, vertices, mask, wi, dist, weight, pdf_l, delta,
                strategy, debug, depth):
    out = np.zeros((len(wi), 3))
    if not mask.any():
        return out
    idx = np.where(mask)[0]
    lit = np.zeros((len(idx), 3))
    shadowed = np.zeros((len(idx), 3))
    for iid in np.unique(vertices.instance[idx]):
        rows = idx[vertices.instance[idx] == iid]
        fiber = vertices.kind[rows[0]] == transport.VERTEX_FIBER
        li, sh = shade_neural(
            scene, iid, vertices.pos[rows], vertices.wo[rows], wi[rows],
            normal=None if fiber else vertices.normal[rows],
            tangent=vertices.tangent[rows] if fiber else None,
            h=vertices.h[rows] if fiber else None)
        sel = np.isin(idx, rows)
        lit[sel] = li
        shadowed[sel] = sh
    origins = transport.offset_outgoing(scene, vertices.pos[idx],
                                        vertices.gnormal[idx], wi[idx])
    tmax = np.where(np.isfinite(dist[idx]), dist[idx] - scene.eps, np.inf)
    hits, hint = scene.skip_walk_batch(origins, wi[idx],
                                       vertices.instance[idx], 0.0, tmax)
    transmittance = ~hits.valid
    response = np.where(hint[:, None], shadowed, lit)
    misw = np.ones(len(idx))
    if strategy == "mis":
        nd = ~delta[idx]
        if nd.any():
            pdf_b = _neural_indirect_pdf(vertices, idx, wi)
            misw[nd] = pdf_l[idx][nd] / (pdf_l[idx][nd] + pdf_b[nd])
    out[idx] = (vertices.throughput[idx] * response * weight[idx]
                * (transmittance * misw)[:, None])
    if debug is not None and depth == 0:
        debug["hint"] = (idx, hint.copy(), transmittance.copy())
    return out


def _neural_indirect_pdf(vertices, idx, wi):
    """Uniform hemisphere/sphere density of the indirect strategy."""
    fiber = vertices.kind[idx] == transport.VERTEX_FIBER
    cos = np.sum(wi[idx] * vertices.normal[idx], axis=1)
    return np.where(fiber, INV_4PI, np.where(cos > 0, INV_2PI, 0.0))


def _continue_paths(scene, state, vertices, classical, is_neural, rng, depth,
                    config):
    n = len(state.origins)
    nxt = _PathState(np.zeros((n, 3)), np.zeros((n, 3)))
    nxt.active = np.zeros(n, dtype=bool)
    nxt.preset = VertexBatch(n)

    if classical.any():
        sub = _with_active(vertices, classical)
        dirs, weight, is_exit, exit_batch = transport.sample_continuation(
            scene, sub, rng)
        traced = classical & ~is_exit & (np.max(weight, axis=1) > 0)
        if traced.any():
            nxt.origins[traced] = transport.offset_outgoing(
                scene, vertices.pos[traced], vertices.gnormal[traced],
                dirs[traced])
            nxt.dirs[traced] = dirs[traced]
            nxt.throughput[traced] = vertices.throughput[traced] * weight[traced]
            nxt.prev_pdf[traced] = _bsdf_pdf_toward(scene, vertices, traced,
                                                    dirs)[traced]
            nxt.prev_delta[traced] = False
            nxt.active[traced] = True
        exits = classical & is_exit & exit_batch.active
        if exits.any():
            for name in VertexBatch.__slots__:
                getattr(nxt.preset, name)[exits] = getattr(exit_batch, name)[exits]
            nxt.preset_mask[exits] = True
            nxt.active[exits] = True

    if is_neural.any():
        idx = np.where(is_neural)[0]
        fiber = vertices.kind[idx] == transport.VERTEX_FIBER
        u = rng.random((len(idx), 2))
        dirs_n = np.zeros((len(idx), 3))
        if (~fiber).any():
            dirs_n[~fiber] = uniform_hemisphere(vertices.normal[idx[~fiber]],
                                                u[~fiber])
        if fiber.any():
            dirs_n[fiber] = uniform_sphere(u[fiber])
        pdf = np.where(fiber, INV_4PI, INV_2PI)
        lit = np.zeros((len(idx), 3))
        shadowed = np.zeros((len(idx), 3))
        for iid in np.unique(vertices.instance[idx]):
            rows = vertices.instance[idx] == iid
            fib = vertices.kind[idx[rows][0]] == transport.VERTEX_FIBER
            li, sh = shade_neural(
                scene, iid, vertices.pos[idx[rows]], vertices.wo[idx[rows]],
                dirs_n[rows],
                normal=None if fib else vertices.normal[idx[rows]],
                tangent=vertices.tangent[idx[rows]] if fib else None,
                h=vertices.h[idx[rows]] if fib else None)
            lit[rows] = li
            shadowed[rows] = sh
        nxt.origins[idx] = transport.offset_outgoing(
            scene, vertices.pos[idx], vertices.gnormal[idx], dirs_n)
        nxt.dirs[idx] = dirs_n
        nxt.throughput[idx] = vertices.throughput[idx]
        nxt.pending_lit[idx] = lit / pdf[:, None]
        nxt.pending_shadowed[idx] = shadowed / pdf[:, None]
        nxt.skip_inst[idx] = vertices.instance[idx]
        nxt.prev_pdf[idx] = pdf
        nxt.prev_delta[idx] = False
        nxt.active[idx] = True

    # Russian roulette, throughput-proportional
    if depth >= RR_START_DEPTH and nxt.active.any():
        live = np.where(nxt.active & ~nxt.preset_mask)[0]
        if len(live):
            p = np.clip(np.max(nxt.throughput[live], axis=1), RR_MIN_SURVIVE, 1.0)
            u = rng.random(len(live))
            dead = u >= p
            nxt.active[live[dead]] = False
            nxt.throughput[live] /= p[:, None]
    return nxt


def _with_active(vertices: VertexBatch, mask):
    sub = copy.copy(vertices)
    sub.active = mask
    return sub


def render(scene: Scene, config: RenderConfig, camera) -> HdrImage:
    """Full-frame render; deterministic for a fixed seed and tile grid."""
    _check_assets(scene)
    res = config.resolution
    if config.threads > 1:
        ctx = mp.get_context("fork")
        rows = list(range(0, res, _TILE_ROWS))
        with ctx.Pool(config.threads) as pool:
            parts = pool.map(_render_tile_job,
                             [(scene, config, camera, tile, row0)
                              for tile, row0 in enumerate(rows)], chunksize=1)
        rgb = np.concatenate([p[0] for p in parts], axis=0)
        alpha = np.concatenate([p[1] for p in parts], axis=0)
    else:
        parts = [_render_tile_job((scene, config, camera, tile, row0))
                 for tile, row0 in enumerate(range(0, res, _TILE_ROWS))]
        rgb = np.concatenate([p[0] for p in parts], axis=0)
        alpha = np.concatenate([p[1] for p in parts], axis=0)
    if config.tonemap:
        rgb = (rgb / (1.0 + rgb)) ** (1.0 / 2.2)
    return HdrImage(rgb=rgb.astype(np.float32), alpha=alpha.astype(np.float32))


_TILE_ROWS = 32


def _render_tile_job(args):
    scene, config, camera, tile, row0 = args
    res = config.resolution
    rows = min(_TILE_ROWS, res - row0)
    npix = rows * res
    rng = stream(config.seed, "render", tile)
    acc = np.zeros((npix, 3))
    hit_acc = np.zeros(npix)
    done = 0
    while done < config.spp:
        chunk = min(config.spp_chunk, config.spp - done)
        jitter = rng.random((chunk * npix, 2))
        px = np.tile(np.arange(npix) % res, chunk) + jitter[:, 0]
        py = np.tile(np.arange(npix) // res + row0, chunk) + jitter[:, 1]
        origins, dirs = camera.rays(res, res, px, py)
        radiance, mask = trace_paths(scene, origins, dirs, rng, config)
        acc += radiance.reshape(chunk, npix, 3).sum(axis=0)
        hit_acc += mask.reshape(chunk, npix).sum(axis=0)
        done += chunk
    rgb = (acc / config.spp).reshape(rows, res, 3)
    alpha = (hit_acc / config.spp).reshape(rows, res)
    return rgb, alpha


def _check_assets(scene: Scene) -> None:
    for inst in scene.instances:
        if inst.neural_asset is not None:
            kind = "fiber" if inst.geometry[0] == "fiber_set" else "surface"
            if inst.neural_asset.kind != kind:
                raise RenderError(
                    f"instance {inst.id}: asset kind {inst.neural_asset.kind!r} "
                    f"does not match geometry {kind!r}")
        elif inst.material is not None and inst.material not in scene.materials:
            raise RenderError(f"instance {inst.id}: unknown material "
                              f"{inst.material!r}")
