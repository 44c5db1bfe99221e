"""Reference material models used while generating training data.

These stand in for production shaders: a translucent-proxy surface model
(diffuse + normalized glossy reflection, plus a transmission branch whose
distance attenuation is applied by the tracer's internal random walk) and a
fiber model with a longitudinal specular lobe modulated across the fiber
width.  All evaluation is double precision and vectorized over sample
batches.

The surface BSDF is reciprocal; the fiber model carries no reciprocity
guarantee (the h-dependent azimuthal factor is a phenomenological proxy,
not a physical lobe).  Fiber scattering uses no cosine factor: the model
integrates radiance directly over the sphere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import normalize, orthonormal_basis

INV_PI = 1.0 / np.pi
INV_4PI = 1.0 / (4.0 * np.pi)

LOBE_REFLECT = 0
LOBE_ENTER = 1      # path enters the medium; tracer runs the internal walk

FIBER_DIFFUSE_SHARE = 0.25
FIBER_SPECULAR_SHARE = 0.75


class MaterialError(ValueError):
    pass


def _unit_check(v, name):
    if not np.allclose(np.linalg.norm(v, axis=-1), 1.0, atol=1e-6):
        raise MaterialError(f"{name} must be unit length")


@dataclass(frozen=True)
class SurfaceMaterial:
    """Translucent-proxy surface: albedo, gloss from roughness, transmission.

    Energy is conserved by construction: reflection carries (1-tw)*albedo,
    transmission tw*albedo, and the glossy lobe uses the (e+1)/(2pi)
    normalization whose cosine-weighted integral stays below one.
    """

    albedo: tuple = (0.8, 0.8, 0.8)
    roughness: float = 1.0
    translucency_weight: float = 0.0
    translucency_mfp: tuple = (0.1, 0.1, 0.1)
    checker: tuple | None = None        # (color_a, color_b, cells_per_unit)

    def __post_init__(self):
        if not 0.0 < self.roughness <= 1.0:
            raise MaterialError("roughness must lie in (0, 1]")
        if not 0.0 <= self.translucency_weight <= 1.0:
            raise MaterialError("translucency_weight must lie in [0, 1]")
        if np.any(np.asarray(self.albedo) > 1.0) or np.any(np.asarray(self.albedo) < 0.0):
            raise MaterialError("albedo must lie in [0, 1] per channel")

    def albedo_at(self, x: np.ndarray) -> np.ndarray:
        if self.checker is None:
            return np.broadcast_to(np.asarray(self.albedo, dtype=np.float64),
                                   (len(x), 3)).copy()
        ca, cb, scale = self.checker
        parity = np.sum(np.floor(np.asarray(x) * scale), axis=1).astype(np.int64) & 1
        return np.where(parity[:, None] == 0, np.asarray(ca, dtype=np.float64),
                        np.asarray(cb, dtype=np.float64))

    def phong_exponent(self) -> float:
        return 2.0 / (self.roughness * self.roughness) - 2.0

    def eval(self, n, wi, wo, albedo=None) -> np.ndarray:
        """Reflective lobe value per steradian; zero for cross-side pairs.

        Transmission has no pointwise form here; it is realized by the
        tracer's walk (see transport.translucent_walk).
        """
        n = np.atleast_2d(np.asarray(n, dtype=np.float64))
        wi = np.atleast_2d(np.asarray(wi, dtype=np.float64))
        wo = np.atleast_2d(np.asarray(wo, dtype=np.float64))
        for v, name in ((n, "n"), (wi, "wi"), (wo, "wo")):
            _unit_check(v, name)
        if albedo is None:
            albedo = np.broadcast_to(np.asarray(self.albedo, dtype=np.float64),
                                     (len(wi), 3))
        ci = np.sum(wi * n, axis=1)
        co = np.sum(wo * n, axis=1)
        same_side = (ci > 0.0) & (co > 0.0)
        sd = self.roughness
        ss = 1.0 - self.roughness
        f = np.full(len(wi), sd * INV_PI)
        if ss > 0.0:
            e = self.phong_exponent()
            cos_alpha = 2.0 * ci * co - np.sum(wi * wo, axis=1)
            f = f + ss * (e + 1.0) / (2.0 * np.pi) * np.maximum(0.0, cos_alpha) ** e
        f = np.where(same_side, f, 0.0)
        return (1.0 - self.translucency_weight) * albedo * f[:, None]

    def sample(self, n, wo, rng) -> dict:
        """Continuation sample: lobe tag, direction, pdf and lobe value.

        Degenerate draws (grazing cosine) retry up to 8 times, then return a
        zero-value sample with a tiny positive pdf.
        """
        n = np.atleast_2d(np.asarray(n, dtype=np.float64))
        wo = np.atleast_2d(np.asarray(wo, dtype=np.float64))
        m = len(n)
        tw = self.translucency_weight
        enter = rng.random(m) < tw
        axis = np.where(enter[:, None], -n, n)
        wi = np.zeros((m, 3))
        cos_local = np.zeros(m)
        pending = np.ones(m, dtype=bool)
        for _ in range(8):
            if not pending.any():
                break
            u = rng.random((int(pending.sum()), 2))
            cand, c = cosine_hemisphere(axis[pending], u)
            wi[pending] = cand
            cos_local[pending] = c
            pending = pending & (cos_local < 1e-9)
        ok = ~pending
        branch_p = np.where(enter, max(tw, 1e-300), 1.0 - tw)
        pdf = np.where(ok, branch_p * cos_local * INV_PI, 1.0)
        albedo = np.broadcast_to(np.asarray(self.albedo, dtype=np.float64), (m, 3))
        value = np.where(enter[:, None], tw * albedo * INV_PI,
                         self.eval(n, wi, wo, albedo))
        value = np.where(ok[:, None], value, 0.0)
        return {"wi": wi, "pdf": pdf, "value": value,
                "lobe": np.where(enter, LOBE_ENTER, LOBE_REFLECT),
                "cos": cos_local}


@dataclass(frozen=True)
class FiberMaterial:
    """Longitudinal specular lobe times an h-dependent azimuthal factor.

    az(h) = max(0, 1 + gain * h * cos(dphi/2)) / (1 + gain) where dphi is
    the azimuth between the projections of wi and wo onto the plane normal
    to the fiber.  The 1/(1+gain) normalization bounds the energy at
    base_color regardless of gain.
    """

    base_color: tuple = (0.8, 0.6, 0.3)
    longitudinal_roughness: float = 0.3
    azimuthal_gain: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.longitudinal_roughness <= 1.0:
            raise MaterialError("longitudinal_roughness must lie in (0, 1]")
        if self.azimuthal_gain < 0.0:
            raise MaterialError("azimuthal_gain must be non-negative")

    def eval(self, d, h, wi, wo) -> np.ndarray:
        d = np.atleast_2d(np.asarray(d, dtype=np.float64))
        wi = np.atleast_2d(np.asarray(wi, dtype=np.float64))
        wo = np.atleast_2d(np.asarray(wo, dtype=np.float64))
        for v, name in ((d, "d"), (wi, "wi"), (wo, "wo")):
            _unit_check(v, name)
        h = np.atleast_1d(np.asarray(h, dtype=np.float64))
        if np.any(np.abs(h) > 1.0 + 1e-9):
            raise MaterialError("h must lie in [-1, 1]")
        beta = self.longitudinal_roughness
        sin_ti = np.sum(wi * d, axis=1)
        sin_to = np.sum(wo * d, axis=1)
        longi = np.exp(-((sin_ti + sin_to) ** 2) / (2.0 * beta * beta))
        pi_ = wi - sin_ti[:, None] * d
        po_ = wo - sin_to[:, None] * d
        ni = np.linalg.norm(pi_, axis=1)
        no = np.linalg.norm(po_, axis=1)
        denom = np.maximum(ni * no, 1e-12)
        cos_dphi = np.clip(np.sum(pi_ * po_, axis=1) / denom, -1.0, 1.0)
        cos_half = np.sqrt(0.5 * (1.0 + cos_dphi))
        gain = self.azimuthal_gain
        az = np.maximum(0.0, 1.0 + gain * h * cos_half) / (1.0 + gain)
        base = np.asarray(self.base_color, dtype=np.float64)
        f = INV_4PI * (FIBER_DIFFUSE_SHARE + FIBER_SPECULAR_SHARE * longi) * az
        return base * f[:, None]

    def sample(self, d, h, wo, rng) -> dict:
        """Uniform-sphere fallback sampling, pdf = 1/(4 pi)."""
        d = np.atleast_2d(np.asarray(d, dtype=np.float64))
        wo = np.atleast_2d(np.asarray(wo, dtype=np.float64))
        m = len(d)
        wi = uniform_sphere(rng.random((m, 2)))
        pdf = np.full(m, INV_4PI)
        return {"wi": wi, "pdf": pdf, "value": self.eval(d, h, wi, wo),
                "lobe": np.full(m, LOBE_REFLECT), "cos": np.ones(m)}


# -- shared direction samplers ----------------------------------------------

def cosine_hemisphere(n, u) -> tuple[np.ndarray, np.ndarray]:
    """Cosine-weighted directions about n (rows); returns (dir, cos)."""
    t, s = orthonormal_basis(n)
    r = np.sqrt(u[:, 0])
    phi = 2.0 * np.pi * u[:, 1]
    x = r * np.cos(phi)
    y = r * np.sin(phi)
    z = np.sqrt(np.maximum(0.0, 1.0 - u[:, 0]))
    dirs = x[:, None] * t + y[:, None] * s + z[:, None] * n
    return normalize(dirs), z


def uniform_sphere(u) -> np.ndarray:
    z = 1.0 - 2.0 * u[:, 0]
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * u[:, 1]
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def uniform_hemisphere(n, u) -> np.ndarray:
    dirs = uniform_sphere(u)
    flip = np.sum(dirs * n, axis=1) < 0.0
    dirs[flip] = -dirs[flip]
    return dirs


def sample_bsdf(material, frame: dict, wo, rng) -> dict:
    """Spec-level sampling entry point; frame carries n or (d, h)."""
    if isinstance(material, SurfaceMaterial):
        return material.sample(frame["n"], wo, rng)
    if isinstance(material, FiberMaterial):
        return material.sample(frame["d"], frame["h"], wo, rng)
    raise MaterialError(f"unknown material type {type(material)!r}")
