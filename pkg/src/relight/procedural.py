"""Procedural desk-scale test assets.

Two generators cover the pipeline: a knobby translucent sphere cluster with
crevices (self-shadowing plus subsurface-style transmission) and a curved
fiber clump whose material varies across the fiber width.  Both emit the
scene-description dict form consumed by sceneio, so they can be written to
JSON or built in memory.
"""

from __future__ import annotations

import numpy as np

from .rng import stream

IDENTITY_TRANSFORM = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
                      [0.0, 0.0, 0.0]]


def knobby_surface_scene(seed: int = 0, knobs: int = 8) -> dict:
    """Central sphere with a ring of embedded knobs; translucent proxy."""
    rng = stream(seed, "knobby")
    centers = [[0.0, 0.0, 0.0]]
    radii = [0.5]
    for k in range(knobs):
        phi = 2.0 * np.pi * k / knobs
        ring = 0.52 + 0.04 * rng.random()
        z = 0.18 if k % 2 == 0 else -0.18
        centers.append([ring * np.cos(phi), ring * np.sin(phi), z])
        radii.append(0.24 + 0.05 * rng.random())
    centers.append([0.0, 0.0, 0.55])
    radii.append(0.28)
    return {
        "camera": {"origin": [2.2, 0.0, 0.9], "look_at": [0.0, 0.0, 0.0],
                   "fov_degrees": 45.0},
        "materials": {
            "proxy": {
                "type": "surface",
                "albedo": {"checker": {"colors": [[0.75, 0.35, 0.25],
                                                  [0.30, 0.45, 0.75]],
                                       "scale": 3.0}},
                "roughness": 0.55,
                "translucency_weight": 0.35,
                "translucency_mfp": [0.30, 0.20, 0.15],
            },
        },
        "instances": [{
            "type": "sphere_set",
            "transform": IDENTITY_TRANSFORM,
            "material": "proxy",
            "centers": [[float(v) for v in c] for c in centers],
            "radii": [float(r) for r in radii],
        }],
        "lights": [],
    }


def fiber_clump_scene(seed: int = 0, strands: int = 40, segments: int = 5,
                      azimuthal_gain: float = 1.0) -> dict:
    """Curved strand bundle: strands * segments fiber cylinders."""
    rng = stream(seed, "clump")
    polylines = []
    for _ in range(strands):
        r0 = 0.16 * np.sqrt(rng.random())
        phi = 2.0 * np.pi * rng.random()
        base = np.array([r0 * np.cos(phi), r0 * np.sin(phi), -0.45])
        lean = np.array([rng.normal(0, 0.16), rng.normal(0, 0.16), 0.9])
        bend = np.array([rng.normal(0, 0.22), rng.normal(0, 0.22), 0.0])
        ts = np.linspace(0.0, 1.0, segments + 1)
        pts = base[None] + ts[:, None] * lean[None] + (ts**2)[:, None] * bend[None]
        polylines.append([[float(v) for v in p] for p in pts])
    return {
        "camera": {"origin": [1.8, 0.4, 0.5], "look_at": [0.0, 0.0, 0.0],
                   "fov_degrees": 40.0},
        "materials": {
            "strand": {
                "type": "fiber",
                "base_color": [0.85, 0.65, 0.35],
                "longitudinal_roughness": 0.25,
                "azimuthal_gain": float(azimuthal_gain),
            },
        },
        "instances": [{
            "type": "fiber_set",
            "transform": IDENTITY_TRANSFORM,
            "material": "strand",
            "polylines": polylines,
            "fiber_radius": 0.02,
        }],
        "lights": [],
    }


def diffuse_sphere_scene(albedo=(0.7, 0.7, 0.7)) -> dict:
    """A single Lambertian unit sphere: the analytic-direct-lighting oracle."""
    return {
        "camera": {"origin": [0.0, -4.0, 0.0], "look_at": [0.0, 0.0, 0.0],
                   "fov_degrees": 35.0},
        "materials": {
            "diffuse": {"type": "surface", "albedo": list(albedo),
                        "roughness": 1.0},
        },
        "instances": [{"type": "sphere", "transform": IDENTITY_TRANSFORM,
                       "material": "diffuse"}],
        "lights": [],
    }
