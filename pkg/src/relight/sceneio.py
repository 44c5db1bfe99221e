"""Scene description files: strict JSON schema -> Scene.

A document holds a `materials` table, an `instances` list (each with a 4x3
row-major affine transform: three linear rows then the translation), a
`lights` list and optional `camera` defaults.  Unknown keys are rejected
everywhere.  Instances reference either a named classical material or an
RNA1 neural asset file (resolved relative to the scene file).  See
formats.md for the normative schema.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import neural
from .datagen import Camera
from .formats import read_pfm
from .geometry import Instance, Scene
from .integrator import DirectionalLight, EnvironmentLight, PointLight, RectLight
from .materials import FiberMaterial, SurfaceMaterial


class SceneFormatError(ValueError):
    pass


def _require_keys(obj: dict, allowed: set, required: set, where: str):
    unknown = set(obj) - allowed
    if unknown:
        raise SceneFormatError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise SceneFormatError(f"{where}: missing keys {sorted(missing)}")


def _vec3(value, where: str) -> list:
    if not (isinstance(value, (list, tuple)) and len(value) == 3
            and all(isinstance(v, (int, float)) for v in value)):
        raise SceneFormatError(f"{where}: expected a 3-vector")
    return [float(v) for v in value]


def _parse_material(name: str, spec: dict):
    where = f"materials[{name!r}]"
    if not isinstance(spec, dict) or "type" not in spec:
        raise SceneFormatError(f"{where}: needs a 'type'")
    if spec["type"] == "surface":
        _require_keys(spec, {"type", "albedo", "roughness", "translucency_weight",
                             "translucency_mfp"}, {"type", "albedo"}, where)
        albedo = spec["albedo"]
        checker = None
        if isinstance(albedo, dict):
            _require_keys(albedo, {"checker"}, {"checker"}, f"{where}.albedo")
            ch = albedo["checker"]
            _require_keys(ch, {"colors", "scale"}, {"colors", "scale"},
                          f"{where}.albedo.checker")
            checker = (_vec3(ch["colors"][0], where), _vec3(ch["colors"][1], where),
                       float(ch["scale"]))
            albedo_rgb = (0.5, 0.5, 0.5)
        else:
            albedo_rgb = tuple(_vec3(albedo, where))
        return SurfaceMaterial(
            albedo=albedo_rgb,
            roughness=float(spec.get("roughness", 1.0)),
            translucency_weight=float(spec.get("translucency_weight", 0.0)),
            translucency_mfp=tuple(spec.get("translucency_mfp", (0.1, 0.1, 0.1))),
            checker=checker)
    if spec["type"] == "fiber":
        _require_keys(spec, {"type", "base_color", "longitudinal_roughness",
                             "azimuthal_gain"}, {"type", "base_color"}, where)
        return FiberMaterial(
            base_color=tuple(_vec3(spec["base_color"], where)),
            longitudinal_roughness=float(spec.get("longitudinal_roughness", 0.3)),
            azimuthal_gain=float(spec.get("azimuthal_gain", 0.0)))
    raise SceneFormatError(f"{where}: unknown material type {spec['type']!r}")


def _parse_transform(value, where: str) -> np.ndarray:
    if value is None:
        m = np.zeros((4, 3))
        m[:3] = np.eye(3)
        return m
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (4, 3):
        raise SceneFormatError(f"{where}: transform must be 4 rows of 3 reals")
    if abs(np.linalg.det(arr[:3])) < 1e-12:
        raise SceneFormatError(f"{where}: transform is not invertible")
    return arr


_GEOMETRY_KEYS = {
    "sphere": set(),
    "sphere_set": {"centers", "radii"},
    "mesh": {"vertices", "triangles"},
    "fiber_set": {"polylines", "fiber_radius"},
}


def _parse_instance(index: int, spec: dict, base_dir: str) -> Instance:
    where = f"instances[{index}]"
    if not isinstance(spec, dict) or "type" not in spec:
        raise SceneFormatError(f"{where}: needs a 'type'")
    kind = spec["type"]
    if kind not in _GEOMETRY_KEYS:
        raise SceneFormatError(f"{where}: unknown geometry type {kind!r}")
    geo_keys = _GEOMETRY_KEYS[kind]
    _require_keys(spec, {"type", "transform", "material", "neural_asset"} | geo_keys,
                  {"type"} | geo_keys, where)
    has_mat = "material" in spec
    has_asset = "neural_asset" in spec
    if has_mat == has_asset:
        raise SceneFormatError(
            f"{where}: exactly one of 'material' or 'neural_asset' required")
    if kind == "sphere":
        geometry = ("sphere",)
    elif kind == "sphere_set":
        geometry = ("sphere_set", spec["centers"], spec["radii"])
    elif kind == "mesh":
        geometry = ("mesh", spec["vertices"], spec["triangles"])
    else:
        geometry = ("fiber_set", spec["polylines"], spec["fiber_radius"])
    asset = None
    if has_asset:
        asset = neural.load_asset(os.path.join(base_dir, spec["neural_asset"]))
    return Instance(id=index, geometry=geometry,
                    object_to_world=_parse_transform(spec.get("transform"), where),
                    material=spec.get("material"), neural_asset=asset)


def _parse_light(index: int, spec: dict, base_dir: str):
    where = f"lights[{index}]"
    if not isinstance(spec, dict) or "type" not in spec:
        raise SceneFormatError(f"{where}: needs a 'type'")
    kind = spec["type"]
    if kind == "directional":
        _require_keys(spec, {"type", "direction", "irradiance"},
                      {"type", "direction", "irradiance"}, where)
        return DirectionalLight(direction=tuple(_vec3(spec["direction"], where)),
                                irradiance=tuple(_vec3(spec["irradiance"], where)))
    if kind == "point":
        _require_keys(spec, {"type", "position", "intensity"},
                      {"type", "position", "intensity"}, where)
        return PointLight(position=tuple(_vec3(spec["position"], where)),
                          intensity=tuple(_vec3(spec["intensity"], where)))
    if kind == "rect":
        _require_keys(spec, {"type", "corner", "edge_u", "edge_v", "radiance"},
                      {"type", "corner", "edge_u", "edge_v", "radiance"}, where)
        return RectLight(corner=tuple(_vec3(spec["corner"], where)),
                         edge_u=tuple(_vec3(spec["edge_u"], where)),
                         edge_v=tuple(_vec3(spec["edge_v"], where)),
                         radiance=tuple(_vec3(spec["radiance"], where)))
    if kind == "environment":
        _require_keys(spec, {"type", "image", "scale"}, {"type", "image"}, where)
        image = spec["image"]
        if isinstance(image, str):
            image = read_pfm(os.path.join(base_dir, image)).rgb
        else:
            image = np.asarray(image, dtype=np.float64)
        return EnvironmentLight(image=image, scale=spec.get("scale", 1.0))
    raise SceneFormatError(f"{where}: unknown light type {kind!r}")


def build_scene(doc: dict, base_dir: str = ".") -> tuple[Scene, dict | None]:
    """Validated document -> (Scene, camera spec or None)."""
    if not isinstance(doc, dict):
        raise SceneFormatError("scene document must be a JSON object")
    _require_keys(doc, {"camera", "materials", "instances", "lights"},
                  {"instances"}, "scene")
    camera = doc.get("camera")
    if camera is not None:
        _require_keys(camera, {"origin", "look_at", "up", "fov_degrees"},
                      {"origin", "look_at", "fov_degrees"}, "camera")
    materials = {name: _parse_material(name, spec)
                 for name, spec in doc.get("materials", {}).items()}
    instances = [_parse_instance(i, spec, base_dir)
                 for i, spec in enumerate(doc["instances"])]
    for inst in instances:
        if inst.material is not None and inst.material not in materials:
            raise SceneFormatError(
                f"instances[{inst.id}]: unknown material {inst.material!r}")
    lights = [_parse_light(i, spec, base_dir)
              for i, spec in enumerate(doc.get("lights", []))]
    return Scene(instances, lights=lights, materials=materials), camera


def load_scene(path) -> tuple[Scene, dict | None]:
    with open(path) as f:
        doc = json.load(f)
    return build_scene(doc, base_dir=os.path.dirname(os.path.abspath(path)))


def save_scene(doc: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def camera_from_spec(spec: dict) -> Camera:
    """Render camera from the scene's camera section."""
    if spec is None:
        raise SceneFormatError("scene has no camera section")
    return Camera.look_at(np.asarray(spec["origin"], dtype=np.float64),
                          np.asarray(spec["look_at"], dtype=np.float64),
                          np.radians(float(spec["fov_degrees"])),
                          up_hint=tuple(spec.get("up", (0.0, 0.0, 1.0))))
