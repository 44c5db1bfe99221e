import copy

import numpy as np
import pytest
from scipy import stats

from relight import neural, transport
from relight.datagen import Camera
from relight.geometry import Instance, Ray, Scene, normalize
from relight.integrator import (
    DirectionalLight, EnvironmentLight, PointLight, RectLight, RenderConfig,
    RenderError, mis_weight, render, sample_light, shade_neural, trace_shadow,
    trace_paths,
)
from relight.materials import SurfaceMaterial
from relight.procedural import IDENTITY_TRANSFORM
from relight.rng import stream
from relight.sceneio import build_scene


def neural_scene(toy, transform=None, lights=(), extra=()):
    doc = toy["doc"]
    geo = doc["instances"][0]
    inst = Instance(id=0, geometry=("sphere_set", geo["centers"], geo["radii"]),
                    object_to_world=np.asarray(transform if transform is not None
                                               else IDENTITY_TRANSFORM, dtype=np.float64),
                    neural_asset=toy["asset"])
    instances = [inst] + list(extra)
    mats = {"white": SurfaceMaterial(albedo=(0.8, 0.8, 0.8))}
    return Scene(instances, lights=list(lights), materials=mats)


def ground_plane(iid=1, z=-1.2, half=6.0, material="white"):
    verts = [[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]]
    return Instance(id=iid, geometry=("mesh", verts, [[0, 1, 2], [0, 2, 3]]),
                    object_to_world=np.asarray(IDENTITY_TRANSFORM, dtype=np.float64),
                    material=material)


def test_mis_weight_examples():
    assert mis_weight(1.0, 1.0) == 0.5
    assert mis_weight(2.0, 0.0) == 1.0
    a, b = 0.3, 1.7
    assert mis_weight(a, b) + mis_weight(b, a) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(RenderError):
        mis_weight(0.0, 0.0)


def test_sample_light_directional_and_point():
    rng = stream(0, "lights")
    wi, dist, weight, pdf, delta = sample_light(
        DirectionalLight(direction=(0, 0, -1), irradiance=(2.0, 3.0, 4.0)),
        np.zeros(3), rng)
    assert delta and np.isinf(dist)
    assert np.allclose(wi, [0, 0, 1]) and np.allclose(weight, [2, 3, 4])

    wi, dist, weight, pdf, delta = sample_light(
        PointLight(position=(0, 0, 2), intensity=(8.0, 8.0, 8.0)),
        np.zeros(3), rng)
    assert delta and dist == pytest.approx(2.0)
    assert np.allclose(weight, 8.0 / 4.0)   # E = I / r^2


def test_environment_cdf_histogram_matches_luminance():
    rng = stream(1, "env")
    img = stream(2, "envimg").random((8, 16, 3)) ** 2
    env = EnvironmentLight(img)
    n = 1_000_000
    dirs, pdf, rad = env.sample(n, rng)
    row, col = env.texel_of(dirs)
    counts = np.bincount(row * 16 + col, minlength=8 * 16)
    expected = env.pmf * n
    chi2 = np.sum((counts - expected) ** 2 / expected)
    p = 1.0 - stats.chi2.cdf(chi2, df=8 * 16 - 1)
    assert p > 0.01


def test_environment_pdf_integrates_to_one():
    img = stream(3, "envimg2").random((6, 12, 3))
    env = EnvironmentLight(img)
    rng = stream(4, "mc")
    n = 200_000
    u = rng.random((n, 2))
    z = 1.0 - 2.0 * u[:, 0]
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * u[:, 1]
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    est = env.pdf(dirs).mean() * 4.0 * np.pi
    assert est == pytest.approx(1.0, abs=0.02)


def test_trace_shadow_self_hint(toy_trained):
    scene = neural_scene(toy_trained)
    # a point on the central sphere, light direction grazing through knobs
    hit = scene.intersect(Ray(np.array([0.0, -3.0, 0.0]), np.array([0.0, 1.0, 0.0])))
    assert hit is not None
    toward = normalize(np.array([1.0, 0.4, 0.1]))
    trans, hint = trace_shadow(scene, hit, toward)
    assert trans == 1           # nothing but the asset itself in the scene
    straight_up = np.array([0.0, -1.0, 0.0])
    trans2, hint2 = trace_shadow(scene, hit, straight_up)
    assert (trans2, hint2) == (1, 0)


def test_trace_shadow_blocked_by_other_instance(toy_trained):
    blocker = Instance(id=7, geometry=("sphere",),
                       object_to_world=np.array([[0.4, 0, 0], [0, 0.4, 0],
                                                 [0, 0, 0.4], [0, -2.0, 0.0]]),
                       material="white")
    scene = neural_scene(toy_trained, extra=[blocker])
    hit = scene.intersect(Ray(np.array([0.0, -3.0, 0.0]), np.array([0.0, 1.0, 0.0])))
    assert hit is not None and hit.instance_id == 7
    hit_asset = scene.intersect(Ray(np.array([0.0, -1.4, 0.0]), np.array([0.0, 1.0, 0.0])))
    assert hit_asset.instance_id == 0
    trans, hint = trace_shadow(scene, hit_asset, np.array([0.0, -1.0, 0.0]))
    assert trans == 0


def test_shade_neural_delegates_and_is_frame_sensitive(toy_trained):
    scene = neural_scene(toy_trained)
    asset = toy_trained["asset"]
    pos = np.array([[0.1, -0.45, 0.2]])
    wo = normalize(np.array([[0.0, -1.0, 0.2]]))
    wi = normalize(np.array([[0.3, -0.8, 0.5]]))
    n = normalize(np.array([[0.1, -0.9, 0.4]]))
    lit, shadowed = shade_neural(scene, 0, pos, wo, wi, normal=n)
    direct = neural.evaluate(asset, pos, wo, wi, normal=n)
    assert np.allclose(lit, direct[0], atol=1e-12)
    assert np.allclose(shadowed, direct[1], atol=1e-12)

    # a rotated instance must transform queries into training space
    rot = np.array([[0.0, 1, 0], [-1.0, 0, 0], [0.0, 0, 1], [0.0, 0, 0]])
    scene_rot = neural_scene(toy_trained, transform=rot)
    lit_rot, _ = shade_neural(scene_rot, 0, pos, wo, wi, normal=n)
    assert not np.allclose(lit_rot, lit, atol=1e-6)


def test_render_nothing_visible_is_black():
    mats = {"white": SurfaceMaterial(albedo=(0.8, 0.8, 0.8))}
    inst = Instance(id=0, geometry=("sphere",),
                    object_to_world=np.asarray(IDENTITY_TRANSFORM, dtype=np.float64),
                    material="white")
    scene = Scene([inst], lights=[DirectionalLight((0, 0, -1), (1, 1, 1))],
                  materials=mats)
    camera = Camera.look_at(np.array([0.0, -8.0, 0.0]), np.array([0.0, -20.0, 0.0]),
                            0.6)
    img = render(scene, RenderConfig(resolution=16, spp=2, seed=0), camera)
    assert np.all(img.rgb == 0.0) and np.all(img.alpha == 0.0)


def test_render_doubling_irradiance_doubles_image(toy_trained):
    camera = Camera.look_at(np.array([0.0, -2.2, 0.6]), np.zeros(3), 0.9)
    base = DirectionalLight((0.3, 0.8, -0.5), (1.0, 1.0, 1.0))
    double = DirectionalLight((0.3, 0.8, -0.5), (2.0, 2.0, 2.0))
    cfg = RenderConfig(resolution=24, spp=2, max_depth=1, seed=3)
    img1 = render(neural_scene(toy_trained, lights=[base]), cfg, camera)
    img2 = render(neural_scene(toy_trained, lights=[double]), cfg, camera)
    assert np.array_equal(img2.rgb, 2.0 * img1.rgb)


def test_render_self_copy_bitwise_invariant(toy_trained):
    camera = Camera.look_at(np.array([0.0, -2.2, 0.6]), np.zeros(3), 0.9)
    light = DirectionalLight((0.2, 0.9, -0.4), (1.0, 1.0, 1.0))
    cfg = RenderConfig(resolution=24, spp=4, max_depth=3, seed=5)
    img1 = render(neural_scene(toy_trained, lights=[light]), cfg, camera)

    doc = toy_trained["doc"]
    geo = doc["instances"][0]
    doubled = Instance(
        id=0, geometry=("sphere_set", list(geo["centers"]) + list(geo["centers"]),
                        list(geo["radii"]) + list(geo["radii"])),
        object_to_world=np.asarray(IDENTITY_TRANSFORM, dtype=np.float64),
        neural_asset=toy_trained["asset"])
    scene2 = Scene([doubled], lights=[light],
                   materials={"white": SurfaceMaterial()})
    img2 = render(scene2, cfg, camera)
    assert np.array_equal(img1.rgb, img2.rgb)
    assert np.array_equal(img1.alpha, img2.alpha)


def test_render_hint_selection_matches_instrumented_queries(toy_trained):
    scene = neural_scene(toy_trained,
                         lights=[DirectionalLight((0.5, 0.7, -0.3), (1, 1, 1))])
    camera = Camera.look_at(np.array([0.0, -2.2, 0.6]), np.zeros(3), 0.9)
    res = 24
    px = (np.arange(res * res) % res + 0.5).astype(np.float64)
    py = (np.arange(res * res) // res + 0.5).astype(np.float64)
    origins, dirs = camera.rays(res, res, px, py)
    debug = {}
    cfg = RenderConfig(resolution=res, spp=1, max_depth=2, seed=1)
    rng = stream(cfg.seed, "debug")
    trace_paths(scene, origins, dirs, rng, cfg, debug=debug)
    idx, hints, trans = debug["hint"]
    hits = scene.intersect_batch(origins, dirs)
    wi = -normalize(np.asarray([0.5, 0.7, -0.3]))
    checked = 0
    for row, i in enumerate(idx):
        if not hits.valid[i]:
            continue
        t, h = trace_shadow(scene, hits.to_hit(int(i)), wi)
        assert (trans[row], hints[row]) == (t, h)
        checked += 1
    assert checked > 50


def test_estimator_strategies_agree_on_diffuse_scene():
    mats = {"grey": SurfaceMaterial(albedo=(0.6, 0.6, 0.6), roughness=1.0)}
    sphere = Instance(id=0, geometry=("sphere",),
                      object_to_world=np.asarray(IDENTITY_TRANSFORM, dtype=np.float64),
                      material="grey")
    light = RectLight(corner=(-1.5, -1.5, 3.0), edge_u=(3.0, 0, 0),
                      edge_v=(0, 3.0, 0), radiance=(4.0, 4.0, 4.0))
    scene = Scene([sphere, ground_plane(material="grey")], lights=[light],
                  materials=mats)
    camera = Camera.look_at(np.array([0.0, -4.0, 1.5]), np.zeros(3), 0.7)

    means = {}
    ses = {}
    for strategy in ("light", "bsdf", "mis"):
        runs = []
        for seed in range(4):
            cfg = RenderConfig(resolution=12, spp=512, max_depth=3, seed=seed,
                               direct_strategy=strategy)
            runs.append(render(scene, cfg, camera).rgb.mean())
        runs = np.asarray(runs)
        means[strategy] = runs.mean()
        ses[strategy] = runs.std(ddof=1) / np.sqrt(len(runs))
    for a in ("light", "bsdf"):
        diff = abs(means[a] - means["mis"])
        bound = 3.0 * np.sqrt(ses[a] ** 2 + ses["mis"] ** 2) + 1e-4
        assert diff < bound, (a, means, ses)


def test_asset_kind_mismatch_rejected(toy_trained):
    bad = copy.copy(toy_trained["asset"])
    bad.kind = "fiber"
    inst = Instance(id=0, geometry=("sphere",),
                    object_to_world=np.asarray(IDENTITY_TRANSFORM, dtype=np.float64),
                    neural_asset=bad)
    scene = Scene([inst], lights=[], materials={})
    camera = Camera.look_at(np.array([0.0, -3.0, 0.0]), np.zeros(3), 0.7)
    with pytest.raises(RenderError, match="kind"):
        render(scene, RenderConfig(resolution=4, spp=1), camera)


def test_two_asset_instances_shadow_each_other(toy_trained):
    shift = np.zeros((4, 3))
    shift[:3] = np.eye(3)
    shift[3] = [2.4, 0.0, 0.0]
    doc = toy_trained["doc"]
    geo = doc["instances"][0]
    second = Instance(id=1, geometry=("sphere_set", geo["centers"], geo["radii"]),
                      object_to_world=shift, neural_asset=toy_trained["asset"])
    scene = neural_scene(toy_trained, extra=[second])
    # light direction passing through instance 1's central sphere
    hit = scene.intersect(Ray(np.array([0.0, -3.0, 0.0]), np.array([0.0, 1.0, 0.0])))
    assert hit.instance_id == 0
    toward = normalize(np.array([2.4, 0.0, 0.0]) - hit.position)
    trans, hint = trace_shadow(scene, hit, toward)
    assert trans == 0
