"""Central finite-difference verification of every hand-rolled gradient.

Runs the same code paths as training but instantiated in float64.  Each
check builds a scalar objective, computes analytic gradients through
mlp_backward / triplane_query_grad, then sweeps every parameter with
central differences.  Relative error uses a small absolute floor so
legitimately zero gradients (dead ReLU units) compare cleanly.
"""

from __future__ import annotations

import numpy as np

from . import neural, trainer

FD_EPS = 1e-5
REL_FLOOR = 1e-8

# tolerances per parameter class (see the acceptance gate)
TOL_MLP = 1e-6
TOL_TRIPLANE = 1e-6
TOL_END_TO_END = 1e-5
TOL_LOSS = 1e-4


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)
    return float(np.max(np.abs(a - b) / scale))


def fd_gradient(objective, arr: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Central differences of a scalar objective over every element of arr."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        f_plus = objective()
        flat[i] = keep - eps
        f_minus = objective()
        flat[i] = keep
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def _toy_asset(seed: int, kind: str = "surface") -> neural.NeuralAsset:
    return neural.init_asset(kind, bounds_lo=(-1, -1, -1), bounds_hi=(1, 1, 1),
                             resolution=6, channels=3, hidden_layers=2,
                             hidden_width=8, seed=seed, dtype=np.float64)


def _toy_inputs(asset, seed: int, n: int = 5):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.9, 0.9, size=(n, 3))
    wo = _unit(rng.normal(size=(n, 3)))
    wi = _unit(rng.normal(size=(n, 3)))
    normal = _unit(rng.normal(size=(n, 3)))
    upstream = rng.normal(size=(n, 6))
    target = rng.uniform(0.0, 2.0, size=(n, 3))
    vis = rng.random(n) > 0.5
    return x, wo, wi, normal, upstream, target, vis


def _unit(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _relu_margin(asset, xi) -> float:
    """Smallest |pre-activation|; FD through a kink would be invalid."""
    _, _, cache = neural.mlp_forward(asset.mlp, xi, want_cache=True)
    return min(float(np.min(np.abs(p))) for p in cache["pre"])


def check_mlp(seed: int = 0) -> dict:
    """MLP weight/bias/input gradients vs central differences (float64)."""
    for attempt in range(16):
        asset = _toy_asset(seed + attempt)
        x, wo, wi, normal, upstream, _, _ = _toy_inputs(asset, seed + attempt + 100)
        feat = neural.triplane_query(asset.grid, x)
        xi = np.concatenate(
            [feat, neural.property_vector("surface", wo, wi, normal)], axis=1)
        if _relu_margin(asset, xi) > 1e-3:
            break
    lit, shadowed, cache = neural.mlp_forward(asset.mlp, xi, want_cache=True)
    grads, dxi = neural.mlp_backward(asset.mlp, cache, upstream)

    def objective():
        a, b = neural.mlp_forward(asset.mlp, xi)
        return float(np.sum(upstream * np.concatenate([a, b], axis=1)))

    errors = {}
    for name, arr in asset.params().items():
        if name.startswith("zeta"):
            continue
        errors[f"mlp/{name}"] = rel_error(fd_gradient(objective, arr), grads[name])
    errors["mlp/input"] = rel_error(fd_gradient(objective, xi), dxi)
    return errors


def check_triplane(seed: int = 0) -> dict:
    """Texel gradients of the bilinear query vs central differences."""
    asset = _toy_asset(seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(-0.9, 0.9, size=(7, 3))
    upstream = rng.normal(size=(7, asset.grid.channels))
    analytic = neural.triplane_query_grad(asset.grid, x, upstream)

    def objective():
        return float(np.sum(upstream * neural.triplane_query(asset.grid, x)))

    errors = {}
    for name in neural.PLANE_NAMES:
        arr = asset.grid.planes()[name]
        errors[f"triplane/{name}"] = rel_error(fd_gradient(objective, arr), analytic[name])
    return errors


def check_end_to_end(seed: int = 0) -> dict:
    """Gradients through query -> concat -> MLP, w.r.t. the grid texels."""
    for attempt in range(16):
        asset = _toy_asset(seed + attempt)
        x, wo, wi, normal, upstream, _, _ = _toy_inputs(asset, seed + attempt + 200)
        feat = neural.triplane_query(asset.grid, x)
        xi = np.concatenate(
            [feat, neural.property_vector("surface", wo, wi, normal)], axis=1)
        if _relu_margin(asset, xi) > 1e-3:
            break

    def forward_scalar():
        lit, shadowed = neural.evaluate(asset, x, wo, wi, normal=normal)
        return float(np.sum(upstream * np.concatenate([lit, shadowed], axis=1)))

    lit, shadowed, cache, xi = neural.evaluate(asset, x, wo, wi, normal=normal,
                                               want_cache=True)
    _, dxi = neural.mlp_backward(asset.mlp, cache, upstream)
    analytic = neural.triplane_query_grad(asset.grid, x, dxi[:, :asset.grid.channels])
    errors = {}
    for name in neural.PLANE_NAMES:
        arr = asset.grid.planes()[name]
        errors[f"end_to_end/{name}"] = rel_error(fd_gradient(forward_scalar, arr),
                                                 analytic[name])
    return errors


def check_loss_gradients(seed: int = 0) -> dict:
    """Training-loss gradients w.r.t. every parameter class (float64)."""
    for attempt in range(16):
        asset = _toy_asset(seed + attempt)
        x, wo, wi, normal, _, target, vis = _toy_inputs(asset, seed + attempt + 300)
        feat = neural.triplane_query(asset.grid, x)
        xi = np.concatenate(
            [feat, neural.property_vector("surface", wo, wi, normal)], axis=1)
        if _relu_margin(asset, xi) > 1e-3:
            break

    def loss_scalar():
        lit, shadowed = neural.evaluate(asset, x, wo, wi, normal=normal)
        return trainer.loss(lit, shadowed, target, vis)

    lit, shadowed, cache, xi = neural.evaluate(asset, x, wo, wi, normal=normal,
                                               want_cache=True)
    _, dlit, dsh = trainer.loss_and_grads(lit, shadowed, target, vis)
    grads, dxi = neural.mlp_backward(asset.mlp, cache,
                                     np.concatenate([dlit, dsh], axis=1))
    grads.update(neural.triplane_query_grad(asset.grid, x,
                                            dxi[:, :asset.grid.channels]))
    errors = {}
    for name, arr in asset.params().items():
        errors[f"loss/{name}"] = rel_error(fd_gradient(loss_scalar, arr), grads[name])
    return errors


def run_suite(seed: int = 0) -> tuple[dict, bool]:
    """All checks with their tolerances; returns (report, all_passed)."""
    report = {}
    for errors, tol in ((check_mlp(seed), TOL_MLP),
                        (check_triplane(seed), TOL_TRIPLANE),
                        (check_end_to_end(seed), TOL_END_TO_END),
                        (check_loss_gradients(seed), TOL_LOSS)):
        for name, err in errors.items():
            report[name] = (err, tol, err < tol)
    return report, all(ok for _, _, ok in report.values())
