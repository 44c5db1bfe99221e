"""Triplane feature grid + MLP decoder with hand-rolled gradients.

The representation sums bilinear lookups from three axis-aligned feature
planes (XY, YZ, ZX), concatenates the result with the shading properties
(directions plus normal, or tangent and fiber offset) and decodes through a
small ReLU MLP with two softplus RGB heads: one for the light-visible case
and one for the self-shadowed case.  Training and evaluation run in float32;
the finite-difference harness instantiates everything in float64.

Asset files ("RNA1"): magic, u32 version, u32 header length, UTF-8 JSON
header, then raw float32 little-endian tensors in header-declared order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

RNA1_MAGIC = b"RNA1"
RNA1_VERSION = 1

DEFAULT_RESOLUTION = 512
DESK_RESOLUTION = 64
DEFAULT_CHANNELS = 8

PLANE_NAMES = ("zeta_xy", "zeta_yz", "zeta_zx")


class AssetFormatError(ValueError):
    pass


@dataclass
class TriplaneGrid:
    """Three R x R x C feature tables plus the world-to-unit-cube box."""

    zeta_xy: np.ndarray
    zeta_yz: np.ndarray
    zeta_zx: np.ndarray
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray

    @property
    def resolution(self) -> int:
        return self.zeta_xy.shape[0]

    @property
    def channels(self) -> int:
        return self.zeta_xy.shape[2]

    def planes(self) -> dict:
        return {"zeta_xy": self.zeta_xy, "zeta_yz": self.zeta_yz, "zeta_zx": self.zeta_zx}


@dataclass
class MlpParams:
    weights: list            # layer i: (fan_in, fan_out)
    biases: list

    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]


@dataclass
class NeuralAsset:
    """Deployable artifact: feature grid, decoder weights and metadata."""

    grid: TriplaneGrid
    mlp: MlpParams
    kind: str                          # "surface" | "fiber"
    dual_output: bool = True
    use_h: bool = True                 # fiber offset input (ablation knob)
    metadata: dict = field(default_factory=dict)

    def property_size(self) -> int:
        if self.kind == "surface":
            return 9
        return 9 + (1 if self.use_h else 0)

    def input_size(self) -> int:
        return self.grid.channels + self.property_size()

    def param_count(self) -> int:
        n = sum(p.size for p in self.grid.planes().values())
        n += sum(w.size for w in self.mlp.weights)
        n += sum(b.size for b in self.mlp.biases)
        return n

    def params(self) -> dict:
        """Live views of every trainable array, in a fixed order."""
        out = dict(self.grid.planes())
        for i, (w, b) in enumerate(zip(self.mlp.weights, self.mlp.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out


def init_asset(kind: str, bounds_lo, bounds_hi, resolution: int = DESK_RESOLUTION,
               channels: int = DEFAULT_CHANNELS, hidden_layers: int = 4,
               hidden_width: int = 64, seed: int = 0, dual_output: bool = True,
               use_h: bool = True, dtype=np.float32) -> NeuralAsset:
    """He-uniform MLP weights, zero biases, N(0, 0.01^2) feature texels."""
    if kind not in ("surface", "fiber"):
        raise ValueError(f"unknown asset kind {kind!r}")
    rng = np.random.default_rng(seed)
    planes = [rng.normal(0.0, 0.01, size=(resolution, resolution, channels)).astype(dtype)
              for _ in range(3)]
    grid = TriplaneGrid(*planes, bounds_lo=np.asarray(bounds_lo, dtype=np.float64),
                        bounds_hi=np.asarray(bounds_hi, dtype=np.float64))
    asset = NeuralAsset(grid=grid, mlp=MlpParams([], []), kind=kind,
                        dual_output=dual_output, use_h=use_h)
    sizes = [asset.input_size()] + [hidden_width] * hidden_layers + \
        [6 if dual_output else 3]
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        asset.mlp.weights.append(
            rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        asset.mlp.biases.append(np.zeros(fan_out, dtype=dtype))
    return asset


# -- triplane ----------------------------------------------------------------

def _plane_coords(grid: TriplaneGrid, x: np.ndarray):
    """Per-plane integer cells and bilinear fractions for query/grad."""
    lo, hi = grid.bounds_lo, grid.bounds_hi
    u = np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    r = grid.resolution
    c = u * (r - 1)
    i0 = np.minimum(c.astype(np.int64), r - 2)
    f = c - i0
    # plane axes: xy -> (u, v), yz -> (v, w), zx -> (w, u)
    pairs = ((0, 1), (1, 2), (2, 0))
    return [(i0[:, a], i0[:, b], f[:, a], f[:, b]) for a, b in pairs]


def _bilinear_weights(fa, fb):
    return ((1 - fa) * (1 - fb), fa * (1 - fb), (1 - fa) * fb, fa * fb)


def triplane_query(grid: TriplaneGrid, x: np.ndarray) -> np.ndarray:
    """Sum of the three bilinearly interpolated plane features at x."""
    x = np.atleast_2d(x)
    out = np.zeros((len(x), grid.channels), dtype=grid.zeta_xy.dtype)
    for plane, (ia, ib, fa, fb) in zip(grid.planes().values(), _plane_coords(grid, x)):
        w00, w10, w01, w11 = _bilinear_weights(fa, fb)
        out = out + (w00[:, None] * plane[ia, ib] + w10[:, None] * plane[ia + 1, ib]
                     + w01[:, None] * plane[ia, ib + 1] + w11[:, None] * plane[ia + 1, ib + 1])
    return out


def triplane_query_grad(grid: TriplaneGrid, x: np.ndarray, upstream: np.ndarray) -> dict:
    """d(upstream . query)/d(texels): bilinear weights scattered to 4 texels
    per plane, accumulated over the batch (<= 12 touched texels per point)."""
    x = np.atleast_2d(x)
    upstream = np.atleast_2d(upstream)
    r, c = grid.resolution, grid.channels
    grads = {}
    for name, (ia, ib, fa, fb) in zip(PLANE_NAMES, _plane_coords(grid, x)):
        acc = np.zeros((r * r, c), dtype=np.float64)
        w00, w10, w01, w11 = _bilinear_weights(fa, fb)
        for di, dj, w in ((0, 0, w00), (1, 0, w10), (0, 1, w01), (1, 1, w11)):
            flat = (ia + di) * r + (ib + dj)
            vals = w[:, None] * upstream
            for ch in range(c):
                acc[:, ch] += np.bincount(flat, weights=vals[:, ch], minlength=r * r)
        grads[name] = acc.reshape(r, r, c).astype(grid.zeta_xy.dtype)
    return grads


def blur_grids(grid: TriplaneGrid, footprint: float) -> TriplaneGrid:
    """Separable normalized Gaussian blur of all three planes.

    sigma = footprint / 2, truncated at 3 sigma; footprint 1 is the identity
    so a converged grid is never smeared further.
    """
    if footprint < 1.0:
        raise ValueError("blur footprint must be >= 1 pixel")
    if footprint == 1.0:
        return grid
    kernel = gaussian_kernel(footprint)
    planes = []
    for plane in grid.planes().values():
        sm = convolve1d(plane.astype(np.float64), kernel, axis=0, mode="nearest")
        sm = convolve1d(sm, kernel, axis=1, mode="nearest")
        planes.append(sm.astype(plane.dtype))
    return TriplaneGrid(*planes, bounds_lo=grid.bounds_lo, bounds_hi=grid.bounds_hi)


def gaussian_kernel(footprint: float) -> np.ndarray:
    sigma = footprint / 2.0
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


# -- MLP ----------------------------------------------------------------------

def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def mlp_forward(params: MlpParams, xi: np.ndarray, want_cache: bool = False):
    """Affine+ReLU hidden layers, affine+softplus output (strictly positive).

    Returns (rgb_lit, rgb_shadowed) and optionally the activation cache for
    the backward pass.  Single-head decoders return the same triple twice.
    """
    xi = np.atleast_2d(xi)
    if xi.shape[1] != params.weights[0].shape[0]:
        raise ValueError(f"input size {xi.shape[1]} != expected "
                         f"{params.weights[0].shape[0]}")
    act = xi
    cache = {"inputs": [xi], "pre": []}
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = act @ w + b
        cache["pre"].append(pre)
        act = softplus(pre) if i == last else np.maximum(pre, 0.0)
        if i != last:
            cache["inputs"].append(act)
    out = act
    if out.shape[1] == 6:
        lit, shadowed = out[:, :3], out[:, 3:]
    else:
        lit = shadowed = out
    if want_cache:
        return lit, shadowed, cache
    return lit, shadowed


def mlp_backward(params: MlpParams, cache: dict, upstream: np.ndarray):
    """Exact reverse-mode gradients; upstream spans the raw output columns.

    Returns ({w_i, b_i gradients}, gradient w.r.t. the input xi).
    """
    grads = {}
    last = len(params.weights) - 1
    delta = upstream * _sigmoid(cache["pre"][last])
    for i in range(last, -1, -1):
        grads[f"w{i}"] = cache["inputs"][i].T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (cache["pre"][i - 1] > 0.0)
    dxi = delta @ params.weights[0].T
    return grads, dxi


# -- full decoder -------------------------------------------------------------

def property_vector(kind: str, wo, wi, normal=None, tangent=None, h=None,
                    use_h: bool = True) -> np.ndarray:
    """Extended shading point in training space: directions plus frame data."""
    wo = np.atleast_2d(wo)
    wi = np.atleast_2d(wi)
    if kind == "surface":
        if normal is None:
            raise ValueError("surface property vector requires the normal")
        return np.concatenate([wo, wi, np.atleast_2d(normal)], axis=1)
    if tangent is None:
        raise ValueError("fiber property vector requires the tangent")
    parts = [wo, wi, np.atleast_2d(tangent)]
    if use_h:
        if h is None:
            raise ValueError("fiber property vector requires h")
        parts.append(np.atleast_1d(h)[:, None])
    return np.concatenate(parts, axis=1)


def evaluate(asset: NeuralAsset, x, wo, wi, normal=None, tangent=None, h=None,
             want_cache: bool = False):
    """Full decode: grid query, property concat, MLP forward."""
    feat = triplane_query(asset.grid, x)
    props = property_vector(asset.kind, wo, wi, normal, tangent, h, asset.use_h)
    xi = np.concatenate([feat, props.astype(feat.dtype)], axis=1)
    result = mlp_forward(asset.mlp, xi, want_cache=want_cache)
    if want_cache:
        lit, shadowed, cache = result
        return lit, shadowed, cache, xi
    return result


# -- serialization ------------------------------------------------------------

def save_asset(asset: NeuralAsset, path) -> None:
    tensors = []
    arrays = []
    for name, arr in asset.params().items():
        tensors.append({"name": name, "shape": list(arr.shape)})
        arrays.append(np.ascontiguousarray(arr, dtype="<f4"))
    header = {
        "kind": asset.kind,
        "resolution": asset.grid.resolution,
        "channels": asset.grid.channels,
        "layer_sizes": asset.mlp.layer_sizes(),
        "dual_output": asset.dual_output,
        "use_h": asset.use_h,
        "bounds": [list(map(float, asset.grid.bounds_lo)),
                   list(map(float, asset.grid.bounds_hi))],
        "tensors": tensors,
        "metadata": asset.metadata,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with _maybe_open(path, "wb") as f:
        f.write(RNA1_MAGIC)
        f.write(struct.pack("<II", RNA1_VERSION, len(blob)))
        f.write(blob)
        for arr in arrays:
            f.write(arr.tobytes())


def _maybe_open(path_or_file, mode):
    if hasattr(path_or_file, "read") or hasattr(path_or_file, "write"):
        import contextlib
        return contextlib.nullcontext(path_or_file)
    return open(path_or_file, mode)


def load_asset(path) -> NeuralAsset:
    with _maybe_open(path, "rb") as f:
        magic = f.read(4)
        if magic != RNA1_MAGIC:
            raise AssetFormatError(f"not an RNA1 asset: bad magic {magic!r}")
        raw = f.read(8)
        if len(raw) != 8:
            raise AssetFormatError("truncated asset header")
        version, hlen = struct.unpack("<II", raw)
        if version != RNA1_VERSION:
            raise AssetFormatError(f"unsupported RNA1 version {version}")
        blob = f.read(hlen)
        if len(blob) != hlen:
            raise AssetFormatError("truncated asset header")
        header = json.loads(blob.decode("utf-8"))
        arrays = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape))
            raw = f.read(count * 4)
            if len(raw) != count * 4:
                raise AssetFormatError(f"truncated tensor {spec['name']!r}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    grid = TriplaneGrid(arrays["zeta_xy"], arrays["zeta_yz"], arrays["zeta_zx"],
                        bounds_lo=np.asarray(header["bounds"][0], dtype=np.float64),
                        bounds_hi=np.asarray(header["bounds"][1], dtype=np.float64))
    n_layers = sum(1 for name in arrays if name.startswith("w"))
    mlp = MlpParams(weights=[arrays[f"w{i}"] for i in range(n_layers)],
                    biases=[arrays[f"b{i}"] for i in range(n_layers)])
    return NeuralAsset(grid=grid, mlp=mlp, kind=header["kind"],
                       dual_output=header["dual_output"], use_h=header["use_h"],
                       metadata=header.get("metadata", {}))
