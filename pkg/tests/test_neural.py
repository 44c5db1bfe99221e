import io

import numpy as np
import pytest

from relight import gradcheck, neural
from relight.neural import (
    AssetFormatError, MlpParams, TriplaneGrid, blur_grids, gaussian_kernel,
    init_asset, load_asset, mlp_backward, mlp_forward, save_asset,
    triplane_query, triplane_query_grad,
)


def make_grid(r=8, c=4, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    planes = [rng.normal(size=(r, r, c)).astype(dtype) for _ in range(3)]
    return TriplaneGrid(*planes, bounds_lo=np.array([-1.0, -1, -1]),
                        bounds_hi=np.array([1.0, 1, 1]))


def test_query_zero_tables():
    grid = make_grid()
    for p in grid.planes().values():
        p[:] = 0
    assert np.all(triplane_query(grid, np.array([[0.3, -0.2, 0.75]])) == 0)


def test_query_constant_plane():
    grid = make_grid()
    grid.zeta_xy[:] = 1.0
    grid.zeta_yz[:] = 0.0
    grid.zeta_zx[:] = 0.0
    out = triplane_query(grid, np.random.default_rng(1).uniform(-1, 1, (32, 3)))
    assert np.allclose(out, 1.0, atol=1e-12)


def test_query_at_texel_centers_equals_direct_indexing():
    r = 8
    grid = make_grid(r=r)
    rng = np.random.default_rng(2)
    idx = rng.integers(0, r, size=(16, 3))
    # lattice points map exactly onto texel centers of all three planes
    x = -1.0 + 2.0 * idx / (r - 1)
    expect = (grid.zeta_xy[idx[:, 0], idx[:, 1]]
              + grid.zeta_yz[idx[:, 1], idx[:, 2]]
              + grid.zeta_zx[idx[:, 2], idx[:, 0]])
    got = triplane_query(grid, x)
    assert np.allclose(got, expect, atol=1e-12)


def test_query_clamps_out_of_bounds():
    grid = make_grid()
    inside = triplane_query(grid, np.array([[1.0, 1.0, 1.0]]))
    outside = triplane_query(grid, np.array([[5.0, 9.0, 2.0]]))
    assert np.allclose(inside, outside)


def test_query_bilinear_along_axis_segments():
    grid = make_grid(r=6)
    r = grid.resolution
    # between adjacent texel centers along x, with y and z on centers
    y, z = -1.0 + 2.0 * 2 / (r - 1), -1.0 + 2.0 * 4 / (r - 1)
    x0, x1 = -1.0 + 2.0 * 1 / (r - 1), -1.0 + 2.0 * 2 / (r - 1)
    ts = np.linspace(0, 1, 9)
    pts = np.stack([x0 + ts * (x1 - x0), np.full_like(ts, y), np.full_like(ts, z)], axis=1)
    vals = triplane_query(grid, pts)
    expect = vals[0] * (1 - ts)[:, None] + vals[-1] * ts[:, None]
    assert np.allclose(vals, expect, atol=1e-10)


def test_channel_permutation_consistency():
    grid = make_grid(c=4)
    x = np.random.default_rng(3).uniform(-1, 1, (64, 3))
    base = triplane_query(grid, x)
    perm = [2, 0, 3, 1]
    swapped = TriplaneGrid(grid.zeta_xy[..., perm], grid.zeta_yz[..., perm],
                           grid.zeta_zx[..., perm], grid.bounds_lo, grid.bounds_hi)
    assert np.allclose(triplane_query(swapped, x), base[:, perm], atol=1e-12)


def test_grad_zero_upstream():
    grid = make_grid()
    g = triplane_query_grad(grid, np.array([[0.1, 0.2, 0.3]]), np.zeros((1, 4)))
    assert all(np.all(v == 0) for v in g.values())


def test_grad_texel_center_single_weight():
    r = 8
    grid = make_grid(r=r)
    x = np.array([[-1.0 + 2.0 * 3 / (r - 1), -1.0 + 2.0 * 5 / (r - 1),
                   -1.0 + 2.0 * 2 / (r - 1)]])
    up = np.ones((1, 4))
    g = triplane_query_grad(grid, x, up)
    gx = g["zeta_xy"]
    assert np.allclose(gx[3, 5], 1.0)
    assert np.isclose(np.abs(gx).sum(), 4.0)   # one texel per channel


def test_gradcheck_triplane_fd():
    errors = gradcheck.check_triplane(seed=0)
    assert max(errors.values()) < 1e-6


def test_mlp_zero_weights_softplus_bias():
    w = [np.zeros((5, 6))]
    b = [np.array([0.3, -0.2, 0.0, 1.5, -3.0, 0.7])]
    params = MlpParams(weights=w, biases=b)
    lit, shadowed = mlp_forward(params, np.zeros((2, 5)))
    expect = np.log1p(np.exp(b[0]))
    assert np.allclose(lit, expect[:3], atol=1e-12)
    assert np.allclose(shadowed, expect[3:], atol=1e-12)


def test_mlp_single_layer_pencil_values():
    w = np.array([[0.5, -1.0, 0.0, 0.25, 2.0, 0.0],
                  [1.0, 1.0, 0.0, -0.5, 0.0, 3.0]])
    b = np.full(6, 0.1)
    params = MlpParams(weights=[w], biases=[b])
    lit, shadowed = mlp_forward(params, np.array([[1.0, 2.0]]))
    z = np.array([2.6, 1.1, 0.1, -0.65, 2.1, 6.1])
    expect = np.log1p(np.exp(z))
    assert np.allclose(lit[0], expect[:3], atol=1e-12)
    assert np.allclose(shadowed[0], expect[3:], atol=1e-12)


def test_mlp_outputs_finite_positive():
    asset = init_asset("surface", (-1, -1, -1), (1, 1, 1), resolution=4,
                       channels=4, hidden_layers=2, hidden_width=16, seed=1)
    rng = np.random.default_rng(4)
    xi = rng.uniform(-10, 10, size=(100_000, asset.input_size())).astype(np.float32)
    lit, shadowed = mlp_forward(asset.mlp, xi)
    for out in (lit, shadowed):
        assert np.all(np.isfinite(out)) and np.all(out > 0)


def test_mlp_length_mismatch_rejected():
    asset = init_asset("surface", (-1, -1, -1), (1, 1, 1), resolution=4)
    with pytest.raises(ValueError, match="input size"):
        mlp_forward(asset.mlp, np.zeros((1, 3)))


def test_mlp_backward_zero_upstream():
    asset = init_asset("surface", (-1, -1, -1), (1, 1, 1), resolution=4,
                       hidden_layers=2, hidden_width=8, dtype=np.float64)
    xi = np.random.default_rng(5).normal(size=(3, asset.input_size()))
    _, _, cache = mlp_forward(asset.mlp, xi, want_cache=True)
    grads, dxi = mlp_backward(asset.mlp, cache, np.zeros((3, 6)))
    assert all(np.all(g == 0) for g in grads.values()) and np.all(dxi == 0)


def test_gradcheck_mlp_fd():
    errors = gradcheck.check_mlp(seed=0)
    assert max(errors.values()) < 1e-6


def test_gradcheck_end_to_end_fd():
    errors = gradcheck.check_end_to_end(seed=0)
    assert max(errors.values()) < 1e-5


def test_forward_determinism():
    asset = init_asset("surface", (-1, -1, -1), (1, 1, 1), resolution=8, seed=3)
    rng = np.random.default_rng(6)
    xi = rng.normal(size=(64, asset.input_size())).astype(np.float32)
    a = mlp_forward(asset.mlp, xi)
    b = mlp_forward(asset.mlp, xi)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_blur_footprint_one_is_identity():
    grid = make_grid()
    out = blur_grids(grid, 1.0)
    assert out.zeta_xy is grid.zeta_xy


def test_blur_preserves_constants():
    grid = make_grid()
    for p in grid.planes().values():
        p[:] = 2.5
    out = blur_grids(grid, 4.0)
    for p in out.planes().values():
        assert np.allclose(p, 2.5, atol=1e-12)


def test_blur_delta_reproduces_kernel():
    grid = make_grid(r=32, c=1)
    for p in grid.planes().values():
        p[:] = 0
    grid.zeta_xy[16, 16, 0] = 1.0
    kernel = gaussian_kernel(4.0)
    assert abs(kernel.sum() - 1.0) < 1e-12
    out = blur_grids(grid, 4.0)
    radius = len(kernel) // 2
    row = out.zeta_xy[16, 16 - radius:16 + radius + 1, 0]
    assert np.allclose(row, kernel * kernel[radius] / kernel.sum(), atol=1e-12)
    assert abs(out.zeta_xy[..., 0].sum() - 1.0) < 1e-12


def test_blur_below_one_rejected():
    with pytest.raises(ValueError):
        blur_grids(make_grid(), 0.5)


def test_asset_round_trip(tmp_path):
    asset = init_asset("fiber", (-2, -1, 0), (2, 1, 3), resolution=8,
                       channels=4, hidden_layers=2, hidden_width=8, seed=7)
    asset.metadata = {"seed": 7, "epochs": 3, "final_loss": 0.5}
    path = tmp_path / "a.rna1"
    save_asset(asset, path)
    back = load_asset(path)
    for (n1, a), (n2, b) in zip(asset.params().items(), back.params().items()):
        assert n1 == n2 and np.array_equal(np.asarray(a, dtype=np.float32), b)
    assert back.kind == "fiber" and back.metadata["epochs"] == 3
    save_asset(back, tmp_path / "b.rna1")
    assert (tmp_path / "a.rna1").read_bytes() == (tmp_path / "b.rna1").read_bytes()


def test_asset_bad_magic(tmp_path):
    path = tmp_path / "bad.rna1"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(AssetFormatError, match="magic"):
        load_asset(path)


def test_asset_truncation(tmp_path):
    asset = init_asset("surface", (-1, -1, -1), (1, 1, 1), resolution=8, seed=1)
    path = tmp_path / "t.rna1"
    save_asset(asset, path)
    path.write_bytes(path.read_bytes()[:-64])
    with pytest.raises(AssetFormatError, match="truncated"):
        load_asset(path)


def test_full_scale_parameter_count():
    # 3 * 512^2 * 8 texels plus a 17 -> 4x512 -> 6 MLP
    asset = init_asset("surface", (-1, -1, -1), (1, 1, 1), resolution=512,
                       channels=8, hidden_layers=4, hidden_width=512, seed=0)
    expected_grid = 3 * 512 * 512 * 8
    expected_mlp = (17 * 512 + 512) + 3 * (512 * 512 + 512) + (512 * 6 + 6)
    assert asset.param_count() == expected_grid + expected_mlp
    assert abs(asset.param_count() / 7.4e6 - 1.0) < 0.10
