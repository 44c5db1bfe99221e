import numpy as np
import pytest

from relight import gradcheck, neural, trainer
from relight.trainer import (
    Checkpoint, DatasetError, TrainConfig, adam_step, blur_footprint_at,
    loss, loss_and_grads, lr_at, psnr, train,
)


def synthetic_batches(kind="surface", n_slices=2, n=256, seed=0):
    """Slices whose radiance is a smooth deterministic function of inputs."""
    rng = np.random.default_rng(seed)
    batches = []
    for _ in range(n_slices):
        x = rng.uniform(-0.8, 0.8, size=(n, 3))
        wo = _unit(rng.normal(size=(n, 3)))
        wi = _unit(rng.normal(size=(n, 3)))
        nrm = _unit(rng.normal(size=(n, 3)))
        vis = rng.random(n) > 0.4
        radiance = (0.3 + 0.2 * np.sin(3 * x) + 0.1 * wi * wo
                    + np.where(vis[:, None], 0.25, 0.0)).astype(np.float32)
        radiance = np.clip(radiance, 0.0, None)
        batch = {"position": x, "omega_o": wo.astype(np.float32),
                 "omega_i": wi.astype(np.float32), "radiance": radiance,
                 "visibility": vis, "kind": kind}
        if kind == "surface":
            batch["normal"] = nrm.astype(np.float32)
        else:
            batch["tangent"] = nrm.astype(np.float32)
            batch["h"] = rng.uniform(-1, 1, n).astype(np.float32)
        batches.append(batch)
    return batches


def _unit(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def toy_asset(seed=0, **kw):
    args = dict(resolution=8, channels=4, hidden_layers=2, hidden_width=16)
    args.update(kw)
    return neural.init_asset("surface", (-1, -1, -1), (1, 1, 1), seed=seed, **args)


def test_loss_zero_when_exact():
    target = np.array([[0.25, 0.5, 1.0]])
    assert loss(target, np.zeros((1, 3)), target, np.array([True])) == 0.0
    assert loss(np.zeros((1, 3)), target, target, np.array([False])) == 0.0


def test_loss_log_closed_form():
    pred = np.full((1, 3), np.e - 1.0)
    value = loss(pred, np.zeros((1, 3)), np.zeros((1, 3)), np.array([True]))
    assert value == pytest.approx(1.0, abs=1e-12)


def test_loss_gradient_masks_non_selected():
    rng = np.random.default_rng(0)
    lit = rng.uniform(0.1, 1, (8, 3))
    shadowed = rng.uniform(0.1, 1, (8, 3))
    target = rng.uniform(0, 1, (8, 3))
    vis = rng.random(8) > 0.5
    _, dlit, dsh = loss_and_grads(lit, shadowed, target, vis)
    assert np.all(dlit[~vis] == 0.0) and np.all(dsh[vis] == 0.0)
    assert np.all(dlit[vis] != 0.0) or np.all(target[vis] == lit[vis])


def test_loss_rejects_negative_target():
    with pytest.raises(ValueError):
        loss(np.ones((1, 3)), np.ones((1, 3)), -np.ones((1, 3)), np.array([True]))


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-3
    assert lr_at(49, cfg) == 1e-3
    assert lr_at(50, cfg) == 5e-4
    assert lr_at(249, cfg) == pytest.approx(1e-3 * 0.5 ** 4, rel=1e-12)


def test_lr_schedule_non_increasing():
    cfg = TrainConfig()
    lrs = [lr_at(e, cfg) for e in range(300)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_blur_schedule():
    total = 100_000
    assert blur_footprint_at(0, total) == 4.0
    assert blur_footprint_at(20_000, total) == 1.0
    assert blur_footprint_at(70_000, total) == 1.0
    mid = blur_footprint_at(10_000, total)
    assert 1.0 < mid < 4.0


def test_adam_first_step_closed_form():
    params = {"p": np.array([1.0])}
    grads = {"p": np.array([1.0])}
    state = {}
    adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
    delta = params["p"][0] - 1.0
    # -lr * mhat / (sqrt(vhat) + eps) = -1e-3 / (1 + 1e-8)
    assert delta == pytest.approx(-9.99999995e-4, abs=1e-11)


def test_adam_zero_grad_keeps_params():
    params = {"p": np.arange(4, dtype=np.float64)}
    before = params["p"].copy()
    adam_step(params, {"p": np.zeros(4)}, {}, lr=1e-2)
    assert np.array_equal(params["p"], before)


def test_adam_ten_step_trace_matches_scalar_loop():
    # independent plain-float reference of the same textbook update
    grads_seq = [1.0, -0.5, 2.0, 0.3, -1.2, 0.8, 0.05, -2.0, 1.5, -0.25]
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    theta, m, v = 0.7, 0.0, 0.0
    ref_trace = []
    for t, g in enumerate(grads_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
        ref_trace.append(theta)

    params = {"p": np.array([0.7])}
    state = {}
    ours = []
    for g in grads_seq:
        adam_step(params, {"p": np.array([g])}, state, lr, b1, b2, eps)
        ours.append(params["p"][0])
    assert np.max(np.abs(np.array(ours) - np.array(ref_trace))) < 1e-12


def test_adam_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        adam_step({"p": np.zeros(3)}, {"p": np.zeros(4)}, {}, 1e-3)


def test_psnr_examples():
    img = np.random.default_rng(1).random((8, 8, 3))
    assert psnr(img, img, peak=1.0) == 99.0
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)
    assert psnr(a, b, peak=1.0) == pytest.approx(20.0, abs=1e-9)
    checker = np.indices((8, 8)).sum(axis=0) % 2
    assert psnr(checker, 1 - checker, peak=1.0) == pytest.approx(0.0, abs=1e-9)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((3, 3)), 1.0)


def test_train_step_count(monkeypatch):
    calls = []
    orig = trainer.adam_step

    def counting(*args, **kwargs):
        calls.append(1)
        return orig(*args, **kwargs)

    monkeypatch.setattr(trainer, "adam_step", counting)
    batches = synthetic_batches(n_slices=2, n=64)
    cfg = TrainConfig(epochs=3, blur_end_epoch=1, resolution=8)
    history, _ = train(batches, [], toy_asset(), cfg)
    assert len(history) == 3
    assert len(calls) == 6          # 2 slices x 3 epochs


def test_train_deterministic_loss_trace():
    batches = synthetic_batches(n_slices=3, n=128)
    cfg = TrainConfig(epochs=4, blur_end_epoch=1, seed=11)
    h1, _ = train(batches, batches[:1], toy_asset(seed=2), cfg)
    h2, _ = train(batches, batches[:1], toy_asset(seed=2), cfg)
    assert h1 == h2


def test_train_loss_decreases():
    batches = synthetic_batches(n_slices=4, n=512, seed=3)
    cfg = TrainConfig(epochs=20, blur_end_epoch=2, seed=5)
    history, _ = train(batches, [], toy_asset(seed=1), cfg)
    assert history[19][1] < history[0][1]


def test_train_keeps_global_best_checkpoint():
    batches = synthetic_batches(n_slices=2, n=256, seed=4)
    cfg = TrainConfig(epochs=6, blur_end_epoch=1, keep_best=2, seed=9)
    history, checkpoints = train(batches, batches[:1], toy_asset(seed=4), cfg)
    best_epoch = max(history, key=lambda r: r[2])[0]
    assert any(c.epoch == best_epoch for c in checkpoints)
    assert any(c.epoch == history[-1][0] for c in checkpoints)
    assert all(isinstance(c, Checkpoint) for c in checkpoints)


def test_train_kind_mismatch_rejected():
    batches = synthetic_batches(kind="fiber")
    with pytest.raises(DatasetError, match="kind"):
        train(batches, [], toy_asset(), TrainConfig(epochs=1))


def test_loss_level_gradients_match_fd():
    errors = gradcheck.check_loss_gradients(seed=0)
    assert max(errors.values()) < 1e-4


def test_single_head_training_runs():
    batches = synthetic_batches(n_slices=2, n=128, seed=6)
    asset = neural.init_asset("surface", (-1, -1, -1), (1, 1, 1), resolution=8,
                              channels=4, hidden_layers=2, hidden_width=16,
                              dual_output=False, seed=8)
    cfg = TrainConfig(epochs=2, blur_end_epoch=1, dual_output=False)
    history, _ = train(batches, batches[:1], asset, cfg)
    assert len(history) == 2
