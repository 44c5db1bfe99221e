"""Fits the feature grid and decoder to baked slices.

One optimizer step consumes every alpha=1 pixel of one slice (batch =
slice).  The loss is an L2 on log(1+x) applied only to the RGB head
matching the sample's visibility bit; Adam drives both the MLP weights and
the grid texels, with a step learning-rate schedule and a decaying Gaussian
blur over the grids early in training.  Everything is a pure function of
(dataset, initial weights, config, seed).
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import neural
from .formats import TrainingSlice, read_slice
from .rng import stream


@dataclass
class TrainConfig:
    epochs: int = 250
    lr0: float = 1e-3
    lr_halving_period: int = 50
    blur_start: float = 4.0
    blur_end_epoch: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    keep_best: int = 3
    seed: int = 0
    # model hyperparameters (the config file mirrors both groups)
    resolution: int = neural.DESK_RESOLUTION
    channels: int = neural.DEFAULT_CHANNELS
    hidden_layers: int = 4
    hidden_width: int = 64
    dual_output: bool = True
    use_h: bool = True
    # validation PSNR is computed in linear radiance with this peak
    val_psnr_peak: float = 20.0
    # optional deterministic per-batch sample cap for ablation budgets
    max_samples_per_batch: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")


@dataclass
class Checkpoint:
    epoch: int
    val_psnr: float
    blob: bytes     # serialized RNA1 asset snapshot

    def asset(self) -> neural.NeuralAsset:
        return neural.load_asset(io.BytesIO(self.blob))


class DatasetError(ValueError):
    pass


# -- pieces -------------------------------------------------------------------

def loss(pred_lit, pred_shadowed, target, visibility) -> float:
    """Mean over samples and channels of squared log(1+x) error on the
    output selected by the visibility bit; the other head contributes 0."""
    value, _, _ = loss_and_grads(pred_lit, pred_shadowed, target, visibility)
    return value


def loss_and_grads(pred_lit, pred_shadowed, target, visibility):
    pred_lit = np.atleast_2d(pred_lit)
    pred_shadowed = np.atleast_2d(pred_shadowed)
    target = np.atleast_2d(target)
    if np.any(target < 0):
        raise ValueError("targets must be non-negative clamped radiance")
    vis = np.atleast_1d(visibility).astype(bool)
    sel = np.where(vis[:, None], pred_lit, pred_shadowed)
    diff = np.log1p(sel.astype(np.float64)) - np.log1p(target.astype(np.float64))
    n = sel.shape[0]
    value = float(np.mean(diff * diff))
    dsel = (2.0 * diff / (1.0 + sel)) / (3.0 * n)
    dlit = np.where(vis[:, None], dsel, 0.0)
    dshadowed = np.where(vis[:, None], 0.0, dsel)
    return value, dlit, dshadowed


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.lr0 * 0.5 ** (epoch // config.lr_halving_period)


def blur_footprint_at(iteration: int, total_schedule_iters: int,
                      blur_start: float = 4.0) -> float:
    """Linear decay blur_start -> 1 over the first 20% of training, then 1."""
    knee = max(1, int(0.2 * total_schedule_iters))
    if iteration >= knee:
        return 1.0
    return blur_start - (blur_start - 1.0) * (iteration / knee)


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Standard bias-corrected Adam; updates params in place."""
    if state.get("t") is None:
        state["t"] = 0
        state["m"] = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        state["v"] = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g, dtype=np.float64)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


def psnr(image_a, image_b, peak: float, mask=None) -> float:
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr requires identical shapes")
    if mask is not None:
        a, b = a[mask], b[mask]
    mse = float(np.mean((a - b) ** 2)) if a.size else 0.0
    if mse == 0.0:
        return 99.0
    return min(99.0, 10.0 * np.log10(peak * peak / mse))


# -- dataset ------------------------------------------------------------------

def gather_slice(sl: TrainingSlice) -> dict:
    """Training arrays for one slice (alpha=1 pixels only)."""
    s = sl.samples()
    fiber = "tangent" in sl.planes
    out = {
        "position": s["position"].astype(np.float64),
        "omega_o": s["omega_o"].astype(np.float32),
        "omega_i": s["omega_i"].astype(np.float32),
        "radiance": s["radiance"].astype(np.float32),
        "visibility": s["visibility"][:, 0] > 0.5,
        "kind": "fiber" if fiber else "surface",
        "mask": s["mask"],      # (H, W) pixel mask, for image-space metrics
    }
    if fiber:
        out["tangent"] = s["tangent"].astype(np.float32)
        out["h"] = s["h"][:, 0].astype(np.float32)
    else:
        out["normal"] = s["normal"].astype(np.float32)
    return out


def load_dataset(data_dir):
    """Reads train/ and val/ slice files; returns (train, val, kind, bounds)."""
    train_dir = os.path.join(data_dir, "train")
    val_dir = os.path.join(data_dir, "val")
    train = [gather_slice(read_slice(os.path.join(train_dir, f)))
             for f in sorted(os.listdir(train_dir)) if f.endswith(".rnad")]
    val = []
    if os.path.isdir(val_dir):
        val = [gather_slice(read_slice(os.path.join(val_dir, f)))
               for f in sorted(os.listdir(val_dir)) if f.endswith(".rnad")]
    if not train:
        raise DatasetError(f"no training slices found under {train_dir}")
    kinds = {b["kind"] for b in train + val}
    if len(kinds) != 1:
        raise DatasetError("mixed surface/fiber slices in one dataset")
    pos = np.concatenate([b["position"] for b in train if len(b["position"])])
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    pad = 0.05 * max(float(np.max(hi - lo)), 1e-6)
    return train, val, kinds.pop(), (lo - pad, hi + pad)


def _batch_eval(asset, batch, want_cache=False):
    return neural.evaluate(
        asset, batch["position"], batch["omega_o"], batch["omega_i"],
        normal=batch.get("normal"), tangent=batch.get("tangent"),
        h=batch.get("h"), want_cache=want_cache)


def predict(asset: neural.NeuralAsset, batch: dict) -> np.ndarray:
    """Radiance prediction with the head selected by the stored visibility."""
    lit, shadowed = _batch_eval(asset, batch)
    return np.where(batch["visibility"][:, None], lit, shadowed)


def validation_psnr(asset, val_batches, peak: float) -> float:
    """Per-slice PSNR over alpha=1 pixels, averaged across slices."""
    if not val_batches:
        return float("nan")
    scores = []
    for batch in val_batches:
        if len(batch["radiance"]) == 0:
            continue
        scores.append(psnr(predict(asset, batch), batch["radiance"], peak))
    return float(np.mean(scores)) if scores else float("nan")


def _snapshot(asset: neural.NeuralAsset) -> bytes:
    buf = io.BytesIO()
    neural.save_asset(asset, buf)
    return buf.getvalue()


def _subsample(batch: dict, cap: int, rng) -> dict:
    n = len(batch["radiance"])
    if n <= cap:
        return batch
    idx = rng.permutation(n)[:cap]
    out = dict(batch)
    for key in ("position", "omega_o", "omega_i", "radiance", "visibility",
                "normal", "tangent", "h"):
        if key in batch and isinstance(batch[key], np.ndarray):
            out[key] = batch[key][idx]
    return out


def train(train_batches, val_batches, asset: neural.NeuralAsset,
          config: TrainConfig, log_path=None, progress=None):
    """Runs the optimization; returns (history, checkpoints).

    history rows: (epoch, train_loss, val_psnr, lr, blur_footprint).
    checkpoints: the keep_best highest-PSNR snapshots plus the last epoch.
    """
    if not train_batches:
        raise DatasetError("empty dataset")
    probe = train_batches[0]
    if probe["kind"] != asset.kind:
        raise DatasetError(
            f"dataset kind {probe['kind']!r} does not match asset kind {asset.kind!r}")
    if asset.kind == "fiber" and asset.use_h and "h" not in probe:
        raise DatasetError("asset expects the fiber offset input but slices lack it")

    steps_per_epoch = len(train_batches)
    knee_iters = max(1, config.blur_end_epoch * steps_per_epoch)
    state: dict = {}
    history = []
    best: list[Checkpoint] = []
    last: Checkpoint | None = None
    iteration = 0

    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = stream(config.seed, "slice-order", epoch).permutation(steps_per_epoch)
        losses = []
        footprint_logged = None
        for si in order:
            batch = train_batches[si]
            if config.max_samples_per_batch:
                sub_rng = stream(config.seed, "subsample", epoch, int(si))
                batch = _subsample(batch, config.max_samples_per_batch, sub_rng)
            if len(batch["radiance"]) == 0:
                iteration += 1
                continue
            lit, shadowed, cache, xi = _batch_eval(asset, batch, want_cache=True)
            if asset.dual_output:
                value, dlit, dsh = loss_and_grads(lit, shadowed, batch["radiance"],
                                                  batch["visibility"])
                upstream = np.concatenate([dlit, dsh], axis=1)
            else:
                value, dlit, _ = loss_and_grads(lit, lit, batch["radiance"],
                                                np.ones(len(lit), dtype=bool))
                upstream = dlit
            losses.append(value)
            grads, dxi = neural.mlp_backward(asset.mlp, cache, upstream.astype(xi.dtype))
            grads.update(neural.triplane_query_grad(
                asset.grid, batch["position"], dxi[:, :asset.grid.channels]))
            adam_step(asset.params(), grads, state, lr,
                      config.beta1, config.beta2, config.eps)
            footprint = blur_footprint_at_general(iteration, knee_iters, config.blur_start)
            if footprint_logged is None:
                footprint_logged = footprint
            if footprint > 1.0:
                asset.grid = neural.blur_grids(asset.grid, footprint)
            iteration += 1

        val = validation_psnr(asset, val_batches, config.val_psnr_peak)
        mean_loss = float(np.mean(losses)) if losses else 0.0
        history.append((epoch, mean_loss, val, lr, footprint_logged or 1.0))
        if progress:
            progress(history[-1])

        snap = Checkpoint(epoch=epoch, val_psnr=val, blob=_snapshot(asset))
        last = snap
        if not np.isnan(val):
            best.append(snap)
            # stable sort: ties keep the earliest epoch
            best.sort(key=lambda c: (-c.val_psnr, c.epoch))
            del best[config.keep_best:]

    if log_path:
        with open(log_path, "w") as f:
            f.write("epoch,loss,val_psnr,lr,blur\n")
            for row in history:
                f.write("%d,%.9g,%.9g,%.9g,%.9g\n" % row)

    checkpoints = list(best)
    if last is not None and all(c.epoch != last.epoch for c in checkpoints):
        checkpoints.append(last)
    return history, checkpoints


def blur_footprint_at_general(iteration: int, knee_iters: int, blur_start: float) -> float:
    if iteration >= knee_iters:
        return 1.0
    return blur_start - (blur_start - 1.0) * (iteration / knee_iters)


def asset_metadata(config: TrainConfig, history) -> dict:
    final = history[-1] if history else (0, 0.0, float("nan"), 0.0, 1.0)
    return {"seed": config.seed, "epochs": config.epochs,
            "final_loss": final[1], "final_val_psnr": final[2]}
