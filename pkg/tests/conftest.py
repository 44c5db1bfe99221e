import numpy as np
import pytest

from relight import neural, trainer
from relight.datagen import BakeConfig, bake
from relight.procedural import knobby_surface_scene
from relight.sceneio import build_scene


@pytest.fixture(scope="session")
def toy_trained(tmp_path_factory):
    """A quickly-fitted surface asset shared by integrator-level tests.

    Small bake + short training: good enough to test wiring and rough
    agreement; the acceptance suite owns the full-scale quality gates.
    """
    root = tmp_path_factory.mktemp("toy")
    doc = knobby_surface_scene(seed=1)
    scene, _ = build_scene(doc)
    cfg = BakeConfig(view_count=24, resolution=64, spp=96, max_depth=4,
                     camera_radius=2.2, seed=0, val_views=4)
    data_dir = root / "data"
    bake(scene, cfg, data_dir)
    train_b, val_b, kind, (lo, hi) = trainer.load_dataset(data_dir)
    asset = neural.init_asset(kind, lo, hi, resolution=64, channels=8,
                              hidden_layers=4, hidden_width=64, seed=0)
    tc = trainer.TrainConfig(epochs=50, blur_end_epoch=10, seed=0)
    history, checkpoints = trainer.train(train_b, val_b, asset, tc)
    best = max(checkpoints, key=lambda c: c.val_psnr)
    asset_path = root / "toy.rna1"
    with open(asset_path, "wb") as f:
        f.write(best.blob)
    return {"doc": doc, "scene": scene, "bake_cfg": cfg, "data_dir": data_dir,
            "asset_path": asset_path, "asset": best.asset(),
            "history": history, "val_batches": val_b, "train_batches": train_b}
