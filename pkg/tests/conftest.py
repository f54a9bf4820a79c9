import numpy as np
import pytest
import torch

from unimpr.model import ModelConfig, UniMPR
from unimpr.training import LabelRule, TrainData


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(lidar_grid=(58, 14), radar_grid=(29, 7), camera_grid=(29, 7), lidar_strides=[[2, 1]],
                radar_strides=[1], camera_strides=[1], stem_channels=4, c_feat=8, dim=16, clusters=4,
                value_bins=4, sampling=(10, 8, 1), image_channels=4, camera_bev_channels=3, d_conn=8, layers=1,
                heads=2, experts=4, top_k=2)
    base.update(kw)
    return ModelConfig(**base)


def tiny_data(cfg: ModelConfig, n_places=8, per_place=4, seed=0, name="toy", modalities=("camera", "lidar", "radar")):
    """Random inputs at poses clustered around places 30 m apart."""
    rng = np.random.default_rng(seed)
    n = n_places * per_place
    centers = np.repeat(np.arange(n_places) * 30.0, per_place)
    xy = np.stack([centers + rng.uniform(-2, 2, n), rng.uniform(-2, 2, n)], axis=1)
    yaw = rng.uniform(-np.pi, np.pi, n)
    n_pts = int(np.prod(cfg.sampling))
    shapes = {"lidar": (1, *cfg.lidar_grid), "radar": (1, *cfg.radar_grid), "camera": (n_pts, cfg.image_channels + 1)}
    inputs = {m: rng.random((n, *shapes[m])).astype(np.float32) for m in modalities}
    if "camera" in inputs:
        inputs["camera"][..., -1] = rng.random((n, n_pts)) < 0.7
    rules = {m: LabelRule() for m in inputs}
    return TrainData(name, inputs, xy, yaw, rules)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    return UniMPR(tiny_cfg)
