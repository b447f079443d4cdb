"""Grad-CAM on a toy model with a known answer, then on the real network."""
# %%
from pathlib import Path

import numpy as np

from phasefuse import tensor as T
from phasefuse.gradcam import grad_cam, grad_cam_fn, save_overlay
from phasefuse.model import FusionModel, ModelConfig
from phasefuse.tensor import Tensor

# channel 0 holds a bright patch, channel 1 clutter; class 0 reads channel 0 only
rng = np.random.default_rng(0)
img = np.zeros((1, 48, 48, 2))
img[0, 30:38, 8:16, 0] = 1.0
img[0, ..., 1] = rng.uniform(size=(48, 48))
features = lambda t: T.conv1x1(t, Tensor(np.eye(2)))  # noqa: E731
head = lambda a: T.matmul(T.mean(a, (1, 2)), Tensor(np.eye(2)))  # noqa: E731
heat = grad_cam_fn(features, head, img, 0)
print("toy peak at", np.unravel_index(heat.argmax(), heat.shape), "(patch rows 30-37, cols 8-15)")

# %% an untrained network still yields a valid map on every layer
model = FusionModel.init(ModelConfig(image_size=64), 0)
x = rng.normal(size=(64, 64, 3))
for layer in ("cxr:3", "enh:2"):
    h = grad_cam(model, x, rng.normal(size=(64, 64, 3)), 2, layer)
    print(layer, "range", h.min(), h.max())

# %%
out = Path("out")
out.mkdir(exist_ok=True)
save_overlay(out / "toy_cam.png", img[0, ..., 0], heat)
print("wrote", out / "toy_cam.png")
