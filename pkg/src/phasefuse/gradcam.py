"""Grad-CAM heatmaps over backbone stages and PNG overlays."""

from __future__ import annotations

import numpy as np
from PIL import Image

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .model import FusionModel
from .tensor import Tensor

# blue, cyan, green, yellow, red
RAMP = np.array([[0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]], dtype=np.float64) / 255.0


def parse_layer(layer, model: FusionModel) -> tuple[str, int]:
    """``"cxr:3"``, ``"enh:1"`` or a bare stage index (CXR branch) to ``(branch, stage)``."""
    arch = model.arch
    if layer is None:
        return "cxr", len(arch.channels) - 1
    if isinstance(layer, tuple):
        branch, stage = layer
    else:
        text = str(layer)
        branch, _, stage = text.rpartition(":") if ":" in text else ("cxr", ":", text)
    try:
        stage = int(stage)
    except ValueError:
        raise ConfigError(f"unknown layer {layer!r}") from None
    if branch not in arch.branch_names or not 0 <= stage < len(arch.channels):
        raise ConfigError(f"unknown layer {layer!r}: branches {arch.branch_names}, "
                          f"stages 0..{len(arch.channels) - 1}")
    return branch, stage


def cam_from(acts: np.ndarray, grads: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Heatmap from one sample's activations and gradients, both (h, w, C)."""
    if acts.shape != grads.shape or acts.ndim != 3:
        raise ShapeError(f"activations {acts.shape} and gradients {grads.shape} must match as (h, w, C)")
    weights = grads.mean(axis=(0, 1))
    cam = np.maximum(acts @ weights, 0.0)
    up = T.bilinear_upsample(Tensor(cam[None, :, :, None]), *out_hw).data[0, :, :, 0]
    up = np.maximum(up, 0.0)
    peak = up.max()
    return up / peak if peak > 0 else np.zeros_like(up)


def grad_cam_fn(features, head, x, target_class: int, out_hw=None) -> np.ndarray:
    """Grad-CAM for any two-part model ``logits = head(features(x))``.

    ``features`` maps a ``(1, H, W, C)`` Tensor to activations ``(1, h, w, K)``
    and ``head`` maps those to logits ``(1, n)``.
    """
    # a differentiable input keeps every activation on the tape
    x = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
    out_hw = out_hw or x.shape[1:3]
    with T.Tape() as tape:
        acts = features(x)
        logits = head(acts)
        if not 0 <= target_class < logits.shape[-1]:
            raise ContractError(f"target_class {target_class} outside [0, {logits.shape[-1]})")
        score = T.sum_all(T.getitem(logits, (slice(None), target_class)))
    (g,) = T.backward(tape, score, [acts])
    return cam_from(acts.data[0], g[0], out_hw)


def grad_cam(model: FusionModel, cxr: np.ndarray, mf: np.ndarray | None, target_class: int,
             layer=None) -> np.ndarray:
    """Heatmap in [0, 1] on the input grid for a single ``(H, W, 3)`` sample."""
    branch, stage = parse_layer(layer, model)
    if not 0 <= target_class < model.arch.num_classes:
        raise ContractError(f"target_class {target_class} outside [0, {model.arch.num_classes})")
    cxr = np.asarray(cxr, dtype=np.float64)[None]
    mf = cxr if mf is None else np.asarray(mf, dtype=np.float64)[None]
    trace: dict = {}
    p = model.tensors(requires_grad=True)
    with T.Tape() as tape:
        logits = model.forward(cxr, mf, p, trace)
        score = T.sum_all(T.getitem(logits, (slice(None), target_class)))
    acts = trace["stages"][(branch, stage)]
    (g,) = T.backward(tape, score, [acts])
    return cam_from(acts.data[0], g[0], cxr.shape[1:3])


def colorize(heat: np.ndarray) -> np.ndarray:
    """Map [0, 1] values through the 5-stop ramp to RGB."""
    h = np.clip(heat, 0.0, 1.0) * (len(RAMP) - 1)
    lo = np.minimum(np.floor(h).astype(int), len(RAMP) - 2)
    frac = (h - lo)[..., None]
    return RAMP[lo] * (1 - frac) + RAMP[lo + 1] * frac


def overlay(gray: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    if gray.shape != heat.shape:
        raise ShapeError(f"image {gray.shape} and heatmap {heat.shape} differ")
    g = np.clip(gray, 0.0, 1.0)[..., None].repeat(3, axis=-1)
    return (1 - alpha) * g + alpha * colorize(heat)


def save_overlay(path, gray: np.ndarray, heat: np.ndarray) -> None:
    rgb = np.round(overlay(gray, heat) * 255).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(path)
