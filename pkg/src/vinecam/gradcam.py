"""Grad-CAM heatmaps and overlays.

Works with any model exposing ``forward_stages(x, training) -> (logits,
{stage: activation})``; :class:`vinecam.densenet.Model` does.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .densenet import DEFAULT_CAM_LAYER
from .imageprep import check_rgb, resample_bilinear, round_half_away


def _ramp() -> np.ndarray:
    t = np.arange(256) / 255.0
    r = np.where(t <= 0.5, 0.0, 2 * t - 1)
    g = np.where(t <= 0.5, 2 * t, 2 - 2 * t)
    b = np.where(t <= 0.5, 1 - 2 * t, 0.0)
    return np.clip(round_half_away(np.stack([r, g, b], axis=1) * 255), 0, 255).astype(np.uint8)


# entry i = colour of heat i/255: blue (0,0,255) -> green (0,255,0) at 0.5 -> red (255,0,0)
COLORMAP = _ramp()


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]. An all-zero map stays zero; any other constant map becomes ones."""
    lo, hi = float(raw.min()), float(raw.max())
    if hi == lo:
        return np.zeros_like(raw) if hi == 0 else np.ones_like(raw)
    return (raw - lo) / (hi - lo)


def compute_gradcam(model, x, target_class: int, layer: str = DEFAULT_CAM_LAYER,
                    size: tuple[int, int] | None = None) -> np.ndarray:
    """Heatmap in [0, 1] for ``target_class`` at the named stage.

    The map is ReLU(sum_c alpha_c A_c) with alpha_c the spatial mean of the
    target logit's gradient, upsampled bilinearly to the input size (or
    ``size``), then min-max normalized. Parameters, gradients and BN
    statistics of the model are left untouched.
    """
    x = ad.as_tensor(x)
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"Grad-CAM needs a single-sample (1, C, H, W) batch, got {x.shape}")
    x = ad.Tensor(x.data, requires_grad=True)
    with ad.Tape() as tape:
        logits, stages = model.forward_stages(x, training=False)
        if layer not in stages:
            raise ValueError(f"unknown layer {layer!r}; available stages: {', '.join(stages)}")
        k = logits.shape[1]
        if not 0 <= target_class < k:
            raise ValueError(f"target class {target_class} outside [0, {k})")
        score = ad.select(logits, (0, target_class))
    acts = stages[layer]
    grad = None
    if score.requires_grad and acts.requires_grad:
        (grad,) = tape.backward(score, inputs=[acts])
    a = acts.data[0].astype(np.float64)
    if grad is None:
        raw = np.zeros(a.shape[1:])
    else:
        alpha = grad[0].astype(np.float64).mean(axis=(1, 2))
        raw = np.maximum(np.tensordot(alpha, a, axes=1), 0.0)
    out_h, out_w = size or x.shape[2:]
    if raw.shape != (out_h, out_w):
        raw = np.maximum(resample_bilinear(raw, out_h, out_w), 0.0)
    return normalize_map(raw)


def colorize(heat: np.ndarray) -> np.ndarray:
    idx = np.clip(round_half_away(heat * 255), 0, 255).astype(np.intp)
    return COLORMAP[idx]


def overlay_heatmap(src, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend: out = (1 - alpha*m) * src + alpha*m * colormap(m), per pixel."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    src = check_rgb(src)
    heat = np.asarray(heat, dtype=np.float64)
    if heat.shape != src.shape[:2]:
        heat = np.clip(resample_bilinear(heat, *src.shape[:2]), 0.0, 1.0)
    w = (alpha * heat)[..., None]
    out = (1 - w) * src + w * colorize(heat)
    return np.clip(round_half_away(out), 0, 255).astype(np.uint8)


def heatmap_gray(heat: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(np.asarray(heat) * 255), 0, 255).astype(np.uint8)
