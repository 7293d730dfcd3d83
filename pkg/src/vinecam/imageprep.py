"""Leaf image preprocessing: resize, green stretch, equalization, denoise, standardize.

Images are numpy arrays. An ``RgbImage`` is ``uint8`` of shape (H, W, 3); a
``FloatImage`` is a float array of the same layout. ``to_chw`` converts to
the (3, H, W) tensor layout the model consumes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

STAGES = ("resize", "stretch", "equalize", "median", "standardize")


@dataclass(frozen=True)
class PrepConfig:
    target_size: int = 224
    stretch_percentiles: tuple[float, float] = (2.0, 98.0)
    median_kernel: int = 3
    channel_mean: tuple[float, float, float] = IMAGENET_MEAN
    channel_std: tuple[float, float, float] = IMAGENET_STD
    resize: bool = True
    stretch: bool = True
    equalize: bool = True
    median: bool = True
    standardize: bool = True

    def __post_init__(self):
        lo, hi = self.stretch_percentiles
        if not (0 <= lo < hi <= 100):
            raise ValueError(f"stretch percentiles must satisfy 0 <= low < high <= 100, got {lo}, {hi}")
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ValueError(f"median kernel must be odd and >= 1, got {self.median_kernel}")
        if self.target_size < 1:
            raise ValueError("target_size must be >= 1")
        if len(self.channel_mean) != 3 or len(self.channel_std) != 3:
            raise ValueError("channel mean/std need exactly 3 values")
        if any(s <= 0 for s in self.channel_std):
            raise ValueError(f"channel std must be positive, got {self.channel_std}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stretch_percentiles"] = list(self.stretch_percentiles)
        d["channel_mean"] = list(self.channel_mean)
        d["channel_std"] = list(self.channel_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PrepConfig":
        d = dict(d)
        for key in ("stretch_percentiles", "channel_mean", "channel_std"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def float_only(self) -> "PrepConfig":
        """The same config with only the float stage (scale + standardize) left on."""
        return replace(self, resize=False, stretch=False, equalize=False, median=False)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _to_u8(x) -> np.ndarray:
    return np.clip(round_half_away(x), 0, 255).astype(np.uint8)


def check_rgb(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("image has a zero dimension")
    if img.dtype != np.uint8:
        if np.any(img < 0) or np.any(img > 255):
            raise ValueError("pixel values must lie in [0, 255]")
        img = img.astype(np.uint8)
    return img


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centers, edge-clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resample_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of a float array over its first two axes."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[:2]
    if h == 0 or w == 0 or out_h < 1 or out_w < 1:
        raise ValueError(f"cannot resample {h}x{w} to {out_h}x{out_w}")
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    extra = (1,) * (arr.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(img, out_w: int, out_h: int) -> np.ndarray:
    img = check_rgb(img)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be positive, got {out_w}x{out_h}")
    if img.shape[:2] == (out_h, out_w):
        return img.copy()
    # exact integer weights so .5 ties round the same way as the real-valued formula
    h, w = img.shape[:2]
    y0, y1, wy = _integer_axis(h, out_h)
    x0, x1, wx = _integer_axis(w, out_w)
    dy, dx = 2 * out_h, 2 * out_w
    a = img.astype(np.int64)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = a[y0][:, x0] * (dx - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (dx - wx) + a[y1][:, x1] * wx
    total = top * (dy - wy) + bot * wy
    denom = dy * dx
    return np.clip((2 * total + denom) // (2 * denom), 0, 255).astype(np.uint8)


def _integer_axis(n_in: int, n_out: int):
    # source coordinate times 2*n_out, clamped to [0, 2*n_out*(n_in-1)]
    scale = 2 * n_out
    src = (2 * np.arange(n_out, dtype=np.int64) + 1) * n_in - n_out
    src = np.clip(src, 0, scale * (n_in - 1))
    i0 = src // scale
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0 * scale


def green_contrast_stretch(img, p_low: float = 2.0, p_high: float = 98.0) -> np.ndarray:
    """Linearly remap the green channel so its [p_low, p_high] percentiles span 0..255.

    A degenerate channel (equal percentile values) is returned unchanged.
    """
    if not p_low < p_high:
        raise ValueError(f"p_low must be below p_high, got {p_low}, {p_high}")
    img = check_rgb(img)
    g = img[..., 1].astype(np.float64)
    lo, hi = np.percentile(g, [p_low, p_high])
    out = img.copy()
    if hi <= lo:
        return out
    out[..., 1] = _to_u8((g - lo) * 255.0 / (hi - lo))
    return out


def equalize_channel(ch: np.ndarray) -> np.ndarray:
    ch = np.asarray(ch, dtype=np.uint8)
    n = ch.size
    cdf = np.cumsum(np.bincount(ch.ravel(), minlength=256))
    cdf_min = cdf[ch.min()]
    if cdf_min == n:
        return ch.copy()
    d = n - cdf_min
    lut = ((2 * 255 * (cdf - cdf_min) + d) // (2 * d)).clip(0, 255).astype(np.uint8)
    return lut[ch]


def hist_equalize(img) -> np.ndarray:
    img = check_rgb(img)
    return np.stack([equalize_channel(img[..., c]) for c in range(3)], axis=-1)


def median_filter(img, k: int = 3) -> np.ndarray:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"median kernel must be odd and >= 1, got {k}")
    img = check_rgb(img)
    if k == 1:
        return img.copy()
    r = k // 2
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    win = win.reshape(img.shape + (k * k,))
    # odd window: the median is an actual element, so the partition is exact
    return np.partition(win, k * k // 2, axis=-1)[..., k * k // 2]


def standardize(img, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    img = check_rgb(img)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (3,) or std.shape != (3,):
        raise ValueError("mean and std need 3 values")
    if np.any(std <= 0):
        raise ValueError(f"std must be positive, got {std.tolist()}")
    return (img.astype(np.float64) / 255.0 - mean) / std


def unstandardize(out, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    return _to_u8(255.0 * (np.asarray(out) * np.asarray(std) + np.asarray(mean)))


def integer_stages(img, cfg: PrepConfig) -> np.ndarray:
    """Run the uint8 part of the chain (everything before scaling)."""
    img = check_rgb(img)
    if cfg.resize:
        img = resize_bilinear(img, cfg.target_size, cfg.target_size)
    if cfg.stretch:
        img = green_contrast_stretch(img, *cfg.stretch_percentiles)
    if cfg.equalize:
        img = hist_equalize(img)
    if cfg.median:
        img = median_filter(img, cfg.median_kernel)
    return img


def preprocess_pipeline(img, cfg: PrepConfig | None = None) -> np.ndarray:
    """resize -> green stretch -> equalize -> median -> scale/standardize.

    With standardization off the output is still scaled to [0, 1].
    """
    cfg = cfg or PrepConfig()
    img = integer_stages(img, cfg)
    if cfg.standardize:
        return standardize(img, cfg.channel_mean, cfg.channel_std)
    return img.astype(np.float64) / 255.0


def to_chw(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(img, (2, 0, 1)), dtype=dtype)


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_png(img: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    mode = "L" if img.ndim == 2 else "RGB"
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode=mode).save(path, format="PNG")
