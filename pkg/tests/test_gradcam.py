import numpy as np
import pytest

from vinecam import autodiff as ad
from vinecam.densenet import STAGE_NAMES, build_model, preset
from vinecam.gradcam import COLORMAP, colorize, compute_gradcam, heatmap_gray, normalize_map, overlay_heatmap

TOY_EXPECTED = np.array([[0.0, 1 / 3], [2 / 3, 1.0]])


class ToyModel:
    """Input is the feature map itself; logit 0 = c * sum(A), logit 1 = a constant."""

    def __init__(self, c=1.0):
        self.c = c

    def forward_stages(self, x, training=False):
        feat = ad.scale(x, 1.0)
        pooled = ad.global_avg_pool(feat)  # mean over the 2x2 map
        w = ad.Tensor(np.array([[4.0 * self.c], [0.0]]))
        b = ad.Tensor(np.array([0.0, 1.0]))
        return ad.linear(pooled, w, b), {"feat": feat}


class ScaledModel:
    """Wraps a model and multiplies every logit by a positive constant."""

    def __init__(self, inner, c):
        self.inner, self.c = inner, c

    def forward_stages(self, x, training=False):
        logits, stages = self.inner.forward_stages(x, training)
        return ad.scale(logits, self.c), stages


TOY_INPUT = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)


def test_toy_closed_form():
    heat = compute_gradcam(ToyModel(), TOY_INPUT, 0, layer="feat")
    assert np.max(np.abs(heat - TOY_EXPECTED)) < 1e-6


@pytest.mark.parametrize("c", [1e-3, 0.5, 7.0, 1e4])
def test_toy_logit_scaling(c):
    heat = compute_gradcam(ToyModel(c), TOY_INPUT, 0, layer="feat")
    assert np.max(np.abs(heat - TOY_EXPECTED)) < 1e-6


def test_toy_negative_weighting_gives_zero_map():
    # logit = -sum(A): alpha = -1, so every weighted activation is negative
    heat = compute_gradcam(ToyModel(c=-1.0), TOY_INPUT, 0, layer="feat")
    assert np.all(heat == 0)


def test_toy_detached_logit_gives_zero_map():
    heat = compute_gradcam(ToyModel(), TOY_INPUT, 1, layer="feat")
    assert np.all(heat == 0)


def test_toy_upsampled_size():
    heat = compute_gradcam(ToyModel(), TOY_INPUT, 0, layer="feat", size=(8, 6))
    assert heat.shape == (8, 6) and heat.min() == 0 and heat.max() == 1


def test_errors():
    with pytest.raises(ValueError):
        compute_gradcam(ToyModel(), np.concatenate([TOY_INPUT, TOY_INPUT]), 0, layer="feat")
    with pytest.raises(ValueError, match="unknown layer"):
        compute_gradcam(ToyModel(), TOY_INPUT, 0, layer="nope")
    with pytest.raises(ValueError):
        compute_gradcam(ToyModel(), TOY_INPUT, 2, layer="feat")


@pytest.fixture(scope="module")
def desk_and_image():
    m = build_model(preset("desk"), 0, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((1, 3, 64, 64))
    return m, x


@pytest.mark.parametrize("layer", STAGE_NAMES)
def test_desk_layers_range_and_shape(desk_and_image, layer):
    m, x = desk_and_image
    heat = compute_gradcam(m, x, 2, layer=layer)
    assert heat.shape == (64, 64)
    assert heat.min() >= 0 and heat.max() <= 1
    assert heat.max() == 1 or np.all(heat == 0)


@pytest.mark.parametrize("c", [0.01, 3.0, 250.0])
def test_desk_logit_scaling_invariance(desk_and_image, c):
    m, x = desk_and_image
    base = compute_gradcam(m, x, 1)
    assert np.max(np.abs(compute_gradcam(ScaledModel(m, c), x, 1) - base)) < 1e-6


def test_does_not_touch_model(desk_and_image):
    m, x = desk_and_image
    params = {n: t.data.copy() for n, t in m.params.items()}
    buffers = {n: b.copy() for n, b in m.buffers.items()}
    compute_gradcam(m, x, 0)
    assert all(np.array_equal(params[n], m.params[n].data) and m.params[n].grad is None for n in params)
    assert all(np.array_equal(buffers[n], m.buffers[n]) for n in buffers)


def test_normalize_map():
    assert np.all(normalize_map(np.zeros((3, 3))) == 0)
    assert np.all(normalize_map(np.full((2, 2), 5.0)) == 1)
    assert normalize_map(np.array([[2.0, 4.0]])).tolist() == [[0.0, 1.0]]


def test_colormap_ramp():
    assert COLORMAP.shape == (256, 3) and COLORMAP.dtype == np.uint8
    assert COLORMAP[0].tolist() == [0, 0, 255]
    assert COLORMAP[255].tolist() == [255, 0, 0]
    assert COLORMAP[128][1] >= 253 and COLORMAP[128][0] <= 2
    assert colorize(np.array([0.0, 1.0])).tolist() == [[0, 0, 255], [255, 0, 0]]


def test_overlay_examples():
    src = np.random.default_rng(1).integers(0, 256, (6, 5, 3), dtype=np.uint8)
    heat = np.random.default_rng(2).random((6, 5))
    assert np.array_equal(overlay_heatmap(src, heat, 0.0), src)
    assert np.array_equal(overlay_heatmap(src, np.zeros((6, 5)), 0.8), src)
    out = overlay_heatmap(src, np.ones((6, 5)), 1.0)
    assert np.all(out == COLORMAP[255])
    assert overlay_heatmap(src, np.ones((3, 3)), 0.5).shape == src.shape
    with pytest.raises(ValueError):
        overlay_heatmap(src, heat, 1.5)


def test_overlay_blend_arithmetic():
    src = np.full((1, 1, 3), 100, dtype=np.uint8)
    out = overlay_heatmap(src, np.array([[1.0]]), 0.5)
    # 0.5 * 100 + 0.5 * (255, 0, 0)
    assert out[0, 0].tolist() == [178, 50, 50]


def test_heatmap_gray():
    assert heatmap_gray(np.array([[0.0, 0.5, 1.0]])).tolist() == [[0, 128, 255]]
