"""
Overlay rendering of explanations.

Attributions are drawn over the grayscale image with a diverging colormap:
red for positive evidence, blue for negative, transparent at zero. The
opacity scales with ``|value| / max |value|`` up to 0.5.
"""
import io
from typing import Optional, Union

import numpy as np
from PIL import Image
from skimage.transform import resize

from spamlens.lime_explainer import LimeExplanation, Segmentation
from spamlens.saliency_heatmap import Heatmap
from spamlens.shap_explainer import ShapExplanation

MAX_ALPHA = 0.5
COLORMAPS = ("diverging",)

Attribution = Union[LimeExplanation, ShapExplanation, Heatmap, np.ndarray]


def grayscale(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image.mean(axis=2)


def attribution_to_pixels(attribution: Attribution, image_shape, segmentation: Optional[Segmentation] = None) -> np.ndarray:
    """Per-pixel attribution map of shape ``image_shape[:2]``.

    Segment weights are broadcast to member pixels; a heatmap grid is
    bilinearly upsampled; an ``(H, W)`` array is taken as is.
    """
    height, width = image_shape[:2]
    if isinstance(attribution, (LimeExplanation, ShapExplanation)):
        if segmentation is None:
            return attribution.pixel_attribution()
        if isinstance(attribution, LimeExplanation):
            attribution = attribution.segment_weights
        else:
            attribution = attribution.phi
    if isinstance(attribution, Heatmap):
        return resize(attribution.grid, (height, width), order=1, mode="edge", anti_aliasing=False)
    values = np.asarray(attribution, dtype=np.float64)
    if values.ndim == 1:
        if segmentation is None:
            raise ValueError("per-segment weights need a segmentation")
        return values[segmentation.label_map]
    if values.shape != (height, width):
        raise ValueError(f"attribution has shape {values.shape}, image is {height}x{width}")
    return values


def blend(image: np.ndarray, values: np.ndarray) -> np.ndarray:
    """RGB uint8 overlay of a per-pixel attribution on the grayscale image."""
    gray = grayscale(image)
    scale = np.abs(values).max()
    if scale == 0:
        alpha = np.zeros_like(gray)
    else:
        alpha = MAX_ALPHA * np.abs(values) / scale
    base = gray * (1 - alpha)
    red = base + alpha * (values > 0)
    blue = base + alpha * (values < 0)
    rgb = np.stack([red, base, blue], axis=2)
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def encode_png(pixels: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="PNG")
    return buffer.getvalue()


def render_overlay(
    image: np.ndarray,
    attribution: Attribution,
    colormap: str = "diverging",
    segmentation: Optional[Segmentation] = None,
) -> bytes:
    """Render an explanation over ``image`` as PNG bytes.

    Args:
        image (np.ndarray): ``(H, W, C)`` or ``(H, W)`` in [0, 1].
        attribution: A LIME or SHAP explanation, a heatmap, per-segment
            weights (with ``segmentation``) or a per-pixel array.
        colormap (str): Only ``"diverging"`` is supported.
        segmentation (Segmentation, optional): Overrides the segmentation
            carried by the explanation.

    Returns:
        bytes: PNG image. An all-zero attribution renders the plain
        grayscale image.
    """
    if colormap not in COLORMAPS:
        raise ValueError(f"Unknown colormap {colormap!r}; choose from {', '.join(COLORMAPS)}")
    values = attribution_to_pixels(attribution, np.shape(image), segmentation)
    return encode_png(blend(image, values))


def segments_png(segmentation: Segmentation) -> bytes:
    """Segment ids as a 16-bit grayscale PNG."""
    ids = segmentation.label_map.astype(np.uint16)
    buffer = io.BytesIO()
    Image.fromarray(ids).save(buffer, format="PNG")
    return buffer.getvalue()
