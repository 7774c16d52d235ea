"""
Occlusion-sensitivity heatmaps.

A square patch filled with a constant colour is slid over the image; every
grid cell holds the drop in the model output caused by hiding that patch.
Positive cells mark evidence for the prediction. No randomness is involved.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from spamlens.errors import ConfigError
from spamlens.parallel import map_ordered

log = logging.getLogger(__name__)


@dataclass
class OcclusionConfig:
    """Patch geometry and fill colour.

    ``fill=None`` uses the global mean colour of the explained image.
    """

    patch_size: int = 16
    stride: int = 8
    fill: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be at least 1, got {self.patch_size}")
        if self.stride < 1:
            raise ConfigError(f"stride must be at least 1, got {self.stride}")


@dataclass
class Heatmap:
    grid: np.ndarray
    patch_size: int
    stride: int
    baseline_output: float

    def to_dict(self) -> dict:
        return {
            "method": "occlusion",
            "patch": self.patch_size,
            "stride": self.stride,
            "baseline": float(self.baseline_output),
            "grid": self.grid.tolist(),
        }


def grid_shape(image_shape: Tuple[int, ...], patch_size: int, stride: int) -> Tuple[int, int]:
    """``floor((H - patch) / stride) + 1`` by ``floor((W - patch) / stride) + 1``."""
    height, width = image_shape[:2]
    return (height - patch_size) // stride + 1, (width - patch_size) // stride + 1


def occlusion_map(
    image: np.ndarray,
    model_fn: Callable[[np.ndarray], float],
    patch_size: int = 16,
    stride: int = 8,
    fill: Optional[Sequence[float]] = None,
    threads: Optional[int] = None,
) -> Heatmap:
    """Scan ``image`` with an occluding patch.

    Args:
        image (np.ndarray): ``(H, W, C)`` image.
        model_fn (callable): Image to probability.
        patch_size (int): Side of the square patch. Defaults to 16.
        stride (int): Step between patch positions. Defaults to 8.
        fill (sequence of float, optional): Patch colour; defaults to the
            mean colour of ``image``.
        threads (int, optional): Fan-out of model evaluations.

    Returns:
        Heatmap: ``grid[i, j] = baseline - model_fn(image occluded at
        (i * stride, j * stride))``.

    Raises:
        ConfigError: If the patch does not fit the image or stride < 1.

    Examples:
        >>> image = np.zeros((128, 128, 3))
        >>> occlusion_map(image, lambda x: 0.5, threads=1).grid.shape
        (15, 15)
    """
    OcclusionConfig(patch_size=patch_size, stride=stride, fill=fill)
    image = np.asarray(image)
    height, width = image.shape[:2]
    if patch_size > min(height, width):
        raise ConfigError(f"patch_size {patch_size} exceeds the image size {height}x{width}")
    if fill is None:
        fill = image.reshape(-1, image.shape[-1]).mean(axis=0)
    fill = np.asarray(fill, dtype=image.dtype)

    rows, cols = grid_shape(image.shape, patch_size, stride)
    positions = [(i, j) for i in range(rows) for j in range(cols)]

    def occluded_output(position):
        i, j = position
        occluded = image.copy()
        occluded[i * stride : i * stride + patch_size, j * stride : j * stride + patch_size] = fill
        return float(model_fn(occluded))

    baseline = float(model_fn(image))
    outputs = map_ordered(occluded_output, positions, threads)
    grid = baseline - np.array(outputs, dtype=np.float64).reshape(rows, cols)
    log.info("occlusion: %dx%d grid, baseline %.4f", rows, cols, baseline)
    return Heatmap(grid=grid, patch_size=patch_size, stride=stride, baseline_output=baseline)
