import numpy as np
import pytest

from abstract_spamlens_test import AbstractSpamLensTest
from spamlens.errors import ConfigError
from spamlens.saliency_heatmap import OcclusionConfig, grid_shape, occlusion_map


def region_model(image):
    """Brightness of the block [40:56, 40:56]; blind to everything else."""
    return float(image[40:56, 40:56].mean())


class TestOcclusionMap(AbstractSpamLensTest):
    @pytest.fixture(scope="function")
    def bright_block(self):
        image = np.zeros((128, 128, 3))
        image[40:56, 40:56] = 1.0
        return image

    def test_grid_size(self):
        assert grid_shape((128, 128, 3), 16, 8) == (15, 15)
        assert grid_shape((20, 40), 16, 4) == (2, 7)

    def test_constant_model_gives_zero_grid(self):
        heatmap = occlusion_map(self.rng.random((128, 128, 3)), lambda x: 0.7)
        assert heatmap.grid.shape == (15, 15)
        assert not heatmap.grid.any()
        assert heatmap.baseline_output == 0.7

    def test_peak_over_the_evidence(self, bright_block):
        heatmap = occlusion_map(bright_block, region_model, threads=2)
        assert np.unravel_index(heatmap.grid.argmax(), heatmap.grid.shape) == (5, 5)
        assert heatmap.grid[5, 5] > 0

    def test_cells_away_from_the_evidence_are_exactly_zero(self, bright_block):
        heatmap = occlusion_map(bright_block, region_model)
        rows, cols = np.indices(heatmap.grid.shape)
        overlaps = (rows * 8 < 56) & (rows * 8 + 16 > 40) & (cols * 8 < 56) & (cols * 8 + 16 > 40)
        assert (heatmap.grid[~overlaps] == 0).all()
        assert (heatmap.grid[overlaps] > 0).all()

    def test_explicit_fill(self, bright_block):
        heatmap = occlusion_map(bright_block, region_model, fill=(1.0, 1.0, 1.0))
        assert not heatmap.grid.any()

    def test_deterministic_across_thread_counts(self):
        image = self.rng.random((40, 40, 3))
        model = lambda x: float((x[..., 0] * np.linspace(0, 1, 40)).mean())
        first = occlusion_map(image, model, patch_size=8, stride=4, threads=1)
        second = occlusion_map(image, model, patch_size=8, stride=4, threads=4)
        np.testing.assert_array_equal(first.grid, second.grid)

    def test_document(self):
        document = occlusion_map(np.zeros((32, 32, 3)), lambda x: 0.25).to_dict()
        assert document == {
            "method": "occlusion",
            "patch": 16,
            "stride": 8,
            "baseline": 0.25,
            "grid": [[0.0] * 3] * 3,
        }

    def test_patch_larger_than_image(self):
        with pytest.raises(ConfigError, match="exceeds"):
            occlusion_map(np.zeros((12, 12, 3)), lambda x: 0.0)

    @pytest.mark.parametrize("kwargs", [{"patch_size": 0}, {"stride": 0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            OcclusionConfig(**kwargs)
