"""
Local surrogate explanations over superpixels.

An image is cut into superpixels; random on/off masks over the superpixels
produce perturbed images (an "off" superpixel is filled with its mean colour);
the classifier scores each perturbed image; and a sparse, proximity-weighted
linear model over the masks is fitted. Its coefficients are the explanation.

Classes:
    Segmentation: Superpixel label map
    LimeConfig: Sampling, kernel and surrogate settings
    PerturbationSample: One mask, its model output and proximity weight
    LimeExplanation: Surrogate coefficients and fidelity

Functions:
    segment: SLIC superpixels with connectivity enforcement
    segment_means: Mean colour per superpixel
    apply_mask: Perturbed image for a mask
    proximity, proximity_weights: Exponential kernel on cosine distance
    fit_surrogate: Weighted ridge fit with top-K refit
    explain: The full pipeline
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from skimage.segmentation import relabel_sequential, slic
from sklearn.linear_model import LinearRegression, Ridge
from sklearn.metrics import r2_score
from sklearn.metrics.pairwise import cosine_distances

from spamlens.errors import ConfigError, ExplanationError
from spamlens.parallel import map_ordered

log = logging.getLogger(__name__)

COMPACTNESS = 10.0
SLIC_ITERATIONS = 10


@dataclass
class Segmentation:
    """Superpixel labels.

    Attributes:
        label_map (np.ndarray): ``(H, W)`` integer ids in ``[0, num_segments)``;
            every id labels a non-empty 4-connected region.
        num_segments (int): Number of superpixels.
    """

    label_map: np.ndarray
    num_segments: int

    def __post_init__(self):
        ids = np.unique(self.label_map)
        if len(ids) != self.num_segments or ids[0] != 0 or ids[-1] != self.num_segments - 1:
            raise ValueError(
                f"label map must use every id in [0, {self.num_segments}), found {len(ids)} ids"
            )

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.label_map.ravel(), minlength=self.num_segments)


def segment(
    image: np.ndarray,
    target_segments: int,
    compactness: float = COMPACTNESS,
    iterations: int = SLIC_ITERATIONS,
) -> Segmentation:
    """SLIC superpixels.

    k-means over (L, a, b, y, x) seeded on a regular grid, with connectivity
    enforced afterwards and ids renumbered consecutively, so ``num_segments``
    can differ from ``target_segments``.

    Args:
        image (np.ndarray): ``(H, W, 3)`` or ``(H, W)`` in [0, 1].
        target_segments (int): Requested number of superpixels, 2..H*W.
        compactness (float): Weight of spatial proximity. Defaults to 10.
        iterations (int): k-means iterations. Defaults to 10.

    Returns:
        Segmentation: Deterministic for a given image.

    Raises:
        ConfigError: If ``target_segments`` is out of range.
        ExplanationError: If the image yields a single superpixel.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    height, width = image.shape[:2]
    if not 2 <= target_segments <= height * width:
        raise ConfigError(
            f"target_segments must be in [2, {height * width}], got {target_segments}"
        )

    labels = slic(
        image[..., :3],
        n_segments=target_segments,
        compactness=compactness,
        max_num_iter=iterations,
        enforce_connectivity=True,
        start_label=1,
        channel_axis=-1,
    )
    labels, _, _ = relabel_sequential(labels)
    label_map = labels.astype(np.int64) - 1
    num_segments = int(label_map.max()) + 1
    if num_segments < 2:
        raise ExplanationError(
            f"{height}x{width} image gave a single superpixel for target_segments={target_segments}"
        )
    if num_segments != target_segments:
        log.debug("segmentation produced %d of %d requested segments", num_segments, target_segments)
    return Segmentation(label_map=label_map, num_segments=num_segments)


def segment_means(image: np.ndarray, segmentation: Segmentation) -> np.ndarray:
    """Mean colour of every superpixel, ``(M, C)``."""
    flat = image.reshape(-1, image.shape[-1])
    ids = segmentation.label_map.ravel()
    sizes = segmentation.sizes
    means = np.stack(
        [np.bincount(ids, weights=flat[:, c], minlength=segmentation.num_segments) for c in range(flat.shape[1])],
        axis=1,
    )
    return means / sizes[:, None]


def apply_mask(
    image: np.ndarray,
    segmentation: Segmentation,
    mask: Sequence[int],
    means: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Perturbed copy of ``image``.

    Superpixels with mask bit 1 keep their pixels; superpixels with mask bit 0
    are filled with their mean colour.

    Args:
        image (np.ndarray): ``(H, W, C)`` image.
        segmentation (Segmentation): Superpixels of ``image``.
        mask (sequence of int): One bit per superpixel.
        means (np.ndarray, optional): Precomputed :func:`segment_means`.

    Raises:
        ValueError: If the mask length is not ``num_segments``.
    """
    mask = np.asarray(mask)
    if mask.shape != (segmentation.num_segments,):
        raise ValueError(
            f"mask has length {mask.size}, segmentation has {segmentation.num_segments} segments"
        )
    if means is None:
        means = segment_means(image, segmentation)
    keep = mask.astype(bool)[segmentation.label_map]
    fill = means[segmentation.label_map].astype(image.dtype)
    return np.where(keep[..., None], image, fill)


def proximity_weights(masks: np.ndarray, kernel_width: float) -> np.ndarray:
    """``exp(-D**2 / sigma**2)`` with D the cosine distance of each mask to all-ones.

    An all-zero mask has distance 1.
    """
    if not kernel_width > 0:
        raise ConfigError(f"kernel width must be positive, got {kernel_width}")
    masks = np.atleast_2d(np.asarray(masks, dtype=np.float64))
    distances = cosine_distances(masks, np.ones((1, masks.shape[1]))).ravel()
    return np.exp(-(distances ** 2) / kernel_width ** 2)


def proximity(mask: Sequence[int], kernel_width: float) -> float:
    """Proximity weight of a single mask.

    Examples:
        >>> round(proximity([1, 1, 1, 0], 0.25), 4)
        0.7504
    """
    return float(proximity_weights(np.asarray(mask)[None, :], kernel_width)[0])


@dataclass
class LimeConfig:
    """Settings of a LIME run.

    Attributes:
        num_segments (int): Requested superpixels M. Defaults to 50.
        num_samples (int): Perturbations N including the all-ones mask;
            must be at least M + 1. Defaults to 1000.
        kernel_width (float): sigma of the proximity kernel. Defaults to 0.25.
        ridge (float): L2 strength lambda. Defaults to 1e-3.
        max_features (int): K, the number of non-zero coefficients kept.
            Defaults to 10.
        seed (int): Mask sampling seed.
    """

    num_segments: int = 50
    num_samples: int = 1000
    kernel_width: float = 0.25
    ridge: float = 1e-3
    max_features: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.num_segments < 2:
            raise ConfigError(f"num_segments must be at least 2, got {self.num_segments}")
        if self.num_samples < self.num_segments + 1:
            raise ConfigError(
                f"num_samples must be at least num_segments + 1 = {self.num_segments + 1}, "
                f"got {self.num_samples}"
            )
        if not self.kernel_width > 0:
            raise ConfigError(f"kernel_width must be positive, got {self.kernel_width}")
        if self.ridge < 0:
            raise ConfigError(f"ridge must be non-negative, got {self.ridge}")
        if not 1 <= self.max_features <= self.num_segments:
            raise ConfigError(
                f"max_features must be in [1, {self.num_segments}], got {self.max_features}"
            )


@dataclass(frozen=True)
class PerturbationSample:
    mask: np.ndarray
    prediction: float
    weight: float


@dataclass
class LimeExplanation:
    """A fitted surrogate.

    Attributes:
        segment_weights (np.ndarray): One coefficient per superpixel, zero
            outside the kept support.
        intercept (float): Surrogate intercept.
        local_fidelity (float): Weighted R^2 of the surrogate on its samples.
        kept (int): Size of the support (at most K).
        segmentation (Segmentation, optional): Superpixels the weights refer to.
        seed (int, optional): Sampling seed.
    """

    segment_weights: np.ndarray
    intercept: float
    local_fidelity: float
    kept: int
    segmentation: Optional[Segmentation] = None
    seed: Optional[int] = None
    num_samples: int = 0

    @property
    def num_segments(self) -> int:
        return len(self.segment_weights)

    def pixel_attribution(self) -> np.ndarray:
        if self.segmentation is None:
            raise ExplanationError("pixel attribution needs the segmentation the weights refer to")
        return self.segment_weights[self.segmentation.label_map]

    def to_dict(self) -> dict:
        return {
            "method": "lime",
            "num_segments": self.num_segments,
            "kept": self.kept,
            "intercept": float(self.intercept),
            "weights": [float(w) for w in self.segment_weights],
            "fidelity_r2": float(self.local_fidelity),
            "seed": self.seed,
        }


def _weighted_fit(design: np.ndarray, target: np.ndarray, weights: np.ndarray, ridge: float):
    if ridge == 0:
        centered = design - np.average(design, axis=0, weights=weights)
        rank = np.linalg.matrix_rank(np.sqrt(weights)[:, None] * centered)
        if rank < design.shape[1]:
            raise ExplanationError(
                f"Surrogate system is singular (rank {rank} < {design.shape[1]}); "
                "use ridge > 0 or draw more samples"
            )
        model = LinearRegression()
    else:
        model = Ridge(alpha=ridge)
    model.fit(design, target, sample_weight=weights)
    return model


def fit_surrogate(
    samples: Sequence[PerturbationSample],
    ridge: float = 1e-3,
    max_features: Optional[int] = None,
) -> LimeExplanation:
    """Fit the sparse weighted linear surrogate.

    Minimises ``sum pi * (f - (w . z + b))**2 + ridge * |w|**2``, keeps the
    ``max_features`` coefficients of largest magnitude and refits on that
    support.

    Args:
        samples (sequence of PerturbationSample): At least M + 1 samples,
            including the all-ones mask.
        ridge (float): L2 strength; 0 gives ordinary weighted least squares.
        max_features (int, optional): K. Defaults to M.

    Returns:
        LimeExplanation: Without segmentation; :func:`explain` attaches it.

    Raises:
        ExplanationError: If there are too few samples, the all-ones mask is
            missing, or ``ridge == 0`` and the system is singular.
    """
    masks = np.array([s.mask for s in samples], dtype=np.float64)
    predictions = np.array([s.prediction for s in samples], dtype=np.float64)
    weights = np.array([s.weight for s in samples], dtype=np.float64)
    n_samples, n_segments = masks.shape
    if n_samples < n_segments + 1:
        raise ExplanationError(f"Need at least {n_segments + 1} samples, got {n_samples}")
    if not (masks == 1).all(axis=1).any():
        raise ExplanationError("Samples must include the all-ones mask")
    k = n_segments if max_features is None else max_features
    if not 1 <= k <= n_segments:
        raise ConfigError(f"max_features must be in [1, {n_segments}], got {k}")

    model = _weighted_fit(masks, predictions, weights, ridge)
    support = np.sort(np.argsort(-np.abs(model.coef_), kind="stable")[:k])
    if k < n_segments:
        model = _weighted_fit(masks[:, support], predictions, weights, ridge)

    coefficients = np.zeros(n_segments)
    coefficients[support] = model.coef_
    fitted = model.predict(masks[:, support])
    fidelity = r2_score(predictions, fitted, sample_weight=weights)
    return LimeExplanation(
        segment_weights=coefficients,
        intercept=float(model.intercept_),
        local_fidelity=float(fidelity),
        kept=int(np.count_nonzero(coefficients)),
        num_samples=n_samples,
    )


def sample_masks(num_segments: int, num_samples: int, seed: int) -> np.ndarray:
    """All-ones mask followed by ``num_samples - 1`` fair-coin masks."""
    rng = np.random.default_rng(seed)
    random_masks = rng.integers(0, 2, size=(num_samples - 1, num_segments))
    return np.vstack([np.ones((1, num_segments), dtype=random_masks.dtype), random_masks])


def explain(
    image: np.ndarray,
    model_fn: Callable[[np.ndarray], float],
    config: Optional[LimeConfig] = None,
    threads: Optional[int] = None,
    segmentation: Optional[Segmentation] = None,
) -> LimeExplanation:
    """Explain ``model_fn`` at ``image``.

    Segment, sample masks, perturb, score every perturbation, weight by
    proximity and fit the surrogate. Masks are drawn from one seeded stream
    before the model evaluations fan out.

    Args:
        image (np.ndarray): ``(H, W, C)`` image.
        model_fn (callable): Image to probability.
        config (LimeConfig, optional): Defaults to :class:`LimeConfig`.
        threads (int, optional): Fan-out of model evaluations.
        segmentation (Segmentation, optional): Reuse an existing segmentation.

    Returns:
        LimeExplanation: With ``segmentation`` and ``seed`` attached.
    """
    config = config or LimeConfig()
    if segmentation is None:
        segmentation = segment(image, config.num_segments)
    n_segments = segmentation.num_segments
    max_features = min(config.max_features, n_segments)
    num_samples = max(config.num_samples, n_segments + 1)

    masks = sample_masks(n_segments, num_samples, config.seed)
    means = segment_means(image, segmentation)
    predictions = map_ordered(
        lambda mask: float(model_fn(apply_mask(image, segmentation, mask, means))),
        list(masks),
        threads,
    )
    weights = proximity_weights(masks, config.kernel_width)
    samples = [
        PerturbationSample(mask=m, prediction=p, weight=float(w))
        for m, p, w in zip(masks, predictions, weights)
    ]
    explanation = fit_surrogate(samples, ridge=config.ridge, max_features=max_features)
    explanation.segmentation = segmentation
    explanation.seed = config.seed
    log.info(
        "lime: %d segments, %d samples, fidelity %.4f", n_segments, num_samples, explanation.local_fidelity
    )
    return explanation
