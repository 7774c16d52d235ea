"""
Shapley-value attribution over superpixel coalitions.

Superpixels are the players of a cooperative game whose value is the model
output on the image with the absent superpixels mean-filled. Kernel SHAP
recovers the additive model ``g(z) = phi0 + sum_j phi_j * z_j`` from a
kernel-weighted least-squares fit, exactly when every coalition is enumerated
and approximately from paired coalition samples otherwise.
``exact_shapley`` computes the textbook definition by brute force and serves
as the oracle for small games.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
from scipy.special import comb

from spamlens.errors import ConfigError, ExplanationError
from spamlens.lime_explainer import Segmentation, apply_mask, segment, segment_means
from spamlens.parallel import map_ordered

log = logging.getLogger(__name__)

MAX_EXACT_PLAYERS = 20

# binary vector of length M, 1 = player present
CoalitionVector = np.ndarray
ValueFunction = Callable[[CoalitionVector], float]


def as_coalition(z, num_players: int) -> CoalitionVector:
    """Validate ``z`` as a 0/1 vector of length ``num_players``."""
    z = np.asarray(z)
    if z.shape != (num_players,):
        raise ValueError(f"coalition has shape {z.shape}, expected ({num_players},)")
    if not np.isin(z, (0, 1)).all():
        raise ValueError("coalition entries must be 0 or 1")
    return z.astype(np.int8)


def all_coalitions(num_players: int) -> np.ndarray:
    """Every coalition as a ``(2**M, M)`` 0/1 array; row ``k`` has bit ``j`` of ``k`` in column ``j``."""
    index = np.arange(2 ** num_players)[:, None]
    return ((index >> np.arange(num_players)) & 1).astype(np.int8)


def shapley_kernel_weight(num_players: int, size: int) -> float:
    """Kernel SHAP weight of a coalition of ``size`` players out of ``num_players``.

    The empty and full coalitions are constraints of the fit, not weighted
    samples, so they are rejected here.

    Examples:
        >>> shapley_kernel_weight(4, 1)
        0.25
        >>> shapley_kernel_weight(4, 2)
        0.125
    """
    if not 0 < size < num_players:
        raise ValueError(
            f"coalition size must be in (0, {num_players}), got {size}; "
            "the empty and full coalitions are equality constraints"
        )
    return (num_players - 1) / (comb(num_players, size, exact=True) * size * (num_players - size))


@dataclass
class ShapConfig:
    """Settings of a Kernel SHAP run.

    Attributes:
        num_segments (int): Requested superpixels M. Defaults to 50.
        exact_threshold (int): Enumerate all coalitions when M is at most
            this. Defaults to 12.
        num_coalitions (int): Coalitions evaluated in sampled mode, including
            the empty and full ones; needs at least 2M + 2. Defaults to 2048.
        regularization (float): L2 strength of the weighted fit. Defaults to 0.
        seed (int): Sampling seed.
    """

    num_segments: int = 50
    exact_threshold: int = 12
    num_coalitions: int = 2048
    regularization: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_segments < 2:
            raise ConfigError(f"num_segments must be at least 2, got {self.num_segments}")
        if self.exact_threshold < 1:
            raise ConfigError(f"exact_threshold must be at least 1, got {self.exact_threshold}")
        if self.num_coalitions < 4:
            raise ConfigError(f"num_coalitions must be at least 4, got {self.num_coalitions}")
        if self.regularization < 0:
            raise ConfigError(f"regularization must be non-negative, got {self.regularization}")


@dataclass
class ShapExplanation:
    """Additive attribution ``fx = base_value + sum(phi)``.

    Attributes:
        base_value (float): Model output on the empty coalition.
        phi (np.ndarray): One attribution per player.
        fx (float): Model output on the full coalition.
        mode (str): ``"exact"`` or ``"sampled"``.
        n_coalitions (int): Distinct coalitions evaluated.
        seed (int, optional): Sampling seed.
        segmentation (Segmentation, optional): Superpixels the players refer to.
    """

    base_value: float
    phi: np.ndarray
    fx: float
    mode: str
    n_coalitions: int
    seed: Optional[int] = None
    segmentation: Optional[Segmentation] = None

    @property
    def efficiency_gap(self) -> float:
        return float(self.base_value + self.phi.sum() - self.fx)

    def pixel_attribution(self) -> np.ndarray:
        """Per-pixel importance: every pixel carries the phi of its superpixel."""
        if self.segmentation is None:
            raise ExplanationError("pixel attribution needs the segmentation the players refer to")
        return self.phi[self.segmentation.label_map]

    def to_dict(self) -> dict:
        return {
            "method": "shap",
            "base_value": float(self.base_value),
            "phi": [float(p) for p in self.phi],
            "fx": float(self.fx),
            "mode": self.mode,
            "n_coalitions": int(self.n_coalitions),
            "seed": self.seed,
        }


def exact_shapley(value_fn: ValueFunction, num_players: int) -> np.ndarray:
    """Shapley values by the permutation-weighted definition.

    ``phi_j = sum over S without j of |S|!(M-|S|-1)!/M! * (v(S + j) - v(S))``.
    Every one of the ``2**M`` coalitions is evaluated exactly once.

    Args:
        value_fn (callable): Coalition vector to value.
        num_players (int): M, at most 20.

    Returns:
        np.ndarray: ``[phi0, phi1, ..., phiM]`` with ``phi0 = v(empty)``.

    Examples:
        >>> game = {(0, 0): 0, (1, 0): 1, (0, 1): 2, (1, 1): 4}
        >>> exact_shapley(lambda z: game[tuple(z)], 2).tolist()
        [0.0, 1.5, 2.5]
    """
    if not 1 <= num_players <= MAX_EXACT_PLAYERS:
        raise ExplanationError(
            f"exact Shapley values need 1 <= M <= {MAX_EXACT_PLAYERS}, got {num_players}"
        )
    coalitions = all_coalitions(num_players)
    values = np.array([float(value_fn(z)) for z in coalitions])
    sizes = coalitions.sum(axis=1)
    factorials = np.array([math.factorial(k) for k in range(num_players + 1)], dtype=np.float64)
    index = np.arange(2 ** num_players)

    phi = np.empty(num_players + 1)
    phi[0] = values[0]
    for j in range(num_players):
        without = index[coalitions[:, j] == 0]
        s = sizes[without]
        weights = factorials[s] * factorials[num_players - s - 1] / factorials[num_players]
        phi[j + 1] = np.sum(weights * (values[without | (1 << j)] - values[without]))
    return phi


def _sample_coalitions(num_players: int, num_coalitions: int, seed: int) -> np.ndarray:
    """Paired samples: a coalition drawn from the Shapley kernel and its complement."""
    rng = np.random.default_rng(seed)
    sizes = np.arange(1, num_players)
    size_probs = (num_players - 1) / (sizes * (num_players - sizes))
    size_probs /= size_probs.sum()
    pairs = (num_coalitions - 2) // 2
    drawn = np.zeros((2 * pairs, num_players), dtype=np.int8)
    for k in range(pairs):
        size = rng.choice(sizes, p=size_probs)
        members = rng.choice(num_players, size=size, replace=False)
        drawn[2 * k, members] = 1
        drawn[2 * k + 1] = 1 - drawn[2 * k]
    return drawn


def _solve_constrained(
    coalitions: np.ndarray,
    values: np.ndarray,
    weights: np.ndarray,
    base_value: float,
    fx: float,
    regularization: float,
) -> np.ndarray:
    """Weighted least squares for phi with phi0 fixed and sum(phi) = fx - phi0.

    The last player is eliminated through the efficiency constraint.
    """
    total = fx - base_value
    target = values - base_value - coalitions[:, -1] * total
    design = coalitions[:, :-1] - coalitions[:, -1:]
    sqrt_w = np.sqrt(weights)
    lhs = sqrt_w[:, None] * design
    rhs = sqrt_w * target
    if regularization > 0:
        lhs = np.vstack([lhs, math.sqrt(regularization) * np.eye(design.shape[1])])
        rhs = np.concatenate([rhs, np.zeros(design.shape[1])])
    else:
        rank = np.linalg.matrix_rank(lhs)
        if rank < design.shape[1]:
            raise ExplanationError(
                f"Kernel SHAP system is rank deficient ({rank} < {design.shape[1]}); "
                "evaluate more coalitions or set regularization > 0"
            )
    w = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    return np.append(w, total - w.sum())


def kernel_shap_game(
    value_fn: ValueFunction,
    num_players: int,
    config: Optional[ShapConfig] = None,
    threads: Optional[int] = None,
) -> ShapExplanation:
    """Kernel SHAP on an arbitrary coalition game.

    With ``M <= config.exact_threshold`` all ``2**M`` coalitions are evaluated
    and weighted by :func:`shapley_kernel_weight`, which reproduces the exact
    Shapley values. Otherwise ``config.num_coalitions`` coalitions are drawn:
    sizes with probability proportional to the kernel, a uniform subset of
    that size, and its complement; the samples then carry uniform weights.
    Values are cached per distinct coalition, so each is evaluated once.

    Args:
        value_fn (callable): Coalition vector to value.
        num_players (int): M >= 1.
        config (ShapConfig, optional): Defaults to :class:`ShapConfig`.
        threads (int, optional): Fan-out of value evaluations.

    Returns:
        ShapExplanation: Satisfies ``base_value + sum(phi) == fx``.

    Raises:
        ExplanationError: If sampled mode gets fewer than ``2M + 2``
            coalitions or the sampled system is rank deficient.
    """
    config = config or ShapConfig()
    if num_players < 1:
        raise ExplanationError(f"need at least one player, got {num_players}")
    empty = np.zeros(num_players, dtype=np.int8)
    full = np.ones(num_players, dtype=np.int8)

    if num_players <= config.exact_threshold:
        mode = "exact"
        coalitions = all_coalitions(num_players)[1:-1]
        sizes = coalitions.sum(axis=1)
        weights = np.array([shapley_kernel_weight(num_players, s) for s in sizes])
    else:
        mode = "sampled"
        minimum = 2 * num_players + 2
        if config.num_coalitions < minimum:
            raise ExplanationError(
                f"sampled Kernel SHAP with M={num_players} needs num_coalitions >= {minimum}, "
                f"got {config.num_coalitions}"
            )
        coalitions = _sample_coalitions(num_players, config.num_coalitions, config.seed)
        weights = np.ones(len(coalitions))

    cache: Dict[bytes, float] = {}
    pending = {}
    for z in [empty, full, *coalitions]:
        pending.setdefault(z.tobytes(), z)
    results = map_ordered(lambda z: float(value_fn(z)), list(pending.values()), threads)
    for key, value in zip(pending, results):
        cache[key] = value

    base_value = cache[empty.tobytes()]
    fx = cache[full.tobytes()]
    if num_players == 1:
        phi = np.array([fx - base_value])
    else:
        values = np.array([cache[z.tobytes()] for z in coalitions])
        phi = _solve_constrained(
            coalitions.astype(np.float64), values, weights, base_value, fx, config.regularization
        )
    log.debug("kernel shap (%s): %d players, %d distinct coalitions", mode, num_players, len(cache))
    return ShapExplanation(
        base_value=base_value,
        phi=phi,
        fx=fx,
        mode=mode,
        n_coalitions=len(cache),
        seed=config.seed if mode == "sampled" else None,
    )


def masked_predict(
    image: np.ndarray,
    segmentation: Segmentation,
    coalition,
    model_fn: Callable[[np.ndarray], float],
    means: Optional[np.ndarray] = None,
) -> float:
    """Model output with absent superpixels replaced by their mean colour."""
    z = as_coalition(coalition, segmentation.num_segments)
    return float(model_fn(apply_mask(image, segmentation, z, means)))


def kernel_shap(
    image: np.ndarray,
    segmentation: Optional[Segmentation],
    model_fn: Callable[[np.ndarray], float],
    config: Optional[ShapConfig] = None,
    threads: Optional[int] = None,
) -> ShapExplanation:
    """Explain ``model_fn`` at ``image`` with superpixels as players.

    Args:
        image (np.ndarray): ``(H, W, C)`` image.
        segmentation (Segmentation, optional): Players; computed with
            ``config.num_segments`` when None.
        model_fn (callable): Image to probability.
        config (ShapConfig, optional): Defaults to :class:`ShapConfig`.
        threads (int, optional): Fan-out of model evaluations.
    """
    config = config or ShapConfig()
    if segmentation is None:
        segmentation = segment(image, config.num_segments)
    means = segment_means(image, segmentation)

    explanation = kernel_shap_game(
        lambda z: masked_predict(image, segmentation, z, model_fn, means),
        segmentation.num_segments,
        config,
        threads,
    )
    explanation.segmentation = segmentation
    log.info(
        "shap (%s): %d segments, %d coalitions, efficiency gap %.2e",
        explanation.mode,
        segmentation.num_segments,
        explanation.n_coalitions,
        explanation.efficiency_gap,
    )
    return explanation
