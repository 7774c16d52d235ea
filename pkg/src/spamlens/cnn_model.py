"""
The image-spam CNN: architecture, inference and training.

The default architecture is four valid 3x3/5x5 convolutions with ReLU, each
followed by 2x2 max pooling, then a 512-unit ReLU dense layer and a single
sigmoid unit. Input images are 128x128x3 with intensities in [0, 1].

Classes:
    LayerSpec: Declarative description of one layer
    CnnModel: Layer stack with parameters, forward and backward passes
    TrainConfig: Training hyper-parameters
    EpochRecord, TrainHistory: Per-epoch training statistics
    Prediction: A thresholded classification

Functions:
    build_model: Create a freshly initialised model
    forward: Spam probability of one image
    predict: Thresholded decision for one image
    train: Mini-batch RMSprop training
    evaluate: Confusion matrix of a model on labelled samples
"""
import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm.auto import tqdm

from spamlens.dataset_pipeline import LABEL_NAMES, NORMAL, SPAM, DatasetSplit, LabeledSample
from spamlens.errors import ConfigError, ShapeError, TrainingError
from spamlens.metrics import ConfusionMatrix, confusion
from spamlens.tensor_core import (
    LayerParams,
    OptimizerState,
    bce_loss,
    conv2d_backward,
    conv2d_forward,
    conv2d_output_shape,
    dense_backward,
    dense_forward,
    maxpool2d_backward,
    maxpool2d_forward,
    maxpool2d_output_shape,
    relu,
    relu_backward,
    rmsprop_step,
    sigmoid,
)

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
PREDICT_BATCH_SIZE = 32


@dataclass(frozen=True)
class LayerSpec:
    """One layer of an architecture.

    ``size`` is the kernel edge (conv2d) or pool edge (maxpool2d); ``units`` is
    the filter count (conv2d) or output width (dense).
    """

    kind: str
    size: int = 0
    units: int = 0
    activation: Optional[str] = None

    def describe(self) -> str:
        if self.kind == "conv2d":
            return f"conv2d:{self.units}:{self.size}x{self.size}:{self.activation}"
        if self.kind == "maxpool2d":
            return f"maxpool2d:{self.size}"
        if self.kind == "dense":
            return f"dense:{self.units}:{self.activation}"
        return self.kind


INPUT_SHAPE = (128, 128, 3)

SPAM_CNN_ARCHITECTURE = (
    LayerSpec("conv2d", size=3, units=32, activation="relu"),
    LayerSpec("maxpool2d", size=2),
    LayerSpec("conv2d", size=3, units=64, activation="relu"),
    LayerSpec("maxpool2d", size=2),
    LayerSpec("conv2d", size=3, units=128, activation="relu"),
    LayerSpec("maxpool2d", size=2),
    LayerSpec("conv2d", size=5, units=128, activation="relu"),
    LayerSpec("maxpool2d", size=2),
    LayerSpec("flatten"),
    LayerSpec("dense", units=512, activation="relu"),
    LayerSpec("dense", units=1, activation="sigmoid"),
)

# same layer pattern at a size where finite differences over every parameter are affordable
REDUCED_INPUT_SHAPE = (16, 16, 1)
REDUCED_ARCHITECTURE = (
    LayerSpec("conv2d", size=3, units=4, activation="relu"),
    LayerSpec("maxpool2d", size=2),
    LayerSpec("conv2d", size=3, units=4, activation="relu"),
    LayerSpec("maxpool2d", size=2),
    LayerSpec("flatten"),
    LayerSpec("dense", units=8, activation="relu"),
    LayerSpec("dense", units=1, activation="sigmoid"),
)


def architecture_string(architecture: Sequence[LayerSpec], input_shape) -> str:
    """Canonical text form of an architecture, e.g. ``input:128x128x3;conv2d:32:3x3:relu;...``."""
    head = "input:" + "x".join(str(d) for d in input_shape)
    return ";".join([head] + [spec.describe() for spec in architecture])


def architecture_fingerprint(architecture: Sequence[LayerSpec], input_shape) -> bytes:
    """32-byte SHA-256 digest of :func:`architecture_string`."""
    return hashlib.sha256(architecture_string(architecture, input_shape).encode("utf-8")).digest()


def _glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build_model(
    seed: int = 0,
    architecture: Sequence[LayerSpec] = SPAM_CNN_ARCHITECTURE,
    input_shape=INPUT_SHAPE,
    dtype=np.float32,
) -> "CnnModel":
    """Create a model with Glorot-uniform weights and zero biases.

    Args:
        seed (int): Seed of the weight initialisation.
        architecture (sequence of LayerSpec): Defaults to the spam CNN.
        input_shape (tuple): ``(H, W, C)`` of the input images.
        dtype: ``np.float32`` for training, ``np.float64`` for gradient checks.

    Returns:
        CnnModel: Deterministic under ``seed``.

    Examples:
        >>> model = build_model(seed=1)
        >>> model.parameter_counts()[1]
        18496
    """
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers = []
    for spec in architecture:
        if spec.kind == "conv2d":
            channels = shape[-1]
            k = spec.size
            weights = _glorot_uniform(
                rng, (k, k, channels, spec.units), k * k * channels, k * k * spec.units, dtype
            )
            layer = LayerParams("conv2d", weights, np.zeros(spec.units, dtype), activation=spec.activation)
            shape = conv2d_output_shape(shape, layer)
        elif spec.kind == "maxpool2d":
            layer = LayerParams("maxpool2d", size=spec.size)
            shape = maxpool2d_output_shape(shape, spec.size)
        elif spec.kind == "flatten":
            layer = LayerParams("flatten")
            shape = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"dense layer needs a flat input, got shape {shape}")
            weights = _glorot_uniform(rng, (shape[0], spec.units), shape[0], spec.units, dtype)
            layer = LayerParams("dense", weights, np.zeros(spec.units, dtype), activation=spec.activation)
            shape = (spec.units,)
        else:
            raise ValueError(f"Unknown layer kind: {spec.kind!r}")
        layers.append(layer)
    if shape != (1,):
        raise ShapeError(f"architecture must end in a single output unit, ends in {shape}")
    return CnnModel(layers, architecture=tuple(architecture), input_shape=tuple(input_shape))


class CnnModel:
    """Ordered layer stack of the classifier.

    Attributes:
        layers (list of LayerParams): The layers in forward order.
        architecture (tuple of LayerSpec): The declarative description.
        input_shape (tuple): ``(H, W, C)`` accepted by :meth:`forward`.

    Note:
        - The model is not mutated by inference, so concurrent forward calls
          are safe.
        - Parameter names are ``<kind>_<layer index>/kernel`` and ``/bias``.
    """

    def __init__(self, layers: List[LayerParams], architecture, input_shape):
        assert len(layers) == len(architecture)
        self.layers = layers
        self.architecture = tuple(architecture)
        self.input_shape = tuple(input_shape)

    @property
    def fingerprint(self) -> bytes:
        return architecture_fingerprint(self.architecture, self.input_shape)

    @property
    def dtype(self):
        return next(layer.weights.dtype for layer in self.layers if layer.weights is not None)

    def copy(self) -> "CnnModel":
        return copy.deepcopy(self)

    def parameter_counts(self) -> List[int]:
        """Parameter count of every parameterised layer, in order."""
        return [layer.param_count for layer in self.layers if layer.weights is not None]

    @property
    def param_count(self) -> int:
        return sum(self.parameter_counts())

    def output_shapes(self) -> List[Tuple[int, ...]]:
        """Output shape of every layer for one input image."""
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            if layer.kind == "conv2d":
                shape = conv2d_output_shape(shape, layer)
            elif layer.kind == "maxpool2d":
                shape = maxpool2d_output_shape(shape, layer.size)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            else:
                shape = (layer.weights.shape[1],)
            shapes.append(shape)
        return shapes

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        for index, layer in enumerate(self.layers):
            if layer.weights is not None:
                params[f"{layer.kind}_{index}/kernel"] = layer.weights
                params[f"{layer.kind}_{index}/bias"] = layer.bias
        return params

    def set_parameters(self, params: Dict[str, np.ndarray]):
        for index, layer in enumerate(self.layers):
            if layer.weights is None:
                continue
            weights = params[f"{layer.kind}_{index}/kernel"]
            bias = params[f"{layer.kind}_{index}/bias"]
            if weights.shape != layer.weights.shape or bias.shape != layer.bias.shape:
                raise ShapeError(
                    f"Parameters for layer {index} have shapes {weights.shape}/{bias.shape}, "
                    f"expected {layer.weights.shape}/{layer.bias.shape}"
                )
            layer.weights = weights
            layer.bias = bias

    def _check_input(self, batch: np.ndarray):
        if batch.shape[1:] != self.input_shape:
            raise ShapeError(
                f"Model expects images of shape {self.input_shape}, got {batch.shape[1:]}"
            )

    def _forward(self, batch: np.ndarray, keep_cache: bool):
        """Run the layer chain on ``(N, H, W, C)``; returns logits and caches."""
        x = batch.astype(self.dtype, copy=False)
        caches = []
        for layer in self.layers:
            if layer.kind == "conv2d":
                z = conv2d_forward(x, layer)
                cache = (x, z)
            elif layer.kind == "maxpool2d":
                z, argmax = maxpool2d_forward(x, layer.size)
                cache = (x.shape, argmax)
            elif layer.kind == "flatten":
                z = x.reshape(x.shape[0], -1)
                cache = x.shape
            else:
                z = dense_forward(x, layer)
                cache = (x, z)
            if keep_cache:
                caches.append(cache)
            x = relu(z) if layer.activation == "relu" else z
        # the final sigmoid is applied by the callers, on the logits
        return x[:, 0], caches

    def _backward(self, caches, logit_grad: np.ndarray) -> Dict[str, np.ndarray]:
        grads = {}
        upstream = logit_grad[:, None].astype(self.dtype, copy=False)
        for index in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[index]
            cache = caches[index]
            if layer.kind == "conv2d":
                x, z = cache
                if layer.activation == "relu":
                    upstream = relu_backward(z, upstream)
                upstream, w_grad, b_grad = conv2d_backward(
                    x, layer, upstream, compute_input_grad=index > 0
                )
                grads[f"conv2d_{index}/kernel"] = w_grad
                grads[f"conv2d_{index}/bias"] = b_grad
            elif layer.kind == "maxpool2d":
                input_shape, argmax = cache
                upstream = maxpool2d_backward(argmax, upstream, input_shape, layer.size)
            elif layer.kind == "flatten":
                upstream = upstream.reshape(cache)
            else:
                x, z = cache
                if layer.activation == "relu":
                    upstream = relu_backward(z, upstream)
                upstream, w_grad, b_grad = dense_backward(x, layer, upstream)
                grads[f"dense_{index}/kernel"] = w_grad
                grads[f"dense_{index}/bias"] = b_grad
        return grads

    def forward(self, image: np.ndarray) -> float:
        """Spam probability of a single ``(H, W, C)`` image."""
        image = np.asarray(image)
        self._check_input(image[None])
        logits, _ = self._forward(image[None], keep_cache=False)
        return float(sigmoid(logits.astype(np.float64))[0])

    __call__ = forward

    def predict_proba(self, images: np.ndarray, batch_size: int = PREDICT_BATCH_SIZE) -> np.ndarray:
        """Spam probabilities of an ``(N, H, W, C)`` stack, evaluated in batches."""
        images = np.asarray(images)
        self._check_input(images)
        out = []
        for start in range(0, len(images), batch_size):
            logits, _ = self._forward(images[start:start + batch_size], keep_cache=False)
            out.append(sigmoid(logits.astype(np.float64)))
        if not out:
            return np.zeros(0)
        return np.concatenate(out)

    def loss_and_gradients(self, images: np.ndarray, labels: np.ndarray):
        """Mean binary cross-entropy of a batch and its parameter gradients.

        Returns:
            tuple: ``(loss, grads, probabilities)``.
        """
        images = np.asarray(images)
        self._check_input(images)
        labels = np.asarray(labels, dtype=self.dtype)
        logits, caches = self._forward(images, keep_cache=True)
        probabilities = sigmoid(logits)
        losses, _ = bce_loss(probabilities, labels)
        loss = float(np.mean(losses))
        # d(mean BCE(sigmoid(z)))/dz
        logit_grad = (probabilities - labels) / len(labels)
        grads = self._backward(caches, logit_grad)
        return loss, grads, probabilities


def forward(model: CnnModel, image: np.ndarray) -> float:
    """Spam probability of one image, strictly inside (0, 1)."""
    return model.forward(image)


@dataclass(frozen=True)
class Prediction:
    label: str
    probability: float

    @property
    def is_spam(self) -> bool:
        return self.label == LABEL_NAMES[SPAM]


def classify_probability(probability: float, threshold: float = DEFAULT_THRESHOLD) -> Prediction:
    """Spam iff ``probability >= threshold`` (the boundary counts as spam)."""
    label = SPAM if probability >= threshold else NORMAL
    return Prediction(LABEL_NAMES[label], float(probability))


def predict(model: CnnModel, image: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> Prediction:
    return classify_probability(model.forward(image), threshold)


@dataclass
class TrainConfig:
    """Training hyper-parameters; defaults reproduce the reference run.

    Attributes:
        learning_rate (float): RMSprop step size. Defaults to 1e-4.
        epochs (int): Full passes over the training set. Defaults to 30.
        batch_size (int): Samples per step. Defaults to 20.
        seed (int): Seed of the per-epoch shuffles.
        optimizer (str): Only ``rmsprop`` is supported.
    """

    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 20
    seed: int = 0
    optimizer: str = "rmsprop"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.optimizer != "rmsprop":
            raise ConfigError(f"Unsupported optimizer: {self.optimizer!r}")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    test_accuracy: Optional[float] = None


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(record)) + "\n" for record in self.records)


def _stack(samples: Sequence[LabeledSample]):
    images = np.stack([s.image for s in samples]).astype(np.float32, copy=False)
    labels = np.array([s.label for s in samples], dtype=np.float32)
    return images, labels


def train(
    model: CnnModel,
    split: DatasetSplit,
    config: TrainConfig = None,
    progress: bool = False,
) -> Tuple[CnnModel, TrainHistory]:
    """Train a copy of ``model`` with mini-batch RMSprop.

    Each epoch reshuffles the training set with a generator seeded once from
    ``config.seed`` and takes ``ceil(N / batch_size)`` steps on the mean batch
    loss; the trailing short batch is used as-is. Held-out accuracy is recorded
    per epoch when ``split.test`` is non-empty.

    Args:
        model (CnnModel): Initial model; left untouched.
        split (DatasetSplit): Training and held-out samples.
        config (TrainConfig, optional): Defaults to the reference run.
        progress (bool): Show a progress bar over epochs.

    Returns:
        tuple: ``(trained_model, history)``.

    Raises:
        TrainingError: If the training set is empty or single-class, or the
            loss becomes non-finite (the message names epoch and batch).
    """
    config = config or TrainConfig()
    if not split.train:
        raise TrainingError("Training set is empty")
    labels_present = {s.label for s in split.train}
    if labels_present != {NORMAL, SPAM}:
        names = ", ".join(LABEL_NAMES[label] for label in sorted(labels_present))
        raise TrainingError(f"Training set must contain both classes, found only: {names}")

    model = model.copy()
    images, labels = _stack(split.train)
    test_images, test_labels = _stack(split.test) if split.test else (None, None)
    n = len(images)
    rng = np.random.default_rng(config.seed)
    state = OptimizerState.zeros_like(model.parameters(), learning_rate=config.learning_rate)
    history = TrainHistory()
    log.info(
        "training on %d samples: %d epochs, batch %d, lr %g",
        n, config.epochs, config.batch_size, config.learning_rate,
    )

    epochs = tqdm(range(1, config.epochs + 1), desc="train", unit="epoch", disable=not progress)
    for epoch in epochs:
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, grads, probabilities = model.loss_and_gradients(images[idx], labels[idx])
            if not math.isfinite(loss):
                raise TrainingError(
                    f"Non-finite loss {loss} at epoch {epoch}, batch {batch_index}"
                )
            params, state = rmsprop_step(model.parameters(), grads, state)
            model.set_parameters(params)
            loss_sum += loss * len(idx)
            correct += int(np.sum((probabilities >= DEFAULT_THRESHOLD) == (labels[idx] == SPAM)))

        record = EpochRecord(epoch=epoch, loss=loss_sum / n, train_accuracy=correct / n)
        if test_images is not None:
            probabilities = model.predict_proba(test_images)
            hits = (probabilities >= DEFAULT_THRESHOLD) == (test_labels == SPAM)
            record.test_accuracy = float(np.mean(hits))
        history.records.append(record)
        epochs.set_postfix(loss=f"{record.loss:.4f}", acc=f"{record.train_accuracy:.3f}")
        log.info(
            "epoch %d: loss %.4f, train accuracy %.4f, test accuracy %s",
            epoch, record.loss, record.train_accuracy, record.test_accuracy,
        )
    return model, history


def evaluate(
    model: CnnModel,
    samples: Sequence[LabeledSample],
    threshold: float = DEFAULT_THRESHOLD,
) -> ConfusionMatrix:
    """Confusion matrix of thresholded predictions on ``samples``."""
    images, labels = _stack(samples)
    probabilities = model.predict_proba(images)
    predictions = [SPAM if p >= threshold else NORMAL for p in probabilities]
    return confusion(predictions, [int(label) for label in labels])
