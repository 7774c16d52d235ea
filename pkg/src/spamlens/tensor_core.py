"""
Numeric kernels for the spamlens CNN.

This module provides the forward and backward passes of every layer kind used by
the classifier, the two activations, the binary cross-entropy loss and the
RMSprop update. Tensors are plain numpy arrays in row-major order; images are
laid out as (height, width, channels) and kernels accept any number of leading
batch axes in front of that layout.

Training runs in single precision. Every kernel preserves the dtype of its
inputs, so passing float64 arrays gives the double-precision mode used for
finite-difference gradient checks.

Classes:
    LayerParams: Parameters and hyper-parameters of one layer
    OptimizerState: RMSprop accumulators and settings

Functions:
    conv2d_forward / conv2d_backward: Valid, stride-1 2D convolution
    maxpool2d_forward / maxpool2d_backward: Non-overlapping max pooling
    dense_forward / dense_backward: Fully connected layer
    relu / relu_backward, sigmoid / sigmoid_backward: Activations
    bce_loss: Binary cross-entropy with probability clamping
    rmsprop_step: One RMSprop parameter update
"""
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from spamlens.errors import ShapeError

Tensor = np.ndarray

LAYER_KINDS = ("conv2d", "maxpool2d", "flatten", "dense")
POOL_SIZE = 2
BCE_EPSILON = 1e-7


@dataclass
class LayerParams:
    """Parameters of a single layer.

    Attributes:
        kind (str): One of ``conv2d``, ``maxpool2d``, ``flatten``, ``dense``.
        weights (np.ndarray, optional): ``(kh, kw, in_channels, out_channels)``
            for conv2d, ``(in_features, out_features)`` for dense, absent
            otherwise.
        bias (np.ndarray, optional): One entry per output channel/feature.
        size (int): Pool edge for maxpool2d; ignored for other kinds, whose
            sizes are read off the weights.
        activation (str, optional): ``relu`` or ``sigmoid`` applied after the
            layer, or None.
    """

    kind: str
    weights: Optional[Tensor] = None
    bias: Optional[Tensor] = None
    size: int = 0
    activation: Optional[str] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"Unknown layer kind: {self.kind!r}")
        if self.activation not in (None, "relu", "sigmoid"):
            raise ValueError(f"Unknown activation: {self.activation!r}")

        if self.kind in ("maxpool2d", "flatten"):
            if self.weights is not None or self.bias is not None:
                raise ShapeError(f"{self.kind} layers carry no parameters")
            if self.kind == "maxpool2d" and self.size < 1:
                raise ValueError(f"Pool size must be positive, got {self.size}")
            return

        if self.weights is None or self.bias is None:
            raise ShapeError(f"{self.kind} layers need weights and bias")
        expected_rank = 4 if self.kind == "conv2d" else 2
        if self.weights.ndim != expected_rank:
            raise ShapeError(
                f"{self.kind} weights must have rank {expected_rank}, "
                f"got shape {self.weights.shape}"
            )
        if self.bias.shape != (self.weights.shape[-1],):
            raise ShapeError(
                f"{self.kind} bias length {self.bias.shape} does not match "
                f"{self.weights.shape[-1]} outputs"
            )

    @property
    def param_count(self) -> int:
        if self.weights is None:
            return 0
        return int(self.weights.size + self.bias.size)


@dataclass
class OptimizerState:
    """RMSprop state: one squared-gradient accumulator per parameter tensor.

    Attributes:
        accumulators (dict): Parameter name to accumulator, same shapes as the
            parameters, elementwise non-negative.
        learning_rate (float): Step size.
        rho (float): Decay rate of the accumulator.
        epsilon (float): Added to the root of the accumulator.
    """

    accumulators: Dict[str, Tensor] = field(default_factory=dict)
    learning_rate: float = 1e-4
    rho: float = 0.9
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Dict[str, Tensor], **settings) -> "OptimizerState":
        """Create a fresh state with zero accumulators for ``params``."""
        accumulators = {name: np.zeros_like(value) for name, value in params.items()}
        return cls(accumulators=accumulators, **settings)


def _spatial(input: Tensor, what: str) -> Tuple[int, int, int]:
    if input.ndim < 3:
        raise ShapeError(f"{what} expects (..., H, W, C) input, got shape {input.shape}")
    return input.shape[-3], input.shape[-2], input.shape[-1]


def conv2d_output_shape(input_shape, params: LayerParams) -> Tuple[int, ...]:
    """Output shape of a valid, stride-1 convolution.

    Raises:
        ShapeError: If the input is too small or has the wrong channel count.
    """
    kh, kw, in_channels, out_channels = params.weights.shape
    if len(input_shape) < 3:
        raise ShapeError(f"conv2d expects (..., H, W, C) input, got shape {tuple(input_shape)}")
    height, width, channels = input_shape[-3:]
    if channels != in_channels:
        raise ShapeError(
            f"conv2d input has {channels} channels, weights expect {in_channels}"
        )
    if height < kh:
        raise ShapeError(f"conv2d input height {height} is smaller than kernel height {kh}")
    if width < kw:
        raise ShapeError(f"conv2d input width {width} is smaller than kernel width {kw}")
    return tuple(input_shape[:-3]) + (height - kh + 1, width - kw + 1, out_channels)


def conv2d_forward(input: Tensor, params: LayerParams) -> Tensor:
    """Valid convolution with stride 1.

    ``out[i, j, f] = bias[f] + sum_{a,b,c} input[i+a, j+b, c] * w[a, b, c, f]``

    Args:
        input (np.ndarray): ``(..., H, W, C)`` input.
        params (LayerParams): A conv2d layer.

    Returns:
        np.ndarray: ``(..., H-kh+1, W-kw+1, F)``.

    Raises:
        ShapeError: If channels disagree or the input is smaller than the kernel.

    Examples:
        >>> conv2d_forward(np.zeros((128, 128, 3)), layer).shape
        (126, 126, 32)
    """
    conv2d_output_shape(input.shape, params)
    kh, kw = params.weights.shape[:2]
    # windows: (..., H', W', C, kh, kw)
    windows = sliding_window_view(input, (kh, kw), axis=(-3, -2))
    out = np.tensordot(windows, params.weights, axes=([-3, -2, -1], [2, 0, 1]))
    return out + params.bias


def conv2d_backward(
    input: Tensor,
    params: LayerParams,
    upstream_grad: Tensor,
    compute_input_grad: bool = True,
) -> Tuple[Optional[Tensor], Tensor, Tensor]:
    """Gradients of a valid convolution.

    Args:
        input (np.ndarray): The input of the paired forward call.
        params (LayerParams): The conv2d layer.
        upstream_grad (np.ndarray): Gradient of the loss w.r.t. the forward
            output; must have the forward output shape.
        compute_input_grad (bool): Skip the input gradient (returned as None)
            for the first layer of a network, where nobody consumes it.

    Returns:
        tuple: ``(input_grad, weight_grad, bias_grad)``.

    Raises:
        ShapeError: If ``upstream_grad`` does not match the forward output.
    """
    expected = conv2d_output_shape(input.shape, params)
    if upstream_grad.shape != expected:
        raise ShapeError(
            f"conv2d upstream gradient has shape {upstream_grad.shape}, "
            f"forward output is {expected}"
        )
    kh, kw = params.weights.shape[:2]
    lead = input.ndim - 3
    summed = tuple(range(lead + 2))

    windows = sliding_window_view(input, (kh, kw), axis=(-3, -2))
    weight_grad = np.tensordot(windows, upstream_grad, axes=(summed, summed))
    weight_grad = weight_grad.transpose(1, 2, 0, 3)
    bias_grad = upstream_grad.sum(axis=summed)

    input_grad = None
    if compute_input_grad:
        pad = [(0, 0)] * lead + [(kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)]
        padded = np.pad(upstream_grad, pad)
        up_windows = sliding_window_view(padded, (kh, kw), axis=(-3, -2))
        flipped = params.weights[::-1, ::-1]
        input_grad = np.tensordot(up_windows, flipped, axes=([-3, -2, -1], [3, 0, 1]))
    return input_grad, weight_grad, bias_grad


def maxpool2d_output_shape(input_shape, pool: int = POOL_SIZE) -> Tuple[int, ...]:
    """Output shape of pooling; odd trailing rows and columns are dropped."""
    if len(input_shape) < 3:
        raise ShapeError(f"maxpool2d expects (..., H, W, C) input, got shape {tuple(input_shape)}")
    height, width, channels = input_shape[-3:]
    if height < pool or width < pool:
        raise ShapeError(
            f"maxpool2d input {height}x{width} is smaller than the {pool}x{pool} window"
        )
    return tuple(input_shape[:-3]) + (height // pool, width // pool, channels)


def maxpool2d_forward(input: Tensor, pool: int = POOL_SIZE) -> Tuple[Tensor, Tensor]:
    """Non-overlapping max pooling with stride equal to the window.

    Args:
        input (np.ndarray): ``(..., H, W, C)`` input.
        pool (int): Window edge. Defaults to 2.

    Returns:
        tuple: ``(output, argmax_indices)``. ``argmax_indices`` holds, for every
            output cell, the row-major index of the winner inside its window;
            on ties the first index wins.

    Raises:
        ShapeError: If the input is smaller than the pooling window.
    """
    out_shape = maxpool2d_output_shape(input.shape, pool)
    lead = input.shape[:-3]
    n = len(lead)
    h2, w2, channels = out_shape[-3:]

    cropped = input[..., : h2 * pool, : w2 * pool, :]
    blocks = cropped.reshape(lead + (h2, pool, w2, pool, channels))
    blocks = np.moveaxis(blocks, (n + 1, n + 3), (-2, -1))
    flat = blocks.reshape(lead + (h2, w2, channels, pool * pool))

    argmax_indices = flat.argmax(axis=-1)
    output = np.take_along_axis(flat, argmax_indices[..., None], axis=-1)[..., 0]
    return output, argmax_indices


def maxpool2d_backward(
    argmax_indices: Tensor,
    upstream_grad: Tensor,
    input_shape,
    pool: int = POOL_SIZE,
) -> Tensor:
    """Route the upstream gradient to the winning input of every window.

    Raises:
        ShapeError: If the indices or gradient do not belong to ``input_shape``.
    """
    input_shape = tuple(input_shape)
    expected = maxpool2d_output_shape(input_shape, pool)
    if argmax_indices.shape != expected:
        raise ShapeError(
            f"stale argmax indices: shape {argmax_indices.shape}, "
            f"pooling {input_shape} gives {expected}"
        )
    if upstream_grad.shape != expected:
        raise ShapeError(
            f"maxpool2d upstream gradient has shape {upstream_grad.shape}, expected {expected}"
        )
    lead = input_shape[:-3]
    n = len(lead)
    h2, w2, channels = expected[-3:]

    onehot = np.arange(pool * pool) == argmax_indices[..., None]
    routed = onehot * upstream_grad[..., None]
    routed = routed.reshape(lead + (h2, w2, channels, pool, pool))
    routed = np.moveaxis(routed, (-2, -1), (n + 1, n + 3))
    routed = routed.reshape(lead + (h2 * pool, w2 * pool, channels))

    input_grad = np.zeros(input_shape, dtype=upstream_grad.dtype)
    input_grad[..., : h2 * pool, : w2 * pool, :] = routed
    return input_grad


def dense_forward(input: Tensor, params: LayerParams) -> Tensor:
    """``out = input @ W + bias`` for a 1D input or a batch of rows."""
    in_features = params.weights.shape[0]
    if input.ndim < 1 or input.shape[-1] != in_features:
        raise ShapeError(
            f"dense input has length {input.shape[-1] if input.ndim else 0}, "
            f"weights expect {in_features}"
        )
    return input @ params.weights + params.bias


def dense_backward(
    input: Tensor, params: LayerParams, upstream_grad: Tensor
) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients of a dense layer.

    Returns:
        tuple: ``(input_grad, weight_grad, bias_grad)``; for a 1D input
            ``bias_grad`` equals ``upstream_grad``.

    Raises:
        ShapeError: If shapes disagree with the paired forward call.
    """
    in_features, out_features = params.weights.shape
    if input.ndim < 1 or input.shape[-1] != in_features:
        raise ShapeError(
            f"dense input has length {input.shape[-1] if input.ndim else 0}, "
            f"weights expect {in_features}"
        )
    expected = input.shape[:-1] + (out_features,)
    if upstream_grad.shape != expected:
        raise ShapeError(
            f"dense upstream gradient has shape {upstream_grad.shape}, expected {expected}"
        )
    input_grad = upstream_grad @ params.weights.T
    if input.ndim == 1:
        weight_grad = np.outer(input, upstream_grad)
        bias_grad = upstream_grad.copy()
    else:
        rows = input.reshape(-1, in_features)
        ups = upstream_grad.reshape(-1, out_features)
        weight_grad = rows.T @ ups
        bias_grad = ups.sum(axis=0)
    return input_grad, weight_grad, bias_grad


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(x: Tensor, upstream_grad: Tensor) -> Tensor:
    # subgradient at 0 is 0
    return np.where(x > 0, upstream_grad, 0).astype(upstream_grad.dtype, copy=False)


def sigmoid(x):
    """Logistic function, evaluated through ``exp(-|x|)`` so it never overflows.

    Examples:
        >>> float(sigmoid(0.0))
        0.5
    """
    x = np.asarray(x)
    dtype = np.result_type(x, np.float32)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(dtype, copy=False)
    # saturated tails stay inside the open interval
    info = np.finfo(dtype)
    return np.clip(out, info.tiny, 1 - info.epsneg)[()]


def sigmoid_backward(x, upstream_grad=1.0):
    """Gradient through the sigmoid at pre-activation ``x``: ``s * (1 - s)``."""
    s = sigmoid(x)
    return upstream_grad * s * (1 - s)


def bce_loss(p, y):
    """Binary cross-entropy of a predicted probability against a 0/1 label.

    The probability is clamped to ``[1e-7, 1 - 1e-7]`` before the logarithm;
    the gradient is zero where the clamp is active.

    Args:
        p: Predicted probability (scalar or array).
        y: Label in {0, 1} (scalar or array broadcastable to ``p``).

    Returns:
        tuple: ``(loss, dloss_dp)``.

    Examples:
        >>> loss, grad = bce_loss(0.5, 1)
        >>> round(float(loss), 4)
        0.6931
    """
    p = np.asarray(p)
    y = np.asarray(y, dtype=p.dtype if p.dtype.kind == "f" else np.float64)
    clamped = np.clip(p, BCE_EPSILON, 1 - BCE_EPSILON)
    loss = -(y * np.log(clamped) + (1 - y) * np.log1p(-clamped))
    inside = (p >= BCE_EPSILON) & (p <= 1 - BCE_EPSILON)
    grad = np.where(inside, -y / clamped + (1 - y) / (1 - clamped), 0)
    return loss[()], grad[()]


def rmsprop_step(
    params: Dict[str, Tensor],
    grads: Dict[str, Tensor],
    state: OptimizerState,
) -> Tuple[Dict[str, Tensor], OptimizerState]:
    """Apply one RMSprop update.

    ``v <- rho * v + (1 - rho) * g**2`` and
    ``theta <- theta - lr * g / (sqrt(v) + eps)``, elementwise. Inputs are not
    modified; new dictionaries are returned.

    Args:
        params (dict): Parameter name to tensor.
        grads (dict): Gradient for every parameter name.
        state (OptimizerState): Accumulators for every parameter name.

    Returns:
        tuple: ``(new_params, new_state)``.

    Raises:
        ShapeError: If a gradient or accumulator is missing or misshaped.
    """
    new_params = {}
    new_accumulators = {}
    for name, theta in params.items():
        if name not in grads or name not in state.accumulators:
            raise ShapeError(f"No gradient or accumulator for parameter {name!r}")
        g = grads[name]
        v = state.accumulators[name]
        if g.shape != theta.shape or v.shape != theta.shape:
            raise ShapeError(
                f"Parameter {name!r} has shape {theta.shape}, gradient {g.shape}, "
                f"accumulator {v.shape}"
            )
        v = state.rho * v + (1 - state.rho) * g * g
        new_accumulators[name] = v
        new_params[name] = theta - state.learning_rate * g / (np.sqrt(v) + state.epsilon)
    return new_params, replace(state, accumulators=new_accumulators)
