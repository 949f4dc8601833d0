"""Dense tensor arithmetic and linear operators for the spiking network engine.

This module is the substrate every other module builds on. Tensors are plain
`numpy` float64 arrays in row-major order; a `LinearOp` bundles a weight, an
optional bias and the shape descriptors of a dense layer, a 2-D convolution or
a transposed 2-D convolution. Every operator has an exact adjoint, a weight
gradient and a power-iteration spectral norm.

Operators accept either a single sample (shape == `input_shape`) or a batch
(shape == `(B, *input_shape)`) and return the matching layout.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import NDArray

Tensor = NDArray[np.float64]
Shape = tuple[int, ...]
OpKind = Literal["dense", "conv2d", "conv2d_transposed"]

# Seed of the fixed stream used to start power iteration.
POWER_ITERATION_SEED = 0x5EC7
# Iteration cap of power iteration; the residual test usually stops it far earlier.
POWER_ITERATION_MAX_ITERS = 1000


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by a (seed, stream) pair.

    Identical pairs always produce identical sequences, independently of
    thread counts or call order elsewhere in the program.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        """Return a fresh numpy Generator positioned at the stream start."""
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(sequence))

    def substream(self, stream: int) -> "RngStream":
        """Return the stream with the same seed and another stream id."""
        return RngStream(self.seed, stream)


@dataclass
class LinearOp:
    """A linear operator with an optional bias.

    Weight layouts:
        dense: (out_features, prod(input_shape))
        conv2d: (C_out, C_in, k, k), input (C_in, H, W)
        conv2d_transposed: (C_in, C_out, k, k), input (C_in, H, W)

    The transposed convolution is defined as the exact adjoint of the stride-s
    convolution that maps its output back to its input.
    """

    kind: OpKind
    weight: Tensor
    bias: Tensor | None
    input_shape: Shape
    stride: int = 1
    padding: int = 0
    output_padding: int = 0
    output_shape: Shape = field(init=False)

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.output_shape = _infer_output_shape(self)

    @property
    def out_channels(self) -> int:
        """Number of output features (dense) or output channels (conv)."""
        return self.output_shape[0]

    def copy(self) -> "LinearOp":
        """Return a deep copy that shares no arrays with this operator."""
        return copy.deepcopy(self)

    def with_weight(self, weight: Tensor, bias: Tensor | None = None) -> "LinearOp":
        """Return an operator with the same geometry and new parameters."""
        return LinearOp(
            kind=self.kind,
            weight=weight,
            bias=bias,
            input_shape=self.input_shape,
            stride=self.stride,
            padding=self.padding,
            output_padding=self.output_padding,
        )

    def without_bias(self) -> "LinearOp":
        """Return the same map with the bias removed (weights shared)."""
        return self.with_weight(self.weight, None)


def dense(
    weight: Tensor, bias: Tensor | None = None, input_shape: Shape | None = None
) -> LinearOp:
    """Build a fully-connected operator."""
    weight = np.asarray(weight, dtype=np.float64)
    shape = input_shape if input_shape is not None else (weight.shape[1],)
    return LinearOp("dense", weight, bias, shape)


def conv2d(
    weight: Tensor,
    bias: Tensor | None,
    input_shape: Shape,
    stride: int = 1,
    padding: int | None = None,
) -> LinearOp:
    """Build a 2-D convolution; padding defaults to k // 2."""
    weight = np.asarray(weight, dtype=np.float64)
    pad = weight.shape[-1] // 2 if padding is None else padding
    return LinearOp("conv2d", weight, bias, input_shape, stride=stride, padding=pad)


def conv2d_transposed(
    weight: Tensor,
    bias: Tensor | None,
    input_shape: Shape,
    stride: int = 2,
    padding: int | None = None,
    output_padding: int | None = None,
) -> LinearOp:
    """Build a transposed 2-D convolution; defaults upscale H to stride * H."""
    weight = np.asarray(weight, dtype=np.float64)
    k = weight.shape[-1]
    pad = k // 2 if padding is None else padding
    # For odd k with "same" padding, output_padding = stride - 1 gives H -> s*H.
    if output_padding is None:
        output_padding = stride - 1 if k % 2 == 1 else 0
    return LinearOp(
        "conv2d_transposed",
        weight,
        bias,
        input_shape,
        stride=stride,
        padding=pad,
        output_padding=output_padding,
    )


# --- Shape handling ---


def _infer_output_shape(op: LinearOp) -> Shape:
    """Compute and validate the output shape of an operator."""
    if op.kind == "dense":
        if op.weight.ndim != 2 or op.weight.shape[1] != math.prod(op.input_shape):
            msg = (
                f"Dense weight {op.weight.shape} does not match input shape "
                f"{op.input_shape}."
            )
            logging.error(msg)
            raise ValueError(msg)
        shape: Shape = (op.weight.shape[0],)
    elif op.kind in ("conv2d", "conv2d_transposed"):
        if op.weight.ndim != 4 or op.weight.shape[2] != op.weight.shape[3]:
            msg = f"Convolution weight must be (a, b, k, k), got {op.weight.shape}."
            logging.error(msg)
            raise ValueError(msg)
        if len(op.input_shape) != 3:
            msg = f"Convolution input must be (C, H, W), got {op.input_shape}."
            logging.error(msg)
            raise ValueError(msg)
        c_in, h, w = op.input_shape
        k, s, p = op.weight.shape[2], op.stride, op.padding
        if op.weight.shape[0 if op.kind == "conv2d_transposed" else 1] != c_in:
            msg = f"Weight {op.weight.shape} does not accept {c_in} input channels."
            logging.error(msg)
            raise ValueError(msg)
        if op.kind == "conv2d":
            shape = (
                op.weight.shape[0],
                (h + 2 * p - k) // s + 1,
                (w + 2 * p - k) // s + 1,
            )
        else:
            if not 0 <= op.output_padding < s:
                msg = (
                    f"output_padding must lie in [0, stride), got {op.output_padding}."
                )
                logging.error(msg)
                raise ValueError(msg)
            shape = (
                op.weight.shape[1],
                (h - 1) * s - 2 * p + k + op.output_padding,
                (w - 1) * s - 2 * p + k + op.output_padding,
            )
        if min(shape[1:]) < 1:
            msg = f"Convolution geometry yields an empty output {shape}."
            logging.error(msg)
            raise ValueError(msg)
    else:
        msg = f"Unknown operator kind '{op.kind}'."
        logging.error(msg)
        raise ValueError(msg)

    if op.bias is not None and op.bias.shape != (shape[0],):
        msg = f"Bias shape {op.bias.shape} does not match {shape[0]} outputs."
        logging.error(msg)
        raise ValueError(msg)
    return shape


def _as_batch(x: Tensor, shape: Shape, what: str) -> tuple[Tensor, bool]:
    """Add a batch axis if needed. Returns (batched array, was_batched)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape == shape:
        return x[np.newaxis], False
    if x.shape[1:] == shape:
        return x, True
    msg = f"{what} shape {x.shape} does not match {shape} (optionally batched)."
    logging.error(msg)
    raise ValueError(msg)


def _restore(x: Tensor, batched: bool) -> Tensor:
    return x if batched else x[0]


# --- Convolution kernels (batched, channel-first) ---


def _window(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def _conv_forward(x: Tensor, w: Tensor, stride: int, padding: int) -> Tensor:
    """Convolve x (B, C, H, W) with w (O, C, k, k)."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    k = w.shape[2]
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    out = np.zeros((x.shape[0], w.shape[0], ho, wo))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, _window(i, ho, stride), _window(j, wo, stride)]
            out += np.einsum("oc,bcyx->boyx", w[:, :, i, j], patch, optimize=True)
    return out


def _conv_backward_input(
    y: Tensor, w: Tensor, stride: int, padding: int, in_hw: tuple[int, ...]
) -> Tensor:
    """Adjoint of `_conv_forward` w.r.t. its input, for an input of size in_hw."""
    h, wd = in_hw
    k = w.shape[2]
    ho, wo = y.shape[2], y.shape[3]
    grad = np.zeros((y.shape[0], w.shape[1], h + 2 * padding, wd + 2 * padding))
    for i in range(k):
        for j in range(k):
            grad[:, :, _window(i, ho, stride), _window(j, wo, stride)] += np.einsum(
                "oc,boyx->bcyx", w[:, :, i, j], y, optimize=True
            )
    return grad[:, :, padding : padding + h, padding : padding + wd]


def _conv_weight_grad(
    x: Tensor, y_bar: Tensor, k: int, stride: int, padding: int
) -> Tensor:
    """Gradient of <y_bar, conv(x, w)> w.r.t. w."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = y_bar.shape[2], y_bar.shape[3]
    grad = np.zeros((y_bar.shape[1], x.shape[1], k, k))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, _window(i, ho, stride), _window(j, wo, stride)]
            grad[:, :, i, j] = np.einsum("boyx,bcyx->oc", y_bar, patch, optimize=True)
    return grad


# --- Public operations ---


def _linear(op: LinearOp, xb: Tensor) -> Tensor:
    """Bias-free forward map on a batch."""
    if op.kind == "dense":
        return xb.reshape(xb.shape[0], -1) @ op.weight.T
    if op.kind == "conv2d":
        return _conv_forward(xb, op.weight, op.stride, op.padding)
    out_hw = op.output_shape[1:]
    return _conv_backward_input(xb, op.weight, op.stride, op.padding, out_hw)


def _linear_adjoint(op: LinearOp, yb: Tensor) -> Tensor:
    """Transpose of the bias-free map on a batch."""
    if op.kind == "dense":
        return (yb @ op.weight).reshape((yb.shape[0], *op.input_shape))
    if op.kind == "conv2d":
        in_hw = op.input_shape[1:]
        return _conv_backward_input(yb, op.weight, op.stride, op.padding, in_hw)
    return _conv_forward(yb, op.weight, op.stride, op.padding)


def _broadcast_bias(op: LinearOp) -> Tensor:
    assert op.bias is not None
    if op.kind == "dense":
        return op.bias
    return op.bias[:, np.newaxis, np.newaxis]


def apply(op: LinearOp, x: Tensor) -> Tensor:
    """Apply the operator: op·x + bias.

    Args:
        op (LinearOp): The operator.
        x (Tensor): Input of shape `op.input_shape`, optionally batched.

    Returns:
        Tensor: Output of shape `op.output_shape` (batched if x was).

    Raises:
        ValueError: If x does not match the operator's input shape.
    """
    xb, batched = _as_batch(x, op.input_shape, "Input")
    out = _linear(op, xb)
    if op.bias is not None:
        out = out + _broadcast_bias(op)
    return _restore(out, batched)


def adjoint(op: LinearOp, y: Tensor) -> Tensor:
    """Apply the transpose of the operator (bias excluded).

    Raises:
        ValueError: If y does not match the operator's output shape.
    """
    yb, batched = _as_batch(y, op.output_shape, "Adjoint input")
    return _restore(_linear_adjoint(op, yb), batched)


def weight_grad(op: LinearOp, x: Tensor, y_bar: Tensor) -> Tensor:
    """Gradient of <y_bar, op(x)> w.r.t. the weight, summed over the batch."""
    xb, _ = _as_batch(x, op.input_shape, "Input")
    yb, _ = _as_batch(y_bar, op.output_shape, "Cotangent")
    if op.kind == "dense":
        return yb.T @ xb.reshape(xb.shape[0], -1)
    k = op.weight.shape[2]
    if op.kind == "conv2d":
        return _conv_weight_grad(xb, yb, k, op.stride, op.padding)
    # <y, convT_w(x)> = <conv_w(y), x>: the roles of input and cotangent swap.
    return _conv_weight_grad(yb, xb, k, op.stride, op.padding)


def bias_grad(op: LinearOp, y_bar: Tensor) -> Tensor:
    """Gradient of <y_bar, op(x)> w.r.t. the bias, summed over the batch."""
    yb, _ = _as_batch(y_bar, op.output_shape, "Cotangent")
    axes = (0,) if op.kind == "dense" else (0, 2, 3)
    return yb.sum(axis=axes)


def inner(a: Tensor, b: Tensor) -> float:
    """Euclidean inner product of two equally-shaped tensors."""
    return float(np.vdot(a, b))


def spectral_norm_vectors(
    op: LinearOp,
    iters: int = POWER_ITERATION_MAX_ITERS,
    tol: float = 1e-6,
    v0: Tensor | None = None,
) -> tuple[float, Tensor, Tensor]:
    """Estimate the largest singular value by power iteration on op^T∘op.

    Iteration stops once the right vector v is an eigenvector of op^T∘op up
    to a relative residual ∥op^T(op v) − σ²v∥ ≤ tol·σ². The relative error of σ
    is then of order tol² divided by the relative spectral gap.

    The returned vectors satisfy sigma == <u, op(v)> exactly (bias excluded),
    so they can be held fixed to differentiate sigma w.r.t. the weight.

    Args:
        op (LinearOp): The operator.
        iters (int): Maximum number of iterations (>= 1).
        tol (float): Relative eigen-residual at which to stop.
        v0 (Tensor, optional): Warm-start right vector (input-shaped).

    Returns:
        tuple[float, Tensor, Tensor]: (sigma, left vector u, right vector v).
    """
    if iters < 1:
        raise ValueError("Power iteration needs at least one iteration.")
    if not np.any(op.weight):
        return 0.0, np.zeros(op.output_shape), np.zeros(op.input_shape)

    if v0 is None or not np.any(v0):
        v = RngStream(POWER_ITERATION_SEED).generator().standard_normal(op.input_shape)
    else:
        v = np.array(v0, dtype=np.float64).reshape(op.input_shape)
    v = v / np.linalg.norm(v)
    bare = op.without_bias()

    for _ in range(iters):
        w = apply(bare, v)
        rho = float(np.vdot(w, w))
        if rho == 0.0:
            return 0.0, np.zeros(op.output_shape), v
        z = adjoint(bare, w)
        if np.linalg.norm(z - rho * v) <= tol * rho:
            break
        v = z / np.linalg.norm(z)
    else:
        logging.debug(f"Power iteration stopped at the {iters}-step cap.")
        w = apply(bare, v)
    sigma = float(np.linalg.norm(w))
    if sigma == 0.0:
        return 0.0, np.zeros(op.output_shape), v
    return sigma, w / sigma, v


def spectral_norm(
    op: LinearOp, iters: int = POWER_ITERATION_MAX_ITERS, tol: float = 1e-6
) -> float:
    """Estimate the spectral norm of the operator (bias excluded)."""
    return spectral_norm_vectors(op, iters, tol)[0]
