"""Network assembly for feedback spiking networks.

This module describes a network (`NetworkSpec`): the feed-forward layer
operators F¹..F^N with optional batch normalization, the feedback operator W¹
stored through a spectral re-parameterization, the neuron model, the firing
threshold and the readout layer. It also parses the compact architecture
shorthand used in configuration files (e.g. "400 (F400)", "64C5s (F64C5)"),
initializes parameters and implements the readout cross-entropy loss.
"""

import copy
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from src.core.numerics import (
    POWER_ITERATION_MAX_ITERS,
    LinearOp,
    RngStream,
    Shape,
    Tensor,
    adjoint,
    apply,
    conv2d,
    conv2d_transposed,
    dense,
    spectral_norm,
    spectral_norm_vectors,
    weight_grad,
)

BnMode = Literal["frozen", "batch"]
InitDistribution = Literal["uniform", "symmetric"]


@dataclass(frozen=True)
class NeuronKind:
    """Integrate-and-fire (λ == 1) or leaky integrate-and-fire (λ < 1)."""

    variant: Literal["IF", "LIF"] = "IF"
    lam: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"Leak factor must lie in (0, 1], got {self.lam}.")
        if self.variant == "IF" and self.lam != 1.0:
            raise ValueError("The IF neuron has no leak; use lambda == 1.")

    @classmethod
    def integrate_and_fire(cls) -> "NeuronKind":
        return cls("IF", 1.0)

    @classmethod
    def leaky(cls, lam: float) -> "NeuronKind":
        return cls("LIF", lam)


# --- Batch normalization ---


@dataclass
class BatchNorm:
    """Per-channel batch normalization with running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.eps <= 0:
            raise ValueError("BatchNorm epsilon must be positive.")
        if np.any(self.running_var < 0):
            raise ValueError("BatchNorm running variance must be non-negative.")

    @classmethod
    def identity(
        cls, channels: int, momentum: float = 0.1, eps: float = 1e-5
    ) -> "BatchNorm":
        """Return γ=1, β=0 with running statistics (0, 1)."""
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[0])


@dataclass
class BnCache:
    """What the batch-norm VJP needs from its forward evaluation."""

    mode: BnMode
    normalized: Tensor
    inv_std: Tensor
    axes: tuple[int, ...]


def _channel_layout(
    z: Tensor, channels: int
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Return (broadcast shape of a per-channel vector, reduction axes)."""
    if z.ndim in (1, 3):
        z_channels = z.shape[0]
        shape = (channels,) + (1,) * (z.ndim - 1)
        axes: tuple[int, ...] = tuple(range(1, z.ndim))
    elif z.ndim in (2, 4):
        z_channels = z.shape[1]
        shape = (1, channels) + (1,) * (z.ndim - 2)
        axes = (0,) + tuple(range(2, z.ndim))
    else:
        z_channels = -1
        shape, axes = (), ()
    if z_channels != channels:
        msg = f"BatchNorm expects {channels} channels, got tensor of shape {z.shape}."
        logging.error(msg)
        raise ValueError(msg)
    return shape, axes


def bn_forward(
    bn: BatchNorm, z: Tensor, mode: BnMode, update_running: bool = True
) -> tuple[Tensor, BnCache]:
    """Normalize z and return the output together with the VJP cache.

    In batch mode the statistics are taken over the batch (and spatial) axes of
    z and, if `update_running` is set, folded into the running statistics with
    the configured momentum (unbiased variance).
    """
    shape, axes = _channel_layout(z, bn.channels)
    if mode == "frozen":
        mean = bn.running_mean.reshape(shape)
        inv_std = 1.0 / np.sqrt(bn.running_var.reshape(shape) + bn.eps)
    else:
        if z.ndim not in (2, 4):
            raise ValueError("Batch-mode normalization needs a batched tensor.")
        count = z.size // bn.channels
        batch_mean = z.mean(axis=axes)
        batch_var = z.var(axis=axes)
        if update_running:
            unbiased = batch_var * count / (count - 1) if count > 1 else batch_var
            m = bn.momentum
            bn.running_mean[...] = (1 - m) * bn.running_mean + m * batch_mean
            bn.running_var[...] = (1 - m) * bn.running_var + m * unbiased
        mean = batch_mean.reshape(shape)
        inv_std = 1.0 / np.sqrt(batch_var.reshape(shape) + bn.eps)

    normalized = (z - mean) * inv_std
    out = bn.gamma.reshape(shape) * normalized + bn.beta.reshape(shape)
    return out, BnCache(mode, normalized, inv_std, axes)


def bn_apply(bn: BatchNorm, z: Tensor, mode: BnMode = "frozen") -> Tensor:
    """Apply batch normalization in frozen or batch mode.

    Args:
        bn (BatchNorm): The normalization parameters and statistics.
        z (Tensor): Channel-first tensor, batched (B, C[, H, W]) or not.
        mode (str): 'frozen' uses running statistics; 'batch' uses mini-batch
            statistics and updates the running ones.

    Returns:
        Tensor: The normalized tensor.
    """
    return bn_forward(bn, z, mode)[0]


def bn_vjp(
    bn: BatchNorm, cache: BnCache, delta: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """Backpropagate a cotangent through batch normalization.

    Returns:
        tuple[Tensor, Tensor, Tensor]: (input cotangent, dγ, dβ).
    """
    shape, axes = _channel_layout(delta, bn.channels)
    d_gamma = (delta * cache.normalized).sum(axis=axes)
    d_beta = delta.sum(axis=axes)
    scale = bn.gamma.reshape(shape) * cache.inv_std
    if cache.mode == "frozen":
        return delta * scale, d_gamma, d_beta
    mean_delta = delta.mean(axis=axes, keepdims=True)
    mean_delta_norm = (delta * cache.normalized).mean(axis=axes, keepdims=True)
    d_input = scale * (delta - mean_delta - cache.normalized * mean_delta_norm)
    return d_input, d_gamma, d_beta


def bn_absorb(op: LinearOp, bn: BatchNorm) -> LinearOp:
    """Fold frozen batch normalization into the preceding linear operator.

    W̃ = (γ/√(v+ε))·W and b̃ = (γ/√(v+ε))·(b − e) + β, so that the returned
    operator equals bn(op(x)) for every x.
    """
    scale = bn.gamma / np.sqrt(bn.running_var + bn.eps)
    if op.kind == "dense":
        weight = scale[:, np.newaxis] * op.weight
    elif op.kind == "conv2d":
        weight = scale[:, np.newaxis, np.newaxis, np.newaxis] * op.weight
    else:
        weight = scale[np.newaxis, :, np.newaxis, np.newaxis] * op.weight
    bias = op.bias if op.bias is not None else np.zeros(op.out_channels)
    return op.with_weight(weight, scale * (bias - bn.running_mean) + bn.beta)


# --- Spectral re-parameterization of the feedback operator ---


@dataclass
class SpectralReparam:
    """Feedback weight stored as α·raw/∥raw∥₂ with α clipped to [−c, c]."""

    raw: LinearOp
    alpha: Tensor
    clip: float = 1.0
    power_vector: Tensor | None = None

    def __post_init__(self) -> None:
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(())

    def clipped_alpha(self) -> float:
        return float(np.clip(self.alpha, -self.clip, self.clip))

    def clip_alpha(self) -> None:
        """Clip α into [−c, c] in place."""
        self.alpha[...] = self.clipped_alpha()


@dataclass
class FeedbackWeights:
    """The effective feedback operator plus what its gradient needs."""

    op: LinearOp
    sigma: float
    left: Tensor
    right: Tensor
    alpha: float


def effective_feedback(
    rp: SpectralReparam, iters: int = POWER_ITERATION_MAX_ITERS, tol: float = 1e-6
) -> FeedbackWeights:
    """Compute the effective feedback operator α·raw/∥raw∥₂.

    Raises:
        ValueError: If the raw weight has zero spectral norm.
    """
    sigma, left, right = spectral_norm_vectors(rp.raw, iters, tol, v0=rp.power_vector)
    if sigma == 0.0:
        msg = "Feedback weight is degenerate: its spectral norm is zero."
        logging.error(msg)
        raise ValueError(msg)
    alpha = rp.clipped_alpha()
    op = rp.raw.with_weight(rp.raw.weight * (alpha / sigma))
    return FeedbackWeights(op, sigma, left, right, alpha)


def refresh_power_vector(rp: SpectralReparam) -> None:
    """Advance the warm-start vector of the feedback power iteration."""
    _, _, right = spectral_norm_vectors(rp.raw, v0=rp.power_vector)
    rp.power_vector = right


def feedback_reparam_grads(
    rp: SpectralReparam, fw: FeedbackWeights, grad_effective: Tensor
) -> tuple[Tensor, Tensor]:
    """Chain a gradient on the effective weight back to (raw, α).

    The singular vectors are held fixed, so ∂σ/∂raw = u vᵀ (in operator form).
    """
    raw_w = rp.raw.weight
    d_alpha = np.asarray(np.vdot(grad_effective, raw_w) / fw.sigma)
    if abs(float(rp.alpha)) > rp.clip:
        d_alpha = np.asarray(0.0)
    d_sigma_d_raw = weight_grad(rp.raw.without_bias(), fw.right, fw.left)
    d_raw = (fw.alpha / fw.sigma) * grad_effective - (
        fw.alpha * float(np.vdot(grad_effective, raw_w)) / fw.sigma**2
    ) * d_sigma_d_raw
    return d_raw, d_alpha


# --- Architecture description ---


@dataclass(frozen=True)
class LayerTemplate:
    """One token of the architecture shorthand."""

    kind: Literal["dense", "conv2d", "conv2d_transposed"]
    units: int
    kernel: int = 0
    stride: int = 1

    def render(self) -> str:
        if self.kind == "dense":
            return str(self.units)
        if self.kind == "conv2d_transposed":
            suffix = "u"
        else:
            suffix = "s" if self.stride == 2 else ""
        return f"{self.units}C{self.kernel}{suffix}"


@dataclass(frozen=True)
class ArchitectureTemplate:
    """Everything needed to initialize a network."""

    layers: tuple[LayerTemplate, ...]
    feedback: LayerTemplate
    input_shape: Shape
    num_classes: int
    neuron: NeuronKind = field(default_factory=NeuronKind)
    v_th: float = 2.0
    clip: float = 1.0
    batch_norm: bool = True
    init: InitDistribution = "uniform"


_TOKEN = re.compile(r"^(\d+)(?:C(\d+)([su]?))?$")
_ARCHITECTURE = re.compile(
    r"^\s*(?P<body>[^()]+?)\s*\(\s*F(?P<feedback>[^()]+?)\s*\)\s*$"
)


def _parse_token(token: str) -> LayerTemplate:
    match = _TOKEN.match(token.strip())
    if not match:
        msg = f"Cannot parse architecture token '{token}' (pooling is not supported)."
        logging.error(msg)
        raise ValueError(msg)
    units, kernel, suffix = match.groups()
    if kernel is None:
        return LayerTemplate("dense", int(units))
    if suffix == "u":
        return LayerTemplate("conv2d_transposed", int(units), int(kernel), 2)
    return LayerTemplate("conv2d", int(units), int(kernel), 2 if suffix == "s" else 1)


def parse_architecture(text: str) -> tuple[tuple[LayerTemplate, ...], LayerTemplate]:
    """Parse shorthand such as '128C3s-256C3 (F128C3u)'.

    Returns:
        tuple: (feed-forward layer tokens, feedback token).

    Raises:
        ValueError: If the text does not follow the grammar.
    """
    match = _ARCHITECTURE.match(text)
    if not match:
        msg = f"Architecture '{text}' must look like '<layers> (F<feedback>)'."
        logging.error(msg)
        raise ValueError(msg)
    layers = tuple(_parse_token(tok) for tok in match.group("body").split("-"))
    feedback = _parse_token(match.group("feedback"))
    _check_layer_order(text, layers, feedback)
    return layers, feedback


def _check_layer_order(
    text: str, layers: tuple[LayerTemplate, ...], feedback: LayerTemplate
) -> None:
    """Reject token orders that cannot compose for any input shape."""
    problem: str | None = None
    flat = False
    for index, layer in enumerate(layers):
        if layer.kind != "dense" and flat:
            problem = (
                f"layer {index + 1} ({layer.render()}) is a convolution "
                "after a dense layer"
            )
            break
        flat = flat or layer.kind == "dense"
    if problem is None and feedback.kind != "dense" and flat:
        problem = "a convolutional feedback cannot read a dense last layer"
    if problem is None and (feedback.kind == "dense") != (layers[0].kind == "dense"):
        problem = "the feedback must produce the first layer's layout"
    if problem is None and feedback.units != layers[0].units:
        problem = (
            f"the feedback has {feedback.units} outputs but the first layer has "
            f"{layers[0].units}"
        )
    if problem is not None:
        msg = f"Architecture '{text}' is inconsistent: {problem}."
        logging.error(msg)
        raise ValueError(msg)


def render_architecture(
    layers: tuple[LayerTemplate, ...], feedback: LayerTemplate
) -> str:
    """Inverse of `parse_architecture`."""
    return "-".join(layer.render() for layer in layers) + f" (F{feedback.render()})"


def network_input_shape(first: LayerTemplate, image_shape: Shape) -> Shape:
    """Map an (H, W, C) image shape to the network's input layout."""
    if first.kind == "dense":
        return (math.prod(image_shape),)
    h, w, c = image_shape
    return (c, h, w)


def layer_output_shapes(template: ArchitectureTemplate) -> list[Shape]:
    """Output shape of every layer, after checking that the feedback fits.

    Raises:
        ValueError: If a shape does not compose.
    """
    gen = RngStream(0).generator()
    shape = template.input_shape
    shapes: list[Shape] = []
    for layer_template in template.layers:
        shape = _build_op(layer_template, shape, gen, "uniform", False).output_shape
        shapes.append(shape)
    feedback = _build_op(template.feedback, shape, gen, "uniform", with_bias=False)
    first_output = shapes[0]
    if feedback.output_shape != first_output:
        msg = (
            f"Feedback output {feedback.output_shape} of "
            f"'{render_architecture(template.layers, template.feedback)}' must equal "
            f"the first layer output {first_output} for input {template.input_shape}."
        )
        logging.error(msg)
        raise ValueError(msg)
    return shapes


# --- Network ---


@dataclass
class Layer:
    op: LinearOp
    bn: BatchNorm | None = None


@dataclass
class NetworkSpec:
    """A complete feedback spiking network."""

    layers: list[Layer]
    feedback: SpectralReparam
    neuron: NeuronKind
    v_th: float
    readout: LinearOp
    input_shape: Shape
    architecture: str = ""
    init: InitDistribution = "uniform"

    def __post_init__(self) -> None:
        if self.v_th <= 0:
            raise ValueError(f"Threshold must be positive, got {self.v_th}.")
        if not self.layers:
            raise ValueError("A network needs at least one layer.")
        if self.layers[0].op.input_shape != tuple(self.input_shape):
            raise ValueError("First layer does not accept the network input shape.")
        for prev, nxt in zip(self.layers, self.layers[1:], strict=False):
            if math.prod(prev.op.output_shape) != math.prod(nxt.op.input_shape):
                raise ValueError(
                    f"Layer shapes do not compose: {prev.op.output_shape} -> "
                    f"{nxt.op.input_shape}."
                )
        if self.feedback.raw.output_shape != self.layers[0].op.output_shape:
            raise ValueError(
                f"Feedback output {self.feedback.raw.output_shape} must equal the "
                f"first layer output {self.layers[0].op.output_shape}."
            )
        if self.feedback.raw.input_shape != self.layers[-1].op.output_shape:
            raise ValueError("Feedback input must match the last layer output shape.")
        if self.readout.input_shape != self.layers[-1].op.output_shape:
            raise ValueError("Readout input must match the last layer output shape.")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def layer_shape(self, index: int) -> Shape:
        return self.layers[index].op.output_shape

    def parameters(self) -> dict[str, Tensor]:
        """Return named views of every trainable tensor."""
        params: dict[str, Tensor] = {
            "feedback.raw": self.feedback.raw.weight,
            "feedback.alpha": self.feedback.alpha,
        }
        for i, layer in enumerate(self.layers):
            params[f"layers.{i}.weight"] = layer.op.weight
            if layer.op.bias is not None:
                params[f"layers.{i}.bias"] = layer.op.bias
            if layer.bn is not None:
                params[f"layers.{i}.bn.gamma"] = layer.bn.gamma
                params[f"layers.{i}.bn.beta"] = layer.bn.beta
        params["readout.weight"] = self.readout.weight
        return params

    def buffers(self) -> dict[str, Tensor]:
        """Return named non-trainable state (BN statistics, power vector)."""
        buffers: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            if layer.bn is not None:
                buffers[f"layers.{i}.bn.running_mean"] = layer.bn.running_mean
                buffers[f"layers.{i}.bn.running_var"] = layer.bn.running_var
        if self.feedback.power_vector is not None:
            buffers["feedback.power_vector"] = self.feedback.power_vector
        return buffers

    def parameter_count(self) -> int:
        return sum(int(p.size) for p in self.parameters().values())

    def neuron_count(self) -> int:
        return sum(math.prod(layer.op.output_shape) for layer in self.layers)

    def copy(self) -> "NetworkSpec":
        return copy.deepcopy(self)

    def template(self) -> ArchitectureTemplate:
        """The template this network's geometry was initialized from."""
        layers, feedback = parse_architecture(self.architecture)
        return ArchitectureTemplate(
            layers=layers,
            feedback=feedback,
            input_shape=tuple(self.input_shape),
            num_classes=self.readout.output_shape[0],
            neuron=self.neuron,
            v_th=self.v_th,
            clip=self.feedback.clip,
            batch_norm=self.layers[0].bn is not None,
            init=self.init,
        )

    def absorbed_layer_ops(self) -> list[LinearOp]:
        """Layer operators with frozen BN folded in (forward inference form)."""
        return [
            bn_absorb(layer.op, layer.bn) if layer.bn is not None else layer.op
            for layer in self.layers
        ]

    def product_norm_condition(self) -> tuple[float, float]:
        """Return (∥W¹∥₂·∏∥Fˡ∥₂, V_th^N): the multi-layer contraction monitor.

        Only the layers between the feedback and the first layer count, so a
        single-layer network reduces to ∥W∥₂ against V_th.
        """
        product = abs(self.feedback.clipped_alpha())
        for op in self.absorbed_layer_ops()[1:]:
            product *= spectral_norm(op)
        return product, self.v_th**self.num_layers


def _sample_weight(
    shape: tuple[int, ...],
    out_axis: int,
    gen: np.random.Generator,
    dist: InitDistribution,
) -> Tensor:
    """Sample U(0,1) (or U(-1,1)) and normalize each output slice to unit norm."""
    low = 0.0 if dist == "uniform" else -1.0
    weight = gen.uniform(low, 1.0, size=shape)
    moved = np.moveaxis(weight, out_axis, 0)
    norms = np.linalg.norm(moved.reshape(moved.shape[0], -1), axis=1)
    norms[norms == 0] = 1.0
    moved /= norms.reshape((-1,) + (1,) * (moved.ndim - 1))
    return weight


def _build_op(
    template: LayerTemplate,
    in_shape: Shape,
    gen: np.random.Generator,
    dist: InitDistribution,
    with_bias: bool,
) -> LinearOp:
    if template.kind == "dense":
        weight = _sample_weight((template.units, math.prod(in_shape)), 0, gen, dist)
        bias = np.zeros(template.units) if with_bias else None
        return dense(weight, bias, in_shape)
    if len(in_shape) != 3:
        msg = f"A convolution cannot follow a flat shape {in_shape}."
        logging.error(msg)
        raise ValueError(msg)
    c_in, k = in_shape[0], template.kernel
    bias = np.zeros(template.units) if with_bias else None
    if template.kind == "conv2d":
        weight = _sample_weight((template.units, c_in, k, k), 0, gen, dist)
        return conv2d(weight, bias, in_shape, stride=template.stride)
    weight = _sample_weight((c_in, template.units, k, k), 1, gen, dist)
    return conv2d_transposed(weight, bias, in_shape, stride=template.stride)


def init_params(template: ArchitectureTemplate, rng: RngStream) -> NetworkSpec:
    """Initialize a network from its template.

    Weights are sampled from the uniform distribution and each output row (or
    output channel) is normalized to unit 2-norm; biases start at zero, BN at
    γ=1, β=0 with running statistics (0, 1), and α at min(∥raw∥₂, c).

    Args:
        template (ArchitectureTemplate): Shapes and hyperparameters.
        rng (RngStream): Source of randomness; equal streams give equal nets.

    Returns:
        NetworkSpec: The initialized network.
    """
    gen = rng.generator()
    layers: list[Layer] = []
    shape = template.input_shape
    for layer_template in template.layers:
        op = _build_op(layer_template, shape, gen, template.init, with_bias=True)
        bn = BatchNorm.identity(op.out_channels) if template.batch_norm else None
        layers.append(Layer(op, bn))
        shape = op.output_shape

    raw = _build_op(template.feedback, shape, gen, template.init, with_bias=False)
    sigma, _, right = spectral_norm_vectors(raw)
    feedback = SpectralReparam(
        raw=raw,
        alpha=np.asarray(min(sigma, template.clip)),
        clip=template.clip,
        power_vector=right,
    )
    readout = dense(
        _sample_weight((template.num_classes, math.prod(shape)), 0, gen, template.init),
        None,
        shape,
    )
    spec = NetworkSpec(
        layers=layers,
        feedback=feedback,
        neuron=template.neuron,
        v_th=template.v_th,
        readout=readout,
        input_shape=template.input_shape,
        architecture=render_architecture(template.layers, template.feedback),
        init=template.init,
    )
    logging.info(
        f"Initialized '{spec.architecture}': {spec.neuron_count()} neurons, "
        f"{spec.parameter_count()} parameters."
    )
    return spec


def variational_dropout_mask(shape: Shape, rate: float, rng: RngStream) -> Tensor:
    """Per-sample inverted-dropout mask, fixed for a whole backward solve."""
    if rate <= 0.0:
        return np.ones(shape)
    keep = rng.generator().random(shape) >= rate
    return keep / (1.0 - rate)


# --- Readout and loss ---


@dataclass
class ReadoutResult:
    logits: Tensor
    probabilities: Tensor
    loss: float
    grad_rates: Tensor
    grad_readout: Tensor


def readout_and_loss(
    a_T: Tensor, readout: LinearOp, labels: Tensor | int
) -> ReadoutResult:
    """Linear readout o = W^o a[T] followed by mean softmax cross-entropy.

    Args:
        a_T (Tensor): Final (weighted) average rates of the last layer.
        readout (LinearOp): The readout operator W^o.
        labels: Class index per sample.

    Returns:
        ReadoutResult: Logits, loss, dL/da[T] and the readout weight gradient.

    Raises:
        ValueError: If a label is not a valid class index.
    """
    batched = a_T.shape != readout.input_shape
    rates = a_T if batched else a_T[np.newaxis]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    classes = readout.output_shape[0]
    if y.shape != (rates.shape[0],) or np.any(y < 0) or np.any(y >= classes):
        msg = f"Labels {y.tolist()[:8]} are not valid indices for {classes} classes."
        logging.error(msg)
        raise ValueError(msg)

    logits = apply(readout, rates)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    batch = rates.shape[0]
    loss = float(-log_probs[np.arange(batch), y].mean())

    d_logits = probs.copy()
    d_logits[np.arange(batch), y] -= 1.0
    d_logits /= batch
    grad_rates = adjoint(readout, d_logits)
    grad_readout = weight_grad(readout, rates, d_logits)
    if not batched:
        return ReadoutResult(logits[0], probs[0], loss, grad_rates[0], grad_readout)
    return ReadoutResult(logits, probs, loss, grad_rates, grad_readout)
