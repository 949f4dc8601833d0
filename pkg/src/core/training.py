"""Training of feedback spiking networks by implicit differentiation.

One iteration simulates the network for T steps with BN frozen, takes the
last layer's average rate a[T] as the equilibrium estimate, solves the adjoint
system at a[T] with BN in batch mode, assembles the parameter gradients and
applies SGD with momentum. Nothing recorded during the T steps survives the
forward pass: only a[T], the average input x* and running spike counts do.
"""

import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from src.core.data import BatchIterator, Dataset, to_network_input
from src.core.dynamics import InputEncoding, simulate
from src.core.equilibrium import FixedPointMap, SolverConfig, refine
from src.core.gradients import GradientSet, loss_gradients
from src.core.model import (
    NetworkSpec,
    readout_and_loss,
    refresh_power_vector,
    variational_dropout_mask,
)
from src.core.numerics import RngStream, Tensor

# Parameters excluded from weight decay unless `decay_bn_and_alpha` is set.
NO_DECAY_SUFFIXES = (".bn.gamma", ".bn.beta", "feedback.alpha")

# Stream offset of the dropout masks, apart from the shuffling streams.
DROPOUT_STREAM = 1 << 40


class TrainConfig(BaseModel):
    """Optimizer, schedule and simulation settings of a training run."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=128, ge=1)
    lr: float = Field(default=0.05, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=5e-4, ge=0)
    decay_every: int = Field(default=30, ge=1)
    decay_factor: float = Field(default=0.1, gt=0, le=1)
    milestones: list[int] | None = None
    warmup_iters: int = Field(default=400, ge=0)
    T: int = Field(default=5, ge=1)
    dropout: float = Field(default=0.0, ge=0, lt=1)
    decay_bn_and_alpha: bool = False
    forward_refine: bool = False
    forward_solver: SolverConfig = Field(default_factory=SolverConfig)
    backward_solver: SolverConfig = Field(default_factory=SolverConfig)
    unhealthy_fraction: float = Field(default=0.5, ge=0, le=1)
    threads: int = Field(default=1, ge=1)
    seed: int = 0
    dataset: str = "fashion-mnist"
    architecture: str = "400 (F400)"


@dataclass
class OptimizerState:
    """Momentum buffers and progress counters."""

    velocities: dict[str, Tensor] = field(default_factory=dict)
    iteration: int = 0
    epoch: int = 0
    batch: int = 0


# --- Optimizer ---


def lr_at(iteration: int, epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first iterations, then step decay by epoch."""
    if iteration < cfg.warmup_iters:
        return cfg.lr * iteration / cfg.warmup_iters
    if cfg.milestones is not None:
        passed = sum(1 for m in cfg.milestones if epoch >= m)
    else:
        passed = epoch // cfg.decay_every
    return cfg.lr * cfg.decay_factor**passed


def sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    state: OptimizerState,
    lr: float,
    momentum: float,
    wd: float,
    no_decay: set[str] | None = None,
) -> bool:
    """Classical momentum with L2 decay folded into the gradient, in place.

    v ← momentum·v + (g + wd·θ); θ ← θ − lr·v

    Returns:
        bool: False if the step was skipped because a gradient is not finite.
    """
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        logging.warning(
            f"Non-finite gradient at iteration {state.iteration}; step skipped."
        )
        return False
    no_decay = no_decay or set()
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        decay = 0.0 if name in no_decay else wd
        velocity = state.velocities.setdefault(name, np.zeros_like(param))
        velocity *= momentum
        velocity += grad + decay * param
        param -= lr * velocity
    return True


def apply_update(
    spec: NetworkSpec,
    grads: GradientSet,
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> bool:
    """SGD step on every parameter, then re-clip α and advance power iteration."""
    params = spec.parameters()
    no_decay = (
        set()
        if cfg.decay_bn_and_alpha
        else {name for name in params if name.endswith(NO_DECAY_SUFFIXES)}
    )
    applied = sgd_step(
        params, grads.grads, state, lr, cfg.momentum, cfg.weight_decay, no_decay
    )
    spec.feedback.clip_alpha()
    refresh_power_vector(spec.feedback)
    return applied


# --- Forward pass ---


@dataclass
class ForwardPass:
    """What the forward simulation hands to the backward pass."""

    a_T: Tensor
    x_star: Tensor
    spike_counts: list[float]
    neuron_steps: list[int]

    @property
    def firing_rates(self) -> list[float]:
        pairs = zip(self.spike_counts, self.neuron_steps, strict=True)
        return [c / n if n else 0.0 for c, n in pairs]

    @property
    def total_firing_rate(self) -> float:
        total = sum(self.neuron_steps)
        return sum(self.spike_counts) / total if total else 0.0


def forward_pass(
    spec: NetworkSpec, x: Tensor, T: int, threads: int = 1
) -> ForwardPass:
    """Simulate a batch for T steps, optionally split over worker threads.

    Chunks are concatenated in their original order, so the result does not
    depend on the thread count.
    """
    chunks = np.array_split(x, min(threads, x.shape[0])) if threads > 1 else [x]

    def run(chunk: Tensor) -> ForwardPass:
        state, _ = simulate(
            spec, InputEncoding.constant(chunk), T, track_residuals=False
        )
        return ForwardPass(
            a_T=state.rates()[-1],
            x_star=state.x_star,
            spike_counts=[float(c.sum()) for c in state.spike_count],
            neuron_steps=[int(c.size) * state.t for c in state.spike_count],
        )

    if len(chunks) == 1:
        return run(chunks[0])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(run, chunks))
    layers = range(spec.num_layers)
    return ForwardPass(
        a_T=np.concatenate([p.a_T for p in parts]),
        x_star=np.concatenate([p.x_star for p in parts]),
        spike_counts=[sum(p.spike_counts[i] for p in parts) for i in layers],
        neuron_steps=[sum(p.neuron_steps[i] for p in parts) for i in layers],
    )


def _has_bn(spec: NetworkSpec) -> bool:
    return any(layer.bn is not None for layer in spec.layers)


# --- Training ---


@dataclass
class StepResult:
    loss: float
    correct: int
    count: int
    mean_residual: float
    firing_counts: list[float]
    neuron_steps: list[int]
    backward_converged: bool
    applied: bool


RetainedHook = Callable[[dict[str, object]], None]


def train_step(
    spec: NetworkSpec,
    images: Tensor,
    labels: np.ndarray,
    cfg: TrainConfig,
    state: OptimizerState,
    on_retained: RetainedHook | None = None,
) -> StepResult:
    """One training iteration: simulate, differentiate at a[T], update.

    Args:
        spec (NetworkSpec): The network, updated in place.
        images (Tensor): Normalized (B, H, W, C) images.
        labels (np.ndarray): Class indices.
        cfg (TrainConfig): Training settings.
        state (OptimizerState): Momentum buffers and counters, updated.
        on_retained (callable, optional): Receives every tensor kept between
            the end of the forward pass and the optimizer step.

    Returns:
        StepResult: Loss, accuracy counts and diagnostics of this batch.
    """
    x = to_network_input(images, spec.input_shape)
    forward = forward_pass(spec, x, cfg.T, cfg.threads)
    a_T = forward.a_T
    if cfg.forward_refine:
        a_T = refine(spec, forward.x_star, a_T, cfg.forward_solver).a_star

    residual = float(FixedPointMap(spec, forward.x_star).sample_residuals(a_T).mean())
    mask = None
    if cfg.dropout > 0:
        mask = variational_dropout_mask(
            a_T.shape,
            cfg.dropout,
            RngStream(cfg.seed, DROPOUT_STREAM + state.iteration),
        )
    bn_mode = "batch" if _has_bn(spec) else "frozen"
    fmap = FixedPointMap(spec, forward.x_star, bn_mode=bn_mode, dropout_mask=mask)
    result = loss_gradients(fmap, a_T, labels, cfg.backward_solver)
    if bn_mode == "batch":
        fmap.evaluate(a_T, update_running=True)

    if on_retained is not None:
        retained: dict[str, object] = {
            "a_T": a_T,
            "x_star": forward.x_star,
            "beta_star": result.backward.beta_star,
            "logits": result.logits,
        }
        retained.update({f"grad:{k}": v for k, v in result.grads.items()})
        on_retained(retained)

    lr = lr_at(state.iteration, state.epoch, cfg)
    applied = apply_update(spec, result.grads, state, lr, cfg)
    state.iteration += 1

    correct = int(np.sum(np.argmax(result.logits, axis=1) == labels))
    return StepResult(
        loss=result.loss,
        correct=correct,
        count=len(labels),
        mean_residual=residual,
        firing_counts=forward.spike_counts,
        neuron_steps=forward.neuron_steps,
        backward_converged=result.backward.converged,
        applied=applied,
    )


@dataclass
class EpochMetrics:
    loss: float
    accuracy: float
    mean_residual: float
    total_firing_rate: float
    layer_firing_rates: list[float]
    unhealthy: bool = False
    nonconverged_fraction: float = 0.0


class _Accumulator:
    def __init__(self, layers: int) -> None:
        self.loss = 0.0
        self.correct = 0
        self.count = 0
        self.residual = 0.0
        self.spikes = [0.0] * layers
        self.steps = [0] * layers
        self.failed = 0
        self.batches = 0

    def add(
        self,
        loss: float,
        correct: int,
        count: int,
        residual: float,
        spikes: list[float],
        steps: list[int],
    ) -> None:
        self.loss += loss * count
        self.correct += correct
        self.count += count
        self.residual += residual * count
        self.spikes = [a + b for a, b in zip(self.spikes, spikes, strict=True)]
        self.steps = [a + b for a, b in zip(self.steps, steps, strict=True)]
        self.batches += 1

    def metrics(self) -> EpochMetrics:
        n = max(self.count, 1)
        pairs = zip(self.spikes, self.steps, strict=True)
        rates = [s / t if t else 0.0 for s, t in pairs]
        total = sum(self.spikes) / sum(self.steps) if sum(self.steps) else 0.0
        return EpochMetrics(
            loss=self.loss / n,
            accuracy=self.correct / n,
            mean_residual=self.residual / n,
            total_firing_rate=total,
            layer_firing_rates=rates,
            nonconverged_fraction=self.failed / max(self.batches, 1),
        )


def train_epoch(
    spec: NetworkSpec,
    loader: BatchIterator,
    cfg: TrainConfig,
    state: OptimizerState,
    progress: bool = False,
    stop_after: int | None = None,
) -> EpochMetrics:
    """Run the batches of `state.epoch`, resuming at `state.batch`.

    Args:
        stop_after (int, optional): Stop once this many batches of the epoch
            are done (used to interrupt and resume a run).

    Returns:
        EpochMetrics: Aggregates over the batches run by this call.
    """
    product, bound = spec.product_norm_condition()
    logging.info(
        f"Epoch {state.epoch + 1}: feedback/layer norm product {product:.4f} "
        f"(contraction bound {bound:.4f})."
    )
    acc = _Accumulator(spec.num_layers)
    end = len(loader) if stop_after is None else min(stop_after, len(loader))
    batches = loader.batches(state.epoch, start=state.batch)
    bar = tqdm(
        total=end - state.batch,
        desc=f"epoch {state.epoch + 1}",
        disable=not progress,
        leave=False,
    )
    for images, labels in batches:
        if state.batch >= end:
            break
        step = train_step(spec, images, labels, cfg, state)
        acc.add(
            step.loss,
            step.correct,
            step.count,
            step.mean_residual,
            step.firing_counts,
            step.neuron_steps,
        )
        if not step.backward_converged:
            acc.failed += 1
        state.batch += 1
        bar.update(1)
        bar.set_postfix(loss=f"{step.loss:.4f}")
    bar.close()

    metrics = acc.metrics()
    if metrics.nonconverged_fraction > cfg.unhealthy_fraction:
        metrics.unhealthy = True
        logging.warning(
            f"Epoch {state.epoch + 1} unhealthy: "
            f"{metrics.nonconverged_fraction:.0%} of backward solves did not converge."
        )
    if state.batch >= len(loader):
        state.epoch += 1
        state.batch = 0
    return metrics


def evaluate(
    spec: NetworkSpec,
    dataset: Dataset,
    T: int,
    batch_size: int = 256,
    threads: int = 1,
    progress: bool = False,
) -> EpochMetrics:
    """BN-frozen inference: loss, accuracy, residual of a[T] and firing rates."""
    loader = BatchIterator(dataset, batch_size, shuffle=False)
    acc = _Accumulator(spec.num_layers)
    batches = tqdm(
        loader.batches(0),
        total=len(loader),
        desc="eval",
        disable=not progress,
        leave=False,
    )
    for images, labels in batches:
        x = to_network_input(images, spec.input_shape)
        forward = forward_pass(spec, x, T, threads)
        out = readout_and_loss(forward.a_T, spec.readout, labels)
        fmap = FixedPointMap(spec, forward.x_star)
        residual = float(fmap.sample_residuals(forward.a_T).mean())
        correct = int(np.sum(np.argmax(out.logits, axis=1) == labels))
        acc.add(
            out.loss,
            correct,
            len(labels),
            residual,
            forward.spike_counts,
            forward.neuron_steps,
        )
    return acc.metrics()


# --- Multi-epoch driver ---


@dataclass
class FitSummary:
    best_acc: float
    final_acc: float
    epochs: int
    history: list[tuple[EpochMetrics, EpochMetrics]] = field(default_factory=list)


EpochCallback = Callable[[int, EpochMetrics, EpochMetrics, OptimizerState], None]


def fit(
    spec: NetworkSpec,
    train_set: Dataset,
    test_set: Dataset,
    cfg: TrainConfig,
    state: OptimizerState | None = None,
    augment: bool = False,
    progress: bool = False,
    on_epoch_end: EpochCallback | None = None,
) -> FitSummary:
    """Train for `cfg.epochs` epochs with a test evaluation after each one.

    Args:
        on_epoch_end (callable, optional): Called with (epoch, train metrics,
            test metrics, optimizer state), e.g. to write metrics and
            checkpoints.

    Returns:
        FitSummary: Best and final test accuracy.
    """
    state = state or OptimizerState()
    loader = BatchIterator(train_set, cfg.batch_size, seed=cfg.seed, augment=augment)
    logging.info(
        f"Training '{spec.architecture}' ({spec.parameter_count()} parameters) for "
        f"{cfg.epochs} epochs, {len(loader)} batches each, T={cfg.T}."
    )
    summary = FitSummary(best_acc=0.0, final_acc=0.0, epochs=state.epoch)
    while state.epoch < cfg.epochs:
        epoch = state.epoch + 1
        train_metrics = train_epoch(spec, loader, cfg, state, progress=progress)
        test_metrics = evaluate(
            spec, test_set, cfg.T, threads=cfg.threads, progress=progress
        )
        logging.info(
            f"Epoch {epoch}: train loss {train_metrics.loss:.4f} "
            f"acc {train_metrics.accuracy:.4f}; "
            f"test loss {test_metrics.loss:.4f} acc {test_metrics.accuracy:.4f}; "
            f"firing {test_metrics.total_firing_rate:.4f}."
        )
        summary.best_acc = max(summary.best_acc, test_metrics.accuracy)
        summary.final_acc = test_metrics.accuracy
        summary.epochs = epoch
        summary.history.append((train_metrics, test_metrics))
        if on_epoch_end is not None:
            on_epoch_end(epoch, train_metrics, test_metrics, state)
        if not math.isfinite(train_metrics.loss):
            logging.warning(f"Loss became non-finite in epoch {epoch}; stopping.")
            break
    return summary
