"""Fixed-point maps of feedback spiking networks and the solvers that find them.

The equilibrium rate of a single-layer network satisfies
a* = σ((W a* + F x* + b) / V_th), where σ clamps to [0, 1]. For N layers the
map is the composite through every layer; it can be anchored on any layer,
and training uses the last one: G(a^N) = f_N(...f_2(f_1(a^N, x*))).

Two solvers are provided: Broyden's quasi-Newton method on g(a) = f(a) − a and
damped fixed-point iteration a ← (1 − d)·a + d·f(a). Both are also used for
the adjoint linear system in `src.core.gradients`.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.core.model import (
    BnCache,
    BnMode,
    FeedbackWeights,
    NetworkSpec,
    bn_forward,
    effective_feedback,
)
from src.core.numerics import Shape, Tensor, apply

# --- Configuration ---


class SolverConfig(BaseModel):
    """Settings of a forward or backward equilibrium solve."""

    model_config = ConfigDict(extra="forbid")

    method: Literal["broyden", "fixed_point"] = "broyden"
    max_iters: int = Field(default=30, ge=1)
    tol: float = Field(default=1e-6, gt=0)
    damping: float = Field(default=0.5, gt=0, le=1)


def clamp_sigma(z: Tensor) -> Tensor:
    """Clamp elementwise to [0, 1]."""
    return np.clip(z, 0.0, 1.0)


# --- Fixed-point map ---


@dataclass
class MapEvaluation:
    """One evaluation of the composite map, with every intermediate layer."""

    output: Tensor
    rates: list[Tensor]
    preacts: list[Tensor]
    layer_inputs: list[Tensor]
    bn_caches: list[BnCache | None]


class FixedPointMap:
    """The rate map f_θ of a network for a fixed (average) input x*.

    Args:
        spec (NetworkSpec): The network; its parameters are read, not changed.
        x_star (Tensor): Encoded input, single sample or batch.
        anchor (int): Layer whose rate is the map's state (default: last).
        bn_mode (str): 'frozen' (running statistics) or 'batch'.
        dropout_mask (Tensor, optional): Multiplies the rates entering the
            feedback operator, shaped like a batch of last-layer rates.
        feedback (FeedbackWeights, optional): Precomputed effective feedback.
    """

    def __init__(
        self,
        spec: NetworkSpec,
        x_star: Tensor,
        anchor: int = -1,
        bn_mode: BnMode = "frozen",
        dropout_mask: Tensor | None = None,
        feedback: FeedbackWeights | None = None,
    ) -> None:
        self.spec = spec
        self.bn_mode = bn_mode
        n = spec.num_layers
        if not -n <= anchor < n:
            msg = f"Anchor {anchor} is out of range for {n} layers."
            logging.error(msg)
            raise ValueError(msg)
        self.anchor = anchor % n
        self.order = list(range(self.anchor + 1, n)) + list(range(self.anchor + 1))

        x = np.asarray(x_star, dtype=np.float64)
        self.batched = x.shape != tuple(spec.input_shape)
        if self.batched and x.shape[1:] != tuple(spec.input_shape):
            msg = (
                f"Input shape {x.shape} does not match network input "
                f"{spec.input_shape}."
            )
            logging.error(msg)
            raise ValueError(msg)
        self.x_star = x if self.batched else x[np.newaxis]
        if feedback is None:
            feedback = effective_feedback(spec.feedback)
        self.feedback = feedback

        last_shape = (self.batch_size, *spec.layer_shape(n - 1))
        if dropout_mask is not None and np.shape(dropout_mask) != last_shape:
            msg = f"Dropout mask shape {np.shape(dropout_mask)} must be {last_shape}."
            logging.error(msg)
            raise ValueError(msg)
        self.dropout_mask = dropout_mask

        first = spec.layers[0]
        self.drive_linear = apply(first.op, self.x_star)
        self.drive_cache: BnCache | None = None
        if first.bn is not None:
            self.drive, self.drive_cache = bn_forward(
                first.bn, self.drive_linear, bn_mode, update_running=False
            )
        else:
            self.drive = self.drive_linear

    @property
    def batch_size(self) -> int:
        return int(self.x_star.shape[0])

    @property
    def state_shape(self) -> Shape:
        return self.spec.layer_shape(self.anchor)

    def _batch(self, a: Tensor) -> Tensor:
        a = np.asarray(a, dtype=np.float64)
        expected = (self.batch_size, *self.state_shape)
        if a.shape == expected:
            return a
        if not self.batched and a.shape == self.state_shape:
            return a[np.newaxis]
        msg = f"State shape {a.shape} does not match the map state {expected}."
        logging.error(msg)
        raise ValueError(msg)

    def evaluate(self, a: Tensor, update_running: bool = False) -> MapEvaluation:
        """Evaluate the composite map on a batch of anchor-layer rates."""
        spec = self.spec
        n = spec.num_layers
        rates: list[Tensor] = [np.empty(0)] * n
        preacts: list[Tensor] = [np.empty(0)] * n
        inputs: list[Tensor] = [np.empty(0)] * n
        caches: list[BnCache | None] = [None] * n

        current = self._batch(a)
        for index in self.order:
            inputs[index] = current
            if index == 0:
                fed = current
                if self.dropout_mask is not None:
                    fed = current * self.dropout_mask
                total = apply(self.feedback.op, fed) + self.drive
                if update_running and spec.layers[0].bn is not None:
                    bn_forward(spec.layers[0].bn, self.drive_linear, "batch")
                caches[0] = self.drive_cache
            else:
                layer = spec.layers[index]
                total = apply(layer.op, current)
                if layer.bn is not None:
                    total, caches[index] = bn_forward(
                        layer.bn, total, self.bn_mode, update_running=update_running
                    )
            preacts[index] = total / spec.v_th
            current = clamp_sigma(preacts[index])
            rates[index] = current
        return MapEvaluation(current, rates, preacts, inputs, caches)

    def evaluate_output(self, a: Tensor) -> Tensor:
        return self.evaluate(a).output

    def __call__(self, a: Tensor) -> Tensor:
        out = self.evaluate(a).output
        return out if self.batched or np.shape(a) != self.state_shape else out[0]

    def sample_residuals(self, a: Tensor) -> Tensor:
        """Per-sample ∥f(a) − a∥₂."""
        batch = self._batch(a)
        diff = self.evaluate(batch).output - batch
        return np.linalg.norm(diff.reshape(diff.shape[0], -1), axis=1)


def eval_map(fmap: FixedPointMap, a: Tensor) -> MapEvaluation:
    """Evaluate the map, returning the output and every intermediate layer rate."""
    return fmap.evaluate(a)


def residual(fmap: FixedPointMap, a: Tensor) -> float:
    """Return ∥f(a) − a∥₂ (the largest over the batch for batched maps)."""
    return float(fmap.sample_residuals(a).max())


# --- Solvers ---


@dataclass
class EquilibriumSolution:
    """Result of an equilibrium (or adjoint) solve."""

    a_star: Tensor
    residual: float
    residuals: Tensor
    iterations: int
    converged: bool
    residual_trace: list[float] = field(default_factory=list)

    def rows(self) -> list[tuple[int, float]]:
        """Return `(iter, residual)` rows for CSV export."""
        return [(i + 1, r) for i, r in enumerate(self.residual_trace)]


@dataclass
class _RootResult:
    x: Tensor
    norms: Tensor
    iterations: int
    trace: list[float]
    finite: bool


def _row_norms(x: Tensor) -> Tensor:
    return np.linalg.norm(x, axis=1)


def broyden(
    g: Callable[[Tensor], Tensor],
    x0: Tensor,
    max_iters: int,
    tol: float,
    eps: float = 1e-12,
) -> _RootResult:
    """Find a root of g by good Broyden, independently for every row of x0.

    The inverse Jacobian starts at −I and is kept as −I + Σ uᵢvᵢᵀ with the
    rank-one factors stored per row. The best iterate (smallest ∥g∥) is
    returned.
    """
    x = x0.copy()
    gx = g(x)
    us: list[Tensor] = []
    vs: list[Tensor] = []

    def inv_jacobian_times(y: Tensor) -> Tensor:
        out = -y
        for u, v in zip(us, vs, strict=True):
            out = out + u * np.sum(v * y, axis=1, keepdims=True)
        return out

    def row_times_inv_jacobian(y: Tensor) -> Tensor:
        out = -y
        for u, v in zip(us, vs, strict=True):
            out = out + v * np.sum(u * y, axis=1, keepdims=True)
        return out

    best_x = x.copy()
    best_norm = _row_norms(gx)
    trace: list[float] = []
    if not np.all(np.isfinite(gx)):
        return _RootResult(best_x, best_norm, 0, trace, False)
    active = best_norm > tol
    iterations = 0
    while iterations < max_iters and np.any(active):
        iterations += 1
        dx = np.where(active[:, np.newaxis], -inv_jacobian_times(gx), 0.0)
        x = x + dx
        g_new = g(x)
        if not np.all(np.isfinite(g_new)):
            trace.append(float(best_norm.max()))
            return _RootResult(best_x, best_norm, iterations, trace, False)
        dg = np.where(active[:, np.newaxis], g_new - gx, 0.0)
        gx = g_new

        norms = _row_norms(gx)
        improved = norms < best_norm
        best_x[improved] = x[improved]
        best_norm[improved] = norms[improved]
        trace.append(float(best_norm.max()))
        active = best_norm > tol

        v_t = row_times_inv_jacobian(dx)
        denom = np.sum(v_t * dg, axis=1, keepdims=True)
        denom = np.where(denom >= 0, denom + eps, denom - eps)
        u = (dx - inv_jacobian_times(dg)) / denom
        us.append(np.where(active[:, np.newaxis], u, 0.0))
        vs.append(v_t)
    return _RootResult(best_x, best_norm, iterations, trace, True)


def damped_iteration(
    f: Callable[[Tensor], Tensor],
    x0: Tensor,
    max_iters: int,
    tol: float,
    damping: float,
) -> _RootResult:
    """Iterate x ← (1 − d)·x + d·f(x) until every row's ∥f(x) − x∥₂ ≤ tol."""
    x = x0.copy()
    trace: list[float] = []
    norms = np.full(x.shape[0], np.inf)
    for iteration in range(1, max_iters + 1):
        fx = f(x)
        if not np.all(np.isfinite(fx)):
            return _RootResult(x, norms, iteration, trace, False)
        norms = _row_norms(fx - x)
        trace.append(float(norms.max()))
        if norms.max() <= tol:
            return _RootResult(x, norms, iteration - 1, trace, True)
        x = (1.0 - damping) * x + damping * fx
    finite = bool(np.all(np.isfinite(x)))
    return _RootResult(x, _row_norms(f(x) - x), max_iters, trace, finite)


def row_problem(
    f: Callable[[Tensor], Tensor], a0: Tensor, joint: bool
) -> tuple[Callable[[Tensor], Tensor], Tensor]:
    """View f as a map on rows: one row per sample, or one row overall."""
    shape = a0.shape
    rows = 1 if joint else shape[0]

    def flat_f(x: Tensor) -> Tensor:
        return np.asarray(f(x.reshape(shape))).reshape(rows, -1)

    return flat_f, a0.reshape(rows, -1)


def solve_fixed_point(
    fmap: FixedPointMap | Callable[[Tensor], Tensor],
    cfg: SolverConfig | None = None,
    a0: Tensor | None = None,
) -> EquilibriumSolution:
    """Solve a = f(a) with Broyden or damped fixed-point iteration.

    A `FixedPointMap` is solved per sample, or jointly over the batch when its
    batch normalization runs in batch mode (statistics couple the samples).
    Any other callable is solved as a single problem on the shape of a0.

    Args:
        fmap: The map f.
        cfg (SolverConfig, optional): Solver settings; defaults to Broyden.
        a0 (Tensor, optional): Start point; zero rates when omitted.

    Returns:
        EquilibriumSolution: Best iterate and its status. Non-convergence is
        reported through `converged`, never raised.
    """
    cfg = cfg or SolverConfig()
    if isinstance(fmap, FixedPointMap):
        if a0 is None:
            start = np.zeros((fmap.batch_size, *fmap.state_shape))
        else:
            start = fmap._batch(a0)
        joint = fmap.bn_mode == "batch"
        call: Callable[[Tensor], Tensor] = fmap.evaluate_output
    else:
        if a0 is None:
            msg = "A start point is required when solving a plain callable."
            logging.error(msg)
            raise ValueError(msg)
        start = np.asarray(a0, dtype=np.float64)[np.newaxis]
        joint = True

        def call(x: Tensor) -> Tensor:
            return np.asarray(fmap(x[0]), dtype=np.float64)[np.newaxis]

    flat_f, x0 = row_problem(call, start, joint)
    if cfg.method == "broyden":
        result = broyden(lambda x: flat_f(x) - x, x0, cfg.max_iters, cfg.tol)
    else:
        result = damped_iteration(flat_f, x0, cfg.max_iters, cfg.tol, cfg.damping)

    a_star = result.x.reshape(start.shape)
    if result.finite:
        diff = call(a_star) - a_star
        per_sample = np.linalg.norm(diff.reshape(diff.shape[0], -1), axis=1)
    else:
        per_sample = np.full(start.shape[0], np.inf)
    worst = float(per_sample.max())
    converged = result.finite and worst <= cfg.tol
    if not result.finite:
        logging.warning(f"{cfg.method} solve produced a non-finite iterate; aborted.")
    elif not converged:
        logging.warning(
            f"{cfg.method} solve did not converge: residual {worst:.3e} after "
            f"{result.iterations} iterations (tol {cfg.tol:.1e})."
        )

    if not (isinstance(fmap, FixedPointMap) and fmap.batched):
        a_star = a_star[0]
    return EquilibriumSolution(
        a_star=a_star,
        residual=worst,
        residuals=per_sample,
        iterations=result.iterations,
        converged=converged,
        residual_trace=result.trace,
    )


def refine(
    spec: NetworkSpec, x_star: Tensor, a_T: Tensor, cfg: SolverConfig | None = None
) -> EquilibriumSolution:
    """Polish a simulated last-layer rate a[T] into a solver equilibrium."""
    return solve_fixed_point(FixedPointMap(spec, x_star), cfg, a0=a_T)
