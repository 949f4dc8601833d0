"""Implicit-differentiation gradients at the equilibrium of a feedback network.

Given the equilibrium a* of the map f and a loss L, the adjoint state β* solves
(I − J_fᵀ) β = ∂L/∂a*, and every parameter gradient is the vector-Jacobian
product of f at a* with β*. No per-time-step simulation state is involved:
gradients depend on (a*, x*, θ) only.

For a single dense layer the products reduce to the Hebbian-like closed forms
∇W = (1/V_th)·Mβ* a*ᵀ, ∇F = (1/V_th)·Mβ* x*ᵀ and ∇b = (1/V_th)·Mβ*, where the
diagonal mask M marks neurons whose pre-activation lies strictly in (0, 1).
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from src.core.equilibrium import (
    FixedPointMap,
    MapEvaluation,
    SolverConfig,
    broyden,
    damped_iteration,
    row_problem,
    solve_fixed_point,
)
from src.core.model import (
    NetworkSpec,
    bn_vjp,
    effective_feedback,
    feedback_reparam_grads,
    readout_and_loss,
)
from src.core.numerics import Tensor, adjoint, bias_grad, weight_grad

# Power iteration settings for gradient checking, where σ(raw) must be exact.
TIGHT_POWER_ITERS = 2000
TIGHT_POWER_TOL = 1e-12


def sigma_prime(z: Tensor) -> Tensor:
    """Derivative of the clamp: 1 strictly inside (0, 1), 0 elsewhere."""
    return ((z > 0.0) & (z < 1.0)).astype(np.float64)


@dataclass
class GradientSet:
    """Gradients keyed by the names of `NetworkSpec.parameters()`.

    `feedback_effective` additionally holds the gradient with respect to the
    effective feedback weight α·raw/∥raw∥₂, before the re-parameterization.
    """

    grads: dict[str, Tensor] = field(default_factory=dict)
    feedback_effective: Tensor | None = None

    def __getitem__(self, name: str) -> Tensor:
        return self.grads[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self.grads[name] = value

    def __contains__(self, name: object) -> bool:
        return name in self.grads

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self.grads.items())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.grads.values())

    def check_alignment(self, spec: NetworkSpec) -> None:
        """Raise ValueError unless every gradient matches its parameter's shape."""
        params = spec.parameters()
        for name, grad in self.grads.items():
            if name not in params or params[name].shape != grad.shape:
                msg = f"Gradient '{name}' {grad.shape} does not match any parameter."
                logging.error(msg)
                raise ValueError(msg)


@dataclass
class BackwardState:
    """The adjoint solution β* and what produced it."""

    beta_star: Tensor
    masks: list[Tensor]
    anchor: int
    dL_da: Tensor
    iterations: int
    residual: float
    converged: bool

    @property
    def mask(self) -> Tensor:
        """Diagonal of M for the anchored layer."""
        return self.masks[self.anchor]


# --- Vector-Jacobian products ---


def _composite_vjp(
    fmap: FixedPointMap,
    ev: MapEvaluation,
    v: Tensor,
    with_params: bool,
    inject_last: Tensor | None = None,
) -> tuple[Tensor, GradientSet | None]:
    """Pull the output cotangent v back through every layer of the map.

    `inject_last` adds a cotangent on the last layer's rate where that rate is
    an intermediate of the map (anchors other than the last layer).
    """
    spec = fmap.spec
    last = spec.num_layers - 1
    grads = GradientSet() if with_params else None
    delta = v
    for index in reversed(fmap.order):
        if inject_last is not None and index == last and index != fmap.anchor:
            delta = delta + inject_last
        d_total = delta * sigma_prime(ev.preacts[index]) / spec.v_th
        layer = spec.layers[index]
        cache = ev.bn_caches[index]
        if index == 0:
            fed = ev.layer_inputs[0]
            if fmap.dropout_mask is not None:
                fed = fed * fmap.dropout_mask
            delta = adjoint(fmap.feedback.op, d_total)
            if fmap.dropout_mask is not None:
                delta = delta * fmap.dropout_mask
            if grads is not None:
                grads.feedback_effective = weight_grad(fmap.feedback.op, fed, d_total)
                d_raw, d_alpha = feedback_reparam_grads(
                    spec.feedback, fmap.feedback, grads.feedback_effective
                )
                grads["feedback.raw"] = d_raw
                grads["feedback.alpha"] = d_alpha
                d_lin = d_total
                if layer.bn is not None and cache is not None:
                    d_lin, d_gamma, d_beta = bn_vjp(layer.bn, cache, d_total)
                    grads["layers.0.bn.gamma"] = d_gamma
                    grads["layers.0.bn.beta"] = d_beta
                grads["layers.0.weight"] = weight_grad(layer.op, fmap.x_star, d_lin)
                if layer.op.bias is not None:
                    grads["layers.0.bias"] = bias_grad(layer.op, d_lin)
        else:
            d_lin = d_total
            if layer.bn is not None and cache is not None:
                d_lin, d_gamma, d_beta = bn_vjp(layer.bn, cache, d_total)
                if grads is not None:
                    grads[f"layers.{index}.bn.gamma"] = d_gamma
                    grads[f"layers.{index}.bn.beta"] = d_beta
            if grads is not None:
                grads[f"layers.{index}.weight"] = weight_grad(
                    layer.op, ev.layer_inputs[index], d_lin
                )
                if layer.op.bias is not None:
                    grads[f"layers.{index}.bias"] = bias_grad(layer.op, d_lin)
            delta = adjoint(layer.op, d_lin)
    return delta, grads


def map_vjp_state(fmap: FixedPointMap, a_star: Tensor, v: Tensor) -> Tensor:
    """Return J_f(a*)ᵀ·v.

    Raises:
        ValueError: If a_star or v does not match the map's state shape.
    """
    a = fmap._batch(a_star)
    vb = fmap._batch(v)
    out, _ = _composite_vjp(fmap, fmap.evaluate(a), vb, with_params=False)
    return out if fmap.batched or np.shape(a_star) != fmap.state_shape else out[0]


def solve_adjoint(
    fmap: FixedPointMap, a_star: Tensor, dL_da: Tensor, cfg: SolverConfig | None = None
) -> BackwardState:
    """Solve β = J_fᵀβ + ∂L/∂a* at a fixed linearization point.

    Broyden runs on the linear residual; the fixed-point method applies the
    damped update β ← (1 − d)·β + d·(J_fᵀβ + ∂L/∂a*). Samples are solved
    independently unless batch-mode BN couples them.

    Returns:
        BackwardState: β* (the last iterate if not converged) and its report.
    """
    cfg = cfg or SolverConfig()
    a = fmap._batch(a_star)
    seed = fmap._batch(dL_da)
    ev = fmap.evaluate(a)

    def linear_map(beta: Tensor) -> Tensor:
        return _composite_vjp(fmap, ev, beta, with_params=False)[0] + seed

    flat_f, x0 = row_problem(linear_map, seed, fmap.bn_mode == "batch")
    if cfg.method == "broyden":
        result = broyden(lambda b: flat_f(b) - b, x0, cfg.max_iters, cfg.tol)
    else:
        result = damped_iteration(flat_f, x0, cfg.max_iters, cfg.tol, cfg.damping)

    beta = result.x.reshape(seed.shape)
    gap = (linear_map(beta) - beta).reshape(beta.shape[0], -1)
    worst = float(np.max(np.linalg.norm(gap, axis=1)))
    converged = bool(result.finite and worst <= cfg.tol)
    if not converged:
        logging.warning(
            f"Adjoint solve did not converge: residual {worst:.3e} after "
            f"{result.iterations} iterations; using the last iterate."
        )
    masks = [sigma_prime(z) for z in ev.preacts]
    if not fmap.batched and np.shape(a_star) == fmap.state_shape:
        beta, masks, seed = beta[0], [m[0] for m in masks], seed[0]
    return BackwardState(
        beta, masks, fmap.anchor, seed, result.iterations, worst, converged
    )


def param_gradients(
    fmap: FixedPointMap,
    a_star: Tensor,
    bs: BackwardState,
    inject_last: Tensor | None = None,
) -> GradientSet:
    """Assemble ∂L/∂θ as the parameter VJP of f at a* with β*.

    Raises:
        ValueError: If the backward state does not belong to this map.
    """
    if bs.anchor != fmap.anchor or np.shape(bs.beta_star) != np.shape(a_star):
        msg = "Backward state does not match the map and equilibrium it is used with."
        logging.error(msg)
        raise ValueError(msg)
    a = fmap._batch(a_star)
    _, grads = _composite_vjp(
        fmap, fmap.evaluate(a), fmap._batch(bs.beta_star), True, inject_last
    )
    assert grads is not None
    return grads


def hebbian_gradients(fmap: FixedPointMap, a_star: Tensor, beta: Tensor) -> GradientSet:
    """Closed-form gradients of a single dense layer without BN.

    Raises:
        ValueError: For multi-layer, convolutional or batch-normalized maps.
    """
    spec = fmap.spec
    layer = spec.layers[0]
    if spec.num_layers != 1 or layer.op.kind != "dense" or layer.bn is not None:
        msg = "Closed-form gradients apply to a single dense layer without BN only."
        logging.error(msg)
        raise ValueError(msg)
    a = fmap._batch(a_star).reshape(fmap.batch_size, -1)
    x = fmap.x_star.reshape(fmap.batch_size, -1)
    z = fmap.evaluate(a.reshape((fmap.batch_size, *fmap.state_shape))).preacts[0]
    m_beta = sigma_prime(z).reshape(a.shape) * fmap._batch(beta).reshape(a.shape)
    fed = a if fmap.dropout_mask is None else a * fmap.dropout_mask.reshape(a.shape)

    grads = GradientSet(feedback_effective=(m_beta.T @ fed) / spec.v_th)
    grads["layers.0.weight"] = (m_beta.T @ x) / spec.v_th
    if layer.op.bias is not None:
        grads["layers.0.bias"] = m_beta.sum(axis=0) / spec.v_th
    return grads


# --- Loss gradients ---


@dataclass
class LossGradients:
    grads: GradientSet
    loss: float
    logits: Tensor
    backward: BackwardState


def loss_gradients(
    fmap: FixedPointMap,
    a_state: Tensor,
    labels: Tensor | int,
    cfg: SolverConfig | None = None,
) -> LossGradients:
    """Readout cross-entropy gradients of every parameter at an equilibrium.

    `a_state` is the equilibrium of the map's anchor layer. For the last-layer
    anchor (the training form) it is a^N itself; for another anchor a^N is the
    intermediate rate the map produces from it, and the direct path from
    a^anchor to a^N is included, so both forms yield the same gradients.
    """
    spec = fmap.spec
    last = spec.num_layers - 1
    a = fmap._batch(a_state)
    if fmap.anchor == last:
        rates_last = a
    else:
        rates_last = fmap.evaluate(a).rates[last]
    out = readout_and_loss(rates_last, spec.readout, np.atleast_1d(labels))

    inject = None
    seed = out.grad_rates
    if fmap.anchor != last:
        inject = out.grad_rates
        seed, _ = _composite_vjp(
            fmap,
            fmap.evaluate(a),
            np.zeros_like(a),
            with_params=False,
            inject_last=inject,
        )
    backward = solve_adjoint(fmap, a, seed, cfg)
    grads = param_gradients(fmap, a, backward, inject_last=inject)
    grads["readout.weight"] = out.grad_readout
    return LossGradients(grads, out.loss, out.logits, backward)


# --- Finite-difference oracle ---


@dataclass
class FiniteDifference:
    value: float | None
    abstained: bool = False
    reason: str = ""


LossFn = Callable[[NetworkSpec, Tensor], float]


def tight_map(spec: NetworkSpec, x_star: Tensor) -> FixedPointMap:
    """A frozen-BN map whose feedback norm is computed to machine precision."""
    feedback = effective_feedback(spec.feedback, TIGHT_POWER_ITERS, TIGHT_POWER_TOL)
    return FixedPointMap(spec, x_star, feedback=feedback)


def _oracle_config() -> SolverConfig:
    return SolverConfig(method="broyden", max_iters=200, tol=1e-14)


def finite_diff_oracle(
    spec: NetworkSpec,
    x_star: Tensor,
    loss_fn: LossFn,
    name: str,
    index: int,
    h: float = 1e-5,
    a0: Tensor | None = None,
) -> FiniteDifference:
    """Central difference (L(θ+h) − L(θ−h)) / 2h of one parameter coordinate.

    Each side re-solves the equilibrium with Broyden at tight tolerance. The
    oracle abstains if either solve leaves a residual above h².

    Args:
        spec (NetworkSpec): The network (not modified).
        x_star (Tensor): Encoded input.
        loss_fn: Maps (spec, last-layer equilibrium) to the scalar loss.
        name (str): Parameter name from `NetworkSpec.parameters()`.
        index (int): Flat coordinate within that parameter.
        h (float): Step size.
        a0 (Tensor, optional): Warm start for the perturbed solves.
    """
    if h <= 0:
        raise ValueError("Finite-difference step must be positive.")
    params = spec.parameters()
    if name not in params or not 0 <= index < params[name].size:
        msg = f"Unknown parameter coordinate {name}[{index}]."
        logging.error(msg)
        raise ValueError(msg)

    losses: list[float] = []
    for sign in (1.0, -1.0):
        perturbed = spec.copy()
        perturbed.parameters()[name].reshape(-1)[index] += sign * h
        solution = solve_fixed_point(tight_map(perturbed, x_star), _oracle_config(), a0)
        if not np.isfinite(solution.residual) or solution.residual > h**2:
            reason = (
                f"perturbed solve residual {solution.residual:.2e} "
                f"exceeds {h**2:.1e}"
            )
            logging.warning(
                f"Finite-difference oracle abstains on {name}[{index}]: {reason}."
            )
            return FiniteDifference(None, abstained=True, reason=reason)
        losses.append(loss_fn(perturbed, solution.a_star))
    return FiniteDifference((losses[0] - losses[1]) / (2.0 * h))


@dataclass
class GradcheckRow:
    param: str
    coordinate: int
    implicit: float
    fd: float | None
    rel_err: float | None

    def as_csv_row(self) -> list[str | float | int]:
        return [
            self.param,
            self.coordinate,
            self.implicit,
            "" if self.fd is None else self.fd,
            "" if self.rel_err is None else self.rel_err,
        ]


def relative_error(fd: float, implicit: float) -> float:
    return abs(fd - implicit) / (abs(fd) + 1e-8)


def gradcheck(
    spec: NetworkSpec,
    x_star: Tensor,
    labels: Tensor | int,
    coordinates: list[tuple[str, int]],
    h: float = 1e-5,
    cfg: SolverConfig | None = None,
) -> list[GradcheckRow]:
    """Compare implicit gradients of the readout loss with the oracle.

    Args:
        spec (NetworkSpec): The network.
        x_star (Tensor): One input sample (or a batch).
        labels: Class labels for the readout loss.
        coordinates (list): (parameter name, flat index) pairs to check.
        h (float): Finite-difference step.
        cfg (SolverConfig, optional): Backward solver; tight by default.

    Returns:
        list[GradcheckRow]: One row per coordinate; `fd` is None on abstention.
    """
    fmap = tight_map(spec, x_star)
    forward = solve_fixed_point(fmap, _oracle_config())
    result = loss_gradients(fmap, forward.a_star, labels, cfg or _oracle_config())
    label_array = np.atleast_1d(labels)

    def loss_fn(net: NetworkSpec, a_star: Tensor) -> float:
        return readout_and_loss(a_star, net.readout, label_array).loss

    rows = []
    for name, index in coordinates:
        implicit = float(result.grads[name].reshape(-1)[index])
        fd = finite_diff_oracle(
            spec, x_star, loss_fn, name, index, h, a0=forward.a_star
        )
        rel = None if fd.value is None else relative_error(fd.value, implicit)
        rows.append(GradcheckRow(name, index, implicit, fd.value, rel))
    return rows
