"""Discrete-time simulation of feedback spiking networks.

Every step updates all layers synchronously: layer 1 receives the feedback of
the last layer's spikes from the previous step plus the input drive, and each
later layer consumes the spikes its predecessor emitted in the same step. The
membrane potential integrates (with leak λ for LIF), spikes when it reaches the
threshold and is reset by subtraction.

Average firing rates are kept as running sums: num ← λ·num + s and
den ← λ·den + 1, which gives the arithmetic mean for IF (λ = 1) and the
λ-weighted mean for LIF. No per-step history is stored unless explicitly
requested for diagnostics.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from src.core.equilibrium import FixedPointMap
from src.core.model import FeedbackWeights, NetworkSpec, NeuronKind, effective_feedback
from src.core.numerics import LinearOp, Tensor, apply

__all__ = [
    "Circuit",
    "FiringStats",
    "InputEncoding",
    "NeuronKind",
    "ResidualTrace",
    "SimState",
    "SimulationError",
    "firing_stats",
    "initial_state",
    "simulate",
    "step",
]


class SimulationError(RuntimeError):
    """Raised when the membrane potential stops being finite."""


# --- Types ---


@dataclass
class InputEncoding:
    """Input delivered to the network at every time step.

    For 'constant' the payload is one (optionally batched) input tensor that is
    repeated at every step. For 'spike_train' the payload has a leading time
    axis, one binary tensor per step.
    """

    mode: Literal["constant", "spike_train"]
    payload: Tensor

    @classmethod
    def constant(cls, x: Tensor) -> "InputEncoding":
        return cls("constant", np.asarray(x, dtype=np.float64))

    @classmethod
    def spike_train(cls, train: Tensor) -> "InputEncoding":
        return cls("spike_train", np.asarray(train, dtype=np.float64))

    @property
    def horizon(self) -> int | None:
        """Number of available steps (None for constant currents)."""
        return None if self.mode == "constant" else int(self.payload.shape[0])

    @property
    def sample(self) -> Tensor:
        """The tensor of the first step (shape reference)."""
        return self.payload if self.mode == "constant" else self.payload[0]

    def at(self, t: int) -> Tensor:
        """Return the input of step t (1-based)."""
        return self.payload if self.mode == "constant" else self.payload[t - 1]


@dataclass
class SimState:
    """Membrane potentials, last spikes and rate accumulators of every layer.

    All tensors carry a leading batch axis.
    """

    u: list[Tensor]
    s: list[Tensor]
    rate_num: list[Tensor]
    spike_count: list[Tensor]
    input_num: Tensor
    rate_den: float = 0.0
    t: int = 0

    def rates(self) -> list[Tensor]:
        """Return a[t] (IF) or â[t] (LIF) per layer."""
        if self.t == 0:
            return [np.zeros_like(num) for num in self.rate_num]
        return [num / self.rate_den for num in self.rate_num]

    @property
    def x_star(self) -> Tensor:
        """The running (weighted) average input x̄[t] / x̂[t]."""
        if self.t == 0:
            return np.zeros_like(self.input_num)
        return self.input_num / self.rate_den


@dataclass(frozen=True)
class Circuit:
    """Operators used by the forward simulation (BN folded into each layer)."""

    layer_ops: list[LinearOp]
    feedback: FeedbackWeights

    @classmethod
    def from_spec(cls, spec: NetworkSpec) -> "Circuit":
        return cls(spec.absorbed_layer_ops(), effective_feedback(spec.feedback))


@dataclass
class ResidualTrace:
    """Per-step residuals ∥f(a[t]) − a[t]∥₂ for the traced layers.

    `values[t - 1, j]` is the residual (mean over the batch) of layer
    `layers[j]` after step t.
    """

    layers: list[int]
    values: Tensor = field(default_factory=lambda: np.zeros((0, 0)))

    def residual(self, t: int, layer: int | None = None) -> float:
        """Residual after step t of `layer` (0-based), default the last traced."""
        column = -1 if layer is None else self.layers.index(layer)
        return float(self.values[t - 1, column])

    def last(self) -> list[float]:
        return [float(v) for v in self.values[-1]] if len(self.values) else []

    def rows(self) -> list[tuple[int, int, float]]:
        """Return `(t, layer, residual)` rows; layers are numbered from 1."""
        return [
            (t + 1, layer + 1, float(self.values[t, j]))
            for t in range(self.values.shape[0])
            for j, layer in enumerate(self.layers)
        ]


# --- Simulation ---


def initial_state(spec: NetworkSpec, batch: int) -> SimState:
    """u[0] = 0, s[0] = 0 for every layer."""
    zeros = [np.zeros((batch, *spec.layer_shape(i))) for i in range(spec.num_layers)]
    return SimState(
        u=[z.copy() for z in zeros],
        s=[z.copy() for z in zeros],
        rate_num=[z.copy() for z in zeros],
        spike_count=[z.copy() for z in zeros],
        input_num=np.zeros((batch, *spec.input_shape)),
    )


def step(
    state: SimState, spec: NetworkSpec, x_t: Tensor, circuit: Circuit | None = None
) -> SimState:
    """Advance every layer by one synchronous time step.

    Args:
        state (SimState): The state after step t.
        spec (NetworkSpec): The network.
        x_t (Tensor): Input of step t + 1, batched like the state.
        circuit (Circuit, optional): Precomputed operators of `spec`.

    Returns:
        SimState: The state after step t + 1 (the input state is not changed).

    Raises:
        SimulationError: If a membrane potential becomes non-finite.
    """
    circuit = circuit or Circuit.from_spec(spec)
    lam, v_th = spec.neuron.lam, spec.v_th
    batch = state.u[0].shape[0]
    x = np.asarray(x_t, dtype=np.float64).reshape((batch, *spec.input_shape))

    u_next: list[Tensor] = []
    s_next: list[Tensor] = []
    for index, op in enumerate(circuit.layer_ops):
        if index == 0:
            drive = apply(circuit.feedback.op, state.s[-1]) + apply(op, x)
        else:
            drive = apply(op, s_next[index - 1])
        u = lam * state.u[index] + drive
        spikes = (u >= v_th).astype(np.float64)
        u = u - v_th * spikes
        if not np.all(np.isfinite(u)):
            msg = (
                f"Non-finite membrane potential in layer {index + 1} "
                f"at step {state.t + 1}."
            )
            logging.error(msg)
            raise SimulationError(msg)
        u_next.append(u)
        s_next.append(spikes)

    return replace(
        state,
        u=u_next,
        s=s_next,
        rate_num=[lam * num + s for num, s in zip(state.rate_num, s_next, strict=True)],
        spike_count=[c + s for c, s in zip(state.spike_count, s_next, strict=True)],
        input_num=lam * state.input_num + x,
        rate_den=lam * state.rate_den + 1.0,
        t=state.t + 1,
    )


def simulate(
    spec: NetworkSpec,
    encoding: InputEncoding,
    T: int,
    per_layer: bool = False,
    record_spikes: bool = False,
    track_residuals: bool = True,
) -> tuple[SimState, ResidualTrace] | tuple[SimState, ResidualTrace, list[Tensor]]:
    """Simulate the network for T steps from rest.

    Args:
        spec (NetworkSpec): The network (BN frozen, folded into the layers).
        encoding (InputEncoding): Constant current or spike train.
        T (int): Number of steps, at least 1.
        per_layer (bool): Trace every layer's residual, not only the last.
        record_spikes (bool): Also return the full spike history per layer,
            shaped (T, B, ...). Diagnostics only.
        track_residuals (bool): Evaluate the fixed-point residual every step.

    Returns:
        tuple: (final state, residual trace) and, with `record_spikes`, the
        spike history.

    Raises:
        ValueError: If T < 1 or the spike train is shorter than T.
        SimulationError: If the dynamics become non-finite.
    """
    if T < 1:
        raise ValueError(f"Simulation horizon must be at least 1, got {T}.")
    if encoding.horizon is not None and encoding.horizon < T:
        msg = f"Spike train has {encoding.horizon} steps, fewer than T={T}."
        logging.error(msg)
        raise ValueError(msg)

    sample = encoding.sample
    batched = sample.shape != tuple(spec.input_shape)
    batch = sample.shape[0] if batched else 1
    circuit = Circuit.from_spec(spec)
    state = initial_state(spec, batch)

    traced = list(range(spec.num_layers)) if per_layer else [spec.num_layers - 1]
    values = np.zeros((T if track_residuals else 0, len(traced)))
    history: list[list[Tensor]] = [[] for _ in range(spec.num_layers)]
    maps: list[FixedPointMap] = []

    for t in range(1, T + 1):
        state = step(state, spec, encoding.at(t), circuit)
        if record_spikes:
            for index, spikes in enumerate(state.s):
                history[index].append(spikes)
        if not track_residuals:
            continue
        if not maps or encoding.mode == "spike_train":
            maps = [
                FixedPointMap(
                    spec, state.x_star, anchor=layer, feedback=circuit.feedback
                )
                for layer in traced
            ]
        rates = state.rates()
        for j, layer in enumerate(traced):
            values[t - 1, j] = float(maps[j].sample_residuals(rates[layer]).mean())

    trace = ResidualTrace(traced, values)
    if record_spikes:
        return state, trace, [np.stack(h) for h in history]
    return state, trace


# --- Firing statistics ---


@dataclass
class FiringStats:
    per_layer: list[float]
    total: float


def firing_stats(spikes: list[Tensor]) -> FiringStats:
    """Mean firing rate over neurons, steps and samples, per layer and overall.

    Each entry is one layer's recorded binary spikes, of any shape.
    """
    counts = [float(np.sum(layer)) for layer in spikes]
    sizes = [int(np.size(layer)) for layer in spikes]
    per_layer = [c / n if n else 0.0 for c, n in zip(counts, sizes, strict=True)]
    total = sum(counts) / sum(sizes) if sum(sizes) else 0.0
    return FiringStats(per_layer, total)


def firing_stats_from_state(state: SimState) -> FiringStats:
    """Same statistics from the running spike counts of a final state."""
    if state.t == 0:
        return FiringStats([0.0] * len(state.spike_count), 0.0)
    counts = [float(c.sum()) for c in state.spike_count]
    sizes = [int(c.size) * state.t for c in state.spike_count]
    per_layer = [c / n for c, n in zip(counts, sizes, strict=True)]
    return FiringStats(per_layer, sum(counts) / sum(sizes))
