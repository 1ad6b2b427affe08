"""Weight averaging and the client-side corrections of the FedAvg family.

All weights are flat float64 vectors (see ``tensor.flatten_params``). A round
runs as

1. ``local_objective_hook`` gives the additive gradient correction for each
   local step (zero for FedAvg and FedNova),
2. ``finish_client`` turns a client's trained weights into the
   ``ModelUpdate`` it uploads and updates per-client state,
3. ``aggregate_round`` combines the uploads into new global weights and
   updates server state.

Sums always run in the order the updates are given, which callers keep
sorted by client id, so results are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np


class AggregationError(ValueError):
    pass


class AggregatorKind(str, Enum):
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    SCAFFOLD = "scaffold"
    FEDNOVA = "fednova"
    FEDDC = "feddc"


@dataclass(frozen=True)
class ModelUpdate:
    weights: np.ndarray
    sample_count: int
    client_id: int
    round: int = 0
    steps: int = 1

    def __post_init__(self):
        if self.sample_count < 0:
            raise AggregationError(f"sample_count must be >= 0, got {self.sample_count}")
        if self.steps < 1:
            raise AggregationError(f"steps must be >= 1, got {self.steps}")


def _check(updates: Sequence[ModelUpdate]) -> int:
    if not updates:
        raise AggregationError("no updates to aggregate")
    n = updates[0].weights.shape
    for u in updates:
        if u.weights.shape != n:
            raise AggregationError(f"client {u.client_id} sent {u.weights.shape} weights, expected {n}")
    return n


def fedavg(updates: Sequence[ModelUpdate]) -> np.ndarray:
    """Sample-count weighted mean."""
    _check(updates)
    total = sum(u.sample_count for u in updates)
    if total == 0:
        raise AggregationError("total sample count is zero")
    out = np.zeros_like(updates[0].weights, dtype=np.float64)
    for u in updates:
        out = out + (u.sample_count / total) * u.weights
    return out


def mean_weights(updates: Sequence[ModelUpdate]) -> np.ndarray:
    """Unweighted mean."""
    _check(updates)
    out = np.zeros_like(updates[0].weights, dtype=np.float64)
    for u in updates:
        out = out + u.weights
    return out / len(updates)


def hierarchical_aggregate(edge_groups: Sequence[Sequence[ModelUpdate]]) -> np.ndarray:
    """Mean of each edge's client models, then the mean of the edge models.

    Both tiers are unweighted, so a small edge counts as much as a big one.
    """
    if not edge_groups:
        raise AggregationError("no edge groups")
    edge_models = []
    for j, group in enumerate(edge_groups):
        if not group:
            raise AggregationError(f"edge group {j} is empty")
        edge_models.append(ModelUpdate(mean_weights(group), len(group), j))
    _check(edge_models)
    return mean_weights(edge_models)


@dataclass
class AggregatorState:
    """Server and per-client state of one aggregation scheme.

    ``freeze`` stops all auxiliary state from being updated (control
    variates, drift variables), which turns Scaffold and FedDC with
    ``alpha=0`` into FedAvg.
    """

    kind: AggregatorKind
    global_weights: np.ndarray
    mu: float = 0.01
    alpha: float = 0.01
    lr: float = 0.1
    local_steps: int = 1
    freeze: bool = False
    control: np.ndarray | None = None
    client_controls: dict[int, np.ndarray] = field(default_factory=dict)
    drift: dict[int, np.ndarray] = field(default_factory=dict)
    client_deltas: dict[int, np.ndarray] = field(default_factory=dict)
    mean_delta: np.ndarray | None = None
    steps: dict[int, int] = field(default_factory=dict)
    round: int = 0

    def __post_init__(self):
        self.kind = AggregatorKind(self.kind)
        self.global_weights = np.asarray(self.global_weights, dtype=np.float64)
        if self.mu < 0:
            raise AggregationError(f"mu must be >= 0, got {self.mu}")
        if self.alpha < 0:
            raise AggregationError(f"alpha must be >= 0, got {self.alpha}")
        zeros = np.zeros_like(self.global_weights)
        if self.control is None:
            self.control = zeros.copy()
        if self.mean_delta is None:
            self.mean_delta = zeros.copy()

    def _zeros(self) -> np.ndarray:
        return np.zeros_like(self.global_weights)

    def client_control(self, cid: int) -> np.ndarray:
        return self.client_controls.get(cid, self._zeros())

    def client_drift(self, cid: int) -> np.ndarray:
        return self.drift.get(cid, self._zeros())


def local_objective_hook(
    kind: AggregatorKind | str,
    global_w: np.ndarray,
    local_w: np.ndarray,
    state: AggregatorState,
    client_id: int = 0,
) -> np.ndarray:
    """Additive gradient term for one local step of ``client_id``."""
    kind = AggregatorKind(kind)
    if kind in (AggregatorKind.FEDAVG, AggregatorKind.FEDNOVA):
        return np.zeros_like(local_w)
    if kind is AggregatorKind.FEDPROX:
        return state.mu * (local_w - global_w)
    if kind is AggregatorKind.SCAFFOLD:
        return state.control - state.client_control(client_id)
    if kind is AggregatorKind.FEDDC:
        h = state.client_drift(client_id)
        g_i = state.client_deltas.get(client_id, state._zeros())
        return state.alpha * (local_w + h - global_w) + (g_i - state.mean_delta) / (state.lr * state.local_steps)
    raise AggregationError(f"unknown aggregator kind {kind!r}")


def finish_client(
    state: AggregatorState,
    client_id: int,
    local_w: np.ndarray,
    sample_count: int,
    steps: int,
) -> ModelUpdate:
    """Per-client bookkeeping after local training; returns what the client uploads."""
    local_w = np.asarray(local_w, dtype=np.float64)
    kind = state.kind
    payload = local_w
    if kind is AggregatorKind.SCAFFOLD and not state.freeze:
        c_i = state.client_control(client_id)
        state.client_controls[client_id] = c_i - state.control + (state.global_weights - local_w) / (steps * state.lr)
    elif kind is AggregatorKind.FEDDC and not state.freeze:
        delta = local_w - state.global_weights
        h = state.client_drift(client_id) + delta
        state.drift[client_id] = h
        state.client_deltas[client_id] = delta
        payload = local_w + h
    state.steps[client_id] = steps
    return ModelUpdate(payload, sample_count, client_id, state.round, steps)


def _combine(updates: Sequence[ModelUpdate], groups: Sequence[Sequence[int]] | None, weighted: bool) -> np.ndarray:
    if groups is None:
        return fedavg(updates) if weighted else mean_weights(updates)
    by_id = {u.client_id: u for u in updates}
    return hierarchical_aggregate([[by_id[c] for c in g] for g in groups])


def aggregate_round(
    state: AggregatorState,
    updates: Sequence[ModelUpdate],
    groups: Sequence[Sequence[int]] | None = None,
    weighted: bool = True,
) -> np.ndarray:
    """New global weights from one round of uploads.

    ``groups`` lists client ids per edge; when given, the two-tier unweighted
    mean is used, otherwise a flat mean (sample-weighted unless
    ``weighted=False``). Updates ``state`` in place.
    """
    updates = sorted(updates, key=lambda u: u.client_id)
    _check(updates)
    prev = state.global_weights
    kind = state.kind
    if kind is AggregatorKind.FEDNOVA:
        # normalised directions and the effective step count, combined with the same weights
        normalised = [ModelUpdate((prev - u.weights) / u.steps, u.sample_count, u.client_id) for u in updates]
        taus = [ModelUpdate(np.array([float(u.steps)]), u.sample_count, u.client_id) for u in updates]
        direction = _combine(normalised, groups, weighted)
        tau_eff = float(_combine(taus, groups, weighted)[0])
        new = prev - tau_eff * direction
    else:
        new = _combine(updates, groups, weighted)
    if kind is AggregatorKind.SCAFFOLD and not state.freeze:
        # full participation: the server variate is the mean of the client variates
        cs = [ModelUpdate(state.client_control(u.client_id), 1, u.client_id) for u in updates]
        state.control = mean_weights(cs)
    if kind is AggregatorKind.FEDDC and not state.freeze:
        ds = [ModelUpdate(state.client_deltas[u.client_id], 1, u.client_id) for u in updates]
        state.mean_delta = mean_weights(ds)
    state.global_weights = new
    state.round += 1
    return new
