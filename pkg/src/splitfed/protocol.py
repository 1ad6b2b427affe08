"""Event-driven simulation of one- and three-tier (split) federated training.

Each client runs as a generator that does the real training arithmetic and
yields timed holds on resources (its link, its own processor, its share of
the upper entity's processor). A small event loop plays the holds in time
order, serialising each resource, and barriers at the edges and at the
central server wait for the slowest participant. The legs accumulated along
the slowest path form the epoch's ``CostBreakdown``.

Every transfer is a ``ProtocolMessage`` checked against the roles allowed
to exchange it. Labels may only travel under a vertical split, where each
transfer is logged as a privacy event; under a U-shaped split any attempt
raises ``ProtocolViolation``.
"""

from __future__ import annotations

import csv
import heapq
import io
import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator, Sequence

import numpy as np

from .aggregation import AggregatorKind, AggregatorState, ModelUpdate, aggregate_round, finish_client, local_objective_hook
from .costmodel import BYTES_PER_ELEMENT, CostBreakdown, ModelProfile, reference_cells, SETUPS
from .data import Dataset
from .labeldp import NoiseConfig, noisy_targets
from .rng import substream
from .scenario import Method, Role, Scenario
from .split import (
    PlanError,
    SplitMode,
    SplitPlan,
    SubNetwork,
    merge,
    part_backward,
    part_forward,
    profile,
    split,
)
from .tensor import (
    NetworkSpec,
    accuracy,
    backprop,
    flatten_params,
    forward_trace,
    layer_shapes,
    param_count,
    sgd_step,
    softmax_cross_entropy,
    unflatten_like,
    with_flat_params,
)


class ProtocolViolation(RuntimeError):
    pass


class SimError(ValueError):
    pass


class MessageKind(str, Enum):
    SMASHED_FWD = "SMASHED_FWD"
    SMASHED_GRAD = "SMASHED_GRAD"
    PART_WEIGHTS = "PART_WEIGHTS"
    MERGED_WEIGHTS = "MERGED_WEIGHTS"
    GLOBAL_WEIGHTS = "GLOBAL_WEIGHTS"
    LABELS = "LABELS"


_C, _E, _S = Role.CLIENT, Role.EDGE, Role.CENTRAL
_RELAY = {(_C, _E), (_E, _C), (_C, _S), (_S, _C)}
LEGAL_ROUTES = {
    MessageKind.GLOBAL_WEIGHTS: {(_S, _E), (_S, _C), (_E, _C)},
    MessageKind.PART_WEIGHTS: {(_C, _E), (_C, _S)},
    MessageKind.MERGED_WEIGHTS: {(_E, _S)},
    MessageKind.SMASHED_FWD: _RELAY,
    MessageKind.SMASHED_GRAD: _RELAY,
    MessageKind.LABELS: {(_C, _E), (_C, _S)},
}


@dataclass(frozen=True)
class Endpoint:
    role: Role
    index: int = 0

    def __str__(self) -> str:
        return f"{self.role.value}{self.index}"


@dataclass(frozen=True)
class ProtocolMessage:
    kind: MessageKind
    payload_bytes: int
    src: Endpoint
    dst: Endpoint
    enqueue_time: float
    epoch: int
    batch_id: int = -1
    producer_cut: int = -1


@dataclass(frozen=True)
class PrivacyEvent:
    epoch: int
    client_id: int
    kind: str
    payload_bytes: int


@dataclass
class SimClock:
    """Busy time per entity processor and per link, across the whole run."""

    compute_s: dict[str, float] = field(default_factory=lambda: defaultdict(float))
    transfer_s: dict[str, float] = field(default_factory=lambda: defaultdict(float))
    epoch: int = 0


TIMING_MODES = ("profile", "reference")
NOISE_MODES = ("per_epoch", "fixed")
WEIGHTINGS = ("auto", "samples", "uniform")


@dataclass(frozen=True)
class SimConfig:
    """Training and accounting knobs of a simulation run.

    ``timing="profile"`` charges the FLOPs and bytes the run actually
    produces; ``"reference"`` charges the recorded per-epoch cells of
    ``reference_setup`` instead, while still training for real.
    ``weighting="auto"`` averages edge-assisted methods with the two-tier
    unweighted mean and the others with sample-weighted FedAvg.
    """

    method: Method = Method.EUSFL
    plan: SplitPlan | None = None
    lr: float = 0.1
    batch_size: int = 32
    local_epochs: int = 1
    aggregator: AggregatorKind = AggregatorKind.FEDAVG
    mu: float = 0.01
    alpha: float = 0.01
    freeze_aux: bool = False
    noise: NoiseConfig | None = None
    noise_mode: str = "per_epoch"
    seed: int = 0
    timing: str = "profile"
    reference_setup: int = 1
    include_backward: bool = False
    weighting: str = "auto"
    record_messages: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "aggregator", AggregatorKind(self.aggregator))
        if not self.lr > 0:
            raise SimError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise SimError("batch_size and local_epochs must be >= 1")
        if self.noise_mode not in NOISE_MODES:
            raise SimError(f"noise_mode must be one of {NOISE_MODES}, got {self.noise_mode!r}")
        if self.timing not in TIMING_MODES:
            raise SimError(f"timing must be one of {TIMING_MODES}, got {self.timing!r}")
        if self.weighting not in WEIGHTINGS:
            raise SimError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.timing == "reference" and self.reference_setup not in SETUPS:
            raise SimError(f"unknown reference setup {self.reference_setup}")
        mode = self.method.split
        if mode is not None:
            if self.plan is None:
                raise PlanError(f"{self.method.value} needs a split plan")
            if self.plan.mode.value != mode:
                raise PlanError(f"{self.method.value} needs a {mode} plan, got {self.plan.mode.value}")

    @property
    def compute_factor(self) -> int:
        return 3 if self.include_backward else 1

    def hierarchical(self) -> bool:
        return self.method.edge_assisted if self.weighting == "auto" else False

    def sample_weighted(self) -> bool:
        return self.weighting != "uniform"


@dataclass
class SimState:
    net: NetworkSpec
    cfg: SimConfig
    shards: list[Dataset]
    test: Dataset | None
    agg: AggregatorState
    epoch: int = 0
    clock: SimClock = field(default_factory=SimClock)
    privacy_events: list[PrivacyEvent] = field(default_factory=list)
    message_counts: dict[tuple[str, str, str], list[int]] = field(default_factory=dict)
    messages: list[ProtocolMessage] = field(default_factory=list)
    history: list[CostBreakdown] = field(default_factory=list)


def init_state(net: NetworkSpec, cfg: SimConfig, shards: Sequence[Dataset], test: Dataset | None = None) -> SimState:
    if not shards:
        raise SimError("no client shards")
    for s in shards:
        if s.input_shape != tuple(net.input_shape):
            raise SimError(f"shard input shape {s.input_shape} does not match network {tuple(net.input_shape)}")
    if cfg.plan is not None:
        cfg.plan.validate(len(net.layers))
    agg = AggregatorState(
        cfg.aggregator,
        flatten_params(net.layers),
        mu=cfg.mu,
        alpha=cfg.alpha,
        lr=cfg.lr,
        freeze=cfg.freeze_aux,
    )
    return SimState(net=net, cfg=cfg, shards=list(shards), test=test, agg=agg)


def model_profile(state: SimState, samples_per_client: float | None = None) -> ModelProfile:
    """Per-epoch profile matching what ``run_epoch`` charges in profile timing."""
    cfg = state.cfg
    plan = cfg.plan or SplitPlan(len(state.net.layers) - 1, mode=SplitMode.VERTICAL)
    n = len(state.shards[0]) if samples_per_client is None else samples_per_client
    prof = profile(state.net, plan, cfg.batch_size, include_backward=cfg.include_backward)
    return prof.per_epoch(n * cfg.local_epochs)


# ---------------------------------------------------------------------------
# event loop


Hold = tuple  # (resource key or None, duration seconds, leg name)


@dataclass(eq=False)
class _Proc:
    gen: Iterator[Hold]
    legs: dict[str, list[float]]
    on_done: Callable[["_Proc"], None] | None
    done_at: float = 0.0


class _Loop:
    def __init__(self):
        self.now = 0.0
        self._queue: list = []
        self._seq = itertools.count()
        self._free: dict = {}
        self.busy: dict = defaultdict(float)

    def spawn(self, gen: Iterator[Hold], legs: dict[str, list[float]], on_done=None) -> None:
        heapq.heappush(self._queue, (self.now, next(self._seq), _Proc(gen, legs, on_done)))

    def run(self) -> None:
        while self._queue:
            self.now, _, proc = heapq.heappop(self._queue)
            try:
                res, dur, leg = next(proc.gen)
            except StopIteration:
                proc.done_at = self.now
                if proc.on_done is not None:
                    proc.on_done(proc)
                continue
            start = self.now if res is None else max(self.now, self._free.get(res, 0.0))
            end = start + dur
            if res is not None:
                self._free[res] = end
                self.busy[res] += dur
            proc.legs[leg].append(end - self.now)
            heapq.heappush(self._queue, (end, next(self._seq), proc))


class _Barrier:
    """Calls ``then`` with the slowest arrival once ``count`` processes finish."""

    def __init__(self, count: int, then: Callable[[_Proc], None]):
        self.count, self.then, self.arrivals = count, then, []

    def __call__(self, proc: _Proc) -> None:
        self.arrivals.append(proc)
        if len(self.arrivals) == self.count:
            slowest = self.arrivals[0]
            for p in self.arrivals[1:]:
                if p.done_at > slowest.done_at:
                    slowest = p
            self.then(slowest)


def _fresh_legs() -> dict[str, list[float]]:
    return defaultdict(list)


def _copy_legs(legs: dict[str, list[float]]) -> dict[str, list[float]]:
    out = _fresh_legs()
    for k, v in legs.items():
        out[k] = list(v)
    return out


# ---------------------------------------------------------------------------
# one epoch


class _Epoch:
    def __init__(self, method: Method, state: SimState, scenario: Scenario):
        self.method, self.state, self.scenario = method, state, scenario
        self.cfg = state.cfg
        self.loop = _Loop()
        self.upper = method.upper
        self.edge = method.edge_assisted
        self.parallel = scenario.schedule == "parallel"
        self.groups = scenario.upper_groups(method)
        self.group_of = {c: j for j, g in enumerate(self.groups) for c in g}
        self.link_leg = "ce_transfer_s" if self.edge else "cs_transfer_s"
        self.upper_leg = "edge_compute_s" if self.edge else "central_compute_s"
        self.updates: dict[int, ModelUpdate] = {}
        self.counters = defaultdict(float)
        self._flops_cache: dict = {}
        self.mode = None if method.split is None else SplitMode(method.split)
        self.reference = self.cfg.timing == "reference"

    # -- accounting helpers -------------------------------------------------

    def _flops(self, layers, input_shape, offset, batch) -> float:
        key = (offset, len(layers), batch)
        if key not in self._flops_cache:
            shapes = layer_shapes(layers, input_shape, offset)
            self._flops_cache[key] = float(batch * sum(l.flops(shapes[i]) for i, l in enumerate(layers)))
        return self._flops_cache[key] * self.cfg.compute_factor

    def _client_cpu(self, cid: int, flops: float) -> Hold:
        self.counters["client_flops"] += flops
        return (("cpu", "client", cid), flops / self.scenario.client.flops, "client_compute_s")

    def _upper_cpu(self, cid: int, flops: float) -> Hold:
        group = self.groups[self.group_of[cid]]
        share = len(group) if self.parallel else 1
        key = ("cpu", self.upper.value, cid if self.parallel else self.group_of[cid])
        self.counters["edge_flops" if self.edge else "central_flops"] += flops
        return (key, flops * share / self.scenario.entity(self.upper).flops, self.upper_leg)

    def _send(
        self,
        kind: MessageKind,
        nbytes: int,
        src: Endpoint,
        dst: Endpoint,
        *,
        batch_id: int = -1,
        producer_cut: int = -1,
        client_id: int | None = None,
    ) -> Hold:
        if nbytes <= 0:
            raise ProtocolViolation(f"{kind.value} from {src} to {dst} has no payload")
        if (src.role, dst.role) not in LEGAL_ROUTES[kind]:
            raise ProtocolViolation(f"{kind.value} may not travel from {src.role.value} to {dst.role.value}")
        if kind is MessageKind.LABELS:
            if self.mode is not SplitMode.VERTICAL:
                raise ProtocolViolation(f"{self.method.value} never sends labels off the client")
            self.state.privacy_events.append(
                PrivacyEvent(self.state.epoch, src.index, "label_disclosure", nbytes)
            )
        if kind is MessageKind.SMASHED_FWD and src.role is Role.CLIENT and producer_cut == 0:
            raise ProtocolViolation("raw features may not leave the client")
        msg = ProtocolMessage(kind, int(nbytes), src, dst, self.loop.now, self.state.epoch, batch_id, producer_cut)
        key = (kind.value, src.role.value, dst.role.value)
        entry = self.state.message_counts.setdefault(key, [0, 0])
        entry[0] += 1
        entry[1] += msg.payload_bytes
        if self.cfg.record_messages:
            self.state.messages.append(msg)
        rate = self.scenario.link_rate(src.role, dst.role)
        if Role.EDGE in (src.role, dst.role) and Role.CENTRAL in (src.role, dst.role):
            link, leg = ("link", "es", src.index if src.role is Role.EDGE else dst.index), "es_transfer_s"
        else:
            cid = src.index if src.role is Role.CLIENT else dst.index
            link, leg = ("link", "client", cid), self.link_leg
        counter = {"es_transfer_s": "es_bytes", "ce_transfer_s": "ce_bytes", "cs_transfer_s": "cs_bytes"}[leg]
        self.counters[counter] += nbytes
        if kind is MessageKind.LABELS and not self.scenario.charge_labels:
            return (None, 0.0, leg)
        return (link, nbytes / rate, leg)

    # -- client side ---------------------------------------------------------

    def _targets(self, cid: int, shard: Dataset):
        noise = self.cfg.noise
        if noise is None:
            return shard.labels
        if self.cfg.noise_mode == "fixed":
            rng = substream(self.cfg.seed, "noise", cid)
        else:
            rng = substream(self.cfg.seed, "noise", cid, self.state.epoch)
        return noisy_targets(shard.labels, noise, rng)

    def _correction(self, cid: int, local_flat: np.ndarray, layers) -> list[dict] | None:
        kind = self.state.agg.kind
        if kind in (AggregatorKind.FEDAVG, AggregatorKind.FEDNOVA):
            return None
        corr = local_objective_hook(kind, self.state.agg.global_weights, local_flat, self.state.agg, cid)
        return unflatten_like(layers, corr)

    def _client(self, cid: int) -> Iterator[Hold]:
        st, cfg = self.state, self.cfg
        shard = st.shards[cid]
        me = Endpoint(Role.CLIENT, cid)
        up = Endpoint(self.upper, self.group_of[cid] if self.edge else 0)
        targets = self._targets(cid, shard)
        n, bs = len(shard), cfg.batch_size
        steps = 0

        net = st.net
        if self.mode is None:
            model = net
            yield self._send(MessageKind.GLOBAL_WEIGHTS, param_count(net.layers) * BYTES_PER_ELEMENT, up, me)
        else:
            front, middle, rear = split(net, cfg.plan)
            held = front.param_bytes() + (rear.param_bytes() if self.mode is SplitMode.U_SHAPED else 0)
            yield self._send(MessageKind.GLOBAL_WEIGHTS, held, up, me)

        for local_epoch in range(cfg.local_epochs):
            order = substream(cfg.seed, "shuffle", cid, st.epoch, local_epoch).permutation(n)
            for b, start in enumerate(range(0, n, bs)):
                idx = order[start : start + bs]
                x, t = shard.features[idx], targets[idx]
                size = len(idx)
                if self.mode is None:
                    logits, caches = forward_trace(model.layers, x)
                    _, dz = softmax_cross_entropy(logits, t)
                    _, grads = backprop(model.layers, caches, dz)
                    corr = self._correction(cid, flatten_params(model.layers), model.layers)
                    model = sgd_step(model, grads, cfg.lr, corr)
                    yield self._client_cpu(cid, self._flops(net.layers, net.input_shape, 0, size))
                elif self.mode is SplitMode.U_SHAPED:
                    yield from self._u_batch(cid, me, up, b, size, x, t, front, middle, rear, out := {})
                    front, middle, rear = out["parts"]
                else:
                    yield from self._v_batch(cid, me, up, b, size, x, t, front, middle, out := {})
                    front, middle = out["parts"]
                steps += 1

        if self.mode is None:
            yield self._send(MessageKind.PART_WEIGHTS, param_count(model.layers) * BYTES_PER_ELEMENT, me, up)
            trained = model
        else:
            yield self._send(MessageKind.PART_WEIGHTS, held, me, up)
            trained = merge(front, middle, rear)
        self.updates[cid] = finish_client(st.agg, cid, flatten_params(trained.layers), n, steps)

    def _part_flops(self, part: SubNetwork, size: int) -> float:
        return self._flops(part.layers, part.input_shape, part.offset, size)

    def _update_parts(self, cid, parts, grads, lr):
        if self.state.agg.kind in (AggregatorKind.FEDAVG, AggregatorKind.FEDNOVA):
            return [sgd_step(p, g, lr) for p, g in zip(parts, grads)]
        layers = [layer for p in parts for layer in p.layers]
        corr = self._correction(cid, flatten_params(layers), layers)
        out, pos = [], 0
        for p, g in zip(parts, grads):
            out.append(sgd_step(p, g, lr, corr[pos : pos + len(p.layers)]))
            pos += len(p.layers)
        return out

    def _u_batch(self, cid, me, up, b, size, x, t, front, middle, rear, out):
        plan = self.cfg.plan
        d1, c1 = part_forward(front, x)
        yield self._client_cpu(cid, self._part_flops(front, size))
        yield self._send(MessageKind.SMASHED_FWD, d1.size * BYTES_PER_ELEMENT, me, up, batch_id=b, producer_cut=plan.cut1)
        d2, c2 = part_forward(middle, d1)
        yield self._upper_cpu(cid, self._part_flops(middle, size))
        yield self._send(MessageKind.SMASHED_FWD, d2.size * BYTES_PER_ELEMENT, up, me, batch_id=b, producer_cut=plan.cut2)
        logits, c3 = part_forward(rear, d2)
        _, dz = softmax_cross_entropy(logits, t)
        g_d2, g3 = part_backward(rear, c3, dz)
        yield self._client_cpu(cid, self._part_flops(rear, size))
        yield self._send(MessageKind.SMASHED_GRAD, g_d2.size * BYTES_PER_ELEMENT, me, up, batch_id=b, producer_cut=plan.cut2)
        g_d1, g2 = part_backward(middle, c2, g_d2)
        yield self._send(MessageKind.SMASHED_GRAD, g_d1.size * BYTES_PER_ELEMENT, up, me, batch_id=b, producer_cut=plan.cut1)
        _, g1 = part_backward(front, c1, g_d1)
        out["parts"] = self._update_parts(cid, [front, middle, rear], [g1, g2, g3], self.cfg.lr)

    def _v_batch(self, cid, me, up, b, size, x, t, front, rear, out):
        plan = self.cfg.plan
        d1, c1 = part_forward(front, x)
        yield self._client_cpu(cid, self._part_flops(front, size))
        yield self._send(MessageKind.SMASHED_FWD, d1.size * BYTES_PER_ELEMENT, me, up, batch_id=b, producer_cut=plan.cut1)
        yield self._send(MessageKind.LABELS, size * BYTES_PER_ELEMENT, me, up, batch_id=b)
        logits, c2 = part_forward(rear, d1)
        _, dz = softmax_cross_entropy(logits, t)
        g_d1, g2 = part_backward(rear, c2, dz)
        yield self._upper_cpu(cid, self._part_flops(rear, size))
        yield self._send(MessageKind.SMASHED_GRAD, g_d1.size * BYTES_PER_ELEMENT, up, me, batch_id=b, producer_cut=plan.cut1)
        _, g1 = part_backward(front, c1, g_d1)
        out["parts"] = self._update_parts(cid, [front, rear], [g1, g2], self.cfg.lr)

    # -- reference-cell timing ----------------------------------------------

    def _reference_client(self, cid: int) -> Iterator[Hold]:
        for _ in self._client(cid):
            pass
        cells = reference_cells(self.cfg.reference_setup, self.method)
        sc = self.scenario
        if self.cfg.reference_setup == 2:
            cells = {
                "client": cells["client"],
                ("edge" if self.edge else "central"): cells["upper"],
                ("ce" if self.edge else "cs"): cells["transfer"],
            }
        if cells.get("client"):
            yield self._client_cpu(cid, cells["client"])
        link = cells.get("ce" if self.edge else "cs", 0.0)
        if link:
            rate = sc.link_rate(Role.CLIENT, self.upper)
            self.counters["ce_bytes" if self.edge else "cs_bytes"] += link
            yield (("link", "client", cid), link / rate, self.link_leg)
        upper_cell = cells.get("edge" if self.edge else "central", 0.0)
        if upper_cell:
            yield self._upper_cpu(cid, upper_cell)

    def _reference_edge_tail(self, j: int) -> Iterator[Hold]:
        cells = reference_cells(self.cfg.reference_setup, self.method)
        if self.cfg.reference_setup == 1:
            es = cells.get("es", 0.0)
            if es:
                self.counters["es_bytes"] += es
                yield (("link", "es", j), es / self.scenario.link_rate(Role.EDGE, Role.CENTRAL), "es_transfer_s")
            central = cells.get("central", 0.0)
            if central:
                self.counters["central_flops"] += central
                yield (("cpu", "central", 0), central / self.scenario.central.flops, "central_compute_s")

    # -- orchestration -------------------------------------------------------

    def _start_group(self, j: int, legs, done: Callable[[_Proc], None]) -> None:
        group = self.groups[j]
        body = self._reference_client if self.reference else self._client
        if self.parallel:
            barrier = _Barrier(len(group), done)
            for c in group:
                self.loop.spawn(body(c), _copy_legs(legs), barrier)
        else:

            def chain(i: int, legs_now):
                def next_one(proc: _Proc):
                    if i + 1 < len(group):
                        chain(i + 1, proc.legs)
                    else:
                        done(proc)

                self.loop.spawn(body(group[i]), _copy_legs(legs_now), next_one)

            chain(0, legs)

    def run(self) -> CostBreakdown:
        central = Endpoint(Role.CENTRAL)
        final: dict[str, _Proc] = {}

        def finished(proc: _Proc):
            final["proc"] = proc

        if self.edge:
            all_edges = _Barrier(len(self.groups), finished)
            m_bytes = param_count(self.state.net.layers) * BYTES_PER_ELEMENT
            for j in range(len(self.groups)):
                edge = Endpoint(Role.EDGE, j)

                def edge_proc(j=j, edge=edge):
                    if not self.reference:
                        yield self._send(MessageKind.GLOBAL_WEIGHTS, m_bytes, central, edge)

                def after_clients(proc: _Proc, j=j, edge=edge):
                    def upload():
                        if self.reference:
                            yield from self._reference_edge_tail(j)
                        else:
                            yield self._send(MessageKind.MERGED_WEIGHTS, m_bytes, edge, central)

                    self.loop.spawn(upload(), _copy_legs(proc.legs), all_edges)

                def start_clients(proc: _Proc, j=j, after=after_clients):
                    self._start_group(j, proc.legs, after)

                self.loop.spawn(edge_proc(), _fresh_legs(), start_clients)
        else:
            self._start_group(0, _fresh_legs(), finished)
        self.loop.run()

        proc = final["proc"]
        legs = {name: math.fsum(proc.legs.get(name, [])) for name in CostBreakdown.TIME_FIELDS}
        for key, busy in self.loop.busy.items():
            target = self.state.clock.compute_s if key[0] == "cpu" else self.state.clock.transfer_s
            target[f"{key[1]}{key[2]}"] += busy
        breakdown = CostBreakdown(total_s=proc.done_at, **legs, **self.counters)
        return breakdown

    def aggregate(self) -> None:
        st, cfg = self.state, self.cfg
        updates = [self.updates[c] for c in sorted(self.updates)]
        groups = self.groups if (self.edge and cfg.hierarchical()) else None
        new = aggregate_round(st.agg, updates, groups, weighted=cfg.sample_weighted())
        st.net = with_flat_params(st.net, new)


def run_epoch(method: Method | str, state: SimState, scenario: Scenario) -> tuple[SimState, CostBreakdown]:
    """One global epoch: distribute, train every client, collect, aggregate."""
    method = Method(method)
    scenario.validate()
    if method is not state.cfg.method:
        raise SimError(f"state was configured for {state.cfg.method.value}, not {method.value}")
    if len(state.shards) != scenario.topology.num_clients:
        raise SimError(f"{len(state.shards)} shards for {scenario.topology.num_clients} clients")
    # FedDC divides by the local step count before the first aggregation sets it
    n0 = len(state.shards[0])
    state.agg.local_steps = max(1, math.ceil(n0 / state.cfg.batch_size) * state.cfg.local_epochs)
    run = _Epoch(method, state, scenario)
    breakdown = run.run()
    run.aggregate()
    state.epoch += 1
    state.clock.epoch = state.epoch
    state.history.append(breakdown)
    return state, breakdown


# ---------------------------------------------------------------------------
# training runs and reports


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    method: str
    accuracy: float
    breakdown: CostBreakdown

    CSV_HEADER = ("epoch", "method", "accuracy", "client_s", "edge_s", "central_s", "transfer_s", "total_s")

    def csv_row(self) -> list:
        b = self.breakdown
        return [
            self.epoch,
            self.method,
            f"{self.accuracy:.4f}",
            f"{b.client_compute_s:.6f}",
            f"{b.edge_compute_s:.6f}",
            f"{b.central_compute_s:.6f}",
            f"{b.transfer_s:.6f}",
            f"{b.total_s:.6f}",
        ]


SUMMARY_HEADER = (
    "method",
    "client_flops",
    "client_s",
    "edge_flops",
    "edge_s",
    "central_flops",
    "central_s",
    "ce_bytes",
    "ce_s",
    "es_bytes",
    "es_s",
    "cs_bytes",
    "cs_s",
    "total_s",
)


@dataclass
class RunReport:
    method: str
    rows: list[EpochRow]
    final_weights: np.ndarray
    privacy_events: list[PrivacyEvent]
    message_counts: dict[tuple[str, str, str], list[int]]

    @property
    def accuracies(self) -> list[float]:
        return [r.accuracy for r in self.rows]

    def summary(self) -> CostBreakdown:
        total = CostBreakdown()
        for r in self.rows:
            total = total + r.breakdown
        return total

    def summary_row(self) -> list:
        s = self.summary()
        return [
            self.method,
            f"{s.client_flops:.0f}",
            f"{s.client_compute_s:.2f}",
            f"{s.edge_flops:.0f}",
            f"{s.edge_compute_s:.2f}",
            f"{s.central_flops:.0f}",
            f"{s.central_compute_s:.2f}",
            f"{s.ce_bytes:.0f}",
            f"{s.ce_transfer_s:.2f}",
            f"{s.es_bytes:.0f}",
            f"{s.es_transfer_s:.2f}",
            f"{s.cs_bytes:.0f}",
            f"{s.cs_transfer_s:.2f}",
            f"{s.total_s:.2f}",
        ]

    def to_csv(self, preamble: Sequence[str] = ()) -> str:
        buf = io.StringIO()
        for line in preamble:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EpochRow.CSV_HEADER)
        for r in self.rows:
            w.writerow(r.csv_row())
        return buf.getvalue()

    def summary_csv(self, preamble: Sequence[str] = ()) -> str:
        buf = io.StringIO()
        for line in preamble:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerow(self.summary_row())
        return buf.getvalue()


def run_training(
    scenario: Scenario,
    epochs: int,
    net: NetworkSpec,
    cfg: SimConfig,
    shards: Sequence[Dataset],
    test: Dataset | None = None,
) -> RunReport:
    """Train for ``epochs`` global epochs and record accuracy and cost per epoch."""
    if epochs < 1:
        raise SimError(f"epochs must be >= 1, got {epochs}")
    state = init_state(net, cfg, shards, test)
    rows = []
    for _ in range(epochs):
        state, breakdown = run_epoch(cfg.method, state, scenario)
        acc = accuracy(state.net, test.features, test.labels) if test is not None else math.nan
        rows.append(EpochRow(state.epoch, cfg.method.value, acc, breakdown))
    return RunReport(
        cfg.method.value,
        rows,
        flatten_params(state.net.layers),
        list(state.privacy_events),
        {k: list(v) for k, v in state.message_counts.items()},
    )
