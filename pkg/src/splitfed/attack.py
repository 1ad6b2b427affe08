"""Label inference from a single sample's logit gradient, and its success against label noise.

For softmax cross entropy the gradient w.r.t. the logits is
``softmax(z) * sum(t) - t``. With a one-hot target the true class is the
only negative entry, so ``argmin`` recovers it every time. Noisy soft
targets blur that signal.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, synth_blobs, train_test_split
from .labeldp import NoiseConfig, noisy_targets
from .rng import substream
from .split import SplitMode, SplitPlan, part_backward, part_forward, split
from .tensor import Dense, NetworkSpec, NumericError, accuracy, backward, mlp, sgd_step, softmax_cross_entropy

DEFAULT_GRID = (0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0)
CAPTURE_POINTS = ("sfl", "eusfl_leak")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class GradientCapture:
    """What the attacker sees for one step: a length-k vector whose sign pattern follows the logit gradient."""

    last_layer_logit_gradient: np.ndarray
    true_label: int | None = None
    batch_size: int = 1

    def __post_init__(self):
        g = np.asarray(self.last_layer_logit_gradient, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "last_layer_logit_gradient", g)


@dataclass(frozen=True)
class AttackResult:
    predicted_label: int
    true_label: int
    noise_scale: float
    trial_id: int

    @property
    def success(self) -> bool:
        return self.predicted_label == self.true_label


def infer_label(cap: GradientCapture) -> int:
    if cap.batch_size != 1:
        raise AttackError(f"label inference needs one sample per step, got batch_size={cap.batch_size}")
    return int(np.argmin(cap.last_layer_logit_gradient))


def capture_logit_gradient(net: NetworkSpec, x: np.ndarray, target, true_label: int | None = None) -> GradientCapture:
    """Vertical split: the server computes the loss, so it holds the logit gradient."""
    g = backward(net, x[None] if x.ndim == len(net.input_shape) else x, target)
    if g.logit_grad.shape[0] != 1:
        return GradientCapture(g.logit_grad.sum(axis=0), true_label, g.logit_grad.shape[0])
    return GradientCapture(g.logit_grad[0], true_label, 1)


def capture_weight_delta(
    net: NetworkSpec, plan: SplitPlan, x: np.ndarray, target, lr: float, true_label: int | None = None
) -> GradientCapture:
    """U-shaped split, hypothetical leak: the rear part's weights after a one-sample step.

    The last dense layer's bias moves by ``-lr * g``, which hands over the
    logit gradient ``g`` directly. Without a bias the weight change
    ``-lr * h^T g`` is used: ``h >= 0`` after a ReLU, so its negated column
    sums share the sign of ``g`` unless every hidden unit is inactive.
    """
    front, middle, rear = split(net, plan)
    last = rear.layers[-1]
    if not isinstance(last, Dense):
        raise AttackError("the weight-delta capture needs a dense output layer")
    xb = x[None] if x.ndim == len(net.input_shape) else x
    d1, _ = part_forward(front, xb)
    d2, _ = part_forward(middle, d1)
    logits, c3 = part_forward(rear, d2)
    _, dz = softmax_cross_entropy(logits, target)
    _, g3 = part_backward(rear, c3, dz)
    after = sgd_step(rear, g3, lr)
    if "b" in last.params:
        leak = (last.params["b"] - after.layers[-1].params["b"]) / lr
    else:
        leak = (last.params["W"] - after.layers[-1].params["W"]).sum(axis=0)
    return GradientCapture(leak, true_label, xb.shape[0])


@dataclass(frozen=True)
class AttackSetup:
    """Desk-scale task the sweep trains and attacks."""

    k: int = 3
    dim: int = 8
    n: int = 1200
    test_fraction: float = 0.25
    hidden: tuple[int, ...] = (32, 32)
    epochs: int = 2
    lr: float = 0.02
    batch_size: int = 32
    seed: int = 0
    capture: str = "sfl"

    def __post_init__(self):
        if self.capture not in CAPTURE_POINTS:
            raise AttackError(f"capture must be one of {CAPTURE_POINTS}, got {self.capture!r}")
        if len(self.hidden) < 1:
            raise AttackError("the attacked model needs at least one hidden layer")

    def data(self) -> tuple[Dataset, Dataset]:
        return train_test_split(synth_blobs(self.n, self.k, self.dim, self.seed), self.test_fraction, self.seed)

    def network(self) -> NetworkSpec:
        return mlp([self.dim, *self.hidden, self.k], seed=self.seed)

    def plan(self) -> SplitPlan:
        layers = 2 * len(self.hidden) + 1
        if self.capture == "sfl":
            return SplitPlan(2, mode=SplitMode.VERTICAL)
        return SplitPlan(2, layers - 1)


@dataclass(frozen=True)
class CurvePoint:
    noise_scale: float
    asr_pct: float
    accuracy_pct: float
    trials: int
    diverged: bool = False

    CSV_HEADER = ("noise_scale", "asr_pct", "accuracy_pct", "trials", "diverged")

    @property
    def asr(self) -> float:
        return self.asr_pct / 100.0

    def asr_sigma(self, p: float | None = None) -> float:
        """Binomial standard error of the ASR estimate (at ``p`` if given)."""
        q = self.asr if p is None else p
        return math.sqrt(max(q * (1.0 - q), 0.0) / self.trials)

    def csv_row(self) -> list:
        return [repr(self.noise_scale), f"{self.asr_pct:.2f}", f"{self.accuracy_pct:.2f}", self.trials, int(self.diverged)]


def _noise(scale: float, setup: AttackSetup) -> NoiseConfig | None:
    return None if scale == 0 else NoiseConfig.from_scale(scale, setup.k, seed=setup.seed)


def _capture(setup: AttackSetup, net: NetworkSpec, plan: SplitPlan, x: np.ndarray, target, y: int) -> GradientCapture:
    if setup.capture == "sfl":
        return capture_logit_gradient(net, x, target, y)
    return capture_weight_delta(net, plan, x, target, setup.lr, y)


def _finite(net: NetworkSpec) -> bool:
    return all(np.all(np.isfinite(p)) for layer in net.layers for p in layer.params.values())


def train_with_labeldp(
    setup: AttackSetup,
    scale: float,
    train: Dataset,
    replica: int = 0,
    observe: Sequence[int] = (),
) -> tuple[NetworkSpec, bool, list[GradientCapture]]:
    """Plain minibatch SGD on noisy soft targets redrawn every epoch.

    ``observe`` lists positions in the stream of training samples
    (``epoch * len(train) + slot``) at which the attacker records that
    sample's capture, taken from the model of the step that consumes it and
    the target it is trained on.

    Negative target entries make the loss unbounded below, so training can
    blow up. If a step produces non-finite values, training stops and the
    last finite model is returned with ``diverged=True``; positions not yet
    reached are then captured on that model with the targets they would
    have been trained on.
    """
    net = setup.network() if replica == 0 else mlp([setup.dim, *setup.hidden, setup.k], seed=_replica_seed(setup, replica))
    cfg = _noise(scale, setup)
    plan = setup.plan()
    wanted = sorted(set(int(p) for p in observe))
    caps: list[GradientCapture] = []
    schedule = []
    for epoch in range(setup.epochs):
        if cfg is None:
            targets = train.labels
        else:
            targets = noisy_targets(train.labels, cfg, substream(setup.seed, "noise", replica, epoch))
        order = substream(setup.seed, "shuffle", replica, epoch).permutation(len(train))
        schedule.append((targets, order))
    diverged = False
    cursor = 0
    for epoch, (targets, order) in enumerate(schedule):
        for start in range(0, len(train), setup.batch_size):
            idx = order[start : start + setup.batch_size]
            stop = epoch * len(train) + start + idx.size
            if not diverged:
                while cursor < len(wanted) and wanted[cursor] < stop:
                    i = idx[wanted[cursor] - epoch * len(train) - start]
                    caps.append(_capture(setup, net, plan, train.features[i], targets[i : i + 1], int(train.labels[i])))
                    cursor += 1
                try:
                    g = backward(net, train.features[idx], targets[idx])
                    stepped = sgd_step(net, g, setup.lr)
                    if not _finite(stepped):
                        raise NumericError("non-finite weights")
                    net = stepped
                except NumericError:
                    diverged = True
            if diverged:
                while cursor < len(wanted) and wanted[cursor] < stop:
                    i = idx[wanted[cursor] - epoch * len(train) - start]
                    caps.append(_capture(setup, net, plan, train.features[i], targets[i : i + 1], int(train.labels[i])))
                    cursor += 1
    if cursor != len(wanted):
        raise AttackError(f"observation position {wanted[cursor]} lies past the end of training")
    return net, diverged, caps


def _replica_seed(setup: AttackSetup, replica: int) -> int:
    return int(substream(setup.seed, "init", replica).integers(0, 2**31 - 1))


def attack_trials(setup: AttackSetup, net: NetworkSpec, data: Dataset, scale: float, trials: int, point: int = 0):
    """``trials`` one-sample captures against a fixed ``net`` with noise scale ``scale``."""
    cfg = _noise(scale, setup)
    rng = substream(setup.seed, "attack", point)
    picks = rng.integers(0, len(data), size=trials)
    plan = setup.plan()
    results = []
    for trial, i in enumerate(picks):
        x, y = data.features[i], int(data.labels[i])
        target = np.array([y]) if cfg is None else noisy_targets(np.array([y]), cfg, rng)
        results.append(AttackResult(infer_label(_capture(setup, net, plan, x, target, y)), y, scale, trial))
    return results


def asr_sweep(
    setup: AttackSetup,
    noise_grid: Sequence[float] = DEFAULT_GRID,
    trials: int = 500,
    replicas: int = 5,
) -> list[CurvePoint]:
    """Attack success rate and held-out accuracy for each noise scale.

    For every scale, ``replicas`` models (fresh init, shuffling and noise
    seeds) are trained briefly on noisy targets. The attacker watches the
    training runs and records ``trials`` single-sample captures in total,
    at positions drawn uniformly over all samples consumed. Accuracy is the
    mean held-out accuracy of the replicas.
    """
    if trials < 100:
        raise AttackError(f"need at least 100 trials per grid point, got {trials}")
    if replicas < 1:
        raise AttackError(f"replicas must be >= 1, got {replicas}")
    if any(b < 0 for b in noise_grid):
        raise AttackError("noise scales must be >= 0")
    train, test = setup.data()
    stream = setup.epochs * len(train)
    curve = []
    for point, scale in enumerate(noise_grid):
        rng = substream(setup.seed, "attack", point)
        flat = rng.choice(replicas * stream, size=trials, replace=False)
        results, accs, diverged = [], [], False
        for r in range(replicas):
            mine = flat[(flat // stream) == r] % stream
            net, div, caps = train_with_labeldp(setup, scale, train, r, mine)
            diverged |= div
            accs.append(accuracy(net, test.features, test.labels))
            results += [AttackResult(infer_label(c), c.true_label, scale, len(results) + t) for t, c in enumerate(caps)]
        asr = 100.0 * sum(r.success for r in results) / trials
        curve.append(CurvePoint(float(scale), asr, float(np.mean(accs)), trials, diverged))
    return curve


def curve_csv(curve: Sequence[CurvePoint], preamble: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in preamble:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CurvePoint.CSV_HEADER)
    for p in curve:
        w.writerow(p.csv_row())
    return buf.getvalue()


def noise_threshold(curve: Sequence[CurvePoint], k: int, max_accuracy_drop: float = 5.0) -> CurvePoint | None:
    """Smallest noise scale with ASR <= 2/k that costs at most ``max_accuracy_drop`` points."""
    base = next((p for p in curve if p.noise_scale == 0), curve[0])
    for p in sorted(curve, key=lambda p: p.noise_scale):
        if p.asr <= 2.0 / k and base.accuracy_pct - p.accuracy_pct <= max_accuracy_drop:
            return p
    return None
