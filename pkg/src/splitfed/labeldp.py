"""Laplace noise on one-hot labels, and an empirical check of the privacy claim.

A label ``y`` becomes ``(onehot(y) + n) / sum(onehot(y) + n)`` with
``n_i ~ Laplace(0, b)`` i.i.d. and ``b = sensitivity / epsilon``. Entries may
be negative; they are kept as they are.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import open_uniform, substream

#: Normalising sums smaller than this in magnitude trigger a redraw.
MIN_NORMALIZER = 1e-6
MAX_RETRIES = 100


class LabelDPError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    """Privacy budget and label geometry.

    ``epsilon=math.inf`` disables noise (scale 0). ``delta`` is always 0:
    the Laplace mechanism gives pure epsilon-DP.
    """

    epsilon: float
    sensitivity: float = 2.0
    dims: int = 10
    delta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise LabelDPError(f"epsilon must be > 0, got {self.epsilon}")
        if not (self.sensitivity > 0 and math.isfinite(self.sensitivity)):
            raise LabelDPError(f"sensitivity must be a positive finite number, got {self.sensitivity}")
        if self.dims < 2:
            raise LabelDPError(f"dims must be >= 2, got {self.dims}")
        if self.delta != 0:
            raise LabelDPError("the Laplace mechanism is pure epsilon-DP; delta must be 0")

    @property
    def scale(self) -> float:
        return self.sensitivity / self.epsilon

    @classmethod
    def from_scale(cls, scale: float, dims: int, sensitivity: float = 2.0, seed: int = 0) -> "NoiseConfig":
        if scale < 0:
            raise LabelDPError(f"noise scale must be >= 0, got {scale}")
        eps = math.inf if scale == 0 else sensitivity / scale
        return cls(epsilon=eps, sensitivity=sensitivity, dims=dims, seed=seed)


@dataclass(frozen=True)
class SoftLabel:
    values: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise LabelDPError(f"a soft label is a vector, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise LabelDPError("soft label has non-finite entries")
        if self.normalized and abs(v.sum() - 1.0) > 1e-9:
            raise LabelDPError(f"normalized label sums to {v.sum()!r}")
        object.__setattr__(self, "values", v)

    @property
    def dims(self) -> int:
        return int(self.values.shape[0])

    def argmax(self) -> int:
        return int(np.argmax(self.values))


def one_hot(y: int, k: int) -> SoftLabel:
    if k < 2:
        raise LabelDPError(f"k must be >= 2, got {k}")
    if not 0 <= y < k:
        raise LabelDPError(f"label {y} out of range for k={k}")
    v = np.zeros(k)
    v[y] = 1.0
    return SoftLabel(v)


def label_sensitivity(k: int) -> float:
    """Largest L1 distance between two one-hot vectors of length ``k``."""
    if k < 2:
        raise LabelDPError(f"k must be >= 2, got {k}")
    return 2.0


def laplace(rng: np.random.Generator, scale: float, size) -> np.ndarray:
    """Laplace(0, scale) draws by inverting the CDF of an open uniform."""
    if scale == 0:
        return np.zeros(size)
    u = open_uniform(rng, size) - 0.5
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def noisy_targets(labels: np.ndarray, cfg: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """Normalised noisy soft labels for a vector of class indices, one row each.

    Rows are drawn in index order from ``rng``; rows with a near-zero sum are
    redrawn, again in index order, from the same stream.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise LabelDPError(f"labels must be a vector of class indices, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= cfg.dims):
        raise LabelDPError(f"labels out of range for k={cfg.dims}")
    raw = np.zeros((labels.size, cfg.dims))
    raw[np.arange(labels.size), labels] = 1.0
    if cfg.scale == 0:
        return raw
    out = raw + laplace(rng, cfg.scale, raw.shape)
    sums = out.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums) < MIN_NORMALIZER)
    for _ in range(MAX_RETRIES):
        if bad.size == 0:
            break
        out[bad] = raw[bad] + laplace(rng, cfg.scale, (bad.size, cfg.dims))
        sums[bad] = out[bad].sum(axis=1)
        bad = bad[np.abs(sums[bad]) < MIN_NORMALIZER]
    else:
        if bad.size:
            raise LabelDPError(f"normaliser stayed below {MIN_NORMALIZER} after {MAX_RETRIES} redraws")
    out /= sums[:, None]
    if not np.all(np.isfinite(out)):
        raise LabelDPError("noisy label is not finite")
    return out


def apply_labeldp(label: SoftLabel, cfg: NoiseConfig, rng: np.random.Generator | None = None) -> SoftLabel:
    """Noisy, normalised copy of a one-hot label.

    Without an explicit ``rng`` the draw comes from the ``"noise"`` substream
    of ``cfg.seed``, so equal configs give equal outputs.
    """
    if label.dims != cfg.dims:
        raise LabelDPError(f"label has {label.dims} dims, config expects {cfg.dims}")
    hot = np.flatnonzero(label.values == 1.0)
    if hot.size != 1 or np.count_nonzero(label.values) != 1:
        raise LabelDPError("apply_labeldp expects a one-hot label")
    if rng is None:
        rng = substream(cfg.seed, "noise")
    return SoftLabel(noisy_targets(hot, cfg, rng)[0])


def mechanism_samples(y: int, cfg: NoiseConfig, n: int, rng: np.random.Generator, scale: float | None = None):
    """``n`` pre-normalisation outputs ``onehot(y) + noise`` (shape ``[n, k]``)."""
    base = np.zeros(cfg.dims)
    base[y] = 1.0
    b = cfg.scale if scale is None else scale
    return base + laplace(rng, b, (n, cfg.dims))


# ---------------------------------------------------------------------------
# empirical audit

AUDIT_FAILURE_PROB = 0.01


@dataclass(frozen=True)
class AuditReport:
    epsilon: float
    bins: int
    max_ratio: float
    bound: float
    verdict: str
    min_bin_count: int
    slack: float
    samples: int

    CSV_HEADER = ("epsilon", "bins", "max_ratio", "bound", "verdict")

    def csv_row(self) -> tuple:
        return (self.epsilon, self.bins, self.max_ratio, self.bound, self.verdict)

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"


def audit_slack(min_bin_count: int, failure_prob: float = AUDIT_FAILURE_PROB) -> float:
    return 4.0 * math.sqrt(math.log(2.0 / failure_prob) / (2.0 * min_bin_count))


def dp_audit(
    cfg: NoiseConfig,
    samples: int = 100_000,
    *,
    pair: tuple[int, int] = (0, 1),
    edges_per_axis: int = 8,
    min_count: int = 200,
    min_bins: int = 10,
    scale: float | None = None,
    rng: np.random.Generator | None = None,
) -> AuditReport:
    """Histogram ratio test of the pre-normalisation mechanism.

    Draws ``samples`` outputs for each label of ``pair``, bins them on the
    two coordinates where the inputs differ (the others are identically
    distributed under both labels), and compares the worst bin-probability
    ratio, in both directions, against ``e**epsilon * (1 + slack)``. Bins with
    fewer than ``min_count`` hits under either label are dropped. ``scale``
    overrides the noise scale actually used, to audit a mis-configured
    mechanism against the budget it claims.
    """
    if samples < 10_000:
        raise LabelDPError(f"the audit needs at least 10,000 samples, got {samples}")
    y, y2 = pair
    for v in pair:
        if not 0 <= v < cfg.dims:
            raise LabelDPError(f"audit label {v} out of range for k={cfg.dims}")
    rng = rng if rng is not None else substream(cfg.seed, "audit")
    a = mechanism_samples(y, cfg, samples, rng, scale)
    b = mechanism_samples(y2, cfg, samples, rng, scale)
    cols = [y, y2] if y != y2 else [y, (y + 1) % cfg.dims]
    pooled = np.concatenate([a[:, cols], b[:, cols]])
    qs = np.linspace(0.0, 1.0, edges_per_axis + 1)[1:-1]
    edges = [np.unique(np.quantile(pooled[:, j], qs)) for j in range(2)]

    def counts(x: np.ndarray) -> np.ndarray:
        i = np.searchsorted(edges[0], x[:, cols[0]], side="right")
        j = np.searchsorted(edges[1], x[:, cols[1]], side="right")
        grid = np.zeros((edges[0].size + 1, edges[1].size + 1), dtype=np.int64)
        np.add.at(grid, (i, j), 1)
        return grid.ravel()

    ca, cb = counts(a), counts(b)
    usable = (ca >= min_count) & (cb >= min_count)
    n_bins = int(usable.sum())
    bound_base = math.exp(cfg.epsilon)
    if n_bins < min_bins:
        return AuditReport(cfg.epsilon, n_bins, math.nan, math.nan, "INCONCLUSIVE", 0, math.nan, samples)
    pa, pb = ca[usable] / samples, cb[usable] / samples
    max_ratio = float(max(np.max(pa / pb), np.max(pb / pa)))
    min_bin = int(min(ca[usable].min(), cb[usable].min()))
    slack = audit_slack(min_bin)
    bound = bound_base * (1.0 + slack)
    verdict = "PASS" if max_ratio <= bound else "FAIL"
    return AuditReport(cfg.epsilon, n_bins, max_ratio, bound, verdict, min_bin, slack, samples)
