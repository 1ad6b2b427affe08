"""Closed-form per-epoch time model and the reference-setup tables.

Compute time is FLOPs / FLOP/s and transfer time is bytes / (bytes/s). Phases
never overlap, so the epoch time on the critical path is a plain sum of its
legs. For every method the per-client leg is

    weights down + per-batch traffic + client compute + upper compute + weights up

where "upper" is the edge (edge-assisted methods) or the central server.
Edge-assisted methods add one global-model download and one merged-model
upload on the edge<->central link.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields

from .scenario import Method, Role, Scenario, ScenarioError, make_scenario

#: Transfer-accounting width of one tensor element.
BYTES_PER_ELEMENT = 4


@dataclass(frozen=True)
class ModelProfile:
    """Sizes and FLOPs of a split model.

    ``flops_c``, ``flops_e``, ``d1`` and ``d2`` are per batch; ``batches``
    is the number of batches one client processes per epoch (it may be
    fractional when the shard size is not a multiple of the batch size).
    A vertical split has ``m3 == 0`` and ``d2 == 0``.
    """

    m1: int
    m2: int
    m3: int
    flops_c: float
    flops_e: float
    d1: int
    d2: int
    batch_size: int
    batches: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0:
                raise ValueError(f"ModelProfile.{f.name} must be >= 0, got {v}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def m(self) -> int:
        return self.m1 + self.m2 + self.m3

    @property
    def flops(self) -> float:
        return self.flops_c + self.flops_e

    @property
    def label_bytes(self) -> int:
        return self.batch_size * BYTES_PER_ELEMENT

    def per_epoch(self, samples_per_client: float) -> "ModelProfile":
        """Same profile with ``batches`` set from a client's sample count."""
        return ModelProfile(**{**asdict(self), "batches": samples_per_client / self.batch_size})


@dataclass(frozen=True)
class CostBreakdown:
    """Critical-path time of one epoch, by leg.

    The ``*_flops`` and ``*_bytes`` counters are system-wide totals and are
    informational only; the ``*_s`` legs are those of the slowest client.
    """

    client_compute_s: float = 0.0
    edge_compute_s: float = 0.0
    central_compute_s: float = 0.0
    ce_transfer_s: float = 0.0
    es_transfer_s: float = 0.0
    cs_transfer_s: float = 0.0
    total_s: float = 0.0
    client_flops: float = 0.0
    edge_flops: float = 0.0
    central_flops: float = 0.0
    ce_bytes: float = 0.0
    es_bytes: float = 0.0
    cs_bytes: float = 0.0

    TIME_FIELDS = (
        "client_compute_s",
        "edge_compute_s",
        "central_compute_s",
        "ce_transfer_s",
        "es_transfer_s",
        "cs_transfer_s",
    )

    @classmethod
    def of(cls, **legs: float) -> "CostBreakdown":
        """Build from legs and counters, setting ``total_s`` to the sum of the legs."""
        total = math.fsum(legs.get(name, 0.0) for name in cls.TIME_FIELDS)
        return cls(total_s=total, **legs)

    @property
    def transfer_s(self) -> float:
        return self.ce_transfer_s + self.es_transfer_s + self.cs_transfer_s

    def components_sum(self) -> float:
        return math.fsum(getattr(self, name) for name in self.TIME_FIELDS)

    def scaled(self, factor: float) -> "CostBreakdown":
        return CostBreakdown(**{f.name: getattr(self, f.name) * factor for f in fields(self)})

    def __add__(self, other: "CostBreakdown") -> "CostBreakdown":
        return CostBreakdown(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})


def _leg_volumes(method: Method, profile: ModelProfile, charge_labels: bool) -> tuple[float, float, float, float]:
    """(bytes down, bytes up, client FLOPs, upper FLOPs) for one client and one epoch."""
    nb = profile.batches
    if method.split is None:
        return profile.m, profile.m, nb * profile.flops, 0.0
    weights = profile.m1 + profile.m3
    traffic = nb * (profile.d1 + profile.d2)
    up = weights + traffic
    if method.split == "vertical" and charge_labels:
        up += nb * profile.label_bytes
    return weights + traffic, up, nb * profile.flops_c, nb * profile.flops_e


def epoch_time(method: Method | str, profile: ModelProfile, scenario: Scenario) -> CostBreakdown:
    """Closed-form time of one global epoch.

    With a parallel schedule the clients under one upper entity share its
    FLOPS evenly; with a sequential schedule they take turns at full speed.
    Groups of different sizes are independent and the slowest one sets the
    pace.
    """
    method = Method(method)
    scenario.validate()
    upper = method.upper
    r_down = scenario.link_rate(upper, Role.CLIENT)
    r_up = scenario.link_rate(Role.CLIENT, upper)
    down_b, up_b, f_client, f_upper = _leg_volumes(method, profile, scenario.charge_labels)
    p_client = scenario.client.flops
    p_upper = scenario.entity(upper).flops
    parallel = scenario.schedule == "parallel"

    slowest = None
    for group in scenario.upper_groups(method):
        n = len(group)
        share = n if parallel else 1
        reps = 1 if parallel else n
        legs = (
            reps * f_client / p_client,
            reps * f_upper * share / p_upper,
            reps * (down_b / r_down + up_b / r_up),
        )
        if slowest is None or math.fsum(legs) > math.fsum(slowest):
            slowest = legs
    t_client, t_upper, t_link = slowest

    n_clients = scenario.topology.num_clients
    counters = {
        "client_flops": n_clients * f_client,
        ("edge_flops" if upper is Role.EDGE else "central_flops"): n_clients * f_upper,
    }
    if method.edge_assisted:
        t_es = profile.m / scenario.link_rate(Role.CENTRAL, Role.EDGE) + profile.m / scenario.link_rate(
            Role.EDGE, Role.CENTRAL
        )
        return CostBreakdown.of(
            client_compute_s=t_client,
            edge_compute_s=t_upper,
            ce_transfer_s=t_link,
            es_transfer_s=t_es,
            ce_bytes=n_clients * (down_b + up_b),
            es_bytes=scenario.topology.num_edges * 2 * profile.m,
            **counters,
        )
    return CostBreakdown.of(
        client_compute_s=t_client,
        central_compute_s=t_upper,
        cs_transfer_s=t_link,
        cs_bytes=n_clients * (down_b + up_b),
        **counters,
    )


def delta_t(profile: ModelProfile, scenario: Scenario) -> float:
    """Epoch-time advantage of the U-shaped split over plain FL on the central server.

    Positive means the split is faster. Written out directly rather than as
    a difference of two ``epoch_time`` calls so the two can check each other.
    """
    scenario.validate()
    n = scenario.topology.num_clients
    parallel = scenario.schedule == "parallel"
    share = n if parallel else 1
    reps = 1 if parallel else n
    inv_r = 1.0 / scenario.link_rate(Role.CENTRAL, Role.CLIENT) + 1.0 / scenario.link_rate(Role.CLIENT, Role.CENTRAL)
    nb = profile.batches
    offloaded = nb * profile.flops_e
    gain = (
        offloaded / scenario.client.flops
        - offloaded * share / scenario.central.flops
        + profile.m2 * inv_r
        - nb * (profile.d1 + profile.d2) * inv_r
    )
    return reps * gain


# ---------------------------------------------------------------------------
# reference setups

SETUPS = {
    1: dict(
        client_flops=400e3,
        edge_flops=8e6,
        central_flops=12e6,
        client_edge=408e3,
        client_central=20e3,
        edge_central=12e6,
    ),
    2: dict(
        client_flops=1e9,
        edge_flops=20e9,
        central_flops=30e9,
        client_edge=8e6,
        client_central=100e3,
        edge_central=12e6,
    ),
}

REFERENCE_EPOCHS = 10

COLUMNS = ("client", "edge", "central", "ce", "es", "cs")
COLUMN_TITLES = {
    "client": "Client",
    "edge": "Edge",
    "central": "Central",
    "ce": "C-E",
    "es": "E-S",
    "cs": "C-S",
}
_COLUMN_RATE = {
    "client": "client_flops",
    "edge": "edge_flops",
    "central": "central_flops",
    "ce": "client_edge",
    "es": "edge_central",
    "cs": "client_central",
}

# Per-epoch FLOPs / bytes and the printed per-cell seconds and total, setup 1.
# Only non-zero cells are listed.
_SETUP1_ROWS = {
    "DL": ({"central": (35_540_000, "2.96"), "cs": (54_880_000, "2744.00")}, "2746.96"),
    "FL": ({"client": (35_540_000, "88.85"), "cs": (88_192, "4.41")}, "930.26"),
    "SFL": (
        {"client": (1_440_000, "3.60"), "central": (34_100_000, "2.84"), "cs": (14_016, "0.70")},
        "70.14",
    ),
    "USFL": (
        {"client": (1_940_000, "4.85"), "central": (33_600_000, "2.80"), "cs": (1_437_392, "71.87")},
        "790.52",
    ),
    "EFL": ({"client": (35_540_000, "88.85"), "ce": (88_192, "0.22"), "es": (88_192, "0.07")}, "890.14"),
    "ESFL": (
        {
            "client": (1_440_000, "3.60"),
            "edge": (34_100_000, "4.26"),
            "central": (34_100_000, "2.80"),
            "ce": (14_016, "0.03"),
            "es": (88_192, "0.07"),
        },
        "100.81",
    ),
    "EUSFL": (
        {
            "client": (1_940_000, "4.85"),
            "edge": (33_600_000, "4.20"),
            "central": (33_600_000, "2.80"),
            "ce": (1_437_392, "3.52"),
            "es": (88_192, "0.07"),
        },
        "150.45",
    ),
}

# Setup 2: client FLOPs, upper-entity FLOPs, total transfer bytes, printed total, printed accuracy.
_SETUP2_ROWS = {
    "FL": (11_985_747_968, 0, 278_026_064, "1402.116", "64.80"),
    "SFL": (130_023_424, 11_855_724_544, 541_680, "12.813", "65.12"),
    "USFL": (132_644_864, 11_853_103_104, 18_177_408, "151.873", "64.92"),
    "EFL": (11_985_747_968, 0, 278_026_064, "409.468", "65.03"),
    "ESFL": (130_023_424, 11_855_724_544, 541_680, "127.060", "64.92"),
    "EUSFL": (132_644_864, 11_853_103_104, 18_177_408, "128.881", "65.13"),
}

#: Cells whose printed value is within this many seconds of the computed one
#: count as rounding noise rather than a modelling disagreement.
ROUNDING_SLACK_S = 0.05


def setup_scenario(setup: int, **overrides) -> Scenario:
    """Entity capabilities of a reference setup as a one-client, one-edge scenario."""
    if setup not in SETUPS:
        raise ScenarioError(f"unknown setup {setup!r}; expected one of {sorted(SETUPS)}")
    return make_scenario(**SETUPS[setup], **overrides)


def _decimals(printed: str) -> int:
    return len(printed.split(".")[1]) if "." in printed else 0


@dataclass(frozen=True)
class Cell:
    column: str
    amount: float
    seconds: float
    printed: str | None = None

    @property
    def printed_value(self) -> float | None:
        return None if self.printed is None else float(self.printed)

    @property
    def matches(self) -> bool:
        """Computed seconds equal the printed value at its precision."""
        if self.printed is None:
            return True
        return f"{self.seconds:.{_decimals(self.printed)}f}" == self.printed


@dataclass(frozen=True)
class Anomaly:
    method: str
    column: str
    computed: float
    printed: float
    kind: str
    note: str = ""

    @property
    def delta(self) -> float:
        return self.computed - self.printed

    def describe(self) -> str:
        text = (
            f"{self.method} {COLUMN_TITLES.get(self.column, self.column)}: computed {self.computed:.4f} "
            f"vs printed {self.printed:g} (delta {self.delta:+.4f}, {self.kind})"
        )
        return f"{text}; {self.note}" if self.note else text


@dataclass(frozen=True)
class TableRow:
    method: str
    cells: dict[str, Cell]
    epoch_s: float
    total_s: float
    printed_total: str
    printed_accuracy: str | None = None
    rule: str = ""

    @property
    def printed_total_value(self) -> float:
        return float(self.printed_total)

    @property
    def total_delta_pct(self) -> float:
        return 100.0 * (self.total_s - self.printed_total_value) / self.printed_total_value


@dataclass(frozen=True)
class CostTable:
    setup: int
    epochs: int
    rows: list[TableRow]
    anomalies: list[Anomaly] = field(default_factory=list)

    def row(self, method: str) -> TableRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def columns(self) -> list[str]:
        return list(COLUMNS) if self.setup == 1 else ["client", "upper", "transfer"]

    def header(self) -> list[str]:
        head = ["method"]
        for col in self.columns():
            head += [f"{col}_{'bytes' if col in ('ce', 'es', 'cs', 'transfer') else 'flops'}", f"{col}_s"]
        head += ["epoch_s", f"total_{self.epochs}ep_s", "reference_total_s", "total_delta_pct"]
        if self.setup == 2:
            head.append("reference_accuracy_pct")
        return head

    def _cells(self, row: TableRow, pretty: bool) -> list[str]:
        out = [row.method]
        for col in self.columns():
            cell = row.cells.get(col)
            amount = cell.amount if cell else 0
            seconds = cell.seconds if cell else 0.0
            out.append(f"{int(amount):,}" if pretty else str(int(amount)))
            out.append(f"{seconds:.2f}" if pretty else repr(seconds))
        digits = 3 if self.setup == 2 else 2
        if pretty:
            out += [f"{row.epoch_s:.2f}", f"{row.total_s:.{digits}f}", row.printed_total, f"{row.total_delta_pct:+.2f}%"]
        else:
            out += [repr(row.epoch_s), repr(row.total_s), row.printed_total, f"{row.total_delta_pct:.4f}"]
        if self.setup == 2:
            out.append(row.printed_accuracy or "")
        return out

    def to_markdown(self) -> str:
        head = self.header()
        lines = [
            f"Setup {self.setup}: per-epoch cost and {self.epochs}-epoch totals",
            "",
            "| " + " | ".join(head) + " |",
            "|" + "|".join("---" for _ in head) + "|",
        ]
        lines += ["| " + " | ".join(self._cells(r, pretty=True)) + " |" for r in self.rows]
        lines += ["", "Totals:"]
        lines += [f"- {r.method}: {r.rule}" for r in self.rows]
        lines += ["", "Anomalies:"]
        lines += [f"- {a.describe()}" for a in self.anomalies] or ["- none"]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for r in self.rows:
            w.writerow(self._cells(r, pretty=False))
        buf.write("\n")
        w.writerow(["anomaly_method", "column", "computed_s", "printed_s", "delta_s", "kind"])
        for a in self.anomalies:
            w.writerow([a.method, a.column, repr(a.computed), repr(a.printed), repr(a.delta), a.kind])
        return buf.getvalue()


def _setup1_table(epochs: int) -> CostTable:
    rates = SETUPS[1]
    rows, anomalies = [], []
    for method, (raw_cells, printed_total) in _SETUP1_ROWS.items():
        cells = {}
        for col, (amount, printed) in raw_cells.items():
            cell = Cell(col, amount, amount / rates[_COLUMN_RATE[col]], printed)
            cells[col] = cell
            if not cell.matches:
                gap = abs(cell.seconds - cell.printed_value)
                kind = "rounding" if gap <= ROUNDING_SLACK_S else "magnitude"
                note = "" if kind == "rounding" else f"printed value is {cell.printed_value / cell.seconds:.1f}x the computed one"
                anomalies.append(Anomaly(method, col, cell.seconds, cell.printed_value, kind, note))
        epoch_s = math.fsum(c.seconds for c in cells.values())
        if method == "DL":
            upload = cells["cs"].seconds
            total = upload + epochs * (epoch_s - upload)
            rule = f"raw-data upload charged once + {epochs} x training compute"
        else:
            total = epochs * epoch_s
            rule = f"{epochs} x per-epoch sum"
        rows.append(TableRow(method, cells, epoch_s, total, printed_total, rule=rule))
    return CostTable(1, epochs, rows, anomalies)


def _setup2_table(epochs: int) -> CostTable:
    rates = SETUPS[2]
    rows, anomalies = [], []
    for method_name, (f_client, f_upper, nbytes, printed_total, acc) in _SETUP2_ROWS.items():
        method = Method(method_name)
        p_upper = rates["edge_flops" if method.edge_assisted else "central_flops"]
        r = rates["client_edge" if method.edge_assisted else "client_central"]
        cells = {
            "client": Cell("client", f_client, f_client / rates["client_flops"]),
            "upper": Cell("upper", f_upper, f_upper / p_upper),
            "transfer": Cell("transfer", nbytes, nbytes / r),
        }
        epoch_s = math.fsum(c.seconds for c in cells.values())
        total = epochs * epoch_s
        row = TableRow(method_name, cells, epoch_s, total, printed_total, acc, rule=f"{epochs} x per-epoch sum")
        rows.append(row)
        anomalies.append(
            Anomaly(
                method_name,
                "total",
                total,
                row.printed_total_value,
                "composition",
                "the printed total cannot be rebuilt from the printed columns without unstated batch counts",
            )
        )
    return CostTable(2, epochs, rows, anomalies)


def reproduce_table(setup: int, epochs: int = REFERENCE_EPOCHS) -> CostTable:
    """Per-cell times and totals for a reference setup, with anomalies flagged."""
    if setup == 1:
        return _setup1_table(epochs)
    if setup == 2:
        return _setup2_table(epochs)
    raise ScenarioError(f"unknown setup {setup!r}; expected 1 or 2")


def reference_cells(setup: int, method: Method | str) -> dict[str, float]:
    """Per-epoch FLOPs/bytes recorded for ``method`` in a reference setup.

    Keys are ``client``, ``edge``, ``central``, ``ce``, ``es``, ``cs`` for
    setup 1 and ``client``, ``upper``, ``transfer`` for setup 2.
    """
    name = method.value if isinstance(method, Method) else str(method)
    if setup == 1:
        return {col: float(amount) for col, (amount, _) in _SETUP1_ROWS[name][0].items()}
    if setup == 2:
        f_client, f_upper, nbytes, _, _ = _SETUP2_ROWS[name]
        return {"client": float(f_client), "upper": float(f_upper), "transfer": float(nbytes)}
    raise ScenarioError(f"unknown setup {setup!r}; expected 1 or 2")
