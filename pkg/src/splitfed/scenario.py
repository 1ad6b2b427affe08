"""Training methods, entities and topologies shared by the cost model and the simulator.

Link rates are bytes per second and compute is FLOP/s. A link quoted as
"20kb/s" is 20,000 bytes per second here.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum


class ScenarioError(ValueError):
    pass


class Role(str, Enum):
    CLIENT = "client"
    EDGE = "edge"
    CENTRAL = "central"


class Method(str, Enum):
    FL = "FL"
    EFL = "EFL"
    SFL = "SFL"
    USFL = "USFL"
    ESFL = "ESFL"
    EUSFL = "EUSFL"

    @property
    def edge_assisted(self) -> bool:
        return self.value.startswith("E")

    @property
    def split(self) -> str | None:
        """``None``, ``"vertical"`` or ``"u_shaped"`` (values of ``SplitMode``)."""
        if self in (Method.FL, Method.EFL):
            return None
        if self in (Method.SFL, Method.ESFL):
            return "vertical"
        return "u_shaped"

    @property
    def upper(self) -> Role:
        """Entity the client talks to and that runs the server-side part."""
        return Role.EDGE if self.edge_assisted else Role.CENTRAL


@dataclass(frozen=True)
class EntitySpec:
    """Compute capability (FLOP/s) and links towards higher tiers (bytes/s).

    ``up`` maps a peer role to the upload rate; ``down`` to the download
    rate and defaults to ``up`` (symmetric links).
    """

    role: Role
    flops: float
    up: dict[Role, float] = field(default_factory=dict)
    down: dict[Role, float] | None = None

    def rate_up(self, peer: Role) -> float:
        try:
            return self.up[peer]
        except KeyError:
            raise ScenarioError(f"{self.role.value} has no link to {peer.value}") from None

    def rate_down(self, peer: Role) -> float:
        table = self.down if self.down is not None else self.up
        try:
            return table[peer]
        except KeyError:
            raise ScenarioError(f"{self.role.value} has no link to {peer.value}") from None

    def validate(self) -> None:
        if not self.flops > 0:
            raise ScenarioError(f"{self.role.value}.flops must be > 0, got {self.flops}")
        for name, table in (("up", self.up), ("down", self.down or {})):
            for peer, r in table.items():
                if not r > 0:
                    raise ScenarioError(f"{self.role.value}.{name}[{peer.value}] must be > 0, got {r}")


@dataclass(frozen=True)
class Topology:
    """``clients_per_edge[j]`` clients hang off edge ``j``; client ids are assigned in order."""

    clients_per_edge: tuple[int, ...] = (1,)

    def __post_init__(self):
        object.__setattr__(self, "clients_per_edge", tuple(int(c) for c in self.clients_per_edge))
        if not self.clients_per_edge or any(c < 1 for c in self.clients_per_edge):
            raise ScenarioError(f"every edge needs at least one client, got {self.clients_per_edge}")

    @property
    def num_edges(self) -> int:
        return len(self.clients_per_edge)

    @property
    def num_clients(self) -> int:
        return sum(self.clients_per_edge)

    @property
    def groups(self) -> list[list[int]]:
        out, nxt = [], 0
        for count in self.clients_per_edge:
            out.append(list(range(nxt, nxt + count)))
            nxt += count
        return out

    @property
    def assignment(self) -> dict[int, int]:
        return {c: j for j, group in enumerate(self.groups) for c in group}

    @classmethod
    def even(cls, num_clients: int, num_edges: int) -> "Topology":
        if num_edges < 1 or num_clients < num_edges:
            raise ScenarioError(f"cannot spread {num_clients} clients over {num_edges} edges")
        base, extra = divmod(num_clients, num_edges)
        return cls(tuple(base + (1 if j < extra else 0) for j in range(num_edges)))


SCHEDULES = ("parallel", "sequential")


@dataclass(frozen=True)
class Scenario:
    """Entities, topology and client schedule.

    ``schedule="parallel"``: the clients of one upper entity train at the
    same time and split its FLOPS evenly. ``"sequential"``: they take turns,
    each getting the full FLOPS.
    """

    client: EntitySpec
    edge: EntitySpec
    central: EntitySpec
    topology: Topology = Topology()
    schedule: str = "parallel"
    charge_labels: bool = False

    def validate(self) -> None:
        for ent in (self.client, self.edge, self.central):
            ent.validate()
        if self.schedule not in SCHEDULES:
            raise ScenarioError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        for peer in (Role.EDGE, Role.CENTRAL):
            self.client.rate_up(peer)
            self.client.rate_down(peer)
        self.edge.rate_up(Role.CENTRAL)
        self.edge.rate_down(Role.CENTRAL)

    def entity(self, role: Role) -> EntitySpec:
        return {Role.CLIENT: self.client, Role.EDGE: self.edge, Role.CENTRAL: self.central}[role]

    def link_rate(self, src: Role, dst: Role) -> float:
        """Rate of the link carrying a message from ``src`` to ``dst``."""
        order = [Role.CLIENT, Role.EDGE, Role.CENTRAL]
        if order.index(src) < order.index(dst):
            return self.entity(src).rate_up(dst)
        return self.entity(dst).rate_down(src)

    def upper_groups(self, method: Method) -> list[list[int]]:
        """Client ids grouped by the entity running their server-side work."""
        if method.edge_assisted:
            return self.topology.groups
        return [list(range(self.topology.num_clients))]

    def with_rates(
        self,
        *,
        client_flops: float | None = None,
        edge_flops: float | None = None,
        central_flops: float | None = None,
        client_edge: float | None = None,
        client_central: float | None = None,
        edge_central: float | None = None,
    ) -> "Scenario":
        """Copy with some capabilities replaced (symmetric links for replaced rates)."""
        client, edge, central = self.client, self.edge, self.central
        if client_flops is not None:
            client = replace(client, flops=client_flops)
        if edge_flops is not None:
            edge = replace(edge, flops=edge_flops)
        if central_flops is not None:
            central = replace(central, flops=central_flops)
        up = dict(client.up)
        down = dict(client.down) if client.down is not None else dict(client.up)
        if client_edge is not None:
            up[Role.EDGE] = down[Role.EDGE] = client_edge
        if client_central is not None:
            up[Role.CENTRAL] = down[Role.CENTRAL] = client_central
        client = replace(client, up=up, down=down)
        if edge_central is not None:
            edge = replace(edge, up={**edge.up, Role.CENTRAL: edge_central}, down=None)
        return replace(self, client=client, edge=edge, central=central)


def make_scenario(
    *,
    client_flops: float,
    edge_flops: float,
    central_flops: float,
    client_edge: float,
    client_central: float,
    edge_central: float,
    topology: Topology | None = None,
    schedule: str = "parallel",
) -> Scenario:
    """Scenario with symmetric links."""
    sc = Scenario(
        client=EntitySpec(Role.CLIENT, client_flops, {Role.EDGE: client_edge, Role.CENTRAL: client_central}),
        edge=EntitySpec(Role.EDGE, edge_flops, {Role.CENTRAL: edge_central}),
        central=EntitySpec(Role.CENTRAL, central_flops, {}),
        topology=topology or Topology(),
        schedule=schedule,
    )
    sc.validate()
    return sc
