"""Run configuration: TOML documents, shipped presets, environment overrides.

Resolution order, later wins: built-in defaults, the preset named by
``extends``, the file itself, ``SPLITFED__SECTION__KEY`` environment
variables, command-line flags. Every error names the offending key path.
"""

from __future__ import annotations

import copy
import json
import math
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .aggregation import AggregatorKind
from .attack import CAPTURE_POINTS, DEFAULT_GRID, AttackSetup
from .costmodel import SETUPS
from .data import Dataset, iid_shards, read_idx, synth_blobs, synth_images, train_test_split
from .labeldp import NoiseConfig
from .protocol import NOISE_MODES, TIMING_MODES, WEIGHTINGS, SimConfig
from .scenario import SCHEDULES, EntitySpec, Method, Role, Scenario, Topology
from .split import SplitMode, SplitPlan
from .tensor import NetworkSpec, lenet, mlp

ENV_PREFIX = "SPLITFED__"

DEFAULTS: dict[str, Any] = {
    "extends": "",
    "seed": 0,
    "method": "EUSFL",
    "epochs": 10,
    "topology": {"clients_per_edge": [2, 2], "schedule": "parallel"},
    "entities": {
        "client_flops": 400e3,
        "edge_flops": 8e6,
        "central_flops": 12e6,
        "client_edge": 408e3,
        "client_central": 20e3,
        "edge_central": 12e6,
        "charge_labels": False,
    },
    "model": {"kind": "mlp", "hidden": [32, 32], "cut1": 2, "cut2": 4},
    "training": {
        "lr": 0.1,
        "batch_size": 32,
        "local_epochs": 1,
        "aggregator": "fedavg",
        "mu": 0.01,
        "alpha": 0.01,
        "freeze_aux": False,
        "weighting": "auto",
        "timing": "profile",
        "reference_setup": 1,
        "include_backward": False,
    },
    "labeldp": {"enabled": False, "epsilon": 1.0, "mode": "per_epoch"},
    "data": {
        "source": "blobs",
        "n": 1200,
        "k": 3,
        "dim": 8,
        "separation": 6.0,
        "test_fraction": 0.25,
        "image_side": 0,
        "train_images": "",
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
        "limit": 0,
    },
    "attack": {
        "k": 3,
        "dim": 8,
        "n": 1200,
        "hidden": [32, 32],
        "epochs": 2,
        "lr": 0.02,
        "batch_size": 32,
        "capture": "sfl",
        "trials": 500,
        "replicas": 5,
        "grid": list(DEFAULT_GRID),
    },
    "audit": {"epsilons": [0.5, 1.0, 2.0], "samples": 100_000, "k": 10, "weak_noise": False},
    "cost": {"setup": 1, "epochs": 10},
}

CHOICES: dict[str, tuple] = {
    "method": tuple(m.value for m in Method),
    "topology.schedule": SCHEDULES,
    "model.kind": ("mlp", "lenet"),
    "training.aggregator": tuple(a.value for a in AggregatorKind),
    "training.weighting": WEIGHTINGS,
    "training.timing": TIMING_MODES,
    "training.reference_setup": tuple(SETUPS),
    "labeldp.mode": NOISE_MODES,
    "data.source": ("blobs", "idx"),
    "attack.capture": CAPTURE_POINTS,
    "cost.setup": tuple(SETUPS),
}

POSITIVE = {
    "epochs", "entities.client_flops", "entities.edge_flops", "entities.central_flops",
    "entities.client_edge", "entities.client_central", "entities.edge_central",
    "training.lr", "training.batch_size", "training.local_epochs", "labeldp.epsilon",
    "data.n", "data.k", "data.dim", "data.separation", "attack.k", "attack.dim", "attack.n",
    "attack.epochs", "attack.lr", "attack.batch_size", "attack.trials", "attack.replicas",
    "audit.samples", "audit.k", "cost.epochs",
}  # fmt: skip


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def preset_names() -> list[str]:
    root = resources.files("splitfed") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def _read_preset(name: str) -> dict:
    if name not in preset_names():
        raise ConfigError("extends", f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    text = (resources.files("splitfed") / "presets" / f"{name}.toml").read_text(encoding="utf-8")
    return tomllib.loads(text)


def _merge(base: dict, over: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(where, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(where, "expected a table")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check_type(path: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(path, f"expected a finite number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        item = default[0] if default else 0.0
        return [_check_type(f"{path}[{i}]", item, v) for i, v in enumerate(value)]
    raise ConfigError(path, "unsupported setting")


def _validate(doc: dict, defaults: dict = DEFAULTS, path: str = "") -> dict:
    out = {}
    for key, default in defaults.items():
        where = f"{path}.{key}" if path else key
        value = doc[key]
        if isinstance(default, dict):
            out[key] = _validate(value, default, where)
            continue
        value = _check_type(where, default, value)
        if where in CHOICES and value not in CHOICES[where]:
            raise ConfigError(where, f"unknown value {value!r}; expected one of {', '.join(map(str, CHOICES[where]))}")
        if where in POSITIVE and not value > 0:
            raise ConfigError(where, f"must be > 0, got {value!r}")
        out[key] = value
    return out


def _cross_check(out: dict) -> dict:
    topo = out["topology"]["clients_per_edge"]
    if not topo or any(c < 1 for c in topo):
        raise ConfigError("topology.clients_per_edge", f"need at least one edge with >= 1 client, got {topo}")
    for where in ("model.hidden", "attack.hidden"):
        section, key = where.split(".")
        if any(h < 1 for h in out[section][key]):
            raise ConfigError(where, "layer widths must be >= 1")
    if any(b < 0 for b in out["attack"]["grid"]):
        raise ConfigError("attack.grid", "noise scales must be >= 0")
    if any(e <= 0 for e in out["audit"]["epsilons"]):
        raise ConfigError("audit.epsilons", "epsilon must be > 0")
    if out["data"]["source"] == "idx" and not (out["data"]["train_images"] and out["data"]["train_labels"]):
        raise ConfigError("data.train_images", "idx source needs train_images and train_labels")
    if out["model"]["kind"] == "lenet" and out["data"]["source"] == "blobs" and out["data"]["image_side"] != 28:
        raise ConfigError("data.image_side", "lenet needs 28x28 images; set image_side = 28")
    return out


def _parse_env_value(raw: str) -> Any:
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    """Nested dict from ``SPLITFED__SECTION__KEY=value`` variables (TOML literals; bare text is a string)."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in name[len(ENV_PREFIX) :].split("__")]
        if not all(parts):
            raise ConfigError(name, "malformed override variable")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(name, "conflicting override variables")
        node[parts[-1]] = _parse_env_value(environ[name])
    return out


def load_document(source: str | Path | None) -> dict:
    """Raw TOML from a file path, or a preset name when no such file exists."""
    if source is None:
        return {}
    p = Path(source)
    if p.is_file():
        try:
            return tomllib.loads(p.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(p), f"invalid TOML: {exc}") from None
    if str(source) in preset_names():
        return {"extends": str(source)}
    raise ConfigError(str(source), "no such config file or preset")


def resolve(
    source: str | Path | None = None,
    overrides: Mapping | None = None,
    environ: Mapping[str, str] | None = None,
) -> "RunConfig":
    doc = load_document(source)
    layered = copy.deepcopy(DEFAULTS)
    chain, name = [], doc.get("extends", "")
    while name:
        if name in chain:
            raise ConfigError("extends", f"preset cycle through {name!r}")
        chain.append(name)
        preset = _read_preset(name)
        name = preset.get("extends", "")
    for preset_name in reversed(chain):
        layered = _merge(layered, _read_preset(preset_name))
    layered = _merge(layered, doc)
    layered = _merge(layered, env_overrides(environ))
    if overrides:
        layered = _merge(layered, overrides)
    if chain:
        layered["extends"] = chain[0]
    return RunConfig(_cross_check(_validate(layered)))


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str) -> Any:
        node: Any = self.values
        for part in key.split("."):
            node = node[part]
        return node

    @property
    def seed(self) -> int:
        return self["seed"]

    @property
    def method(self) -> Method:
        return Method(self["method"])

    def lines(self) -> list[str]:
        """The resolved config as ``key = value`` lines, sorted, for output headers."""
        out = []

        def walk(node: dict, prefix: str) -> None:
            for key in sorted(node):
                where = f"{prefix}.{key}" if prefix else key
                if isinstance(node[key], dict):
                    walk(node[key], where)
                else:
                    out.append(f"{where} = {json.dumps(node[key])}")

        walk(self.values, "")
        return out

    def scenario(self) -> Scenario:
        e = self.values["entities"]
        sc = Scenario(
            client=EntitySpec(Role.CLIENT, e["client_flops"], {Role.EDGE: e["client_edge"], Role.CENTRAL: e["client_central"]}),
            edge=EntitySpec(Role.EDGE, e["edge_flops"], {Role.CENTRAL: e["edge_central"]}),
            central=EntitySpec(Role.CENTRAL, e["central_flops"], {}),
            topology=Topology(tuple(self["topology.clients_per_edge"])),
            schedule=self["topology.schedule"],
            charge_labels=e["charge_labels"],
        )
        sc.validate()
        return sc

    def noise(self, k: int) -> NoiseConfig | None:
        if not self["labeldp.enabled"]:
            return None
        return NoiseConfig(self["labeldp.epsilon"], dims=k, seed=self.seed)

    def network(self, input_dim: int, k: int) -> NetworkSpec:
        if self["model.kind"] == "lenet":
            return lenet(k, seed=self.seed)
        return mlp([input_dim, *self["model.hidden"], k], seed=self.seed)

    def plan(self, layer_count: int) -> SplitPlan | None:
        mode = self.method.split
        if mode is None:
            return None
        cut1, cut2 = self["model.cut1"], self["model.cut2"]
        plan = SplitPlan(cut1, cut2) if mode == "u_shaped" else SplitPlan(cut1, mode=SplitMode.VERTICAL)
        try:
            plan.validate(layer_count)
        except ValueError as exc:
            raise ConfigError("model.cut1", str(exc)) from None
        return plan

    def sim_config(self, net: NetworkSpec, k: int) -> SimConfig:
        t = self.values["training"]
        return SimConfig(
            method=self.method,
            plan=self.plan(len(net.layers)),
            lr=t["lr"],
            batch_size=t["batch_size"],
            local_epochs=t["local_epochs"],
            aggregator=t["aggregator"],
            mu=t["mu"],
            alpha=t["alpha"],
            freeze_aux=t["freeze_aux"],
            noise=self.noise(k),
            noise_mode=self["labeldp.mode"],
            seed=self.seed,
            timing=t["timing"],
            reference_setup=t["reference_setup"],
            include_backward=t["include_backward"],
            weighting=t["weighting"],
        )

    def datasets(self) -> tuple[list[Dataset], Dataset]:
        """Client shards and the held-out test set."""
        d = self.values["data"]
        clients = sum(self["topology.clients_per_edge"])
        if d["source"] == "idx":
            train = read_idx(d["train_images"], d["train_labels"], d["k"], "train")
            if d["limit"]:
                train = train.subset(np.arange(min(d["limit"], len(train))))
            if d["test_images"]:
                test = read_idx(d["test_images"], d["test_labels"], d["k"], "test")
            else:
                train, test = train_test_split(train, d["test_fraction"], self.seed)
        else:
            side = d["image_side"]
            if side:
                full = synth_images(d["n"], d["k"], side, self.seed)
            else:
                full = synth_blobs(d["n"], d["k"], d["dim"], self.seed, separation=d["separation"])
            train, test = train_test_split(full, d["test_fraction"], self.seed)
        return iid_shards(train, clients, self.seed), test

    def attack_setup(self, capture: str | None = None) -> AttackSetup:
        a = self.values["attack"]
        return AttackSetup(
            k=a["k"],
            dim=a["dim"],
            n=a["n"],
            hidden=tuple(a["hidden"]),
            epochs=a["epochs"],
            lr=a["lr"],
            batch_size=a["batch_size"],
            seed=self.seed,
            capture=capture or a["capture"],
        )
