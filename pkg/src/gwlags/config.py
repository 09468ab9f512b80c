"""Run configuration: one TOML file covering instances, the network and training.

Layout (every table optional)::

    preset = "desk"            # or "paper"; picks the base instance and training presets

    [deployment]               # DeploymentConfig fields; *_db / *_dbm variants accepted
    num_antennas = 8

    [instance]
    groups_per_drone = [3, 3, 3]
    time_budget = 50.0
    power_budget = 0.1

    [synthetic]                # SyntheticUtilityConfig fields
    [hgnn]                     # num_layers, hidden_dims
    [train]                    # TrainConfig fields
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace

from .channel import ConfigError, config_from_mapping, load_config_file
from .generate import PRESETS, InstanceConfig, with_drones
from .hgnn import HgnnConfig
from .trainer import TRAIN_PRESETS, TrainConfig
from .utility import SyntheticUtilityConfig

CONFIG_ENV = "GWLAGS_CONFIG"
_TOP_KEYS = {"preset", "deployment", "instance", "synthetic", "hgnn", "train"}


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    instance: InstanceConfig = field(default_factory=lambda: PRESETS["desk"]())
    hgnn: HgnnConfig = field(default_factory=HgnnConfig)
    train: TrainConfig = field(default_factory=lambda: TRAIN_PRESETS["desk"]())

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "instance": self.instance.to_dict(),
            "hgnn": {"num_layers": self.hgnn.num_layers, "hidden_dims": list(self.hgnn.hidden_dims)},
            "train": asdict(self.train),
        }


def _check_keys(table: dict, allowed, where: str) -> None:
    unknown = set(table) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def run_config_from_mapping(doc: dict, preset: str | None = None) -> RunConfig:
    _check_keys(doc, _TOP_KEYS, "config")
    name = preset or doc.get("preset", "desk")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    inst = PRESETS[name]()

    if "deployment" in doc:
        inst = replace(inst, deployment=config_from_mapping(doc["deployment"], inst.deployment))
    if "synthetic" in doc:
        _check_keys(doc["synthetic"], [f.name for f in fields(SyntheticUtilityConfig)], "[synthetic]")
        inst = replace(inst, synthetic=replace(inst.synthetic, **doc["synthetic"]))
    table = dict(doc.get("instance", {}))
    _check_keys(table, ["groups_per_drone", "time_budget", "power_budget"], "[instance]")
    gpd = table.pop("groups_per_drone", None)
    if table:
        inst = replace(inst, **{k: float(v) for k, v in table.items()})
    if gpd is not None:
        inst = with_drones(inst, gpd)
    elif len(inst.groups_per_drone) != inst.deployment.num_drones:
        raise ConfigError("num_drones changed without a matching [instance] groups_per_drone")

    hgnn_doc = doc.get("hgnn", {})
    _check_keys(hgnn_doc, ["num_layers", "hidden_dims"], "[hgnn]")
    hgnn = HgnnConfig(**hgnn_doc) if hgnn_doc else HgnnConfig()

    train_doc = doc.get("train", {})
    _check_keys(train_doc, [f.name for f in fields(TrainConfig)], "[train]")
    train = TRAIN_PRESETS[name](**train_doc)
    return RunConfig(name, inst, hgnn, train)


def load_run_config(path=None, preset: str | None = None) -> RunConfig:
    """Read ``path`` (or the file named by $GWLAGS_CONFIG); defaults when neither is set."""
    path = path or os.environ.get(CONFIG_ENV) or None
    doc = load_config_file(path) if path else {}
    return run_config_from_mapping(doc, preset)
