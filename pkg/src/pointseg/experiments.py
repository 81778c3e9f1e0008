"""The shared synthetic toy task and the ablation table built on it."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import List, Optional, Tuple

from .aggregation import BlockConfig, LocSEConfig
from .cloud import SceneSpec, generate_dataset
from .errors import ConfigError
from .metrics import SegmentationMetrics
from .network import NetworkConfig, build_network
from .optim import AdamState
from .train import TrainingReport, evaluate, train

# desk-scale encoder widths for the toy task; the default config keeps the full schedule
TOY_WIDTHS = (16, 64, 128, 256)

ABLATIONS = {
    "full": {},
    "no_locse": {"locse": "none"},
    "max_pool": {"pooling": "max"},
    "mean_pool": {"pooling": "mean"},
    "sum_pool": {"pooling": "sum"},
    "one_unit": {"units": 1},
    "three_units": {"units": 3},
    "locse_1": {"locse": "center_only"},
    "locse_2": {"locse": "neighbor_only"},
    "locse_3": {"locse": "center_neighbor"},
    "locse_4": {"locse": "center_neighbor_dist"},
    "locse_5": {"locse": "center_neighbor_rel"},
}


@dataclass(frozen=True)
class ToyTask:
    n_points: int = 4096
    n_class: int = 3
    noise_sigma: float = 0.01
    train_scenes: int = 20
    heldout_scenes: int = 5
    train_seed: int = 0
    heldout_seed: int = 1000

    def spec(self) -> SceneSpec:
        return SceneSpec(self.n_points, self.n_class, noise_sigma=self.noise_sigma)

    def datasets(self):
        spec = self.spec()
        return (generate_dataset(spec, self.train_scenes, self.train_seed),
                generate_dataset(spec, self.heldout_scenes, self.heldout_seed))


def toy_config(seed: int = 0, **overrides) -> NetworkConfig:
    base = dict(d_in=3, n_class=3, encoder_widths=TOY_WIDTHS, seed=seed, dtype="float32")
    base.update(overrides)
    return NetworkConfig(**base)


def ablation_config(name: str, base: NetworkConfig) -> NetworkConfig:
    try:
        change = ABLATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}") from None
    block = base.block
    if "locse" in change:
        block = dataclasses.replace(block, locse=LocSEConfig(change["locse"], base.k))
    if "pooling" in change:
        block = dataclasses.replace(block, pooling=change["pooling"])
    if "units" in change:
        block = dataclasses.replace(block, units=change["units"])
    return dataclasses.replace(base, block=block)


def run_toy(cfg: NetworkConfig, epochs: int = 50, task: ToyTask = ToyTask(),
            datasets=None, lr: float = 0.01,
            on_epoch=None) -> Tuple[TrainingReport, SegmentationMetrics]:
    """Train on the task's training scenes, then score the held-out scenes."""
    train_set, heldout = datasets if datasets is not None else task.datasets()
    net = build_network(cfg)
    report = train(net, train_set, epochs, AdamState(lr=lr), on_epoch=on_epoch)
    return report, evaluate(net, heldout)
