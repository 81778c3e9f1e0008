"""Training loop (one scene per step, Adam, per-epoch decay) and evaluation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import DataError, OptimizationError, TrainingDiverged
from .metrics import SegmentationMetrics, confusion_matrix
from .network import Network, normalize_positions, prepare_geometry
from .neighbors import knn
from .optim import AdamState, adam_step, lr_decay


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    miou: float


@dataclass
class TrainingReport:
    records: List[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())


def _check_scenes(scenes, n_class):
    if not scenes:
        raise DataError("dataset is empty")
    for i, s in enumerate(scenes):
        if s.labels is None:
            raise DataError(f"scene {i} has no labels")
        if len(s.labels) and s.labels.max() >= n_class:
            raise DataError(f"scene {i} has labels outside [0, {n_class})")


def inverse_frequency_weights(scenes, n_class: int) -> np.ndarray:
    counts = np.zeros(n_class)
    for s in scenes:
        counts += np.bincount(s.labels, minlength=n_class)
    w = np.where(counts > 0, counts.sum() / np.maximum(counts, 1) / n_class, 0.0)
    return w


def step_seed(seed: int, epoch: int, position: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, position]).generate_state(1)[0])


def train(net: Network, scenes: Sequence, epochs: int, adam: Optional[AdamState] = None,
          seed: Optional[int] = None, class_weights=None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainingReport:
    """Run ``epochs`` passes over ``scenes`` (shuffled per epoch) and decay lr after each.

    Each record carries the learning rate used during that epoch, the mean
    scene loss and the mIoU of the training-mode predictions.
    """
    cfg = net.cfg
    _check_scenes(scenes, cfg.n_class)
    if epochs < 0:
        raise DataError(f"epochs must be >= 0, got {epochs}")
    adam = adam if adam is not None else AdamState()
    seed = cfg.seed if seed is None else seed
    params = net.parameters()
    first_knn = {}
    report = TrainingReport()
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(len(scenes))
        lr = adam.lr
        losses = []
        cm = np.zeros((cfg.n_class, cfg.n_class), dtype=np.int64)
        for pos, sid in enumerate(order):
            scene = scenes[sid]
            if sid not in first_knn:
                norm = normalize_positions(cfg, scene.positions)
                first_knn[sid] = knn(norm, norm, min(cfg.k, scene.n))
            s = step_seed(seed, epoch, pos)
            geo = prepare_geometry(cfg, scene.positions, s, first_neighbors=first_knn[sid])
            logits = net.forward(scene, "train", s, geometry=geo)
            loss = T.softmax_cross_entropy(logits, scene.labels, class_weights)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, scene {int(sid)}",
                                       epoch=epoch, scene=int(sid))
            net.zero_grad()
            loss.backward()
            try:
                adam_step(params, adam)
            except OptimizationError as e:
                raise TrainingDiverged(f"{e} at epoch {epoch}, scene {int(sid)}",
                                       epoch=epoch, scene=int(sid)) from e
            losses.append(value)
            cm += confusion_matrix(np.argmax(logits.data, axis=1), scene.labels, cfg.n_class)
        rec = EpochRecord(epoch, float(np.mean(losses)), lr, SegmentationMetrics.from_confusion(cm).miou)
        report.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        lr_decay(adam)
    return report


def evaluate(net: Network, scenes: Sequence) -> SegmentationMetrics:
    """Inference-mode metrics with the confusion accumulated over every point."""
    _check_scenes(scenes, net.cfg.n_class)
    cm = np.zeros((net.cfg.n_class, net.cfg.n_class), dtype=np.int64)
    for scene in scenes:
        cm += confusion_matrix(net.predict(scene), scene.labels, net.cfg.n_class)
    return SegmentationMetrics.from_confusion(cm)
