"""Synthetic-data training runs used by the acceptance suite and ``scripts/``."""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

from .architectures import ModelSpec, build_model
from .data import SampleSet, split_dataset, synth_scenes
from .engine import Checkpoint, History, HistoryEntry, TrainConfig, evaluate, train


@dataclass
class RunResult:
    checkpoint: Checkpoint
    history: History
    train_iou: list[float]
    val_iou: list[float]
    seconds: float


def _run(spec, data, config, callback, clock) -> RunResult:
    t0 = time.perf_counter()
    model = build_model(spec)
    ckpt, hist = train(model, data, config, callback, clock=clock)
    _, tr = evaluate(model, data.train)
    va_iou = evaluate(model, data.validation)[1].iou if data.validation else []
    return RunResult(ckpt, hist, tr.iou, va_iou, time.perf_counter() - t0)


def overfit_ships(
    epochs: int = 200, seed: int = 0, callback: Callable[[HistoryEntry], None] | None = None, clock=time.perf_counter
) -> RunResult:
    """16 ship tiles at 64x64, width-1/8 modified U-Net, all scenes in training."""
    scenes = synth_scenes("ships_optical", 16, 64, seed)
    data = SampleSet(scenes, ["train"] * len(scenes), seed)
    spec = ModelSpec("modified_unet", 64, 64, 1, 2, Fraction(1, 8), seed=seed)
    config = TrainConfig(epochs=epochs, batch_size=4, lr=1e-3, loss="binary_ce", seed=seed)
    return _run(spec, data, config, callback, clock)


def generalize_ships(
    epochs: int = 120, seed: int = 0, callback: Callable[[HistoryEntry], None] | None = None, clock=time.perf_counter
) -> RunResult:
    """200 ship tiles at 128x128 split 160/40, width-1/4 modified U-Net."""
    data = split_dataset(synth_scenes("ships_optical", 200, 128, seed), Fraction(4, 5), seed)
    spec = ModelSpec("modified_unet", 128, 128, 1, 2, Fraction(1, 4), seed=seed)
    config = TrainConfig(epochs=epochs, batch_size=8, lr=1e-3, loss="binary_ce", seed=seed)
    return _run(spec, data, config, callback, clock)


def multilabel_vgg(
    epochs: int = 120, seed: int = 0, callback: Callable[[HistoryEntry], None] | None = None, clock=time.perf_counter
) -> RunResult:
    """100 five-class scenes at 96x96 split 80/20, width-1/8 VGG-UNet."""
    data = split_dataset(synth_scenes("multilabel", 100, 96, seed), Fraction(4, 5), seed)
    spec = ModelSpec("vgg_unet", 96, 96, 3, 5, Fraction(1, 8), seed=seed)
    config = TrainConfig(epochs=epochs, batch_size=4, lr=1e-3, loss="categorical_ce", seed=seed)
    return _run(spec, data, config, callback, clock)


EXPERIMENTS = {
    "overfit_ships": overfit_ships,
    "generalize_ships": generalize_ships,
    "multilabel_vgg": multilabel_vgg,
}
