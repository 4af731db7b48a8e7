"""Synthetic sine-vs-noise data and the desk-scale training harnesses.

Two harnesses build on the same tiny dataset:

  smoke_overfit           reduced-width 3-layer model driven to 100% train
                          accuracy, the end-to-end determinism check
  trainability_contrast   narrow 34-layer residual model with and without
                          batch normalization, comparing training loss and
                          first-to-last gradient-norm ratios at depth
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import CLIP_SAMPLES, TARGET_RATE, ClipEntry, standardize
from .tensor import RandomSource
from .training import TrainConfig, TrainResult, train

SMOKE_SEED = 7
SMOKE_EPOCHS = 50
# 1/16 of the published width keeps the smoke run in CPU-seconds territory.
SMOKE_CHANNEL_SCALE = 1.0 / 16.0
CONTRAST_CHANNEL_SCALE = 1.0 / 8.0


class SyntheticDataset:
    """In-memory stand-in for a file-backed DatasetIndex.

    Class 0 is a pure sine at a per-clip random frequency, class 1 is white
    noise; both are standardized, so the classes differ only in spectral
    shape. Separable by construction.
    """

    def __init__(self, n_clips: int = 32, seed: int = SMOKE_SEED, length: int = CLIP_SAMPLES,
                 num_classes: int = 2, fold: int = 1):
        rng = RandomSource(seed).derive(90)
        self.class_names = ["sine", "noise"] if num_classes == 2 else [
            f"class_{i}" for i in range(num_classes)
        ]
        self.entries = []
        self._clips = {}
        t = np.arange(length) / TARGET_RATE
        for i in range(n_clips):
            label = i % num_classes
            if num_classes == 2 and label == 0:
                freq = float(rng.uniform(100.0, 2000.0))
                phase = float(rng.uniform(0.0, 2 * np.pi))
                wave = np.sin(2 * np.pi * freq * t + phase)
            else:
                wave = rng.normal(0.0, 1.0, length, dtype=np.float64)
            clip_id = f"synth_{i:03d}"
            self.entries.append(ClipEntry(clip_id, None, label, fold, length / TARGET_RATE))
            self._clips[clip_id] = standardize(wave).astype(np.float32)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def load(self, entry: ClipEntry) -> np.ndarray:
        return self._clips[entry.clip_id]


@dataclass
class SmokeResult:
    reached_full_train_accuracy: bool
    epochs_run: int
    final_train_acc: float
    result: TrainResult


def smoke_overfit(seed: int = SMOKE_SEED, epochs: int = SMOKE_EPOCHS,
                  log_path=None, checkpoint_path=None) -> SmokeResult:
    """Overfit 32 sine-vs-noise clips with a reduced-width 3-layer model."""
    data = SyntheticDataset(n_clips=32, seed=seed)
    config = TrainConfig(
        arch="m3",
        epochs=epochs,
        batch_size=8,
        seed=seed,
        num_classes=2,
        channel_scale=SMOKE_CHANNEL_SCALE,
        stop_at_train_acc=1.0,
        log_path=log_path,
        checkpoint_path=checkpoint_path,
    )
    result = train(config, data)
    last = result.history[-1]
    return SmokeResult(
        reached_full_train_accuracy=last.train_acc >= 1.0,
        epochs_run=last.epoch,
        final_train_acc=last.train_acc,
        result=result,
    )


@dataclass
class ContrastResult:
    bn_history: list
    no_bn_history: list

    @property
    def bn_epoch_loss(self) -> float:
        return self.bn_history[-1].train_loss

    @property
    def no_bn_epoch_loss(self) -> float:
        return self.no_bn_history[-1].train_loss

    def no_bn_ratio_outside(self, low: float = 1e-4, high: float = 1e4) -> bool:
        """Did the no-BN run's first/last gradient-norm ratio ever leave
        [low, high]?"""
        for rec in self.no_bn_history:
            if rec.grad_ratio_min < low or rec.grad_ratio_max > high:
                return True
        return False


def trainability_contrast(seed: int = SMOKE_SEED, epochs: int = 5) -> ContrastResult:
    """Train narrow 34-layer variants with and without BN on the smoke set."""
    histories = {}
    for arch in ("m34-res", "m34-no-bn"):
        data = SyntheticDataset(n_clips=32, seed=seed)
        config = TrainConfig(
            arch=arch,
            epochs=epochs,
            batch_size=8,
            seed=seed,
            num_classes=2,
            channel_scale=CONTRAST_CHANNEL_SCALE,
        )
        histories[arch] = train(config, data).history
    return ContrastResult(
        bn_history=histories["m34-res"], no_bn_history=histories["m34-no-bn"]
    )
