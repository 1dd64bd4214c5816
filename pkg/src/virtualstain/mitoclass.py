"""Mitosis classifiers for the four training scenarios.

* ``baseline``: real H&E patches.
* ``synthetic_paired`` / ``synthetic_unpaired``: PHH3 patches translated to H&E
  by the conditional or the cycle GAN, labelled from PHH3.
* ``gan_features``: deep generator features of real H&E patches, labelled from
  their aligned PHH3 counterparts.

All scenarios are evaluated on real H&E (or its features) at the raw class
imbalance.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .domain import (
    ClassRatioConfig,
    DatasetManifest,
    EpochRecord,
    Patch,
    SampleRecord,
    Split,
    StainDomain,
    TrainingTrace,
)
from .ganlab import GeneratorRunner, PreconditionError, TrainingDivergedError
from .nets import (
    BaselineClassifierSpec,
    Checkpoint,
    ShapeMismatchError,
    ClassifierSpec,
    FeatureClassifierSpec,
    build,
    classifier_logits,
    fingerprint,
    probabilities_from_logits,
    to_tensor,
)
from .stainprep import N_DIHEDRAL, augment_array, rebalance

log = logging.getLogger(__name__)


class Scenario(str, Enum):
    BASELINE = "baseline"
    SYNTHETIC_PAIRED = "synthetic_paired"
    SYNTHETIC_UNPAIRED = "synthetic_unpaired"
    GAN_FEATURES = "gan_features"

    @property
    def uses_gan(self) -> bool:
        return self is not Scenario.BASELINE


ALL_SCENARIOS = tuple(s.value for s in Scenario)


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: Scenario
    source_checkpoint: Optional[str] = None
    ratio: ClassRatioConfig = ClassRatioConfig()
    augmentation: bool = True
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 2e-4
    seed: int = 0
    checkpoint_interval: int = 10

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        if self.scenario.uses_gan and not self.source_checkpoint:
            raise ValueError(f"scenario {self.scenario.value} needs a source_checkpoint")
        if not self.scenario.uses_gan and self.source_checkpoint:
            raise ValueError("the baseline scenario must not use a GAN checkpoint")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def spec_for(scenario: Scenario | str) -> ClassifierSpec:
    if Scenario(scenario) is Scenario.GAN_FEATURES:
        return FeatureClassifierSpec()
    return BaselineClassifierSpec()


@dataclass
class TrainingSet:
    """Un-augmented inputs with labels and loss weights.

    ``augmenter(indices, op_ids)`` returns transformed inputs for the given
    samples; it is None when augmentation is off.
    """

    inputs: list[np.ndarray]
    labels: np.ndarray
    weights: np.ndarray
    ids: list[str]
    augmenter: Optional[Callable[[Sequence[int], Sequence[int]], list[np.ndarray]]] = None

    def __len__(self):
        return len(self.inputs)

    def __iter__(self):
        return iter(zip(self.inputs, self.labels, self.weights))

    def batch(self, indices: Sequence[int], ops: Sequence[int]) -> np.ndarray:
        if self.augmenter is None or not any(ops):
            return np.stack([self.inputs[i] for i in indices])
        return np.stack(self.augmenter(indices, ops))


def _pixel_augmenter(inputs: list[np.ndarray]):
    def aug(indices, ops):
        return [augment_array(inputs[i], op) for i, op in zip(indices, ops)]
    return aug


class _FeatureAugmenter:
    """Features of dihedrally transformed H&E patches, computed on demand."""

    def __init__(self, runner: GeneratorRunner, patches: list[Patch], base: list[np.ndarray]):
        self.runner = runner
        self.patches = patches
        self.cache = {(i, 0): f for i, f in enumerate(base)}

    def __call__(self, indices, ops):
        missing = sorted({(i, op) for i, op in zip(indices, ops)} - set(self.cache))
        if missing:
            aug = [self.patches[i].with_pixels(augment_array(self.patches[i].pixels, op)) for i, op in missing]
            for key, fmap in zip(missing, self.runner.features(aug)):
                self.cache[key] = fmap.values
        return [self.cache[(i, op)] for i, op in zip(indices, ops)]


def _load_runner(config: ScenarioConfig, source: StainDomain, target: StainDomain) -> GeneratorRunner:
    runner = GeneratorRunner(Checkpoint.load(config.source_checkpoint))
    if (runner.source, runner.target) != (source, target):
        raise PreconditionError(
            f"scenario {config.scenario.value} needs a {source.value}->{target.value} generator, "
            f"got {runner.source.value}->{runner.target.value}"
        )
    return runner


def _require_pairs(records: Sequence[SampleRecord]) -> None:
    missing = [r.patch_ref for r in records if r.paired_ref is None]
    if missing:
        raise PreconditionError(
            f"gan_features labels come from aligned PHH3 counterparts; {len(missing)} record(s) "
            f"have no paired_ref, e.g. {missing[0]}"
        )


def build_training_set(manifest: DatasetManifest, config: ScenarioConfig) -> TrainingSet:
    """Rebalanced, weighted classifier inputs for one scenario (cls_train split)."""
    scenario = config.scenario
    if scenario is Scenario.GAN_FEATURES:
        he_records = manifest.select(stain=StainDomain.HE, split=Split.CLS_TRAIN)
        if not he_records:
            raise PreconditionError("cls_train split has no H&E records")
        _require_pairs(he_records)
        counterparts = [manifest.lookup(r.paired_ref) for r in he_records]
        chosen_ph, weights = rebalance(counterparts, config.ratio, config.seed)
        chosen = [manifest.lookup(r.paired_ref) for r in chosen_ph]
        labels = np.array([r.label.is_positive for r in chosen_ph], dtype=np.float64)
        runner = _load_runner(config, StainDomain.HE, StainDomain.PHH3)
        patches = [manifest.load_patch(r) for r in chosen]
        inputs = [f.values for f in runner.features(patches)]
        augmenter = _FeatureAugmenter(runner, patches, inputs) if config.augmentation else None
        return TrainingSet(inputs, labels, weights, [r.patch_ref for r in chosen], augmenter)

    stain = StainDomain.HE if scenario is Scenario.BASELINE else StainDomain.PHH3
    records = manifest.select(stain=stain, split=Split.CLS_TRAIN)
    if not records:
        raise PreconditionError(f"cls_train split has no {stain.value} records")
    chosen, weights = rebalance(records, config.ratio, config.seed)
    labels = np.array([r.label.is_positive for r in chosen], dtype=np.float64)
    patches = [manifest.load_patch(r) for r in chosen]
    if scenario.uses_gan:
        # Translated once, offline; labels stay those of the PHH3 source.
        patches = _load_runner(config, StainDomain.PHH3, StainDomain.HE).translate(patches)
    inputs = [p.pixels.astype(np.float32) for p in patches]
    augmenter = _pixel_augmenter(inputs) if config.augmentation else None
    return TrainingSet(inputs, labels, weights, [r.patch_ref for r in chosen], augmenter)


@dataclass
class TestSet:
    inputs: list[np.ndarray]
    labels: np.ndarray
    ids: list[str]

    def __len__(self):
        return len(self.inputs)


def build_test_set(manifest: DatasetManifest, config: ScenarioConfig) -> TestSet:
    """All H&E test records at the raw imbalance; no rebalancing is applied."""
    records = manifest.select(stain=StainDomain.HE, split=Split.TEST)
    if not records:
        raise PreconditionError("test split has no H&E records")
    patches = [manifest.load_patch(r) for r in records]
    ids = [r.patch_ref for r in records]
    if config.scenario is Scenario.GAN_FEATURES:
        _require_pairs(records)
        labels = np.array([manifest.lookup(r.paired_ref).label.is_positive for r in records], dtype=np.float64)
        runner = _load_runner(config, StainDomain.HE, StainDomain.PHH3)
        inputs = [f.values for f in runner.features(patches)]
    else:
        labels = np.array([r.label.is_positive for r in records], dtype=np.float64)
        inputs = [p.pixels.astype(np.float32) for p in patches]
    return TestSet(inputs, labels, ids)


def weighted_bce(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    per = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    return (weights * per).sum() / weights.sum()


def input_statistics(inputs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over a list of HWC inputs."""
    chans = np.asarray(inputs[0]).shape[-1]
    n = sum(np.asarray(x).size // chans for x in inputs)
    mean = sum(np.asarray(x, dtype=np.float64).reshape(-1, chans).sum(0) for x in inputs) / n
    var = sum(((np.asarray(x, dtype=np.float64).reshape(-1, chans) - mean) ** 2).sum(0) for x in inputs) / n
    std = np.sqrt(var)
    return mean, np.where(std < 1e-6, 1.0, std)


def _standardize(x: np.ndarray, stats) -> np.ndarray:
    if stats is None:
        return x
    mean, std = stats
    return ((np.asarray(x, dtype=np.float64) - mean) / std).astype(np.float32)


def _stats_from_meta(meta: dict):
    if "input_mean" not in meta:
        return None
    return np.asarray(meta["input_mean"]), np.asarray(meta["input_std"])


def _logits(model, spec, inputs, stats, chunk: int = 64) -> np.ndarray:
    out = [classifier_logits(model, spec, [_standardize(x, stats) for x in inputs[i:i + chunk]])
           for i in range(0, len(inputs), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def _full_loss(model, spec, tset: TrainingSet, stats) -> float:
    logits = torch.from_numpy(_logits(model, spec, tset.inputs, stats))
    return float(weighted_bce(logits, torch.from_numpy(tset.labels), torch.from_numpy(tset.weights)))


def train_classifier(
    training_set: TrainingSet,
    spec: ClassifierSpec,
    config: ScenarioConfig,
    out_dir: str | Path | None = None,
) -> tuple[Checkpoint, TrainingTrace]:
    """Minimize weighted binary cross-entropy with Adam.

    Checkpoints are kept every ``checkpoint_interval`` epochs and at the last
    epoch, on disk if ``out_dir`` is given and in ``trace.snapshots`` otherwise.
    """
    if len(np.unique(training_set.labels)) < 2:
        raise PreconditionError("training set needs both classes")
    model = build(spec, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    # Inputs are standardized per channel with training-set statistics; the
    # generator features are otherwise ~5x the scale of image intensities.
    stats = input_statistics(training_set.inputs)
    meta = {"scenario": config.scenario.value, "input_mean": stats[0].tolist(), "input_std": stats[1].tolist()}

    trace = TrainingTrace()
    model.eval()
    trace.initial_loss = _full_loss(model, spec, training_set, stats)
    n = len(training_set)
    labels = torch.from_numpy(training_set.labels).float()
    weights = torch.from_numpy(training_set.weights).float()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(n)
        ops = rng.integers(0, N_DIHEDRAL, size=n) if config.augmentation else np.zeros(n, dtype=int)
        loss_sum, correct = 0.0, 0
        for step, i in enumerate(range(0, n, config.batch_size)):
            idx = order[i:i + config.batch_size]
            x = to_tensor(_standardize(training_set.batch(idx, ops[idx]), stats))
            logits = model(x)
            loss = weighted_bce(logits, labels[idx], weights[idx])
            value = float(loss.detach())
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite classifier loss ({value}) at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += value * len(idx)
            correct += int(((logits.detach() > 0).float() == labels[idx]).sum())
        trace.add(EpochRecord(epoch, {"loss": loss_sum / n, "accuracy": correct / n}, time.perf_counter() - t0))
        log.info("%s epoch %d: loss %.4f acc %.3f", config.scenario.value, epoch, loss_sum / n, correct / n)
        if epoch % config.checkpoint_interval == 0 or epoch == config.epochs:
            model.eval()
            ck = Checkpoint.from_module(spec, model, {**meta, "epoch": epoch})
            if out_dir is not None:
                path = Path(out_dir) / f"classifier_epoch{epoch:03d}.npz"
                ck.save(path)
                trace.checkpoints[epoch] = str(path)
            else:
                trace.snapshots[epoch] = ck
    model.eval()
    final = Checkpoint.from_module(spec, model, {**meta, "epoch": config.epochs})
    if out_dir is not None:
        trace.write(Path(out_dir) / "trace.jsonl")
    return final, trace


def predict(checkpoint: Checkpoint, spec: ClassifierSpec, inputs: Sequence) -> np.ndarray:
    """Mitosis probabilities in (0, 1), one per input, in input order."""
    if checkpoint.fingerprint != fingerprint(spec):
        raise ShapeMismatchError("classifier weights were trained for a different architecture")
    model = checkpoint.to_module()
    return probabilities_from_logits(_logits(model, spec, list(inputs), _stats_from_meta(checkpoint.meta)))
