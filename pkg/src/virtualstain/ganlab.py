"""Paired (conditional) and unpaired (cycle-consistent) stain-translation GANs,
plus inference helpers for translation and deep-feature extraction."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .domain import DatasetManifest, EpochRecord, FeatureMap, Patch, SampleRecord, Split, StainDomain, TrainingTrace
from .nets import (
    Checkpoint,
    DiscriminatorSpec,
    GeneratorSpec,
    build,
    run_generator,
    to_tensor,
)

log = logging.getLogger(__name__)


class PreconditionError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class PairedGanConfig:
    adversarial_weight: float = 1.0
    l1_weight: float = 100.0
    epochs: int = 30
    batch_size: int = 1
    learning_rate: float = 2e-4
    beta1: float = 0.5
    seed: int = 0
    checkpoint_interval: int = 10
    adversarial_loss: str = "bce"
    # Cap on training pairs per run, and the share of them drawn from mitosis
    # records; None uses every gan_train pair as-is.
    max_samples: Optional[int] = None
    positive_fraction: Optional[float] = None
    generator_channels: int = 64
    generator_blocks: int = 9
    discriminator_channels: tuple[int, ...] = (64, 128, 256, 512)

    def __post_init__(self):
        _check_common(self)
        if self.l1_weight < 0:
            raise ValueError("l1_weight must be >= 0")


@dataclass(frozen=True)
class UnpairedGanConfig:
    adversarial_weight: float = 1.0
    cycle_weight: float = 10.0
    identity_weight: float = 0.0
    epochs: int = 30
    batch_size: int = 1
    learning_rate: float = 2e-4
    beta1: float = 0.5
    seed: int = 0
    checkpoint_interval: int = 10
    adversarial_loss: str = "lsgan"
    max_samples: Optional[int] = None
    positive_fraction: Optional[float] = None
    generator_channels: int = 64
    generator_blocks: int = 9
    discriminator_channels: tuple[int, ...] = (64, 128, 256, 512)

    def __post_init__(self):
        _check_common(self)
        if self.cycle_weight < 0 or self.identity_weight < 0:
            raise ValueError("loss weights must be >= 0")


def _check_common(cfg) -> None:
    if cfg.adversarial_weight < 0:
        raise ValueError("adversarial_weight must be >= 0")
    if cfg.epochs < 1 or cfg.batch_size < 1:
        raise ValueError("epochs and batch_size must be >= 1")
    if cfg.adversarial_loss not in ("bce", "lsgan"):
        raise ValueError(f"unknown adversarial_loss {cfg.adversarial_loss!r}")
    if cfg.positive_fraction is not None and not 0 <= cfg.positive_fraction <= 1:
        raise ValueError("positive_fraction must be in [0, 1]")


def generator_spec(cfg) -> GeneratorSpec:
    return GeneratorSpec(base_channels=cfg.generator_channels, n_residual=cfg.generator_blocks)


def _criterion(kind: str):
    return nn.BCEWithLogitsLoss() if kind == "bce" else nn.MSELoss()


def _adv(crit, logits: torch.Tensor, real: bool) -> torch.Tensor:
    target = torch.ones_like(logits) if real else torch.zeros_like(logits)
    return crit(logits, target)


def _finite(value: torch.Tensor, what: str, epoch: int, step: int) -> float:
    v = float(value.detach())
    if not np.isfinite(v):
        raise TrainingDivergedError(f"non-finite {what} ({v}) at epoch {epoch}, step {step}")
    return v


def _select(records: list[SampleRecord], max_samples, positive_fraction, rng) -> list[SampleRecord]:
    """Seeded subset; optionally enriched with mitosis records."""
    if max_samples is None or max_samples >= len(records):
        if positive_fraction is None:
            return list(records)
        max_samples = len(records)
    if positive_fraction is None:
        idx = rng.choice(len(records), size=max_samples, replace=False)
        return [records[i] for i in sorted(idx)]
    pos = [i for i, r in enumerate(records) if r.label.is_positive]
    neg = [i for i, r in enumerate(records) if not r.label.is_positive]
    n_pos = min(len(pos), int(round(positive_fraction * max_samples)))
    n_neg = min(len(neg), max_samples - n_pos)
    chosen = list(rng.choice(pos, size=n_pos, replace=False)) if n_pos else []
    chosen += list(rng.choice(neg, size=n_neg, replace=False)) if n_neg else []
    return [records[i] for i in sorted(chosen)]


def _stack(patches: Sequence[Patch]) -> np.ndarray:
    return np.stack([p.pixels for p in patches]).astype(np.float32)


def _adam(params, cfg):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, 0.999))


def _save(out_dir, name, ckpt: Checkpoint, epoch: int) -> str:
    path = Path(out_dir) / f"{name}_epoch{epoch:03d}.npz"
    ckpt.save(path)
    return str(path)


def train_paired(
    manifest: DatasetManifest,
    direction: tuple[StainDomain, StainDomain],
    config: PairedGanConfig = PairedGanConfig(),
    out_dir: str | Path | None = None,
) -> tuple[Checkpoint, TrainingTrace]:
    """Conditional GAN on aligned pairs: adversarial + ``l1_weight`` * L1.

    The discriminator objective is also scaled by ``adversarial_weight``, so
    zeroing both weights leaves every parameter untouched.
    """
    src_stain, dst_stain = StainDomain(direction[0]), StainDomain(direction[1])
    if src_stain == dst_stain:
        raise PreconditionError("translation direction must change the stain")
    pool = manifest.select(stain=src_stain, split=Split.GAN_TRAIN)
    if not pool:
        raise PreconditionError(f"no gan_train records with stain {src_stain.value}")
    unpaired = [r.patch_ref for r in manifest.select(split=Split.GAN_TRAIN) if r.paired_ref is None]
    if unpaired:
        raise PreconditionError(f"paired training needs aligned pairs; unpaired records: {unpaired[:3]}")

    rng = np.random.default_rng(config.seed)
    chosen = _select(pool, config.max_samples, config.positive_fraction, rng)
    src = _stack([manifest.load_patch(r) for r in chosen])
    dst = _stack([manifest.load_pair(r) for r in chosen])

    gspec = generator_spec(config)
    dspec = DiscriminatorSpec(conditional=True, channels=tuple(config.discriminator_channels))
    gen = build(gspec, seed=config.seed)
    disc = build(dspec, seed=config.seed + 1)
    opt_g, opt_d = _adam(gen.parameters(), config), _adam(disc.parameters(), config)
    crit = _criterion(config.adversarial_loss)
    meta = {"regime": "paired", "source_stain": src_stain.value, "target_stain": dst_stain.value}

    trace = TrainingTrace()
    n = len(src)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        gen.train(), disc.train()
        sums = np.zeros(3)
        order = rng.permutation(n)
        steps = 0
        for step, i in enumerate(range(0, n, config.batch_size)):
            idx = order[i:i + config.batch_size]
            a, b = to_tensor(src[idx]), to_tensor(dst[idx])
            fake, _ = gen(a)

            d_loss = config.adversarial_weight * 0.5 * (
                _adv(crit, disc(torch.cat([a, b], 1)), True)
                + _adv(crit, disc(torch.cat([a, fake.detach()], 1)), False)
            )
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            l1 = (fake - b).abs().mean()
            g_loss = config.adversarial_weight * _adv(crit, disc(torch.cat([a, fake], 1)), True) + config.l1_weight * l1
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            sums += [_finite(g_loss, "generator loss", epoch, step), _finite(d_loss, "discriminator loss", epoch, step),
                     _finite(l1, "L1 loss", epoch, step)]
            steps += 1
        g, d, r = sums / steps
        trace.add(EpochRecord(epoch, {"generator": g, "discriminator": d, "reconstruction": r}, time.perf_counter() - t0))
        log.info("paired %s->%s epoch %d: G %.4f D %.4f L1 %.4f", src_stain.value, dst_stain.value, epoch, g, d, r)
        if out_dir is not None and (epoch % config.checkpoint_interval == 0 or epoch == config.epochs):
            ck = Checkpoint.from_module(gspec, gen, {**meta, "epoch": epoch})
            trace.checkpoints[epoch] = _save(out_dir, "generator", ck, epoch)
            _save(out_dir, "discriminator", Checkpoint.from_module(dspec, disc, {**meta, "epoch": epoch}), epoch)

    final = Checkpoint.from_module(gspec, gen, {**meta, "epoch": config.epochs})
    if out_dir is not None:
        trace.write(Path(out_dir) / "trace.jsonl")
    return final, trace


def _gen_out(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    out = model(x)
    return out[0] if isinstance(out, tuple) else out


def cycle_consistency_loss(g_ab: nn.Module, g_ba: nn.Module, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute round-trip reconstruction error over both domains."""
    rec_a = _gen_out(g_ba, _gen_out(g_ab, a))
    rec_b = _gen_out(g_ab, _gen_out(g_ba, b))
    return 0.5 * ((rec_a - a).abs().mean() + (rec_b - b).abs().mean())


def train_unpaired(
    manifest: DatasetManifest,
    config: UnpairedGanConfig = UnpairedGanConfig(),
    out_dir: str | Path | None = None,
) -> tuple[Checkpoint, Checkpoint, TrainingTrace]:
    """Cycle-consistent GAN on independently shuffled H&E and PHH3 sets.

    Only ``patch_ref`` is read from the records; alignment is never used.
    Returns (HE->PHH3 generator, PHH3->HE generator, trace).
    """
    he_pool = manifest.select(stain=StainDomain.HE, split=Split.GAN_TRAIN)
    ph_pool = manifest.select(stain=StainDomain.PHH3, split=Split.GAN_TRAIN)
    if not he_pool or not ph_pool:
        raise PreconditionError("unpaired training needs gan_train records of both stains")

    rng = np.random.default_rng(config.seed)
    # HE selection cannot use labels without alignment, so it is uniform.
    he_chosen = _select(he_pool, config.max_samples, None, rng)
    ph_chosen = _select(ph_pool, config.max_samples, config.positive_fraction, rng)
    he = _stack([manifest.load_patch(r) for r in he_chosen])
    ph = _stack([manifest.load_patch(r) for r in ph_chosen])

    gspec = generator_spec(config)
    dspec = DiscriminatorSpec(conditional=False, channels=tuple(config.discriminator_channels))
    g_hp, g_ph = build(gspec, seed=config.seed), build(gspec, seed=config.seed + 1)
    d_he, d_ph = build(dspec, seed=config.seed + 2), build(dspec, seed=config.seed + 3)
    opt_g = _adam(list(g_hp.parameters()) + list(g_ph.parameters()), config)
    opt_d = _adam(list(d_he.parameters()) + list(d_ph.parameters()), config)
    crit = _criterion(config.adversarial_loss)
    meta_hp = {"regime": "unpaired", "source_stain": "HE", "target_stain": "PHH3"}
    meta_ph = {"regime": "unpaired", "source_stain": "PHH3", "target_stain": "HE"}

    trace = TrainingTrace()
    n = min(len(he), len(ph))
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(3)
        order_he, order_ph = rng.permutation(len(he))[:n], rng.permutation(len(ph))[:n]
        steps = 0
        for step, i in enumerate(range(0, n, config.batch_size)):
            a = to_tensor(he[order_he[i:i + config.batch_size]])
            b = to_tensor(ph[order_ph[i:i + config.batch_size]])
            fake_b, _ = g_hp(a)
            fake_a, _ = g_ph(b)
            rec_a, _ = g_ph(fake_b)
            rec_b, _ = g_hp(fake_a)
            cyc = 0.5 * ((rec_a - a).abs().mean() + (rec_b - b).abs().mean())
            g_loss = config.adversarial_weight * (_adv(crit, d_ph(fake_b), True) + _adv(crit, d_he(fake_a), True))
            g_loss = g_loss + config.cycle_weight * 2 * cyc
            if config.identity_weight > 0:
                idt = (_gen_out(g_ph, a) - a).abs().mean() + (_gen_out(g_hp, b) - b).abs().mean()
                g_loss = g_loss + config.identity_weight * idt
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            d_loss = config.adversarial_weight * 0.5 * (
                _adv(crit, d_he(a), True) + _adv(crit, d_he(fake_a.detach()), False)
                + _adv(crit, d_ph(b), True) + _adv(crit, d_ph(fake_b.detach()), False)
            )
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            sums += [_finite(g_loss, "generator loss", epoch, step), _finite(d_loss, "discriminator loss", epoch, step),
                     _finite(cyc, "cycle loss", epoch, step)]
            steps += 1
        g, d, r = sums / steps
        trace.add(EpochRecord(epoch, {"generator": g, "discriminator": d, "reconstruction": r}, time.perf_counter() - t0))
        log.info("unpaired epoch %d: G %.4f D %.4f cycle %.4f", epoch, g, d, r)
        if out_dir is not None and (epoch % config.checkpoint_interval == 0 or epoch == config.epochs):
            trace.checkpoints[epoch] = _save(out_dir, "generator_he2phh3",
                                             Checkpoint.from_module(gspec, g_hp, {**meta_hp, "epoch": epoch}), epoch)
            _save(out_dir, "generator_phh32he", Checkpoint.from_module(gspec, g_ph, {**meta_ph, "epoch": epoch}), epoch)
            _save(out_dir, "discriminator_he", Checkpoint.from_module(dspec, d_he, {"epoch": epoch}), epoch)
            _save(out_dir, "discriminator_phh3", Checkpoint.from_module(dspec, d_ph, {"epoch": epoch}), epoch)

    ck_hp = Checkpoint.from_module(gspec, g_hp, {**meta_hp, "epoch": config.epochs})
    ck_ph = Checkpoint.from_module(gspec, g_ph, {**meta_ph, "epoch": config.epochs})
    if out_dir is not None:
        trace.write(Path(out_dir) / "trace.jsonl")
    return ck_hp, ck_ph, trace


def _direction(checkpoint: Checkpoint) -> tuple[StainDomain, StainDomain]:
    try:
        return StainDomain(checkpoint.meta["source_stain"]), StainDomain(checkpoint.meta["target_stain"])
    except KeyError as exc:
        raise PreconditionError("checkpoint does not record a stain direction") from exc


class GeneratorRunner:
    """Loaded generator for repeated inference calls."""

    def __init__(self, checkpoint: Checkpoint):
        if not isinstance(checkpoint.spec, GeneratorSpec):
            raise PreconditionError("not a generator checkpoint")
        self.source, self.target = _direction(checkpoint)
        self.model = checkpoint.to_module()

    def _pixels(self, patches: Sequence[Patch]) -> np.ndarray:
        bad = [i for i, p in enumerate(patches) if p.stain != self.source]
        if bad:
            raise PreconditionError(
                f"generator translates {self.source.value}->{self.target.value}; "
                f"patch {bad[0]} is {patches[bad[0]].stain.value}"
            )
        return _stack(patches)

    def translate(self, patches: Sequence[Patch]) -> list[Patch]:
        if not patches:
            return []
        images, _ = run_generator(self.model, self._pixels(patches))
        return [p.with_pixels(np.clip(img.astype(np.float64), 0.0, 1.0), self.target) for p, img in zip(patches, images)]

    def features(self, patches: Sequence[Patch], ids: Optional[Sequence[str]] = None) -> list[FeatureMap]:
        if not patches:
            return []
        if self.source != StainDomain.HE or self.target != StainDomain.PHH3:
            raise PreconditionError("feature extraction needs an HE->PHH3 generator")
        _, feats = run_generator(self.model, self._pixels(patches))
        ids = ids if ids is not None else [p.source_id for p in patches]
        return [FeatureMap(f, i) for f, i in zip(feats, ids)]


def translate(checkpoint: Checkpoint, patches: Sequence[Patch]) -> list[Patch]:
    """Map patches to the checkpoint's target stain, preserving order."""
    return GeneratorRunner(checkpoint).translate(patches)


def extract_features(checkpoint: Checkpoint, patches: Sequence[Patch]) -> list[FeatureMap]:
    """Deep-layer feature maps of H&E patches from an HE->PHH3 generator."""
    return GeneratorRunner(checkpoint).features(patches)
