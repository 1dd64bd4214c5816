"""Experiment configuration, run-directory layout and the stage graph.

A run directory is ``<run_root>/run-<digest>``, where the digest is taken
over the resolved configuration. Each stage writes its outputs under the run
directory together with a ``_done.json`` marker; a stage whose marker and
outputs exist is skipped unless forced.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import __version__
from .domain import (
    ClassRatioConfig,
    DatasetManifest,
    Label,
    SampleRecord,
    Split,
    StainDomain,
    save_image,
)
from .evalkit import EvalReport, default_thresholds, render_report, sweep, write_predictions
from .ganlab import GeneratorRunner, PairedGanConfig, UnpairedGanConfig, train_paired, train_unpaired
from .mitoclass import (
    ALL_SCENARIOS,
    Scenario,
    ScenarioConfig,
    build_test_set,
    build_training_set,
    predict,
    spec_for,
    train_classifier,
)
from .nets import Checkpoint
from .phantom import PhantomConfig, generate_corpus, protocol_split_sizes
from .stainprep import (
    DEFAULT_DOH_SIGMAS,
    DEFAULT_STAIN_VECTORS,
    StainMatrix,
    detect_negative_candidates,
    detect_positive_candidates,
    rebalance,
)

log = logging.getLogger(__name__)

RUN_ROOT_ENV = "VIRTUALSTAIN_RUN_ROOT"


class ConfigError(ValueError):
    pass


class MissingArtifactError(RuntimeError):
    pass


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class CorpusConfig:
    n_slides: int = 18
    patches_per_slide: int = 120
    # None scales the 5/9/4 protocol split to n_slides.
    split_sizes: Optional[tuple[int, int, int]] = None

    def __post_init__(self):
        if self.n_slides < 3 or self.patches_per_slide < 1:
            raise ConfigError("corpus needs at least 3 slides and 1 patch per slide")
        if self.split_sizes is not None and (
            len(self.split_sizes) != 3 or sum(self.split_sizes) != self.n_slides or min(self.split_sizes) < 1
        ):
            raise ConfigError(f"split_sizes {self.split_sizes} must be three positive counts summing to {self.n_slides}")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return tuple(self.split_sizes) if self.split_sizes else protocol_split_sizes(self.n_slides)


@dataclass(frozen=True)
class PrepConfig:
    stain_vectors: tuple[tuple[float, ...], ...] = tuple(map(tuple, DEFAULT_STAIN_VECTORS.tolist()))
    dab_threshold: float = 0.3
    min_area: int = 10
    doh_sigmas: tuple[float, ...] = DEFAULT_DOH_SIGMAS
    doh_threshold: float = 0.002
    exclusion_radius: float = 10.0
    min_separation: float = 10.0
    # A detection this close to the patch center labels the sample.
    match_radius: float = 5.0


@dataclass(frozen=True)
class ClassifierConfig:
    scenarios: tuple[str, ...] = ALL_SCENARIOS
    full_ratio: float = 60.0
    train_ratio: int = 5
    oversample_weight: float = 5.0
    augmentation: bool = True
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 2e-4
    checkpoint_interval: int = 10
    seed: int = 0

    def __post_init__(self):
        bad = [s for s in self.scenarios if s not in ALL_SCENARIOS]
        if bad:
            raise ConfigError(f"unknown scenario(s) {bad}; choose from {ALL_SCENARIOS}")

    @property
    def ratio(self) -> ClassRatioConfig:
        return ClassRatioConfig(self.full_ratio, self.train_ratio, self.oversample_weight)


@dataclass(frozen=True)
class EvalConfig:
    thresholds: Optional[tuple[float, ...]] = None
    preview_count: int = 8

    @property
    def grid(self) -> list[float]:
        return list(self.thresholds) if self.thresholds is not None else default_thresholds()


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    phantom: PhantomConfig = PhantomConfig()
    corpus: CorpusConfig = CorpusConfig()
    prep: PrepConfig = PrepConfig()
    gan_paired: PairedGanConfig = PairedGanConfig()
    gan_unpaired: UnpairedGanConfig = UnpairedGanConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    eval: EvalConfig = EvalConfig()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# Offsets used to derive per-component seeds from the global seed when a
# section does not set its own.
_SEED_OFFSETS = {"phantom": 0, "gan_paired": 101, "gan_unpaired": 202, "classifier": 303}


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _from_dict(tp, value, where)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp in (int, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
    return value


def _from_dict(cls, data: dict, where: str = "config"):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(data: dict | None = None, seed: Optional[int] = None) -> ExperimentConfig:
    """Resolve a (possibly partial) config mapping; unknown keys are errors."""
    data = json.loads(json.dumps(data or {}))
    if seed is not None:
        data["seed"] = seed
    base = int(data.get("seed", 0))
    for section, offset in _SEED_OFFSETS.items():
        sec = data.setdefault(section, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"config.{section}: expected a mapping")
        sec.setdefault("seed", base + offset)
    return _from_dict(ExperimentConfig, data)


def read_config(path: str | Path | None, seed: Optional[int] = None, overrides: dict | None = None) -> ExperimentConfig:
    import yaml

    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
    for section, values in (overrides or {}).items():
        if isinstance(values, dict):
            data.setdefault(section, {}).update(values)
        else:
            data[section] = values
    return load_config(data, seed)


# ---------------------------------------------------------------- run directory


@dataclass
class Run:
    config: ExperimentConfig
    root: Path

    @classmethod
    def open(cls, config: ExperimentConfig, run_root: str | Path | None = None) -> "Run":
        base = Path(run_root or os.environ.get(RUN_ROOT_ENV, "runs"))
        root = base / f"run-{config.digest()[:16]}"
        run = cls(config, root)
        run.stamp(root)
        return run

    def provenance(self) -> dict:
        return {"code_version": __version__, "config_digest": self.config.digest(), "config": self.config.to_dict()}

    def stamp(self, directory: Path) -> None:
        """Drop the resolved config and code version into an artifact directory."""
        directory.mkdir(parents=True, exist_ok=True)
        prov = directory / "provenance.json"
        if not prov.exists():
            prov.write_text(json.dumps(self.provenance(), indent=1, sort_keys=True) + "\n")

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def marker(self, key: str) -> Path:
        return self.root / "_stages" / f"{key.replace(':', '__')}.json"

    def is_done(self, key: str) -> bool:
        m = self.marker(key)
        if not m.exists():
            return False
        outputs = json.loads(m.read_text())["outputs"]
        return all((self.root / o).exists() for o in outputs)

    def was_run(self, key: str) -> bool:
        return self.marker(key).exists()

    def mark_done(self, key: str, outputs: Sequence[Path]) -> None:
        m = self.marker(key)
        m.parent.mkdir(parents=True, exist_ok=True)
        rel = [str(Path(o).relative_to(self.root)) for o in outputs]
        for d in {Path(o).parent for o in outputs}:
            self.stamp(d)
        m.write_text(json.dumps({"stage": key, "outputs": rel}, indent=1) + "\n")

    def outputs(self, key: str) -> list[Path]:
        return [self.root / o for o in json.loads(self.marker(key).read_text())["outputs"]]


# ---------------------------------------------------------------- stages


def _need(run: Run, stage: str, upstream: str, what: str) -> None:
    if not run.was_run(upstream):
        cmd = upstream.split(":")[0]
        raise MissingArtifactError(
            f"stage '{stage}' needs {what} produced by '{cmd}'; run `virtualstain {cmd}` first"
        )


def _stage_phantom(run: Run, **_) -> list[Path]:
    cfg = run.config
    out = run.path("phantom")
    sizes = cfg.corpus.sizes
    log.info("phantom corpus: %d slides x %d patches, split sizes (gan_train, cls_train, test) = %s",
             cfg.corpus.n_slides, cfg.corpus.patches_per_slide, tuple(sizes))
    generate_corpus(cfg.phantom, cfg.corpus.n_slides, cfg.corpus.patches_per_slide, out, sizes)
    return [out / "manifest.jsonl"]


def _nearest(centers, point) -> float:
    if not centers:
        return np.inf
    c = np.asarray(centers, dtype=np.float64)
    return float(np.min(np.hypot(c[:, 0] - point[0], c[:, 1] - point[1])))


def _stage_candidates(run: Run, **_) -> list[Path]:
    """Reference-standard labels: DAB candidates in PHH3, DoH cell bodies in H&E."""
    _need(run, "candidates", "phantom", "the phantom corpus")
    prep = run.config.prep
    stains = StainMatrix.from_vectors(prep.stain_vectors)
    src = DatasetManifest.read(run.path("phantom", "manifest.jsonl"))
    out_dir = run.path("candidates")
    out_dir.mkdir(parents=True, exist_ok=True)
    rel = os.path.relpath(src.root, out_dir)

    records, detections = [], []
    agreement = {"tp": 0, "fp": 0, "fn": 0, "tn": 0, "dropped": 0}
    for he_rec in src.select(stain=StainDomain.HE):
        ph_rec = src.lookup(he_rec.paired_ref)
        he, ph = src.load_patch(he_rec), src.load_patch(ph_rec)
        pos = detect_positive_candidates(ph, stains, prep.dab_threshold, prep.min_area, prep.min_separation)
        neg = detect_negative_candidates(he, pos, prep.doh_sigmas, prep.doh_threshold,
                                         prep.exclusion_radius, prep.min_separation)
        mid = (he.shape[0] // 2, he.shape[1] // 2)
        truth = he_rec.label.is_positive
        if _nearest(pos.centers, mid) <= prep.match_radius:
            label = Label.MITOSIS
        elif _nearest(neg.centers, mid) <= prep.match_radius:
            label = Label.NON_MITOSIS
        else:
            agreement["dropped"] += 1
            continue
        key = ("t" if label.is_positive == truth else "f") + ("p" if label.is_positive else "n")
        agreement[key] += 1
        he_ref, ph_ref = f"{rel}/{he_rec.patch_ref}", f"{rel}/{ph_rec.patch_ref}"
        records.append(SampleRecord(he_ref, label, StainDomain.HE, he_rec.split, he_rec.source_id, he_rec.center, ph_ref))
        records.append(SampleRecord(ph_ref, label, StainDomain.PHH3, ph_rec.split, ph_rec.source_id, ph_rec.center, he_ref))
        detections.append({
            "pair": he_rec.patch_ref,
            "positives": [[*d.center, d.score] for d in pos.detections],
            "negatives": [[*d.center, d.score] for d in neg.detections],
        })
    manifest = DatasetManifest(records, out_dir)
    paths = [manifest.write(out_dir / "manifest.jsonl")]
    det_path = out_dir / "detections.jsonl"
    det_path.write_text("".join(json.dumps(d) + "\n" for d in detections))
    summary = out_dir / "summary.json"
    summary.write_text(json.dumps({"agreement_with_phantom_truth": agreement}, indent=1) + "\n")
    log.info("reference standard vs phantom truth: %s", agreement)
    return paths + [det_path, summary]


def reference_manifest(run: Run) -> DatasetManifest:
    return DatasetManifest.read(run.path("candidates", "manifest.jsonl"))


def _stage_rebalance(run: Run, **_) -> list[Path]:
    _need(run, "rebalance", "candidates", "the reference-standard manifest")
    cfg = run.config.classifier
    manifest = reference_manifest(run)
    out = run.path("rebalance")
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for stain in (StainDomain.HE, StainDomain.PHH3):
        recs = manifest.select(stain=stain, split=Split.CLS_TRAIN)
        chosen, weights = rebalance(recs, cfg.ratio, cfg.seed)
        p = out / f"cls_train_{stain.value.lower()}.jsonl"
        with open(p, "w") as fh:
            for r, w in zip(chosen, weights):
                fh.write(json.dumps({**r.to_dict(), "weight": float(w)}) + "\n")
        paths.append(p)
    return paths


_PAIRED_DIRS = {
    ("PHH3", "HE"): "gan_paired_phh3_to_he",
    ("HE", "PHH3"): "gan_paired_he_to_phh3",
}


def needed_paired_directions(config: ExperimentConfig) -> list[tuple[str, str]]:
    dirs = []
    if Scenario.SYNTHETIC_PAIRED.value in config.classifier.scenarios:
        dirs.append(("PHH3", "HE"))
    if Scenario.GAN_FEATURES.value in config.classifier.scenarios:
        dirs.append(("HE", "PHH3"))
    return dirs


def _stage_gan_paired(run: Run, direction: tuple[str, str], **_) -> list[Path]:
    _need(run, "gan-train-paired", "candidates", "the reference-standard manifest")
    out = run.path(_PAIRED_DIRS[tuple(direction)])
    ck, trace = train_paired(reference_manifest(run), direction, run.config.gan_paired, out)
    return [ck.save(out / "generator_final.npz"), out / "trace.jsonl"]


def _stage_gan_unpaired(run: Run, **_) -> list[Path]:
    _need(run, "gan-train-unpaired", "candidates", "the reference-standard manifest")
    out = run.path("gan_unpaired")
    ck_hp, ck_ph, trace = train_unpaired(reference_manifest(run), run.config.gan_unpaired, out)
    return [ck_hp.save(out / "generator_he_to_phh3_final.npz"),
            ck_ph.save(out / "generator_phh3_to_he_final.npz"), out / "trace.jsonl"]


def scenario_checkpoint(run: Run, scenario: Scenario) -> Optional[Path]:
    return {
        Scenario.BASELINE: None,
        Scenario.SYNTHETIC_PAIRED: run.path(_PAIRED_DIRS[("PHH3", "HE")], "generator_final.npz"),
        Scenario.SYNTHETIC_UNPAIRED: run.path("gan_unpaired", "generator_phh3_to_he_final.npz"),
        Scenario.GAN_FEATURES: run.path(_PAIRED_DIRS[("HE", "PHH3")], "generator_final.npz"),
    }[scenario]


def _gan_stage_of(scenario: Scenario) -> str:
    if scenario is Scenario.SYNTHETIC_UNPAIRED:
        return "gan-train-unpaired"
    if scenario is Scenario.SYNTHETIC_PAIRED:
        return "gan-train-paired:PHH3-HE"
    return "gan-train-paired:HE-PHH3"


def scenario_config(run: Run, scenario: Scenario | str) -> ScenarioConfig:
    scenario = Scenario(scenario)
    c = run.config.classifier
    ck = scenario_checkpoint(run, scenario)
    return ScenarioConfig(
        scenario=scenario,
        source_checkpoint=str(ck) if ck is not None else None,
        ratio=c.ratio,
        augmentation=c.augmentation,
        epochs=c.epochs,
        batch_size=c.batch_size,
        learning_rate=c.learning_rate,
        seed=c.seed,
        checkpoint_interval=c.checkpoint_interval,
    )


def _stage_translate(run: Run, **_) -> list[Path]:
    """Preview of synthetic H&E from the test split (real PHH3 | synthetic | real H&E)."""
    _need(run, "translate", "candidates", "the reference-standard manifest")
    manifest = reference_manifest(run)
    k = run.config.eval.preview_count
    ph_recs = manifest.select(stain=StainDomain.PHH3, split=Split.TEST)[:k]
    out = run.path("translate")
    paths = []
    for scenario in (Scenario.SYNTHETIC_PAIRED, Scenario.SYNTHETIC_UNPAIRED):
        if scenario.value not in run.config.classifier.scenarios:
            continue
        _need(run, "translate", _gan_stage_of(scenario), f"the {scenario.value} generator")
        runner = GeneratorRunner(Checkpoint.load(scenario_checkpoint(run, scenario)))
        patches = [manifest.load_patch(r) for r in ph_recs]
        synth = runner.translate(patches)
        rows = []
        for r, p, s in zip(ph_recs, patches, synth):
            real_he = manifest.load_patch(manifest.lookup(r.paired_ref))
            rows.append(np.concatenate([p.pixels, s.pixels, real_he.pixels], axis=1))
        panel = out / f"preview_{scenario.value}.png"
        save_image(panel, np.concatenate(rows, axis=0))
        paths.append(panel)
    if not paths:
        out.mkdir(parents=True, exist_ok=True)
        note = out / "no_synthetic_scenarios.txt"
        note.write_text("no synthetic scenario configured\n")
        paths.append(note)
    return paths


def _stage_extract_features(run: Run, **_) -> list[Path]:
    _need(run, "extract-features", "candidates", "the reference-standard manifest")
    out = run.path("features")
    out.mkdir(parents=True, exist_ok=True)
    if Scenario.GAN_FEATURES.value not in run.config.classifier.scenarios:
        note = out / "not_configured.txt"
        note.write_text("gan_features scenario not configured\n")
        return [note]
    _need(run, "extract-features", _gan_stage_of(Scenario.GAN_FEATURES), "the HE->PHH3 generator")
    manifest = reference_manifest(run)
    recs = manifest.select(stain=StainDomain.HE, split=Split.TEST)[: run.config.eval.preview_count]
    runner = GeneratorRunner(Checkpoint.load(scenario_checkpoint(run, Scenario.GAN_FEATURES)))
    fmaps = runner.features([manifest.load_patch(r) for r in recs], [r.patch_ref for r in recs])
    path = out / "features_preview.npz"
    np.savez_compressed(path, values=np.stack([f.values for f in fmaps]), ids=np.array([f.origin_patch for f in fmaps]))
    return [path]


def _stage_cls_train(run: Run, scenario: str, **_) -> list[Path]:
    sc = Scenario(scenario)
    _need(run, f"cls-train:{sc.value}", "candidates", "the reference-standard manifest")
    if sc.uses_gan:
        _need(run, f"cls-train:{sc.value}", _gan_stage_of(sc), f"the generator for {sc.value}")
    cfg = scenario_config(run, sc)
    tset = build_training_set(reference_manifest(run), cfg)
    out = run.path("cls", sc.value)
    log.info("%s: %d training samples (%d mitosis)", sc.value, len(tset), int(tset.labels.sum()))
    _, trace = train_classifier(tset, spec_for(sc), cfg, out)
    return [Path(p) for p in trace.checkpoints.values()] + [out / "trace.jsonl"]


def classifier_checkpoints(run: Run, scenario: Scenario) -> dict[int, Path]:
    out = {}
    for p in sorted(run.path("cls", scenario.value).glob("classifier_epoch*.npz")):
        out[int(p.stem.replace("classifier_epoch", ""))] = p
    return out


def _stage_cls_predict(run: Run, scenario: str, **_) -> list[Path]:
    sc = Scenario(scenario)
    _need(run, f"cls-predict:{sc.value}", f"cls-train:{sc.value}", f"trained {sc.value} classifiers")
    cfg = scenario_config(run, sc)
    test = build_test_set(reference_manifest(run), cfg)
    spec = spec_for(sc)
    paths = []
    for epoch, ck_path in classifier_checkpoints(run, sc).items():
        probs = predict(Checkpoint.load(ck_path), spec, test.inputs)
        paths.append(write_predictions(run.path("predictions", sc.value, f"epoch_{epoch:03d}.tsv"),
                                       test.ids, probs, test.labels))
    return paths


def _stage_eval_sweep(run: Run, scenario: str, **_) -> list[Path]:
    sc = Scenario(scenario)
    _need(run, f"eval-sweep:{sc.value}", f"cls-predict:{sc.value}", f"{sc.value} predictions")
    epochs = classifier_checkpoints(run, sc)
    files = {e: run.path("predictions", sc.value, f"epoch_{e:03d}.tsv") for e in epochs}
    report = sweep(files, run.config.eval.grid, sc.value)
    if report.is_absent:
        log.warning("%s: no prediction files found; marked absent", sc.value)
    return [report.write(run.path("eval", f"{sc.value}.json"))]


def _stage_eval_render(run: Run, **_) -> list[Path]:
    reports = load_reports(run, require=True)
    files = render_report(list(reports.values()), run.path("report"))
    return list(files.values())


def load_reports(run: Run, require: bool = False) -> dict[str, EvalReport]:
    out = {}
    for s in run.config.classifier.scenarios:
        path = run.path("eval", f"{s}.json")
        if not path.exists():
            if require:
                _need(run, "eval-render", f"eval-sweep:{s}", f"the {s} evaluation report")
            out[s] = EvalReport(s, [], run.config.eval.grid)
            continue
        out[s] = EvalReport.read(path)
    return out


@dataclass(frozen=True)
class Stage:
    name: str
    fn: Callable[..., list[Path]]
    per_scenario: bool = False


STAGES = {
    "phantom": Stage("phantom", _stage_phantom),
    "candidates": Stage("candidates", _stage_candidates),
    "rebalance": Stage("rebalance", _stage_rebalance),
    "gan-train-paired": Stage("gan-train-paired", _stage_gan_paired),
    "gan-train-unpaired": Stage("gan-train-unpaired", _stage_gan_unpaired),
    "translate": Stage("translate", _stage_translate),
    "extract-features": Stage("extract-features", _stage_extract_features),
    "cls-train": Stage("cls-train", _stage_cls_train, per_scenario=True),
    "cls-predict": Stage("cls-predict", _stage_cls_predict, per_scenario=True),
    "eval-sweep": Stage("eval-sweep", _stage_eval_sweep, per_scenario=True),
    "eval-render": Stage("eval-render", _stage_eval_render),
}
PROTOCOL_ORDER = (
    "phantom", "candidates", "rebalance", "gan-train-paired", "gan-train-unpaired",
    "translate", "extract-features", "cls-train", "cls-predict", "eval-sweep", "eval-render",
)


@dataclass
class StageResult:
    stage: str
    status: str  # "ran" or "skipped"
    artifacts: list[Path] = field(default_factory=list)


def run_stage(
    stage_name: str,
    config: ExperimentConfig,
    run_root: str | Path | None = None,
    force: bool = False,
    scenarios: Optional[Sequence[str]] = None,
    directions: Optional[Sequence[tuple[str, str]]] = None,
) -> list[StageResult]:
    """Run one stage (for every configured scenario / GAN direction it covers)."""
    if stage_name not in STAGES:
        raise ValueError(f"unknown stage {stage_name!r}; choose from {sorted(STAGES)}")
    run = Run.open(config, run_root)
    stage = STAGES[stage_name]
    jobs: list[tuple[str, dict]] = []
    if stage.per_scenario:
        for s in scenarios or config.classifier.scenarios:
            jobs.append((f"{stage_name}:{Scenario(s).value}", {"scenario": s}))
    elif stage_name == "gan-train-paired":
        for d in directions or needed_paired_directions(config):
            d = (StainDomain(d[0]).value, StainDomain(d[1]).value)
            jobs.append((f"{stage_name}:{d[0]}-{d[1]}", {"direction": d}))
    elif stage_name == "gan-train-unpaired":
        if Scenario.SYNTHETIC_UNPAIRED.value in config.classifier.scenarios:
            jobs.append((stage_name, {}))
    else:
        jobs.append((stage_name, {}))

    results = []
    for key, kwargs in jobs:
        if not force and run.is_done(key):
            log.info("%s: up to date, skipping", key)
            results.append(StageResult(key, "skipped", run.outputs(key)))
            continue
        log.info("%s: running", key)
        outputs = stage.fn(run, **kwargs)
        run.mark_done(key, outputs)
        results.append(StageResult(key, "ran", outputs))
    return results


def reproduce_protocol(
    config: ExperimentConfig,
    run_root: str | Path | None = None,
    force: bool = False,
) -> dict[str, EvalReport]:
    """Run every stage in order and return the per-scenario reports."""
    log.info("split sizes (gan_train, cls_train, test) = %s", config.corpus.sizes)
    for name in PROTOCOL_ORDER:
        run_stage(name, config, run_root, force)
    return load_reports(Run.open(config, run_root))
