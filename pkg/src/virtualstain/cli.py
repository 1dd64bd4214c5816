"""Command-line entry point: ``virtualstain <stage> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .domain import Patch, StainDomain, load_image
from .mitoclass import ALL_SCENARIOS
from .phantom import PhantomConfig
from .pipeline import (
    RUN_ROOT_ENV,
    ConfigError,
    MissingArtifactError,
    read_config,
    reproduce_protocol,
    run_stage,
)
from .stainprep import StainMatrix, color_deconvolve

log = logging.getLogger("virtualstain")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    p.add_argument("--seed", type=int, help="global seed (derives per-component seeds)")
    p.add_argument("--force", action="store_true", help="recompute even if outputs exist")
    p.add_argument("--run-root", type=Path, help=f"run root directory (default: ${RUN_ROOT_ENV} or ./runs)")
    p.add_argument("-q", "--quiet", action="store_true")


def _phantom_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("phantom")
    g.add_argument("--patch-size", type=int)
    g.add_argument("--nuclei-per-patch", type=int, nargs=2, metavar=("MIN", "MAX"))
    g.add_argument("--mitosis-rate", type=float)
    g.add_argument("--noise-level", type=float)
    g.add_argument("--imbalance-target", type=float)
    g.add_argument("--min-nucleus-distance", type=float)
    g.add_argument("--stain-od-matrix", type=float, nargs=9, metavar="V",
                   help="H, E, DAB optical-density rows, row-major")
    g.add_argument("--n-slides", type=int)
    g.add_argument("--patches-per-slide", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="virtualstain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate the paired phantom corpus")
    _common(p)
    _phantom_flags(p)

    p = sub.add_parser("deconvolve", help="split an RGB image into stain concentration maps")
    p.add_argument("image", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output .npz (keys: hematoxylin, eosin, dab)")
    p.add_argument("--stain-vectors", type=float, nargs=9, metavar="V")
    p.add_argument("-q", "--quiet", action="store_true")

    for name, text in [
        ("candidates", "detect reference-standard mitoses and cell bodies"),
        ("rebalance", "subsample cls_train negatives and weight positives"),
        ("gan-train-unpaired", "train the cycle-consistent GAN"),
        ("translate", "render PHH3 -> synthetic H&E previews"),
        ("extract-features", "dump generator features of test H&E patches"),
        ("eval-render", "render F1 curves and the comparison table"),
    ]:
        _common(sub.add_parser(name, help=text))

    p = sub.add_parser("gan-train-paired", help="train the conditional GAN")
    _common(p)
    p.add_argument("--direction", choices=["PHH3-HE", "HE-PHH3"], action="append",
                   help="default: every direction the configured scenarios need")

    for name, text in [
        ("cls-train", "train mitosis classifiers"),
        ("cls-predict", "write per-epoch test predictions"),
        ("eval-sweep", "precision/recall/F1 over epochs and thresholds"),
    ]:
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--scenario", choices=ALL_SCENARIOS, action="append",
                       help="default: every configured scenario")

    p = sub.add_parser("reproduce", help="run the whole protocol")
    _common(p)
    _phantom_flags(p)
    return parser


def _overrides(args) -> dict:
    out: dict = {}
    phantom = {}
    for f in dataclasses.fields(PhantomConfig):
        v = getattr(args, f.name, None)
        if v is None or f.name == "seed":
            continue
        if f.name == "stain_od_matrix":
            v = np.asarray(v, dtype=np.float64).reshape(3, 3).tolist()
        phantom[f.name] = list(v) if isinstance(v, (list, tuple)) else v
    if phantom:
        out["phantom"] = phantom
    corpus = {k: getattr(args, k) for k in ("n_slides", "patches_per_slide") if getattr(args, k, None) is not None}
    if corpus:
        out["corpus"] = corpus
    return out


def _deconvolve(args) -> int:
    stains = StainMatrix.from_vectors(np.reshape(args.stain_vectors, (3, 3))) if args.stain_vectors else None
    pixels = load_image(args.image)
    conc = color_deconvolve(Patch(pixels, StainDomain.HE), stains)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(args.out, hematoxylin=conc[..., 0], eosin=conc[..., 1], dab=conc[..., 2])
    print(args.out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "deconvolve":
        return _deconvolve(args)
    try:
        config = read_config(args.config, args.seed, _overrides(args))
        if args.command == "reproduce":
            reports = reproduce_protocol(config, args.run_root, args.force)
            for name, rep in reports.items():
                best = rep.best
                print(f"{name}\t" + ("absent" if best is None else f"best F1 {best.f1:.4f} at {rep.argmax}"))
            return 0
        directions = [tuple(d.split("-")) for d in args.direction] if getattr(args, "direction", None) else None
        results = run_stage(args.command, config, args.run_root, args.force,
                            scenarios=getattr(args, "scenario", None), directions=directions)
    except (ConfigError, MissingArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for r in results:
        print(f"{r.stage}\t{r.status}")
        for a in r.artifacts:
            print(f"  {a}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
