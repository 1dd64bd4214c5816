import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from virtualstain.nets import Checkpoint, GeneratorSpec, build  # noqa: E402
from virtualstain.phantom import PhantomConfig, generate_corpus  # noqa: E402


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """3 slides x 12 patches, mitosis-rich so every split has both classes."""
    out = tmp_path_factory.mktemp("corpus")
    cfg = PhantomConfig(seed=7, mitosis_rate=0.3)
    return generate_corpus(cfg, n_slides=3, patches_per_slide=12, out_dir=out, split_sizes=(1, 1, 1))


def generator_checkpoint(source: str, target: str, blocks: int = 1, seed: int = 0) -> Checkpoint:
    spec = GeneratorSpec(n_residual=blocks)
    meta = {"regime": "paired", "source_stain": source, "target_stain": target}
    return Checkpoint.from_module(spec, build(spec, seed=seed), meta)


@pytest.fixture(scope="session")
def gen_dir(tmp_path_factory):
    """Untrained single-block generators saved in both directions."""
    d = tmp_path_factory.mktemp("generators")
    paths = {}
    for src, dst in (("HE", "PHH3"), ("PHH3", "HE")):
        paths[(src, dst)] = generator_checkpoint(src, dst).save(d / f"{src}_{dst}.npz")
    return paths


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
