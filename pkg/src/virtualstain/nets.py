"""Layer recipes and torch implementations of the generator, discriminator and
the two mitosis classifiers.

Classifier convolutions are unpadded, so the layer ordering is constrained by
spatial arithmetic: a stride-1 3x3 conv shrinks the side by 2 and a stride-2
one maps n to (n - 3) // 2 + 1. For the baseline, two orderings of two strided
and six plain convs leave the 14x14 map the final kernel needs; we use
s2, 1, 1, s2, 1, 1, 1, 1 (100-49-47-45-22-20-18-16-14-1). The feature
classifier uses 1, 1, 1, s2, 1, 1, 1, 1 (25-23-21-19-9-7-5-3-1). See
``layer_orderings`` for the enumeration.
"""
from __future__ import annotations

import hashlib
import io
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from .domain import FEATURE_SHAPE, PATCH_SIZE, FeatureMap, Patch, StainDomain


class ShapeMismatchError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def even_round(x: float) -> int:
    """Round to the nearest even integer (ties go up), minimum 2."""
    return max(2, int(2 * np.floor(x / 2 + 0.5)))


@dataclass(frozen=True)
class ConvLayer:
    kernel: int
    stride: int
    out_channels: int
    padding: int = 0


@dataclass(frozen=True)
class GeneratorSpec:
    """ResNet generator: 7x7 stem, two stride-2 downs, residual body, two
    transposed-conv ups and a 7x7 sigmoid head. The feature tap is the
    output of the last residual block."""

    in_channels: int = 3
    out_channels: int = 3
    base_channels: int = 64
    n_residual: int = 9
    kind: str = "generator"

    @property
    def feature_channels(self) -> int:
        return self.base_channels * 4


@dataclass(frozen=True)
class BaselineClassifierSpec:
    in_channels: int = 3
    input_size: int = PATCH_SIZE
    gamma: float = 0.6
    base_widths: tuple[int, ...] = (32, 32, 64, 64, 64, 64, 128, 128)
    strides: tuple[int, ...] = (2, 1, 1, 2, 1, 1, 1, 1)
    final_kernel: int = 14
    kind: str = "baseline_classifier"

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(even_round(self.gamma * w) for w in self.base_widths)

    @property
    def layers(self) -> list[ConvLayer]:
        convs = [ConvLayer(3, s, w) for s, w in zip(self.strides, self.widths)]
        return convs + [ConvLayer(self.final_kernel, 1, 1)]


@dataclass(frozen=True)
class FeatureClassifierSpec:
    in_channels: int = FEATURE_SHAPE[2]
    input_size: int = FEATURE_SHAPE[0]
    widths: tuple[int, ...] = (128, 128, 128, 64, 32, 32, 32, 32)
    strides: tuple[int, ...] = (1, 1, 1, 2, 1, 1, 1, 1)
    final_kernel: int = 1
    kind: str = "feature_classifier"

    @property
    def layers(self) -> list[ConvLayer]:
        convs = [ConvLayer(3, s, w) for s, w in zip(self.strides, self.widths)]
        return convs + [ConvLayer(self.final_kernel, 1, 1)]


@dataclass(frozen=True)
class DiscriminatorSpec:
    """PatchGAN discriminator; ``conditional`` doubles the input channels so
    the source patch can be stacked with the real or translated target."""

    image_channels: int = 3
    conditional: bool = False
    channels: tuple[int, ...] = (64, 128, 256, 512)
    kind: str = "discriminator"

    @property
    def in_channels(self) -> int:
        return self.image_channels * (2 if self.conditional else 1)


ClassifierSpec = Union[BaselineClassifierSpec, FeatureClassifierSpec]
AnySpec = Union[GeneratorSpec, BaselineClassifierSpec, FeatureClassifierSpec, DiscriminatorSpec]
_SPEC_TYPES = {
    "generator": GeneratorSpec,
    "baseline_classifier": BaselineClassifierSpec,
    "feature_classifier": FeatureClassifierSpec,
    "discriminator": DiscriminatorSpec,
}


def spec_to_dict(spec: AnySpec) -> dict:
    return asdict(spec)


def spec_from_dict(d: dict) -> AnySpec:
    d = dict(d)
    cls = _SPEC_TYPES[d["kind"]]
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    return cls(**d)


def fingerprint(spec: AnySpec) -> str:
    blob = json.dumps(spec_to_dict(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def conv_out(n: int, layer: ConvLayer) -> int:
    return (n + 2 * layer.padding - layer.kernel) // layer.stride + 1


def spatial_trace(spec: AnySpec, input_size: Optional[int] = None) -> list[int]:
    """Side length after every layer, computed from the recipe alone.

    For the generator the residual body contributes one entry per block and
    the feature tap is the last of those.
    """
    if isinstance(spec, GeneratorSpec):
        n = input_size or PATCH_SIZE
        trace = [n]
        for _ in range(2):
            n = (n + 2 - 3) // 2 + 1
            trace.append(n)
        trace += [n] * spec.n_residual
        for _ in range(2):
            n = (n - 1) * 2 - 2 + 3 + 1
            trace.append(n)
        trace.append(n)
        return trace
    if isinstance(spec, DiscriminatorSpec):
        n = input_size or PATCH_SIZE
        trace = []
        for _ in spec.channels:
            n = (n + 2 - 4) // 2 + 1
            trace.append(n)
        n = n + 2 - 4 + 1
        return trace + [n]
    n = input_size or spec.input_size
    trace = [n]
    for layer in spec.layers:
        n = conv_out(n, layer)
        trace.append(n)
    return trace


def layer_orderings(input_size: int, n_plain: int, n_strided: int, final_kernel: int) -> list[tuple[int, ...]]:
    """All stride orderings of unpadded 3x3 convs that end on a map the final
    kernel reduces to exactly 1x1."""
    found = set()
    for pos in itertools.combinations(range(n_plain + n_strided), n_strided):
        strides = tuple(2 if i in pos else 1 for i in range(n_plain + n_strided))
        n = input_size
        ok = True
        for s in strides:
            n = (n - 3) // s + 1
            if n < 1:
                ok = False
                break
        if ok and n - final_kernel + 1 == 1:
            found.add(strides)
    return sorted(found)


# ---------------------------------------------------------------- modules


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        c = spec.base_channels
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(spec.in_channels, c, 7), nn.InstanceNorm2d(c), nn.ReLU(inplace=True)
        )
        self.down = nn.Sequential(
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * c), nn.ReLU(inplace=True),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1), nn.InstanceNorm2d(4 * c), nn.ReLU(inplace=True),
        )
        self.body = nn.Sequential(*[ResidualBlock(4 * c) for _ in range(spec.n_residual)])
        self.up = nn.Sequential(
            nn.ConvTranspose2d(4 * c, 2 * c, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * c), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * c, c, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(c), nn.ReLU(inplace=True),
        )
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(c, spec.out_channels, 7))

    def forward(self, x):
        """Returns ``(image, features)``; features are the last residual block output."""
        feats = self.body(self.down(self.stem(x)))
        return torch.sigmoid(self.head(self.up(feats))), feats


class PatchDiscriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        layers = []
        prev = spec.in_channels
        for i, ch in enumerate(spec.channels):
            layers.append(nn.Conv2d(prev, ch, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(ch))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            prev = ch
        layers.append(nn.Conv2d(prev, 1, 4, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class ConvClassifier(nn.Module):
    """Unpadded conv stack ending in a single logit per input."""

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        layers = []
        prev = spec.in_channels
        recipe = spec.layers
        for i, layer in enumerate(recipe):
            layers.append(nn.Conv2d(prev, layer.out_channels, layer.kernel, stride=layer.stride, padding=layer.padding))
            if i < len(recipe) - 1:
                layers.append(nn.ReLU(inplace=True))
            prev = layer.out_channels
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x).flatten(1)[:, 0]


def _init_gan_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _init_classifier_weights(module: nn.Module) -> None:
    # He init keeps activation scale through the deep unpadded ReLU stack;
    # torch's default shrinks it ~3x per layer and stalls early training.
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)


def build(spec: AnySpec, seed: Optional[int] = None) -> nn.Module:
    """Instantiate the torch module for ``spec``; ``seed`` pins initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    if isinstance(spec, GeneratorSpec):
        model = ResnetGenerator(spec)
        _init_gan_weights(model)
    elif isinstance(spec, DiscriminatorSpec):
        model = PatchDiscriminator(spec)
        _init_gan_weights(model)
    elif isinstance(spec, (BaselineClassifierSpec, FeatureClassifierSpec)):
        model = ConvClassifier(spec)
        _init_classifier_weights(model)
    else:
        raise TypeError(f"unknown spec {spec!r}")
    return model


def parameter_count(spec: AnySpec) -> int:
    return sum(p.numel() for p in build(spec).parameters())


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    """Named weight arrays plus the spec they belong to.

    ``meta`` holds free-form provenance, e.g. the stain direction of a
    generator (``source_stain``/``target_stain``).
    """

    spec: AnySpec
    state: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.spec)

    @classmethod
    def from_module(cls, spec: AnySpec, module: nn.Module, meta: Optional[dict] = None) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
        return cls(spec, state, dict(meta or {}))

    def to_module(self) -> nn.Module:
        model = build(self.spec)
        expected = model.state_dict()
        if set(expected) != set(self.state):
            missing = sorted(set(expected) - set(self.state))[:3]
            extra = sorted(set(self.state) - set(expected))[:3]
            raise ShapeMismatchError(f"weights do not match spec: missing {missing}, unexpected {extra}")
        for k, v in expected.items():
            if tuple(v.shape) != tuple(self.state[k].shape):
                raise ShapeMismatchError(f"{k}: spec wants {tuple(v.shape)}, weights have {self.state[k].shape}")
        model.load_state_dict({k: torch.from_numpy(np.asarray(a)) for k, a in self.state.items()})
        model.eval()
        return model

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"spec": spec_to_dict(self.spec), "fingerprint": self.fingerprint, "meta": self.meta}
        arrays = {f"param/{k}": v for k, v in self.state.items()}
        buf = io.BytesIO()
        np.savez(buf, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            state = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        spec = spec_from_dict(header["spec"])
        if fingerprint(spec) != header["fingerprint"]:
            raise CheckpointError(f"{path}: spec fingerprint mismatch")
        return cls(spec, state, header.get("meta", {}))


# ---------------------------------------------------------------- forward passes


def to_tensor(batch: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """Stack of HxWxC arrays -> NxCxHxW tensor."""
    arr = np.asarray(batch)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def from_tensor(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


def _check_generator_input(spec: GeneratorSpec, patch: Patch) -> None:
    if patch.shape != (PATCH_SIZE, PATCH_SIZE, spec.in_channels):
        raise ShapeMismatchError(f"generator expects {PATCH_SIZE}x{PATCH_SIZE}x{spec.in_channels}, got {patch.shape}")


def run_generator(model: nn.Module, pixels: np.ndarray, batch_size: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Batched inference; returns (images NxHxWx3, features NxhxwxC)."""
    images, feats = [], []
    with torch.no_grad():
        for i in range(0, len(pixels), batch_size):
            out, f = model(to_tensor(pixels[i:i + batch_size]))
            images.append(from_tensor(out))
            feats.append(from_tensor(f))
    return np.concatenate(images), np.concatenate(feats)


def forward_generator(spec: GeneratorSpec, weights: Checkpoint, patch: Patch) -> tuple[Patch, FeatureMap]:
    """Translate one patch and return its deep feature map.

    The output is tagged with the opposite stain of the input.
    """
    if weights.fingerprint != fingerprint(spec):
        raise ShapeMismatchError("checkpoint was saved for a different generator spec")
    _check_generator_input(spec, patch)
    model = weights.to_module()
    images, feats = run_generator(model, patch.pixels[None])
    out = patch.with_pixels(np.clip(images[0].astype(np.float64), 0.0, 1.0), patch.stain.opposite)
    return out, FeatureMap(feats[0], patch.source_id)


def _classifier_input(spec: ClassifierSpec, x) -> np.ndarray:
    if isinstance(x, Patch):
        arr = x.pixels
    elif isinstance(x, FeatureMap):
        arr = x.values
    else:
        arr = np.asarray(x)
    want = (spec.input_size, spec.input_size, spec.in_channels)
    if arr.shape != want:
        raise ShapeMismatchError(f"{spec.kind} expects input {want}, got {arr.shape}")
    return arr


def classifier_logits(model: nn.Module, spec: ClassifierSpec, inputs, batch_size: int = 64) -> np.ndarray:
    arrs = [_classifier_input(spec, x) for x in inputs]
    out = []
    with torch.no_grad():
        for i in range(0, len(arrs), batch_size):
            out.append(model(to_tensor(np.stack(arrs[i:i + batch_size]))).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def probabilities_from_logits(logits: np.ndarray) -> np.ndarray:
    # Clipped so saturated logits still give probabilities strictly inside (0, 1).
    p = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    return np.clip(p, 1e-12, 1.0 - 1e-12)


def forward_classifier(spec: ClassifierSpec, weights: Checkpoint, input) -> float:
    if weights.fingerprint != fingerprint(spec):
        raise ShapeMismatchError("checkpoint was saved for a different classifier spec")
    model = weights.to_module()
    return float(probabilities_from_logits(classifier_logits(model, spec, [input]))[0])
