"""Frozen face encoders.

A single ``FrozenEncoder`` plays two roles: the encoder half of the
generator and the feature extractor behind the content and cycle losses.
It also exposes an embedding layer (``fc``) used for retrieval.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, EncoderLoadError

log = logging.getLogger(__name__)

WEIGHTS_FORMAT = "kinsynth-encoder/1"


@dataclass(frozen=True)
class EncoderArch:
    side: int = 32
    widths: tuple[int, ...] = (16, 32, 64, 64)
    embed_dim: int = 64
    n_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.side % (2 ** len(self.widths)):
            raise ConfigError(
                f"image side {self.side} is not divisible by 2**{len(self.widths)} (one pooling per block)"
            )

    @property
    def block_names(self) -> list[str]:
        return [f"block{i + 1}" for i in range(len(self.widths))]

    def block_side(self, i: int) -> int:
        return self.side // 2 ** (i + 1)


@dataclass
class FeatureStack:
    """Activations at the tapped layers, shallowest first."""

    activations: list
    layer_ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.activations)

    def __iter__(self):
        return iter(self.activations)

    def __getitem__(self, i):
        return self.activations[i]


class FaceEncoderNet(nn.Module):
    """Plain conv/ReLU/max-pool stack with an embedding layer and an identity
    classification head (the head is only used while pretraining)."""

    def __init__(self, arch: EncoderArch):
        super().__init__()
        self.arch = arch
        blocks = []
        c_in = 3
        for w in arch.widths:
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, w, 3, padding=1),
                nn.ReLU(),
                nn.Conv2d(w, w, 3, padding=1),
                nn.ReLU(),
                nn.MaxPool2d(2),
            ))
            c_in = w
        self.blocks = nn.ModuleList(blocks)
        deep = arch.block_side(len(arch.widths) - 1)
        self.fc = nn.Linear(arch.widths[-1] * deep * deep, arch.embed_dim)
        self.head = nn.Linear(arch.embed_dim, arch.n_classes)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def features(self, x):
        out = []
        for block in self.blocks:
            x = block(x)
            out.append(x)
        return out

    def embed(self, x):
        return self.fc(self.features(x)[-1].flatten(1))

    def forward(self, x):
        return self.head(F.relu(self.embed(x)))


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        a = t.detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def as_nchw(x) -> torch.Tensor:
    """Accept an (S, S, 3) FaceImage, an (N, S, S, 3) stack or an NCHW tensor."""
    if isinstance(x, torch.Tensor):
        return x if x.dim() == 4 else x.unsqueeze(0)
    a = np.asarray(x, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[-1] != 3:
        raise ValueError(f"expected (N, S, S, 3) images, got shape {a.shape}")
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))


def to_images(t: torch.Tensor) -> np.ndarray:
    """NCHW tensor -> (N, S, S, 3) float32 array."""
    return t.detach().cpu().float().numpy().transpose(0, 2, 3, 1).copy()


class FrozenEncoder(nn.Module):
    """Immutable wrapper around a pretrained ``FaceEncoderNet``.

    Parameters never require grad and the wrapped net stays in eval mode,
    but gradients still flow through it to its input.
    """

    def __init__(self, net: FaceEncoderNet, tap_layers: Sequence[str] | None = None,
                 embed_layer: str | None = "fc"):
        super().__init__()
        self.net = net
        names = net.arch.block_names
        taps = list(tap_layers) if tap_layers else names[-2:]
        unknown = [t for t in taps if t not in names]
        if unknown:
            raise ConfigError(f"unknown tap layer(s) {unknown}; encoder has {names}")
        self.tap_layers = sorted(taps, key=names.index)
        self.embed_layer = embed_layer
        for p in self.net.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.net.eval()

    @property
    def arch(self) -> EncoderArch:
        return self.net.arch

    def train(self, mode: bool = True):
        # the wrapped net never leaves eval mode
        return self

    def parameter_hash(self) -> str:
        return parameter_hash(self.net)

    def state_bytes(self) -> bytes:
        return b"".join(t.detach().cpu().contiguous().numpy().tobytes()
                        for _, t in sorted(self.net.state_dict().items()))

    def _check(self, x):
        x = as_nchw(x)
        side = self.arch.side
        if tuple(x.shape[1:]) != (3, side, side):
            raise ValueError(f"encoder expects (3, {side}, {side}) inputs, got {tuple(x.shape[1:])}")
        return x.to(next(self.net.parameters()).dtype)

    def all_features(self, x) -> list[torch.Tensor]:
        return self.net.features(self._check(x))

    def encode(self, x) -> FeatureStack:
        feats = self.all_features(x)
        names = self.arch.block_names
        return FeatureStack([feats[names.index(t)] for t in self.tap_layers], list(self.tap_layers))

    def extract_embedding(self, x) -> torch.Tensor:
        if self.embed_layer != "fc":
            raise ConfigError(f"embedding layer {self.embed_layer!r} is not defined for this encoder")
        return self.net.embed(self._check(x))

    def identity_logits(self, x) -> torch.Tensor:
        return self.net(self._check(x))

    def forward(self, x):
        return self.encode(x)


def encode(enc: FrozenEncoder, x) -> FeatureStack:
    return enc.encode(x)


def extract_embedding(enc: FrozenEncoder, x) -> torch.Tensor:
    """Flat embedding vectors, one row per input image."""
    return enc.extract_embedding(x)


def _manifest(enc_or_net, tap_layers, embed_layer):
    net = enc_or_net.net if isinstance(enc_or_net, FrozenEncoder) else enc_or_net
    return {
        "format": WEIGHTS_FORMAT,
        "arch": {**asdict(net.arch), "widths": list(net.arch.widths)},
        "tap_layers": list(tap_layers),
        "embed_layer": embed_layer,
        "hash": parameter_hash(net),
    }


def save_encoder(enc: FrozenEncoder, path) -> Path:
    """Write weights as an ``.npz`` with a JSON manifest under ``__manifest__``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in enc.net.state_dict().items()}
    arrays["__manifest__"] = np.array(json.dumps(_manifest(enc, enc.tap_layers, enc.embed_layer)))
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_encoder_manifest(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return json.loads(str(z["__manifest__"]))


def load_pretrained_encoder(weights_path, tap_layers: Sequence[str] | None = None,
                            arch: EncoderArch | None = None) -> FrozenEncoder:
    """Build a FrozenEncoder from a weight snapshot.

    If ``arch`` is given the file must match it layer for layer; otherwise the
    architecture recorded in the file is used.
    """
    try:
        z = np.load(weights_path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise EncoderLoadError(f"cannot read encoder weights {weights_path}: {exc}") from exc
    with z:
        if "__manifest__" not in z.files:
            raise EncoderLoadError(f"{weights_path}: missing __manifest__ entry")
        manifest = json.loads(str(z["__manifest__"]))
        arrays = {k: z[k] for k in z.files if k != "__manifest__"}
    if manifest.get("format") != WEIGHTS_FORMAT:
        raise EncoderLoadError(f"{weights_path}: unsupported format {manifest.get('format')!r}")
    target = arch or EncoderArch(**manifest["arch"])
    net = FaceEncoderNet(target)
    expected = net.state_dict()
    bad = []
    for name, t in expected.items():
        if name not in arrays:
            bad.append(f"{name} (missing)")
        elif tuple(arrays[name].shape) != tuple(t.shape):
            bad.append(f"{name} (file {tuple(arrays[name].shape)} vs model {tuple(t.shape)})")
    bad += [f"{name} (unexpected)" for name in arrays if name not in expected]
    if bad:
        raise EncoderLoadError(f"{weights_path}: architecture mismatch in " + ", ".join(bad))
    net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    if parameter_hash(net) != manifest["hash"]:
        raise EncoderLoadError(f"{weights_path}: parameter hash does not match the recorded hash")
    return FrozenEncoder(net, tap_layers or manifest.get("tap_layers"), manifest.get("embed_layer", "fc"))


def random_encoder(arch: EncoderArch, seed: int, tap_layers: Sequence[str] | None = None) -> FrozenEncoder:
    """Randomly initialised encoder, frozen as-is (the no-pretraining ablation)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = FaceEncoderNet(arch)
    return FrozenEncoder(net, tap_layers)


@dataclass
class TinyEncoderConfig:
    arch: EncoderArch = field(default_factory=EncoderArch)
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    tap_layers: tuple[str, ...] | None = None


def train_tiny_face_encoder(images, labels, config: TinyEncoderConfig | None = None) -> FrozenEncoder:
    """Train the small identity classifier on ``images`` and freeze it.

    ``images`` is an (N, S, S, 3) array in [-1, 1]; ``labels`` integer
    identity ids.  Single-threaded runs with the same seed give identical
    weights.
    """
    config = config or TinyEncoderConfig()
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least two identity classes to train an encoder")
    remap = {c: i for i, c in enumerate(classes.tolist())}
    y = torch.tensor([remap[c] for c in labels.tolist()], dtype=torch.long)
    x = as_nchw(images)
    arch = config.arch
    if arch.n_classes != len(classes):
        arch = EncoderArch(arch.side, arch.widths, arch.embed_dim, len(classes))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = FaceEncoderNet(arch)
        opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
        gen = torch.Generator().manual_seed(config.seed)
        net.train()
        for epoch in range(config.epochs):
            order = torch.randperm(len(x), generator=gen)
            total = 0.0
            for s in range(0, len(x), config.batch_size):
                idx = order[s:s + config.batch_size]
                loss = F.cross_entropy(net(x[idx]), y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            log.debug("encoder epoch %d: loss %.4f", epoch, total / len(x))
    return FrozenEncoder(net, config.tap_layers)
