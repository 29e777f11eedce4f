"""Generator, energy discriminator and gender classifier.

All networks take NCHW tensors in [-1, 1].  Conditions are (N, 2) one-hot
rows ordered (male, female).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder_zoo import FrozenEncoder, as_nchw
from .errors import ConfigError


def _stage(c_in, c_out):
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.LeakyReLU(0.2),
    )


class SkipDecoder(nn.Module):
    """Decodes encoder block outputs back to an image.

    The condition (if any) is broadcast over the deepest feature map and
    concatenated to it.  Each upsampling stage whose resolution matches a
    skip tap adds that encoder activation, through a 1x1 projection when the
    channel counts differ.
    """

    def __init__(self, enc_widths: Sequence[int], enc_side: int, widths: Sequence[int],
                 skip_blocks: Sequence[int], cond_dim: int = 0):
        super().__init__()
        n = len(enc_widths)
        if len(widths) != n:
            raise ConfigError(f"decoder needs {n} stage widths (one per encoder block), got {len(widths)}")
        self.cond_dim = cond_dim
        self.bottleneck = nn.Sequential(
            nn.Conv2d(enc_widths[-1] + cond_dim, widths[0], 3, padding=1),
            nn.BatchNorm2d(widths[0]),
            nn.LeakyReLU(0.2),
        )
        self.stages = nn.ModuleList()
        self.skip_proj = nn.ModuleDict()
        self.skip_at: dict[int, int] = {}
        stage_sides = [enc_side // 2 ** (n - 1 - i) for i in range(n)]
        block_sides = [enc_side // 2 ** (j + 1) for j in range(n)]
        c_in = widths[0]
        for i, w in enumerate(widths):
            self.stages.append(_stage(c_in, w))
            c_in = w
        for j in skip_blocks:
            if not 0 <= j < n - 1:
                raise ConfigError(f"skip tap block{j + 1} cannot feed a decoder stage")
            i = stage_sides.index(block_sides[j]) if block_sides[j] in stage_sides else None
            if i is None:
                raise ConfigError(f"skip tap block{j + 1} ({block_sides[j]}px) matches no decoder stage")
            self.skip_at[i] = j
            if enc_widths[j] != widths[i]:
                self.skip_proj[str(i)] = nn.Conv2d(enc_widths[j], widths[i], 1)
        self.to_rgb = nn.Conv2d(c_in, 3, 3, padding=1)

    def forward(self, feats: Sequence[torch.Tensor], cond: torch.Tensor | None = None):
        h = feats[-1]
        if self.cond_dim:
            if cond is None:
                raise ValueError("this decoder is conditioned; pass a condition")
            cmap = cond.to(h.dtype)[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
            h = torch.cat([h, cmap], dim=1)
        h = self.bottleneck(h)
        for i, stage in enumerate(self.stages):
            h = stage(h)
            if i in self.skip_at:
                s = feats[self.skip_at[i]]
                proj = self.skip_proj[str(i)] if str(i) in self.skip_proj else None
                h = h + (proj(s) if proj is not None else s)
        return torch.tanh(self.to_rgb(h))


@dataclass(frozen=True)
class GeneratorView:
    """One generator direction: the shared encoder plus its own decoder."""

    encoder: FrozenEncoder
    decoder: SkipDecoder

    def __call__(self, x, cond=None, feats=None):
        if feats is None:
            feats = self.encoder.all_features(x)
        return self.decoder(feats, cond)

    def encoder_bytes(self) -> bytes:
        return self.encoder.state_bytes()


class GeneratorModel(nn.Module):
    """``G_c`` (parent -> child, gender-conditioned) and ``G_p`` (child ->
    parent) over one frozen encoder instance."""

    def __init__(self, encoder: FrozenEncoder, decoder_widths: Sequence[int] | None = None,
                 skip_taps: Sequence[str] | None = None, parent_conditioned: bool = False):
        super().__init__()
        arch = encoder.arch
        names = arch.block_names
        n = len(names)
        if decoder_widths is None:
            decoder_widths = [max(8, arch.widths[n - 2 - i]) if i < n - 1 else max(8, arch.widths[0] // 2)
                              for i in range(n)]
        if skip_taps is None:
            skip_taps = names[:-1]
        unknown = [t for t in skip_taps if t not in names]
        if unknown:
            raise ConfigError(f"unknown skip tap(s) {unknown}; encoder has {names}")
        skip_blocks = [names.index(t) for t in skip_taps]
        self.encoder = encoder
        self.skip_taps = list(skip_taps)
        self.parent_conditioned = parent_conditioned
        self.child_decoder = SkipDecoder(arch.widths, arch.side, decoder_widths, skip_blocks, cond_dim=2)
        self.parent_decoder = SkipDecoder(arch.widths, arch.side, decoder_widths, skip_blocks,
                                          cond_dim=2 if parent_conditioned else 0)

    @property
    def g_c(self) -> GeneratorView:
        return GeneratorView(self.encoder, self.child_decoder)

    @property
    def g_p(self) -> GeneratorView:
        return GeneratorView(self.encoder, self.parent_decoder)

    def decoder_parameters(self):
        return list(self.child_decoder.parameters()) + list(self.parent_decoder.parameters())

    def generate_child(self, x, cond, feats=None):
        return self.g_c(as_nchw(x), torch.as_tensor(cond), feats)

    def generate_parent(self, y, cond=None, feats=None):
        if self.parent_conditioned and cond is None:
            raise ValueError("parent decoder is conditioned; pass the parent gender")
        c = torch.as_tensor(cond) if self.parent_conditioned else None
        return self.g_p(as_nchw(y), c, feats)

    def forward(self, x, cond):
        return self.generate_child(x, cond)


def generate_child(g: GeneratorModel, x, c):
    return g.generate_child(x, c)


def generate_parent(g: GeneratorModel, y, c=None):
    return g.generate_parent(y, c)


class EnergyAutoencoder(nn.Module):
    """Small conv autoencoder whose reconstruction error is the energy."""

    def __init__(self, side: int, width: int = 16, hidden: int = 64):
        super().__init__()
        depth = 1
        while side // 2 ** (depth + 1) >= 4:
            depth += 1
        self.depth = depth
        self.low = side // 2 ** depth
        chans = [width * (i + 1) for i in range(depth + 1)]
        enc = [nn.Conv2d(3, chans[0], 3, padding=1), nn.ELU()]
        for i in range(depth):
            enc += [nn.Conv2d(chans[i], chans[i], 3, padding=1), nn.ELU(),
                    nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1), nn.ELU()]
        self.enc = nn.Sequential(*enc)
        self.to_code = nn.Linear(chans[-1] * self.low * self.low, hidden)
        self.from_code = nn.Linear(hidden, width * self.low * self.low)
        dec = []
        for _ in range(depth):
            dec += [nn.Conv2d(width, width, 3, padding=1), nn.ELU(), nn.Upsample(scale_factor=2, mode="nearest")]
        dec += [nn.Conv2d(width, width, 3, padding=1), nn.ELU(), nn.Conv2d(width, 3, 3, padding=1)]
        self.dec = nn.Sequential(*dec)
        self.width = width

    def forward(self, x):
        code = self.to_code(self.enc(x).flatten(1))
        h = self.from_code(code).view(-1, self.width, self.low, self.low)
        return self.dec(h)


class GenderClassifier(nn.Module):
    def __init__(self, side: int, width: int = 16):
        super().__init__()
        layers = []
        c_in, c = 3, width
        s = side
        while s > 4:
            layers += [nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c_in, c, s = c, c * 2, s // 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, 2)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


class DiscriminatorModel(nn.Module):
    """Energy autoencoder and gender classifier; they share no parameters."""

    def __init__(self, side: int, ae_width: int = 16, ae_hidden: int = 64, cls_width: int = 16):
        super().__init__()
        self.autoencoder = EnergyAutoencoder(side, ae_width, ae_hidden)
        self.classifier = GenderClassifier(side, cls_width)

    def energy(self, v):
        return discriminate_energy(self.autoencoder, v)

    def gender_probs(self, v):
        return classify_gender(self.classifier, v)


def discriminate_energy(d, v) -> torch.Tensor:
    """Mean absolute reconstruction error of ``v`` (a scalar >= 0).

    ``d`` may be a ``DiscriminatorModel`` or any autoencoder callable.
    """
    ae = d.autoencoder if isinstance(d, DiscriminatorModel) else d
    v = as_nchw(v)
    return (v - ae(v)).abs().mean()


def classify_gender(d, v) -> torch.Tensor:
    """(N, 2) softmax probabilities ordered (male, female)."""
    cls = d.classifier if isinstance(d, DiscriminatorModel) else d
    return F.softmax(cls(as_nchw(v)), dim=1)
