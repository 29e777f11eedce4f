"""Alternating discriminator/generator optimisation with equilibrium control."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import dataio
from .config import ExperimentConfig, parse_config
from .encoder_zoo import (EncoderArch, FrozenEncoder, as_nchw, load_pretrained_encoder,
                          random_encoder, read_encoder_manifest)
from .errors import ConfigError, IntegrityError, NonFiniteLossError, ShapeMismatchError
from .losses import (LossBundle, LossWeights, aux_loss_disc, aux_loss_gen, content_loss,
                     cycle_loss, gan_loss_disc, gan_loss_gen, total_loss_disc, total_loss_gen)
from .nets import DiscriminatorModel, GeneratorModel, classify_gender, discriminate_energy

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "con_C", "con_P", "aux_D", "aux_G", "gan_D", "gan_G",
               "total_D", "total_G", "k_t", "M"]


@dataclass(frozen=True)
class EquilibriumState:
    k_t: float = 0.0
    gamma: float = 0.7
    lambda_k: float = 0.001


def update_equilibrium(s: EquilibriumState, energy_real: float, energy_fake: float) -> EquilibriumState:
    k = s.k_t + s.lambda_k * (s.gamma * float(energy_real) - float(energy_fake))
    return replace(s, k_t=min(max(k, 0.0), 1.0))


def convergence_measure(energy_real: float, energy_fake: float, gamma: float) -> float:
    return float(energy_real) + abs(gamma * float(energy_real) - float(energy_fake))


@dataclass
class Models:
    generator: GeneratorModel
    discriminator: DiscriminatorModel
    content_encoder: FrozenEncoder


@dataclass
class Optimizers:
    g: torch.optim.Optimizer
    d: torch.optim.Optimizer


def _encoder_arch(cfg: ExperimentConfig) -> EncoderArch:
    side = cfg.data.image_side
    if cfg.encoder.weights is not None and Path(cfg.encoder.weights).exists():
        arch = EncoderArch(**read_encoder_manifest(cfg.encoder.weights)["arch"])
        if arch.side != side:
            raise ConfigError(f"data.image_side is {side} but the encoder weights expect {arch.side}")
        return arch
    return EncoderArch(side=side, widths=tuple(cfg.encoder.widths), embed_dim=cfg.encoder.embed_dim)


def build_models(cfg: ExperimentConfig) -> Models:
    """Construct all networks from a config; trainable weights are seeded by
    ``cfg.seed``."""
    arch = _encoder_arch(cfg)
    taps = cfg.encoder.tap_layers
    if cfg.encoder.init == "pretrained":
        enc = load_pretrained_encoder(cfg.encoder.weights, taps, arch)
    else:
        enc = random_encoder(arch, cfg.seed + 7919, taps)
    if cfg.encoder.share_content_encoder:
        phi = enc
    elif cfg.encoder.weights is not None:
        phi = load_pretrained_encoder(cfg.encoder.weights, taps, arch)
    else:
        phi = random_encoder(arch, cfg.seed + 7919, taps)
    torch.manual_seed(cfg.seed)
    g = GeneratorModel(enc, cfg.nets.decoder_widths, cfg.nets.skip_taps, cfg.nets.parent_conditioned)
    d = DiscriminatorModel(arch.side, cfg.nets.disc_width, cfg.nets.disc_hidden, cfg.nets.cls_width)
    return Models(g, d, phi)


def build_optimizers(models: Models, cfg: ExperimentConfig) -> Optimizers:
    o = cfg.optim
    betas = (o.beta1, o.beta2)
    return Optimizers(
        g=torch.optim.Adam(models.generator.decoder_parameters(), lr=o.learning_rate, betas=betas),
        d=torch.optim.Adam(models.discriminator.parameters(), lr=o.learning_rate, betas=betas),
    )


def _f(t) -> float:
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)


def train_step(models: Models, opts: Optimizers, state: EquilibriumState,
               kin: dataio.KinBatch, reg: dataio.FaceBatch, weights: LossWeights = LossWeights(),
               aux_real_source: str = "attributes", aux_gen_streams: str = "both",
               step: int | None = None) -> tuple[LossBundle, EquilibriumState]:
    """One discriminator update, one generator update, one k_t update."""
    g, d, phi = models.generator, models.discriminator, models.content_encoder
    g.train()
    d.train()
    parent, child = as_nchw(kin.parent), as_nchw(kin.child)
    c_child = torch.tensor(kin.child_cond)
    c_parent = torch.tensor(kin.parent_cond)
    x_cp, c_cp = as_nchw(reg.images), torch.tensor(reg.cond)
    shared = phi is g.encoder
    taps = [g.encoder.arch.block_names.index(t) for t in phi.tap_layers]

    try:
        feats_parent = g.encoder.all_features(parent)
        y_hat = g.g_c(parent, c_child, feats=feats_parent)
        fake_cp = g.g_c(x_cp, c_cp)

        # discriminator side
        e_real = discriminate_energy(d.autoencoder, x_cp)
        e_fake = discriminate_energy(d.autoencoder, fake_cp.detach())
        gan_D = gan_loss_disc(e_real, e_fake, state.k_t)
        real, real_c = x_cp, c_cp
        if aux_real_source == "attributes+children":
            real, real_c = torch.cat([x_cp, child]), torch.cat([c_cp, c_child])
        aux_D = aux_loss_disc(classify_gender(d.classifier, real), real_c)
        loss_d = total_loss_disc(gan_D, aux_D, weights)
        opts.d.zero_grad(set_to_none=True)
        loss_d.backward()
        opts.d.step()

        # generator side
        feats_yhat = g.encoder.all_features(y_hat)
        with torch.no_grad():
            phi_child = phi.encode(child)
            phi_parent = [feats_parent[i].detach() for i in taps] if shared else phi.encode(parent).activations
        phi_yhat = [feats_yhat[i] for i in taps] if shared else phi.encode(y_hat).activations
        con_C = content_loss(phi_child, phi_yhat)
        x_back = g.g_p(y_hat, c_parent if g.parent_conditioned else None, feats=feats_yhat)
        con_P = cycle_loss(phi_parent, phi.encode(x_back))
        gan_G = gan_loss_gen(discriminate_energy(d.autoencoder, fake_cp))
        aux_kin = aux_loss_gen(classify_gender(d.classifier, y_hat), c_child)
        aux_reg = aux_loss_gen(classify_gender(d.classifier, fake_cp), c_cp)
        aux_G = {"both": (aux_kin + aux_reg) / 2, "kin": aux_kin, "reg": aux_reg}[aux_gen_streams]
        loss_g = total_loss_gen(con_C, con_P, gan_G, aux_G, weights)
        opts.g.zero_grad(set_to_none=True)
        loss_g.backward()
        opts.g.step()
    except NonFiniteLossError as exc:
        raise NonFiniteLossError(exc.component, exc.value, step) from None

    er, ef = _f(e_real), _f(e_fake)
    comps = dict(con_C=_f(con_C), con_P=_f(con_P), aux_D=_f(aux_D), aux_G=_f(aux_G),
                 gan_D=_f(gan_D), gan_G=_f(gan_G))
    bundle = LossBundle(
        **comps,
        total_D=float(total_loss_disc(comps["gan_D"], comps["aux_D"], weights)),
        total_G=float(total_loss_gen(comps["con_C"], comps["con_P"], comps["gan_G"], comps["aux_G"], weights)),
        energy_real=er,
        energy_fake=ef,
    )
    return bundle, update_equilibrium(state, er, ef)


# -- checkpoints -------------------------------------------------------------

_MAGIC = b"KINSYNTH-CKPT/1 "


@dataclass
class Checkpoint:
    step: int
    generator: dict
    autoencoder: dict
    classifier: dict
    optimizer: dict
    equilibrium: EquilibriumState
    config: dict
    encoder_hash: str
    rng_state: torch.Tensor | None = None
    extra: dict = field(default_factory=dict)

    def payload(self) -> dict:
        return {
            "step": self.step,
            "generator": self.generator,
            "autoencoder": self.autoencoder,
            "classifier": self.classifier,
            "optimizer": self.optimizer,
            "equilibrium": [self.equilibrium.k_t, self.equilibrium.gamma, self.equilibrium.lambda_k],
            "config": self.config,
            "encoder_hash": self.encoder_hash,
            "rng_state": self.rng_state,
            "extra": self.extra,
        }


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write atomically: a header line carrying the payload's sha256, then the
    torch-serialised payload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(ckpt.payload(), buf)
    body = buf.getvalue()
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(_MAGIC + hashlib.sha256(body).hexdigest().encode() + b"\n")
        fh.write(body)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    if not sep or not head.startswith(_MAGIC):
        raise IntegrityError(f"{path}: not a checkpoint file")
    if hashlib.sha256(body).hexdigest().encode() != head[len(_MAGIC):]:
        raise IntegrityError(f"{path}: content hash mismatch (file is corrupted or modified)")
    try:
        p = torch.load(io.BytesIO(body), weights_only=True)
    except Exception as exc:  # hash matched, so this is a format problem
        raise IntegrityError(f"{path}: unreadable payload ({exc})") from exc
    k, gamma, lk = p["equilibrium"]
    return Checkpoint(p["step"], p["generator"], p["autoencoder"], p["classifier"], p["optimizer"],
                      EquilibriumState(k, gamma, lk), p["config"], p["encoder_hash"],
                      p.get("rng_state"), p.get("extra", {}))


def _arch_dict(arch: EncoderArch) -> dict:
    return {"side": arch.side, "widths": list(arch.widths), "embed_dim": arch.embed_dim,
            "n_classes": arch.n_classes}


def generator_from_checkpoint(ckpt: Checkpoint) -> GeneratorModel:
    """Rebuild the generator (encoder included) from a checkpoint alone."""
    cfg = parse_config(ckpt.config)
    arch = EncoderArch(**ckpt.extra["encoder_arch"])
    enc = random_encoder(arch, 0, ckpt.extra.get("tap_layers"))
    g = GeneratorModel(enc, cfg.nets.decoder_widths, cfg.nets.skip_taps, cfg.nets.parent_conditioned)
    try:
        g.load_state_dict(ckpt.generator)
    except RuntimeError as exc:
        raise ShapeMismatchError(f"checkpoint does not fit the recorded architecture: {exc}") from None
    if enc.parameter_hash() != ckpt.encoder_hash:
        raise IntegrityError("restored encoder parameters do not match the recorded encoder hash")
    g.eval()
    return g


# -- training driver ---------------------------------------------------------

class Trainer:
    """Holds live models, optimisers and the equilibrium state for one run."""

    def __init__(self, cfg: ExperimentConfig, run_dir=None):
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.weights = LossWeights(cfg.loss.lambda_gan, cfg.loss.lambda_c, cfg.loss.lambda_p, cfg.loss.lambda_aux)
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        self.models = build_models(cfg)
        self.opts = build_optimizers(self.models, cfg)
        eq = cfg.equilibrium
        self.state = EquilibriumState(eq.k0, eq.gamma, eq.lambda_k)
        self.step = 0
        self.history: list[dict] = []
        self._pairs = None
        self._reg = None

    # data
    def _load_data(self):
        if self._pairs is None:
            pairs = dataio.load_pair_manifest(self.cfg.data.pairs)
            if self.cfg.data.val_count:
                pairs, _ = dataio.split_validation(pairs, self.cfg.data.val_count, self.cfg.seed)
            self._pairs = pairs
            self._reg = dataio.load_attr_manifest(self.cfg.data.attributes)
            if not self._pairs or not self._reg:
                raise ConfigError("training needs at least one kinship pair and one attribute face")
        return self._pairs, self._reg

    def batches(self, step: int):
        pairs, reg = self._load_data()
        d, o = self.cfg.data, self.cfg.optim
        kin = dataio.make_batch(pairs, o.batch_size, self.cfg.seed, step, d.image_side, d.hflip, d.workers)
        rb = dataio.make_batch(reg, o.batch_size, self.cfg.seed + 1, step, d.image_side, d.hflip, d.workers)
        return kin, rb

    def step_once(self) -> dict:
        kin, reg = self.batches(self.step)
        bundle, self.state = train_step(
            self.models, self.opts, self.state, kin, reg, self.weights,
            self.cfg.data.aux_real_source, self.cfg.loss.aux_gen_streams, step=self.step + 1)
        self.step += 1
        row = {"step": self.step, **{k: getattr(bundle, k) for k in LOG_COLUMNS[1:-2]},
               "k_t": self.state.k_t,
               "M": convergence_measure(bundle.energy_real, bundle.energy_fake, self.state.gamma)}
        self.history.append(row)
        return row

    # checkpoints
    def checkpoint(self) -> Checkpoint:
        g, d = self.models.generator, self.models.discriminator
        return Checkpoint(
            step=self.step,
            generator={k: v.clone() for k, v in g.state_dict().items()},
            autoencoder={k: v.clone() for k, v in d.autoencoder.state_dict().items()},
            classifier={k: v.clone() for k, v in d.classifier.state_dict().items()},
            optimizer={"g": self.opts.g.state_dict(), "d": self.opts.d.state_dict()},
            equilibrium=self.state,
            config=self.cfg.snapshot(),
            encoder_hash=g.encoder.parameter_hash(),
            rng_state=torch.get_rng_state(),
            extra={"encoder_arch": _arch_dict(g.encoder.arch), "tap_layers": list(g.encoder.tap_layers)},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: ExperimentConfig | None = None, run_dir=None) -> "Trainer":
        cfg = cfg or parse_config(ckpt.config)
        t = cls(cfg, run_dir)
        g, d = t.models.generator, t.models.discriminator
        try:
            g.load_state_dict(ckpt.generator)
            d.autoencoder.load_state_dict(ckpt.autoencoder)
            d.classifier.load_state_dict(ckpt.classifier)
            t.opts.g.load_state_dict(ckpt.optimizer["g"])
            t.opts.d.load_state_dict(ckpt.optimizer["d"])
        except (RuntimeError, ValueError, KeyError) as exc:
            raise ShapeMismatchError(f"checkpoint does not fit the configured architecture: {exc}") from None
        if g.encoder.parameter_hash() != ckpt.encoder_hash:
            raise IntegrityError("restored encoder parameters do not match the recorded encoder hash")
        t.state = ckpt.equilibrium
        t.step = ckpt.step
        if ckpt.rng_state is not None:
            torch.set_rng_state(ckpt.rng_state)
        return t

    def _paths(self):
        root = self.run_dir
        dirs = {n: root / n for n in ("config", "checkpoints", "logs", "samples", "reports")}
        for p in dirs.values():
            p.mkdir(parents=True, exist_ok=True)
        return dirs

    def save(self) -> Path | None:
        if self.run_dir is None:
            return None
        dirs = self._paths()
        ckpt = self.checkpoint()
        path = save_checkpoint(dirs["checkpoints"] / f"step_{self.step:07d}.ckpt", ckpt)
        save_checkpoint(dirs["checkpoints"] / "latest.ckpt", ckpt)
        return path

    def _log_rows(self, rows):
        if self.run_dir is None or not rows:
            return
        path = self._paths()["logs"] / "train_log.csv"
        new = not path.exists()
        with path.open("a", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            if new:
                w.writeheader()
            w.writerows(rows)

    def run(self, until: int | None = None) -> Checkpoint:
        until = self.cfg.optim.max_steps if until is None else until
        if self.run_dir is not None:
            from .config import dump_config
            dump_config(self.cfg, self._paths()["config"] / "config.yaml")
            if self.step == 0:
                self.save()
        pending = []
        while self.step < until:
            row = self.step_once()
            if self.step % self.cfg.log_every == 0:
                pending.append(row)
            if self.step % self.cfg.checkpoint_every == 0 or self.step == until:
                self._log_rows(pending)
                pending = []
                self.save()
        self._log_rows(pending)
        return self.checkpoint()


def train(cfg: ExperimentConfig, run_dir=None, resume: Checkpoint | None = None) -> Checkpoint:
    """Train to ``cfg.optim.max_steps`` and return the final checkpoint."""
    t = Trainer.from_checkpoint(resume, cfg, run_dir) if resume is not None else Trainer(cfg, run_dir)
    return t.run()
