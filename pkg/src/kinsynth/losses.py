"""Loss terms and their weighted composition.

Every function works on torch tensors (keeping the autograd graph) and on
plain numbers/arrays, returning a tensor in both cases.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .errors import NonFiniteLossError

LOG_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_gan: float = 10.0
    lambda_c: float = 0.1
    lambda_p: float = 0.001
    lambda_aux: float = 0.1

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"{name} must be >= 0, got {v}")


@dataclass(frozen=True)
class LossBundle:
    con_C: float
    con_P: float
    aux_D: float
    aux_G: float
    gan_D: float
    gan_G: float
    total_D: float
    total_G: float
    energy_real: float = 0.0
    energy_fake: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _layers(stack):
    return list(stack.activations) if hasattr(stack, "activations") else list(stack)


def content_loss(phi_real, phi_fake) -> torch.Tensor:
    """Sum over tapped layers of the mean absolute activation difference."""
    a, b = _layers(phi_real), _layers(phi_fake)
    if len(a) != len(b):
        raise ValueError(f"feature stacks differ in depth: {len(a)} vs {len(b)} layers")
    names = getattr(phi_real, "layer_ids", None) or [str(i) for i in range(len(a))]
    total = None
    for name, x, y in zip(names, a, b):
        x, y = _t(x), _t(y)
        if x.shape != y.shape:
            raise ValueError(f"layer {name}: shape {tuple(x.shape)} vs {tuple(y.shape)}")
        term = (x - y).abs().mean()
        total = term if total is None else total + term
    return total if total is not None else torch.zeros(())


def cycle_loss(phi_x, phi_cycled) -> torch.Tensor:
    """Feature-space distance between a parent and its parent->child->parent image."""
    return content_loss(phi_x, phi_cycled)


def _label_index(label, n):
    if hasattr(label, "one_hot") and not isinstance(label, torch.Tensor):
        label = int(label)
    lab = torch.as_tensor(label)
    if lab.dim() == 0:
        return lab.long().expand(n)
    if lab.dim() == 1 and lab.dtype.is_floating_point and lab.numel() == 2 and n == 1:
        return lab.argmax().reshape(1)
    if lab.dim() == 2:
        return lab.argmax(dim=1)
    return lab.long()


def _nll(probs, label) -> torch.Tensor:
    p = _t(probs)
    if p.dim() == 1:
        p = p.unsqueeze(0)
    idx = _label_index(label, p.shape[0]).to(p.device)
    picked = p.gather(1, idx.view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp_min(LOG_EPS)).mean()


def aux_loss_disc(probs, label) -> torch.Tensor:
    """-log of the classifier probability of the true gender of a real face.

    ``probs`` is (2,) or (N, 2); ``label`` a Gender, index, index vector or
    one-hot rows.  Batches are averaged.
    """
    return _nll(probs, label)


def aux_loss_gen(probs_of_generated, label) -> torch.Tensor:
    """-log of the classifier probability of the conditioning gender on a
    generated face."""
    return _nll(probs_of_generated, label)


def gan_loss_disc(energy_real, energy_fake, k_t: float) -> torch.Tensor:
    if not 0.0 <= float(k_t) <= 1.0:
        raise ValueError(f"k_t must lie in [0, 1], got {k_t}")
    return _t(energy_real) - k_t * _t(energy_fake)


def gan_loss_gen(energy_fake) -> torch.Tensor:
    return _t(energy_fake)


def _check_finite(**components):
    for name, v in components.items():
        f = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(f):
            raise NonFiniteLossError(name, f)


def total_loss_disc(gan_D, aux_D, w: LossWeights = LossWeights()):
    _check_finite(gan_D=gan_D, aux_D=aux_D)
    return w.lambda_gan * gan_D + w.lambda_aux * aux_D


def total_loss_gen(con_C, con_P, gan_G, aux_G, w: LossWeights = LossWeights()):
    # the adversarial term carries no weight of its own
    _check_finite(con_C=con_C, con_P=con_P, gan_G=gan_G, aux_G=aux_G)
    return w.lambda_c * con_C + w.lambda_p * con_P + gan_G + w.lambda_aux * aux_G
