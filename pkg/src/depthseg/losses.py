"""Training objectives: scale-invariant depth, cross-entropy segmentation,
Wasserstein critic / generator terms with gradient penalty, and the weighted total.

Sign convention: the critic *minimizes* E[c(fake)] - E[c(real)] + lambda * GP and
the generator minimizes -E[c(fake)], which realizes the min-max game
min_g max_c E[c(real)] - E[c(g(x))].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple, Optional

import torch

Critic = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class LossWeights:
    alpha_si: float = 0.5  # variance/mean trade-off inside the depth loss
    alpha_mix: float = 0.5  # depth vs segmentation balance
    beta_adv: float = 0.01  # adversarial weight
    lambda_gp: float = 10.0

    def __post_init__(self):
        if not 0 <= self.alpha_si <= 1:
            raise ValueError(f"alpha_si must be in [0, 1], got {self.alpha_si}")
        if not 0 <= self.alpha_mix <= 1:
            raise ValueError(f"alpha_mix must be in [0, 1], got {self.alpha_mix}")
        if self.beta_adv < 0:
            raise ValueError(f"beta_adv must be >= 0, got {self.beta_adv}")
        if self.lambda_gp < 0:
            raise ValueError(f"lambda_gp must be >= 0, got {self.lambda_gp}")


@dataclass
class LossReport:
    l_depth: float
    l_seg: float
    l_gen_adv: float
    l_critic: float
    gp: float
    l_total: float

    def to_record(self) -> dict:
        return asdict(self)


def depth_scale_invariant_loss(
    pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor, alpha_si: float = 0.5
) -> torch.Tensor:
    """Per image: mean(e^2) - alpha * mean(e)^2 with e = log(pred) - log(gt) over
    valid pixels, then averaged over images that have any valid pixel."""
    if pred.shape != gt.shape or pred.shape != valid.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)}, gt {tuple(gt.shape)}, valid {tuple(valid.shape)}")
    valid = valid.bool()
    if not valid.any():
        raise ValueError("depth loss: no valid pixels in batch")
    if (pred[valid] <= 0).any():
        raise ValueError("depth loss: non-positive prediction on a valid pixel")
    one = torch.ones((), dtype=pred.dtype)
    e = torch.log(torch.where(valid, pred, one)) - torch.log(torch.where(valid, gt, one))
    m = valid.to(pred.dtype)
    e = (e * m).flatten(1)
    n = m.flatten(1).sum(dim=1)
    has = n > 0
    n = n.clamp(min=1)
    per_image = (e**2).sum(dim=1) / n - alpha_si * e.sum(dim=1) ** 2 / n**2
    return per_image[has].mean()


def segmentation_ce_loss(logits: torch.Tensor, labels: torch.Tensor, ignore_id: int = 255) -> torch.Tensor:
    """Mean of -log softmax(logits)[label] over non-ignored pixels."""
    if logits.dim() != 4 or labels.shape != (logits.shape[0], *logits.shape[2:]):
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} are incompatible")
    K = logits.shape[1]
    keep = labels != ignore_id
    if not keep.any():
        raise ValueError("segmentation loss: every pixel is ignored")
    bad = keep & ((labels < 0) | (labels >= K))
    if bad.any():
        raise ValueError(f"segmentation loss: label {int(labels[bad][0])} outside 0..{K - 1} and != ignore_id")
    shifted = logits - logits.amax(dim=1, keepdim=True).detach()
    log_probs = shifted - torch.log(torch.exp(shifted).sum(dim=1, keepdim=True))
    idx = torch.where(keep, labels, 0).long().unsqueeze(1)
    nll = -log_probs.gather(1, idx).squeeze(1)
    return nll[keep].mean()


def _check_batch(*xs: torch.Tensor) -> None:
    if xs[0].shape[0] == 0:
        raise ValueError("empty batch")
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ValueError(f"shape mismatch: {tuple(xs[0].shape)} vs {tuple(x.shape)}")


def interpolate(real: torch.Tensor, fake: torch.Tensor, generator: Optional[torch.Generator]) -> torch.Tensor:
    """eps * real + (1 - eps) * fake with one eps ~ U[0, 1] per batch element."""
    shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    eps = torch.rand(shape, generator=generator, dtype=real.dtype, device=real.device)
    return eps * real + (1 - eps) * fake


def critic_grad_norms(critic: Critic, x: torch.Tensor) -> torch.Tensor:
    """Per-sample L2 norm of d critic(x) / dx, kept differentiable."""
    x = x.detach().requires_grad_(True)
    score = critic(x)
    if not score.requires_grad:
        return torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
    (grad,) = torch.autograd.grad(score.sum(), x, create_graph=True, allow_unused=True)
    if grad is None:
        return torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
    return grad.flatten(1).pow(2).sum(dim=1).sqrt()


def gradient_penalty(
    critic: Critic, real: torch.Tensor, fake: torch.Tensor, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    _check_batch(real, fake)
    norms = critic_grad_norms(critic, interpolate(real, fake.detach(), generator))
    return ((norms - 1) ** 2).mean()


class CriticTerms(NamedTuple):
    loss: torch.Tensor
    w_gap: torch.Tensor  # E[c(real)] - E[c(fake)]
    gp: torch.Tensor
    grad_norm: torch.Tensor  # mean interpolated gradient norm


def critic_terms(
    critic: Critic,
    real: torch.Tensor,
    fake: torch.Tensor,
    lambda_gp: float,
    generator: Optional[torch.Generator] = None,
) -> CriticTerms:
    _check_batch(real, fake)
    fake = fake.detach()
    w_gap = critic(real).mean() - critic(fake).mean()
    norms = critic_grad_norms(critic, interpolate(real, fake, generator))
    gp = ((norms - 1) ** 2).mean()
    return CriticTerms(-w_gap + lambda_gp * gp, w_gap.detach(), gp, norms.detach().mean())


def critic_loss(
    critic: Critic,
    real: torch.Tensor,
    fake: torch.Tensor,
    lambda_gp: float,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    return critic_terms(critic, real, fake, lambda_gp, generator).loss


def generator_adversarial_loss(critic: Critic, fake: torch.Tensor) -> torch.Tensor:
    if fake.shape[0] == 0:
        raise ValueError("empty batch")
    return -critic(fake).mean()


def total_loss(l_depth, l_seg, l_gen_adv, weights: LossWeights):
    for name, v in (("l_depth", l_depth), ("l_seg", l_seg), ("l_gen_adv", l_gen_adv)):
        x = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(x):
            raise FloatingPointError(f"{name} is not finite: {x}")
    return weights.alpha_mix * l_depth + (1 - weights.alpha_mix) * l_seg + weights.beta_adv * l_gen_adv
