"""Training losses: patch contrastive losses, adaptive weights, Gaussian-pyramid
reconstruction, least-squares adversarial terms and the generator total.

Contrastive losses take two row-aligned M x D matrices of unit embeddings
(``anchors[i]`` and ``positives[i]`` come from the same spatial site) or the
:class:`~stainmix.patching.EmbeddingSet` wrapping them.
"""

from __future__ import annotations

import contextlib
import enum
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .networks import ShapeError


class NonFiniteLoss(FloatingPointError):
    pass


class Variant(str, enum.Enum):
    PATCH_NCE = "PATCH_NCE"
    MIX_DOMAIN = "MIX_DOMAIN"


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.07
    variant: Variant = Variant.MIX_DOMAIN

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


@dataclass(frozen=True)
class AdaptiveWeights:
    omega: torch.Tensor
    progress: float

    def __post_init__(self):
        if not 0.0 <= self.progress <= 1.0:
            raise ValueError(f"progress must lie in [0, 1], got {self.progress}")
        if self.omega.ndim != 1 or bool(((self.omega < 0) | (self.omega > 1)).any()):
            raise ValueError("weights must be a vector with entries in [0, 1]")

    def __len__(self) -> int:
        return self.omega.shape[0]


@dataclass
class LossBreakdown:
    adv_g: float
    adv_d: float
    mix_he: float
    mix_gt: float
    gp: float
    total_g: float

    def components_total(self, lambda_gp: float) -> float:
        return self.adv_g + self.mix_he + self.mix_gt + lambda_gp * self.gp

    def is_consistent(self, lambda_gp: float, rel: float = 1e-9) -> bool:
        ref = self.components_total(lambda_gp)
        return abs(self.total_g - ref) <= rel * max(1.0, abs(ref))

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _matrix(x) -> torch.Tensor:
    return x.vectors if hasattr(x, "vectors") else x


def _check_pair(anchors: torch.Tensor, positives: torch.Tensor) -> None:
    if anchors.ndim != 2 or anchors.shape != positives.shape:
        raise ValueError(f"expected two M x D matrices of equal shape, got {tuple(anchors.shape)} and {tuple(positives.shape)}")
    if anchors.shape[0] < 1:
        raise ValueError("need at least one anchor")


def _omega(weights, m: int, like: torch.Tensor) -> torch.Tensor | None:
    if weights is None:
        return None
    w = weights.omega if isinstance(weights, AdaptiveWeights) else torch.as_tensor(weights)
    if w.shape != (m,):
        raise ValueError(f"expected {m} weights, got shape {tuple(w.shape)}")
    return w.to(dtype=like.dtype, device=like.device)


def patchnce_terms(anchors, positives, tau: float) -> torch.Tensor:
    """Per-anchor negative log matching probability (cross-domain negatives only)."""
    a, p = _matrix(anchors), _matrix(positives)
    _check_pair(a, p)
    logits = a @ p.t() / tau
    return torch.logsumexp(logits, dim=1) - logits.diagonal()


def matching_probability(anchors, positives, i: int, tau: float) -> torch.Tensor:
    """Softmax probability that anchor ``i`` picks its own positive among all positives."""
    return torch.exp(-patchnce_terms(anchors, positives, tau)[i])


def patchnce_loss(anchors, positives, tau: float, weights=None) -> torch.Tensor:
    terms = patchnce_terms(anchors, positives, tau)
    w = _omega(weights, terms.shape[0], terms)
    return terms.sum() if w is None else (w * terms).sum()


def mix_domain_terms(anchors, positives, tau: float) -> torch.Tensor:
    """Per-anchor mix-domain loss.

    The softmax for anchor i runs over every positive (one of them its own)
    plus every *other anchor*, which act as same-domain negatives.
    """
    a, p = _matrix(anchors), _matrix(positives)
    _check_pair(a, p)
    m = a.shape[0]
    inter = a @ p.t() / tau
    intra = a @ a.t() / tau
    self_mask = torch.eye(m, dtype=torch.bool, device=a.device)
    intra = intra.masked_fill(self_mask, float("-inf"))
    denom = torch.logsumexp(torch.cat([inter, intra], dim=1), dim=1)
    return denom - inter.diagonal()


def mix_domain_loss(anchors, positives, tau: float, weights=None) -> torch.Tensor:
    terms = mix_domain_terms(anchors, positives, tau)
    w = _omega(weights, terms.shape[0], terms)
    return terms.sum() if w is None else (w * terms).sum()


def contrastive_loss(anchors, positives, cfg: ContrastiveConfig, weights=None) -> torch.Tensor:
    fn = mix_domain_loss if cfg.variant is Variant.MIX_DOMAIN else patchnce_loss
    return fn(anchors, positives, cfg.tau, weights)


def adaptive_weights(anchors, gt_positives, progress: float) -> AdaptiveWeights:
    """Rank-based confidence weights for misaligned ground-truth pairs.

    Pairs are ranked by cosine similarity; the least similar pair gets rank
    0, the most similar rank 1 (ties share their mean rank). Weights ramp
    linearly from all-ones at ``progress=0`` to the ranks at ``progress=1``.
    """
    a, p = _matrix(anchors), _matrix(gt_positives)
    _check_pair(a, p)
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    sim = (a * p).sum(dim=1).detach().cpu().double().numpy()
    m = sim.shape[0]
    if m == 1:
        ranks = np.ones(1)
    else:
        ranks = (rankdata(sim, method="average") - 1.0) / (m - 1)
    omega = (1.0 - progress) + progress * ranks
    return AdaptiveWeights(torch.as_tensor(np.clip(omega, 0.0, 1.0), dtype=a.dtype), float(progress))


# -- Gaussian pyramid ---------------------------------------------------------

_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur_kernel(channels: int, dtype, device) -> torch.Tensor:
    k2 = torch.as_tensor(np.outer(_BINOMIAL, _BINOMIAL), dtype=dtype, device=device)
    return k2.expand(channels, 1, 5, 5).contiguous()


def pyramid_down(x: torch.Tensor) -> torch.Tensor:
    """5x5 binomial blur (replicate borders) followed by 2x decimation."""
    c = x.shape[1]
    blurred = F.conv2d(F.pad(x, (2, 2, 2, 2), mode="replicate"), _blur_kernel(c, x.dtype, x.device), groups=c)
    return blurred[:, :, ::2, ::2]


def gaussian_pyramid(image: torch.Tensor, levels: int) -> list[torch.Tensor]:
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    x = image if image.ndim == 4 else image.unsqueeze(0)
    h, w = x.shape[-2:]
    f = 2 ** (levels - 1)
    if h % f or w % f:
        raise ShapeError(f"{h}x{w} image is not divisible by {f} for a {levels}-level pyramid")
    out = [x]
    for _ in range(levels - 1):
        out.append(pyramid_down(out[-1]))
    return out if image.ndim == 4 else [lvl[0] for lvl in out]


def gp_loss(
    generated: torch.Tensor,
    gt: torch.Tensor,
    levels: int = 4,
    level_weights: Sequence[float] = (1.0, 2.0, 4.0, 8.0),
) -> torch.Tensor:
    """Weighted sum over pyramid levels of the mean absolute difference."""
    if generated.shape != gt.shape:
        raise ShapeError(f"shape mismatch {tuple(generated.shape)} vs {tuple(gt.shape)}")
    if len(level_weights) != levels:
        raise ValueError(f"need {levels} level weights, got {len(level_weights)}")
    pg = gaussian_pyramid(generated, levels)
    pt = gaussian_pyramid(gt, levels)
    return sum(w * (a - b).abs().mean() for w, a, b in zip(level_weights, pg, pt))


# -- adversarial --------------------------------------------------------------


@contextlib.contextmanager
def frozen(module: torch.nn.Module):
    """Temporarily stop gradients into ``module``'s parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def lsgan_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((real_logits - 1.0) ** 2).mean() + 0.5 * (fake_logits**2).mean()


def lsgan_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return ((fake_logits - 1.0) ** 2).mean()


def discriminator_loss(d, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Least-squares D loss; ``fake`` is detached so only D receives gradients."""
    return lsgan_d_loss(d(real), d(fake.detach()))


def generator_adv_loss(d, fake: torch.Tensor) -> torch.Tensor:
    """Least-squares G loss; D's parameters are frozen so only G receives gradients."""
    with frozen(d):
        return lsgan_g_loss(d(fake))


def adversarial_losses(d, real: torch.Tensor, fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(adv_g, adv_d)``."""
    return generator_adv_loss(d, fake), discriminator_loss(d, real, fake)


def total_objective(adv_g, mix_he, mix_gt, gp, lambda_gp: float = 10.0):
    """Generator objective ``adv_g + mix_he + mix_gt + lambda_gp * gp``.

    Works on floats or tensors; raises NonFiniteLoss on any NaN/Inf component.
    """
    if lambda_gp < 0:
        raise ValueError("lambda_gp must be non-negative")
    named = {"adv_g": adv_g, "mix_he": mix_he, "mix_gt": mix_gt, "gp": gp}
    bad = [k for k, v in named.items() if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v))]
    if bad:
        raise NonFiniteLoss(f"non-finite loss component(s): {', '.join(bad)}")
    return adv_g + mix_he + mix_gt + lambda_gp * gp
