"""
Patch contrastive losses
========================

Two forms of the patch contrastive loss on toy embeddings: the plain
PatchNCE loss and the mix-domain loss, whose denominator also holds the
other anchors of the generated image.
"""

import numpy as np
import torch

from stainmix.objectives import adaptive_weights, mix_domain_loss, patchnce_loss

rng = np.random.default_rng(0)


def unit_rows(m, d):
    x = rng.normal(size=(m, d))
    return torch.as_tensor(x / np.linalg.norm(x, axis=1, keepdims=True))


###############################################################################
# With two orthogonal anchors matched to themselves at temperature 1 the
# PatchNCE term of one anchor is -log(e / (e + 1)). Adding the other anchor
# as an extra negative raises it to log(e + 2) - 1.

eye = torch.eye(2, dtype=torch.float64)
print("PatchNCE per anchor  ", patchnce_loss(eye, eye, 1.0).item() / 2)
print("mix-domain per anchor", mix_domain_loss(eye, eye, 1.0).item() / 2)

###############################################################################
# The extra negatives can only enlarge the denominator, so on random sets
# the mix-domain loss is always the larger one.

for tau in (0.07, 0.5):
    a, p = unit_rows(16, 32), unit_rows(16, 32)
    print(f"tau={tau}: nce={patchnce_loss(a, p, tau).item():.3f} "
          f"mix={mix_domain_loss(a, p, tau).item():.3f}")

###############################################################################
# Pairs from a misaligned ground truth are down-weighted by rank of their
# similarity. Early in training every weight is 1; at the end the weights
# are the normalized ranks.

a, p = unit_rows(5, 8), unit_rows(5, 8)
for progress in (0.0, 0.5, 1.0):
    print(progress, np.round(adaptive_weights(a, p, progress).omega.numpy(), 3))
