"""Shared patch locations and the anchor / positive embedding sets built on them.

A patch is one spatial site of an encoder feature map; at a tap with
downsampling factor ``s`` it covers an ``s x s`` image region.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch

from .dataset import StainedImage
from .networks import GeneratorNet, ProjectorNet, image_to_tensor, project_patches


class NotEnoughLocations(ValueError):
    pass


class SetDomain(str, enum.Enum):
    ANCHOR_VIRTUAL = "ANCHOR_VIRTUAL"
    POS_HE = "POS_HE"
    POS_GT = "POS_GT"


@dataclass(frozen=True)
class PatchLocations:
    entries: tuple[tuple[int, int], ...]  # (tap position, flat spatial index)
    tap_shapes: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("duplicate patch locations")
        for tap, idx in self.entries:
            h, w = self.tap_shapes[tap]
            if not 0 <= idx < h * w:
                raise ValueError(f"index {idx} out of range for tap {tap} of shape {h}x{w}")

    @property
    def m_total(self) -> int:
        return len(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def rows_for_tap(self, tap: int) -> np.ndarray:
        return np.array([r for r, (t, _) in enumerate(self.entries) if t == tap], dtype=np.int64)

    def indices_for_tap(self, tap: int) -> np.ndarray:
        return np.array([i for t, i in self.entries if t == tap], dtype=np.int64)

    def permuted(self, perm: Sequence[int]) -> PatchLocations:
        return PatchLocations(tuple(self.entries[k] for k in perm), self.tap_shapes)


def allocate(counts: Sequence[int], m: int) -> list[int]:
    """Split ``m`` draws across taps proportionally to ``counts``; the remainder
    goes to the largest tap (spilling to the next largest if it is full)."""
    total = sum(counts)
    if m > total:
        raise NotEnoughLocations(f"requested {m} patches but only {total} sites exist")
    alloc = [m * c // total for c in counts]
    rest = m - sum(alloc)
    for k in sorted(range(len(counts)), key=lambda k: (-counts[k], k)):
        take = min(rest, counts[k] - alloc[k])
        alloc[k] += take
        rest -= take
    return alloc


def sample_locations(
    tap_shapes: Sequence[tuple[int, int]], m: int, rng: np.random.Generator
) -> PatchLocations:
    """Draw ``m`` distinct sites across the taps, uniformly within each tap."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    shapes = tuple((int(h), int(w)) for h, w in tap_shapes)
    counts = [h * w for h, w in shapes]
    entries: list[tuple[int, int]] = []
    for tap, (count, k) in enumerate(zip(counts, allocate(counts, m))):
        idx = rng.permutation(count)[:k]
        entries.extend((tap, int(i)) for i in idx)
    return PatchLocations(tuple(entries), shapes)


@dataclass
class EmbeddingSet:
    vectors: torch.Tensor  # M x D, unit rows, ordered like locations.entries
    domain: SetDomain
    locations: PatchLocations

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def by_tap(self) -> Iterator[torch.Tensor]:
        """Row blocks per tap, in tap order (taps with no sampled rows are skipped)."""
        for tap in range(len(self.locations.tap_shapes)):
            rows = self.locations.rows_for_tap(tap)
            if len(rows):
                yield self.vectors[torch.as_tensor(rows)]


def _gather(feat: torch.Tensor, idx: np.ndarray) -> torch.Tensor:
    # 1 x C x h x w -> M x C
    flat = feat.flatten(2)[0]
    return flat[:, torch.as_tensor(idx)].t()


def embed_at(
    g: GeneratorNet, p: ProjectorNet, x: torch.Tensor, locs: PatchLocations
) -> torch.Tensor:
    """Embeddings of image tensor ``x`` at ``locs`` (rows in locs order)."""
    feats = g.encode(x)
    tap_ids = g.feature_taps
    if len(feats) != len(locs.tap_shapes):
        raise ValueError("locations were not sampled from this generator's taps")
    blocks, order = [], []
    for pos, (tap_id, feat) in enumerate(zip(tap_ids, feats)):
        if tuple(feat.shape[-2:]) != locs.tap_shapes[pos]:
            raise ValueError(
                f"tap {tap_id} has shape {tuple(feat.shape[-2:])}, locations expect {locs.tap_shapes[pos]}"
            )
        rows = locs.rows_for_tap(pos)
        if not len(rows):
            continue
        blocks.append(project_patches(p, _gather(feat, locs.indices_for_tap(pos)), tap_id))
        order.append(rows)
    stacked = torch.cat(blocks)
    inverse = np.argsort(np.concatenate(order), kind="stable")
    return stacked[torch.as_tensor(inverse)]


def _as_input(image, dtype) -> torch.Tensor:
    if isinstance(image, StainedImage):
        return image_to_tensor(image, dtype=dtype)
    return image


def build_sets(
    g: GeneratorNet,
    p: ProjectorNet,
    he,
    virtual_ihc,
    ihc_gt,
    locs: PatchLocations,
    detach_gt: bool = True,
) -> tuple[EmbeddingSet, EmbeddingSet, EmbeddingSet]:
    """Anchor, H&E-positive and ground-truth-positive sets on shared locations.

    Images may be StainedImage (pixels in [0, 1]) or model-range tensors.
    Gradients flow through the anchor and H&E branches; the ground-truth
    branch is computed without grad unless ``detach_gt`` is False.
    """
    dtype = next(g.parameters()).dtype
    x_he, x_v, x_gt = (_as_input(im, dtype) for im in (he, virtual_ihc, ihc_gt))
    if not (x_he.shape == x_v.shape == x_gt.shape):
        raise ValueError("the three images must share one size")
    anchors = embed_at(g, p, x_v, locs)
    pos_he = embed_at(g, p, x_he, locs)
    if detach_gt:
        with torch.no_grad():
            pos_gt = embed_at(g, p, x_gt, locs)
    else:
        pos_gt = embed_at(g, p, x_gt, locs)
    return (
        EmbeddingSet(anchors, SetDomain.ANCHOR_VIRTUAL, locs),
        EmbeddingSet(pos_he, SetDomain.POS_HE, locs),
        EmbeddingSet(pos_gt, SetDomain.POS_GT, locs),
    )
