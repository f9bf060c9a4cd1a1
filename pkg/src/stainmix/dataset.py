"""Paired-directory H&E/IHC datasets, aligned cropping and a synthetic toy set.

Layout on disk::

    <root>/<split>/HE/<stem>.png|jpg
    <root>/<split>/IHC/<stem>.png|jpg

Images are decoded to float64 arrays in [0, 1] (8-bit value / 255).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DatasetError(Exception):
    pass


class MissingCounterpart(DatasetError):
    pass


class DimensionMismatch(DatasetError):
    pass


class EmptyDataset(DatasetError):
    pass


class CropTooLarge(DatasetError, ValueError):
    pass


class IoFailure(DatasetError, OSError):
    pass


class Domain(str, enum.Enum):
    HE = "HE"
    IHC_REAL = "IHC_REAL"
    IHC_VIRTUAL = "IHC_VIRTUAL"


@dataclass(frozen=True)
class StainedImage:
    pixels: np.ndarray
    domain: Domain
    source_id: str = ""
    # (top, left) of this image inside the image it was cropped from
    origin: tuple[int, int] = field(default=(0, 0), compare=False)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected an H x W x 3 array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must be finite and within [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class MatchedPair:
    he: StainedImage
    ihc_gt: StainedImage
    pair_id: str

    def __post_init__(self):
        if self.he.domain is not Domain.HE or self.ihc_gt.domain is not Domain.IHC_REAL:
            raise ValueError("a matched pair holds exactly one HE and one IHC_REAL image")
        if self.he.pixels.shape[:2] != self.ihc_gt.pixels.shape[:2]:
            raise DimensionMismatch(
                f"pair {self.pair_id}: HE is {self.he.pixels.shape[:2]}, "
                f"IHC is {self.ihc_gt.pixels.shape[:2]}"
            )


def load_image(path: str | Path) -> np.ndarray:
    """Decode an 8-bit RGB file into an H x W x 3 float array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise IoFailure(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(pixels), mode="RGB").save(path)
    except OSError as exc:
        raise IoFailure(f"cannot write image {path}: {exc}") from exc


def list_images(directory: str | Path) -> dict[str, Path]:
    """Map file stem -> path for every image file directly under ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        return {}
    found: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in found:
                raise DatasetError(f"duplicate stem {p.stem!r} in {directory}")
            found[p.stem] = p
    return found


def scan_dataset(root: str | Path, split: str = "train") -> list[MatchedPair]:
    """Load every HE/IHC pair of ``split``, sorted by pair id (the shared file stem)."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    base = Path(root) / split
    he_files = list_images(base / "HE")
    ihc_files = list_images(base / "IHC")
    if not he_files and not ihc_files:
        raise EmptyDataset(f"no images under {base}/HE or {base}/IHC")

    only_he = sorted(set(he_files) - set(ihc_files))
    only_ihc = sorted(set(ihc_files) - set(he_files))
    if only_he or only_ihc:
        raise MissingCounterpart(
            f"unpaired stems in {base}: HE-only {only_he}, IHC-only {only_ihc}"
        )

    pairs = []
    for stem in sorted(he_files):
        he = StainedImage(load_image(he_files[stem]), Domain.HE, stem)
        ihc = StainedImage(load_image(ihc_files[stem]), Domain.IHC_REAL, stem)
        pairs.append(MatchedPair(he, ihc, stem))
    return pairs


def crop_offset(height: int, width: int, size: int, rng: np.random.Generator) -> tuple[int, int]:
    if size < 1 or size > min(height, width):
        raise CropTooLarge(f"crop {size} does not fit a {height}x{width} image")
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    return top, left


def _crop(img: StainedImage, top: int, left: int, size: int) -> StainedImage:
    px = img.pixels[top:top + size, left:left + size]
    origin = (img.origin[0] + top, img.origin[1] + left)
    return replace(img, pixels=px, origin=origin)


def random_crop_pair(pair: MatchedPair, size: int, rng: np.random.Generator) -> MatchedPair:
    """Crop both images of ``pair`` with one shared random window."""
    top, left = crop_offset(pair.he.height, pair.he.width, size, rng)
    return MatchedPair(
        _crop(pair.he, top, left, size), _crop(pair.ihc_gt, top, left, size), pair.pair_id
    )


# Toy "stain" remap. Acts on 8-bit values so that the written IHC file is
# exactly reproducible from the written HE file:
#   ihc = round(255 * clip(RECOLOR_MATRIX @ (he / 255) + RECOLOR_OFFSET, 0, 1)) / 255
# Pink background maps to a pale cream, purple nuclei to a dark brown-grey.
RECOLOR_MATRIX = np.array(
    [
        [0.10, 0.70, 0.30],
        [-0.20, 0.95, 0.15],
        [-0.55, 0.45, 0.75],
    ]
)
RECOLOR_OFFSET = np.array([0.05, 0.10, 0.10])

_HE_BACKGROUND = np.array([0.94, 0.78, 0.87])
_HE_PALETTE = np.array(
    [
        [0.42, 0.22, 0.58],  # hematoxylin-ish nuclei
        [0.55, 0.30, 0.65],
        [0.86, 0.45, 0.62],  # eosin-ish stroma
        [0.78, 0.38, 0.55],
    ]
)


def oracle_recolor(image: np.ndarray) -> np.ndarray:
    """Deterministic per-pixel HE -> toy-IHC color map (H x W x 3 in [0, 1]).

    Inputs are first snapped to the 8-bit grid, outputs land on it too.
    """
    u = to_uint8(image).astype(np.float64) / 255.0
    out = u @ RECOLOR_MATRIX.T + RECOLOR_OFFSET
    return to_uint8(np.clip(out, 0.0, 1.0)).astype(np.float64) / 255.0


def _toy_he_image(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.broadcast_to(_HE_BACKGROUND, (size, size, 3)).copy()
    img += rng.normal(0.0, 0.02, size=(size, size, 3))
    n_blobs = int(rng.integers(4, 10))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, size, size=2)
        ry, rx = rng.uniform(size / 20, size / 6, size=2)
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        dy, dx = yy - cy, xx - cx
        u = (c * dx + s * dy) / rx
        v = (-s * dx + c * dy) / ry
        mask = u * u + v * v <= 1.0
        color = _HE_PALETTE[rng.integers(len(_HE_PALETTE))]
        img[mask] = color + rng.normal(0.0, 0.03, size=3)
    return np.clip(img, 0.0, 1.0)


def make_toy_dataset(
    root: str | Path,
    n: int,
    size: int = 64,
    rng: np.random.Generator | int | None = 0,
    split: str = "train",
) -> None:
    """Write ``n`` synthetic pairs: blob images on a pink background and their
    :func:`oracle_recolor` remaps."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(rng)
    base = Path(root) / split
    width = max(3, len(str(n - 1)))
    for k in range(n):
        he = to_uint8(_toy_he_image(size, rng)).astype(np.float64) / 255.0
        stem = f"toy_{k:0{width}d}"
        save_image(he, base / "HE" / f"{stem}.png")
        save_image(oracle_recolor(he), base / "IHC" / f"{stem}.png")
