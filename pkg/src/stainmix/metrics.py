"""FID, KID and layer-wise PHV between generated and ground-truth image sets.

Features come from a registered extractor: a deterministic callable mapping
an ``N x 3 x H x W`` batch in [0, 1] to four feature maps ("layers 1-4").
``tiny-cnn`` is a fixed-seed random CNN that needs no downloads; it is what
the test-suite uses. ``inception-v3`` wraps torchvision's pretrained
network and is only available when its weights can be loaded.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn

log = logging.getLogger(__name__)

REPORT_FORMAT = "stainmix-metrics/1"


class ExtractorUnavailable(LookupError):
    pass


class InsufficientSamples(ValueError):
    pass


class SqrtmFailure(ArithmeticError):
    pass


class PairMismatch(ValueError):
    pass


@dataclass
class FeatureMatrix:
    rows: np.ndarray  # N x F
    extractor_id: str
    layer_id: int | None = None

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("feature matrix contains non-finite values")

    @property
    def n(self) -> int:
        return self.rows.shape[0]


# -- extractors -------------------------------------------------------------

Extractor = Callable[[torch.Tensor], list[torch.Tensor]]
_FACTORIES: dict[str, Callable[[], Extractor]] = {}
_CACHE: dict[str, Extractor] = {}


def register_extractor(extractor_id: str, factory: Callable[[], Extractor]) -> None:
    _FACTORIES[extractor_id] = factory
    _CACHE.pop(extractor_id, None)


def available_extractors() -> list[str]:
    return sorted(_FACTORIES)


def get_extractor(extractor_id: str) -> Extractor:
    if extractor_id not in _CACHE:
        if extractor_id not in _FACTORIES:
            raise ExtractorUnavailable(
                f"unknown extractor {extractor_id!r}; registered: {available_extractors()}"
            )
        _CACHE[extractor_id] = _FACTORIES[extractor_id]()
    return _CACHE[extractor_id]


class TinyCNN(nn.Module):
    """Four stride-2 conv stages with frozen fixed-seed weights."""

    def __init__(self, widths: Sequence[int] = (16, 32, 32, 32), seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            chans = (3, *widths)
            self.stages = nn.ModuleList(
                nn.Sequential(nn.Conv2d(chans[k], chans[k + 1], 3, stride=2, padding=1), nn.LeakyReLU(0.2))
                for k in range(len(widths))
            )
        self.double().eval().requires_grad_(False)

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = x.double() * 2.0 - 1.0
        out = []
        for stage in self.stages:
            h = stage(h)
            out.append(h)
        return out


def _inception_factory() -> Extractor:
    try:
        from torchvision.models import Inception_V3_Weights, inception_v3
        from torchvision.models.feature_extraction import create_feature_extractor

        net = inception_v3(weights=Inception_V3_Weights.DEFAULT, aux_logits=True).eval()
    except Exception as exc:  # missing package, no network, corrupt cache
        raise ExtractorUnavailable(f"pretrained InceptionV3 could not be loaded: {exc}") from exc
    nodes = {"maxpool1": "1", "maxpool2": "2", "Mixed_6e": "3", "Mixed_7c": "4"}
    body = create_feature_extractor(net, return_nodes=nodes)
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    @torch.no_grad()
    def run(x: torch.Tensor) -> list[torch.Tensor]:
        x = torch.nn.functional.interpolate(x.float(), size=(299, 299), mode="bilinear", align_corners=False)
        feats = body((x - mean) / std)
        return [feats[k].double() for k in ("1", "2", "3", "4")]

    return run


register_extractor("tiny-cnn", TinyCNN)
register_extractor("inception-v3", _inception_factory)


def _as_pixels(image) -> np.ndarray:
    return np.asarray(image.pixels if hasattr(image, "pixels") else image, dtype=np.float64)


def extract_feature_maps(images: Sequence, extractor_id: str = "tiny-cnn",
                         layers: Sequence[int] = (1, 2, 3, 4)) -> dict[int, list[np.ndarray]]:
    """Per layer, the C x h x w feature map of every image (input order)."""
    net = get_extractor(extractor_id)
    out: dict[int, list[np.ndarray]] = {layer: [] for layer in layers}
    for image in images:
        px = _as_pixels(image)
        x = torch.as_tensor(np.ascontiguousarray(px.transpose(2, 0, 1)))[None]
        maps = net(x)
        for layer in layers:
            out[layer].append(maps[layer - 1][0].cpu().numpy())
    return out


def extract_features(images: Sequence, extractor_id: str = "tiny-cnn",
                     layers: Sequence[int] = (4,)) -> dict[int, FeatureMatrix]:
    """Spatially averaged features per layer; row i belongs to image i."""
    maps = extract_feature_maps(images, extractor_id, layers)
    return {
        layer: FeatureMatrix(np.stack([m.mean(axis=(1, 2)) for m in maps[layer]]), extractor_id, layer)
        for layer in layers
    }


# -- distribution metrics -----------------------------------------------------


def _rows(x) -> np.ndarray:
    arr = x.rows if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)
    return arr.reshape(-1, 1) if arr.ndim == 1 else arr


def fid(a, b) -> float:
    """Frechet distance between Gaussians fitted to two feature sets."""
    xa, xb = _rows(a), _rows(b)
    if xa.shape[0] < 2 or xb.shape[0] < 2:
        raise InsufficientSamples("FID needs at least two samples per set")
    if xa.shape[1] != xb.shape[1]:
        raise ValueError(f"feature sizes differ: {xa.shape[1]} vs {xb.shape[1]}")
    mu_a, mu_b = xa.mean(axis=0), xb.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(xa, rowvar=False))
    cov_b = np.atleast_2d(np.cov(xb, rowvar=False))

    covmean, _ = scipy.linalg.sqrtm(cov_a @ cov_b, disp=False)
    if not np.all(np.isfinite(covmean)):
        # singular product: retry with a small ridge, as is customary
        eps = 1e-6 * np.eye(cov_a.shape[0])
        covmean, _ = scipy.linalg.sqrtm((cov_a + eps) @ (cov_b + eps), disp=False)
        if not np.all(np.isfinite(covmean)):
            raise SqrtmFailure("matrix square root of the covariance product did not converge")
    covmean = np.real(covmean)

    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean))
    if value < 0.0:
        if value < -1e-6:
            log.warning("FID came out negative (%.3g); clamped to 0", value)
        value = 0.0
    return value


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m = x.shape[0]
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    return float(
        (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        + (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
        - 2.0 * kxy.mean()
    )


def kid(a, b, subset_size: int | None = None, n_subsets: int = 10,
        rng: np.random.Generator | int | None = 0) -> float:
    """Mean unbiased MMD^2 (cubic polynomial kernel) over random subsets."""
    xa, xb = _rows(a), _rows(b)
    if xa.shape[1] != xb.shape[1]:
        raise ValueError(f"feature sizes differ: {xa.shape[1]} vs {xb.shape[1]}")
    n = min(xa.shape[0], xb.shape[0])
    m = min(n, 100) if subset_size is None else subset_size
    if m < 2 or m > n:
        raise InsufficientSamples(f"subset size {m} needs 2 <= size <= {n}")
    rng = np.random.default_rng(rng)
    vals = []
    for _ in range(n_subsets):
        ia = rng.choice(xa.shape[0], m, replace=False)
        ib = rng.choice(xb.shape[0], m, replace=False)
        vals.append(mmd2_unbiased(xa[ia], xb[ib]))
    return float(np.mean(vals))


def phv(a_layers: Sequence[Sequence[np.ndarray]], b_layers: Sequence[Sequence[np.ndarray]],
        T: float = 0.01) -> tuple[list[float], float]:
    """Layer-wise perceptual hash difference between paired images.

    ``a_layers[l][n]`` is the layer-l feature map of image n. For each pair
    both maps are rescaled to [0, 1] by their joint min/max; the layer value
    is the fraction of elements differing by more than ``T``, averaged over
    pairs. Returns (per-layer values, their mean).
    """
    if T <= 0:
        raise ValueError("threshold must be positive")
    if len(a_layers) != len(b_layers):
        raise PairMismatch(f"{len(a_layers)} vs {len(b_layers)} layers")
    per_layer = []
    for la, lb in zip(a_layers, b_layers):
        if len(la) != len(lb) or not len(la):
            raise PairMismatch(f"{len(la)} vs {len(lb)} images in a layer")
        fractions = []
        for fa, fb in zip(la, lb):
            fa, fb = np.asarray(fa, dtype=np.float64), np.asarray(fb, dtype=np.float64)
            if fa.shape != fb.shape:
                raise PairMismatch(f"feature shapes differ: {fa.shape} vs {fb.shape}")
            lo = min(fa.min(), fb.min())
            span = max(fa.max(), fb.max()) - lo
            if span == 0.0:
                fractions.append(0.0)
                continue
            fractions.append(float(np.mean(np.abs(fa - fb) / span > T)))
        per_layer.append(float(np.mean(fractions)))
    return per_layer, float(np.mean(per_layer))


# -- reports -------------------------------------------------------------------


@dataclass
class MetricConfig:
    extractor_id: str = "tiny-cnn"
    phv_threshold: float = 0.01
    phv_layers: tuple[int, ...] = (1, 2, 3, 4)
    fid_layer: int = 4
    kid_subset_size: int | None = None
    kid_n_subsets: int = 10
    seed: int = 0


@dataclass
class MetricReport:
    fid: float
    kid_x1000: float
    phv_layers: list[float]
    phv_average: float
    n_images: int
    threshold_T: float
    extractor_id: str = "tiny-cnn"

    def __post_init__(self):
        self.phv_layers = [float(v) for v in self.phv_layers]
        if abs(self.phv_average - float(np.mean(self.phv_layers))) > 1e-9:
            raise ValueError("phv_average must equal the mean of phv_layers")
        if self.fid < 0:
            raise ValueError("FID must be non-negative")

    @property
    def kid(self) -> float:
        return self.kid_x1000 / 1000.0

    def summary(self) -> str:
        return f"FID={self.fid:.6g} KID(x1000)={self.kid_x1000:.6g} PHV(avg)={self.phv_average:.4f}"

    def to_text(self) -> str:
        lines = [
            f"format={REPORT_FORMAT}",
            f"fid={self.fid!r}",
            f"kid_x1000={self.kid_x1000!r}",
        ]
        lines += [f"phv_layer{k + 1}={v!r}" for k, v in enumerate(self.phv_layers)]
        lines += [
            f"phv_average={self.phv_average!r}",
            f"n_images={self.n_images}",
            f"threshold_T={self.threshold_T!r}",
            f"extractor_id={self.extractor_id}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> MetricReport:
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"malformed report line: {line!r}")
            kv[key.strip()] = value.strip()
        if kv.get("format") != REPORT_FORMAT:
            raise ValueError(f"not a {REPORT_FORMAT} report")
        n_layers = sum(1 for k in kv if k.startswith("phv_layer"))
        return cls(
            fid=float(kv["fid"]),
            kid_x1000=float(kv["kid_x1000"]),
            phv_layers=[float(kv[f"phv_layer{k + 1}"]) for k in range(n_layers)],
            phv_average=float(kv["phv_average"]),
            n_images=int(kv["n_images"]),
            threshold_T=float(kv["threshold_T"]),
            extractor_id=kv.get("extractor_id", "tiny-cnn"),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path: str | Path) -> MetricReport:
        return cls.from_text(Path(path).read_text())


def compute_report(generated: Sequence, ground_truth: Sequence, cfg: MetricConfig | None = None) -> MetricReport:
    """All metrics for two image lists paired by position."""
    cfg = cfg or MetricConfig()
    if len(generated) != len(ground_truth):
        raise PairMismatch(f"{len(generated)} generated vs {len(ground_truth)} ground-truth images")
    layers = sorted(set(cfg.phv_layers) | {cfg.fid_layer})
    maps_g = extract_feature_maps(generated, cfg.extractor_id, layers)
    maps_t = extract_feature_maps(ground_truth, cfg.extractor_id, layers)

    def pooled(maps):
        return FeatureMatrix(np.stack([m.mean(axis=(1, 2)) for m in maps[cfg.fid_layer]]),
                             cfg.extractor_id, cfg.fid_layer)

    fg, ft = pooled(maps_g), pooled(maps_t)
    phv_vals, phv_avg = phv([maps_g[k] for k in cfg.phv_layers], [maps_t[k] for k in cfg.phv_layers],
                            cfg.phv_threshold)
    return MetricReport(
        fid=fid(fg, ft),
        kid_x1000=1000.0 * kid(fg, ft, cfg.kid_subset_size, cfg.kid_n_subsets, cfg.seed),
        phv_layers=phv_vals,
        phv_average=phv_avg,
        n_images=len(generated),
        threshold_T=cfg.phv_threshold,
        extractor_id=cfg.extractor_id,
    )
