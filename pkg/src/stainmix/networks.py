"""Generator, PatchGAN discriminator and patch projection heads, plus checkpoint I/O."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn

from .dataset import Domain, StainedImage

CHECKPOINT_FORMAT = "stainmix-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class DegenerateEmbedding(ArithmeticError):
    pass


class CheckpointFormatError(Exception):
    pass


@dataclass
class NetworkConfig:
    """Architecture hyperparameters. Defaults are the CPU-sized ones; see :meth:`full_scale`."""

    base_width: int = 32
    n_down: int = 2
    n_res_blocks: int = 3
    # encoder layer ids: 0 = first conv stage, 1..n_down = downsampling stages,
    # n_down+1.. = residual block outputs
    feature_taps: tuple[int, ...] = (0, 1, 2)
    embed_dim: int = 256
    disc_width: int = 32
    disc_layers: int = 3
    init_gain: float = 0.02
    seed: int = 0

    @classmethod
    def full_scale(cls, **overrides) -> NetworkConfig:
        cfg = dict(base_width=64, n_res_blocks=6, disc_width=64)
        cfg.update(overrides)
        return cls(**cfg)

    def __post_init__(self):
        self.feature_taps = tuple(int(t) for t in self.feature_taps)
        n_layers = 1 + self.n_down + self.n_res_blocks
        if not self.feature_taps or any(t < 0 or t >= n_layers for t in self.feature_taps):
            raise ValueError(f"feature taps must lie in [0, {n_layers})")
        if len(set(self.feature_taps)) != len(self.feature_taps):
            raise ValueError("duplicate feature taps")


def image_to_tensor(image: StainedImage | np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """[0, 1] H x W x 3 pixels -> 1 x 3 x H x W tensor in the model range [-1, 1]."""
    px = image.pixels if isinstance(image, StainedImage) else np.asarray(image)
    t = torch.as_tensor(np.ascontiguousarray(px.transpose(2, 0, 1)), dtype=dtype)
    return (t * 2.0 - 1.0).unsqueeze(0)


def tensor_to_pixels(t: torch.Tensor) -> np.ndarray:
    """1 x 3 x H x W model-range tensor -> H x W x 3 float64 pixels in [0, 1]."""
    arr = t.detach().to(torch.float64).cpu().numpy()[0].transpose(1, 2, 0)
    return np.clip((arr + 1.0) / 2.0, 0.0, 1.0)


class ResnetBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.block(x)


class GeneratorNet(nn.Module):
    """ResNet encoder/decoder generator with tanh output.

    ``encoder`` is a flat list of layers whose outputs can be tapped for patch
    sampling: the 7x7 stem, each stride-2 stage, then each residual block.
    """

    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        cfg = cfg or NetworkConfig()
        self.cfg = cfg
        w = cfg.base_width

        layers: list[nn.Module] = [
            nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(3, w, 7), nn.InstanceNorm2d(w), nn.ReLU(True))
        ]
        channels = [w]
        factors = [1]
        ch = w
        for k in range(cfg.n_down):
            layers.append(
                nn.Sequential(
                    nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(ch * 2), nn.ReLU(True)
                )
            )
            ch *= 2
            channels.append(ch)
            factors.append(2 ** (k + 1))
        for _ in range(cfg.n_res_blocks):
            layers.append(ResnetBlock(ch))
            channels.append(ch)
            factors.append(factors[-1])
        self.encoder = nn.ModuleList(layers)
        self._layer_channels = channels
        self._layer_factors = factors

        dec: list[nn.Module] = []
        for _ in range(cfg.n_down):
            dec += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(ch // 2),
                nn.ReLU(True),
            ]
            ch //= 2
        dec += [nn.ReflectionPad2d(3), nn.Conv2d(ch, 3, 7), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

    @property
    def feature_taps(self) -> tuple[int, ...]:
        return self.cfg.feature_taps

    @property
    def downsampling(self) -> int:
        return 2 ** self.cfg.n_down

    def tap_factor(self, tap: int) -> int:
        return self._layer_factors[tap]

    def tap_channels(self, tap: int) -> int:
        return self._layer_channels[tap]

    def tap_shapes(self, height: int, width: int) -> list[tuple[int, int]]:
        return [(height // self.tap_factor(t), width // self.tap_factor(t)) for t in self.feature_taps]

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected N x 3 x H x W input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        f = self.downsampling
        if h % f or w % f:
            raise ShapeError(f"input {h}x{w} is not divisible by the total downsampling {f}")

    def encode(self, x: torch.Tensor, taps: Sequence[int] | None = None) -> list[torch.Tensor]:
        """Feature maps at ``taps`` (default: the configured taps), in tap order."""
        self.check_input(x)
        taps = self.feature_taps if taps is None else tuple(taps)
        last = max(taps)
        out = {}
        h = x
        for idx, layer in enumerate(self.encoder):
            h = layer(h)
            if idx in taps:
                out[idx] = h
            if idx == last:
                break
        return [out[t] for t in taps]

    def forward(self, x: torch.Tensor, with_features: bool = False):
        self.check_input(x)
        feats = []
        h = x
        for idx, layer in enumerate(self.encoder):
            h = layer(h)
            if with_features and idx in self.feature_taps:
                feats.append(h)
        y = self.decoder(h)
        return (y, feats) if with_features else y


class DiscriminatorNet(nn.Module):
    """PatchGAN: a grid of per-patch real/fake logits."""

    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        cfg = cfg or NetworkConfig()
        w = cfg.disc_width
        layers: list[nn.Module] = [nn.Conv2d(3, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, cfg.disc_layers):
            prev, mult = mult, min(2 ** n, 8)
            layers += [
                nn.Conv2d(w * prev, w * mult, 4, stride=2, padding=1),
                nn.InstanceNorm2d(w * mult),
                nn.LeakyReLU(0.2, True),
            ]
        prev, mult = mult, min(2 ** cfg.disc_layers, 8)
        layers += [
            nn.Conv2d(w * prev, w * mult, 4, stride=1, padding=1),
            nn.InstanceNorm2d(w * mult),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(w * mult, 1, 4, stride=1, padding=1),
        ]
        self.model = nn.Sequential(*layers)
        self._convs = [m for m in self.model if isinstance(m, nn.Conv2d)]

    @property
    def receptive_field(self) -> int:
        rf = 1
        for conv in reversed(self._convs):
            rf = (rf - 1) * conv.stride[0] + conv.kernel_size[0]
        return rf

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        h, w = height, width
        for conv in self._convs:
            k, s, p = conv.kernel_size[0], conv.stride[0], conv.padding[0]
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
        return h, w

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected N x 3 x H x W input, got {tuple(x.shape)}")
        h, w = self.output_size(*x.shape[-2:])
        if h < 1 or w < 1:
            raise ShapeError(f"input {tuple(x.shape[-2:])} is too small for this discriminator")
        return self.model(x)


class ProjectorNet(nn.Module):
    """One Linear-ReLU-Linear head per feature tap, followed by L2 normalization."""

    def __init__(self, tap_channels: dict[int, int], embed_dim: int = 256):
        super().__init__()
        self.embed_dim = embed_dim
        self.taps = tuple(tap_channels)
        self.heads = nn.ModuleDict(
            {
                str(t): nn.Sequential(nn.Linear(c, embed_dim), nn.ReLU(True), nn.Linear(embed_dim, embed_dim))
                for t, c in tap_channels.items()
            }
        )

    @classmethod
    def for_generator(cls, g: GeneratorNet, embed_dim: int | None = None) -> ProjectorNet:
        dim = g.cfg.embed_dim if embed_dim is None else embed_dim
        return cls({t: g.tap_channels(t) for t in g.feature_taps}, dim)

    def forward(self, raw: torch.Tensor, tap: int) -> torch.Tensor:
        if raw.ndim != 2 or raw.shape[0] < 1:
            raise ShapeError(f"expected an M x C matrix with M >= 1, got {tuple(raw.shape)}")
        z = self.heads[str(tap)](raw)
        norms = z.norm(dim=1, keepdim=True)
        if bool((norms < 1e-12).any()):
            raise DegenerateEmbedding(f"projection head {tap} produced a zero-norm row")
        return z / norms


def init_weights(net: nn.Module, gain: float = 0.02) -> None:
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            # non-zero biases keep all-zero feature rows off the origin
            nn.init.normal_(m.weight, 0.0, gain)
            nn.init.normal_(m.bias, 0.0, gain)


@dataclass
class Networks:
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    projector: ProjectorNet
    cfg: NetworkConfig = field(default_factory=NetworkConfig)


def build_networks(cfg: NetworkConfig | None = None) -> Networks:
    """Build and initialize all three networks from ``cfg.seed`` without
    touching the global torch RNG."""
    cfg = cfg or NetworkConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        g = GeneratorNet(cfg)
        d = DiscriminatorNet(cfg)
        p = ProjectorNet.for_generator(g)
        for net in (g, d, p):
            init_weights(net, cfg.init_gain)
    return Networks(g, d, p, cfg)


def generator_forward(g: GeneratorNet, image: StainedImage) -> tuple[StainedImage, list[torch.Tensor]]:
    """Translate one image; returns the virtual IHC image and the tap feature maps."""
    x = image_to_tensor(image, dtype=next(g.parameters()).dtype)
    with torch.no_grad():
        y, feats = g(x, with_features=True)
    virtual = StainedImage(tensor_to_pixels(y), Domain.IHC_VIRTUAL, image.source_id)
    return virtual, feats


def discriminator_forward(d: DiscriminatorNet, image: StainedImage | torch.Tensor) -> torch.Tensor:
    x = image if isinstance(image, torch.Tensor) else image_to_tensor(image, next(d.parameters()).dtype)
    return d(x)


def project_patches(p: ProjectorNet, raw_patch_features: torch.Tensor, tap_id: int) -> torch.Tensor:
    """M x C raw tap features -> M x D unit-norm embeddings."""
    if not bool(torch.isfinite(raw_patch_features).all()):
        raise ValueError("raw patch features must be finite")
    return p(raw_patch_features, tap_id)


# -- checkpoints ------------------------------------------------------------
#
# A checkpoint is a torch-serialized dict:
#   format   "stainmix-checkpoint"
#   version  1
#   arch     NetworkConfig fields
#   weights  {"generator", "discriminator", "projector"} -> state_dict
#   epoch    number of completed epochs
#   extra    free-form trainer payload (optimizer state, rng state, config)


def save_checkpoint(path: str | Path, nets: Networks, epoch: int, extra: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": asdict(nets.cfg),
        "weights": {
            "generator": nets.generator.state_dict(),
            "discriminator": nets.discriminator.state_dict(),
            "projector": nets.projector.state_dict(),
        },
        "epoch": int(epoch),
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def read_checkpoint(path: str | Path) -> dict[str, Any]:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {payload.get('version')!r}")
    for key in ("arch", "weights", "epoch"):
        if key not in payload:
            raise CheckpointFormatError(f"checkpoint {path} lacks {key!r}")
    return payload


def load_checkpoint(path: str | Path) -> tuple[Networks, dict[str, Any]]:
    """Rebuild the networks stored in ``path``; returns them with the raw payload."""
    payload = read_checkpoint(path)
    try:
        nets = build_networks(NetworkConfig(**payload["arch"]))
        nets.generator.load_state_dict(payload["weights"]["generator"])
        nets.discriminator.load_state_dict(payload["weights"]["discriminator"])
        nets.projector.load_state_dict(payload["weights"]["projector"])
    except (TypeError, KeyError, RuntimeError, ValueError) as exc:
        raise CheckpointFormatError(f"checkpoint {path} does not match its architecture: {exc}") from exc
    return nets, payload
