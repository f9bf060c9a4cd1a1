"""Training loop, tiled translation and directory-level evaluation."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch

from .dataset import (
    MatchedPair,
    StainedImage,
    list_images,
    load_image,
    random_crop_pair,
    save_image,
    scan_dataset,
)
from .metrics import MetricConfig, MetricReport, PairMismatch, compute_report
from .networks import (
    GeneratorNet,
    NetworkConfig,
    Networks,
    build_networks,
    image_to_tensor,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    tensor_to_pixels,
)
from .objectives import (
    ContrastiveConfig,
    LossBreakdown,
    NonFiniteLoss,
    Variant,
    adaptive_weights,
    contrastive_loss,
    discriminator_loss,
    generator_adv_loss,
    gp_loss,
    total_objective,
)
from .patching import EmbeddingSet, build_sets, sample_locations

log = logging.getLogger(__name__)

TRACE_FIELDS = ("iteration", "epoch", "lr", "adv_g", "adv_d", "mix_he", "mix_gt", "gp", "total_g")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Everything a training run depends on. Defaults follow the published
    setup; :meth:`desk` shrinks the model and crop for CPU runs."""

    epochs: int = 40
    decay_start: int = 30
    lr0: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    crop: int = 512
    m_patches: int = 256
    tau: float = 0.07
    lambda_gp: float = 10.0
    loss_variant: Variant = Variant.MIX_DOMAIN
    use_gt_branch: bool = True
    detach_gt: bool = True
    # "tap_mean": average over taps of the per-tap sum over anchors; "sum": sum over everything
    contrastive_reduction: str = "tap_mean"
    gp_levels: int = 4
    gp_weights: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    grad_accum: int = 1
    max_iterations: int | None = None
    seed: int = 0
    # architecture
    base_width: int = 64
    n_down: int = 2
    n_res_blocks: int = 6
    feature_taps: tuple[int, ...] = (0, 1, 2)
    embed_dim: int = 256
    disc_width: int = 64
    disc_layers: int = 3

    def __post_init__(self):
        if isinstance(self.loss_variant, str):
            self.loss_variant = Variant(self.loss_variant.upper())
        self.gp_weights = tuple(float(w) for w in self.gp_weights)
        self.feature_taps = tuple(int(t) for t in self.feature_taps)
        if not 0 < self.decay_start <= self.epochs:
            raise ConfigError(f"need 0 < decay_start <= epochs, got {self.decay_start} and {self.epochs}")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if self.m_patches < 1:
            raise ConfigError("m_patches must be >= 1")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.lambda_gp < 0:
            raise ConfigError("lambda_gp must be non-negative")
        if self.contrastive_reduction not in ("tap_mean", "sum"):
            raise ConfigError("contrastive_reduction must be 'tap_mean' or 'sum'")
        if len(self.gp_weights) != self.gp_levels:
            raise ConfigError("gp_weights must have gp_levels entries")
        if self.grad_accum < 1:
            raise ConfigError("grad_accum must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> TrainConfig:
        values = dict(crop=64, base_width=32, n_res_blocks=3, disc_width=32)
        values.update(overrides)
        return cls(**values)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            base_width=self.base_width,
            n_down=self.n_down,
            n_res_blocks=self.n_res_blocks,
            feature_taps=self.feature_taps,
            embed_dim=self.embed_dim,
            disc_width=self.disc_width,
            disc_layers=self.disc_layers,
            seed=self.seed,
        )

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.tau, self.loss_variant)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["loss_variant"] = self.loss_variant.value
        out["gp_weights"] = list(self.gp_weights)
        out["feature_taps"] = list(self.feature_taps)
        return out

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def updated(self, values: dict[str, Any]) -> TrainConfig:
        """Copy with ``values`` applied; string values are parsed per field type."""
        known = {f.name: f for f in dataclasses.fields(self)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {', '.join(known)}")
        parsed = {k: _parse_value(known[k].type, v) if isinstance(v, str) else v for k, v in values.items()}
        return dataclasses.replace(self, **parsed)


def _parse_value(type_name: str, raw: str):
    raw = raw.strip()
    t = str(type_name).replace(" ", "")
    if t.endswith("|None"):
        if raw.lower() in ("", "none", "null"):
            return None
        t = t[: -len("|None")]
    try:
        if t == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t == "str":
            return raw
        if t == "Variant":
            return Variant(raw.upper())
        if t.startswith("tuple[int"):
            return tuple(int(x) for x in raw.strip("()[]").split(",") if x.strip())
        if t.startswith("tuple[float"):
            return tuple(float(x) for x in raw.strip("()[]").split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {t}") from exc
    raise ConfigError(f"unsupported config type {t}")


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        values[key.strip()] = value.strip()
    return values


def describe_objective(cfg: TrainConfig) -> dict[str, str]:
    """Which contrastive terms a config trains with (recorded in run manifests)."""
    base = "mix_domain" if cfg.loss_variant is Variant.MIX_DOMAIN else "patchnce"
    return {
        "he_term": base,
        "gt_term": f"adaptive_weighted_{base}" if cfg.use_gt_branch else "none",
        "adaptive_weighting": "rank_similarity_linear_ramp" if cfg.use_gt_branch else "none",
    }


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant ``lr0`` before ``decay_start``, then linear decay reaching 0 in the last epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.decay_start:
        return cfg.lr0
    return cfg.lr0 * (1.0 - (epoch - cfg.decay_start + 1) / (cfg.epochs - cfg.decay_start))


@dataclass
class TrainState:
    nets: Networks
    opt_g: torch.optim.Optimizer  # generator + projector
    opt_d: torch.optim.Optimizer
    rng: np.random.Generator
    epoch: int = 0  # completed epochs
    iteration: int = 0
    trace: list[dict[str, float]] = field(default_factory=list)
    dump_dir: Path | None = None
    # pair order of the current epoch and how many of its steps are done
    epoch_order: list[int] | None = None
    epoch_pos: int = 0

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr


def init_state(cfg: TrainConfig) -> TrainState:
    nets = build_networks(cfg.network_config())
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_g = torch.optim.Adam(
        list(nets.generator.parameters()) + list(nets.projector.parameters()), lr=cfg.lr0, betas=betas
    )
    opt_d = torch.optim.Adam(nets.discriminator.parameters(), lr=cfg.lr0, betas=betas)
    return TrainState(nets, opt_g, opt_d, np.random.default_rng(cfg.seed))


def save_state(state: TrainState, path: str | Path, cfg: TrainConfig) -> Path:
    extra = {
        "train_config": cfg.to_dict(),
        "iteration": state.iteration,
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "rng": state.rng.bit_generator.state,
        "epoch_order": state.epoch_order,
        "epoch_pos": state.epoch_pos,
    }
    return save_checkpoint(path, state.nets, state.epoch, extra)


def load_state(path: str | Path) -> tuple[TrainState, TrainConfig]:
    nets, payload = load_checkpoint(path)
    extra = payload.get("extra", {})
    cfg = TrainConfig(**extra["train_config"])
    state = init_state(cfg)
    state.nets = nets
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    state.opt_g = torch.optim.Adam(
        list(nets.generator.parameters()) + list(nets.projector.parameters()), lr=cfg.lr0, betas=betas
    )
    state.opt_d = torch.optim.Adam(nets.discriminator.parameters(), lr=cfg.lr0, betas=betas)
    state.opt_g.load_state_dict(extra["opt_g"])
    state.opt_d.load_state_dict(extra["opt_d"])
    state.rng.bit_generator.state = extra["rng"]
    state.epoch = int(payload["epoch"])
    state.iteration = int(extra["iteration"])
    state.epoch_order = extra.get("epoch_order")
    state.epoch_pos = int(extra.get("epoch_pos", 0))
    return state, cfg


def _per_tap(anchors: EmbeddingSet, positives: EmbeddingSet):
    return zip(anchors.by_tap(), positives.by_tap())


def _reduce(values: list[torch.Tensor], mode: str) -> torch.Tensor:
    total = torch.stack(values).sum()
    return total / len(values) if mode == "tap_mean" else total


def contrastive_terms(
    anchors: EmbeddingSet, pos_he: EmbeddingSet, pos_gt: EmbeddingSet, cfg: TrainConfig, progress: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """(H&E term, ground-truth term) of the generator objective.

    Contrastive losses are computed within each tap (heads differ per tap)
    and combined per ``cfg.contrastive_reduction``.
    """
    ccfg = cfg.contrastive()
    he_terms = [contrastive_loss(a, p, ccfg) for a, p in _per_tap(anchors, pos_he)]
    he = _reduce(he_terms, cfg.contrastive_reduction)
    if not cfg.use_gt_branch:
        return he, torch.zeros((), dtype=he.dtype)
    gt_terms = []
    for a, p in _per_tap(anchors, pos_gt):
        w = adaptive_weights(a, p, progress)
        gt_terms.append(contrastive_loss(a, p, ccfg, w))
    return he, _reduce(gt_terms, cfg.contrastive_reduction)


def _dump(state: TrainState, pair: MatchedPair, values: dict[str, float]) -> Path | None:
    if state.dump_dir is None:
        return None
    path = Path(state.dump_dir) / f"nonfinite_iter{state.iteration:06d}.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"pair_id": pair.pair_id, "he": pair.he.pixels, "ihc_gt": pair.ihc_gt.pixels,
         "iteration": state.iteration, "epoch": state.epoch, "losses": values},
        path,
    )
    return path


def train_step(state: TrainState, pair: MatchedPair, cfg: TrainConfig) -> tuple[TrainState, LossBreakdown]:
    """One discriminator update followed by one generator/projector update."""
    g, d, p = state.nets.generator, state.nets.discriminator, state.nets.projector
    for net in (g, d, p):
        net.train()
    accum = cfg.grad_accum
    first, last = state.iteration % accum == 0, (state.iteration + 1) % accum == 0

    x_he = image_to_tensor(pair.he)
    x_gt = image_to_tensor(pair.ihc_gt)
    fake = g(x_he)

    if first:
        state.opt_d.zero_grad(set_to_none=True)
    adv_d = discriminator_loss(d, x_gt, fake)
    (adv_d / accum).backward()
    if last:
        state.opt_d.step()

    if first:
        state.opt_g.zero_grad(set_to_none=True)
    adv_g = generator_adv_loss(d, fake)
    locs = sample_locations(g.tap_shapes(*x_he.shape[-2:]), cfg.m_patches, state.rng)
    anchors, pos_he, pos_gt = build_sets(g, p, x_he, fake, x_gt, locs, detach_gt=cfg.detach_gt)
    progress = min(1.0, state.epoch / cfg.epochs)
    mix_he, mix_gt = contrastive_terms(anchors, pos_he, pos_gt, cfg, progress)
    gp = gp_loss(fake, x_gt, cfg.gp_levels, cfg.gp_weights)

    values = {k: float(v.detach()) for k, v in
              dict(adv_g=adv_g, adv_d=adv_d, mix_he=mix_he, mix_gt=mix_gt, gp=gp).items()}
    try:
        if not np.isfinite(values["adv_d"]):
            raise NonFiniteLoss("non-finite loss component(s): adv_d")
        total = total_objective(adv_g, mix_he, mix_gt, gp, cfg.lambda_gp)
    except NonFiniteLoss as exc:
        path = _dump(state, pair, values)
        msg = f"{exc} at iteration {state.iteration}"
        if path is not None:
            msg += f"; inputs dumped to {path}"
        err = NonFiniteLoss(msg)
        err.dump_path = path
        raise err from exc
    (total / accum).backward()
    if last:
        state.opt_g.step()

    breakdown = LossBreakdown(
        adv_g=values["adv_g"],
        adv_d=values["adv_d"],
        mix_he=values["mix_he"],
        mix_gt=values["mix_gt"],
        gp=values["gp"],
        total_g=total_objective(values["adv_g"], values["mix_he"], values["mix_gt"], values["gp"], cfg.lambda_gp),
    )
    state.iteration += 1
    return state, breakdown


class TraceWriter:
    """Append-only CSV loss trace."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not (append and self.path.exists())
        self._fh = self.path.open("w" if fresh else "a", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=TRACE_FIELDS)
        if fresh:
            self._writer.writeheader()

    def write(self, row: dict[str, float]) -> None:
        self._writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in TRACE_FIELDS})
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path: str | Path) -> list[dict[str, float]]:
    rows = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: (int(v) if k in ("iteration", "epoch") else float(v)) for k, v in row.items()})
    return rows


@dataclass
class TrainResult:
    checkpoint: Path | None
    checkpoints: list[Path]
    trace_path: Path
    state: TrainState


def train(
    cfg: TrainConfig,
    dataset_root: str | Path,
    out_dir: str | Path,
    resume: str | Path | None = None,
    pairs: Sequence[MatchedPair] | None = None,
) -> TrainResult:
    """Run (or resume) training; writes one checkpoint per epoch and ``trace.csv``.

    With ``cfg.max_iterations`` set, training stops early and the stopping
    point is saved as ``checkpoints/iter_<n>.pt``.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    if pairs is None:
        pairs = scan_dataset(dataset_root, "train")
    if resume is not None:
        state, saved_cfg = load_state(resume)
        # run-length settings may be extended on resume; the rest must match
        cfg = dataclasses.replace(saved_cfg, epochs=cfg.epochs, decay_start=cfg.decay_start,
                                  max_iterations=cfg.max_iterations)
    else:
        state = init_state(cfg)
    state.dump_dir = out_dir

    saved: list[Path] = []
    last_ckpt = None
    with TraceWriter(out_dir / "trace.csv", append=resume is not None) as writer:
        for epoch in range(state.epoch, cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            state.set_lr(lr)
            if state.epoch_order is not None and len(state.epoch_order) != len(pairs):
                raise ValueError("checkpoint was saved mid-epoch on a dataset of different size")
            if state.epoch_order is None:
                state.epoch_order = [int(k) for k in state.rng.permutation(len(pairs))]
                state.epoch_pos = 0
            for k in state.epoch_order[state.epoch_pos:]:
                if cfg.max_iterations is not None and state.iteration >= cfg.max_iterations:
                    break
                crop = random_crop_pair(pairs[k], cfg.crop, state.rng)
                _, bd = train_step(state, crop, cfg)
                state.epoch_pos += 1
                row = {"iteration": state.iteration - 1, "epoch": epoch, "lr": lr, **bd.as_dict()}
                state.trace.append(row)
                writer.write(row)
            else:
                state.epoch = epoch + 1
                state.epoch_order, state.epoch_pos = None, 0
                last_ckpt = save_state(state, ckpt_dir / f"epoch_{state.epoch:03d}.pt", cfg)
                saved.append(last_ckpt)
                log.info("epoch %d done, lr %.3g, last total_g %.4f", epoch, lr,
                         state.trace[-1]["total_g"] if state.trace else float("nan"))
                continue
            last_ckpt = save_state(state, ckpt_dir / f"iter_{state.iteration:06d}.pt", cfg)
            saved.append(last_ckpt)
            break
    return TrainResult(last_ckpt, saved, out_dir / "trace.csv", state)


# -- inference ---------------------------------------------------------------


def _tile_starts(length: int, crop: int) -> list[int]:
    if length <= crop:
        return [0]
    stride = max(1, crop // 2)
    starts = list(range(0, length - crop + 1, stride))
    if starts[-1] != length - crop:
        starts.append(length - crop)
    return starts


@torch.no_grad()
def _run_padded(g: GeneratorNet, pixels: np.ndarray) -> np.ndarray:
    h, w = pixels.shape[:2]
    f = g.downsampling
    ph, pw = (-h) % f, (-w) % f
    x = image_to_tensor(pixels, dtype=next(g.parameters()).dtype)
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = torch.nn.functional.pad(x, (0, pw, 0, ph), mode=mode)
    y = g(x)[..., :h, :w]
    return tensor_to_pixels(y)


@torch.no_grad()
def translate_pixels(g: GeneratorNet, pixels: np.ndarray, crop: int) -> np.ndarray:
    """Translate one image; images larger than ``crop`` are processed in
    overlapping ``crop`` tiles (stride crop/2) whose outputs are averaged."""
    g.eval()
    h, w = pixels.shape[:2]
    if h <= crop and w <= crop:
        return _run_padded(g, pixels)
    acc = np.zeros((h, w, 3))
    count = np.zeros((h, w, 1))
    th, tw = min(crop, h), min(crop, w)
    for top in _tile_starts(h, crop):
        for left in _tile_starts(w, crop):
            tile = pixels[top:top + th, left:left + tw]
            acc[top:top + th, left:left + tw] += _run_padded(g, tile)
            count[top:top + th, left:left + tw] += 1.0
    return acc / count


def translate(checkpoint: str | Path, input_dir: str | Path, output_dir: str | Path,
              crop: int | None = None) -> int:
    """Translate every image in ``input_dir``; outputs keep their filenames."""
    nets, payload = load_checkpoint(checkpoint)
    if crop is None:
        crop = int(payload.get("extra", {}).get("train_config", {}).get("crop", 512))
    files = list_images(input_dir)
    output_dir = Path(output_dir)
    for stem, path in files.items():
        out = translate_pixels(nets.generator, load_image(path), crop)
        save_image(out, output_dir / path.name)
    return len(files)


def translate_images(g: GeneratorNet, images: Iterable[StainedImage | np.ndarray], crop: int) -> list[np.ndarray]:
    return [translate_pixels(g, im.pixels if isinstance(im, StainedImage) else im, crop) for im in images]


def evaluate(generated_dir: str | Path, gt_dir: str | Path, metric_cfg: MetricConfig | None = None) -> MetricReport:
    """Metrics between two directories of images paired by file stem."""
    gen = list_images(generated_dir)
    ref = list_images(gt_dir)
    if set(gen) != set(ref) or not gen:
        raise PairMismatch(
            f"stems differ: only generated {sorted(set(gen) - set(ref))}, only ground truth {sorted(set(ref) - set(gen))}"
        )
    stems = sorted(gen)
    return compute_report([load_image(gen[s]) for s in stems], [load_image(ref[s]) for s in stems], metric_cfg)


def checkpoint_train_config(checkpoint: str | Path) -> dict[str, Any]:
    return read_checkpoint(checkpoint).get("extra", {}).get("train_config", {})


