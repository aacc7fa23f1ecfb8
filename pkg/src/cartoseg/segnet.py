"""Encoder-decoder segmentation network, training loops, tiled inference.

The network is a U-Net with mirror padding everywhere, so the output label
grid always matches the input tile exactly: stage 1 keeps resolution, every
deeper encoder stage opens with a stride-2 3x3 convolution, and the decoder
mirrors the encoder with transposed convolutions and skip connections.
Training minimizes cross-entropy plus soft Dice on randomly resized crops,
and keeps the parameters of the epoch with the best validation mean dIoU.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import NUM_CLASSES, extract_patches, stitch_patches
from .errors import CheckpointError, ConfigError, PairingError
from .metrics import MetricConfig, aggregate_reports, evaluate_pair
from .rasters import resize_image, resize_labels

CHECKPOINT_FORMAT = "cartoseg-segnet-v1"

# Training crop sizes per collection at full scale.
DEFAULT_CROP_PX = {"cassini": 1000, "etatmajor": 500, "scan50": 500}


def resolve_device(override: str | None = None) -> torch.device:
    """Pick the compute device; the CARTOSEG_DEVICE env var overrides."""
    name = override or os.environ.get("CARTOSEG_DEVICE")
    if name:
        return torch.device(name)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


@dataclass(frozen=True)
class SegConfig:
    """Architecture and training settings for the segmentation network."""

    stages: int = 8
    base_channels: int = 32
    max_channels: int = 512
    num_classes: int = NUM_CLASSES
    in_channels: int = 3
    padding_mode: str = "mirror"
    crop_px: int = 500
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-2
    momentum: float = 0.99
    scale_range: tuple[float, float] = (0.7, 1.4)
    augmentation: str = "random_resized_crop"

    def __post_init__(self) -> None:
        if self.stages < 2:
            raise ConfigError("stages must be >= 2")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise ConfigError("need 1 <= base_channels <= max_channels")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.padding_mode != "mirror":
            raise ConfigError(f"unsupported padding_mode {self.padding_mode!r}")
        if self.crop_px < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("crop_px/epochs/batch_size out of range")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ConfigError(f"bad scale_range {self.scale_range}")
        if self.learning_rate < 0 or not (0 <= self.momentum < 1):
            raise ConfigError("bad learning_rate/momentum")
        if self.augmentation != "random_resized_crop":
            raise ConfigError(f"unsupported augmentation {self.augmentation!r}")

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.stages - 1)

    def channels(self, stage: int) -> int:
        return min(self.base_channels * (2**stage), self.max_channels)


def _mirror_pad(x: torch.Tensor, left: int, right: int, top: int, bottom: int) -> torch.Tensor:
    """Reflect-pad, falling back to replicate when a side is too small."""
    if right or left:
        mode = "reflect" if x.shape[-1] > max(left, right) else "replicate"
        x = F.pad(x, (left, right, 0, 0), mode=mode)
    if top or bottom:
        mode = "reflect" if x.shape[-2] > max(top, bottom) else "replicate"
        x = F.pad(x, (0, 0, top, bottom), mode=mode)
    return x


class MirrorConv(nn.Module):
    """3x3 convolution with mirror padding (shape-preserving at stride 1)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(_mirror_pad(x, 1, 1, 1, 1))


class SafeInstanceNorm2d(nn.InstanceNorm2d):
    """InstanceNorm that passes 1x1 feature maps through unchanged.

    Per-instance statistics are undefined for a single spatial element (the
    normalized value would collapse to zero), so the deepest stage of a net
    whose input equals its downsampling factor keeps its activations as-is.
    """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] * x.shape[-2] == 1:
            return x
        return super().forward(x)


class ConvBlock(nn.Module):
    """conv -> InstanceNorm -> LeakyReLU."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv = MirrorConv(in_ch, out_ch, stride=stride)
        self.norm = SafeInstanceNorm2d(out_ch)
        self.act = nn.LeakyReLU(0.01, inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class SegModel(nn.Module):
    """U-Net with mirror padding; logits output matches input spatial shape."""

    def __init__(self, config: SegConfig):
        super().__init__()
        self.config = config
        ch = [config.channels(s) for s in range(config.stages)]
        self.encoder = nn.ModuleList()
        for s in range(config.stages):
            in_ch = config.in_channels if s == 0 else ch[s - 1]
            stride = 1 if s == 0 else 2
            self.encoder.append(
                nn.Sequential(ConvBlock(in_ch, ch[s], stride=stride), ConvBlock(ch[s], ch[s]))
            )
        self.upsamplers = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for s in range(config.stages - 2, -1, -1):
            self.upsamplers.append(nn.ConvTranspose2d(ch[s + 1], ch[s], kernel_size=2, stride=2))
            self.decoder.append(
                nn.Sequential(ConvBlock(2 * ch[s], ch[s]), ConvBlock(ch[s], ch[s]))
            )
        self.head = nn.Conv2d(ch[0], config.num_classes, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) input, got shape {tuple(x.shape)}")
        h, w = x.shape[-2:]
        m = self.config.downsample_factor
        x = _mirror_pad(x, 0, (-w) % m, 0, (-h) % m)
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        x = skips.pop()
        for up, block in zip(self.upsamplers, self.decoder):
            x = up(x)
            x = block(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)[..., :h, :w]


def build_model(cfg: SegConfig, seed: int = 0) -> SegModel:
    """Construct a model with deterministic initialization."""
    torch.manual_seed(seed)
    return SegModel(cfg)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def seg_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Cross-entropy plus (1 - mean soft Dice) over the batch.

    Accepts (N, C, H, W) logits with (N, H, W) integer targets, or the
    unbatched (C, H, W) / (H, W) forms. Works in float64 as well, which the
    finite-difference gradient tests rely on.
    """
    if logits.ndim == 3:
        logits = logits.unsqueeze(0)
        target = target.unsqueeze(0)
    if logits.ndim != 4 or target.ndim != 3:
        raise ValueError(f"bad shapes: logits {tuple(logits.shape)}, target {tuple(target.shape)}")
    n_classes = logits.shape[1]
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n_classes):
        raise ValueError(f"target labels outside [0, {n_classes})")
    target = target.long()
    ce = F.cross_entropy(logits, target)
    probs = logits.softmax(dim=1)
    onehot = F.one_hot(target, n_classes).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    intersection = (probs * onehot).sum(dim=dims)
    cardinality = probs.sum(dim=dims) + onehot.sum(dim=dims)
    dice = (2.0 * intersection + eps) / (cardinality + eps)
    return ce + (1.0 - dice.mean())


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def random_resized_crop(
    image: np.ndarray,
    labels: np.ndarray | None,
    crop_px: int,
    scale_range: tuple[float, float],
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Resize by a random factor, then crop a random crop_px square.

    Images resize bilinearly, labels by nearest neighbour. If the resized
    tile is smaller than the crop, it is padded (mirror for the image,
    background for the labels) before cropping.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    lab = None if labels is None else np.asarray(labels)
    if lab is not None and lab.shape != (h, w):
        raise ValueError(f"labels shape {lab.shape} does not match image {(h, w)}")
    scale = float(rng.uniform(*scale_range))
    new_h, new_w = max(1, round(h * scale)), max(1, round(w * scale))
    if (new_h, new_w) != (h, w):
        img = resize_image(img, (new_h, new_w))
        if lab is not None:
            lab = resize_labels(lab, (new_h, new_w))
    pad_h, pad_w = max(0, crop_px - new_h), max(0, crop_px - new_w)
    if pad_h or pad_w:
        img = np.pad(img, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
        if lab is not None:
            lab = np.pad(lab, ((0, pad_h), (0, pad_w)), mode="constant", constant_values=0)
    top = int(rng.integers(0, img.shape[0] - crop_px + 1))
    left = int(rng.integers(0, img.shape[1] - crop_px + 1))
    img = img[top : top + crop_px, left : left + crop_px]
    lab = None if lab is None else lab[top : top + crop_px, left : left + crop_px]
    return img, lab


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class LabeledSample(NamedTuple):
    tile_id: str
    image: np.ndarray  # (H, W, 3) uint8
    labels: np.ndarray  # (H, W) uint8


@dataclass
class TrainState:
    """Outcome of a training run; parameters are the best-epoch snapshot."""

    epoch: int
    best_val_score: float | None
    best_parameters: Mapping[str, torch.Tensor]
    rng_seed: int
    loss_history: list[tuple[int, float | None, float | None]] = field(default_factory=list)
    no_validation: bool = False


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float() / 255.0


def _snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone().cpu() for k, v in model.state_dict().items()}


def _validate(
    model: SegModel,
    val_samples: Sequence[LabeledSample],
    patch_px: int,
    metric_cfg: MetricConfig,
    device: torch.device,
) -> float:
    reports = [
        evaluate_pair(predict_tile(model, s.image, patch_px, device=device), s.labels, metric_cfg)
        for s in val_samples
    ]
    return aggregate_reports(reports).mean_diou


def train_supervised(
    model: SegModel,
    train_samples: Sequence[LabeledSample],
    val_samples: Sequence[LabeledSample],
    cfg: SegConfig,
    seed: int = 0,
    metric_cfg: MetricConfig = MetricConfig(),
    device: torch.device | None = None,
) -> TrainState:
    """Minibatch training on random crops with best-epoch selection.

    Each epoch draws one random resized crop per training tile (in a seeded
    random order), optimizes CE + Dice with Nesterov SGD under polynomial
    learning-rate decay, then scores mean dIoU on the validation tiles. The
    best-scoring parameters are restored into the model at the end.
    """
    if not train_samples:
        raise ValueError("train set is empty")
    device = device or resolve_device()
    model.to(device)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum, nesterov=cfg.momentum > 0
    )
    state = TrainState(
        epoch=0, best_val_score=None, best_parameters=_snapshot(model), rng_seed=seed
    )
    no_val = not val_samples
    state.no_validation = no_val

    def val_score() -> float | None:
        if no_val:
            return None
        return _validate(model, val_samples, cfg.crop_px, metric_cfg, device)

    score = val_score()
    state.best_val_score = score
    state.loss_history.append((0, None, score))

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.learning_rate * (1.0 - (epoch - 1) / max(cfg.epochs, 1)) ** 0.9
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        order = rng.permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            imgs, labs = [], []
            for i in batch_idx:
                s = train_samples[int(i)]
                img, lab = random_resized_crop(s.image, s.labels, cfg.crop_px, cfg.scale_range, rng)
                imgs.append(image_to_tensor(img))
                labs.append(torch.from_numpy(np.ascontiguousarray(lab)).long())
            x = torch.stack(imgs).to(device)
            y = torch.stack(labs).to(device)
            optimizer.zero_grad()
            loss = seg_loss(model(x), y)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        score = val_score()
        state.loss_history.append((epoch, float(np.mean(losses)), score))
        state.epoch = epoch
        if no_val:
            state.best_parameters = _snapshot(model)
        elif state.best_val_score is None or score > state.best_val_score:
            state.best_val_score = score
            state.best_parameters = _snapshot(model)

    model.load_state_dict(state.best_parameters)
    model.to(device)
    return state


def pair_weak_samples(
    historical: Sequence[tuple[str, np.ndarray]],
    modern_labels: Mapping[str, np.ndarray],
) -> list[LabeledSample]:
    """Join historical images with modern label rasters by tile id."""
    samples = []
    for tile_id, image in historical:
        if tile_id not in modern_labels:
            raise PairingError(f"tile {tile_id!r} has no aligned modern labels")
        lab = np.asarray(modern_labels[tile_id])
        if lab.shape != image.shape[:2]:
            raise PairingError(
                f"tile {tile_id!r}: labels {lab.shape} do not match image {image.shape[:2]}"
            )
        samples.append(LabeledSample(tile_id, image, lab))
    return samples


def train_weak(
    model: SegModel,
    historical: Sequence[tuple[str, np.ndarray]],
    modern_labels: Mapping[str, np.ndarray],
    cfg: SegConfig,
    seed: int = 0,
    val_historical: Sequence[tuple[str, np.ndarray]] = (),
    metric_cfg: MetricConfig = MetricConfig(),
    device: torch.device | None = None,
) -> TrainState:
    """Supervised loop with modern label rasters standing in as targets."""
    train_samples = pair_weak_samples(historical, modern_labels)
    val_samples = pair_weak_samples(val_historical, modern_labels)
    return train_supervised(
        model, train_samples, val_samples, cfg, seed=seed, metric_cfg=metric_cfg, device=device
    )


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


@torch.no_grad()
def predict_tile(
    model: SegModel,
    image: np.ndarray,
    patch_px: int,
    device: torch.device | None = None,
    batch_size: int = 4,
) -> np.ndarray:
    """Segment a tile with non-overlapping patches; output matches its shape."""
    device = device or next(model.parameters()).device
    model.eval()
    h, w = image.shape[:2]
    patches = extract_patches(image, None, patch_px)
    outputs: list[tuple[np.ndarray, tuple[int, int]]] = []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start : start + batch_size]
        x = torch.stack([image_to_tensor(p.image) for p in chunk]).to(device)
        pred = model(x).argmax(dim=1).to(torch.uint8).cpu().numpy()
        outputs.extend((pred[i], chunk[i].offset) for i in range(len(chunk)))
    return stitch_patches(outputs, (h, w))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: Path | str, model: SegModel, state: TrainState) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(model.config),
            "model": model.state_dict(),
            "epoch": state.epoch,
            "best_val_score": state.best_val_score,
            "best_parameters": state.best_parameters,
            "rng_seed": state.rng_seed,
            "loss_history": state.loss_history,
            "no_validation": state.no_validation,
        },
        Path(path),
    )


def load_checkpoint(path: Path | str) -> tuple[SegModel, TrainState]:
    try:
        raw = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(raw, dict) or raw.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    cfg_raw = dict(raw["config"])
    cfg_raw["scale_range"] = tuple(cfg_raw["scale_range"])
    cfg = SegConfig(**cfg_raw)
    model = SegModel(cfg)
    model.load_state_dict(raw["model"])
    state = TrainState(
        epoch=int(raw["epoch"]),
        best_val_score=raw["best_val_score"],
        best_parameters=raw["best_parameters"],
        rng_seed=int(raw["rng_seed"]),
        loss_history=[tuple(e) for e in raw["loss_history"]],
        no_validation=bool(raw.get("no_validation", False)),
    )
    return model, state
