"""Unpaired map-style translation with a weak-alignment penalty.

Two ResNet generators map between the historical style (domain X) and the
synthetic-modern style (domain Y), adversarially trained against PatchGAN
discriminators with least-squares targets. On top of the usual cycle and
identity terms, an L1 translation loss pulls each generator's output toward
the *aligned* counterpart tile of the same footprint, exploiting that the
two domains cover the same territory even though pixels do not correspond
exactly. Discriminators always see fakes from the current batch only.

Total generator objective:
    L = L_GAN + lambda_cyc * L_cyc + lambda_id * L_id + lambda_tran * L_tran
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .corpus import extract_patches, stitch_patches
from .errors import CheckpointError, ConfigError, PairingError
from .rasters import resize_image
from .segnet import SafeInstanceNorm2d, SegModel, _mirror_pad, predict_tile, resolve_device

CHECKPOINT_FORMAT = "cartoseg-translator-v1"


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative weights of the cycle, identity, and translation terms."""

    lambda_cyc: float = 1.0
    lambda_id: float = 0.5
    lambda_tran: float = 0.5

    def __post_init__(self) -> None:
        for name in ("lambda_cyc", "lambda_id", "lambda_tran"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass(frozen=True)
class TransConfig:
    """Architecture and optimization settings for translation training."""

    epochs: int = 100
    batch_size: int = 1
    learning_rate: float = 2e-4
    beta1: float = 0.5
    crop_px: int = 500
    scale_range: tuple[float, float] = (0.7, 1.4)
    res_blocks: int = 9
    gen_features: int = 64
    disc_features: int = 64
    disc_layers: int = 3
    in_channels: int = 3
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.crop_px < 1:
            raise ConfigError("epochs/batch_size/crop_px out of range")
        if self.learning_rate <= 0 or not (0 <= self.beta1 < 1):
            raise ConfigError("bad learning_rate/beta1")
        if self.res_blocks < 1 or self.gen_features < 1 or self.disc_features < 1:
            raise ConfigError("res_blocks/features must be >= 1")
        if self.disc_layers < 1:
            raise ConfigError("disc_layers must be >= 1")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ConfigError(f"bad scale_range {self.scale_range}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0 or None")


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


class _ReflectConv(nn.Module):
    """Conv with mirror padding (reflect, replicate on tiny maps)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1):
        super().__init__()
        self.pad = (kernel - 1) // 2
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = self.pad
        return self.conv(_mirror_pad(x, p, p, p, p))


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            _ReflectConv(ch, ch, 3),
            SafeInstanceNorm2d(ch),
            nn.ReLU(inplace=True),
            _ReflectConv(ch, ch, 3),
            SafeInstanceNorm2d(ch),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """c7s1 stem, two stride-2 stages, residual blocks, mirrored up path.

    Inputs and outputs live in [-1, 1]; spatial shape is preserved for any
    size (inputs are mirror-padded to a multiple of 4 and cropped back).
    """

    def __init__(self, features: int = 64, res_blocks: int = 9, in_channels: int = 3):
        super().__init__()
        f = features
        layers: list[nn.Module] = [
            _ReflectConv(in_channels, f, 7),
            SafeInstanceNorm2d(f),
            nn.ReLU(inplace=True),
        ]
        for mult in (1, 2):
            layers += [
                _ReflectConv(f * mult, f * mult * 2, 3, stride=2),
                SafeInstanceNorm2d(f * mult * 2),
                nn.ReLU(inplace=True),
            ]
        layers += [ResidualBlock(f * 4) for _ in range(res_blocks)]
        for mult in (4, 2):
            layers += [
                nn.ConvTranspose2d(f * mult, f * mult // 2, 3, stride=2, padding=1, output_padding=1),
                SafeInstanceNorm2d(f * mult // 2),
                nn.ReLU(inplace=True),
            ]
        layers += [_ReflectConv(f, in_channels, 7), nn.Tanh()]
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        x = _mirror_pad(x, 0, (-w) % 4, 0, (-h) % 4)
        return self.body(x)[..., :h, :w]


class PatchDiscriminator(nn.Module):
    """PatchGAN: a grid of realness scores over overlapping receptive fields."""

    def __init__(self, features: int = 64, n_layers: int = 3, in_channels: int = 3):
        super().__init__()
        layers: list[nn.Module] = [
            nn.Conv2d(in_channels, features, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        ch = features
        for i in range(1, n_layers):
            nxt = min(features * 2**i, features * 8)
            layers += [
                nn.Conv2d(ch, nxt, 4, stride=2, padding=1),
                SafeInstanceNorm2d(nxt),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch = nxt
        nxt = min(features * 2**n_layers, features * 8)
        layers += [
            nn.Conv2d(ch, nxt, 4, stride=1, padding=1),
            SafeInstanceNorm2d(nxt),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(nxt, 1, 4, stride=1, padding=1),
        ]
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


@dataclass
class TranslationPair:
    """Both generators, both discriminators, and their training state."""

    gen_xy: nn.Module  # historical -> modern style
    gen_yx: nn.Module  # modern -> historical style
    disc_x: nn.Module
    disc_y: nn.Module
    config: TransConfig
    weights: LossWeights
    step_count: int = 0
    loss_history: list[tuple[int, float, float]] = field(default_factory=list)

    def modules(self) -> tuple[nn.Module, nn.Module, nn.Module, nn.Module]:
        return self.gen_xy, self.gen_yx, self.disc_x, self.disc_y


def build_translation_pair(
    cfg: TransConfig, weights: LossWeights = LossWeights(), seed: int = 0
) -> TranslationPair:
    """Construct all four networks with deterministic initialization."""
    torch.manual_seed(seed)
    gens = [
        ResnetGenerator(cfg.gen_features, cfg.res_blocks, cfg.in_channels) for _ in range(2)
    ]
    discs = [
        PatchDiscriminator(cfg.disc_features, cfg.disc_layers, cfg.in_channels) for _ in range(2)
    ]
    for net in (*gens, *discs):
        net.apply(_init_weights)
    return TranslationPair(gens[0], gens[1], discs[0], discs[1], cfg, weights)


# ---------------------------------------------------------------------------
# Losses (tensors in [-1, 1])
# ---------------------------------------------------------------------------


def adversarial_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares GAN terms: (generator term, discriminator term)."""
    if d_real.shape != d_fake.shape:
        raise ValueError(f"score grids differ: {tuple(d_real.shape)} vs {tuple(d_fake.shape)}")
    gen_term = ((d_fake - 1.0) ** 2).mean()
    disc_term = ((d_real - 1.0) ** 2).mean() + (d_fake**2).mean()
    return gen_term, disc_term


def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def cycle_loss(x: torch.Tensor, y: torch.Tensor, pair: TranslationPair) -> torch.Tensor:
    """Both reconstruction errors: x -> y' -> x and y -> x' -> y."""
    return _l1(pair.gen_yx(pair.gen_xy(x)), x) + _l1(pair.gen_xy(pair.gen_yx(y)), y)


def identity_loss(x: torch.Tensor, y: torch.Tensor, pair: TranslationPair) -> torch.Tensor:
    """Generators applied to their own target domain should change nothing."""
    return _l1(pair.gen_xy(y), y) + _l1(pair.gen_yx(x), x)


def translation_loss(
    x: torch.Tensor,
    y: torch.Tensor,
    pair: TranslationPair,
    x_id: str | None = None,
    y_id: str | None = None,
) -> torch.Tensor:
    """Weak-alignment L1: each translation is pulled toward the aligned tile."""
    if x_id is not None and y_id is not None and x_id != y_id:
        raise PairingError(f"translation loss needs an aligned pair, got {x_id!r} vs {y_id!r}")
    return _l1(pair.gen_yx(y), x) + _l1(pair.gen_xy(x), y)


def combine_generator_losses(l_gan, l_cyc, l_id, l_tran, weights: LossWeights):
    """Weighted sum of the four generator terms (works on floats or tensors)."""
    return (
        l_gan
        + weights.lambda_cyc * l_cyc
        + weights.lambda_id * l_id
        + weights.lambda_tran * l_tran
    )


def generator_objective(
    x: torch.Tensor, y: torch.Tensor, pair: TranslationPair
) -> tuple[torch.Tensor, dict[str, float]]:
    """Total generator loss on one aligned batch, with its components."""
    fake_y = pair.gen_xy(x)
    fake_x = pair.gen_yx(y)
    l_gan = ((pair.disc_y(fake_y) - 1.0) ** 2).mean() + ((pair.disc_x(fake_x) - 1.0) ** 2).mean()
    l_cyc = _l1(pair.gen_yx(fake_y), x) + _l1(pair.gen_xy(fake_x), y)
    l_id = identity_loss(x, y, pair)
    l_tran = _l1(fake_x, x) + _l1(fake_y, y)
    total = combine_generator_losses(l_gan, l_cyc, l_id, l_tran, pair.weights)
    parts = {
        "gan": float(l_gan.detach()),
        "cyc": float(l_cyc.detach()),
        "id": float(l_id.detach()),
        "tran": float(l_tran.detach()),
    }
    return total, parts


def discriminator_objective(
    x: torch.Tensor, y: torch.Tensor, pair: TranslationPair
) -> tuple[torch.Tensor, torch.Tensor]:
    """LSGAN discriminator losses (D_x, D_y) on current-batch fakes only."""
    with torch.no_grad():
        fake_y = pair.gen_xy(x)
        fake_x = pair.gen_yx(y)
    _, loss_dx = adversarial_loss(pair.disc_x(x), pair.disc_x(fake_x))
    _, loss_dy = adversarial_loss(pair.disc_y(y), pair.disc_y(fake_y))
    return loss_dx, loss_dy


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def to_signed_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    arr = np.ascontiguousarray(image)
    if not arr.flags.writeable:
        arr = arr.copy()
    t = torch.from_numpy(arr).permute(2, 0, 1).float()
    return t / 127.5 - 1.0


def to_uint8_image(t: torch.Tensor) -> np.ndarray:
    """(3, H, W) [-1, 1] tensor -> (H, W, 3) uint8."""
    arr = ((t.detach().cpu().clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def _paired_crop(
    x_img: np.ndarray,
    y_img: np.ndarray,
    crop_px: int,
    scale_range: tuple[float, float],
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """One random resized crop applied identically to both aligned tiles."""
    if x_img.shape != y_img.shape:
        raise PairingError(f"aligned tiles differ in shape: {x_img.shape} vs {y_img.shape}")
    h, w = x_img.shape[:2]
    scale = float(rng.uniform(*scale_range))
    new_h, new_w = max(1, round(h * scale)), max(1, round(w * scale))
    if (new_h, new_w) != (h, w):
        x_img = resize_image(x_img, (new_h, new_w))
        y_img = resize_image(y_img, (new_h, new_w))
    pad_h, pad_w = max(0, crop_px - new_h), max(0, crop_px - new_w)
    if pad_h or pad_w:
        spec = ((0, pad_h), (0, pad_w), (0, 0))
        x_img = np.pad(x_img, spec, mode="reflect")
        y_img = np.pad(y_img, spec, mode="reflect")
    top = int(rng.integers(0, x_img.shape[0] - crop_px + 1))
    left = int(rng.integers(0, x_img.shape[1] - crop_px + 1))
    window = (slice(top, top + crop_px), slice(left, left + crop_px))
    return x_img[window], y_img[window]


def align_tiles(
    historical: Sequence[tuple[str, np.ndarray]],
    modern: Sequence[tuple[str, np.ndarray]],
) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Match the two domains by tile id; every historical tile needs a partner."""
    modern_by_id = {tid: img for tid, img in modern}
    aligned = []
    for tid, x_img in historical:
        if tid not in modern_by_id:
            raise PairingError(f"historical tile {tid!r} has no aligned modern counterpart")
        aligned.append((tid, x_img, modern_by_id[tid]))
    return aligned


def train_translation(
    historical: Sequence[tuple[str, np.ndarray]],
    modern: Sequence[tuple[str, np.ndarray]],
    cfg: TransConfig,
    weights: LossWeights = LossWeights(),
    seed: int = 0,
    device: torch.device | None = None,
) -> TranslationPair:
    """Alternating generator/discriminator optimization on aligned crops.

    Each step draws aligned crop batches, updates both generators on the
    combined objective, then updates both discriminators on real tiles and
    the same batch's (detached) fakes. Stops after cfg.epochs sweeps or
    cfg.max_steps generator updates, whichever comes first.
    """
    if not historical or not modern:
        raise ValueError("both domains need at least one tile")
    aligned = align_tiles(historical, modern)
    device = device or resolve_device()
    pair = build_translation_pair(cfg, weights, seed)
    for net in pair.modules():
        net.to(device)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt_g = torch.optim.Adam(
        itertools.chain(pair.gen_xy.parameters(), pair.gen_yx.parameters()),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, 0.999),
    )
    opt_d = torch.optim.Adam(
        itertools.chain(pair.disc_x.parameters(), pair.disc_y.parameters()),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, 0.999),
    )

    def out_of_budget() -> bool:
        return cfg.max_steps is not None and pair.step_count >= cfg.max_steps

    for _epoch in range(cfg.epochs):
        if out_of_budget():
            break
        order = rng.permutation(len(aligned))
        for start in range(0, len(order), cfg.batch_size):
            if out_of_budget():
                break
            xs, ys = [], []
            for i in order[start : start + cfg.batch_size]:
                _, x_img, y_img = aligned[int(i)]
                cx, cy = _paired_crop(x_img, y_img, cfg.crop_px, cfg.scale_range, rng)
                xs.append(to_signed_tensor(cx))
                ys.append(to_signed_tensor(cy))
            x = torch.stack(xs).to(device)
            y = torch.stack(ys).to(device)

            opt_g.zero_grad()
            g_total, _parts = generator_objective(x, y, pair)
            g_total.backward()
            opt_g.step()

            opt_d.zero_grad()
            loss_dx, loss_dy = discriminator_objective(x, y, pair)
            (loss_dx + loss_dy).backward()
            opt_d.step()

            pair.step_count += 1
            pair.loss_history.append(
                (pair.step_count, float(g_total.detach()), float((loss_dx + loss_dy).detach()))
            )
    return pair


# ---------------------------------------------------------------------------
# Inference and evaluation helpers
# ---------------------------------------------------------------------------


@torch.no_grad()
def translate_tile(
    pair: TranslationPair,
    image: np.ndarray,
    patch_px: int,
    device: torch.device | None = None,
) -> np.ndarray:
    """Apply gen_xy patchwise; output image has the input's shape."""
    gen = pair.gen_xy
    device = device or next(gen.parameters()).device
    gen.eval()
    h, w = image.shape[:2]
    outputs = []
    for patch in extract_patches(image, None, patch_px):
        t = to_signed_tensor(patch.image).unsqueeze(0).to(device)
        outputs.append((to_uint8_image(gen(t)[0]), patch.offset))
    gen.train()
    return stitch_patches(outputs, (h, w))


def translate_then_segment(
    pair: TranslationPair,
    seg_model: SegModel,
    image: np.ndarray,
    patch_px: int,
    device: torch.device | None = None,
) -> np.ndarray:
    """Sequential inference: restyle the historical tile, then segment it.

    ``patch_px`` tiles the generator pass; the segmentation pass uses the
    segmenter's own training crop size, since each network is applied to
    patches of the size it was trained on.
    """
    modern_style = translate_tile(pair, image, patch_px, device=device)
    return predict_tile(
        seg_model, modern_style, seg_model.config.crop_px, device=device
    )


@torch.no_grad()
def aligned_l1(
    pair: TranslationPair,
    tiles: Sequence[tuple[str, np.ndarray, np.ndarray]],
    device: torch.device | None = None,
) -> float:
    """Mean absolute error (in [-1, 1] space) of gen_xy against aligned tiles."""
    if not tiles:
        raise ValueError("need at least one aligned tile")
    device = device or next(pair.gen_xy.parameters()).device
    pair.gen_xy.eval()
    total = 0.0
    for _tid, x_img, y_img in tiles:
        fake = pair.gen_xy(to_signed_tensor(x_img).unsqueeze(0).to(device))
        total += float(_l1(fake[0], to_signed_tensor(y_img).to(device)))
    pair.gen_xy.train()
    return total / len(tiles)


@torch.no_grad()
def preview_grid(
    pair: TranslationPair,
    tiles: Sequence[tuple[str, np.ndarray, np.ndarray]],
    max_rows: int = 4,
    device: torch.device | None = None,
) -> np.ndarray:
    """Rows of [historical, translated, modern, back-translated] images."""
    if not tiles:
        raise ValueError("need at least one aligned tile")
    device = device or next(pair.gen_xy.parameters()).device
    rows = []
    for _tid, x_img, y_img in tiles[:max_rows]:
        x_t = to_signed_tensor(x_img).unsqueeze(0).to(device)
        y_t = to_signed_tensor(y_img).unsqueeze(0).to(device)
        fake_y = to_uint8_image(pair.gen_xy(x_t)[0])
        fake_x = to_uint8_image(pair.gen_yx(y_t)[0])
        rows.append(np.concatenate([x_img, fake_y, y_img, fake_x], axis=1))
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: Path | str, pair: TranslationPair) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(pair.config),
            "weights": asdict(pair.weights),
            "gen_xy": pair.gen_xy.state_dict(),
            "gen_yx": pair.gen_yx.state_dict(),
            "disc_x": pair.disc_x.state_dict(),
            "disc_y": pair.disc_y.state_dict(),
            "step_count": pair.step_count,
            "loss_history": pair.loss_history,
        },
        Path(path),
    )


def load_checkpoint(path: Path | str) -> TranslationPair:
    try:
        raw = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(raw, dict) or raw.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    cfg_raw = dict(raw["config"])
    cfg_raw["scale_range"] = tuple(cfg_raw["scale_range"])
    cfg = TransConfig(**cfg_raw)
    pair = build_translation_pair(cfg, LossWeights(**raw["weights"]), seed=0)
    pair.gen_xy.load_state_dict(raw["gen_xy"])
    pair.gen_yx.load_state_dict(raw["gen_yx"])
    pair.disc_x.load_state_dict(raw["disc_x"])
    pair.disc_y.load_state_dict(raw["disc_y"])
    pair.step_count = int(raw["step_count"])
    pair.loss_history = [tuple(e) for e in raw["loss_history"]]
    return pair
