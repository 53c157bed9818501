"""Contrastive (NT-Xent) pretraining of the CMR image encoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import ImageAugmentConfig, augment_image_array
from .cohort import CmrPhaseStack
from .engine import (AdamW, Checkpoint, CsvLog, ScheduleSpec, TrainResult, check_finite, cosine_lr,
                     restore, seed_torch, snapshot, steps_per_epoch, substream)


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


@dataclass
class ImageModelConfig:
    arch: str = "resnet50"  # "resnet50" (torchvision, d=2048) or "small"
    widths: tuple = (32, 64, 128)
    blocks: tuple = (1, 1, 1)
    groups: int = 8
    proj_hidden: int = 2048
    proj_out: int = 2048

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.blocks = tuple(self.blocks)
        if self.arch not in ("resnet50", "small"):
            raise ValueError(f"unknown image backbone '{self.arch}'")
        if len(self.widths) != len(self.blocks):
            raise ValueError("widths and blocks must have the same length")

    @property
    def width(self) -> int:
        return 2048 if self.arch == "resnet50" else self.widths[-1]


class _BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride, groups):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.norm1 = nn.GroupNorm(min(groups, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.norm2 = nn.GroupNorm(min(groups, c_out), c_out)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False),
                                      nn.GroupNorm(min(groups, c_out), c_out))

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + (x if self.skip is None else self.skip(x)))


class ImageEncoder(nn.Module):
    """Residual CNN: [B, 3, H, W] (one channel per cardiac phase) -> [B, d] after global pooling."""

    def __init__(self, cfg: ImageModelConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.arch == "resnet50":
            from torchvision.models import resnet50
            self.net = resnet50(weights=None)
            self.net.fc = nn.Identity()
        else:
            w0 = cfg.widths[0]
            layers = [nn.Conv2d(3, w0, 3, 2, 1, bias=False), nn.GroupNorm(min(cfg.groups, w0), w0), nn.ReLU()]
            c = w0
            for i, (w, n) in enumerate(zip(cfg.widths, cfg.blocks)):
                for j in range(n):
                    layers.append(_BasicBlock(c, w, 2 if (i > 0 and j == 0) else 1, cfg.groups))
                    c = w
            layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
            self.net = nn.Sequential(*layers)

    @property
    def width(self) -> int:
        return self.cfg.width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"image encoder expects [B, 3, H, W], got {tuple(x.shape)}")
        return self.net(x)


class ProjectionHead(nn.Module):
    """z = W2 relu(W1 h), no biases."""

    def __init__(self, d_in: int, hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, d_out, bias=False)

    def forward(self, h):
        return self.fc2(F.relu(self.fc1(h)))


@torch.no_grad()
def image_encode(encoder: ImageEncoder, img) -> np.ndarray:
    """Embedding of one 3-phase stack (evaluation mode)."""
    arr = img.phases if isinstance(img, CmrPhaseStack) else np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] phase stack, got shape {arr.shape}")
    was = encoder.training
    encoder.eval()
    out = encoder(torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None])[0]
    encoder.train(was)
    return out.numpy()


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def nt_xent(z: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    """Normalized temperature-scaled cross-entropy over 2N projections.

    Rows k and k + N are a positive pair; every other row is a negative.
    Averaged over all 2N anchors.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2:
        raise ValueError(f"need an even number (>= 2) of rows, got shape {tuple(z.shape)}")
    norms = z.norm(dim=1)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm embedding: cosine similarity undefined")
    n = z.shape[0] // 2
    u = z / norms[:, None]
    logits = (u @ u.T) / tau
    eye = torch.eye(2 * n, dtype=torch.bool)
    logits = logits.masked_fill(eye, float("-inf"))
    pos = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return (torch.logsumexp(logits, dim=1) - logits[torch.arange(2 * n), pos]).mean()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class SimclrConfig:
    epochs: int = 500
    batch_size: int = 512
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 10
    tau: float = 0.1
    max_steps: int | None = None
    augment: dict = field(default_factory=dict)

    def augment_config(self) -> ImageAugmentConfig:
        return ImageAugmentConfig(**self.augment)

    def validate(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be > 0, got {self.tau}")
        self.augment_config()


def _views(stacks, idx, aug, seed, *keys) -> torch.Tensor:
    out = []
    for view in (0, 1):
        for i in idx:
            out.append(augment_image_array(stacks[i], aug, substream(seed, *keys, int(i), view)))
    return torch.from_numpy(np.stack(out).astype(np.float32))


@torch.no_grad()
def contrastive_eval_loss(encoder: ImageEncoder, head: ProjectionHead, stacks: np.ndarray,
                          cfg: SimclrConfig, seed: int = 0, n_batches: int = 4) -> float:
    """Mean NT-Xent over fixed augmented batches; the same draws for any encoder."""
    stacks = np.asarray(stacks, dtype=np.float32)
    bs = min(cfg.batch_size, len(stacks))
    aug = cfg.augment_config()
    was = encoder.training, head.training
    encoder.eval()
    head.eval()
    losses = []
    for b in range(n_batches):
        idx = substream(seed, "simclr-eval", "idx", b).choice(len(stacks), size=bs, replace=False)
        x = _views(stacks, idx, aug, seed, "simclr-eval", "aug", b)
        losses.append(float(nt_xent(head(encoder(x)), cfg.tau)))
    encoder.train(was[0])
    head.train(was[1])
    return float(np.mean(losses))


def build_image_model(model_cfg: ImageModelConfig) -> tuple[ImageEncoder, ProjectionHead]:
    enc = ImageEncoder(model_cfg)
    return enc, ProjectionHead(enc.width, model_cfg.proj_hidden, model_cfg.proj_out)


def train_simclr(stacks: np.ndarray, model_cfg: ImageModelConfig, cfg: SimclrConfig, seed: int = 0,
                 log_path=None) -> TrainResult:
    """Two augmented views per image, NT-Xent, best-epoch checkpoint."""
    stacks = np.asarray(stacks, dtype=np.float32)
    n = len(stacks)
    bs = min(cfg.batch_size, n)
    if bs < 2:
        raise ValueError(f"contrastive training needs batch size >= 2 (got {bs}); no negatives otherwise")
    seed_torch(seed, "simclr", "init")
    encoder, head = build_image_model(model_cfg)
    aug = cfg.augment_config()
    spe = steps_per_epoch(n, bs)
    epochs = cfg.epochs if cfg.max_steps is None else math.ceil(cfg.max_steps / spe)
    total = cfg.max_steps or epochs * spe
    warm = min(cfg.warmup_epochs * spe, total - 1)
    sched = ScheduleSpec(cfg.base_lr, total, warm)
    modules = {"image_encoder": encoder, "projection_head": head}
    opt = AdamW(modules, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    log = CsvLog(log_path, ["step", "lr", "loss"])
    history, best, best_snap, step = [], math.inf, None, 0
    encoder.train()
    head.train()
    for epoch in range(epochs):
        order = substream(seed, "simclr", "order", epoch).permutation(n)
        losses = []
        for b in range(spe):
            if step >= total:
                break
            idx = order[b * bs:(b + 1) * bs]
            if len(idx) < 2:
                continue  # a trailing singleton has no negatives
            x = _views(stacks, idx, aug, seed, "simclr", "aug", epoch)
            lr = cosine_lr(step, sched)
            loss = nt_xent(head(encoder(x)), cfg.tau)
            check_finite(loss, f"NT-Xent loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            log.write(step=step, lr=lr, loss=loss.item())
            losses.append(loss.item())
            step += 1
        if not losses:
            break
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
        if history[-1]["loss"] < best:
            best, best_snap = history[-1]["loss"], snapshot(modules)
    restore(modules, best_snap)
    encoder.eval()
    head.eval()
    ckpt = Checkpoint.from_modules("image-simclr", "pretrain-image", modules,
                                   config={"model": asdict(model_cfg), "train": asdict(cfg), "seed": seed},
                                   best={"metric": "train_loss", "value": best},
                                   flags={"projection_head": "pretraining-only"})
    return TrainResult(ckpt, modules, history)


def image_encoder_from_checkpoint(ckpt: Checkpoint) -> ImageEncoder:
    enc = ImageEncoder(ImageModelConfig(**ckpt.config["model"]))
    return ckpt.load_module("image_encoder", enc).eval()
