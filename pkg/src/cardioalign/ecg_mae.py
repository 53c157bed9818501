"""Masked-autoencoder pretraining of the transformer ECG encoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .augment import EcgAugmentConfig, augment_ecg_array, round_half_up
from .cohort import EcgRecord
from .engine import (AdamW, Checkpoint, CsvLog, ScheduleSpec, TrainResult, check_finite, cosine_lr,
                     restore, seed_torch, snapshot, steps_per_epoch, substream)

# ---------------------------------------------------------------------------
# Patches and masks
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PatchGrid:
    patches: np.ndarray  # [N, D]
    patch_shape: tuple[int, int]
    origin_shape: tuple[int, int]

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]


@dataclass(frozen=True, eq=False)
class PatchMask:
    visible_indices: np.ndarray
    masked_indices: np.ndarray
    mask_ratio: float

    @property
    def n_patches(self) -> int:
        return len(self.visible_indices) + len(self.masked_indices)

    def boolean(self) -> np.ndarray:
        """True at masked positions."""
        m = np.zeros(self.n_patches, dtype=bool)
        m[self.masked_indices] = True
        return m


def _check_patch_shape(C: int, T: int, patch_shape) -> tuple[int, int]:
    ls, ts = patch_shape
    if ls < 1 or ts < 1:
        raise ValueError(f"invalid patch shape {patch_shape}")
    if C % ls or T % ts:
        pad_c = (-C) % ls
        pad_t = (-T) % ts
        raise ValueError(f"signal shape ({C}, {T}) is not divisible by patch shape {tuple(patch_shape)}; "
                         f"pad by {pad_c} leads and {pad_t} time points")
    return ls, ts


def patchify_tensor(x: torch.Tensor, patch_shape=(1, 100)) -> torch.Tensor:
    """[B, C, T] -> [B, N, D], lead-major then time ordering."""
    B, C, T = x.shape
    ls, ts = _check_patch_shape(C, T, patch_shape)
    x = x.reshape(B, C // ls, ls, T // ts, ts).permute(0, 1, 3, 2, 4)
    return x.reshape(B, (C // ls) * (T // ts), ls * ts)


def unpatchify_tensor(p: torch.Tensor, origin_shape, patch_shape=(1, 100)) -> torch.Tensor:
    C, T = origin_shape
    ls, ts = _check_patch_shape(C, T, patch_shape)
    B = p.shape[0]
    p = p.reshape(B, C // ls, T // ts, ls, ts).permute(0, 1, 3, 2, 4)
    return p.reshape(B, C, T)


def patchify(x, patch_shape=(1, 100)) -> PatchGrid:
    arr = x.samples if isinstance(x, EcgRecord) else np.asarray(x)
    C, T = arr.shape
    patches = patchify_tensor(torch.from_numpy(np.ascontiguousarray(arr))[None], patch_shape)[0]
    return PatchGrid(patches.numpy(), tuple(patch_shape), (C, T))


def unpatchify(grid: PatchGrid) -> np.ndarray:
    p = torch.from_numpy(np.ascontiguousarray(grid.patches))[None]
    return unpatchify_tensor(p, grid.origin_shape, grid.patch_shape)[0].numpy()


def n_masked(n_patches: int, ratio: float) -> int:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    return round_half_up(ratio * n_patches)


def random_mask(grid, ratio: float = 0.8, rng: np.random.Generator | None = None) -> PatchMask:
    n = grid.n_patches if isinstance(grid, PatchGrid) else int(grid)
    k = n_masked(n, ratio)
    rng = rng if rng is not None else np.random.default_rng()
    perm = rng.permutation(n)
    return PatchMask(np.sort(perm[k:]), np.sort(perm[:k]), ratio)


def batch_visible_indices(batch: int, n_patches: int, ratio: float, rng) -> torch.Tensor:
    """[B, N_visible] sorted visible indices, one independent mask per sample."""
    k = n_masked(n_patches, ratio)
    keep = np.sort(np.argsort(rng.random((batch, n_patches)), axis=1)[:, k:], axis=1)
    return torch.from_numpy(keep)


def masked_from_visible(visible: torch.Tensor, n_patches: int) -> torch.Tensor:
    m = torch.ones(visible.shape[0], n_patches, dtype=torch.bool)
    m.scatter_(1, visible, False)
    return m


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _sincos(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / max(half, 1)))
    ang = positions[:, None] * freqs[None, :]
    out = np.zeros((len(positions), dim))
    out[:, 0:2 * half:2] = np.sin(ang)
    out[:, 1:2 * half:2] = np.cos(ang)
    return out


def factored_position_embedding(n_lead_rows: int, n_time_cols: int, dim: int) -> torch.Tensor:
    """Fixed sin-cos table: lead index fills the first half of the width, time-patch
    index the second half, and the two are summed (so the pair stays identifiable)."""
    lead_dim = dim // 2
    leads = np.zeros((n_lead_rows, dim))
    leads[:, :lead_dim] = _sincos(np.arange(n_lead_rows, dtype=float), lead_dim)
    times = np.zeros((n_time_cols, dim))
    times[:, lead_dim:] = _sincos(np.arange(n_time_cols, dtype=float), dim - lead_dim)
    table = leads[:, None, :] + times[None, :, :]
    return torch.tensor(table.reshape(n_lead_rows * n_time_cols, dim), dtype=torch.float32)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


@dataclass
class EcgModelConfig:
    n_leads: int = 12
    n_time: int = 5000
    patch_shape: tuple = (1, 100)
    width: int = 384
    depth: int = 3
    heads: int = 6
    mlp_ratio: float = 4.0
    decoder_width: int = 192
    decoder_depth: int = 2
    decoder_heads: int = 6

    def __post_init__(self):
        self.patch_shape = tuple(self.patch_shape)

    @property
    def grid(self) -> tuple[int, int]:
        ls, ts = _check_patch_shape(self.n_leads, self.n_time, self.patch_shape)
        return self.n_leads // ls, self.n_time // ts

    @property
    def n_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def patch_dim(self) -> int:
        return self.patch_shape[0] * self.patch_shape[1]


class EcgEncoder(nn.Module):
    """ViT over ECG patches. Inputs are raw [B, C, T]; per-lead z-scoring uses stored statistics."""

    def __init__(self, cfg: EcgModelConfig):
        super().__init__()
        self.cfg = cfg
        rows, cols = cfg.grid
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.width)
        self.register_buffer("pos_embed", factored_position_embedding(rows, cols, cfg.width))
        self.register_buffer("lead_mean", torch.zeros(cfg.n_leads))
        self.register_buffer("lead_std", torch.ones(cfg.n_leads))
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width)
        self.apply(_init_weights)

    @property
    def width(self) -> int:
        return self.cfg.width

    def set_lead_statistics(self, ecgs: np.ndarray) -> None:
        """Per-lead mean/std over a [n, C, T] training array."""
        ecgs = np.asarray(ecgs, dtype=np.float64)
        mean = ecgs.mean(axis=(0, 2))
        std = ecgs.std(axis=(0, 2))
        self.lead_mean.copy_(torch.tensor(mean, dtype=torch.float32))
        self.lead_std.copy_(torch.tensor(np.where(std > 1e-8, std, 1.0), dtype=torch.float32))

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.lead_mean[:, None]) / self.lead_std[:, None]

    def patches(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != (self.cfg.n_leads, self.cfg.n_time):
            raise ValueError(f"expected ECG of shape (B, {self.cfg.n_leads}, {self.cfg.n_time}), "
                             f"got {tuple(x.shape)}")
        return patchify_tensor(self.normalize(x), self.cfg.patch_shape)

    def encode_patches(self, patches: torch.Tensor, positions: torch.Tensor | None = None) -> torch.Tensor:
        """Encode [B, n, D] patches whose grid positions are ``positions`` ([B, n]; all if None)."""
        tok = self.patch_embed(patches)
        if positions is None:
            tok = tok + self.pos_embed
        else:
            tok = tok + self.pos_embed[positions]
        for blk in self.blocks:
            tok = blk(tok)
        return self.norm(tok)

    def forward(self, x: torch.Tensor, visible: torch.Tensor | None = None) -> torch.Tensor:
        p = self.patches(x)
        if visible is not None:
            p = torch.gather(p, 1, visible[..., None].expand(-1, -1, p.shape[-1]))
        return self.encode_patches(p, visible)


class MaeDecoder(nn.Module):
    def __init__(self, cfg: EcgModelConfig):
        super().__init__()
        rows, cols = cfg.grid
        self.n_patches = rows * cols
        self.embed = nn.Linear(cfg.width, cfg.decoder_width)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.decoder_width))
        self.register_buffer("pos_embed", factored_position_embedding(rows, cols, cfg.decoder_width))
        self.blocks = nn.ModuleList(Block(cfg.decoder_width, cfg.decoder_heads, cfg.mlp_ratio)
                                    for _ in range(cfg.decoder_depth))
        self.norm = nn.LayerNorm(cfg.decoder_width)
        self.head = nn.Linear(cfg.decoder_width, cfg.patch_dim)
        self.apply(_init_weights)
        nn.init.normal_(self.mask_token, std=0.02)

    def forward(self, latent: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        z = self.embed(latent)
        B, _, W = z.shape
        full = self.mask_token.expand(B, self.n_patches, W).clone()
        full = full.scatter(1, visible[..., None].expand(-1, -1, W), z)
        full = full + self.pos_embed
        for blk in self.blocks:
            full = blk(full)
        return self.head(self.norm(full))


class MaeModel(nn.Module):
    def __init__(self, cfg: EcgModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = EcgEncoder(cfg)
        self.decoder = MaeDecoder(cfg)

    def forward(self, x: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        """Reconstructed (normalised) patches [B, N, D]."""
        return self.decoder(self.encoder(x, visible), visible)


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


@torch.no_grad()
def mae_forward(model: MaeModel, x, mask: PatchMask) -> np.ndarray:
    """Reconstruction [C, T] of one record, in the encoder's normalised units."""
    arr = x.samples if isinstance(x, EcgRecord) else np.asarray(x)
    if mask.n_patches != model.cfg.n_patches:
        raise ValueError(f"mask covers {mask.n_patches} patches, model expects {model.cfg.n_patches}")
    was_training = model.training
    model.eval()
    visible = torch.from_numpy(np.sort(np.asarray(mask.visible_indices)))[None].long()
    out = model(torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None], visible)
    model.train(was_training)
    return unpatchify_tensor(out, (model.cfg.n_leads, model.cfg.n_time), model.cfg.patch_shape)[0].numpy()


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def mae_loss(pred: torch.Tensor, target: torch.Tensor, masked: torch.Tensor, lambda_mae: float = 0.1,
             eps: float = 1e-8, masked_only: bool = True, norm_target: bool = False,
             return_parts: bool = False):
    """(1 - lambda) * MSE + lambda * (1 - mean NCC) over masked patches.

    ``pred``/``target`` are [..., N, D]; ``masked`` is a boolean [..., N] (True = masked).
    NCC of a patch pair is cov / sqrt(var_pred * var_target + eps).
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    masked = torch.as_tensor(masked, dtype=torch.bool)
    sel = masked if masked_only else torch.ones_like(masked)
    if not bool(sel.any()):
        raise ValueError("mask has no masked patches; nothing to reconstruct")
    p, t = pred[sel], target[sel]
    if norm_target:
        t = (t - t.mean(-1, keepdim=True)) / (t.var(-1, keepdim=True, unbiased=False) + 1e-6).sqrt()
    mse = ((p - t) ** 2).mean()
    pc = p - p.mean(-1, keepdim=True)
    tc = t - t.mean(-1, keepdim=True)
    cov = (pc * tc).mean(-1)
    ncc = cov / torch.sqrt(pc.pow(2).mean(-1) * tc.pow(2).mean(-1) + eps)
    l_ncc = 1.0 - ncc.mean()
    loss = (1.0 - lambda_mae) * mse + lambda_mae * l_ncc
    if return_parts:
        return loss, mse, l_ncc
    return loss


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class MaeConfig:
    epochs: int = 400
    batch_size: int = 128
    base_lr: float = 1e-5
    weight_decay: float = 0.15
    warmup_frac: float = 0.1
    lambda_mae: float = 0.1
    mask_ratio: float = 0.8
    max_steps: int | None = None
    masked_only: bool = True
    norm_target: bool = False
    augment: dict = field(default_factory=dict)

    def augment_config(self) -> EcgAugmentConfig:
        return EcgAugmentConfig(**self.augment)

    def validate(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if not 0.0 <= self.lambda_mae <= 1.0:
            raise ValueError(f"lambda_mae must lie in [0, 1], got {self.lambda_mae}")
        self.augment_config()


def _augment_batch(ecgs: np.ndarray, idx, cfg: EcgAugmentConfig, seed, *keys) -> torch.Tensor:
    out = [augment_ecg_array(ecgs[i], cfg, substream(seed, *keys, int(i))) for i in idx]
    return torch.from_numpy(np.stack(out).astype(np.float32))


@torch.no_grad()
def reconstruction_loss(model: MaeModel, ecgs: np.ndarray, cfg: MaeConfig, seed: int = 0) -> float:
    """Masked reconstruction loss on clean records with fixed masks (evaluation mode)."""
    was = model.training
    model.eval()
    x = torch.from_numpy(np.asarray(ecgs, dtype=np.float32))
    visible = batch_visible_indices(len(x), model.cfg.n_patches, cfg.mask_ratio, substream(seed, "mae-eval"))
    pred = model(x, visible)
    target = model.encoder.patches(x)
    loss = mae_loss(pred, target, masked_from_visible(visible, model.cfg.n_patches), cfg.lambda_mae,
                    masked_only=cfg.masked_only, norm_target=cfg.norm_target)
    model.train(was)
    return float(loss)


def init_mae_model(ecgs: np.ndarray, model_cfg: EcgModelConfig, seed: int = 0) -> MaeModel:
    """The freshly initialised model that ``train_mae`` starts from."""
    seed_torch(seed, "mae", "init")
    model = MaeModel(model_cfg)
    model.encoder.set_lead_statistics(ecgs)
    return model


def train_mae(ecgs: np.ndarray, model_cfg: EcgModelConfig, cfg: MaeConfig, seed: int = 0,
              log_path=None) -> TrainResult:
    """Pretrain encoder+decoder on a [n, C, T] array of filtered ECGs; keeps the best-loss epoch."""
    ecgs = np.asarray(ecgs, dtype=np.float32)
    if len(ecgs) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = init_mae_model(ecgs, model_cfg, seed)
    aug = cfg.augment_config()
    n = len(ecgs)
    bs = min(cfg.batch_size, n)
    spe = steps_per_epoch(n, bs)
    epochs = cfg.epochs if cfg.max_steps is None else math.ceil(cfg.max_steps / spe)
    total = cfg.max_steps or epochs * spe
    sched = ScheduleSpec(cfg.base_lr, total, min(int(round(cfg.warmup_frac * total)), total - 1))
    opt = AdamW(model, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    log = CsvLog(log_path, ["step", "lr", "loss", "mse", "ncc"])
    history, best, best_snap, step = [], math.inf, None, 0
    N = model_cfg.n_patches
    model.train()
    for epoch in range(epochs):
        order = substream(seed, "mae", "order", epoch).permutation(n)
        sums = np.zeros(3)
        count = 0
        for b in range(spe):
            if step >= total:
                break
            idx = order[b * bs:(b + 1) * bs]
            x = _augment_batch(ecgs, idx, aug, seed, "mae", "aug", epoch)
            visible = batch_visible_indices(len(idx), N, cfg.mask_ratio, substream(seed, "mae", "mask", step))
            lr = cosine_lr(step, sched)
            pred = model(x, visible)
            target = model.encoder.patches(x)
            loss, mse, ncc = mae_loss(pred, target, masked_from_visible(visible, N), cfg.lambda_mae,
                                      masked_only=cfg.masked_only, norm_target=cfg.norm_target,
                                      return_parts=True)
            check_finite(loss, f"MAE loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            log.write(step=step, lr=lr, loss=loss.item(), mse=mse.item(), ncc=ncc.item())
            sums += [loss.item(), mse.item(), ncc.item()]
            count += 1
            step += 1
        if count == 0:
            break
        epoch_loss = sums[0] / count
        history.append({"epoch": epoch, "loss": epoch_loss, "mse": sums[1] / count, "ncc": sums[2] / count})
        if epoch_loss < best:
            best, best_snap = epoch_loss, snapshot({"m": model})
    restore({"m": model}, best_snap)
    model.eval()
    ckpt = Checkpoint.from_modules("ecg-mae", "pretrain-ecg",
                                   {"ecg_encoder": model.encoder, "mae_decoder": model.decoder},
                                   config={"model": asdict(model_cfg), "train": asdict(cfg), "seed": seed},
                                   best={"metric": "train_loss", "value": best})
    return TrainResult(ckpt, {"model": model}, history)


def encoder_from_checkpoint(ckpt: Checkpoint) -> EcgEncoder:
    cfg = EcgModelConfig(**ckpt.config["model"])
    return ckpt.load_module("ecg_encoder", EcgEncoder(cfg))


def mae_from_checkpoint(ckpt: Checkpoint) -> MaeModel:
    model = MaeModel(EcgModelConfig(**ckpt.config["model"]))
    ckpt.load_module("ecg_encoder", model.encoder)
    ckpt.load_module("mae_decoder", model.decoder)
    return model.eval()
