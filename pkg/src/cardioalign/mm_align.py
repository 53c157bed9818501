"""CLIP-style alignment of the fused ECG+tabular signal embedding with the CMR embedding."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import (EcgAugmentConfig, ImageAugmentConfig, augment_ecg_array, augment_image_array,
                      empirical_pool, tabular_corrupt)
from .ecg_mae import EcgEncoder, EcgModelConfig
from .engine import (AdamW, Checkpoint, CsvLog, ScheduleSpec, TrainResult, check_finite, cosine_lr,
                     restore, seed_torch, snapshot, steps_per_epoch, substream)
from .image_ssl import ImageEncoder, ImageModelConfig, ProjectionHead

# ---------------------------------------------------------------------------
# Signal branch
# ---------------------------------------------------------------------------


class TabularEncoder(nn.Module):
    """Linear -> ReLU -> Linear, Xavier-uniform weights and zero biases."""

    def __init__(self, n_features: int, hidden: int = 384, out: int = 384):
        super().__init__()
        self.n_features = n_features
        self.fc1 = nn.Linear(n_features, hidden)
        self.fc2 = nn.Linear(hidden, out)
        for lin in (self.fc1, self.fc2):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    @property
    def width(self) -> int:
        return self.fc2.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.n_features:
            raise ValueError(f"tabular encoder expects {self.n_features} features, got {x.shape[-1]}")
        return self.fc2(F.relu(self.fc1(x)))


@torch.no_grad()
def tabular_encode(encoder: TabularEncoder, x) -> np.ndarray:
    t = torch.as_tensor(np.asarray(x, dtype=np.float32))
    return encoder(t).numpy()


def fuse_signal(ecg_emb: torch.Tensor, tab_emb: torch.Tensor, ecg_width: int | None = None,
                tab_width: int | None = None) -> torch.Tensor:
    """Concatenate [ECG | tabular] along the last axis."""
    if ecg_width is not None and ecg_emb.shape[-1] != ecg_width:
        raise ValueError(f"ECG embedding width {ecg_emb.shape[-1]} != {ecg_width}")
    if tab_width is not None and tab_emb.shape[-1] != tab_width:
        raise ValueError(f"tabular embedding width {tab_emb.shape[-1]} != {tab_width}")
    if ecg_emb.shape[:-1] != tab_emb.shape[:-1]:
        raise ValueError(f"batch shapes differ: {tuple(ecg_emb.shape)} vs {tuple(tab_emb.shape)}")
    return torch.cat([ecg_emb, tab_emb], dim=-1)


class SignalBranch(nn.Module):
    """ECG encoder + tabular encoder with a pluggable token pooling (mean when ``pool`` is None)."""

    def __init__(self, ecg_encoder: EcgEncoder, tab_encoder: TabularEncoder, pool: nn.Module | None = None):
        super().__init__()
        self.ecg_encoder = ecg_encoder
        self.tab_encoder = tab_encoder
        self.pool = pool

    @property
    def width(self) -> int:
        return self.ecg_encoder.width + self.tab_encoder.width

    def forward(self, ecg: torch.Tensor, tab: torch.Tensor) -> torch.Tensor:
        tokens = self.ecg_encoder(ecg)
        pooled = tokens.mean(dim=1) if self.pool is None else self.pool(tokens)
        return fuse_signal(pooled, self.tab_encoder(tab), self.ecg_encoder.width, self.tab_encoder.width)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def clip_loss(z_s: torch.Tensor, z_i: torch.Tensor, tau: float = 0.1, lam: float = 0.5):
    """Returns (total, L_sig, L_img) with total = (1 - lam) L_sig + lam L_img.

    Row k of both batches is the same subject; the other rows are in-batch negatives.
    """
    if z_s.shape != z_i.shape or z_s.ndim != 2:
        raise ValueError(f"projection batches must be [B, d] of equal shape, got "
                         f"{tuple(z_s.shape)} and {tuple(z_i.shape)}")
    if z_s.shape[0] < 2:
        raise ValueError("CLIP loss needs a batch of at least 2 pairs")
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    for name, z in (("signal", z_s), ("image", z_i)):
        dev = float((z.detach().norm(dim=1) - 1.0).abs().max())
        if dev > 1e-4:
            raise ValueError(f"{name} projections are not unit-norm (max deviation {dev:.2e})")
    logits = z_s @ z_i.T / tau
    target = torch.arange(z_s.shape[0])
    l_sig = F.cross_entropy(logits, target)
    l_img = F.cross_entropy(logits.T, target)
    return (1.0 - lam) * l_sig + lam * l_img, l_sig, l_img


def retrieval_mean_rank(z_s, z_i) -> float:
    """Mean 1-based rank of the true image among all images, per signal anchor."""
    sim = np.asarray(z_s, dtype=np.float64) @ np.asarray(z_i, dtype=np.float64).T
    true = np.diag(sim)
    return float(np.mean((sim > true[:, None]).sum(axis=1) + 1))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class AlignConfig:
    epochs: int = 200
    batch_size: int = 256
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_frac: float = 0.1
    lam: float = 0.5
    tau: float = 0.1
    corruption_rate: float = 0.3
    tab_hidden: int = 384
    tab_out: int = 384
    proj_hidden: int = 256
    proj_out: int = 128
    freeze_image: bool = False
    max_steps: int | None = None
    ecg_augment: dict = field(default_factory=dict)
    image_augment: dict = field(default_factory=dict)

    def validate(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be > 0, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError(f"corruption_rate must lie in [0, 1], got {self.corruption_rate}")
        EcgAugmentConfig(**self.ecg_augment)
        ImageAugmentConfig(**self.image_augment)


class AlignModel(nn.Module):
    def __init__(self, signal: SignalBranch, image: ImageEncoder, cfg: AlignConfig):
        super().__init__()
        self.signal = signal
        self.image = image
        self.signal_head = ProjectionHead(signal.width, cfg.proj_hidden, cfg.proj_out)
        self.image_head = ProjectionHead(image.width, cfg.proj_hidden, cfg.proj_out)

    def project(self, ecg, tab, img):
        z_s = F.normalize(self.signal_head(self.signal(ecg, tab)), dim=1)
        z_i = F.normalize(self.image_head(self.image(img)), dim=1)
        return z_s, z_i


def _check_paired(ecgs, images, tabular):
    n = {len(ecgs), len(images), len(tabular)}
    if len(n) != 1:
        raise ValueError(f"modalities have different sample counts: ecg={len(ecgs)} "
                         f"image={len(images)} tabular={len(tabular)}")
    for name, arr in (("ecg", ecgs), ("image", images), ("tabular", tabular)):
        if not np.isfinite(arr).all():
            raise ValueError(f"{name} modality has missing or non-finite values")


def _batch(ecgs, images, tabular, idx, cfg: AlignConfig, pool, seed, *keys):
    ea = EcgAugmentConfig(**cfg.ecg_augment)
    ia = ImageAugmentConfig(**cfg.image_augment)
    e = np.stack([augment_ecg_array(ecgs[i], ea, substream(seed, *keys, "ecg", int(i))) for i in idx])
    im = np.stack([augment_image_array(images[i], ia, substream(seed, *keys, "img", int(i))) for i in idx])
    t = tabular_corrupt(tabular[idx], cfg.corruption_rate, pool, substream(seed, *keys, "tab"))
    return (torch.from_numpy(e.astype(np.float32)), torch.from_numpy(t.astype(np.float32)),
            torch.from_numpy(im.astype(np.float32)))


@torch.no_grad()
def align_eval(model: AlignModel, ecgs, images, tabular, cfg: AlignConfig, batch_size: int = 64) -> dict:
    """Clean-input CLIP loss and retrieval mean rank over consecutive held-out batches."""
    was = model.training
    model.eval()
    losses, ranks = [], []
    n = len(ecgs)
    for s in range(0, n - 1, batch_size):
        sl = slice(s, min(s + batch_size, n))
        if sl.stop - sl.start < 2:
            break
        z_s, z_i = model.project(torch.from_numpy(np.asarray(ecgs[sl], dtype=np.float32)),
                                 torch.from_numpy(np.asarray(tabular[sl], dtype=np.float32)),
                                 torch.from_numpy(np.asarray(images[sl], dtype=np.float32)))
        losses.append(float(clip_loss(z_s, z_i, cfg.tau, cfg.lam)[0]))
        ranks.append(retrieval_mean_rank(z_s.numpy(), z_i.numpy()))
    model.train(was)
    return {"loss": float(np.mean(losses)), "mean_rank": float(np.mean(ranks))}


def build_align_model(ecg_ckpt: Checkpoint | None, img_ckpt: Checkpoint | None, n_features: int,
                      cfg: AlignConfig, ecg_cfg: EcgModelConfig | None = None,
                      img_cfg: ImageModelConfig | None = None) -> AlignModel:
    ecg_cfg = EcgModelConfig(**ecg_ckpt.config["model"]) if ecg_ckpt is not None else ecg_cfg
    img_cfg = ImageModelConfig(**img_ckpt.config["model"]) if img_ckpt is not None else img_cfg
    if ecg_cfg is None or img_cfg is None:
        raise ValueError("need either upstream checkpoints or explicit model configs")
    ecg = EcgEncoder(ecg_cfg)
    if ecg_ckpt is not None:
        ecg_ckpt.load_module("ecg_encoder", ecg)
    img = ImageEncoder(img_cfg)
    if img_ckpt is not None:
        img_ckpt.load_module("image_encoder", img)
    tab = TabularEncoder(n_features, cfg.tab_hidden, cfg.tab_out)
    return AlignModel(SignalBranch(ecg, tab), img, cfg)


def train_multimodal(ecgs: np.ndarray, images: np.ndarray, tabular: np.ndarray, ecg_ckpt: Checkpoint,
                     img_ckpt: Checkpoint, cfg: AlignConfig, seed: int = 0, log_path=None,
                     val: tuple | None = None) -> TrainResult:
    """Align signal and image projections; ``checkpoint`` is the signal branch, ``extras['full']`` everything.

    ``tabular`` is the encoded (imputed) [n, F] table; ``val`` an optional held-out
    (ecgs, images, tabular) triple evaluated on clean inputs after every epoch.
    """
    ecgs = np.asarray(ecgs, dtype=np.float32)
    images = np.asarray(images, dtype=np.float32)
    tabular = np.asarray(tabular, dtype=np.float32)
    _check_paired(ecgs, images, tabular)
    n = len(ecgs)
    bs = min(cfg.batch_size, n)
    if bs < 2:
        raise ValueError("alignment needs a batch size of at least 2")
    seed_torch(seed, "align", "init")
    model = build_align_model(ecg_ckpt, img_ckpt, tabular.shape[1], cfg)
    if cfg.freeze_image:
        for p in model.image.parameters():
            p.requires_grad_(False)
    pool = empirical_pool(tabular)
    spe = steps_per_epoch(n, bs)
    epochs = cfg.epochs if cfg.max_steps is None else math.ceil(cfg.max_steps / spe)
    total = cfg.max_steps or epochs * spe
    sched = ScheduleSpec(cfg.base_lr, total, min(int(round(cfg.warmup_frac * total)), total - 1))
    opt = AdamW(model, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    log = CsvLog(log_path, ["step", "lr", "L_sig", "L_img", "total"])
    history, best, best_snap, step = [], math.inf, None, 0
    if val is not None:
        history.append({"epoch": -1, **{f"val_{k}": v for k, v in align_eval(model, *val, cfg).items()}})
    model.train()
    for epoch in range(epochs):
        order = substream(seed, "align", "order", epoch).permutation(n)
        sums, count = np.zeros(3), 0
        for b in range(spe):
            if step >= total:
                break
            idx = order[b * bs:(b + 1) * bs]
            if len(idx) < 2:
                continue
            e, t, im = _batch(ecgs, images, tabular, idx, cfg, pool, seed, "align", "aug", epoch, b)
            lr = cosine_lr(step, sched)
            loss, l_sig, l_img = clip_loss(*model.project(e, t, im), cfg.tau, cfg.lam)
            check_finite(loss, f"CLIP loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            log.write(step=step, lr=lr, L_sig=l_sig.item(), L_img=l_img.item(), total=loss.item())
            sums += [loss.item(), l_sig.item(), l_img.item()]
            count += 1
            step += 1
        if count == 0:
            break
        rec = {"epoch": epoch, "loss": sums[0] / count, "L_sig": sums[1] / count, "L_img": sums[2] / count}
        if val is not None:
            rec.update({f"val_{k}": v for k, v in align_eval(model, *val, cfg).items()})
        history.append(rec)
        if rec["loss"] < best:
            best, best_snap = rec["loss"], snapshot({"m": model})
    restore({"m": model}, best_snap)
    model.eval()
    config = {"ecg_model": asdict(model.signal.ecg_encoder.cfg), "image_model": asdict(model.image.cfg),
              "n_features": int(tabular.shape[1]), "train": asdict(cfg), "seed": seed}
    best_rec = {"metric": "train_loss", "value": best}
    signal = Checkpoint.from_modules(
        "signal-branch", "align",
        {"ecg_encoder": model.signal.ecg_encoder, "tabular_encoder": model.signal.tab_encoder,
         "signal_head": model.signal_head},
        config=config, best=best_rec, flags={"signal_head": "pretraining-only"})
    full = Checkpoint.from_modules(
        "align-full", "align",
        {"ecg_encoder": model.signal.ecg_encoder, "tabular_encoder": model.signal.tab_encoder,
         "signal_head": model.signal_head, "image_encoder": model.image, "image_head": model.image_head},
        config=config, best=best_rec)
    return TrainResult(signal, {"model": model}, history, {"full": full})


def signal_branch_from_checkpoint(ckpt: Checkpoint) -> SignalBranch:
    """ECG + tabular encoders (mean pooling) restored from an alignment checkpoint."""
    ecg = ckpt.load_module("ecg_encoder", EcgEncoder(EcgModelConfig(**ckpt.config["ecg_model"])))
    train = ckpt.config["train"]
    tab = TabularEncoder(ckpt.config["n_features"], train["tab_hidden"], train["tab_out"])
    ckpt.load_module("tabular_encoder", tab)
    return SignalBranch(ecg, tab)
