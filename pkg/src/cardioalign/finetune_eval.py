"""Supervised fine-tuning of the signal branch and the evaluation metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata
from torch import nn

from .ecg_mae import EcgEncoder, EcgModelConfig
from .engine import (AdamW, Checkpoint, ConfigError, CsvLog, ScheduleSpec, TrainResult, check_finite,
                     cosine_lr, restore, seed_torch, snapshot, steps_per_epoch, substream)
from .mm_align import SignalBranch, TabularEncoder

# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class AttentionPool(nn.Module):
    """A single learned query attends over the tokens, one softmax per head.

    There is no output projection, so each head's output is a convex combination
    of that head's value projections.
    """

    def __init__(self, width: int, heads: int = 6):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.width, self.heads = width, heads
        self.query = nn.Parameter(torch.randn(width) * 0.02)
        self.key = nn.Linear(width, width)
        self.value = nn.Linear(width, width)

    def weights(self, tokens: torch.Tensor) -> torch.Tensor:
        """Attention weights [B, heads, N]."""
        if tokens.ndim != 3 or tokens.shape[1] == 0:
            raise ValueError(f"attention pooling needs [B, N>=1, width] tokens, got {tuple(tokens.shape)}")
        B, N, _ = tokens.shape
        dh = self.width // self.heads
        k = self.key(tokens).view(B, N, self.heads, dh)
        q = self.query.view(self.heads, dh)
        scores = torch.einsum("bnhd,hd->bhn", k, q) / math.sqrt(dh)
        return scores.softmax(dim=-1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        B, N, _ = tokens.shape
        a = self.weights(tokens)
        v = self.value(tokens).view(B, N, self.heads, self.width // self.heads)
        return torch.einsum("bhn,bnhd->bhd", a, v).reshape(B, self.width)


class SignalClassifier(nn.Module):
    def __init__(self, branch: SignalBranch, n_classes: int = 2):
        super().__init__()
        self.branch = branch
        self.head = nn.Linear(branch.width, n_classes)

    def forward(self, ecg, tab):
        return self.head(self.branch(ecg, tab))


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean -log softmax(logits)[label], stabilised by subtracting the row max."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.ndim != 2 or labels.shape != logits.shape[:1]:
        raise ValueError(f"need [B, K] logits and [B] labels, got {tuple(logits.shape)} / {tuple(labels.shape)}")
    if bool(((labels < 0) | (labels >= logits.shape[1])).any()):
        raise ValueError(f"labels must lie in [0, {logits.shape[1] - 1}]")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_z = shifted.exp().sum(dim=1).log()
    return (log_z - shifted.gather(1, labels[:, None])[:, 0]).mean()


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    y = y.astype(int)
    if y.min() == y.max():
        raise ValueError("both classes must be present")
    return y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic from midranks: P(s+ > s-) + 0.5 P(s+ = s-)."""
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"scores shape {s.shape} != labels shape {y.shape}")
    ranks = rankdata(s)  # ties get the average rank
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def confusion_counts(preds, labels) -> dict:
    p = np.asarray(preds).astype(int)
    y = np.asarray(labels).astype(int)
    return {"tp": int(((p == 1) & (y == 1)).sum()), "fp": int(((p == 1) & (y == 0)).sum()),
            "tn": int(((p == 0) & (y == 0)).sum()), "fn": int(((p == 0) & (y == 1)).sum())}


def balanced_from_counts(tp, fp, tn, fn) -> float:
    return (tp / (tp + fn) + tn / (tn + fp)) / 2


def balanced_accuracy(preds, labels) -> float:
    y = _binary_labels(labels)
    p = np.asarray(preds)
    if not np.isin(p, (0, 1)).all():
        raise ValueError("predictions must be 0 or 1")
    c = confusion_counts(p, y)
    return balanced_from_counts(c["tp"], c["fp"], c["tn"], c["fn"])


def roc_curve_points(scores, labels) -> list[tuple[float, float, float]]:
    """(threshold, TPR, FPR) rows, predicting positive when score >= threshold."""
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    rows = [(math.inf, 0.0, 0.0)]
    for thr in np.unique(s)[::-1]:
        pred = s >= thr
        rows.append((float(thr), float((pred & (y == 1)).sum() / y.sum()),
                     float((pred & (y == 0)).sum() / (len(y) - y.sum()))))
    return rows


def write_roc_curve(path, scores, labels) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "tpr", "fpr"])
        for row in roc_curve_points(scores, labels):
            w.writerow([repr(v) for v in row])
    return path


@dataclass
class MetricsReport:
    auc: float
    balanced_accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    task: str
    split: str
    seed: int
    checkpoint_id: str

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneConfig:
    epochs: int = 400
    batch_size: int = 64
    base_lr: float = 1e-5
    weight_decay: float = 1e-4
    warmup_frac: float = 0.05
    pool_heads: int = 6
    tab_hidden: int = 384
    tab_out: int = 384
    max_steps: int | None = None
    # train only the pool and head; with init "scratch" this is the frozen-random ablation
    freeze_encoders: bool = False


INIT_MODES = ("align", "mae", "scratch")


def build_classifier(init: str, ckpt: Checkpoint | None, n_features: int, cfg: FinetuneConfig,
                     ecg_cfg: EcgModelConfig | None = None, train_ecgs=None) -> SignalClassifier:
    """Classifier initialised from an alignment checkpoint, an MAE checkpoint, or nothing."""
    if init not in INIT_MODES:
        raise ConfigError(f"unknown init '{init}', expected one of {INIT_MODES}")
    if init != "scratch" and ckpt is None:
        raise ConfigError(f"init '{init}' needs a checkpoint")
    if init == "align":
        ecg = EcgEncoder(EcgModelConfig(**ckpt.config["ecg_model"]))
        ckpt.load_module("ecg_encoder", ecg)
        t = ckpt.config["train"]
        if ckpt.config["n_features"] != n_features:
            raise ValueError(f"checkpoint tabular width {ckpt.config['n_features']} != data width {n_features}")
        tab = TabularEncoder(n_features, t["tab_hidden"], t["tab_out"])
        ckpt.load_module("tabular_encoder", tab)
    else:
        if init == "mae":
            ecg = EcgEncoder(EcgModelConfig(**ckpt.config["model"]))
            ckpt.load_module("ecg_encoder", ecg)
        else:
            if ecg_cfg is None or train_ecgs is None:
                raise ConfigError("scratch init needs an ECG model config and training ECGs")
            ecg = EcgEncoder(ecg_cfg)
            ecg.set_lead_statistics(train_ecgs)
        tab = TabularEncoder(n_features, cfg.tab_hidden, cfg.tab_out)
    pool = AttentionPool(ecg.width, cfg.pool_heads)
    return SignalClassifier(SignalBranch(ecg, tab, pool))


@torch.no_grad()
def predict_scores(model: SignalClassifier, ecgs, tabular, batch_size: int = 256) -> np.ndarray:
    """Positive-class softmax probabilities."""
    was = model.training
    model.eval()
    out = []
    for s in range(0, len(ecgs), batch_size):
        logits = model(torch.from_numpy(np.asarray(ecgs[s:s + batch_size], dtype=np.float32)),
                       torch.from_numpy(np.asarray(tabular[s:s + batch_size], dtype=np.float32)))
        out.append(logits.softmax(dim=1)[:, 1].double().numpy())
    model.train(was)
    return np.concatenate(out)


def evaluate(model: SignalClassifier, ecgs, tabular, labels, task: str = "mi", split: str = "test",
             seed: int = 0, checkpoint_id: str = "", roc_path=None) -> MetricsReport:
    if labels is None:
        raise ValueError(f"split '{split}' has no labels for task '{task}'")
    y = _binary_labels(labels)
    scores = predict_scores(model, ecgs, tabular)
    preds = (scores >= 0.5).astype(int)
    c = confusion_counts(preds, y)
    if roc_path is not None:
        write_roc_curve(roc_path, scores, y)
    return MetricsReport(auc=roc_auc(scores, y), balanced_accuracy=balanced_from_counts(**c), **c,
                         task=task, split=split, seed=seed, checkpoint_id=checkpoint_id)


def train_finetune(train: tuple, val: tuple, cfg: FinetuneConfig, init: str = "align",
                   ckpt: Checkpoint | None = None, ecg_cfg: EcgModelConfig | None = None,
                   seed: int = 0, log_path=None, task: str = "mi") -> TrainResult:
    """End-to-end fine-tuning on a balanced (ecgs, tabular, labels) training set.

    The model is selected on validation balanced accuracy, ties broken by AUC.
    """
    ecgs, tab, y = (np.asarray(a) for a in train)
    y = _binary_labels(y)
    if int(y.sum()) * 2 != len(y):
        raise ValueError(f"fine-tuning needs a balanced set, got {int(y.sum())} positives of {len(y)}")
    ecgs = ecgs.astype(np.float32)
    tab = tab.astype(np.float32)
    seed_torch(seed, "finetune", init, "init")
    model = build_classifier(init, ckpt, tab.shape[1], cfg, ecg_cfg, ecgs)
    if cfg.freeze_encoders:
        for p in [*model.branch.ecg_encoder.parameters(), *model.branch.tab_encoder.parameters()]:
            p.requires_grad_(False)
    n = len(y)
    bs = min(cfg.batch_size, n)
    spe = steps_per_epoch(n, bs)
    epochs = cfg.epochs if cfg.max_steps is None else math.ceil(cfg.max_steps / spe)
    total = cfg.max_steps or epochs * spe
    sched = ScheduleSpec(cfg.base_lr, total, min(int(round(cfg.warmup_frac * total)), total - 1))
    opt = AdamW(model, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    log = CsvLog(log_path, ["step", "lr", "loss"])
    history, best_key, best_snap, step = [], (-math.inf, -math.inf), None, 0
    labels_t = torch.from_numpy(y)
    model.train()
    for epoch in range(epochs):
        order = substream(seed, "finetune", "order", epoch).permutation(n)
        losses = []
        for b in range(spe):
            if step >= total:
                break
            idx = order[b * bs:(b + 1) * bs]
            lr = cosine_lr(step, sched)
            loss = cross_entropy(model(torch.from_numpy(ecgs[idx]), torch.from_numpy(tab[idx])), labels_t[idx])
            check_finite(loss, f"cross-entropy at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            log.write(step=step, lr=lr, loss=loss.item())
            losses.append(loss.item())
            step += 1
        if not losses:
            break
        rep = evaluate(model, *val, task=task, split="val", seed=seed)
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), "val_auc": rep.auc,
               "val_balanced_accuracy": rep.balanced_accuracy}
        history.append(rec)
        key = (rep.balanced_accuracy, rep.auc)
        if key > best_key:
            best_key, best_snap = key, snapshot({"m": model})
    restore({"m": model}, best_snap)
    model.eval()
    ckpt_out = Checkpoint.from_modules(
        "signal-classifier", "finetune",
        {"ecg_encoder": model.branch.ecg_encoder, "tabular_encoder": model.branch.tab_encoder,
         "pool": model.branch.pool, "head": model.head},
        config={"ecg_model": asdict(model.branch.ecg_encoder.cfg), "n_features": int(tab.shape[1]),
                "tab_hidden": model.branch.tab_encoder.fc1.out_features,
                "tab_out": model.branch.tab_encoder.width, "train": asdict(cfg), "init": init,
                "task": task, "seed": seed},
        best={"metric": "val_balanced_accuracy", "value": best_key[0], "val_auc": best_key[1]})
    return TrainResult(ckpt_out, {"model": model}, history)


def classifier_from_checkpoint(ckpt: Checkpoint) -> SignalClassifier:
    c = ckpt.config
    ecg = ckpt.load_module("ecg_encoder", EcgEncoder(EcgModelConfig(**c["ecg_model"])))
    tab = ckpt.load_module("tabular_encoder", TabularEncoder(c["n_features"], c["tab_hidden"], c["tab_out"]))
    pool = ckpt.load_module("pool", AttentionPool(ecg.width, c["train"]["pool_heads"]))
    model = SignalClassifier(SignalBranch(ecg, tab, pool))
    ckpt.load_module("head", model.head)
    return model.eval()
