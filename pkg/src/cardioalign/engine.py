"""Shared training machinery: seeding, AdamW, cosine schedule, checkpoints, logs."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
from torch import nn

CHECKPOINT_FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DependencyError(RuntimeError):
    """A stage was requested without the upstream artifact it needs (exit code 3)."""


class NumericError(FloatingPointError):
    """Non-finite values appeared during training (exit code 4)."""


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("substream keys must be non-negative")
        return int(k)
    return zlib.crc32(str(k).encode("utf-8"))


def substream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``.

    Keys are counters (epoch, sample index, ...) or names (stage, purpose);
    the stream depends only on the key tuple, never on call order.
    """
    return np.random.default_rng(np.random.SeedSequence([_key(seed), *map(_key, keys)]))


def torch_seed(seed: int, *keys) -> int:
    return int(substream(seed, *keys).integers(0, 2**62))


def seed_torch(seed: int, *keys) -> None:
    torch.manual_seed(torch_seed(seed, *keys))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleSpec:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(
                f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}"
            )

    @classmethod
    def from_epochs(cls, base_lr, epochs, steps_per_epoch, warmup_frac=0.0,
                    warmup_epochs=None, min_lr=0.0) -> "ScheduleSpec":
        total = epochs * steps_per_epoch
        if warmup_epochs is not None:
            warmup = int(warmup_epochs * steps_per_epoch)
        else:
            warmup = int(round(warmup_frac * total))
        return cls(base_lr=base_lr, total_steps=total, warmup_steps=min(warmup, total - 1),
                   min_lr=min_lr)


def cosine_lr(step: int, spec: ScheduleSpec) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine decay to ``min_lr``."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step >= spec.total_steps:
        return spec.min_lr
    if step < spec.warmup_steps:
        return spec.base_lr * step / spec.warmup_steps
    progress = (step - spec.warmup_steps) / (spec.total_steps - spec.warmup_steps)
    return spec.min_lr + 0.5 * (spec.base_lr - spec.min_lr) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


@torch.no_grad()
def optimizer_step(state: OptimizerState, params: Mapping[str, torch.Tensor],
                   grads: Mapping[str, torch.Tensor]):
    """One AdamW update, in place on ``params``.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta,
    with the decay term using the pre-update theta.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    lr, wd = state.lr, state.weight_decay
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape "
                             f"{tuple(p.shape)} for '{name}'")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        update = (m / bc1).div_(denom)
        if wd:
            p.mul_(1.0 - lr * wd)
        p.sub_(update, alpha=lr)
    return state, params


class AdamW:
    """Thin stateful wrapper binding :func:`optimizer_step` to a module."""

    def __init__(self, modules: Mapping[str, nn.Module] | nn.Module, lr=1e-3, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.0):
        if isinstance(modules, nn.Module):
            modules = {"": modules}
        self.params = {}
        for prefix, mod in modules.items():
            for name, p in mod.named_parameters():
                if p.requires_grad:
                    self.params[f"{prefix}.{name}" if prefix else name] = p
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None):
        if lr is not None:
            self.state.lr = lr
        grads = {k: p.grad for k, p in self.params.items()}
        optimizer_step(self.state, {k: p.data for k, p in self.params.items()}, grads)


def check_finite(value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite {what}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    """Named float32 arrays plus a manifest describing where they came from."""

    arch: str
    stage: str
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    best: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    @classmethod
    def from_modules(cls, arch: str, stage: str, modules: Mapping[str, nn.Module], **kw):
        arrays = {}
        for prefix, mod in modules.items():
            for name, t in mod.state_dict().items():
                arrays[f"{prefix}.{name}"] = t.detach().cpu().numpy().astype(np.float32, copy=True)
        return cls(arch=arch, stage=stage, arrays=arrays, **kw)

    @property
    def id(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name], dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def prefixes(self) -> set[str]:
        return {k.split(".", 1)[0] for k in self.arrays}

    def load_module(self, prefix: str, module: nn.Module) -> nn.Module:
        own = module.state_dict()
        wanted = {k[len(prefix) + 1:]: v for k, v in self.arrays.items() if k.startswith(prefix + ".")}
        if not wanted:
            raise CheckpointError(f"checkpoint '{self.arch}' has no arrays for '{prefix}'")
        missing = sorted(set(own) - set(wanted))
        extra = sorted(set(wanted) - set(own))
        if missing or extra:
            raise CheckpointError(f"architecture mismatch for '{prefix}': missing={missing[:5]} "
                                  f"unexpected={extra[:5]}")
        new_state = {}
        for k, t in own.items():
            arr = wanted[k]
            if tuple(arr.shape) != tuple(t.shape):
                raise CheckpointError(f"shape mismatch for '{prefix}.{k}': checkpoint "
                                      f"{tuple(arr.shape)} vs model {tuple(t.shape)}")
            new_state[k] = torch.from_numpy(arr.copy()).to(t.dtype)
        module.load_state_dict(new_state)
        return module

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        entries, offset = [], 0
        with open(path / "params.bin", "wb") as fh:
            for name in sorted(self.arrays):
                data = np.ascontiguousarray(self.arrays[name], dtype="<f4").tobytes()
                fh.write(data)
                entries.append({"name": name, "shape": list(self.arrays[name].shape),
                                "offset": offset, "nbytes": len(data)})
                offset += len(data)
        manifest = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "arch": self.arch,
            "stage": self.stage,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "best": self.best,
            "flags": self.flags,
            "checkpoint_id": self.id,
            "arrays": entries,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        mpath = path / "manifest.json"
        if not mpath.exists():
            raise CheckpointError(f"no checkpoint manifest at {mpath}")
        manifest = json.loads(mpath.read_text())
        found = manifest.get("format_version")
        if found != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format version mismatch: expected "
                                  f"{CHECKPOINT_FORMAT_VERSION}, found {found}")
        blob = (path / "params.bin").read_bytes()
        arrays = {}
        for e in manifest["arrays"]:
            end = e["offset"] + e["nbytes"]
            expected = 4 * int(np.prod(e["shape"], dtype=np.int64))
            if e["nbytes"] != expected or end > len(blob):
                raise CheckpointError(f"array '{e['name']}' truncated: need bytes "
                                      f"[{e['offset']}, {end}) of {expected} bytes, file has {len(blob)}")
            arrays[e["name"]] = np.frombuffer(blob[e["offset"]:end], dtype="<f4").reshape(
                e["shape"]).astype(np.float32)
        return cls(arch=manifest["arch"], stage=manifest["stage"], arrays=arrays,
                   config=manifest.get("config", {}), best=manifest.get("best", {}),
                   flags=manifest.get("flags", {}))


def snapshot(modules: Mapping[str, nn.Module]) -> dict[str, dict[str, torch.Tensor]]:
    return {k: {n: t.detach().clone() for n, t in m.state_dict().items()} for k, m in modules.items()}


def restore(modules: Mapping[str, nn.Module], snap) -> None:
    for k, m in modules.items():
        m.load_state_dict(snap[k])


# ---------------------------------------------------------------------------
# Logs
# ---------------------------------------------------------------------------


class CsvLog:
    """Append-only delimited-text training log; floats written with repr for exact reruns."""

    def __init__(self, path, columns: Iterable[str]):
        self.columns = list(columns)
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def write(self, **row):
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([repr(float(row[c])) if isinstance(row[c], float) else row[c]
                                         for c in self.columns])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    modules: dict
    history: list[dict]
    extras: dict = field(default_factory=dict)
