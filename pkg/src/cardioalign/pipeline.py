"""Stage runner: wires data, checkpoints and logs under ``runs/<name>/<stage>/``."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohort import (FeatureSchema, SynthConfig, build_balanced_subset, generate_synthetic_cohort, load_cohort,
                     save_cohort, select, split_dataset)
from .config import STAGES
from .ecg_mae import EcgModelConfig, MaeConfig, train_mae
from .engine import Checkpoint, CheckpointError, DependencyError
from .finetune_eval import FinetuneConfig, MetricsReport, classifier_from_checkpoint, evaluate, train_finetune
from .image_ssl import ImageModelConfig, SimclrConfig, train_simclr
from .mm_align import AlignConfig, train_multimodal
from .preprocess import clean_ecg, encode_table, impute_tabular

log = logging.getLogger(__name__)


@dataclass
class SplitArrays:
    ids: list
    ecg: np.ndarray
    image: np.ndarray
    tabular: np.ndarray
    labels: dict

    def take(self, idx) -> "SplitArrays":
        idx = np.asarray(idx)
        return SplitArrays([self.ids[i] for i in idx], self.ecg[idx], self.image[idx], self.tabular[idx],
                           {k: v[idx] for k, v in self.labels.items()})


@dataclass
class PreparedData:
    cohort: list
    schema: FeatureSchema
    splits: dict


def stage_dir_name(stage: str, cfg: dict) -> str:
    """Fine-tuning variants (init, frozen encoders, task) get their own directories."""
    if stage not in ("finetune", "evaluate"):
        return stage
    parts = [stage]
    if cfg["init"] != "align":
        parts.append(cfg["init"])
    if cfg["finetune"].get("freeze_encoders"):
        parts.append("frozen")
    if cfg["task"] != "mi":
        parts.append(cfg["task"])
    return "-".join(parts)


class Run:
    def __init__(self, cfg: dict, root="runs"):
        self.cfg = cfg
        self.root = Path(root)
        self.dir = self.root / cfg["name"]
        self._data = None

    def stage_dir(self, stage: str, create: bool = True) -> Path:
        d = self.dir / stage_dir_name(stage, self.cfg)
        if create:
            d.mkdir(parents=True, exist_ok=True)
        return d

    def _candidates(self, stage: str):
        yield self.dir / stage_dir_name(stage, self.cfg)
        if self.cfg.get("upstream"):
            yield self.root / self.cfg["upstream"] / stage_dir_name(stage, self.cfg)

    def checkpoint(self, stage: str, needed_by: str) -> Checkpoint:
        for d in self._candidates(stage):
            if (d / "checkpoint" / "manifest.json").exists():
                return Checkpoint.load(d / "checkpoint")
        raise DependencyError(f"stage '{needed_by}' needs a '{stage_dir_name(stage, self.cfg)}' checkpoint; "
                              f"run '{stage}' first (looked in {[str(p) for p in self._candidates(stage)]})")

    def write_resolved(self, stage: str) -> None:
        (self.stage_dir(stage) / "config-resolved.json").write_text(
            json.dumps(self.cfg, indent=2, sort_keys=True))

    # -- data ---------------------------------------------------------------

    def cohort_path(self, needed_by: str) -> Path:
        if self.cfg.get("cohort_path"):
            return Path(self.cfg["cohort_path"])
        for d in self._candidates("synth-data"):
            if (d / "cohort" / "manifest.json").exists():
                return d / "cohort"
        raise DependencyError(f"stage '{needed_by}' needs a cohort; run 'synth-data' first or set cohort_path")

    def data(self, needed_by: str) -> PreparedData:
        if self._data is None:
            cohort, schema = load_cohort(self.cohort_path(needed_by))
            self._data = prepare(cohort, schema, self.cfg)
        return self._data


def prepare(cohort, schema: FeatureSchema, cfg: dict) -> PreparedData:
    """Filter ECGs, impute+encode tabular rows, split 80/10/10 by subject."""
    pp = cfg["preprocess"]
    split = split_dataset(cohort, tuple(cfg["split"]), cfg["seed"])
    line = pp["line_freq"]
    ecg = np.stack([clean_ecg(s.ecg, pp["highpass_hz"], pp["highpass_order"], line).samples for s in cohort])
    imputed = impute_tabular([s.tabular for s in cohort], schema, seed=cfg["seed"])
    train_ids = set(split.train)
    schema = schema.with_observed_ranges([r for r in imputed if r.subject_id in train_ids])
    tab = encode_table(imputed, schema)
    img = np.stack([s.cmr.phases for s in cohort]).astype(np.float32)
    labels = {t: np.array([s.labels[t] for s in cohort]) for t in cohort[0].labels}
    pos = {s.subject_id: i for i, s in enumerate(cohort)}
    full = SplitArrays([s.subject_id for s in cohort], ecg.astype(np.float32), img, tab, labels)
    splits = {name: full.take([pos[i] for i in split.part(name)]) for name in ("train", "val", "test")}
    return PreparedData(cohort, schema, splits)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_synth(run: Run):
    cfg = run.cfg
    cohort = generate_synthetic_cohort(SynthConfig(**cfg["data"]), cfg["seed"])
    d = run.stage_dir("synth-data")
    save_cohort(cohort, d / "cohort")
    run.write_resolved("synth-data")
    run._data = None
    return {"n": len(cohort)}


def stage_pretrain_ecg(run: Run):
    tr = run.data("pretrain-ecg").splits["train"]
    d = run.stage_dir("pretrain-ecg")
    res = train_mae(tr.ecg, EcgModelConfig(**run.cfg["ecg_model"]), MaeConfig(**run.cfg["mae"]),
                    run.cfg["seed"], d / "log.csv")
    res.checkpoint.save(d / "checkpoint")
    run.write_resolved("pretrain-ecg")
    return res


def stage_pretrain_image(run: Run):
    tr = run.data("pretrain-image").splits["train"]
    d = run.stage_dir("pretrain-image")
    res = train_simclr(tr.image, ImageModelConfig(**run.cfg["image_model"]), SimclrConfig(**run.cfg["simclr"]),
                       run.cfg["seed"], d / "log.csv")
    res.checkpoint.save(d / "checkpoint")
    run.write_resolved("pretrain-image")
    return res


def stage_align(run: Run):
    ecg_ckpt = run.checkpoint("pretrain-ecg", "align")
    img_ckpt = run.checkpoint("pretrain-image", "align")
    data = run.data("align")
    tr, va = data.splits["train"], data.splits["val"]
    d = run.stage_dir("align")
    res = train_multimodal(tr.ecg, tr.image, tr.tabular, ecg_ckpt, img_ckpt, AlignConfig(**run.cfg["align"]),
                           run.cfg["seed"], d / "log.csv", val=(va.ecg, va.image, va.tabular))
    res.checkpoint.save(d / "checkpoint")
    res.extras["full"].save(d / "full-checkpoint")
    (d / "history.json").write_text(json.dumps(res.history, indent=2))
    run.write_resolved("align")
    return res


def stage_finetune(run: Run):
    cfg = run.cfg
    init, task, seed = cfg["init"], cfg["task"], cfg["seed"]
    ckpt = None
    if init == "align":
        ckpt = run.checkpoint("align", "finetune")
    elif init == "mae":
        ckpt = run.checkpoint("pretrain-ecg", "finetune")
    data = run.data("finetune")
    tr, va = data.splits["train"], data.splits["val"]
    train_cohort = select(data.cohort, tr.ids)
    balanced = build_balanced_subset(train_cohort, task, seed)
    pos = {sid: i for i, sid in enumerate(tr.ids)}
    sub = tr.take([pos[s.subject_id] for s in balanced])
    d = run.stage_dir("finetune")
    res = train_finetune((sub.ecg, sub.tabular, sub.labels[task]), (va.ecg, va.tabular, va.labels[task]),
                         FinetuneConfig(**cfg["finetune"]), init=init, ckpt=ckpt,
                         ecg_cfg=EcgModelConfig(**cfg["ecg_model"]), seed=seed, log_path=d / "log.csv",
                         task=task)
    res.checkpoint.save(d / "checkpoint")
    (d / "history.json").write_text(json.dumps(res.history, indent=2))
    run.write_resolved("finetune")
    return res


def stage_evaluate(run: Run) -> MetricsReport:
    cfg = run.cfg
    ckpt = run.checkpoint("finetune", "evaluate")
    model = classifier_from_checkpoint(ckpt)
    te = run.data("evaluate").splits["test"]
    task = cfg["task"]
    if task not in te.labels:
        raise CheckpointError(f"test split has no labels for task '{task}'")
    d = run.stage_dir("evaluate")
    report = evaluate(model, te.ecg, te.tabular, te.labels[task], task=task, split="test", seed=cfg["seed"],
                      checkpoint_id=ckpt.id, roc_path=d / "roc.csv")
    report.save(d / "metrics.json")
    run.write_resolved("evaluate")
    return report


STAGE_FUNCS = {
    "synth-data": stage_synth,
    "pretrain-ecg": stage_pretrain_ecg,
    "pretrain-image": stage_pretrain_image,
    "align": stage_align,
    "finetune": stage_finetune,
    "evaluate": stage_evaluate,
}


def run_stage(run: Run, stage: str):
    t0 = time.time()
    out = STAGE_FUNCS[stage](run)
    log.info("stage %s finished in %.1f s", stage, time.time() - t0)
    return out


def run_pipeline(cfg: dict, root="runs") -> dict:
    """Run the configured stages in canonical order; returns {stage: result}."""
    run = Run(cfg, root)
    results = {}
    for stage in STAGES:
        if stage in cfg["stages"]:
            results[stage] = run_stage(run, stage)
    return results
