"""Paired ECG / CMR / tabular cohort: data model, synthetic generator, splits, disk format."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .engine import substream

PHASE_NAMES = ("end-diastolic", "end-systolic", "mid")
COHORT_FORMAT_VERSION = 1
TASKS = ("mi", "stroke")


class CohortFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EcgRecord:
    subject_id: str
    samples: np.ndarray  # [leads, time], float32, mV
    sampling_rate: float = 500.0

    def __post_init__(self):
        x = np.asarray(self.samples)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"ECG samples must be [C>=1, T>=1], got shape {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError(f"ECG for {self.subject_id} contains non-finite values")
        object.__setattr__(self, "samples", x.astype(np.float32, copy=False))

    @property
    def shape(self):
        return self.samples.shape

    def __eq__(self, other):
        return (isinstance(other, EcgRecord) and self.subject_id == other.subject_id
                and self.sampling_rate == other.sampling_rate
                and np.array_equal(self.samples, other.samples))


@dataclass(frozen=True, eq=False)
class CmrPhaseStack:
    subject_id: str
    phases: np.ndarray  # [3, H, W] in [0, 1]
    phase_names: tuple = PHASE_NAMES

    def __post_init__(self):
        x = np.asarray(self.phases)
        if x.ndim != 3 or x.shape[0] != 3:
            raise ValueError(f"CMR stack must have exactly 3 phase slices, got shape {x.shape}")
        if x.shape[1] < 8 or x.shape[2] < 8:
            raise ValueError(f"CMR slices must be at least 8x8, got {x.shape[1:]}")
        if not (np.isfinite(x).all() and x.min() >= 0.0 and x.max() <= 1.0):
            raise ValueError(f"CMR values for {self.subject_id} must lie in [0, 1]")
        if tuple(self.phase_names) != PHASE_NAMES:
            raise ValueError(f"phase names must be {PHASE_NAMES}")
        object.__setattr__(self, "phases", x.astype(np.float32, copy=False))

    def __eq__(self, other):
        return (isinstance(other, CmrPhaseStack) and self.subject_id == other.subject_id
                and np.array_equal(self.phases, other.phases))


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str  # "categorical" | "continuous"
    categories: tuple[str, ...] = ()
    minimum: float | None = None
    maximum: float | None = None

    def __post_init__(self):
        if self.kind == "categorical":
            if not self.categories:
                raise ValueError(f"categorical feature '{self.name}' needs a vocabulary")
        elif self.kind == "continuous":
            if self.minimum is not None and self.maximum is not None and self.minimum > self.maximum:
                raise ValueError(f"feature '{self.name}': min {self.minimum} > max {self.maximum}")
        else:
            raise ValueError(f"feature '{self.name}': unknown kind '{self.kind}'")


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureSpec, ...]
    schema_id: str = "cardio-tabular-33"

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")

    def __len__(self):
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def with_observed_ranges(self, records: Sequence["TabularRecord"]) -> "FeatureSchema":
        """Copy of the schema with continuous min/max taken from observed values."""
        feats = []
        for j, f in enumerate(self.features):
            if f.kind == "continuous":
                vals = [r.values[j] for r in records if r.values[j] is not None]
                if not vals:
                    raise ValueError(f"feature '{f.name}' has no observed values")
                f = replace(f, minimum=float(min(vals)), maximum=float(max(vals)))
            feats.append(f)
        return FeatureSchema(tuple(feats), self.schema_id)

    def to_dict(self) -> dict:
        return {"schema_id": self.schema_id, "features": [
            {"name": f.name, "kind": f.kind, "categories": list(f.categories),
             "minimum": f.minimum, "maximum": f.maximum} for f in self.features]}

    @classmethod
    def from_dict(cls, d) -> "FeatureSchema":
        return cls(tuple(FeatureSpec(f["name"], f["kind"], tuple(f["categories"]), f["minimum"],
                                     f["maximum"]) for f in d["features"]), d["schema_id"])


@dataclass(frozen=True)
class TabularRecord:
    subject_id: str
    values: tuple  # str for categorical, float for continuous, None when missing
    schema_id: str = "cardio-tabular-33"

    @property
    def missing(self) -> tuple[bool, ...]:
        return tuple(v is None for v in self.values)

    def conforms(self, schema: FeatureSchema) -> bool:
        return len(self.values) == len(schema) and self.schema_id == schema.schema_id


@dataclass(frozen=True)
class PairedSample:
    ecg: EcgRecord
    cmr: CmrPhaseStack
    tabular: TabularRecord
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = {self.ecg.subject_id, self.cmr.subject_id, self.tabular.subject_id}
        if len(ids) != 1:
            raise ValueError(f"modalities disagree on subject id: {sorted(ids)}")
        for task, y in self.labels.items():
            if y not in (0, 1):
                raise ValueError(f"label for task '{task}' must be 0 or 1, got {y!r}")

    @property
    def subject_id(self) -> str:
        return self.ecg.subject_id


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    seed: int
    ratios: tuple[float, float, float]

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def part(self, name: str) -> tuple[str, ...]:
        if name not in ("train", "val", "test"):
            raise KeyError(f"unknown split part '{name}'")
        return getattr(self, name)


def pair_modalities(ecgs, cmrs, tabular, labels) -> list[PairedSample]:
    """Join per-modality records on subject id, dropping subjects missing any modality."""
    e = {r.subject_id: r for r in ecgs}
    c = {r.subject_id: r for r in cmrs}
    t = {r.subject_id: r for r in tabular}
    common = sorted(set(e) & set(c) & set(t) & set(labels))
    return [PairedSample(e[s], c[s], t[s], dict(labels[s])) for s in common]


# ---------------------------------------------------------------------------
# Tabular schema template (33 features, demographics / comorbidities / lifestyle)
# ---------------------------------------------------------------------------

YES_NO = ("No", "Yes")

# name, kind, vocabulary, (mean, sd) or prevalence, missing count out of 45257
_TEMPLATE = [
    ("age", "continuous", (), (64.6, 7.8), 0),
    ("waist_circumference", "continuous", (), (88.7, 12.8), 0),
    ("height", "continuous", (), (170.1, 9.4), 0),
    ("weight", "continuous", (), (76.1, 15.2), 0),
    ("bmi", "continuous", (), (26.5, 4.4), 0),
    ("sex", "categorical", ("Female", "Male"), 0.483, 0),
    ("diabetes", "categorical", YES_NO, 0.056, 134),
    ("health_rating", "categorical", ("Excellent", "Good", "Fair", "Poor"), None, 86),
    ("vascular_heart_problem", "categorical", YES_NO, 0.059, 14),
    ("stroke_father", "categorical", YES_NO, 0.14, 0),
    ("stroke_mother", "categorical", YES_NO, 0.141, 0),
    ("stroke_siblings", "categorical", YES_NO, 0.036, 0),
    ("breathe_shortness", "categorical", YES_NO, 0.069, 645),
    ("anxiety_visit", "categorical", YES_NO, 0.299, 256),
    ("chest_pain", "categorical", YES_NO, 0.104, 365),
    ("stenosis", "categorical", YES_NO, 0.003, 0),
    ("hypertension", "categorical", YES_NO, 0.217, 0),
    ("kidney_disease", "categorical", YES_NO, 0.027, 0),
    ("dementia", "categorical", YES_NO, 0.0004, 0),
    ("thyrotoxicosis", "categorical", YES_NO, 0.014, 0),
    ("migraine", "categorical", YES_NO, 0.074, 0),
    ("atrial_fibrillation", "categorical", YES_NO, 0.032, 0),
    ("heart_failure", "categorical", YES_NO, 0.007, 0),
    ("embolism", "categorical", YES_NO, 0.009, 0),
    ("deep_vein_thrombosis", "categorical", YES_NO, 0.016, 35),
    ("smoke", "categorical", ("Never", "Previous", "Current"), None, 9),
    ("alcohol_intake", "categorical", ("Never", "Special occasions only", "One to three times a month",
                                       "Once or twice a week", "Three or four times a week",
                                       "Daily or almost daily"), None, 19),
    ("diet_salt", "categorical", ("Never/rarely", "Sometimes", "Usually", "Always"), None, 9),
    ("tv_time", "continuous", (), (2.8, 1.6), 125),
    ("pc_time", "continuous", (), (1.5, 1.5), 142),
    ("physical_activity", "continuous", (), (4.1, 2.2), 1053),
    ("sleep_duration", "continuous", (), (7.2, 1.1), 128),
    ("coffee_intake", "continuous", (), (2.0, 1.9), 28),
]
_TEMPLATE_N = 45257


def default_schema() -> FeatureSchema:
    return FeatureSchema(tuple(FeatureSpec(name, kind, vocab) for name, kind, vocab, _, _ in _TEMPLATE))


# ---------------------------------------------------------------------------
# Synthetic cohort
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    n: int = 2000
    n_leads: int = 12
    n_time: int = 500
    sampling_rate: float = 125.0
    image_size: int = 64
    prevalence: float = 0.15           # MI
    stroke_prevalence: float = 0.075   # roughly half the MI cases
    # correlation of each modality's view with the shared latent
    image_weight: float = 0.95
    ecg_weight: float = 0.8
    tabular_weight: float = 0.45
    label_sharpness: float = 3.0
    missing_scale: float = 1.0
    ecg_noise_mv: float = 0.03
    heart_rate_sd: float = 10.0
    beat_jitter_s: float | None = None  # onset jitter of the first beat; None = a full RR interval
    image_noise: float = 0.02

    def validate(self):
        if self.n < 10:
            raise ValueError(f"cohort size must be >= 10, got {self.n}")
        for name in ("prevalence", "stroke_prevalence"):
            p = getattr(self, name)
            if not 0.0 < p < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {p}")
        for name in ("image_weight", "ecg_weight", "tabular_weight"):
            w = getattr(self, name)
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {w}")
        if self.n_leads < 1 or self.n_time < 1 or self.image_size < 8:
            raise ValueError("degenerate ECG or image shape")


LATENT_DIM = 3
# Task label directions in latent space.
_TASK_DIRECTIONS = {"mi": np.array([1.0, 0.25, 0.0]), "stroke": np.array([0.55, 0.0, 0.85])}


def _solve_bias(scores: np.ndarray, sharpness: float, prevalence: float) -> float:
    f = lambda b: expit(sharpness * scores + b).mean() - prevalence
    return brentq(f, -60.0, 60.0, xtol=1e-12)


def _lead_vectors(n_leads: int) -> np.ndarray:
    """Unit lead axes: six frontal limb leads then precordial leads in the horizontal plane."""
    frontal = np.deg2rad([0.0, 60.0, 120.0, -150.0, -30.0, 90.0])
    horizontal = np.deg2rad([-90.0, -70.0, -45.0, -15.0, 15.0, 45.0])
    vecs = [np.array([np.cos(a), np.sin(a), 0.0]) for a in frontal]
    vecs += [np.array([np.cos(a) * 0.6, 0.3, np.sin(a) * 0.75]) for a in horizontal]
    vecs = [v / np.linalg.norm(v) for v in vecs]
    if n_leads <= 12:
        return np.stack(vecs[:n_leads])
    extra = np.linspace(0, 2 * np.pi, n_leads - 12, endpoint=False)
    vecs += [np.array([np.cos(a), np.sin(a), 0.5]) / np.sqrt(1.25) for a in extra]
    return np.stack(vecs)


def _render_ecg(zv: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    fs, T = cfg.sampling_rate, cfg.n_time
    t = np.arange(T) / fs
    leads = _lead_vectors(cfg.n_leads)

    # Electrical axis and T-wave/QRS relationship carry the latent; rate and gain are nuisance.
    axis = np.deg2rad(50.0 + 28.0 * zv[1])
    elev = 0.35 + 0.25 * np.tanh(zv[2])
    qrs_dir = np.array([np.cos(axis) * np.cos(elev), np.sin(axis) * np.cos(elev), np.sin(elev)])
    gain = 1.2 * np.exp(0.2 * rng.standard_normal())
    t_ratio = 0.32 - 0.22 * zv[0]
    t_axis = axis + np.deg2rad(20.0 * zv[0])
    t_dir = np.array([np.cos(t_axis), np.sin(t_axis), 0.2])
    t_dir /= np.linalg.norm(t_dir)
    st_shift = 0.06 * zv[0]

    qrs_amp = gain * leads @ qrs_dir
    t_amp = gain * t_ratio * leads @ t_dir
    p_amp = gain * 0.12 * leads @ np.array([0.7, 0.7, 0.1])
    st_amp = gain * st_shift * leads @ t_dir

    hr = float(np.clip(68.0 + cfg.heart_rate_sd * rng.standard_normal() + 4.0 * zv[2], 45.0, 110.0))
    rr = 60.0 / hr
    start = -rng.uniform(0.0, rr if cfg.beat_jitter_s is None else cfg.beat_jitter_s)
    beats = np.arange(start, t[-1] + rr, rr)
    qrs_w = 0.035 * (1.0 + 0.1 * rng.standard_normal())

    def bump(center, width):
        return np.exp(-0.5 * ((t[None, :] - center[:, None]) / width) ** 2).sum(axis=0)

    p_wave = bump(beats + 0.0, 0.03)
    q_wave = bump(beats + 0.13, qrs_w * 0.6)
    r_wave = bump(beats + 0.16, qrs_w)
    s_wave = bump(beats + 0.19, qrs_w * 0.6)
    st_seg = bump(beats + 0.27, 0.05)
    t_wave = bump(beats + 0.40, 0.06)

    x = (np.outer(p_amp, p_wave)
         + np.outer(qrs_amp, r_wave - 0.15 * q_wave - 0.25 * s_wave)
         + np.outer(st_amp, st_seg)
         + np.outer(t_amp, t_wave))
    # baseline wander, mains interference, sensor noise
    wander = 0.15 * np.sin(2 * np.pi * rng.uniform(0.1, 0.35) * t + rng.uniform(0, 2 * np.pi))
    x += wander[None, :] * rng.uniform(0.5, 1.5, size=(cfg.n_leads, 1))
    if 50.0 < fs / 2:
        x += 0.03 * np.sin(2 * np.pi * 50.0 * t + rng.uniform(0, 2 * np.pi))[None, :]
    x += cfg.ecg_noise_mv * rng.standard_normal(x.shape)
    return x.astype(np.float32)


BLOOD_INTENSITY = 0.85
MYOCARDIUM_INTENSITY = 0.35


def _render_cmr(zv: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    H = W = cfg.image_size
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy = H / 2 + rng.uniform(-2.0, 2.0) * H / 64
    cx = W / 2 + rng.uniform(-2.0, 2.0) * W / 64
    scale = H / 64.0
    # Absolute size is mostly nuisance; contraction and relative wall thickness carry the latent.
    r_ed = scale * float(np.clip(12.5 + 1.2 * rng.standard_normal() + 0.6 * zv[2], 8.0, 17.0))
    contraction = float(np.clip(0.62 + 0.09 * zv[0], 0.42, 0.84))
    rel_wall = float(np.clip(0.38 + 0.08 * zv[1], 0.18, 0.6))
    R_ed = r_ed * (1.0 + rel_wall)
    wall_area = R_ed**2 - r_ed**2
    r_es = r_ed * contraction
    r_mid = 0.5 * (r_ed + r_es)
    ell = 1.0 + 0.08 * rng.standard_normal()
    dist = np.sqrt(((yy - cy) * ell) ** 2 + ((xx - cx) / ell) ** 2)
    backdrop = 0.12 + 0.05 * np.sin(xx / W * rng.uniform(2, 6) + rng.uniform(0, 6)) \
        * np.cos(yy / H * rng.uniform(2, 6))
    intensity_gain = rng.uniform(0.92, 1.05)
    phases = []
    for r in (r_ed, r_es, r_mid):
        R = np.sqrt(r**2 + wall_area)
        img = backdrop.copy()
        img[dist <= R] = MYOCARDIUM_INTENSITY
        img[dist <= r] = BLOOD_INTENSITY
        img = img * intensity_gain + cfg.image_noise * rng.standard_normal(img.shape)
        phases.append(np.clip(img, 0.0, 1.0))
    return np.stack(phases).astype(np.float32)


def ventricle_pixel_count(phase: np.ndarray) -> int:
    """Blood-pool pixel count of a synthetic slice (intensity threshold between pool and wall)."""
    return int((np.asarray(phase) > 0.6).sum())


def _sample_tabular(zv: np.ndarray, rng: np.random.Generator, missing_scale: float) -> tuple:
    def mix(a, b=0.0, c=0.0):
        # monotone link with unit variance overall
        own = a * zv[0] + b * zv[1] + c * zv[2]
        return own + np.sqrt(max(1.0 - a * a - b * b - c * c, 0.0)) * rng.standard_normal()

    def binary(prev, link):
        return YES_NO[int(rng.random() < expit(np.log(prev / (1 - prev)) + link))]

    def ordinal(vocab, latent, spread=1.0):
        cuts = np.linspace(-1.2, 1.2, len(vocab) - 1) * spread
        return vocab[int(np.searchsorted(cuts, latent))]

    vals = {}
    vals["age"] = float(np.clip(64.6 + 7.8 * mix(0.5), 40.0, 82.0))
    height = float(np.clip(170.1 + 9.4 * rng.standard_normal(), 145.0, 200.0))
    weight = float(np.clip(76.1 + 15.2 * mix(0.0, 0.6), 40.0, 160.0))
    vals["height"] = height
    vals["weight"] = weight
    vals["bmi"] = weight / (height / 100.0) ** 2
    vals["waist_circumference"] = float(np.clip(88.7 + 12.8 * mix(0.0, 0.65), 55.0, 150.0))
    vals["sex"] = ("Female", "Male")[int(rng.random() < expit(0.4 * zv[0] - 0.07))]
    vals["diabetes"] = binary(0.056, 0.9 * zv[1])
    vals["health_rating"] = ordinal(("Excellent", "Good", "Fair", "Poor"), mix(0.4, 0.2) + 0.3)
    vals["vascular_heart_problem"] = binary(0.059, 1.0 * zv[0])
    vals["chest_pain"] = binary(0.104, 0.8 * zv[0])
    vals["hypertension"] = binary(0.217, 0.5 * zv[0] + 0.4 * zv[2])
    vals["breathe_shortness"] = binary(0.069, 0.6 * zv[2])
    vals["smoke"] = ordinal(("Never", "Previous", "Current"), mix(0.3) - 0.9, 1.0)
    for name, kind, vocab, stat, _ in _TEMPLATE:
        if name in vals:
            continue
        if kind == "continuous":
            mean, sd = stat
            vals[name] = float(max(0.0, mean + sd * rng.standard_normal()))
        elif stat is not None:
            vals[name] = binary(stat, 0.0) if vocab == YES_NO else vocab[int(rng.random() < stat)]
        else:
            vals[name] = vocab[int(rng.integers(len(vocab)))]
    out = []
    for name, kind, vocab, stat, n_missing in _TEMPLATE:
        v = vals[name]
        if n_missing and rng.random() < missing_scale * n_missing / _TEMPLATE_N:
            v = None
        out.append(v)
    return tuple(out)


def generate_synthetic_cohort(config: SynthConfig, seed: int) -> list[PairedSample]:
    """Draw a cohort whose three modalities are noisy views of a shared latent.

    Every subject has a latent ``z`` (LATENT_DIM standard normals). Labels are
    Bernoulli(sigmoid(sharpness * z . u_task + b_task)) with ``b_task`` solved so the
    expected prevalence over the drawn latents equals the configured value. Each
    modality renders from ``w * z + sqrt(1 - w^2) * noise`` with its own weight ``w``;
    the image weight is the largest, so the image carries the most label information.
    """
    config.validate()
    n = config.n
    rng = substream(seed, "cohort", "latent")
    z = rng.standard_normal((n, LATENT_DIM))

    labels = {}
    for task, prev in (("mi", config.prevalence), ("stroke", config.stroke_prevalence)):
        u = _TASK_DIRECTIONS[task] / np.linalg.norm(_TASK_DIRECTIONS[task])
        score = z @ u
        b = _solve_bias(score, config.label_sharpness, prev)
        p = expit(config.label_sharpness * score + b)
        labels[task] = (substream(seed, "cohort", "labels", task).random(n) < p).astype(int)

    def view(weight, name):
        noise = substream(seed, "cohort", "view", name).standard_normal(z.shape)
        return weight * z + math.sqrt(1.0 - weight**2) * noise

    z_ecg = view(config.ecg_weight, "ecg")
    z_img = view(config.image_weight, "image")
    z_tab = view(config.tabular_weight, "tabular")
    schema = default_schema()

    cohort = []
    for i in range(n):
        sid = f"S{i:05d}"
        ecg = _render_ecg(z_ecg[i], config, substream(seed, "cohort", "ecg", i))
        cmr = _render_cmr(z_img[i], config, substream(seed, "cohort", "cmr", i))
        tab = _sample_tabular(z_tab[i], substream(seed, "cohort", "tabular", i), config.missing_scale)
        cohort.append(PairedSample(
            EcgRecord(sid, ecg, config.sampling_rate),
            CmrPhaseStack(sid, cmr),
            TabularRecord(sid, tab, schema.schema_id),
            {task: int(labels[task][i]) for task in TASKS},
        ))
    return cohort


# ---------------------------------------------------------------------------
# Splits and balanced subsets
# ---------------------------------------------------------------------------


def _subject_ids(cohort) -> list[str]:
    return [s if isinstance(s, str) else s.subject_id for s in cohort]


def split_dataset(cohort, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    ids = _subject_ids(cohort)
    if not ids:
        raise ValueError("cannot split an empty cohort")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative fractions summing to 1, got {ratios}")
    n = len(ids)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(ratios[0] * n + 0.5))
    n_val = min(int(math.floor(ratios[1] * n + 0.5)), n - n_train)
    order = [ids[i] for i in perm]
    return DatasetSplit(tuple(order[:n_train]), tuple(order[n_train:n_train + n_val]),
                        tuple(order[n_train + n_val:]), seed, tuple(float(r) for r in ratios))


def select(cohort: Sequence[PairedSample], ids: Sequence[str]) -> list[PairedSample]:
    by_id = {s.subject_id: s for s in cohort}
    return [by_id[i] for i in ids]


def build_balanced_subset(dataset: Sequence[PairedSample], task: str, seed: int) -> list[PairedSample]:
    """All positives plus an equal number of negatives drawn without replacement, shuffled."""
    for s in dataset:
        if task not in s.labels:
            raise KeyError(f"subject {s.subject_id} has no label for task '{task}'")
    pos = [s for s in dataset if s.labels[task] == 1]
    neg = [s for s in dataset if s.labels[task] == 0]
    if not pos:
        raise ValueError(f"no positive samples for task '{task}'")
    if len(neg) < len(pos):
        raise ValueError(f"only {len(neg)} negatives for {len(pos)} positives on task '{task}'")
    rng = substream(seed, "balanced", task)
    chosen = rng.choice(len(neg), size=len(pos), replace=False)
    subset = pos + [neg[i] for i in sorted(chosen)]
    return [subset[i] for i in rng.permutation(len(subset))]


# ---------------------------------------------------------------------------
# Disk format
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def save_cohort(cohort: Sequence[PairedSample], path, schema: FeatureSchema | None = None) -> dict:
    if not cohort:
        raise ValueError("cannot save an empty cohort")
    schema = schema or default_schema()
    path = Path(path)
    (path / "ecg").mkdir(parents=True, exist_ok=True)
    (path / "cmr").mkdir(parents=True, exist_ok=True)
    first = cohort[0]
    tasks = sorted(first.labels)
    subjects = []
    for s in cohort:
        sid = s.subject_id
        (path / "ecg" / f"{sid}.bin").write_bytes(np.ascontiguousarray(s.ecg.samples, "<f4").tobytes())
        (path / "cmr" / f"{sid}.bin").write_bytes(np.ascontiguousarray(s.cmr.phases, "<f4").tobytes())
        subjects.append({"subject_id": sid, "ecg_shape": list(s.ecg.shape),
                         "cmr_shape": list(s.cmr.phases.shape),
                         "sampling_rate": s.ecg.sampling_rate})
    with open(path / "tabular.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", *schema.names])
        for s in cohort:
            if not s.tabular.conforms(schema):
                raise ValueError(f"tabular record {s.subject_id} does not match schema {schema.schema_id}")
            w.writerow([s.subject_id, *map(_fmt, s.tabular.values)])
    with open(path / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", *tasks])
        for s in cohort:
            w.writerow([s.subject_id, *(s.labels[t] for t in tasks)])
    manifest = {
        "format_version": COHORT_FORMAT_VERSION,
        "dtype": "float32-le",
        "tasks": tasks,
        "schema": schema.to_dict(),
        "phase_names": list(PHASE_NAMES),
        "subjects": subjects,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def _read_array(file: Path, shape) -> np.ndarray:
    expected = 4 * int(np.prod(shape))
    data = file.read_bytes()
    if len(data) != expected:
        raise CohortFormatError(f"{file}: expected {expected} bytes for shape {tuple(shape)}, "
                                f"found {len(data)}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def load_cohort(path) -> tuple[list[PairedSample], FeatureSchema]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    found = manifest.get("format_version")
    if found != COHORT_FORMAT_VERSION:
        raise CohortFormatError(f"cohort format version mismatch: expected {COHORT_FORMAT_VERSION}, "
                                f"found {found}")
    schema = FeatureSchema.from_dict(manifest["schema"])
    kinds = [f.kind for f in schema.features]
    tab = {}
    with open(path / "tabular.csv", newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        if header[1:] != schema.names:
            raise CohortFormatError("tabular.csv header does not match the manifest schema")
        for row in rows:
            vals = tuple(None if v == "" else (float(v) if k == "continuous" else v)
                         for v, k in zip(row[1:], kinds))
            tab[row[0]] = TabularRecord(row[0], vals, schema.schema_id)
    labels = {}
    with open(path / "labels.csv", newline="") as fh:
        rows = csv.reader(fh)
        tasks = next(rows)[1:]
        for row in rows:
            labels[row[0]] = {t: int(v) for t, v in zip(tasks, row[1:])}
    cohort = []
    for entry in manifest["subjects"]:
        sid = entry["subject_id"]
        ecg = _read_array(path / "ecg" / f"{sid}.bin", entry["ecg_shape"])
        cmr = _read_array(path / "cmr" / f"{sid}.bin", entry["cmr_shape"])
        cohort.append(PairedSample(EcgRecord(sid, ecg, entry["sampling_rate"]), CmrPhaseStack(sid, cmr),
                                   tab[sid], labels[sid]))
    return cohort, schema
