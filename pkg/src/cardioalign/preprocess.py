"""ECG filtering, tabular encoding/imputation and cardiac phase selection."""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import signal

from .cohort import CmrPhaseStack, EcgRecord, FeatureSchema, TabularRecord


@dataclass(frozen=True)
class FilterSpec:
    kind: str = "highpass"  # "highpass" | "notch"
    frequency: float = 0.5
    order: int = 5
    sampling_rate: float = 500.0
    quality: float = 30.0  # notch only

    def __post_init__(self):
        if self.kind not in ("highpass", "notch"):
            raise ValueError(f"unknown filter kind '{self.kind}'")
        nyquist = self.sampling_rate / 2
        if not 0 < self.frequency < nyquist:
            raise ValueError(f"filter frequency {self.frequency} Hz must lie in (0, {nyquist}) Hz "
                             f"for sampling rate {self.sampling_rate} Hz")
        if self.order < 1:
            raise ValueError(f"filter order must be >= 1, got {self.order}")


def highpass(x: np.ndarray, fs: float, cutoff: float = 0.5, order: int = 5) -> np.ndarray:
    """Zero-phase Butterworth high-pass along the last axis (float64 out)."""
    spec = FilterSpec("highpass", cutoff, order, fs)
    sos = signal.butter(spec.order, spec.frequency, btype="highpass", fs=fs, output="sos")
    x = np.asarray(x, dtype=np.float64)
    # Even (mirror) padding over the full record keeps the edge transient of the
    # very low cutoff out of the signal; odd padding injects a step at each end.
    return signal.sosfiltfilt(sos, x, axis=-1, padtype="even", padlen=x.shape[-1] - 1)


def notch(x: np.ndarray, fs: float, line_freq: float = 50.0, quality: float = 30.0) -> np.ndarray:
    """Zero-phase second-order IIR notch at ``line_freq`` along the last axis."""
    spec = FilterSpec("notch", line_freq, 2, fs, quality)
    b, a = signal.iirnotch(spec.frequency, spec.quality, fs=fs)
    x = np.asarray(x, dtype=np.float64)
    padlen = min(x.shape[-1] - 1, int(3 * fs / (line_freq / quality)))
    return signal.filtfilt(b, a, x, axis=-1, padlen=padlen)


def highpass_filter(ecg: EcgRecord, spec: FilterSpec | None = None) -> EcgRecord:
    spec = spec or FilterSpec("highpass", 0.5, 5, ecg.sampling_rate)
    if spec.kind != "highpass":
        raise ValueError("highpass_filter needs a highpass FilterSpec")
    if spec.sampling_rate != ecg.sampling_rate:
        raise ValueError(f"spec sampling rate {spec.sampling_rate} != record {ecg.sampling_rate}")
    out = highpass(ecg.samples, ecg.sampling_rate, spec.frequency, spec.order)
    return EcgRecord(ecg.subject_id, out.astype(np.float32), ecg.sampling_rate)


def powerline_notch(ecg: EcgRecord, line_freq: float = 50.0, quality: float = 30.0) -> EcgRecord:
    out = notch(ecg.samples, ecg.sampling_rate, line_freq, quality)
    return EcgRecord(ecg.subject_id, out.astype(np.float32), ecg.sampling_rate)


def clean_ecg(ecg: EcgRecord, cutoff=0.5, order=5, line_freq: float | None = 50.0) -> EcgRecord:
    """High-pass then mains notch; the notch is skipped when the line frequency is above Nyquist."""
    x = highpass(ecg.samples, ecg.sampling_rate, cutoff, order)
    if line_freq is not None and line_freq < ecg.sampling_rate / 2:
        x = notch(x, ecg.sampling_rate, line_freq)
    return EcgRecord(ecg.subject_id, x.astype(np.float32), ecg.sampling_rate)


# ---------------------------------------------------------------------------
# Tabular
# ---------------------------------------------------------------------------


def encode_tabular(record: TabularRecord, schema: FeatureSchema) -> np.ndarray:
    """Ordinal codes for categorical features, clamped min-max scaling for continuous ones."""
    if len(record.values) != len(schema):
        raise ValueError(f"record has {len(record.values)} values, schema has {len(schema)} features")
    out = np.empty(len(schema), dtype=np.float64)
    for j, (f, v) in enumerate(zip(schema.features, record.values)):
        if v is None:
            raise ValueError(f"feature '{f.name}' of {record.subject_id} is missing; impute first")
        if f.kind == "categorical":
            try:
                out[j] = f.categories.index(v)
            except ValueError:
                raise ValueError(f"feature '{f.name}': value {v!r} not in vocabulary {f.categories}") from None
        else:
            if f.minimum is None or f.maximum is None:
                raise ValueError(f"feature '{f.name}' has no observed range in the schema")
            span = f.maximum - f.minimum
            out[j] = 0.0 if span == 0 else min(1.0, max(0.0, (float(v) - f.minimum) / span))
    return out


def encode_table(records: Sequence[TabularRecord], schema: FeatureSchema) -> np.ndarray:
    return np.stack([encode_tabular(r, schema) for r in records]).astype(np.float32)


def impute_tabular(table: Sequence[TabularRecord], schema: FeatureSchema, rounds: int = 10,
                   seed: int = 0) -> list[TabularRecord]:
    """Mode imputation for categorical features, round-robin linear regression for continuous ones."""
    from sklearn.exceptions import ConvergenceWarning
    from sklearn.experimental import enable_iterative_imputer  # noqa: F401
    from sklearn.impute import IterativeImputer
    from sklearn.linear_model import LinearRegression

    table = list(table)
    if not any(v is None for r in table for v in r.values):
        return table
    F = len(schema)
    cols = [[r.values[j] for r in table] for j in range(F)]
    filled = []
    for f, col in zip(schema.features, cols):
        observed = [v for v in col if v is not None]
        if not observed:
            raise ValueError(f"feature '{f.name}' is missing for every record")
        if f.kind == "categorical":
            counts = Counter(observed)
            # ties go to the earliest vocabulary entry
            mode = max(f.categories, key=lambda c: (counts.get(c, 0), -f.categories.index(c)))
            filled.append([mode if v is None else v for v in col])
        else:
            filled.append(col)

    cont = [j for j, f in enumerate(schema.features) if f.kind == "continuous"]
    if any(v is None for j in cont for v in filled[j]):
        X = np.empty((len(table), F))
        for j, f in enumerate(schema.features):
            if f.kind == "categorical":
                X[:, j] = [f.categories.index(v) for v in filled[j]]
            else:
                X[:, j] = [np.nan if v is None else v for v in filled[j]]
        imputer = IterativeImputer(estimator=LinearRegression(), max_iter=rounds, tol=0.0,
                                   initial_strategy="mean", imputation_order="roman",
                                   random_state=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            X = imputer.fit_transform(X)
        for j in cont:
            filled[j] = [float(X[i, j]) if v is None else v for i, v in enumerate(filled[j])]

    return [TabularRecord(r.subject_id, tuple(filled[j][i] for j in range(F)), r.schema_id)
            for i, r in enumerate(table)]


# ---------------------------------------------------------------------------
# Cardiac phases
# ---------------------------------------------------------------------------


def _minmax(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        return np.zeros_like(img, dtype=np.float32)
    return ((img - lo) / (hi - lo)).astype(np.float32)


def phase_indices(counts: Sequence[int]) -> tuple[int, int, int]:
    """(ED, ES, mid) frame indices from per-frame ventricle pixel counts."""
    counts = np.asarray(counts)
    ed = int(np.argmax(counts))  # argmax/argmin return the first index on ties
    es = int(np.argmin(counts))
    mid = int(np.floor((ed + es) / 2 + 0.5))
    return ed, es, mid


def select_cardiac_phases(volume_series: np.ndarray, masks: np.ndarray,
                          subject_id: str = "") -> CmrPhaseStack:
    """Pick end-diastolic, end-systolic and mid frames from a [frames, H, W] series."""
    volume_series = np.asarray(volume_series)
    masks = np.asarray(masks).astype(bool)
    if volume_series.ndim != 3 or volume_series.shape[0] < 3:
        raise ValueError(f"need a [frames>=3, H, W] series, got shape {volume_series.shape}")
    if masks.shape != volume_series.shape:
        raise ValueError(f"mask shape {masks.shape} does not match series {volume_series.shape}")
    counts = masks.reshape(masks.shape[0], -1).sum(axis=1)
    if counts.max() == 0:
        raise ValueError("ventricle masks are empty on every frame")
    idx = phase_indices(counts)
    return CmrPhaseStack(subject_id, np.stack([_minmax(volume_series[i]) for i in idx]))
