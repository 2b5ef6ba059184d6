"""Trial segmentation, per-trial baseline removal and mean-HbO features."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _io
from .optics import N_CHANNELS, HemoSeries

LABELS = ("yes", "no", "rest")
BASELINE_TAIL_S = 1.5


class EpochError(ValueError):
    """Event bookkeeping or window-shape problem."""


@dataclass(frozen=True)
class ProtocolTiming:
    """Trial phases in seconds: baseline, cue, 'start' prompt, task."""

    baseline_s: float = 14.0
    cue_s: float = 3.0
    start_s: float = 1.0
    task_s: float = 15.0
    sample_rate_hz: float = 10.0

    def __post_init__(self):
        for name in ("baseline_s", "cue_s", "start_s", "task_s", "sample_rate_hz"):
            if not getattr(self, name) > 0:
                raise EpochError(f"{name} must be positive")
        for name in ("baseline_s", "cue_s", "start_s", "task_s"):
            n = getattr(self, name) * self.sample_rate_hz
            if abs(n - round(n)) > 1e-9:
                raise EpochError(f"{name} x sample rate must be an integer sample count, got {n}")

    def _n(self, seconds: float) -> int:
        return int(round(seconds * self.sample_rate_hz))

    @property
    def baseline_samples(self) -> int:
        return self._n(self.baseline_s)

    @property
    def task_offset(self) -> int:
        """Samples from trial onset to task onset."""
        return self._n(self.baseline_s + self.cue_s + self.start_s)

    @property
    def task_samples(self) -> int:
        return self._n(self.task_s)

    @property
    def trial_samples(self) -> int:
        return self.task_offset + self.task_samples

    @property
    def baseline_tail_samples(self) -> int:
        return self._n(BASELINE_TAIL_S)


@dataclass(frozen=True)
class Event:
    onset_sample: int
    label: str
    session: int = 1
    block: int = 1
    trial: int = 1


@dataclass(frozen=True)
class TrialEpoch:
    label: str
    baseline: np.ndarray  # (baseline_samples, n_channels)
    task: np.ndarray  # (task_samples, n_channels)
    session: int = 1
    block: int = 1
    trial: int = 1


def segment_trials(series: HemoSeries, events: Sequence[Event], timing: ProtocolTiming = ProtocolTiming()) -> list[TrialEpoch]:
    """Cut baseline and task windows of [HbO] for every event, in event order."""
    epochs = []
    prev_end = None
    for ev in events:
        if ev.label not in LABELS:
            raise EpochError(f"event s{ev.session}b{ev.block}t{ev.trial}: unknown label {ev.label!r}")
        start = int(ev.onset_sample)
        end = start + timing.trial_samples
        if start < 0 or end > series.n_samples:
            raise EpochError(
                f"event s{ev.session}b{ev.block}t{ev.trial} at sample {start} is truncated: "
                f"needs samples [{start}, {end}) but series has {series.n_samples}"
            )
        if prev_end is not None and start < prev_end:
            raise EpochError(f"event s{ev.session}b{ev.block}t{ev.trial} at sample {start} overlaps the previous trial")
        prev_end = end
        task0 = start + timing.task_offset
        epochs.append(
            TrialEpoch(
                label=ev.label,
                baseline=series.hbo[start : start + timing.baseline_samples].copy(),
                task=series.hbo[task0 : task0 + timing.task_samples].copy(),
                session=ev.session,
                block=ev.block,
                trial=ev.trial,
            )
        )
    return epochs


def remove_baseline(epoch: TrialEpoch, tail_samples: int = 15) -> np.ndarray:
    """Subtract each channel's mean over the last ``tail_samples`` of the baseline."""
    if epoch.baseline.shape[0] < tail_samples:
        raise EpochError(f"baseline has {epoch.baseline.shape[0]} samples, need at least {tail_samples}")
    ref = epoch.baseline[-tail_samples:].mean(axis=0)
    return epoch.task - ref


def extract_features(corrected: np.ndarray, n_channels: int = N_CHANNELS, n_samples: int = 150) -> np.ndarray:
    """Per-channel mean over the whole task window."""
    corrected = np.asarray(corrected, dtype=float)
    if corrected.shape != (n_samples, n_channels):
        raise EpochError(f"task window must be {n_samples}x{n_channels}, got {corrected.shape}")
    values = corrected.mean(axis=0)
    if not np.all(np.isfinite(values)):
        raise EpochError("non-finite feature values")
    return values


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix ``X`` (N x d) with labels and (session, block, trial) provenance."""

    X: np.ndarray
    y: tuple[str, ...]
    provenance: tuple[tuple[int, int, int], ...] = field(default=())

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise EpochError(f"X must be 2-D, got shape {X.shape}")
        y = tuple(self.y)
        if len(y) != X.shape[0]:
            raise EpochError(f"{X.shape[0]} examples but {len(y)} labels")
        unknown = sorted(set(y) - set(LABELS))
        if unknown:
            raise EpochError(f"unknown labels {unknown}")
        prov = tuple(tuple(int(v) for v in p) for p in self.provenance)
        if prov and len(prov) != len(y):
            raise EpochError("provenance length does not match labels")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "provenance", prov)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def classes(self) -> tuple[str, ...]:
        present = set(self.y)
        return tuple(lab for lab in LABELS if lab in present)

    @property
    def K(self) -> int:
        return len(self.classes)

    def indices(self, label: str) -> np.ndarray:
        return np.array([i for i, lab in enumerate(self.y) if lab == label], dtype=int)

    def counts(self) -> dict[str, int]:
        return {lab: self.y.count(lab) for lab in self.classes}

    def without(self, i: int) -> "LabeledDataset":
        keep = np.arange(self.N) != i
        prov = tuple(p for j, p in enumerate(self.provenance) if j != i)
        return LabeledDataset(self.X[keep], tuple(lab for j, lab in enumerate(self.y) if j != i), prov)

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        prov = self.provenance + other.provenance if self.provenance and other.provenance else ()
        return LabeledDataset(np.vstack([self.X, other.X]), self.y + other.y, prov)


def epochs_to_dataset(epochs: Iterable[TrialEpoch], tail_samples: int = 15) -> LabeledDataset:
    epochs = list(epochs)
    if not epochs:
        raise EpochError("no epochs")
    n_samples, n_channels = epochs[0].task.shape
    X = np.array([extract_features(remove_baseline(ep, tail_samples), n_channels, n_samples) for ep in epochs])
    return LabeledDataset(X, tuple(ep.label for ep in epochs), tuple((ep.session, ep.block, ep.trial) for ep in epochs))


EVENT_COLUMNS = ("onset_sample", "label", "session", "block", "trial")


def write_events(path: str | Path, events: Sequence[Event]) -> Path:
    rows = [(e.onset_sample, e.label, e.session, e.block, e.trial) for e in events]
    return _io.write_csv(path, EVENT_COLUMNS, rows)


def read_events(path: str | Path) -> list[Event]:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if tuple(reader.fieldnames or ()) != EVENT_COLUMNS:
            raise EpochError(f"{path}: expected columns {','.join(EVENT_COLUMNS)}")
        return [
            Event(int(r["onset_sample"]), r["label"], int(r["session"]), int(r["block"]), int(r["trial"]))
            for r in reader
        ]


def feature_columns(d: int) -> list[str]:
    return [f"f{j + 1:02d}" for j in range(d)]


def write_features(path: str | Path, data: LabeledDataset) -> Path:
    prov = data.provenance or tuple((0, 0, i + 1) for i in range(data.N))
    header = ["session", "block", "trial", "label"] + feature_columns(data.d)
    rows = [list(p) + [lab] + x.tolist() for p, lab, x in zip(prov, data.y, data.X)]
    return _io.write_csv(path, header, rows)


def read_features(path: str | Path) -> LabeledDataset:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        if header[:4] != ["session", "block", "trial", "label"]:
            raise EpochError(f"{path}: expected session,block,trial,label,f01...")
        rows = list(reader)
    d = len(header) - 4
    if header[4:] != feature_columns(d):
        raise EpochError(f"{path}: feature columns must be f01..f{d:02d}")
    X = np.array([[float(v) for v in r[4:]] for r in rows]).reshape(len(rows), d)
    return LabeledDataset(X, tuple(r[3] for r in rows), tuple((int(r[0]), int(r[1]), int(r[2])) for r in rows))
