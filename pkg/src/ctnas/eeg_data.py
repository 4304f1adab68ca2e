"""Trial ingestion, preprocessing, splitting, and a synthetic EEG generator.

Native on-disk format is a directory holding ``meta.json`` plus one
little-endian float32 file per trial (row-major C x P). CSV files with a
``subject,label,ch0_t0,...`` header are accepted for small fixtures.
"""

from __future__ import annotations

import csv
import json
import math
import os
import re
import warnings
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional, Tuple

import numpy as np
from scipy import signal as sps

FORMAT_VERSION = 1


class DataError(ValueError):
    pass


@dataclass
class TrialSet:
    data: np.ndarray                 # [N, C, P]
    labels: np.ndarray               # [N] int64
    subjects: Tuple[str, ...]
    sample_rate_hz: float
    channel_names: Tuple[str, ...]
    classes: int
    split: Optional[str] = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = tuple(str(s) for s in self.subjects)
        if not self.channel_names:
            self.channel_names = tuple(f"ch{i}" for i in range(self.data.shape[1]))
        self.channel_names = tuple(self.channel_names)
        self.validate()

    def validate(self) -> None:
        if self.data.ndim != 3:
            raise DataError(f"trial array must be [N, C, P], got shape {self.data.shape}")
        n, c, _ = self.data.shape
        if len(self.labels) != n or len(self.subjects) != n:
            raise DataError("labels and subjects must have one entry per trial")
        if len(self.channel_names) != c:
            raise DataError(f"{len(self.channel_names)} channel names for {c} channels")
        if self.sample_rate_hz <= 0:
            raise DataError("sample rate must be > 0")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            bad = int(np.nonzero((self.labels < 0) | (self.labels >= self.classes))[0][0])
            raise DataError(f"trial {bad}: label {self.labels[bad]} outside [0, {self.classes})")
        finite = np.isfinite(self.data).reshape(n, -1).all(axis=1)
        if not finite.all():
            raise DataError(f"trial {int(np.argmin(finite))} contains NaN or Inf samples")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_points(self) -> int:
        return self.data.shape[2]

    def subset(self, index, split: Optional[str] = None) -> "TrialSet":
        index = np.asarray(index, dtype=np.int64)
        return replace(self, data=self.data[index], labels=self.labels[index],
                       subjects=tuple(self.subjects[i] for i in index),
                       split=self.split if split is None else split)

    def trials(self):
        for i in range(len(self)):
            yield self.subjects[i], self.data[i], int(self.labels[i])


# ------------------------------------------------------------------- ingestion

_CSV_COL = re.compile(r"ch(\d+)_t(\d+)")


def _read_csv(path: str, sample_rate_hz: float, classes: Optional[int]) -> TrialSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header[:2] != ["subject", "label"]:
            raise DataError(f"{path}: header must start with 'subject,label'")
        coords = []
        for col in header[2:]:
            m = _CSV_COL.fullmatch(col.strip())
            if not m:
                raise DataError(f"{path}: bad column name {col!r} (expected ch<c>_t<t>)")
            coords.append((int(m.group(1)), int(m.group(2))))
        if not coords:
            raise DataError(f"{path}: no sample columns")
        c = max(a for a, _ in coords) + 1
        p = max(b for _, b in coords) + 1
        if len(coords) != c * p or len(set(coords)) != c * p:
            raise DataError(f"{path}: columns do not form a complete {c} x {p} grid")
        rows_idx = np.array([a for a, _ in coords])
        cols_idx = np.array([b for _, b in coords])
        subjects, labels, trials = [], [], []
        for i, row in enumerate(reader):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: trial {i} has {len(row)} fields, expected {len(header)}")
            try:
                label = int(row[1])
            except ValueError:
                raise DataError(f"{path}: trial {i} has non-integer label {row[1]!r}") from None
            values = np.array([float(v) for v in row[2:]], dtype=np.float64)
            if not np.isfinite(values).all():
                raise DataError(f"{path}: trial {i} contains NaN or Inf samples")
            trial = np.empty((c, p), dtype=np.float32)
            trial[rows_idx, cols_idx] = values
            subjects.append(row[0])
            labels.append(label)
            trials.append(trial)
    if not trials:
        raise DataError(f"{path}: no trials")
    k = classes if classes is not None else max(labels) + 1
    return _checked(np.stack(trials), labels, subjects, sample_rate_hz, (), k, path)


def _checked(data, labels, subjects, rate, channels, classes, where) -> TrialSet:
    try:
        return TrialSet(data, labels, subjects, rate, tuple(channels), classes)
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from None


def _read_dir(path: str) -> TrialSet:
    meta_path = os.path.join(path, "meta.json")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{path}: missing meta.json") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_path}: invalid JSON at byte {exc.pos}: {exc.msg}") from None
    for key in ("channels", "sample_rate_hz", "n_points", "classes", "trials"):
        if key not in meta:
            raise DataError(f"{meta_path}: missing field '{key}'")
    channels = list(meta["channels"])
    c, p = len(channels), int(meta["n_points"])
    classes = meta["classes"]
    k = len(classes) if isinstance(classes, list) else int(classes)
    data, labels, subjects = [], [], []
    for i, entry in enumerate(meta["trials"]):
        for key in ("file", "label", "subject"):
            if key not in entry:
                raise DataError(f"{meta_path}: trials[{i}] missing field '{key}'")
        label = entry["label"]
        if isinstance(label, str) and isinstance(classes, list):
            if label not in classes:
                raise DataError(f"{meta_path}: trials[{i}] has unknown label {label!r}")
            label = classes.index(label)
        if not isinstance(label, int) or not 0 <= label < k:
            raise DataError(f"{meta_path}: trials[{i}] has unknown label {entry['label']!r}")
        raw = np.fromfile(os.path.join(path, entry["file"]), dtype="<f4")
        if raw.size != c * p:
            raise DataError(f"{path}: trial {i} ({entry['file']}) has {raw.size} samples, expected {c} x {p}")
        trial = raw.reshape(c, p)
        if not np.isfinite(trial).all():
            raise DataError(f"{path}: trial {i} contains NaN or Inf samples")
        data.append(trial.astype(np.float32))
        labels.append(label)
        subjects.append(entry["subject"])
    if not data:
        raise DataError(f"{path}: no trials")
    return _checked(np.stack(data), labels, subjects, float(meta["sample_rate_hz"]), channels, k, path)


def ingest(path: str, format: Optional[str] = None, sample_rate_hz: float = 250.0,
           classes: Optional[int] = None) -> TrialSet:
    """Load trials from a trial directory (``format='dir'``) or CSV fixture."""
    if format is None:
        format = "dir" if os.path.isdir(path) else "csv"
    if not os.path.exists(path):
        raise DataError(f"{path}: no such file or directory")
    if format == "csv":
        return _read_csv(path, sample_rate_hz, classes)
    if format == "dir":
        return _read_dir(path)
    raise DataError(f"unknown trial format {format!r} (expected 'dir' or 'csv')")


def write_dir(trials: TrialSet, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    entries = []
    for i in range(len(trials)):
        name = f"trial_{i:05d}.f32"
        np.ascontiguousarray(trials.data[i], dtype="<f4").tofile(os.path.join(path, name))
        entries.append({"file": name, "label": int(trials.labels[i]), "subject": trials.subjects[i]})
    meta = {"format_version": FORMAT_VERSION, "channels": list(trials.channel_names),
            "sample_rate_hz": trials.sample_rate_hz, "n_points": trials.n_points,
            "classes": trials.classes, "trials": entries}
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def write_csv(trials: TrialSet, path: str) -> None:
    c, p = trials.n_channels, trials.n_points
    header = ["subject", "label"] + [f"ch{i}_t{t}" for i in range(c) for t in range(p)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for subj, trial, label in trials.trials():
            w.writerow([subj, label] + [repr(float(v)) for v in np.asarray(trial, dtype=np.float32).ravel()])


# --------------------------------------------------------------- preprocessing

def resample(trials: TrialSet, target_hz: float = 250.0) -> TrialSet:
    """Polyphase resampling to ``target_hz``; P' = round(P · target / source)."""
    src = trials.sample_rate_hz
    if src <= 0 or target_hz <= 0:
        raise DataError("sample rates must be > 0")
    if src == target_hz:
        return trials
    ratio = Fraction(target_hz / src).limit_denominator(1000)
    p_new = int(round(trials.n_points * target_hz / src))
    out = sps.resample_poly(trials.data.astype(np.float64), ratio.numerator, ratio.denominator, axis=-1,
                            window=("kaiser", 10.0), padtype="line")
    if out.shape[-1] < p_new:
        out = np.concatenate([out, np.repeat(out[..., -1:], p_new - out.shape[-1], axis=-1)], axis=-1)
    out = out[..., :p_new].astype(trials.data.dtype)
    return replace(trials, data=out, sample_rate_hz=float(target_hz))


@dataclass
class Normalizer:
    """Per-channel z-score with statistics from the training split only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, train: TrialSet) -> "Normalizer":
        if train.split not in (None, "train"):
            raise DataError(f"normalisation statistics must come from the training split, got '{train.split}'")
        if len(train) == 0:
            raise DataError("cannot fit normalisation on an empty trial set")
        d = train.data.astype(np.float64)
        mean = d.mean(axis=(0, 2))
        std = d.std(axis=(0, 2))
        flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        if flat.any():
            names = [train.channel_names[i] for i in np.nonzero(flat)[0]]
            warnings.warn(f"zero-variance channel(s) {names}; using unit divisor", RuntimeWarning, stacklevel=2)
            std = np.where(flat, 1.0, std)
        return cls(mean, std)

    def apply(self, trials: TrialSet) -> TrialSet:
        if len(self.mean) != trials.n_channels:
            raise DataError("normaliser channel count does not match trials")
        d = (trials.data.astype(np.float64) - self.mean[None, :, None]) / self.std[None, :, None]
        return replace(trials, data=d.astype(trials.data.dtype))


def normalize(train: TrialSet, *others: TrialSet):
    """Fit on ``train`` and apply to it and every other set. Returns a tuple when others are given."""
    norm = Normalizer.fit(train)
    if not others:
        return norm.apply(train)
    return (norm.apply(train),) + tuple(norm.apply(o) for o in others)


@dataclass
class SlicedBatch:
    tensor: np.ndarray   # [B, C, S, W]
    window: int
    stride: int
    labels: Optional[np.ndarray] = None

    @property
    def n_slices(self) -> int:
        return self.tensor.shape[2]

    def reconstruct(self) -> np.ndarray:
        """Reassemble ``[B, C, P_covered]`` from the slices (covered points only)."""
        b, c, s, w = self.tensor.shape
        out = np.empty((b, c, (s - 1) * self.stride + w), dtype=self.tensor.dtype)
        for i in range(s):
            out[:, :, i * self.stride:i * self.stride + w] = self.tensor[:, :, i]
        return out


def slice_stack(trials, window: int = 400, stride: int = 50) -> SlicedBatch:
    """Overlapping windows along time, stacked as a new slice axis."""
    data = trials.data if isinstance(trials, TrialSet) else np.asarray(trials)
    labels = trials.labels if isinstance(trials, TrialSet) else None
    if window < 1 or stride < 1:
        raise DataError("window and stride must be >= 1")
    p = data.shape[-1]
    if p < window:
        raise DataError(f"trials have {p} points, fewer than the {window}-point window")
    s = (p - window) // stride + 1
    view = np.lib.stride_tricks.sliding_window_view(data, window, axis=-1)[..., ::stride, :][..., :s, :]
    return SlicedBatch(np.ascontiguousarray(view), window, stride, labels)


# -------------------------------------------------------------------- splitting

def split(trials: TrialSet, mode: str = "mixed", seed: int = 0, val_ratio: float = 0.5,
          subject: Optional[str] = None) -> Tuple[TrialSet, TrialSet]:
    tr, va = split_indices(trials, mode, seed, val_ratio, subject)
    return trials.subset(tr, "train"), trials.subset(va, "val")


def split_indices(trials: TrialSet, mode: str = "mixed", seed: int = 0, val_ratio: float = 0.5,
                  subject: Optional[str] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Stratified, seeded train/validation split.

    ``mixed`` pools every subject and stratifies by class.
    ``subject_specific`` keeps only ``subject``'s trials first.
    ``leave_ratio`` holds out ``val_ratio`` of every (subject, class) group.
    """
    if not 0 < val_ratio < 1:
        raise DataError("val_ratio must lie in (0, 1)")
    pool = np.arange(len(trials))
    if mode == "subject_specific":
        if subject is None:
            raise DataError("subject_specific split needs a subject id")
        pool = np.array([i for i in pool if trials.subjects[i] == subject], dtype=np.int64)
        if pool.size == 0:
            known = sorted(set(trials.subjects))
            raise DataError(f"unknown subject {subject!r}; available: {known}")
        groups = {}
        for i in pool:
            groups.setdefault(int(trials.labels[i]), []).append(i)
    elif mode == "mixed":
        groups = {}
        for i in pool:
            groups.setdefault(int(trials.labels[i]), []).append(i)
    elif mode == "leave_ratio":
        groups = {}
        for i in pool:
            groups.setdefault((trials.subjects[i], int(trials.labels[i])), []).append(i)
    else:
        raise DataError(f"unknown split mode {mode!r}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for key in sorted(groups):
        idx = np.array(groups[key], dtype=np.int64)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(len(idx) * val_ratio))
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    return np.sort(np.array(train_idx, dtype=np.int64)), np.sort(np.array(val_idx, dtype=np.int64))


# -------------------------------------------------------------------- synthetic

def pink_noise(rng: np.random.Generator, shape: Tuple[int, ...], n: int) -> np.ndarray:
    """Unit-variance 1/f noise along the last axis."""
    spec = rng.standard_normal(shape + (n // 2 + 1,)) + 1j * rng.standard_normal(shape + (n // 2 + 1,))
    f = np.arange(n // 2 + 1, dtype=np.float64)
    f[0] = 1.0
    spec /= np.sqrt(f)
    spec[..., 0] = 0.0
    x = np.fft.irfft(spec, n=n, axis=-1)
    x -= x.mean(axis=-1, keepdims=True)
    x /= x.std(axis=-1, keepdims=True)
    return x


def class_channels(k: int, classes: int, channels: int) -> np.ndarray:
    width = max(1, channels // classes)
    return (np.arange(width) + k * width) % channels


def synth_generate(classes: int = 4, channels: int = 8, points: int = 750, rate: float = 250.0,
                   trials_per_class: int = 50, snr_db: float = 20.0, seed: int = 0,
                   n_subjects: int = 3, amplitude_uv: float = 10.0) -> TrialSet:
    """Class ``k`` carries a (8 + 4k) Hz burst on its own channel group over pink noise."""
    if not math.isfinite(snr_db):
        raise DataError("snr_db must be finite")
    if classes < 1 or channels < 1 or points < 2 or trials_per_class < 1:
        raise DataError("classes, channels, trials_per_class must be >= 1 and points >= 2")
    rng = np.random.default_rng(seed)
    n = classes * trials_per_class
    labels = np.repeat(np.arange(classes), trials_per_class)
    labels = labels[rng.permutation(n)]
    noise = pink_noise(rng, (n, channels), points)
    t = np.arange(points) / rate
    snr = 10.0 ** (snr_db / 10.0)
    data = noise
    burst_len = max(2, int(points * 0.6))
    for i in range(n):
        k = labels[i]
        onset = rng.integers(0, points - burst_len + 1)
        env = np.zeros(points)
        env[onset:onset + burst_len] = sps.windows.tukey(burst_len, 0.5)
        phase = rng.uniform(0, 2 * np.pi)
        wave = env * np.sin(2 * np.pi * (8 + 4 * k) * t + phase)
        wave *= math.sqrt(snr / np.mean(wave ** 2))
        data[i, class_channels(k, classes, channels)] += wave
    subjects = tuple(f"S{(i % n_subjects) + 1}" for i in range(n))
    return TrialSet((data * amplitude_uv).astype(np.float32), labels, subjects, float(rate),
                    tuple(f"ch{i}" for i in range(channels)), classes)


def band_power_features(trials: TrialSet, classes: int) -> np.ndarray:
    """Log power in a 2 Hz band around every class frequency, per channel."""
    d = trials.data.astype(np.float64)
    freqs = np.fft.rfftfreq(d.shape[-1], 1.0 / trials.sample_rate_hz)
    power = np.abs(np.fft.rfft(d, axis=-1)) ** 2
    feats = []
    for k in range(classes):
        band = np.abs(freqs - (8 + 4 * k)) <= 1.0
        feats.append(np.log(power[..., band].sum(axis=-1) + 1e-12))
    return np.concatenate(feats, axis=1)


def labels_onehot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out
