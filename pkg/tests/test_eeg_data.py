import hashlib
import math
import os

import numpy as np
import pytest

from ctnas.eeg_data import (DataError, TrialSet, band_power_features, ingest, labels_onehot, normalize, resample,
                            slice_stack, split, synth_generate, write_csv, write_dir)

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def trialset(data, labels=None, subjects=None, rate=250.0, classes=2):
    n = len(data)
    labels = np.zeros(n, int) if labels is None else labels
    subjects = tuple(f"S{i % 2 + 1}" for i in range(n)) if subjects is None else subjects
    return TrialSet(np.asarray(data, np.float32), labels, subjects, rate, (), classes)


def probe_accuracy(trials, classes, seed=0):
    """Least-squares linear probe on band powers, scored on a held-out half."""
    tr, va = split(trials, "mixed", seed)
    ftr, fva = band_power_features(tr, classes), band_power_features(va, classes)
    mu, sd = ftr.mean(axis=0), ftr.std(axis=0) + 1e-12
    ftr, fva = (ftr - mu) / sd, (fva - mu) / sd
    a = np.hstack([ftr, np.ones((len(ftr), 1))])
    w, *_ = np.linalg.lstsq(a, labels_onehot(tr.labels, classes), rcond=None)
    pred = (np.hstack([fva, np.ones((len(fva), 1))]) @ w).argmax(axis=1)
    return float(np.mean(pred == va.labels))


# ---------------------------------------------------------------- ingest

def test_csv_fixture():
    t = ingest(os.path.join(FIXTURES, "tiny.csv"))
    assert (len(t), t.n_channels, t.n_points) == (2, 3, 10)
    assert t.subjects == ("S1", "S2") and t.labels.tolist() == [0, 1]


def test_csv_and_binary_encodings_agree():
    a = ingest(os.path.join(FIXTURES, "tiny.csv"))
    b = ingest(os.path.join(FIXTURES, "tiny_dir"))
    assert a.data.tobytes() == b.data.tobytes()
    assert (a.labels.tolist(), a.subjects, a.sample_rate_hz, a.channel_names, a.classes) == \
        (b.labels.tolist(), b.subjects, b.sample_rate_hz, b.channel_names, b.classes)


def test_nan_trial_rejected_with_index(tmp_path):
    lines = open(os.path.join(FIXTURES, "tiny.csv")).read().splitlines()
    fields = lines[2].split(",")
    fields[5] = "nan"
    lines[2] = ",".join(fields)
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="trial 1"):
        ingest(str(bad))


def test_binary_shape_mismatch_rejected(tmp_path):
    t = ingest(os.path.join(FIXTURES, "tiny.csv"))
    write_dir(t, str(tmp_path / "d"))
    with open(tmp_path / "d" / "trial_00001.f32", "ab") as fh:
        fh.write(b"\0\0\0\0")
    with pytest.raises(DataError, match="trial 1"):
        ingest(str(tmp_path / "d"))


def test_unknown_label_rejected(tmp_path):
    t = ingest(os.path.join(FIXTURES, "tiny.csv"))
    with pytest.raises(DataError, match="label"):
        ingest(os.path.join(FIXTURES, "tiny.csv"), classes=1)
    write_dir(t, str(tmp_path / "d"))
    meta = (tmp_path / "d" / "meta.json").read_text().replace('"label": 1', '"label": 5')
    (tmp_path / "d" / "meta.json").write_text(meta)
    with pytest.raises(DataError, match="unknown label"):
        ingest(str(tmp_path / "d"))


def test_write_round_trips(tmp_path):
    t = synth_generate(classes=2, channels=3, points=40, trials_per_class=3, seed=1)
    write_csv(t, str(tmp_path / "t.csv"))
    write_dir(t, str(tmp_path / "d"))
    a, b = ingest(str(tmp_path / "t.csv"), classes=2), ingest(str(tmp_path / "d"))
    assert a.data.tobytes() == t.data.tobytes() == b.data.tobytes()
    assert a.labels.tolist() == b.labels.tolist() == t.labels.tolist()


def test_bad_csv_header(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("subj,label,ch0_t0\nS1,0,1.0\n")
    with pytest.raises(DataError, match="header"):
        ingest(str(p))


# -------------------------------------------------------------- resample

def test_resample_identity_is_bit_identical():
    t = synth_generate(classes=2, channels=2, points=100, trials_per_class=2)
    out = resample(t, 250.0)
    assert out.data.tobytes() == t.data.tobytes()


def test_resample_constant_stays_constant():
    t = trialset(np.full((2, 2, 300), 3.5), rate=300.0)
    for target in (250.0, 128.0, 1000.0):
        out = resample(t, target)
        assert out.n_points == round(300 * target / 300.0)
        np.testing.assert_allclose(out.data, 3.5, atol=1e-4)


def test_resample_sine_downsampling():
    rate = 1000.0
    t = np.arange(4000) / rate
    sig = np.sin(2 * np.pi * 10 * t)
    trials = TrialSet(sig[None, None, :], [0], ("S1",), rate, (), 1)
    trials.data = trials.data.astype(np.float64)
    out = resample(trials, 250.0)
    assert out.n_points == 1000
    ref = np.sin(2 * np.pi * 10 * np.arange(1000) / 250.0)
    inner = slice(100, 900)
    assert np.max(np.abs(out.data[0, 0, inner] - ref[inner])) < 1e-3


# ------------------------------------------------------------- normalize

def test_normalize_standard_data_unchanged():
    rng = np.random.default_rng(0)
    d = rng.standard_normal((20, 3, 50))
    d = (d - d.mean(axis=(0, 2), keepdims=True)) / d.std(axis=(0, 2), keepdims=True)
    t = TrialSet(d, np.zeros(20, int), ("S1",) * 20, 250.0, (), 1)
    np.testing.assert_allclose(normalize(t).data, d, atol=1e-6)


def test_normalize_constant_channel_warns():
    d = np.random.default_rng(1).standard_normal((4, 2, 10))
    d[:, 1] = 7.0
    t = trialset(d)
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        out = normalize(t)
    assert not out.data[:, 1].any()


def test_normalize_uses_train_statistics_only():
    t = synth_generate(classes=2, channels=4, points=60, trials_per_class=20, seed=3)
    tr, va = split(t, "mixed", 0)
    ntr, nva = normalize(tr, va)
    d = ntr.data.astype(np.float64)
    assert np.abs(d.mean(axis=(0, 2))).max() < 1e-6
    assert np.abs(d.std(axis=(0, 2)) - 1).max() < 1e-6
    d = va.data.astype(np.float64)
    expected = (d - tr.data.astype(np.float64).mean(axis=(0, 2))[None, :, None]) / \
        tr.data.astype(np.float64).std(axis=(0, 2))[None, :, None]
    np.testing.assert_allclose(nva.data, expected, rtol=1e-5, atol=1e-5)
    with pytest.raises(DataError, match="training split"):
        normalize(va)


# ------------------------------------------------------------ slice_stack

def test_slicing_750_400_50():
    data = np.arange(2 * 3 * 750, dtype=np.float32).reshape(2, 3, 750)
    sb = slice_stack(data, 400, 50)
    assert sb.tensor.shape == (2, 3, 8, 400)
    for s in range(8):
        np.testing.assert_array_equal(sb.tensor[:, :, s], data[:, :, 50 * s:50 * s + 400])
    for s in range(7):
        np.testing.assert_array_equal(sb.tensor[:, :, s, 50:], sb.tensor[:, :, s + 1, :350])
    np.testing.assert_array_equal(sb.reconstruct(), data)


def test_slicing_edge_cases():
    data = np.random.default_rng(0).standard_normal((1, 2, 400))
    sb = slice_stack(data)
    assert sb.n_slices == 1
    np.testing.assert_array_equal(sb.tensor[:, :, 0], data)
    sb = slice_stack(np.zeros((1, 1, 449)))
    assert sb.n_slices == 1
    with pytest.raises(DataError):
        slice_stack(np.zeros((1, 1, 399)))


# ------------------------------------------------------------------ split

def test_mixed_split_balanced():
    t = synth_generate(classes=2, channels=2, points=20, trials_per_class=50, seed=0)
    tr, va = split(t, "mixed", 4, val_ratio=0.5)
    assert len(tr) == len(va) == 50
    assert np.bincount(tr.labels).tolist() == np.bincount(va.labels).tolist() == [25, 25]
    assert tr.split == "train" and va.split == "val"


def test_subject_specific_split():
    t = synth_generate(classes=2, channels=2, points=20, trials_per_class=30, seed=0, n_subjects=3)
    tr, va = split(t, "subject_specific", 0, subject="S3")
    assert set(tr.subjects) | set(va.subjects) == {"S3"}
    with pytest.raises(DataError, match="unknown subject"):
        split(t, "subject_specific", 0, subject="S9")


def test_leave_ratio_and_determinism():
    t = synth_generate(classes=2, channels=2, points=20, trials_per_class=30, seed=0, n_subjects=3)
    a = split(t, "leave_ratio", 7, val_ratio=0.2)
    b = split(t, "leave_ratio", 7, val_ratio=0.2)
    assert a[0].data.tobytes() == b[0].data.tobytes() and a[1].subjects == b[1].subjects
    for subj in ("S1", "S2", "S3"):
        assert subj in a[1].subjects


# -------------------------------------------------------------- synthetic

def test_synth_is_deterministic():
    a = synth_generate(trials_per_class=5, seed=9)
    b = synth_generate(trials_per_class=5, seed=9)
    assert a.data.tobytes() == b.data.tobytes() and a.labels.tolist() == b.labels.tolist()
    assert a.data.shape == (20, 8, 750)


def test_synth_separable_at_high_snr():
    t = synth_generate(trials_per_class=50, snr_db=40, seed=1)
    assert probe_accuracy(t, 4) > 0.95


def test_synth_near_chance_at_low_snr():
    t = synth_generate(trials_per_class=200, snr_db=-40, seed=2)
    assert abs(probe_accuracy(t, 4) - 0.25) <= 0.05


def test_synth_rejects_non_finite_snr():
    with pytest.raises(DataError):
        synth_generate(snr_db=math.inf)


# -------------------------------------------------------- whole pipeline

def run_pipeline():
    trials = ingest(os.path.join(FIXTURES, "trials_500hz"))
    trials = resample(trials, 250.0)
    tr, va = split(trials, "mixed", 0)
    tr, va = normalize(tr, va)
    return slice_stack(tr, 400, 50), slice_stack(va, 400, 50)


def test_pipeline_byte_identical():
    digests = []
    for _ in range(2):
        a, b = run_pipeline()
        digests.append(hashlib.sha256(a.tensor.tobytes() + b.tensor.tobytes()).hexdigest())
    assert digests[0] == digests[1]
    assert a.tensor.shape[2:] == (8, 400)
