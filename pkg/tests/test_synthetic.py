import numpy as np
import pytest

from sleepvit.signal_pipeline import CHANNELS, Apnea, Disorder, Stage
from sleepvit.synthetic import (
    GeneratorProfile,
    default_transition_matrix,
    generate_cohort,
    generate_subject,
    COHORT_STAGE_DISTRIBUTION,
)


def rms(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x)))


def event_rms_ratios(record):
    """Per-channel (event-window RMS / whole-epoch RMS) for every apnea epoch."""
    fs = record.sampling_rate_hz
    n = record.epoch_samples
    out = []
    for k, ((_, apnea), win) in enumerate(zip(record.epoch_annotations, record.event_windows)):
        if apnea == Apnea.NoApnea:
            continue
        a, b = int(round(win[0] * fs)), int(round(win[1] * fs))
        ratios = {}
        for ch in ("RF", "RC", "RA"):
            epoch = record.channels[ch][k * n:(k + 1) * n]
            ratios[ch] = rms(epoch[a:b]) / rms(epoch)
        out.append((apnea, ratios, win))
    return out


@pytest.fixture(scope="module")
def apnea_heavy():
    prof = GeneratorProfile(seed=5, n_subjects=4, epochs_per_subject=(20, 24),
                            apnea_rate_by_disorder={d.value: 0.6 for d in Disorder})
    return [generate_subject(prof, i) for i in range(4)]


def test_rate_zero_means_no_apnea():
    prof = GeneratorProfile(seed=1, n_subjects=2, epochs_per_subject=(10, 12),
                            apnea_rate_by_disorder={d.value: 0.0 for d in Disorder})
    rec = generate_subject(prof, 0)
    assert all(a == Apnea.NoApnea for _, a in rec.epoch_annotations)
    assert all(w is None for w in rec.event_windows)


def test_regeneration_is_bit_identical():
    prof = GeneratorProfile(seed=9, n_subjects=3, epochs_per_subject=(5, 6))
    a, b = generate_subject(prof, 2), generate_subject(prof, 2)
    for ch in CHANNELS:
        assert a.channels[ch].tobytes() == b.channels[ch].tobytes()
    assert a.epoch_annotations == b.epoch_annotations


def test_record_is_valid_512hz(apnea_heavy):
    for rec in apnea_heavy:
        rec.validate()
        assert rec.sampling_rate_hz == 512
        for ch in CHANNELS:
            assert np.all(np.isfinite(rec.channels[ch]))
            assert np.max(np.abs(rec.channels[ch])) < 5.0


def test_event_rms_oracle(apnea_heavy):
    seen = set()
    for rec in apnea_heavy:
        for apnea, r, win in event_rms_ratios(rec):
            seen.add(apnea)
            assert 10.0 <= win[1] - win[0] <= 25.0 + 1e-9
            assert 0.0 <= win[0] and win[1] <= 30.0
            if apnea == Apnea.CentralApnea:
                assert max(r.values()) < 0.10, r
            elif apnea == Apnea.ObstructiveApnea:
                assert r["RF"] < 0.10 and r["RC"] > 0.5 and r["RA"] > 0.5, r
            else:
                assert 0.3 < r["RF"] < 0.9 and r["RC"] > 0.5, r
    assert seen == {Apnea.CentralApnea, Apnea.ObstructiveApnea, Apnea.ObstructiveHypopnea}


def test_events_only_in_sleep(apnea_heavy):
    for rec in apnea_heavy:
        for stage, apnea in rec.epoch_annotations:
            if stage == Stage.Wake:
                assert apnea == Apnea.NoApnea


def test_cohort_ids_and_disorder_mix():
    cohort = generate_cohort(GeneratorProfile(seed=0, n_subjects=123))
    assert len(set(cohort.subject_ids)) == 123
    osa = sum(d == Disorder.OSA for d in cohort.disorders)
    assert (osa, 123 - osa) == (48, 75)


def test_cohort_two_way_mix():
    prof = GeneratorProfile(seed=2, n_subjects=123,
                            disorder_mix={"OSA": 48 / 123, "Other": 75 / 123})
    ds = generate_cohort(prof).disorders
    assert (ds.count(Disorder.OSA), ds.count(Disorder.Other)) == (48, 75)


def test_same_profile_same_cohort():
    prof = GeneratorProfile(seed=4, n_subjects=3, epochs_per_subject=(3, 4))
    a, b = generate_cohort(prof), generate_cohort(prof)
    for ra, rb in zip(a, b):
        assert ra.subject_id == rb.subject_id and ra.disorder == rb.disorder
        assert ra.channels["PPG"].tobytes() == rb.channels["PPG"].tobytes()


def test_empty_cohort_rejected():
    with pytest.raises(ValueError):
        generate_cohort(GeneratorProfile(n_subjects=0))


@pytest.mark.parametrize("kwargs", [
    {"stage_transition_matrix": np.full((5, 5), 0.3)},
    {"apnea_rate_by_disorder": {"OSA": 1.5}},
    {"noise_std": -1.0},
    {"epochs_per_subject": (5, 2)},
])
def test_profile_validation(kwargs):
    with pytest.raises(ValueError):
        GeneratorProfile(**kwargs).validate()


def test_transition_matrix_stationary_law():
    m = default_transition_matrix()
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
    pi = np.asarray(COHORT_STAGE_DISTRIBUTION) / sum(COHORT_STAGE_DISTRIBUTION)
    np.testing.assert_allclose(pi @ m, pi, atol=1e-12)


def test_stage_morphology_is_distinct():
    # N3 breathing is deeper than REM breathing on the flow channel
    prof = GeneratorProfile(seed=3, n_subjects=1, epochs_per_subject=(60, 60),
                            apnea_rate_by_disorder={d.value: 0.0 for d in Disorder})
    rec = generate_subject(prof, 0)
    n = rec.epoch_samples
    by_stage = {}
    for k, (s, _) in enumerate(rec.epoch_annotations):
        by_stage.setdefault(s, []).append(rms(rec.channels["RF"][k * n:(k + 1) * n]))
    if Stage.N3 in by_stage and Stage.REM in by_stage:
        assert np.mean(by_stage[Stage.N3]) > 1.5 * np.mean(by_stage[Stage.REM])
