"""Synthetic polysomnography cohorts with stage- and apnea-dependent morphology.

Respiration (RF, RC, RA) is a jittered sinusoid whose rate, depth and
regularity depend on the sleep stage; PPG is a pulse train at a
stage-dependent heart rate.  Apnea epochs contain one event of 10-25 s:

* central apnea flattens RF, RC and RA together,
* obstructive apnea flattens RF while the effort belts keep moving,
* obstructive hypopnea halves the RF amplitude.

Labels are exact by construction.  Generation is deterministic in
``(profile.seed, subject_index)``.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .signal_pipeline import (
    CHANNELS,
    EPOCH_SECONDS,
    Apnea,
    Disorder,
    SignalRecord,
    Stage,
    largest_remainder,
)

# stage -> (breaths/s, depth, jitter, heart beats/s)
STAGE_MORPHOLOGY = {
    Stage.Wake: (0.34, 0.80, 0.20, 1.40),
    Stage.N1: (0.25, 0.90, 0.10, 1.15),
    Stage.N2: (0.20, 1.00, 0.05, 1.00),
    Stage.N3: (0.15, 1.40, 0.02, 0.88),
    Stage.REM: (0.28, 0.55, 0.30, 1.25),
}

# fraction of the normal amplitude kept inside an event window, per channel
EVENT_ENVELOPE = {
    Apnea.CentralApnea: {"RF": 0.0, "RC": 0.0, "RA": 0.0},
    Apnea.ObstructiveApnea: {"RF": 0.0, "RC": 1.2, "RA": 1.2},
    Apnea.ObstructiveHypopnea: {"RF": 0.5, "RC": 1.0, "RA": 1.0},
}

# stationary stage distribution reported for the clinical cohort
COHORT_STAGE_DISTRIBUTION = (0.2454, 0.0580, 0.4002, 0.1570, 0.1386)


def default_transition_matrix(persistence: float = 0.8,
                              stationary=COHORT_STAGE_DISTRIBUTION) -> np.ndarray:
    """Row-stochastic matrix ``p*I + (1-p)*1 pi^T``; its stationary law is ``pi``."""
    pi = np.asarray(stationary, dtype=np.float64)
    pi = pi / pi.sum()
    return persistence * np.eye(5) + (1.0 - persistence) * np.outer(np.ones(5), pi)


@dataclass
class GeneratorProfile:
    seed: int = 0
    n_subjects: int = 123
    epochs_per_subject: tuple[int, int] = (30, 50)
    stage_transition_matrix: np.ndarray = field(default_factory=default_transition_matrix)
    apnea_rate_by_disorder: dict[str, float] = field(default_factory=lambda: {
        "OSA": 0.40, "Hypersomnia": 0.05, "Insomnia": 0.05, "Other": 0.05})
    apnea_type_probs: tuple[float, float, float] = (0.18, 0.29, 0.53)
    disorder_mix: dict[str, float] = field(default_factory=lambda: {
        "OSA": 48 / 123, "Hypersomnia": 25 / 123, "Insomnia": 25 / 123, "Other": 25 / 123})
    noise_std: float = 0.01
    sampling_rate_hz: float = 512.0
    trailing_seconds_max: float = 20.0

    def __post_init__(self):
        self.stage_transition_matrix = np.asarray(self.stage_transition_matrix, dtype=np.float64)
        self.epochs_per_subject = tuple(int(v) for v in self.epochs_per_subject)
        self.apnea_type_probs = tuple(float(v) for v in self.apnea_type_probs)

    def validate(self) -> None:
        m = self.stage_transition_matrix
        if m.shape != (5, 5) or np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1) > 1e-9):
            raise ValueError("stage_transition_matrix must be 5x5 row-stochastic")
        for k, p in self.apnea_rate_by_disorder.items():
            Disorder(k)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"apnea rate for {k} must be in [0, 1]")
        if any(p < 0 for p in self.apnea_type_probs) or abs(sum(self.apnea_type_probs) - 1) > 1e-9:
            raise ValueError("apnea_type_probs must be a probability vector")
        if any(p < 0 for p in self.disorder_mix.values()) or \
                abs(sum(self.disorder_mix.values()) - 1) > 1e-9:
            raise ValueError("disorder_mix must sum to 1")
        for k in self.disorder_mix:
            Disorder(k)
        lo, hi = self.epochs_per_subject
        if not 1 <= lo <= hi:
            raise ValueError("epochs_per_subject must be a range with 1 <= low <= high")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.sampling_rate_hz * EPOCH_SECONDS != int(self.sampling_rate_hz * EPOCH_SECONDS):
            raise ValueError("sampling rate must give whole-sample epochs")
        if not 0 <= self.trailing_seconds_max < EPOCH_SECONDS:
            raise ValueError("trailing_seconds_max must be in [0, 30)")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_subjects": self.n_subjects,
            "epochs_per_subject": list(self.epochs_per_subject),
            "stage_transition_matrix": self.stage_transition_matrix.tolist(),
            "apnea_rate_by_disorder": dict(self.apnea_rate_by_disorder),
            "apnea_type_probs": list(self.apnea_type_probs),
            "disorder_mix": dict(self.disorder_mix),
            "noise_std": self.noise_std,
            "sampling_rate_hz": self.sampling_rate_hz,
            "trailing_seconds_max": self.trailing_seconds_max,
        }


def _rng(profile: GeneratorProfile, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(profile.seed, spawn_key=(key,)))


_DISORDER_STREAM = 2**31 - 1


def subject_id(index: int) -> str:
    return f"S{index:03d}"


def assign_disorders(profile: GeneratorProfile) -> list[Disorder]:
    """Exact disorder counts by largest remainder, in a seeded random order."""
    names = list(profile.disorder_mix)
    counts = largest_remainder(profile.n_subjects, [profile.disorder_mix[n] for n in names])
    pool = [Disorder(n) for n, c in zip(names, counts) for _ in range(c)]
    order = _rng(profile, _DISORDER_STREAM).permutation(len(pool))
    return [pool[i] for i in order]


def _smooth_noise(rng, n: int, fs: float, knot_seconds: float = 2.0) -> np.ndarray:
    knots = int(np.ceil(n / fs / knot_seconds)) + 2
    values = rng.standard_normal(knots)
    t = np.arange(n) / fs
    return np.interp(t, np.arange(knots) * knot_seconds, values)


def generate_subject(profile: GeneratorProfile, subject_index: int,
                     disorder: Disorder | None = None) -> SignalRecord:
    profile.validate()
    if disorder is None:
        disorder = assign_disorders(profile)[subject_index]
    rng = _rng(profile, subject_index)
    fs = profile.sampling_rate_hz
    n_ep = int(rng.integers(profile.epochs_per_subject[0], profile.epochs_per_subject[1] + 1))
    ep_len = int(fs * EPOCH_SECONDS)
    trailing = int(rng.uniform(0, profile.trailing_seconds_max) * fs)
    n = n_ep * ep_len + trailing

    # stage sequence
    stages = [Stage.Wake]
    for _ in range(n_ep - 1):
        stages.append(Stage(rng.choice(5, p=profile.stage_transition_matrix[stages[-1]])))
    stage_of_sample = np.repeat(np.array(stages + [stages[-1]], dtype=int),
                                [ep_len] * n_ep + [trailing])
    table = np.array([STAGE_MORPHOLOGY[Stage(s)] for s in range(5)])
    resp_hz, depth, jitter, hr_hz = (table[stage_of_sample, i] for i in range(4))

    rate_scale = rng.uniform(0.95, 1.05)
    depth_scale = rng.uniform(0.9, 1.1)
    hr_scale = rng.uniform(0.95, 1.05)

    f_noise = np.clip(1 + jitter * _smooth_noise(rng, n, fs), 0.5, 1.5)
    a_noise = np.clip(1 + jitter * _smooth_noise(rng, n, fs), 0.5, 1.5)
    resp_phase = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.cumsum(resp_hz * rate_scale * f_noise) / fs
    amp = depth * depth_scale * a_noise

    hr_noise = np.clip(1 + 0.5 * jitter * _smooth_noise(rng, n, fs, 4.0), 0.7, 1.3)
    heart_phase = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.cumsum(hr_hz * hr_scale * hr_noise) / fs

    effort = amp * np.sin(resp_phase)
    sig = {
        "RF": amp * np.cos(resp_phase),
        "RC": 0.8 * amp * np.sin(resp_phase - 0.2),
        "RA": effort.copy(),
        "PPG": (0.5 * (1 - np.cos(heart_phase))) ** 3 * (1 + 0.1 * np.sin(resp_phase)),
    }

    # apnea events (sleep epochs only)
    rate = profile.apnea_rate_by_disorder.get(disorder.value, 0.0)
    annotations, windows = [], []
    for k, stage in enumerate(stages):
        apnea = Apnea.NoApnea
        window = None
        if stage != Stage.Wake and rng.random() < rate:
            apnea = Apnea(1 + int(rng.choice(3, p=profile.apnea_type_probs)))
            dur = rng.uniform(10.0, 25.0)
            onset = rng.uniform(0.0, EPOCH_SECONDS - dur)
            a = k * ep_len + int(round(onset * fs))
            b = k * ep_len + int(round((onset + dur) * fs))
            for ch, factor in EVENT_ENVELOPE[apnea].items():
                sig[ch][a:b] *= factor
            window = ((a - k * ep_len) / fs, (b - k * ep_len) / fs)
        annotations.append((stage, apnea))
        windows.append(window)

    channels = {}
    for ch in CHANNELS:
        x = sig[ch] + profile.noise_std * rng.standard_normal(n)
        channels[ch] = x.astype(np.float32)
    return SignalRecord(subject_id(subject_index), fs, channels, disorder, annotations, windows)


class Cohort(Sequence):
    """Lazily generated cohort; records are built on access."""

    def __init__(self, profile: GeneratorProfile):
        profile.validate()
        if profile.n_subjects < 1:
            raise ValueError("n_subjects must be at least 1")
        self.profile = profile
        self.disorders = assign_disorders(profile)

    def __len__(self) -> int:
        return self.profile.n_subjects

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return generate_subject(self.profile, i, self.disorders[i])

    @property
    def subject_ids(self) -> list[str]:
        return [subject_id(i) for i in range(len(self))]


def generate_cohort(profile: GeneratorProfile) -> Cohort:
    return Cohort(profile)
