"""Synthetic patient vitals streams with injectable anomaly episodes."""

import logging
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from carechain.schemas import (
    INJECTION_TARGETS,
    VITAL_RANGES,
    AnomalyInjection,
    AnomalyKind,
    PatientProfile,
    VitalsSample,
)
from carechain.utils import derive_seed

logger = logging.getLogger(__name__)

VITALS_COLUMNS = ["patient_id", "t_ms", "heart_rate", "systolic", "diastolic", "spo2", "ecg_amp"]

DEFAULT_MAGNITUDES: Dict[AnomalyKind, float] = {
    AnomalyKind.TACHYCARDIA: 1.5,
    AnomalyKind.HYPOTENSION: 0.6,
    AnomalyKind.DESATURATION: 0.85,
    AnomalyKind.ARRHYTHMIA: 1.8,
}


class InjectionResult(NamedTuple):
    samples: List[VitalsSample]
    warning: bool  # True when the window missed the stream entirely


def _clamp(vital: str, value: float) -> float:
    low, high = VITAL_RANGES[vital]
    return min(max(value, low), high)


def _repair_diastolic(systolic: float, diastolic: float) -> float:
    """Keeps diastolic strictly below systolic and inside its own range."""
    return _clamp("diastolic", min(diastolic, systolic - 1.0))


def gen_stream(profile: PatientProfile, seed: int, duration_ms: int) -> List[VitalsSample]:
    """
    Draws floor(duration_ms / sample_period_ms) samples, each vital as
    baseline mean + Gaussian(0, sd), clamped to the physiological ranges.
    Pure function of (profile, seed, duration_ms).
    """
    if duration_ms < profile.sample_period_ms:
        raise ValueError(
            f"duration_ms ({duration_ms}) must be at least one sample period ({profile.sample_period_ms} ms)"
        )
    n = duration_ms // profile.sample_period_ms
    rng = np.random.default_rng(seed)
    means = np.array([profile.hr_mean, profile.systolic_mean, profile.diastolic_mean, profile.spo2_mean, profile.ecg_mean])
    sds = np.array([profile.hr_sd, profile.systolic_sd, profile.diastolic_sd, profile.spo2_sd, profile.ecg_sd])
    draws = means + rng.standard_normal((n, 5)) * sds

    samples = []
    for i in range(n):
        hr, sys_, dia, spo2, ecg = (float(v) for v in draws[i])
        systolic = _clamp("systolic", sys_)
        samples.append(VitalsSample(
            patient_id=profile.patient_id,
            t_ms=profile.phase_ms + i * profile.sample_period_ms,
            heart_rate=_clamp("heart_rate", hr),
            systolic=systolic,
            diastolic=_repair_diastolic(systolic, _clamp("diastolic", dia)),
            spo2=_clamp("spo2", spo2),
            ecg_amp=_clamp("ecg_amp", ecg),
        ))
    return samples


def inject(stream: Sequence[VitalsSample], inj: AnomalyInjection) -> InjectionResult:
    """
    Multiplies the targeted vital by inj.magnitude for samples inside
    [start_ms, start_ms + duration_ms) and re-clamps. Samples outside the
    window are returned as the same objects.
    """
    samples = list(stream)
    if not samples:
        logger.warning("Injection requested on an empty stream.")
        return InjectionResult(samples, True)
    first, last = samples[0].t_ms, samples[-1].t_ms
    if inj.end_ms <= first or inj.start_ms > last:
        logger.warning(
            f"Injection window [{inj.start_ms}, {inj.end_ms}) does not overlap stream range [{first}, {last}]; "
            "stream left unchanged."
        )
        return InjectionResult(samples, True)

    vital = INJECTION_TARGETS[inj.kind]
    out = []
    for s in samples:
        if not inj.covers(s.t_ms):
            out.append(s)
            continue
        values = s.model_dump()
        values[vital] = _clamp(vital, values[vital] * inj.magnitude)
        values["diastolic"] = _repair_diastolic(values["systolic"], values["diastolic"])
        out.append(VitalsSample(**values))
    return InjectionResult(out, False)


# ---------------------------------------------------------------------------
# Cohorts and episode plans
# ---------------------------------------------------------------------------


def make_cohort(n: int, seed: int, sample_period_ms: int = 1000, random_phase: bool = True,
                prefix: str = "p") -> List[PatientProfile]:
    """Draws n patient baselines; roughly half land above the chronic-risk thresholds."""
    if n < 0:
        raise ValueError("cohort size must be non-negative")
    rng = np.random.default_rng(derive_seed(seed, "cohort", prefix))
    width = max(2, len(str(max(n - 1, 0))))
    profiles = []
    for i in range(n):
        systolic_mean = float(rng.uniform(105, 160))
        profiles.append(PatientProfile(
            patient_id=f"{prefix}{i:0{width}d}",
            hr_mean=float(rng.uniform(60, 100)),
            hr_sd=3.0,
            systolic_mean=systolic_mean,
            systolic_sd=5.0,
            diastolic_mean=0.65 * systolic_mean,
            diastolic_sd=4.0,
            spo2_mean=float(rng.uniform(94, 98)),
            spo2_sd=0.8,
            ecg_mean=float(rng.uniform(0.8, 1.2)),
            ecg_sd=0.05,
            sample_period_ms=sample_period_ms,
            phase_ms=int(rng.integers(0, sample_period_ms)) if random_phase else 0,
        ))
    return profiles


def plan_injections(profiles: Sequence[PatientProfile], duration_ms: int, seed: int,
                    warmup_ms: int = 10_000, episode_ms: int = 5_000, gap_ms: int = 9_000,
                    start_jitter_ms: int = 1_000, tail_ms: int = 5_000,
                    magnitudes: Optional[Dict[AnomalyKind, float]] = None) -> List[AnomalyInjection]:
    """
    Lays out non-overlapping anomaly episodes per patient: one per slot of
    episode_ms + gap_ms + start_jitter_ms after the warm-up, kinds cycling
    from a random offset, none ending within tail_ms of the run end.
    """
    magnitudes = {**DEFAULT_MAGNITUDES, **(magnitudes or {})}
    kinds = list(AnomalyKind)
    slot_ms = episode_ms + gap_ms + start_jitter_ms
    plan = []
    for profile in profiles:
        rng = np.random.default_rng(derive_seed(seed, "injections", profile.patient_id))
        offset = int(rng.integers(0, len(kinds)))
        slot_start = warmup_ms
        k = 0
        while True:
            start = slot_start + (int(rng.integers(0, start_jitter_ms)) if start_jitter_ms > 0 else 0)
            if start + episode_ms > duration_ms - tail_ms:
                break
            kind = kinds[(offset + k) % len(kinds)]
            plan.append(AnomalyInjection(
                patient_id=profile.patient_id,
                kind=kind,
                start_ms=start,
                duration_ms=episode_ms,
                magnitude=magnitudes[kind],
            ))
            slot_start += slot_ms
            k += 1
    return plan


def build_streams(profiles: Sequence[PatientProfile], injections: Sequence[AnomalyInjection],
                  seed: int, duration_ms: int) -> Dict[str, List[VitalsSample]]:
    """Generates every patient's stream and applies the injections addressed to it."""
    streams = {}
    for profile in profiles:
        stream = gen_stream(profile, derive_seed(seed, "stream", profile.patient_id), duration_ms)
        for inj in injections:
            if inj.patient_id == profile.patient_id:
                stream = inject(stream, inj).samples
        streams[profile.patient_id] = stream
    return streams
