"""Tests for the synthetic vitals generator, anomaly injection and episode planning."""

import pytest

from carechain.schemas import VITAL_RANGES, AnomalyInjection, AnomalyKind, PatientProfile
from carechain.telemetry import build_streams, gen_stream, inject, make_cohort, plan_injections


@pytest.fixture
def profile():
    return PatientProfile(
        patient_id="p00", hr_mean=72, hr_sd=3, systolic_mean=120, systolic_sd=5, diastolic_mean=78,
        diastolic_sd=4, spo2_mean=97, spo2_sd=0.8, ecg_mean=1.0, ecg_sd=0.05,
    )


# ---------------------------------------------------------------------------
# gen_stream
# ---------------------------------------------------------------------------


def test_stream_length_and_timestamps(profile):
    stream = gen_stream(profile, seed=1, duration_ms=60_000)
    assert len(stream) == 60
    assert [s.t_ms for s in stream] == [i * 1000 for i in range(60)]


def test_stream_floor_of_duration(profile):
    assert len(gen_stream(profile, seed=1, duration_ms=2_999)) == 2


def test_stream_is_deterministic_per_seed(profile):
    assert gen_stream(profile, 5, 20_000) == gen_stream(profile, 5, 20_000)
    assert gen_stream(profile, 5, 20_000) != gen_stream(profile, 6, 20_000)


def test_stream_values_in_range(profile):
    noisy = profile.model_copy(update={"hr_sd": 200.0, "systolic_sd": 200.0, "spo2_sd": 50.0})
    for s in gen_stream(noisy, seed=2, duration_ms=200_000):
        for vital, (low, high) in VITAL_RANGES.items():
            assert low <= getattr(s, vital) <= high
        assert s.diastolic < s.systolic


def test_stream_too_short(profile):
    with pytest.raises(ValueError):
        gen_stream(profile, seed=1, duration_ms=999)


def test_phase_offsets_timestamps(profile):
    shifted = profile.model_copy(update={"phase_ms": 250})
    assert [s.t_ms for s in gen_stream(shifted, 1, 3_000)] == [250, 1250, 2250]


def test_phase_must_be_below_period():
    with pytest.raises(ValueError):
        PatientProfile(patient_id="p", hr_mean=70, hr_sd=1, systolic_mean=120, systolic_sd=1,
                       diastolic_mean=80, diastolic_sd=1, spo2_mean=97, spo2_sd=1, phase_ms=1000)


# ---------------------------------------------------------------------------
# inject
# ---------------------------------------------------------------------------


def test_tachycardia_scales_only_the_window(profile):
    stream = gen_stream(profile, 3, 20_000)
    inj = AnomalyInjection(kind=AnomalyKind.TACHYCARDIA, start_ms=5_000, duration_ms=3_000, magnitude=1.5)
    result = inject(stream, inj)
    assert not result.warning
    for before, after in zip(stream, result.samples):
        if 5_000 <= before.t_ms < 8_000:
            assert after.heart_rate == pytest.approx(min(250.0, before.heart_rate * 1.5))
            assert after.spo2 == before.spo2
        else:
            assert after is before


def test_hypotension_keeps_diastolic_below_systolic(profile):
    stream = gen_stream(profile, 4, 10_000)
    inj = AnomalyInjection(kind=AnomalyKind.HYPOTENSION, start_ms=0, duration_ms=10_000, magnitude=0.4)
    for s in inject(stream, inj).samples:
        assert s.diastolic < s.systolic


def test_injection_clamps_to_range(profile):
    stream = gen_stream(profile, 4, 5_000)
    inj = AnomalyInjection(kind=AnomalyKind.ARRHYTHMIA, start_ms=0, duration_ms=5_000, magnitude=100.0)
    assert all(s.ecg_amp == 5.0 for s in inject(stream, inj).samples)


def test_non_overlapping_window_is_a_warning(profile, caplog):
    stream = gen_stream(profile, 4, 5_000)
    inj = AnomalyInjection(kind=AnomalyKind.DESATURATION, start_ms=50_000, duration_ms=1_000, magnitude=0.8)
    result = inject(stream, inj)
    assert result.warning
    assert result.samples == stream
    assert "does not overlap" in caplog.text


def test_injection_requires_positive_duration_and_magnitude():
    with pytest.raises(ValueError):
        AnomalyInjection(kind=AnomalyKind.TACHYCARDIA, start_ms=0, duration_ms=0, magnitude=1.5)
    with pytest.raises(ValueError):
        AnomalyInjection(kind=AnomalyKind.TACHYCARDIA, start_ms=0, duration_ms=10, magnitude=0)


# ---------------------------------------------------------------------------
# Cohorts and plans
# ---------------------------------------------------------------------------


def test_cohort_ids_and_determinism():
    cohort = make_cohort(12, seed=7)
    assert [p.patient_id for p in cohort] == [f"p{i:02d}" for i in range(12)]
    assert cohort == make_cohort(12, seed=7)
    assert make_cohort(0, seed=7) == []


def test_cohort_has_both_risk_classes():
    labels = {p.chronic_risk_label for p in make_cohort(40, seed=7)}
    assert labels == {0, 1}


def test_plan_keeps_episodes_apart_and_inside_the_run():
    cohort = make_cohort(6, seed=1)
    plan = plan_injections(cohort, duration_ms=90_000, seed=1)
    assert plan
    for pid in {p.patient_id for p in cohort}:
        mine = sorted((i for i in plan if i.patient_id == pid), key=lambda i: i.start_ms)
        assert mine[0].start_ms >= 10_000
        assert mine[-1].end_ms <= 85_000
        for a, b in zip(mine, mine[1:]):
            assert b.start_ms - a.end_ms >= 9_000 - 1_000


def test_build_streams_applies_only_own_injections():
    cohort = make_cohort(2, seed=3, random_phase=False)
    inj = AnomalyInjection(patient_id="p00", kind=AnomalyKind.TACHYCARDIA, start_ms=2_000,
                           duration_ms=1_000, magnitude=2.0)
    plain = build_streams(cohort, [], seed=3, duration_ms=5_000)
    injected = build_streams(cohort, [inj], seed=3, duration_ms=5_000)
    assert injected["p01"] == plain["p01"]
    assert injected["p00"][2].heart_rate == pytest.approx(min(250.0, plain["p00"][2].heart_rate * 2.0))
