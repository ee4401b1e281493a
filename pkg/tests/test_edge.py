"""Tests for preprocessing, robust-z detection and the edge node's alert emission."""

import numpy as np
import pytest

from carechain.edge import EdgeNode, detect, emit_alert, preprocess, robust_z
from carechain.schemas import VITAL_RANGES, FeatureVector, VitalsSample


def sample(t_ms, heart_rate=70.0, patient_id="p00", **vitals):
    values = {"systolic": 120.0, "diastolic": 80.0, "spo2": 97.0, "ecg_amp": 1.0, **vitals}
    return VitalsSample(patient_id=patient_id, t_ms=t_ms, heart_rate=heart_rate, **values)


def window_of(heart_rates):
    return [sample(i * 1000, hr) for i, hr in enumerate(heart_rates)]


# ---------------------------------------------------------------------------
# preprocess / detect
# ---------------------------------------------------------------------------


def test_worked_example():
    fv = preprocess(window_of([70, 72, 71, 69, 70, 71, 70, 72, 120]))
    assert fv.values[0] == pytest.approx(70.5)
    assert fv.values[1] == pytest.approx(0.6745 * 49.5 / 0.5)
    verdict = detect(fv)
    assert verdict.flagged
    assert verdict.triggering_vital == "heart_rate"
    assert verdict.window_end_ms == 8000


def test_constant_vitals_score_zero():
    fv = preprocess(window_of([70] * 9))
    assert all(z == 0.0 for z in fv.z_scores.values())
    assert not detect(fv).flagged


def test_zero_mad_sentinel():
    median, z = robust_z([70] * 8, 71)
    assert median == 70 and z == 1e6
    assert robust_z([70] * 8, 69)[1] == -1e6


def test_threshold_is_strict():
    fv = FeatureVector(patient_id="p", window_end_ms=0, values=[70, 3.5, 120, 0, 97, 0, 1, 0])
    assert not detect(fv, threshold=3.5).flagged
    assert detect(fv, threshold=3.4).flagged
    with pytest.raises(ValueError):
        detect(fv, threshold=0)


def test_preprocess_input_errors():
    with pytest.raises(ValueError):
        preprocess(window_of([70] * 4))
    mixed = window_of([70] * 5) + [sample(9000, patient_id="p01")]
    with pytest.raises(ValueError):
        preprocess(mixed)
    unordered = window_of([70] * 5)
    unordered[2], unordered[3] = unordered[3], unordered[2]
    with pytest.raises(ValueError):
        preprocess(unordered)


def test_median_survives_one_corrupted_sample():
    rng = np.random.default_rng(17)
    lo, hi = VITAL_RANGES["heart_rate"]
    for _ in range(2_000):
        size = int(rng.integers(7, 16))
        rates = np.round(rng.normal(75, 8, size).clip(lo, hi), 1).tolist()
        history = np.asarray(rates[:-1])
        iqr = float(np.percentile(history, 75) - np.percentile(history, 25))
        corrupted = list(rates)
        corrupted[int(rng.integers(0, size - 1))] = float(rng.choice([lo, hi, rng.uniform(lo, hi)]))
        before = preprocess(window_of(rates)).values[0]
        after = preprocess(window_of(corrupted)).values[0]
        assert abs(after - before) <= iqr + 1e-9


def test_detect_is_monotone_in_threshold():
    rng = np.random.default_rng(18)
    thresholds = [0.5, 1.0, 2.0, 3.5, 5.0, 10.0, 100.0, 1e7]
    for _ in range(500):
        rates = rng.normal(75, 5, 9)
        rates[-1] += rng.choice([0.0, 10.0, 40.0])
        fv = preprocess(window_of(np.round(rates, 1).tolist()))
        flags = [detect(fv, t).flagged for t in thresholds]
        assert flags == sorted(flags, reverse=True)


def test_emit_alert_only_for_flagged():
    calm = detect(preprocess(window_of([70] * 9)))
    assert emit_alert(calm, "e0") is None
    hot = detect(preprocess(window_of([70, 72, 71, 69, 70, 71, 70, 72, 120])))
    alert = emit_alert(hot, "e0")
    assert alert.edge_node_id == "e0" and alert.created_ms == 8000


# ---------------------------------------------------------------------------
# EdgeNode
# ---------------------------------------------------------------------------


def test_edge_node_waits_for_a_full_window():
    node = EdgeNode("e0", window=8)
    outputs = [node.ingest(s) for s in window_of([70, 72, 71, 69, 70, 71, 70, 72])]
    assert all(v is None for v, _ in outputs)
    verdict, alert = node.ingest(sample(8000, 120))
    assert verdict.flagged and alert is not None


def test_edge_node_one_alert_per_episode():
    node = EdgeNode("e0", window=8)
    rates = [70, 72, 71, 69, 70, 71, 70, 72] + [150, 151, 152] + [70] * 12 + [150]
    alerts = [a for s in window_of(rates) for _, a in [node.ingest(s)] if a is not None]
    assert len(alerts) == 2
    assert node.alerts_out == 2


def test_edge_node_keeps_patients_apart():
    node = EdgeNode("e0", window=8)
    for i in range(9):
        node.ingest(sample(i * 1000, 70 + (i % 3), patient_id="p00"))
        verdict, _ = node.ingest(sample(i * 1000, 70 + (i % 2), patient_id="p01"))
    assert verdict is not None and verdict.patient_id == "p01"


def test_edge_node_drops_out_of_order(caplog):
    node = EdgeNode("e0", window=8)
    node.ingest(sample(5000))
    assert node.ingest(sample(4000)) == (None, None)
    assert "out-of-order" in caplog.text


def test_edge_node_rejects_tiny_window():
    with pytest.raises(ValueError):
        EdgeNode("e0", window=3)
