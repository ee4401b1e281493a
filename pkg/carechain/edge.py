"""
Edge-node pipeline: rolling median/MAD preprocessing, robust-z anomaly
detection and alert emission, plus the per-patient buffering actor.
"""

import logging
import math
from collections import deque
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from carechain.schemas import TRACKED_VITALS, Alert, AnomalyVerdict, FeatureVector, VitalsSample

logger = logging.getLogger(__name__)

MAD_CONSTANT = 0.6745
Z_SENTINEL = 1e6
MIN_WINDOW = 5
DEFAULT_WINDOW = 8
DEFAULT_THRESHOLD = 3.5


def robust_z(history: Sequence[float], x: float) -> Tuple[float, float]:
    """Returns (median, robust z of x) against `history`, with the MAD = 0 sentinel rule."""
    values = np.asarray(history, dtype=float)
    median = float(np.median(values))
    mad = float(np.median(np.abs(values - median)))
    if mad == 0.0:
        if x == median:
            return median, 0.0
        return median, math.copysign(Z_SENTINEL, x - median)
    z = MAD_CONSTANT * (x - median) / mad
    return median, max(-Z_SENTINEL, min(Z_SENTINEL, z))


def preprocess(window: Sequence[VitalsSample]) -> FeatureVector:
    """
    Scores the last sample of `window` against the samples before it.
    Per tracked vital the features are (median of the history, robust z of the last sample).
    """
    if len(window) < MIN_WINDOW:
        raise ValueError(f"window must hold at least {MIN_WINDOW} samples, got {len(window)}")
    patient_id = window[0].patient_id
    for prev, cur in zip(window, window[1:]):
        if cur.patient_id != patient_id:
            raise ValueError(f"window mixes patients '{patient_id}' and '{cur.patient_id}'")
        if cur.t_ms <= prev.t_ms:
            raise ValueError(f"window timestamps are not strictly increasing ({prev.t_ms} -> {cur.t_ms})")

    history, current = window[:-1], window[-1]
    values: List[float] = []
    for vital in TRACKED_VITALS:
        median, z = robust_z([getattr(s, vital) for s in history], getattr(current, vital))
        values.extend([median, z])
    return FeatureVector(patient_id=patient_id, window_end_ms=current.t_ms, values=values)


def detect(fv: FeatureVector, threshold: float = DEFAULT_THRESHOLD) -> AnomalyVerdict:
    """Flags iff the largest |robust z| strictly exceeds `threshold`."""
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    if not all(math.isfinite(v) for v in fv.values):
        raise ValueError("feature vector contains non-finite values")
    zs = fv.z_scores
    vital = max(TRACKED_VITALS, key=lambda v: abs(zs[v]))
    score = abs(zs[vital])
    flagged = score > threshold
    return AnomalyVerdict(
        patient_id=fv.patient_id,
        window_end_ms=fv.window_end_ms,
        flagged=flagged,
        score=score,
        threshold=threshold,
        triggering_vital=vital if flagged else None,
    )


def emit_alert(verdict: AnomalyVerdict, node_id: str, created_ms: Optional[int] = None) -> Optional[Alert]:
    if not verdict.flagged:
        return None
    return Alert(
        patient_id=verdict.patient_id,
        created_ms=verdict.window_end_ms if created_ms is None else created_ms,
        verdict=verdict,
        edge_node_id=node_id,
    )


class EdgeNode:
    """
    Owns the rolling buffers of the patients attached to one edge node.

    An alert goes out when a patient's verdict becomes flagged, or stays
    flagged but on a different vital; a run of flagged verdicts on the same
    vital yields a single alert.
    """

    def __init__(self, node_id: str, window: int = DEFAULT_WINDOW, threshold: float = DEFAULT_THRESHOLD):
        if window + 1 < MIN_WINDOW:
            raise ValueError(f"history window must be at least {MIN_WINDOW - 1} samples")
        self.node_id = node_id
        self.window = window
        self.threshold = threshold
        self._buffers: Dict[str, Deque[VitalsSample]] = {}
        self._last_trigger: Dict[str, Optional[str]] = {}
        self.samples_in = 0
        self.verdicts_out = 0
        self.alerts_out = 0

    def ingest(self, sample: VitalsSample) -> Tuple[Optional[AnomalyVerdict], Optional[Alert]]:
        """Buffers the sample; once window + 1 samples are held, scores it."""
        self.samples_in += 1
        buf = self._buffers.setdefault(sample.patient_id, deque(maxlen=self.window + 1))
        if buf and sample.t_ms <= buf[-1].t_ms:
            logger.warning(f"{self.node_id}: dropping out-of-order sample for {sample.patient_id} at {sample.t_ms} ms")
            return None, None
        buf.append(sample)
        if len(buf) < self.window + 1:
            return None, None

        verdict = detect(preprocess(list(buf)), self.threshold)
        self.verdicts_out += 1
        previous = self._last_trigger.get(sample.patient_id)
        self._last_trigger[sample.patient_id] = verdict.triggering_vital
        if not verdict.flagged or verdict.triggering_vital == previous:
            return verdict, None
        alert = emit_alert(verdict, self.node_id)
        self.alerts_out += 1
        return verdict, alert
