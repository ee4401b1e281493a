"""
Federated training of the chronic-risk logistic-regression model.

Hospitals train locally with full-batch gradient descent, clip and noise
their deltas, and either hand them to a plaintext FedAvg aggregator or
encrypt them coordinate-wise under the key holder's Paillier key so that
the aggregator only ever sees (and sums) ciphertexts.
"""

import logging
import math
import random
from collections import deque
from typing import Deque, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from carechain.crypto import EncryptedNumber, PaillierPrivateKey, PaillierPublicKey, add
from carechain.edge import preprocess
from carechain.schemas import (
    N_WEIGHTS,
    DpParams,
    GlobalModel,
    LocalDataset,
    ModelUpdate,
    PatientProfile,
)
from carechain.telemetry import gen_stream, make_cohort
from carechain.utils import derive_seed

logger = logging.getLogger(__name__)

REG_LAMBDA = 1e-4
FIXED_POINT_SCALE = 10 ** 6

# (center, scale) for the interleaved (median, z) features; z values are clipped to +-Z_CLIP first.
FEATURE_NORMALIZATION: List[Tuple[float, float]] = [
    (80.0, 20.0), (0.0, 3.0),    # heart rate
    (130.0, 25.0), (0.0, 3.0),   # systolic
    (96.0, 2.0), (0.0, 3.0),     # spo2
    (1.0, 0.2), (0.0, 3.0),      # ecg amplitude
]
Z_CLIP = 10.0

Row = Tuple[List[float], int]


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------


def _design(rows: Sequence[Row]) -> Tuple[np.ndarray, np.ndarray]:
    """Feature matrix with a trailing bias column, and the label vector."""
    x = np.array([list(features) + [1.0] for features, _ in rows], dtype=float)
    y = np.array([label for _, label in rows], dtype=float)
    return x, y


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def row_losses(weights: Sequence[float], rows: Sequence[Row]) -> np.ndarray:
    """Per-row logistic loss (no regularization term)."""
    x, y = _design(rows)
    z = x @ np.asarray(weights, dtype=float)
    # log(1 + e^z) - y*z, stable for large |z|
    return np.logaddexp(0.0, z) - y * z


def logistic_loss(weights: Sequence[float], rows: Sequence[Row], reg: float = REG_LAMBDA) -> float:
    """Mean logistic loss plus (reg / 2) * ||w||^2 over the feature weights (bias excluded)."""
    w = np.asarray(weights, dtype=float)
    return float(row_losses(w, rows).mean() + 0.5 * reg * np.dot(w[:-1], w[:-1]))


def logistic_gradient(weights: Sequence[float], rows: Sequence[Row], reg: float = REG_LAMBDA) -> np.ndarray:
    x, y = _design(rows)
    w = np.asarray(weights, dtype=float)
    grad = x.T @ (sigmoid(x @ w) - y) / len(rows)
    grad[:-1] += reg * w[:-1]
    return grad


def predict_proba(model: GlobalModel, rows: Sequence[Row]) -> np.ndarray:
    x, _ = _design(rows)
    return sigmoid(x @ np.asarray(model.weights, dtype=float))


def accuracy(model: GlobalModel, rows: Sequence[Row]) -> float:
    if not rows:
        return 0.0
    _, y = _design(rows)
    return float(np.mean((predict_proba(model, rows) >= 0.5) == (y == 1.0)))


# ---------------------------------------------------------------------------
# Local training, clipping and noise
# ---------------------------------------------------------------------------


def local_train(model: GlobalModel, data: LocalDataset, epochs: int, lr: float) -> ModelUpdate:
    """Full-batch gradient descent from the global weights; returns the weight delta."""
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if lr < 0 or not math.isfinite(lr):
        raise ValueError(f"learning rate must be a finite non-negative number, got {lr}")
    if not data.rows:
        raise ValueError("cannot train on an empty dataset")
    start = np.asarray(model.weights, dtype=float)
    w = start.copy()
    for _ in range(epochs):
        w = w - lr * logistic_gradient(w, data.rows)
    return ModelUpdate(
        node_id=data.node_id,
        round=model.round,
        delta=(w - start).tolist(),
        sample_count=len(data.rows),
        train_loss=logistic_loss(w, data.rows),
    )


def clip(update: ModelUpdate, clip_norm: float) -> ModelUpdate:
    """Scales the delta by min(1, C / ||delta||)."""
    if not clip_norm > 0:
        raise ValueError(f"clip norm must be positive, got {clip_norm}")
    delta = np.asarray(update.delta, dtype=float)
    norm = float(np.linalg.norm(delta))
    factor = min(1.0, clip_norm / norm) if norm > 0 else 1.0
    return update.model_copy(update={"delta": (delta * factor).tolist(), "clipped": True, "clip_norm": clip_norm})


def dp_noise(update: ModelUpdate, dp: DpParams, seed: int) -> ModelUpdate:
    """Adds Gaussian(0, sigma^2) to every coordinate of a clipped update."""
    if not update.clipped:
        raise ValueError("dp_noise requires a clipped update (sensitivity is unbounded otherwise)")
    if update.clip_norm is None or abs(update.clip_norm - dp.clip_norm) > 1e-12:
        raise ValueError(f"update was clipped to {update.clip_norm}, but the DP parameters assume {dp.clip_norm}")
    rng = np.random.default_rng(seed)
    noisy = np.asarray(update.delta, dtype=float) + rng.normal(0.0, dp.sigma, N_WEIGHTS)
    return ModelUpdate.model_validate({**update.model_dump(), "delta": noisy.tolist(), "dp": dp.model_dump()})


def composed_budget(dp: Optional[DpParams], rounds: int) -> Tuple[Optional[float], Optional[float]]:
    """Naive sequential composition: (epsilon * rounds, delta * rounds)."""
    if dp is None:
        return None, None
    return dp.epsilon * rounds, min(1.0, dp.delta_p * rounds)


def privatize(update: ModelUpdate, clip_norm: Optional[float], dp: Optional[DpParams], seed: int) -> ModelUpdate:
    """Clip then noise, as each hospital does before releasing its update. dp=None leaves it untouched."""
    if dp is None:
        return update
    return dp_noise(clip(update, clip_norm if clip_norm is not None else dp.clip_norm), dp, seed)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def fed_avg(updates: Sequence[ModelUpdate], base: GlobalModel) -> GlobalModel:
    """base + sample-count-weighted mean of the deltas; the round advances by one."""
    if not updates:
        raise ValueError("fed_avg needs at least one update")
    for u in updates:
        if u.round != base.round:
            raise ValueError(f"update from {u.node_id} is for round {u.round}, base is at round {base.round}")
    counts = np.array([u.sample_count for u in updates], dtype=float)
    deltas = np.array([u.delta for u in updates], dtype=float)
    mean_delta = counts @ deltas / counts.sum()
    return GlobalModel(round=base.round + 1, weights=(np.asarray(base.weights) + mean_delta).tolist())


def apply_delta(base: GlobalModel, delta: Sequence[float]) -> GlobalModel:
    return GlobalModel(round=base.round + 1, weights=(np.asarray(base.weights) + np.asarray(delta)).tolist())


def encode_fixed(value: float, n: int, scale: int = FIXED_POINT_SCALE) -> int:
    """Signed fixed-point encoding into [0, n); negatives wrap into the upper half."""
    scaled = int(round(value * scale))
    if abs(scaled) >= n // 2:
        raise ValueError(f"value {value} overflows the fixed-point range of the Paillier modulus")
    return scaled % n


def decode_fixed(encoded: int, n: int, scale: int = FIXED_POINT_SCALE) -> float:
    if not 0 <= encoded < n:
        raise ValueError("encoded value out of range [0, n)")
    signed = encoded - n if encoded > n // 2 else encoded
    return signed / scale


def aggregation_headroom(n: int, participants: int, scale: int = FIXED_POINT_SCALE) -> float:
    """Largest |sample_count * delta_i| one of `participants` contributors may encrypt without the sum wrapping past n/2."""
    if participants < 1:
        raise ValueError("an aggregation round needs at least one participant")
    return n / (2 * scale) / participants


def encrypt_update(update: ModelUpdate, public_key: PaillierPublicKey, rng: random.Random,
                   participants: int = 1) -> List[EncryptedNumber]:
    """
    Encrypts sample_count * delta coordinate-wise. Each coordinate must fit
    its share of the modulus so that the sum over `participants` vectors
    stays below n / (2 * scale) and decodes with the right sign.
    """
    headroom = aggregation_headroom(public_key.n, participants)
    scaled = [update.sample_count * d for d in update.delta]
    worst = max(abs(v) for v in scaled)
    if worst >= headroom:
        raise ValueError(f"update from {update.node_id} overflows the aggregation range "
                         f"({worst:.3g} >= {headroom:.3g} for {participants} participants)")
    return [public_key.encrypt(encode_fixed(v, public_key.n), rng) for v in scaled]


def homomorphic_sum(encrypted_updates: Sequence[Sequence[EncryptedNumber]]) -> List[EncryptedNumber]:
    """Coordinate-wise ciphertext sum; never decrypts anything."""
    if not encrypted_updates:
        raise ValueError("nothing to aggregate")
    width = len(encrypted_updates[0])
    key = encrypted_updates[0][0].public_key
    for vector in encrypted_updates:
        if len(vector) != width:
            raise ValueError("encrypted updates differ in length")
        if any(c.public_key != key for c in vector):
            raise ValueError("encrypted updates are under different public keys")
    sums = list(encrypted_updates[0])
    for vector in encrypted_updates[1:]:
        sums = [add(a, b) for a, b in zip(sums, vector)]
    return sums


def decrypt_aggregate(private_key: PaillierPrivateKey, sums: Sequence[EncryptedNumber]) -> List[float]:
    """Key-holder step: decrypts only the summed numerator."""
    n = private_key.public_key.n
    return [decode_fixed(private_key.decrypt(c), n) for c in sums]


def secure_aggregate(encrypted_updates: Sequence[Sequence[EncryptedNumber]], counts: Sequence[int],
                     private_key: PaillierPrivateKey) -> List[float]:
    """
    Weighted-mean delta from ciphertexts: homomorphic sum, then one decryption
    of the sum. The vectors must come from encrypt_update with `participants`
    of at least len(encrypted_updates), which keeps the sum inside the decodable range.
    """
    if len(encrypted_updates) != len(counts):
        raise ValueError("one sample count is required per encrypted update")
    total = sum(counts)
    if total <= 0:
        raise ValueError("total sample count must be positive")
    numerator = decrypt_aggregate(private_key, homomorphic_sum(encrypted_updates))
    return [v / total for v in numerator]


class Aggregator:
    """
    Consumes updates through a queue and applies one aggregation per round
    once `participants` updates for the current round are waiting.
    """

    def __init__(self, model: GlobalModel, participants: int):
        if participants < 1:
            raise ValueError("an aggregation round needs at least one participant")
        self.model = model
        self.participants = participants
        self.queue: Deque[ModelUpdate] = deque()
        self.history: List[GlobalModel] = [model]

    def offer(self, update: ModelUpdate) -> Optional[GlobalModel]:
        if update.round != self.model.round:
            logger.warning(f"Dropping stale update from {update.node_id} (round {update.round}, at {self.model.round}).")
            return None
        self.queue.append(update)
        if len(self.queue) < self.participants:
            return None
        batch = [self.queue.popleft() for _ in range(self.participants)]
        self.model = fed_avg(batch, self.model)
        self.history.append(self.model)
        logger.debug(f"Round {self.model.round - 1} aggregated over {len(batch)} updates.")
        return self.model


class EncryptedAggregator:
    """Ciphertext-only aggregator: collects encrypted vectors per round and emits their homomorphic sum."""

    def __init__(self, public_key: PaillierPublicKey, participants: int):
        if participants < 1:
            raise ValueError("an aggregation round needs at least one participant")
        self.public_key = public_key
        self.participants = participants
        self.round = 0
        self._vectors: List[List[EncryptedNumber]] = []
        self._counts: List[int] = []

    def offer(self, round_: int, vector: Sequence[EncryptedNumber], sample_count: int) -> Optional[Tuple[List[EncryptedNumber], int]]:
        if round_ != self.round:
            logger.warning(f"Dropping encrypted update for round {round_} (aggregator at {self.round}).")
            return None
        if any(c.public_key != self.public_key for c in vector):
            raise ValueError("encrypted update is not under the aggregation key")
        self._vectors.append(list(vector))
        self._counts.append(sample_count)
        if len(self._vectors) < self.participants:
            return None
        sums, total = homomorphic_sum(self._vectors), sum(self._counts)
        self._vectors, self._counts = [], []
        self.round += 1
        return sums, total


class KeyHolder:
    """Holds the Paillier private key; only ever decrypts aggregated sums."""

    def __init__(self, private_key: PaillierPrivateKey):
        self._private_key = private_key
        self.decryptions = 0

    @property
    def public_key(self) -> PaillierPublicKey:
        return self._private_key.public_key

    def open_sum(self, sums: Sequence[EncryptedNumber], total_count: int) -> List[float]:
        self.decryptions += 1
        return [v / total_count for v in decrypt_aggregate(self._private_key, sums)]


# ---------------------------------------------------------------------------
# Membership inference
# ---------------------------------------------------------------------------


class AttackResult(NamedTuple):
    accuracy: float
    advantage: float
    tau: float


def membership_attack(model: GlobalModel, candidates: Sequence[Tuple[List[float], int, bool]],
                      tau: float) -> AttackResult:
    """
    Loss-threshold attack: predicts "member" iff the row's logistic loss is
    below tau. `candidates` are (features, label, is_member) and must be balanced.
    """
    members = sum(1 for *_, is_member in candidates if is_member)
    if not candidates or members * 2 != len(candidates):
        raise ValueError(f"candidate set must be balanced, got {members} members out of {len(candidates)}")
    losses = row_losses(model.weights, [(f, y) for f, y, _ in candidates])
    truth = np.array([is_member for *_, is_member in candidates])
    acc = float(np.mean((losses < tau) == truth))
    return AttackResult(accuracy=acc, advantage=acc - 0.5, tau=tau)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def normalize_features(values: Sequence[float]) -> List[float]:
    out = []
    for i, (v, (center, scale)) in enumerate(zip(values, FEATURE_NORMALIZATION)):
        if i % 2 == 1:
            v = max(-Z_CLIP, min(Z_CLIP, v))
        out.append((v - center) / scale)
    return out


def profile_row(profile: PatientProfile, seed: int, window: int) -> Row:
    """Features of one short baseline recording of the patient, labelled with its chronic-risk class."""
    stream = gen_stream(profile, seed, (window + 1) * profile.sample_period_ms)
    return normalize_features(preprocess(stream).values), profile.chronic_risk_label


def build_rows(n: int, seed: int, prefix: str, window: int = 8, label_noise: float = 0.0) -> List[Row]:
    if not 0.0 <= label_noise < 0.5:
        raise ValueError("label noise must lie in [0, 0.5)")
    rng = np.random.default_rng(derive_seed(seed, "label-noise", prefix))
    rows = []
    for profile in make_cohort(n, seed, random_phase=False, prefix=prefix):
        features, label = profile_row(profile, derive_seed(seed, "fl-row", profile.patient_id), window)
        if rng.random() < label_noise:
            label = 1 - label
        rows.append((features, label))
    return rows


def hospital_datasets(hospitals: int, rows_per_hospital: int, seed: int, window: int = 8,
                      label_noise: float = 0.0) -> List[LocalDataset]:
    return [
        LocalDataset(node_id=f"h{i}", rows=build_rows(rows_per_hospital, seed, f"h{i}-", window, label_noise))
        for i in range(hospitals)
    ]


# ---------------------------------------------------------------------------
# Offline federation
# ---------------------------------------------------------------------------


class FederationResult(NamedTuple):
    model: GlobalModel
    train_loss: float
    epsilon_spent: Optional[float]
    delta_spent: Optional[float]


def update_seed(seed: int, node_id: str, round_: int) -> int:
    return derive_seed(seed, "dp-noise", node_id, round_)


def train_federation(datasets: Sequence[LocalDataset], rounds: int, epochs: int, lr: float,
                     dp: Optional[DpParams], seed: int) -> FederationResult:
    """Runs `rounds` of local training, privatization and plaintext FedAvg over every dataset."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    aggregator = Aggregator(GlobalModel(), participants=len(datasets))
    losses: Dict[str, float] = {}
    for round_ in range(rounds):
        base = aggregator.model
        for data in datasets:
            update = local_train(base, data, epochs, lr)
            losses[data.node_id] = update.train_loss
            aggregator.offer(privatize(update, None, dp, update_seed(seed, data.node_id, round_)))
    eps, delta = composed_budget(dp, rounds)
    mean_loss = float(np.mean(list(losses.values())))
    return FederationResult(aggregator.model, mean_loss, eps, delta)


def attack_candidates(members: Sequence[Row], non_members: Sequence[Row], n: int) -> List[Tuple[List[float], int, bool]]:
    """First n rows of each pool, members then non-members."""
    if len(members) < n or len(non_members) < n:
        raise ValueError(f"need {n} member and {n} non-member rows")
    return [(f, y, True) for f, y in members[:n]] + [(f, y, False) for f, y in non_members[:n]]

