"""Tests for local training, clipping, DP noise, plaintext and encrypted aggregation, and the membership attack."""

import math
import random

import numpy as np
import pytest

from carechain.crypto import paillier_keygen
from carechain.fedlearn import (
    FIXED_POINT_SCALE,
    Aggregator,
    EncryptedAggregator,
    KeyHolder,
    accuracy,
    aggregation_headroom,
    attack_candidates,
    build_rows,
    clip,
    composed_budget,
    decode_fixed,
    dp_noise,
    encode_fixed,
    encrypt_update,
    fed_avg,
    hospital_datasets,
    local_train,
    logistic_gradient,
    logistic_loss,
    membership_attack,
    normalize_features,
    privatize,
    secure_aggregate,
    train_federation,
)
from carechain.schemas import N_FEATURES, N_WEIGHTS, DpParams, GlobalModel, LocalDataset, ModelUpdate


@pytest.fixture(scope="module")
def dataset():
    return hospital_datasets(1, 30, seed=5)[0]


@pytest.fixture(scope="module")
def paillier():
    return paillier_keygen(128, seed=8)


def update(node_id="h0", delta=None, count=10, round_=0):
    return ModelUpdate(node_id=node_id, round=round_, delta=delta or [0.1] * N_WEIGHTS, sample_count=count)


# ---------------------------------------------------------------------------
# Logistic regression and local training
# ---------------------------------------------------------------------------


def random_rows(gen, n):
    return [(gen.normal(0.0, 1.0, N_FEATURES).tolist(), int(gen.integers(0, 2))) for _ in range(n)]


def test_gradient_matches_finite_differences(dataset):
    instances = [(np.linspace(-0.5, 0.5, N_WEIGHTS), dataset.rows)]
    for seed in range(20):
        gen = np.random.default_rng(seed)
        instances.append((gen.normal(0.0, 1.0, N_WEIGHTS), random_rows(gen, int(gen.integers(5, 60)))))
    eps = 1e-6
    for w, rows in instances:
        grad = logistic_gradient(w, rows)
        numeric = np.zeros(N_WEIGHTS)
        for i in range(N_WEIGHTS):
            step = np.zeros(N_WEIGHTS)
            step[i] = eps
            numeric[i] = (logistic_loss(w + step, rows) - logistic_loss(w - step, rows)) / (2 * eps)
        assert np.linalg.norm(grad - numeric) <= 1e-5 * max(np.linalg.norm(numeric), 1e-3)


def test_local_train_lowers_the_loss(dataset):
    model = GlobalModel()
    result = local_train(model, dataset, epochs=25, lr=1.0)
    assert result.round == 0 and result.sample_count == 30
    assert result.train_loss < logistic_loss(model.weights, dataset.rows)
    assert result.train_loss == pytest.approx(
        logistic_loss(np.asarray(model.weights) + np.asarray(result.delta), dataset.rows))


def test_local_train_zero_learning_rate_is_a_no_op(dataset):
    assert local_train(GlobalModel(), dataset, epochs=3, lr=0.0).delta == [0.0] * N_WEIGHTS


def test_local_train_rejects_bad_arguments(dataset):
    with pytest.raises(ValueError):
        local_train(GlobalModel(), dataset, epochs=0, lr=1.0)
    with pytest.raises(ValueError):
        local_train(GlobalModel(), dataset, epochs=1, lr=float("nan"))
    with pytest.raises(ValueError):
        local_train(GlobalModel(), dataset, epochs=1, lr=-0.1)
    with pytest.raises(ValueError):
        LocalDataset(node_id="h9", rows=[])


def test_federation_learns_the_risk_label():
    datasets = hospital_datasets(4, 40, seed=2)
    holdout = build_rows(200, seed=2, prefix="holdout-")
    result = train_federation(datasets, rounds=10, epochs=25, lr=1.0, dp=None, seed=2)
    assert result.model.round == 10
    assert result.epsilon_spent is None and result.delta_spent is None
    assert accuracy(result.model, holdout) > 0.7


def test_rows_are_deterministic_and_normalized():
    assert build_rows(5, seed=3, prefix="a-") == build_rows(5, seed=3, prefix="a-")
    assert build_rows(5, seed=3, prefix="a-") != build_rows(5, seed=3, prefix="b-")
    with pytest.raises(ValueError):
        build_rows(5, seed=3, prefix="a-", label_noise=0.5)
    features = normalize_features([80.0, 1e6, 130.0, -1e6, 96.0, 0.0, 1.0, 0.0])
    assert features == pytest.approx([0.0, 10 / 3, 0.0, -10 / 3, 0.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# Clipping and differential privacy
# ---------------------------------------------------------------------------


def test_clip_bounds_the_norm():
    big = clip(update(delta=[3.0] * N_WEIGHTS), 1.0)
    assert np.linalg.norm(big.delta) == pytest.approx(1.0)
    assert big.clipped and big.clip_norm == 1.0
    small = clip(update(delta=[0.01] * N_WEIGHTS), 1.0)
    assert small.delta == pytest.approx([0.01] * N_WEIGHTS)
    assert clip(update(delta=[0.0] * N_WEIGHTS), 1.0).delta == [0.0] * N_WEIGHTS
    with pytest.raises(ValueError):
        clip(update(), 0.0)


def test_gaussian_sigma():
    dp = DpParams.from_budget(1.0, 1e-5, 1.0)
    assert dp.sigma == pytest.approx(math.sqrt(2 * math.log(1.25e5)))
    assert DpParams.from_budget(0.5, 1e-5, 2.0).sigma == pytest.approx(4 * dp.sigma)
    with pytest.raises(ValueError):
        DpParams(epsilon=1.0, delta_p=1e-5, clip_norm=1.0, sigma=0.1)


def test_dp_noise_requires_matching_clip():
    dp = DpParams.from_budget(1.0, 1e-5, 1.0)
    with pytest.raises(ValueError):
        dp_noise(update(), dp, seed=1)
    with pytest.raises(ValueError):
        dp_noise(clip(update(), 2.0), dp, seed=1)


def test_dp_noise_is_seeded_with_the_right_scale():
    dp = DpParams.from_budget(1.0, 1e-5, 1.0)
    assert dp.sigma == pytest.approx(4.8448, abs=1e-4)
    clipped = clip(update(delta=[0.0] * N_WEIGHTS), 1.0)
    assert dp_noise(clipped, dp, seed=4) == dp_noise(clipped, dp, seed=4)
    samples = np.array([dp_noise(clipped, dp, seed=s).delta for s in range(1_200)]).ravel()
    assert samples.size >= 10_000
    assert abs(samples.mean()) < 0.05 * dp.sigma
    assert samples.std() == pytest.approx(dp.sigma, rel=0.05)


def test_privatize_without_dp_is_identity():
    u = update()
    assert privatize(u, 1.0, None, seed=0) is u
    noisy = privatize(update(delta=[5.0] * N_WEIGHTS), None, DpParams.from_budget(1.0, 1e-5, 1.0), seed=0)
    assert noisy.clipped and noisy.dp is not None


def test_composed_budget():
    assert composed_budget(None, 10) == (None, None)
    eps, delta = composed_budget(DpParams.from_budget(0.5, 1e-5, 1.0), 10)
    assert eps == pytest.approx(5.0) and delta == pytest.approx(1e-4)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def test_fed_avg_is_sample_weighted():
    a = update("h0", [1.0] * N_WEIGHTS, count=30)
    b = update("h1", [-1.0] * N_WEIGHTS, count=10)
    model = fed_avg([a, b], GlobalModel())
    assert model.round == 1
    assert model.weights == pytest.approx([0.5] * N_WEIGHTS)


def test_fed_avg_matches_a_direct_weighted_mean():
    gen = np.random.default_rng(17)
    for round_ in range(200):
        base = GlobalModel(round=round_, weights=gen.normal(0.0, 2.0, N_WEIGHTS).tolist())
        updates = [update(f"h{i}", gen.normal(0.0, 1.0, N_WEIGHTS).tolist(), count=int(gen.integers(1, 100)),
                          round_=round_) for i in range(int(gen.integers(1, 7)))]
        total = sum(u.sample_count for u in updates)
        expected = [base.weights[j] + sum(u.sample_count * u.delta[j] for u in updates) / total
                    for j in range(N_WEIGHTS)]
        model = fed_avg(updates, base)
        assert model.round == round_ + 1
        assert model.weights == pytest.approx(expected, abs=1e-9)


def test_fed_avg_errors():
    with pytest.raises(ValueError):
        fed_avg([], GlobalModel())
    with pytest.raises(ValueError):
        fed_avg([update(round_=1)], GlobalModel())


def test_aggregator_waits_for_every_participant(caplog):
    agg = Aggregator(GlobalModel(), participants=2)
    assert agg.offer(update("h0")) is None
    assert agg.offer(update("h9", round_=3)) is None
    assert "stale" in caplog.text
    model = agg.offer(update("h1"))
    assert model.round == 1 and len(agg.history) == 2


def test_fixed_point_encoding(paillier):
    pub, _ = paillier
    for value in (0.0, 1.25, -3.5, 1234.567891):
        assert decode_fixed(encode_fixed(value, pub.n), pub.n) == pytest.approx(value, abs=1e-6)
    with pytest.raises(ValueError):
        encode_fixed(float(pub.n), pub.n)


def test_secure_aggregate_matches_plaintext(paillier):
    pub, priv = paillier
    rng = random.Random(3)
    gen = np.random.default_rng(3)
    updates = [update(f"h{i}", gen.normal(0, 0.3, N_WEIGHTS).tolist(), count=int(gen.integers(5, 40)))
               for i in range(4)]
    encrypted = [encrypt_update(u, pub, rng) for u in updates]
    mean_delta = secure_aggregate(encrypted, [u.sample_count for u in updates], priv)
    assert mean_delta == pytest.approx(fed_avg(updates, GlobalModel()).weights, abs=1e-5)


@pytest.mark.slow
def test_secure_aggregate_matches_plaintext_on_random_sets(paillier):
    pub, priv = paillier
    rng = random.Random(23)
    gen = np.random.default_rng(23)
    for _ in range(1_000):
        k = int(gen.integers(1, 6))
        updates = [update(f"h{i}", gen.normal(0.0, 1.0, N_WEIGHTS).tolist(), count=int(gen.integers(1, 50)))
                   for i in range(k)]
        encrypted = [encrypt_update(u, pub, rng, participants=k) for u in updates]
        mean_delta = secure_aggregate(encrypted, [u.sample_count for u in updates], priv)
        assert mean_delta == pytest.approx(fed_avg(updates, GlobalModel()).weights, abs=1e-6)


def test_encrypt_update_keeps_the_sum_decodable(paillier):
    pub, priv = paillier
    rng = random.Random(5)
    count = 10
    large = update("h0", [-0.45 * aggregation_headroom(pub.n, 2) / count] * N_WEIGHTS, count=count)
    encrypted = [encrypt_update(large, pub, rng, participants=2) for _ in range(2)]
    mean_delta = secure_aggregate(encrypted, [count, count], priv)
    assert all(v < 0 for v in mean_delta)
    assert mean_delta == pytest.approx(large.delta, rel=1e-9)

    too_large = update("h1", [0.6 * pub.n / (2 * FIXED_POINT_SCALE) / count] * N_WEIGHTS, count=count)
    encrypt_update(too_large, pub, rng, participants=1)
    with pytest.raises(ValueError, match="overflows the aggregation range"):
        encrypt_update(too_large, pub, rng, participants=2)
    with pytest.raises(ValueError):
        aggregation_headroom(pub.n, 0)


def test_encrypted_aggregator_round_trip(paillier):
    pub, priv = paillier
    rng = random.Random(4)
    holder = KeyHolder(priv)
    agg = EncryptedAggregator(holder.public_key, participants=2)
    a, b = update("h0", [0.2] * N_WEIGHTS, count=10), update("h1", [-0.4] * N_WEIGHTS, count=30)
    assert agg.offer(0, encrypt_update(a, pub, rng), a.sample_count) is None
    assert agg.offer(5, encrypt_update(b, pub, rng), b.sample_count) is None
    sums, total = agg.offer(0, encrypt_update(b, pub, rng), b.sample_count)
    assert total == 40 and agg.round == 1
    assert holder.open_sum(sums, total) == pytest.approx([-0.25] * N_WEIGHTS, abs=1e-6)
    assert holder.decryptions == 1


def test_encrypted_aggregator_rejects_foreign_key(paillier):
    pub, _ = paillier
    other, _ = paillier_keygen(128, seed=9)
    agg = EncryptedAggregator(pub, participants=1)
    with pytest.raises(ValueError):
        agg.offer(0, encrypt_update(update(), other, random.Random(1)), 10)


# ---------------------------------------------------------------------------
# Membership inference
# ---------------------------------------------------------------------------


def test_attack_needs_balanced_candidates(dataset):
    with pytest.raises(ValueError):
        membership_attack(GlobalModel(), [(f, y, True) for f, y in dataset.rows[:3]], tau=0.5)
    with pytest.raises(ValueError):
        attack_candidates(dataset.rows[:2], dataset.rows, 3)


def test_untrained_model_gives_no_advantage(dataset):
    candidates = attack_candidates(dataset.rows[:10], dataset.rows[10:20], 10)
    result = membership_attack(GlobalModel(), candidates, tau=1.0)
    assert result.accuracy == 0.5 and result.advantage == 0.0


def test_overfit_model_leaks_more_than_a_private_one():
    strong_dp = DpParams.from_budget(0.5, 1e-5, 1.0)
    leaky, private = [], []
    for seed in range(30):
        gen = np.random.default_rng(seed)
        members, outsiders = random_rows(gen, 20), random_rows(gen, 20)
        candidates = attack_candidates(members, outsiders, 20)
        data = [LocalDataset(node_id="h0", rows=members)]
        for dp, advantages in ((None, leaky), (strong_dp, private)):
            result = train_federation(data, rounds=1, epochs=500, lr=1.0, dp=dp, seed=seed)
            attack = membership_attack(result.model, candidates, tau=result.train_loss)
            assert attack.advantage == pytest.approx(attack.accuracy - 0.5)
            advantages.append(attack.advantage)
    assert np.mean(leaky) > np.mean(private)
    assert np.mean(leaky) > 0.0
