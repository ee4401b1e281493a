"""Tests for transactions, the pool, PoA/PoW sealing, validation and the chain format."""

import random

import pytest

from carechain.crypto import group_params, keygen
from carechain.ledger import (
    Block,
    Chain,
    ChainDecodeError,
    Consensus,
    LeaderError,
    RejectReason,
    Rule,
    Transaction,
    TxKind,
    TxPool,
    chain_summary,
    decode_chain,
    encode_chain,
    fork_choice,
    genesis_poa,
    genesis_pow,
    poa_seal,
    pow_seal,
    pow_target,
    validate,
    verify_chain,
)

VALIDATORS = ["v0", "v1", "v2", "v3"]


@pytest.fixture(scope="module")
def group():
    return group_params("test")


@pytest.fixture(scope="module")
def keys(group):
    rng = random.Random(21)
    return {pid: keygen(group, rng) for pid in VALIDATORS + ["e0", "h0", "mallory"]}


@pytest.fixture
def registry(keys):
    return {pid: kp.y for pid, kp in keys.items() if pid != "mallory"}


def make_tx(group, keys, sender="e0", payload=b'{"patient_id":"p00"}', created_ms=10, kind=TxKind.ALERT):
    return Transaction.create(group, kind, payload, sender, keys[sender], created_ms)


def build_poa_chain(group, keys, registry, blocks, txs_per_block=1):
    chain = Chain(group, VALIDATORS, registry)
    genesis_poa(chain, keys["v0"])
    pool = TxPool(group, chain.registry)
    for r in range(1, blocks):
        for j in range(txs_per_block):
            assert pool.submit(make_tx(group, keys, payload=f"tx-{r}-{j}".encode(), created_ms=r)).accepted
        leader = chain.leader(r)
        chain.append(poa_seal(chain, pool, r, leader, keys[leader], now_ms=r * 170))
    return chain


# ---------------------------------------------------------------------------
# Transactions and pool
# ---------------------------------------------------------------------------


def test_transaction_signature_and_digest(group, keys):
    tx = make_tx(group, keys)
    assert tx.signature_valid(group, keys["e0"].y)
    assert tx.digest_valid()
    assert not tx.signature_valid(group, keys["h0"].y)
    assert Transaction.from_bytes(tx.to_bytes()) == tx
    assert tx.size_bytes == len(tx.to_bytes())


def test_pool_rejections(group, keys, registry):
    pool = TxPool(group, registry, capacity=2)
    tx = make_tx(group, keys)

    assert pool.submit(make_tx(group, keys, sender="mallory")) == (False, RejectReason.UNREGISTERED)
    forged = tx.model_copy(update={"payload": b"tampered"})
    assert pool.submit(forged).reason == RejectReason.BAD_SIGNATURE
    assert pool.submit(tx).accepted
    assert pool.submit(tx).reason == RejectReason.DUPLICATE
    assert pool.submit(make_tx(group, keys, payload=b"2")).accepted
    assert pool.submit(make_tx(group, keys, payload=b"3")).reason == RejectReason.POOL_FULL
    assert pool.rejected[RejectReason.DUPLICATE] == 1
    assert len(pool) == 2


def test_pool_rejects_stale_digest(group, keys, registry):
    tx = make_tx(group, keys)
    stale = tx.model_copy(update={"payload_digest": bytes(32)})
    assert TxPool(group, registry).submit(stale).reason == RejectReason.BAD_DIGEST


def test_pool_admission_hook(group, keys, registry):
    pool = TxPool(group, registry, admit=lambda tx: tx.sender != "h0")
    assert pool.submit(make_tx(group, keys, sender="h0")).reason == RejectReason.UNAUTHORIZED
    assert pool.submit(make_tx(group, keys, sender="e0")).accepted


def test_pool_is_fifo(group, keys, registry):
    pool = TxPool(group, registry)
    txs = [make_tx(group, keys, payload=bytes([i])) for i in range(5)]
    for tx in txs:
        pool.submit(tx)
    assert pool.drain(3) == txs[:3]
    assert pool.drain(10) == txs[3:]
    assert pool.drain(1) == []


# ---------------------------------------------------------------------------
# Proof of authority
# ---------------------------------------------------------------------------


def test_poa_chain_verifies(group, keys, registry):
    chain = build_poa_chain(group, keys, registry, blocks=12)
    assert len(chain) == 12
    assert verify_chain(chain) is None
    assert [b.header.sealer_id for b in chain.blocks[:5]] == ["v0", "v1", "v2", "v3", "v0"]


def test_poa_out_of_turn_sealer(group, keys, registry):
    chain = Chain(group, VALIDATORS, registry)
    genesis_poa(chain, keys["v0"])
    pool = TxPool(group, chain.registry)
    with pytest.raises(LeaderError):
        poa_seal(chain, pool, 1, "v2", keys["v2"], now_ms=170)
    with pytest.raises(LeaderError):
        poa_seal(chain, pool, 1, "v1", keys["v2"], now_ms=170)


def test_poa_round_must_advance(group, keys, registry):
    chain = build_poa_chain(group, keys, registry, blocks=3)
    pool = TxPool(group, chain.registry)
    with pytest.raises(ValueError):
        poa_seal(chain, pool, 2, chain.leader(2), keys[chain.leader(2)], now_ms=1000)


def test_poa_skipped_rounds_are_allowed(group, keys, registry):
    chain = build_poa_chain(group, keys, registry, blocks=2)
    pool = TxPool(group, chain.registry)
    block = poa_seal(chain, pool, 7, chain.leader(7), keys[chain.leader(7)], now_ms=2000)
    assert validate(chain, block) is None


def test_timestamps_strictly_increase(group, keys, registry):
    chain = build_poa_chain(group, keys, registry, blocks=2)
    pool = TxPool(group, chain.registry)
    block = poa_seal(chain, pool, 2, chain.leader(2), keys[chain.leader(2)], now_ms=0)
    assert block.header.timestamp_ms == chain.tip.header.timestamp_ms + 1


def test_validation_rules(group, keys, registry):
    chain = build_poa_chain(group, keys, registry, blocks=3)
    pool = TxPool(group, chain.registry)
    pool.submit(make_tx(group, keys, payload=b"next"))
    block = poa_seal(chain, pool, 3, chain.leader(3), keys[chain.leader(3)], now_ms=600)
    assert validate(chain, block) is None

    header = block.header
    assert validate(chain, block.model_copy(update={"header": header.model_copy(update={"index": 9})})) == Rule.INDEX
    assert validate(chain, block.model_copy(update={"header": header.model_copy(update={"prev_hash": bytes(32)})})) == Rule.PREV_HASH
    assert validate(chain, block.model_copy(update={"transactions": []})) == Rule.TX_ROOT
    assert validate(chain, block.model_copy(update={"header": header.model_copy(update={"sealer_id": "v0"})})) == Rule.SEAL
    assert validate(chain, block.model_copy(update={"header": header.model_copy(update={"timestamp_ms": 1})})) == Rule.SEAL


def test_unknown_signer_in_block(group, keys, registry):
    chain = build_poa_chain(group, keys, registry, blocks=2)
    pool = TxPool(group, {**chain.registry, "mallory": keys["mallory"].y})
    pool.submit(make_tx(group, keys, sender="mallory"))
    block = poa_seal(chain, pool, 2, chain.leader(2), keys[chain.leader(2)], now_ms=400)
    assert validate(chain, block) == Rule.TX_SIGNATURE
    with pytest.raises(ValueError):
        chain.append(block)


# ---------------------------------------------------------------------------
# Proof of work
# ---------------------------------------------------------------------------


def test_pow_seal_meets_target(group, keys, registry):
    chain = Chain(group, VALIDATORS, registry, Consensus.POW, difficulty=64)
    genesis_pow(chain, seed=1)
    block = pow_seal(chain, [make_tx(group, keys)], 64, seed=2, now_ms=100, sealer_id="v0")
    assert int.from_bytes(block.header.hash(), "big") < pow_target(64)
    assert block.attempts >= 1
    chain.append(block)
    assert verify_chain(chain) is None


def test_pow_attempts_scale_with_difficulty(group, registry):
    chain = Chain(group, VALIDATORS, registry, Consensus.POW, difficulty=1)
    easy = [pow_seal(chain, [], 1, seed=s, now_ms=0).attempts for s in range(20)]
    hard = [pow_seal(chain, [], 256, seed=s, now_ms=0).attempts for s in range(20)]
    assert set(easy) == {1}
    assert sum(hard) / len(hard) > 50


def test_pow_chain_rejects_wrong_seal(group, keys, registry):
    chain = Chain(group, VALIDATORS, registry, Consensus.POW, difficulty=16)
    genesis_pow(chain, seed=1)
    weak = pow_seal(chain, [], 1, seed=3, now_ms=10)
    assert validate(chain, weak) == Rule.SEAL

    poa = Chain(group, VALIDATORS, registry)
    genesis_poa(poa, keys["v0"])
    block = pow_seal(poa, [], 4, seed=1, now_ms=10, sealer_id="v1")
    assert validate(poa, block) == Rule.SEAL


def test_pow_chain_needs_difficulty(group, registry):
    with pytest.raises(ValueError):
        Chain(group, VALIDATORS, registry, Consensus.POW)


# ---------------------------------------------------------------------------
# Fork choice
# ---------------------------------------------------------------------------


def test_fork_choice_prefers_longest_valid(group, keys, registry):
    short = build_poa_chain(group, keys, registry, blocks=3)
    long = build_poa_chain(group, keys, registry, blocks=5)
    broken = build_poa_chain(group, keys, registry, blocks=8)
    broken.blocks[4] = broken.blocks[4].model_copy(update={"transactions": []})
    assert fork_choice([short, broken, long]) is long


def test_fork_choice_tie_breaks_on_tip_hash(group, keys, registry):
    a = build_poa_chain(group, keys, registry, blocks=3)
    b = build_poa_chain(group, keys, registry, blocks=2)
    pool = TxPool(group, b.registry)
    pool.submit(make_tx(group, keys, payload=b"fork"))
    b.append(poa_seal(b, pool, 2, b.leader(2), keys[b.leader(2)], now_ms=340))
    expected = min([a, b], key=lambda c: c.tip.header.hash())
    assert fork_choice([a, b]) is expected
    with pytest.raises(ValueError):
        fork_choice([])


# ---------------------------------------------------------------------------
# Binary format and tamper evidence
# ---------------------------------------------------------------------------


def test_encode_decode_preserves_chain(group, keys, registry):
    chain = build_poa_chain(group, keys, registry, blocks=6, txs_per_block=2)
    data = encode_chain(chain)
    decoded = decode_chain(data)
    assert encode_chain(decoded) == data
    assert verify_chain(decoded) is None
    assert decoded.registry == chain.registry
    summary = chain_summary(decoded)
    assert summary["consensus"] == "poa" and len(summary["blocks"]) == 6


def test_decode_rejects_trailing_bytes_and_bad_magic(group, keys, registry):
    data = encode_chain(build_poa_chain(group, keys, registry, blocks=2))
    with pytest.raises(ChainDecodeError):
        decode_chain(data + b"\x00")
    with pytest.raises(ChainDecodeError) as err:
        decode_chain(b"XX" + data[2:])
    assert err.value.index is None


def _block_spans(chain):
    """(start, end, index) of each block's bytes inside encode_chain(chain)."""
    data = encode_chain(chain)
    sizes = [len(b.to_bytes()) for b in chain.blocks]
    offset = len(data) - sum(4 + s for s in sizes)
    spans = []
    for i, size in enumerate(sizes):
        spans.append((offset, offset + 4 + size, i))
        offset += 4 + size
    return data, spans


def _first_invalid(data):
    try:
        return verify_chain(decode_chain(data))
    except ChainDecodeError as e:
        return e.index


def _mutation_sweep(chain, positions, seed):
    data, spans = _block_spans(chain)
    rng = random.Random(seed)
    assert _first_invalid(data) is None
    for _ in range(positions):
        start, end, index = spans[rng.randrange(len(spans))]
        pos = rng.randrange(start, end)
        mutated = bytearray(data)
        mutated[pos] ^= 1 << rng.randrange(8)
        assert _first_invalid(bytes(mutated)) == index, f"mutation at byte {pos} not pinned to block {index}"


def test_single_byte_mutations_are_pinned(group, keys, registry):
    _mutation_sweep(build_poa_chain(group, keys, registry, blocks=30), positions=150, seed=1)


@pytest.mark.slow
def test_single_byte_mutations_on_long_chain(group, keys, registry):
    _mutation_sweep(build_poa_chain(group, keys, registry, blocks=200), positions=1000, seed=2)


def test_stale_timestamp_is_rejected(group, registry):
    chain = Chain(group, VALIDATORS, registry, Consensus.POW, difficulty=1)
    genesis_pow(chain, seed=1, timestamp_ms=500)
    block = pow_seal(chain, [], 1, seed=2, now_ms=900)
    assert validate(chain, block) is None
    stale = block.model_copy(update={"header": block.header.model_copy(update={"timestamp_ms": 500})})
    assert validate(chain, stale) == Rule.TIMESTAMP


def test_block_bytes_decode_to_the_same_block(group, keys, registry):
    chain = build_poa_chain(group, keys, registry, blocks=2)
    block = chain.blocks[1]
    assert Block.from_bytes(block.to_bytes()) == block
    assert chain_summary(chain)["blocks"][1]["seal"]["type"] == "poa"
