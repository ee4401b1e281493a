"""
Permissioned hash-chained ledger: signed transactions, a bounded FIFO pool,
round-robin Proof-of-Authority sealing, a Proof-of-Work baseline sealer,
rule-ordered block validation, full-chain verification and the canonical
binary chain format.

Header bytes: index u64 || prev_hash 32B || tx_root 32B || timestamp u64 ||
sealer_id (u32 length-prefixed) || seal tag u8 || seal body. PoA body is
round u64 || signature (length-prefixed); PoW body is difficulty u64 || nonce u64.
All integers big-endian.
"""

import logging
from collections import deque
from enum import Enum
from typing import Callable, Deque, Dict, Iterable, List, NamedTuple, Optional, Sequence, Set, Union

from pydantic import BaseModel, ConfigDict, Field

from carechain.crypto import (
    DIGEST_SIZE,
    ZERO_DIGEST,
    GroupParams,
    KeyPair,
    hash_bytes,
    merkle_root,
    schnorr_sign,
    verify_sig,
)
from carechain.utils import ByteReader, derive_seed, int_to_bytes, length_prefixed, u8, u32, u64

logger = logging.getLogger(__name__)

DEFAULT_POOL_CAPACITY = 10_000
DEFAULT_MAX_TX = 16
CHAIN_MAGIC = b"CCHAIN\x01"

POA_TAG = 1
POW_TAG = 2


class LeaderError(ValueError):
    """A validator tried to seal out of turn."""


class ChainDecodeError(ValueError):
    """Chain bytes could not be decoded; `index` is the failing block, None for the preamble."""

    def __init__(self, index: Optional[int], message: str):
        super().__init__(f"block {index}: {message}" if index is not None else message)
        self.index = index


# ---------------------------------------------------------------------------
# Transactions
# ---------------------------------------------------------------------------


class TxKind(str, Enum):
    MODEL_UPDATE = "ModelUpdate"
    ACCESS_REQUEST = "AccessRequest"
    CONSENT_CHANGE = "ConsentChange"
    ALERT = "Alert"
    RECORD_WRITE = "RecordWrite"


TX_KIND_CODES: Dict[TxKind, int] = {kind: i + 1 for i, kind in enumerate(TxKind)}
TX_KINDS_BY_CODE: Dict[int, TxKind] = {code: kind for kind, code in TX_KIND_CODES.items()}


def _signing_bytes(kind: TxKind, payload_hash: bytes, sender: str, created_ms: int) -> bytes:
    return (
        b"carechain/tx"
        + u8(TX_KIND_CODES[kind])
        + payload_hash
        + length_prefixed(sender.encode("utf-8"))
        + u64(created_ms)
    )


class Transaction(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: TxKind
    payload: bytes
    payload_digest: bytes = Field(..., description="SHA-256 of payload.")
    sender: str
    signature: bytes
    created_ms: int = Field(..., ge=0)

    @classmethod
    def create(cls, group: GroupParams, kind: TxKind, payload: bytes, sender: str, key: KeyPair,
               created_ms: int) -> "Transaction":
        digest = hash_bytes(payload)
        signature = schnorr_sign(group, key, _signing_bytes(kind, digest, sender, created_ms))
        return cls(kind=kind, payload=payload, payload_digest=digest, sender=sender,
                   signature=signature, created_ms=created_ms)

    def signature_valid(self, group: GroupParams, public_key: int) -> bool:
        """The signature covers the hash of the payload as carried, not the stored digest."""
        message = _signing_bytes(self.kind, hash_bytes(self.payload), self.sender, self.created_ms)
        return verify_sig(group, public_key, message, self.signature)

    def digest_valid(self) -> bool:
        return self.payload_digest == hash_bytes(self.payload)

    def to_bytes(self) -> bytes:
        return (
            u8(TX_KIND_CODES[self.kind])
            + length_prefixed(self.payload)
            + self.payload_digest
            + length_prefixed(self.sender.encode("utf-8"))
            + length_prefixed(self.signature)
            + u64(self.created_ms)
        )

    @classmethod
    def from_reader(cls, reader: ByteReader) -> "Transaction":
        code = reader.u8()
        if code not in TX_KINDS_BY_CODE:
            raise ValueError(f"unknown transaction kind code {code}")
        payload = reader.length_prefixed()
        digest = reader.take(DIGEST_SIZE)
        sender = reader.length_prefixed().decode("utf-8")
        signature = reader.length_prefixed()
        created_ms = reader.u64()
        return cls(kind=TX_KINDS_BY_CODE[code], payload=payload, payload_digest=digest,
                   sender=sender, signature=signature, created_ms=created_ms)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Transaction":
        reader = ByteReader(data)
        tx = cls.from_reader(reader)
        reader.expect_end()
        return tx

    @property
    def tx_id(self) -> bytes:
        return hash_bytes(self.to_bytes())

    @property
    def size_bytes(self) -> int:
        return len(self.to_bytes())


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


class PoaSeal(BaseModel):
    model_config = ConfigDict(frozen=True)

    round: int = Field(..., ge=0)
    signature: bytes

    def body(self) -> bytes:
        return u8(POA_TAG) + u64(self.round) + length_prefixed(self.signature)


class PowSeal(BaseModel):
    model_config = ConfigDict(frozen=True)

    difficulty: int = Field(..., ge=1)
    nonce: int = Field(..., ge=0, lt=2 ** 64)

    def body(self) -> bytes:
        return u8(POW_TAG) + u64(self.difficulty) + u64(self.nonce)


class BlockHeader(BaseModel):
    model_config = ConfigDict(frozen=True)

    index: int = Field(..., ge=0)
    prev_hash: bytes
    tx_root: bytes
    timestamp_ms: int = Field(..., ge=0)
    sealer_id: str
    seal: Union[PoaSeal, PowSeal]

    def unsealed_bytes(self) -> bytes:
        return (
            u64(self.index)
            + self.prev_hash
            + self.tx_root
            + u64(self.timestamp_ms)
            + length_prefixed(self.sealer_id.encode("utf-8"))
        )

    def to_bytes(self) -> bytes:
        return self.unsealed_bytes() + self.seal.body()

    def hash(self) -> bytes:
        return hash_bytes(self.to_bytes())

    @classmethod
    def from_reader(cls, reader: ByteReader) -> "BlockHeader":
        index = reader.u64()
        prev_hash = reader.take(DIGEST_SIZE)
        tx_root = reader.take(DIGEST_SIZE)
        timestamp_ms = reader.u64()
        sealer_id = reader.length_prefixed().decode("utf-8")
        tag = reader.u8()
        if tag == POA_TAG:
            seal = PoaSeal(round=reader.u64(), signature=reader.length_prefixed())
        elif tag == POW_TAG:
            seal = PowSeal(difficulty=reader.u64(), nonce=reader.u64())
        else:
            raise ValueError(f"unknown seal tag {tag}")
        return cls(index=index, prev_hash=prev_hash, tx_root=tx_root, timestamp_ms=timestamp_ms,
                   sealer_id=sealer_id, seal=seal)


def _poa_signing_bytes(header_unsealed: bytes, round_: int) -> bytes:
    return b"carechain/poa" + header_unsealed + u8(POA_TAG) + u64(round_)


class Block(BaseModel):
    model_config = ConfigDict(frozen=True)

    header: BlockHeader
    transactions: List[Transaction] = Field(default_factory=list)
    attempts: int = Field(0, ge=0, description="Hash attempts spent sealing; not part of the block bytes.")

    def to_bytes(self) -> bytes:
        parts = [self.header.to_bytes(), u32(len(self.transactions))]
        parts.extend(length_prefixed(tx.to_bytes()) for tx in self.transactions)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        reader = ByteReader(data)
        header = BlockHeader.from_reader(reader)
        count = reader.u32()
        txs = [Transaction.from_bytes(reader.length_prefixed()) for _ in range(count)]
        reader.expect_end()
        return cls(header=header, transactions=txs)

    @property
    def size_bytes(self) -> int:
        return len(self.to_bytes())


def tx_root(transactions: Sequence[Transaction]) -> bytes:
    return merkle_root([tx.tx_id for tx in transactions])


# ---------------------------------------------------------------------------
# Chain
# ---------------------------------------------------------------------------


class Consensus(str, Enum):
    POA = "poa"
    POW = "pow"


class Rule(str, Enum):
    """Validation rules, in the order they are checked."""
    INDEX = "index"
    PREV_HASH = "prev_hash"
    TX_ROOT = "tx_root"
    TX_SIGNATURE = "tx_signature"
    SEAL = "seal"
    TIMESTAMP = "timestamp"


class Chain:
    """
    Append-only block sequence with its static validator set and identity
    registry (principal id -> Schnorr public key). Appends go through `validate`.
    """

    def __init__(self, group: GroupParams, validators: Sequence[str], registry: Dict[str, int],
                 consensus: Consensus = Consensus.POA, difficulty: Optional[int] = None):
        consensus = Consensus(consensus)
        if consensus == Consensus.POA and not validators:
            raise ValueError("a PoA chain needs at least one validator")
        if consensus == Consensus.POW and (difficulty is None or difficulty < 1):
            raise ValueError("a PoW chain needs a difficulty >= 1")
        self.group = group
        self.validators: List[str] = list(validators)
        self.registry: Dict[str, int] = dict(registry)
        self.consensus = consensus
        self.difficulty = difficulty if consensus == Consensus.POW else None
        self.blocks: List[Block] = []

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def tip(self) -> Optional[Block]:
        return self.blocks[-1] if self.blocks else None

    def leader(self, round_: int) -> str:
        return self.validators[round_ % len(self.validators)]

    def register(self, principal_id: str, public_key: int) -> None:
        if principal_id in self.registry and self.registry[principal_id] != public_key:
            raise ValueError(f"'{principal_id}' is already registered with a different key")
        self.registry[principal_id] = public_key

    def append(self, block: Block) -> None:
        rule = validate(self, block)
        if rule is not None:
            raise ValueError(f"block {block.header.index} rejected: {rule.value}")
        self.blocks.append(block)

    def committed_ids(self) -> Set[bytes]:
        return {tx.tx_id for b in self.blocks for tx in b.transactions}

    def transactions(self) -> Iterable[Transaction]:
        for b in self.blocks:
            yield from b.transactions


def _check(chain: Chain, block: Block, index: int, parent: Optional[Block]) -> Optional[Rule]:
    header = block.header
    group = chain.group

    if header.index != index:
        return Rule.INDEX

    expected_prev = parent.header.hash() if parent is not None else ZERO_DIGEST
    if header.prev_hash != expected_prev:
        return Rule.PREV_HASH

    if header.tx_root != tx_root(block.transactions):
        return Rule.TX_ROOT

    for tx in block.transactions:
        key = chain.registry.get(tx.sender)
        if key is None or not tx.digest_valid() or not tx.signature_valid(group, key):
            return Rule.TX_SIGNATURE

    seal = header.seal
    if chain.consensus == Consensus.POA:
        if not isinstance(seal, PoaSeal):
            return Rule.SEAL
        if header.sealer_id != chain.leader(seal.round):
            return Rule.SEAL
        if parent is not None and not (isinstance(parent.header.seal, PoaSeal) and seal.round > parent.header.seal.round):
            return Rule.SEAL
        key = chain.registry.get(header.sealer_id)
        if key is None or not verify_sig(group, key, _poa_signing_bytes(header.unsealed_bytes(), seal.round), seal.signature):
            return Rule.SEAL
    else:
        if not isinstance(seal, PowSeal) or seal.difficulty != chain.difficulty:
            return Rule.SEAL
        if int.from_bytes(header.hash(), "big") >= pow_target(seal.difficulty):
            return Rule.SEAL

    if parent is not None and header.timestamp_ms <= parent.header.timestamp_ms:
        return Rule.TIMESTAMP
    return None


def validate(chain: Chain, block: Block) -> Optional[Rule]:
    """Checks `block` as the next block of `chain`; returns the first violated rule or None."""
    return _check(chain, block, len(chain.blocks), chain.tip)


def verify_chain(chain: Chain) -> Optional[int]:
    """Replays validation from genesis; returns the index of the first invalid block or None."""
    parent = None
    for i, block in enumerate(chain.blocks):
        rule = _check(chain, block, i, parent)
        if rule is not None:
            logger.debug(f"Chain verification failed at block {i}: {rule.value}")
            return i
        parent = block
    return None


def fork_choice(chains: Sequence[Chain]) -> Chain:
    """Longest valid chain; ties go to the lower tip-header hash."""
    valid = [c for c in chains if c.blocks and verify_chain(c) is None]
    if not valid:
        raise ValueError("no valid chain to choose from")
    return min(valid, key=lambda c: (-len(c.blocks), c.tip.header.hash()))


# ---------------------------------------------------------------------------
# Pool
# ---------------------------------------------------------------------------


class RejectReason(str, Enum):
    UNREGISTERED = "unregistered"
    BAD_SIGNATURE = "bad signature"
    BAD_DIGEST = "bad digest"
    UNAUTHORIZED = "unauthorized signer"
    DUPLICATE = "duplicate"
    POOL_FULL = "pool full"


class SubmitResult(NamedTuple):
    accepted: bool
    reason: Optional[RejectReason] = None


Admission = Callable[[Transaction], bool]


class TxPool:
    """
    Pending transactions in arrival order. Admission is serialized: each
    submit verifies sender, signature and digest before the tx is queued.
    """

    def __init__(self, group: GroupParams, registry: Dict[str, int], capacity: int = DEFAULT_POOL_CAPACITY,
                 admit: Optional[Admission] = None):
        if capacity < 1:
            raise ValueError("pool capacity must be positive")
        self.group = group
        self.registry = registry
        self.capacity = capacity
        self.admit = admit
        self._pending: Deque[Transaction] = deque()
        self._seen: Set[bytes] = set()
        self.accepted = 0
        self.rejected: Dict[RejectReason, int] = {r: 0 for r in RejectReason}

    def __len__(self) -> int:
        return len(self._pending)

    def _reject(self, reason: RejectReason) -> SubmitResult:
        self.rejected[reason] += 1
        return SubmitResult(False, reason)

    def submit(self, tx: Transaction) -> SubmitResult:
        key = self.registry.get(tx.sender)
        if key is None:
            return self._reject(RejectReason.UNREGISTERED)
        if not tx.signature_valid(self.group, key):
            return self._reject(RejectReason.BAD_SIGNATURE)
        if not tx.digest_valid():
            return self._reject(RejectReason.BAD_DIGEST)
        if self.admit is not None and not self.admit(tx):
            return self._reject(RejectReason.UNAUTHORIZED)
        tx_id = tx.tx_id
        if tx_id in self._seen:
            return self._reject(RejectReason.DUPLICATE)
        if len(self._pending) >= self.capacity:
            logger.warning(f"Transaction pool full ({self.capacity}); applying backpressure.")
            return self._reject(RejectReason.POOL_FULL)
        self._seen.add(tx_id)
        self._pending.append(tx)
        self.accepted += 1
        return SubmitResult(True)

    def drain(self, max_tx: int) -> List[Transaction]:
        """Removes and returns up to max_tx transactions in FIFO order."""
        out = []
        while self._pending and len(out) < max_tx:
            out.append(self._pending.popleft())
        return out

    def pending(self) -> List[Transaction]:
        return list(self._pending)


def submit(pool: TxPool, tx: Transaction) -> SubmitResult:
    return pool.submit(tx)


# ---------------------------------------------------------------------------
# Sealers
# ---------------------------------------------------------------------------


def _next_timestamp(chain: Chain, now_ms: float) -> int:
    tip = chain.tip
    return max(int(now_ms), tip.header.timestamp_ms + 1) if tip is not None else int(now_ms)


def poa_seal(chain: Chain, pool: TxPool, round_: int, sealer_id: str, key: KeyPair, now_ms: float,
             max_tx: int = DEFAULT_MAX_TX) -> Block:
    """
    Seals the next block for `round_` with up to max_tx pooled transactions.
    Only validators[round mod k] may seal; an empty pool yields an empty block.
    """
    if chain.consensus != Consensus.POA:
        raise ValueError("poa_seal requires a PoA chain")
    expected = chain.leader(round_)
    if sealer_id != expected:
        raise LeaderError(f"'{sealer_id}' is not the leader of round {round_} (expected '{expected}')")
    if chain.registry.get(sealer_id) != key.y:
        raise LeaderError(f"key does not match the registered key of '{sealer_id}'")
    tip = chain.tip
    if tip is not None and isinstance(tip.header.seal, PoaSeal) and round_ <= tip.header.seal.round:
        raise ValueError(f"round {round_} does not advance past the tip's round {tip.header.seal.round}")

    txs = pool.drain(max_tx)
    unsigned = BlockHeader(
        index=len(chain.blocks),
        prev_hash=tip.header.hash() if tip is not None else ZERO_DIGEST,
        tx_root=tx_root(txs),
        timestamp_ms=_next_timestamp(chain, now_ms),
        sealer_id=sealer_id,
        seal=PoaSeal(round=round_, signature=b""),
    )
    signature = schnorr_sign(chain.group, key, _poa_signing_bytes(unsigned.unsealed_bytes(), round_))
    header = unsigned.model_copy(update={"seal": PoaSeal(round=round_, signature=signature)})
    return Block(header=header, transactions=txs)


def pow_target(difficulty: int) -> int:
    return 2 ** 256 // difficulty


def pow_seal(chain: Chain, txs: Sequence[Transaction], difficulty: int, seed: int, now_ms: float,
             sealer_id: str = "miner") -> Block:
    """
    Searches nonces (starting from a seed-derived value) until the header hash,
    read as a 256-bit big-endian integer, is below 2^256 / difficulty.
    The attempt count is recorded on the block.
    """
    if difficulty < 1:
        raise ValueError("difficulty must be >= 1")
    tip = chain.tip
    txs = list(txs)
    template = BlockHeader(
        index=len(chain.blocks),
        prev_hash=tip.header.hash() if tip is not None else ZERO_DIGEST,
        tx_root=tx_root(txs),
        timestamp_ms=_next_timestamp(chain, now_ms),
        sealer_id=sealer_id,
        seal=PowSeal(difficulty=difficulty, nonce=0),
    )
    prefix = template.unsealed_bytes() + u8(POW_TAG) + u64(difficulty)
    target = pow_target(difficulty)
    nonce = derive_seed(seed, "pow-nonce")
    attempts = 0
    while True:
        attempts += 1
        if int.from_bytes(hash_bytes(prefix + u64(nonce)), "big") < target:
            break
        nonce = (nonce + 1) % 2 ** 64
    header = template.model_copy(update={"seal": PowSeal(difficulty=difficulty, nonce=nonce)})
    return Block(header=header, transactions=txs, attempts=attempts)


def genesis_poa(chain: Chain, key: KeyPair, timestamp_ms: int = 0) -> Block:
    """Empty round-0 block sealed by validators[0]; appended to `chain`."""
    block = poa_seal(chain, TxPool(chain.group, chain.registry), 0, chain.leader(0), key, timestamp_ms)
    chain.append(block)
    return block


def genesis_pow(chain: Chain, seed: int, timestamp_ms: int = 0) -> Block:
    block = pow_seal(chain, [], chain.difficulty, derive_seed(seed, "genesis"), timestamp_ms)
    chain.append(block)
    return block


# ---------------------------------------------------------------------------
# Binary chain format
# ---------------------------------------------------------------------------


def _minimal_int_bytes(value: int) -> bytes:
    return int_to_bytes(value, max(1, (value.bit_length() + 7) // 8))


def _read_minimal_int(reader: ByteReader) -> int:
    raw = reader.length_prefixed()
    if not raw or (len(raw) > 1 and raw[0] == 0):
        raise ValueError("non-canonical integer encoding")
    return int.from_bytes(raw, "big")


def encode_chain(chain: Chain) -> bytes:
    parts = [
        CHAIN_MAGIC,
        u8(1 if chain.consensus == Consensus.POA else 2),
        u64(chain.difficulty or 0),
        chain.group.to_bytes(),
        u32(len(chain.validators)),
    ]
    parts.extend(length_prefixed(v.encode("utf-8")) for v in chain.validators)
    parts.append(u32(len(chain.registry)))
    for principal_id in sorted(chain.registry):
        parts.append(length_prefixed(principal_id.encode("utf-8")))
        parts.append(length_prefixed(_minimal_int_bytes(chain.registry[principal_id])))
    parts.append(u32(len(chain.blocks)))
    parts.extend(length_prefixed(b.to_bytes()) for b in chain.blocks)
    return b"".join(parts)


def decode_chain(data: bytes) -> Chain:
    """Strict decoder; any malformed or non-canonical input raises ChainDecodeError."""
    reader = ByteReader(data)
    try:
        if reader.take(len(CHAIN_MAGIC)) != CHAIN_MAGIC:
            raise ValueError("bad magic")
        consensus_code = reader.u8()
        if consensus_code not in (1, 2):
            raise ValueError(f"unknown consensus code {consensus_code}")
        difficulty = reader.u64()
        group = GroupParams.from_reader(reader)
        validators = [reader.length_prefixed().decode("utf-8") for _ in range(reader.u32())]
        registry: Dict[str, int] = {}
        for _ in range(reader.u32()):
            principal_id = reader.length_prefixed().decode("utf-8")
            if principal_id in registry or (registry and principal_id < max(registry)):
                raise ValueError("registry entries must be unique and sorted")
            registry[principal_id] = _read_minimal_int(reader)
        consensus = Consensus.POA if consensus_code == 1 else Consensus.POW
        if consensus == Consensus.POA and difficulty != 0:
            raise ValueError("PoA chains carry difficulty 0")
        chain = Chain(group, validators, registry, consensus, difficulty if consensus == Consensus.POW else None)
        count = reader.u32()
    except ValueError as e:
        raise ChainDecodeError(None, str(e)) from e

    for i in range(count):
        try:
            block = Block.from_bytes(reader.length_prefixed())
        except ValueError as e:
            raise ChainDecodeError(i, str(e)) from e
        chain.blocks.append(block)
    if reader.remaining():
        raise ChainDecodeError(None, f"{reader.remaining()} trailing bytes after last block")
    return chain


def chain_summary(chain: Chain) -> Dict:
    """Human-readable view of the chain for the JSON dump."""
    blocks = []
    for b in chain.blocks:
        h = b.header
        seal = {"type": "poa", "round": h.seal.round, "signature": h.seal.signature.hex()} \
            if isinstance(h.seal, PoaSeal) else {"type": "pow", "difficulty": h.seal.difficulty, "nonce": h.seal.nonce}
        blocks.append({
            "index": h.index,
            "hash": h.hash().hex(),
            "prev_hash": h.prev_hash.hex(),
            "tx_root": h.tx_root.hex(),
            "timestamp_ms": h.timestamp_ms,
            "sealer_id": h.sealer_id,
            "seal": seal,
            "transactions": [
                {
                    "id": tx.tx_id.hex(),
                    "kind": tx.kind.value,
                    "sender": tx.sender,
                    "created_ms": tx.created_ms,
                    "payload_digest": tx.payload_digest.hex(),
                    "payload_bytes": len(tx.payload),
                }
                for tx in b.transactions
            ],
        })
    return {
        "consensus": chain.consensus.value,
        "difficulty": chain.difficulty,
        "validators": chain.validators,
        "registry": {k: hex(v) for k, v in sorted(chain.registry.items())},
        "blocks": blocks,
    }
