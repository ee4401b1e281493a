"""
Desk-scale cryptographic primitives: SHA-256 digests and Merkle roots,
Schnorr identification and signatures over a prime-order subgroup,
Paillier additive homomorphic encryption, and Diffie-Hellman channel keys
with hash-keystream framing.

Not production cryptography: no constant-time arithmetic, no padding schemes.
Every operation is deterministic given its explicit seed or rng argument.
"""

import functools
import hashlib
import hmac
import logging
import math
import random
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

from Crypto.Util import number

from carechain.utils import (
    ByteReader,
    int_to_bytes,
    length_prefixed,
    seeded_randfunc,
    u32,
    u64,
)

logger = logging.getLogger(__name__)

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)

# (p bits, q bits) for the Schnorr/DH group.
GROUP_PROFILES = {
    "default": (512, 256),
    "test": (64, 32),
}
GROUP_SEED = 20240917

PAILLIER_MIN_BITS = 64
PAILLIER_DEFAULT_BITS = 512


class AuthenticationError(ValueError):
    """Frame tag did not verify under the channel key."""


class FrameDecodeError(ValueError):
    """Frame bytes are structurally malformed (before any tag check)."""


# ---------------------------------------------------------------------------
# Hashing
# ---------------------------------------------------------------------------


def hash_bytes(data: bytes) -> bytes:
    """SHA-256 of `data` as a 32-byte digest."""
    return hashlib.sha256(data).digest()


def merkle_root(digests: Sequence[bytes]) -> bytes:
    """
    Binary Merkle root over leaf digests. An odd node at any level is paired
    with itself; the empty list hashes to SHA-256 of the empty string.
    """
    if not digests:
        return hash_bytes(b"")
    for d in digests:
        if len(d) != DIGEST_SIZE:
            raise ValueError(f"Merkle leaves must be {DIGEST_SIZE}-byte digests, got {len(d)} bytes")

    level: List[bytes] = list(digests)
    while True:
        next_level = []
        for i in range(0, len(level), 2):
            left = level[i]
            right = level[i + 1] if i + 1 < len(level) else left
            next_level.append(hash_bytes(left + right))
        level = next_level
        if len(level) == 1:
            return level[0]


# ---------------------------------------------------------------------------
# Prime-order group
# ---------------------------------------------------------------------------


class GroupParams(NamedTuple):
    """Order-q subgroup of Z_p^* generated by g."""
    p: int
    q: int
    g: int

    @property
    def p_width(self) -> int:
        return (self.p.bit_length() + 7) // 8

    @property
    def q_width(self) -> int:
        return (self.q.bit_length() + 7) // 8

    def encode_element(self, value: int) -> bytes:
        return int_to_bytes(value, self.p_width)

    def encode_scalar(self, value: int) -> bytes:
        return int_to_bytes(value, self.q_width)

    def contains(self, value: int) -> bool:
        """True iff 1 < value < p and value lies in the order-q subgroup."""
        return 1 < value < self.p and pow(value, self.q, self.p) == 1

    def to_bytes(self) -> bytes:
        return b"".join(length_prefixed(int_to_bytes(v, (v.bit_length() + 7) // 8)) for v in (self.p, self.q, self.g))

    @classmethod
    def from_reader(cls, reader: ByteReader) -> "GroupParams":
        p, q, g = (int.from_bytes(reader.length_prefixed(), "big") for _ in range(3))
        group = cls(p=p, q=q, g=g)
        check_group(group)
        return group


def check_group(group: GroupParams) -> None:
    """Raises ValueError unless g generates a subgroup of prime order q dividing p-1."""
    p, q, g = group
    if (p - 1) % q != 0:
        raise ValueError("q does not divide p-1")
    if g == 1 or not 1 < g < p or pow(g, q, p) != 1:
        raise ValueError("g does not generate the order-q subgroup")
    if not number.isPrime(q):
        raise ValueError("q is not prime")


def generate_group(p_bits: int, q_bits: int, seed: int = GROUP_SEED) -> GroupParams:
    """Deterministically generates p = k*q + 1 with q prime, then a subgroup generator."""
    if q_bits < 16 or p_bits <= q_bits + 1:
        raise ValueError(f"unsupported group size p={p_bits} bits, q={q_bits} bits")
    randfunc = seeded_randfunc(seed, "group", p_bits, q_bits)
    q = number.getPrime(q_bits, randfunc=randfunc)
    k_bits = p_bits - q_bits
    while True:
        k = number.getRandomNBitInteger(k_bits, randfunc=randfunc) & ~1
        p = k * q + 1
        if p.bit_length() == p_bits and number.isPrime(p, randfunc=randfunc):
            break
    h = 2
    while True:
        g = pow(h, (p - 1) // q, p)
        if g != 1:
            break
        h += 1
    group = GroupParams(p=p, q=q, g=g)
    logger.debug(f"Generated {p_bits}/{q_bits}-bit Schnorr group.")
    return group


@functools.lru_cache(maxsize=None)
def group_params(profile: str = "default") -> GroupParams:
    """Cached group for a named size profile (see GROUP_PROFILES)."""
    if profile not in GROUP_PROFILES:
        raise ValueError(f"Unknown group profile '{profile}'. Known: {sorted(GROUP_PROFILES)}")
    p_bits, q_bits = GROUP_PROFILES[profile]
    return generate_group(p_bits, q_bits)


# ---------------------------------------------------------------------------
# Schnorr identification and signatures
# ---------------------------------------------------------------------------


class KeyPair(NamedTuple):
    x: int
    y: int


class ProofTranscript(NamedTuple):
    """Non-interactive Schnorr transcript: t = g^k, c = H(g||y||t||context) mod q, s = k + c*x mod q."""
    t: int
    c: int
    s: int
    context: bytes

    def to_bytes(self, group: GroupParams) -> bytes:
        return (
            group.encode_element(self.t)
            + group.encode_scalar(self.c)
            + group.encode_scalar(self.s)
            + length_prefixed(self.context)
        )

    @classmethod
    def from_bytes(cls, group: GroupParams, data: bytes) -> "ProofTranscript":
        reader = ByteReader(data)
        t = int.from_bytes(reader.take(group.p_width), "big")
        c = int.from_bytes(reader.take(group.q_width), "big")
        s = int.from_bytes(reader.take(group.q_width), "big")
        context = reader.length_prefixed()
        reader.expect_end()
        return cls(t=t, c=c, s=s, context=context)


def keygen(group: GroupParams, rng: random.Random) -> KeyPair:
    x = rng.randrange(1, group.q)
    return KeyPair(x=x, y=pow(group.g, x, group.p))


def _seed_bytes(nonce_seed: Union[int, str, bytes]) -> bytes:
    if isinstance(nonce_seed, bytes):
        return nonce_seed
    return str(nonce_seed).encode("utf-8")


def challenge(group: GroupParams, y: int, t: int, context: bytes) -> int:
    material = (
        group.encode_element(group.g)
        + group.encode_element(y)
        + group.encode_element(t)
        + length_prefixed(context)
    )
    return int.from_bytes(hash_bytes(material), "big") % group.q


def schnorr_prove(group: GroupParams, kp: KeyPair, context: bytes, nonce_seed: Union[int, str, bytes]) -> ProofTranscript:
    """Proves knowledge of kp.x bound to `context`. The nonce is derived from (nonce_seed, x, context)."""
    if not context:
        raise ValueError("Proof context must be non-empty.")
    if not 1 <= kp.x < group.q:
        raise ValueError("Secret scalar out of range [1, q-1].")
    nonce_material = b"carechain/nonce" + length_prefixed(_seed_bytes(nonce_seed)) + group.encode_scalar(kp.x) + length_prefixed(context)
    k = int.from_bytes(hash_bytes(nonce_material), "big") % (group.q - 1) + 1
    t = pow(group.g, k, group.p)
    c = challenge(group, kp.y, t, context)
    s = (k + c * kp.x) % group.q
    return ProofTranscript(t=t, c=c, s=s, context=context)


def schnorr_verify(group: GroupParams, y: int, transcript: ProofTranscript, context: Optional[bytes] = None) -> bool:
    """
    Checks g^s == t * y^c (mod p) with c recomputed from the transcript context.
    When `context` is given the transcript must also carry exactly that context.
    """
    t, c, s, ctx = transcript
    if context is not None and ctx != context:
        return False
    if not ctx:
        return False
    if not (0 <= c < group.q and 0 <= s < group.q):
        return False
    if not group.contains(t) or not group.contains(y):
        return False
    if c != challenge(group, y, t, ctx):
        return False
    return pow(group.g, s, group.p) == (t * pow(y, c, group.p)) % group.p


def signature_size(group: GroupParams) -> int:
    return group.p_width + 2 * group.q_width


def schnorr_sign(group: GroupParams, kp: KeyPair, message: bytes) -> bytes:
    """Fiat-Shamir signature: the proof transcript with context = message, encoded t||c||s. Messages must be non-empty."""
    transcript = schnorr_prove(group, kp, message, nonce_seed=b"carechain/sign")
    return group.encode_element(transcript.t) + group.encode_scalar(transcript.c) + group.encode_scalar(transcript.s)


def verify_sig(group: GroupParams, y: int, message: bytes, signature: bytes) -> bool:
    """Accepts iff `signature` decodes to a transcript that verifies for context = message."""
    if len(signature) != signature_size(group):
        return False
    reader = ByteReader(signature)
    t = int.from_bytes(reader.take(group.p_width), "big")
    c = int.from_bytes(reader.take(group.q_width), "big")
    s = int.from_bytes(reader.take(group.q_width), "big")
    return schnorr_verify(group, y, ProofTranscript(t=t, c=c, s=s, context=message))


# ---------------------------------------------------------------------------
# Paillier
# ---------------------------------------------------------------------------


class PaillierPublicKey:
    """Public key (n, g = n + 1)."""

    def __init__(self, n: int):
        self.n = n
        self.nsquare = n * n
        self.g = n + 1

    def __repr__(self) -> str:
        return f"<PaillierPublicKey {hash_bytes(int_to_bytes(self.n, (self.n.bit_length() + 7) // 8)).hex()[:10]}>"

    def __eq__(self, other) -> bool:
        return isinstance(other, PaillierPublicKey) and self.n == other.n

    def __hash__(self) -> int:
        return hash(self.n)

    def raw_encrypt(self, m: int, r: int) -> int:
        if not 0 <= m < self.n:
            raise ValueError("Plaintext out of range [0, n).")
        if math.gcd(r, self.n) != 1:
            raise ValueError("Randomness r must be coprime with n.")
        # g^m = (1 + n)^m = 1 + m*n (mod n^2)
        gm = (1 + m * self.n) % self.nsquare
        return gm * pow(r, self.n, self.nsquare) % self.nsquare

    def encrypt(self, m: int, rng: random.Random) -> "EncryptedNumber":
        """Encrypts m in [0, n); r is redrawn from `rng` until coprime with n."""
        if not 0 <= m < self.n:
            raise ValueError("Plaintext out of range [0, n).")
        while True:
            r = rng.randrange(1, self.n)
            if math.gcd(r, self.n) == 1:
                break
        return EncryptedNumber(self, self.raw_encrypt(m, r))


class PaillierPrivateKey:
    def __init__(self, public_key: PaillierPublicKey, p: int, q: int):
        if p == q:
            raise ValueError("Paillier primes must be distinct.")
        self.public_key = public_key
        self.p = p
        self.q = q
        self.lam = (p - 1) * (q - 1) // math.gcd(p - 1, q - 1)
        self.mu = number.inverse(self.lam, public_key.n)

    def decrypt(self, encrypted: "EncryptedNumber") -> int:
        if encrypted.public_key != self.public_key:
            raise ValueError("Ciphertext was encrypted under a different public key.")
        return self.raw_decrypt(encrypted.ciphertext)

    def raw_decrypt(self, ciphertext: int) -> int:
        n = self.public_key.n
        x = pow(ciphertext, self.lam, self.public_key.nsquare)
        return ((x - 1) // n) * self.mu % n


class EncryptedNumber:
    """A Paillier ciphertext bound to its public key."""

    def __init__(self, public_key: PaillierPublicKey, ciphertext: int):
        self.public_key = public_key
        self.ciphertext = ciphertext

    def __add__(self, other: "EncryptedNumber") -> "EncryptedNumber":
        return add(self, other)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EncryptedNumber)
            and self.public_key == other.public_key
            and self.ciphertext == other.ciphertext
        )

    def __hash__(self) -> int:
        return hash((self.public_key.n, self.ciphertext))

    def to_bytes(self) -> bytes:
        return int_to_bytes(self.ciphertext, (self.public_key.nsquare.bit_length() + 7) // 8)


def paillier_keygen(bits: int = PAILLIER_DEFAULT_BITS, seed: int = 0) -> Tuple[PaillierPublicKey, PaillierPrivateKey]:
    if bits < PAILLIER_MIN_BITS:
        raise ValueError(f"Paillier modulus must have at least {PAILLIER_MIN_BITS} bits, got {bits}.")
    randfunc = seeded_randfunc(seed, "paillier", bits)
    while True:
        p = number.getPrime(bits // 2, randfunc=randfunc)
        q = number.getPrime(bits - bits // 2, randfunc=randfunc)
        n = p * q
        if p != q and math.gcd(n, (p - 1) * (q - 1)) == 1:
            break
    public_key = PaillierPublicKey(n)
    return public_key, PaillierPrivateKey(public_key, p, q)


def add(c1: EncryptedNumber, c2: EncryptedNumber) -> EncryptedNumber:
    """Homomorphic addition: Dec(add(Enc(a), Enc(b))) = a + b mod n."""
    if c1.public_key != c2.public_key:
        raise ValueError("Cannot add ciphertexts under different public keys.")
    return EncryptedNumber(c1.public_key, c1.ciphertext * c2.ciphertext % c1.public_key.nsquare)


def smul(c: EncryptedNumber, k: int) -> EncryptedNumber:
    """Homomorphic scalar multiplication by a non-negative integer k."""
    if k < 0:
        raise ValueError("Scalar must be non-negative; encode negatives modulo n first.")
    return EncryptedNumber(c.public_key, pow(c.ciphertext, k, c.public_key.nsquare))


# ---------------------------------------------------------------------------
# Diffie-Hellman and framing
# ---------------------------------------------------------------------------

FRAME_HEADER_SIZE = 12  # counter u64 + ciphertext length u32


def dh_derive(group: GroupParams, my_secret: int, peer_public: int) -> bytes:
    """Shared key = SHA-256(peer_public^my_secret mod p)."""
    if not group.contains(peer_public):
        raise ValueError("Peer public value is not an element of the group.")
    return hash_bytes(group.encode_element(pow(peer_public, my_secret, group.p)))


def _keystream(key: bytes, counter: int, length: int) -> bytes:
    blocks = []
    for i in range((length + DIGEST_SIZE - 1) // DIGEST_SIZE):
        blocks.append(hash_bytes(key + u64(counter) + u32(i)))
    return b"".join(blocks)[:length]


def _tag(key: bytes, counter: int, ciphertext: bytes) -> bytes:
    return hash_bytes(key + u64(counter) + ciphertext)


def seal(key: bytes, plaintext: bytes, counter: int) -> bytes:
    """Frame layout: counter u64 || len u32 || ciphertext || tag (32 bytes)."""
    if len(key) != DIGEST_SIZE:
        raise ValueError(f"Channel key must be {DIGEST_SIZE} bytes.")
    if not 0 <= counter < 2 ** 64:
        raise ValueError("Frame counter must fit in 64 bits.")
    stream = _keystream(key, counter, len(plaintext))
    ciphertext = bytes(a ^ b for a, b in zip(plaintext, stream))
    return u64(counter) + u32(len(ciphertext)) + ciphertext + _tag(key, counter, ciphertext)


def open_frame(key: bytes, frame: bytes) -> bytes:
    """Verifies the tag and decrypts. Raises FrameDecodeError or AuthenticationError."""
    if len(key) != DIGEST_SIZE:
        raise ValueError(f"Channel key must be {DIGEST_SIZE} bytes.")
    if len(frame) < FRAME_HEADER_SIZE + DIGEST_SIZE:
        raise FrameDecodeError(f"Frame too short ({len(frame)} bytes).")
    reader = ByteReader(frame)
    counter = reader.u64()
    length = reader.u32()
    if reader.remaining() != length + DIGEST_SIZE:
        raise FrameDecodeError(f"Frame length field {length} does not match payload size {reader.remaining() - DIGEST_SIZE}.")
    ciphertext = reader.take(length)
    tag = reader.take(DIGEST_SIZE)
    if not hmac.compare_digest(tag, _tag(key, counter, ciphertext)):
        raise AuthenticationError("Frame authentication tag mismatch.")
    stream = _keystream(key, counter, length)
    return bytes(a ^ b for a, b in zip(ciphertext, stream))
