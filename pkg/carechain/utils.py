import hashlib
import logging
import random
import struct
from typing import Callable, Union

logger = logging.getLogger(__name__)

SeedLabel = Union[str, int]


def derive_seed(seed: int, *labels: SeedLabel) -> int:
    """
    Derives an independent 64-bit sub-seed from a root seed and a label path.

    Every component that needs randomness (a patient stream, the netsim jitter
    source, a hospital's DP noise for one round...) gets its own derived seed,
    so adding draws in one component never shifts the draws of another.
    """
    material = "/".join([str(seed)] + [str(label) for label in labels]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "big")


def seeded_rng(seed: int, *labels: SeedLabel) -> random.Random:
    """Returns a `random.Random` seeded from `derive_seed(seed, *labels)`."""
    return random.Random(derive_seed(seed, *labels))


def seeded_randfunc(seed: int, *labels: SeedLabel) -> Callable[[int], bytes]:
    """
    Byte source with the `randfunc(n) -> bytes` signature pycryptodome expects.
    Makes prime generation reproducible from a seed.
    """
    return seeded_rng(seed, *labels).randbytes


# ---------------------------------------------------------------------------
# Canonical byte encodings (big-endian, length-prefixed)
# ---------------------------------------------------------------------------


def u8(value: int) -> bytes:
    return struct.pack(">B", value)


def u32(value: int) -> bytes:
    return struct.pack(">I", value)


def u64(value: int) -> bytes:
    return struct.pack(">Q", value)


def int_to_bytes(value: int, width: int) -> bytes:
    return value.to_bytes(width, "big")


def length_prefixed(data: bytes) -> bytes:
    return u32(len(data)) + data


class ByteReader:
    """Strict cursor over a byte string; every read raises ValueError on short input."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ValueError(f"truncated input: wanted {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return struct.unpack(">B", self.take(1))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def length_prefixed(self) -> bytes:
        return self.take(self.u32())

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def expect_end(self) -> None:
        if self.remaining():
            raise ValueError(f"{self.remaining()} trailing bytes after record")
