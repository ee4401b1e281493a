"""
Deterministic discrete-event kernel: one global clock, one event heap ordered
by (fire_ms, seq), point-to-point links with base/jitter/serialization delay,
and per-node energy counters.
"""

import heapq
import logging
import math
import random
from enum import Enum
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from carechain.utils import derive_seed

logger = logging.getLogger(__name__)

BYTES_PER_KB = 1000


class LinkClass(str, Enum):
    LAN = "LAN"
    WAN = "WAN"


class Link(BaseModel):
    model_config = ConfigDict(frozen=True)

    src: str
    dst: str
    base_ms: float = Field(..., ge=0, description="Propagation delay.")
    jitter_ms: float = Field(0.0, ge=0, description="Half-width of the uniform jitter.")
    bandwidth_kbps: float = Field(..., gt=0, description="Serialization rate; 1 kbps moves 1 bit per ms.")
    link_class: LinkClass = LinkClass.LAN

    @model_validator(mode="after")
    def check_jitter_within_base(self):
        if self.jitter_ms > self.base_ms:
            raise ValueError(f"jitter_ms {self.jitter_ms} exceeds base_ms {self.base_ms} on {self.src}->{self.dst}")
        return self

    def serialization_ms(self, size_bytes: int) -> float:
        return size_bytes * 8 / self.bandwidth_kbps


class CounterKind(str, Enum):
    CPU_MS = "cpu_ms"
    LAN_TX_BYTES = "lan_tx_bytes"
    LAN_RX_BYTES = "lan_rx_bytes"
    WAN_TX_BYTES = "wan_tx_bytes"
    WAN_RX_BYTES = "wan_rx_bytes"
    HASH_ATTEMPTS = "hash_attempts"


class EnergyCosts(BaseModel):
    """Joule-equivalent cost constants."""
    model_config = ConfigDict(frozen=True)

    cpu_j_per_ms: float = Field(0.01, ge=0)
    lan_j_per_kb: float = Field(0.1, ge=0)
    wan_j_per_kb: float = Field(0.5, ge=0)
    hash_j_per_attempt: float = Field(0.001, ge=0)

    def unit_cost(self, kind: CounterKind) -> float:
        if kind == CounterKind.CPU_MS:
            return self.cpu_j_per_ms
        if kind in (CounterKind.LAN_TX_BYTES, CounterKind.LAN_RX_BYTES):
            return self.lan_j_per_kb / BYTES_PER_KB
        if kind in (CounterKind.WAN_TX_BYTES, CounterKind.WAN_RX_BYTES):
            return self.wan_j_per_kb / BYTES_PER_KB
        return self.hash_j_per_attempt


class EnergyLedger:
    """Per-node monotone counters; energy is the dot product with the cost constants."""

    def __init__(self, costs: Optional[EnergyCosts] = None):
        self.costs = costs or EnergyCosts()
        self.counters: Dict[str, Dict[CounterKind, float]] = {}

    def charge(self, node: str, kind: CounterKind, amount: float) -> None:
        if amount < 0 or not math.isfinite(amount):
            raise ValueError(f"Charge amount must be a finite non-negative number, got {amount}.")
        node_counters = self.counters.setdefault(node, {k: 0 for k in CounterKind})
        node_counters[CounterKind(kind)] += amount

    def counter(self, node: str, kind: CounterKind) -> float:
        return self.counters.get(node, {}).get(CounterKind(kind), 0)

    def energy_total(self, node: Optional[str] = None) -> float:
        """Energy of one node, or of all nodes when `node` is None."""
        nodes = [node] if node is not None else sorted(self.counters)
        total = 0.0
        for n in nodes:
            for kind, value in self.counters.get(n, {}).items():
                total += value * self.costs.unit_cost(kind)
        return total

    def per_node(self) -> Dict[str, float]:
        return {n: self.energy_total(n) for n in sorted(self.counters)}

    def totals_by_counter(self) -> Dict[str, float]:
        totals = {k.value: 0.0 for k in CounterKind}
        for n in sorted(self.counters):
            for kind, value in self.counters[n].items():
                totals[kind.value] += value
        return totals


def charge(ledger: EnergyLedger, node: str, kind: CounterKind, amount: float) -> None:
    ledger.charge(node, kind, amount)


def energy_total(ledger: EnergyLedger, node: Optional[str] = None) -> float:
    return ledger.energy_total(node)


class SimEvent(NamedTuple):
    fire_ms: float
    seq: int
    target: str
    kind: str
    payload: Any
    src: Optional[str]  # sender for link deliveries, None for local timers


Handler = Callable[[SimEvent], None]


class Simulator:
    """
    Single-threaded event kernel. Handlers run in strict (fire_ms, seq) order
    and may schedule further events; the clock never moves backwards.
    """

    def __init__(self, seed: int, energy_costs: Optional[EnergyCosts] = None, trace: bool = False):
        self.seed = seed
        self.now_ms = 0.0
        self.rng = random.Random(derive_seed(seed, "netsim"))
        self.energy = EnergyLedger(energy_costs)
        self._queue: List[Tuple[float, int, SimEvent]] = []
        self._seq = 0
        self._handlers: Dict[str, Handler] = {}
        self._links: Dict[Tuple[str, str], Link] = {}
        self.fired = 0
        self.messages_sent = 0
        self.messages_delivered = 0
        self.trace_enabled = trace
        self.trace: List[Dict[str, Any]] = []

    # --- topology ---------------------------------------------------------

    def register(self, node_id: str, handler: Handler) -> None:
        if node_id in self._handlers:
            raise ValueError(f"Node '{node_id}' is already registered.")
        self._handlers[node_id] = handler

    def has_node(self, node_id: str) -> bool:
        return node_id in self._handlers

    def add_link(self, link: Link) -> None:
        self._links[(link.src, link.dst)] = link

    def link(self, src: str, dst: str) -> Link:
        try:
            return self._links[(src, dst)]
        except KeyError:
            raise ValueError(f"No link from '{src}' to '{dst}'.") from None

    def has_link(self, src: str, dst: str) -> bool:
        return (src, dst) in self._links

    # --- scheduling -------------------------------------------------------

    def schedule(self, delay_ms: float, target: str, kind: str, payload: Any = None) -> int:
        """Schedules a local event `delay_ms` from now; returns its sequence number."""
        if delay_ms < 0 or not math.isfinite(delay_ms):
            raise ValueError(f"Cannot schedule into the past (delay {delay_ms} ms).")
        return self._push(self.now_ms + delay_ms, target, kind, payload, None)

    def schedule_at(self, fire_ms: float, target: str, kind: str, payload: Any = None) -> int:
        if fire_ms < self.now_ms:
            raise ValueError(f"Cannot schedule at {fire_ms} ms, clock is at {self.now_ms} ms.")
        return self._push(fire_ms, target, kind, payload, None)

    def _push(self, fire_ms: float, target: str, kind: str, payload: Any, src: Optional[str]) -> int:
        if target not in self._handlers:
            raise ValueError(f"Unknown target node '{target}'.")
        seq = self._seq
        self._seq += 1
        event = SimEvent(fire_ms=fire_ms, seq=seq, target=target, kind=kind, payload=payload, src=src)
        heapq.heappush(self._queue, (fire_ms, seq, event))
        return seq

    def send(self, src: str, dst: str, size_bytes: int, kind: str, payload: Any = None,
             after_ms: float = 0.0) -> int:
        """
        Delivers `payload` to `dst` after base + U(-jitter, +jitter) + size*8/bandwidth ms,
        counted from `after_ms` past now (local processing before the message leaves).
        Transmitted and received bytes are charged to the endpoints by link class.
        """
        link = self.link(src, dst)
        if size_bytes < 0:
            raise ValueError("Message size must be non-negative.")
        if after_ms < 0 or not math.isfinite(after_ms):
            raise ValueError(f"Departure offset must be a finite non-negative number, got {after_ms}.")
        jitter = self.rng.uniform(-link.jitter_ms, link.jitter_ms) if link.jitter_ms > 0 else 0.0
        delay = link.base_ms + jitter + link.serialization_ms(size_bytes)
        if link.link_class == LinkClass.LAN:
            self.energy.charge(src, CounterKind.LAN_TX_BYTES, size_bytes)
            self.energy.charge(dst, CounterKind.LAN_RX_BYTES, size_bytes)
        else:
            self.energy.charge(src, CounterKind.WAN_TX_BYTES, size_bytes)
            self.energy.charge(dst, CounterKind.WAN_RX_BYTES, size_bytes)
        self.messages_sent += 1
        return self._push(self.now_ms + after_ms + delay, dst, kind, payload, src)

    def cpu(self, node: str, ms: float) -> float:
        """Charges `ms` of processing to `node` and returns it, for use as a scheduling delay."""
        self.energy.charge(node, CounterKind.CPU_MS, ms)
        return ms

    # --- execution --------------------------------------------------------

    def pending(self) -> int:
        return len(self._queue)

    def next_fire_ms(self) -> Optional[float]:
        return self._queue[0][0] if self._queue else None

    def run_until(self, t_ms: float) -> int:
        """Fires every event with fire_ms <= t_ms; returns the number fired in this call."""
        fired = 0
        while self._queue and self._queue[0][0] <= t_ms:
            _, _, event = heapq.heappop(self._queue)
            self.now_ms = event.fire_ms
            if event.src is not None:
                self.messages_delivered += 1
            if self.trace_enabled:
                self.trace.append({
                    "fire_ms": round(event.fire_ms, 6),
                    "seq": event.seq,
                    "src": event.src,
                    "target": event.target,
                    "kind": event.kind,
                })
            self._handlers[event.target](event)
            fired += 1
        self.now_ms = max(self.now_ms, t_ms)
        self.fired += fired
        return fired


def schedule(sim: Simulator, delay_ms: float, target: str, kind: str, payload: Any = None) -> int:
    return sim.schedule(delay_ms, target, kind, payload)


def run_until(sim: Simulator, t_ms: float) -> int:
    return sim.run_until(t_ms)


def send(sim: Simulator, src: str, dst: str, size_bytes: int, kind: str, payload: Any = None,
         after_ms: float = 0.0) -> int:
    return sim.send(src, dst, size_bytes, kind, payload, after_ms)
