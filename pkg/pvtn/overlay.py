"""
Overlay Module for PVTN

Deterministic discrete-event model of the hierarchical overlay:
- SimClock / SimEvent / Simulator: the event loop, ordered by (tick, insertion)
- RouteMode / route: the four ways a join request reaches its manager
- Trace: the line-oriented audit trail every run produces

The overlay only ever looks at envelope metadata (recipient digest and
trace id). Node addresses are node names.
"""

import difflib
import hashlib
import heapq
import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional

from pvtn.errors import DeliveryFailed, NonTermination
from pvtn.messaging import Envelope

DEFAULT_HOP_LATENCY = 1


class EventKind(str, Enum):
    DELIVER = "deliver"
    TIMEOUT = "timeout"
    INJECT = "inject"


class RouteMode(str, Enum):
    OVERLAY_LOOKUP = "overlay_lookup"
    DIRECT_IP = "direct_ip"
    GATEWAY_RELAY = "gateway_relay"
    VIRGO_ID_PATH = "virgo_id_path"


@dataclass
class SimClock:
    tick: int = 0

    def advance(self, to: int) -> None:
        if to < self.tick:
            raise ValueError(f"clock cannot move back from {self.tick} to {to}")
        self.tick = to


@dataclass
class SimEvent:
    at: int
    seq: int
    kind: EventKind
    target: str = ""
    envelope: Optional[Envelope] = None
    source: str = ""
    path: tuple = ()
    label: str = ""
    action: Optional[Callable[[], None]] = None
    cancelled: bool = False


@dataclass(frozen=True)
class TraceLine:
    tick: int
    kind: str
    src: str = ""
    dst: str = ""
    msg_type: str = ""
    trace_id: str = ""
    detail: str = ""

    def render(self) -> str:
        fields = [str(self.tick), self.kind, self.src, self.dst, self.msg_type, self.trace_id, self.detail]
        return " | ".join((f or "-").replace("|", "/").replace("\n", " ") for f in fields)

    @classmethod
    def parse(cls, line: str) -> "TraceLine":
        parts = [p.strip() for p in line.split(" | ")]
        if len(parts) != 7:
            raise ValueError(f"trace line needs 7 fields: {line!r}")
        values = ["" if p == "-" else p for p in parts]
        return cls(int(values[0]), *values[1:])


class Trace:
    """Ordered trace of a run; renders to byte-stable text."""

    def __init__(self, lines: Optional[Iterable[TraceLine]] = None):
        self.lines: list = list(lines or [])

    def add(self, tick: int, kind: str, src: str = "", dst: str = "", msg_type: str = "",
            trace_id: str = "", detail: str = "") -> TraceLine:
        line = TraceLine(tick, kind, src, dst, msg_type, trace_id, detail)
        self.lines.append(line)
        return line

    def __len__(self) -> int:
        return len(self.lines)

    def __iter__(self):
        return iter(self.lines)

    def select(self, kind: Optional[str] = None, msg_type: Optional[str] = None,
               trace_id: Optional[str] = None, src: Optional[str] = None,
               dst: Optional[str] = None, detail: Optional[str] = None) -> list:
        found = []
        for line in self.lines:
            if kind is not None and line.kind != kind:
                continue
            if msg_type is not None and line.msg_type != msg_type:
                continue
            if trace_id is not None and line.trace_id != trace_id:
                continue
            if src is not None and line.src != src:
                continue
            if dst is not None and line.dst != dst:
                continue
            if detail is not None and line.detail != detail:
                continue
            found.append(line)
        return found

    def count(self, **filters) -> int:
        return len(self.select(**filters))

    def render(self) -> str:
        return "".join(line.render() + "\n" for line in self.lines)

    def digest(self) -> str:
        return hashlib.sha256(self.render().encode("utf-8")).hexdigest()

    @classmethod
    def parse(cls, text: str) -> "Trace":
        return cls(TraceLine.parse(line) for line in text.splitlines() if line.strip())


def diff_traces(expected: str, actual: str, name: str = "trace") -> list:
    """Unified diff lines between two rendered traces; empty when identical."""
    return list(difflib.unified_diff(
        expected.splitlines(), actual.splitlines(),
        fromfile=f"golden/{name}", tofile=f"run/{name}", lineterm="",
    ))


@dataclass(frozen=True)
class OverlayNode:
    address: str
    digest: bytes
    layer: int
    up: Optional[str] = None
    gateway: Optional[str] = None


class Topology:
    """
    Read-only routing view.

    lookup maps an address to its OverlayNode (None when absent) and
    addresses enumerates every address currently on the overlay.
    """

    def __init__(self, lookup: Callable[[str], Optional[OverlayNode]],
                 addresses: Callable[[], Iterable[str]], fanout: int = 3,
                 latency: Optional[dict] = None, hop_latency: int = DEFAULT_HOP_LATENCY):
        self.lookup = lookup
        self.addresses = addresses
        self.fanout = fanout
        self.latency = latency if latency is not None else {}
        self.hop_latency = hop_latency

    def has(self, address: str) -> bool:
        return self.lookup(address) is not None

    def relays(self) -> list:
        """Upper-layer nodes (layers 0 and 1) in address order."""
        nodes = [self.lookup(a) for a in self.addresses()]
        return sorted(n.address for n in nodes if n is not None and n.layer <= 1)

    def tree_path(self, address: str) -> list:
        path = []
        current = self.lookup(address)
        while current is not None and len(path) <= 64:
            path.append(current.address)
            current = self.lookup(current.up) if current.up else None
        path.reverse()
        return path

    def link_latency(self, a: str, b: str) -> int:
        return self.latency.get(frozenset((a, b)), self.hop_latency)

    def max_latency(self) -> int:
        return max([self.hop_latency, *self.latency.values()])


def route(env: Envelope, mode: RouteMode, topology: Topology, source: str, destination: str) -> list:
    """
    Compute the hop sequence for an envelope.

    Args:
        env: envelope being routed; only its recipient digest is consulted
        mode: one of the four RouteModes
        topology: routing view
        source: address of the sender
        destination: address of the recipient

    Returns:
        list: addresses visited after the source, ending with destination

    Raises:
        DeliveryFailed: destination unknown or unreachable in this mode
    """
    if not topology.has(destination):
        raise DeliveryFailed(f"no route to {destination}")

    if mode == RouteMode.DIRECT_IP:
        return [destination]

    if mode == RouteMode.GATEWAY_RELAY:
        gateway = topology.lookup(destination).gateway
        if gateway is None or not topology.has(gateway):
            raise DeliveryFailed(f"{destination} has no reachable gateway")
        return [destination] if gateway == destination else [gateway, destination]

    if mode == RouteMode.VIRGO_ID_PATH:
        path = topology.tree_path(destination)
        root = topology.lookup(path[0])
        if root is None or root.layer != 0:
            raise DeliveryFailed(f"{destination} is not on a tree path")
        return path

    if mode == RouteMode.OVERLAY_LOOKUP:
        target = env.recipient_digest
        candidates = [a for a in topology.relays() if a not in (source, destination)]
        candidates.sort(key=lambda a: (
            int.from_bytes(bytes(x ^ y for x, y in zip(topology.lookup(a).digest, target)), "big"), a))
        return candidates[:topology.fanout] + [destination]

    raise DeliveryFailed(f"unsupported route mode {mode}")


class Simulator:
    """
    Single-threaded event loop.

    Events run in (tick, insertion) order. dispatch is called for every
    event that is not cancelled; it owns all protocol side effects.
    """

    def __init__(self, dispatch: Callable[[SimEvent], None], max_ticks: int = 100_000):
        self.clock = SimClock()
        self.trace = Trace()
        self.max_ticks = max_ticks
        self.dispatch = dispatch
        self.processed = 0
        self._queue: list = []
        self._seq = itertools.count()

    @property
    def now(self) -> int:
        return self.clock.tick

    def schedule(self, at: int, kind: EventKind, **fields) -> SimEvent:
        event = SimEvent(at=max(at, self.clock.tick), seq=next(self._seq), kind=kind, **fields)
        heapq.heappush(self._queue, (event.at, event.seq, event))
        return event

    def schedule_in(self, delay: int, kind: EventKind, **fields) -> SimEvent:
        return self.schedule(self.clock.tick + max(delay, 0), kind, **fields)

    def pending(self) -> int:
        return sum(1 for _, _, event in self._queue if not event.cancelled)

    def run_until_quiescent(self, max_ticks: Optional[int] = None) -> Trace:
        """
        Process events until none remain.

        Raises:
            NonTermination: the next event lies beyond the tick bound
        """
        bound = self.max_ticks if max_ticks is None else max_ticks
        while self._queue:
            at, _, event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            if at > bound:
                heapq.heappush(self._queue, (at, event.seq, event))
                logging.error(f"Simulation passed the tick bound {bound} with {self.pending()} event(s) pending")
                raise NonTermination(f"events pending beyond tick {bound}")
            self.clock.advance(at)
            self.processed += 1
            self.dispatch(event)
        return self.trace
