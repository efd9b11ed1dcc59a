"""Deterministic virtual network.

One shared store-and-forward uplink carries everything from the edge nodes to
the cloud; each node also has a latency-only control downlink. Time is kept
as exact ``Fraction`` milliseconds so frame schedules never drift.
"""
from __future__ import annotations

import csv
import heapq
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable

from .errors import TimeReversal
from .modes import MB

CLOUD = "cloud"
VIDEO_CHUNK, EDGE_REPORT, RECONFIG, ACK = "VideoChunk", "EdgeReport", "ReconfigCommand", "Ack"
KINDS = (VIDEO_CHUNK, EDGE_REPORT, RECONFIG, ACK)
BIN_MS = 100

DELIVERY_LOG_HEADER = ["deliver_at_ms", "kind", "src", "dst", "size_bytes"]


def as_ms(value) -> Fraction:
    """Exact conversion of a config number (int, float, str) to Fraction ms."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


@dataclass(frozen=True)
class LinkConfig:
    capacity_mbps: float = 100.0       # shared uplink, MB/s
    uplink_latency_ms: float = 5.0
    downlink_latency_ms: float = 5.0
    drop: Callable[["Message"], bool] | None = None  # loss hook, off by default


@dataclass
class Message:
    kind: str
    src: str
    dst: str
    size_bytes: int
    sent_at: Fraction
    deliver_at: Fraction = Fraction(0)
    seq: int = 0
    payload: Any = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if self.size_bytes < 0 or (self.kind == VIDEO_CHUNK and self.size_bytes == 0):
            raise ValueError(f"bad size {self.size_bytes} for {self.kind}")


class Network:
    def __init__(self, config: LinkConfig | None = None):
        self.config = config or LinkConfig()
        self._bytes_per_ms = as_ms(self.config.capacity_mbps) * MB / 1000
        self._up_latency = as_ms(self.config.uplink_latency_ms)
        self._down_latency = as_ms(self.config.downlink_latency_ms)
        self.now = Fraction(0)
        self.busy_until = Fraction(0)
        self.last_send = Fraction(0)  # the intake is ordered by send time
        self._heap: list = []
        self._seq = 0
        self.log: list[Message] = []
        self.bytes_sent = 0
        self.bytes_delivered = 0
        self.bytes_dropped = 0

    @property
    def bytes_in_flight(self) -> int:
        return sum(entry[3].size_bytes for entry in self._heap)

    @property
    def pending(self) -> int:
        return len(self._heap)

    def send(self, kind: str, src: str, dst: str, size_bytes: int, now, payload=None) -> Message:
        """Schedule a message; returns it with ``deliver_at`` filled in."""
        now = as_ms(now)
        if now < self.now or now < self.last_send:
            raise TimeReversal(f"send at {float(now)} ms is behind the virtual clock")
        self.last_send = now
        msg = Message(kind, src, dst, int(size_bytes), now, seq=self._seq, payload=payload)
        self._seq += 1
        self.bytes_sent += msg.size_bytes
        if self.config.drop is not None and self.config.drop(msg):
            self.bytes_dropped += msg.size_bytes
            msg.deliver_at = None
            return msg
        if dst == CLOUD:
            start = max(now, self.busy_until)
            tx = Fraction(msg.size_bytes) / self._bytes_per_ms
            self.busy_until = start + tx
            msg.deliver_at = start + tx + self._up_latency
        else:
            msg.deliver_at = now + self._down_latency
        heapq.heappush(self._heap, (msg.deliver_at, msg.src, msg.seq, msg))
        return msg

    def next_delivery(self) -> Fraction | None:
        return self._heap[0][0] if self._heap else None

    def advance(self, until_ms) -> list[Message]:
        """Deliver everything due by ``until_ms`` in (deliver_at, src, seq) order."""
        until = as_ms(until_ms)
        if until < self.now:
            raise TimeReversal(f"advance to {float(until)} ms before clock {float(self.now)} ms")
        out = []
        while self._heap and self._heap[0][0] <= until:
            msg = heapq.heappop(self._heap)[3]
            self.bytes_delivered += msg.size_bytes
            self.log.append(msg)
            out.append(msg)
        self.now = until
        return out

    def drain(self) -> list[Message]:
        """Deliver every message still in flight, advancing the clock as needed."""
        if not self._heap:
            return []
        last = max(entry[0] for entry in self._heap)
        return self.advance(max(last, self.now))

    def utilization(self, start_ms=0, end_ms=None, *, src: str | None = None,
                    kinds=None, bin_ms: int = BIN_MS) -> list[float]:
        """Delivered MB/s per bin, binned by delivery time."""
        start = as_ms(start_ms)
        end = self.now if end_ms is None else as_ms(end_ms)
        nbins = max(0, -(-(end - start) // bin_ms))
        totals = [0] * int(nbins)
        for msg in self.log:
            if src is not None and msg.src != src:
                continue
            if kinds is not None and msg.kind not in kinds:
                continue
            if msg.dst != CLOUD or not (start <= msg.deliver_at < end):
                continue
            totals[int((msg.deliver_at - start) // bin_ms)] += msg.size_bytes
        return [b / MB / (bin_ms / 1000) for b in totals]


def format_ms(t) -> str:
    return f"{float(t):.6f}"


def delivery_log_csv(messages) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DELIVERY_LOG_HEADER)
    for m in messages:
        w.writerow([format_ms(m.deliver_at), m.kind, m.src, m.dst, m.size_bytes])
    return buf.getvalue()
