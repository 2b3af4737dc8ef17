"""Deterministic simulated network.

A single-threaded virtual-time event loop. Every frame is really encoded,
counted, optionally captured, and decoded on delivery. Delivery is FIFO per
directed link; latency jitter and random drops come from one seeded RNG, so
the same seed and script give the same trace.

Calls may nest: a handler that itself issues a call re-enters the loop.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import NodeTimeout
from .transport import Handler, raise_for_error, respond
from .wire import ByteCounters, Message, decode_frame, encode_frame


@dataclass
class _Pending:
    rid: str
    replies: list
    done: bool = False
    on_done: Optional[Callable[[list], None]] = None


class SimNetwork:
    def __init__(self, seed: int = 0, latency: float = 0.01, jitter: float = 0.005,
                 capture: bool = False):
        self.rng = random.Random(seed)
        self.now = 0.0
        self.default_latency = latency
        self.jitter = jitter
        self.counters = ByteCounters()
        self.capture = capture
        self.captured: list[tuple[str, str, bytes]] = []
        self.trace: list[tuple] = []
        self._handlers: dict[str, Handler] = {}
        self._latency: dict[tuple[str, str], float] = {}
        self._link_clock: dict[tuple[str, str], float] = {}
        self._dropped_nodes: set[str] = set()
        self._drop_rate: dict[tuple[str, str], float] = {}
        self._events: list = []
        self._seq = itertools.count()
        self._rid = itertools.count(1)
        self._pending: dict[str, _Pending] = {}

    # topology -------------------------------------------------------

    def attach(self, node_id: str, handler: Handler) -> None:
        self._handlers[node_id] = handler

    def set_latency(self, a: str, b: str, seconds: float) -> None:
        self._latency[(a, b)] = seconds
        self._latency[(b, a)] = seconds

    def isolate(self, node_id: str) -> None:
        """Drop every frame to or from ``node_id``."""
        self._dropped_nodes.add(node_id)

    def restore(self, node_id: str) -> None:
        self._dropped_nodes.discard(node_id)

    def set_drop_rate(self, a: str, b: str, p: float) -> None:
        self._drop_rate[(a, b)] = p

    def clock(self) -> float:
        return self.now

    # events ---------------------------------------------------------

    def schedule(self, at: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._events, (at, next(self._seq), fn))

    def every(self, interval: float, fn: Callable[[], None], start: Optional[float] = None) -> None:
        def tick():
            fn()
            self.schedule(self.now + interval, tick)

        self.schedule(self.now + interval if start is None else start, tick)

    def _step(self) -> None:
        at, _, fn = heapq.heappop(self._events)
        self.now = max(self.now, at)
        fn()

    def run_until(self, deadline: float, stop: Callable[[], bool] = lambda: False) -> None:
        while not stop() and self._events and self._events[0][0] <= deadline:
            self._step()
        if not stop():
            self.now = max(self.now, deadline)

    def advance(self, seconds: float) -> None:
        self.run_until(self.now + seconds)

    # frames ---------------------------------------------------------

    def _latency_for(self, src: str, dst: str) -> float:
        base = self._latency.get((src, dst), self.default_latency)
        return base + self.rng.uniform(0, self.jitter)

    def send(self, src: str, dst: str, msg: Message) -> None:
        frame = encode_frame(msg)
        self.counters.count(msg.msg_type, len(frame) - 4)
        if self.capture:
            self.captured.append((src, dst, frame))
        link = (src, dst)
        dropped = (src in self._dropped_nodes or dst in self._dropped_nodes
                   or dst not in self._handlers
                   or self.rng.random() < self._drop_rate.get(link, 0.0))
        self.trace.append((round(self.now, 9), src, dst, int(msg.msg_type), len(frame), dropped))
        if dropped:
            return
        at = max(self.now + self._latency_for(src, dst), self._link_clock.get(link, 0.0))
        self._link_clock[link] = at
        self.schedule(at, lambda: self._deliver(src, dst, frame))

    def _deliver(self, src: str, dst: str, frame: bytes) -> None:
        msg = decode_frame(frame)
        rid = msg.body.get("reply_to")
        if rid is not None:
            pending = self._pending.get(rid)
            if pending is None or pending.done:
                return
            pending.replies.append(msg)
            if msg.terminal:
                pending.done = True
                del self._pending[rid]
                if pending.on_done:
                    pending.on_done(pending.replies)
            return
        for reply in respond(self._handlers[dst], msg, src):
            self.send(dst, src, reply)

    def _request(self, src: str, dst: str, msg_type, body: dict,
                 on_done: Optional[Callable[[list], None]] = None) -> _Pending:
        rid = body.get("request_id") or f"{src}#{next(self._rid)}"
        pending = _Pending(rid, [], on_done=on_done)
        self._pending[rid] = pending
        self.send(src, dst, Message(msg_type, {**body, "request_id": rid}))
        return pending

    def post(self, src: str, dst: str, msg_type, body: dict,
             on_reply: Optional[Callable[[list], None]] = None) -> None:
        """Fire-and-forget request; ``on_reply`` runs if a reply arrives."""
        self._request(src, dst, msg_type, body, on_reply)

    def scatter(self, src: str, requests: dict, timeout: float) -> dict:
        pend = {dst: self._request(src, dst, t, b) for dst, (t, b) in sorted(requests.items())}
        self.run_until(self.now + timeout, lambda: all(p.done for p in pend.values()))
        out = {}
        for dst, p in pend.items():
            if not p.done:
                out[dst] = NodeTimeout(f"{dst} did not answer within {timeout}s")
                continue
            try:
                out[dst] = raise_for_error(p.replies)
            except Exception as exc:  # noqa: BLE001
                out[dst] = exc
        for p in pend.values():
            p.done = True
            self._pending.pop(p.rid, None)
        return out

    def call(self, src: str, dst: str, msg_type, body: dict, timeout: float) -> list[Message]:
        result = self.scatter(src, {dst: (msg_type, body)}, timeout)[dst]
        if isinstance(result, Exception):
            raise result
        return result
