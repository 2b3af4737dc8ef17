"""TCP transport: threaded frame servers and a request/response client."""

from __future__ import annotations

import itertools
import logging
import socket
import socketserver
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

from .errors import FrameError, NodeTimeout, NotFound, Oversize
from .transport import Handler, error_message, raise_for_error, respond
from .wire import ByteCounters, Message, encode_frame, read_frame

log = logging.getLogger(__name__)


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server: FrameServer = self.server  # type: ignore[assignment]
        sock = self.request
        while True:
            try:
                _, msg = read_frame(sock)
            except EOFError:
                return
            except Oversize as exc:
                # cannot resynchronise past an oversize payload
                self._send(error_message(exc))
                return
            except FrameError as exc:
                self._send(error_message(exc))
                continue
            except OSError:
                return
            for reply in respond(server.handler, msg, None):
                if not self._send(reply):
                    return

    def _send(self, msg: Message) -> bool:
        server: FrameServer = self.server  # type: ignore[assignment]
        frame = encode_frame(msg)
        server.counters.count(msg.msg_type, len(frame) - 4)
        if server.capture is not None:
            server.capture.append(frame)
        try:
            self.request.sendall(frame)
            return True
        except OSError:
            return False


class FrameServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], handler: Handler,
                 counters: Optional[ByteCounters] = None, capture: Optional[list] = None):
        super().__init__(address, _FrameHandler)
        self.handler = handler
        self.counters = counters or ByteCounters()
        self.capture = capture

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name=f"frames-{self.address}", daemon=True)
        t.start()
        return t


class SocketTransport:
    """Client side. ``addresses`` maps node ids (and ``central``) to host:port."""

    def __init__(self, addresses: Optional[dict[str, str]] = None,
                 counters: Optional[ByteCounters] = None, capture: Optional[list] = None,
                 name: str = "client"):
        self.addresses = dict(addresses or {})
        self.counters = counters or ByteCounters()
        self.capture = capture
        self.name = name
        self._rid = itertools.count(1)
        self._lock = threading.Lock()

    def learn(self, node_id: str, address: str) -> None:
        self.addresses[node_id] = address

    def _resolve(self, dst: str) -> tuple[str, int]:
        addr = self.addresses.get(dst, dst if ":" in dst else None)
        if addr is None:
            raise NotFound(f"no address for {dst}")
        return parse_address(addr)

    def _exchange(self, dst: str, msg: Message, timeout: float) -> list[Message]:
        frame = encode_frame(msg)
        self.counters.count(msg.msg_type, len(frame) - 4)
        if self.capture is not None:
            self.capture.append(frame)
        try:
            with socket.create_connection(self._resolve(dst), timeout=timeout) as sock:
                sock.sendall(frame)
                replies = []
                while True:
                    _, reply = read_frame(sock)
                    replies.append(reply)
                    if reply.terminal:
                        return replies
        except socket.timeout:
            raise NodeTimeout(f"{dst} did not answer within {timeout}s") from None
        except (OSError, EOFError) as exc:
            raise NodeTimeout(f"{dst} unreachable: {exc}") from None

    def _msg(self, src: str, msg_type, body: dict) -> Message:
        with self._lock:
            rid = body.get("request_id") or f"{src}#{next(self._rid)}"
        return Message(msg_type, {**body, "request_id": rid})

    def call(self, src: str, dst: str, msg_type, body: dict, timeout: float) -> list[Message]:
        return raise_for_error(self._exchange(dst, self._msg(src, msg_type, body), timeout))

    def scatter(self, src: str, requests: dict, timeout: float) -> dict:
        msgs = {dst: self._msg(src, t, b) for dst, (t, b) in sorted(requests.items())}
        if not msgs:
            return {}
        out = {}
        with ThreadPoolExecutor(max_workers=len(msgs)) as pool:
            futures = {dst: pool.submit(self._exchange, dst, m, timeout) for dst, m in msgs.items()}
            for dst, fut in futures.items():
                try:
                    out[dst] = raise_for_error(fut.result())
                except Exception as exc:  # noqa: BLE001
                    out[dst] = exc
        return out

    def post(self, src: str, dst: str, msg_type, body: dict, on_reply=None) -> None:
        try:
            replies = self.call(src, dst, msg_type, body, timeout=5.0)
        except Exception as exc:  # noqa: BLE001
            log.warning("post to %s failed: %s", dst, exc)
            return
        if on_reply:
            on_reply(replies)

    @staticmethod
    def clock() -> float:
        return time.time()
