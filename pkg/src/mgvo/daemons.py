"""Long-running node and central daemons over TCP."""

from __future__ import annotations

import logging
import signal
import threading
from typing import Optional

from .central import Registry
from .config import CentralConfig, NodeConfig
from .errors import MgvoError, RegistrationFailed
from .node import CENTRAL, GridBox
from .sockets import FrameServer, SocketTransport, parse_address
from .store import LocalStore

log = logging.getLogger(__name__)

REGISTER_ATTEMPTS = 5


class CentralDaemon:
    def __init__(self, cfg: CentralConfig):
        self.cfg = cfg
        self.registry = Registry(cfg.vo_secret, cfg.heartbeat_interval)
        self.server = FrameServer(parse_address(cfg.listen), self.registry)

    @property
    def address(self) -> str:
        return self.server.address

    def start(self) -> "CentralDaemon":
        self.server.start()
        log.info("central listening on %s", self.address)
        return self

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()


class NodeDaemon:
    """A Grid-box bound to a socket, registered with central, heartbeating."""

    def __init__(self, cfg: NodeConfig, backoff: float = 0.5, attempts: int = REGISTER_ATTEMPTS,
                 timeout: float = 5.0):
        self.cfg = cfg
        self.backoff = backoff
        self.attempts = attempts
        self.store = LocalStore(cfg.data_dir, cfg.node_id, fsync=True)
        self.transport = SocketTransport({CENTRAL: cfg.central}, name=cfg.node_id)
        self.server = FrameServer(parse_address(cfg.listen), None)
        self.box = GridBox(cfg.node_id, cfg.site_id, self.store, self.transport,
                           node_secret=cfg.node_secret, vo_secret=cfg.vo_secret,
                           node_token=cfg.node_token, address=self.server.address, timeout=timeout)
        self.server.handler = self.box
        self._stop = threading.Event()
        self._beat: Optional[threading.Thread] = None

    @property
    def address(self) -> str:
        return self.server.address

    def register(self) -> None:
        delay = self.backoff
        for attempt in range(1, self.attempts + 1):
            try:
                self.box.register()
                log.info("%s registered (attempt %d)", self.cfg.node_id, attempt)
                return
            except MgvoError as exc:
                log.warning("%s: registration attempt %d/%d failed: %s",
                            self.cfg.node_id, attempt, self.attempts, exc)
                if attempt == self.attempts or self._stop.wait(delay):
                    break
                delay *= 2
        raise RegistrationFailed(f"{self.cfg.node_id} could not register with {self.cfg.central}")

    def _heartbeats(self) -> None:
        while not self._stop.wait(self.cfg.heartbeat_interval):
            try:
                self.box.refresh_membership()
            except Exception:  # noqa: BLE001
                log.exception("heartbeat failed")

    def start(self) -> "NodeDaemon":
        self.server.start()
        try:
            self.register()
        except RegistrationFailed:
            self.stop()
            raise
        self._beat = threading.Thread(target=self._heartbeats, name=f"beat-{self.cfg.node_id}", daemon=True)
        self._beat.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self.server.shutdown()
        self.server.server_close()
        with self.store.lock:
            self.store.close()


def _wait_for_signal(stop: threading.Event) -> None:
    def on_signal(signum, _frame):
        log.info("signal %d, shutting down", signum)
        stop.set()

    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, on_signal)
        signal.signal(signal.SIGINT, on_signal)
    while not stop.wait(0.2):
        pass


def serve_node(cfg: NodeConfig, stop: Optional[threading.Event] = None, **kw) -> int:
    try:
        daemon = NodeDaemon(cfg, **kw)
    except OSError as exc:
        log.error("cannot start node %s: %s", cfg.node_id, exc)
        return 1
    try:
        daemon.start()
    except RegistrationFailed as exc:
        log.error("%s", exc)
        return 1
    try:
        _wait_for_signal(stop or threading.Event())
    finally:
        daemon.stop()
    return 0


def serve_central(cfg: CentralConfig, stop: Optional[threading.Event] = None) -> int:
    try:
        daemon = CentralDaemon(cfg).start()
    except OSError as exc:
        log.error("cannot bind central on %s: %s", cfg.listen, exc)
        return 1
    try:
        _wait_for_signal(stop or threading.Event())
    finally:
        daemon.stop()
    return 0
