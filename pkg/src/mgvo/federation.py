"""A whole VO on the simulated network: central registry plus Grid-boxes.

Used by the test-suite and the acceptance run. Everything is
driven by one seed; two federations built with the same arguments and fed
the same script produce identical traces, counters and results.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable, Optional

from .central import Registry
from .errors import NotFound
from .node import CENTRAL, GridBox
from .security import Credential, issue_token
from .sim import SimNetwork
from .store import LocalStore
from .wire import MsgType

log = logging.getLogger(__name__)

DEFAULT_SITES = ("addenbrookes", "oxford", "udine")
FOREVER = 10 ** 10


class SimFederation:
    def __init__(self, root, sites: Iterable[str] = DEFAULT_SITES, seed: int = 0,
                 heartbeat: float = 2.0, vo_secret: bytes = b"mgvo-central-secret",
                 timeout: float = 5.0, capture: bool = False, latency: float = 0.01):
        self.root = Path(root)
        self.net = SimNetwork(seed, latency=latency, capture=capture)
        self.vo_secret = vo_secret
        self.heartbeat = heartbeat
        self.registry = Registry(vo_secret, heartbeat, clock=self.net.clock)
        self.net.attach(CENTRAL, self.registry)
        self.nodes: dict[str, GridBox] = {}
        self._silenced: set[str] = set()
        for site in sites:
            self.add_node(site, site, timeout=timeout)
        for box in self.nodes.values():
            box.register()
        for box in self.nodes.values():
            box.refresh_membership()
        n = max(1, len(self.nodes))
        for i, node_id in enumerate(sorted(self.nodes)):
            self.net.every(heartbeat, self._beat(node_id), start=self.net.now + heartbeat * (i + 1) / (n + 1))
        self.net.every(heartbeat / 2, self.registry.detect_failures)

    def add_node(self, node_id: str, site_id: str, timeout: float = 5.0) -> GridBox:
        store = LocalStore(self.root / node_id, node_id)
        box = GridBox(
            node_id, site_id, store, self.net,
            node_secret=f"node-secret-{node_id}".encode(),
            vo_secret=self.vo_secret,
            node_token=self.credential(f"node:{node_id}", ["admin"]).wire(),
            clock=self.net.clock, timeout=timeout,
        )
        self.net.attach(node_id, box)
        self.nodes[node_id] = box
        return box

    def _beat(self, node_id: str):
        def tick():
            if node_id in self._silenced:
                return
            box = self.nodes[node_id]
            self.net.post(node_id, CENTRAL, MsgType.HEARTBEAT, box.heartbeat_body(),
                          on_reply=box.on_heartbeat_reply)
        return tick

    # ------------------------------------------------------------ helpers

    def credential(self, subject: str, roles, expiry: int = FOREVER) -> Credential:
        return issue_token(subject, roles, expiry, self.vo_secret, now=self.net.now)

    def token(self, subject: str, roles, expiry: int = FOREVER) -> str:
        return self.credential(subject, roles, expiry).wire()

    def silence(self, node_id: str) -> None:
        """Stop ``node_id``'s heartbeats; it still answers requests."""
        self._silenced.add(node_id)

    def unsilence(self, node_id: str) -> None:
        self._silenced.discard(node_id)

    def run(self, seconds: float) -> None:
        self.net.advance(seconds)

    def status(self) -> dict[str, str]:
        return {m["node_id"]: m["status"] for m in self.registry.membership()}

    def node(self, node_id: Optional[str] = None) -> GridBox:
        return self.nodes[node_id or sorted(self.nodes)[0]]

    def client(self, name: str = "client", timeout: float = 600.0) -> "SimClient":
        return SimClient(self.net, name, timeout)

    def close(self) -> None:
        for box in self.nodes.values():
            box.store.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SimClient:
    """CLI-side endpoint on the simulated network (see ``mgvo.cli.Client``)."""

    def __init__(self, net: SimNetwork, name: str = "client", timeout: float = 600.0):
        self.net = net
        self.name = name
        self.timeout = timeout
        net.attach(name, self)

    def handle(self, msg, src):
        raise NotFound(f"{self.name} serves no requests")

    def request(self, dst: str, msg_type, body: dict):
        return self.net.call(self.name, dst, msg_type, body, self.timeout)
