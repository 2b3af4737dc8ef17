"""Central VO node: membership registry, discovery and failure detection.

The central node holds no clinical data and routes none; it only knows
which Grid-boxes exist, where they listen, and whether they are alive.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

from .errors import AuthFailed, Denied, DuplicateNodeId, NotFound
from .security import authorize, verify_token
from .wire import Message, MsgType

log = logging.getLogger(__name__)

DEFAULT_HEARTBEAT = 2.0


@dataclass
class MemberEntry:
    node_id: str
    site_id: str
    address: str
    algorithms: list[str] = field(default_factory=list)
    last_heartbeat: float = 0.0
    status: str = "live"


class Registry:
    def __init__(self, central_secret, heartbeat_interval: float = DEFAULT_HEARTBEAT,
                 clock: Callable[[], float] = time.time):
        self.secret = central_secret
        self.interval = heartbeat_interval
        self.clock = clock
        self.members: dict[str, MemberEntry] = {}
        self._lock = threading.Lock()

    def _node_identity(self, body: dict, node_id: str):
        identity = verify_token(body.get("token", ""), self.secret, self.clock())
        if identity.subject != f"node:{node_id}":
            raise AuthFailed(f"credential {identity.subject} does not belong to node {node_id}")
        decision = authorize(identity, "vo_admin")
        if not decision:
            raise Denied(decision.reason)
        return identity

    def register_node(self, body: dict) -> list[dict]:
        node_id = body["node_id"]
        self._node_identity(body, node_id)
        with self._lock:
            now = self.clock()
            current = self.members.get(node_id)
            if current is not None and (current.site_id, current.address) != (body["site_id"], body["address"]):
                raise DuplicateNodeId(node_id)
            self.members[node_id] = MemberEntry(
                node_id, body["site_id"], body["address"], sorted(body.get("algorithms", [])), now, "live")
            log.info("node %s (%s) joined at %s", node_id, body["site_id"], body["address"])
            return self._view()

    def heartbeat(self, body: dict) -> list[dict]:
        node_id = body["node_id"]
        self._node_identity(body, node_id)
        with self._lock:
            entry = self.members.get(node_id)
            if entry is None:
                raise NotFound(f"node {node_id} is not registered")
            entry.last_heartbeat = self.clock()
            return self._view()

    def status_for(self, age: float) -> str:
        if age > 3 * self.interval:
            return "dead"
        if age > 2 * self.interval:
            return "suspect"
        return "live"

    def detect_failures(self, now: Optional[float] = None) -> list[tuple[str, str, str]]:
        """Recompute statuses; returns ``(node_id, old, new)`` transitions."""
        now = self.clock() if now is None else now
        changes = []
        for entry in self.members.values():
            new = self.status_for(now - entry.last_heartbeat)
            if new != entry.status:
                changes.append((entry.node_id, entry.status, new))
                log.info("node %s: %s -> %s", entry.node_id, entry.status, new)
                entry.status = new
        return changes

    def _view(self) -> list[dict]:
        self.detect_failures()
        return [asdict(m) for _, m in sorted(self.members.items())]

    def membership(self) -> list[dict]:
        with self._lock:
            return self._view()

    def handle(self, msg: Message, src: Optional[str]) -> list[Message]:
        if msg.msg_type == MsgType.REGISTER and msg.body.get("op") == "members":
            # discovery probe from any VO member, including clients
            verify_token(msg.body.get("token", ""), self.secret, self.clock())
            return [Message(MsgType.REGISTER, {"membership": self.membership()})]
        if msg.msg_type == MsgType.REGISTER:
            return [Message(MsgType.REGISTER, {"ack": True, "membership": self.register_node(msg.body)})]
        if msg.msg_type == MsgType.HEARTBEAT:
            return [Message(MsgType.HEARTBEAT, {"ack": True, "membership": self.heartbeat(msg.body)})]
        raise NotFound(f"central node does not serve {msg.msg_type.name}")
