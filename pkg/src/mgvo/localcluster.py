"""Central plus Grid-box daemons on loopback sockets, in one process.

Writes real config files and starts the same daemon classes that
``mgvo-node serve`` and ``mgvo-central serve`` use.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

from .config import load_central_config, load_config
from .daemons import CentralDaemon, NodeDaemon
from .federation import DEFAULT_SITES, FOREVER
from .security import issue_token

VO_SECRET = "mgvo-central-secret"


def write_node_config(path, node_id: str, site_id: str, central: str, data_dir, vo_secret: str,
                      heartbeat: float = 2.0, listen: str = "127.0.0.1:0") -> Path:
    token = issue_token(f"node:{node_id}", ["admin"], FOREVER, vo_secret, now=0).wire()
    path = Path(path)
    path.write_text(
        f"# Grid-box {node_id}\n"
        f"node_id = {node_id}\n"
        f"site_id = {site_id}\n"
        f"listen = {listen}\n"
        f"central = {central}\n"
        f"data_dir = {data_dir}\n"
        f"node_secret = node-secret-{node_id}\n"
        f"vo_secret = {vo_secret}\n"
        f"node_token = {token}\n"
        f"heartbeat_interval = {heartbeat}\n",
        encoding="utf-8",
    )
    return path


def write_central_config(path, vo_secret: str, heartbeat: float = 2.0, listen: str = "127.0.0.1:0") -> Path:
    path = Path(path)
    path.write_text(f"listen = {listen}\nvo_secret = {vo_secret}\nheartbeat_interval = {heartbeat}\n",
                    encoding="utf-8")
    return path


class LocalCluster:
    def __init__(self, root, sites: Iterable[str] = DEFAULT_SITES, vo_secret: str = VO_SECRET,
                 heartbeat: float = 2.0):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.vo_secret = vo_secret
        self.heartbeat = heartbeat
        self.sites = list(sites)
        self.central = CentralDaemon(load_central_config(
            write_central_config(self.root / "central.conf", vo_secret, heartbeat))).start()
        self.nodes: dict[str, NodeDaemon] = {}
        self._bound: dict[str, str] = {}
        for site in self.sites:
            self.start_node(site)

    def start_node(self, site: str) -> NodeDaemon:
        # a restarted node comes back on its old port, as with a fixed listen address
        conf = write_node_config(self.root / f"{site}.conf", site, site, self.central.address,
                                 self.root / site, self.vo_secret, self.heartbeat,
                                 listen=self._bound.get(site, "127.0.0.1:0"))
        daemon = NodeDaemon(load_config(conf)).start()
        self.nodes[site] = daemon
        self._bound[site] = daemon.address
        return daemon

    def stop_node(self, site: str) -> None:
        self.nodes.pop(site).stop()

    @property
    def addresses(self) -> dict[str, str]:
        return {s: d.address for s, d in self.nodes.items()}

    def close(self) -> None:
        for site in list(self.nodes):
            self.stop_node(site)
        self.central.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
