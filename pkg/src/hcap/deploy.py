"""Wiring servers together, and a client that follows the ticket protocol."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Union

from .auth_server import AuthorizationServer, Denied
from .automaton import Permission
from .clock import MonotoneClock
from .endpoints import AuthClient, RsClient, bind_auth, bind_rs
from .policy import PolicyTable, rs_of
from .resource_server import AccessDenied, ResourceServer
from .sync import GcConfig
from .tickets import Capability, SharedKey, Ticket, UpdateRequest
from .transport import DEFAULT_MTU, Dispatcher, LoopbackTransport, UdpEndpoint, UdpTransport

TRANSPORTS = ("direct", "loopback", "udp")


@dataclass
class Deployment:
    """An authorization server and its resource servers, plus client-side ports."""

    auth: AuthorizationServer
    servers: dict[str, ResourceServer]
    auth_port: Any
    rs_ports: dict[str, Any]
    endpoints: list[UdpEndpoint] = field(default_factory=list)

    def close(self) -> None:
        for ep in self.endpoints:
            ep.close()
        self.endpoints.clear()

    def __enter__(self) -> "Deployment":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()

    def client(self, uid: str) -> "Client":
        return Client(uid, self.auth_port, self.rs_ports)


def make_keys(rsids: list[str], seed: Optional[int] = None) -> dict[str, SharedKey]:
    if seed is None:
        return {r: SharedKey.generate(r) for r in rsids}
    return {r: SharedKey(r, hashlib.sha256(f"{seed}:{r}".encode()).digest()) for r in rsids}


def deploy(
    policy: PolicyTable,
    rsids: list[str],
    mode: str = "core",
    gc_config: Optional[GcConfig] = None,
    transport: str = "loopback",
    codec: str = "json",
    mtu: int = DEFAULT_MTU,
    clock: Optional[MonotoneClock] = None,
    keys: Optional[Mapping[str, SharedKey]] = None,
) -> Deployment:
    if transport not in TRANSPORTS:
        raise ValueError(f"unknown transport {transport!r}")
    if mode == "core" and len(rsids) != 1:
        raise ValueError("core mode has exactly one resource server")
    clock = clock or MonotoneClock()
    keys = dict(keys) if keys is not None else make_keys(rsids)
    auth_keys: Union[SharedKey, dict[str, SharedKey]] = keys[rsids[0]] if mode == "core" else keys
    auth = AuthorizationServer(policy, auth_keys, clock, mode)
    servers = {
        r: ResourceServer(r, keys[r], clock, mode, gc_config) for r in rsids
    }
    dep = Deployment(auth, servers, auth, dict(servers))
    if transport == "direct":
        for r, rs in servers.items():
            rs.auth = auth
            rs.peers = {o: s for o, s in servers.items() if o != r}
        return dep

    if transport == "loopback":
        net = LoopbackTransport(codec, mtu)
        net.register("as", bind_auth(auth))
        for r, rs in servers.items():
            net.register(r, bind_rs(rs))
        addr: dict[str, Any] = {"as": "as", **{r: r for r in rsids}}
        make = lambda: net  # noqa: E731
    else:
        # bind first so that every server knows its peers' addresses
        eps = {"as": UdpEndpoint(Dispatcher({}), mtu=mtu)}
        eps.update({r: UdpEndpoint(Dispatcher({}), mtu=mtu) for r in rsids})
        eps["as"].dispatcher.bindings.update(bind_auth(auth).bindings)
        for r, rs in servers.items():
            eps[r].dispatcher.bindings.update(bind_rs(rs).bindings)
        dep.endpoints = [ep.start() for ep in eps.values()]
        addr = {k: ep.address for k, ep in eps.items()}
        make = lambda: UdpTransport(codec, mtu)  # noqa: E731
    for r, rs in servers.items():
        rs.auth = AuthClient(make(), addr["as"], r)
        rs.peers = {o: RsClient(make(), addr[o], r) for o in rsids if o != r}
    dep.auth_port = AuthClient(make(), addr["as"])
    dep.rs_ports = {r: RsClient(make(), addr[r]) for r in rsids}
    return dep


@dataclass
class AccessResult:
    granted: bool
    code: Optional[str] = None
    ticket: Optional[Ticket] = None
    as_contacts: int = 0


class Client:
    """One user's session: keeps the newest capability and submits updates."""

    def __init__(self, uid: str, auth_port: Any, rs_ports: Mapping[str, Any]):
        self.uid = uid
        self.auth = auth_port
        self.rs_ports = dict(rs_ports)
        self.cap: Optional[Capability] = None
        self.as_contacts = 0

    def port_for(self, p: Permission) -> Any:
        port = self.rs_ports.get(rs_of(p))
        if port is None and len(self.rs_ports) == 1:
            port = next(iter(self.rs_ports.values()))
        if port is None:
            raise KeyError(f"no resource server for {p}")
        return port

    def init(self) -> Capability:
        self.cap = self.auth.init_session(self.uid)
        self.as_contacts += 1
        return self.cap

    def submit_update(self, upd: UpdateRequest) -> Capability:
        self.cap = self.auth.process_update(self.uid, upd)
        self.as_contacts += 1
        return self.cap

    def reissue(self) -> Capability:
        assert self.cap is not None
        self.cap = self.auth.reissue(self.uid, self.cap.sessid)
        self.as_contacts += 1
        return self.cap

    def access(self, p: Permission, cap: Optional[Capability] = None, auto_update: bool = True) -> AccessResult:
        """Exercise ``p``; a returned update request is taken to the authorization server."""
        use = cap or self.cap
        if use is None:
            raise RuntimeError("no capability; call init() first")
        try:
            out = self.port_for(p).authorize(self.uid, p, use)
        except AccessDenied as exc:
            return AccessResult(False, exc.code)
        if not out:
            return AccessResult(True)
        tic = out[0]
        if isinstance(tic, Capability):
            self.cap = tic
            return AccessResult(True, ticket=tic)
        if not auto_update:
            return AccessResult(True, ticket=tic)
        try:
            new = self.submit_update(tic)
        except Denied as exc:
            return AccessResult(True, exc.code, tic, 1)
        return AccessResult(True, ticket=new, as_contacts=1)
