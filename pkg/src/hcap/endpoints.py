"""Server bindings and client-side proxies over a :class:`~hcap.transport.Transport`."""

from __future__ import annotations

from typing import Any, Optional

from .auth_server import AuthorizationServer, Denied
from .automaton import Permission
from .resource_server import AccessDenied, ResourceServer
from .sync import Baton, GcPayload
from .tickets import Capability, Ticket, UpdateRequest, ticket_from_obj, ticket_to_obj
from .transport import Call, Dispatcher, MsgType, RemoteError, Transport


def ticket_out(t: Ticket, codec: str) -> dict:
    return ticket_to_obj(t, binary_tag=codec == "cbor")


def ticket_in(obj: Any, codec: str) -> Ticket:
    return ticket_from_obj(obj, binary_tag=codec == "cbor")


def _cap_in(obj: Any, codec: str) -> Capability:
    t = ticket_in(obj, codec)
    if not isinstance(t, Capability):
        raise AccessDenied("bad_request", "expected a capability")
    return t


def bind_auth(auth: AuthorizationServer) -> Dispatcher:
    def session_init(c: Call) -> Any:
        return ticket_out(auth.init_session(c.uid), c.codec)

    def update_submit(c: Call) -> Any:
        upd = ticket_in(c.body["upd"], c.codec)
        if not isinstance(upd, UpdateRequest):
            raise Denied("bad_request", "expected an update request")
        return ticket_out(auth.process_update(c.uid, upd), c.codec)

    def reissue(c: Call) -> Any:
        return ticket_out(auth.reissue(c.uid, str(c.body["sessid"])), c.codec)

    def baton_confirm(c: Call) -> Any:
        b = c.body
        return {"granted": auth.confirm_baton(str(b["rsid"]), str(b["sessid"]), int(b["serial"]))}

    def gc_submit(c: Call) -> Any:
        auth.ingest_gc(GcPayload.from_obj(c.body["payload"]))
        return {"ack": True}

    return Dispatcher({
        MsgType.SESSION_INIT: session_init,
        MsgType.UPDATE_SUBMIT: update_submit,
        MsgType.REISSUE: reissue,
        MsgType.BATON_CONFIRM: baton_confirm,
        MsgType.GC_SUBMIT: gc_submit,
    })


def bind_rs(rs: ResourceServer) -> Dispatcher:
    def access(c: Call) -> Any:
        p = Permission.parse(str(c.body["perm"]))
        out = rs.authorize(c.uid, p, _cap_in(c.body["cap"], c.codec))
        return {"tickets": [ticket_out(t, c.codec) for t in out]}

    def recover(c: Call) -> Any:
        return ticket_out(rs.recover(c.uid, _cap_in(c.body["cap"], c.codec)), c.codec)

    def remote_validate(c: Call) -> Any:
        rs.remote_validate(str(c.body["requester"]), c.uid, _cap_in(c.body["cap"], c.codec))
        return {"valid": True}

    def baton_transfer(c: Call) -> Any:
        rs.baton_transfer(Baton.from_obj(c.body["baton"]))
        return {"ack": True}

    return Dispatcher({
        MsgType.ACCESS: access,
        MsgType.RECOVER: recover,
        MsgType.REMOTE_VALIDATE: remote_validate,
        MsgType.BATON_TRANSFER: baton_transfer,
    })


class AuthClient:
    """Authorization-server operations as remote calls; usable as an ``AuthPort``."""

    def __init__(self, transport: Transport, peer: Any, sender: str = ""):
        self.transport = transport
        self.peer = peer
        self.sender = sender

    def _call(self, msg_type: MsgType, obj: Any, uid: str) -> Any:
        try:
            return self.transport.call(self.peer, msg_type, obj, uid)
        except RemoteError as exc:
            raise Denied(exc.code, exc.message) from exc

    def init_session(self, uid: str) -> Capability:
        return _cap_in(self._call(MsgType.SESSION_INIT, {}, uid), self.transport.codec)

    def process_update(self, uid: str, upd: UpdateRequest) -> Capability:
        obj = self._call(MsgType.UPDATE_SUBMIT, {"upd": ticket_out(upd, self.transport.codec)}, uid)
        return _cap_in(obj, self.transport.codec)

    def reissue(self, uid: str, sessid: str) -> Capability:
        return _cap_in(self._call(MsgType.REISSUE, {"sessid": sessid}, uid), self.transport.codec)

    def confirm_baton(self, rsid: str, sessid: str, serial: int) -> bool:
        obj = self._call(MsgType.BATON_CONFIRM, {"rsid": rsid, "sessid": sessid, "serial": serial}, self.sender)
        return bool(obj["granted"])

    def ingest_gc(self, payload: GcPayload) -> None:
        self._call(MsgType.GC_SUBMIT, {"rsid": payload.rsid, "payload": payload.to_obj()}, self.sender)


class RsClient:
    """Resource-server operations as remote calls; usable as a ``PeerPort``."""

    def __init__(self, transport: Transport, peer: Any, sender: str = ""):
        self.transport = transport
        self.peer = peer
        self.sender = sender

    def _call(self, msg_type: MsgType, obj: Any, uid: str) -> Any:
        try:
            return self.transport.call(self.peer, msg_type, obj, uid)
        except RemoteError as exc:
            raise AccessDenied(exc.code, exc.message) from exc

    def authorize(self, uid: str, p: Permission, cap: Capability, payload: Optional[Any] = None) -> tuple[Ticket, ...]:
        body: dict[str, Any] = {"perm": str(p), "cap": ticket_out(cap, self.transport.codec)}
        if payload is not None:
            body["payload"] = payload
        obj = self._call(MsgType.ACCESS, body, uid)
        return tuple(ticket_in(t, self.transport.codec) for t in obj["tickets"])

    def recover(self, uid: str, cap: Capability) -> Ticket:
        obj = self._call(MsgType.RECOVER, {"cap": ticket_out(cap, self.transport.codec)}, uid)
        return ticket_in(obj, self.transport.codec)

    def remote_validate(self, requester: str, uid: str, cap: Capability) -> None:
        self._call(MsgType.REMOTE_VALIDATE, {"requester": requester, "cap": ticket_out(cap, self.transport.codec)}, uid)

    def baton_transfer(self, baton: Baton) -> None:
        self._call(MsgType.BATON_TRANSFER, {"baton": baton.to_obj()}, self.sender)
