"""Capabilities, update requests, keyed tags and the two wire codecs.

A ticket's tag is ``HMAC(k, body | 0x00 | uid)`` where ``body`` is the
canonical JSON of every field except ``uid`` and ``tag``.  Since JSON
escapes control characters, the zero byte cannot occur inside ``body`` and
the concatenation is unambiguous.  Tags are always computed over the JSON
form so that a ticket re-encoded as CBOR keeps a valid tag.
"""

from __future__ import annotations

import hashlib
import hmac
import io
import json
import secrets
from dataclasses import dataclass, replace
from typing import Any, Callable, Optional, Union

import cbor2

from .automaton import ExceptionList, SAFragment
from .codec import (
    canonical_json,
    exception_from_obj,
    exception_to_obj,
    fragment_from_obj,
    fragment_to_obj,
)

TAG_BYTES = 32

KeyedHash = Callable[[bytes, bytes], bytes]


def hmac_sha256(key: bytes, message: bytes) -> bytes:
    return hmac.new(key, message, hashlib.sha256).digest()


@dataclass(frozen=True)
class SharedKey:
    key_id: str
    secret: bytes

    def __post_init__(self) -> None:
        if len(self.secret) != 32:
            raise ValueError("shared keys are 32 bytes")

    @classmethod
    def generate(cls, key_id: str) -> "SharedKey":
        return cls(key_id, secrets.token_bytes(32))

    @classmethod
    def from_hex(cls, key_id: str, text: str) -> "SharedKey":
        return cls(key_id, bytes.fromhex(text))

    def __repr__(self) -> str:
        return f"SharedKey({self.key_id!r}, <redacted>)"


class TicketDecodeError(ValueError):
    def __init__(self, message: str, position: Optional[int] = None, path: str = ""):
        where = f" at byte {position}" if position is not None else ""
        where += f" ({path})" if path else ""
        super().__init__(message + where)
        self.position = position
        self.path = path


@dataclass(frozen=True)
class Capability:
    uid: str
    sessid: str
    serial: int
    fragment: SAFragment
    vid: Optional[str] = None
    tag: bytes = b""

    kind = "cap"

    def body(self) -> dict:
        out: dict[str, Any] = {
            "kind": "cap",
            "sessid": self.sessid,
            "serial": self.serial,
            "frag": fragment_to_obj(self.fragment),
        }
        if self.vid is not None:
            out["vid"] = self.vid
        return out


@dataclass(frozen=True)
class UpdateRequest:
    uid: str
    sessid: str
    exception: ExceptionList
    rsid: Optional[str] = None
    tag: bytes = b""

    kind = "upd"

    def __post_init__(self) -> None:
        if len(self.exception) == 0:
            raise ValueError("an update request carries at least one exception entry")

    def body(self) -> dict:
        out: dict[str, Any] = {
            "kind": "upd",
            "sessid": self.sessid,
            "exc": exception_to_obj(self.exception),
        }
        if self.rsid is not None:
            out["rsid"] = self.rsid
        return out


Ticket = Union[Capability, UpdateRequest]


def _message(body: dict, uid: str) -> bytes:
    return canonical_json(body) + b"\x00" + uid.encode()


def compute_tag(key: SharedKey, uid: str, ticket: Ticket, keyed_hash: KeyedHash = hmac_sha256) -> bytes:
    return keyed_hash(key.secret, _message(ticket.body(), uid))


def sign(key: SharedKey, ticket: Ticket, keyed_hash: KeyedHash = hmac_sha256) -> Ticket:
    """Return ``ticket`` with its tag set for ``key`` and the ticket's uid."""
    return replace(ticket, tag=compute_tag(key, ticket.uid, ticket, keyed_hash))


def verify(key: SharedKey, uid: str, ticket: Ticket, keyed_hash: KeyedHash = hmac_sha256) -> bool:
    """Check the tag against the authenticated ``uid`` (not the ticket's own field)."""
    expected = compute_tag(key, uid, ticket, keyed_hash)
    return hmac.compare_digest(expected, ticket.tag)


def ticket_to_obj(t: Ticket, binary_tag: bool = False) -> dict:
    out = t.body()
    out["uid"] = t.uid
    out["tag"] = t.tag if binary_tag else t.tag.hex()
    return out


def _field(obj: dict, name: str, kind: type, optional: bool = False) -> Any:
    if name not in obj:
        if optional:
            return None
        raise TicketDecodeError(f"missing field {name!r}", path=name)
    value = obj[name]
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise TicketDecodeError(f"field {name!r} has wrong type", path=name)
    return value


def ticket_from_obj(obj: Any, binary_tag: bool = False) -> Ticket:
    if not isinstance(obj, dict):
        raise TicketDecodeError("ticket must be a map")
    kind = _field(obj, "kind", str)
    uid = _field(obj, "uid", str)
    sessid = _field(obj, "sessid", str)
    if binary_tag:
        tag = _field(obj, "tag", bytes)
    else:
        try:
            tag = bytes.fromhex(_field(obj, "tag", str))
        except ValueError as exc:
            raise TicketDecodeError("tag is not hex", path="tag") from exc
    try:
        if kind == "cap":
            serial = _field(obj, "serial", int)
            frag = fragment_from_obj(_field(obj, "frag", dict))
            vid = _field(obj, "vid", str, optional=True)
            return Capability(uid, sessid, serial, frag, vid, tag)
        if kind == "upd":
            exc = exception_from_obj(_field(obj, "exc", dict))
            rsid = _field(obj, "rsid", str, optional=True)
            return UpdateRequest(uid, sessid, exc, rsid, tag)
    except TicketDecodeError:
        raise
    except ValueError as exc:
        raise TicketDecodeError(str(exc), path="frag" if kind == "cap" else "exc") from exc
    raise TicketDecodeError(f"unknown ticket kind {kind!r}", path="kind")


def encode_json(t: Ticket) -> bytes:
    return canonical_json(ticket_to_obj(t))


def decode_json(data: bytes) -> Ticket:
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise TicketDecodeError(exc.msg, position=exc.pos) from exc
    except UnicodeDecodeError as exc:
        raise TicketDecodeError("invalid UTF-8", position=exc.start) from exc
    return ticket_from_obj(obj)


def encode_cbor(t: Ticket) -> bytes:
    return cbor2.dumps(ticket_to_obj(t, binary_tag=True), canonical=True)


def cbor_load(data: bytes) -> Any:
    """Decode exactly one CBOR item, reporting the byte offset on failure."""
    fp = io.BytesIO(data)
    try:
        obj = cbor2.CBORDecoder(fp).decode()
    except (cbor2.CBORDecodeError, EOFError, ValueError) as exc:
        raise TicketDecodeError(f"malformed CBOR: {exc}", position=fp.tell()) from exc
    if fp.tell() != len(data):
        raise TicketDecodeError("trailing bytes after CBOR item", position=fp.tell())
    return obj


def decode_cbor(data: bytes) -> Ticket:
    return ticket_from_obj(cbor_load(data), binary_tag=True)


def encode(t: Ticket, codec: str = "json") -> bytes:
    return encode_cbor(t) if codec == "cbor" else encode_json(t)


def decode(data: bytes, codec: str = "json") -> Ticket:
    return decode_cbor(data) if codec == "cbor" else decode_json(data)
