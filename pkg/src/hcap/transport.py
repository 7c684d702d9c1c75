"""Message envelopes, datagram framing with chunking, and two transports.

``LoopbackTransport`` delivers envelopes in process after a full encode and
decode round trip; ``UdpEndpoint`` and ``UdpTransport`` carry the same frames
over UDP sockets, splitting payloads larger than the MTU into chunks.
"""

from __future__ import annotations

import enum
import itertools
import json
import logging
import math
import os
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Optional

import cbor2

from .codec import canonical_json
from .tickets import TicketDecodeError, cbor_load

log = logging.getLogger(__name__)

DEFAULT_MTU = 1024
HEADER = struct.Struct("!BBHQI")  # msg_type, codec, reserved, correlation_id, flags
CHUNK = struct.Struct("!QIII")  # message_id, index, total, chunk length
UID_LEN = struct.Struct("!H")
FLAG_CHUNKED = 0x1

assert HEADER.size == 16 and CHUNK.size == 20


class MsgType(enum.IntEnum):
    SESSION_INIT = 1
    ACCESS = 2
    UPDATE_SUBMIT = 3
    GC_SUBMIT = 4
    REISSUE = 5
    BATON_CONFIRM = 6
    REMOTE_VALIDATE = 7
    BATON_TRANSFER = 8
    RECOVER = 9
    RESPONSE = 10


CODECS = {"json": 0, "cbor": 1}
CODEC_NAMES = {v: k for k, v in CODECS.items()}


class TransportError(Exception):
    pass


class TransportTimeout(TransportError):
    pass


class ReassemblyError(TransportError):
    pass


class DecodeError(TransportError):
    pass


class RemoteError(TransportError):
    """An error response carrying a reason code."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


def parse_address(text: str) -> tuple[str, int]:
    """``"host:port"`` to a socket address; the host defaults to loopback."""
    host, _, port = str(text).rpartition(":")
    return (host or "127.0.0.1", int(port))


def encode_body(obj: Any, codec: str) -> bytes:
    if codec == "cbor":
        return cbor2.dumps(obj, canonical=True)
    return canonical_json(obj)


def decode_body(data: bytes, codec: str) -> Any:
    try:
        if codec == "cbor":
            return cbor_load(data)
        return json.loads(data)
    except (TicketDecodeError, ValueError) as exc:
        raise DecodeError(f"body does not decode as {codec}: {exc}") from exc


@dataclass(frozen=True)
class Envelope:
    msg_type: int
    correlation_id: int
    uid_assertion: str
    body: bytes
    codec: str = "json"

    @classmethod
    def make(cls, msg_type: int, obj: Any, uid: str = "", codec: str = "json", correlation_id: Optional[int] = None) -> "Envelope":
        cid = correlation_id if correlation_id is not None else int.from_bytes(os.urandom(8), "big")
        return cls(int(msg_type), cid, uid, encode_body(obj, codec), codec)

    def obj(self) -> Any:
        return decode_body(self.body, self.codec)

    def reply(self, obj: Any) -> "Envelope":
        return Envelope.make(MsgType.RESPONSE, obj, "", self.codec, self.correlation_id)

    def payload(self) -> bytes:
        uid = self.uid_assertion.encode()
        return UID_LEN.pack(len(uid)) + uid + self.body


@dataclass(frozen=True)
class ChunkHeader:
    message_id: int
    index: int
    total: int

    def __post_init__(self) -> None:
        if not 0 <= self.index < self.total:
            raise ValueError(f"chunk index {self.index} outside 0..{self.total - 1}")


def chunk_count(payload_len: int, mtu: int = DEFAULT_MTU) -> int:
    return max(1, math.ceil(payload_len / mtu))


def to_datagrams(env: Envelope, mtu: int = DEFAULT_MTU, message_id: Optional[int] = None) -> list[bytes]:
    """Frame ``env``; payloads larger than ``mtu`` bytes become several chunks."""
    if mtu <= 0:
        raise ValueError("mtu must be positive")
    payload = env.payload()
    codec = CODECS[env.codec]
    if len(payload) <= mtu:
        return [HEADER.pack(env.msg_type, codec, 0, env.correlation_id, 0) + payload]
    mid = message_id if message_id is not None else int.from_bytes(os.urandom(8), "big")
    total = chunk_count(len(payload), mtu)
    head = HEADER.pack(env.msg_type, codec, 0, env.correlation_id, FLAG_CHUNKED)
    out = []
    for i in range(total):
        piece = payload[i * mtu:(i + 1) * mtu]
        out.append(head + CHUNK.pack(mid, i, total, len(piece)) + piece)
    return out


def _envelope(msg_type: int, codec: int, cid: int, payload: bytes) -> Envelope:
    if codec not in CODEC_NAMES:
        raise DecodeError(f"unknown codec {codec}")
    if len(payload) < UID_LEN.size:
        raise DecodeError("payload too short")
    (n,) = UID_LEN.unpack_from(payload)
    if len(payload) < UID_LEN.size + n:
        raise DecodeError("truncated uid assertion")
    try:
        uid = payload[UID_LEN.size:UID_LEN.size + n].decode()
    except UnicodeDecodeError as exc:
        raise DecodeError("uid assertion is not UTF-8") from exc
    return Envelope(msg_type, cid, uid, payload[UID_LEN.size + n:], CODEC_NAMES[codec])


class Reassembler:
    """Collects datagrams into envelopes; order and duplicates do not matter."""

    def __init__(self, timeout_s: float = 2.0):
        self.timeout_s = timeout_s
        self._partial: dict[tuple[Any, int], tuple[float, int, tuple, dict[int, bytes]]] = {}
        self._lock = threading.Lock()

    def add(self, datagram: bytes, source: Any = None) -> Optional[Envelope]:
        if len(datagram) < HEADER.size:
            raise DecodeError("datagram shorter than the header")
        msg_type, codec, _, cid, flags = HEADER.unpack_from(datagram)
        rest = datagram[HEADER.size:]
        if not flags & FLAG_CHUNKED:
            return _envelope(msg_type, codec, cid, rest)
        if len(rest) < CHUNK.size:
            raise DecodeError("chunk header truncated")
        mid, index, total, length = CHUNK.unpack_from(rest)
        try:
            ChunkHeader(mid, index, total)
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
        piece = rest[CHUNK.size:]
        if len(piece) != length:
            raise DecodeError("chunk length mismatch")
        key = (source, mid)
        with self._lock:
            started, want, meta, pieces = self._partial.get(key, (time.monotonic(), total, (msg_type, codec, cid), {}))
            if want != total or meta != (msg_type, codec, cid):
                del self._partial[key]
                raise ReassemblyError(f"inconsistent chunks for message {mid}")
            pieces[index] = piece
            if len(pieces) < total:
                self._partial[key] = (started, want, meta, pieces)
                return None
            self._partial.pop(key, None)
        return _envelope(msg_type, codec, cid, b"".join(pieces[i] for i in range(total)))

    def expire(self) -> int:
        """Drop incomplete messages older than the timeout; returns how many."""
        cutoff = time.monotonic() - self.timeout_s
        with self._lock:
            stale = [k for k, v in self._partial.items() if v[0] < cutoff]
            for k in stale:
                del self._partial[k]
        return len(stale)

    @property
    def pending(self) -> int:
        return len(self._partial)


# dispatch


@dataclass(frozen=True)
class Call:
    uid: str
    body: Any
    codec: str


Handler = Callable[[Call], Any]


class Dispatcher:
    """Routes envelopes to handlers and wraps results in response envelopes.

    Handlers raise exceptions with a ``code`` attribute to produce an error
    response; ``verifier`` may reject a uid assertion before dispatch.
    """

    def __init__(self, bindings: Mapping[int, Handler], verifier: Optional[Callable[[str], bool]] = None):
        self.bindings = {int(k): v for k, v in bindings.items()}
        self.verifier = verifier

    def handle(self, env: Envelope) -> Envelope:
        handler = self.bindings.get(env.msg_type)
        if handler is None:
            return env.reply({"ok": False, "code": "unknown_msg_type", "message": str(env.msg_type)})
        if self.verifier is not None and not self.verifier(env.uid_assertion):
            return env.reply({"ok": False, "code": "unauthenticated", "message": env.uid_assertion})
        try:
            result = handler(Call(env.uid_assertion, env.obj(), env.codec))
        except DecodeError as exc:
            return env.reply({"ok": False, "code": "decode_error", "message": str(exc)})
        except Exception as exc:  # noqa: BLE001 - every failure becomes a response
            code = getattr(exc, "code", None)
            if code is None:
                if isinstance(exc, (KeyError, TypeError, ValueError)):
                    code = "bad_request"
                else:
                    log.exception("handler failed")
                    code = "internal_error"
            return env.reply({"ok": False, "code": code, "message": getattr(exc, "message", str(exc))})
        return env.reply({"ok": True, "result": result})


def unwrap(response: Envelope) -> Any:
    if response.msg_type != MsgType.RESPONSE:
        raise DecodeError(f"expected a response, got message type {response.msg_type}")
    obj = response.obj()
    if not isinstance(obj, dict) or "ok" not in obj:
        raise DecodeError("malformed response body")
    if not obj["ok"]:
        raise RemoteError(str(obj.get("code", "error")), str(obj.get("message", "")))
    return obj.get("result")


class Transport:
    codec: str = "json"

    def send_request(self, peer: Any, env: Envelope) -> Envelope:
        raise NotImplementedError

    def call(self, peer: Any, msg_type: int, obj: Any, uid: str = "") -> Any:
        """Send ``obj`` and return the result, raising :class:`RemoteError` on denial."""
        return unwrap(self.send_request(peer, Envelope.make(msg_type, obj, uid, self.codec)))


class LoopbackTransport(Transport):
    """In-process delivery with the same framing as the datagram transport."""

    def __init__(self, codec: str = "json", mtu: int = DEFAULT_MTU):
        self.codec = codec
        self.mtu = mtu
        self.endpoints: dict[str, Dispatcher] = {}
        self.datagrams_sent = 0
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def register(self, name: str, dispatcher: Dispatcher) -> None:
        self.endpoints[name] = dispatcher

    def _carry(self, env: Envelope) -> Envelope:
        with self._lock:
            mid = next(self._ids)
        grams = to_datagrams(env, self.mtu, mid)
        with self._lock:
            self.datagrams_sent += len(grams)
        box = Reassembler()
        out = None
        for g in grams:
            out = box.add(g)
        if out is None:
            raise ReassemblyError("loopback frames did not reassemble")
        return out

    def send_request(self, peer: str, env: Envelope) -> Envelope:
        target = self.endpoints.get(peer)
        if target is None:
            raise TransportError(f"no loopback endpoint named {peer!r}")
        response = self._carry(target.handle(self._carry(env)))
        if response.correlation_id != env.correlation_id:
            raise DecodeError("correlation id mismatch")
        return response


class UdpEndpoint:
    """Datagram server: reassembles requests and serves them on a worker pool."""

    def __init__(
        self,
        dispatcher: Dispatcher,
        bind: tuple[str, int] = ("127.0.0.1", 0),
        mtu: int = DEFAULT_MTU,
        workers: int = 16,
        reassembly_timeout_s: float = 2.0,
    ):
        self.dispatcher = dispatcher
        self.mtu = mtu
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self.sock.bind(bind)
        except OSError as exc:
            self.sock.close()
            raise TransportError(f"cannot bind {bind}: {exc}") from exc
        self.sock.settimeout(0.2)
        self.address: tuple[str, int] = self.sock.getsockname()
        self._box = Reassembler(reassembly_timeout_s)
        self._pool = ThreadPoolExecutor(max_workers=workers)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name=f"udp-{self.address[1]}", daemon=True)
        self._send_lock = threading.Lock()

    def start(self) -> "UdpEndpoint":
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                data, addr = self.sock.recvfrom(65535)
            except socket.timeout:
                self._box.expire()
                continue
            except OSError:
                break
            try:
                env = self._box.add(data, addr)
            except TransportError as exc:
                log.warning("dropping datagram from %s: %s", addr, exc)
                continue
            if env is not None:
                self._pool.submit(self._serve, env, addr)

    def _serve(self, env: Envelope, addr: Any) -> None:
        response = self.dispatcher.handle(env)
        with self._send_lock:
            for g in to_datagrams(response, self.mtu):
                self.sock.sendto(g, addr)

    def close(self) -> None:
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join()
        self._pool.shutdown(wait=True)
        self.sock.close()

    def __enter__(self) -> "UdpEndpoint":
        return self.start()

    def __exit__(self, *exc: Any) -> None:
        self.close()


class UdpTransport(Transport):
    """Client side of the datagram transport; one socket per request, one retry."""

    def __init__(self, codec: str = "json", mtu: int = DEFAULT_MTU, timeout_s: float = 2.0, retries: int = 1):
        self.codec = codec
        self.mtu = mtu
        self.timeout_s = timeout_s
        self.retries = retries

    def send_request(self, peer: tuple[str, int], env: Envelope) -> Envelope:
        grams = to_datagrams(env, self.mtu)
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
            for _ in range(self.retries + 1):
                for g in grams:
                    sock.sendto(g, peer)
                box = Reassembler(self.timeout_s)
                deadline = time.monotonic() + self.timeout_s
                while True:
                    left = deadline - time.monotonic()
                    if left <= 0:
                        break
                    sock.settimeout(left)
                    try:
                        data, _ = sock.recvfrom(65535)
                    except socket.timeout:
                        break
                    response = box.add(data)
                    if response is not None and response.correlation_id == env.correlation_id:
                        return response
                if box.pending:
                    raise ReassemblyError("response chunks missing at timeout")
        raise TransportTimeout(f"no response from {peer} within {self.timeout_s}s")
