"""Resource-server access mediation for single-server and multi-server deployments."""

from __future__ import annotations

import logging
import threading
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Optional, Protocol

from .automaton import (
    UNKNOWN,
    ExceptionList,
    Nil,
    Permission,
    SAFragment,
    frag_run_after,
    frag_step,
)
from .clock import MonotoneClock
from .compression import compress_exception
from .policy import rs_of
from .sync import Baton, GcConfig, GcPayload, SessionFlush
from .tickets import Capability, SharedKey, Ticket, UpdateRequest, sign, verify

log = logging.getLogger(__name__)

Handler = Callable[[str, Permission, int], None]


class AccessDenied(Exception):
    """Authorization failure carrying a machine-readable reason code."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


class AuthPort(Protocol):
    def confirm_baton(self, rsid: str, sessid: str, serial: int) -> bool: ...

    def ingest_gc(self, payload: GcPayload) -> None: ...


class PeerPort(Protocol):
    def remote_validate(self, requester: str, uid: str, cap: Capability) -> None: ...

    def baton_transfer(self, baton: Baton) -> None: ...


class RWLock:
    """Many readers or one writer; readers are sessions, the writer is GC."""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self) -> Iterator[None]:
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self) -> Iterator[None]:
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


@dataclass
class Slot:
    """What this server knows about one session.

    ``exc`` is ``None`` when the exception is undefined here.  ``base`` is a
    fragment describing the state at the base of ``exc`` and ``head`` one for
    the state after it; both are kept only to support compression.
    """

    exc: Optional[ExceptionList] = None
    base: Optional[SAFragment] = None
    head: Optional[SAFragment] = None
    last_active: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def reset(self, serial: int, frag: SAFragment) -> None:
        self.exc = Nil(serial)
        self.base = self.head = frag


class ResourceServer:
    def __init__(
        self,
        rsid: str,
        key: SharedKey,
        clock: Optional[MonotoneClock] = None,
        mode: str = "core",
        gc_config: Optional[GcConfig] = None,
        auth: Optional[AuthPort] = None,
        peers: Optional[Mapping[str, PeerPort]] = None,
        handlers: Optional[Mapping[Permission, Handler]] = None,
    ):
        if mode not in ("core", "multi"):
            raise ValueError(f"unknown mode {mode!r}")
        self.rsid = rsid
        self.key = key
        self.mode = mode
        self.clock = clock or MonotoneClock()
        self.gc_config = gc_config or GcConfig()
        self.auth = auth
        self.peers: dict[str, PeerPort] = dict(peers or {})
        self.handlers: dict[Permission, Handler] = dict(handlers or {})
        self.t_rs = 0
        self.slots: dict[str, Slot] = {}
        self.access_log: list[tuple[str, Permission, int]] = []
        self.calls: Counter[str] = Counter()
        self.batons_received: list[int] = []
        self._slots_lock = threading.Lock()
        self._log_lock = threading.Lock()
        self._gc_lock = RWLock()
        self._last_gc = self.clock.next()

    # bookkeeping

    @property
    def exc(self) -> dict[str, ExceptionList]:
        """Snapshot of the defined exceptions, keyed by session."""
        return {sid: s.exc for sid, s in self.slots.items() if s.exc is not None}

    def total_entries(self) -> int:
        return sum(len(s.exc) for s in self.slots.values() if s.exc is not None)

    def _slot(self, sessid: str) -> Slot:
        with self._slots_lock:
            slot = self.slots.get(sessid)
            if slot is None:
                slot = self.slots[sessid] = Slot()
            return slot

    def _fresh_time(self, after: int) -> int:
        t = self.clock.next()
        if t <= after:
            t = after + 1
            self.clock.observe(t)
        return t

    def _exercise(self, uid: str, p: Permission, t: int) -> None:
        handler = self.handlers.get(p)
        if handler is not None:
            handler(uid, p, t)
        with self._log_lock:
            self.access_log.append((uid, p, t))

    def _sign(self, ticket: Ticket) -> Ticket:
        return sign(self.key, ticket)

    # access-check pieces

    @staticmethod
    def _check_permitted(p: Permission, cap: Capability) -> None:
        here = cap.fragment.here
        if p not in here.sp and p not in here.trans:
            raise AccessDenied("not_permitted", str(p))

    def _transition(self, slot: Slot, uid: str, sessid: str, p: Permission, cap: Capability) -> tuple[Ticket, ...]:
        """Exercise ``p`` and issue the follow-up ticket, if any."""
        assert slot.exc is not None
        here = cap.fragment.here
        if p in here.sp:
            t = self.clock.next()
            slot.last_active = t
            self._exercise(uid, p, t)
            return ()
        if p not in here.trans:
            raise AccessDenied("not_permitted", str(p))
        t = self._fresh_time(slot.exc.ts_last)
        slot.last_active = t
        self._exercise(uid, p, t)
        slot.exc = slot.exc.push(p, t)
        nxt = frag_step(cap.fragment, p)
        vid = self.rsid if self.mode == "multi" else None
        if nxt is UNKNOWN:
            slot.head = None
            return (self._sign(UpdateRequest(uid, sessid, slot.exc, vid)),)
        assert isinstance(nxt, SAFragment)
        slot.head = nxt
        self._maybe_compress(slot, cap.fragment)
        return (self._sign(Capability(uid, sessid, t, nxt, vid)),)

    def _maybe_compress(self, slot: Slot, cap_fragment: SAFragment) -> None:
        if not self.gc_config.baton_compression or slot.exc is None or slot.base is None:
            return
        if len(slot.exc) <= len(cap_fragment.defs):
            return
        try:
            slot.exc = compress_exception(slot.exc, slot.base)
        except ValueError:
            log.debug("history not traceable on the base fragment; left uncompressed")

    def maybe_compress(self, sessid: str, cap_fragment: SAFragment) -> None:
        slot = self._slot(sessid)
        with slot.lock:
            self._maybe_compress(slot, cap_fragment)

    # core mode

    def authorize(self, uid: str, p: Permission, cap: Capability) -> tuple[Ticket, ...]:
        self.calls["access"] += 1
        if self.mode == "core":
            out = self.authorize_core(uid, p, cap)
        else:
            out = self.authorize_multi(uid, p, cap)
        self.maybe_gc()
        return out

    def authorize_core(self, uid: str, p: Permission, cap: Capability) -> tuple[Ticket, ...]:
        with self._gc_lock.read():
            if not verify(self.key, uid, cap):
                raise AccessDenied("bad_tag")
            if cap.serial < self.t_rs:
                raise AccessDenied("expired", f"serial {cap.serial} predates last GC at {self.t_rs}")
            slot = self._slot(cap.sessid)
            with slot.lock:
                if slot.exc is not None and cap.serial < slot.exc.ts_last:
                    raise AccessDenied("stale_serial", f"serial {cap.serial} < {slot.exc.ts_last}")
                self._check_permitted(p, cap)
                self._sync_to(slot, cap)
                return self._transition(slot, uid, cap.sessid, p, cap)

    @staticmethod
    def _sync_to(slot: Slot, cap: Capability) -> None:
        """Lines 2-5 of the core procedure once staleness is ruled out."""
        if slot.exc is None or cap.serial > slot.exc.ts_last:
            slot.reset(cap.serial, cap.fragment)
        elif len(slot.exc) == 0 and slot.base is None:
            slot.base = slot.head = cap.fragment

    def recover(self, uid: str, cap: Capability) -> Ticket:
        """Rebuild the newest ticket of a session from an older capability."""
        self.calls["recover"] += 1
        if self.mode == "multi" and cap.vid != self.rsid:
            raise AccessDenied("wrong_validator", f"capability validated by {cap.vid}")
        if not verify(self.key, uid, cap):
            raise AccessDenied("bad_tag")
        with self._gc_lock.read():
            slot = self.slots.get(cap.sessid)
            if slot is None:
                raise AccessDenied("not_recoverable", "no history for session")
            with slot.lock:
                exc = slot.exc
                if exc is None or cap.serial not in exc.times():
                    raise AccessDenied("not_recoverable", "serial not in history")
                nxt = frag_run_after(cap.serial, cap.fragment, exc)
                vid = self.rsid if self.mode == "multi" else None
                if nxt is None:
                    raise AccessDenied("not_recoverable", "history does not replay on the fragment")
                if nxt is UNKNOWN:
                    return self._sign(UpdateRequest(uid, cap.sessid, exc, vid))
                assert isinstance(nxt, SAFragment)
                return self._sign(Capability(uid, cap.sessid, exc.ts_last, nxt, vid))

    # multi mode

    def validate_capability(self, uid: str, cap: Capability) -> None:
        """Validate a capability naming this server as validator; raises on failure."""
        slot = self._slot(cap.sessid)
        with slot.lock:
            self._validate(slot, uid, cap)

    def _validate(self, slot: Slot, uid: str, cap: Capability) -> None:
        if cap.vid != self.rsid or not verify(self.key, uid, cap):
            raise AccessDenied("bad_tag")
        if slot.exc is None:
            if self.auth is None:
                raise AccessDenied("baton_denied", "no authorization server configured")
            self.calls["confirm"] += 1
            if not self.auth.confirm_baton(self.rsid, cap.sessid, cap.serial):
                raise AccessDenied("baton_denied", "authorization server refused the baton")
            slot.reset(cap.serial, cap.fragment)
        elif cap.serial > slot.exc.ts_last:
            slot.reset(cap.serial, cap.fragment)
        elif cap.serial < slot.exc.ts_last:
            raise AccessDenied("stale_serial", f"serial {cap.serial} < {slot.exc.ts_last}")
        elif len(slot.exc) == 0 and slot.base is None:
            slot.base = slot.head = cap.fragment

    def authorize_multi(self, uid: str, p: Permission, cap: Capability) -> tuple[Ticket, ...]:
        if rs_of(p) != self.rsid:
            raise AccessDenied("wrong_server", f"{p} is held by {rs_of(p)}")
        # refuse unusable requests before any validation can move the baton
        self._check_permitted(p, cap)
        with self._gc_lock.read():
            if cap.vid == self.rsid:
                slot = self._slot(cap.sessid)
                with slot.lock:
                    self._validate(slot, uid, cap)
                    return self._transition(slot, uid, cap.sessid, p, cap)
        peer = self.peers.get(cap.vid or "")
        if peer is None:
            raise AccessDenied("remote_validation_failed", f"unknown validator {cap.vid}")
        self.calls["remote_validate_out"] += 1
        try:
            peer.remote_validate(self.rsid, uid, cap)
        except AccessDenied as exc:
            raise AccessDenied("remote_validation_failed", exc.code) from exc
        with self._gc_lock.read():
            slot = self._slot(cap.sessid)
            with slot.lock:
                if slot.exc is None:
                    raise AccessDenied("remote_validation_failed", "baton did not arrive")
                if cap.serial < slot.exc.ts_last:
                    raise AccessDenied("stale_serial", f"serial {cap.serial} < {slot.exc.ts_last}")
                return self._transition(slot, uid, cap.sessid, p, cap)

    def remote_validate(self, requester: str, uid: str, cap: Capability) -> None:
        """Validate on behalf of ``requester`` and hand it the baton on success."""
        self.calls["remote_validate_in"] += 1
        peer = self.peers.get(requester)
        if peer is None:
            raise AccessDenied("unknown_peer", requester)
        with self._gc_lock.read():
            slot = self._slot(cap.sessid)
            with slot.lock:
                self._validate(slot, uid, cap)
                assert slot.exc is not None
                baton = Baton(cap.sessid, slot.exc, slot.base)
                slot.exc = slot.base = slot.head = None
        peer.baton_transfer(baton)

    def baton_transfer(self, baton: Baton) -> None:
        self.calls["baton_in"] += 1
        self.batons_received.append(len(baton.exception))
        with self._gc_lock.read():
            slot = self._slot(baton.sessid)
            with slot.lock:
                if slot.exc is not None:
                    log.warning("baton for %s arrived while one is already held", baton.sessid)
                slot.exc = baton.exception
                slot.base = baton.base
                slot.head = None
                slot.last_active = self.clock.last

    # garbage collection

    def gc_due(self, now: Optional[int] = None) -> bool:
        cfg = self.gc_config
        now = self.clock.last if now is None else now
        if self.clock.seconds(now - self._last_gc) >= cfg.interval_s:
            return True
        lengths = [len(s.exc) for s in list(self.slots.values()) if s.exc is not None]
        return sum(lengths) >= cfg.size_threshold or any(n >= cfg.length_threshold for n in lengths)

    def maybe_gc(self) -> Optional[GcPayload]:
        if self.auth is None or not self.gc_due():
            return None
        try:
            return self.run_gc()
        except Exception:  # delivery failure: state kept for the next attempt
            log.exception("garbage collection failed")
            return None

    def run_gc(self, now: Optional[int] = None) -> GcPayload:
        """Flush exceptions to the authorization server.

        Nothing changes locally unless the authorization server accepts the
        payload, so a failed delivery can simply be retried.
        """
        with self._gc_lock.write():
            gc_time = self.clock.next() if now is None else now
            self.clock.observe(gc_time)
            payload = GcPayload(self.rsid, gc_time)
            hard: set[str] = set()
            for sid, slot in self.slots.items():
                if slot.exc is None:
                    continue
                retained = False
                if self.mode == "multi":
                    idle = self.clock.seconds(gc_time - slot.last_active)
                    retained = idle <= self.gc_config.hard_gc_inactivity_s
                if not retained:
                    hard.add(sid)
                payload.sessions[sid] = SessionFlush(slot.exc, retained)
            if self.auth is not None:
                self.auth.ingest_gc(payload)
            self.calls["gc"] += 1
            for sid in list(self.slots):
                slot = self.slots[sid]
                if slot.exc is None or sid in hard:
                    del self.slots[sid]
                else:
                    slot.exc = Nil(slot.exc.ts_last)
                    slot.base = slot.head
            self.t_rs = gc_time
            self._last_gc = gc_time
            return payload
