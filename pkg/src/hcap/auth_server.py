"""The authorization server: session records, fragments, updates and GC ingestion."""

from __future__ import annotations

import logging
import secrets
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

from .automaton import ExceptionList, SAFragment, SecurityAutomaton, StateId, sa_run
from .clock import MonotoneClock
from .policy import FragmentStrategy, PolicyTable, build_fragment, rs_of_state
from .sync import GcPayload
from .tickets import Capability, SharedKey, UpdateRequest, sign, verify

log = logging.getLogger(__name__)


class Denied(Exception):
    """A request refused by the authorization server, with a reason code."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


class ClockError(RuntimeError):
    pass


@dataclass
class SessionRecord:
    uid: str
    monitor: SecurityAutomaton
    strategy: FragmentStrategy
    state: StateId
    serial: int
    baton: bool = False
    holder: Optional[str] = None
    last_ingest: Optional[tuple[ExceptionList, int]] = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)


class AuthorizationServer:
    """Session administration for one or many resource servers.

    In core mode ``keys`` is a single :class:`SharedKey`; in multi mode it is
    a mapping from resource-server id to key.
    """

    def __init__(
        self,
        policy: PolicyTable,
        keys: Union[SharedKey, Mapping[str, SharedKey]],
        clock: Optional[MonotoneClock] = None,
        mode: str = "core",
    ):
        if mode not in ("core", "multi"):
            raise ValueError(f"unknown mode {mode!r}")
        self.policy = policy
        self.mode = mode
        if isinstance(keys, SharedKey):
            if mode == "multi":
                raise ValueError("multi mode needs one key per resource server")
            self._core_key: Optional[SharedKey] = keys
            self._keys: dict[str, SharedKey] = {keys.key_id: keys}
        else:
            self._core_key = None
            self._keys = dict(keys)
            if mode == "core":
                if len(self._keys) != 1:
                    raise ValueError("core mode uses exactly one shared key")
                self._core_key = next(iter(self._keys.values()))
        if mode == "multi":
            bad = policy.check_multi()
            if bad:
                raise ValueError(f"policies violate the single-server-per-state rule: {bad}")
        self.clock = clock or MonotoneClock()
        self.sessions: dict[str, SessionRecord] = {}
        self._frags: dict[tuple[SecurityAutomaton, FragmentStrategy, StateId], SAFragment] = {}
        self._table_lock = threading.Lock()
        self._time_lock = threading.Lock()
        self._last_time = -1
        self.calls: Counter[str] = Counter()

    # helpers

    def _now(self, now: Optional[int]) -> int:
        with self._time_lock:
            t = self.clock.next() if now is None else now
            if t <= self._last_time:
                raise ClockError(f"timestamp {t} does not advance past {self._last_time}")
            self._last_time = t
            self.clock.observe(t)
            return t

    def fragment(self, monitor: SecurityAutomaton, strategy: FragmentStrategy, q: StateId) -> SAFragment:
        """The precomputed fragment handed out for ``monitor`` in state ``q``."""
        key = (monitor, strategy, q)
        frag = self._frags.get(key)
        if frag is None:
            frag = self._frags[key] = build_fragment(monitor, q, strategy)
        return frag

    def _record(self, sessid: str) -> SessionRecord:
        rec = self.sessions.get(sessid)
        if rec is None:
            raise Denied("unknown_session", sessid)
        return rec

    def _key_for(self, rsid: Optional[str]) -> SharedKey:
        if self.mode == "core":
            assert self._core_key is not None
            return self._core_key
        if rsid is None or rsid not in self._keys:
            raise Denied("unknown_server", str(rsid))
        return self._keys[rsid]

    def _validator(self, rec: SessionRecord) -> Optional[str]:
        if self.mode == "core":
            return None
        if rec.baton and rec.holder is not None:
            return rec.holder
        return rs_of_state(rec.monitor, rec.state, self.policy.default_server)

    def _issue(self, sessid: str, rec: SessionRecord, vid: Optional[str] = None) -> Capability:
        frag = self.fragment(rec.monitor, rec.strategy, rec.state)
        if self.mode == "multi" and vid is None:
            vid = self._validator(rec)
        cap = Capability(rec.uid, sessid, rec.serial, frag, vid)
        return sign(self._key_for(vid), cap)  # type: ignore[return-value]

    # endpoints

    def init_session(self, uid: str, now: Optional[int] = None) -> Capability:
        self.calls["init"] += 1
        entry = self.policy.lookup(uid)
        if entry is None:
            raise Denied("unknown_uid", uid)
        t = self._now(now)
        sessid = secrets.token_hex(16)
        rec = SessionRecord(uid, entry.automaton, entry.strategy, entry.automaton.initial, t)
        with self._table_lock:
            self.sessions[sessid] = rec
        return self._issue(sessid, rec)

    def process_update(self, uid: str, upd: UpdateRequest, now: Optional[int] = None) -> Capability:
        self.calls["update"] += 1
        rec = self._record(upd.sessid)
        if rec.uid != uid:
            raise Denied("wrong_owner", upd.sessid)
        if not verify(self._key_for(upd.rsid), uid, upd):
            raise Denied("bad_tag")
        with rec.lock:
            if upd.exception.ts_first != rec.serial:
                raise Denied("stale_update", f"update starts at {upd.exception.ts_first}, record at {rec.serial}")
            target = sa_run(rec.monitor, rec.state, upd.exception)
            if target is None:
                log.error("update for %s is not a run of the automaton", upd.sessid)
                raise Denied("policy_violation", "exception does not replay on the automaton")
            rec.state = target
            rec.serial = self._now(now)
            if self.mode == "multi":
                rec.holder = upd.rsid
            return self._issue(upd.sessid, rec, vid=upd.rsid if self.mode == "multi" else None)

    def reissue(self, uid: str, sessid: str) -> Capability:
        self.calls["reissue"] += 1
        rec = self._record(sessid)
        if rec.uid != uid:
            raise Denied("wrong_owner", sessid)
        with rec.lock:
            return self._issue(sessid, rec)

    def confirm_baton(self, rsid: str, sessid: str, serial: int) -> bool:
        self.calls["confirm"] += 1
        rec = self.sessions.get(sessid)
        if rec is None:
            return False
        with rec.lock:
            if rec.baton or serial != rec.serial:
                return False
            rec.baton = True
            rec.holder = rsid
            return True

    def ingest_gc(self, payload: GcPayload) -> None:
        self.calls["gc"] += 1
        for sessid, flush in payload.sessions.items():
            rec = self.sessions.get(sessid)
            if rec is None:
                log.warning("GC payload from %s names unknown session %s", payload.rsid, sessid)
                continue
            with rec.lock:
                self._ingest_one(rec, flush.exception, flush.baton, payload)
        if self.mode == "core":
            # a flush invalidates every older capability at the resource server,
            # so the next serial must not predate it
            for rec in list(self.sessions.values()):
                with rec.lock:
                    rec.serial = max(rec.serial, payload.gc_time)
        self.clock.observe(payload.gc_time)

    def _ingest_one(self, rec: SessionRecord, exc: ExceptionList, retained: bool, payload: GcPayload) -> None:
        applied = self._apply_flush(rec, exc)
        if self.mode == "core":
            rec.serial = max(rec.serial, payload.gc_time)
        elif retained:
            if applied:
                rec.serial = max(rec.serial, exc.ts_last)
            rec.baton = True
            rec.holder = payload.rsid
        else:
            rec.serial = max(rec.serial, payload.gc_time)
            rec.baton = False
            rec.holder = None
        if applied:
            rec.last_ingest = (exc, rec.serial)

    def _apply_flush(self, rec: SessionRecord, exc: ExceptionList) -> bool:
        """Advance the recorded state by ``exc`` if it starts where the record does."""
        if exc.ts_first == rec.serial:
            todo = exc
        elif rec.last_ingest is not None and rec.last_ingest[1] == rec.serial:
            # a retried flush that extends one already applied
            prev = rec.last_ingest[0]
            old = list(prev.chronological())
            new = list(exc.chronological())
            if prev.base_ts != exc.base_ts or new[: len(old)] != old or len(new) == len(old):
                return False
            todo = ExceptionList.from_chronological(prev.ts_last, new[len(old):])
        else:
            return False
        target = sa_run(rec.monitor, rec.state, todo)
        if target is None:
            log.error("flushed exception does not replay on the automaton; ignored")
            return False
        rec.state = target
        return True
