"""Replay model traces against real servers and compare grant/deny outcomes.

The servers run in core mode behind a loopback transport and share a scripted
clock.  Model tickets are paired with the concrete tickets obtained at the
same step, so each transition can be re-enacted by the client.

Recovery differs in one observable detail: after a flush the model keeps a
nil exception whose serial is already expired, while the resource server has
deallocated the entry.  A recovered capability that is expired on arrival is
therefore counted as a denial on the model side.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from .auth_server import AuthorizationServer, Denied
from .clock import ScriptedClock
from .endpoints import AuthClient, RsClient, bind_auth, bind_rs
from .automaton import UNKNOWN, SAFragment, frag_run_after, frag_step
from .model import (
    Drop,
    Flush,
    Issue,
    MCap,
    MUpd,
    Model,
    ModelTicket,
    ProtocolState,
    Recover,
    Request,
    TransitionId,
    Update,
)
from .policy import PolicyTable
from .resource_server import AccessDenied, ResourceServer
from .sync import GcConfig
from .tickets import Capability, SharedKey, Ticket, UpdateRequest
from .transport import LoopbackTransport

GRANT, DENY = "grant", "deny"
_QUIET_GC = GcConfig(interval_s=1e12, size_threshold=10**9, length_threshold=10**9, hard_gc_inactivity_s=1e12)


def random_trace(model: Model, rng: random.Random, length: int) -> list[TransitionId]:
    """A walk choosing uniformly among all candidate transitions, enabled or not."""
    g = model.initial_state()
    out: list[TransitionId] = []
    for _ in range(length):
        lam = rng.choice(model.candidate_transitions(g))
        out.append(lam)
        nxt = model.step(g, lam)
        if nxt is not None:
            g = nxt
    return out


def model_outcomes(model: Model, trace: list[TransitionId]) -> list[str]:
    g = model.initial_state()
    out = []
    for lam in trace:
        nxt = model.step(g, lam)
        out.append(_model_outcome(g, lam, nxt))
        if nxt is not None:
            g = nxt
    return out


def _model_outcome(g: ProtocolState, lam: TransitionId, nxt: Optional[ProtocolState]) -> str:
    if nxt is None:
        return DENY
    if isinstance(lam, Recover):
        fresh = _recovered(g, lam)
        if fresh is None or (isinstance(fresh, MCap) and fresh.serial < nxt.t_rs):
            return DENY
    return GRANT


def _recovered(g: ProtocolState, lam: Recover) -> Optional[ModelTicket]:
    """The ticket rule Rcv adds, if any."""
    assert isinstance(lam.tic, MCap)
    nxt = frag_run_after(lam.tic.serial, lam.tic.fragment, g.e_rs)
    if nxt is None:
        return None
    if nxt is UNKNOWN:
        return MUpd(g.e_rs)
    assert isinstance(nxt, SAFragment)
    return MCap(g.e_rs.ts_last, nxt)


def _issued(g: ProtocolState, nxt: ProtocolState, lam: Request) -> Optional[ModelTicket]:
    """The ticket rule ReqT adds, or ``None`` for a stationary request."""
    assert isinstance(lam.tic, MCap)
    if lam.p not in lam.tic.fragment.here.trans:
        return None
    target = frag_step(lam.tic.fragment, lam.p)
    if target is UNKNOWN:
        return MUpd(nxt.e_rs)
    assert isinstance(target, SAFragment)
    return MCap(g.clock, target)


class Mismatch(AssertionError):
    pass


@dataclass
class ImplDriver:
    """Core-mode servers for one session, driven step by step."""

    model: Model
    uid: str = "alice"
    codec: str = "json"
    tickets: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.clock = ScriptedClock()
        key = SharedKey(key_id="rs0", secret=bytes(range(32)))
        if self.model.strategy is None:
            raise ValueError("the servers build fragments from a strategy; the model has none")
        policy = PolicyTable({})
        policy.grant(self.uid, self.model.m, self.model.strategy)
        self.auth = AuthorizationServer(policy, key, self.clock)
        self.transport = LoopbackTransport(codec=self.codec)
        self.transport.register("as", bind_auth(self.auth))
        self.as_client = AuthClient(self.transport, "as", "rs0")
        self.rs = ResourceServer("rs0", key, self.clock, gc_config=_QUIET_GC, auth=self.as_client)
        self.transport.register("rs0", bind_rs(self.rs))
        self.rs_client = RsClient(self.transport, "rs0")
        self.sessid = self.as_client.init_session(self.uid).sessid

    def _pair(self, model_ticket: ModelTicket, impl_ticket: Ticket) -> None:
        known = self.tickets.get(model_ticket)
        if known is not None and known != impl_ticket:
            raise Mismatch(f"ticket {model_ticket} has two concrete forms")
        self.tickets[model_ticket] = impl_ticket

    def apply(self, g: ProtocolState, lam: TransitionId, nxt: Optional[ProtocolState]) -> str:
        if isinstance(lam, Issue):
            cap = self.as_client.reissue(self.uid, self.sessid)
            assert nxt is not None
            self._pair(MCap(g.t_as, self.model.frags[g.q_as]), cap)
            return GRANT
        if isinstance(lam, Flush):
            self.rs.run_gc()
            return GRANT
        if isinstance(lam, Drop):
            return GRANT
        impl = self.tickets.get(lam.tic)
        if impl is None:
            # the client does not hold this ticket, so it cannot present it
            return DENY
        if isinstance(lam, Request):
            assert isinstance(impl, Capability)
            try:
                out = self.rs_client.authorize(self.uid, lam.p, impl)
            except AccessDenied:
                return DENY
            if nxt is not None:
                new = _issued(g, nxt, lam)
                if len(out) != (new is not None):
                    raise Mismatch(f"{lam}: resource server returned {len(out)} tickets")
                if new is not None:
                    self._pair(new, out[0])
            return GRANT
        if isinstance(lam, Update):
            assert isinstance(impl, UpdateRequest)
            try:
                self.as_client.process_update(self.uid, impl)
            except Denied:
                return DENY
            return GRANT
        if isinstance(lam, Recover):
            assert isinstance(impl, Capability)
            try:
                got = self.rs_client.recover(self.uid, impl)
            except AccessDenied:
                return DENY
            fresh = _recovered(g, lam) if nxt is not None else None
            if fresh is not None:
                self._pair(fresh, got)
            return GRANT
        raise TypeError(lam)


def implementation_outcomes(model: Model, trace: list[TransitionId], codec: str = "json") -> list[str]:
    driver = ImplDriver(model, codec=codec)
    g = model.initial_state()
    out = []
    for lam in trace:
        nxt = model.step(g, lam)
        out.append(driver.apply(g, lam, nxt))
        if nxt is not None:
            g = nxt
    return out


@dataclass
class CrossReport:
    traces: int = 0
    steps: int = 0
    mismatches: list[tuple[int, list[str], list[str], list[str]]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches


def cross_validate(model: Model, n_traces: int, length: int = 24, seed: int = 0) -> CrossReport:
    rng = random.Random(seed)
    report = CrossReport()
    for i in range(n_traces):
        trace = random_trace(model, rng, length)
        want = model_outcomes(model, trace)
        try:
            got = implementation_outcomes(model, trace)
        except Mismatch as exc:
            got = [f"error: {exc}"]
        report.traces += 1
        report.steps += len(trace)
        if got != want:
            report.mismatches.append((i, [str(t) for t in trace], want, got))
    return report
