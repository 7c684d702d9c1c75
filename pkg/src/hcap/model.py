"""Executable model of one protocol session.

A protocol state bundles the global clock, the authorization server's view
``(q_as, t_as)``, the resource server's view ``(t_rs, e_rs)`` and the set of
tickets held by the client.  :class:`Model` implements the seven transition
rules, the state invariants, the effective automaton state and a bounded
breadth-first explorer that checks invariant preservation, safety on every
edge and the liveness witness from every reachable state.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Union

from .automaton import (
    UNKNOWN,
    ExceptionList,
    Nil,
    Permission,
    SAFragment,
    SecurityAutomaton,
    StateId,
    frag_run,
    frag_run_after,
    frag_run_upto,
    frag_step,
    sa_run,
    sa_step,
)
from .policy import FragmentStrategy, Full, build_fragment

MUTATIONS = ("reqt-skip-append",)


class ModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class MCap:
    serial: int
    fragment: SAFragment

    def __str__(self) -> str:
        return f"cap({self.serial},{self.fragment.current})"


@dataclass(frozen=True)
class MUpd:
    exception: ExceptionList

    def __post_init__(self) -> None:
        if len(self.exception) == 0:
            raise ValueError("update requests carry a non-empty exception")

    def __str__(self) -> str:
        entries = ",".join(f"({p.resource.rsplit('/', 1)[-1]},{t})" for p, t in self.exception.entries)
        return f"upd([{entries}]/{self.exception.base_ts})"


ModelTicket = Union[MCap, MUpd]


@dataclass(frozen=True)
class ProtocolState:
    clock: int
    q_as: StateId
    t_as: int
    t_rs: int
    e_rs: ExceptionList
    client: frozenset = frozenset()

    def caps(self) -> list[MCap]:
        return [t for t in self.client if isinstance(t, MCap)]

    def upds(self) -> list[MUpd]:
        return [t for t in self.client if isinstance(t, MUpd)]


@dataclass(frozen=True)
class Issue:
    def __str__(self) -> str:
        return "issue()"


@dataclass(frozen=True)
class Request:
    p: Permission
    tic: ModelTicket

    def __str__(self) -> str:
        return f"request({self.p},{self.tic})"


@dataclass(frozen=True)
class Flush:
    def __str__(self) -> str:
        return "flush()"


@dataclass(frozen=True)
class Update:
    tic: ModelTicket

    def __str__(self) -> str:
        return f"update({self.tic})"


@dataclass(frozen=True)
class Recover:
    tic: ModelTicket

    def __str__(self) -> str:
        return f"recover({self.tic})"


@dataclass(frozen=True)
class Drop:
    tics: frozenset

    def __str__(self) -> str:
        return "drop({" + ",".join(sorted(map(str, self.tics))) + "})"


TransitionId = Union[Issue, Request, Flush, Update, Recover, Drop]


@dataclass
class Violation:
    kind: str  # "invariant" or "theorem"
    name: str
    trace: list[str]

    def to_obj(self) -> dict:
        return {self.kind: self.name, "trace": self.trace}


@dataclass
class ExplorationReport:
    states: int = 0
    edges: int = 0
    violations: list[Violation] = field(default_factory=list)
    complete: bool = True
    depth: int = 0
    liveness_checked: int = 0
    liveness_failed: int = 0
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations and self.complete

    def to_obj(self) -> dict:
        return {
            "states": self.states,
            "edges": self.edges,
            "violations": [v.to_obj() for v in self.violations],
            "complete": self.complete,
            "depth": self.depth,
            "liveness_checked": self.liveness_checked,
            "liveness_failed": self.liveness_failed,
            "seconds": round(self.seconds, 3),
        }


def _rebase(e: ExceptionList, ren: Mapping[int, int]) -> ExceptionList:
    return ExceptionList.unchecked(ren[e.base_ts], tuple((p, ren[t]) for p, t in e.entries))


class Model:
    """Transition system of one session over automaton ``m``.

    ``frags`` gives the fragment the authorization server hands out in each
    state; by default it is built with ``strategy``.
    """

    def __init__(
        self,
        m: SecurityAutomaton,
        strategy: FragmentStrategy = Full(),
        frags: Optional[Mapping[StateId, SAFragment]] = None,
        mutation: Optional[str] = None,
    ):
        if mutation is not None and mutation not in MUTATIONS:
            raise ValueError(f"unknown mutation {mutation!r}")
        self.m = m
        self.mutation = mutation
        self.strategy: Optional[FragmentStrategy] = None if frags is not None else strategy
        self.frags = dict(frags) if frags is not None else {
            q: build_fragment(m, q, strategy) for q in sorted(m.states)
        }
        self.alphabet = sorted(m.alphabet)
        self._defs_index: dict[frozenset, int] = {}
        for q in sorted(self.frags):
            key = frozenset(self.frags[q].defs.items())
            self._defs_index.setdefault(key, len(self._defs_index))
        self._frag_keys: dict[SAFragment, tuple] = {}

    # ordering helpers (deterministic across runs)

    def _frag_key(self, f: SAFragment) -> tuple:
        key = self._frag_keys.get(f)
        if key is None:
            idx = self._defs_index.get(frozenset(f.defs.items()), -1)
            key = self._frag_keys[f] = (idx, f.current)
        return key

    def ticket_key(self, t: ModelTicket) -> tuple:
        if isinstance(t, MCap):
            return (0, t.serial, self._frag_key(t.fragment))
        return (1, t.exception.timeline(), tuple(str(p) for p, _ in t.exception.entries))

    def sorted_tickets(self, ts: Iterable[ModelTicket]) -> list[ModelTicket]:
        return sorted(ts, key=self.ticket_key)

    # rules

    def initial_state(self) -> ProtocolState:
        return ProtocolState(2, self.m.initial, 1, 1, Nil(0), frozenset())

    def step(self, g: ProtocolState, lam: TransitionId) -> Optional[ProtocolState]:
        """Apply one rule; ``None`` when its precondition does not hold."""
        clock = g.clock + 1
        if isinstance(lam, Issue):
            cap = MCap(g.t_as, self.frags[g.q_as])
            return ProtocolState(clock, g.q_as, g.t_as, g.t_rs, g.e_rs, g.client | {cap})
        if isinstance(lam, Request):
            return self._request(g, lam)
        if isinstance(lam, Flush):
            q_as = g.q_as
            if g.t_as == g.e_rs.ts_first:
                q_as = sa_run(self.m, g.q_as, g.e_rs)
                if q_as is None:
                    raise ModelError("flush replays an exception the automaton rejects")
            return ProtocolState(clock, q_as, g.clock, g.clock, Nil(g.e_rs.ts_last), g.client)
        if isinstance(lam, Update):
            tic = lam.tic
            if tic not in g.client or not isinstance(tic, MUpd):
                return None
            if tic.exception.ts_first != g.t_as:
                return None
            q_as = sa_run(self.m, g.q_as, tic.exception)
            if q_as is None:
                raise ModelError("update replays an exception the automaton rejects")
            return ProtocolState(clock, q_as, g.clock, g.t_rs, g.e_rs, g.client)
        if isinstance(lam, Recover):
            tic = lam.tic
            if tic not in g.client or not isinstance(tic, MCap):
                return None
            if tic.serial not in g.e_rs.times():
                return None
            nxt = frag_run_after(tic.serial, tic.fragment, g.e_rs)
            client = g.client
            if nxt is UNKNOWN:
                client = client | {MUpd(g.e_rs)}
            elif nxt is not None:
                assert isinstance(nxt, SAFragment)
                client = client | {MCap(g.e_rs.ts_last, nxt)}
            return ProtocolState(clock, g.q_as, g.t_as, g.t_rs, g.e_rs, client)
        if isinstance(lam, Drop):
            if not lam.tics <= g.client:
                return None
            return ProtocolState(clock, g.q_as, g.t_as, g.t_rs, g.e_rs, g.client - lam.tics)
        raise TypeError(f"not a transition identifier: {lam!r}")

    def _request(self, g: ProtocolState, lam: Request) -> Optional[ProtocolState]:
        tic = lam.tic
        if tic not in g.client or not isinstance(tic, MCap):
            return None
        last = g.e_rs.ts_last
        if tic.serial < g.t_rs or tic.serial < last:
            return None
        here = tic.fragment.here
        clock = g.clock + 1
        if lam.p in here.sp:
            e = Nil(tic.serial) if tic.serial > last else g.e_rs
            return ProtocolState(clock, g.q_as, g.t_as, g.t_rs, e, g.client)
        if lam.p not in here.trans:
            return None
        e0 = Nil(tic.serial) if tic.serial > last else g.e_rs
        e = e0 if self.mutation == "reqt-skip-append" else e0.push(lam.p, g.clock)
        nxt = frag_step(tic.fragment, lam.p)
        new: ModelTicket
        if nxt is UNKNOWN:
            if len(e) == 0:
                return ProtocolState(clock, g.q_as, g.t_as, g.t_rs, e, g.client)
            new = MUpd(e)
        else:
            assert isinstance(nxt, SAFragment)
            new = MCap(g.clock, nxt)
        return ProtocolState(clock, g.q_as, g.t_as, g.t_rs, e, g.client | {new})

    def candidate_transitions(self, g: ProtocolState) -> list[TransitionId]:
        """Every transition identifier over the current tickets, enabled or not."""
        tickets = self.sorted_tickets(g.client)
        out: list[TransitionId] = [Issue(), Flush()]
        for t in tickets:
            if isinstance(t, MCap):
                out.extend(Request(p, t) for p in self.alphabet)
                out.append(Recover(t))
            else:
                out.append(Update(t))
        out.extend(Drop(frozenset({t})) for t in tickets)
        if len(tickets) > 1:
            out.append(Drop(frozenset(tickets)))
        return out

    def enabled_transitions(self, g: ProtocolState) -> list[TransitionId]:
        return [lam for lam in self.candidate_transitions(g) if self.step(g, lam) is not None]

    def successors(self, g: ProtocolState) -> list[tuple[TransitionId, ProtocolState]]:
        out = []
        for lam in self.candidate_transitions(g):
            nxt = self.step(g, lam)
            if nxt is not None:
                out.append((lam, nxt))
        return out

    # invariants and the effective state

    def _case_a(self, g: ProtocolState) -> bool:
        return g.e_rs.ts_last < g.t_as

    def _case_b(self, g: ProtocolState) -> bool:
        e = g.e_rs
        return (
            e.ts_first == g.t_as
            and e.ts_first >= g.t_rs
            and frag_run(self.frags[g.q_as], e) is not None
        )

    def check_invariants(self, g: ProtocolState) -> list[str]:
        bad: list[str] = []
        e = g.e_rs
        stamps = [g.t_as, g.t_rs] + e.timeline()
        for t in g.client:
            stamps.extend([t.serial] if isinstance(t, MCap) else t.exception.timeline())
        if any(g.clock <= s for s in stamps):
            bad.append("Inv1")
        if not e.is_ordered():
            bad.append("Inv2")
            return bad
        case_a, case_b = self._case_a(g), self._case_b(g)
        sub_i = len(e) == 0 and e.base_ts < g.t_rs and g.t_rs <= g.t_as
        sub_ii = e.ts_first >= g.t_rs
        if not (case_b or (case_a and (sub_i or sub_ii))):
            bad.append("Inv3")
        home = self.frags[g.q_as]
        if case_a:
            for c in g.caps():
                if not (
                    c.serial < e.ts_last
                    or c.serial < g.t_rs
                    or (c.serial == g.t_as and c.fragment == home)
                ):
                    bad.append("Inv4")
                    break
            if any(not g.t_as > u.exception.ts_last for u in g.upds()):
                bad.append("Inv6")
        if e.ts_first == g.t_as:
            times = e.times()
            for c in g.caps():
                if c.serial < e.ts_first:
                    continue
                if c.serial in times and frag_run_upto(c.serial, home, e) == c.fragment:
                    continue
                bad.append("Inv5")
                break
            for u in g.upds():
                if u.exception.ts_last < e.ts_first:
                    continue
                if u.exception == e and frag_run(home, e) is UNKNOWN:
                    continue
                bad.append("Inv7")
                break
        return bad

    def effective_state(self, g: ProtocolState) -> StateId:
        if g.t_as > g.e_rs.ts_last:
            return g.q_as
        q = sa_run(self.m, g.q_as, g.e_rs)
        if q is None:
            raise ValueError("effective state undefined: the state violates the invariants")
        return q

    # liveness

    def liveness_witness(self, g: ProtocolState) -> list[TransitionId]:
        """A flush- and drop-free path to a state holding a usable capability."""
        e = g.e_rs
        if e.ts_last < g.t_as:
            witness: list[TransitionId] = [Issue()]
        elif e.ts_first == g.t_as:
            cap = MCap(g.t_as, self.frags[g.q_as])
            witness = [Issue(), Recover(cap)]
            nxt = frag_run_after(g.t_as, cap.fragment, e)
            if nxt is UNKNOWN:
                witness += [Update(MUpd(e)), Issue()]
        else:
            raise ModelError("state is in neither invariant case")
        final = g
        for lam in witness:
            stepped = self.step(final, lam)
            if stepped is None:
                raise ModelError(f"witness step {lam} is disabled")
            final = stepped
        if not any(
            c.serial >= final.t_rs and c.serial >= final.e_rs.ts_last for c in final.caps()
        ):
            raise ModelError("witness does not end with a usable capability")
        return witness

    # exploration

    def canonical(self, g: ProtocolState) -> ProtocolState:
        """Rename timestamps to their ranks; the rules only compare them."""
        stamps = {g.clock, g.t_as, g.t_rs, *g.e_rs.timeline()}
        for t in g.client:
            if isinstance(t, MCap):
                stamps.add(t.serial)
            else:
                stamps.update(t.exception.timeline())
        ren = {s: i for i, s in enumerate(sorted(stamps))}
        if all(k == v for k, v in ren.items()):
            return g
        client = frozenset(
            MCap(ren[t.serial], t.fragment) if isinstance(t, MCap) else MUpd(_rebase(t.exception, ren))
            for t in g.client
        )
        return ProtocolState(
            ren[g.clock], g.q_as, ren[g.t_as], ren[g.t_rs], _rebase(g.e_rs, ren), client
        )

    def explore(
        self,
        depth: int,
        max_states: int = 2_000_000,
        check_liveness: bool = True,
        stop_at_first: bool = True,
    ) -> ExplorationReport:
        started = time.perf_counter()
        report = ExplorationReport(depth=depth)
        root = self.canonical(self.initial_state())
        parent: dict[ProtocolState, Optional[tuple[ProtocolState, str]]] = {root: None}
        frontier = deque([(root, 0)])

        def trace(state: ProtocolState, last: Optional[str] = None) -> list[str]:
            out: list[str] = [] if last is None else [last]
            link = parent.get(state)
            while link is not None:
                state, lam = link
                out.append(lam)
                link = parent.get(state)
            return out[::-1]

        def flag(kind: str, name: str, tr: list[str]) -> None:
            report.violations.append(Violation(kind, name, tr))

        bad = self.check_invariants(root)
        for name in bad:
            flag("invariant", name, [])
        while frontier:
            if stop_at_first and report.violations:
                break
            g, d = frontier.popleft()
            if check_liveness:
                report.liveness_checked += 1
                try:
                    self.liveness_witness(g)
                except ModelError as exc:
                    report.liveness_failed += 1
                    flag("theorem", f"liveness: {exc}", trace(g))
            if d >= depth:
                continue
            eff = self.effective_state(g)
            for lam in self.candidate_transitions(g):
                try:
                    nxt = self.step(g, lam)
                except ModelError as exc:
                    flag("theorem", f"model: {exc}", trace(g, str(lam)))
                    continue
                if nxt is None:
                    continue
                report.edges += 1
                inv = self.check_invariants(nxt)
                for name in inv:
                    flag("invariant", name, trace(g, str(lam)))
                try:
                    eff2: Optional[StateId] = self.effective_state(nxt)
                except ValueError:
                    eff2 = None
                if isinstance(lam, Request):
                    if sa_step(self.m, eff, lam.p) != eff2:
                        flag("theorem", "safety: request edge", trace(g, str(lam)))
                elif eff != eff2:
                    flag("theorem", "safety: non-request edge", trace(g, str(lam)))
                if inv:
                    continue
                c = self.canonical(nxt)
                if c in parent:
                    continue
                if len(parent) >= max_states:
                    report.complete = False
                    continue
                parent[c] = (g, str(lam))
                frontier.append((c, d + 1))
        report.states = len(parent)
        if stop_at_first and report.violations and frontier:
            report.complete = False
        report.seconds = time.perf_counter() - started
        return report
