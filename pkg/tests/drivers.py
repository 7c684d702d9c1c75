"""Multi-step drivers shared by the module tests and the acceptance suite."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from hcap.automaton import sa_run
from hcap.clock import ScriptedClock
from hcap.deploy import deploy, make_keys
from hcap.library import complete, perm, random_automaton
from hcap.policy import Full, Minimal, PolicyTable, Radius
from hcap.resource_server import AccessDenied
from hcap.sync import GcConfig

QUIET = GcConfig(interval_s=1e12, size_threshold=10**9, length_threshold=10**9, hard_gc_inactivity_s=1e12)


@dataclass
class GcCheck:
    sessions: int = 0
    stale_granted: list = field(default_factory=list)
    bad_reissue: list = field(default_factory=list)
    bad_state: list = field(default_factory=list)
    after_gc_denied: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.stale_granted or self.bad_reissue or self.bad_state or self.after_gc_denied)


def gc_correctness(n_sessions: int = 100, seed: int = 0) -> GcCheck:
    """Random sessions on one server, one GC, then the three checks."""
    rng = random.Random(seed)
    policy = PolicyTable()
    automata = {}
    for i in range(n_sessions):
        m = random_automaton(rng, 5, 4, 0.7)
        automata[f"u{i}"] = m
        policy.grant(f"u{i}", m, rng.choice([Full(), Minimal(), Radius(1)]))
    out = GcCheck(sessions=n_sessions)
    with deploy(policy, ["rs0"], gc_config=QUIET, transport="direct", clock=ScriptedClock()) as dep:
        clients = {uid: dep.client(uid) for uid in automata}
        held = {}
        for uid, c in clients.items():
            c.init()
            held[uid] = [c.cap]
        for _ in range(n_sessions * 8):
            uid = rng.choice(sorted(clients))
            c = clients[uid]
            p = rng.choice(sorted(automata[uid].alphabet))
            c.access(p)
            held[uid].append(c.cap)
        rs = dep.servers["rs0"]
        flushed = rs.exc
        before = {sid: (rec.state, rec.serial) for sid, rec in dep.auth.sessions.items()}
        payload = rs.run_gc()
        gc_time = payload.gc_time
        for uid, c in clients.items():
            sid = c.cap.sessid
            m = automata[uid]
            state, serial = before[sid]
            e = flushed.get(sid)
            if e is not None and e.ts_first == serial:
                expect = sa_run(m, state, e)
            else:
                expect = state
            if dep.auth.sessions[sid].state != expect:
                out.bad_state.append(uid)
            for cap in held[uid]:
                for p in sorted(m.alphabet):
                    try:
                        rs.authorize(uid, p, cap)
                    except AccessDenied:
                        continue
                    out.stale_granted.append((uid, cap.serial))
            fresh = c.reissue()
            if fresh.serial != gc_time:
                out.bad_reissue.append((uid, fresh.serial, gc_time))
            usable = sorted(fresh.fragment.here.sp | fresh.fragment.here.trans.keys())
            if usable and not c.access(usable[0]).granted:
                out.after_gc_denied.append(uid)
    return out


def multi_replay_outcome() -> tuple[str, str]:
    """Replay an old capability at the server that lost the baton.

    Returns the reason codes of the replay at the old validator and at the
    current holder.
    """
    servers = ["rs0", "rs1"]
    m = complete(2, server_of=lambda j: servers[j])
    policy = PolicyTable()
    policy.grant("alice", m, Full())
    with deploy(policy, servers, mode="multi", gc_config=QUIET, transport="loopback",
                clock=ScriptedClock(), keys=make_keys(servers, 1)) as dep:
        c = dep.client("alice")
        old = c.init()
        assert c.access(perm("p0", "rs0")).granted
        assert c.access(perm("p1", "rs1")).granted
        codes = []
        for target in (perm("p0", "rs0"), perm("p1", "rs1")):
            try:
                dep.rs_ports[target.server].authorize("alice", target, old)
                codes.append("granted")
            except AccessDenied as exc:
                codes.append(exc.code)
        return codes[0], codes[1]
