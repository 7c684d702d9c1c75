import random
import threading
import time

import pytest

from hcap.auth_server import AuthorizationServer
from hcap.automaton import ExceptionList, Nil
from hcap.clock import ScriptedClock
from hcap.deploy import deploy, make_keys
from hcap.library import complete, perm
from hcap.policy import Full, Minimal, PolicyTable, build_fragment
from hcap.resource_server import AccessDenied, ResourceServer
from hcap.sync import GcConfig
from hcap.tickets import Capability, SharedKey, UpdateRequest, sign, verify

from drivers import QUIET, gc_correctness, multi_replay_outcome

K = SharedKey("rs0", bytes(range(32)))
P0, P1 = perm("p0"), perm("p1")
M2 = complete(2)


def exc(base, *chronological):
    return ExceptionList.from_chronological(base, list(chronological))


def core_pair(strategy=Full(), gc=QUIET, m=M2, uids=("alice",)):
    clock = ScriptedClock()
    policy = PolicyTable()
    for u in uids:
        policy.grant(u, m, strategy)
    auth = AuthorizationServer(policy, K, clock)
    rs = ResourceServer("rs0", K, clock, gc_config=gc, auth=auth)
    return auth, rs, clock


def cap_at(serial, strategy=Full(), q="q0", sessid="s1"):
    return sign(K, Capability("alice", sessid, serial, build_fragment(M2, q, strategy)))


# core authorization


def test_core_stationary_then_transitioning_then_replay():
    _, rs, clock = core_pair()
    rs.t_rs = 1
    c5 = cap_at(5)
    assert rs.authorize("alice", P0, c5) == ()
    assert rs.exc == {"s1": Nil(5)}
    clock.observe(8)
    (new,) = rs.authorize("alice", P1, c5)
    assert isinstance(new, Capability)
    assert new.serial == 9 and new.fragment.current == "n_q1"
    assert verify(K, "alice", new)
    assert rs.exc["s1"] == exc(5, (P1, 9))
    with pytest.raises(AccessDenied) as info:
        rs.authorize("alice", P0, c5)
    assert info.value.code == "stale_serial"
    assert rs.authorize("alice", P1, new) == ()  # p1 is stationary in q1


def test_core_minimal_fragment_yields_update_request():
    _, rs, clock = core_pair(Minimal())
    clock.observe(8)
    (upd,) = rs.authorize("alice", P1, cap_at(5, Minimal()))
    assert isinstance(upd, UpdateRequest)
    assert upd.exception == exc(5, (P1, 9))
    assert verify(K, "alice", upd)


def test_core_denials_have_codes_and_no_side_effects():
    _, rs, _ = core_pair()
    forged = sign(SharedKey("rs0", bytes(32)), Capability("alice", "s1", 5, build_fragment(M2, "q0", Full())))
    with pytest.raises(AccessDenied) as info:
        rs.authorize("alice", P0, forged)
    assert info.value.code == "bad_tag"
    with pytest.raises(AccessDenied) as info:
        rs.authorize("bob", P0, cap_at(5))
    assert info.value.code == "bad_tag"
    with pytest.raises(AccessDenied) as info:
        rs.authorize("alice", perm("p7"), cap_at(5))
    assert info.value.code == "not_permitted"
    assert rs.exc == {} and rs.access_log == []


def test_newer_capability_resets_history():
    _, rs, clock = core_pair()
    rs.authorize("alice", P1, cap_at(5))
    assert len(rs.exc["s1"]) == 1
    clock.observe(50)
    rs.authorize("alice", P1, cap_at(40, q="q1"))
    assert rs.exc["s1"] == Nil(40)


def test_handlers_and_access_log():
    seen = []
    _, rs, _ = core_pair()
    rs.handlers[P0] = lambda uid, p, t: seen.append((uid, str(p)))
    rs.authorize("alice", P0, cap_at(5))
    assert seen == [("alice", str(P0))]
    assert [(u, p) for u, p, _ in rs.access_log] == [("alice", P0)]


# recovery


def test_recover_full_fragment():
    _, rs, clock = core_pair()
    clock.observe(8)
    c5 = cap_at(5)
    rs.authorize("alice", P1, c5)
    got = rs.recover("alice", c5)
    assert isinstance(got, Capability)
    assert got.serial == 9 and got.fragment.current == "n_q1"


def test_recover_minimal_fragment_gives_update():
    _, rs, clock = core_pair(Minimal())
    clock.observe(8)
    c5 = cap_at(5, Minimal())
    rs.authorize("alice", P1, c5)
    got = rs.recover("alice", c5)
    assert isinstance(got, UpdateRequest) and got.exception == exc(5, (P1, 9))


def test_recover_unknown_serial_fails():
    _, rs, _ = core_pair()
    rs.authorize("alice", P1, cap_at(5))
    with pytest.raises(AccessDenied) as info:
        rs.recover("alice", cap_at(4))
    assert info.value.code == "not_recoverable"
    with pytest.raises(AccessDenied):
        rs.recover("alice", cap_at(5, sessid="other"))


# garbage collection


def test_core_gc_example():
    auth, rs, clock = core_pair()
    c = auth.init_session("alice", now=3)
    clock.observe(4)
    (c5,) = rs.authorize("alice", P1, c)
    assert rs.exc[c.sessid] == exc(3, (P1, 5))
    payload = rs.run_gc(now=20)
    assert payload.to_obj() == {
        "rsid": "rs0", "gc_time": 20,
        "sessions": {c.sessid: {"exc": {"base": 3, "entries": [[str(P1), 5]]}, "baton": False}},
    }
    assert rs.t_rs == 20 and rs.exc == {}
    for old in (c, c5):
        with pytest.raises(AccessDenied) as info:
            rs.authorize("alice", P0, old)
        assert info.value.code == "expired"
    fresh = auth.reissue("alice", c.sessid)
    assert fresh.serial == 20 and fresh.fragment.current == "n_q1"
    assert rs.authorize("alice", P1, fresh) == ()


def test_gc_delivery_failure_keeps_state():
    class Broken:
        def ingest_gc(self, payload):
            raise ConnectionError("down")

    _, rs, _ = core_pair()
    rs.auth = Broken()
    rs.authorize("alice", P1, cap_at(5))
    before = rs.exc
    with pytest.raises(ConnectionError):
        rs.run_gc()
    assert rs.exc == before and rs.t_rs == 0
    assert rs.maybe_gc() is None


def test_gc_triggers():
    _, rs, _ = core_pair(gc=GcConfig(size_threshold=3))
    c = cap_at(5)
    for p in (P1, P0, P1):
        (c,) = rs.authorize("alice", p, c)
    assert rs.calls["gc"] == 1 and rs.exc == {}
    _, rs, clock = core_pair(gc=GcConfig(interval_s=100))
    rs.authorize("alice", P0, cap_at(5))
    assert rs.calls["gc"] == 0
    clock.observe(clock.last + 200)
    rs.authorize("alice", P0, cap_at(clock.last + 1))
    assert rs.calls["gc"] == 1


def _multi(hard_s=3600.0, bc=False, transport="direct"):
    servers = ["rs0", "rs1"]
    m = complete(2, server_of=lambda j: servers[j])
    policy = PolicyTable()
    policy.grant("alice", m, Full())
    gc = GcConfig(interval_s=1e12, size_threshold=10**9, length_threshold=10**9,
                  hard_gc_inactivity_s=hard_s, baton_compression=bc)
    return deploy(policy, servers, mode="multi", gc_config=gc, transport=transport,
                  clock=ScriptedClock(), keys=make_keys(servers, 3))


A0, A1 = perm("p0", "rs0"), perm("p1", "rs1")


def test_multi_soft_and_hard_gc():
    with _multi(hard_s=3600) as dep:
        c = dep.client("alice")
        c.init()
        c.access(A0)
        rs0 = dep.servers["rs0"]
        t = rs0.clock.last
        payload = rs0.run_gc(now=t + 60)
        assert payload.sessions[c.cap.sessid].baton is True
        assert rs0.exc[c.cap.sessid] == Nil(c.cap.serial)
        assert dep.auth.sessions[c.cap.sessid].baton
        payload = rs0.run_gc(now=t + 7200)
        assert payload.sessions[c.cap.sessid].baton is False
        assert c.cap.sessid not in rs0.exc
        rec = dep.auth.sessions[c.cap.sessid]
        assert not rec.baton and rec.serial == t + 7200
        c.reissue()
        assert c.access(A0).granted


# multi-server authorization


def test_multi_wrong_server():
    with _multi() as dep:
        c = dep.client("alice")
        cap = c.init()
        with pytest.raises(AccessDenied) as info:
            dep.servers["rs1"].authorize("alice", A0, cap)
        assert info.value.code == "wrong_server"


def test_multi_stationary_requests_stay_local():
    with _multi() as dep:
        c = dep.client("alice")
        c.init()
        for _ in range(5):
            assert c.access(A0).granted
        rs0, rs1 = dep.servers["rs0"], dep.servers["rs1"]
        assert rs0.calls["remote_validate_out"] == rs1.calls["remote_validate_out"] == 0
        assert dep.auth.calls["confirm"] == 1


def test_multi_baton_moves_with_transitions():
    with _multi() as dep:
        c = dep.client("alice")
        c.init()
        sid = c.cap.sessid
        c.access(A0)
        assert sid in dep.servers["rs0"].exc
        assert c.access(A1).granted
        assert c.cap.vid == "rs1" and verify(dep.servers["rs1"].key, "alice", c.cap)
        assert sid not in dep.servers["rs0"].exc
        assert dep.servers["rs1"].exc[sid].ts_last == c.cap.serial
        assert dep.servers["rs1"].batons_received == [0]


def test_validate_examples():
    with _multi() as dep:
        c = dep.client("alice")
        cap = c.init()
        rs0 = dep.servers["rs0"]
        rs0.validate_capability("alice", cap)
        assert rs0.exc[cap.sessid] == Nil(cap.serial)
        rs0.validate_capability("alice", cap)  # equal serial: no change
        assert rs0.exc[cap.sessid] == Nil(cap.serial)
        other = dep.servers["rs1"]
        forged = sign(other.key, Capability("alice", cap.sessid, cap.serial, cap.fragment, "rs1"))
        with pytest.raises(AccessDenied) as info:
            other.validate_capability("alice", forged)
        assert info.value.code == "baton_denied"


@pytest.mark.parametrize("transport", ["direct", "loopback"])
def test_multi_replay_rejected(transport):
    assert multi_replay_outcome() == ("baton_denied", "remote_validation_failed")


def test_baton_uniqueness_and_compression_bound():
    for bc in (False, True):
        with _multi(bc=bc) as dep:
            c = dep.client("alice")
            c.init()
            rng = random.Random(5)
            for _ in range(200):
                assert c.access(rng.choice([A0, A1])).granted
                holders = [r for r, rs in dep.servers.items() if c.cap.sessid in rs.exc]
                assert len(holders) == 1
            sizes = [n for rs in dep.servers.values() for n in rs.batons_received]
            if bc:
                assert max(sizes) <= 2
            else:
                assert max(sizes) > 2


def test_maybe_compress_examples():
    _, rs, _ = core_pair(gc=GcConfig(baton_compression=True))
    c = cap_at(5)
    for p in (P1, P0, P1):
        (c,) = rs.authorize("alice", p, c)
    assert len(rs.exc["s1"]) <= 2
    assert rs.exc["s1"].ts_last == c.serial
    _, rs, _ = core_pair(gc=GcConfig(baton_compression=False))
    c = cap_at(5)
    for p in (P1, P0, P1):
        (c,) = rs.authorize("alice", p, c)
    assert len(rs.exc["s1"]) == 3


def test_compression_bound_for_100_sessions_over_m12():
    m12 = complete(12)
    uids = [f"u{i}" for i in range(100)]
    _, rs, _ = core_pair(gc=GcConfig(baton_compression=True, size_threshold=10**9, length_threshold=10**9), m=m12, uids=uids)
    rng = random.Random(0)
    perms = sorted(m12.alphabet)
    caps = {u: sign(K, Capability(u, u, 1, build_fragment(m12, "q0", Full()))) for u in uids}
    for _ in range(3000):
        u = rng.choice(uids)
        here = caps[u].fragment.current
        p = rng.choice([q for q in perms if "n_q" + str(q.resource).rsplit("p", 1)[1] != here])
        (caps[u],) = rs.authorize(u, p, caps[u])
        assert rs.total_entries() <= 1200
    assert max(len(e) for e in rs.exc.values()) <= 12


# concurrency


def test_one_session_is_serialized():
    _, rs, _ = core_pair()
    c = cap_at(5)
    results = []
    barrier = threading.Barrier(8)

    def worker():
        barrier.wait()
        try:
            rs.authorize("alice", P1, c)
            results.append("grant")
        except AccessDenied as exc:
            results.append(exc.code)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results.count("grant") == 1
    assert set(results) == {"grant", "stale_serial"}


def test_sessions_proceed_concurrently():
    _, rs, _ = core_pair(uids=("slow", "fast"))
    gate = threading.Event()

    def handler(uid, p, t):
        if uid == "slow":
            gate.wait(5)

    rs.handlers[P0] = handler
    slow = sign(K, Capability("slow", "a", 5, build_fragment(M2, "q0", Full())))
    fast = sign(K, Capability("fast", "b", 6, build_fragment(M2, "q0", Full())))
    th = threading.Thread(target=rs.authorize, args=("slow", P0, slow))
    th.start()
    time.sleep(0.05)
    started = time.perf_counter()
    rs.authorize("fast", P0, fast)
    elapsed = time.perf_counter() - started
    gate.set()
    th.join()
    assert elapsed < 1.0


def test_gc_correctness_small():
    report = gc_correctness(20, seed=3)
    assert report.ok, report
