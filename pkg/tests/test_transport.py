import random
import threading
import time

import pytest

from hcap.automaton import Nil
from hcap.clock import ScriptedClock
from hcap.deploy import deploy
from hcap.library import chain, complete, perm
from hcap.policy import Full, Minimal, PolicyTable, build_fragment
from hcap.tickets import Capability, SharedKey, encode_cbor, encode_json, sign
from hcap.transport import (
    CHUNK,
    DEFAULT_MTU,
    HEADER,
    DecodeError,
    Dispatcher,
    Envelope,
    LoopbackTransport,
    MsgType,
    ReassemblyError,
    RemoteError,
    Reassembler,
    UdpEndpoint,
    UdpTransport,
    chunk_count,
    to_datagrams,
    unwrap,
)

from drivers import QUIET

K = SharedKey("rs0", bytes(32))


def big_cap(n, codec="json"):
    m = complete(n)
    t = sign(K, Capability("alice", "s", 7, build_fragment(m, "q0", Full())))
    return encode_json(t) if codec == "json" else encode_cbor(t)


def env_with_payload(size):
    # the body is padded so that the framed payload is exactly ``size`` bytes
    uid = "u"
    overhead = 2 + len(uid)
    return Envelope(MsgType.ACCESS, 42, uid, b"x" * (size - overhead), "json")


def test_header_sizes():
    assert HEADER.size == 16 and CHUNK.size == 20 and DEFAULT_MTU == 1024


@pytest.mark.parametrize("size,count", [(1, 1), (1024, 1), (1025, 2), (2048, 2), (2049, 3)])
def test_chunk_count_at_the_mtu(size, count):
    assert chunk_count(size) == count
    assert len(to_datagrams(env_with_payload(size))) == count


def test_single_datagram_round_trip():
    env = Envelope.make(MsgType.SESSION_INIT, {"a": 1}, "alice", "cbor", 9)
    (g,) = to_datagrams(env)
    assert Reassembler().add(g) == env


def test_m13_capability_needs_chunks():
    body = big_cap(13)
    env = Envelope(MsgType.ACCESS, 1, "alice", body, "json")
    grams = to_datagrams(env)
    assert len(grams) > 1
    assert all(len(g) <= HEADER.size + CHUNK.size + DEFAULT_MTU for g in grams)


def test_reorder_and_duplicates_are_tolerated():
    env = env_with_payload(5000)
    grams = to_datagrams(env, message_id=3)
    shuffled = grams + grams[:2]
    random.Random(1).shuffle(shuffled)
    box = Reassembler()
    done = [e for e in (box.add(g) for g in shuffled) if e is not None]
    assert done[0] == env
    assert box.pending <= 1


def test_missing_chunk_never_completes_and_expires():
    grams = to_datagrams(env_with_payload(3000), message_id=5)
    box = Reassembler(timeout_s=0.0)
    assert all(box.add(g) is None for g in grams[:-1])
    assert box.pending == 1
    time.sleep(0.01)
    assert box.expire() == 1 and box.pending == 0


def test_inconsistent_chunks_are_rejected():
    a = to_datagrams(env_with_payload(3000), message_id=5)
    b = to_datagrams(env_with_payload(5000), message_id=5)
    box = Reassembler()
    box.add(a[0])
    with pytest.raises(ReassemblyError):
        box.add(b[1])


def test_short_or_corrupt_datagrams_are_decode_errors():
    box = Reassembler()
    with pytest.raises(DecodeError):
        box.add(b"\x00" * 5)
    g = to_datagrams(env_with_payload(10))[0]
    with pytest.raises(DecodeError):
        box.add(g[:1] + b"\x09" + g[2:])  # unknown codec
    chunked = to_datagrams(env_with_payload(3000))[0]
    with pytest.raises(DecodeError):
        box.add(chunked[:-1])


def test_unknown_message_type_gets_an_error_response():
    d = Dispatcher({MsgType.ACCESS: lambda call: call.body})
    resp = d.handle(Envelope.make(99, {}, "alice"))
    with pytest.raises(RemoteError) as info:
        unwrap(resp)
    assert info.value.code == "unknown_msg_type"


def test_undecodable_body_gets_decode_error_code():
    d = Dispatcher({MsgType.ACCESS: lambda call: call.body})
    with pytest.raises(RemoteError) as info:
        unwrap(d.handle(Envelope(MsgType.ACCESS, 1, "alice", b"{not json", "json")))
    assert info.value.code == "decode_error"


def test_loopback_counts_datagrams():
    t = LoopbackTransport(mtu=64)
    t.register("echo", Dispatcher({MsgType.ACCESS: lambda call: call.body}))
    assert t.call("echo", MsgType.ACCESS, {"k": "v" * 200}, "alice") == {"k": "v" * 200}
    assert t.datagrams_sent > 2


def test_udp_echo_with_chunking():
    d = Dispatcher({MsgType.ACCESS: lambda call: {"uid": call.uid, "body": call.body}})
    with UdpEndpoint(d, mtu=256) as ep:
        t = UdpTransport(codec="cbor", mtu=256)
        body = {"blob": "z" * 3000}
        assert t.call(ep.address, MsgType.ACCESS, body, "alice") == {"uid": "alice", "body": body}


def test_udp_slow_request_does_not_block_others():
    gate = threading.Event()

    def slow(call):
        gate.wait(5)
        return "slow"

    d = Dispatcher({MsgType.ACCESS: slow, MsgType.RECOVER: lambda call: "fast"})
    with UdpEndpoint(d) as ep:
        t = UdpTransport(timeout_s=5, retries=0)
        out = {}
        th = threading.Thread(target=lambda: out.setdefault("slow", t.call(ep.address, MsgType.ACCESS, {})))
        th.start()
        time.sleep(0.05)
        started = time.monotonic()
        assert t.call(ep.address, MsgType.RECOVER, {}) == "fast"
        assert time.monotonic() - started < 1.0
        gate.set()
        th.join(5)
        assert out["slow"] == "slow"


def run_script(transport, codec="json", mode="core"):
    servers = ["rs0", "rs1"] if mode == "multi" else ["rs0"]
    m = chain() if mode == "core" else complete(3, server_of=lambda j: servers[j % 2])
    policy = PolicyTable()
    policy.grant("alice", m, Minimal())
    policy.grant("bob", complete(3), Full())
    outcomes = []
    with deploy(policy, servers, mode=mode, gc_config=QUIET, transport=transport,
                codec=codec, clock=ScriptedClock()) as dep:
        for uid in ("alice", "bob"):
            c = dep.client(uid)
            c.init()
            for p in sorted(m.alphabet) * 2:
                r = c.access(p)
                outcomes.append((uid, str(p), r.granted, r.code, r.ticket.serial if r.ticket else None))
            outcomes.append((uid, "reissue", c.reissue().serial))
        old = c.cap
        for rs in dep.servers.values():
            rs.run_gc()
        outcomes.append(("after-gc", c.access(perm("p0"), cap=old, auto_update=False).code))
    return outcomes


@pytest.mark.parametrize("mode", ["core", "multi"])
@pytest.mark.parametrize("codec", ["json", "cbor"])
def test_transports_agree(mode, codec):
    direct = run_script("direct", codec, mode)
    assert run_script("loopback", codec, mode) == direct
    assert run_script("udp", codec, mode) == direct
