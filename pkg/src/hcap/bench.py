"""Desk-scale versions of the four experiments, reported as CSV.

Every experiment returns a :class:`BenchResult` whose summary rows share one
fixed header.  Metrics ending in ``_ms`` or ``_us`` are wall-clock timings;
all other metrics are deterministic for a fixed seed.
"""

from __future__ import annotations

import csv
import io
import math
import random
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

from .clock import ScriptedClock
from .deploy import deploy, make_keys
from .library import complete, oscillator, perm
from .policy import Full, Minimal, PolicyTable, build_fragment
from .sync import GcConfig
from .tickets import Capability, SharedKey, encode, sign
from .endpoints import ticket_out
from .transport import DEFAULT_MTU, Envelope, MsgType, chunk_count

CSV_COLUMNS = ("experiment", "config", "param", "metric", "trials", "mean", "stderr", "ci95_low", "ci95_high")
MIN_TRIALS = 30
EXP4_CONFIGS = ("nogc", "gc400", "gc100", "bc")
# thresholds high enough that no collection happens unless a bench asks for it
_MANUAL_GC = GcConfig(interval_s=1e15, size_threshold=10**12, length_threshold=10**12, hard_gc_inactivity_s=1e15)


def ci95(values: list[float]) -> tuple[float, float, float, float]:
    """Mean, standard error and the normal-approximation 95% interval."""
    mean = statistics.fmean(values)
    se = statistics.stdev(values) / math.sqrt(len(values)) if len(values) > 1 else 0.0
    return mean, se, mean - 1.96 * se, mean + 1.96 * se


@dataclass
class BenchResult:
    experiment: str
    settings: dict
    trials: dict[tuple[str, str, str], list[float]] = field(default_factory=dict)

    def record(self, config: str, param: object, metric: str, value: float) -> None:
        self.trials.setdefault((config, str(param), metric), []).append(float(value))

    def values(self, config: str, param: object, metric: str) -> list[float]:
        return self.trials[(config, str(param), metric)]

    def rows(self) -> list[dict]:
        out = []
        for (config, param, metric), vals in self.trials.items():
            mean, se, lo, hi = ci95(vals)
            out.append({
                "experiment": self.experiment, "config": config, "param": param, "metric": metric,
                "trials": len(vals), "mean": _fmt(mean), "stderr": _fmt(se),
                "ci95_low": _fmt(lo), "ci95_high": _fmt(hi),
            })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _check_trials(trials: int, minimum: int) -> None:
    if trials < minimum:
        raise ValueError(f"at least {minimum} trials are required, got {trials}")


def _mixed_sequence(rng: random.Random, total: int, special: int) -> list[bool]:
    """``total`` flags of which exactly ``special`` are set, in random order."""
    flags = [True] * special + [False] * (total - special)
    rng.shuffle(flags)
    return flags


# Experiment 1: incomplete fragments


def exp1(
    p_values: Iterable[int] = range(0, 101, 10),
    trials: int = MIN_TRIALS,
    requests: int = 100,
    seed: int = 0,
    transport: str = "loopback",
    min_trials: int = MIN_TRIALS,
) -> BenchResult:
    """Oscillator with minimal fragments; P% of the requests are transitioning."""
    _check_trials(trials, min_trials)
    p_values = list(p_values)
    res = BenchResult("exp1", {"p_values": p_values, "trials": trials, "requests": requests, "seed": seed})
    m = oscillator()
    stay, switch = perm("p0"), perm("p1")
    for pct in p_values:
        count = round(requests * pct / 100)
        for trial in range(trials):
            rng = random.Random(f"{seed}:{pct}:{trial}")
            policy = PolicyTable()
            policy.grant("alice", m, Minimal())
            with deploy(policy, ["rs0"], gc_config=_MANUAL_GC, transport=transport, clock=ScriptedClock()) as dep:
                client = dep.client("alice")
                client.init()
                before = dep.auth.calls["update"]
                started = time.perf_counter()
                denied = 0
                for flag in _mixed_sequence(rng, requests, count):
                    if not client.access(switch if flag else stay).granted:
                        denied += 1
                elapsed = time.perf_counter() - started
                res.record("minimal", pct, "as_round_trips", dep.auth.calls["update"] - before)
                res.record("minimal", pct, "denied", denied)
                res.record("minimal", pct, "latency_ms", 1000 * elapsed / requests)
    return res


# Experiment 2: fragment size


def access_payload(n: int, codec: str = "json") -> bytes:
    """The datagram payload of an access request carrying the full fragment of M_n."""
    m = complete(n)
    key = SharedKey("rs0", bytes(32))
    cap = sign(key, Capability("alice", "0" * 32, 10**12, build_fragment(m, "q0", Full())))
    body = {"perm": str(perm("p0")), "cap": ticket_out(cap, codec)}
    return Envelope.make(MsgType.ACCESS, body, "alice", codec, 0).payload()


def exp2(
    n_values: Iterable[int] = range(1, 16),
    trials: int = MIN_TRIALS,
    requests: int = 100,
    mtu: int = DEFAULT_MTU,
    codec: str = "json",
    seed: int = 0,
    transport: str = "loopback",
    min_trials: int = MIN_TRIALS,
) -> BenchResult:
    """Full fragments of M_n: payload size, chunk count and request latency."""
    _check_trials(trials, min_trials)
    n_values = list(n_values)
    res = BenchResult("exp2", {"n_values": n_values, "mtu": mtu, "codec": codec, "trials": trials})
    for n in n_values:
        m = complete(n)
        perms = sorted(m.alphabet)
        cap_bytes = len(encode(sign(SharedKey("rs0", bytes(32)), Capability(
            "alice", "0" * 32, 10**12, build_fragment(m, "q0", Full()))), codec))
        payload = len(access_payload(n, codec))
        for trial in range(trials):
            rng = random.Random(f"{seed}:{n}:{trial}")
            policy = PolicyTable()
            policy.grant("alice", m, Full())
            with deploy(policy, ["rs0"], gc_config=_MANUAL_GC, transport=transport, codec=codec,
                        mtu=mtu, clock=ScriptedClock()) as dep:
                client = dep.client("alice")
                client.init()
                started = time.perf_counter()
                for _ in range(requests):
                    client.access(rng.choice(perms))
                elapsed = time.perf_counter() - started
            res.record("full", n, "capability_bytes", cap_bytes)
            res.record("full", n, "payload_bytes", payload)
            res.record("full", n, "chunks", chunk_count(payload, mtu))
            res.record("full", n, "latency_ms", 1000 * elapsed / requests)
    return res


def chunk_boundary(n_max: int = 15, mtu: int = DEFAULT_MTU, codec: str = "json") -> Optional[int]:
    """Smallest n whose access payload needs more than one chunk."""
    for n in range(1, n_max + 1):
        if chunk_count(len(access_payload(n, codec)), mtu) > 1:
            return n
    return None


# Experiment 3: garbage collection


def exp3(
    r_values: Iterable[int] = range(10_000, 100_001, 10_000),
    bc_modes: Iterable[bool] = (False, True),
    trials: int = MIN_TRIALS,
    sessions: int = 100,
    n_states: int = 12,
    seed: int = 0,
    transport: str = "direct",
    min_trials: int = MIN_TRIALS,
) -> BenchResult:
    """``sessions`` clients over M_n issue R transitioning requests, then one GC."""
    _check_trials(trials, min_trials)
    r_values, bc_modes = list(r_values), list(bc_modes)
    res = BenchResult("exp3", {"r_values": r_values, "sessions": sessions, "n": n_states, "trials": trials})
    m = complete(n_states)
    perms = sorted(m.alphabet, key=lambda p: int(p.resource.rsplit("p", 1)[1]))
    for bc in bc_modes:
        config = "bc" if bc else "nobc"
        gc = replace(_MANUAL_GC, baton_compression=bc)
        for r in r_values:
            for trial in range(trials):
                rng = random.Random(f"{seed}:{r}:{trial}")
                policy = PolicyTable()
                for i in range(sessions):
                    policy.grant(f"u{i}", m, Full())
                with deploy(policy, ["rs0"], gc_config=gc, transport=transport, clock=ScriptedClock()) as dep:
                    clients = [dep.client(f"u{i}") for i in range(sessions)]
                    where = [0] * sessions
                    for c in clients:
                        c.init()
                    rs = dep.servers["rs0"]
                    started = time.perf_counter()
                    peak = 0
                    for _ in range(r):
                        i = rng.randrange(sessions)
                        j = rng.randrange(n_states - 1)
                        j += j >= where[i]
                        if not clients[i].access(perms[j]).granted:
                            raise RuntimeError("transitioning request unexpectedly denied")
                        where[i] = j
                        if bc:
                            peak = max(peak, rs.total_entries())
                    serve = time.perf_counter() - started
                    entries = rs.total_entries()
                    gc_started = time.perf_counter()
                    payload = rs.run_gc()
                    gc_time = time.perf_counter() - gc_started
                    states_ok = all(
                        dep.auth.sessions[c.cap.sessid].state == f"q{where[k]}"
                        for k, c in enumerate(clients) if c.cap is not None
                    )
                res.record(config, r, "entries_at_gc", entries)
                res.record(config, r, "payload_entries", payload.total_entries())
                res.record(config, r, "max_session_entries", max(len(s.exception) for s in payload.sessions.values()))
                res.record(config, r, "states_match", int(states_ok))
                res.record(config, r, "gc_ms", 1000 * gc_time)
                res.record(config, r, "gc_per_request_us", 1e6 * gc_time / r)
                res.record(config, r, "request_us", 1e6 * serve / r)
    return res


# Experiment 4: baton passing


def exp4(
    p_values: Iterable[int] = range(0, 101, 10),
    configs: Iterable[str] = EXP4_CONFIGS,
    trials: int = MIN_TRIALS,
    requests: int = 1000,
    seed: int = 0,
    transport: str = "loopback",
    min_trials: int = MIN_TRIALS,
) -> BenchResult:
    """Two servers over M_2; P% of the requests move the baton to the other server."""
    _check_trials(trials, min_trials)
    p_values, configs = list(p_values), list(configs)
    for c in configs:
        if c not in EXP4_CONFIGS:
            raise ValueError(f"unknown configuration {c!r}; expected one of {EXP4_CONFIGS}")
    res = BenchResult("exp4", {"p_values": p_values, "configs": configs, "requests": requests, "trials": trials})
    servers = ("rsA", "rsB")
    m = complete(2, server_of=lambda j: servers[j])
    perms = [perm("p0", "rsA"), perm("p1", "rsB")]
    for config in configs:
        gc_every = {"gc400": 400, "gc100": 100}.get(config)
        gc = replace(_MANUAL_GC, baton_compression=config == "bc")
        for pct in p_values:
            count = round(requests * pct / 100)
            for trial in range(trials):
                rng = random.Random(f"{seed}:{config}:{pct}:{trial}")
                policy = PolicyTable(default_server="rsA")
                policy.grant("alice", m, Full())
                with deploy(policy, list(servers), mode="multi", gc_config=gc, transport=transport,
                            clock=ScriptedClock(), keys=make_keys(list(servers), seed)) as dep:
                    client = dep.client("alice")
                    client.init()
                    here = 0
                    transitions = 0
                    denied = 0
                    started = time.perf_counter()
                    for flag in _mixed_sequence(rng, requests, count):
                        target = 1 - here if flag else here
                        if not client.access(perms[target]).granted:
                            denied += 1
                        here = target
                        if flag:
                            transitions += 1
                            if gc_every and transitions % gc_every == 0:
                                for rs in dep.servers.values():
                                    rs.run_gc()
                    elapsed = time.perf_counter() - started
                    sizes = [n for rs in dep.servers.values() for n in rs.batons_received]
                    confirms = dep.auth.calls["confirm"]
                res.record(config, pct, "batons", len(sizes))
                res.record(config, pct, "max_baton_entries", max(sizes, default=0))
                res.record(config, pct, "mean_baton_entries", statistics.fmean(sizes) if sizes else 0)
                res.record(config, pct, "confirms", confirms)
                res.record(config, pct, "denied", denied)
                res.record(config, pct, "latency_ms", 1000 * elapsed / requests)
    return res


EXPERIMENTS: dict[str, Callable[..., BenchResult]] = {"exp1": exp1, "exp2": exp2, "exp3": exp3, "exp4": exp4}
