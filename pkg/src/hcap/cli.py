"""Command-line entry point: ``hcap model-check|serve-auth|serve-rs|client|bench``."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import Any, Optional, Sequence

from .auth_server import AuthorizationServer
from .bench import EXP4_CONFIGS, EXPERIMENTS, MIN_TRIALS
from .clock import MonotoneClock, ScriptedClock
from .codec import automaton_from_obj
from .endpoints import AuthClient, RsClient, bind_auth, bind_rs
from .model import MUTATIONS, Model
from .policy import PolicyTable, parse_strategy
from .resource_server import ResourceServer
from .scenario import Scenario, ScriptError
from .sync import GcConfig
from .tickets import SharedKey
from .transport import DEFAULT_MTU, TransportError, UdpEndpoint, UdpTransport, parse_address

EXIT_OK, EXIT_ERROR, EXIT_INCOMPLETE, EXIT_MISMATCH = 0, 1, 2, 3

log = logging.getLogger("hcap")


def _int_list(text: str) -> list[int]:
    """``"0,10,20"`` or an inclusive range ``"1..15"`` or ``"0..100:10"``."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, _, rest = part.partition("..")
            hi, _, step = rest.partition(":")
            out.extend(range(int(lo), int(hi) + 1, int(step or 1)))
        elif part:
            out.append(int(part))
    return out


# model-check


def cmd_model_check(args: argparse.Namespace) -> int:
    try:
        m = automaton_from_obj(json.loads(Path(args.sa).read_text()))
        strategy = parse_strategy(args.strategy)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: cannot read automaton {args.sa}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    model = Model(m, strategy, mutation=args.mutate)
    report = model.explore(args.depth, max_states=args.max_states, check_liveness=not args.no_liveness)
    print(json.dumps(report.to_obj(), indent=None if args.compact else 2))
    if report.violations:
        return EXIT_ERROR
    return EXIT_OK if report.complete else EXIT_INCOMPLETE


# servers


def _load_config(path: str) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValueError("config must be a JSON object")
    return cfg


def _keys(cfg: dict) -> dict[str, SharedKey]:
    raw = cfg.get("keys")
    if not isinstance(raw, dict) or not raw:
        raise ValueError("config.keys must map resource-server ids to hex secrets")
    return {rsid: SharedKey.from_hex(rsid, secret) for rsid, secret in raw.items()}


def _clock(cfg: dict) -> MonotoneClock:
    return ScriptedClock() if cfg.get("clock") == "scripted" else MonotoneClock()


def _serve(endpoint: UdpEndpoint, what: str, stop: Optional[threading.Event] = None) -> int:
    stop = stop or threading.Event()
    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, lambda *_: stop.set())
    host, port = endpoint.address
    print(f"{what} listening on {host}:{port}", flush=True)
    with endpoint:
        try:
            stop.wait()
        except KeyboardInterrupt:
            pass
    return EXIT_OK


def build_auth(cfg: dict, base: Path) -> tuple[AuthorizationServer, dict]:
    mode = cfg.get("mode", "core")
    keys = _keys(cfg)
    policy_path = Path(cfg["policy_path"])
    policy = PolicyTable.load(policy_path if policy_path.is_absolute() else base / policy_path)
    auth = AuthorizationServer(policy, keys if mode == "multi" else next(iter(keys.values())), _clock(cfg), mode)
    return auth, cfg.get("transport", {})


def build_rs(cfg: dict, rsid: Optional[str]) -> tuple[ResourceServer, dict]:
    mode = cfg.get("mode", "core")
    keys = _keys(cfg)
    rsid = rsid or cfg.get("rsid") or next(iter(keys))
    if rsid not in keys:
        raise ValueError(f"no key configured for resource server {rsid!r}")
    tcfg = cfg.get("transport", {})
    net = UdpTransport(cfg.get("codec", "json"), int(tcfg.get("mtu", DEFAULT_MTU)))
    auth = AuthClient(net, parse_address(cfg["auth"]), rsid) if "auth" in cfg else None
    peers = {r: RsClient(net, parse_address(a), rsid) for r, a in cfg.get("peers", {}).items() if r != rsid}
    rs = ResourceServer(rsid, keys[rsid], _clock(cfg), mode, GcConfig.from_obj(cfg.get("gc", {})), auth, peers)
    return rs, tcfg


def _endpoint(dispatcher: Any, tcfg: dict) -> UdpEndpoint:
    kind = tcfg.get("kind", "udp")
    if kind != "udp":
        raise ValueError(f"servers run over udp; transport.kind {kind!r} is for in-process use")
    return UdpEndpoint(dispatcher, parse_address(tcfg.get("bind", "127.0.0.1:0")), int(tcfg.get("mtu", DEFAULT_MTU)))


def cmd_serve_auth(args: argparse.Namespace) -> int:
    try:
        cfg = _load_config(args.config)
        auth, tcfg = build_auth(cfg, Path(args.config).parent)
        endpoint = _endpoint(bind_auth(auth), tcfg)
    except (ValueError, KeyError, OSError, TransportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return _serve(endpoint, "authorization server")


def cmd_serve_rs(args: argparse.Namespace) -> int:
    try:
        cfg = _load_config(args.config)
        rs, tcfg = build_rs(cfg, args.rsid)
        endpoint = _endpoint(bind_rs(rs), tcfg)
    except (ValueError, KeyError, OSError, TransportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return _serve(endpoint, f"resource server {rs.rsid}")


# client


def cmd_client(args: argparse.Namespace) -> int:
    try:
        scenario = Scenario.load(args.script)
        report = scenario.run()
    except (ScriptError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except TransportError as exc:
        print(f"error: server unreachable: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for res in report.results:
        print(f"{res.index:3d} {res.op:<14} {res.describe()}")
    if not report.ok:
        print("expectation mismatches:", file=sys.stderr)
        for mm in report.mismatches:
            print(f"  {mm}", file=sys.stderr)
        return EXIT_MISMATCH
    return EXIT_OK


# bench


def cmd_bench(args: argparse.Namespace) -> int:
    kwargs: dict[str, Any] = {"trials": args.trials, "seed": args.seed, "min_trials": args.min_trials}
    if args.transport:
        kwargs["transport"] = args.transport
    exp = args.experiment
    if exp == "exp1":
        kwargs["p_values"] = _int_list(args.p or "0..100:10")
        kwargs["requests"] = args.requests or 100
    elif exp == "exp2":
        kwargs["n_values"] = _int_list(args.n or "1..15")
        kwargs["requests"] = args.requests or 100
        kwargs["mtu"] = args.mtu
        kwargs["codec"] = args.codec
    elif exp == "exp3":
        kwargs["r_values"] = _int_list(args.r or "10000..100000:10000")
        kwargs["bc_modes"] = {"on": [True], "off": [False], "both": [False, True]}[args.bc]
        kwargs["sessions"] = args.sessions
    else:
        kwargs["p_values"] = _int_list(args.p or "0..100:10")
        kwargs["configs"] = args.configs.split(",")
        kwargs["requests"] = args.requests or 1000
    try:
        result = EXPERIMENTS[exp](**kwargs)
    except TransportError as exc:
        print(f"error: server unreachable: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    text = result.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcap", description="History-based capabilities: servers, model checker, benches.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    mc = sub.add_parser("model-check", help="explore the protocol model for one automaton")
    mc.add_argument("--sa", required=True, help="automaton JSON file")
    mc.add_argument("--depth", type=int, default=8)
    mc.add_argument("--strategy", default="full", help="full, minimal or radius:K")
    mc.add_argument("--max-states", type=int, default=2_000_000)
    mc.add_argument("--mutate", choices=MUTATIONS, help="inject a deliberate rule fault")
    mc.add_argument("--no-liveness", action="store_true")
    mc.add_argument("--compact", action="store_true")
    mc.set_defaults(func=cmd_model_check)

    sa = sub.add_parser("serve-auth", help="run the authorization server")
    sa.add_argument("--config", required=True)
    sa.set_defaults(func=cmd_serve_auth)

    sr = sub.add_parser("serve-rs", help="run a resource server")
    sr.add_argument("--config", required=True)
    sr.add_argument("--rsid")
    sr.set_defaults(func=cmd_serve_rs)

    cl = sub.add_parser("client", help="replay a scenario script")
    cl.add_argument("--script", required=True)
    cl.set_defaults(func=cmd_client)

    be = sub.add_parser("bench", help="run an experiment and print CSV")
    be.add_argument("experiment", choices=sorted(EXPERIMENTS))
    be.add_argument("--trials", type=int, default=MIN_TRIALS)
    be.add_argument("--min-trials", type=int, default=MIN_TRIALS)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--transport", choices=("direct", "loopback", "udp"))
    be.add_argument("--requests", type=int)
    be.add_argument("--p", help="exp1/exp4 percentages, e.g. 0..100:10")
    be.add_argument("--n", help="exp2 automaton sizes, e.g. 1..15")
    be.add_argument("--mtu", type=int, default=DEFAULT_MTU)
    be.add_argument("--codec", choices=("json", "cbor"), default="json")
    be.add_argument("--r", help="exp3 request totals, e.g. 10000..100000:10000")
    be.add_argument("--bc", choices=("on", "off", "both"), default="both")
    be.add_argument("--sessions", type=int, default=100)
    be.add_argument("--configs", default=",".join(EXP4_CONFIGS))
    be.add_argument("--out", help="write CSV here instead of stdout")
    be.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
