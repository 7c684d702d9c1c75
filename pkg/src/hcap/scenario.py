"""Scripted client scenarios with expected outcomes.

A script is a JSON object::

    {"uid": "alice", "mode": "core", "servers": ["rs0"], "clock": "scripted",
     "policy": {...} | "policy_path": "...",
     "steps": [{"id": "c", "op": "init"},
               {"id": "a", "op": "access", "perm": "UNLOCK coap://rs0/A", "expect": "grant"},
               {"op": "expect", "ref": "a", "outcome": "grant"}]}

Operations are ``init``, ``access``, ``recover``, ``submit_update``,
``reissue``, ``gc`` and ``expect``.  ``access`` and ``recover`` may present
the ticket produced by an earlier step through ``"cap": "<step id>"``.
With ``"connect": {"auth": "host:port", "servers": {"rs0": "host:port"}}``
the script talks to running servers over UDP instead of starting its own.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from .auth_server import Denied
from .automaton import Permission
from .clock import MonotoneClock, ScriptedClock
from .deploy import Client, Deployment, deploy
from .endpoints import AuthClient, RsClient
from .policy import PolicyTable
from .resource_server import AccessDenied
from .sync import GcConfig
from .tickets import Capability, Ticket, UpdateRequest
from .transport import UdpTransport, parse_address

OPS = ("init", "access", "recover", "submit_update", "reissue", "gc", "expect")
OUTCOMES = ("grant", "deny")


class ScriptError(ValueError):
    pass


@dataclass
class StepResult:
    index: int
    op: str
    outcome: str
    code: Optional[str] = None
    ticket: Optional[Ticket] = None
    returned: Optional[Ticket] = None

    def describe(self) -> str:
        return self.outcome + (f" ({self.code})" if self.code else "")


@dataclass
class Mismatch:
    step: int
    expected: str
    actual: str

    def __str__(self) -> str:
        return f"step {self.step}: expected {self.expected}, got {self.actual}"


@dataclass
class ScenarioReport:
    results: list[StepResult] = field(default_factory=list)
    mismatches: list[Mismatch] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches


@dataclass
class Scenario:
    steps: list[dict]
    policy: PolicyTable
    uid: str = "alice"
    mode: str = "core"
    servers: list[str] = field(default_factory=lambda: ["rs0"])
    clock: str = "scripted"
    transport: str = "loopback"
    gc: GcConfig = field(default_factory=GcConfig)
    connect: Optional[dict] = None

    @classmethod
    def from_obj(cls, obj: Any, base_dir: Optional[Path] = None) -> "Scenario":
        if not isinstance(obj, dict):
            raise ScriptError("script must be a JSON object")
        connect = obj.get("connect")
        if connect is not None and (
            not isinstance(connect, dict) or "auth" not in connect or not isinstance(connect.get("servers"), dict)
        ):
            raise ScriptError("connect needs 'auth' and a 'servers' map of addresses")
        try:
            if connect is not None and "policy" not in obj and "policy_path" not in obj:
                policy = PolicyTable()
            elif "policy" in obj:
                policy = PolicyTable.from_obj(obj["policy"])
            elif "policy_path" in obj:
                path = Path(obj["policy_path"])
                if base_dir is not None and not path.is_absolute():
                    path = base_dir / path
                policy = PolicyTable.load(path)
            else:
                raise ScriptError("script needs 'policy' or 'policy_path'")
            gc = GcConfig.from_obj(obj.get("gc", {}))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ScriptError(f"bad policy or gc section: {exc}") from exc
        clock = obj.get("clock", "scripted")
        if clock not in ("scripted", "live"):
            raise ScriptError(f"clock must be 'scripted' or 'live', not {clock!r}")
        sc = cls(
            steps=list(obj.get("steps", [])),
            policy=policy,
            uid=str(obj.get("uid", "alice")),
            mode=str(obj.get("mode", "core")),
            servers=list(obj.get("servers", ["rs0"])),
            clock=clock,
            transport=str(obj.get("transport", "loopback")),
            gc=gc,
            connect=obj.get("connect"),
        )
        sc.validate()
        return sc

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Scenario":
        path = Path(path)
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ScriptError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_obj(obj, path.parent)

    def validate(self) -> None:
        """Check operations, outcome names and that references point backwards."""
        seen: set[str] = set()
        for i, step in enumerate(self.steps):
            if not isinstance(step, dict) or step.get("op") not in OPS:
                raise ScriptError(f"step {i}: unknown or missing op")
            op = step["op"]
            for key in ("ref", "cap", "ticket"):
                if key in step and step[key] not in seen:
                    raise ScriptError(f"step {i}: {key} {step[key]!r} does not name an earlier step")
            if op == "expect" and "ref" not in step:
                raise ScriptError(f"step {i}: expect needs a ref")
            want = step.get("outcome" if op == "expect" else "expect")
            if want is not None and want not in OUTCOMES:
                raise ScriptError(f"step {i}: outcome must be one of {OUTCOMES}")
            if op == "access":
                if "perm" not in step:
                    raise ScriptError(f"step {i}: access needs a perm")
                try:
                    Permission.parse(step["perm"])
                except ValueError as exc:
                    raise ScriptError(f"step {i}: {exc}") from exc
            if op == "submit_update" and "ticket" not in step:
                raise ScriptError(f"step {i}: submit_update needs a ticket")
            if "id" in step:
                if step["id"] in seen:
                    raise ScriptError(f"step {i}: duplicate id {step['id']!r}")
                seen.add(step["id"])

    def deploy(self) -> Deployment:
        if self.connect is not None:
            net = UdpTransport(str(self.connect.get("codec", "json")))
            return Deployment(
                None,  # type: ignore[arg-type]
                {},
                AuthClient(net, parse_address(self.connect["auth"])),
                {r: RsClient(net, parse_address(a)) for r, a in self.connect["servers"].items()},
            )
        clock = ScriptedClock() if self.clock == "scripted" else MonotoneClock()
        return deploy(self.policy, self.servers, self.mode, self.gc, self.transport, clock=clock)

    def run(self, dep: Optional[Deployment] = None) -> ScenarioReport:
        own = dep is None
        dep = dep or self.deploy()
        try:
            return _Runner(self, dep).run()
        finally:
            if own:
                dep.close()


class _Runner:
    def __init__(self, scenario: Scenario, dep: Deployment):
        self.sc = scenario
        self.dep = dep
        self.clients: dict[str, Client] = {}
        self.by_id: dict[str, StepResult] = {}
        self.report = ScenarioReport()

    def client(self, step: dict) -> Client:
        uid = str(step.get("uid", self.sc.uid))
        if uid not in self.clients:
            self.clients[uid] = self.dep.client(uid)
        return self.clients[uid]

    def ticket(self, step: dict, key: str) -> Optional[Ticket]:
        ref = step.get(key)
        if ref is None:
            return None
        res = self.by_id[ref]
        if key == "ticket" and res.returned is not None:
            return res.returned
        return res.ticket

    def run(self) -> ScenarioReport:
        for i, step in enumerate(self.sc.steps):
            if step["op"] == "expect":
                self.check(i, self.by_id[step["ref"]], step["outcome"], step.get("code"))
                continue
            res = self.perform(i, step)
            self.report.results.append(res)
            if "id" in step:
                self.by_id[step["id"]] = res
            if "expect" in step:
                self.check(i, res, step["expect"], step.get("code"))
        return self.report

    def check(self, i: int, res: StepResult, outcome: str, code: Optional[str]) -> None:
        if res.outcome != outcome or (code is not None and res.code != code):
            want = outcome + (f" ({code})" if code else "")
            self.report.mismatches.append(Mismatch(i, want, res.describe()))

    def perform(self, i: int, step: dict) -> StepResult:
        op = step["op"]
        c = self.client(step)
        try:
            if op == "init":
                return StepResult(i, op, "grant", ticket=c.init())
            if op == "reissue":
                return StepResult(i, op, "grant", ticket=c.reissue())
            if op == "gc":
                if self.sc.connect is not None:
                    raise ScriptError(f"step {i}: gc can only be triggered on in-process servers")
                server = step.get("server", self.sc.servers[0])
                self.dep.servers[server].run_gc()
                return StepResult(i, op, "grant")
            if op == "access":
                cap = self.ticket(step, "cap")
                if cap is not None and not isinstance(cap, Capability):
                    raise ScriptError(f"step {i}: 'cap' refers to an update request")
                r = c.access(Permission.parse(step["perm"]), cap, bool(step.get("auto_update", True)))
                returned = r.ticket
                if not r.granted:
                    return StepResult(i, op, "deny", r.code)
                return StepResult(i, op, "grant", r.code, r.ticket or c.cap, returned)
            if op == "recover":
                cap = self.ticket(step, "cap") or c.cap
                assert isinstance(cap, Capability)
                server = step.get("server") or cap.vid or self.sc.servers[0]
                got = c.rs_ports[server].recover(c.uid, cap)
                return StepResult(i, op, "grant", ticket=got, returned=got)
            if op == "submit_update":
                upd = self.ticket(step, "ticket")
                if not isinstance(upd, UpdateRequest):
                    raise ScriptError(f"step {i}: 'ticket' does not refer to an update request")
                return StepResult(i, op, "grant", ticket=c.submit_update(upd))
        except (AccessDenied, Denied) as exc:
            return StepResult(i, op, "deny", exc.code)
        raise ScriptError(f"step {i}: unsupported op {op!r}")
