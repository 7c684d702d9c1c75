"""Static access-control policy and fragment construction."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from .automaton import (
    UNKNOWN,
    Name,
    Permission,
    SAFragment,
    SecurityAutomaton,
    StateDef,
    StateId,
    stationary_set,
    transitioning_set,
)
from .codec import automaton_from_obj, automaton_to_obj


@dataclass(frozen=True)
class Full:
    def __str__(self) -> str:
        return "full"


@dataclass(frozen=True)
class Minimal:
    def __str__(self) -> str:
        return "minimal"


@dataclass(frozen=True)
class Radius:
    k: int = 1

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("radius must be at least 1")

    def __str__(self) -> str:
        return f"radius:{self.k}"


FragmentStrategy = Union[Full, Minimal, Radius]


def parse_strategy(text: str) -> FragmentStrategy:
    text = text.strip().lower()
    if text == "full":
        return Full()
    if text == "minimal":
        return Minimal()
    kind, _, arg = text.partition(":")
    if kind == "radius":
        return Radius(int(arg or 1))
    raise ValueError(f"unknown fragment strategy {text!r}")


def state_name(q: StateId) -> Name:
    return "n_" + q


def _within(m: SecurityAutomaton, q: StateId, k: int) -> set[StateId]:
    dist = {q: 0}
    queue = deque([q])
    while queue:
        s = queue.popleft()
        if dist[s] == k:
            continue
        for p in sorted(transitioning_set(m, s)):
            t = m.delta[(s, p)]
            if t not in dist:
                dist[t] = dist[s] + 1
                queue.append(t)
    return set(dist)


def build_fragment(m: SecurityAutomaton, q: StateId, strategy: FragmentStrategy) -> SAFragment:
    if q not in m.states:
        raise ValueError(f"{q!r} is not a state of the automaton")
    if isinstance(strategy, Full):
        region = set(m.states)
    elif isinstance(strategy, Minimal):
        region = {q}
    else:
        region = _within(m, q, strategy.k)
    defs: dict[Name, StateDef] = {}
    for s in region:
        trans = {}
        for p in transitioning_set(m, s):
            t = m.delta[(s, p)]
            trans[p] = state_name(t) if t in region else UNKNOWN
        defs[state_name(s)] = StateDef(stationary_set(m, s), trans)
    return SAFragment(defs, state_name(q))


def rs_of(p: Permission) -> str:
    return p.server


def validate_policy_eq1(m: SecurityAutomaton) -> bool:
    """Every state is entered only by permissions of a single resource server."""
    entering: dict[StateId, str] = {}
    for (_, p), target in m.delta.items():
        server = rs_of(p)
        if entering.setdefault(target, server) != server:
            return False
    return True


def rs_of_state(m: SecurityAutomaton, q: StateId, default: Optional[str] = None) -> str:
    """The server on which transitions into ``q`` are carried out.

    States nothing enters (typically the initial one) fall back to the server
    of their smallest outgoing permission, then to ``default``.
    """
    entering = sorted(rs_of(p) for (_, p), t in m.delta.items() if t == q)
    if entering:
        return entering[0]
    outgoing = sorted(p for (s, p) in m.delta if s == q)
    if outgoing:
        return rs_of(outgoing[0])
    if default is None:
        raise ValueError(f"no resource server can be associated with state {q!r}")
    return default


@dataclass(frozen=True)
class PolicyEntry:
    automaton: SecurityAutomaton
    strategy: FragmentStrategy = Radius(1)

    @property
    def alphabet(self) -> frozenset[Permission]:
        return self.automaton.alphabet


@dataclass
class PolicyTable:
    entries: dict[str, PolicyEntry] = field(default_factory=dict)
    default_server: str = "rs0"

    def lookup(self, uid: str) -> Optional[PolicyEntry]:
        return self.entries.get(uid)

    def grant(self, uid: str, m: SecurityAutomaton, strategy: FragmentStrategy = Radius(1)) -> None:
        self.entries[uid] = PolicyEntry(m, strategy)

    def check_multi(self) -> list[str]:
        """Uids whose automaton violates the single-server-per-target rule."""
        return sorted(u for u, e in self.entries.items() if not validate_policy_eq1(e.automaton))

    def to_obj(self) -> dict:
        automata: dict[str, Any] = {}
        uids: dict[str, Any] = {}
        index: dict[SecurityAutomaton, str] = {}
        for uid in sorted(self.entries):
            e = self.entries[uid]
            key = index.get(e.automaton)
            if key is None:
                key = index[e.automaton] = f"sa{len(index)}"
                automata[key] = automaton_to_obj(e.automaton)
            uids[uid] = {"automaton": key, "strategy": str(e.strategy)}
        return {"default_server": self.default_server, "automata": automata, "uids": uids}

    @classmethod
    def from_obj(cls, obj: Mapping[str, Any]) -> "PolicyTable":
        if not isinstance(obj, Mapping):
            raise ValueError("policy must be an object")
        default_strategy = parse_strategy(obj.get("default_strategy", "radius:1"))
        automata = {k: automaton_from_obj(v) for k, v in obj.get("automata", {}).items()}
        table = cls(default_server=obj.get("default_server", "rs0"))
        for uid, spec in obj.get("uids", {}).items():
            name = spec.get("automaton")
            if name not in automata:
                raise ValueError(f"uid {uid!r} refers to unknown automaton {name!r}")
            strategy = parse_strategy(spec["strategy"]) if "strategy" in spec else default_strategy
            table.entries[uid] = PolicyEntry(automata[name], strategy)
        return table

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PolicyTable":
        return cls.from_obj(json.loads(Path(path).read_text()))
