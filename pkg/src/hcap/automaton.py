"""Security automata, SA fragments and exception lists.

Everything in this module is immutable and side-effect free.  Undefined
results are returned as ``None``; the "unknown target" marker of a fragment
transition is the :data:`UNKNOWN` singleton.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Optional, Union
from urllib.parse import urlsplit

StateId = str
Name = str


class _Unknown:
    """Marker for a transition that is permitted but whose target is not given."""

    _instance: Optional["_Unknown"] = None

    def __new__(cls) -> "_Unknown":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNKNOWN"

    def __reduce__(self):
        return (_Unknown, ())


UNKNOWN = _Unknown()


@dataclass(frozen=True, order=True)
class Permission:
    """An operation-resource pair, e.g. ``GET coap://rs0/lock``."""

    operation: str
    resource: str

    def __post_init__(self) -> None:
        if not self.operation or " " in self.operation:
            raise ValueError(f"invalid operation {self.operation!r}")
        if not urlsplit(self.resource).netloc:
            raise ValueError(f"resource {self.resource!r} has no authority component")

    @classmethod
    def parse(cls, text: str) -> "Permission":
        op, sep, resource = text.partition(" ")
        if not sep:
            raise ValueError(f"permission {text!r} is not of the form 'OP uri'")
        return cls(op, resource)

    @property
    def server(self) -> str:
        """The resource server holding the resource (URI authority)."""
        return urlsplit(self.resource).netloc

    def __str__(self) -> str:
        return f"{self.operation} {self.resource}"


@dataclass(frozen=True)
class SecurityAutomaton:
    alphabet: frozenset[Permission]
    states: frozenset[StateId]
    initial: StateId
    delta: Mapping[tuple[StateId, Permission], StateId]

    def __post_init__(self) -> None:
        object.__setattr__(self, "alphabet", frozenset(self.alphabet))
        object.__setattr__(self, "states", frozenset(self.states))
        object.__setattr__(self, "delta", MappingProxyType(dict(self.delta)))
        if self.initial not in self.states:
            raise ValueError(f"initial state {self.initial!r} not in states")
        for (q, p), target in self.delta.items():
            if q not in self.states or target not in self.states:
                raise ValueError(f"transition {q!r} --{p}--> {target!r} uses unknown state")
            if p not in self.alphabet:
                raise ValueError(f"transition permission {p} not in alphabet")
        object.__setattr__(
            self,
            "_hash",
            hash((self.alphabet, self.states, self.initial, frozenset(self.delta.items()))),
        )

    @classmethod
    def from_triples(
        cls,
        triples: Iterable[tuple[StateId, Permission, StateId]],
        initial: StateId,
        states: Iterable[StateId] = (),
        alphabet: Iterable[Permission] = (),
    ) -> "SecurityAutomaton":
        delta: dict[tuple[StateId, Permission], StateId] = {}
        all_states = set(states) | {initial}
        all_perms = set(alphabet)
        for q, p, target in triples:
            if delta.get((q, p), target) != target:
                raise ValueError(f"nondeterministic transition from {q!r} on {p}")
            delta[(q, p)] = target
            all_states.update((q, target))
            all_perms.add(p)
        return cls(frozenset(all_perms), frozenset(all_states), initial, delta)

    def triples(self) -> list[tuple[StateId, Permission, StateId]]:
        return sorted((q, p, t) for (q, p), t in self.delta.items())

    def __hash__(self) -> int:
        return self._hash  # type: ignore[attr-defined]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SecurityAutomaton):
            return NotImplemented
        if self is other:
            return True
        return (
            self._hash == other._hash  # type: ignore[attr-defined]
            and self.alphabet == other.alphabet
            and self.states == other.states
            and self.initial == other.initial
            and dict(self.delta) == dict(other.delta)
        )


def _check_state(m: SecurityAutomaton, q: StateId) -> None:
    if q not in m.states:
        raise ValueError(f"{q!r} is not a state of the automaton")


def sa_step(m: SecurityAutomaton, q: StateId, p: Permission) -> Optional[StateId]:
    """``delta(q, p)``, or ``None`` where the transition function is undefined."""
    _check_state(m, q)
    if p not in m.alphabet:
        raise ValueError(f"{p} is not in the automaton's alphabet")
    return m.delta.get((q, p))


def stationary_set(m: SecurityAutomaton, q: StateId) -> frozenset[Permission]:
    _check_state(m, q)
    return frozenset(p for p in m.alphabet if m.delta.get((q, p)) == q)


def transitioning_set(m: SecurityAutomaton, q: StateId) -> frozenset[Permission]:
    _check_state(m, q)
    return frozenset(
        p for p in m.alphabet if m.delta.get((q, p)) not in (None, q)
    )


Target = Union[Name, _Unknown]


@dataclass(frozen=True)
class StateDef:
    """Stationary permissions and outgoing transitions of one fragment name."""

    sp: frozenset[Permission] = frozenset()
    trans: Mapping[Permission, Target] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "sp", frozenset(self.sp))
        object.__setattr__(self, "trans", MappingProxyType(dict(self.trans)))
        overlap = self.sp & self.trans.keys()
        if overlap:
            raise ValueError(f"permissions both stationary and transitioning: {sorted(map(str, overlap))}")

    def __hash__(self) -> int:
        return hash((self.sp, frozenset(self.trans.items())))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StateDef):
            return NotImplemented
        return self.sp == other.sp and dict(self.trans) == dict(other.trans)

    def size(self) -> int:
        return len(self.sp) + len(self.trans)


@dataclass(frozen=True)
class SAFragment:
    """A (possibly partial) transition diagram together with a current name."""

    defs: Mapping[Name, StateDef]
    current: Name

    def __post_init__(self) -> None:
        object.__setattr__(self, "defs", MappingProxyType(dict(self.defs)))
        if self.current not in self.defs:
            raise ValueError(f"current name {self.current!r} not defined")
        for name, sdef in self.defs.items():
            for p, target in sdef.trans.items():
                if target is not UNKNOWN and target not in self.defs:
                    raise ValueError(f"{name!r} --{p}--> {target!r}: undefined name")
        object.__setattr__(self, "_hash", hash((frozenset(self.defs.items()), self.current)))

    def __hash__(self) -> int:
        return self._hash  # type: ignore[attr-defined]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SAFragment):
            return NotImplemented
        return (
            self._hash == other._hash  # type: ignore[attr-defined]
            and self.current == other.current
            and dict(self.defs) == dict(other.defs)
        )

    @property
    def here(self) -> StateDef:
        return self.defs[self.current]

    def at(self, name: Name) -> "SAFragment":
        """The same diagram with a different current name."""
        if name not in self.defs:
            raise ValueError(f"name {name!r} not defined")
        return SAFragment(self.defs, name)

    def transition_count(self) -> int:
        return sum(d.size() for d in self.defs.values())

    def permissions(self) -> frozenset[Permission]:
        out: set[Permission] = set()
        for d in self.defs.values():
            out |= d.sp
            out |= d.trans.keys()
        return frozenset(out)


FragResult = Union[SAFragment, _Unknown, None]


def frag_step(f: SAFragment, p: Permission) -> FragResult:
    here = f.here
    if p in here.sp:
        return f
    target = here.trans.get(p)
    if target is None:
        return None
    if target is UNKNOWN:
        return UNKNOWN
    return f.at(target)


@dataclass(frozen=True)
class ExceptionList:
    """Timestamped history of transitioning permissions.

    ``entries`` is stored most-recent-first, as ``(permission, timestamp)``
    pairs, terminated by ``Nil(base_ts)``.  Timestamps must strictly increase
    from ``base_ts`` through the entries in chronological order.
    """

    base_ts: int
    entries: tuple[tuple[Permission, int], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple((p, int(t)) for p, t in self.entries))
        if not self.is_ordered():
            raise ValueError(f"exception timestamps not strictly increasing: {self.timeline()}")

    @classmethod
    def unchecked(cls, base_ts: int, entries: Iterable[tuple[Permission, int]] = ()) -> "ExceptionList":
        """Build without the ordering check (for hand-built invalid states)."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "base_ts", base_ts)
        object.__setattr__(obj, "entries", tuple(entries))
        return obj

    @classmethod
    def from_chronological(cls, base_ts: int, entries: Iterable[tuple[Permission, int]]) -> "ExceptionList":
        return cls(base_ts, tuple(reversed(list(entries))))

    def timeline(self) -> list[int]:
        return [self.base_ts] + [t for _, t in reversed(self.entries)]

    def is_ordered(self) -> bool:
        ts = self.timeline()
        return all(a < b for a, b in zip(ts, ts[1:]))

    def chronological(self) -> Iterator[tuple[Permission, int]]:
        return reversed(self.entries)

    def push(self, p: Permission, t: int) -> "ExceptionList":
        """``e . (p, t)`` -- record ``p`` exercised at time ``t``."""
        return ExceptionList(self.base_ts, ((p, t),) + self.entries)

    def times(self) -> frozenset[int]:
        return frozenset(self.timeline())

    @property
    def ts_first(self) -> int:
        return min(self.timeline())

    @property
    def ts_last(self) -> int:
        return max(self.timeline())

    @property
    def head(self) -> Optional[tuple[Permission, int]]:
        return self.entries[0] if self.entries else None

    def __len__(self) -> int:
        return len(self.entries)


def Nil(t: int) -> ExceptionList:
    return ExceptionList(t)


def sa_run(m: SecurityAutomaton, q: StateId, e: ExceptionList) -> Optional[StateId]:
    """Replay ``e`` oldest-first from ``q``; ``None`` if any step is undefined."""
    _check_state(m, q)
    state: Optional[StateId] = q
    for p, _ in e.chronological():
        state = m.delta.get((state, p))
        if state is None:
            return None
    return state


def _fold(f: SAFragment, perms: list[Permission]) -> FragResult:
    cur: FragResult = f
    for i, p in enumerate(perms):
        if not isinstance(cur, SAFragment):
            # an unknown target can only end a replay
            return None
        cur = frag_step(cur, p)
    return cur


def frag_run(f: SAFragment, e: ExceptionList) -> FragResult:
    return _fold(f, [p for p, _ in e.chronological()])


def _split_check(t: int, e: ExceptionList) -> None:
    if t not in e.times():
        raise ValueError(f"timestamp {t} does not occur in the exception list")


def frag_run_upto(t: int, f: SAFragment, e: ExceptionList) -> FragResult:
    _split_check(t, e)
    return _fold(f, [p for p, ts in e.chronological() if ts <= t])


def frag_run_after(t: int, f: SAFragment, e: ExceptionList) -> FragResult:
    _split_check(t, e)
    return _fold(f, [p for p, ts in e.chronological() if ts > t])
