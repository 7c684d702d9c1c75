"""Deciding whether a fragment is a conservative description of an automaton."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .automaton import (
    UNKNOWN,
    Name,
    Permission,
    SAFragment,
    SecurityAutomaton,
    StateId,
    frag_step,
    sa_step,
    stationary_set,
    transitioning_set,
)


def _local_ok(f: SAFragment, m: SecurityAutomaton, name: Name, q: StateId) -> bool:
    sdef = f.defs[name]
    if not sdef.sp <= stationary_set(m, q):
        return False
    return sdef.trans.keys() <= transitioning_set(m, q)


def _propagate(
    f: SAFragment, m: SecurityAutomaton, pi: dict[Name, StateId], start: Name
) -> Optional[dict[Name, StateId]]:
    """Extend ``pi`` along named edges from ``start``; ``None`` on conflict."""
    pi = dict(pi)
    work = [start]
    while work:
        name = work.pop()
        q = pi[name]
        if not _local_ok(f, m, name, q):
            return None
        for p, target in f.defs[name].trans.items():
            if target is UNKNOWN:
                continue
            forced = m.delta[(q, p)]
            seen = pi.get(target)
            if seen is None:
                pi[target] = forced
                work.append(target)
            elif seen != forced:
                return None
    return pi


def find_embedding(f: SAFragment, m: SecurityAutomaton, q: StateId) -> Optional[dict[Name, StateId]]:
    """A witness mapping from fragment names to automaton states, if one exists."""
    if q not in m.states:
        raise ValueError(f"{q!r} is not a state of the automaton")
    if not f.permissions() <= m.alphabet:
        return None
    start = _propagate(f, m, {f.current: q}, f.current)
    if start is None:
        return None
    states = sorted(m.states)

    def search(pi: dict[Name, StateId]) -> Optional[dict[Name, StateId]]:
        free = [n for n in sorted(f.defs) if n not in pi]
        if not free:
            return pi
        name = free[0]
        for cand in states:
            trial = dict(pi)
            trial[name] = cand
            extended = _propagate(f, m, trial, name)
            if extended is not None:
                found = search(extended)
                if found is not None:
                    return found
        return None

    return search(start)


def is_safe_for(f: SAFragment, m: SecurityAutomaton, q: StateId) -> bool:
    return find_embedding(f, m, q) is not None


@dataclass(frozen=True)
class Lemma1Report:
    passed: bool
    clause: Optional[int] = None
    permission: Optional[Permission] = None
    detail: str = ""


def lemma1_check(f: SAFragment, m: SecurityAutomaton, q: StateId) -> Lemma1Report:
    """Check the three consequences of safety for every permission of the alphabet.

    Raises ``ValueError`` when ``f`` is not safe for ``m`` in ``q``.
    """
    if not is_safe_for(f, m, q):
        raise ValueError("fragment is not safe for the automaton in the given state")
    stat = stationary_set(m, q)
    trans = transitioning_set(m, q)
    here = f.here
    for p in sorted(m.alphabet | f.permissions()):
        result = frag_step(f, p)
        target = sa_step(m, q, p) if p in m.alphabet else None
        if result is not None and target is None:
            return Lemma1Report(False, 1, p, "fragment step defined but automaton step undefined")
        if p in here.sp and p not in stat:
            return Lemma1Report(False, 2, p, "stationary in fragment but not in automaton")
        if p in here.trans and p not in trans:
            return Lemma1Report(False, 2, p, "transitioning in fragment but not in automaton")
        if isinstance(result, SAFragment) and not is_safe_for(result, m, target):
            return Lemma1Report(False, 3, p, f"successor fragment not safe in {target!r}")
    return Lemma1Report(True)
