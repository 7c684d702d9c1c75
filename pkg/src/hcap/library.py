"""Stock automata used by tests, benches and examples."""

from __future__ import annotations

import random
from typing import Callable, Optional

from .automaton import Permission, SecurityAutomaton

DEFAULT_SERVER = "rs0"


def perm(name: str, server: str = DEFAULT_SERVER, op: str = "POST") -> Permission:
    return Permission(op, f"coap://{server}/{name}")


def complete(n: int, server_of: Optional[Callable[[int], str]] = None) -> SecurityAutomaton:
    """The n-state automaton with a transition between every ordered pair.

    Permission ``p_j`` leads from any state to ``q_j``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    where = server_of or (lambda j: DEFAULT_SERVER)
    perms = [perm(f"p{j}", where(j)) for j in range(n)]
    triples = [(f"q{i}", perms[j], f"q{j}") for i in range(n) for j in range(n)]
    return SecurityAutomaton.from_triples(triples, "q0")


def oscillator(server: str = DEFAULT_SERVER) -> SecurityAutomaton:
    """Two states; ``p0`` is always stationary and ``p1`` always switches state."""
    p0, p1 = perm("p0", server), perm("p1", server)
    return SecurityAutomaton.from_triples(
        [("q0", p0, "q0"), ("q1", p0, "q1"), ("q0", p1, "q1"), ("q1", p1, "q0")], "q0"
    )


def chain(server: str = DEFAULT_SERVER) -> SecurityAutomaton:
    """Three doors that must be unlocked in order A, B, C."""
    a, b, c = (perm(x, server, "UNLOCK") for x in ("A", "B", "C"))
    return SecurityAutomaton.from_triples(
        [("q0", a, "q1"), ("q1", b, "q2"), ("q2", c, "q3")], "q0", states=["q3"]
    )


def workflow(server: str = DEFAULT_SERVER) -> SecurityAutomaton:
    """Two states: ``p1`` is forbidden once ``p3`` has been exercised."""
    p1, p2, p3 = (perm(x, server) for x in ("p1", "p2", "p3"))
    return SecurityAutomaton.from_triples(
        [
            ("q0", p1, "q0"),
            ("q0", p2, "q0"),
            ("q0", p3, "q1"),
            ("q1", p2, "q1"),
            ("q1", p3, "q1"),
        ],
        "q0",
    )


def single_state(n_perms: int = 2, server: str = DEFAULT_SERVER) -> SecurityAutomaton:
    perms = [perm(f"p{j}", server) for j in range(n_perms)]
    return SecurityAutomaton.from_triples([("q0", p, "q0") for p in perms], "q0")


def random_automaton(
    rng: random.Random,
    max_states: int = 4,
    max_perms: int = 4,
    density: float = 0.6,
    servers: tuple[str, ...] = (DEFAULT_SERVER,),
) -> SecurityAutomaton:
    n_states = rng.randint(1, max_states)
    n_perms = rng.randint(1, max_perms)
    states = [f"q{i}" for i in range(n_states)]
    perms = [perm(f"p{j}", rng.choice(servers)) for j in range(n_perms)]
    triples = [
        (q, p, rng.choice(states))
        for q in states
        for p in perms
        if rng.random() < density
    ]
    return SecurityAutomaton.from_triples(triples, "q0", states=states, alphabet=perms)
