"""Hypothesis strategies for automata, states and fragment strategies."""

import random

from hypothesis import strategies as st

from hcap.library import random_automaton
from hcap.policy import Full, Minimal, Radius


@st.composite
def automata(draw, max_states: int = 6, max_perms: int = 6):
    seed = draw(st.integers(0, 2**32 - 1))
    density = draw(st.sampled_from([0.3, 0.6, 0.9]))
    return random_automaton(random.Random(seed), max_states, max_perms, density)


@st.composite
def automaton_and_state(draw, max_states: int = 6, max_perms: int = 6):
    m = draw(automata(max_states, max_perms))
    q = draw(st.sampled_from(sorted(m.states)))
    return m, q


fragment_strategies = st.one_of(
    st.just(Full()), st.just(Minimal()), st.integers(1, 3).map(Radius)
)


@st.composite
def walks(draw, m, q, max_len: int = 12):
    """A run of defined transitioning steps from ``q``, as a permission list."""
    out = []
    for _ in range(draw(st.integers(0, max_len))):
        moves = sorted((p, t) for (s, p), t in m.delta.items() if s == q and t != q)
        if not moves:
            break
        p, q = draw(st.sampled_from(moves))
        out.append(p)
    return out
