import random

import pytest

from hcap.automaton import ExceptionList, Nil
from hcap.library import chain, complete, perm, random_automaton, single_state
from hcap.model import (
    MUTATIONS,
    Drop,
    Flush,
    Issue,
    MCap,
    Model,
    MUpd,
    ProtocolState,
    Recover,
    Request,
    Update,
)
from hcap.policy import Full, Minimal, build_fragment

from oracles import plain_explore, plain_frag, plain_state, rule_successors

M2 = complete(2)
P0, P1 = perm("p0"), perm("p1")


def issued(model):
    g = model.initial_state()
    return model.step(g, Issue())


def test_initial_state_and_its_transitions():
    model = Model(M2)
    g = model.initial_state()
    assert g == ProtocolState(2, "q0", 1, 1, Nil(0), frozenset())
    assert model.enabled_transitions(g) == [Issue(), Flush()]
    assert model.check_invariants(g) == []


def test_after_issue():
    model = Model(M2)
    g = issued(model)
    cap = MCap(1, build_fragment(M2, "q0", Full()))
    assert g.client == {cap} and g.clock == 3
    enabled = model.enabled_transitions(g)
    assert Request(P0, cap) in enabled and Request(P1, cap) in enabled
    assert Drop(frozenset({cap})) in enabled
    assert Recover(cap) not in enabled  # serial 1 is not in times(Nil(0))


def test_stationary_request_resets_exception():
    model = Model(M2)
    g = issued(model)
    cap = next(iter(g.client))
    nxt = model.step(g, Request(P0, cap))
    assert nxt.e_rs == Nil(1) and nxt.client == g.client and nxt.clock == 4


def test_transitioning_request_appends_and_issues():
    model = Model(M2)
    g = issued(model)
    cap = next(iter(g.client))
    nxt = model.step(g, Request(P1, cap))
    assert list(nxt.e_rs.chronological()) == [(P1, 3)]
    assert MCap(3, build_fragment(M2, "q0", Full()).at("n_q1")) in nxt.client
    assert model.effective_state(nxt) == "q1"


def test_minimal_request_produces_update():
    model = Model(M2, Minimal())
    g = issued(model)
    cap = next(iter(g.client))
    nxt = model.step(g, Request(P1, cap))
    (u,) = nxt.upds()
    assert u.exception == nxt.e_rs
    upd = model.step(nxt, Update(u))
    assert upd.q_as == "q1" and upd.t_as == nxt.clock


def test_stale_request_is_disabled_after_flush():
    model = Model(M2)
    g = issued(model)
    cap = next(iter(g.client))
    g = model.step(g, Flush())
    assert g.t_rs == 3 and g.t_as == 3
    assert model.step(g, Request(P0, cap)) is None


def test_flush_replays_matching_history():
    model = Model(M2)
    g = issued(model)
    g = model.step(g, Request(P1, next(iter(g.client))))
    g = model.step(g, Flush())
    assert g.q_as == "q1" and g.e_rs == Nil(3)
    assert model.effective_state(g) == "q1"


def test_effective_state_cases():
    model = Model(M2)
    g = model.initial_state()
    assert model.effective_state(g) == "q0"
    g = ProtocolState(9, "q0", 4, 4, ExceptionList.from_chronological(4, [(P1, 5), (P0, 6)]))
    assert model.effective_state(g) == "q0"
    g = ProtocolState(9, "q0", 4, 4, ExceptionList.from_chronological(4, [(P1, 5)]))
    assert model.effective_state(g) == "q1"


def test_hand_built_inv4_violation():
    model = Model(M2)
    wrong = MCap(3, build_fragment(M2, "q1", Full()))
    g = ProtocolState(5, "q0", 3, 3, Nil(2), frozenset({wrong}))
    assert model.check_invariants(g) == ["Inv4"]
    right = MCap(3, build_fragment(M2, "q0", Full()))
    assert model.check_invariants(ProtocolState(5, "q0", 3, 3, Nil(2), frozenset({right}))) == []


def test_unordered_exception_is_inv2():
    model = Model(M2)
    e = ExceptionList.unchecked(1, ((P1, 2), (P0, 3)))
    assert "Inv2" in model.check_invariants(ProtocolState(5, "q0", 1, 1, e))


def test_clock_must_dominate_stamps():
    model = Model(M2)
    assert "Inv1" in model.check_invariants(ProtocolState(1, "q0", 1, 1, Nil(0)))


def test_liveness_witness_shapes():
    model = Model(M2)
    assert model.liveness_witness(model.initial_state()) == [Issue()]
    g = issued(model)
    g = model.step(g, Request(P1, next(iter(g.client))))
    home = MCap(1, build_fragment(M2, "q0", Full()))
    assert model.liveness_witness(g) == [Issue(), Recover(home)]

    model = Model(M2, Minimal())
    g = issued(model)
    g = model.step(g, Request(P1, next(iter(g.client))))
    w = model.liveness_witness(g)
    assert [type(x) for x in w] == [Issue, Recover, Update, Issue]
    assert w[2] == Update(MUpd(g.e_rs))


@pytest.mark.parametrize("m,strategy,depth", [
    (M2, Full(), 8), (M2, Minimal(), 8), (single_state(2), Full(), 6),
], ids=["m2-full", "m2-minimal", "single"])
def test_exploration_matches_plain_search(m, strategy, depth):
    model = Model(m, strategy)
    report = model.explore(depth)
    assert report.ok and report.complete
    frags = {q: plain_frag(f) for q, f in model.frags.items()}
    assert (report.states, report.edges) == plain_explore(m, frags, depth)


def test_m2_depth8_frozen_counts():
    report = Model(M2).explore(8)
    assert (report.states, report.edges) == (394, 1742)
    assert report.liveness_checked == report.states and report.liveness_failed == 0


def test_single_state_never_appends():
    model = Model(single_state(2))
    seen = [model.initial_state()]
    for _ in range(5):
        seen = [t for g in seen for _, t in model.successors(g)]
        assert all(len(g.e_rs) == 0 for g in seen)
        seen = seen[:200]


def test_mutation_is_detected():
    assert MUTATIONS == ("reqt-skip-append",)
    report = Model(M2, mutation="reqt-skip-append").explore(8)
    assert not report.ok
    names = {v.name for v in report.violations}
    assert "Inv5" in names
    assert all(v.trace for v in report.violations)
    with pytest.raises(ValueError):
        Model(M2, mutation="nope")


def test_exploration_is_deterministic():
    a = Model(chain()).explore(6).to_obj()
    b = Model(chain()).explore(6).to_obj()
    a.pop("seconds"), b.pop("seconds")
    assert a == b


def test_canonical_is_idempotent_and_order_preserving():
    model = Model(M2)
    g = issued(model)
    g = model.step(g, Request(P1, next(iter(g.client))))
    g = model.step(g, Flush())
    c = model.canonical(g)
    assert model.canonical(c) == c
    assert model.effective_state(c) == model.effective_state(g)
    assert model.check_invariants(c) == []


@pytest.mark.parametrize("seed", range(4))
def test_successors_match_rule_restatement(seed):
    rng = random.Random(seed)
    m = random_automaton(rng, 3, 3, 0.8)
    model = Model(m, rng.choice([Full(), Minimal()]))
    frags = {q: plain_frag(f) for q, f in model.frags.items()}
    g = model.initial_state()
    for _ in range(200):
        succ = model.successors(g)
        ours = {plain_state(t) for _, t in succ}
        theirs = {t for _, t in rule_successors(m, frags, plain_state(g))}
        assert ours == theirs
        g = rng.choice(succ)[1]
