import random

import pytest

from hcap.crossval import DENY, GRANT, cross_validate, implementation_outcomes, model_outcomes, random_trace
from hcap.library import chain, complete, workflow
from hcap.model import Model
from hcap.policy import Full, Minimal, Radius


@pytest.mark.parametrize("m,strategy", [
    (complete(2), Full()), (complete(2), Minimal()), (chain(), Minimal()), (workflow(), Radius(1)),
], ids=["m2-full", "m2-minimal", "chain-minimal", "workflow-radius1"])
def test_model_and_implementation_agree(m, strategy):
    report = cross_validate(Model(m, strategy), 60, length=24, seed=3)
    assert report.ok, report.mismatches[:1]
    assert report.traces == 60 and report.steps == 60 * 24


def test_traces_include_grants_and_denials():
    model = Model(complete(2))
    rng = random.Random(0)
    seen = set()
    for _ in range(20):
        trace = random_trace(model, rng, 24)
        seen.update(model_outcomes(model, trace))
    assert {GRANT, DENY} <= seen


def test_outcomes_are_per_step():
    model = Model(chain(), Minimal())
    trace = random_trace(model, random.Random(5), 30)
    assert len(implementation_outcomes(model, trace)) == len(model_outcomes(model, trace)) == 30


def test_mutated_model_disagrees_with_implementation():
    report = cross_validate(Model(complete(2), mutation="reqt-skip-append"), 50, seed=0)
    assert not report.ok
    idx, trace, want, got = report.mismatches[0]
    assert len(trace) == 24 and want != got
