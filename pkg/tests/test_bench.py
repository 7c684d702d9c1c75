import csv
import io

import pytest

from hcap.bench import (
    CSV_COLUMNS,
    MIN_TRIALS,
    chunk_boundary,
    ci95,
    exp1,
    exp2,
    exp3,
    exp4,
)

TIMING = {"latency_ms", "gc_ms", "gc_per_request_us", "request_us"}


def parse(text):
    return list(csv.DictReader(io.StringIO(text)))


def strip_timing(text):
    return [r for r in parse(text) if r["metric"] not in TIMING]


def test_ci95_known_values():
    mean, se, lo, hi = ci95([1.0, 2.0, 3.0, 4.0])
    assert mean == 2.5
    assert se == pytest.approx(0.6454972, rel=1e-6)
    assert (lo, hi) == pytest.approx((2.5 - 1.96 * se, 2.5 + 1.96 * se))
    assert ci95([7.0]) == (7.0, 0.0, 7.0, 7.0)


@pytest.mark.parametrize("fn", [exp1, exp2, exp3, exp4])
def test_too_few_trials_is_refused(fn):
    assert MIN_TRIALS == 30
    with pytest.raises(ValueError):
        fn(trials=MIN_TRIALS - 1)


def test_exp1_round_trips_equal_transitioning_share():
    res = exp1([0, 30, 100], trials=3, requests=100, transport="direct", min_trials=1)
    text = res.to_csv()
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    for p in (0, 30, 100):
        assert res.values("minimal", p, "as_round_trips") == [p] * 3
        assert res.values("minimal", p, "denied") == [0] * 3


def test_exp1_is_deterministic_apart_from_timing():
    a = exp1([20], trials=2, transport="direct", min_trials=1).to_csv()
    b = exp1([20], trials=2, transport="direct", min_trials=1).to_csv()
    assert strip_timing(a) == strip_timing(b)
    assert any(r["metric"] == "latency_ms" for r in parse(a))


def test_exp2_sizes_grow_superlinearly():
    res = exp2(range(1, 8), trials=1, requests=5, transport="direct", min_trials=1)
    sizes = [res.values("full", n, "payload_bytes")[0] for n in range(1, 8)]
    steps = [b - a for a, b in zip(sizes, sizes[1:])]
    assert all(s > 0 for s in steps)
    assert all(b > a for a, b in zip(steps, steps[1:]))
    caps = [res.values("full", n, "capability_bytes")[0] for n in range(1, 8)]
    assert caps == sorted(caps)


@pytest.mark.parametrize("codec", ["json", "cbor"])
def test_chunk_boundary_exists_and_is_sharp(codec):
    n = chunk_boundary(15, codec=codec)
    assert n is not None and n > 1
    res = exp2([n - 1, n], trials=1, requests=2, codec=codec, transport="direct", min_trials=1)
    assert res.values("full", n - 1, "chunks") == [1]
    assert res.values("full", n, "chunks")[0] > 1


def test_cbor_boundary_not_below_json():
    assert chunk_boundary(15, codec="cbor") >= chunk_boundary(15, codec="json")


def test_exp3_compression_bounds_entries():
    sessions, n = 10, 4
    res = exp3([2000], [False, True], trials=1, sessions=sessions, n_states=n, min_trials=1)
    assert res.values("bc", 2000, "entries_at_gc")[0] <= sessions * n
    assert res.values("bc", 2000, "max_session_entries")[0] <= n
    assert res.values("nobc", 2000, "entries_at_gc")[0] > sessions * n
    assert res.values("bc", 2000, "states_match") == [1.0]
    assert res.values("nobc", 2000, "states_match") == [1.0]


def test_exp4_compressed_batons_stay_small():
    res = exp4([0, 50, 100], ["nogc", "bc"], trials=1, requests=200, transport="direct", min_trials=1)
    assert res.values("bc", 100, "max_baton_entries")[0] <= 2
    assert res.values("bc", 50, "max_baton_entries")[0] <= 2
    assert res.values("nogc", 0, "batons") == [0.0]
    assert res.values("nogc", 100, "batons")[0] > 0
    assert res.values("nogc", 100, "max_baton_entries")[0] > 2
    for config in ("nogc", "bc"):
        for p in (0, 50, 100):
            assert res.values(config, p, "denied") == [0.0]
