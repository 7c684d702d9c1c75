"""Plain-data (JSON/CBOR-ready) forms of automata, fragments and exceptions."""

from __future__ import annotations

import json
from typing import Any

from .automaton import (
    UNKNOWN,
    ExceptionList,
    Permission,
    SAFragment,
    SecurityAutomaton,
    StateDef,
)


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def fragment_to_obj(f: SAFragment) -> dict:
    defs = {}
    for name, sdef in f.defs.items():
        defs[name] = {
            "sp": sorted(str(p) for p in sdef.sp),
            "trans": {
                str(p): (None if t is UNKNOWN else t) for p, t in sdef.trans.items()
            },
        }
    return {"current": f.current, "defs": defs}


def fragment_from_obj(obj: Any) -> SAFragment:
    _expect(isinstance(obj, dict), "fragment must be an object")
    _expect(isinstance(obj.get("current"), str), "fragment.current must be a string")
    raw_defs = obj.get("defs")
    _expect(isinstance(raw_defs, dict), "fragment.defs must be an object")
    defs = {}
    for name, body in raw_defs.items():
        _expect(isinstance(body, dict), f"definition of {name!r} must be an object")
        sp = body.get("sp", [])
        trans = body.get("trans", {})
        _expect(isinstance(sp, list) and isinstance(trans, dict), f"bad definition of {name!r}")
        defs[name] = StateDef(
            frozenset(Permission.parse(s) for s in sp),
            {Permission.parse(k): (UNKNOWN if v is None else str(v)) for k, v in trans.items()},
        )
    return SAFragment(defs, obj["current"])


def exception_to_obj(e: ExceptionList) -> dict:
    return {"base": e.base_ts, "entries": [[str(p), t] for p, t in e.entries]}


def exception_from_obj(obj: Any) -> ExceptionList:
    _expect(isinstance(obj, dict), "exception must be an object")
    base = obj.get("base")
    entries = obj.get("entries", [])
    _expect(isinstance(base, int) and base >= 0, "exception.base must be a non-negative integer")
    _expect(isinstance(entries, list), "exception.entries must be a list")
    parsed = []
    for item in entries:
        _expect(
            isinstance(item, (list, tuple)) and len(item) == 2 and isinstance(item[1], int),
            f"bad exception entry {item!r}",
        )
        parsed.append((Permission.parse(item[0]), item[1]))
    return ExceptionList(base, tuple(parsed))


def automaton_to_obj(m: SecurityAutomaton) -> dict:
    return {
        "states": sorted(m.states),
        "initial": m.initial,
        "alphabet": sorted(str(p) for p in m.alphabet),
        "transitions": [[q, str(p), t] for q, p, t in m.triples()],
    }


def automaton_from_obj(obj: Any) -> SecurityAutomaton:
    _expect(isinstance(obj, dict), "automaton must be an object")
    _expect(isinstance(obj.get("initial"), str), "automaton.initial must be a string")
    transitions = obj.get("transitions")
    _expect(isinstance(transitions, list), "automaton.transitions must be a list")
    triples = []
    for item in transitions:
        _expect(isinstance(item, list) and len(item) == 3, f"bad transition {item!r}")
        triples.append((str(item[0]), Permission.parse(item[1]), str(item[2])))
    return SecurityAutomaton.from_triples(
        triples,
        obj["initial"],
        states=[str(s) for s in obj.get("states", [])],
        alphabet=[Permission.parse(s) for s in obj.get("alphabet", [])],
    )
