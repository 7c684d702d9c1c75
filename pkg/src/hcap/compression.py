"""Loop elimination for exception lists (baton compression)."""

from __future__ import annotations

from .automaton import ExceptionList, Name, Permission, SAFragment, frag_step


def visited_names(e: ExceptionList, f: SAFragment) -> list[Name]:
    """Names reached after each entry of ``e`` when replayed from ``f``.

    Raises ``ValueError`` if the replay leaves the named part of the fragment.
    """
    out: list[Name] = []
    cur = f
    for p, t in e.chronological():
        nxt = frag_step(cur, p)
        if not isinstance(nxt, SAFragment):
            raise ValueError(f"history cannot be replayed at entry ({p}, {t})")
        out.append(nxt.current)
        cur = nxt
    return out


def compress_exception(e: ExceptionList, f: SAFragment) -> ExceptionList:
    """Remove loops from ``e``, whose base corresponds to the current name of ``f``.

    The result visits each name at most once (the start name is not counted),
    so it never has more entries than ``f`` has names.  The base timestamp and
    the newest timestamp are kept.  The newest permission is kept too unless
    the loop it closes forces a different permission onto that timestamp.
    """
    names = visited_names(e, f)
    start = f.current
    kept: list[tuple[Permission, int, Name]] = []
    index: dict[Name, int] = {}
    for (p, t), name in zip(e.chronological(), names):
        i = index.get(name)
        if i is None:
            index[name] = len(kept)
            kept.append((p, t, name))
            continue
        before = kept[i - 1][2] if i > 0 else start
        direct = frag_step(f.at(before), p)
        if isinstance(direct, SAFragment) and direct.current == name:
            entry = (p, t, name)
        else:
            entry = (kept[i][0], t, name)
        for dropped in kept[i:]:
            index.pop(dropped[2], None)
        del kept[i:]
        index[name] = len(kept)
        kept.append(entry)
    return ExceptionList.from_chronological(e.base_ts, [(p, t) for p, t, _ in kept])
