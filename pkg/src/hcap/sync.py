"""Garbage-collection configuration and the payload shipped to the authorization server."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from .automaton import ExceptionList, SAFragment
from .codec import exception_from_obj, exception_to_obj, fragment_from_obj, fragment_to_obj


@dataclass(frozen=True)
class GcConfig:
    interval_s: float = 8 * 3600.0
    size_threshold: int = 100_000
    length_threshold: int = 10_000
    hard_gc_inactivity_s: float = 24 * 3600.0
    baton_compression: bool = False

    def __post_init__(self) -> None:
        for name in ("interval_s", "size_threshold", "length_threshold", "hard_gc_inactivity_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"gc.{name} must be positive")

    @classmethod
    def from_obj(cls, obj: Mapping[str, Any]) -> "GcConfig":
        known = {k: obj[k] for k in cls.__dataclass_fields__ if k in obj}
        return cls(**known)


@dataclass(frozen=True)
class SessionFlush:
    exception: ExceptionList
    baton: bool


@dataclass
class GcPayload:
    rsid: str
    gc_time: int
    sessions: dict[str, SessionFlush] = field(default_factory=dict)

    def to_obj(self) -> dict:
        return {
            "rsid": self.rsid,
            "gc_time": self.gc_time,
            "sessions": {
                sid: {"exc": exception_to_obj(s.exception), "baton": s.baton}
                for sid, s in self.sessions.items()
            },
        }

    @classmethod
    def from_obj(cls, obj: Any) -> "GcPayload":
        if not isinstance(obj, dict) or not isinstance(obj.get("gc_time"), int):
            raise ValueError("malformed GC payload")
        sessions = {
            sid: SessionFlush(exception_from_obj(s["exc"]), bool(s["baton"]))
            for sid, s in obj.get("sessions", {}).items()
        }
        return cls(str(obj.get("rsid", "")), obj["gc_time"], sessions)

    def total_entries(self) -> int:
        return sum(len(s.exception) for s in self.sessions.values())


@dataclass(frozen=True)
class Baton:
    """An exception list in transit between resource servers.

    ``base`` is the fragment that describes the state at the base of the
    exception; it is only needed for compression and may be absent.
    """

    sessid: str
    exception: ExceptionList
    base: Optional[SAFragment] = None

    def to_obj(self) -> dict:
        out: dict[str, Any] = {"sessid": self.sessid, "exc": exception_to_obj(self.exception)}
        if self.base is not None:
            out["base"] = fragment_to_obj(self.base)
        return out

    @classmethod
    def from_obj(cls, obj: Any) -> "Baton":
        base = obj.get("base")
        return cls(
            str(obj["sessid"]),
            exception_from_obj(obj["exc"]),
            fragment_from_obj(base) if base is not None else None,
        )
