"""Shared message vocabulary: production events, commands, directives, injections.

These are the payloads that cross the interface layer between the emulation,
the control system, and the scenario manager.  Event kinds form a closed set;
every event carries the pair (time, seq) that totally orders the stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

# Closed vocabulary of production events emitted by the emulation.
EVENT_KINDS = frozenset(
    {
        "order-released",
        "shuttle-departed",
        "shuttle-arrived",
        "op-started",
        "op-finished",
        "machine-down",
        "machine-up",
        "product-rejected",
        "supply-blocked",
        "supply-restored",
        "order-completed",
        "order-cancelled",
    }
)

COMMAND_KINDS = frozenset(
    {"move-shuttle", "start-op", "release-order", "cancel-order", "end-of-round"}
)

DIRECTIVE_KINDS = frozenset(
    {
        "insert-order",
        "cancel-order",
        "set-priority",
        "announce-breakdown",
        "announce-supply-block",
    }
)

INJECTION_KINDS = frozenset(
    {"machine-down", "machine-up", "supply-shortage", "supply-restore", "product-reject"}
)

REJECT_POLICIES = frozenset({"rework", "scrap"})


class MessageError(ValueError):
    """Malformed or inconsistent message payload."""


@dataclass(frozen=True)
class SimEvent:
    """One timestamped production event.

    (time, seq) strictly increases across a run's stream; seq has no gaps.
    Subject fields are filled as applicable for the kind; ``node`` is the
    transport-graph location for shuttle and release events.
    """

    time: int
    seq: int
    kind: str
    machine: str | None = None
    shuttle: str | None = None
    order: str | None = None
    node: str | None = None
    info: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise MessageError(f"unknown event kind {self.kind!r}")
        if self.time < 0 or self.seq < 0:
            raise MessageError("time and seq must be non-negative")

    def sort_key(self) -> tuple[str, str, str, str, str]:
        # Batch insertion order: kind lexical rank, then subject ids.
        return (
            self.kind,
            self.machine or "",
            self.shuttle or "",
            self.order or "",
            self.node or "",
        )

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"time": self.time, "seq": self.seq, "kind": self.kind}
        for key in ("machine", "shuttle", "order", "node"):
            value = getattr(self, key)
            if value is not None:
                d[key] = value
        if self.info:
            d["info"] = dict(self.info)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SimEvent":
        return cls(
            time=d["time"],
            seq=d["seq"],
            kind=d["kind"],
            machine=d.get("machine"),
            shuttle=d.get("shuttle"),
            order=d.get("order"),
            node=d.get("node"),
            info=dict(d.get("info", {})),
        )


@dataclass(frozen=True)
class ControlCommand:
    """A control decision sent to the emulation.

    move-shuttle may name a ``carry`` order to load at the shuttle's current
    node before departing; start-op names the ``operation`` kind because the
    emulation holds no routing data.  release-order materializes an order at
    the input station; cancel-order removes a product resting at a node.
    """

    kind: str
    shuttle: str | None = None
    destination: str | None = None
    carry: str | None = None
    machine: str | None = None
    order: str | None = None
    operation: str | None = None
    holon: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in COMMAND_KINDS:
            raise MessageError(f"unknown command kind {self.kind!r}")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind}
        for key in ("shuttle", "destination", "carry", "machine", "order", "operation", "holon"):
            value = getattr(self, key)
            if value is not None:
                d[key] = value
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ControlCommand":
        return cls(
            kind=d["kind"],
            shuttle=d.get("shuttle"),
            destination=d.get("destination"),
            carry=d.get("carry"),
            machine=d.get("machine"),
            order=d.get("order"),
            operation=d.get("operation"),
            holon=d.get("holon"),
        )


@dataclass(frozen=True)
class ControlDirective:
    """A scenario-manager instruction to the control system."""

    kind: str
    order: dict[str, Any] | None = None  # insert-order payload
    order_id: str | None = None
    priority: int | None = None
    machine: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in DIRECTIVE_KINDS:
            raise MessageError(f"unknown directive kind {self.kind!r}")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind}
        if self.order is not None:
            d["order"] = dict(self.order)
        for key in ("order_id", "priority", "machine"):
            value = getattr(self, key)
            if value is not None:
                d[key] = value
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ControlDirective":
        return cls(
            kind=d["kind"],
            order=d.get("order"),
            order_id=d.get("order_id"),
            priority=d.get("priority"),
            machine=d.get("machine"),
        )


@dataclass(frozen=True)
class Injection:
    """A disturbance applied directly to the emulation."""

    kind: str
    machine: str | None = None
    order: str | None = None
    duration: int | None = None
    policy: str | None = None  # product-reject: rework | scrap

    def __post_init__(self) -> None:
        if self.kind not in INJECTION_KINDS:
            raise MessageError(f"unknown injection kind {self.kind!r}")
        if self.duration is not None and self.duration <= 0:
            raise MessageError("injection duration must be > 0")
        if self.kind == "product-reject":
            if self.policy not in REJECT_POLICIES:
                raise MessageError(f"product-reject policy must be one of {sorted(REJECT_POLICIES)}")
            if self.order is None:
                raise MessageError("product-reject requires an order target")
        elif self.machine is None:
            raise MessageError(f"{self.kind} requires a machine target")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind}
        for key in ("machine", "order", "duration", "policy"):
            value = getattr(self, key)
            if value is not None:
                d[key] = value
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Injection":
        return cls(
            kind=d["kind"],
            machine=d.get("machine"),
            order=d.get("order"),
            duration=d.get("duration"),
            policy=d.get("policy"),
        )


@dataclass(frozen=True)
class Notice:
    """Emulation-side notification outside the production event stream.

    Covers rejected commands and ignored injections; delivered with the next
    event batch so the control can clear stale claims.
    """

    time: int
    kind: str  # command-rejected | injection-ignored
    reason: str
    command: dict[str, Any] | None = None
    injection: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"time": self.time, "kind": self.kind, "reason": self.reason}
        if self.command is not None:
            d["command"] = dict(self.command)
        if self.injection is not None:
            d["injection"] = dict(self.injection)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Notice":
        return cls(
            time=d["time"],
            kind=d["kind"],
            reason=d["reason"],
            command=d.get("command"),
            injection=d.get("injection"),
        )
