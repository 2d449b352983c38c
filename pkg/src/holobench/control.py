"""Reference holonic control system.

Order holons carry routing, due date, and priority; resource holons mirror
machine availability as learned from the event stream.  Decisions are a pure
function of the belief state, so two sessions fed the same records produce
the same commands in the same order.

Dispatch rule at an idle machine: among waiting products whose next step the
machine performs, pick by (priority desc, due asc, id asc).  Transport rule:
orders needing a move are served in the same rank order; the destination is
the output station when routing is done, otherwise the nearest believed-up,
unblocked machine capable of the next step (ties on machine id); the shuttle
is the idle one nearest the product (ties on shuttle id).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable

from .messages import ControlCommand, ControlDirective, Notice, SimEvent
from .model import ShopModel


class OrderBookError(ValueError):
    """Invalid order book document; message names the offending field."""


class ControlProtocolError(RuntimeError):
    """The control was attached to a session it cannot serve."""


@dataclass(frozen=True)
class ProductOrder:
    """One customer order: routing steps plus scheduling attributes."""

    id: str
    routing: tuple[str, ...]
    release: int
    due: int
    priority: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "routing": list(self.routing),
            "release": self.release,
            "due": self.due,
            "priority": self.priority,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ProductOrder":
        routing = d.get("routing")
        if not isinstance(routing, list) or not routing:
            raise OrderBookError(f"order {d.get('id')!r}: routing must be a non-empty list")
        for step in routing:
            if not isinstance(step, str):
                raise OrderBookError(f"order {d.get('id')!r}: routing steps must be strings")
        for key in ("release", "due"):
            if not isinstance(d.get(key), int) or d[key] < 0:
                raise OrderBookError(f"order {d.get('id')!r}: {key} must be a non-negative integer")
        if not isinstance(d.get("id"), str) or not d["id"]:
            raise OrderBookError("order id must be a non-empty string")
        priority = d.get("priority", 0)
        if not isinstance(priority, int):
            raise OrderBookError(f"order {d['id']!r}: priority must be an integer")
        return cls(
            id=d["id"],
            routing=tuple(routing),
            release=d["release"],
            due=d["due"],
            priority=priority,
        )


def load_orders(text: str) -> list[ProductOrder]:
    """Parse and validate an order book document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise OrderBookError(f"order book is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "orders" not in doc:
        raise OrderBookError("order book must be an object with an orders list")
    if not isinstance(doc["orders"], list):
        raise OrderBookError("orders must be a list")
    orders = [ProductOrder.from_dict(d) for d in doc["orders"]]
    seen: set[str] = set()
    for o in orders:
        if o.id in seen:
            raise OrderBookError(f"duplicate order id {o.id!r}")
        seen.add(o.id)
    return orders


def load_orders_file(path: str) -> list[ProductOrder]:
    with open(path, encoding="utf-8") as f:
        return load_orders(f.read())


@dataclass
class _OrderHolon:
    spec: ProductOrder
    progress: int = 0  # routing steps completed
    released: bool = False
    release_sent: bool = False
    node: str | None = None
    in_transit: bool = False
    processing_at: str | None = None
    dispatched_to: str | None = None  # start-op claim awaiting confirmation
    assigned_shuttle: str | None = None
    cancel_requested: bool = False
    cancel_sent: bool = False
    done: bool = False
    cancelled: bool = False
    scrapped: bool = False

    @property
    def open_(self) -> bool:
        return not (self.done or self.cancelled or self.scrapped)

    @property
    def next_operation(self) -> str | None:
        if self.progress >= len(self.spec.routing):
            return None
        return self.spec.routing[self.progress]

    def rank(self) -> tuple[int, int, str]:
        return (-self.spec.priority, self.spec.due, self.spec.id)


@dataclass
class _ResourceHolon:
    id: str
    node: str
    operations: dict[str, int]
    up: bool = True
    blocked: bool = False
    busy_order: str | None = None
    claimed: bool = False  # start-op issued this or a prior round, unconfirmed


@dataclass
class _ShuttleBelief:
    id: str
    node: str | None
    moving: bool = False
    cargo: str | None = None
    assigned_order: str | None = None


@dataclass
class ControlStats:
    commands_issued: int = 0
    directives_handled: int = 0
    reschedules: int = 0


class ReferenceControl:
    """Deterministic order/resource holon controller."""

    def __init__(self, model: ShopModel):
        self.model = model
        self._orders: dict[str, _OrderHolon] = {}
        self._machines = {
            mid: _ResourceHolon(id=mid, node=spec.node, operations=dict(spec.operations))
            for mid, spec in sorted(model.machines.items())
        }
        self._shuttles = {
            sid: _ShuttleBelief(id=sid, node=spec.home)
            for sid, spec in sorted(model.shuttles.items())
        }
        self.stats = ControlStats()

    # -- session wiring -------------------------------------------------------

    def check_model_hash(self, model_hash: str) -> None:
        if model_hash != self.model.model_hash:
            raise ControlProtocolError(
                "emulation model hash does not match the control's model"
            )

    def load_orders(self, orders: Iterable[ProductOrder]) -> None:
        for o in orders:
            self._orders[o.id] = _OrderHolon(spec=o)

    # -- belief updates --------------------------------------------------------

    def _apply_directive(self, d: ControlDirective) -> None:
        if d.kind == "insert-order":
            try:
                spec = ProductOrder.from_dict(d.order or {})
            except OrderBookError:
                return
            if spec.id in self._orders:
                return
            if any(not self.model.capable_machines(op) for op in spec.routing):
                return
            self._orders[spec.id] = _OrderHolon(spec=spec)
            self.stats.directives_handled += 1
        elif d.kind == "cancel-order":
            h = self._orders.get(d.order_id or "")
            if h is None or not h.open_:
                return
            h.cancel_requested = True
            if not h.released and not h.release_sent:
                # Never hit the floor; cancel is a pure book operation.
                h.cancelled = True
            self.stats.directives_handled += 1
        elif d.kind == "set-priority":
            h = self._orders.get(d.order_id or "")
            if h is None or d.priority is None:
                return
            h.spec = ProductOrder(
                id=h.spec.id,
                routing=h.spec.routing,
                release=h.spec.release,
                due=h.spec.due,
                priority=d.priority,
            )
            self.stats.directives_handled += 1
        elif d.kind == "announce-breakdown":
            r = self._machines.get(d.machine or "")
            if r is None:
                return
            r.up = False
            self.stats.directives_handled += 1
        elif d.kind == "announce-supply-block":
            r = self._machines.get(d.machine or "")
            if r is None:
                return
            r.blocked = True
            self.stats.directives_handled += 1

    def _apply_event(self, ev: SimEvent) -> None:
        h = self._orders.get(ev.order) if ev.order else None
        if ev.kind == "order-released":
            if h is not None:
                h.released = True
                h.node = ev.node
        elif ev.kind == "shuttle-departed":
            s = self._shuttles[ev.shuttle]
            s.moving = True
            s.node = None
            if ev.order and h is not None:
                s.cargo = ev.order
                h.in_transit = True
                h.node = None
        elif ev.kind == "shuttle-arrived":
            s = self._shuttles[ev.shuttle]
            s.moving = False
            s.node = ev.node
            s.cargo = None
            # A fetch arrival (no order aboard) keeps the claim so the carry
            # leg is issued next round; a delivery releases the shuttle.
            if ev.order and h is not None:
                h.in_transit = False
                h.node = ev.node
                if h.assigned_shuttle == ev.shuttle:
                    h.assigned_shuttle = None
                    s.assigned_order = None
        elif ev.kind == "op-started":
            r = self._machines[ev.machine]
            r.busy_order = ev.order
            r.claimed = False
            if h is not None:
                h.processing_at = ev.machine
                h.dispatched_to = None
        elif ev.kind == "op-finished":
            r = self._machines[ev.machine]
            r.busy_order = None
            if h is not None:
                h.processing_at = None
                h.progress += 1
                h.node = r.node
        elif ev.kind == "machine-down":
            r = self._machines[ev.machine]
            r.up = False
            r.claimed = False
            preempted = ev.info.get("preempted") or r.busy_order
            r.busy_order = None
            if preempted:
                ph = self._orders.get(preempted)
                if ph is not None and ph.processing_at == ev.machine:
                    # Progress on the interrupted step is lost.
                    ph.processing_at = None
                    ph.node = r.node
                    self.stats.reschedules += 1
        elif ev.kind == "machine-up":
            self._machines[ev.machine].up = True
        elif ev.kind == "supply-blocked":
            self._machines[ev.machine].blocked = True
        elif ev.kind == "supply-restored":
            self._machines[ev.machine].blocked = False
        elif ev.kind == "product-rejected":
            if h is None:
                return
            was_processing = h.processing_at
            if was_processing:
                r = self._machines[was_processing]
                r.busy_order = None
                h.processing_at = None
                h.node = r.node
                self.stats.reschedules += 1
            policy = ev.info.get("policy")
            if policy == "scrap":
                h.scrapped = True
                if h.assigned_shuttle:
                    self._shuttles[h.assigned_shuttle].assigned_order = None
                    h.assigned_shuttle = None
            elif policy == "rework":
                # Rework repeats the spoiled step: the running one if caught
                # in process, otherwise the step just finished.
                if not was_processing:
                    h.progress = max(0, h.progress - 1)
        elif ev.kind == "order-completed":
            if h is not None:
                h.done = True
                h.node = None
                if h.assigned_shuttle:
                    self._shuttles[h.assigned_shuttle].assigned_order = None
                    h.assigned_shuttle = None
        elif ev.kind == "order-cancelled":
            if h is not None:
                h.cancelled = True
                h.node = None

    def _apply_notice(self, n: Notice) -> None:
        if n.kind != "command-rejected" or n.command is None:
            return
        cmd = n.command
        kind = cmd.get("kind")
        if kind == "start-op":
            h = self._orders.get(cmd.get("order") or "")
            if h is not None and h.dispatched_to == cmd.get("machine"):
                h.dispatched_to = None
                self.stats.reschedules += 1
            r = self._machines.get(cmd.get("machine") or "")
            if r is not None:
                r.claimed = False
        elif kind == "move-shuttle":
            carried = cmd.get("carry")
            sid = cmd.get("shuttle")
            s = self._shuttles.get(sid or "")
            if s is not None and s.assigned_order:
                h = self._orders.get(s.assigned_order)
                if h is not None and h.assigned_shuttle == sid:
                    h.assigned_shuttle = None
                s.assigned_order = None
                self.stats.reschedules += 1
            if carried:
                h = self._orders.get(carried)
                if h is not None:
                    h.in_transit = False
        elif kind == "release-order":
            h = self._orders.get(cmd.get("order") or "")
            if h is not None:
                h.release_sent = False
        elif kind == "cancel-order":
            h = self._orders.get(cmd.get("order") or "")
            if h is not None:
                h.cancel_sent = False

    # -- decision phase ---------------------------------------------------------

    def _dest_for(self, h: _OrderHolon) -> str | None:
        """Believed destination node, or None when no machine can serve."""
        op = h.next_operation
        if op is None:
            return self.model.output_station
        best: tuple[int, str] | None = None
        for mid, r in self._machines.items():
            if op not in r.operations or not r.up or r.blocked:
                continue
            travel = self.model.travel_time(h.node, r.node) if h.node is not None else None
            if travel is None:
                continue
            key = (travel, mid)
            if best is None or key < best:
                best = key
        if best is None:
            return None
        return self._machines[best[1]].node

    def _decide(self, now: int) -> list[ControlCommand]:
        commands: list[ControlCommand] = []
        holons = sorted(self._orders.values(), key=lambda h: h.rank())

        for h in sorted(self._orders.values(), key=lambda h: h.spec.id):
            if h.open_ and not h.released and not h.release_sent and not h.cancel_requested:
                if h.spec.release <= now:
                    commands.append(ControlCommand(kind="release-order", order=h.spec.id))
                    h.release_sent = True

        for h in holons:
            if (
                h.open_
                and h.cancel_requested
                and h.released
                and not h.cancel_sent
                and not h.in_transit
                and h.processing_at is None
                and h.node is not None
            ):
                commands.append(ControlCommand(kind="cancel-order", order=h.spec.id))
                h.cancel_sent = True

        for mid, r in sorted(self._machines.items()):
            if not r.up or r.blocked or r.busy_order is not None or r.claimed:
                continue
            best: _OrderHolon | None = None
            for h in holons:
                if not h.open_ or h.cancel_requested or not h.released:
                    continue
                if h.in_transit or h.processing_at or h.dispatched_to:
                    continue
                if h.node != r.node or h.next_operation not in r.operations:
                    continue
                best = h
                break
            if best is not None:
                commands.append(
                    ControlCommand(
                        kind="start-op", machine=mid, order=best.spec.id,
                        operation=best.next_operation,
                    )
                )
                best.dispatched_to = mid
                r.claimed = True

        for h in holons:
            if not h.open_ or h.cancel_requested or not h.released:
                continue
            if h.in_transit or h.processing_at or h.dispatched_to or h.node is None:
                continue
            dest = self._dest_for(h)
            if dest is None or dest == h.node:
                continue
            shuttle = self._pick_shuttle(h)
            if shuttle is None:
                continue
            if shuttle.node == h.node:
                commands.append(
                    ControlCommand(
                        kind="move-shuttle", shuttle=shuttle.id,
                        destination=dest, carry=h.spec.id,
                    )
                )
            else:
                commands.append(
                    ControlCommand(kind="move-shuttle", shuttle=shuttle.id, destination=h.node)
                )
            shuttle.assigned_order = h.spec.id
            h.assigned_shuttle = shuttle.id

        return commands

    def _pick_shuttle(self, h: _OrderHolon) -> _ShuttleBelief | None:
        if h.assigned_shuttle is not None:
            s = self._shuttles[h.assigned_shuttle]
            return None if s.moving else s
        best: tuple[int, str] | None = None
        for sid, s in sorted(self._shuttles.items()):
            if s.moving or s.assigned_order is not None or s.node is None:
                continue
            travel = self.model.travel_time(s.node, h.node) if h.node else None
            if travel is None:
                continue
            key = (travel, sid)
            if best is None or key < best:
                best = key
        if best is None:
            return None
        return self._shuttles[best[1]]

    # -- round entry point --------------------------------------------------------

    def on_round(
        self,
        now: int,
        directives: Iterable[ControlDirective],
        events: Iterable[SimEvent],
        notices: Iterable[Notice],
    ) -> tuple[list[ControlCommand], bool]:
        """Process one round of inputs; returns (commands, idle)."""
        for d in directives:
            self._apply_directive(d)
        for ev in events:
            self._apply_event(ev)
        for n in notices:
            self._apply_notice(n)
        commands = self._decide(now)
        self.stats.commands_issued += len(commands)
        idle = not commands and all(not h.open_ for h in self._orders.values())
        return commands, idle

    def export_kpi(self) -> dict[str, int]:
        """End-of-run counters published on the wire as final taps."""
        return {
            "commands_issued": self.stats.commands_issued,
            "directives_handled": self.stats.directives_handled,
            "reschedules": self.stats.reschedules,
        }
