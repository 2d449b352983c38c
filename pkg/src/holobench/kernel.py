"""Lean shop-floor emulation kernel.

The kernel owns physical state only: machine status, shuttle positions, and
the locations of products, which it treats as opaque ids.  It holds no order
data, no routing, and makes no decisions.  Anything that looks like a choice
(which product to process, where to send a shuttle) must arrive as a command.

Time is an integer tick counter.  Every emitted event carries (time, seq);
seq is global, starts at 1, and has no gaps.  All happenings that share a
tick are processed in one step, and the resulting events are ordered by
(kind, machine, shuttle, order, node) before sequence numbers are assigned,
so a run is reproducible bit for bit.

Commands are applied at the current clock: the events they cause carry the
same tick as the batch that prompted them.  Invalid commands and no-op
injections never raise; they produce notices that ride along with the next
event batch.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from typing import Any, Iterable

from .canon import canon_dumps
from .messages import ControlCommand, Injection, Notice, SimEvent
from .model import ShopModel


class KernelError(RuntimeError):
    """Internal invariant violation or snapshot mismatch."""


@dataclass
class _Machine:
    down: bool = False
    down_token: int = 0
    blocked: bool = False
    block_token: int = 0
    busy_order: str | None = None
    busy_operation: str | None = None
    busy_token: int = 0
    busy_finish: int | None = None

    @property
    def busy(self) -> bool:
        return self.busy_order is not None

    def clear_busy(self) -> None:
        self.busy_order = None
        self.busy_operation = None
        self.busy_finish = None


@dataclass
class _Shuttle:
    node: str | None  # None while in transit
    cargo: str | None = None
    dest: str | None = None
    arrive: int | None = None

    @property
    def moving(self) -> bool:
        return self.dest is not None


@dataclass
class _Product:
    node: str | None  # resting node; machine node while in process
    shuttle: str | None = None  # carrying shuttle while in transit
    processing: str | None = None  # machine id while in process


# Pending-queue entry kinds; lexical order fixes same-tick processing order.
_ARRIVE = "arrive"
_MACHINE_UP = "machine-up"
_OP_FINISH = "op-finish"
_SUPPLY_RESTORE = "supply-restore"


class EmulationKernel:
    """Deterministic discrete-event emulation of one shop floor."""

    def __init__(self, model: ShopModel):
        self.model = model
        self.clock = 0
        self._next_seq = 1
        self._machines = {mid: _Machine() for mid in sorted(model.machines)}
        self._shuttles = {
            sid: _Shuttle(node=spec.home) for sid, spec in sorted(model.shuttles.items())
        }
        self._products: dict[str, _Product] = {}
        self._released: set[str] = set()
        # Heap entries: (time, kind, subject, push_id, token).  push_id makes
        # keys unique; token marks the episode so stale entries can be skipped.
        self._pending: list[tuple[int, str, str, int, int]] = []
        self._push_counter = 0
        self._notices: list[Notice] = []

    # -- scheduling ---------------------------------------------------------

    def _schedule(self, time: int, kind: str, subject: str, token: int) -> None:
        self._push_counter += 1
        heapq.heappush(self._pending, (time, kind, subject, self._push_counter, token))

    def _is_stale(self, kind: str, subject: str, token: int) -> bool:
        if kind == _ARRIVE:
            return not self._shuttles[subject].moving
        m = self._machines[subject]
        if kind == _OP_FINISH:
            return m.busy_order is None or m.busy_token != token
        if kind == _MACHINE_UP:
            return not m.down or m.down_token != token
        if kind == _SUPPLY_RESTORE:
            return not m.blocked or m.block_token != token
        raise KernelError(f"unknown pending kind {kind!r}")

    def has_pending(self) -> bool:
        """True if any scheduled happening is still live."""
        while self._pending:
            _t, kind, subject, _pid, token = self._pending[0]
            if self._is_stale(kind, subject, token):
                heapq.heappop(self._pending)
                continue
            return True
        return False

    # -- advancing ----------------------------------------------------------

    def advance(self, commands: Iterable[ControlCommand] = ()) -> list[SimEvent]:
        """Apply commands, or advance time to the next live happening.

        Returns one batch of events, all at the same tick.  If the commands
        produce events, the batch is at the current clock and time does not
        move.  Otherwise the clock jumps to the earliest scheduled happening.
        An empty list means nothing is left to do.
        """
        raw: list[dict[str, Any]] = []
        for cmd in commands:
            raw.extend(self._apply_command(cmd))
        if raw:
            return self._seal(raw)
        while self.has_pending():
            t = self._pending[0][0]
            group: list[tuple[int, str, str, int, int]] = []
            while self._pending and self._pending[0][0] == t:
                group.append(heapq.heappop(self._pending))
            self.clock = t
            for _t, kind, subject, _pid, token in group:
                if self._is_stale(kind, subject, token):
                    continue
                raw.extend(self._fire(kind, subject))
            if raw:
                return self._seal(raw)
        return []

    def _seal(self, raw: list[dict[str, Any]]) -> list[SimEvent]:
        def key(d: dict[str, Any]) -> tuple[str, str, str, str, str]:
            return (
                d["kind"],
                d.get("machine") or "",
                d.get("shuttle") or "",
                d.get("order") or "",
                d.get("node") or "",
            )

        events: list[SimEvent] = []
        for d in sorted(raw, key=key):
            events.append(
                SimEvent(
                    time=self.clock,
                    seq=self._next_seq,
                    kind=d["kind"],
                    machine=d.get("machine"),
                    shuttle=d.get("shuttle"),
                    order=d.get("order"),
                    node=d.get("node"),
                    info=d.get("info", {}),
                )
            )
            self._next_seq += 1
        return events

    # -- scheduled happenings -----------------------------------------------

    def _fire(self, kind: str, subject: str) -> list[dict[str, Any]]:
        if kind == _ARRIVE:
            return self._fire_arrive(subject)
        if kind == _OP_FINISH:
            return self._fire_op_finish(subject)
        if kind == _MACHINE_UP:
            return self._fire_machine_up(subject)
        if kind == _SUPPLY_RESTORE:
            return self._fire_supply_restore(subject)
        raise KernelError(f"unknown pending kind {kind!r}")

    def _fire_arrive(self, sid: str) -> list[dict[str, Any]]:
        sh = self._shuttles[sid]
        dest, cargo = sh.dest, sh.cargo
        sh.node, sh.dest, sh.arrive, sh.cargo = dest, None, None, None
        out: list[dict[str, Any]] = [{"kind": "shuttle-arrived", "shuttle": sid, "node": dest}]
        if cargo is not None:
            out[0]["order"] = cargo
            if dest == self.model.output_station:
                del self._products[cargo]
                out.append({"kind": "order-completed", "order": cargo, "node": dest})
            else:
                p = self._products[cargo]
                p.node, p.shuttle = dest, None
        return out

    def _fire_op_finish(self, mid: str) -> list[dict[str, Any]]:
        m = self._machines[mid]
        order, op = m.busy_order, m.busy_operation
        m.clear_busy()
        self._products[order].processing = None
        return [
            {
                "kind": "op-finished",
                "machine": mid,
                "order": order,
                "node": self.model.machines[mid].node,
                "info": {"operation": op},
            }
        ]

    def _fire_machine_up(self, mid: str) -> list[dict[str, Any]]:
        m = self._machines[mid]
        m.down = False
        m.down_token += 1
        return [{"kind": "machine-up", "machine": mid, "node": self.model.machines[mid].node}]

    def _fire_supply_restore(self, mid: str) -> list[dict[str, Any]]:
        m = self._machines[mid]
        m.blocked = False
        m.block_token += 1
        return [{"kind": "supply-restored", "machine": mid, "node": self.model.machines[mid].node}]

    # -- commands -----------------------------------------------------------

    def _reject(self, cmd: ControlCommand, reason: str) -> list[dict[str, Any]]:
        self._notices.append(
            Notice(time=self.clock, kind="command-rejected", reason=reason, command=cmd.to_dict())
        )
        return []

    def _apply_command(self, cmd: ControlCommand) -> list[dict[str, Any]]:
        if cmd.kind == "release-order":
            return self._cmd_release(cmd)
        if cmd.kind == "move-shuttle":
            return self._cmd_move(cmd)
        if cmd.kind == "start-op":
            return self._cmd_start(cmd)
        if cmd.kind == "cancel-order":
            return self._cmd_cancel(cmd)
        return self._reject(cmd, f"{cmd.kind} is not an emulation command")

    def _cmd_release(self, cmd: ControlCommand) -> list[dict[str, Any]]:
        order = cmd.order
        if order is None:
            return self._reject(cmd, "release-order requires an order id")
        if order in self._released:
            return self._reject(cmd, f"order {order!r} was already released")
        node = self.model.input_station
        self._released.add(order)
        self._products[order] = _Product(node=node)
        return [{"kind": "order-released", "order": order, "node": node}]

    def _cmd_move(self, cmd: ControlCommand) -> list[dict[str, Any]]:
        sid, dest = cmd.shuttle, cmd.destination
        if sid not in self._shuttles:
            return self._reject(cmd, f"unknown shuttle {sid!r}")
        sh = self._shuttles[sid]
        if sh.moving:
            return self._reject(cmd, f"shuttle {sid!r} is in transit")
        if dest not in self.model.nodes:
            return self._reject(cmd, f"unknown destination {dest!r}")
        if dest == sh.node:
            return self._reject(cmd, f"shuttle {sid!r} is already at {dest!r}")
        travel = self.model.travel_time(sh.node, dest)
        if travel is None:
            return self._reject(cmd, f"no route from {sh.node!r} to {dest!r}")
        cargo = cmd.carry
        product: _Product | None = None
        if cargo is not None:
            product = self._products.get(cargo)
            if product is None:
                return self._reject(cmd, f"carry order {cargo!r} is not on the floor")
            if product.shuttle is not None:
                return self._reject(cmd, f"carry order {cargo!r} is already in transit")
            if product.processing is not None:
                return self._reject(cmd, f"carry order {cargo!r} is being processed")
            if product.node != sh.node:
                return self._reject(cmd, f"carry order {cargo!r} is not at {sh.node!r}")
        origin = sh.node
        sh.node, sh.dest, sh.arrive = None, dest, self.clock + travel
        ev: dict[str, Any] = {"kind": "shuttle-departed", "shuttle": sid, "node": origin}
        if cargo is not None and product is not None:
            sh.cargo = cargo
            product.shuttle, product.node = sid, None
            ev["order"] = cargo
        self._schedule(sh.arrive, _ARRIVE, sid, 0)
        return [ev]

    def _cmd_start(self, cmd: ControlCommand) -> list[dict[str, Any]]:
        mid, order, op = cmd.machine, cmd.order, cmd.operation
        if mid not in self._machines:
            return self._reject(cmd, f"unknown machine {mid!r}")
        m = self._machines[mid]
        spec = self.model.machines[mid]
        if m.down:
            return self._reject(cmd, f"machine {mid!r} is down")
        if m.blocked:
            return self._reject(cmd, f"machine {mid!r} is supply-blocked")
        if m.busy:
            return self._reject(cmd, f"machine {mid!r} is busy")
        if op is None or op not in spec.operations:
            return self._reject(cmd, f"machine {mid!r} does not perform {op!r}")
        p = self._products.get(order)
        if p is None:
            return self._reject(cmd, f"order {order!r} is not on the floor")
        if p.shuttle is not None or p.processing is not None:
            return self._reject(cmd, f"order {order!r} is not available")
        if p.node != spec.node:
            return self._reject(cmd, f"order {order!r} is not at machine {mid!r}")
        m.busy_token += 1
        m.busy_order, m.busy_operation = order, op
        m.busy_finish = self.clock + spec.operations[op]
        p.processing = mid
        self._schedule(m.busy_finish, _OP_FINISH, mid, m.busy_token)
        return [
            {
                "kind": "op-started",
                "machine": mid,
                "order": order,
                "node": spec.node,
                "info": {"operation": op},
            }
        ]

    def _cmd_cancel(self, cmd: ControlCommand) -> list[dict[str, Any]]:
        order = cmd.order
        p = self._products.get(order)
        if p is None:
            return self._reject(cmd, f"order {order!r} is not on the floor")
        if p.shuttle is not None:
            return self._reject(cmd, f"order {order!r} is in transit")
        if p.processing is not None:
            return self._reject(cmd, f"order {order!r} is being processed")
        node = p.node
        del self._products[order]
        return [{"kind": "order-cancelled", "order": order, "node": node}]

    # -- injections ---------------------------------------------------------

    def _ignore(self, inj: Injection, reason: str) -> list[dict[str, Any]]:
        self._notices.append(
            Notice(
                time=self.clock, kind="injection-ignored", reason=reason, injection=inj.to_dict()
            )
        )
        return []

    def apply_injection(self, inj: Injection) -> list[SimEvent]:
        """Apply a disturbance at the current clock; returns its events."""
        if inj.kind == "product-reject":
            raw = self._inj_reject(inj)
        elif inj.machine not in self._machines:
            raw = self._ignore(inj, f"unknown machine {inj.machine!r}")
        elif inj.kind == "machine-down":
            raw = self._inj_down(inj)
        elif inj.kind == "machine-up":
            raw = self._inj_up(inj)
        elif inj.kind == "supply-shortage":
            raw = self._inj_block(inj)
        else:
            raw = self._inj_unblock(inj)
        return self._seal(raw)

    def _inj_down(self, inj: Injection) -> list[dict[str, Any]]:
        mid = inj.machine
        m = self._machines[mid]
        if m.down:
            return self._ignore(inj, f"machine {mid!r} is already down")
        m.down = True
        m.down_token += 1
        info: dict[str, Any] = {}
        if m.busy_order is not None:
            # Preemption loses all progress; the product waits at the machine.
            self._products[m.busy_order].processing = None
            info["preempted"] = m.busy_order
            m.clear_busy()
        if inj.duration is not None:
            self._schedule(self.clock + inj.duration, _MACHINE_UP, mid, m.down_token)
            info["duration"] = inj.duration
        ev: dict[str, Any] = {
            "kind": "machine-down",
            "machine": mid,
            "node": self.model.machines[mid].node,
        }
        if info:
            ev["info"] = info
        return [ev]

    def _inj_up(self, inj: Injection) -> list[dict[str, Any]]:
        mid = inj.machine
        m = self._machines[mid]
        if not m.down:
            return self._ignore(inj, f"machine {mid!r} is not down")
        return self._fire_machine_up(mid)

    def _inj_block(self, inj: Injection) -> list[dict[str, Any]]:
        mid = inj.machine
        m = self._machines[mid]
        if m.blocked:
            return self._ignore(inj, f"machine {mid!r} is already supply-blocked")
        m.blocked = True
        m.block_token += 1
        ev: dict[str, Any] = {
            "kind": "supply-blocked",
            "machine": mid,
            "node": self.model.machines[mid].node,
        }
        if inj.duration is not None:
            self._schedule(self.clock + inj.duration, _SUPPLY_RESTORE, mid, m.block_token)
            ev["info"] = {"duration": inj.duration}
        return [ev]

    def _inj_unblock(self, inj: Injection) -> list[dict[str, Any]]:
        mid = inj.machine
        m = self._machines[mid]
        if not m.blocked:
            return self._ignore(inj, f"machine {mid!r} is not supply-blocked")
        return self._fire_supply_restore(mid)

    def _inj_reject(self, inj: Injection) -> list[dict[str, Any]]:
        order = inj.order
        p = self._products.get(order)
        if p is None:
            return self._ignore(inj, f"order {order!r} is not on the floor")
        ev: dict[str, Any] = {
            "kind": "product-rejected",
            "order": order,
            "info": {"policy": inj.policy},
        }
        if p.processing is not None:
            # Abort the running operation; the product stays at the machine.
            mid = p.processing
            self._machines[mid].clear_busy()
            p.processing = None
            ev["machine"] = mid
            ev["node"] = p.node
        elif p.shuttle is not None:
            ev["shuttle"] = p.shuttle
        else:
            ev["node"] = p.node
        if inj.policy == "scrap":
            if p.shuttle is not None:
                self._shuttles[p.shuttle].cargo = None
            del self._products[order]
        return [ev]

    # -- notices and inspection ----------------------------------------------

    def drain_notices(self) -> list[Notice]:
        out, self._notices = self._notices, []
        return out

    def machine_status(self, mid: str) -> dict[str, Any]:
        m = self._machines[mid]
        return {
            "down": m.down,
            "blocked": m.blocked,
            "busy_order": m.busy_order,
            "busy_operation": m.busy_operation,
        }

    def shuttle_status(self, sid: str) -> dict[str, Any]:
        s = self._shuttles[sid]
        return {"node": s.node, "cargo": s.cargo, "dest": s.dest, "arrive": s.arrive}

    def product_location(self, order: str) -> dict[str, Any] | None:
        p = self._products.get(order)
        if p is None:
            return None
        return {"node": p.node, "shuttle": p.shuttle, "processing": p.processing}

    def floor_order_ids(self) -> list[str]:
        return sorted(self._products)

    # -- snapshot / restore ---------------------------------------------------

    def snapshot(self) -> str:
        """Full state as canonical JSON; equal strings mean equal state."""
        doc = {
            "clock": self.clock,
            "next_seq": self._next_seq,
            "model_hash": self.model.model_hash,
            "machines": {
                mid: {
                    "down": m.down,
                    "down_token": m.down_token,
                    "blocked": m.blocked,
                    "block_token": m.block_token,
                    "busy_order": m.busy_order,
                    "busy_operation": m.busy_operation,
                    "busy_token": m.busy_token,
                    "busy_finish": m.busy_finish,
                }
                for mid, m in sorted(self._machines.items())
            },
            "shuttles": {
                sid: {"node": s.node, "cargo": s.cargo, "dest": s.dest, "arrive": s.arrive}
                for sid, s in sorted(self._shuttles.items())
            },
            "products": {
                oid: {"node": p.node, "shuttle": p.shuttle, "processing": p.processing}
                for oid, p in sorted(self._products.items())
            },
            "released": sorted(self._released),
            "pending": sorted(self._pending),
            "push_counter": self._push_counter,
            "notices": [n.to_dict() for n in self._notices],
        }
        return canon_dumps(doc)

    @classmethod
    def restore(cls, model: ShopModel, snapshot: str) -> "EmulationKernel":
        doc = json.loads(snapshot)
        if doc["model_hash"] != model.model_hash:
            raise KernelError("snapshot was taken against a different model")
        k = cls(model)
        k.clock = doc["clock"]
        k._next_seq = doc["next_seq"]
        for mid, d in doc["machines"].items():
            k._machines[mid] = _Machine(**d)
        for sid, d in doc["shuttles"].items():
            k._shuttles[sid] = _Shuttle(**d)
        k._products = {oid: _Product(**d) for oid, d in doc["products"].items()}
        k._released = set(doc["released"])
        k._pending = [tuple(e) for e in doc["pending"]]
        heapq.heapify(k._pending)
        k._push_counter = doc["push_counter"]
        k._notices = [Notice.from_dict(d) for d in doc["notices"]]
        return k
