"""Reference control: order book, belief updates, dispatch policy and the
closed loop against the kernel."""

import pytest

from holobench.control import (
    ControlProtocolError,
    OrderBookError,
    ProductOrder,
    ReferenceControl,
    load_orders,
)
from holobench.kernel import EmulationKernel
from holobench.messages import ControlDirective, Notice, SimEvent


def order(oid, routing=("A",), release=0, due=60, priority=0):
    return ProductOrder(id=oid, routing=tuple(routing), release=release, due=due,
                        priority=priority)


def ev(kind, **kw):
    kw.setdefault("time", 0)
    kw.setdefault("seq", 1)
    return SimEvent(kind=kind, **kw)


def drive_to_completion(model, orders, cap=500):
    """Minimal lock-step loop: control and kernel, no wire in between."""
    kernel = EmulationKernel(model)
    ctl = ReferenceControl(model)
    ctl.load_orders(orders)
    stream = []
    commands, _ = ctl.on_round(0, [], [], [])
    for _ in range(cap):
        batch = kernel.advance(commands)
        stream.extend(batch)
        notices = kernel.drain_notices()
        if not batch and not notices and not commands and not kernel.has_pending():
            break
        now = batch[0].time if batch else kernel.clock
        commands, idle = ctl.on_round(now, [], batch, notices)
    else:
        raise AssertionError("loop did not converge")
    return stream, ctl, idle


class TestOrderBook:
    def test_load_orders_rejects_duplicates(self):
        text = ('{"orders": [{"id": "O1", "routing": ["A"], "release": 0, "due": 9},'
                ' {"id": "O1", "routing": ["A"], "release": 0, "due": 9}]}')
        with pytest.raises(OrderBookError, match="duplicate"):
            load_orders(text)

    @pytest.mark.parametrize(
        "doc, fragment",
        [
            ({"id": "O1", "routing": [], "release": 0, "due": 1}, "routing"),
            ({"id": "O1", "routing": ["A", 3], "release": 0, "due": 1}, "strings"),
            ({"id": "O1", "routing": ["A"], "release": -1, "due": 1}, "release"),
            ({"id": "O1", "routing": ["A"], "release": 0}, "due"),
            ({"id": "", "routing": ["A"], "release": 0, "due": 1}, "id"),
            ({"id": "O1", "routing": ["A"], "release": 0, "due": 1, "priority": "hi"}, "priority"),
        ],
    )
    def test_order_validation(self, doc, fragment):
        with pytest.raises(OrderBookError, match=fragment):
            ProductOrder.from_dict(doc)

    def test_model_hash_check(self, minicell_model, control):
        control.check_model_hash(minicell_model.model_hash)
        with pytest.raises(ControlProtocolError):
            control.check_model_hash("0" * 64)


class TestDispatch:
    def test_bootstrap_releases_in_id_order(self, control):
        control.load_orders([order("O2"), order("O1")])
        commands, idle = control.on_round(0, [], [], [])
        assert [(c.kind, c.order) for c in commands] == [
            ("release-order", "O1"),
            ("release-order", "O2"),
        ]
        assert not idle

    def test_release_respects_release_time(self, control):
        control.load_orders([order("O1", release=30)])
        assert control.on_round(0, [], [], [])[0] == []
        (cmd,) = control.on_round(30, [], [], [])[0]
        assert cmd.kind == "release-order"

    def test_released_order_gets_carry_move(self, control):
        control.load_orders([order("O1", routing=("A",))])
        control.on_round(0, [], [], [])
        (cmd,) = control.on_round(0, [], [ev("order-released", order="O1", node="IN")], [])[0]
        # shuttle and product share a node: a single loaded move
        assert cmd.kind == "move-shuttle"
        assert cmd.carry == "O1" and cmd.destination == "M1"
        assert cmd.shuttle == "S1"  # id tiebreak among the idle pair at IN

    def test_fetch_then_carry_when_apart(self, control):
        control.load_orders([order("O1", routing=("B",))])
        control.on_round(0, [], [], [])
        # order waits at M1 while both shuttles sit at IN: fetch leg first
        (fetch,) = control.on_round(
            0, [], [ev("order-released", order="O1", node="M1")], []
        )[0]
        assert (fetch.kind, fetch.carry, fetch.destination) == ("move-shuttle", None, "M1")
        arrive = [
            ev("shuttle-departed", shuttle="S1", node="IN"),
            ev("shuttle-arrived", shuttle="S1", node="M1", seq=2),
        ]
        (carry,) = control.on_round(5, [], arrive, [])[0]
        assert (carry.carry, carry.destination) == ("O1", "M2")

    def test_rank_prefers_priority_then_due(self, control):
        control.load_orders([
            order("O1", due=50, priority=0),
            order("O2", due=90, priority=5),
            order("O3", due=40, priority=0),
        ])
        control.on_round(0, [], [], [])
        released = [
            ev("order-released", order=oid, node="IN", seq=i + 1)
            for i, oid in enumerate(["O1", "O2", "O3"])
        ]
        commands, _ = control.on_round(0, [], released, [])
        # two shuttles: O2 (priority) and O3 (earlier due) win them
        carried = {c.carry for c in commands if c.kind == "move-shuttle"}
        assert carried == {"O2", "O3"}

    def test_start_issued_when_product_waits_at_machine(self, control):
        control.load_orders([order("O1")])
        control.on_round(0, [], [], [])
        batch = [
            ev("order-released", order="O1", node="IN"),
            ev("shuttle-departed", shuttle="S1", order="O1", node="IN", seq=2),
            ev("shuttle-arrived", shuttle="S1", order="O1", node="M1", seq=3),
        ]
        (cmd,) = control.on_round(5, [], batch, [])[0]
        assert (cmd.kind, cmd.machine, cmd.operation, cmd.order) == (
            "start-op", "M1", "A", "O1",
        )

    def test_no_start_while_machine_believed_down(self, control):
        control.load_orders([order("O1")])
        control.on_round(0, [], [], [])
        batch = [
            ev("order-released", order="O1", node="M1"),
            ev("machine-down", machine="M1", node="M1", seq=2),
        ]
        assert control.on_round(0, [], batch, [])[0] == []
        (cmd,) = control.on_round(9, [], [ev("machine-up", machine="M1", node="M1", time=9)], [])[0]
        assert cmd.kind == "start-op"


class TestDirectives:
    def test_insert_order_joins_book(self, control):
        d = ControlDirective(kind="insert-order", order={
            "id": "OX", "routing": ["A"], "release": 0, "due": 99, "priority": 1,
        })
        commands, _ = control.on_round(0, [d], [], [])
        assert [(c.kind, c.order) for c in commands] == [("release-order", "OX")]
        assert control.export_kpi()["directives_handled"] == 1

    def test_insert_order_without_capable_machine_is_dropped(self, control):
        d = ControlDirective(kind="insert-order", order={
            "id": "OX", "routing": ["Z"], "release": 0, "due": 99,
        })
        commands, _ = control.on_round(0, [d], [], [])
        assert commands == []
        assert control.export_kpi()["directives_handled"] == 0

    def test_cancel_before_release_closes_on_the_book(self, control):
        control.load_orders([order("O1", release=50)])
        d = ControlDirective(kind="cancel-order", order_id="O1")
        commands, idle = control.on_round(0, [d], [], [])
        assert commands == [] and idle

    def test_cancel_on_floor_issues_command(self, control):
        control.load_orders([order("O1")])
        control.on_round(0, [], [], [])
        batch = [ev("order-released", order="O1", node="IN")]
        d = ControlDirective(kind="cancel-order", order_id="O1")
        commands, _ = control.on_round(0, [d], batch, [])
        assert ("cancel-order", "O1") in [(c.kind, c.order) for c in commands]

    def test_set_priority_reorders_dispatch(self, control):
        control.load_orders([order("O1", due=10), order("O2", due=20)])
        control.on_round(0, [], [], [])
        released = [
            ev("order-released", order="O1", node="IN"),
            ev("order-released", order="O2", node="IN", seq=2),
        ]
        d = ControlDirective(kind="set-priority", order_id="O2", priority=9)
        commands, _ = control.on_round(0, [d], released, [])
        moves = [c for c in commands if c.kind == "move-shuttle"]
        assert moves[0].carry == "O2"

    def test_announce_breakdown_steers_beliefs(self, control):
        control.load_orders([order("O1")])
        control.on_round(0, [], [], [])
        d = ControlDirective(kind="announce-breakdown", machine="M1")
        batch = [ev("order-released", order="O1", node="M1")]
        assert control.on_round(0, [d], batch, [])[0] == []


class TestBeliefRepair:
    def test_preemption_counts_reschedule_and_restarts(self, control):
        control.load_orders([order("O1")])
        control.on_round(0, [], [], [])
        walk = [
            ev("order-released", order="O1", node="M1"),
            ev("op-started", machine="M1", order="O1", node="M1", seq=2),
        ]
        control.on_round(0, [], walk, [])
        down = ev("machine-down", machine="M1", node="M1", time=3,
                  info={"preempted": "O1"})
        assert control.on_round(3, [], [down], [])[0] == []
        assert control.export_kpi()["reschedules"] == 1
        # recovery restarts the same step from zero
        (cmd,) = control.on_round(8, [], [ev("machine-up", machine="M1", node="M1", time=8)], [])[0]
        assert (cmd.kind, cmd.operation) == ("start-op", "A")

    def test_rejected_start_retries_and_counts(self, control):
        control.load_orders([order("O1")])
        control.on_round(0, [], [], [])
        control.on_round(0, [], [ev("order-released", order="O1", node="M1")], [])
        n = Notice(time=0, kind="command-rejected", reason="busy",
                   command={"kind": "start-op", "machine": "M1", "order": "O1",
                            "operation": "A"})
        (cmd,) = control.on_round(0, [], [], [n])[0]
        assert cmd.kind == "start-op"
        assert control.export_kpi()["reschedules"] == 1

    def test_rejected_release_is_retried(self, control):
        control.load_orders([order("O1")])
        (first,) = control.on_round(0, [], [], [])[0]
        n = Notice(time=0, kind="command-rejected", reason="nope",
                   command=first.to_dict())
        (again,) = control.on_round(0, [], [], [n])[0]
        assert again.kind == "release-order" and again.order == "O1"

    def test_rework_at_rest_repeats_the_step(self, control):
        control.load_orders([order("O1", routing=("A", "B"))])
        control.on_round(0, [], [], [])
        walk = [
            ev("order-released", order="O1", node="M1"),
            ev("op-started", machine="M1", order="O1", node="M1", seq=2),
            ev("op-finished", machine="M1", order="O1", node="M1", seq=3, time=10),
        ]
        control.on_round(10, [], walk, [])
        reject = ev("product-rejected", order="O1", node="M1", time=10, seq=4,
                    info={"policy": "rework"})
        commands, _ = control.on_round(10, [], [reject], [])
        # progress dropped back to step A, still at its machine
        assert ("start-op", "A") in [(c.kind, c.operation) for c in commands]

    def test_scrap_closes_the_holon(self, control):
        control.load_orders([order("O1")])
        control.on_round(0, [], [], [])
        control.on_round(0, [], [ev("order-released", order="O1", node="IN")], [])
        reject = ev("product-rejected", order="O1", node="IN", seq=2,
                    info={"policy": "scrap"})
        commands, idle = control.on_round(0, [], [reject], [])
        assert commands == [] and idle


class TestClosedLoop:
    def test_minicell_runs_to_completion(self, minicell_model, minicell_orders):
        stream, ctl, idle = drive_to_completion(minicell_model, minicell_orders)
        assert idle
        done = [e for e in stream if e.kind == "order-completed"]
        assert sorted(e.order for e in done) == ["O1", "O2", "O3"]
        assert max(e.time for e in stream) == 75
        assert ctl.export_kpi()["reschedules"] == 0

    def test_lone_shuttle_copes(self, line_model):
        stream, ctl, idle = drive_to_completion(
            line_model,
            [order("O1", due=40), order("O2", due=80)],
        )
        assert idle
        done = [e.order for e in stream if e.kind == "order-completed"]
        assert sorted(done) == ["O1", "O2"]
        seqs = [e.seq for e in stream]
        assert seqs == list(range(1, len(seqs) + 1))
