"""Wire layer: codec, transports, session recording and replay."""

import json
import socket
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from holobench.control import ControlProtocolError, ReferenceControl
from holobench.harness import run_single
from holobench.interface import (
    DecodeError,
    EndOfStream,
    InProcEndpoint,
    ProtocolError,
    ControlClient,
    ReplayError,
    ReplaySource,
    RunRecorder,
    SocketEndpoint,
    decode_line,
    encode_record,
    extract_command_log,
    extract_event_stream,
    make_record,
    parse_log,
    replay_session,
)


def rec(kind="event-batch", role="emulation", round_no=1, t=0, body=None, corr=None):
    return make_record(role, round_no, t, kind, body if body is not None else {}, corr)


class TestCodec:
    def test_round_trip(self):
        r = rec(body={"events": [], "notices": []})
        line = encode_record(r)
        assert line.startswith(b"IL1 ") and line.endswith(b"\n")
        assert decode_line(line) == r

    def test_encode_rejects_wrong_keys(self):
        r = rec()
        r["extra"] = 1
        with pytest.raises(DecodeError, match="keys"):
            encode_record(r)
        del r["extra"], r["corr"]
        with pytest.raises(DecodeError, match="keys"):
            encode_record(r)

    @pytest.mark.parametrize(
        "line, fragment",
        [
            (b'{"v":"1"}\n', "prefix"),
            (b"IL1 not json\n", "JSON"),
            (b"IL1 [1,2]\n", "object"),
            (b'IL1 {"v":"1"}\n', "keys"),
            (encode_record(rec()).replace(b'"v":"1"', b'"v":"9"'), "version"),
            (encode_record(rec()).replace(b'"round":1', b'"round":"1"'), "integers"),
            (encode_record(rec()).replace(b'"body":{}', b'"body":[]'), "body"),
            (encode_record(rec()).replace(b'"corr":null', b'"corr":"x"'), "corr"),
        ],
    )
    def test_decode_errors(self, line, fragment):
        with pytest.raises(DecodeError, match=fragment):
            decode_line(line)

    @given(
        role=st.sampled_from(["emulation", "control", "scenario-manager"]),
        round_no=st.integers(min_value=0, max_value=10**6),
        t=st.integers(min_value=0, max_value=10**9),
        kind=st.sampled_from(["hello", "event-batch", "command", "tap", "bye"]),
        corr=st.none() | st.integers(min_value=0, max_value=10**6),
        body=st.dictionaries(
            st.text(min_size=1, max_size=6),
            st.one_of(
                st.integers(),
                st.floats(allow_nan=False, allow_infinity=False),
                st.text(max_size=12),
                st.none(),
                st.lists(st.integers(), max_size=3),
            ),
            max_size=5,
        ),
    )
    def test_round_trip_property(self, role, round_no, t, kind, corr, body):
        r = make_record(role, round_no, t, kind, body, corr)
        assert decode_line(encode_record(r)) == json.loads(json.dumps(r))

    def test_parse_log_reports_byte_offset(self):
        good = encode_record(rec())
        log = good + b"IL1 broken\n"
        with pytest.raises(DecodeError) as e:
            parse_log(log)
        assert e.value.offset == len(good)

    def test_parse_log_requires_trailing_newline(self):
        with pytest.raises(DecodeError, match="newline"):
            parse_log(encode_record(rec())[:-1])

    def test_command_log_extraction_is_verbatim(self):
        lines = [
            encode_record(rec(kind="event-batch", body={"events": []})),
            encode_record(rec(kind="command", role="control", corr=1)),
            encode_record(rec(kind="tap", role="control", body={"flow": "FLOW2"})),
            encode_record(rec(kind="end-of-round", role="control", corr=1)),
        ]
        log = b"".join(lines)
        assert extract_command_log(log) == lines[1] + lines[3]


class TestInProc:
    def test_lock_step(self):
        a, b = InProcEndpoint.pair()
        a.send_line(b"IL1 {}\n")
        assert b.has_line()
        assert b.recv_line() == b"IL1 {}\n"
        with pytest.raises(ProtocolError, match="lock-step"):
            b.recv_line()

    def test_close_signals_end_of_stream(self):
        a, b = InProcEndpoint.pair()
        a.close()
        with pytest.raises(EndOfStream):
            b.recv_line()


class TestSocket:
    def test_lines_cross_a_real_socket(self):
        left, right = socket.socketpair()
        a, b = SocketEndpoint(left), SocketEndpoint(right)
        line = encode_record(rec())
        a.send_line(line)
        a.send_line(line)
        assert b.recv_line() == line
        assert b.recv_line() == line
        a.close()
        with pytest.raises(EndOfStream):
            b.recv_line()
        b.close()

    def test_recv_timeout(self):
        left, right = socket.socketpair()
        b = SocketEndpoint(right, timeout=0.05)
        with pytest.raises(TimeoutError):
            b.recv_line()
        left.close()
        b.close()

    def test_mid_line_close_is_a_decode_error(self):
        left, right = socket.socketpair()
        b = SocketEndpoint(right, timeout=1.0)
        left.sendall(b"IL1 {")  # no newline, then gone
        left.close()
        with pytest.raises(DecodeError, match="mid-line"):
            b.recv_line()
        b.close()

    def test_session_over_sockets(self, minicell_model, minicell_orders, null_scenario):
        """The same control serves identically over TCP-style transport."""
        left, right = socket.socketpair()
        ctl = ReferenceControl(minicell_model)
        client = ControlClient(SocketEndpoint(right), ctl, clock=lambda: 0.0)
        worker = threading.Thread(target=client.serve_forever)
        worker.start()
        try:
            result = run_single(
                minicell_model,
                minicell_orders,
                null_scenario,
                seed=1,
                endpoint=SocketEndpoint(left),
            )
        finally:
            worker.join(timeout=10)
        assert result.status == "completed"
        assert result.report.makespan == 75


class TestRecorder:
    def test_log_is_verbatim_concatenation_and_observers_fire(self):
        recorder = RunRecorder()
        seen = []
        recorder.attach(lambda record: seen.append(record["kind"]))
        l1 = encode_record(rec(kind="hello", body={"model_hash": "x"}))
        l2 = encode_record(rec(kind="bye", role="control"))
        recorder.record(l1)
        recorder.record(l2)
        assert recorder.log_bytes() == l1 + l2
        assert seen == ["hello", "bye"]


class TestReplay:
    def _log(self, minicell_model, minicell_orders, scenario, seed=1):
        result = run_single(minicell_model, minicell_orders, scenario, seed=seed)
        assert result.status == "completed"
        return result.log

    def test_replay_reproduces_command_log(self, minicell_model, minicell_orders,
                                           ps9_scenario):
        log = self._log(minicell_model, minicell_orders, ps9_scenario)
        fresh = ReferenceControl(minicell_model)
        assert replay_session(log, fresh) == extract_command_log(log)

    def test_event_stream_extraction(self, minicell_model, minicell_orders,
                                     null_scenario):
        log = self._log(minicell_model, minicell_orders, null_scenario)
        events = extract_event_stream(log)
        seqs = [e.seq for e in events]
        assert seqs == list(range(1, len(seqs) + 1))
        assert events[-1].kind in ("order-completed", "shuttle-arrived")

    def test_truncated_log_is_rejected(self, minicell_model, minicell_orders,
                                       null_scenario):
        log = self._log(minicell_model, minicell_orders, null_scenario)
        without_tail = b"".join(
            line + b"\n" for line in log.split(b"\n")[:-6] if line
        )
        with pytest.raises(ReplayError, match="run-end"):
            ReplaySource(without_tail)

    def test_mid_line_truncation_is_rejected(self, minicell_model, minicell_orders,
                                             null_scenario):
        log = self._log(minicell_model, minicell_orders, null_scenario)
        with pytest.raises(ReplayError, match="truncated"):
            ReplaySource(log[:-3])

    def test_round_monotonicity_is_enforced(self, minicell_model, minicell_orders,
                                            null_scenario):
        log = self._log(minicell_model, minicell_orders, null_scenario)
        shuffled = bytearray()
        batches = []
        for record_line in log.splitlines(keepends=True):
            record = decode_line(record_line)
            if record["role"] == "emulation" and record["kind"] == "event-batch":
                batches.append(record_line)
        # duplicate the first batch line right after itself: same round twice
        first = batches[0]
        shuffled = log.replace(first, first + first, 1)
        with pytest.raises(ReplayError, match="monotonicity"):
            ReplaySource(bytes(shuffled))

    def test_empty_log_is_fine(self):
        source = ReplaySource(b"")
        assert not source.has_line()


class TestHandshake:
    def test_model_hash_mismatch_refused(self, minicell_model):
        a, b = InProcEndpoint.pair()
        ctl = ReferenceControl(minicell_model)
        client = ControlClient(b, ctl)
        a.send_line(encode_record(rec(kind="hello", body={"model_hash": "0" * 64})))
        with pytest.raises(ControlProtocolError, match="hash"):
            client.serve_one()

    def test_round_monotonicity_enforced_by_client(self, minicell_model):
        a, b = InProcEndpoint.pair()
        client = ControlClient(b, ReferenceControl(minicell_model), clock=lambda: 0.0)
        a.send_line(encode_record(rec(round_no=2, body={"events": [], "notices": []})))
        with pytest.raises(ProtocolError, match="monotonicity"):
            client.serve_one()

    def test_unknown_kind_refused(self, minicell_model):
        a, b = InProcEndpoint.pair()
        client = ControlClient(b, ReferenceControl(minicell_model))
        a.send_line(encode_record(rec(kind="mystery")))
        with pytest.raises(ProtocolError, match="mystery"):
            client.serve_one()
