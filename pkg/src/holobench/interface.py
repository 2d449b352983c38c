"""Interface layer: wire codec, transports, session driving, replay.

Wire format ("IL1"): one record per line, the ASCII prefix "IL1 " followed
by a canonical JSON object and a newline, UTF-8 throughout.  Every record
has exactly the keys {"v", "role", "round", "t", "kind", "body", "corr"}.
A session log is the verbatim concatenation of wire lines in wire order,
which makes the log itself the unit of replay: feeding it back through the
replay transport re-creates the control side's inputs byte for byte.

The emulation endpoint owns the clock and drives rounds; the control
endpoint answers each event batch with commands and an end-of-round record.
Scenario-manager records (run metadata, directives, injection audits) ride
the same wire and are recorded in place.
"""

from __future__ import annotations

import json
import socket
import time
from collections import deque
from typing import Any, Callable, Iterable

from .canon import canon_dumps
from .control import ProductOrder, ReferenceControl
from .messages import ControlCommand, ControlDirective, Notice, SimEvent

WIRE_PREFIX = b"IL1 "
WIRE_VERSION = "1"
RECORD_KEYS = frozenset({"v", "role", "round", "t", "kind", "body", "corr"})

ROLE_EMULATION = "emulation"
ROLE_CONTROL = "control"
ROLE_SCENARIO = "scenario-manager"


class DecodeError(ValueError):
    """A wire line violates the record format.  Carries the byte offset."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ProtocolError(RuntimeError):
    """A well-formed record arrived where the protocol forbids it."""


class ReplayError(RuntimeError):
    """A session log cannot be replayed faithfully."""


# -- codec --------------------------------------------------------------------


def make_record(
    role: str, round_no: int, t: int, kind: str, body: dict[str, Any], corr: int | None = None
) -> dict[str, Any]:
    return {
        "v": WIRE_VERSION,
        "role": role,
        "round": round_no,
        "t": t,
        "kind": kind,
        "body": body,
        "corr": corr,
    }


def encode_record(record: dict[str, Any]) -> bytes:
    if set(record) != RECORD_KEYS:
        raise DecodeError(f"record keys must be exactly {sorted(RECORD_KEYS)}")
    return WIRE_PREFIX + canon_dumps(record).encode("utf-8") + b"\n"


def decode_line(line: bytes, offset: int = 0) -> dict[str, Any]:
    if not line.startswith(WIRE_PREFIX):
        raise DecodeError("line does not start with the IL1 prefix", offset)
    payload = line[len(WIRE_PREFIX) :].rstrip(b"\n")
    try:
        record = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"record is not valid JSON: {exc}", offset) from exc
    if not isinstance(record, dict):
        raise DecodeError("record must be a JSON object", offset)
    if set(record) != RECORD_KEYS:
        raise DecodeError(f"record keys must be exactly {sorted(RECORD_KEYS)}", offset)
    if record["v"] != WIRE_VERSION:
        raise DecodeError(f"unsupported wire version {record['v']!r}", offset)
    if not isinstance(record["round"], int) or not isinstance(record["t"], int):
        raise DecodeError("round and t must be integers", offset)
    if not isinstance(record["role"], str) or not isinstance(record["kind"], str):
        raise DecodeError("role and kind must be strings", offset)
    if not isinstance(record["body"], dict):
        raise DecodeError("body must be an object", offset)
    if record["corr"] is not None and not isinstance(record["corr"], int):
        raise DecodeError("corr must be an integer or null", offset)
    return record


def parse_log(log: bytes) -> list[dict[str, Any]]:
    """Decode a session log into records, enforcing the line discipline."""
    records = []
    offset = 0
    while offset < len(log):
        end = log.find(b"\n", offset)
        if end == -1:
            raise DecodeError("log ends without a newline", offset)
        records.append(decode_line(log[offset : end + 1], offset))
        offset = end + 1
    return records


def extract_command_log(log: bytes) -> bytes:
    """Control-role command and end-of-round lines, verbatim."""
    out = bytearray()
    offset = 0
    while offset < len(log):
        end = log.find(b"\n", offset)
        if end == -1:
            raise DecodeError("log ends without a newline", offset)
        line = log[offset : end + 1]
        record = decode_line(line, offset)
        if record["role"] == ROLE_CONTROL and record["kind"] in ("command", "end-of-round"):
            out += line
        offset = end + 1
    return bytes(out)


def extract_event_stream(log: bytes) -> list[SimEvent]:
    events: list[SimEvent] = []
    for record in parse_log(log):
        if record["role"] == ROLE_EMULATION and record["kind"] == "event-batch":
            events.extend(SimEvent.from_dict(d) for d in record["body"]["events"])
    return events


# -- transports ---------------------------------------------------------------


class EndOfStream(Exception):
    """The peer closed the wire."""


class InProcEndpoint:
    """One side of an in-process, lock-step byte pipe."""

    def __init__(self, inbox: deque, outbox: deque):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    @staticmethod
    def pair() -> tuple["InProcEndpoint", "InProcEndpoint"]:
        a_to_b: deque = deque()
        b_to_a: deque = deque()
        return InProcEndpoint(b_to_a, a_to_b), InProcEndpoint(a_to_b, b_to_a)

    def send_line(self, line: bytes) -> None:
        if self._closed:
            raise ProtocolError("endpoint is closed")
        self._outbox.append(line)

    def recv_line(self) -> bytes:
        if not self._inbox:
            if self._closed or _CLOSE in self._outbox:
                raise EndOfStream
            raise ProtocolError("lock-step violation: no record is waiting")
        line = self._inbox.popleft()
        if line is _CLOSE:
            raise EndOfStream
        return line

    def has_line(self) -> bool:
        return bool(self._inbox) and self._inbox[0] is not _CLOSE

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.append(_CLOSE)


_CLOSE = object()


class SocketEndpoint:
    """Line transport over a stream socket with a receive timeout."""

    def __init__(self, sock: socket.socket, timeout: float | None = 5.0):
        self._sock = sock
        self._sock.settimeout(timeout)
        self._buffer = bytearray()

    def send_line(self, line: bytes) -> None:
        self._sock.sendall(line)

    def recv_line(self) -> bytes:
        while True:
            nl = self._buffer.find(b"\n")
            if nl != -1:
                line = bytes(self._buffer[: nl + 1])
                del self._buffer[: nl + 1]
                return line
            try:
                chunk = self._sock.recv(65536)
            except socket.timeout as exc:
                raise TimeoutError("peer did not answer within the receive timeout") from exc
            if not chunk:
                if self._buffer:
                    raise DecodeError("stream closed mid-line")
                raise EndOfStream
            self._buffer += chunk

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass


# -- recording ----------------------------------------------------------------


class RunRecorder:
    """Accumulates the session log and fans records out to observers.

    Observers are read-only taps: they see each decoded record after it has
    already been committed to the log, so they cannot affect the session.
    """

    def __init__(self):
        self._chunks: list[bytes] = []
        self._observers: list[Callable[[dict[str, Any]], None]] = []

    def attach(self, observer: Callable[[dict[str, Any]], None]) -> None:
        self._observers.append(observer)

    def record(self, line: bytes) -> None:
        self._chunks.append(line)
        if self._observers:
            record = decode_line(line)
            for obs in self._observers:
                obs(record)

    def log_bytes(self) -> bytes:
        return b"".join(self._chunks)


class RecordingEndpoint:
    """Wraps an endpoint so that both directions land in the recorder."""

    def __init__(self, inner, recorder: RunRecorder):
        self._inner = inner
        self._recorder = recorder

    def send_line(self, line: bytes) -> None:
        self._recorder.record(line)
        self._inner.send_line(line)

    def recv_line(self) -> bytes:
        line = self._inner.recv_line()
        self._recorder.record(line)
        return line

    def has_line(self) -> bool:
        return self._inner.has_line()

    def close(self) -> None:
        self._inner.close()


# -- control client -------------------------------------------------------------


class ControlClient:
    """Serves a ReferenceControl over a transport endpoint.

    Reads rounds (directives, then one event batch), answers with command
    records, an end-of-round record, and one decision-latency tap.  The
    latency clock is injectable so tests can pin it.
    """

    def __init__(
        self,
        endpoint,
        control: ReferenceControl,
        clock: Callable[[], float] = time.perf_counter,
    ):
        self._ep = endpoint
        self._control = control
        self._clock = clock
        self._directives: list[ControlDirective] = []
        self._round = 0

    def _send(self, record: dict[str, Any]) -> None:
        self._ep.send_line(encode_record(record))

    def serve_one(self) -> bool:
        """Handle the next inbound record; False when the session is over."""
        try:
            record = decode_line(self._ep.recv_line())
        except EndOfStream:
            return False
        kind = record["kind"]
        if kind == "hello":
            self._control.check_model_hash(record["body"]["model_hash"])
            self._send(
                make_record(
                    ROLE_CONTROL,
                    0,
                    0,
                    "hello",
                    {"model_hash": self._control.model.model_hash, "policy": "reference-holonic"},
                )
            )
        elif kind == "run-meta":
            self._control.load_orders(
                ProductOrder.from_dict(d) for d in record["body"].get("orders", [])
            )
        elif kind == "injection":
            pass  # audit trail only
        elif kind == "directive":
            self._directives.append(ControlDirective.from_dict(record["body"]))
        elif kind == "event-batch":
            self._serve_round(record)
        elif kind == "run-end":
            round_no = record["round"]
            for i, (name, value) in enumerate(sorted(self._control.export_kpi().items())):
                self._send(
                    make_record(
                        ROLE_CONTROL,
                        round_no,
                        record["t"],
                        "tap",
                        {"flow": "FLOW7", "name": name, "value": value, "i": i},
                    )
                )
            self._send(make_record(ROLE_CONTROL, round_no, record["t"], "bye", {}))
            return False
        else:
            raise ProtocolError(f"control cannot handle record kind {kind!r}")
        return True

    def _serve_round(self, record: dict[str, Any]) -> None:
        round_no, t = record["round"], record["t"]
        if round_no != self._round + 1:
            raise ProtocolError(
                f"round monotonicity violated: got round {round_no} after {self._round}"
            )
        self._round = round_no
        events = [SimEvent.from_dict(d) for d in record["body"]["events"]]
        notices = [Notice.from_dict(d) for d in record["body"].get("notices", [])]
        started = self._clock()
        commands, idle = self._control.on_round(t, self._directives, events, notices)
        elapsed_ms = (self._clock() - started) * 1000.0
        self._directives = []
        for cmd in commands:
            self._send(make_record(ROLE_CONTROL, round_no, t, "command", cmd.to_dict(), round_no))
        self._send(make_record(ROLE_CONTROL, round_no, t, "end-of-round", {"idle": idle}, round_no))
        self._send(
            make_record(
                ROLE_CONTROL,
                round_no,
                t,
                "tap",
                {"flow": "FLOW2", "name": "decision_latency_ms", "value": elapsed_ms, "i": round_no},
            )
        )

    def serve_forever(self) -> None:
        """Serve until the session ends; for threaded/socket use."""
        while self.serve_one():
            pass


# -- emulation-side round driver -------------------------------------------------


class RoundDriver:
    """Emulation-side half of the round protocol.

    Owns the wire: sends hello, run metadata, per-round scenario records and
    event batches; collects the control's reply for each round.  Does not
    know about the kernel; the bench harness supplies batches and consumes
    commands.
    """

    def __init__(self, endpoint, model_hash: str):
        self._ep = endpoint
        self._model_hash = model_hash
        self.round_no = 0
        self.control_hello: dict[str, Any] | None = None

    def _send(self, record: dict[str, Any]) -> None:
        self._ep.send_line(encode_record(record))

    def _recv(self) -> dict[str, Any]:
        return decode_line(self._ep.recv_line())

    def handshake(self) -> None:
        self._send(make_record(ROLE_EMULATION, 0, 0, "hello", {"model_hash": self._model_hash}))

    def finish_handshake(self) -> None:
        record = self._recv()
        if record["kind"] != "hello" or record["role"] != ROLE_CONTROL:
            raise ProtocolError("expected the control's hello")
        if record["body"].get("model_hash") != self._model_hash:
            raise ProtocolError("control answered with a different model hash")
        self.control_hello = record

    def send_run_meta(self, body: dict[str, Any]) -> None:
        self._send(make_record(ROLE_SCENARIO, 0, 0, "run-meta", body))

    def send_injection_audit(self, t: int, rule: str, injection: dict[str, Any]) -> None:
        self._send(
            make_record(
                ROLE_SCENARIO,
                self.round_no + 1,
                t,
                "injection",
                {"rule": rule, "injection": injection},
            )
        )

    def open_round(self, t: int, directives: Iterable[ControlDirective]) -> int:
        self.round_no += 1
        for d in directives:
            self._send(make_record(ROLE_SCENARIO, self.round_no, t, "directive", d.to_dict()))
        return self.round_no

    def send_batch(self, t: int, events: Iterable[SimEvent], notices: Iterable[Notice]) -> None:
        body = {
            "events": [e.to_dict() for e in events],
            "notices": [n.to_dict() for n in notices],
        }
        self._send(make_record(ROLE_EMULATION, self.round_no, t, "event-batch", body))

    def collect_reply(self) -> tuple[list[ControlCommand], bool]:
        """Read the control's records for the current round."""
        commands: list[ControlCommand] = []
        idle = False
        saw_eor = False
        while True:
            record = self._recv()
            if record["role"] != ROLE_CONTROL:
                raise ProtocolError(f"unexpected {record['role']} record in a control reply")
            kind = record["kind"]
            if kind == "command":
                if saw_eor:
                    raise ProtocolError("command after end-of-round")
                if record["corr"] != self.round_no:
                    raise ProtocolError("command correlates to the wrong round")
                commands.append(ControlCommand.from_dict(record["body"]))
            elif kind == "end-of-round":
                if record["corr"] != self.round_no:
                    raise ProtocolError("end-of-round correlates to the wrong round")
                idle = bool(record["body"].get("idle"))
                saw_eor = True
            elif kind == "tap":
                if saw_eor:
                    return commands, idle
                raise ProtocolError("tap before end-of-round")
            else:
                raise ProtocolError(f"unexpected control record kind {kind!r}")

    def send_run_end(self, t: int, reason: str) -> None:
        self.round_no += 1
        self._send(
            make_record(
                ROLE_EMULATION, self.round_no, t, "run-end", {"reason": reason}
            )
        )

    def collect_closing(self) -> None:
        """Read the control's final taps and bye."""
        while True:
            try:
                record = self._recv()
            except EndOfStream:
                return
            if record["kind"] == "bye":
                return
            if record["kind"] != "tap":
                raise ProtocolError(f"unexpected record {record['kind']!r} after run-end")

    def close(self) -> None:
        self._ep.close()


# -- replay -------------------------------------------------------------------


class ReplaySource:
    """Serves the emulation/scenario side of a recorded session log.

    The transport contract matches InProcEndpoint, so a ControlClient can be
    pointed at a recorded log exactly as at a live emulation.  Control-role
    lines in the log are skipped on recv (the new control produces its own)
    and inbound sends are collected instead of transmitted.
    """

    def __init__(self, log: bytes):
        self._records: list[bytes] = []
        self.sent: list[bytes] = []
        offset = 0
        last_round = 0
        complete = False
        while offset < len(log):
            end = log.find(b"\n", offset)
            if end == -1:
                raise ReplayError(f"log truncated mid-line at byte {offset}")
            line = log[offset : end + 1]
            record = decode_line(line, offset)
            if record["role"] in (ROLE_EMULATION, ROLE_SCENARIO):
                if record["kind"] == "event-batch":
                    if record["round"] != last_round + 1:
                        raise ReplayError(
                            f"round monotonicity violated at round {record['round']}"
                        )
                    last_round = record["round"]
                if record["kind"] == "run-end":
                    complete = True
                self._records.append(line)
            offset = end + 1
        if self._records and not complete:
            raise ReplayError("log is truncated: no run-end record")
        self._cursor = 0

    def recv_line(self) -> bytes:
        if self._cursor >= len(self._records):
            raise EndOfStream
        line = self._records[self._cursor]
        self._cursor += 1
        return line

    def send_line(self, line: bytes) -> None:
        self.sent.append(line)

    def has_line(self) -> bool:
        return self._cursor < len(self._records)

    def close(self) -> None:
        pass


def replay_session(log: bytes, control: ReferenceControl) -> bytes:
    """Re-run a recorded session against a fresh control.

    Returns the replayed command log (command and end-of-round lines) for
    byte comparison with ``extract_command_log`` of the original.
    """
    source = ReplaySource(log)
    client = ControlClient(source, control, clock=lambda: 0.0)
    client.serve_forever()
    out = bytearray()
    for line in source.sent:
        record = decode_line(line)
        if record["kind"] in ("command", "end-of-round"):
            out += line
    return bytes(out)
