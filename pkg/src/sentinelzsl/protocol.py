"""Wire protocol between the data owner's sentinel and the remote provider.

Frames are a 4-byte big-endian length prefix followed by one UTF-8 JSON
object {v, type, session, seq, payload}. Every payload field carries a risk
tag (low or mid); the schema itself guarantees that black-box feedback can
never contain the mid-risk classification gradient. Two transports exist --
an in-process socket pair and TCP -- sharing every byte of the framing code,
so their sessions are bit-identical. Sequence numbers alternate strictly
between the two sides and must increase by one per message.
"""
from __future__ import annotations

import json
import socket
import struct
import threading
from dataclasses import dataclass, field

PROTOCOL_VERSION = 1
MAX_BODY_BYTES = 64 * 1024 * 1024

PROTOCOL_TAGS = ("whitebox", "blackbox")


class ProtocolError(Exception):
    """Base for anything that breaks the wire contract."""


class SizeError(ProtocolError):
    """Encoded body exceeds MAX_BODY_BYTES."""


class SchemaError(ProtocolError):
    """Required field missing or payload malformed; names the field."""


class VersionError(ProtocolError):
    """Unknown protocol version or message type."""


class OrderingError(ProtocolError):
    """Sequence number did not increase within the session."""


class TransportClosed(ProtocolError):
    """Peer vanished mid-message."""


class SessionAborted(ProtocolError):
    """Peer sent an Error message; carries its code and detail."""

    def __init__(self, code: str, detail: str):
        super().__init__(f"session aborted: {code}: {detail}")
        self.code = code
        self.detail = detail


class BudgetExceededError(SessionAborted):
    """The sentinel's request budget is spent.

    Raised locally by the sentinel when a request arrives with no budget
    left, and remotely by the provider when the wire reports it.
    """

    def __init__(self, detail: str = "request budget exhausted"):
        super().__init__("budget_exhausted", detail)


# Canonical payload schema: field -> risk tag, per message type. Decoding is
# strict: exactly these fields plus the "risk" echo, tags matching.
RISK_SCHEMA: dict[str, dict[str, str]] = {
    "Hello": {"protocol": "low", "feature_dim": "low", "num_classes": "low"},
    "HelloAck": {"protocol": "low", "feature_dim": "low", "num_classes": "low",
                 "reg_kind": "low", "reg_weight": "low", "budget": "low",
                 "teacher_mode": "low"},
    "UploadBatch": {"features": "low", "labels": "low"},
    "WhiteboxFeedback": {"softmax": "low", "reg_value": "low", "reg_grad": "low",
                         "loss_grad": "mid"},
    "BlackboxFeedback": {"softmax": "low", "reg_value": "low", "reg_grad": "low"},
    "Error": {"code": "low", "detail": "low"},
}

FEEDBACK_TYPES = ("WhiteboxFeedback", "BlackboxFeedback")


@dataclass
class WireMessage:
    """One protocol message; payload holds JSON-native values only."""

    type: str
    session: str
    seq: int
    payload: dict


def _tagged(msg_type: str, fields: dict) -> dict:
    """Attach the canonical risk map; payload key order is fixed here."""
    schema = RISK_SCHEMA[msg_type]
    payload = {name: fields[name] for name in schema}
    payload["risk"] = dict(schema)
    return payload


def make_hello(session: str, protocol: str, feature_dim: int, num_classes: int,
               seq: int = 0) -> WireMessage:
    if protocol not in PROTOCOL_TAGS:
        raise SchemaError(f"unknown protocol tag {protocol!r}")
    return WireMessage("Hello", session, seq, _tagged("Hello", {
        "protocol": protocol, "feature_dim": int(feature_dim),
        "num_classes": int(num_classes)}))


def make_hello_ack(session: str, protocol: str, feature_dim: int, num_classes: int,
                   reg_kind: str, reg_weight: float, budget: int | None,
                   teacher_mode: str, seq: int = 0) -> WireMessage:
    return WireMessage("HelloAck", session, seq, _tagged("HelloAck", {
        "protocol": protocol, "feature_dim": int(feature_dim),
        "num_classes": int(num_classes), "reg_kind": reg_kind,
        "reg_weight": float(reg_weight), "budget": budget,
        "teacher_mode": teacher_mode}))


def make_upload(session: str, features, labels, seq: int = 0) -> WireMessage:
    return WireMessage("UploadBatch", session, seq, _tagged("UploadBatch", {
        "features": [[float(v) for v in row] for row in features],
        "labels": [int(y) for y in labels]}))


def make_whitebox_feedback(session: str, softmax, reg_value: float, reg_grad,
                           loss_grad, seq: int = 0) -> WireMessage:
    return WireMessage("WhiteboxFeedback", session, seq, _tagged("WhiteboxFeedback", {
        "softmax": [[float(v) for v in row] for row in softmax],
        "reg_value": float(reg_value),
        "reg_grad": [[float(v) for v in row] for row in reg_grad],
        "loss_grad": [[float(v) for v in row] for row in loss_grad]}))


def make_blackbox_feedback(session: str, softmax, reg_value: float, reg_grad,
                           seq: int = 0) -> WireMessage:
    return WireMessage("BlackboxFeedback", session, seq, _tagged("BlackboxFeedback", {
        "softmax": [[float(v) for v in row] for row in softmax],
        "reg_value": float(reg_value),
        "reg_grad": [[float(v) for v in row] for row in reg_grad]}))


def make_error(session: str, code: str, detail: str, seq: int = 0) -> WireMessage:
    return WireMessage("Error", session, seq, _tagged("Error", {
        "code": code, "detail": detail}))


def encode(msg: WireMessage) -> bytes:
    """Length-prefixed compact JSON; floats keep full round-trip precision."""
    if msg.type not in RISK_SCHEMA:
        raise VersionError(f"unknown message type {msg.type!r}")
    document = {"v": PROTOCOL_VERSION, "type": msg.type, "session": msg.session,
                "seq": msg.seq, "payload": msg.payload}
    body = json.dumps(document, separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_BODY_BYTES:
        raise SizeError(f"message body {len(body)} bytes exceeds {MAX_BODY_BYTES}")
    return struct.pack(">I", len(body)) + body


def decode(data: bytes) -> WireMessage:
    """Strict inverse of encode: validates framing, version, schema, risk tags."""
    if len(data) < 4:
        raise SchemaError("truncated frame: missing length prefix")
    (length,) = struct.unpack(">I", data[:4])
    if length > MAX_BODY_BYTES:
        raise SizeError(f"declared body {length} bytes exceeds {MAX_BODY_BYTES}")
    body = data[4:]
    if len(body) != length:
        raise SchemaError(f"frame declares {length} bytes but carries {len(body)}")
    try:
        document = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"body is not valid JSON: {exc}") from None
    if not isinstance(document, dict):
        raise SchemaError("top-level JSON value must be an object")
    for name in ("v", "type", "session", "seq", "payload"):
        if name not in document:
            raise SchemaError(f"missing required field {name!r}")
    if document["v"] != PROTOCOL_VERSION:
        raise VersionError(f"unsupported protocol version {document['v']!r}")
    msg_type = document["type"]
    if msg_type not in RISK_SCHEMA:
        raise VersionError(f"unknown message type {msg_type!r}")
    payload = document["payload"]
    if not isinstance(payload, dict):
        raise SchemaError("payload must be an object")
    schema = RISK_SCHEMA[msg_type]
    for name in schema:
        if name not in payload:
            raise SchemaError(f"missing required field {name!r}")
    if "risk" not in payload:
        raise SchemaError("missing required field 'risk'")
    extras = set(payload) - set(schema) - {"risk"}
    if extras:
        raise SchemaError(f"unexpected payload field {sorted(extras)[0]!r}")
    if payload["risk"] != schema:
        raise SchemaError(f"risk tags must be exactly {schema}")
    if not isinstance(document["seq"], int):
        raise SchemaError("field 'seq' must be an integer")
    return WireMessage(msg_type, document["session"], document["seq"], payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    """Read n bytes; None for a clean close at a frame boundary."""
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            if got == 0:
                return None
            raise TransportClosed(f"peer closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


@dataclass
class LogEntry:
    """One message observed on a channel (no timestamps: logs stay
    deterministic so transport-parity checks can compare them exactly)."""

    direction: str  # "sent" | "received"
    type: str
    seq: int
    nbytes: int
    risk: dict


@dataclass
class SessionLog:
    session: str
    entries: list[LogEntry] = field(default_factory=list)

    @property
    def bytes_sent(self) -> int:
        return sum(e.nbytes for e in self.entries if e.direction == "sent")

    @property
    def bytes_received(self) -> int:
        return sum(e.nbytes for e in self.entries if e.direction == "received")

    def count(self, msg_type: str, direction: str | None = None) -> int:
        return sum(1 for e in self.entries
                   if e.type == msg_type and (direction is None or e.direction == direction))

    def feedback_count(self) -> int:
        return sum(1 for e in self.entries
                   if e.type in FEEDBACK_TYPES and e.direction == "received")

    def mid_risk_fields(self) -> list[tuple[str, str]]:
        """Every (message type, field) pair tagged mid across the session."""
        return [(e.type, name) for e in self.entries
                for name, tag in e.risk.items() if tag == "mid"]

    def as_dict(self) -> dict:
        return {
            "session": self.session,
            "messages": len(self.entries),
            "bytes_sent": self.bytes_sent,
            "bytes_received": self.bytes_received,
            "feedback_messages": self.feedback_count(),
            "uploads": self.count("UploadBatch", "sent"),
            "mid_risk_fields": sorted({f"{t}.{f}" for t, f in self.mid_risk_fields()}),
        }


class Channel:
    """Framing + sequence discipline + accounting over a connected socket.

    Not thread-safe: each side of a session runs exactly one protocol loop.
    A session id of None adopts the peer's id from its first message (the
    serving side doesn't know the id until Hello arrives).
    """

    def __init__(self, sock: socket.socket, session: str | None):
        self._sock = sock
        self.session = session
        self._last_seq = -1
        self.log = SessionLog(session or "")

    def send(self, msg_type: str, payload: dict) -> None:
        if self.session is None:
            raise ProtocolError("cannot send before a session id is known")
        seq = self._last_seq + 1
        msg = WireMessage(msg_type, self.session, seq, payload)
        data = encode(msg)
        self._sock.sendall(data)
        self._last_seq = seq
        self.log.entries.append(LogEntry("sent", msg_type, seq, len(data),
                                         payload.get("risk", {})))

    def recv(self) -> WireMessage | None:
        """Next message, or None when the peer closed cleanly."""
        prefix = _recv_exact(self._sock, 4)
        if prefix is None:
            return None
        (length,) = struct.unpack(">I", prefix)
        if length > MAX_BODY_BYTES:
            raise SizeError(f"declared body {length} bytes exceeds {MAX_BODY_BYTES}")
        body = _recv_exact(self._sock, length)
        if body is None:
            raise TransportClosed("peer closed between prefix and body")
        msg = decode(prefix + body)
        if self.session is None:
            self.session = msg.session
            self.log.session = msg.session
        elif msg.session != self.session:
            raise SchemaError(
                f"session id {msg.session!r} does not match {self.session!r}")
        if msg.seq != self._last_seq + 1:
            raise OrderingError(
                f"sequence number {msg.seq} after {self._last_seq}; "
                f"expected {self._last_seq + 1}")
        self._last_seq = msg.seq
        self.log.entries.append(LogEntry("received", msg.type, msg.seq,
                                         4 + length, msg.payload.get("risk", {})))
        return msg

    def request(self, msg_type: str, payload: dict) -> WireMessage:
        """Send one message and block for the reply; maps Error replies to
        exceptions (budget_exhausted becomes BudgetExceededError)."""
        self.send(msg_type, payload)
        reply = self.recv()
        if reply is None:
            raise TransportClosed("peer closed instead of replying")
        if reply.type == "Error":
            code = reply.payload["code"]
            detail = reply.payload["detail"]
            if code == "budget_exhausted":
                raise BudgetExceededError(detail)
            raise SessionAborted(code, detail)
        return reply

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def serve(channel: Channel, handler) -> None:
    """Answer requests until the peer closes or the handler aborts.

    handler(WireMessage) -> (type, payload). An "Error" reply is sent and
    then the session shuts down cleanly.
    """
    try:
        while True:
            msg = channel.recv()
            if msg is None:
                return
            reply_type, reply_payload = handler(msg)
            channel.send(reply_type, reply_payload)
            if reply_type == "Error":
                return
    finally:
        channel.close()


def run_session(handler, runner, transport: str = "in_process",
                session: str = "session-0", host: str = "127.0.0.1",
                port: int = 0):
    """Wire a sentinel handler and a provider runner together for one session.

    transport "in_process" uses a socket pair; "tcp" binds a listener (port
    0 picks a free port) and serves one connection from a thread. Returns
    (runner result, provider-side SessionLog).
    """
    if transport == "in_process":
        server_sock, client_sock = socket.socketpair()
    elif transport == "tcp":
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(1)
        actual_port = listener.getsockname()[1]
        server_sock = client_sock = None  # both made after accept/connect
    else:
        raise ProtocolError(f"unknown transport {transport!r}")

    server_error: list[BaseException] = []

    def server_main():
        nonlocal server_sock
        try:
            if transport == "tcp":
                conn, _ = listener.accept()
                listener.close()
                server_sock = conn
            serve(Channel(server_sock, None), handler)
        except BaseException as exc:  # surface after join
            server_error.append(exc)

    thread = threading.Thread(target=server_main, daemon=True)
    thread.start()

    if transport == "tcp":
        client_sock = socket.create_connection((host, actual_port))
    client = Channel(client_sock, session)
    try:
        result = runner(client)
    finally:
        client.close()
        thread.join(timeout=30)
    if server_error and not isinstance(server_error[0], (TransportClosed, OSError)):
        raise server_error[0]
    return result, client.log


def connect(host: str, port: int, session: str) -> Channel:
    """Client channel to an already-listening sentinel process."""
    return Channel(socket.create_connection((host, port)), session)


def serve_forever_tcp(handler, host: str = "127.0.0.1", port: int = 0,
                      on_listening=None) -> None:
    """Accept exactly one session on a fresh listener and serve it.

    on_listening(actual_port) fires once the socket is bound -- the CLI uses
    it to announce the chosen port to a parent process.
    """
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(1)
    if on_listening is not None:
        on_listening(listener.getsockname()[1])
    conn, _ = listener.accept()
    listener.close()
    serve(Channel(conn, None), handler)
