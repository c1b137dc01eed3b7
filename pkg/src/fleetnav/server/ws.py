"""Minimal WebSocket (RFC 6455) framing over a plain socket.

Just enough for the teleop endpoint: the opening handshake digest, text
and control frames, fragment reassembly, and masking in both directions.
Reads go through an explicit accumulator on the raw socket so a timeout
can never drop half-received bytes the way buffered file objects do.
"""

from __future__ import annotations

import base64
import hashlib
import os
import socket
import struct
import threading

_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_CONT = 0x0
OP_TEXT = 0x1
OP_BINARY = 0x2
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA

_CONTROL_OPS = (OP_CLOSE, OP_PING, OP_PONG)

# Once a frame's first byte has arrived the rest must follow promptly.
_REST_TIMEOUT_S = 10.0


class ConnectionClosed(Exception):
    """Peer went away mid-stream."""


class ProtocolViolation(Exception):
    """Frame breaks the RFC: bad masking, bad opcode, oversize payload."""


def accept_key(key: str) -> str:
    """Sec-WebSocket-Accept value for a handshake key."""
    digest = hashlib.sha1((key + _GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


class WsConnection:
    """One endpoint of an established WebSocket.

    Servers pass mask_outgoing=False, require_masked=True; clients the
    reverse. `initial` carries bytes a buffered HTTP reader consumed past
    the handshake before handing the socket over.
    """

    def __init__(self, sock: socket.socket, *, mask_outgoing: bool,
                 require_masked: bool, initial: bytes = b"",
                 max_payload: int = 1 << 20):
        self.sock = sock
        self.mask_outgoing = mask_outgoing
        self.require_masked = require_masked
        self.max_payload = max_payload
        self._pending = bytearray(initial)
        self._send_lock = threading.Lock()

    # ---------------------------------------------------------------- reading

    def _read_exact(self, n: int) -> bytes:
        while len(self._pending) < n:
            try:
                chunk = self.sock.recv(65536)
            except (ConnectionError, OSError) as exc:
                if isinstance(exc, socket.timeout):
                    raise
                raise ConnectionClosed(str(exc)) from exc
            if not chunk:
                raise ConnectionClosed("socket closed mid-frame")
            self._pending.extend(chunk)
        out = bytes(self._pending[:n])
        del self._pending[:n]
        return out

    def _read_frame(self) -> tuple:
        b0, b1 = self._read_exact(2)
        fin = bool(b0 & 0x80)
        if b0 & 0x70:
            raise ProtocolViolation("nonzero reserved bits")
        opcode = b0 & 0x0F
        masked = bool(b1 & 0x80)
        length = b1 & 0x7F
        if length == 126:
            (length,) = struct.unpack("!H", self._read_exact(2))
        elif length == 127:
            (length,) = struct.unpack("!Q", self._read_exact(8))
        if length > self.max_payload:
            raise ProtocolViolation(f"{length} byte payload exceeds cap")
        if opcode in _CONTROL_OPS and (length > 125 or not fin):
            raise ProtocolViolation("control frames must be short and final")
        if masked != self.require_masked:
            want = "masked" if self.require_masked else "unmasked"
            raise ProtocolViolation(f"expected {want} frame")
        key = self._read_exact(4) if masked else None
        payload = self._read_exact(length)
        if key is not None:
            payload = _mask(payload, key)
        return fin, opcode, payload

    def recv(self, timeout: float = None):
        """Next complete message as (opcode, payload); None on timeout.

        Pings are answered inline; pongs are swallowed; a close frame is
        returned to the caller as (OP_CLOSE, payload). The timeout applies
        to waiting for a message to start, not to mid-frame bytes.
        """
        self.sock.settimeout(timeout)
        assembled = bytearray()
        first_opcode = None
        try:
            while True:
                try:
                    fin, opcode, payload = self._read_frame()
                except socket.timeout:
                    if first_opcode is not None:
                        raise ConnectionClosed("peer stalled mid-message")
                    return None
                # The moment a frame starts flowing, hold the peer to a
                # liveness bound instead of the caller's poll timeout.
                self.sock.settimeout(_REST_TIMEOUT_S)
                if opcode == OP_PING:
                    self._send_frame(OP_PONG, payload)
                    continue
                if opcode == OP_PONG:
                    continue
                if opcode == OP_CLOSE:
                    return OP_CLOSE, payload
                if opcode == OP_CONT:
                    if first_opcode is None:
                        raise ProtocolViolation("continuation without a start")
                elif first_opcode is not None:
                    raise ProtocolViolation("interleaved data messages")
                else:
                    first_opcode = opcode
                assembled.extend(payload)
                if len(assembled) > self.max_payload:
                    raise ProtocolViolation("assembled message exceeds cap")
                if fin:
                    return first_opcode, bytes(assembled)
        finally:
            self.sock.settimeout(None)

    # ---------------------------------------------------------------- writing

    def _send_frame(self, opcode: int, payload: bytes) -> None:
        header = bytearray([0x80 | opcode])
        n = len(payload)
        mask_bit = 0x80 if self.mask_outgoing else 0x00
        if n < 126:
            header.append(mask_bit | n)
        elif n < (1 << 16):
            header.append(mask_bit | 126)
            header.extend(struct.pack("!H", n))
        else:
            header.append(mask_bit | 127)
            header.extend(struct.pack("!Q", n))
        if self.mask_outgoing:
            key = os.urandom(4)
            header.extend(key)
            payload = _mask(payload, key)
        with self._send_lock:
            try:
                self.sock.sendall(bytes(header) + payload)
            except (ConnectionError, OSError) as exc:
                raise ConnectionClosed(str(exc)) from exc

    def send_text(self, text: str) -> None:
        self._send_frame(OP_TEXT, text.encode("utf-8"))

    def send_ping(self, payload: bytes = b"") -> None:
        self._send_frame(OP_PING, payload)

    def send_close(self, code: int = 1000, reason: str = "") -> None:
        body = struct.pack("!H", code) + reason.encode("utf-8")[:123]
        self._send_frame(OP_CLOSE, body)


def _mask(payload: bytes, key: bytes) -> bytes:
    if not payload:
        return payload
    reps = -(-len(payload) // 4)
    keystream = (key * reps)[: len(payload)]
    return (int.from_bytes(payload, "big")
            ^ int.from_bytes(keystream, "big")).to_bytes(len(payload), "big")


def client_handshake(sock: socket.socket, host: str, path: str,
                     timeout: float = 10.0) -> WsConnection:
    """Open a client WebSocket on a connected TCP socket.

    Raises ConnectionClosed with the status line on anything but 101.
    """
    key = base64.b64encode(os.urandom(16)).decode("ascii")
    request = (
        f"GET {path} HTTP/1.1\r\n"
        f"Host: {host}\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Key: {key}\r\n"
        "Sec-WebSocket-Version: 13\r\n"
        "\r\n")
    sock.settimeout(timeout)
    sock.sendall(request.encode("ascii"))
    buf = bytearray()
    while b"\r\n\r\n" not in buf:
        chunk = sock.recv(65536)
        if not chunk:
            raise ConnectionClosed("server closed during handshake")
        buf.extend(chunk)
        if len(buf) > 65536:
            raise ProtocolViolation("oversized handshake response")
    head, rest = bytes(buf).split(b"\r\n\r\n", 1)
    lines = head.decode("latin-1").split("\r\n")
    if " 101 " not in lines[0] + " ":
        raise ConnectionClosed(lines[0])
    headers = {}
    for line in lines[1:]:
        if ":" in line:
            name, value = line.split(":", 1)
            headers[name.strip().lower()] = value.strip()
    if headers.get("sec-websocket-accept") != accept_key(key):
        raise ProtocolViolation("handshake accept digest mismatch")
    sock.settimeout(None)
    return WsConnection(sock, mask_outgoing=True, require_masked=False,
                        initial=rest)
