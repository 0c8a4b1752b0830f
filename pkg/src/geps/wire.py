"""Framed wire protocol shared by the node agent, the job engine and the CLI.

A frame is a u32 little-endian payload length followed by a UTF-8 JSON
object; every object carries a "type" field. Request/response pairs:

    info      -> info_ok      node resource snapshot
    stage     -> stage_ok     raw fragment upload; `byte_length` raw bytes
                              follow the request frame
    run       -> run_ok       dispatch a filter run over local fragments
    status    -> status_ok    local job state snapshot
    fetch     -> fetch_ok     result download; raw bytes follow the
                              response frame
    (any)     -> error        {code, message}

The protocol version is negotiated in `info`.
"""

from __future__ import annotations

import json
import socket
import struct
import time
from dataclasses import dataclass, field

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 16 * 1024 * 1024
CHUNK = 64 * 1024

_LEN = struct.Struct("<I")


class WireError(Exception):
    """Frame-level failure: bad length prefix, EOF mid-frame, bad JSON."""


class NodeErrorResponse(Exception):
    """The remote answered with an error frame."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


@dataclass
class NodeInfo:
    """Resource descriptor a node agent reports for itself."""

    name: str
    protocol_version: int
    processors: int
    load_1m: float
    free_disk_bytes: int
    bandwidth_bytes_per_s: int
    fragments_held: list[tuple[int, int]] = field(default_factory=list)
    uptime_s: float = 0.0

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "protocol_version": self.protocol_version,
            "processors": self.processors,
            "load_1m": self.load_1m,
            "free_disk_bytes": self.free_disk_bytes,
            "bandwidth_bytes_per_s": self.bandwidth_bytes_per_s,
            "fragments_held": [list(pair) for pair in self.fragments_held],
            "uptime_s": self.uptime_s,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NodeInfo":
        return cls(
            name=obj["name"],
            protocol_version=obj["protocol_version"],
            processors=obj["processors"],
            load_1m=obj["load_1m"],
            free_disk_bytes=obj["free_disk_bytes"],
            bandwidth_bytes_per_s=obj["bandwidth_bytes_per_s"],
            fragments_held=[(int(d), int(i)) for d, i in obj.get("fragments_held", [])],
            uptime_s=obj.get("uptime_s", 0.0),
        )


class Throttler:
    """Paces a byte stream to a configured rate; 0 means unthrottled."""

    def __init__(self, bytes_per_s: int):
        self.bytes_per_s = bytes_per_s
        self._ready_at = time.monotonic()

    def wait(self, n_bytes: int) -> None:
        if self.bytes_per_s <= 0:
            return
        now = time.monotonic()
        self._ready_at = max(self._ready_at, now) + n_bytes / self.bytes_per_s
        delay = self._ready_at - now
        if delay > 0:
            time.sleep(delay)


def recv_exact(sock: socket.socket, n: int, throttler: Throttler | None = None) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        want = min(CHUNK, n - len(buf))
        chunk = sock.recv(want)
        if not chunk:
            raise WireError(f"connection closed with {n - len(buf)} bytes outstanding")
        buf += chunk
        if throttler:
            throttler.wait(len(chunk))
    return bytes(buf)


def send_raw(sock: socket.socket, data: bytes, throttler: Throttler | None = None) -> None:
    view = memoryview(data)
    for start in range(0, len(view), CHUNK):
        chunk = view[start:start + CHUNK]
        sock.sendall(chunk)
        if throttler:
            throttler.wait(len(chunk))


def send_frame(sock: socket.socket, obj: dict) -> None:
    payload = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    sock.sendall(_LEN.pack(len(payload)) + payload)


def recv_frame(sock: socket.socket) -> dict | None:
    """Read one frame; returns None on clean EOF at a frame boundary."""
    header = b""
    while len(header) < 4:
        chunk = sock.recv(4 - len(header))
        if not chunk:
            if header:
                raise WireError("connection closed inside a length prefix")
            return None
        header += chunk
    (length,) = _LEN.unpack(header)
    if length == 0 or length > MAX_FRAME_BYTES:
        raise WireError(f"implausible frame length {length}")
    payload = recv_exact(sock, length)
    try:
        obj = json.loads(payload)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError(f"frame payload is not JSON: {exc}") from None
    if not isinstance(obj, dict) or "type" not in obj:
        raise WireError("frame payload is not an object with a 'type'")
    return obj


class NodeClient:
    """One-shot request client for a node agent; a connection per call."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.host = host
        self.port = port
        self.timeout = timeout

    @classmethod
    def from_address(cls, address: str, timeout: float = 10.0) -> "NodeClient":
        host, port = address.rsplit(":", 1)
        return cls(host, int(port), timeout)

    def _connect(self) -> socket.socket:
        sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock

    def _expect(self, sock: socket.socket, expected_type: str) -> dict:
        reply = recv_frame(sock)
        if reply is None:
            raise WireError("connection closed before a reply arrived")
        if reply["type"] == "error":
            raise NodeErrorResponse(reply.get("code", "error"), reply.get("message", ""))
        if reply["type"] != expected_type:
            raise WireError(f"expected {expected_type}, got {reply['type']}")
        return reply

    def info(self) -> NodeInfo:
        with self._connect() as sock:
            send_frame(sock, {"type": "info", "protocol_version": PROTOCOL_VERSION})
            return NodeInfo.from_json(self._expect(sock, "info_ok"))

    def stage(self, data: bytes, dataset_id: int, fragment_index: int) -> dict:
        with self._connect() as sock:
            send_frame(sock, {
                "type": "stage",
                "dataset_id": dataset_id,
                "fragment_index": fragment_index,
                "byte_length": len(data),
            })
            send_raw(sock, data)
            return self._expect(sock, "stage_ok")

    def run(self, job_id: int, dataset_id: int, fragment_indices: list[int],
            filter_text: str, calibration: dict | None = None) -> dict:
        with self._connect() as sock:
            send_frame(sock, {
                "type": "run",
                "job_id": job_id,
                "dataset_id": dataset_id,
                "fragment_indices": sorted(fragment_indices),
                "filter": filter_text,
                "calibration": calibration,
            })
            return self._expect(sock, "run_ok")

    def status(self, job_id: int) -> dict:
        with self._connect() as sock:
            send_frame(sock, {"type": "status", "job_id": job_id})
            return self._expect(sock, "status_ok")

    def fetch(self, job_id: int, fragment_index: int | None = None) -> tuple[dict, bytes]:
        with self._connect() as sock:
            request = {"type": "fetch", "job_id": job_id}
            if fragment_index is not None:
                request["fragment_index"] = fragment_index
            send_frame(sock, request)
            header = self._expect(sock, "fetch_ok")
            data = recv_exact(sock, header["byte_length"])
            return header, data
