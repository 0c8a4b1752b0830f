"""GEB1 fragment file codec.

Bit-exact little-endian layout:

    magic "GEB1" (4 bytes)
    version          u16 = 1
    dataset_id       u64
    fragment_index   u32
    first_event_ordinal u64
    event_count      u32
    n_vars           u16
    per variable:    name_len u16, UTF-8 name
    per event:       event_id u64, n_vars x f64,
                     n_tracks u16, n_tracks x 3 f64,
                     n_vertices u16, n_vertices x 3 f64,
                     payload_len u32, payload bytes
    crc32            u32 over all preceding bytes after the magic

Decoding never crashes on malformed input: every failure is one of the
three typed errors below (format / corruption / truncation).
"""

from __future__ import annotations

import math
import struct
import zlib

from .events import (
    MAX_PAYLOAD_BYTES,
    Event,
    FragmentFile,
    FragmentMeta,
    IDENT_RE,
    Schema,
)

MAGIC = b"GEB1"
VERSION = 1
FILE_EXTENSION = ".geb"

_HEADER = struct.Struct("<HQIQIH")  # version .. n_vars
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")

U16_MAX = 0xFFFF
U32_MAX = 0xFFFFFFFF
U64_MAX = 0xFFFFFFFFFFFFFFFF


class GebError(Exception):
    """Base class for fragment codec errors."""

    code = "geb-error"


class GebFormatError(GebError):
    """Structurally or semantically invalid fragment data."""

    code = "format"


class GebCorruptionError(GebError):
    """Checksum mismatch: the bytes were damaged in storage or transit."""

    code = "corruption"


class GebTruncationError(GebError):
    """Input ends before the declared structure is complete."""

    code = "truncation"


class GebEncodeError(GebError):
    """Fragment violates its invariants and cannot be encoded."""

    code = "encode"


def _check_range(value: int, maximum: int, what: str) -> int:
    if not 0 <= value <= maximum:
        raise GebEncodeError(f"{what} out of range: {value}")
    return value


def encode_body(fragment: FragmentFile) -> bytes:
    """Encode everything after the magic, without the trailing CRC."""
    meta = fragment.meta
    schema = fragment.schema
    if meta.event_count != len(fragment.events):
        raise GebEncodeError(
            f"meta declares {meta.event_count} events, fragment has {len(fragment.events)}"
        )
    out = bytearray()
    out += _HEADER.pack(
        VERSION,
        _check_range(meta.dataset_id, U64_MAX, "dataset_id"),
        _check_range(meta.fragment_index, U32_MAX, "fragment_index"),
        _check_range(meta.first_event_ordinal, U64_MAX, "first_event_ordinal"),
        _check_range(meta.event_count, U32_MAX, "event_count"),
        _check_range(len(schema), U16_MAX, "n_vars"),
    )
    for name in schema.variables:
        encoded = name.encode("utf-8")
        out += _U16.pack(_check_range(len(encoded), U16_MAX, "variable name length"))
        out += encoded
    n_vars = len(schema)
    for event in fragment.events:
        if len(event.values) != n_vars:
            raise GebEncodeError(
                f"event {event.event_id} has {len(event.values)} values, schema has {n_vars}"
            )
        for v in event.values:
            if not math.isfinite(v):
                raise GebEncodeError(f"event {event.event_id}: non-finite value")
        out += _U64.pack(_check_range(event.event_id, U64_MAX, "event_id"))
        out += struct.pack(f"<{n_vars}d", *event.values)
        out += _U16.pack(_check_range(len(event.tracks), U16_MAX, "track count"))
        for triple in event.tracks:
            if not all(math.isfinite(v) for v in triple):
                raise GebEncodeError(f"event {event.event_id}: non-finite track")
            out += struct.pack("<3d", *triple)
        out += _U16.pack(_check_range(len(event.vertices), U16_MAX, "vertex count"))
        for triple in event.vertices:
            if not all(math.isfinite(v) for v in triple):
                raise GebEncodeError(f"event {event.event_id}: non-finite vertex")
            out += struct.pack("<3d", *triple)
        if len(event.payload) > MAX_PAYLOAD_BYTES:
            raise GebEncodeError(f"event {event.event_id}: payload exceeds 16 MiB")
        out += _U32.pack(len(event.payload))
        out += event.payload
    return bytes(out)


def fragment_crc32(fragment: FragmentFile) -> int:
    return zlib.crc32(encode_body(fragment))


def encode_fragment(fragment: FragmentFile) -> bytes:
    body = encode_body(fragment)
    return MAGIC + body + _U32.pack(zlib.crc32(body))


class _Cursor:
    """Bounds-checked reader; running off the end is a truncation error."""

    def __init__(self, data: bytes, start: int, end: int):
        self.data = data
        self.pos = start
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise GebTruncationError(
                f"need {n} bytes at offset {self.pos}, only {self.end - self.pos} left"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def f64s(self, count: int) -> tuple[float, ...]:
        return struct.unpack(f"<{count}d", self.take(8 * count))


def decode_fragment(data: bytes) -> FragmentFile:
    """Decode and fully validate a GEB1 byte string.

    Raises GebTruncationError / GebFormatError / GebCorruptionError; the
    CRC is checked before any value-level validation so damaged files
    report corruption rather than a misleading semantic error.
    """
    if len(data) < len(MAGIC) + 2:
        raise GebTruncationError(f"{len(data)} bytes is too short for a header")
    if data[:4] != MAGIC:
        raise GebFormatError(f"bad magic {data[:4]!r}")
    version = _U16.unpack(data[4:6])[0]
    if version != VERSION:
        raise GebFormatError(f"unsupported version {version}")
    if len(data) < len(MAGIC) + _HEADER.size + 4:
        raise GebTruncationError("input ends inside the fixed header")

    # Structure first (bounded reads), then CRC, then semantics.
    cur = _Cursor(data, len(MAGIC), len(data) - 4)
    _, dataset_id, fragment_index, first_event_ordinal, event_count, n_vars = \
        _HEADER.unpack(cur.take(_HEADER.size))
    raw_names = []
    for _ in range(n_vars):
        name_len = cur.u16()
        raw_names.append(cur.take(name_len))
    raw_events = []
    for _ in range(event_count):
        event_id = cur.u64()
        values = cur.f64s(n_vars)
        n_tracks = cur.u16()
        track_flat = cur.f64s(3 * n_tracks)
        n_vertices = cur.u16()
        vertex_flat = cur.f64s(3 * n_vertices)
        payload_len = cur.u32()
        if payload_len > MAX_PAYLOAD_BYTES:
            raise GebFormatError(f"payload length {payload_len} exceeds 16 MiB")
        payload = cur.take(payload_len)
        raw_events.append((event_id, values, track_flat, vertex_flat, payload))
    if cur.pos != cur.end:
        raise GebFormatError(f"{cur.end - cur.pos} trailing bytes after last event")

    stored_crc = _U32.unpack(data[-4:])[0]
    actual_crc = zlib.crc32(data[4:-4])
    if stored_crc != actual_crc:
        raise GebCorruptionError(
            f"crc mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )

    names = []
    for raw in raw_names:
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise GebFormatError(f"variable name is not UTF-8: {exc}") from None
        if not IDENT_RE.match(name):
            raise GebFormatError(f"invalid variable name {name!r}")
        names.append(name)
    if not names:
        raise GebFormatError("schema has no variables")
    if len(set(names)) != len(names):
        raise GebFormatError("duplicate variable names")
    schema = Schema(tuple(names))

    events = []
    for event_id, values, track_flat, vertex_flat, payload in raw_events:
        for v in values:
            if not math.isfinite(v):
                raise GebFormatError(f"event {event_id}: non-finite value")
        for v in track_flat:
            if not math.isfinite(v):
                raise GebFormatError(f"event {event_id}: non-finite track")
        for v in vertex_flat:
            if not math.isfinite(v):
                raise GebFormatError(f"event {event_id}: non-finite vertex")
        tracks = tuple(
            (track_flat[i], track_flat[i + 1], track_flat[i + 2])
            for i in range(0, len(track_flat), 3)
        )
        vertices = tuple(
            (vertex_flat[i], vertex_flat[i + 1], vertex_flat[i + 2])
            for i in range(0, len(vertex_flat), 3)
        )
        events.append(Event(event_id, values, tracks, vertices, payload))

    meta = FragmentMeta(
        dataset_id=dataset_id,
        fragment_index=fragment_index,
        event_count=event_count,
        first_event_ordinal=first_event_ordinal,
    )
    return FragmentFile(meta=meta, schema=schema, events=events)


def peek_schema(path) -> Schema:
    """Read just the header and variable names of a fragment file.

    Cheap pre-validation helper; does not verify the CRC.
    """
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + _HEADER.size)
        if len(head) < len(MAGIC) + _HEADER.size:
            raise GebTruncationError("file ends inside the fixed header")
        if head[:4] != MAGIC:
            raise GebFormatError(f"bad magic {head[:4]!r}")
        version, _, _, _, _, n_vars = _HEADER.unpack(head[4:])
        if version != VERSION:
            raise GebFormatError(f"unsupported version {version}")
        names = []
        for _ in range(n_vars):
            raw_len = fh.read(2)
            if len(raw_len) < 2:
                raise GebTruncationError("file ends inside the schema block")
            (name_len,) = _U16.unpack(raw_len)
            raw = fh.read(name_len)
            if len(raw) < name_len:
                raise GebTruncationError("file ends inside a variable name")
            try:
                name = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise GebFormatError(f"variable name is not UTF-8: {exc}") from None
            if not IDENT_RE.match(name):
                raise GebFormatError(f"invalid variable name {name!r}")
            names.append(name)
        if not names or len(set(names)) != len(names):
            raise GebFormatError("invalid schema block")
        return Schema(tuple(names))


def write_fragment(path, fragment: FragmentFile) -> bytes:
    data = encode_fragment(fragment)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def read_fragment(path) -> FragmentFile:
    with open(path, "rb") as fh:
        return decode_fragment(fh.read())
