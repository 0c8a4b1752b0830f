"""Event data model, synthetic dataset generation, splitting and merging.

An Event is one collision record: named scalar variables (schema order),
variable-length track/vertex triples, and an opaque payload blob that
stands in for the ~1 MB of real detector data. Datasets are split into
contiguous fragments; each fragment knows the ordinal of its first event
so merging can restore the original dataset order.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field

IDENT_RE = re.compile(r"^[a-zA-Z_][a-zA-Z0-9_]*$")

MAX_PAYLOAD_BYTES = 16 * 1024 * 1024

# Default variable set used by the portal examples and the synthetic
# generator. Ranges are chosen so every threshold in the reference filter
# corpus selects a non-trivial subset.
DEFAULT_VARIABLES = ("bx", "gotmean", "levr", "evr")
VARIABLE_RANGES = {
    "bx": (0.0, 100_000.0),
    "gotmean": (0.0, 10_000.0),
    "levr": (0.0, 2_000.0),
    "evr": (0.0, 100.0),
}
DEFAULT_RANGE = (0.0, 100_000.0)

MAX_TRACKS_PER_EVENT = 32
MAX_VERTICES_PER_EVENT = 8


class InvalidSplitError(ValueError):
    """Raised when a dataset cannot be split as requested."""


class MergeMismatchError(ValueError):
    """Raised when fragments from different datasets/schemas are merged."""


@dataclass(frozen=True)
class Schema:
    """Ordered set of per-event variable names. Order is significant."""

    variables: tuple[str, ...]

    def __post_init__(self):
        if not self.variables:
            raise ValueError("schema must have at least one variable")
        seen = set()
        for name in self.variables:
            if not IDENT_RE.match(name):
                raise ValueError(f"invalid variable name: {name!r}")
            if name in seen:
                raise ValueError(f"duplicate variable name: {name!r}")
            seen.add(name)

    def index_of(self, name: str) -> int:
        return self.variables.index(name)

    def __contains__(self, name: str) -> bool:
        return name in self.variables

    def __len__(self) -> int:
        return len(self.variables)


DEFAULT_SCHEMA = Schema(DEFAULT_VARIABLES)


@dataclass
class Event:
    """One collision record.

    `values` holds one finite double per schema variable, in schema order.
    Tracks and vertices are (x, y, z) double triples.
    """

    event_id: int
    values: tuple[float, ...]
    tracks: tuple[tuple[float, float, float], ...] = ()
    vertices: tuple[tuple[float, float, float], ...] = ()
    payload: bytes = b""


@dataclass(frozen=True)
class FragmentMeta:
    """Identity of one brick: which dataset slice it holds."""

    dataset_id: int
    fragment_index: int
    event_count: int
    first_event_ordinal: int


@dataclass
class FragmentFile:
    """A contiguous slice of a dataset, the unit of placement and staging."""

    meta: FragmentMeta
    schema: Schema
    events: list[Event] = field(default_factory=list)

    def crc32(self) -> int:
        """CRC-32 of the encoded body (everything after the magic)."""
        from . import geb

        return geb.fragment_crc32(self)


def _event_values(rng: random.Random, schema: Schema) -> tuple[float, ...]:
    vals = []
    for name in schema.variables:
        lo, hi = VARIABLE_RANGES.get(name, DEFAULT_RANGE)
        vals.append(rng.uniform(lo, hi))
    return tuple(vals)


def synth_dataset(seed: int, n_events: int, schema: Schema = DEFAULT_SCHEMA,
                  payload_bytes: int = 0) -> list[Event]:
    """Generate a deterministic synthetic dataset.

    The recipe is fixed: a single Mersenne Twister stream seeded with
    `seed` drives, per event, the variable values (uniform over the
    documented per-variable ranges), a track count in [0, 32), three
    uniform doubles in [-100, 100) per track, a vertex count in [0, 8),
    three uniform doubles in [-10, 10) per vertex, and `payload_bytes`
    of pseudo-random ballast. event_id equals the dataset ordinal.
    """
    if n_events < 0:
        raise ValueError("n_events must be >= 0")
    rng = random.Random(seed)
    events = []
    for ordinal in range(n_events):
        values = _event_values(rng, schema)
        n_tracks = rng.randrange(MAX_TRACKS_PER_EVENT)
        tracks = tuple(
            (rng.uniform(-100.0, 100.0), rng.uniform(-100.0, 100.0), rng.uniform(-100.0, 100.0))
            for _ in range(n_tracks)
        )
        n_vertices = rng.randrange(MAX_VERTICES_PER_EVENT)
        vertices = tuple(
            (rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0))
            for _ in range(n_vertices)
        )
        payload = rng.randbytes(payload_bytes) if payload_bytes else b""
        events.append(Event(ordinal, values, tracks, vertices, payload))
    return events


def split_dataset(events: list[Event], n_fragments: int, dataset_id: int,
                  schema: Schema = DEFAULT_SCHEMA) -> list[FragmentFile]:
    """Split a dataset into contiguous fragments of size differing by <= 1.

    The first `len(events) % n_fragments` fragments receive the extra
    event; `first_event_ordinal` records each slice's offset.
    """
    if n_fragments < 1:
        raise InvalidSplitError("n_fragments must be >= 1")
    if not events:
        raise InvalidSplitError("cannot split an empty dataset")
    if n_fragments > len(events):
        raise InvalidSplitError(
            f"n_fragments ({n_fragments}) exceeds event count ({len(events)})"
        )
    base, extra = divmod(len(events), n_fragments)
    fragments = []
    offset = 0
    for index in range(n_fragments):
        size = base + (1 if index < extra else 0)
        chunk = events[offset:offset + size]
        meta = FragmentMeta(
            dataset_id=dataset_id,
            fragment_index=index,
            event_count=len(chunk),
            first_event_ordinal=offset,
        )
        fragments.append(FragmentFile(meta=meta, schema=schema, events=list(chunk)))
        offset += size
    return fragments


def merge_fragments(parts: list[FragmentFile]) -> FragmentFile:
    """Merge result/raw fragments back into one file.

    Events are ordered by (first_event_ordinal, intra-fragment position),
    so merging the parts of a split restores the original sequence and
    the output is independent of the input list order. Empty parts are
    accepted: a filter run may select nothing from a fragment.
    """
    if not parts:
        raise MergeMismatchError("nothing to merge")
    dataset_id = parts[0].meta.dataset_id
    schema = parts[0].schema
    seen_indices = set()
    for part in parts:
        if part.meta.dataset_id != dataset_id:
            raise MergeMismatchError(
                f"mixed dataset ids: {dataset_id} vs {part.meta.dataset_id}"
            )
        if part.schema != schema:
            raise MergeMismatchError("mixed schemas")
        if part.meta.fragment_index in seen_indices:
            raise MergeMismatchError(
                f"duplicate fragment index {part.meta.fragment_index}"
            )
        seen_indices.add(part.meta.fragment_index)
    ordered = sorted(parts, key=lambda p: (p.meta.first_event_ordinal, p.meta.fragment_index))
    events = []
    for part in ordered:
        events.extend(part.events)
    meta = FragmentMeta(
        dataset_id=dataset_id,
        fragment_index=0,
        event_count=len(events),
        first_event_ordinal=min(p.meta.first_event_ordinal for p in parts),
    )
    return FragmentFile(meta=meta, schema=schema, events=events)


def validate_event(event: Event, schema: Schema) -> None:
    """Check the ingest invariants: value count, finiteness, payload size."""
    if len(event.values) != len(schema):
        raise ValueError(
            f"event {event.event_id}: {len(event.values)} values for "
            f"{len(schema)} schema variables"
        )
    for v in event.values:
        if not math.isfinite(v):
            raise ValueError(f"event {event.event_id}: non-finite value")
    for triple in event.tracks:
        for v in triple:
            if not math.isfinite(v):
                raise ValueError(f"event {event.event_id}: non-finite track")
    for triple in event.vertices:
        for v in triple:
            if not math.isfinite(v):
                raise ValueError(f"event {event.event_id}: non-finite vertex")
    if len(event.payload) > MAX_PAYLOAD_BYTES:
        raise ValueError(f"event {event.event_id}: payload exceeds 16 MiB")
