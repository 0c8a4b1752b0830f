"""Durable metadata catalog: job tuples, node registry, fragment placements.

Backed by an append-only journal plus periodic snapshots instead of an
external database. Every mutation is serialized as one length-prefixed
JSON record and fsynced before it is applied in memory and acknowledged,
so any acknowledged mutation survives a crash. Recovery replays the
snapshot and then the journal, stops at the first torn or corrupt record,
and truncates the tail so the journal is clean for new appends.

Directory layout:

    journal.log     u32-LE length-prefixed JSON mutation records
    snapshot.json   atomic-rename replacement, carries the last seq applied
    store/          ingest store: raw fragments kept for staging moves
    results/        merged job outputs, job-<id>.geb
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import filters
from .events import Schema
from .filters import Calibration

logger = logging.getLogger(__name__)

_LEN = struct.Struct("<I")
MAX_RECORD_BYTES = 64 * 1024 * 1024

JOB_STATES = ("NEW", "STAGING", "RUNNING", "MERGING", "FINISHED", "ERROR")
TERMINAL_STATES = ("FINISHED", "ERROR")

# Legal edges of the job state machine. Any non-terminal state may also
# move to ERROR.
_NEXT = {
    "NEW": {"STAGING", "ERROR"},
    "STAGING": {"RUNNING", "ERROR"},
    "RUNNING": {"MERGING", "ERROR"},
    "MERGING": {"FINISHED", "ERROR"},
    "FINISHED": set(),
    "ERROR": set(),
}

ALL_TARGET = "ALL"


class CatalogError(Exception):
    pass


class SubmitRejectedError(CatalogError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


class IllegalTransitionError(CatalogError):
    pass


class NotFoundError(CatalogError):
    pass


@dataclass
class JobSpec:
    target: str
    filter_text: str
    dataset_id: int
    calibration: Calibration | None = None
    submitted_by: str = ""
    submitted_at: float = 0.0

    def to_json(self) -> dict:
        return {
            "target": self.target,
            "filter_text": self.filter_text,
            "dataset_id": self.dataset_id,
            "calibration": self.calibration.to_json() if self.calibration else None,
            "submitted_by": self.submitted_by,
            "submitted_at": self.submitted_at,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "JobSpec":
        cal = obj.get("calibration")
        return cls(
            target=obj["target"],
            filter_text=obj["filter_text"],
            dataset_id=obj["dataset_id"],
            calibration=Calibration.from_json(cal) if cal else None,
            submitted_by=obj.get("submitted_by", ""),
            submitted_at=obj.get("submitted_at", 0.0),
        )


@dataclass
class JobRecord:
    job_id: int
    spec: JobSpec
    state: str = "NEW"
    error: str | None = None
    result_path: str | None = None
    counters: dict[str, dict[str, int]] = field(default_factory=dict)
    timestamps: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "job_id": self.job_id,
            "spec": self.spec.to_json(),
            "state": self.state,
            "error": self.error,
            "result_path": self.result_path,
            "counters": self.counters,
            "timestamps": self.timestamps,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "JobRecord":
        return cls(
            job_id=obj["job_id"],
            spec=JobSpec.from_json(obj["spec"]),
            state=obj["state"],
            error=obj.get("error"),
            result_path=obj.get("result_path"),
            counters={k: dict(v) for k, v in obj.get("counters", {}).items()},
            timestamps=dict(obj.get("timestamps", {})),
        )

    def copy(self) -> "JobRecord":
        return JobRecord.from_json(self.to_json())


@dataclass
class NodeRecord:
    name: str
    address: str
    last_info: dict = field(default_factory=dict)
    last_seen: float = 0.0
    alive: bool = False  # derived at read time from last_seen staleness

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "address": self.address,
            "last_info": self.last_info,
            "last_seen": self.last_seen,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NodeRecord":
        return cls(
            name=obj["name"],
            address=obj["address"],
            last_info=dict(obj.get("last_info", {})),
            last_seen=obj.get("last_seen", 0.0),
        )


@dataclass(frozen=True)
class PlacementRecord:
    dataset_id: int
    fragment_index: int
    node: str
    replica_rank: int

    def to_json(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "fragment_index": self.fragment_index,
            "node": self.node,
            "replica_rank": self.replica_rank,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PlacementRecord":
        return cls(obj["dataset_id"], obj["fragment_index"], obj["node"], obj["replica_rank"])


@dataclass
class DatasetRecord:
    dataset_id: int
    variables: tuple[str, ...]
    n_fragments: int
    total_events: int

    def schema(self) -> Schema:
        return Schema(self.variables)

    def to_json(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "variables": list(self.variables),
            "n_fragments": self.n_fragments,
            "total_events": self.total_events,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetRecord":
        return cls(obj["dataset_id"], tuple(obj["variables"]), obj["n_fragments"],
                   obj["total_events"])


class Catalog:
    """Journal-backed catalog; all operations are linearizable.

    A single lock serializes mutations (journal append + fsync happens
    before the in-memory apply and the acknowledgment); readers take the
    same lock briefly and hand out copies.
    """

    def __init__(self, path: str | os.PathLike, staleness_s: float = 10.0,
                 snapshot_every: int = 1000):
        self.path = Path(path)
        self.staleness_s = staleness_s
        self.snapshot_every = snapshot_every
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "results").mkdir(exist_ok=True)
        (self.path / "store").mkdir(exist_ok=True)

        self._lock = threading.RLock()
        self._seq = 0
        self._next_job_id = 1
        self._next_dataset_id = 1
        self._jobs: dict[int, JobRecord] = {}
        self._nodes: dict[str, NodeRecord] = {}
        self._placements: dict[tuple[int, int, str], PlacementRecord] = {}
        self._datasets: dict[int, DatasetRecord] = {}
        self._mutations_since_snapshot = 0
        self.recovered_truncation: tuple[int, str] | None = None

        self._recover()
        self._journal = open(self.journal_path, "ab")

    @property
    def journal_path(self) -> Path:
        return self.path / "journal.log"

    @property
    def snapshot_path(self) -> Path:
        return self.path / "snapshot.json"

    @property
    def store_dir(self) -> Path:
        return self.path / "store"

    @property
    def results_dir(self) -> Path:
        return self.path / "results"

    def close(self) -> None:
        with self._lock:
            if not self._journal.closed:
                self._journal.close()

    # --- recovery ---------------------------------------------------------

    def _recover(self) -> None:
        if self.snapshot_path.exists():
            with open(self.snapshot_path) as fh:
                snap = json.load(fh)
            self._seq = snap["seq"]
            self._next_job_id = snap["next_job_id"]
            self._next_dataset_id = snap["next_dataset_id"]
            self._jobs = {int(k): JobRecord.from_json(v) for k, v in snap["jobs"].items()}
            self._nodes = {k: NodeRecord.from_json(v) for k, v in snap["nodes"].items()}
            self._datasets = {
                int(k): DatasetRecord.from_json(v) for k, v in snap["datasets"].items()
            }
            self._placements = {}
            for obj in snap["placements"]:
                rec = PlacementRecord.from_json(obj)
                self._placements[(rec.dataset_id, rec.fragment_index, rec.node)] = rec

        if not self.journal_path.exists():
            return
        data = self.journal_path.read_bytes()
        pos = 0
        valid_end = 0
        while pos < len(data):
            if pos + 4 > len(data):
                self._mark_truncation(pos, "torn length prefix")
                break
            (length,) = _LEN.unpack(data[pos:pos + 4])
            if length == 0 or length > MAX_RECORD_BYTES:
                self._mark_truncation(pos, f"implausible record length {length}")
                break
            if pos + 4 + length > len(data):
                self._mark_truncation(pos, "torn record body")
                break
            try:
                record = json.loads(data[pos + 4:pos + 4 + length])
            except (UnicodeDecodeError, json.JSONDecodeError):
                self._mark_truncation(pos, "undecodable record")
                break
            if record["seq"] > self._seq:
                for entry in record["ops"]:
                    self._apply(entry["op"], entry["data"])
                self._seq = record["seq"]
            pos += 4 + length
            valid_end = pos
        if self.recovered_truncation is not None and valid_end < len(data):
            with open(self.journal_path, "r+b") as fh:
                fh.truncate(valid_end)

    def _mark_truncation(self, offset: int, reason: str) -> None:
        self.recovered_truncation = (offset, reason)
        logger.warning("journal recovery stopped at byte %d: %s", offset, reason)

    # --- journaling ---------------------------------------------------------

    def _commit(self, ops: list[tuple[str, dict]]) -> None:
        """Journal one atomic record (fsynced) and then apply it in memory.

        Multi-op commits such as a claim batch land in a single record,
        so recovery never exposes a partially applied batch.
        """
        self._seq += 1
        record = {
            "seq": self._seq,
            "ops": [{"op": op, "data": data} for op, data in ops],
        }
        encoded = json.dumps(record, separators=(",", ":")).encode("utf-8")
        self._journal.write(_LEN.pack(len(encoded)) + encoded)
        self._journal.flush()
        os.fsync(self._journal.fileno())
        for op, data in ops:
            self._apply(op, data)
        self._mutations_since_snapshot += 1
        if self._mutations_since_snapshot >= self.snapshot_every:
            self.snapshot()

    def _apply(self, op: str, data: dict) -> None:
        if op == "job_submit":
            job = JobRecord.from_json(data)
            self._jobs[job.job_id] = job
            self._next_job_id = max(self._next_job_id, job.job_id + 1)
        elif op == "job_transition":
            job = self._jobs[data["job_id"]]
            new_state = data["state"]
            if new_state not in _NEXT[job.state]:
                raise IllegalTransitionError(
                    f"job {job.job_id}: {job.state} -> {new_state}"
                )
            job.state = new_state
            job.timestamps[new_state] = data["ts"]
            if data.get("error") is not None:
                job.error = data["error"]
            if data.get("result_path") is not None:
                job.result_path = data["result_path"]
        elif op == "job_counters":
            job = self._jobs[data["job_id"]]
            job.counters[data["node"]] = {
                "events_scanned": data["events_scanned"],
                "events_passed": data["events_passed"],
            }
        elif op == "node_register":
            name = data["name"]
            existing = self._nodes.get(name)
            if existing is None:
                self._nodes[name] = NodeRecord.from_json(data)
            else:
                existing.address = data["address"]
                existing.last_info = dict(data.get("last_info", {}))
                existing.last_seen = data["last_seen"]
        elif op == "placement":
            rec = PlacementRecord.from_json(data)
            self._placements[(rec.dataset_id, rec.fragment_index, rec.node)] = rec
        elif op == "dataset_register":
            rec = DatasetRecord.from_json(data)
            self._datasets[rec.dataset_id] = rec
            self._next_dataset_id = max(self._next_dataset_id, rec.dataset_id + 1)
        else:
            raise CatalogError(f"unknown journal op {op!r}")

    def snapshot(self) -> None:
        """Write a point-in-time snapshot and truncate the journal."""
        with self._lock:
            snap = {
                "seq": self._seq,
                "next_job_id": self._next_job_id,
                "next_dataset_id": self._next_dataset_id,
                "jobs": {str(k): v.to_json() for k, v in self._jobs.items()},
                "nodes": {k: v.to_json() for k, v in self._nodes.items()},
                "datasets": {str(k): v.to_json() for k, v in self._datasets.items()},
                "placements": [p.to_json() for p in self._placements.values()],
            }
            tmp = self.snapshot_path.with_suffix(".json.tmp")
            with open(tmp, "w") as fh:
                json.dump(snap, fh)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.snapshot_path)
            # Journal records up to seq are now redundant; replay skips
            # anything <= snapshot seq, so truncating here is safe even if
            # we crash between the two steps.
            self._journal.close()
            self._journal = open(self.journal_path, "wb")
            self._mutations_since_snapshot = 0

    # --- jobs ---------------------------------------------------------------

    def submit_job(self, spec: JobSpec) -> int:
        """Validate and durably append a new job; returns its dense id."""
        with self._lock:
            errors = []
            dataset = self._datasets.get(spec.dataset_id)
            if dataset is None:
                errors.append(f"unknown dataset {spec.dataset_id}")
            if spec.target != ALL_TARGET and spec.target not in self._nodes:
                errors.append(f"unknown target node '{spec.target}'")
            expr = None
            try:
                expr = filters.parse(spec.filter_text)
            except filters.FilterSyntaxError as exc:
                errors.append(f"syntax error: {exc}")
            if expr is not None and dataset is not None:
                errors.extend(filters.validate(expr, dataset.schema()))
                if spec.calibration is not None:
                    errors.extend(
                        f"unknown calibration variable '{name}'"
                        for name in spec.calibration.validate(dataset.schema())
                    )
            if errors:
                raise SubmitRejectedError(errors)

            now = time.time()
            job = JobRecord(
                job_id=self._next_job_id,
                spec=JobSpec(
                    target=spec.target,
                    filter_text=filters.render(expr),
                    dataset_id=spec.dataset_id,
                    calibration=spec.calibration,
                    submitted_by=spec.submitted_by,
                    submitted_at=now,
                ),
                state="NEW",
                timestamps={"NEW": now},
            )
            self._commit([("job_submit", job.to_json())])
            return job.job_id

    def transition(self, job_id: int, new_state: str, error: str | None = None,
                   result_path: str | None = None) -> JobRecord:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise NotFoundError(f"no job {job_id}")
            if new_state not in _NEXT.get(job.state, set()):
                raise IllegalTransitionError(
                    f"job {job_id}: illegal transition {job.state} -> {new_state}"
                )
            if new_state == "FINISHED":
                if not result_path:
                    raise CatalogError("FINISHED requires a result_path")
                if error:
                    raise CatalogError("FINISHED cannot carry an error")
            if new_state == "ERROR" and not error:
                raise CatalogError("ERROR requires a message")
            self._commit([
                ("job_transition", {
                    "job_id": job_id,
                    "state": new_state,
                    "ts": time.time(),
                    "error": error,
                    "result_path": result_path,
                })
            ])
            return self._jobs[job_id].copy()

    def claim_new_jobs(self, limit: int) -> list[JobRecord]:
        """Atomically move up to `limit` NEW jobs (oldest first) to STAGING."""
        with self._lock:
            fresh = sorted(
                (j for j in self._jobs.values() if j.state == "NEW"),
                key=lambda j: j.job_id,
            )[:limit]
            if not fresh:
                return []
            now = time.time()
            self._commit([
                ("job_transition", {"job_id": j.job_id, "state": "STAGING",
                                    "ts": now, "error": None, "result_path": None})
                for j in fresh
            ])
            return [self._jobs[j.job_id].copy() for j in fresh]

    def update_counters(self, job_id: int, node: str, events_scanned: int,
                        events_passed: int) -> None:
        with self._lock:
            if job_id not in self._jobs:
                raise NotFoundError(f"no job {job_id}")
            current = self._jobs[job_id].counters.get(node)
            if current and (current["events_scanned"], current["events_passed"]) == \
                    (events_scanned, events_passed):
                return
            self._commit([
                ("job_counters", {"job_id": job_id, "node": node,
                                  "events_scanned": events_scanned,
                                  "events_passed": events_passed})
            ])

    def get_job(self, job_id: int) -> JobRecord:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise NotFoundError(f"no job {job_id}")
            return job.copy()

    def list_jobs(self) -> list[JobRecord]:
        with self._lock:
            return [self._jobs[k].copy() for k in sorted(self._jobs)]

    # --- nodes ----------------------------------------------------------------

    def register_node(self, name: str, address: str, info: dict | None = None) -> None:
        """Upsert a node registration and refresh its last_seen stamp."""
        with self._lock:
            self._commit([
                ("node_register", {
                    "name": name,
                    "address": address,
                    "last_info": info or {},
                    "last_seen": time.time(),
                })
            ])

    def get_node(self, name: str) -> NodeRecord:
        with self._lock:
            node = self._nodes.get(name)
            if node is None:
                raise NotFoundError(f"no node '{name}'")
            return self._materialize_node(node)

    def list_nodes(self) -> list[NodeRecord]:
        with self._lock:
            return [self._materialize_node(self._nodes[k]) for k in sorted(self._nodes)]

    def _materialize_node(self, node: NodeRecord) -> NodeRecord:
        copy = NodeRecord.from_json(node.to_json())
        copy.alive = (time.time() - copy.last_seen) <= self.staleness_s
        return copy

    # --- placements and datasets -----------------------------------------------

    def record_placement(self, placement: PlacementRecord) -> None:
        with self._lock:
            if placement.replica_rank == 0:
                for (d, f, node), existing in self._placements.items():
                    if (d, f) == (placement.dataset_id, placement.fragment_index) \
                            and existing.replica_rank == 0 and node != placement.node:
                        raise CatalogError(
                            f"fragment ({d}, {f}) already has a primary on {node}"
                        )
            self._commit([("placement", placement.to_json())])

    def placements(self, dataset_id: int) -> list[PlacementRecord]:
        with self._lock:
            found = [p for p in self._placements.values() if p.dataset_id == dataset_id]
            return sorted(found, key=lambda p: (p.fragment_index, p.replica_rank, p.node))

    def register_dataset(self, variables: tuple[str, ...], n_fragments: int,
                         total_events: int, dataset_id: int | None = None) -> int:
        with self._lock:
            if dataset_id is None:
                dataset_id = self._next_dataset_id
            rec = DatasetRecord(dataset_id, tuple(variables), n_fragments, total_events)
            self._commit([("dataset_register", rec.to_json())])
            return dataset_id

    def get_dataset(self, dataset_id: int) -> DatasetRecord:
        with self._lock:
            rec = self._datasets.get(dataset_id)
            if rec is None:
                raise NotFoundError(f"no dataset {dataset_id}")
            return DatasetRecord.from_json(rec.to_json())

    def list_datasets(self) -> list[DatasetRecord]:
        with self._lock:
            return [DatasetRecord.from_json(self._datasets[k].to_json())
                    for k in sorted(self._datasets)]
