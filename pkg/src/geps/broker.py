"""Job engine: polling broker, staging coordinator, dispatcher, monitor,
failover handler and result merger.

The broker polls the catalog for NEW jobs, plans each one for locality,
stages whatever the plan demands, dispatches `run` frames, monitors the
nodes with exponential backoff, reassigns fragments from dead nodes to
alive replica holders, then fetches the per-fragment result parts and
merges them into `results/job-<id>.geb`. Node agents are idempotent on
duplicate stage and run frames, so any step may be repeated after a
crash-restart without changing the outcome.
"""

from __future__ import annotations

import logging
import os
import tempfile
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import geb, planner
from .catalog import Catalog, JobRecord, PlacementRecord
from .events import DEFAULT_VARIABLES, Schema, merge_fragments, split_dataset, synth_dataset
from .wire import NodeClient, NodeErrorResponse, WireError

logger = logging.getLogger(__name__)


@dataclass
class BrokerConfig:
    poll_interval_s: float = 0.5
    retry_limit: int = 3
    staleness_s: float = 10.0
    backoff_initial_s: float = 0.1
    backoff_max_s: float = 2.0
    node_timeout_s: float = 10.0
    max_concurrent_jobs: int = 4


class JobFailedError(Exception):
    pass


class IngestError(Exception):
    def __init__(self, message: str, per_node: dict[str, str] | None = None):
        super().__init__(message)
        self.per_node = per_node or {}


class Broker:
    def __init__(self, catalog: Catalog, config: BrokerConfig | None = None):
        self.catalog = catalog
        self.config = config or BrokerConfig()
        self._stop = threading.Event()
        self._pool = ThreadPoolExecutor(
            max_workers=self.config.max_concurrent_jobs, thread_name_prefix="job"
        )
        self._in_flight: set[int] = set()
        self._in_flight_lock = threading.Lock()
        self._threads: list[threading.Thread] = []

    # --- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        self._stop.clear()
        self._resume_incomplete()
        for target, name in ((self._claim_loop, "broker-claim"),
                             (self._node_monitor_loop, "broker-nodes")):
            thread = threading.Thread(target=target, name=name, daemon=True)
            thread.start()
            self._threads.append(thread)

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=10)
        self._threads.clear()
        self._pool.shutdown(wait=True, cancel_futures=True)

    def _resume_incomplete(self) -> None:
        for job in self.catalog.list_jobs():
            if job.state in ("STAGING", "RUNNING", "MERGING"):
                self._spawn(job)

    def _spawn(self, job: JobRecord) -> None:
        with self._in_flight_lock:
            if job.job_id in self._in_flight:
                return
            self._in_flight.add(job.job_id)
        self._pool.submit(self._drive_wrapper, job)

    def _claim_loop(self) -> None:
        while not self._stop.is_set():
            try:
                claimed = self.catalog.claim_new_jobs(self.config.max_concurrent_jobs)
                for job in claimed:
                    self._spawn(job)
            except Exception:  # noqa: BLE001
                logger.exception("claim loop error")
            self._stop.wait(self.config.poll_interval_s)

    def _node_monitor_loop(self) -> None:
        """Refresh node liveness by querying each registered agent."""
        while not self._stop.is_set():
            for record in self.catalog.list_nodes():
                if self._stop.is_set():
                    break
                try:
                    info = self._client(record.address).info()
                except (OSError, WireError, NodeErrorResponse):
                    continue  # last_seen goes stale on its own
                self.catalog.register_node(record.name, record.address, info.to_json())
            self._stop.wait(self.config.poll_interval_s)

    def _client(self, address: str) -> NodeClient:
        return NodeClient.from_address(address, timeout=self.config.node_timeout_s)

    def _node_address(self, name: str) -> str:
        return self.catalog.get_node(name).address

    # --- job drive ---------------------------------------------------------------

    def _drive_wrapper(self, job: JobRecord) -> None:
        try:
            self.drive_job(job)
        except Exception as exc:  # noqa: BLE001
            logger.exception("job %d failed", job.job_id)
            self._fail_job(job.job_id, str(exc))
        finally:
            with self._in_flight_lock:
                self._in_flight.discard(job.job_id)

    def _fail_job(self, job_id: int, message: str) -> None:
        try:
            current = self.catalog.get_job(job_id)
            if current.state not in ("FINISHED", "ERROR"):
                self.catalog.transition(job_id, "ERROR", error=message)
        except Exception:  # noqa: BLE001
            logger.exception("could not record failure of job %d", job_id)

    def _ensure_state(self, job_id: int, state: str) -> None:
        current = self.catalog.get_job(job_id).state
        if current != state:
            self.catalog.transition(job_id, state)

    def drive_job(self, job: JobRecord) -> None:
        """Take one claimed or resumed job to FINISHED (or ERROR)."""
        driver = _JobDriver(self, job)
        driver.run()


class _JobDriver:
    """Single-job execution state: assignments, failovers, fetches."""

    def __init__(self, broker: Broker, job: JobRecord):
        self.broker = broker
        self.catalog = broker.catalog
        self.config = broker.config
        self.job = job
        self.dataset = self.catalog.get_dataset(job.spec.dataset_id)
        self.assignments: dict[str, set[int]] = {}
        self.dead_nodes: set[str] = set()
        self.reassignments: dict[int, int] = {}

    # persistent fragment -> node view derived from assignments
    def _fragment_map(self) -> dict[int, str]:
        return {
            index: node
            for node, indices in self.assignments.items()
            for index in indices
        }

    def run(self) -> None:
        job_id = self.job.job_id
        state = self.catalog.get_job(job_id).state
        if state in ("FINISHED", "ERROR"):
            return
        try:
            plan = self._plan()
        except planner.PlanError as exc:
            raise JobFailedError(str(exc)) from exc
        self.assignments = {node: set(frags) for node, frags in plan.assignments.items()}

        if state == "STAGING":
            self._stage(plan)
            self.catalog.transition(job_id, "RUNNING")
        elif state == "RUNNING":
            # Crash-resume: staging moves may or may not have completed.
            self._stage(plan)

        self._dispatch_all()
        self._monitor_until_done()
        self.broker._ensure_state(job_id, "MERGING")
        merged_path = self._fetch_and_merge()
        self.catalog.transition(job_id, "FINISHED", result_path=merged_path)

    # --- planning / staging -------------------------------------------------

    def _plan(self) -> planner.JobPlan:
        store_fragments = {
            index for index in range(self.dataset.n_fragments)
            if self._store_path(index).exists()
        }
        return planner.plan(
            self.job,
            self.dataset,
            self.catalog.placements(self.dataset.dataset_id),
            self.catalog.list_nodes(),
            store_fragments,
        )

    def _store_path(self, index: int) -> Path:
        return self.catalog.store_dir / f"d{self.dataset.dataset_id}-f{index}.geb"

    def _stage(self, plan: planner.JobPlan) -> None:
        placements = self.catalog.placements(self.dataset.dataset_id)
        placed = {(p.fragment_index, p.node) for p in placements}
        for move in plan.staging_moves:
            if (move.fragment_index, move.destination) in placed:
                continue
            data = self._store_path(move.fragment_index).read_bytes()
            expected_crc = zlib.crc32(data[4:-4])
            address = self.broker._node_address(move.destination)
            last_error = None
            for _ in range(self.config.retry_limit + 1):
                try:
                    ack = self.broker._client(address).stage(
                        data, self.dataset.dataset_id, move.fragment_index
                    )
                except (OSError, WireError, NodeErrorResponse) as exc:
                    last_error = str(exc)
                    continue
                if ack["crc32"] != expected_crc:
                    last_error = f"stage ack crc mismatch for fragment {move.fragment_index}"
                    continue
                rank = 1 + max(
                    (p.replica_rank for p in placements
                     if p.fragment_index == move.fragment_index),
                    default=0,
                )
                self.catalog.record_placement(PlacementRecord(
                    self.dataset.dataset_id, move.fragment_index,
                    move.destination, rank,
                ))
                last_error = None
                break
            if last_error is not None:
                raise JobFailedError(
                    f"staging fragment {move.fragment_index} to {move.destination} "
                    f"failed: {last_error}"
                )

    # --- dispatch / monitor ------------------------------------------------------

    def _dispatch_all(self) -> None:
        for node, indices in sorted(self.assignments.items()):
            self._dispatch(node, sorted(indices))

    def _dispatch(self, node: str, indices: list[int]) -> None:
        if not indices:
            return
        try:
            self.broker._client(self.broker._node_address(node)).run(
                self.job.job_id,
                self.dataset.dataset_id,
                indices,
                self.job.spec.filter_text,
                self.job.spec.calibration.to_json() if self.job.spec.calibration else None,
            )
        except NodeErrorResponse as exc:
            if exc.code in ("missing-fragments", "bad-filter"):
                raise JobFailedError(f"node {node} refused the run: {exc}") from exc
            # Anything else (e.g. a node mid-shutdown) counts as node failure.
            self._handle_dead_node(node)
        except (OSError, WireError):
            self._handle_dead_node(node)

    def _monitor_until_done(self) -> None:
        backoff = self.config.backoff_initial_s
        failure_started: dict[str, float] = {}
        while True:
            pending = False
            for node in sorted(self.assignments):
                if not self.assignments[node]:
                    continue
                try:
                    snap = self.broker._client(self.broker._node_address(node)) \
                        .status(self.job.job_id)
                except NodeErrorResponse as exc:
                    if exc.code == "not-found":
                        # Agent restarted and lost its run table; re-dispatch.
                        self._dispatch(node, sorted(self.assignments.get(node, ())))
                        pending = True
                        continue
                    # Other error frames from status indicate a sick node.
                    started = failure_started.setdefault(node, time.monotonic())
                    if time.monotonic() - started > self.config.staleness_s:
                        failure_started.pop(node, None)
                        self._handle_dead_node(node)
                    pending = True
                    continue
                except (OSError, WireError):
                    started = failure_started.setdefault(node, time.monotonic())
                    if time.monotonic() - started > self.config.staleness_s:
                        failure_started.pop(node, None)
                        self._handle_dead_node(node)
                    pending = True
                    continue
                failure_started.pop(node, None)
                self.catalog.update_counters(
                    self.job.job_id, node,
                    snap["events_scanned"], snap["events_passed"],
                )
                if snap["state"] == "FAILED":
                    raise JobFailedError(f"node {node} failed: {snap['error']}")
                if snap["state"] != "DONE":
                    pending = True
            if not pending:
                return
            time.sleep(backoff)
            backoff = min(backoff * 2, self.config.backoff_max_s)

    # --- failover --------------------------------------------------------------

    def _handle_dead_node(self, node: str) -> None:
        """Reassign a dead node's fragments to alive replica holders."""
        self.dead_nodes.add(node)
        lost = sorted(self.assignments.pop(node, set()))
        if not lost:
            return
        logger.warning("job %d: node %s died, reassigning fragments %s",
                       self.job.job_id, node, lost)
        for index in lost:
            self.reassignments[index] = self.reassignments.get(index, 0) + 1
            if self.reassignments[index] > self.config.retry_limit:
                raise JobFailedError(
                    f"fragment {index} exceeded the reassignment limit"
                )
        alive = {n.name for n in self.catalog.list_nodes() if n.alive}
        try:
            replacement = planner.failover_targets(
                self.catalog.placements(self.dataset.dataset_id),
                lost, alive, self.dead_nodes,
            )
        except planner.PlanError as exc:
            raise JobFailedError(str(exc)) from exc
        # The dead node's partial contribution will be recomputed elsewhere.
        self.catalog.update_counters(self.job.job_id, node, 0, 0)
        by_node: dict[str, list[int]] = {}
        for index, new_node in replacement.items():
            by_node.setdefault(new_node, []).append(index)
        for new_node, indices in sorted(by_node.items()):
            self.assignments.setdefault(new_node, set()).update(indices)
            self._dispatch(new_node, sorted(indices))

    # --- fetch / merge ------------------------------------------------------------

    def _fetch_part(self, index: int) -> geb.FragmentFile:
        attempts = 0
        while True:
            node = self._fragment_map()[index]
            address = self.broker._node_address(node)
            try:
                header, data = self.broker._client(address).fetch(
                    self.job.job_id, fragment_index=index
                )
                if header["crc32"] != zlib.crc32(data):
                    raise WireError("fetched bytes fail the transfer checksum")
                return geb.decode_fragment(data)
            except NodeErrorResponse as exc:
                attempts += 1
                if attempts > self.config.retry_limit * 4 + 8:
                    raise JobFailedError(
                        f"fetch of fragment {index} never settled: {exc}"
                    ) from exc
                if exc.code == "not-found":
                    # Node restarted after DONE: re-execute locally.
                    self._dispatch(node, sorted(self.assignments.get(node, ())))
                    self._monitor_until_done()
                elif exc.code == "not-ready":
                    self._monitor_until_done()
                else:
                    # Sick node: re-execute its share on a replica.
                    self._handle_dead_node(node)
                    self._monitor_until_done()
            except (OSError, WireError, geb.GebError) as exc:
                attempts += 1
                if attempts > self.config.retry_limit:
                    # Treat the node as dead and re-execute from a replica.
                    self._handle_dead_node(node)
                    self._monitor_until_done()
                    attempts = 0
                else:
                    time.sleep(self.config.backoff_initial_s)

    def _fetch_and_merge(self) -> str:
        parts = [self._fetch_part(index) for index in sorted(self._fragment_map())]
        merged = merge_fragments(parts)
        result_name = f"job-{self.job.job_id}.geb"
        final = self.catalog.results_dir / result_name
        data = geb.encode_fragment(merged)
        fd, tmp = tempfile.mkstemp(dir=self.catalog.results_dir, prefix=".merge-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, final)
        except BaseException:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
            raise
        return f"results/{result_name}"


# --- ingest --------------------------------------------------------------------


def ingest_dataset(catalog: Catalog, *, n_fragments: int, replication: int,
                   seed: int = 0, n_events: int = 0, payload_bytes: int = 0,
                   variables: tuple[str, ...] | None = None,
                   events=None, node_timeout_s: float = 10.0) -> dict:
    """Split a dataset and stage each fragment onto `replication` nodes.

    Fragments are placed round-robin (fragment i, replica r goes to node
    (i + r) mod n) and kept in the catalog's ingest store so later
    single-target jobs can stage them to nodes that lack them.
    """
    nodes = [n for n in catalog.list_nodes() if n.alive]
    if replication < 1:
        raise IngestError("replication must be >= 1")
    if replication > len(nodes):
        raise IngestError(
            f"replication {replication} exceeds the {len(nodes)} alive nodes"
        )
    schema = Schema(tuple(variables) if variables else DEFAULT_VARIABLES)
    if events is None:
        events = synth_dataset(seed, n_events, schema, payload_bytes)
    if not events:
        raise IngestError("dataset has no events")
    if n_fragments > len(events):
        raise IngestError(
            f"n_fragments {n_fragments} exceeds the {len(events)} events"
        )

    dataset_id = catalog.register_dataset(schema.variables, n_fragments, len(events))
    fragments = split_dataset(events, n_fragments, dataset_id, schema)
    failures: dict[str, str] = {}
    staged = 0
    for fragment in fragments:
        data = geb.encode_fragment(fragment)
        index = fragment.meta.fragment_index
        store_path = catalog.store_dir / f"d{dataset_id}-f{index}.geb"
        store_path.write_bytes(data)
        for rank in range(replication):
            node = nodes[(index + rank) % len(nodes)]
            try:
                ack = NodeClient.from_address(node.address, timeout=node_timeout_s) \
                    .stage(data, dataset_id, index)
                if ack["crc32"] != zlib.crc32(data[4:-4]):
                    raise WireError("stage ack crc mismatch")
            except (OSError, WireError, NodeErrorResponse) as exc:
                failures[node.name] = str(exc)
                continue
            catalog.record_placement(
                PlacementRecord(dataset_id, index, node.name, rank)
            )
            staged += 1
    if failures:
        raise IngestError(
            "staging failed on: " + ", ".join(sorted(failures)), per_node=failures
        )
    return {
        "dataset_id": dataset_id,
        "n_fragments": n_fragments,
        "total_events": len(events),
        "staged_copies": staged,
        "nodes": sorted({n.name for n in nodes}),
    }
