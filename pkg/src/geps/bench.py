"""Single-node vs parallel benchmark harness.

For each dataset size the harness ingests a fresh dataset (same seed, so
the bytes are identical across repetitions and arms), times an ALL-target
job (pure locality, no transfer) and a single-target job (which must
stage the fragments the target lacks before filtering), and reports the
speedup. With a transfer throttle the staging cost grows with the dataset
while the parallel arm's cost does not, so the sweep exposes the dataset
size at which parallel execution starts to win (the crossover).

The harness is self-contained: it launches local node-agent and job-engine
processes on free ports and tears them down afterwards.
"""

from __future__ import annotations

import csv
import socket
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import mean

import requests


class BenchError(Exception):
    pass


@dataclass
class BenchConfig:
    event_counts: list[int]
    payload_bytes: int = 4096
    n_nodes: int = 2
    n_fragments: int = 0  # 0 = one per node
    throttle_bytes_per_s: int = 0
    repetitions: int = 3
    csv_path: str = "bench.csv"
    seed: int = 1
    filter_text: str = "bx>50000&gotmean<6000"
    job_timeout_s: float = 600.0

    def __post_init__(self):
        if self.repetitions < 1:
            raise BenchError("repetitions must be >= 1")
        if not self.event_counts:
            raise BenchError("event_counts must be non-empty")
        if sorted(self.event_counts) != list(self.event_counts):
            raise BenchError("event_counts must be ascending")
        if self.n_fragments <= 0:
            self.n_fragments = self.n_nodes


@dataclass
class BenchRow:
    n_events: int
    t_single_s: float
    t_parallel_s: float

    @property
    def speedup(self) -> float:
        return self.t_single_s / self.t_parallel_s


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@dataclass
class LocalCluster:
    """Node-agent and job-engine subprocesses for one benchmark run."""

    n_nodes: int
    throttle_bytes_per_s: int = 0
    workdir: Path | None = None
    gateway: str = ""
    _procs: list[subprocess.Popen] = field(default_factory=list)

    def __enter__(self) -> "LocalCluster":
        self.workdir = Path(self.workdir or tempfile.mkdtemp(prefix="geps-bench-"))
        node_ports = [free_port() for _ in range(self.n_nodes)]
        for i, port in enumerate(node_ports):
            self._procs.append(subprocess.Popen(
                [sys.executable, "-m", "geps.node_agent",
                 "--name", f"bench{i}",
                 "--host", "127.0.0.1",
                 "--port", str(port),
                 "--data-dir", str(self.workdir / f"node{i}"),
                 "--throttle-bytes-per-s", str(self.throttle_bytes_per_s),
                 "--log-level", "WARNING"],
            ))
        gateway_port = free_port()
        self.gateway = f"http://127.0.0.1:{gateway_port}"
        self._procs.append(subprocess.Popen(
            [sys.executable, "-m", "geps.service",
             "--catalog", str(self.workdir / "catalog"),
             "--listen", f"127.0.0.1:{gateway_port}",
             "--poll-ms", "10",
             "--staleness-s", "5",
             "--backoff-initial-ms", "5",
             "--backoff-max-ms", "20",
             "--log-level", "WARNING"],
        ))
        self._wait_gateway()
        for i, port in enumerate(node_ports):
            requests.post(f"{self.gateway}/nodes/register", json={
                "name": f"bench{i}", "address": f"127.0.0.1:{port}",
            }, timeout=10).raise_for_status()
        self._wait_nodes_alive()
        return self

    def __exit__(self, *exc_info) -> None:
        for proc in self._procs:
            proc.terminate()
        for proc in self._procs:
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait(timeout=10)

    def _wait_gateway(self, timeout: float = 30.0) -> None:
        deadline = time.time() + timeout
        while time.time() < deadline:
            try:
                if requests.get(self.gateway + "/", timeout=2).ok:
                    return
            except requests.RequestException:
                pass
            time.sleep(0.05)
        raise BenchError("gateway did not come up")

    def _wait_nodes_alive(self, timeout: float = 30.0) -> None:
        deadline = time.time() + timeout
        while time.time() < deadline:
            nodes = requests.get(self.gateway + "/nodes", timeout=5).json()
            if len(nodes) == self.n_nodes and all(n["alive"] for n in nodes):
                return
            time.sleep(0.05)
        raise BenchError("nodes never became alive")

    # --- benchmark operations --------------------------------------------------

    def ingest(self, config: BenchConfig, n_events: int) -> int:
        response = requests.post(self.gateway + "/datasets", json={
            "n_events": n_events,
            "n_fragments": config.n_fragments,
            "replication": 1,
            "seed": config.seed,
            "payload_bytes": config.payload_bytes,
        }, timeout=max(60.0, config.job_timeout_s))
        if response.status_code >= 400:
            raise BenchError(f"ingest of {n_events} events failed: {response.text}")
        return response.json()["dataset_id"]

    def timed_job(self, target: str, filter_text: str, dataset_id: int,
                  timeout_s: float) -> tuple[float, int]:
        started = time.perf_counter()
        response = requests.post(self.gateway + "/jobs", json={
            "target": target, "filter": filter_text, "dataset_id": dataset_id,
        }, timeout=30)
        if response.status_code >= 400:
            raise BenchError(f"submit to {target} failed: {response.text}")
        job_id = response.json()["job_id"]
        deadline = time.time() + timeout_s
        while time.time() < deadline:
            job = requests.get(f"{self.gateway}/jobs/{job_id}", timeout=10).json()
            if job["state"] == "FINISHED":
                return time.perf_counter() - started, job_id
            if job["state"] == "ERROR":
                raise BenchError(
                    f"job {job_id} (target {target}, dataset {dataset_id}) "
                    f"failed: {job['error']}"
                )
            time.sleep(0.01)
        raise BenchError(f"job {job_id} timed out after {timeout_s}s")

    def result_bytes(self, job_id: int) -> bytes:
        response = requests.get(f"{self.gateway}/jobs/{job_id}/result", timeout=60)
        response.raise_for_status()
        return response.content

    def node_names(self) -> list[str]:
        nodes = requests.get(self.gateway + "/nodes", timeout=10).json()
        return sorted(n["name"] for n in nodes)


def run_bench(config: BenchConfig, progress=lambda *_: None) -> tuple[list[BenchRow], int | None]:
    """Run the sweep; returns the rows and the crossover size (or None)."""
    rows = []
    with LocalCluster(config.n_nodes, config.throttle_bytes_per_s) as cluster:
        target = cluster.node_names()[0]
        # Untimed warmup so first-touch costs (imports, page cache, TCP)
        # do not land on the first measured arm.
        warmup_events = max(config.n_fragments, 16)
        warmup = cluster.ingest(config, warmup_events)
        cluster.timed_job("ALL", config.filter_text, warmup, config.job_timeout_s)
        cluster.timed_job(target, config.filter_text, warmup, config.job_timeout_s)
        for n_events in config.event_counts:
            singles, parallels = [], []
            for _ in range(config.repetitions):
                dataset_id = cluster.ingest(config, n_events)
                t_parallel, parallel_job = cluster.timed_job(
                    "ALL", config.filter_text, dataset_id, config.job_timeout_s)
                t_single, single_job = cluster.timed_job(
                    target, config.filter_text, dataset_id, config.job_timeout_s)
                if cluster.result_bytes(parallel_job) != cluster.result_bytes(single_job):
                    raise BenchError(
                        f"arms disagree for n={n_events}, dataset {dataset_id}"
                    )
                parallels.append(t_parallel)
                singles.append(t_single)
            row = BenchRow(n_events, mean(singles), mean(parallels))
            rows.append(row)
            progress(f"n={row.n_events}: single {row.t_single_s:.3f}s "
                     f"parallel {row.t_parallel_s:.3f}s speedup {row.speedup:.2f}x")
    watershed = next((r.n_events for r in rows if r.t_parallel_s < r.t_single_s), None)
    return rows, watershed


def write_csv(rows: list[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n_events", "t_single_s", "t_parallel_s", "speedup"])
        for row in rows:
            writer.writerow([row.n_events, f"{row.t_single_s:.6f}",
                             f"{row.t_parallel_s:.6f}", f"{row.speedup:.6f}"])


def format_watershed(rows: list[BenchRow], watershed: int | None) -> str:
    if watershed is None:
        return "watershed: none in range"
    top = rows[-1]
    return (f"watershed: parallel first beats single at n={watershed} "
            f"(top-of-range speedup {top.speedup:.2f}x)")
