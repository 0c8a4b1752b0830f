"""Worker node daemon.

One TCP service (default port 2135) covers the three worker roles:
resource information (`info`), fragment/result transfer (`stage`,
`fetch`) and filter-job execution (`run`, `status`). Fragments live as
`d<dataset>-f<index>.geb` files in the data directory; a fragment is
visible in `info` exactly when its complete, CRC-valid file has been
atomically renamed into place. Filter runs execute on a bounded pool
(at most `processors` at once, FIFO beyond that) and write one result
part per input fragment, so results can be fetched and merged back in
original dataset order.
"""

from __future__ import annotations

import argparse
import logging
import os
import re
import shutil
import socket
import socketserver
import sys
import tempfile
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import filters, geb
from .events import FragmentFile, FragmentMeta, merge_fragments
from .wire import (
    MAX_FRAME_BYTES,
    PROTOCOL_VERSION,
    NodeInfo,
    Throttler,
    WireError,
    recv_exact,
    recv_frame,
    send_frame,
    send_raw,
)

logger = logging.getLogger(__name__)

FRAGMENT_RE = re.compile(r"^d(\d+)-f(\d+)\.geb$")

EXIT_PORT_IN_USE = 12


class AgentStartupError(Exception):
    pass


@dataclass
class AgentConfig:
    name: str
    data_dir: Path
    port: int = 2135
    host: str = "0.0.0.0"
    throttle_bytes_per_s: int = 0
    bandwidth_estimate: int = 0
    processors: int = 0  # 0 = autodetect

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)
        if self.processors <= 0:
            self.processors = os.cpu_count() or 1


@dataclass
class LocalRun:
    """One dispatched (job_id, fragment set) execution instance."""

    job_id: int
    dataset_id: int
    fragment_indices: tuple[int, ...]
    filter_text: str
    calibration: dict | None
    state: str = "RECEIVED"  # RECEIVED | RUNNING | DONE | FAILED
    events_scanned: int = 0
    events_passed: int = 0
    error: str | None = None
    result_paths: dict[int, str] = field(default_factory=dict)


class NodeAgent:
    def __init__(self, config: AgentConfig):
        self.config = config
        self.config.data_dir.mkdir(parents=True, exist_ok=True)
        self.results_dir = self.config.data_dir / "results"
        self.results_dir.mkdir(exist_ok=True)
        self.started_at = time.time()

        self._lock = threading.Lock()
        self._runs: dict[tuple[int, tuple[int, ...]], LocalRun] = {}
        self._active_executors = 0
        self._pool = ThreadPoolExecutor(
            max_workers=self.config.processors,
            thread_name_prefix=f"filter-{self.config.name}",
        )

        agent = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                agent._serve_connection(self.request)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        try:
            self._server = Server((self.config.host, self.config.port), Handler)
        except OSError as exc:
            raise AgentStartupError(
                f"cannot listen on {self.config.host}:{self.config.port}: {exc}"
            ) from exc
        self.port = self._server.server_address[1]
        self._thread: threading.Thread | None = None

    # --- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._server.serve_forever, name=f"agent-{self.config.name}",
            daemon=True,
        )
        self._thread.start()
        logger.info("node agent %s serving on port %d", self.config.name, self.port)

    def serve_forever(self) -> None:
        logger.info("node agent %s serving on port %d", self.config.name, self.port)
        self._server.serve_forever()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._pool.shutdown(wait=False, cancel_futures=True)
        if self._thread:
            self._thread.join(timeout=5)

    # --- connection loop -----------------------------------------------------

    def _serve_connection(self, sock: socket.socket) -> None:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                frame = recv_frame(sock)
            except WireError as exc:
                # The stream cannot be resynchronized after a framing-level
                # failure, so answer and drop the connection.
                self._safe_send(sock, self._error("bad-frame", str(exc)))
                return
            except OSError:
                return
            if frame is None:
                return
            try:
                keep_open = self._dispatch(sock, frame)
            except WireError as exc:
                # Raw-transfer interrupted mid-stream; cannot resync.
                self._safe_send(sock, self._error("bad-frame", str(exc)))
                return
            except OSError:
                return
            except Exception as exc:  # noqa: BLE001 - report, don't kill the daemon
                logger.exception("handler failure")
                self._safe_send(sock, self._error("internal", str(exc)))
                keep_open = True
            if not keep_open:
                return

    def _dispatch(self, sock: socket.socket, frame: dict) -> bool:
        kind = frame.get("type")
        if kind == "info":
            send_frame(sock, self.handle_info(frame))
        elif kind == "stage":
            send_frame(sock, self.handle_stage(frame, sock))
        elif kind == "run":
            send_frame(sock, self.handle_run(frame))
        elif kind == "status":
            send_frame(sock, self.handle_status(frame))
        elif kind == "fetch":
            header, data = self.handle_fetch(frame)
            send_frame(sock, header)
            if data is not None:
                send_raw(sock, data, Throttler(self.config.throttle_bytes_per_s))
        else:
            send_frame(sock, self._error("bad-frame", f"unknown frame type {kind!r}"))
        return True

    @staticmethod
    def _error(code: str, message: str) -> dict:
        return {"type": "error", "code": code, "message": message}

    @staticmethod
    def _safe_send(sock: socket.socket, frame: dict) -> None:
        try:
            send_frame(sock, frame)
        except OSError:
            pass

    # --- info ------------------------------------------------------------------

    def scan_fragments(self) -> list[tuple[int, int]]:
        held = []
        for entry in self.config.data_dir.iterdir():
            m = FRAGMENT_RE.match(entry.name)
            if m:
                held.append((int(m.group(1)), int(m.group(2))))
        return sorted(held)

    def fragment_path(self, dataset_id: int, fragment_index: int) -> Path:
        return self.config.data_dir / f"d{dataset_id}-f{fragment_index}.geb"

    def handle_info(self, frame: dict) -> dict:
        requested = frame.get("protocol_version", PROTOCOL_VERSION)
        if requested != PROTOCOL_VERSION:
            return self._error(
                "protocol-mismatch",
                f"agent speaks version {PROTOCOL_VERSION}, client sent {requested}",
            )
        with self._lock:
            load = min(float(self._active_executors), float(self.config.processors))
        info = NodeInfo(
            name=self.config.name,
            protocol_version=PROTOCOL_VERSION,
            processors=self.config.processors,
            load_1m=load,
            free_disk_bytes=shutil.disk_usage(self.config.data_dir).free,
            bandwidth_bytes_per_s=self.config.bandwidth_estimate,
            fragments_held=self.scan_fragments(),
            uptime_s=time.time() - self.started_at,
        )
        payload = info.to_json()
        payload["type"] = "info_ok"
        return payload

    # --- stage -------------------------------------------------------------------

    def handle_stage(self, frame: dict, sock: socket.socket) -> dict:
        try:
            dataset_id = int(frame["dataset_id"])
            fragment_index = int(frame["fragment_index"])
            byte_length = int(frame["byte_length"])
        except (KeyError, TypeError, ValueError):
            return self._error("bad-frame", "stage needs dataset_id, fragment_index, byte_length")
        if byte_length < 0 or byte_length > MAX_FRAME_BYTES * 64:
            return self._error("bad-frame", f"implausible byte_length {byte_length}")
        data = recv_exact(sock, byte_length, Throttler(self.config.throttle_bytes_per_s))
        try:
            fragment = geb.decode_fragment(data)
        except geb.GebError as exc:
            return self._error("stage-corrupt", f"{exc.code}: {exc}")
        if (fragment.meta.dataset_id, fragment.meta.fragment_index) != (dataset_id, fragment_index):
            return self._error(
                "stage-mismatch",
                f"header names ({dataset_id}, {fragment_index}) but file is "
                f"({fragment.meta.dataset_id}, {fragment.meta.fragment_index})",
            )
        crc = zlib.crc32(data[4:-4])
        final = self.fragment_path(dataset_id, fragment_index)
        self._atomic_write(final, data)
        return {"type": "stage_ok", "dataset_id": dataset_id,
                "fragment_index": fragment_index, "crc32": crc}

    def _atomic_write(self, final: Path, data: bytes) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.config.data_dir, prefix=".staging-")
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

    # --- run / execute -------------------------------------------------------------

    def handle_run(self, frame: dict) -> dict:
        try:
            job_id = int(frame["job_id"])
            dataset_id = int(frame["dataset_id"])
            fragment_indices = tuple(sorted(int(i) for i in frame["fragment_indices"]))
            filter_text = frame["filter"]
        except (KeyError, TypeError, ValueError):
            return self._error("bad-frame", "run needs job_id, dataset_id, fragment_indices, filter")
        calibration = frame.get("calibration")

        try:
            expr = filters.parse(filter_text)
        except filters.FilterSyntaxError as exc:
            return self._error("bad-filter", str(exc))
        if calibration is not None:
            try:
                filters.Calibration.from_json(calibration)
            except (KeyError, TypeError, ValueError) as exc:
                return self._error("bad-filter", f"bad calibration: {exc}")

        missing = [
            (dataset_id, idx) for idx in fragment_indices
            if not self.fragment_path(dataset_id, idx).exists()
        ]
        if missing:
            return self._error(
                "missing-fragments",
                "fragments not held: " + ", ".join(f"({d}, {i})" for d, i in missing),
            )
        unknown = set()
        for idx in fragment_indices:
            try:
                schema = geb.peek_schema(self.fragment_path(dataset_id, idx))
            except geb.GebError:
                continue  # full decode in the executor reports the details
            unknown.update(v for v in filters.variables_of(expr) if v not in schema)
        if unknown:
            return self._error(
                "bad-filter", "unknown variables: " + ", ".join(sorted(unknown))
            )

        key = (job_id, fragment_indices)
        with self._lock:
            run = self._runs.get(key)
            if run is None:
                run = LocalRun(job_id, dataset_id, fragment_indices, filter_text, calibration)
                try:
                    self._pool.submit(self._execute, run)
                except RuntimeError:
                    # Pool already shut down; the agent is going away.
                    return self._error("unavailable", "agent is shutting down")
                self._runs[key] = run
            snapshot = self._job_snapshot(job_id)
        snapshot["type"] = "run_ok"
        return snapshot

    def _execute(self, run: LocalRun) -> None:
        with self._lock:
            if run.state != "RECEIVED":
                return
            run.state = "RUNNING"
            self._active_executors += 1
        try:
            expr = filters.parse(run.filter_text)
            cal = filters.Calibration.from_json(run.calibration) if run.calibration else None
            scanned = 0
            passed = 0
            for index in run.fragment_indices:
                fragment = geb.read_fragment(self.fragment_path(run.dataset_id, index))
                part_events = []
                for event in fragment.events:
                    if cal is not None:
                        event = cal.apply_to_event(event, fragment.schema)
                    if filters.evaluate(expr, event, fragment.schema):
                        part_events.append(event)
                        passed += 1
                    scanned += 1
                    if scanned % 1000 == 0:
                        with self._lock:
                            run.events_scanned = scanned
                            run.events_passed = passed
                part = FragmentFile(
                    meta=FragmentMeta(
                        dataset_id=run.dataset_id,
                        fragment_index=index,
                        event_count=len(part_events),
                        first_event_ordinal=fragment.meta.first_event_ordinal,
                    ),
                    schema=fragment.schema,
                    events=part_events,
                )
                part_path = self.results_dir / f"job{run.job_id}-f{index}.geb"
                self._atomic_write(part_path, geb.encode_fragment(part))
                with self._lock:
                    run.result_paths[index] = str(part_path)
                    run.events_scanned = scanned
                    run.events_passed = passed
            with self._lock:
                run.state = "DONE"
        except geb.GebError as exc:
            with self._lock:
                run.state = "FAILED"
                run.error = f"fragment unreadable: {exc.code}: {exc}"
        except filters.FilterError as exc:
            with self._lock:
                run.state = "FAILED"
                run.error = str(exc)
        except Exception as exc:  # noqa: BLE001
            logger.exception("executor failure for job %d", run.job_id)
            with self._lock:
                run.state = "FAILED"
                run.error = str(exc)
        finally:
            with self._lock:
                self._active_executors -= 1

    # --- status / fetch ---------------------------------------------------------------

    def _job_runs(self, job_id: int) -> list[LocalRun]:
        return [run for (jid, _), run in self._runs.items() if jid == job_id]

    def _job_snapshot(self, job_id: int) -> dict:
        """Aggregate all run instances for a job. Caller holds the lock."""
        runs = self._job_runs(job_id)
        states = {run.state for run in runs}
        if "FAILED" in states:
            state = "FAILED"
        elif "RUNNING" in states or "RECEIVED" in states:
            state = "RUNNING" if "RUNNING" in states or "DONE" in states else "RECEIVED"
        else:
            state = "DONE"
        fragments = sorted({i for run in runs for i in run.fragment_indices})
        return {
            "job_id": job_id,
            "state": state,
            "events_scanned": sum(r.events_scanned for r in runs),
            "events_passed": sum(r.events_passed for r in runs),
            "fragments": fragments,
            "error": "; ".join(r.error for r in runs if r.error) or None,
        }

    def handle_status(self, frame: dict) -> dict:
        try:
            job_id = int(frame["job_id"])
        except (KeyError, TypeError, ValueError):
            return self._error("bad-frame", "status needs job_id")
        with self._lock:
            if not self._job_runs(job_id):
                return self._error("not-found", f"no local job {job_id}")
            snapshot = self._job_snapshot(job_id)
        snapshot["type"] = "status_ok"
        return snapshot

    def handle_fetch(self, frame: dict) -> tuple[dict, bytes | None]:
        try:
            job_id = int(frame["job_id"])
        except (KeyError, TypeError, ValueError):
            return self._error("bad-frame", "fetch needs job_id"), None
        fragment_index = frame.get("fragment_index")
        with self._lock:
            runs = self._job_runs(job_id)
            if not runs:
                return self._error("not-found", f"no local job {job_id}"), None
            snapshot = self._job_snapshot(job_id)
            if fragment_index is not None:
                owner = next(
                    (r for r in runs if int(fragment_index) in r.fragment_indices), None
                )
                if owner is None:
                    return self._error(
                        "not-found", f"job {job_id} has no fragment {fragment_index}"
                    ), None
                if owner.state != "DONE":
                    return self._error(
                        "not-ready", f"job {job_id} fragment {fragment_index} is {owner.state}"
                    ), None
                paths = [owner.result_paths[int(fragment_index)]]
            else:
                if snapshot["state"] != "DONE":
                    return self._error("not-ready", f"job {job_id} is {snapshot['state']}"), None
                # One part per fragment even if instances overlap.
                by_fragment = {
                    i: run.result_paths[i]
                    for run in runs
                    for i in run.fragment_indices
                }
                paths = [by_fragment[i] for i in sorted(by_fragment)]
        if len(paths) == 1:
            data = Path(paths[0]).read_bytes()
        else:
            parts = [geb.read_fragment(p) for p in paths]
            data = geb.encode_fragment(merge_fragments(parts))
        header = {
            "type": "fetch_ok",
            "job_id": job_id,
            "byte_length": len(data),
            "crc32": zlib.crc32(data),
        }
        if fragment_index is not None:
            header["fragment_index"] = int(fragment_index)
        return header, data


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="geps-node", description="event-fragment worker node daemon"
    )
    parser.add_argument("--port", type=int, default=2135)
    parser.add_argument("--host", default="0.0.0.0")
    parser.add_argument("--data-dir", required=True)
    parser.add_argument("--name", default=socket.gethostname())
    parser.add_argument("--throttle-bytes-per-s", type=int, default=0,
                        help="pace stage/fetch transfers (0 = unthrottled)")
    parser.add_argument("--bandwidth-estimate", type=int, default=0,
                        help="advertised bandwidth in bytes/s")
    parser.add_argument("--processors", type=int, default=0,
                        help="executor slots (default: logical CPU count)")
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    config = AgentConfig(
        name=args.name,
        data_dir=Path(args.data_dir),
        port=args.port,
        host=args.host,
        throttle_bytes_per_s=args.throttle_bytes_per_s,
        bandwidth_estimate=args.bandwidth_estimate,
        processors=args.processors,
    )
    try:
        agent = NodeAgent(config)
    except AgentStartupError as exc:
        print(f"geps-node: {exc}", file=sys.stderr)
        return EXIT_PORT_IN_USE
    try:
        agent.serve_forever()
    except KeyboardInterrupt:
        agent.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
