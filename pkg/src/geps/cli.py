"""Operator command line: thin client of the gateway HTTP API.

Exit codes: 0 success, 2 usage, 3 gateway unreachable, 4 not found,
5 other HTTP error, 6 corrupt download, 7 benchmark failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import requests

from . import geb

DEFAULT_GATEWAY = "http://127.0.0.1:7745"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NETWORK = 3
EXIT_NOT_FOUND = 4
EXIT_HTTP = 5
EXIT_CORRUPT = 6
EXIT_BENCH = 7

JOB_COLUMNS = (
    ("job_id", "Job ID"),
    ("status", "Status"),
    ("server_name", "Server Name"),
    ("filter_expression", "Filter Expression"),
    ("error", "Error"),
    ("result", "Result"),
)


class CliError(Exception):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


def _request(method: str, url: str, **kwargs):
    try:
        response = requests.request(method, url, timeout=kwargs.pop("timeout", 30),
                                    **kwargs)
    except requests.RequestException as exc:
        raise CliError(f"gateway unreachable: {exc}", EXIT_NETWORK) from exc
    if response.status_code == 404:
        raise CliError(_error_text(response), EXIT_NOT_FOUND)
    if response.status_code >= 400:
        raise CliError(_error_text(response), EXIT_HTTP)
    return response


def _error_text(response) -> str:
    try:
        detail = response.json().get("detail")
    except ValueError:
        detail = response.text
    if isinstance(detail, dict) and "errors" in detail:
        return "; ".join(detail["errors"])
    return f"HTTP {response.status_code}: {detail}"


def _print_table(rows: list[dict], columns) -> None:
    headers = [title for _, title in columns]
    cells = [[str(row.get(key, "")) for key, _ in columns] for row in rows]
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in cells)) if cells else len(headers[i])
        for i in range(len(headers))
    ]
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    print(line)
    print("  ".join("-" * w for w in widths))
    for r in cells:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))


def cmd_ingest(args) -> int:
    if args.from_file:
        data = Path(args.from_file).read_bytes()
        response = _request(
            "POST",
            f"{args.gateway}/datasets/upload",
            params={"n_fragments": args.fragments, "replication": args.replication},
            data=data,
            headers={"Content-Type": "application/octet-stream"},
        )
    else:
        if args.events is None:
            raise CliError("either --events or --from-file is required", EXIT_USAGE)
        body = {
            "n_events": args.events,
            "n_fragments": args.fragments,
            "replication": args.replication,
            "seed": args.seed,
            "payload_bytes": args.payload_bytes,
        }
        if args.variables:
            body["variables"] = args.variables.split(",")
        response = _request("POST", f"{args.gateway}/datasets", json=body)
    report = response.json()
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        print(report["dataset_id"])
    return EXIT_OK


def cmd_submit(args) -> int:
    body = {
        "target": args.target,
        "filter": args.filter,
        "dataset_id": args.dataset_id,
        "submitted_by": args.user,
    }
    if args.calibration:
        try:
            body["calibration"] = json.loads(args.calibration)
        except json.JSONDecodeError as exc:
            raise CliError(f"--calibration is not valid JSON: {exc}", EXIT_USAGE) from exc
    response = _request("POST", f"{args.gateway}/jobs", json=body)
    job_id = response.json()["job_id"]
    if args.json:
        print(json.dumps({"job_id": job_id}))
    else:
        print(job_id)
    return EXIT_OK


def cmd_status(args) -> int:
    if args.job_id is None:
        rows = _request("GET", f"{args.gateway}/jobs").json()
    else:
        detail = _request("GET", f"{args.gateway}/jobs/{args.job_id}").json()
        rows = [detail]
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        _print_table(rows, JOB_COLUMNS)
    return EXIT_OK


def cmd_nodes(args) -> int:
    if args.name:
        nodes = [_request("GET", f"{args.gateway}/nodes/{args.name}").json()]
    else:
        nodes = _request("GET", f"{args.gateway}/nodes").json()
    if args.json:
        print(json.dumps(nodes, indent=2))
        return EXIT_OK
    columns = (
        ("name", "Name"), ("alive", "Alive"), ("processors", "Processors"),
        ("load_1m", "Load"), ("free_disk_bytes", "Free Disk"),
        ("bandwidth_bytes_per_s", "Bandwidth"), ("held", "Fragments Held"),
    )
    for node in nodes:
        node["held"] = len(node.get("fragments_held", []))
    _print_table(nodes, columns)
    return EXIT_OK


def cmd_fetch(args) -> int:
    response = _request("GET", f"{args.gateway}/jobs/{args.job_id}/result")
    data = response.content
    try:
        fragment = geb.decode_fragment(data)
    except geb.GebError as exc:
        raise CliError(f"downloaded result is corrupt: {exc}", EXIT_CORRUPT) from exc
    out = Path(args.output or f"job-{args.job_id}.geb")
    out.write_bytes(data)
    if args.json:
        print(json.dumps({
            "path": str(out),
            "events": fragment.meta.event_count,
            "bytes": len(data),
        }))
    else:
        print(f"{out} ({fragment.meta.event_count} events, {len(data)} bytes)")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import BenchConfig, BenchError, format_watershed, run_bench, write_csv

    try:
        event_counts = [int(n) for n in args.events.split(",")]
    except ValueError as exc:
        raise CliError(f"--events must be a comma list of ints: {exc}", EXIT_USAGE) from exc
    config = BenchConfig(
        event_counts=event_counts,
        payload_bytes=args.payload_bytes,
        n_nodes=args.nodes,
        n_fragments=args.fragments or args.nodes,
        throttle_bytes_per_s=args.throttle_bytes_per_s,
        repetitions=args.reps,
        csv_path=args.csv,
        seed=args.seed,
        filter_text=args.filter,
    )
    try:
        rows, watershed = run_bench(config, progress=print)
    except BenchError as exc:
        raise CliError(f"benchmark aborted: {exc}", EXIT_BENCH) from exc
    write_csv(rows, config.csv_path)
    print(format_watershed(rows, watershed))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geps",
        description="submit and track distributed event-filter jobs",
    )
    parser.add_argument("--gateway", default=DEFAULT_GATEWAY,
                        help=f"gateway URL (default {DEFAULT_GATEWAY})")
    parser.add_argument("--json", action="store_true",
                        help="machine-readable output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="create and distribute a dataset")
    p.add_argument("--events", type=int, help="synthesize this many events")
    p.add_argument("--from-file", help="ingest an existing .geb dataset file")
    p.add_argument("--fragments", type=int, required=True)
    p.add_argument("--replication", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--payload-bytes", type=int, default=0)
    p.add_argument("--variables", help="comma-separated variable names")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("submit", help="submit a filter job")
    p.add_argument("target", help="node name or ALL")
    p.add_argument("filter", help="filter expression, e.g. 'bx>2000&gotmean<100'")
    p.add_argument("dataset_id", type=int)
    p.add_argument("--calibration", help='JSON, e.g. {"bx": {"scale": 2, "offset": 0}}')
    p.add_argument("--user", default="")
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("status", help="job status table")
    p.add_argument("job_id", type=int, nargs="?")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("nodes", help="node registry")
    p.add_argument("name", nargs="?")
    p.set_defaults(func=cmd_nodes)

    p = sub.add_parser("fetch", help="download a merged job result")
    p.add_argument("job_id", type=int)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("bench", help="single-node vs parallel sweep")
    p.add_argument("--events", default="128,256,512,1024,2048,4096,8192",
                   help="comma list of dataset sizes")
    p.add_argument("--nodes", type=int, default=2)
    p.add_argument("--fragments", type=int, default=0,
                   help="fragments per dataset (default: one per node)")
    p.add_argument("--payload-bytes", type=int, default=4096)
    p.add_argument("--throttle-bytes-per-s", type=int, default=0)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--csv", default="bench.csv")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--filter", default="bx>50000&gotmean<6000")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"geps: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
