"""Job-engine service process: broker threads plus the HTTP gateway.

Configuration comes from flags or a `key = value` file (later flags win):

    catalog = /var/lib/geps/catalog
    listen = 0.0.0.0:7745
    poll_ms = 500
    retry_limit = 3
    staleness_s = 10
    portal_dir = frontend/dist
"""

from __future__ import annotations

import argparse
import logging
import sys
import threading
from dataclasses import dataclass
from pathlib import Path

import uvicorn

from .broker import Broker, BrokerConfig
from .catalog import Catalog
from .gateway import create_app

logger = logging.getLogger(__name__)

DEFAULT_LISTEN = "0.0.0.0:7745"

EXIT_BAD_CATALOG = 11


@dataclass
class ServiceConfig:
    catalog_path: Path
    listen: str = DEFAULT_LISTEN
    poll_ms: int = 500
    retry_limit: int = 3
    staleness_s: float = 10.0
    node_timeout_s: float = 10.0
    max_concurrent_jobs: int = 4
    backoff_initial_ms: int = 100
    backoff_max_ms: int = 2000
    portal_dir: str | None = None

    def broker_config(self) -> BrokerConfig:
        return BrokerConfig(
            poll_interval_s=self.poll_ms / 1000.0,
            retry_limit=self.retry_limit,
            staleness_s=self.staleness_s,
            backoff_initial_s=self.backoff_initial_ms / 1000.0,
            backoff_max_s=self.backoff_max_ms / 1000.0,
            node_timeout_s=self.node_timeout_s,
            max_concurrent_jobs=self.max_concurrent_jobs,
        )


def parse_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


class JseService:
    """Embeddable service: catalog + broker + uvicorn in one object."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.catalog = Catalog(config.catalog_path, staleness_s=config.staleness_s)
        self.broker = Broker(self.catalog, config.broker_config())
        self.app = create_app(
            self.catalog,
            node_timeout_s=config.node_timeout_s,
            portal_dir=config.portal_dir,
        )
        host, _, port = config.listen.rpartition(":")
        self._uvicorn = uvicorn.Server(uvicorn.Config(
            self.app, host=host or "0.0.0.0", port=int(port),
            log_level="warning",
        ))
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        servers = getattr(self._uvicorn, "servers", None)
        if servers:
            return servers[0].sockets[0].getsockname()[1]
        return int(self.config.listen.rpartition(":")[2])

    def start(self) -> None:
        """Run broker + gateway on background threads (for tests/benches)."""
        self.broker.start()
        self._thread = threading.Thread(
            target=self._uvicorn.run, name="gateway", daemon=True
        )
        self._thread.start()
        while not self._uvicorn.started:
            if not self._thread.is_alive():
                raise RuntimeError("gateway failed to start")
            threading.Event().wait(0.01)

    def stop(self) -> None:
        self.broker.stop()
        self._uvicorn.should_exit = True
        if self._thread:
            self._thread.join(timeout=10)
        self.catalog.close()

    def run_blocking(self) -> None:
        self.broker.start()
        try:
            self._uvicorn.run()
        finally:
            self.broker.stop()
            self.catalog.close()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="geps-jse", description="job engine: broker + HTTP gateway"
    )
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--catalog", help="catalog directory")
    parser.add_argument("--listen", help=f"host:port (default {DEFAULT_LISTEN})")
    parser.add_argument("--poll-ms", type=int, help="broker poll interval")
    parser.add_argument("--retry-limit", type=int)
    parser.add_argument("--staleness-s", type=float,
                        help="node liveness window in seconds")
    parser.add_argument("--backoff-initial-ms", type=int,
                        help="first status-poll delay while monitoring")
    parser.add_argument("--backoff-max-ms", type=int,
                        help="status-poll delay cap while monitoring")
    parser.add_argument("--max-concurrent-jobs", type=int)
    parser.add_argument("--portal-dir", help="static portal assets to serve at /portal")
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    file_values: dict[str, str] = {}
    if args.config:
        try:
            file_values = parse_config_file(args.config)
        except (OSError, ValueError) as exc:
            print(f"geps-jse: {exc}", file=sys.stderr)
            return 2

    catalog_path = args.catalog or file_values.get("catalog")
    if not catalog_path:
        print("geps-jse: --catalog (or 'catalog' in the config file) is required",
              file=sys.stderr)
        return 2

    config = ServiceConfig(
        catalog_path=Path(catalog_path),
        listen=args.listen or file_values.get("listen", DEFAULT_LISTEN),
        poll_ms=args.poll_ms or int(file_values.get("poll_ms", 500)),
        retry_limit=args.retry_limit if args.retry_limit is not None
        else int(file_values.get("retry_limit", 3)),
        staleness_s=args.staleness_s if args.staleness_s is not None
        else float(file_values.get("staleness_s", 10.0)),
        backoff_initial_ms=args.backoff_initial_ms
        or int(file_values.get("backoff_initial_ms", 100)),
        backoff_max_ms=args.backoff_max_ms
        or int(file_values.get("backoff_max_ms", 2000)),
        max_concurrent_jobs=args.max_concurrent_jobs
        or int(file_values.get("max_concurrent_jobs", 4)),
        portal_dir=args.portal_dir or file_values.get("portal_dir"),
    )
    try:
        service = JseService(config)
    except OSError as exc:
        print(f"geps-jse: cannot open catalog: {exc}", file=sys.stderr)
        return EXIT_BAD_CATALOG
    try:
        service.run_blocking()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
