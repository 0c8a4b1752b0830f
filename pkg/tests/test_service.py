import signal
import subprocess
import sys
import time

import pytest
import requests

from geps.node_agent import AgentConfig, NodeAgent
from geps.service import parse_config_file


class TestConfigFile:
    def test_parses_key_values(self, tmp_path):
        path = tmp_path / "jse.conf"
        path.write_text(
            "# job engine settings\n"
            "catalog = /tmp/cat\n"
            "listen = 127.0.0.1:9000\n"
            "\n"
            "poll_ms = 100\n"
        )
        values = parse_config_file(path)
        assert values == {"catalog": "/tmp/cat", "listen": "127.0.0.1:9000",
                          "poll_ms": "100"}

    def test_rejects_bad_line(self, tmp_path):
        path = tmp_path / "jse.conf"
        path.write_text("this is not a setting\n")
        with pytest.raises(ValueError):
            parse_config_file(path)


class TestMainArgs:
    def test_missing_catalog_is_usage_error(self):
        proc = subprocess.run(
            [sys.executable, "-m", "geps.service"],
            capture_output=True, timeout=30,
        )
        assert proc.returncode == 2


def _free_port():
    import socket
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def _spawn_jse(catalog_path, port):
    return subprocess.Popen(
        [sys.executable, "-m", "geps.service",
         "--catalog", str(catalog_path),
         "--listen", f"127.0.0.1:{port}",
         "--poll-ms", "25", "--staleness-s", "2",
         "--log-level", "WARNING"],
    )


def _wait_http(url, timeout=30):
    deadline = time.time() + timeout
    while time.time() < deadline:
        try:
            if requests.get(url, timeout=2).ok:
                return
        except requests.RequestException:
            pass
        time.sleep(0.05)
    raise TimeoutError(f"{url} never came up")


class TestCrashRestart:
    def test_sigkill_mid_running_still_finishes_identically(self, tmp_path):
        # Agents survive; the job engine is killed hard and restarted on the
        # same catalog. The journal must recover and the job must finish
        # with bytes identical to an undisturbed run.
        agents = []
        for i in range(2):
            agent = NodeAgent(AgentConfig(
                name=f"node{i}", data_dir=tmp_path / f"n{i}", port=0,
                host="127.0.0.1", processors=2,
            ))
            agent.start()
            agents.append(agent)
        port = _free_port()
        url = f"http://127.0.0.1:{port}"
        jse = _spawn_jse(tmp_path / "catalog", port)
        try:
            _wait_http(url + "/")
            for agent in agents:
                requests.post(url + "/nodes/register", json={
                    "name": agent.config.name,
                    "address": f"127.0.0.1:{agent.port}",
                }, timeout=5).raise_for_status()
            deadline = time.time() + 15
            while time.time() < deadline:
                nodes = requests.get(url + "/nodes", timeout=5).json()
                if len(nodes) == 2 and all(n["alive"] for n in nodes):
                    break
                time.sleep(0.05)

            ingest = requests.post(url + "/datasets", json={
                "n_events": 40_000, "n_fragments": 4, "replication": 1,
                "seed": 13, "payload_bytes": 64,
            }, timeout=120)
            ingest.raise_for_status()
            ds = ingest.json()["dataset_id"]

            # Reference: an undisturbed run.
            ref = requests.post(url + "/jobs", json={
                "target": "ALL", "filter": "bx>50000&gotmean<6000",
                "dataset_id": ds,
            }, timeout=30).json()["job_id"]
            deadline = time.time() + 120
            while time.time() < deadline:
                job = requests.get(f"{url}/jobs/{ref}", timeout=10).json()
                if job["state"] in ("FINISHED", "ERROR"):
                    break
                time.sleep(0.05)
            assert job["state"] == "FINISHED"
            want = requests.get(f"{url}/jobs/{ref}/result", timeout=60).content

            # Victim run: kill the engine once the job is demonstrably running.
            victim = requests.post(url + "/jobs", json={
                "target": "ALL", "filter": "bx>50000&gotmean<6000",
                "dataset_id": ds,
            }, timeout=30).json()["job_id"]
            deadline = time.time() + 120
            while time.time() < deadline:
                job = requests.get(f"{url}/jobs/{victim}", timeout=10).json()
                if job["state"] in ("RUNNING", "MERGING") and job["events_scanned"] > 0:
                    break
                assert job["state"] != "ERROR", job
                if job["state"] == "FINISHED":
                    break  # too fast to catch; restart still exercised below
                time.sleep(0.01)
            jse.send_signal(signal.SIGKILL)
            jse.wait(timeout=30)

            jse = _spawn_jse(tmp_path / "catalog", port)
            _wait_http(url + "/")
            deadline = time.time() + 180
            while time.time() < deadline:
                job = requests.get(f"{url}/jobs/{victim}", timeout=10).json()
                if job["state"] in ("FINISHED", "ERROR"):
                    break
                time.sleep(0.05)
            assert job["state"] == "FINISHED", job
            got = requests.get(f"{url}/jobs/{victim}/result", timeout=60).content
            assert got == want
        finally:
            jse.terminate()
            try:
                jse.wait(timeout=10)
            except subprocess.TimeoutExpired:
                jse.kill()
            for agent in agents:
                agent.shutdown()
