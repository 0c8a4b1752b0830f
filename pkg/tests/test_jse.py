"""Integration tests for the job engine over live in-process node agents."""

import time

import pytest

import oracle
from geps import geb
from geps.broker import Broker, BrokerConfig, IngestError, ingest_dataset
from geps.catalog import JobSpec
from geps.events import DEFAULT_SCHEMA, synth_dataset

from cluster_util import FAST_BROKER as FAST
from cluster_util import Cluster

FILTER = "bx>50000&gotmean<6000"


@pytest.fixture
def cluster(tmp_path):
    c = Cluster(tmp_path)
    yield c
    c.close()


def expected_bytes(events, dataset_id, filter_text, cal=None):
    return geb.encode_fragment(oracle.expected_merged_fragment(
        events, DEFAULT_SCHEMA, dataset_id, filter_text, cal))


class TestEndToEnd:
    def test_all_target_matches_oracle(self, cluster):
        events = synth_dataset(3, 300, payload_bytes=32)
        report = ingest_dataset(cluster.catalog, n_fragments=4, replication=1,
                                seed=3, n_events=300, payload_bytes=32)
        job_id = cluster.catalog.submit_job(
            JobSpec(target="ALL", filter_text=FILTER, dataset_id=report["dataset_id"]))
        job = cluster.wait_job(job_id)
        assert job.state == "FINISHED"
        assert cluster.result_bytes(job) == expected_bytes(
            events, report["dataset_id"], FILTER)

    def test_counters_match_totals(self, cluster):
        report = ingest_dataset(cluster.catalog, n_fragments=4, replication=1,
                                seed=9, n_events=500)
        job_id = cluster.catalog.submit_job(
            JobSpec(target="ALL", filter_text=FILTER, dataset_id=report["dataset_id"]))
        job = cluster.wait_job(job_id)
        merged = geb.decode_fragment(cluster.result_bytes(job))
        scanned = sum(c["events_scanned"] for c in job.counters.values())
        passed = sum(c["events_passed"] for c in job.counters.values())
        assert scanned == 500
        assert passed == len(merged.events)

    def test_single_target_stages_and_matches_all_target(self, cluster):
        events = synth_dataset(4, 240, payload_bytes=16)
        report = ingest_dataset(cluster.catalog, n_fragments=4, replication=1,
                                seed=4, n_events=240, payload_bytes=16)
        all_id = cluster.catalog.submit_job(
            JobSpec(target="ALL", filter_text=FILTER, dataset_id=report["dataset_id"]))
        all_job = cluster.wait_job(all_id)

        single_id = cluster.catalog.submit_job(
            JobSpec(target="node0", filter_text=FILTER, dataset_id=report["dataset_id"]))
        single_job = cluster.wait_job(single_id)

        assert all_job.state == single_job.state == "FINISHED"
        want = expected_bytes(events, report["dataset_id"], FILTER)
        assert cluster.result_bytes(all_job) == want
        assert cluster.result_bytes(single_job) == want
        # Staging recorded the target's new copies.
        placements = cluster.catalog.placements(report["dataset_id"])
        held_by_target = {p.fragment_index for p in placements if p.node == "node0"}
        assert held_by_target == {0, 1, 2, 3}

    def test_calibrated_job(self, cluster):
        events = synth_dataset(8, 200)
        report = ingest_dataset(cluster.catalog, n_fragments=3, replication=1,
                                seed=8, n_events=200)
        from geps.filters import Calibration
        cal = Calibration({"bx": (2.0, 500.0)})
        job_id = cluster.catalog.submit_job(
            JobSpec(target="ALL", filter_text="bx>120000", dataset_id=report["dataset_id"],
                    calibration=cal))
        job = cluster.wait_job(job_id)
        assert job.state == "FINISHED"
        assert cluster.result_bytes(job) == expected_bytes(
            events, report["dataset_id"], "bx>120000", {"bx": (2.0, 500.0)})

    def test_idle_broker_makes_no_mutations(self, cluster):
        journal = cluster.catalog.journal_path
        # node monitor refreshes last_seen, so only compare job state
        before = [(j.job_id, j.state) for j in cluster.catalog.list_jobs()]
        time.sleep(0.3)
        after = [(j.job_id, j.state) for j in cluster.catalog.list_jobs()]
        assert before == after == []
        assert journal.exists()


class TestFailover:
    def test_replication_two_survives_kill(self, tmp_path):
        cluster = Cluster(tmp_path, n_nodes=3)
        try:
            events = synth_dataset(5, 3000, payload_bytes=128)
            report = ingest_dataset(cluster.catalog, n_fragments=6, replication=2,
                                    seed=5, n_events=3000, payload_bytes=128)
            want = expected_bytes(events, report["dataset_id"], FILTER)
            job_id = cluster.catalog.submit_job(
                JobSpec(target="ALL", filter_text=FILTER, dataset_id=report["dataset_id"]))
            time.sleep(0.15)
            cluster.kill("node1")
            job = cluster.wait_job(job_id)
            assert job.state == "FINISHED"
            assert cluster.result_bytes(job) == want
        finally:
            cluster.close()

    def test_replication_one_errors_with_lost_fragments(self, tmp_path):
        cluster = Cluster(tmp_path, n_nodes=2)
        try:
            report = ingest_dataset(cluster.catalog, n_fragments=4, replication=1,
                                    seed=6, n_events=4000, payload_bytes=128)
            job_id = cluster.catalog.submit_job(
                JobSpec(target="ALL", filter_text="bx<100", dataset_id=report["dataset_id"]))
            time.sleep(0.1)
            cluster.kill("node1")  # holds fragments 1 and 3
            job = cluster.wait_job(job_id)
            assert job.state == "ERROR"
            assert "1, 3" in job.error
        finally:
            cluster.close()

    def test_kill_after_done_before_fetch(self, tmp_path):
        # The result must be recomputed on a replica when the original
        # executor disappears between DONE and the fetch.
        cluster = Cluster(tmp_path, n_nodes=2)
        try:
            events = synth_dataset(7, 400)
            report = ingest_dataset(cluster.catalog, n_fragments=4, replication=2,
                                    seed=7, n_events=400)
            want = expected_bytes(events, report["dataset_id"], FILTER)

            # Run the job once on node0 only, so node0 holds finished parts.
            direct = cluster.catalog.submit_job(
                JobSpec(target="node0", filter_text=FILTER, dataset_id=report["dataset_id"]))
            cluster.wait_job(direct)

            # Now kill node0 and submit an ALL job: planning avoids the dead
            # node entirely, falling back to node1's replicas.
            cluster.kill("node0")
            deadline = time.time() + 10
            while time.time() < deadline:
                nodes = {n.name: n.alive for n in cluster.catalog.list_nodes()}
                if not nodes["node0"]:
                    break
                time.sleep(0.05)
            job_id = cluster.catalog.submit_job(
                JobSpec(target="ALL", filter_text=FILTER, dataset_id=report["dataset_id"]))
            job = cluster.wait_job(job_id)
            assert job.state == "FINISHED"
            assert cluster.result_bytes(job) == want
        finally:
            cluster.close()


class TestIngest:
    def test_round_robin_alternates(self, cluster):
        report = ingest_dataset(cluster.catalog, n_fragments=4, replication=1,
                                seed=1, n_events=100)
        placements = cluster.catalog.placements(report["dataset_id"])
        by_fragment = {p.fragment_index: p.node for p in placements}
        assert by_fragment == {0: "node0", 1: "node1", 2: "node0", 3: "node1"}

    def test_full_replication_covers_all(self, cluster):
        report = ingest_dataset(cluster.catalog, n_fragments=3, replication=2,
                                seed=2, n_events=90)
        placements = cluster.catalog.placements(report["dataset_id"])
        for index in range(3):
            holders = {p.node for p in placements if p.fragment_index == index}
            assert holders == {"node0", "node1"}

    def test_replication_exceeding_nodes(self, cluster):
        with pytest.raises(IngestError):
            ingest_dataset(cluster.catalog, n_fragments=2, replication=3,
                           seed=1, n_events=10)

    def test_store_holds_fragments(self, cluster):
        report = ingest_dataset(cluster.catalog, n_fragments=2, replication=1,
                                seed=1, n_events=10)
        ds = report["dataset_id"]
        for index in range(2):
            assert (cluster.catalog.store_dir / f"d{ds}-f{index}.geb").exists()


class TestResume:
    def test_jobs_resume_after_broker_swap(self, tmp_path):
        # A second broker picks up non-terminal jobs from catalog state.
        cluster = Cluster(tmp_path, n_nodes=2)
        try:
            events = synth_dataset(11, 600)
            report = ingest_dataset(cluster.catalog, n_fragments=4, replication=1,
                                    seed=11, n_events=600)
            want = expected_bytes(events, report["dataset_id"], FILTER)

            # Stop the broker before it can claim, then submit.
            cluster.broker.stop()
            job_id = cluster.catalog.submit_job(
                JobSpec(target="ALL", filter_text=FILTER, dataset_id=report["dataset_id"]))
            assert cluster.catalog.get_job(job_id).state == "NEW"

            cluster.broker = Broker(cluster.catalog, BrokerConfig(**FAST))
            cluster.broker.start()
            job = cluster.wait_job(job_id)
            assert job.state == "FINISHED"
            assert cluster.result_bytes(job) == want
        finally:
            cluster.close()
