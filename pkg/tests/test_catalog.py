import shutil
import struct
import threading

import pytest

from geps.catalog import (
    Catalog,
    CatalogError,
    IllegalTransitionError,
    JobSpec,
    NotFoundError,
    PlacementRecord,
    SubmitRejectedError,
)

NODE = "gandalf.adetti.iscbo.pt"


@pytest.fixture
def cat(tmp_path):
    c = Catalog(tmp_path / "catalog", staleness_s=5.0)
    yield c
    c.close()


def seed_catalog(c: Catalog) -> int:
    c.register_node(NODE, "127.0.0.1:2135")
    return c.register_dataset(("bx", "gotmean", "levr", "evr"), n_fragments=4,
                              total_events=100)


def spec(dataset_id, target="ALL", text="bx<10"):
    return JobSpec(target=target, filter_text=text, dataset_id=dataset_id)


class TestOpen:
    def test_empty_dir(self, tmp_path):
        c = Catalog(tmp_path / "fresh")
        assert c.list_jobs() == []
        assert c.list_nodes() == []
        c.close()

    def test_reopen_continues_ids(self, tmp_path):
        path = tmp_path / "catalog"
        c = Catalog(path)
        ds = seed_catalog(c)
        ids = [c.submit_job(spec(ds)) for _ in range(3)]
        assert ids == [1, 2, 3]
        c.close()

        c2 = Catalog(path)
        assert len(c2.list_jobs()) == 3
        assert c2.submit_job(spec(ds)) == 4
        c2.close()

    def test_reopen_after_snapshot(self, tmp_path):
        path = tmp_path / "catalog"
        c = Catalog(path, snapshot_every=5)
        ds = seed_catalog(c)
        for _ in range(8):
            c.submit_job(spec(ds))
        c.close()
        c2 = Catalog(path)
        assert [j.job_id for j in c2.list_jobs()] == list(range(1, 9))
        assert c2.submit_job(spec(ds)) == 9
        c2.close()

    def test_torn_final_record(self, tmp_path):
        path = tmp_path / "catalog"
        c = Catalog(path)
        ds = seed_catalog(c)
        c.submit_job(spec(ds))
        c.close()
        before = (path / "journal.log").read_bytes()

        c = Catalog(path)
        c.submit_job(spec(ds))
        c.close()
        after = (path / "journal.log").read_bytes()
        new_bytes = after[len(before):]

        # Crash mid-append: keep only part of the final record.
        torn = path.parent / "torn"
        shutil.copytree(path, torn)
        (torn / "journal.log").write_bytes(before + new_bytes[: len(new_bytes) // 2])
        c2 = Catalog(torn)
        assert [j.job_id for j in c2.list_jobs()] == [1]
        assert c2.recovered_truncation is not None
        assert c2.submit_job(spec(ds)) == 2
        c2.close()

    def test_garbage_length_prefix(self, tmp_path):
        path = tmp_path / "catalog"
        c = Catalog(path)
        ds = seed_catalog(c)
        c.submit_job(spec(ds))
        c.close()
        with open(path / "journal.log", "ab") as fh:
            fh.write(struct.pack("<I", 0xFFFFFFFF) + b"junk")
        c2 = Catalog(path)
        assert len(c2.list_jobs()) == 1
        assert c2.recovered_truncation is not None
        c2.close()


class TestSubmit:
    def test_monotonic_ids(self, cat):
        ds = seed_catalog(cat)
        assert [cat.submit_job(spec(ds)) for _ in range(3)] == [1, 2, 3]

    def test_unknown_variable_rejected(self, cat):
        ds = seed_catalog(cat)
        with pytest.raises(SubmitRejectedError) as exc:
            cat.submit_job(spec(ds, text="zz<1"))
        assert exc.value.errors == ["unknown variable 'zz'"]

    def test_syntax_error_rejected(self, cat):
        ds = seed_catalog(cat)
        with pytest.raises(SubmitRejectedError):
            cat.submit_job(spec(ds, text="bx>"))

    def test_registered_target_accepted(self, cat):
        ds = seed_catalog(cat)
        job_id = cat.submit_job(spec(ds, target=NODE))
        assert cat.get_job(job_id).spec.target == NODE

    def test_unknown_target_rejected(self, cat):
        ds = seed_catalog(cat)
        with pytest.raises(SubmitRejectedError):
            cat.submit_job(spec(ds, target="nowhere.example.org"))

    def test_unknown_dataset_rejected(self, cat):
        seed_catalog(cat)
        with pytest.raises(SubmitRejectedError):
            cat.submit_job(spec(999))

    def test_filter_canonicalized(self, cat):
        ds = seed_catalog(cat)
        job_id = cat.submit_job(spec(ds, text="bx > 10 && gotmean < 5"))
        assert cat.get_job(job_id).spec.filter_text == "bx>10&gotmean<5"


class TestTransitions:
    def test_legal_chain(self, cat):
        ds = seed_catalog(cat)
        job_id = cat.submit_job(spec(ds))
        for state in ("STAGING", "RUNNING", "MERGING"):
            cat.transition(job_id, state)
        record = cat.transition(job_id, "FINISHED", result_path="results/job-1.geb")
        assert record.state == "FINISHED"
        assert set(record.timestamps) == {"NEW", "STAGING", "RUNNING", "MERGING", "FINISHED"}

    def test_terminal_is_final(self, cat):
        ds = seed_catalog(cat)
        job_id = cat.submit_job(spec(ds))
        cat.transition(job_id, "STAGING")
        cat.transition(job_id, "RUNNING")
        cat.transition(job_id, "MERGING")
        cat.transition(job_id, "FINISHED", result_path="x.geb")
        with pytest.raises(IllegalTransitionError):
            cat.transition(job_id, "RUNNING")
        assert cat.get_job(job_id).state == "FINISHED"

    def test_skip_is_illegal(self, cat):
        ds = seed_catalog(cat)
        job_id = cat.submit_job(spec(ds))
        with pytest.raises(IllegalTransitionError):
            cat.transition(job_id, "RUNNING")

    def test_error_requires_message(self, cat):
        ds = seed_catalog(cat)
        job_id = cat.submit_job(spec(ds))
        with pytest.raises(CatalogError):
            cat.transition(job_id, "ERROR")
        record = cat.transition(job_id, "ERROR", error="node lost")
        assert record.error == "node lost"

    def test_finished_requires_result(self, cat):
        ds = seed_catalog(cat)
        job_id = cat.submit_job(spec(ds))
        cat.transition(job_id, "STAGING")
        cat.transition(job_id, "RUNNING")
        cat.transition(job_id, "MERGING")
        with pytest.raises(CatalogError):
            cat.transition(job_id, "FINISHED")

    def test_unknown_job(self, cat):
        with pytest.raises(NotFoundError):
            cat.transition(42, "STAGING")
        with pytest.raises(NotFoundError):
            cat.get_job(42)


class TestClaim:
    def test_empty(self, cat):
        assert cat.claim_new_jobs(10) == []

    def test_fifo_limit(self, cat):
        ds = seed_catalog(cat)
        for _ in range(5):
            cat.submit_job(spec(ds))
        claimed = cat.claim_new_jobs(3)
        assert [j.job_id for j in claimed] == [1, 2, 3]
        assert all(j.state == "STAGING" for j in claimed)
        assert [j.job_id for j in cat.claim_new_jobs(10)] == [4, 5]

    def test_concurrent_exclusivity(self, cat):
        ds = seed_catalog(cat)
        for _ in range(40):
            cat.submit_job(spec(ds))
        results = []
        lock = threading.Lock()

        def worker():
            while True:
                got = cat.claim_new_jobs(3)
                if not got:
                    return
                with lock:
                    results.extend(j.job_id for j in got)

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(results) == list(range(1, 41))
        assert len(set(results)) == 40


class TestNodesAndPlacements:
    def test_upsert(self, cat):
        cat.register_node(NODE, "127.0.0.1:2135", {"processors": 2})
        cat.register_node(NODE, "127.0.0.1:2136", {"processors": 4})
        nodes = cat.list_nodes()
        assert len(nodes) == 1
        assert nodes[0].address == "127.0.0.1:2136"
        assert nodes[0].last_info["processors"] == 4
        assert nodes[0].alive

    def test_staleness(self, tmp_path):
        c = Catalog(tmp_path / "c", staleness_s=0.0)
        c.register_node(NODE, "127.0.0.1:2135")
        import time
        time.sleep(0.01)
        assert c.list_nodes()[0].alive is False
        c.close()

    def test_unknown_node(self, cat):
        with pytest.raises(NotFoundError):
            cat.get_node("nope")

    def test_placements_empty(self, cat):
        assert cat.placements(123) == []

    def test_placement_roundtrip(self, cat):
        cat.record_placement(PlacementRecord(1, 0, "a", 0))
        cat.record_placement(PlacementRecord(1, 0, "b", 1))
        cat.record_placement(PlacementRecord(1, 1, "b", 0))
        assert len(cat.placements(1)) == 3
        assert cat.placements(2) == []

    def test_second_primary_rejected(self, cat):
        cat.record_placement(PlacementRecord(1, 0, "a", 0))
        with pytest.raises(CatalogError):
            cat.record_placement(PlacementRecord(1, 0, "b", 0))

    def test_dataset_registry(self, cat):
        ds = cat.register_dataset(("bx",), 2, 50)
        rec = cat.get_dataset(ds)
        assert rec.n_fragments == 2
        assert rec.total_events == 50
        assert [d.dataset_id for d in cat.list_datasets()] == [ds]


class TestListJobsOrdering:
    def test_ascending(self, cat):
        ds = seed_catalog(cat)
        for _ in range(14):
            cat.submit_job(spec(ds))
        ids = [j.job_id for j in cat.list_jobs()]
        assert ids == sorted(ids) == list(range(1, 15))


class TestDurabilityProperty:
    def test_random_crash_points(self, tmp_path):
        # Acked mutations must survive a crash that tears the journal tail
        # at any byte; torn bytes may only lose the unacked suffix.
        import random
        rng = random.Random(77)
        base = tmp_path / "base"
        c = Catalog(base)
        ds = seed_catalog(c)
        journal = base / "journal.log"
        acked = []
        boundaries = [journal.stat().st_size]
        for i in range(20):
            acked.append(c.submit_job(spec(ds)))
            boundaries.append(journal.stat().st_size)
        c.close()
        data = journal.read_bytes()

        for trial in range(25):
            cut = rng.randrange(boundaries[0], len(data) + 1)
            # Mutations fully journaled before `cut` were acknowledged.
            survivors = sum(1 for b in boundaries[1:] if b <= cut)
            crash = tmp_path / f"crash{trial}"
            shutil.copytree(base, crash)
            (crash / "journal.log").write_bytes(data[:cut])
            c2 = Catalog(crash)
            assert len(c2.list_jobs()) >= survivors
            c2.close()
            shutil.rmtree(crash)
