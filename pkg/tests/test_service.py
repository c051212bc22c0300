"""HTTP service: instance listing, job lifecycle, persistence, comparisons.

Long-running solves are simulated with an injected solve function gated on
events, so cancellation and queueing tests are deterministic rather than
timing-dependent.
"""

import json
import shutil
import threading
import time

import jsonschema
import pytest
from fastapi.testclient import TestClient

from conftest import FIXTURES
from merger_opt import solve
from merger_opt.service import create_app

POLL_TIMEOUT = 30.0


def load_schema(name):
    return json.loads((FIXTURES / "api" / f"{name}.schema.json").read_text())


def check_schema(payload, name):
    jsonschema.validate(payload, load_schema(name))


def copy_fixture_data(dst):
    for path in FIXTURES.iterdir():
        if path.is_file() and path.suffix in (".json", ".csv"):
            shutil.copy(path, dst / path.name)


@pytest.fixture()
def data_dir(tmp_path):
    copy_fixture_data(tmp_path)
    return tmp_path


@pytest.fixture()
def client(data_dir):
    with TestClient(create_app(data_dir, workers=2)) as c:
        yield c


def wait_for(client, job_id, states=("done",), timeout=POLL_TIMEOUT):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        record = client.get(f"/api/v1/jobs/{job_id}").json()
        if record["state"] in states:
            return record
        time.sleep(0.01)
    raise AssertionError(f"job {job_id} never reached {states}: {record}")


class GatedSolve:
    """A solve stand-in that parks until released or cancelled."""

    def __init__(self):
        self.started = threading.Event()
        self.release = threading.Event()

    def __call__(self, instance, config, cancel=None):
        self.started.set()
        deadline = time.monotonic() + POLL_TIMEOUT
        while time.monotonic() < deadline:
            if self.release.is_set() or (cancel is not None and cancel.is_set()):
                break
            time.sleep(0.005)
        return solve(instance, config)


class TestCatalog:
    def test_districts_sorted_and_shaped(self, client):
        body = client.get("/api/v1/districts").json()
        check_schema(body, "districts")
        ids = [d["id"] for d in body]
        assert ids == ["checkerboard", "coastal", "flows", "pair", "quad"]
        by_id = {d["id"]: d for d in body}
        assert by_id["checkerboard"]["baseline_d"] == 1.0
        assert by_id["checkerboard"]["baseline_c"] == 1.875
        assert by_id["quad"]["school_count"] == 4

    def test_unusable_files_become_diagnostics(self, client):
        body = client.get("/api/v1/diagnostics").json()
        check_schema(body, "diagnostics")
        skipped = {row["file"] for row in body["skipped_files"]}
        assert "degenerate.json" in skipped
        assert "scenario_sweep.json" in skipped

    def test_health(self, client):
        body = client.get("/api/v1/health").json()
        check_schema(body, "health")
        assert body["status"] == "ok"
        assert body["instances"] == 5

    def test_versioned_and_bare_prefixes_agree(self, client):
        a = client.get("/api/districts").json()
        b = client.get("/api/v1/districts").json()
        assert a == b


class TestJobLifecycle:
    def test_solve_job_to_result(self, client):
        created = client.post("/api/v1/jobs", json={"instance_id": "pair"})
        assert created.status_code == 200
        record = created.json()
        check_schema(record, "job")
        assert record["state"] in ("queued", "running")
        assert record["result"] is None

        done = wait_for(client, record["job_id"])
        check_schema(done, "job")
        assert done["error"] is None
        assert done["result"] == f"/api/v1/jobs/{record['job_id']}/result"

        payload = client.get(done["result"]).json()
        check_schema(payload, "result")
        assert payload["solve"]["d_before"] == 1.0
        assert payload["solve"]["d_after"] == 0.0
        assert payload["solve"]["status"] == "optimal"
        assert payload["impact"]["switcher_share"] > 0

    def test_listing_includes_new_jobs(self, client):
        first = client.post("/api/v1/jobs", json={"instance_id": "pair"}).json()
        second = client.post("/api/v1/jobs", json={"instance_id": "quad"}).json()
        wait_for(client, first["job_id"])
        wait_for(client, second["job_id"])
        listed = client.get("/api/v1/jobs").json()
        ids = [j["job_id"] for j in listed]
        assert ids.index(first["job_id"]) < ids.index(second["job_id"])

    def test_travel_included_when_siblings_exist(self, client):
        created = client.post("/api/v1/jobs", json={"instance_id": "flows"}).json()
        done = wait_for(client, created["job_id"])
        payload = client.get(done["result"]).json()
        overall = payload["impact"]["travel"]["overall"]
        assert overall["count"] == 88.0

    def test_opt_out_included(self, client):
        created = client.post(
            "/api/v1/jobs",
            json={"instance_id": "pair", "opt_out_ratios": {"white": 0.0}},
        ).json()
        done = wait_for(client, created["job_id"])
        payload = client.get(done["result"]).json()
        assert payload["impact"]["opt_out"]["d_adjusted"] == 0.0

    @pytest.mark.filterwarnings("ignore::merger_opt.CapacityWarning")
    def test_infeasible_run_has_no_impact(self, data_dir):
        # Required pair with no capacity-feasible split: solve returns an
        # infeasible result, so the payload carries solve data only.
        doc = json.loads((FIXTURES / "pair.json").read_text())
        for school in doc["schools"]:
            school["capacity"] = 90
        doc["name"] = "cramped"
        (data_dir / "cramped.json").write_text(json.dumps(doc))
        with TestClient(create_app(data_dir, workers=1)) as client:
            created = client.post(
                "/api/v1/jobs",
                json={"instance_id": "cramped", "require": [["A", "B"]]},
            ).json()
            done = wait_for(client, created["job_id"])
            payload = client.get(done["result"]).json()
            assert payload["solve"]["status"] == "infeasible"
            assert payload["solve"]["clusters"] is None
            assert "impact" not in payload


class TestRejections:
    def test_unknown_instance_404(self, client):
        resp = client.post("/api/v1/jobs", json={"instance_id": "atlantis"})
        assert resp.status_code == 404

    def test_unknown_job_404(self, client):
        assert client.get("/api/v1/jobs/zzz").status_code == 404
        assert client.get("/api/v1/jobs/zzz/result").status_code == 404
        assert client.delete("/api/v1/jobs/zzz").status_code == 404

    def test_config_conflict_422_names_constraint(self, client):
        resp = client.post(
            "/api/v1/jobs",
            json={"instance_id": "quad", "require": [["n2", "n4"]]},
        )
        assert resp.status_code == 422
        assert "not adjacent" in resp.json()["detail"]
        assert "n2" in resp.json()["detail"]

    def test_bad_opt_out_422(self, client):
        resp = client.post(
            "/api/v1/jobs",
            json={"instance_id": "pair", "opt_out_ratios": {"martian": 0.5}},
        )
        assert resp.status_code == 422
        assert "unknown group" in resp.json()["detail"]

    def test_malformed_body_422(self, client):
        resp = client.post("/api/v1/jobs", json={"instance_id": "pair", "p_min": "lots"})
        assert resp.status_code == 422

    def test_result_before_done_409(self, data_dir):
        gate = GatedSolve()
        with TestClient(create_app(data_dir, workers=1, solve_fn=gate)) as client:
            created = client.post("/api/v1/jobs", json={"instance_id": "pair"}).json()
            assert gate.started.wait(POLL_TIMEOUT)
            resp = client.get(f"/api/v1/jobs/{created['job_id']}/result")
            assert resp.status_code == 409
            gate.release.set()
            wait_for(client, created["job_id"])


class TestCancellation:
    def test_cancel_running_job_keeps_partial_result(self, data_dir):
        gate = GatedSolve()
        with TestClient(create_app(data_dir, workers=1, solve_fn=gate)) as client:
            created = client.post("/api/v1/jobs", json={"instance_id": "pair"}).json()
            assert gate.started.wait(POLL_TIMEOUT)
            resp = client.delete(f"/api/v1/jobs/{created['job_id']}")
            assert resp.status_code == 200
            assert resp.json()["cancel_requested"] is True
            record = wait_for(client, created["job_id"], states=("cancelled",))
            # The solver returned an incumbent, so a payload exists.
            payload = client.get(f"/api/v1/jobs/{created['job_id']}/result")
            assert payload.status_code == 200
            assert record["finished_at"] is not None

    def test_cancel_queued_job_is_immediate(self, data_dir):
        gate = GatedSolve()
        with TestClient(create_app(data_dir, workers=1, solve_fn=gate)) as client:
            first = client.post("/api/v1/jobs", json={"instance_id": "pair"}).json()
            assert gate.started.wait(POLL_TIMEOUT)
            second = client.post("/api/v1/jobs", json={"instance_id": "quad"}).json()
            assert client.get(f"/api/v1/jobs/{second['job_id']}").json()["state"] == "queued"
            resp = client.delete(f"/api/v1/jobs/{second['job_id']}")
            assert resp.status_code == 200
            assert resp.json()["state"] == "cancelled"
            # Never ran, so no payload was recorded.
            assert client.get(f"/api/v1/jobs/{second['job_id']}/result").status_code == 409
            gate.release.set()
            wait_for(client, first["job_id"])

    def test_cancel_terminal_job_409(self, client):
        created = client.post("/api/v1/jobs", json={"instance_id": "pair"}).json()
        wait_for(client, created["job_id"])
        resp = client.delete(f"/api/v1/jobs/{created['job_id']}")
        assert resp.status_code == 409


class TestCompare:
    @staticmethod
    def submit_and_wait(client, body):
        created = client.post("/api/v1/jobs", json=body).json()
        return wait_for(client, created["job_id"])

    def test_self_compare_is_all_zero(self, client):
        a = self.submit_and_wait(client, {"instance_id": "flows"})
        b = self.submit_and_wait(client, {"instance_id": "flows"})
        body = client.get(
            f"/api/v1/jobs/{a['job_id']}/compare", params={"base": b["job_id"]}
        ).json()
        check_schema(body, "compare")
        assert body["delta"]["d_after"] == 0.0
        assert body["delta"]["switch_total"] == 0.0
        assert body["delta"]["mean_travel_after"] == 0.0
        assert all(s["delta_total_after"] == 0.0 for s in body["per_school"])

    def test_floor_relaxation_never_hurts(self, client):
        tight = self.submit_and_wait(client, {"instance_id": "quad", "p_min": 0.8})
        loose = self.submit_and_wait(client, {"instance_id": "quad", "p_min": 0.5})
        body = client.get(
            f"/api/v1/jobs/{loose['job_id']}/compare",
            params={"base": tight["job_id"]},
        ).json()
        assert body["delta"]["d_after"] <= 1e-12

    def test_cross_instance_compare_409(self, client):
        a = self.submit_and_wait(client, {"instance_id": "pair"})
        b = self.submit_and_wait(client, {"instance_id": "quad"})
        resp = client.get(
            f"/api/v1/jobs/{a['job_id']}/compare", params={"base": b["job_id"]}
        )
        assert resp.status_code == 409
        assert "different instances" in resp.json()["detail"]

    def test_compare_requires_done(self, data_dir):
        gate = GatedSolve()
        gate.release.set()
        with TestClient(create_app(data_dir, workers=1, solve_fn=gate)) as client:
            done = self.submit_and_wait(client, {"instance_id": "pair"})
            gate.release.clear()
            gate.started.clear()
            running = client.post("/api/v1/jobs", json={"instance_id": "pair"}).json()
            assert gate.started.wait(POLL_TIMEOUT)
            resp = client.get(
                f"/api/v1/jobs/{running['job_id']}/compare",
                params={"base": done["job_id"]},
            )
            assert resp.status_code == 409
            gate.release.set()
            wait_for(client, running["job_id"])


class TestPersistence:
    def test_terminal_jobs_survive_restart(self, data_dir):
        with TestClient(create_app(data_dir, workers=1)) as client:
            created = client.post("/api/v1/jobs", json={"instance_id": "pair"}).json()
            done = wait_for(client, created["job_id"])

        with TestClient(create_app(data_dir, workers=1)) as client:
            record = client.get(f"/api/v1/jobs/{done['job_id']}").json()
            assert record["state"] == "done"
            payload = client.get(f"/api/v1/jobs/{done['job_id']}/result")
            assert payload.status_code == 200
            assert payload.json()["solve"]["d_after"] == 0.0

    def test_inflight_jobs_marked_failed_on_restart(self, data_dir):
        gate = GatedSolve()
        app1 = create_app(data_dir, workers=1, solve_fn=gate)
        with TestClient(app1) as client1:
            created = client1.post("/api/v1/jobs", json={"instance_id": "pair"}).json()
            assert gate.started.wait(POLL_TIMEOUT)

            with TestClient(create_app(data_dir, workers=1)) as client2:
                record = client2.get(f"/api/v1/jobs/{created['job_id']}").json()
                assert record["state"] == "failed"
                assert record["error"] == "interrupted by restart"

            gate.release.set()
            wait_for(client1, created["job_id"])

    def test_torn_log_line_skipped(self, data_dir):
        with TestClient(create_app(data_dir, workers=1)) as client:
            created = client.post("/api/v1/jobs", json={"instance_id": "pair"}).json()
            wait_for(client, created["job_id"])
        with (data_dir / "jobs.jsonl").open("a") as fh:
            fh.write('{"event": "created", "job_id"')  # crash mid-write
        with TestClient(create_app(data_dir, workers=1)) as client:
            record = client.get(f"/api/v1/jobs/{created['job_id']}").json()
            assert record["state"] == "done"


class TestConcurrencyCap:
    def test_single_worker_serializes_jobs(self, data_dir):
        gate = GatedSolve()
        with TestClient(create_app(data_dir, workers=1, solve_fn=gate)) as client:
            first = client.post("/api/v1/jobs", json={"instance_id": "pair"}).json()
            assert gate.started.wait(POLL_TIMEOUT)
            second = client.post("/api/v1/jobs", json={"instance_id": "quad"}).json()
            time.sleep(0.05)
            states = {
                j["job_id"]: j["state"] for j in client.get("/api/v1/jobs").json()
            }
            assert states[first["job_id"]] == "running"
            assert states[second["job_id"]] == "queued"
            gate.release.set()
            wait_for(client, second["job_id"])
