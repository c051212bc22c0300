"""HTTP facade: instances, asynchronous solve jobs, comparisons.

The job store is a single-writer append-only JSONL log plus one JSON result
file per job under the data directory, so terminal jobs survive restarts.
Jobs that were queued or running when the process died are replayed as
failed with a restart marker. At most ``workers`` solves run concurrently;
cancellation is cooperative and honored at solver node boundaries.

Instance files are ``*.json`` in the data directory; files that do not
parse as instances are skipped and listed under /api/diagnostics. A file
``name.json`` may bring optional ``name.blocks.csv`` and ``name.travel.csv``
siblings, which enable travel reporting for jobs on that instance.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
import uuid
from concurrent.futures import Future, ThreadPoolExecutor
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from fastapi import APIRouter, FastAPI, HTTPException, Query
from pydantic import BaseModel, Field

from .district import DistrictInstance, load_instance
from .impact import (
    BlockWeights,
    TravelMatrix,
    build_impact_report,
    load_block_weights,
    load_travel_matrix,
)
from .metrics import MetricsError, district_dissimilarity, district_geary
from .solver import (
    ConfigConflictError,
    SolveConfig,
    _check_config,
    named_objective,
    solve,
    solve_result_to_dict,
)

log = logging.getLogger(__name__)

TERMINAL_STATES = frozenset({"done", "failed", "cancelled"})


class WhatIfRequest(BaseModel):
    """One what-if solve: an instance plus config deltas."""

    instance_id: str
    p_min: float = 0.8
    allow_triples: bool = True
    time_limit: float = 120.0
    seed: int = 0
    forbid: list[tuple[str, str]] = Field(default_factory=list)
    require: list[tuple[str, str]] = Field(default_factory=list)
    objective: str | None = None
    opt_out_ratios: dict[str, float] | None = None
    interdistrict: bool = False


@dataclass
class _Entry:
    instance: DistrictInstance
    baseline_d: float
    baseline_c: float | None
    blocks: BlockWeights | None = None
    travel: TravelMatrix | None = None


class InstanceStore:
    """Instances loaded once at startup; unusable files become diagnostics."""

    def __init__(self, data_dir: Path) -> None:
        self.entries: dict[str, _Entry] = {}
        self.skipped: list[dict[str, str]] = []
        for path in sorted(data_dir.glob("*.json")):
            try:
                instance = load_instance(path)
                baseline_d = district_dissimilarity(instance)
            except Exception as exc:
                self.skipped.append(
                    {"file": path.name, "error": f"{type(exc).__name__}: {exc}"}
                )
                continue
            try:
                baseline_c: float | None = district_geary(instance)
            except MetricsError:
                baseline_c = None
            iid = instance.name or path.stem
            if iid in self.entries:
                self.skipped.append(
                    {"file": path.name, "error": f"duplicate instance id {iid!r}"}
                )
                continue
            entry = _Entry(instance, baseline_d, baseline_c)
            for attr, loader in (
                ("blocks", load_block_weights),
                ("travel", load_travel_matrix),
            ):
                sibling = path.with_name(f"{path.stem}.{attr}.csv")
                if sibling.exists():
                    try:
                        setattr(entry, attr, loader(sibling))
                    except Exception as exc:
                        self.skipped.append(
                            {"file": sibling.name, "error": f"{type(exc).__name__}: {exc}"}
                        )
            self.entries[iid] = entry

    def get(self, instance_id: str) -> _Entry:
        entry = self.entries.get(instance_id)
        if entry is None:
            raise HTTPException(404, detail=f"unknown instance {instance_id!r}")
        return entry


@dataclass
class Job:
    job_id: str
    instance_id: str
    request: dict[str, Any]
    status: str = "queued"
    created_at: float = 0.0
    started_at: float | None = None
    finished_at: float | None = None
    error: str | None = None
    cancel: threading.Event = field(default_factory=threading.Event, repr=False)


class JobStore:
    """Jobs keyed by id, persisted as an append-only event log.

    All mutations and log writes happen under one lock (single writer).
    """

    def __init__(self, data_dir: Path) -> None:
        self.log_path = data_dir / "jobs.jsonl"
        self.results_dir = data_dir / "results"
        self.results_dir.mkdir(parents=True, exist_ok=True)
        self.lock = threading.Lock()
        self.jobs: dict[str, Job] = {}
        self._replay()

    def _replay(self) -> None:
        if not self.log_path.exists():
            return
        for line in self.log_path.read_text().splitlines():
            if not line.strip():
                continue
            try:
                event = json.loads(line)
            except json.JSONDecodeError:
                continue  # torn tail write from a crash
            jid = event.get("job_id")
            if event.get("event") == "created":
                self.jobs[jid] = Job(
                    job_id=jid,
                    instance_id=event.get("instance_id", ""),
                    request=event.get("config", {}),
                    created_at=event.get("at", 0.0),
                )
            elif event.get("event") == "state" and jid in self.jobs:
                job = self.jobs[jid]
                job.status = event.get("state", job.status)
                job.error = event.get("error")
                job.started_at = event.get("started_at", job.started_at)
                job.finished_at = event.get("finished_at", job.finished_at)
        with self.lock:
            for job in self.jobs.values():
                if job.status not in TERMINAL_STATES:
                    self._transition_locked(
                        job, "failed", error="interrupted by restart"
                    )

    def _append_locked(self, event: Mapping[str, Any]) -> None:
        with self.log_path.open("a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()

    def create(self, instance_id: str, request: dict[str, Any]) -> Job:
        job = Job(
            job_id=uuid.uuid4().hex[:12],
            instance_id=instance_id,
            request=request,
            created_at=time.time(),
        )
        with self.lock:
            self.jobs[job.job_id] = job
            self._append_locked(
                {
                    "event": "created",
                    "job_id": job.job_id,
                    "instance_id": instance_id,
                    "config": request,
                    "at": job.created_at,
                }
            )
        return job

    def _transition_locked(self, job: Job, state: str, error: str | None = None) -> None:
        now = time.time()
        job.status = state
        job.error = error
        if state == "running":
            job.started_at = now
        if state in TERMINAL_STATES:
            job.finished_at = now
        self._append_locked(
            {
                "event": "state",
                "job_id": job.job_id,
                "state": state,
                "error": error,
                "started_at": job.started_at,
                "finished_at": job.finished_at,
                "at": now,
            }
        )

    def transition(self, job: Job, state: str, error: str | None = None) -> None:
        with self.lock:
            self._transition_locked(job, state, error)

    def result_path(self, job_id: str) -> Path:
        return self.results_dir / f"{job_id}.json"


def _config_from_request(request: Mapping[str, Any], instance: DistrictInstance) -> SolveConfig:
    objective = None
    if request.get("objective"):
        objective = named_objective(instance, request["objective"])
    config = SolveConfig(
        p_min=request.get("p_min", 0.8),
        allow_triples=request.get("allow_triples", True),
        time_limit=request.get("time_limit", 120.0),
        seed=request.get("seed", 0),
        required_pairs=frozenset(tuple(p) for p in request.get("require", [])),
        forbidden_pairs=frozenset(tuple(p) for p in request.get("forbid", [])),
        objective_partition=objective,
        interdistrict=request.get("interdistrict", False),
    )
    _check_config(instance, config)
    return config


def _validate_opt_out(ratios: Mapping[str, float] | None, instance: DistrictInstance) -> None:
    if ratios is None:
        return
    for group, ratio in ratios.items():
        if group not in instance.taxonomy.groups:
            raise ConfigConflictError(f"opt_out_ratios: unknown group {group!r}")
        if not math.isfinite(ratio) or ratio < 0:
            raise ConfigConflictError(
                f"opt_out_ratios: ratio for {group!r} must be finite and non-negative"
            )


def create_app(
    data_dir: str | Path = ".",
    workers: int = 2,
    solve_fn: Callable[..., Any] = solve,
) -> FastAPI:
    """Build the application around one data directory.

    solve_fn is injectable for tests; it must accept
    (instance, config, cancel=<threading.Event>).
    """
    data_path = Path(data_dir)
    instances = InstanceStore(data_path)
    store = JobStore(data_path)
    executor = ThreadPoolExecutor(max_workers=max(1, workers))
    futures: dict[str, Future] = {}

    @asynccontextmanager
    async def lifespan(_app: FastAPI):
        yield
        executor.shutdown(wait=False, cancel_futures=True)

    app = FastAPI(title="merger-opt service", version="1", lifespan=lifespan)
    router = APIRouter()

    def job_record(job: Job) -> dict[str, Any]:
        has_result = (
            job.status in ("done", "cancelled") and store.result_path(job.job_id).exists()
        )
        return {
            "job_id": job.job_id,
            "instance_id": job.instance_id,
            "state": job.status,
            "config": job.request,
            "created_at": job.created_at,
            "started_at": job.started_at,
            "finished_at": job.finished_at,
            "error": job.error,
            "cancel_requested": job.cancel.is_set(),
            "result": f"/api/v1/jobs/{job.job_id}/result" if has_result else None,
        }

    def run_job(job_id: str) -> None:
        with store.lock:
            job = store.jobs[job_id]
            if job.status != "queued":
                return
            if job.cancel.is_set():
                store._transition_locked(job, "cancelled")
                return
            store._transition_locked(job, "running")
        try:
            entry = instances.entries[job.instance_id]
            config = _config_from_request(job.request, entry.instance)
            result = solve_fn(entry.instance, config, cancel=job.cancel)
            payload: dict[str, Any] = {
                "job_id": job_id,
                "instance_id": job.instance_id,
                "solve": solve_result_to_dict(result, entry.instance),
            }
            if result.plan is not None:
                taxonomy = config.objective_partition or entry.instance.taxonomy
                impact = build_impact_report(
                    result.plan,
                    entry.instance,
                    taxonomy=taxonomy,
                    block_weights=entry.blocks,
                    travel=entry.travel,
                    opt_out_ratios=job.request.get("opt_out_ratios"),
                )
                payload["impact"] = impact.to_dict()
            store.result_path(job_id).write_text(
                json.dumps(payload, sort_keys=True) + "\n"
            )
            final = "cancelled" if job.cancel.is_set() else "done"
            store.transition(job, final)
        except Exception as exc:
            log.exception("job %s failed", job_id)
            store.transition(job, "failed", error=f"{type(exc).__name__}: {exc}")

    @router.get("/districts")
    def districts() -> list[dict[str, Any]]:
        out = []
        for iid in sorted(instances.entries):
            entry = instances.entries[iid]
            out.append(
                {
                    "id": iid,
                    "name": entry.instance.name or iid,
                    "school_count": len(entry.instance.schools),
                    "baseline_d": entry.baseline_d,
                    "baseline_c": entry.baseline_c,
                }
            )
        return out

    @router.get("/diagnostics")
    def diagnostics() -> dict[str, Any]:
        return {"skipped_files": instances.skipped}

    @router.get("/health")
    def health() -> dict[str, Any]:
        with store.lock:
            counts: dict[str, int] = {}
            for job in store.jobs.values():
                counts[job.status] = counts.get(job.status, 0) + 1
        return {
            "status": "ok",
            "instances": len(instances.entries),
            "jobs": counts,
        }

    @router.post("/jobs")
    def submit(request: WhatIfRequest) -> dict[str, Any]:
        entry = instances.get(request.instance_id)
        body = request.model_dump()
        try:
            _config_from_request(body, entry.instance)
            _validate_opt_out(request.opt_out_ratios, entry.instance)
        except ConfigConflictError as exc:
            raise HTTPException(422, detail=str(exc))
        job = store.create(request.instance_id, body)
        with store.lock:
            futures[job.job_id] = executor.submit(run_job, job.job_id)
        return job_record(job)

    @router.get("/jobs")
    def list_jobs() -> list[dict[str, Any]]:
        with store.lock:
            jobs = sorted(store.jobs.values(), key=lambda j: (j.created_at, j.job_id))
            return [job_record(j) for j in jobs]

    def get_job(job_id: str) -> Job:
        job = store.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, detail=f"unknown job {job_id!r}")
        return job

    @router.get("/jobs/{job_id}")
    def job_state(job_id: str) -> dict[str, Any]:
        return job_record(get_job(job_id))

    @router.delete("/jobs/{job_id}")
    def cancel_job(job_id: str) -> dict[str, Any]:
        with store.lock:
            job = store.jobs.get(job_id)
            if job is None:
                raise HTTPException(404, detail=f"unknown job {job_id!r}")
            if job.status in TERMINAL_STATES:
                raise HTTPException(409, detail=f"job already {job.status}")
            job.cancel.set()
            future = futures.get(job_id)
            if job.status == "queued" and future is not None and future.cancel():
                store._transition_locked(job, "cancelled")
        return job_record(job)

    def load_payload(job: Job) -> dict[str, Any]:
        if job.status not in ("done", "cancelled"):
            raise HTTPException(
                409, detail=f"job is {job.status}; results exist once done or cancelled"
            )
        path = store.result_path(job.job_id)
        if not path.exists():
            raise HTTPException(409, detail="no result payload was recorded")
        return json.loads(path.read_text())

    @router.get("/jobs/{job_id}/result")
    def job_result(job_id: str) -> dict[str, Any]:
        return load_payload(get_job(job_id))

    @router.get("/jobs/{job_id}/compare")
    def compare(job_id: str, base: str = Query(...)) -> dict[str, Any]:
        job = get_job(job_id)
        base_job = get_job(base)
        if job.status != "done" or base_job.status != "done":
            raise HTTPException(409, detail="both jobs must be done to compare")
        if job.instance_id != base_job.instance_id:
            raise HTTPException(409, detail="jobs ran on different instances")
        payload = load_payload(job)
        base_payload = load_payload(base_job)

        def summary(p: Mapping[str, Any]) -> dict[str, Any]:
            solve_part = p["solve"]
            impact = p.get("impact") or {}
            overall = (impact.get("travel") or {}).get("overall")
            return {
                "d_before": solve_part["d_before"],
                "d_after": solve_part["d_after"],
                "status": solve_part["status"],
                "switch_total": impact.get("switch_total"),
                "switcher_share": impact.get("switcher_share"),
                "mean_travel_after": overall["mean_after"] if overall else None,
            }

        def diff(a: float | None, b: float | None) -> float | None:
            return None if a is None or b is None else a - b

        mine, theirs = summary(payload), summary(base_payload)
        base_schools = {
            s["school_id"]: s
            for s in (base_payload.get("impact") or {}).get("per_school", [])
        }
        per_school = []
        for s in (payload.get("impact") or {}).get("per_school", []):
            other = base_schools.get(s["school_id"])
            if other is None:
                continue
            per_school.append(
                {
                    "school_id": s["school_id"],
                    "delta_total_after": s["total_after"] - other["total_after"],
                    "delta_t_after": s["t_after"] - other["t_after"],
                    "delta_w_after": s["w_after"] - other["w_after"],
                }
            )
        return {
            "job": mine,
            "base": theirs,
            "delta": {
                "d_after": diff(mine["d_after"], theirs["d_after"]),
                "switch_total": diff(mine["switch_total"], theirs["switch_total"]),
                "switcher_share": diff(mine["switcher_share"], theirs["switcher_share"]),
                "mean_travel_after": diff(
                    mine["mean_travel_after"], theirs["mean_travel_after"]
                ),
            },
            "per_school": per_school,
        }

    app.include_router(router, prefix="/api")
    app.include_router(router, prefix="/api/v1")
    app.state.instances = instances
    app.state.jobs = store
    return app
