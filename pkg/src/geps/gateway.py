"""HTTP/JSON gateway consumed by the CLI and the browser portal.

Endpoints (all JSON except the result download):

    POST /jobs                submit a filter job
    GET  /jobs                status table rows (portal column set)
    GET  /jobs/{id}           full job record
    GET  /jobs/{id}/result    merged `.geb` download
    GET  /nodes               node registry with liveness
    GET  /nodes/{name}        one node
    POST /nodes/register      register or refresh a node agent
    GET  /datasets            dataset registry
    POST /datasets            synthesize + ingest a dataset
    POST /datasets/upload     ingest an uploaded `.geb` dataset
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from . import broker as broker_mod
from . import geb
from .catalog import ALL_TARGET, Catalog, JobRecord, NotFoundError, SubmitRejectedError
from .catalog import JobSpec
from .filters import Calibration


class CalibrationEntry(BaseModel):
    scale: float
    offset: float


class SubmitJobRequest(BaseModel):
    target: str = ALL_TARGET
    filter: str
    dataset_id: int
    calibration: dict[str, CalibrationEntry] | None = None
    submitted_by: str = ""


class SubmitJobResponse(BaseModel):
    job_id: int


class JobRow(BaseModel):
    """One row of the job status table, in portal column order."""

    job_id: int
    status: str
    server_name: str
    filter_expression: str
    error: str = ""
    result: str = ""


class JobDetail(JobRow):
    state: str
    target: str
    dataset_id: int
    submitted_by: str = ""
    submitted_at: float = 0.0
    counters: dict[str, dict[str, int]] = Field(default_factory=dict)
    timestamps: dict[str, float] = Field(default_factory=dict)
    events_scanned: int = 0
    events_passed: int = 0


class NodeView(BaseModel):
    name: str
    address: str
    alive: bool
    last_seen: float
    processors: int = 0
    load_1m: float = 0.0
    free_disk_bytes: int = 0
    bandwidth_bytes_per_s: int = 0
    fragments_held: list[tuple[int, int]] = Field(default_factory=list)
    uptime_s: float = 0.0


class DatasetView(BaseModel):
    dataset_id: int
    variables: list[str]
    n_fragments: int
    total_events: int


class IngestRequest(BaseModel):
    n_events: int = Field(gt=0)
    n_fragments: int = Field(gt=0)
    replication: int = Field(default=1, ge=1)
    seed: int = 0
    payload_bytes: int = Field(default=0, ge=0)
    variables: list[str] | None = None


class IngestResponse(BaseModel):
    dataset_id: int
    n_fragments: int
    total_events: int
    staged_copies: int
    nodes: list[str]


class RegisterNodeRequest(BaseModel):
    name: str
    address: str


def _display_status(state: str) -> str:
    return state.title()


def _job_row(job: JobRecord) -> JobRow:
    finished = job.state == "FINISHED"
    return JobRow(
        job_id=job.job_id,
        status=_display_status(job.state),
        server_name="All Servers" if job.spec.target == ALL_TARGET else job.spec.target,
        filter_expression=job.spec.filter_text,
        error=job.error or "",
        result=f"/jobs/{job.job_id}/result" if finished else "",
    )


def _job_detail(job: JobRecord) -> JobDetail:
    row = _job_row(job)
    return JobDetail(
        **row.model_dump(),
        state=job.state,
        target=job.spec.target,
        dataset_id=job.spec.dataset_id,
        submitted_by=job.spec.submitted_by,
        submitted_at=job.spec.submitted_at,
        counters=job.counters,
        timestamps=job.timestamps,
        events_scanned=sum(c.get("events_scanned", 0) for c in job.counters.values()),
        events_passed=sum(c.get("events_passed", 0) for c in job.counters.values()),
    )


def _node_view(record) -> NodeView:
    info = record.last_info or {}
    return NodeView(
        name=record.name,
        address=record.address,
        alive=record.alive,
        last_seen=record.last_seen,
        processors=info.get("processors", 0),
        load_1m=info.get("load_1m", 0.0),
        free_disk_bytes=info.get("free_disk_bytes", 0),
        bandwidth_bytes_per_s=info.get("bandwidth_bytes_per_s", 0),
        fragments_held=[(int(d), int(i)) for d, i in info.get("fragments_held", [])],
        uptime_s=info.get("uptime_s", 0.0),
    )


def create_app(catalog: Catalog, node_timeout_s: float = 10.0,
               portal_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="geps gateway", version="0.1.0")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(RequestValidationError)
    async def bad_request(_request: Request, exc: RequestValidationError):
        errors = [
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}"
            for err in exc.errors()
        ]
        return JSONResponse(status_code=400, content={"detail": {"errors": errors}})

    @app.get("/")
    def root():
        return {"service": "geps-gateway", "version": app.version}

    @app.post("/jobs", response_model=SubmitJobResponse, status_code=201)
    def submit_job(request: SubmitJobRequest):
        calibration = None
        if request.calibration:
            try:
                calibration = Calibration({
                    name: (entry.scale, entry.offset)
                    for name, entry in request.calibration.items()
                })
            except ValueError as exc:
                raise HTTPException(status_code=400,
                                    detail={"errors": [str(exc)]}) from exc
        spec = JobSpec(
            target=request.target,
            filter_text=request.filter,
            dataset_id=request.dataset_id,
            calibration=calibration,
            submitted_by=request.submitted_by,
        )
        try:
            job_id = catalog.submit_job(spec)
        except SubmitRejectedError as exc:
            raise HTTPException(status_code=400,
                                detail={"errors": exc.errors}) from exc
        return SubmitJobResponse(job_id=job_id)

    @app.get("/jobs", response_model=list[JobRow])
    def list_jobs():
        return [_job_row(job) for job in catalog.list_jobs()]

    @app.get("/jobs/{job_id}", response_model=JobDetail)
    def get_job(job_id: int):
        try:
            return _job_detail(catalog.get_job(job_id))
        except NotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc

    @app.get("/jobs/{job_id}/result")
    def get_result(job_id: int):
        try:
            job = catalog.get_job(job_id)
        except NotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        if job.state != "FINISHED" or not job.result_path:
            raise HTTPException(status_code=409,
                                detail=f"job {job_id} is {job.state}, no result yet")
        path = catalog.path / job.result_path
        if not path.exists():
            raise HTTPException(status_code=404, detail="result file missing")
        return FileResponse(
            path,
            media_type="application/octet-stream",
            filename=f"job-{job_id}.geb",
        )

    @app.get("/nodes", response_model=list[NodeView])
    def list_nodes():
        return [_node_view(record) for record in catalog.list_nodes()]

    @app.get("/nodes/{name}", response_model=NodeView)
    def get_node(name: str):
        try:
            return _node_view(catalog.get_node(name))
        except NotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc

    @app.post("/nodes/register", status_code=201)
    def register_node(request: RegisterNodeRequest):
        catalog.register_node(request.name, request.address)
        return {"name": request.name, "address": request.address}

    @app.get("/datasets", response_model=list[DatasetView])
    def list_datasets():
        return [
            DatasetView(
                dataset_id=d.dataset_id,
                variables=list(d.variables),
                n_fragments=d.n_fragments,
                total_events=d.total_events,
            )
            for d in catalog.list_datasets()
        ]

    @app.post("/datasets", response_model=IngestResponse, status_code=201)
    def ingest(request: IngestRequest):
        try:
            report = broker_mod.ingest_dataset(
                catalog,
                seed=request.seed,
                n_events=request.n_events,
                payload_bytes=request.payload_bytes,
                n_fragments=request.n_fragments,
                replication=request.replication,
                variables=tuple(request.variables) if request.variables else None,
                node_timeout_s=node_timeout_s,
            )
        except (broker_mod.IngestError, ValueError) as exc:
            raise HTTPException(status_code=400,
                                detail={"errors": [str(exc)]}) from exc
        return IngestResponse(**report)

    @app.post("/datasets/upload", response_model=IngestResponse, status_code=201)
    async def ingest_upload(request: Request,
                            n_fragments: int = Query(gt=0),
                            replication: int = Query(default=1, ge=1)):
        data = await request.body()
        try:
            fragment = geb.decode_fragment(data)
        except geb.GebError as exc:
            raise HTTPException(status_code=400,
                                detail={"errors": [f"{exc.code}: {exc}"]}) from exc
        try:
            report = broker_mod.ingest_dataset(
                catalog,
                n_fragments=n_fragments,
                replication=replication,
                variables=fragment.schema.variables,
                events=fragment.events,
                node_timeout_s=node_timeout_s,
            )
        except (broker_mod.IngestError, ValueError) as exc:
            raise HTTPException(status_code=400,
                                detail={"errors": [str(exc)]}) from exc
        return IngestResponse(**report)

    if portal_dir and Path(portal_dir).is_dir():
        app.mount("/portal", StaticFiles(directory=portal_dir, html=True),
                  name="portal")

    return app
