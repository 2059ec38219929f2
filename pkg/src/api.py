"""
Local REST API for the DecisionBench analysis toolkit using FastAPI
"""

import io
from typing import Dict, List, Optional

from fastapi import APIRouter, FastAPI, File, Form, HTTPException, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import PlainTextResponse, StreamingResponse
from pydantic import BaseModel, Field

from . import __description__, __version__
from .exceptions import CardBuildError, DecisionBenchError, SimulationError
from .metrics import rollup
from .profiles import build_all_c2_cards, render_card
from .simulator import DEFAULT_CONDITION_POLICIES, default_sim_config, simulate_sweep
from .tagger import DEFAULT_TAGGER_CONFIG, record_dominant_skill, tag_trajectory
from .trace_model import Benchmark, Condition, TaskRecord, default_pool_registry, emit_records, parse_records, validate_records

SERVICE_NAME = "DecisionBench Analysis Service"


class ValidationResponse(BaseModel):
    """Model for record validation response"""
    valid: bool
    n_records: int
    violations: List[str] = Field(default_factory=list, description="Rendered <cell>\\t<task_id>\\t<message> lines")


class TaggedRecord(BaseModel):
    cell: str
    task_id: str
    dominant_skill: Optional[str] = None
    tags: List[str] = Field(..., description="One tag label per step")


class TagResponse(BaseModel):
    """Model for tagging response"""
    tagger_version: str
    records: List[TaggedRecord]


class CellSummaryResponse(BaseModel):
    cell: str
    mean_q: float
    mean_cost: float
    mean_latency_s: float
    p90_latency_s: float
    delegation_rate: float
    n_tasks: int


class SimulateRequest(BaseModel):
    """Model for a synthetic sweep request"""
    seed: int = Field(0, ge=0, description="Seed for every random draw")
    orchestrators: int = Field(2, ge=1, le=11, description="Number of pool members acting as orchestrators")
    benchmarks: List[Benchmark] = Field(default_factory=lambda: [Benchmark.GAIA], description="Benchmarks to simulate")
    conditions: List[Condition] = Field(default_factory=lambda: [Condition.BLIND], description="Conditions to simulate")
    tasks: int = Field(5, ge=1, le=500, description="Tasks per cell")


# Initialize FastAPI app
app = FastAPI(
    title=SERVICE_NAME,
    description=__description__,
    version=__version__,
)

# Local front-ends only; the service makes no outbound calls
app.add_middleware(
    CORSMiddleware,
    allow_origins=["http://localhost:5173", "http://localhost:5174"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

api_router = APIRouter(prefix="/api", tags=["Analysis"])


async def _read_upload(file: UploadFile) -> List[TaskRecord]:
    if not file.filename or not file.filename.endswith((".jsonl.gz", ".jsonl", ".gz")):
        raise HTTPException(status_code=400, detail="File must be a gzip JSON-lines record stream")
    try:
        return parse_records(await file.read())
    except DecisionBenchError as e:
        raise HTTPException(status_code=400, detail=f"Invalid record stream: {e}")


@app.get("/")
async def root():
    """Root endpoint with service information"""
    return {
        "service": SERVICE_NAME,
        "version": __version__,
        "description": __description__,
        "endpoints": {
            "POST /api/validate-records": "Validate a record stream against the pool registry",
            "POST /api/tag-records": "Tag every step and report each record's dominant skill",
            "POST /api/rollup": "Per-cell quality, cost, latency and delegation rollup",
            "POST /api/build-c2-card": "Render the C2 profile card of one model from Stage-1 records",
            "POST /api/simulate": "Generate a synthetic record stream",
            "GET /api/health": "Health check endpoint",
        },
    }


@api_router.get("/health")
async def health_check():
    """Health check endpoint"""
    return {"status": "healthy", "service": SERVICE_NAME, "tagger_version": DEFAULT_TAGGER_CONFIG.version}


@api_router.post("/validate-records", response_model=ValidationResponse)
async def validate_record_stream(file: UploadFile = File(..., description="gzip JSON-lines record stream")):
    """
    Check every record invariant

    Args:
        file: Uploaded record stream

    Returns:
        Validation summary with rendered violations
    """
    records = await _read_upload(file)
    violations = validate_records(records, default_pool_registry())
    return ValidationResponse(
        valid=not violations,
        n_records=len(records),
        violations=[v.render() for v in violations],
    )


@api_router.post("/tag-records", response_model=TagResponse)
async def tag_records(file: UploadFile = File(..., description="gzip JSON-lines record stream")):
    """Tag every step with the frozen tagger"""
    records = await _read_upload(file)
    cfg = DEFAULT_TAGGER_CONFIG
    tagged = []
    for r in records:
        skill = record_dominant_skill(r, cfg)
        tagged.append(TaggedRecord(
            cell=str(r.cell),
            task_id=r.task_id,
            dominant_skill=skill.value if skill else None,
            tags=[tag.label for tag in tag_trajectory(r.steps, r.benchmark, cfg)],
        ))
    return TagResponse(tagger_version=cfg.version, records=tagged)


@api_router.post("/rollup", response_model=List[CellSummaryResponse])
async def rollup_records(file: UploadFile = File(..., description="gzip JSON-lines record stream")):
    """Per-cell rollup in sorted cell order"""
    records = await _read_upload(file)
    return [
        CellSummaryResponse(
            cell=str(s.cell),
            mean_q=s.mean_q,
            mean_cost=s.mean_cost,
            mean_latency_s=s.mean_latency_s,
            p90_latency_s=s.p90_latency_s,
            delegation_rate=s.delegation_rate,
            n_tasks=s.n_tasks,
        )
        for s in rollup(records)
    ]


@api_router.post("/build-c2-card", response_class=PlainTextResponse)
async def build_c2_card_endpoint(
    file: UploadFile = File(..., description="Stage-1 gzip JSON-lines record stream"),
    model: str = Form(..., description="Model whose card to render"),
):
    """
    Build the C2 card of one model

    Returns:
        The rendered markdown card with the tagger version in X-Tagger-Version
    """
    records = await _read_upload(file)
    try:
        cards: Dict[str, str] = {c.frontmatter.model: render_card(c) for c in build_all_c2_cards(records)}
    except CardBuildError as e:
        raise HTTPException(status_code=400, detail=str(e))
    if model not in cards:
        raise HTTPException(status_code=404, detail=f"No stage-1 skill statistics for model '{model}'")
    return PlainTextResponse(
        cards[model],
        media_type="text/markdown",
        headers={"X-Tagger-Version": DEFAULT_TAGGER_CONFIG.version},
    )


@api_router.post("/simulate")
async def simulate(request: SimulateRequest):
    """
    Generate a synthetic sweep

    Returns:
        StreamingResponse with the gzip JSON-lines record stream
    """
    policies = dict(DEFAULT_CONDITION_POLICIES)
    try:
        cfg = default_sim_config(seed=request.seed, n_tasks=request.tasks, benchmarks=request.benchmarks)
        records = simulate_sweep(
            cfg,
            [(c, policies[c]) for c in request.conditions],
            request.tasks,
            orchestrators=[p.name for p in cfg.pool][: request.orchestrators],
            benchmarks=request.benchmarks,
        )
    except SimulationError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return StreamingResponse(
        io.BytesIO(emit_records(records)),
        media_type="application/gzip",
        headers={
            "Content-Disposition": "attachment; filename=records.jsonl.gz",
            "X-Records": str(len(records)),
        },
    )


app.include_router(api_router)
