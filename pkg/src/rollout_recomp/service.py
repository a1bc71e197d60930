"""HTTP service over the trainer.

Handlers are plain functions from request model to response model so the
CLI can call them in-process or through :class:`RemoteBackend`.
"""

from __future__ import annotations

from typing import Any, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field, ValidationError

from . import __version__
from .checks import CHECKS, run_checks
from .config import RunConfig
from .core import StepMetrics
from .trainer import RunReport, compare, response_record, sweep_alpha, train


class RunRequest(BaseModel):
    config: dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    include_buffer: bool = False


class RunResponse(BaseModel):
    config: dict[str, Any]
    metrics: list[dict[str, Any]]
    summary: dict[str, Any]
    buffer: Optional[list[dict[str, Any]]] = None

    def report(self) -> RunReport:
        return RunReport(self.config, [StepMetrics.from_dict(m) for m in self.metrics],
                         self.summary)


class CompareRequest(BaseModel):
    config_a: dict[str, Any]
    config_b: dict[str, Any]
    seeds: list[int] = Field(min_length=1)
    metric: str = "final_mean_cost"


class SweepRequest(BaseModel):
    config: dict[str, Any] = Field(default_factory=dict)
    alphas: list[float] = Field(min_length=1)
    seeds: list[int] = Field(min_length=1)


class SweepResponse(BaseModel):
    rows: list[dict[str, Any]]


class CheckOut(BaseModel):
    name: str
    passed: bool
    detail: str
    seconds: float


class VerifyRequest(BaseModel):
    checks: Optional[list[str]] = None


class VerifyResponse(BaseModel):
    passed: bool
    checks: list[CheckOut]


def _config(data: dict, **overrides) -> RunConfig:
    data = {**data, **{k: v for k, v in overrides.items() if v is not None}}
    return RunConfig.model_validate(data)


def handle_run(req: RunRequest) -> RunResponse:
    report = train(_config(req.config, seed=req.seed))
    buffer = [response_record(r) for r in report.buffer] if req.include_buffer else None
    return RunResponse(config=report.config, metrics=[m.to_dict() for m in report.metrics],
                       summary=report.summary, buffer=buffer)


def handle_compare(req: CompareRequest) -> dict:
    return compare(_config(req.config_a), _config(req.config_b), req.seeds, req.metric)


def handle_sweep(req: SweepRequest) -> SweepResponse:
    return SweepResponse(rows=sweep_alpha(_config(req.config), req.alphas, req.seeds))


def handle_verify(req: VerifyRequest) -> VerifyResponse:
    unknown = set(req.checks or ()) - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown checks: {', '.join(sorted(unknown))}")
    results = [CheckOut(name=r.name, passed=r.passed, detail=r.detail, seconds=r.seconds)
               for r in run_checks(req.checks)]
    return VerifyResponse(passed=all(c.passed for c in results), checks=results)


app = FastAPI(title="rollout-recomp", version=__version__)


def _call(handler, req):
    try:
        return handler(req)
    except (ValueError, ValidationError) as e:
        raise HTTPException(status_code=422, detail=str(e)) from e


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/run", response_model=RunResponse)
def run_endpoint(req: RunRequest):
    return _call(handle_run, req)


@app.post("/compare")
def compare_endpoint(req: CompareRequest):
    return _call(handle_compare, req)


@app.post("/sweep-alpha", response_model=SweepResponse)
def sweep_endpoint(req: SweepRequest):
    return _call(handle_sweep, req)


@app.post("/verify", response_model=VerifyResponse)
def verify_endpoint(req: VerifyRequest):
    return _call(handle_verify, req)


class LocalBackend:
    """Runs handlers in this process."""

    def run(self, req: RunRequest) -> RunResponse:
        return handle_run(req)

    def compare(self, req: CompareRequest) -> dict:
        return handle_compare(req)

    def sweep(self, req: SweepRequest) -> SweepResponse:
        return handle_sweep(req)

    def verify(self, req: VerifyRequest) -> VerifyResponse:
        return handle_verify(req)


class RemoteBackend:
    """Same interface as :class:`LocalBackend`, over HTTP."""

    def __init__(self, base_url: str, timeout: float = 3600.0, client=None):
        import httpx

        self.client = client or httpx.Client(base_url=base_url, timeout=timeout)

    def _post(self, path: str, req: BaseModel) -> dict:
        r = self.client.post(path, json=req.model_dump(mode="json"))
        if r.status_code >= 400:
            raise RuntimeError(f"{path}: HTTP {r.status_code}: {r.text}")
        return r.json()

    def run(self, req: RunRequest) -> RunResponse:
        return RunResponse.model_validate(self._post("/run", req))

    def compare(self, req: CompareRequest) -> dict:
        return self._post("/compare", req)

    def sweep(self, req: SweepRequest) -> SweepResponse:
        return SweepResponse.model_validate(self._post("/sweep-alpha", req))

    def verify(self, req: VerifyRequest) -> VerifyResponse:
        return VerifyResponse.model_validate(self._post("/verify", req))
