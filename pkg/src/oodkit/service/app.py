"""FastAPI application wrapping the pipeline.

Error contract: validation problems and bad user input (wrong paths,
malformed datasets, unfittable configs) come back as 400/422 so clients can
distinguish them from internal failures (500).
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from oodkit import __version__
from oodkit.errors import ConfigError, DataError, FitError, FormatError, OodkitError
from oodkit.pipeline import cmd_eval, cmd_fit, cmd_sweep
from oodkit.service.schemas import (
    EvalRequest,
    EvalResponse,
    FitRequest,
    FitResponse,
    HealthResponse,
    SweepRequest,
    SweepResponse,
    SynthRequest,
    SynthResponse,
)
from oodkit.synth import generate, generate_eul_scenes

_USER_ERRORS = (ConfigError, FormatError, DataError, FitError)


def create_app() -> FastAPI:
    app = FastAPI(title="oodkit", version=__version__)

    @app.exception_handler(OodkitError)
    async def _domain_error(request: Request, exc: OodkitError) -> JSONResponse:
        status = 400 if isinstance(exc, _USER_ERRORS) else 500
        return JSONResponse(status_code=status, content={"detail": str(exc)})

    @app.exception_handler(FileNotFoundError)
    async def _missing_file(request: Request, exc: FileNotFoundError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/fit", response_model=FitResponse)
    def fit(req: FitRequest) -> FitResponse:
        return FitResponse(**cmd_fit(req.config))

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(req: EvalRequest) -> EvalResponse:
        return EvalResponse(**cmd_eval(req.config))

    @app.post("/sweep", response_model=SweepResponse)
    def sweep(req: SweepRequest) -> SweepResponse:
        return SweepResponse(**cmd_sweep(req.config))

    @app.post("/synth", response_model=SynthResponse)
    def synth(req: SynthRequest) -> SynthResponse:
        cfg = req.config.to_config()
        if req.config.kind == "objects":
            manifest = generate(cfg, req.out)
        else:
            manifest = generate_eul_scenes(cfg, req.out)
        return SynthResponse(
            manifest_path=str(Path(req.out) / "manifest.json"),
            name=manifest.name,
            kind=req.config.kind,
            num_images=len(manifest.images),
        )

    return app


app = create_app()
