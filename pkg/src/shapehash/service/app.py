"""HTTP face of the pipeline: one endpoint per stage.

Data problems (bad files, missing stages, malformed formats) map to 400;
numerical breakdowns (divergence, zero vectors) map to 500 with a JSON body
naming the error kind either way.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import pipeline
from ..errors import DataError, NumericalError, ShapeHashError
from . import models


def create_app() -> FastAPI:
    from .. import __version__

    app = FastAPI(
        title="shapehash",
        version=__version__,
        description="Shape-descriptor hashing and Hamming retrieval pipeline",
    )

    @app.exception_handler(ShapeHashError)
    async def _shapehash_error(request: Request, exc: ShapeHashError) -> JSONResponse:
        if isinstance(exc, NumericalError):
            status, kind = 500, "numerical"
        elif isinstance(exc, DataError):
            status, kind = 400, "data"
        else:
            status, kind = 500, "internal"
        return JSONResponse(
            status_code=status,
            content={"detail": str(exc), "error_kind": kind},
        )

    @app.get("/health", response_model=models.HealthResponse)
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/pipeline/preprocess", response_model=models.PreprocessResponse)
    def preprocess(req: models.PreprocessRequest) -> dict:
        return pipeline.run_preprocess(
            Path(req.manifest), Path(req.workdir), req.n_sigma, req.max_iters
        )

    @app.post("/pipeline/build-bank", response_model=models.BuildBankResponse)
    def build_bank(req: models.BuildBankRequest) -> dict:
        return pipeline.run_build_bank(
            Path(req.workdir),
            req.cosfire,
            orientation_count=req.orientation_count,
            filters_per_class=req.filters_per_class,
            seed=req.seed,
        )

    @app.post("/pipeline/describe", response_model=models.DescribeResponse)
    def describe(req: models.DescribeRequest) -> dict:
        return pipeline.run_describe(Path(req.workdir), threads=req.threads)

    @app.post("/pipeline/train", response_model=models.TrainResponse)
    def train(req: models.TrainRequest) -> dict:
        return pipeline.run_train(
            Path(req.workdir), req.bits, req.train, req.loss, hidden=req.hidden
        )

    @app.post("/pipeline/grid", response_model=models.GridResponse)
    def grid(req: models.GridRequest) -> dict:
        return pipeline.run_grid(
            Path(req.workdir), req.bits, req.grid, req.train, hidden=req.hidden
        )

    @app.post("/pipeline/sweep-threshold", response_model=models.SweepResponse)
    def sweep(req: models.SweepRequest) -> dict:
        thresholds = tuple(req.thresholds) if req.thresholds is not None else None
        return pipeline.run_sweep(Path(req.workdir), req.k_eval, thresholds)

    @app.post("/pipeline/encode", response_model=models.EncodeResponse)
    def encode(req: models.EncodeRequest) -> dict:
        return pipeline.run_encode(Path(req.workdir), req.split, req.threshold)

    @app.post("/retrieval/query", response_model=models.QueryResponse)
    def query(req: models.QueryRequest) -> dict:
        return pipeline.run_query(
            Path(req.index),
            top_n=req.top_n,
            code_file=Path(req.code_file) if req.code_file else None,
            image=Path(req.image) if req.image else None,
            bank_path=Path(req.bank) if req.bank else None,
            model_path=Path(req.model) if req.model else None,
            threshold=req.threshold,
            n_sigma=req.n_sigma,
            max_iters=req.max_iters,
        )

    @app.post("/pipeline/evaluate", response_model=models.EvaluateResponse)
    def evaluate(req: models.EvaluateRequest) -> dict:
        return pipeline.run_evaluate(
            Path(req.workdir), Path(req.index), Path(req.queries), req.k_eval
        )

    @app.post("/pipeline/flops", response_model=models.FlopsResponse)
    def flops(req: models.FlopsRequest) -> dict:
        return pipeline.run_flops(
            layer_sizes=req.layer_sizes,
            batchnorm=req.batchnorm,
            activations=req.activations,
            bank_path=Path(req.bank) if req.bank else None,
            width=req.width,
            height=req.height,
            orientation_count=req.orientation_count,
            workdir=Path(req.workdir) if req.workdir else None,
        )

    return app
