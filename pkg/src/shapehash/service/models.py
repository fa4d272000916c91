"""Request and response schemas for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field

from ..config import GridSpec
from ..cosfire import CosfireHyperparams
from ..hashnet import DshLossParams, TrainConfig


class PreprocessRequest(BaseModel):
    manifest: str
    workdir: str
    n_sigma: float = 3.0
    max_iters: int = 100


class PreprocessResponse(BaseModel):
    out_manifest: str
    images_dir: str
    counts: dict[str, int]
    n_sigma: float
    max_iters: int
    report: str


class BuildBankRequest(BaseModel):
    workdir: str
    cosfire: CosfireHyperparams = Field(default_factory=CosfireHyperparams)
    orientation_count: int = 12
    filters_per_class: int = 2
    seed: int = 0


class BuildBankResponse(BaseModel):
    bank: str
    n_filters: int
    classes: list[str]
    tuples_per_filter: list[int]
    prototypes: list[str]
    orientation_count: int
    seed: int
    report: str


class DescribeRequest(BaseModel):
    workdir: str
    threads: int = 1


class DescribeResponse(BaseModel):
    files: dict[str, str]
    rows: dict[str, int]
    descriptor_length: int
    threads: int
    report: str


class TrainRequest(BaseModel):
    workdir: str
    bits: int = 72
    train: TrainConfig = Field(default_factory=TrainConfig)
    loss: DshLossParams = Field(default_factory=DshLossParams)
    hidden: tuple[int, int] = (300, 200)


class EpochStats(BaseModel):
    epoch: int
    train_loss: float
    val_map: float


class TrainResponse(BaseModel):
    model: str
    bits: int
    epochs_run: int
    best_epoch: int
    best_val_map: float
    final_train_loss: float
    history: list[EpochStats]
    report: str


class GridRequest(BaseModel):
    workdir: str
    bits: int = 72
    grid: GridSpec = Field(default_factory=GridSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    hidden: tuple[int, int] = (300, 200)


class GridResponse(BaseModel):
    csv: str
    bits: int
    combinations: int
    best: dict
    report: str


class SweepRequest(BaseModel):
    workdir: str
    k_eval: int = 100
    thresholds: list[float] | None = None


class SweepPointModel(BaseModel):
    threshold: float
    map_at_k: float


class SweepResponse(BaseModel):
    best_threshold: float
    k_eval: int
    curve: list[SweepPointModel]
    curve_csv: str
    report: str


class EncodeRequest(BaseModel):
    workdir: str
    split: str
    threshold: float = 0.0


class EncodeResponse(BaseModel):
    codes: str
    split: str
    count: int
    bits: int
    threshold: float
    report: str


class QueryRequest(BaseModel):
    index: str
    top_n: int = 10
    code_file: str | None = None
    image: str | None = None
    bank: str | None = None
    model: str | None = None
    threshold: float = 0.0
    n_sigma: float = 3.0
    max_iters: int = 100


class QueryHitModel(BaseModel):
    id: int
    label: str
    distance: int


class QueryResponse(BaseModel):
    index: str
    top_n: int
    results: list[QueryHitModel]


class EvaluateRequest(BaseModel):
    workdir: str
    index: str
    queries: str
    k_eval: int = 100


class ClassMapEntry(BaseModel):
    relevant: int
    queries: int
    map: float


class MatrixModel(BaseModel):
    classes: list[str]
    means: list[list[float]]
    counts: list[list[int]]


class MapAtRModel(BaseModel):
    per_class: dict[str, ClassMapEntry]
    average: float


class EvaluateResponse(BaseModel):
    index: str
    queries: str
    k_eval: int
    map_at_k: float
    map_at_r: MapAtRModel
    map_at_r_csv: str
    query_set_matrix: MatrixModel
    query_set_separability: float
    cross_matrix: MatrixModel
    cross_separability: float
    report: str


class FlopsRequest(BaseModel):
    layer_sizes: list[int] | None = None
    batchnorm: list[bool] | None = None
    activations: list[bool] | None = None
    bank: str | None = None
    width: int = 150
    height: int = 150
    orientation_count: int = 12
    workdir: str | None = None


class FlopsComponentModel(BaseModel):
    name: str
    flops: int


class DescriptorEstimateModel(BaseModel):
    bank: str
    width: int
    height: int
    orientation_count: int
    flops: int


class FlopsResponse(BaseModel):
    layer_sizes: list[int]
    components: list[FlopsComponentModel]
    network_total: int
    descriptor_stage_reference: int
    combined_reference: int
    descriptor_stage_estimate: DescriptorEstimateModel | None = None
    report: str | None = None


class HealthResponse(BaseModel):
    status: str
    version: str
