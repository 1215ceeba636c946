"""Declarative run configuration.

A run is described by one JSON document (CLI flags override individual
fields). The models here validate that document and convert it into the
plain config dataclasses the core modules take.
"""

from __future__ import annotations

from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, model_validator

from oodkit.clustering import ClusterSpec
from oodkit.errors import ConfigError
from oodkit.eul import EulConfig
from oodkit.fmap import FitConfig
from oodkit.logits_ood import LogitsConfig
from oodkit.roi_align import RoiAlignConfig
from oodkit.sdr import SdrConfig
from oodkit.synth import EulSceneConfig, SynthConfig

BaseMethod = Literal["fmap", "msp", "energy", "odin"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ClusterModel(StrictModel):
    method: Literal["one", "kmeans", "kmeans_forced", "density"] = "one"
    k_min: int = Field(2, ge=2)
    k_max: int = Field(10, ge=2)
    forced_k: int = Field(10, ge=2)
    min_cluster_size_grid: list[int] = Field(default_factory=lambda: [5, 10, 15])
    max_iters: int = Field(300, ge=1)
    tol: float = Field(1e-6, gt=0.0)

    @model_validator(mode="after")
    def _check(self) -> "ClusterModel":
        if self.k_max < self.k_min:
            raise ValueError("k_max must be >= k_min")
        if not self.min_cluster_size_grid or any(m < 2 for m in self.min_cluster_size_grid):
            raise ValueError("min_cluster_size_grid needs entries >= 2")
        return self

    def to_spec(self, seed: int) -> ClusterSpec:
        return ClusterSpec(
            method=self.method,
            k_grid=tuple(range(self.k_min, self.k_max + 1)),
            forced_k=self.forced_k,
            min_cluster_size_grid=tuple(self.min_cluster_size_grid),
            seed=seed,
            max_iters=self.max_iters,
            tol=self.tol,
        )


class RoiModel(StrictModel):
    sampling_ratio: int = Field(2, ge=1)
    aligned: bool = True

    def to_config(self) -> RoiAlignConfig:
        return RoiAlignConfig(sampling_ratio=self.sampling_ratio, aligned=self.aligned)


class SdrModel(StrictModel):
    out_dim: int = Field(32, ge=1)
    hidden_dims: list[int] = Field(default_factory=lambda: [128, 128])
    k_neighbors: int = Field(15, ge=1)
    margin: float = Field(1.0, gt=0.0)
    learning_rate: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(64, ge=1)
    max_epochs: int = Field(100, ge=1)
    patience: int = Field(5, ge=0)
    val_fraction: float = Field(0.1, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check(self) -> "SdrModel":
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden_dims must be positive")
        return self

    def to_config(self, seed: int) -> SdrConfig:
        return SdrConfig(
            out_dim=self.out_dim,
            hidden_dims=tuple(self.hidden_dims),
            k_neighbors=self.k_neighbors,
            margin=self.margin,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            val_fraction=self.val_fraction,
            seed=seed,
        )


class EulModel(StrictModel):
    depth: int = Field(2, ge=1)
    connectivity: Literal[4, 8] = 8
    min_region_pixels: int = Field(4, ge=1)
    suppress_iou: float = Field(0.5, gt=0.0, le=1.0)
    top_k: int = Field(5, ge=1)

    def to_config(self) -> EulConfig:
        return EulConfig(
            depth=self.depth,
            connectivity=self.connectivity,
            min_region_pixels=self.min_region_pixels,
            suppress_iou=self.suppress_iou,
            top_k=self.top_k,
        )


class LogitsModel(StrictModel):
    temperature: float = Field(1000.0, gt=0.0)
    granularity: Literal["global", "per_class"] = "global"


class MethodModel(StrictModel):
    kind: Literal["fmap", "msp", "energy", "odin", "fusion"] = "fmap"
    strategy: Literal["and", "or", "score"] | None = None
    a: BaseMethod | None = None
    b: BaseMethod | None = None

    @model_validator(mode="after")
    def _check(self) -> "MethodModel":
        if self.kind == "fusion":
            if self.strategy is None or self.a is None or self.b is None:
                raise ValueError("fusion needs strategy, a and b")
            if self.a == self.b:
                raise ValueError("fusion sides must differ")
        elif self.strategy is not None or self.a is not None or self.b is not None:
            raise ValueError("strategy/a/b only apply to kind=fusion")
        return self

    @property
    def label(self) -> str:
        """CSV-friendly method name."""
        if self.kind == "fusion":
            return f"{self.a}+{self.b}"
        return self.kind

    def base_methods(self) -> list[str]:
        return [self.a, self.b] if self.kind == "fusion" else [self.kind]


class SweepEntryModel(StrictModel):
    """Per-entry overrides; unset fields inherit the top-level run config."""

    name: str | None = None
    method: MethodModel | None = None
    distance: Literal["l1", "l2", "cosine"] | None = None
    cluster: ClusterModel | None = None
    sdr: SdrModel | bool | None = None
    eul: EulModel | bool | None = None
    logits: LogitsModel | None = None


class RunConfigModel(StrictModel):
    name: str = "run"
    seed: int = 0
    threads: int = Field(1, ge=1)
    out_dir: str = "out"
    fit_manifest: str | None = None
    eval_manifests: list[str] = Field(default_factory=list)
    bank_path: str | None = None  # defaults to <out_dir>/bank.json
    confidence_thresholds: list[float] = Field(
        default_factory=lambda: [0.001, 0.005, 0.01, 0.05, 0.1, 0.15]
    )
    target_tpr: float = Field(0.95, gt=0.0, lt=1.0)
    iou_match_threshold: float = Field(0.5, gt=0.0, le=1.0)
    wi_recall_level: float = Field(0.8, gt=0.0, le=1.0)
    min_samples_per_cell: int = Field(20, ge=1)
    distance: Literal["l1", "l2", "cosine"] = "l2"
    cluster: ClusterModel = Field(default_factory=ClusterModel)
    roi: RoiModel = Field(default_factory=RoiModel)
    sdr: SdrModel | None = None
    eul: EulModel | None = None
    logits: LogitsModel = Field(default_factory=LogitsModel)
    method: MethodModel = Field(default_factory=MethodModel)
    runs: list[SweepEntryModel] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self) -> "RunConfigModel":
        ts = self.confidence_thresholds
        if not ts:
            raise ValueError("confidence_thresholds must not be empty")
        if any(not 0.0 < t < 1.0 for t in ts):
            raise ValueError("confidence thresholds must lie in (0, 1)")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("confidence thresholds must be strictly ascending")
        return self

    def fit_config(self) -> FitConfig:
        return FitConfig(
            distance=self.distance,
            target_tpr=self.target_tpr,
            iou_match_threshold=self.iou_match_threshold,
            cluster=self.cluster.to_spec(self.seed),
            roi=self.roi.to_config(),
            min_samples_per_cell=self.min_samples_per_cell,
            sdr=self.sdr.to_config(self.seed) if self.sdr else None,
        )

    def logits_config(self, method: str) -> LogitsConfig:
        return LogitsConfig(
            method=method,
            temperature=self.logits.temperature,
            granularity=self.logits.granularity,
            target_tpr=self.target_tpr,
            iou_match_threshold=self.iou_match_threshold,
        )


def apply_entry(base: RunConfigModel, entry: SweepEntryModel) -> RunConfigModel:
    """Resolve one sweep entry against the shared run config."""
    update: dict = {"runs": []}
    if entry.method is not None:
        update["method"] = entry.method
    if entry.distance is not None:
        update["distance"] = entry.distance
    if entry.cluster is not None:
        update["cluster"] = entry.cluster
    if entry.logits is not None:
        update["logits"] = entry.logits
    for field_name in ("sdr", "eul"):
        value = getattr(entry, field_name)
        if value is None:
            continue
        if value is True:
            model = {"sdr": SdrModel, "eul": EulModel}[field_name]
            update[field_name] = getattr(base, field_name) or model()
        elif value is False:
            update[field_name] = None
        else:
            update[field_name] = value
    if entry.name is not None:
        update["name"] = entry.name
    return base.model_copy(update=update)


class SynthObjectsModel(StrictModel):
    kind: Literal["objects"] = "objects"
    name: str = "synth"
    num_classes: int = Field(5, ge=2)
    stride_count: int = Field(3, ge=1)
    channels: list[int] = Field(default_factory=lambda: [8, 12, 16])
    downsample_factors: list[int] = Field(default_factory=lambda: [8, 16, 32])
    image_width: int = Field(128, ge=1)
    image_height: int = Field(128, ge=1)
    num_images: int = Field(50, ge=1)
    objects_per_image: int = Field(4, ge=1)
    unknown_fraction: float = Field(0.0, ge=0.0, le=1.0)
    id_sigma: float = Field(0.25, ge=0.0)
    ood_shift: float = Field(8.0, ge=0.0)
    mean_scale: float = 3.0
    clusters_per_cell: int = Field(1, ge=1)
    label_noise: float = Field(0.0, ge=0.0, le=1.0)
    logit_base: float = 0.0
    logit_margin: float = 4.0
    logit_noise: float = Field(0.5, ge=0.0)
    confidence_floor: float = Field(0.05, ge=0.0, lt=1.0)
    seed: int = 0
    image_seed: int = 0

    def to_config(self) -> SynthConfig:
        data = self.model_dump(exclude={"kind"})
        data["channels"] = tuple(self.channels)
        data["downsample_factors"] = tuple(self.downsample_factors)
        return SynthConfig(**data)


class SynthScenesModel(StrictModel):
    kind: Literal["eul-scenes"]
    name: str = "eul-scenes"
    num_classes: int = Field(5, ge=2)
    stride_count: int = Field(3, ge=1)
    channels: list[int] = Field(default_factory=lambda: [8, 12, 16])
    downsample_factors: list[int] = Field(default_factory=lambda: [8, 16, 32])
    image_width: int = Field(128, ge=1)
    image_height: int = Field(128, ge=1)
    num_scenes: int = Field(100, ge=1)
    blobs_per_scene: int = Field(1, ge=0)
    amplitude: float = Field(2.0, gt=0.0)
    seed: int = 0

    def to_config(self) -> EulSceneConfig:
        data = self.model_dump(exclude={"kind"})
        data["channels"] = tuple(self.channels)
        data["downsample_factors"] = tuple(self.downsample_factors)
        return EulSceneConfig(**data)


SynthJobModel = Annotated[
    Union[SynthObjectsModel, SynthScenesModel], Field(discriminator="kind")
]

_SYNTH_ADAPTER: TypeAdapter = TypeAdapter(SynthJobModel)


def parse_run_config(doc: dict) -> RunConfigModel:
    try:
        return RunConfigModel.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_summarize(exc)) from exc


def parse_synth_config(doc: dict) -> SynthObjectsModel | SynthScenesModel:
    try:
        return _SYNTH_ADAPTER.validate_python(doc)
    except ValidationError as exc:
        raise ConfigError(_summarize(exc)) from exc


def _summarize(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "invalid config: " + "; ".join(parts)
