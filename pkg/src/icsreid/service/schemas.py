"""Request and response models of the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class ManifestRowModel(BaseModel):
    image_ref: str
    camera_id: int = Field(ge=0)
    intra_label: int = Field(ge=0)


class TruthEntryModel(BaseModel):
    camera_id: int
    intra_label: int
    true_identity: int


class WorldSpecModel(BaseModel):
    true_identity_count: int = Field(ge=1)
    camera_count: int = Field(ge=1)
    cameras_per_identity: tuple[int, int] = (2, 4)
    feature_dim: int = Field(default=32, ge=2)
    camera_shift_magnitude: float = Field(default=0.0, ge=0.0)
    noise_sigma: float = Field(default=0.0, ge=0.0)
    seed: int = 0
    images_per_appearance: tuple[int, int] = (2, 4)


class SimulateRequest(BaseModel):
    spec: WorldSpecModel
    include_latents: bool = True


class SimulateResponse(BaseModel):
    rows: list[ManifestRowModel]
    camera_count: int
    per_camera_id_counts: list[int]
    accumulated_ids: int
    truth: list[TruthEntryModel]
    latents: dict[str, list[float]] | None = None


class CentroidEntryModel(BaseModel):
    camera_id: int = Field(ge=0)
    intra_label: int = Field(ge=0)
    centroid: list[float]


class AssociateRequest(BaseModel):
    entries: list[CentroidEntryModel]
    threshold: float = Field(gt=0.0)
    metric: str = "euclidean"


class PseudoLabelModel(BaseModel):
    camera_id: int
    intra_label: int
    global_id: int
    pseudo_label: int


class AssociationDiagnosticsModel(BaseModel):
    edge_count: int
    cluster_count: int
    component_size_histogram: dict[int, int]
    camera_violation_count: int


class AssociateResponse(BaseModel):
    edges: list[tuple[int, int]]
    pseudo_labels: list[PseudoLabelModel]
    diagnostics: AssociationDiagnosticsModel


class PromptTrainRequest(BaseModel):
    manifest_path: str
    latents_path: str
    output_path: str
    config: dict[str, str | int | float | bool] = Field(default_factory=dict)


class PromptTrainResponse(BaseModel):
    output_path: str
    epochs: int
    identity_count: int
    loss_history: list[float]


class TrainRequest(BaseModel):
    manifest_path: str
    latents_path: str
    prompt_bank_path: str
    checkpoint_path: str
    truth_path: str | None = None
    log_path: str | None = None
    report_dir: str | None = None
    config: dict[str, str | int | float | bool] = Field(default_factory=dict)


class TrainResponse(BaseModel):
    checkpoint_path: str
    epochs_run: int
    final_metrics: dict[str, float]
    cluster_count: int | None = None
    report_files: list[str] = Field(default_factory=list)


class EvaluateRequest(BaseModel):
    checkpoint_path: str
    manifest_path: str
    latents_path: str
    truth_path: str | None = None
    output_dir: str | None = None
    config: dict[str, str | int | float | bool] = Field(default_factory=dict)


class EvaluateResponse(BaseModel):
    metrics: dict[str, float]
    files: list[str] = Field(default_factory=list)
