"""HTTP service exposing the core pipeline.

Compute-only endpoints (simulate, associate) exchange data inline; the
long-form endpoints (prompt-train, train, evaluate) read and write files on
the service host's filesystem, which is also the local filesystem when the
CLI drives the app in-process.
"""

from __future__ import annotations

from importlib.metadata import version as package_version

import numpy as np
import torch
from fastapi import FastAPI, HTTPException

from ..config import RunConfig
from ..data import read_manifest
from ..encoders import ToyTextEncoder, build_image_encoder
from ..evaluation import RetrievalProtocol, compute_ari, emit_report, retrieval_metrics
from ..inter import association_diagnostics, build_association_graph, connected_components
from ..prompts import load_prompt_bank, run_prompt_stage, save_prompt_bank
from ..synthetic import WorldSpec, generate_world, load_latents, load_truth
from ..trainer import load_checkpoint, run_training, save_checkpoint
from . import schemas


def create_app() -> FastAPI:
    app = FastAPI(title="icsreid", description="camera-agnostic re-id training service")

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(version=package_version("icsreid"))

    @app.post("/simulate", response_model=schemas.SimulateResponse)
    def simulate(request: schemas.SimulateRequest) -> schemas.SimulateResponse:
        try:
            spec = WorldSpec(**request.spec.model_dump())
            world = generate_world(spec)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        rows = [
            schemas.ManifestRowModel(
                image_ref=s.image_ref, camera_id=s.camera_id, intra_label=s.intra_label
            )
            for s in world.manifest.samples
        ]
        truth = [
            schemas.TruthEntryModel(camera_id=cam, intra_label=label, true_identity=identity)
            for (cam, label), identity in sorted(world.truth.entries.items())
        ]
        latents = None
        if request.include_latents:
            latents = {ref: vec.tolist() for ref, vec in world.latents.items()}
        return schemas.SimulateResponse(
            rows=rows,
            camera_count=world.manifest.camera_count,
            per_camera_id_counts=list(world.manifest.per_camera_id_counts),
            accumulated_ids=world.manifest.num_global_ids,
            truth=truth,
            latents=latents,
        )

    @app.post("/associate", response_model=schemas.AssociateResponse)
    def associate(request: schemas.AssociateRequest) -> schemas.AssociateResponse:
        if not request.entries:
            raise HTTPException(status_code=400, detail="no centroid entries given")
        entries = sorted(request.entries, key=lambda e: (e.camera_id, e.intra_label))
        centroids = np.array([e.centroid for e in entries], dtype=np.float64)
        camera_of = np.array([e.camera_id for e in entries], dtype=np.int64)
        try:
            graph = build_association_graph(
                centroids, camera_of, threshold=request.threshold, metric=request.metric
            )
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        assignment = connected_components(graph)
        diagnostics = association_diagnostics(graph, assignment)
        pseudo_labels = [
            schemas.PseudoLabelModel(
                camera_id=e.camera_id,
                intra_label=e.intra_label,
                global_id=gid,
                pseudo_label=int(assignment.labels[gid]),
            )
            for gid, e in enumerate(entries)
        ]
        return schemas.AssociateResponse(
            edges=sorted(graph.edges),
            pseudo_labels=pseudo_labels,
            diagnostics=schemas.AssociationDiagnosticsModel(**diagnostics),
        )

    @app.post("/prompt-train", response_model=schemas.PromptTrainResponse)
    def prompt_train(request: schemas.PromptTrainRequest) -> schemas.PromptTrainResponse:
        try:
            config = RunConfig(request.config)
            manifest = read_manifest(request.manifest_path)
            latents = load_latents(request.latents_path)
            encoder = build_image_encoder(config, latents)
            bank, history = run_prompt_stage(manifest, encoder, ToyTextEncoder(), config)
        except (ValueError, KeyError, FileNotFoundError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        save_prompt_bank(bank, request.output_path)
        return schemas.PromptTrainResponse(
            output_path=request.output_path,
            epochs=len(history),
            identity_count=bank.num_ids,
            loss_history=history,
        )

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(request: schemas.TrainRequest) -> schemas.TrainResponse:
        try:
            config = RunConfig(request.config)
            manifest = read_manifest(request.manifest_path)
            latents = load_latents(request.latents_path)
            prompt_bank = load_prompt_bank(request.prompt_bank_path)
            truth = load_truth(request.truth_path) if request.truth_path else None
            result = run_training(
                manifest,
                prompt_bank,
                config,
                latents=latents,
                truth=truth,
                log_path=request.log_path,
            )
        except (ValueError, KeyError, FileNotFoundError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        save_checkpoint(result, request.checkpoint_path)

        final_metrics: dict[str, float] = {}
        for key in ("loss_gid", "loss_backbone"):
            if key in result.logs[-1]:
                final_metrics[f"final_{key}"] = float(result.logs[-1][key])
        if truth is not None:
            features = result.final_features.numpy()
            protocol = RetrievalProtocol(
                query_identities=truth.labels_for_samples(manifest),
                query_cameras=manifest.camera_ids(),
                gallery_identities=truth.labels_for_samples(manifest),
                gallery_cameras=manifest.camera_ids(),
                filter_same_camera=config["eval.filter_same_camera"],
                self_retrieval=True,
            )
            ks = tuple(config.int_list("eval.ranks"))
            final_metrics.update(retrieval_metrics(features, protocol, ks=ks))
            if result.assignment is not None:
                final_metrics["ari"] = compute_ari(
                    result.assignment.labels, truth.labels_for_global_ids(manifest)
                )
        report_files: list[str] = []
        if request.report_dir:
            report_files = [
                str(p) for p in emit_report(result.logs, request.report_dir, final_metrics)
            ]
        return schemas.TrainResponse(
            checkpoint_path=request.checkpoint_path,
            epochs_run=len(result.logs),
            final_metrics=final_metrics,
            cluster_count=result.assignment.cluster_count if result.assignment else None,
            report_files=report_files,
        )

    @app.post("/evaluate", response_model=schemas.EvaluateResponse)
    def evaluate(request: schemas.EvaluateRequest) -> schemas.EvaluateResponse:
        try:
            manifest = read_manifest(request.manifest_path)
            latents = load_latents(request.latents_path)
            state = load_checkpoint(request.checkpoint_path, latents=latents)
            config = state["config"].with_overrides(request.config)
        except (ValueError, KeyError, FileNotFoundError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

        encoder = state["encoder"]
        with torch.no_grad():
            features = encoder.encode_manifest(manifest).numpy()
        if request.truth_path:
            identities = load_truth(request.truth_path).labels_for_samples(manifest)
        else:
            identities = manifest.global_ids()
        protocol = RetrievalProtocol(
            query_identities=identities,
            query_cameras=manifest.camera_ids(),
            gallery_identities=identities,
            gallery_cameras=manifest.camera_ids(),
            filter_same_camera=config["eval.filter_same_camera"],
            self_retrieval=True,
        )
        ks = tuple(config.int_list("eval.ranks"))
        metrics = retrieval_metrics(features, protocol, ks=ks)
        if request.truth_path and state["assignment"] is not None:
            metrics["ari"] = compute_ari(
                state["assignment"].labels,
                load_truth(request.truth_path).labels_for_global_ids(manifest),
            )
        files: list[str] = []
        if request.output_dir:
            files = [str(p) for p in emit_report([], request.output_dir, metrics)]
        return schemas.EvaluateResponse(metrics=metrics, files=files)

    return app


app = create_app()
