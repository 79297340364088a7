"""Staged training loop: per-camera learning, association, adversarial phase.

Epochs are 1-indexed. Epochs up to ``e_intra`` run the per-camera losses
against the hybrid memories; afterwards every epoch starts by re-running the
cross-camera association from freshly encoded features and rebuilding the
prototype memory, pseudo-labels and positive sets from scratch. From epoch
``e_adv`` the multi-positive adversarial loss joins in.

Every iteration takes two optimizer steps with disjoint gradient flows: the
classifier loss (detached features) updates only the classifier, then the
remaining active losses (detached banks, detached classifier rows) update
only the backbone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .adversarial import GlobalClassifier, build_positive_sets, loss_gid, loss_ical
from .config import RunConfig
from .contrast import l2_normalize, parameter_checksum, tensor_checksum
from .data import DatasetManifest, sample_pk_batch
from .encoders import build_image_encoder
from .evaluation import compute_ari
from .inter import (
    ClusterAssignment,
    InterMemory,
    association_diagnostics,
    build_association_graph,
    cluster_text_features,
    connected_components,
    init_inter_memory,
    loss_i2tce_inter,
    loss_ipcl,
)
from .intra import (
    HybridCameraMemory,
    init_memories,
    loss_i2tce_intra,
    loss_icdl,
    sample_instance_keys,
)
from .prompts import PromptBank
from .synthetic import TruthTable

LOSS_INTRA = "intra"
LOSS_INTER = "inter"
LOSS_GID = "gid"
LOSS_ICAL = "ical"


@dataclass(frozen=True)
class TrainSchedule:
    """Stage boundaries of the staged objective.

    ``total_epochs`` may equal ``e_intra`` (degenerate run with no
    cross-camera phase) and ``e_adv`` may exceed ``total_epochs`` (the
    adversarial phase simply never activates).
    """

    total_epochs: int = 80
    warmup_epochs: int = 10
    e_intra: int = 5
    e_adv: int = 40
    association_period: int = 1

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")
        if not 0 <= self.e_intra < self.e_adv:
            raise ValueError("stage boundaries must satisfy 0 <= e_intra < e_adv")
        if self.association_period < 1:
            raise ValueError("association_period must be at least 1")


def active_losses(epoch: int, schedule: TrainSchedule) -> frozenset[str]:
    """Active loss set of a 1-indexed epoch, following the staged objective."""
    if epoch < 1:
        raise ValueError("epochs are 1-indexed")
    if epoch <= schedule.e_intra:
        return frozenset({LOSS_INTRA, LOSS_GID})
    if epoch >= schedule.e_adv:
        return frozenset({LOSS_INTER, LOSS_GID, LOSS_ICAL})
    return frozenset({LOSS_INTER, LOSS_GID})


@dataclass(frozen=True)
class StageState:
    epoch: int
    active: frozenset[str]
    cluster_count: int | None

    def __post_init__(self):
        if LOSS_INTRA in self.active and self.cluster_count is not None:
            raise ValueError("inter-camera state must not exist during intra epochs")


def learning_rate_for_epoch(epoch: int, config: RunConfig, schedule: TrainSchedule) -> float:
    base = config["train.lr"]
    warmup = schedule.warmup_epochs
    if warmup > 0 and epoch <= warmup:
        return base * epoch / warmup
    decay = config["train.lr_decay"]
    if decay == "step":
        passed = sum(1 for m in config.int_list("train.lr_milestones") if epoch >= m)
        return base * config["train.lr_gamma"] ** passed
    if decay == "cosine":
        span = max(schedule.total_epochs - warmup, 1)
        progress = min(max(epoch - warmup, 0), span)
        return base * 0.5 * (1.0 + math.cos(math.pi * progress / span))
    raise ValueError(f"unknown train.lr_decay {decay!r}")


def global_id_centroids(features: Tensor, global_ids: np.ndarray, num_global_ids: int) -> Tensor:
    """Unit-normalized mean feature per accumulated id, ordered by global id."""
    gids = torch.from_numpy(global_ids)
    rows = []
    for gid in range(num_global_ids):
        members = features[gids == gid]
        if members.shape[0] == 0:
            raise ValueError(f"global id {gid} has no samples")
        rows.append(l2_normalize(members.mean(dim=0)))
    return torch.stack(rows)


def global_camera_map(manifest: DatasetManifest) -> np.ndarray:
    return np.array(
        [manifest.label_of_global(g)[0] for g in range(manifest.num_global_ids)], dtype=np.int64
    )


@dataclass
class TrainResult:
    encoder: torch.nn.Module
    classifier: GlobalClassifier
    logs: list[dict]
    intra_memories: list[HybridCameraMemory]
    inter_memory: InterMemory | None
    assignment: ClusterAssignment | None
    schedule: TrainSchedule
    config: RunConfig
    final_features: Tensor = field(repr=False, default=None)


class _EpochAccumulator:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}

    def add(self, key: str, value: float):
        self.sums[key] = self.sums.get(key, 0.0) + value
        self.counts[key] = self.counts.get(key, 0) + 1

    def means(self) -> dict[str, float]:
        return {key: self.sums[key] / self.counts[key] for key in self.sums}


def run_training(
    manifest: DatasetManifest,
    prompt_bank: PromptBank,
    config: RunConfig,
    latents: dict[str, np.ndarray] | None = None,
    encoder: torch.nn.Module | None = None,
    truth: TruthTable | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Run the staged training loop and return the trained state plus logs.

    ``truth`` (synthetic runs only) adds association-quality scores to the
    logs; it never influences training. A non-finite loss aborts with the
    offending epoch and iteration.
    """
    schedule = TrainSchedule(
        total_epochs=config["train.total_epochs"],
        warmup_epochs=config["train.warmup_epochs"],
        e_intra=config["train.e_intra"],
        e_adv=config["adv.start_epoch"],
        association_period=config["train.association_period"],
    )
    torch.manual_seed(config["seed"])
    rng = np.random.default_rng(config["seed"])

    if encoder is None:
        encoder = build_image_encoder(config, latents)
    if prompt_bank.num_ids != manifest.num_global_ids:
        raise ValueError("prompt bank does not cover the manifest's accumulated ids")

    global_ids = manifest.global_ids()
    camera_ids = manifest.camera_ids()
    intra_labels = manifest.intra_labels()
    camera_of_global = global_camera_map(manifest)
    instance_keys = sample_instance_keys(manifest)
    refs = [s.image_ref for s in manifest.samples]
    num_global = manifest.num_global_ids

    with torch.no_grad():
        initial_features = encoder.encode_manifest(manifest)
    memories = init_memories(
        manifest,
        encoder,
        alpha=config["intra.alpha"],
        tau=config["intra.tau"],
        features=initial_features,
    )
    classifier = GlobalClassifier.from_centroids(
        torch.cat([m.centroids for m in memories]), tau=config["adv.tau"]
    )

    text_per_id = prompt_bank.cached_text_features()
    camera_offsets = np.concatenate([[0], np.cumsum(manifest.per_camera_id_counts)[:-1]])
    camera_texts = [
        text_per_id[int(camera_offsets[c]) : int(camera_offsets[c]) + k]
        for c, k in enumerate(manifest.per_camera_id_counts)
    ]

    base_lr = config["train.lr"]
    opt_backbone = torch.optim.Adam(encoder.parameters(), lr=base_lr)
    opt_classifier = torch.optim.Adam(classifier.parameters(), lr=base_lr)

    p = config["train.ids_per_batch"]
    k = config["train.instances_per_id"]
    p = min(p, len(manifest.groups))
    iterations = max(1, math.ceil(len(manifest) / (p * k)))

    use_text = config["ablation.text_alignment"]
    use_adversarial = config["ablation.adversarial"]
    verify_partition = config["debug.verify_partition"]

    assignment: ClusterAssignment | None = None
    inter_memory: InterMemory | None = None
    cluster_texts: Tensor | None = None
    positive_sets = None
    sample_pseudo: np.ndarray | None = None

    logs: list[dict] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, schedule.total_epochs + 1):
            active = active_losses(epoch, schedule)
            lr = learning_rate_for_epoch(epoch, config, schedule)
            for group in opt_backbone.param_groups:
                group["lr"] = lr
            for group in opt_classifier.param_groups:
                group["lr"] = lr

            record: dict = {"epoch": epoch, "active_losses": sorted(active), "lr": lr}

            if LOSS_INTER in active:
                inter_epoch_index = epoch - schedule.e_intra - 1
                if assignment is None or inter_epoch_index % schedule.association_period == 0:
                    with torch.no_grad():
                        all_features = encoder.encode_manifest(manifest)
                    centroids = global_id_centroids(all_features, global_ids, num_global)
                    graph = build_association_graph(
                        centroids,
                        camera_of_global,
                        threshold=config["inter.threshold"],
                        metric=config["inter.distance"],
                    )
                    assignment = connected_components(graph)
                    inter_memory = init_inter_memory(
                        assignment,
                        all_features,
                        global_ids,
                        alpha=config["inter.alpha"],
                        tau=config["inter.tau"],
                    )
                    cluster_texts = cluster_text_features(assignment, text_per_id)
                    positive_sets = build_positive_sets(assignment)
                    sample_pseudo = assignment.labels[global_ids]
                    for key, value in association_diagnostics(graph, assignment).items():
                        record[f"association_{key}"] = (
                            value if not isinstance(value, dict) else json.dumps(value)
                        )
                    if truth is not None:
                        record["ari"] = compute_ari(
                            assignment.labels, truth.labels_for_global_ids(manifest)
                        )
            else:
                assignment = None
                inter_memory = None
                cluster_texts = None
                positive_sets = None
                sample_pseudo = None

            state = StageState(
                epoch=epoch,
                active=active,
                cluster_count=assignment.cluster_count if assignment else None,
            )
            record["cluster_count"] = state.cluster_count

            accumulator = _EpochAccumulator()
            partition_violations = 0
            for iteration in range(iterations):
                batch = sample_pk_batch(manifest, p, k, rng)
                idx = np.array(batch.sample_indices)
                features = encoder.encode_refs([refs[i] for i in idx])
                labels_t = torch.from_numpy(global_ids[idx])

                backbone_digest = parameter_checksum(encoder) if verify_partition else None
                gid_loss = loss_gid(features, labels_t, classifier)
                opt_classifier.zero_grad()
                gid_loss.backward()
                opt_classifier.step()
                if verify_partition and parameter_checksum(encoder) != backbone_digest:
                    partition_violations += 1
                accumulator.add("loss_gid", float(gid_loss.detach()))

                backbone_terms = []
                if LOSS_INTRA in active:
                    icdl_sum = features.new_zeros(())
                    text_sum = features.new_zeros(())
                    for row, sample_index in enumerate(idx):
                        cam = int(camera_ids[sample_index])
                        label = int(intra_labels[sample_index])
                        icdl_sum = icdl_sum + loss_icdl(
                            features[row],
                            cam,
                            label,
                            memories[cam],
                            balance=config["intra.lambda"],
                        )
                        if use_text:
                            text_sum = text_sum + loss_i2tce_intra(
                                features[row],
                                cam,
                                label,
                                camera_texts[cam],
                                smoothing=config["intra.label_smoothing"],
                                tau=config["intra.text_tau"],
                            )
                    icdl_mean = icdl_sum / len(idx)
                    accumulator.add("loss_icdl", float(icdl_mean.detach()))
                    backbone_terms.append(icdl_mean)
                    if use_text:
                        text_mean = text_sum / len(idx)
                        accumulator.add("loss_i2tce_intra", float(text_mean.detach()))
                        backbone_terms.append(text_mean)

                if LOSS_INTER in active:
                    ipcl_sum = features.new_zeros(())
                    text_sum = features.new_zeros(())
                    for row, sample_index in enumerate(idx):
                        pseudo = int(sample_pseudo[sample_index])
                        ipcl_sum = ipcl_sum + loss_ipcl(features[row], pseudo, inter_memory)
                        if use_text:
                            text_sum = text_sum + loss_i2tce_inter(
                                features[row],
                                pseudo,
                                cluster_texts,
                                smoothing=config["inter.label_smoothing"],
                                tau=config["inter.text_tau"],
                            )
                    ipcl_mean = ipcl_sum / len(idx)
                    accumulator.add("loss_ipcl", float(ipcl_mean.detach()))
                    backbone_terms.append(ipcl_mean)
                    if use_text:
                        text_mean = text_sum / len(idx)
                        accumulator.add("loss_i2tce_inter", float(text_mean.detach()))
                        backbone_terms.append(text_mean)

                if LOSS_ICAL in active and use_adversarial:
                    ical = loss_ical(
                        features,
                        labels_t,
                        positive_sets,
                        classifier,
                        epsilon=config["adv.epsilon"],
                        full_softmax=config["adv.full_softmax"],
                    )
                    accumulator.add("loss_ical", float(ical.detach()))
                    backbone_terms.append(ical)

                backbone_loss = sum(backbone_terms, features.new_zeros(()))
                if not torch.isfinite(backbone_loss) or not torch.isfinite(gid_loss):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch}, iteration {iteration}"
                    )
                classifier_digest = (
                    parameter_checksum(classifier) if verify_partition else None
                )
                opt_backbone.zero_grad()
                backbone_loss.backward()
                opt_backbone.step()
                if verify_partition and parameter_checksum(classifier) != classifier_digest:
                    partition_violations += 1
                accumulator.add("loss_backbone", float(backbone_loss.detach()))

                with torch.no_grad():
                    fresh = features.detach()
                    if LOSS_INTRA in active:
                        for key in {
                            (int(camera_ids[i]), int(intra_labels[i])) for i in idx
                        }:
                            cam, label = key
                            rows = [
                                r
                                for r, i in enumerate(idx)
                                if camera_ids[i] == cam and intra_labels[i] == label
                            ]
                            memories[cam].update_centroid(label, fresh[rows].mean(dim=0))
                        for row, sample_index in enumerate(idx):
                            cam = int(camera_ids[sample_index])
                            memories[cam].update_instance(
                                instance_keys[sample_index], fresh[row]
                            )
                    if LOSS_INTER in active:
                        for row, sample_index in enumerate(idx):
                            inter_memory.update(int(sample_pseudo[sample_index]), fresh[row])

            record.update(accumulator.means())
            if verify_partition:
                record["partition_violations"] = partition_violations
                if partition_violations:
                    raise RuntimeError(
                        f"gradient-flow partition violated at epoch {epoch}"
                    )
            record["memory_checksum"] = _memory_checksum(memories, inter_memory)
            record.update(_classifier_diagnostics(encoder, manifest, classifier, positive_sets, global_ids))
            logs.append(record)
            if log_file:
                log_file.write(json.dumps(record, default=str) + "\n")
    finally:
        if log_file:
            log_file.close()

    with torch.no_grad():
        final_features = encoder.encode_manifest(manifest)
    return TrainResult(
        encoder=encoder,
        classifier=classifier,
        logs=logs,
        intra_memories=memories,
        inter_memory=inter_memory,
        assignment=assignment,
        schedule=schedule,
        config=config,
        final_features=final_features,
    )


def _memory_checksum(memories: list[HybridCameraMemory], inter_memory: InterMemory | None) -> str:
    parts = [tensor_checksum(m.centroids) + tensor_checksum(m.instances) for m in memories]
    if inter_memory is not None:
        parts.append(tensor_checksum(inter_memory.prototypes))
    return "".join(parts)[:64]


@torch.no_grad()
def _classifier_diagnostics(
    encoder, manifest, classifier, positive_sets, global_ids, bins: int = 10
) -> dict:
    """Histogram of the classifier's own-id probabilities over all samples.

    Also reports the mean probability mass falling on each sample's positive
    set once pseudo-labels exist; a camera-specific classifier keeps that
    mass on the own id (single peak), a camera-agnostic one spreads it over
    the sibling ids (multiple peaks).
    """
    features = encoder.encode_manifest(manifest)
    probs = torch.softmax(classifier.logits(features), dim=1)
    own = probs[torch.arange(len(manifest)), torch.from_numpy(global_ids)]
    histogram = torch.histc(own, bins=bins, min=0.0, max=1.0)
    out = {"gid_prob_histogram": [int(v) for v in histogram.tolist()]}
    if positive_sets is not None:
        mass = []
        for i in range(len(manifest)):
            pset = positive_sets[int(global_ids[i])]
            idx = torch.tensor(sorted(pset.positives), dtype=torch.long)
            mass.append(float(probs[i, idx].sum()))
        out["positive_mass_mean"] = float(np.mean(mass))
    return out


def save_checkpoint(result: TrainResult, path: str | Path) -> None:
    payload = {
        "config": result.config.as_dict(),
        "encoder_state": result.encoder.state_dict(),
        "classifier_state": result.classifier.state_dict(),
        "classifier_tau": result.classifier.tau,
        "intra_memories": [m.state() for m in result.intra_memories],
        "inter_memory": result.inter_memory.state() if result.inter_memory else None,
        "assignment": {
            "labels": result.assignment.labels,
            "cluster_count": result.assignment.cluster_count,
        }
        if result.assignment
        else None,
        "epoch": result.schedule.total_epochs,
        "schedule": result.schedule.__dict__,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path, latents: dict[str, np.ndarray] | None = None):
    """Rebuild the encoder (and friends) stored by :func:`save_checkpoint`."""
    payload = torch.load(path, weights_only=False)
    config = RunConfig(payload["config"])
    encoder = build_image_encoder(config, latents)
    encoder.load_state_dict(payload["encoder_state"])
    num_ids, dim = payload["classifier_state"]["weight"].shape
    classifier = GlobalClassifier(num_ids, dim, tau=payload["classifier_tau"])
    classifier.load_state_dict(payload["classifier_state"])
    memories = [HybridCameraMemory.from_state(s) for s in payload["intra_memories"]]
    inter_memory = (
        InterMemory.from_state(payload["inter_memory"]) if payload["inter_memory"] else None
    )
    assignment = (
        ClusterAssignment(
            labels=payload["assignment"]["labels"],
            cluster_count=payload["assignment"]["cluster_count"],
        )
        if payload["assignment"]
        else None
    )
    return {
        "config": config,
        "encoder": encoder,
        "classifier": classifier,
        "intra_memories": memories,
        "inter_memory": inter_memory,
        "assignment": assignment,
        "epoch": payload["epoch"],
        "schedule": TrainSchedule(**payload["schedule"]),
    }
