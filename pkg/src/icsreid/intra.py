"""Per-camera discriminative learning (stage 2).

Each camera owns a hybrid memory: a centroid bank with one unit-norm row per
intra-camera id, and an instance bank with one slot per training image of
that camera. Centroids follow a momentum update on batch means; instance
slots are replaced outright with the freshest feature. Losses read the banks
as constants; the training loop applies updates only after backpropagation.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import Tensor

from .contrast import cosine_matrix, info_nce, l2_normalize, momentum_update, smoothed_cross_entropy
from .data import DatasetManifest

InstanceKey = tuple[int, int]  # (intra_label, occurrence index within the id)


class HybridCameraMemory:
    """Centroid bank plus instance bank of a single camera."""

    def __init__(
        self,
        camera_id: int,
        centroids: Tensor,
        instances: Tensor,
        instance_labels: Tensor,
        alpha: float = 0.1,
        tau: float = 0.05,
    ):
        if centroids.shape[0] == 0:
            raise ValueError(f"camera {camera_id} has no identities")
        if not torch.isfinite(centroids).all() or not torch.isfinite(instances).all():
            raise ValueError("memory banks must be finite")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.camera_id = camera_id
        self.centroids = centroids.detach().clone()
        self.instances = instances.detach().clone()
        self.instance_labels = instance_labels.clone()
        self.alpha = alpha
        self.tau = tau
        self._slot_of: dict[InstanceKey, int] = {}
        occurrence: dict[int, int] = {}
        for row, label in enumerate(instance_labels.tolist()):
            j = occurrence.get(label, 0)
            occurrence[label] = j + 1
            self._slot_of[(label, j)] = row

    @property
    def num_ids(self) -> int:
        return self.centroids.shape[0]

    def instance_rows(self, intra_label: int) -> Tensor:
        return self.instances[self.instance_labels == intra_label]

    def update_centroid(self, intra_label: int, batch_mean_feature: Tensor) -> None:
        """Momentum-blend the id's centroid with a batch mean, then re-normalize."""
        if not 0 <= intra_label < self.num_ids:
            raise ValueError(f"unknown intra label {intra_label} for camera {self.camera_id}")
        self.centroids[intra_label] = momentum_update(
            self.centroids[intra_label], batch_mean_feature.detach(), self.alpha
        )

    def update_instance(self, instance_key: InstanceKey, feature: Tensor) -> None:
        """Replace the slot content with the given feature (no momentum)."""
        try:
            row = self._slot_of[tuple(instance_key)]
        except KeyError:
            raise ValueError(f"unknown instance key {instance_key!r}") from None
        self.instances[row] = feature.detach()

    def state(self) -> dict:
        return {
            "camera_id": self.camera_id,
            "centroids": self.centroids,
            "instances": self.instances,
            "instance_labels": self.instance_labels,
            "alpha": self.alpha,
            "tau": self.tau,
        }

    @classmethod
    def from_state(cls, state: dict) -> "HybridCameraMemory":
        return cls(**state)


def sample_instance_keys(manifest: DatasetManifest) -> list[InstanceKey]:
    """Instance-bank key of every sample: j-th image of its id, manifest order."""
    keys: list[InstanceKey | None] = [None] * len(manifest)
    for (camera_id, intra_label), indices in manifest.groups.items():
        for j, sample_index in enumerate(indices):
            keys[sample_index] = (intra_label, j)
    return keys  # type: ignore[return-value]


def init_memories(
    manifest: DatasetManifest,
    encoder,
    alpha: float = 0.1,
    tau: float = 0.05,
    features: Tensor | None = None,
) -> list[HybridCameraMemory]:
    """Build one hybrid memory per camera from the encoder's current features.

    Centroids are the unit-normalized means over each id's images; instance
    banks hold every image feature of the camera, in manifest order.
    Precomputed ``features`` (one row per manifest sample) may be supplied to
    skip the encoding pass.
    """
    if features is None:
        with torch.no_grad():
            features = encoder.encode_manifest(manifest)
    camera_ids = torch.from_numpy(manifest.camera_ids())
    intra_labels = torch.from_numpy(manifest.intra_labels())

    memories = []
    for camera_id in range(manifest.camera_count):
        mask = camera_ids == camera_id
        cam_feats = features[mask]
        cam_labels = intra_labels[mask]
        k = manifest.per_camera_id_counts[camera_id]
        centroids = []
        for intra_label in range(k):
            rows = cam_feats[cam_labels == intra_label]
            if rows.shape[0] == 0:
                raise ValueError(f"camera {camera_id} id {intra_label} has no images")
            centroids.append(l2_normalize(rows.mean(dim=0)))
        memories.append(
            HybridCameraMemory(
                camera_id=camera_id,
                centroids=torch.stack(centroids),
                instances=cam_feats,
                instance_labels=cam_labels,
                alpha=alpha,
                tau=tau,
            )
        )
    return memories


def loss_intra_centroid(
    query: Tensor, camera_id: int, intra_label: int, memory: HybridCameraMemory
) -> Tensor:
    """Contrast the query against its camera's id centroids; own centroid is positive."""
    if camera_id != memory.camera_id:
        raise ValueError(f"query camera {camera_id} does not match memory {memory.camera_id}")
    return info_nce(query, memory.centroids, intra_label, memory.tau)


def loss_intra_hard(
    query: Tensor, camera_id: int, intra_label: int, memory: HybridCameraMemory
) -> Tensor:
    """Hard-mined instance contrast within the query's camera.

    The positive logit comes from the own-id instance *least* similar to the
    query; every other id contributes its *most* similar instance. Softmax is
    taken over these K_c mined logits at the memory temperature.
    """
    if camera_id != memory.camera_id:
        raise ValueError(f"query camera {camera_id} does not match memory {memory.camera_id}")
    sims = cosine_matrix(query.unsqueeze(0), memory.instances).squeeze(0)
    own_mask = memory.instance_labels == intra_label
    if not bool(own_mask.any()):
        raise ValueError(f"id {intra_label} has no instances in camera {camera_id}")
    logits = [sims[own_mask].min()]
    for other in range(memory.num_ids):
        if other == intra_label:
            continue
        other_mask = memory.instance_labels == other
        if bool(other_mask.any()):
            logits.append(sims[other_mask].max())
    stacked = torch.stack(logits) / memory.tau
    return -torch.log_softmax(stacked, dim=0)[0]


def loss_icdl(
    query: Tensor,
    camera_id: int,
    intra_label: int,
    memory: HybridCameraMemory,
    balance: float = 0.8,
) -> Tensor:
    """Convex mix of the centroid and hard-mined losses (weight on centroid)."""
    if not 0.0 <= balance <= 1.0:
        raise ValueError("balance must lie in [0, 1]")
    centroid = loss_intra_centroid(query, camera_id, intra_label, memory)
    if balance == 1.0:
        return centroid
    hard = loss_intra_hard(query, camera_id, intra_label, memory)
    if balance == 0.0:
        return hard
    return balance * centroid + (1.0 - balance) * hard


def loss_i2tce_intra(
    image_feat: Tensor,
    camera_id: int,
    intra_label: int,
    camera_text_features: Tensor,
    smoothing: float = 0.1,
    tau: float = 1.0,
) -> Tensor:
    """Align the image feature with its camera's per-id text features."""
    del camera_id  # the caller selects the camera's text feature matrix
    return smoothed_cross_entropy(image_feat, camera_text_features, intra_label, smoothing, tau)


class IntraLossTerms(NamedTuple):
    total: Tensor
    icdl: Tensor
    i2tce: Tensor


def intra_loss_terms(
    query: Tensor,
    camera_id: int,
    intra_label: int,
    memory: HybridCameraMemory,
    camera_text_features: Tensor,
    balance: float = 0.8,
    smoothing: float = 0.1,
    text_tau: float = 1.0,
) -> IntraLossTerms:
    icdl = loss_icdl(query, camera_id, intra_label, memory, balance)
    i2tce = loss_i2tce_intra(
        query, camera_id, intra_label, camera_text_features, smoothing, text_tau
    )
    return IntraLossTerms(icdl + i2tce, icdl, i2tce)


def loss_intra_total(
    query: Tensor,
    camera_id: int,
    intra_label: int,
    memory: HybridCameraMemory,
    camera_text_features: Tensor,
    balance: float = 0.8,
    smoothing: float = 0.1,
    text_tau: float = 1.0,
) -> Tensor:
    return intra_loss_terms(
        query, camera_id, intra_label, memory, camera_text_features, balance, smoothing, text_tau
    ).total
