"""Cross-camera id association and prototype learning (stage 3).

Association builds an undirected graph over the accumulated ids. An edge
joins ids i and j only when all four conditions hold: their distance is
below the threshold, they come from different cameras, i is j's nearest
neighbor inside i's camera, and j is i's nearest neighbor inside j's camera.
Connected components of this graph become the cross-camera pseudo-labels.

Components are not re-split when they contain two ids of one camera; a
diagnostic counter reports such components instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch
from torch import Tensor

from .contrast import info_nce, l2_normalize, momentum_update, smoothed_cross_entropy
from .data import DatasetManifest


@dataclass(frozen=True)
class AssociationGraph:
    """Sparse mutual-nearest-neighbor graph over accumulated ids."""

    edges: frozenset[tuple[int, int]]
    distances: np.ndarray
    camera_of: np.ndarray
    threshold: float

    @property
    def vertex_count(self) -> int:
        return len(self.camera_of)

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.vertex_count)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return adj


@dataclass(frozen=True)
class ClusterAssignment:
    """Pseudo label per accumulated id; labels are contiguous 0..Z-1."""

    labels: np.ndarray
    cluster_count: int

    def __post_init__(self):
        if len(self.labels) and set(np.unique(self.labels)) != set(range(self.cluster_count)):
            raise ValueError("pseudo labels must be contiguous 0..Z-1")

    @cached_property
    def members(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.cluster_count)]
        for gid, label in enumerate(self.labels):
            out[int(label)].append(gid)
        return out

    def labels_for_samples(self, manifest: DatasetManifest) -> np.ndarray:
        return self.labels[manifest.global_ids()]

    def component_size_histogram(self) -> dict[int, int]:
        histogram: dict[int, int] = {}
        for group in self.members:
            histogram[len(group)] = histogram.get(len(group), 0) + 1
        return histogram

    def camera_violation_count(self, camera_of: np.ndarray) -> int:
        """Number of clusters holding two or more ids from one camera."""
        violations = 0
        for group in self.members:
            cams = camera_of[group]
            if len(cams) != len(set(cams.tolist())):
                violations += 1
        return violations


def pairwise_distances(centroids: Tensor | np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Distance matrix over unit-normalized centroids (float64, symmetric)."""
    if isinstance(centroids, Tensor):
        centroids = centroids.detach().cpu().numpy()
    x = np.asarray(centroids, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("centroids must be non-zero")
    x = x / norms
    gram = np.clip(x @ x.T, -1.0, 1.0)
    if metric == "euclidean":
        dist = np.sqrt(np.maximum(2.0 - 2.0 * gram, 0.0))
    elif metric == "cosine":
        dist = 1.0 - gram
    else:
        raise ValueError(f"unknown distance metric {metric!r}")
    np.fill_diagonal(dist, 0.0)
    return dist


def build_association_graph(
    centroids: Tensor | np.ndarray,
    camera_of: np.ndarray,
    threshold: float,
    metric: str = "euclidean",
) -> AssociationGraph:
    """Construct the constrained cross-camera graph.

    ``centroids`` holds one row per accumulated id, ordered by global id, and
    ``camera_of`` the camera of each id. Nearest-neighbor ties (exactly equal
    distances) all qualify as nearest neighbors.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    camera_of = np.asarray(camera_of, dtype=np.int64)
    dist = pairwise_distances(centroids, metric)
    n = dist.shape[0]
    if len(camera_of) != n:
        raise ValueError("camera_of length must match centroid count")

    cameras = np.unique(camera_of)
    # nn_dist[c, j]: distance from id j to its nearest neighbor inside camera c
    nn_dist = np.full((int(cameras.max()) + 1 if len(cameras) else 1, n), np.inf)
    for camera in cameras:
        rows = dist[camera_of == camera]
        nn_dist[camera] = rows.min(axis=0)

    different_camera = camera_of[:, None] != camera_of[None, :]
    below_threshold = dist < threshold
    # i attains the minimum distance to j among ids of i's camera
    i_is_nn_of_j = dist == nn_dist[camera_of]
    mutual = i_is_nn_of_j & i_is_nn_of_j.T

    candidate = different_camera & below_threshold & mutual
    ii, jj = np.nonzero(np.triu(candidate, k=1))
    edges = frozenset((int(i), int(j)) for i, j in zip(ii, jj))
    return AssociationGraph(edges=edges, distances=dist, camera_of=camera_of, threshold=threshold)


def connected_components(graph: AssociationGraph) -> ClusterAssignment:
    """Label each connected component, ordered by smallest member global id."""
    n = graph.vertex_count
    adjacency = graph.adjacency()
    labels = np.full(n, -1, dtype=np.int64)
    next_label = 0
    for start in range(n):
        if labels[start] != -1:
            continue
        stack = [start]
        labels[start] = next_label
        while stack:
            node = stack.pop()
            for neighbor in adjacency[node]:
                if labels[neighbor] == -1:
                    labels[neighbor] = next_label
                    stack.append(neighbor)
        next_label += 1
    return ClusterAssignment(labels=labels, cluster_count=next_label)


def association_diagnostics(graph: AssociationGraph, assignment: ClusterAssignment) -> dict:
    return {
        "edge_count": len(graph.edges),
        "cluster_count": assignment.cluster_count,
        "component_size_histogram": assignment.component_size_histogram(),
        "camera_violation_count": assignment.camera_violation_count(graph.camera_of),
    }


class InterMemory:
    """Prototype bank over cross-camera pseudo-labels."""

    def __init__(self, prototypes: Tensor, alpha: float = 0.1, tau: float = 0.05):
        if prototypes.shape[0] == 0:
            raise ValueError("prototype bank is empty")
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.prototypes = prototypes.detach().clone()
        self.alpha = alpha
        self.tau = tau

    @property
    def cluster_count(self) -> int:
        return self.prototypes.shape[0]

    def update(self, pseudo_label: int, feature: Tensor) -> None:
        if not 0 <= pseudo_label < self.cluster_count:
            raise ValueError(f"unknown pseudo label {pseudo_label}")
        self.prototypes[pseudo_label] = momentum_update(
            self.prototypes[pseudo_label], feature.detach(), self.alpha
        )

    def state(self) -> dict:
        return {"prototypes": self.prototypes, "alpha": self.alpha, "tau": self.tau}

    @classmethod
    def from_state(cls, state: dict) -> "InterMemory":
        return cls(**state)


def init_inter_memory(
    assignment: ClusterAssignment,
    sample_features: Tensor,
    sample_global_ids: np.ndarray,
    alpha: float = 0.1,
    tau: float = 0.05,
) -> InterMemory:
    """Prototype per pseudo-label: unit-normalized mean of member samples."""
    pseudo = torch.from_numpy(assignment.labels[sample_global_ids])
    prototypes = []
    for label in range(assignment.cluster_count):
        rows = sample_features[pseudo == label]
        if rows.shape[0] == 0:
            raise ValueError(f"pseudo label {label} has no samples")
        prototypes.append(l2_normalize(rows.mean(dim=0)))
    return InterMemory(torch.stack(prototypes), alpha=alpha, tau=tau)


def cluster_text_features(assignment: ClusterAssignment, id_text_features: Tensor) -> Tensor:
    """Unit-normalized mean of member ids' text features, one row per cluster."""
    rows = []
    for group in assignment.members:
        rows.append(l2_normalize(id_text_features[group].mean(dim=0)))
    return torch.stack(rows)


def loss_ipcl(query: Tensor, pseudo_label: int, memory: InterMemory) -> Tensor:
    """Prototype contrast: own cluster's prototype against all Z prototypes."""
    return info_nce(query, memory.prototypes, pseudo_label, memory.tau)


def loss_i2tce_inter(
    image_feat: Tensor,
    pseudo_label: int,
    cluster_text_feats: Tensor,
    smoothing: float = 0.1,
    tau: float = 1.0,
) -> Tensor:
    """Align the image feature with its cluster's text feature."""
    return smoothed_cross_entropy(image_feat, cluster_text_feats, pseudo_label, smoothing, tau)


def loss_inter_total(
    query: Tensor,
    pseudo_label: int,
    memory: InterMemory,
    cluster_text_feats: Tensor,
    smoothing: float = 0.1,
    text_tau: float = 1.0,
) -> Tensor:
    return loss_ipcl(query, pseudo_label, memory) + loss_i2tce_inter(
        query, pseudo_label, cluster_text_feats, smoothing, text_tau
    )
