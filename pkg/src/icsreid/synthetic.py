"""Synthetic multi-camera identity worlds with known cross-camera truth.

Each true identity gets a prototype on the unit sphere. A camera observes an
identity through an additive camera-specific shift plus Gaussian noise, and
labels it with its own intra-camera id, mirroring the per-camera annotation
convention. The generator also returns the hidden (camera, intra-label) ->
true identity table, which exists purely so association quality can be scored;
training code never reads it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetManifest, accumulate_global_ids


@dataclass(frozen=True)
class WorldSpec:
    true_identity_count: int
    camera_count: int
    cameras_per_identity: tuple[int, int] = (2, 4)
    feature_dim: int = 32
    camera_shift_magnitude: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    images_per_appearance: tuple[int, int] = (2, 4)

    def __post_init__(self):
        lo, hi = self.cameras_per_identity
        if not 1 <= lo <= hi <= self.camera_count:
            raise ValueError("cameras_per_identity range must fit inside [1, camera_count]")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2")
        if self.true_identity_count < 1 or self.camera_count < 1:
            raise ValueError("identity and camera counts must be positive")
        if self.camera_shift_magnitude < 0 or self.noise_sigma < 0:
            raise ValueError("shift magnitude and noise sigma must be non-negative")
        ilo, ihi = self.images_per_appearance
        if not 1 <= ilo <= ihi:
            raise ValueError("images_per_appearance range must be positive and ordered")


@dataclass(frozen=True)
class TruthTable:
    """Hidden map (camera_id, intra_label) -> true identity."""

    entries: dict[tuple[int, int], int]

    def identity_of(self, camera_id: int, intra_label: int) -> int:
        return self.entries[(camera_id, intra_label)]

    def labels_for_global_ids(self, manifest: DatasetManifest) -> np.ndarray:
        """True identity per accumulated global id, ordered by global id."""
        out = np.empty(manifest.num_global_ids, dtype=np.int64)
        for (camera_id, intra_label), identity in self.entries.items():
            out[manifest.global_id_of(camera_id, intra_label)] = identity
        return out

    def labels_for_samples(self, manifest: DatasetManifest) -> np.ndarray:
        return np.array(
            [self.entries[(s.camera_id, s.intra_label)] for s in manifest.samples],
            dtype=np.int64,
        )


@dataclass(frozen=True)
class SyntheticWorld:
    spec: WorldSpec
    manifest: DatasetManifest
    latents: dict[str, np.ndarray] = field(repr=False)
    truth: TruthTable


def generate_world(spec: WorldSpec) -> SyntheticWorld:
    """Build a manifest, per-sample latent vectors, and the hidden truth table.

    Deterministic for a fixed spec. With zero shift and zero noise every
    sample of an identity carries exactly the prototype vector, so cross-camera
    matching is trivially recoverable.
    """
    rng = np.random.default_rng(spec.seed)
    dim = spec.feature_dim

    prototypes = rng.standard_normal((spec.true_identity_count, dim))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)

    shifts = np.zeros((spec.camera_count, dim))
    if spec.camera_shift_magnitude > 0:
        directions = rng.standard_normal((spec.camera_count, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        shifts = directions * spec.camera_shift_magnitude

    lo, hi = spec.cameras_per_identity
    cameras_of_identity: list[np.ndarray] = []
    for _ in range(spec.true_identity_count):
        k = int(rng.integers(lo, hi + 1))
        cameras_of_identity.append(rng.choice(spec.camera_count, size=k, replace=False))

    # every camera must observe at least one identity, otherwise the manifest
    # would silently drop it from the camera count
    covered = {int(c) for cams in cameras_of_identity for c in cams}
    for camera_id in range(spec.camera_count):
        if camera_id not in covered:
            victim = int(rng.integers(spec.true_identity_count))
            cameras_of_identity[victim] = np.append(cameras_of_identity[victim], camera_id)

    ilo, ihi = spec.images_per_appearance
    intra_counters = [0] * spec.camera_count
    rows: list[tuple[str, int, int]] = []
    latents: dict[str, np.ndarray] = {}
    truth_entries: dict[tuple[int, int], int] = {}
    ref_counter = 0

    for identity in range(spec.true_identity_count):
        for camera_id in sorted(int(c) for c in cameras_of_identity[identity]):
            intra_label = intra_counters[camera_id]
            intra_counters[camera_id] += 1
            truth_entries[(camera_id, intra_label)] = identity
            n_images = int(rng.integers(ilo, ihi + 1))
            for _ in range(n_images):
                latent = prototypes[identity] + shifts[camera_id]
                if spec.noise_sigma > 0:
                    latent = latent + rng.standard_normal(dim) * spec.noise_sigma
                ref = f"syn-{ref_counter:06d}"
                ref_counter += 1
                rows.append((ref, camera_id, intra_label))
                latents[ref] = latent.astype(np.float32)

    manifest = accumulate_global_ids(rows)
    return SyntheticWorld(spec, manifest, latents, TruthTable(truth_entries))


def save_truth(truth: TruthTable, path: str | Path) -> None:
    records = [
        {"camera_id": cam, "intra_label": label, "true_identity": identity}
        for (cam, label), identity in sorted(truth.entries.items())
    ]
    Path(path).write_text(json.dumps({"entries": records}, indent=2) + "\n", encoding="utf-8")


def load_truth(path: str | Path) -> TruthTable:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    entries = {
        (int(r["camera_id"]), int(r["intra_label"])): int(r["true_identity"])
        for r in payload["entries"]
    }
    return TruthTable(entries)


def save_latents(latents: dict[str, np.ndarray], path: str | Path) -> None:
    np.savez(path, **{ref: vec for ref, vec in latents.items()})


def load_latents(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path) as archive:
        return {ref: archive[ref] for ref in archive.files}
