"""Dataset representation for per-camera identity labels.

Identities are annotated independently inside each camera, so a training
record carries a camera id and an intra-camera label. A *global id* is the
accumulated label obtained by enumerating all (camera, intra-label) pairs
camera-major: the same physical person seen by several cameras holds one
global id per camera.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ManifestRow = tuple[str, int, int]


@dataclass(frozen=True)
class Sample:
    image_ref: str
    camera_id: int
    intra_label: int
    global_id: int


@dataclass(frozen=True)
class PKBatch:
    """P identity groups with K instances each; one camera per group."""

    sample_indices: tuple[int, ...]
    ids_per_batch: int
    instances_per_id: int

    def __len__(self) -> int:
        return len(self.sample_indices)


class DatasetManifest:
    """Immutable sample list with derived global ids.

    Args:
        samples: samples with consistent ``global_id`` assignments.
        camera_count: number of cameras C; every ``camera_id`` < C.
        per_camera_id_counts: number of distinct intra-camera labels per camera.
    """

    def __init__(
        self,
        samples: Sequence[Sample],
        camera_count: int,
        per_camera_id_counts: Sequence[int],
    ):
        if not samples:
            raise ValueError("manifest must contain at least one sample")
        if len(per_camera_id_counts) != camera_count:
            raise ValueError("per_camera_id_counts length must equal camera_count")
        for sample in samples:
            if not 0 <= sample.camera_id < camera_count:
                raise ValueError(f"camera_id {sample.camera_id} out of range [0, {camera_count})")
            if not 0 <= sample.intra_label < per_camera_id_counts[sample.camera_id]:
                raise ValueError(
                    f"intra_label {sample.intra_label} out of range for camera {sample.camera_id}"
                )
        self.samples: tuple[Sample, ...] = tuple(samples)
        self.camera_count = int(camera_count)
        self.per_camera_id_counts: tuple[int, ...] = tuple(int(n) for n in per_camera_id_counts)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_global_ids(self) -> int:
        return sum(self.per_camera_id_counts)

    @cached_property
    def _camera_offsets(self) -> tuple[int, ...]:
        offsets = []
        total = 0
        for count in self.per_camera_id_counts:
            offsets.append(total)
            total += count
        return tuple(offsets)

    def global_id_of(self, camera_id: int, intra_label: int) -> int:
        if not 0 <= intra_label < self.per_camera_id_counts[camera_id]:
            raise ValueError(f"unknown label {intra_label} for camera {camera_id}")
        return self._camera_offsets[camera_id] + intra_label

    def label_of_global(self, global_id: int) -> tuple[int, int]:
        if not 0 <= global_id < self.num_global_ids:
            raise ValueError(f"global id {global_id} out of range")
        for camera_id, offset in enumerate(self._camera_offsets):
            count = self.per_camera_id_counts[camera_id]
            if offset <= global_id < offset + count:
                return camera_id, global_id - offset
        raise AssertionError("unreachable")

    @cached_property
    def groups(self) -> dict[tuple[int, int], tuple[int, ...]]:
        """Sample indices per (camera_id, intra_label), in manifest order."""
        grouped: dict[tuple[int, int], list[int]] = {}
        for index, sample in enumerate(self.samples):
            grouped.setdefault((sample.camera_id, sample.intra_label), []).append(index)
        return {key: tuple(indices) for key, indices in grouped.items()}

    def camera_ids(self) -> np.ndarray:
        return np.array([s.camera_id for s in self.samples], dtype=np.int64)

    def intra_labels(self) -> np.ndarray:
        return np.array([s.intra_label for s in self.samples], dtype=np.int64)

    def global_ids(self) -> np.ndarray:
        return np.array([s.global_id for s in self.samples], dtype=np.int64)


def accumulate_global_ids(rows: Iterable[ManifestRow]) -> DatasetManifest:
    """Assign accumulated global ids to (camera, intra-label) records.

    Global ids enumerate label pairs camera-major then label-minor, so the
    assignment is deterministic for a fixed set of rows. Rows must use
    contiguous intra-camera labels 0..N_c-1 within each camera; duplicate
    image references are rejected.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no manifest rows given")

    seen_refs: set[str] = set()
    labels_per_camera: dict[int, set[int]] = {}
    for ref, camera_id, intra_label in rows:
        if camera_id < 0 or intra_label < 0:
            raise ValueError(f"negative id in row {(ref, camera_id, intra_label)!r}")
        if ref in seen_refs:
            raise ValueError(f"duplicate image_ref: {ref!r}")
        seen_refs.add(ref)
        labels_per_camera.setdefault(int(camera_id), set()).add(int(intra_label))

    camera_count = max(labels_per_camera) + 1
    counts = []
    for camera_id in range(camera_count):
        labels = labels_per_camera.get(camera_id, set())
        count = len(labels)
        if labels and labels != set(range(count)):
            missing = sorted(set(range(max(labels) + 1)) - labels)
            raise ValueError(
                f"camera {camera_id} has gaps in intra labels (missing {missing})"
            )
        counts.append(count)

    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    samples = [
        Sample(
            image_ref=ref,
            camera_id=int(camera_id),
            intra_label=int(intra_label),
            global_id=int(offsets[camera_id]) + int(intra_label),
        )
        for ref, camera_id, intra_label in rows
    ]
    return DatasetManifest(samples, camera_count, counts)


def sample_pk_batch(
    manifest: DatasetManifest,
    ids_per_batch: int,
    instances_per_id: int,
    rng: int | np.random.Generator,
) -> PKBatch:
    """Draw P distinct (camera, intra-label) groups with K instances each.

    Groups holding fewer than K images are sampled with replacement so the
    batch shape stays fixed. Reproducible when ``rng`` is an integer seed.
    """
    if ids_per_batch <= 0 or instances_per_id <= 0:
        raise ValueError("ids_per_batch and instances_per_id must be positive")
    group_keys = sorted(manifest.groups)
    if ids_per_batch > len(group_keys):
        raise ValueError(
            f"requested {ids_per_batch} groups but the manifest has only {len(group_keys)}"
        )
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)

    chosen = rng.choice(len(group_keys), size=ids_per_batch, replace=False)
    indices: list[int] = []
    for key_index in chosen:
        members = manifest.groups[group_keys[int(key_index)]]
        if len(members) >= instances_per_id:
            picks = rng.choice(len(members), size=instances_per_id, replace=False)
        else:
            picks = rng.choice(len(members), size=instances_per_id, replace=True)
        indices.extend(members[int(p)] for p in picks)
    return PKBatch(tuple(indices), ids_per_batch, instances_per_id)


def read_manifest_rows(path: str | Path) -> list[ManifestRow]:
    rows: list[ManifestRow] = []
    with open(path, newline="", encoding="utf-8") as handle:
        for lineno, record in enumerate(csv.reader(handle), start=1):
            if not record or (len(record) == 1 and not record[0].strip()):
                continue
            if len(record) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(record)}")
            ref, camera, label = record
            rows.append((ref, int(camera), int(label)))
    return rows


def read_manifest(path: str | Path) -> DatasetManifest:
    """Load a line-delimited ``image_ref,camera_id,intra_label`` file.

    Global ids are always derived, never read from disk.
    """
    return accumulate_global_ids(read_manifest_rows(path))


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        for sample in manifest.samples:
            writer.writerow([sample.image_ref, sample.camera_id, sample.intra_label])
