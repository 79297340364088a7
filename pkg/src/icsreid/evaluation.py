"""Retrieval and clustering-quality metrics, plus run reports.

Ranking is deterministic: galleries are ordered by descending similarity
with ties broken by gallery index (stable sort). Average precision uses
strictly sequential float64 accumulation, so results are reproducible to the
bit. The clustering agreement scores are computed from integer pair counts
through exact rational arithmetic before the single final float conversion.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class RetrievalProtocol:
    """Query/gallery labels and the match-filtering rule.

    With ``filter_same_camera`` set, gallery entries sharing both identity
    and camera with the query are excluded from its ranking (the usual
    cross-camera protocol). ``self_retrieval`` marks query and gallery as the
    same ordered set so each query's own entry is always excluded.
    """

    query_identities: np.ndarray
    query_cameras: np.ndarray
    gallery_identities: np.ndarray
    gallery_cameras: np.ndarray
    filter_same_camera: bool = True
    self_retrieval: bool = False

    def __post_init__(self):
        if len(self.query_identities) != len(self.query_cameras):
            raise ValueError("query identity/camera lengths differ")
        if len(self.gallery_identities) != len(self.gallery_cameras):
            raise ValueError("gallery identity/camera lengths differ")
        if self.self_retrieval and len(self.query_identities) != len(self.gallery_identities):
            raise ValueError("self retrieval requires matching query and gallery sizes")

    def valid_gallery_mask(self, query_index: int) -> np.ndarray:
        keep = np.ones(len(self.gallery_identities), dtype=bool)
        same_identity = self.gallery_identities == self.query_identities[query_index]
        if self.filter_same_camera:
            same_camera = self.gallery_cameras == self.query_cameras[query_index]
            keep &= ~(same_identity & same_camera)
        if self.self_retrieval:
            keep[query_index] = False
        return keep


def _ranked_hits(similarity_row: np.ndarray, protocol: RetrievalProtocol, query_index: int):
    order = np.argsort(-similarity_row, kind="stable")
    keep = protocol.valid_gallery_mask(query_index)[order]
    ranked = order[keep]
    return protocol.gallery_identities[ranked] == protocol.query_identities[query_index]


def compute_map(similarity: np.ndarray, protocol: RetrievalProtocol) -> float:
    """Mean average precision over queries with at least one valid match."""
    similarity = np.asarray(similarity, dtype=np.float64)
    aps = []
    for q in range(similarity.shape[0]):
        hits = _ranked_hits(similarity[q], protocol, q).astype(np.float64)
        num_rel = int(hits.sum())
        if num_rel == 0:
            continue
        precision = np.cumsum(hits) / np.arange(1, len(hits) + 1, dtype=np.float64)
        ap = np.cumsum(precision * hits)[-1] / num_rel
        aps.append(ap)
    if not aps:
        return 0.0
    return float(np.cumsum(np.array(aps, dtype=np.float64))[-1] / len(aps))


def compute_cmc(
    similarity: np.ndarray, protocol: RetrievalProtocol, ks: tuple[int, ...] = (1, 5, 10)
) -> dict[int, float]:
    """Cumulative matching: fraction of queries whose first hit ranks within k."""
    similarity = np.asarray(similarity, dtype=np.float64)
    first_ranks = []
    for q in range(similarity.shape[0]):
        hits = _ranked_hits(similarity[q], protocol, q)
        positions = np.nonzero(hits)[0]
        if len(positions) == 0:
            continue
        first_ranks.append(int(positions[0]) + 1)
    if not first_ranks:
        return {k: 0.0 for k in ks}
    ranks = np.array(first_ranks)
    return {k: float((ranks <= k).sum() / len(ranks)) for k in ks}


def _comb2(n: int) -> int:
    return n * (n - 1) // 2


def compute_ari(labels_a: np.ndarray, labels_b: np.ndarray) -> float:
    """Adjusted Rand index between two partitions of the same items.

    Symmetric and invariant to label renaming. Degenerate pairs whose
    expected and maximum indices coincide (e.g. two identical trivial
    partitions) score 1.0.
    """
    labels_a = np.asarray(labels_a).ravel()
    labels_b = np.asarray(labels_b).ravel()
    if labels_a.shape != labels_b.shape:
        raise ValueError("partitions must label the same items")
    n = len(labels_a)
    if n == 0:
        raise ValueError("empty partitions")

    contingency: dict[tuple, int] = {}
    counts_a: dict = {}
    counts_b: dict = {}
    for a, b in zip(labels_a.tolist(), labels_b.tolist()):
        contingency[(a, b)] = contingency.get((a, b), 0) + 1
        counts_a[a] = counts_a.get(a, 0) + 1
        counts_b[b] = counts_b.get(b, 0) + 1

    sum_cells = sum(_comb2(c) for c in contingency.values())
    sum_a = sum(_comb2(c) for c in counts_a.values())
    sum_b = sum(_comb2(c) for c in counts_b.values())
    total = _comb2(n)
    if total == 0:
        return 1.0
    expected = Fraction(sum_a * sum_b, total)
    max_index = Fraction(sum_a + sum_b, 2)
    if max_index == expected:
        return 1.0
    return float((Fraction(sum_cells) - expected) / (max_index - expected))


def compute_nmi(labels_a: np.ndarray, labels_b: np.ndarray) -> float:
    """Normalized mutual information (arithmetic-mean normalization)."""
    labels_a = np.asarray(labels_a).ravel()
    labels_b = np.asarray(labels_b).ravel()
    if labels_a.shape != labels_b.shape:
        raise ValueError("partitions must label the same items")
    n = len(labels_a)
    if n == 0:
        raise ValueError("empty partitions")

    contingency: dict[tuple, int] = {}
    counts_a: dict = {}
    counts_b: dict = {}
    for a, b in zip(labels_a.tolist(), labels_b.tolist()):
        contingency[(a, b)] = contingency.get((a, b), 0) + 1
        counts_a[a] = counts_a.get(a, 0) + 1
        counts_b[b] = counts_b.get(b, 0) + 1

    mutual_info = 0.0
    for (a, b), c in contingency.items():
        p_ab = c / n
        mutual_info += p_ab * math.log(p_ab * n * n / (counts_a[a] * counts_b[b]))
    entropy_a = -sum((c / n) * math.log(c / n) for c in counts_a.values())
    entropy_b = -sum((c / n) * math.log(c / n) for c in counts_b.values())
    normalizer = (entropy_a + entropy_b) / 2.0
    if normalizer == 0.0:
        return 1.0
    return max(0.0, mutual_info / normalizer)


def retrieval_metrics(
    features: np.ndarray,
    protocol: RetrievalProtocol,
    ks: tuple[int, ...] = (1, 5, 10),
    gallery_features: np.ndarray | None = None,
) -> dict[str, float]:
    """Cosine-similarity retrieval metrics; self-retrieval when no gallery given."""
    query = np.asarray(features, dtype=np.float64)
    query = query / np.linalg.norm(query, axis=1, keepdims=True)
    if gallery_features is None:
        gallery = query
    else:
        gallery = np.asarray(gallery_features, dtype=np.float64)
        gallery = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    similarity = query @ gallery.T
    metrics = {"map": compute_map(similarity, protocol)}
    for k, value in compute_cmc(similarity, protocol, ks).items():
        metrics[f"rank{k}"] = value
    return metrics


def emit_report(
    logs: list[dict],
    out_dir: str | Path,
    final_metrics: dict[str, float] | None = None,
) -> list[Path]:
    """Write per-epoch tables, a key=value metrics file, and loss/quality plots.

    An empty log still produces the table and metrics files (with headers
    only), so downstream tooling can rely on their presence.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    scalar_keys: list[str] = []
    for record in logs:
        for key, value in record.items():
            if isinstance(value, (int, float, bool)) or value is None:
                if key not in scalar_keys:
                    scalar_keys.append(key)

    table_path = out_dir / "epoch_metrics.csv"
    with open(table_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(scalar_keys)
        for record in logs:
            writer.writerow([_format_cell(record.get(key)) for key in scalar_keys])
    written.append(table_path)

    metrics_path = out_dir / "metrics.txt"
    lines = [f"{key}={_format_cell(value)}" for key, value in sorted((final_metrics or {}).items())]
    metrics_path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    written.append(metrics_path)

    json_path = out_dir / "run_log.json"
    json_path.write_text(json.dumps(logs, indent=2, default=str) + "\n", encoding="utf-8")
    written.append(json_path)

    if logs:
        written.extend(_plot_curves(logs, out_dir))
    return written


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def _plot_curves(logs: list[dict], out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    epochs = [record.get("epoch", i + 1) for i, record in enumerate(logs)]
    loss_keys = sorted(
        {
            key
            for record in logs
            for key, value in record.items()
            if key.startswith("loss_") and isinstance(value, (int, float))
        }
    )
    if loss_keys:
        fig, ax = plt.subplots(figsize=(7, 4))
        for key in loss_keys:
            series = [record.get(key) for record in logs]
            xs = [e for e, v in zip(epochs, series) if v is not None]
            ys = [v for v in series if v is not None]
            if ys:
                ax.plot(xs, ys, label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / "loss_curves.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    quality_keys = [key for key in ("ari", "nmi") if any(key in r for r in logs)]
    if quality_keys:
        fig, ax = plt.subplots(figsize=(7, 4))
        for key in quality_keys:
            series = [record.get(key) for record in logs]
            xs = [e for e, v in zip(epochs, series) if v is not None]
            ys = [v for v in series if v is not None]
            if ys:
                ax.plot(xs, ys, marker="o", markersize=3, label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("clustering agreement")
        ax.set_ylim(-0.05, 1.05)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / "association_quality.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written
