"""Independent brute-force oracles used across the test suite.

Everything here is deliberately written in plain Python loops over lists of
floats (no torch, no vectorization) so it shares no code path with the
package implementations it checks.
"""

from __future__ import annotations

import math
from fractions import Fraction


def cosine(a, b) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def log_softmax_pick(logits, index) -> float:
    m = max(logits)
    total = sum(math.exp(v - m) for v in logits)
    return (logits[index] - m) - math.log(total)


def info_nce(query, bank, positive_index, tau) -> float:
    logits = [cosine(query, row) / tau for row in bank]
    return -log_softmax_pick(logits, positive_index)


def smoothed_ce(query, bank, target_index, smoothing, tau=1.0) -> float:
    k = len(bank)
    logits = [cosine(query, row) / tau for row in bank]
    loss = 0.0
    for z in range(k):
        q = smoothing / k + (1.0 - smoothing) * (1.0 if z == target_index else 0.0)
        loss -= q * log_softmax_pick(logits, z)
    return loss


def prompt_side_loss(anchor_feats, candidate_feats, camera_ids, labels, tau) -> float:
    """One direction of the prompt loss: anchors rank the candidate features."""
    n = len(anchor_feats)
    per_anchor = []
    for i in range(n):
        logits = [cosine(anchor_feats[i], candidate_feats[k]) / tau for k in range(n)]
        positives = [p for p in range(n) if labels[p] == labels[i]]
        term = -sum(log_softmax_pick(logits, p) for p in positives) / len(positives)
        per_anchor.append(term)
    total = 0.0
    for camera in sorted(set(camera_ids)):
        members = [per_anchor[i] for i in range(n) if camera_ids[i] == camera]
        total += sum(members) / len(members)
    return total


def i2t(image_feats, text_feats, camera_ids, labels, tau) -> float:
    return prompt_side_loss(image_feats, text_feats, camera_ids, labels, tau)


def t2i(image_feats, text_feats, camera_ids, labels, tau) -> float:
    return prompt_side_loss(text_feats, image_feats, camera_ids, labels, tau)


def hard_mining_loss(query, instances, instance_labels, own_label, tau) -> float:
    sims = [cosine(query, row) for row in instances]
    own = [s for s, lab in zip(sims, instance_labels) if lab == own_label]
    logits = [min(own)]
    for other in sorted(set(instance_labels)):
        if other == own_label:
            continue
        logits.append(max(s for s, lab in zip(sims, instance_labels) if lab == other))
    logits = [v / tau for v in logits]
    return -log_softmax_pick(logits, 0)


def gid_loss(features, labels, weight_rows, tau) -> float:
    total = 0.0
    for feat, label in zip(features, labels):
        logits = [cosine(feat, row) / tau for row in weight_rows]
        total -= log_softmax_pick(logits, label)
    return total / len(features)


def q_weight(g, own_id, positives, epsilon):
    if g not in positives:
        return 0.0
    if g == own_id:
        return 1.0 - epsilon + epsilon / len(positives)
    return epsilon / len(positives)


def ical_loss(features, labels, positive_sets, weight_rows, tau, epsilon, full_softmax=False):
    """positive_sets: map global id -> set of positive global ids."""
    n_classes = len(weight_rows)
    total = 0.0
    for feat, label in zip(features, labels):
        positives = positive_sets[label]
        negatives = [j for j in range(n_classes) if j not in positives]
        logits = [cosine(feat, row) / tau for row in weight_rows]
        sample = 0.0
        for g in sorted(positives):
            q = q_weight(g, label, positives, epsilon)
            if full_softmax:
                denom = sum(math.exp(v) for v in logits)
            else:
                denom = math.exp(logits[g]) + sum(math.exp(logits[j]) for j in negatives)
            sample -= q * math.log(math.exp(logits[g]) / denom)
        total += sample
    return total / len(features)


def momentum_blend(old, new, alpha):
    if alpha == 1.0:
        return list(old)
    mixed = [alpha * o + (1.0 - alpha) * v for o, v in zip(old, new)]
    norm = math.sqrt(sum(x * x for x in mixed))
    return [x / norm for x in mixed]


def edge_set_from_conditions(dist, camera_of, threshold):
    """All pairs passing the four association conditions, given a distance matrix."""
    n = len(camera_of)
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if camera_of[i] == camera_of[j]:
                continue
            if not dist[i][j] < threshold:
                continue
            same_cam_i = [k for k in range(n) if camera_of[k] == camera_of[i]]
            if dist[i][j] != min(dist[k][j] for k in same_cam_i):
                continue
            same_cam_j = [k for k in range(n) if camera_of[k] == camera_of[j]]
            if dist[i][j] != min(dist[k][i] for k in same_cam_j):
                continue
            edges.add((i, j))
    return edges


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def components_union_find(n, edges):
    """Component labels ordered by smallest member, via union-find."""
    uf = UnionFind(n)
    for i, j in edges:
        uf.union(i, j)
    roots = {}
    labels = [0] * n
    for node in range(n):
        root = uf.find(node)
        if root not in roots:
            roots[root] = len(roots)
        labels[node] = roots[root]
    return labels


def average_precision(ranked_hits) -> float | None:
    num_rel = sum(1 for h in ranked_hits if h)
    if num_rel == 0:
        return None
    running_hits = 0
    ap = 0.0
    for rank, hit in enumerate(ranked_hits, start=1):
        if hit:
            running_hits += 1
            ap += running_hits / rank
    return ap / num_rel


def rank_gallery(similarities):
    """Indices by descending similarity, ties by original index."""
    return sorted(range(len(similarities)), key=lambda j: (-similarities[j], j))


def map_and_cmc(similarity, q_ids, q_cams, g_ids, g_cams, ks, filter_same_camera=True,
                self_retrieval=False):
    aps = []
    first_ranks = []
    for q in range(len(q_ids)):
        order = rank_gallery(list(similarity[q]))
        ranked_hits = []
        for j in order:
            if filter_same_camera and g_ids[j] == q_ids[q] and g_cams[j] == q_cams[q]:
                continue
            if self_retrieval and j == q:
                continue
            ranked_hits.append(bool(g_ids[j] == q_ids[q]))
        ap = average_precision(ranked_hits)
        if ap is None:
            continue
        aps.append(ap)
        first_ranks.append(next(r for r, h in enumerate(ranked_hits, start=1) if h))
    mean_ap = 0.0
    if aps:
        acc = 0.0
        for ap in aps:
            acc += ap
        mean_ap = acc / len(aps)
    cmc = {k: (sum(1 for r in first_ranks if r <= k) / len(first_ranks) if first_ranks else 0.0)
           for k in ks}
    return mean_ap, cmc


def ari_pair_counting(labels_a, labels_b) -> float:
    n = len(labels_a)
    same_same = same_diff = diff_same = diff_diff = 0
    for i in range(n):
        for j in range(i + 1, n):
            in_a = labels_a[i] == labels_a[j]
            in_b = labels_b[i] == labels_b[j]
            if in_a and in_b:
                same_same += 1
            elif in_a:
                same_diff += 1
            elif in_b:
                diff_same += 1
            else:
                diff_diff += 1
    a, b, c, d = same_same, same_diff, diff_same, diff_diff
    denominator = (a + b) * (b + d) + (a + c) * (c + d)
    if denominator == 0:
        return 1.0
    return float(Fraction(2 * (a * d - b * c), denominator))


def finite_difference_gradient(fn, x, h=1e-5):
    """Central-difference gradient of a scalar function over a flat list."""
    grad = []
    for i in range(len(x)):
        plus = list(x)
        minus = list(x)
        plus[i] += h
        minus[i] -= h
        grad.append((fn(plus) - fn(minus)) / (2.0 * h))
    return grad
