"""Global-id classifier and the multi-positive adversarial loss.

Training alternates two gradient flows that never overlap. The classifier
loss sees detached features and therefore moves only the classifier rows.
The adversarial loss sees detached classifier rows and moves only the
backbone: it treats every accumulated id sharing the query's cross-camera
pseudo-label as a positive class, weighting them so the weights over the
positive set sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import torch
from torch import Tensor, nn

from .contrast import cosine_matrix, l2_normalize
from .inter import ClusterAssignment


class GlobalClassifier(nn.Module):
    """One weight row per accumulated id, used at unit norm."""

    def __init__(self, num_global_ids: int, dim: int, tau: float = 0.05):
        super().__init__()
        if num_global_ids < 1:
            raise ValueError("classifier needs at least one class")
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.weight = nn.Parameter(torch.empty(num_global_ids, dim))
        nn.init.normal_(self.weight, std=dim**-0.5)
        self.tau = tau

    @classmethod
    def from_centroids(cls, centroids: Tensor, tau: float = 0.05) -> "GlobalClassifier":
        classifier = cls(centroids.shape[0], centroids.shape[1], tau)
        with torch.no_grad():
            classifier.weight.data = l2_normalize(centroids.detach().clone())
        return classifier

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def logits(self, features: Tensor, detach_weight: bool = False) -> Tensor:
        weight = self.weight.detach() if detach_weight else self.weight
        return cosine_matrix(features, weight) / self.tau


def loss_gid(features: Tensor, global_labels: Tensor, classifier: GlobalClassifier) -> Tensor:
    """Cross-entropy over all global ids, averaged over the batch.

    Features are detached internally: minimizing this loss trains the
    classifier rows and leaves the backbone untouched.
    """
    if features.shape[0] == 0:
        raise ValueError("empty batch")
    if int(global_labels.max()) >= classifier.num_classes:
        raise ValueError("label out of range for the classifier")
    logits = classifier.logits(features.detach())
    return nn.functional.cross_entropy(logits, global_labels)


@dataclass(frozen=True)
class PositiveSet:
    """Pseudo-label siblings of one accumulated id.

    ``positives`` holds every global id sharing the owner's pseudo-label
    (the owner included); ``negatives`` is the complement over all ids.
    """

    own_global_id: int
    positives: frozenset[int]
    negatives: frozenset[int]
    num_global_ids: int

    def __post_init__(self):
        if self.own_global_id not in self.positives:
            raise ValueError("own id must be one of the positives")
        if self.positives & self.negatives:
            raise ValueError("positives and negatives must be disjoint")
        if len(self.positives) + len(self.negatives) != self.num_global_ids:
            raise ValueError("positives and negatives must cover all global ids")

    @property
    def size(self) -> int:
        return len(self.positives)


def build_positive_sets(assignment: ClusterAssignment) -> dict[int, PositiveSet]:
    """Positive/negative split of the global ids for every query id."""
    n = len(assignment.labels)
    all_ids = frozenset(range(n))
    cluster_members = [frozenset(group) for group in assignment.members]
    sets = {}
    for gid in range(n):
        positives = cluster_members[int(assignment.labels[gid])]
        sets[gid] = PositiveSet(
            own_global_id=gid,
            positives=positives,
            negatives=all_ids - positives,
            num_global_ids=n,
        )
    return sets


def weight_q(g: int, positive_set: PositiveSet, epsilon):
    """Class weight of global id ``g`` for one query.

    Own id: ``1 - epsilon + epsilon/G``; other positives: ``epsilon/G``;
    negatives: 0. Accepts float or ``fractions.Fraction`` epsilon and keeps
    the arithmetic in that type, so the sum-to-one identity can be checked
    exactly.
    """
    if not 0 < float(epsilon) <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    if g in positive_set.negatives:
        return epsilon * 0
    if g not in positive_set.positives:
        raise ValueError(f"global id {g} is neither positive nor negative")
    share = epsilon / positive_set.size
    if g == positive_set.own_global_id:
        return 1 - epsilon + share
    return share


def weight_q_exact(g: int, positive_set: PositiveSet, epsilon: float) -> Fraction:
    return weight_q(g, positive_set, Fraction(epsilon))


def loss_ical(
    features: Tensor,
    global_labels: Tensor,
    positive_sets: dict[int, PositiveSet],
    classifier: GlobalClassifier,
    epsilon: float = 0.8,
    full_softmax: bool = False,
) -> Tensor:
    """Multi-positive adversarial loss, averaged over the batch.

    For each positive class g the term is -q(g) * log of g's probability in
    a softmax whose denominator holds g's logit plus all negative logits
    (other positives are excluded unless ``full_softmax`` is set). Classifier
    rows are detached internally: minimizing this loss trains the backbone
    only.
    """
    if features.shape[0] == 0:
        raise ValueError("empty batch")
    logits = classifier.logits(features, detach_weight=True)
    total = logits.new_zeros(())
    for i, label in enumerate(global_labels.tolist()):
        pset = positive_sets[int(label)]
        negative_idx = torch.tensor(sorted(pset.negatives), dtype=torch.long)
        sample_loss = logits.new_zeros(())
        for g in sorted(pset.positives):
            q = weight_q(g, pset, epsilon)
            if full_softmax:
                log_denominator = torch.logsumexp(logits[i], dim=0)
            else:
                denom_logits = torch.cat([logits[i, g].reshape(1), logits[i, negative_idx]])
                log_denominator = torch.logsumexp(denom_logits, dim=0)
            sample_loss = sample_loss - q * (logits[i, g] - log_denominator)
        total = total + sample_loss
    return total / features.shape[0]
