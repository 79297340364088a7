import math

import numpy as np
import pytest
import torch

import oracles
from icsreid.inter import (
    AssociationGraph,
    ClusterAssignment,
    InterMemory,
    association_diagnostics,
    build_association_graph,
    cluster_text_features,
    connected_components,
    init_inter_memory,
    loss_i2tce_inter,
    loss_inter_total,
    loss_ipcl,
    pairwise_distances,
)
from conftest import random_unit


def _random_id_layout(rng, cameras=3, ids_per_camera=(2, 5)):
    camera_of = []
    for camera in range(cameras):
        count = int(rng.integers(*ids_per_camera))
        camera_of.extend([camera] * count)
    return np.array(camera_of, dtype=np.int64)


def test_identical_pairs_connect_with_default_threshold(rng):
    # two cameras seeing the same four identities -> centroids coincide
    base = random_unit(rng, 4, 16).numpy()
    centroids = np.concatenate([base, base])
    camera_of = np.array([0] * 4 + [1] * 4)
    graph = build_association_graph(centroids, camera_of, threshold=1.7)
    assert graph.edges == frozenset({(i, i + 4) for i in range(4)})


def test_no_edges_when_all_distances_exceed_threshold(rng):
    centroids = np.eye(6)
    camera_of = np.array([0, 0, 0, 1, 1, 1])
    # orthonormal rows: every cross-camera distance is sqrt(2) > 1.0
    graph = build_association_graph(centroids, camera_of, threshold=1.0)
    assert graph.edges == frozenset()


def test_edge_set_matches_condition_checker(rng):
    for _ in range(50):
        camera_of = _random_id_layout(rng)
        centroids = random_unit(rng, len(camera_of), 6).numpy()
        threshold = float(rng.uniform(0.3, 2.0))
        graph = build_association_graph(centroids, camera_of, threshold)
        expected = oracles.edge_set_from_conditions(
            graph.distances.tolist(), camera_of.tolist(), threshold
        )
        assert set(graph.edges) == expected


def test_edges_never_join_same_camera_and_are_mutual(rng):
    for _ in range(30):
        camera_of = _random_id_layout(rng)
        centroids = random_unit(rng, len(camera_of), 4).numpy()
        graph = build_association_graph(centroids, camera_of, threshold=1.9)
        dist = graph.distances
        for i, j in graph.edges:
            assert camera_of[i] != camera_of[j]
            same_i = np.nonzero(camera_of == camera_of[i])[0]
            same_j = np.nonzero(camera_of == camera_of[j])[0]
            assert dist[i, j] == dist[same_i, j].min()
            assert dist[i, j] == dist[same_j, i].min()
            assert dist[i, j] < graph.threshold


def test_threshold_filter_commutes(rng):
    camera_of = _random_id_layout(rng, cameras=4)
    centroids = random_unit(rng, len(camera_of), 6).numpy()
    threshold = 0.9
    direct = build_association_graph(centroids, camera_of, threshold)
    unfiltered = build_association_graph(centroids, camera_of, threshold=100.0)
    refiltered = {
        (i, j) for i, j in unfiltered.edges if unfiltered.distances[i, j] < threshold
    }
    assert set(direct.edges) == refiltered


def test_single_camera_graph_is_empty(rng):
    centroids = random_unit(rng, 5, 4).numpy()
    graph = build_association_graph(centroids, np.zeros(5, dtype=np.int64), threshold=1.7)
    assert graph.edges == frozenset()


def test_distance_metrics(rng):
    centroids = random_unit(rng, 6, 8).numpy()
    euclid = pairwise_distances(centroids, "euclidean")
    cos = pairwise_distances(centroids, "cosine")
    for i in range(6):
        for j in range(6):
            direct = np.linalg.norm(centroids[i] - centroids[j])
            assert euclid[i, j] == pytest.approx(direct, abs=1e-9)
            assert cos[i, j] == pytest.approx(
                1.0 - float(centroids[i] @ centroids[j]), abs=1e-9
            )
    with pytest.raises(ValueError):
        pairwise_distances(centroids, "manhattan")


def test_components_edgeless_graph(rng):
    centroids = random_unit(rng, 5, 4).numpy()
    graph = build_association_graph(centroids, np.zeros(5, dtype=np.int64), threshold=1.0)
    assignment = connected_components(graph)
    assert assignment.cluster_count == 5
    np.testing.assert_array_equal(assignment.labels, np.arange(5))


def test_components_chain_across_cameras():
    graph = AssociationGraph(
        edges=frozenset({(0, 1), (1, 2)}),
        distances=np.zeros((3, 3)),
        camera_of=np.array([0, 1, 2]),
        threshold=1.0,
    )
    assignment = connected_components(graph)
    assert assignment.cluster_count == 1
    np.testing.assert_array_equal(assignment.labels, np.zeros(3, dtype=np.int64))


def test_components_match_union_find_oracle(rng):
    for _ in range(30):
        n = int(rng.integers(2, 30))
        possible = [(i, j) for i in range(n) for j in range(i + 1, n)]
        count = int(rng.integers(0, min(len(possible), n)))
        chosen_idx = rng.choice(len(possible), size=count, replace=False)
        edges = frozenset(possible[i] for i in chosen_idx)
        graph = AssociationGraph(
            edges=edges,
            distances=np.zeros((n, n)),
            camera_of=np.zeros(n, dtype=np.int64),
            threshold=1.0,
        )
        assignment = connected_components(graph)
        expected = oracles.components_union_find(n, edges)
        assert assignment.labels.tolist() == expected


def test_assignment_validations_and_diagnostics():
    with pytest.raises(ValueError):
        ClusterAssignment(labels=np.array([0, 2]), cluster_count=2)
    assignment = ClusterAssignment(labels=np.array([0, 0, 1, 0]), cluster_count=2)
    assert assignment.component_size_histogram() == {3: 1, 1: 1}
    camera_of = np.array([0, 0, 1, 1])
    assert assignment.camera_violation_count(camera_of) == 1  # ids 0,1 share camera 0


def test_zero_shift_world_association_is_perfect(small_world):
    manifest, truth, latents = small_world.manifest, small_world.truth, small_world.latents
    feats = {}
    for sample in manifest.samples:
        vec = torch.from_numpy(latents[sample.image_ref].astype(np.float64))
        feats.setdefault(sample.global_id, []).append(vec / vec.norm())
    centroids = torch.stack(
        [torch.stack(feats[g]).mean(dim=0) for g in range(manifest.num_global_ids)]
    )
    camera_of = np.array(
        [manifest.label_of_global(g)[0] for g in range(manifest.num_global_ids)]
    )
    # noise floor ~0.01 vs >=0.7 between distinct identities: a tight threshold
    # separates them cleanly (the 1.7 default targets real-feature scales)
    graph = build_association_graph(centroids, camera_of, threshold=0.5)
    assignment = connected_components(graph)
    from icsreid.evaluation import compute_ari

    assert compute_ari(assignment.labels, truth.labels_for_global_ids(manifest)) == 1.0
    diagnostics = association_diagnostics(graph, assignment)
    assert diagnostics["camera_violation_count"] == 0


def test_inter_memory_init_and_updates(rng):
    labels = np.array([0, 0, 1, 2])
    assignment = ClusterAssignment(labels=labels, cluster_count=3)
    sample_gids = np.array([0, 1, 2, 3, 3])
    feats = random_unit(rng, 5, 8)
    memory = init_inter_memory(assignment, feats, sample_gids, alpha=0.1, tau=0.05)
    assert memory.cluster_count == 3

    # prototype of a singleton cluster of one sample equals that feature
    torch.testing.assert_close(memory.prototypes[1], feats[2] / feats[2].norm())

    # two-member cluster: normalized mean, hand-checked
    expected = (feats[0] + feats[1] + feats[2 - 2]) if False else feats[0] + feats[1]
    expected = expected / expected.norm()
    mean = (feats[0] + feats[1]) / 2
    torch.testing.assert_close(memory.prototypes[0], mean / mean.norm())

    old = memory.prototypes[2].clone()
    new = random_unit(rng, 1, 8)[0]
    memory.update(2, new)
    blended = torch.tensor(
        oracles.momentum_blend(old.tolist(), new.tolist(), 0.1), dtype=old.dtype
    )
    torch.testing.assert_close(memory.prototypes[2], blended, rtol=1e-6, atol=1e-7)

    frozen = InterMemory(memory.prototypes, alpha=1.0)
    before = frozen.prototypes.clone()
    frozen.update(0, new)
    assert torch.equal(frozen.prototypes, before)

    replace = InterMemory(memory.prototypes, alpha=0.0)
    replace.update(0, new)
    torch.testing.assert_close(replace.prototypes[0], new / new.norm(), rtol=0, atol=0)

    with pytest.raises(ValueError):
        memory.update(9, new)


def test_ipcl_values(rng):
    single = InterMemory(random_unit(rng, 1, 8))
    query = random_unit(rng, 1, 8)[0]
    assert float(loss_ipcl(query, 0, single)) == pytest.approx(0.0)

    for _ in range(20):
        z = int(rng.integers(2, 6))
        memory = InterMemory(random_unit(rng, z, 8), tau=0.05)
        label = int(rng.integers(z))
        expected = oracles.info_nce(query.tolist(), memory.prototypes.tolist(), label, 0.05)
        assert float(loss_ipcl(query, label, memory)) == pytest.approx(expected, rel=1e-9)

    # permutation invariance
    memory = InterMemory(random_unit(rng, 4, 8), tau=0.05)
    base = float(loss_ipcl(query, 2, memory))
    perm = torch.tensor([2, 0, 3, 1])
    permuted = InterMemory(memory.prototypes[perm], tau=0.05)
    assert float(loss_ipcl(query, 0, permuted)) == pytest.approx(base, rel=1e-9)


def test_i2tce_inter_cases(rng):
    query = random_unit(rng, 1, 8)[0]
    single = random_unit(rng, 1, 8)
    assert float(loss_i2tce_inter(query, 0, single, smoothing=0.0)) == pytest.approx(0.0)

    # uniform similarities over four clusters -> log 4
    query4 = torch.tensor([1.0, 0.0, 0.0, 0.0, 0.0], dtype=torch.float64)
    texts = torch.eye(5, dtype=torch.float64)[1:]
    assert float(loss_i2tce_inter(query4, 2, texts, smoothing=0.1)) == pytest.approx(
        math.log(4), rel=1e-9
    )

    for _ in range(10):
        z = int(rng.integers(2, 5))
        texts = random_unit(rng, z, 8)
        label = int(rng.integers(z))
        smoothing = float(rng.uniform(0, 0.3))
        expected = oracles.smoothed_ce(query.tolist(), texts.tolist(), label, smoothing)
        assert float(loss_i2tce_inter(query, label, texts, smoothing=smoothing)) == pytest.approx(
            expected, rel=1e-9
        )


def test_cluster_text_features_aggregation(rng):
    assignment = ClusterAssignment(labels=np.array([0, 1, 0]), cluster_count=2)
    id_texts = random_unit(rng, 3, 8)
    clusters = cluster_text_features(assignment, id_texts)
    mean = (id_texts[0] + id_texts[2]) / 2
    torch.testing.assert_close(clusters[0], mean / mean.norm())
    torch.testing.assert_close(clusters[1], id_texts[1] / id_texts[1].norm())


def test_inter_total_additive_and_gradient(rng):
    memory = InterMemory(random_unit(rng, 3, 8), tau=0.05)
    texts = random_unit(rng, 3, 8)
    x0 = rng.standard_normal(8)

    query = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    total = loss_inter_total(query, 1, memory, texts)
    ipcl = loss_ipcl(query, 1, memory)
    tce = loss_i2tce_inter(query, 1, texts)
    assert float(total) == pytest.approx(float(ipcl) + float(tce), rel=1e-12)

    total.backward()

    def scalar(x):
        q = torch.tensor(x, dtype=torch.float64)
        return float(loss_inter_total(q, 1, memory, texts))

    fd = np.array(oracles.finite_difference_gradient(scalar, list(x0)))
    rel = np.abs(query.grad.numpy() - fd).max() / max(np.abs(query.grad.numpy()).max(), 1e-8)
    assert rel < 1e-4
