import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from icsreid.evaluation import (
    RetrievalProtocol,
    compute_ari,
    compute_cmc,
    compute_map,
    compute_nmi,
    emit_report,
    retrieval_metrics,
)


def _protocol(q_ids, q_cams, g_ids, g_cams, **kwargs):
    return RetrievalProtocol(
        query_identities=np.asarray(q_ids),
        query_cameras=np.asarray(q_cams),
        gallery_identities=np.asarray(g_ids),
        gallery_cameras=np.asarray(g_cams),
        **kwargs,
    )


def test_single_query_perfect_match():
    protocol = _protocol([1], [0], [1, 2, 3], [1, 1, 1])
    similarity = np.array([[0.9, 0.2, 0.1]])
    assert compute_map(similarity, protocol) == 1.0


def test_match_ranked_second_gives_half():
    protocol = _protocol([1], [0], [2, 1], [1, 1])
    similarity = np.array([[0.9, 0.5]])
    assert compute_map(similarity, protocol) == 0.5


def test_cmc_trivial_cases():
    protocol = _protocol([0, 1, 2], [0, 0, 0], [0, 1, 2], [1, 1, 1])
    diagonal = np.eye(3)
    cmc = compute_cmc(diagonal, protocol)
    assert cmc[1] == 1.0

    # match always ranked third
    protocol2 = _protocol([5], [0], [1, 2, 5, 3], [1, 1, 1, 1])
    similarity = np.array([[0.9, 0.8, 0.7, 0.1]])
    cmc2 = compute_cmc(similarity, protocol2, ks=(1, 5, 10))
    assert cmc2[1] == 0.0
    assert cmc2[5] == 1.0
    assert cmc2[10] == 1.0


def test_same_camera_matches_are_filtered():
    # the only same-identity gallery entry shares the query camera
    protocol = _protocol([1], [0], [1, 2], [0, 1])
    similarity = np.array([[0.99, 0.1]])
    assert compute_map(similarity, protocol) == 0.0  # no valid positives -> skipped
    unfiltered = _protocol([1], [0], [1, 2], [0, 1], filter_same_camera=False)
    assert compute_map(similarity, unfiltered) == 1.0


def test_self_retrieval_excludes_self():
    ids = [0, 0, 1]
    cams = [0, 1, 0]
    protocol = _protocol(ids, cams, ids, cams, self_retrieval=True, filter_same_camera=False)
    features = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    similarity = features @ features.T
    # query 0 matches query 1 (identity 0) at rank 1; query 2 has no positive
    assert compute_map(similarity, protocol) == 1.0


def test_map_cmc_match_bruteforce_oracle(rng):
    for _ in range(100):
        q = int(rng.integers(2, 12))
        g = int(rng.integers(3, 30))
        similarity = rng.standard_normal((q, g))
        q_ids = rng.integers(0, 5, q)
        g_ids = rng.integers(0, 5, g)
        q_cams = rng.integers(0, 3, q)
        g_cams = rng.integers(0, 3, g)
        protocol = _protocol(q_ids, q_cams, g_ids, g_cams)
        expected_map, expected_cmc = oracles.map_and_cmc(
            similarity.tolist(), q_ids.tolist(), q_cams.tolist(),
            g_ids.tolist(), g_cams.tolist(), ks=(1, 5, 10),
        )
        assert compute_map(similarity, protocol) == expected_map
        assert compute_cmc(similarity, protocol) == expected_cmc


def test_map_with_exact_ties_uses_gallery_order():
    protocol = _protocol([7], [0], [3, 7, 7], [1, 1, 1])
    similarity = np.array([[0.5, 0.5, 0.5]])  # all tied: stable order 0,1,2
    # ranked: gallery 0 (miss), 1 (hit), 2 (hit) -> AP = (1/2 + 2/3)/2
    assert compute_map(similarity, protocol) == pytest.approx((0.5 + 2 / 3) / 2)


def test_map_invariant_under_monotone_transform(rng):
    q, g = 6, 15
    similarity = rng.standard_normal((q, g))
    q_ids = rng.integers(0, 4, q)
    g_ids = rng.integers(0, 4, g)
    protocol = _protocol(q_ids, rng.integers(0, 2, q), g_ids, rng.integers(0, 2, g))
    base_map = compute_map(similarity, protocol)
    base_cmc = compute_cmc(similarity, protocol)
    transformed = np.exp(3.0 * similarity) + 5.0
    assert compute_map(transformed, protocol) == base_map
    assert compute_cmc(transformed, protocol) == base_cmc


def test_map_bounds_and_cmc_monotone(rng):
    for _ in range(20):
        q, g = 5, 12
        similarity = rng.standard_normal((q, g))
        protocol = _protocol(
            rng.integers(0, 3, q), rng.integers(0, 2, q),
            rng.integers(0, 3, g), rng.integers(0, 2, g),
        )
        value = compute_map(similarity, protocol)
        assert 0.0 <= value <= 1.0
        cmc = compute_cmc(similarity, protocol, ks=(1, 2, 5, 10))
        assert cmc[1] <= cmc[2] <= cmc[5] <= cmc[10]


def test_ari_trivial_cases():
    assert compute_ari([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    singletons = list(range(6))
    one_cluster = [0] * 6
    assert compute_ari(singletons, one_cluster) <= 0.0


def test_ari_matches_pair_counting_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(2, 25))
        a = rng.integers(0, 5, n).tolist()
        b = rng.integers(0, 5, n).tolist()
        assert compute_ari(a, b) == oracles.ari_pair_counting(a, b)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=2, max_size=30))
def test_ari_symmetric_and_rename_invariant(pairs):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    assert compute_ari(a, b) == compute_ari(b, a)
    renamed = [chr(ord("a") + v) for v in a]
    assert compute_ari(renamed, b) == compute_ari(a, b)


def test_ari_nmi_against_sklearn(rng):
    from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

    for _ in range(50):
        n = int(rng.integers(2, 40))
        a = rng.integers(0, 6, n)
        b = rng.integers(0, 6, n)
        assert compute_ari(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)
        assert compute_nmi(a, b) == pytest.approx(
            normalized_mutual_info_score(a, b), abs=1e-9
        )


def test_retrieval_metrics_wrapper(rng):
    features = rng.standard_normal((8, 16))
    ids = rng.integers(0, 3, 8)
    cams = rng.integers(0, 2, 8)
    protocol = _protocol(ids, cams, ids, cams, self_retrieval=True)
    metrics = retrieval_metrics(features, protocol, ks=(1, 5))
    assert set(metrics) == {"map", "rank1", "rank5"}


def test_emit_report_empty_log(tmp_path):
    files = emit_report([], tmp_path / "report")
    names = {f.name for f in files}
    assert names == {"epoch_metrics.csv", "metrics.txt", "run_log.json"}
    for f in files:
        assert f.exists()


def test_emit_report_standard_run(tmp_path):
    logs = [
        {"epoch": 1, "loss_gid": 2.0, "loss_icdl": 1.5, "lr": 0.1, "ari": 0.3},
        {"epoch": 2, "loss_gid": 1.0, "loss_icdl": 0.9, "lr": 0.2, "ari": 0.8},
    ]
    files = emit_report(logs, tmp_path / "report", {"map": 0.95, "rank1": 1.0})
    names = {f.name for f in files}
    assert "loss_curves.png" in names
    assert "association_quality.png" in names
    for f in files:
        assert f.stat().st_size > 0
    metrics = (tmp_path / "report" / "metrics.txt").read_text()
    assert "map=0.95" in metrics


def test_emit_report_golden_tables(tmp_path):
    logs = [
        {"epoch": 1, "loss_gid": 0.25, "lr": 0.001},
        {"epoch": 2, "loss_gid": 0.125, "lr": 0.002},
    ]
    emit_report(logs, tmp_path / "a", {"map": 0.5})
    emit_report(logs, tmp_path / "b", {"map": 0.5})
    golden = "epoch,loss_gid,lr\n1,0.25,0.001\n2,0.125,0.002\n"
    assert (tmp_path / "a" / "epoch_metrics.csv").read_text() == golden
    assert (tmp_path / "a" / "epoch_metrics.csv").read_text() == (
        tmp_path / "b" / "epoch_metrics.csv"
    ).read_text()
    assert (tmp_path / "a" / "metrics.txt").read_text() == "map=0.5\n"
