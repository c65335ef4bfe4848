import json

import numpy as np
import pytest

from otalign.errors import InvalidArgumentError
from otalign.evaluation import (
    BoundingBox,
    LocalizationCase,
    RetrievalRanking,
    format_metric_lines,
    iou,
    localization_recall,
    rank_by_score,
    recall_at_k,
    retrieval_metrics,
    rsum,
    write_metric_report,
)


def rankings_with_gold_ranks(ranks, candidates=10):
    """One query per rank; the gold id sits at position rank-1 of its list."""
    out = []
    for qi, rank in enumerate(ranks):
        ids = [f"c{qi}_{j}" for j in range(candidates)]
        gold = ids[rank - 1]
        out.append(RetrievalRanking(f"q{qi}", ids, {gold}))
    return out


# ---------------------------------------------------------------------------
# Recall.
# ---------------------------------------------------------------------------


def test_recall_at_k_gold_ranks_one_three_seven():
    rankings = rankings_with_gold_ranks([1, 3, 7])
    assert recall_at_k(rankings, 1) == pytest.approx(1 / 3)
    assert recall_at_k(rankings, 5) == pytest.approx(2 / 3)
    assert recall_at_k(rankings, 10) == 1.0


def test_recall_at_k_all_rank_one():
    rankings = rankings_with_gold_ranks([1, 1, 1, 1])
    for k in (1, 5, 10):
        assert recall_at_k(rankings, k) == 1.0


def test_recall_at_k_beyond_list_counts_any_hit():
    rankings = rankings_with_gold_ranks([3], candidates=3)
    assert recall_at_k(rankings, 100) == 1.0


def test_recall_at_k_is_monotone_in_k():
    rankings = rankings_with_gold_ranks([2, 5, 9, 1, 10])
    values = [recall_at_k(rankings, k) for k in range(1, 12)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_recall_at_k_validation():
    rankings = rankings_with_gold_ranks([1])
    with pytest.raises(InvalidArgumentError):
        recall_at_k(rankings, 0)
    with pytest.raises(InvalidArgumentError):
        recall_at_k([], 1)


def test_retrieval_ranking_rejects_duplicates_and_empty_gold():
    with pytest.raises(InvalidArgumentError, match="duplicates"):
        RetrievalRanking("q", ["a", "a"], {"a"})
    with pytest.raises(InvalidArgumentError, match="gold"):
        RetrievalRanking("q", ["a", "b"], set())


def test_rsum_perfect_is_600():
    assert rsum([1.0, 1.0, 1.0], [1.0, 1.0, 1.0]) == 600.0


def test_rsum_mixed_recalls():
    value = rsum([0.69, 0.918, 0.959], [0.504, 0.776, 0.855])
    assert value == pytest.approx(470.2)


def test_rsum_zero():
    assert rsum([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]) == 0.0


def test_rsum_validation():
    with pytest.raises(InvalidArgumentError):
        rsum([1.0, 1.0], [1.0, 1.0, 1.0])
    with pytest.raises(InvalidArgumentError):
        rsum([1.0, 1.0, 1.5], [1.0, 1.0, 1.0])


# ---------------------------------------------------------------------------
# Boxes.
# ---------------------------------------------------------------------------


def test_iou_identical_boxes():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0


def test_iou_disjoint_boxes():
    assert iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0


def test_iou_shared_edge_is_zero():
    assert iou((0, 0, 10, 10), (10, 0, 20, 10)) == 0.0


def test_iou_quarter_overlap():
    # 5x5 intersection over 100 + 100 - 25.
    assert iou((0, 0, 10, 10), (5, 5, 15, 15)) == pytest.approx(25 / 175)


def test_iou_is_symmetric():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x1, y1 = rng.uniform(0, 5, size=2)
        a = (x1, y1, x1 + rng.uniform(1, 5), y1 + rng.uniform(1, 5))
        x1, y1 = rng.uniform(0, 5, size=2)
        b = (x1, y1, x1 + rng.uniform(1, 5), y1 + rng.uniform(1, 5))
        assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-15)


def test_iou_accepts_bounding_box_objects():
    a = BoundingBox(0, 0, 4, 4)
    assert iou(a, (0, 0, 4, 4)) == 1.0
    assert a.area == 16.0


def test_iou_rejects_bad_boxes():
    with pytest.raises(InvalidArgumentError, match="4 coordinates"):
        iou((0, 0, 10), (0, 0, 10, 10))
    with pytest.raises(InvalidArgumentError, match="positive area"):
        iou((0, 0, 10, 10), (5, 5, 5, 9))
    with pytest.raises(InvalidArgumentError, match="positive area"):
        BoundingBox(0, 0, -1, 5)


# ---------------------------------------------------------------------------
# Localization.
# ---------------------------------------------------------------------------


def two_region_case(token=0):
    return LocalizationCase(token, [(0, 0, 10, 10), (20, 0, 30, 10)], [(0, 0, 10, 10)])


def test_localization_recall_exact_match_hits():
    assert localization_recall([two_region_case()], [[0, 1]], k=1) == 1.0


def test_localization_recall_below_threshold_misses():
    # Overlap 10x4 over union 100 + 100 - 40 gives IoU 0.25.
    case = LocalizationCase(0, [(0, 0, 10, 10)], [(0, 6, 10, 16)])
    assert localization_recall([case], [[0]], k=1, iou_threshold=0.5) == 0.0
    assert localization_recall([case], [[0]], k=1, iou_threshold=0.25) == 1.0


def test_localization_recall_counts_hits_within_k():
    case = two_region_case()
    assert localization_recall([case], [[1, 0]], k=1) == 0.0
    assert localization_recall([case], [[1, 0]], k=2) == 1.0


def test_localization_recall_fraction_fixture():
    cases = [two_region_case(token=i) for i in range(10)]
    predictions = [[0, 1]] * 4 + [[1, 0]] * 6
    assert localization_recall(cases, predictions, k=1) == pytest.approx(0.4)


def test_localization_recall_monotone_in_k_antitone_in_threshold():
    rng = np.random.default_rng(13)
    cases, predictions = [], []
    for i in range(12):
        boxes = []
        for _ in range(4):
            x1, y1 = rng.uniform(0, 8, size=2)
            boxes.append((x1, y1, x1 + rng.uniform(2, 6), y1 + rng.uniform(2, 6)))
        cases.append(LocalizationCase(i, boxes, [boxes[rng.integers(4)]]))
        predictions.append(list(rng.permutation(4)))
    by_k = [localization_recall(cases, predictions, k=k) for k in (1, 2, 3, 4)]
    assert all(a <= b for a, b in zip(by_k, by_k[1:]))
    by_thr = [localization_recall(cases, predictions, k=2, iou_threshold=t) for t in (0.9, 0.5, 0.1)]
    assert all(a <= b for a, b in zip(by_thr, by_thr[1:]))


def test_localization_recall_validation():
    case = two_region_case()
    with pytest.raises(InvalidArgumentError):
        localization_recall([], [], k=1)
    with pytest.raises(InvalidArgumentError):
        localization_recall([case], [[0], [1]], k=1)
    with pytest.raises(InvalidArgumentError, match="out of range"):
        localization_recall([case], [[5]], k=1)
    with pytest.raises(InvalidArgumentError):
        localization_recall([case], [[0]], k=1, iou_threshold=1.5)


def test_localization_case_validation():
    with pytest.raises(InvalidArgumentError, match="gold"):
        LocalizationCase(0, [(0, 0, 1, 1)], [])
    with pytest.raises(InvalidArgumentError, match="candidate"):
        LocalizationCase(0, [], [(0, 0, 1, 1)])


# ---------------------------------------------------------------------------
# Ranking and aggregate metrics.
# ---------------------------------------------------------------------------


def test_rank_by_score_descending():
    assert rank_by_score([0.1, 0.9, 0.5]) == [1, 2, 0]


def test_rank_by_score_ties_keep_lowest_index():
    assert rank_by_score([0.5, 0.5, 0.5]) == [0, 1, 2]
    assert rank_by_score([0.1, 0.5, 0.5]) == [1, 2, 0]


def test_rank_by_score_maps_candidate_ids():
    assert rank_by_score([0.1, 0.9], ["a", "b"]) == ["b", "a"]


def test_rank_by_score_validation():
    with pytest.raises(InvalidArgumentError):
        rank_by_score([])
    with pytest.raises(InvalidArgumentError):
        rank_by_score([[0.1, 0.2]])
    with pytest.raises(InvalidArgumentError):
        rank_by_score([0.1, 0.2], ["a"])


def test_retrieval_metrics_identity_matrix():
    metrics = retrieval_metrics(np.eye(4))
    for k in (1, 5, 10):
        assert metrics[f"i2t_R@{k}"] == 1.0
        assert metrics[f"t2i_R@{k}"] == 1.0
    assert metrics["rsum"] == 600.0


def test_retrieval_metrics_hand_matrix():
    # Image 0 ranks its text second; text 2 ranks its image second.
    scores = np.array(
        [
            [0.5, 0.9, 0.0],
            [0.1, 0.8, 0.2],
            [0.0, 0.1, 0.6],
        ]
    )
    metrics = retrieval_metrics(scores, ks=(1, 2, 3))
    assert metrics["i2t_R@1"] == pytest.approx(2 / 3)
    assert metrics["i2t_R@2"] == 1.0
    assert metrics["t2i_R@1"] == pytest.approx(2 / 3)
    assert metrics["t2i_R@2"] == 1.0
    assert metrics["rsum"] == pytest.approx(100 * (2 / 3 + 1 + 1) * 2)


def test_retrieval_metrics_rejects_non_square():
    with pytest.raises(InvalidArgumentError):
        retrieval_metrics(np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# Reports.
# ---------------------------------------------------------------------------


def test_format_metric_lines_order_and_percent():
    metrics = {
        "rsum": 470.2,
        "t2i_R@1": 0.5,
        "i2t_R@10": 1.0,
        "i2t_R@1": 1 / 3,
        "loc_R@1": 0.25,
        "t2i_R@10": 0.75,
    }
    assert format_metric_lines(metrics) == [
        "i2t_R@1=33.3333333",
        "i2t_R@10=100",
        "t2i_R@1=50",
        "t2i_R@10=75",
        "loc_R@1=25",
        "rsum=470.2",
    ]


def test_write_metric_report_files(tmp_path):
    metrics = {"i2t_R@1": 0.6954, "rsum": 470.2}
    metadata = {"dataset": "demo", "seed": 3}
    txt_path, json_path = write_metric_report(tmp_path / "run", metrics, metadata)
    assert txt_path.name == "run.txt" and json_path.name == "run.json"
    assert txt_path.read_text() == "i2t_R@1=69.54\nrsum=470.2\n"
    payload = json.loads(json_path.read_text())
    assert payload["metrics"]["i2t_R@1"] == 0.6954
    assert payload["rounded_percent"] == {"i2t_R@1": 69.5, "rsum": 470.2}
    assert payload["metadata"] == {"dataset": "demo", "seed": 3}
