import logging

import numpy as np
import pytest

from ovscene.core import BBox, Edge, Node, RankedTriplets, SceneGraph, Triplet
from ovscene.evaluation import (EvalConfig, cap_objects, credit_ranks, evaluate,
                                evaluate_partitions, format_table, gt_triplets, match_triplet,
                                recall_at_k)
from ovscene.resources import toy_dataset, toy_split
from ovscene.splits import SplitSpec
from ovscene.validation import ContractError

from oracles import as_tuples, best_credit_count, evaluation_fixture

CLOSED = SplitSpec("closed")


def node(label, box, score=1.0):
    return Node(BBox(*box), label, score)


def trip(s, p, o, conf=1.0):
    return Triplet(s, p, o, conf)


def test_match_triplet_examples():
    man, board = node("man", (0, 0, 10, 10)), node("board", (0, 10, 10, 20))
    g = trip(man, "on", board)
    assert match_triplet(g, g)
    shifted = node("man", (0, 0, 10, 4))  # IoU 0.4 with `man`
    assert shifted.box.area / man.box.area == pytest.approx(0.4)
    assert not match_triplet(trip(shifted, "on", board), g)
    assert not match_triplet(trip(man, "near", board), g)


def test_fixtures_match_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for cfg in (EvalConfig(), EvalConfig(ks=(1, 3, 5, 10))):
        for _ in range(50):
            gt, pred = evaluation_fixture(rng)
            ranked = RankedTriplets.from_graph(pred)
            r = recall_at_k(ranked, gt, cfg)
            gts, preds = as_tuples(gt_triplets(gt)), as_tuples(ranked.triplets)
            for k in cfg.ks:
                assert r[k] == best_credit_count(preds, gts, k) / len(gts)
            values = [r[k] for k in cfg.ks]
            assert values == sorted(values)


def test_greedy_crediting_can_lose_to_optimal_on_adversarial_input():
    # the top prediction overlaps both ground truths; the second overlaps only the first
    a, b = node("x", (0, 0, 10, 10)), node("x", (0, 4, 10, 14))
    obj = node("y", (50, 50, 60, 60))
    gts = [trip(a, "p", obj), trip(b, "p", obj)]
    preds = RankedTriplets("i", [trip(node("x", (0, 2, 10, 12)), "p", obj, 0.9),
                                 trip(a, "p", obj, 0.8)])
    assert credit_ranks(preds, gts) == [0, None]
    assert best_credit_count(as_tuples(preds.triplets), as_tuples(gts), 20) == 2


def test_simple_examples():
    man, board = node("man", (0, 0, 10, 10)), node("board", (0, 10, 10, 20))
    dog = node("dog", (50, 50, 60, 60))
    gt = SceneGraph("i", 100, 100, [man, board, dog], [Edge(0, 1, "on"), Edge(2, 1, "near")])
    perfect = RankedTriplets("i", gt_triplets(gt) + [trip(man, "near", dog, 0.5)])
    assert recall_at_k(perfect, gt) == {20: 1.0, 50: 1.0, 100: 1.0}
    junk = [trip(man, "near", dog, 0.9)] * 19
    half = RankedTriplets("i", junk + [trip(man, "on", board, 0.5)])
    assert recall_at_k(half, gt)[20] == 0.5
    assert recall_at_k(RankedTriplets("i", ()), gt) == {20: 0.0, 50: 0.0, 100: 0.0}
    dupes = RankedTriplets("i", [trip(man, "on", board)] * 3)
    assert recall_at_k(dupes, gt)[20] == 0.5


def test_contract_errors():
    man = node("man", (0, 0, 10, 10))
    gt = SceneGraph("i", 100, 100, [man, man], [Edge(0, 1, "on")])
    with pytest.raises(ContractError, match="sorted"):
        recall_at_k(RankedTriplets("i", [trip(man, "on", man, 0.1), trip(man, "on", man, 0.9)]), gt)
    with pytest.raises(ContractError):
        recall_at_k(RankedTriplets("i", ()), SceneGraph("i", 10, 10))
    with pytest.raises(ContractError):
        EvalConfig(ks=(50, 20))
    with pytest.raises(ContractError):
        EvalConfig(partition="rare")


def test_identity_predictions_score_one_on_every_nonempty_partition():
    graphs = toy_dataset()
    for setting in ("closed", "ovd", "ovr", "ovd_r"):
        for rep in evaluate_partitions(graphs, graphs, toy_split(setting)):
            if rep.empty:
                assert rep.partition in ("novel_object", "novel_relation")
                assert rep.recall == {20: None, 50: None, 100: None}
            else:
                assert set(rep.recall.values()) == {1.0}
                assert set(rep.mean_recall.values()) == {1.0}


def test_empty_partition_is_reported_empty():
    rep = evaluate(toy_dataset(), toy_dataset(), SplitSpec("ovr", novel_relations=["flying"]),
                   EvalConfig(partition="novel_relation"))
    assert rep.empty and rep.recall[50] is None
    assert "  -  " in format_table([rep])


def test_image_level_micro_and_mean_recall():
    a, b, c = node("a", (0, 0, 10, 10)), node("b", (20, 0, 30, 10)), node("c", (40, 0, 50, 10))
    g1 = SceneGraph("1", 100, 100, [a, b, c], [Edge(0, 1, "p"), Edge(1, 2, "p"), Edge(0, 2, "q")])
    g2 = SceneGraph("2", 100, 100, [a, b], [Edge(0, 1, "q")])
    p1 = SceneGraph("1", 100, 100, [a, b, c], [Edge(0, 1, "p")])
    p2 = SceneGraph("2", 100, 100, [a, b], [Edge(0, 1, "q")])
    rep = evaluate([g1, g2], [p1, p2], CLOSED)
    assert rep.recall[50] == pytest.approx((1 / 3 + 1) / 2)
    # per image and predicate: p -> [1/2], q -> [0, 1]; then mean over predicates
    assert rep.per_predicate["p"][50] == pytest.approx(0.5)
    assert rep.per_predicate["q"][50] == pytest.approx(0.5)
    assert rep.mean_recall[50] == pytest.approx(0.5)
    micro = evaluate([g1, g2], [p1, p2], CLOSED, EvalConfig(micro=True))
    assert micro.recall[50] == pytest.approx(2 / 4)


def test_partitions_filter_ground_truth():
    graphs = toy_dataset()
    spec = toy_split("ovd_r")
    rep = evaluate(graphs, graphs, spec, EvalConfig(partition="novel_relation"))
    expected = sum(any(e.predicate in spec.novel_relations for e in g.edges) for g in graphs)
    assert rep.n_images == expected
    assert set(rep.per_predicate) <= spec.novel_relations


def test_missing_and_unknown_images_are_listed(caplog):
    graphs = toy_dataset()
    extra = SceneGraph("not-there", 10, 10)
    with caplog.at_level(logging.WARNING):
        rep = evaluate(graphs, graphs[1:] + [extra], CLOSED)
    assert rep.missing_images == [graphs[0].image_id]
    assert rep.unknown_images == ["not-there"]
    # one toy image has no relations, so 24 images are scorable
    assert rep.n_images == 23
    assert "without predictions" in caplog.text


def test_capping_objects_never_increases_recall():
    rng = np.random.default_rng(1)
    for _ in range(30):
        gt, pred = evaluation_fixture(rng)
        full = evaluate([gt], [pred], CLOSED)
        for cap in (1, 3, 6):
            capped = evaluate([gt], [pred], CLOSED, EvalConfig(max_objects=cap))
            assert all(capped.recall[k] <= full.recall[k] for k in full.recall)
        assert len(cap_objects(pred, 3).nodes) == min(3, len(pred.nodes))


def test_predcls_uses_ground_truth_boxes_and_labels():
    gt = SceneGraph("i", 100, 100, [node("man", (0, 0, 20, 40)), node("board", (0, 35, 25, 45))],
                    [Edge(0, 1, "on")])
    # detector got the label wrong and the box a bit off; predcls swaps in the gt node
    pred = SceneGraph("i", 100, 100, [node("woman", (2, 1, 21, 41)), node("board", (0, 30, 25, 45))],
                      [Edge(0, 1, "on", 0.8)])
    assert evaluate([gt], [pred], CLOSED).recall[20] == 0.0
    rep = evaluate([gt], [pred], CLOSED, EvalConfig(protocol="predcls"))
    assert rep.recall[20] == 1.0


def test_report_json_shape():
    rep = evaluate(toy_dataset(), toy_dataset(), CLOSED)
    obj = rep.to_json()
    assert obj["recall"] == {"20": 1.0, "50": 1.0, "100": 1.0}
    assert obj["empty"] is False and obj["n_images"] == 24
