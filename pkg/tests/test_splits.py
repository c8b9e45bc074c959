import numpy as np
import pytest

from ovscene.core import BBox, ConceptSpace, Edge, Node, SceneGraph
from ovscene.resources import default_concepts, toy_concepts, toy_dataset, toy_split
from ovscene.splits import (SETTINGS, SplitSpec, apply_split, filter_training_graph, make_split,
                            split_census, split_dataset)
from ovscene.validation import ContractError

# hand-enumerated from the 25 toy images (see the table in the README)
TOY_CENSUS = {"closed": (25, 65, 39), "ovd": (20, 40, 20), "ovr": (20, 55, 25),
              "ovd_r": (15, 30, 15)}
TOY_DETECTION_ONLY = {"closed": 0, "ovd": 5, "ovr": 5, "ovd_r": 10}


def skateboard_graph():
    nodes = [Node(BBox(0, 0, 10, 20), "man"), Node(BBox(0, 15, 12, 22), "skateboard"),
             Node(BBox(1, 19, 3, 22), "wheel")]
    return SceneGraph("fig", 30, 30, nodes, [Edge(0, 1, "riding"), Edge(2, 1, "on")])


@pytest.mark.parametrize("setting", SETTINGS)
def test_toy_censuses(setting):
    graphs = toy_dataset()
    spec = toy_split(setting)
    assert tuple(split_census(graphs, spec)) == TOY_CENSUS[setting]
    assert len(split_dataset(graphs, spec)[1]) == TOY_DETECTION_ONLY[setting]


def test_empty_dataset_census():
    assert tuple(split_census([], toy_split("ovd_r"))) == (0, 0, 0)


def test_novel_relation_example():
    g = filter_training_graph(skateboard_graph(), SplitSpec("ovr", novel_relations=["riding"]))
    assert g.nodes == skateboard_graph().nodes
    assert g.triplets() == [("wheel", "on", "skateboard")]


def test_novel_object_example():
    spec = SplitSpec("ovd", novel_objects=["skateboard"])
    assert filter_training_graph(skateboard_graph(), spec) is None
    kept = apply_split(skateboard_graph(), spec)
    assert [n.category for n in kept.nodes] == ["man", "wheel"] and kept.edges == ()


@pytest.mark.parametrize("setting", SETTINGS)
def test_filtering_is_idempotent_and_removes_novel_names(setting):
    spec = toy_split(setting)
    for g in toy_dataset():
        once = apply_split(g, spec)
        assert apply_split(once, spec) == once
        f = filter_training_graph(g, spec)
        if f is None:
            continue
        assert filter_training_graph(f, spec) == f
        if spec.drops_objects:
            assert not {n.category for n in f.nodes} & spec.novel_objects
        if spec.drops_relations:
            assert not {e.predicate for e in f.edges} & spec.novel_relations


def test_closed_is_identity():
    spec = SplitSpec("closed")
    for g in toy_dataset() + [SceneGraph("empty", 5, 5)]:
        assert filter_training_graph(g, spec) is g


def test_make_split_sizes():
    cs = default_concepts()
    assert len(make_split(cs, "ovr").novel_relations) == 15
    assert len(make_split(cs, "ovd").novel_objects) == 45
    s = make_split(cs, "ovd_r", seed=3)
    assert (len(s.novel_objects), len(s.novel_relations)) == (45, 15)
    assert s.novel_objects == make_split(cs, "ovd", seed=3).novel_objects
    closed = make_split(cs, "closed")
    assert not closed.novel_objects and not closed.novel_relations
    assert make_split(cs, "ovr", seed=1) == make_split(cs, "ovr", seed=1)
    assert make_split(cs, "ovr", seed=1) != make_split(cs, "ovr", seed=2)


def test_split_errors():
    with pytest.raises(ContractError):
        make_split(toy_concepts().with_splits(), "mixed")
    small = ConceptSpace.random(["a", "b"], ["r", "s"], 4)
    with pytest.raises(ContractError):
        make_split(small, "ovd")
    with pytest.raises(ContractError):
        SplitSpec("ovr", novel_objects=["cat"])


def test_split_file_round_trip(tmp_path):
    spec = toy_split("ovd_r")
    spec.save(tmp_path / "s.json")
    assert SplitSpec.load(tmp_path / "s.json") == spec


def test_no_novel_name_leaks_with_bundled_vocabulary():
    cs = default_concepts()
    spec = make_split(cs, "ovd_r", seed=0)
    rng = np.random.default_rng(0)
    objects, rels = cs.names("object"), cs.names("relation")
    for k in range(50):
        nodes = [Node(BBox(0, 0, 1, 1), objects[i]) for i in rng.choice(150, 6, replace=False)]
        edges = [Edge(int(s), int(o), rels[rng.integers(50)])
                 for s, o in rng.integers(0, 6, (8, 2)) if s != o]
        edges = list({e.key: e for e in edges}.values())
        f = apply_split(SceneGraph(str(k), 2, 2, nodes, edges), spec)
        assert not {n.category for n in f.nodes} & spec.novel_objects
        assert not {e.predicate for e in f.edges} & spec.novel_relations
