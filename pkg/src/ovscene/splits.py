"""Closed / OvD / OvR / OvD+R benchmark settings built by filtering annotations."""

import json
import math
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from .core import Edge, SceneGraph, normalize_name
from .validation import ContractError, SchemaError

SETTINGS = ("closed", "ovd", "ovr", "ovd_r")
NOVEL_FRACTION = 0.3  # 70% base / 30% novel objects; 15 of 50 relations

Census = namedtuple("Census", "images nodes edges")


@dataclass(frozen=True)
class SplitSpec:
    setting: str
    novel_objects: frozenset = frozenset()
    novel_relations: frozenset = frozenset()
    seed: int = None

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ContractError(f"unknown setting {self.setting!r}; expected one of {SETTINGS}")
        object.__setattr__(self, "novel_objects",
                           frozenset(normalize_name(n) for n in self.novel_objects))
        object.__setattr__(self, "novel_relations",
                           frozenset(normalize_name(n) for n in self.novel_relations))
        if self.setting in ("closed", "ovr") and self.novel_objects:
            raise ContractError(f"{self.setting} setting cannot have novel objects")
        if self.setting in ("closed", "ovd") and self.novel_relations:
            raise ContractError(f"{self.setting} setting cannot have novel relations")

    @property
    def drops_objects(self):
        return self.setting in ("ovd", "ovd_r")

    @property
    def drops_relations(self):
        return self.setting in ("ovr", "ovd_r")

    def to_json(self):
        return {"setting": self.setting,
                "novel_objects": sorted(self.novel_objects),
                "novel_relations": sorted(self.novel_relations)}

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(obj["setting"], obj.get("novel_objects", ()),
                       obj.get("novel_relations", ()), obj.get("seed"))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed split file: {exc!r}") from exc

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)
            f.write("\n")


def _pick(names, k, seed, stream):
    order = np.random.default_rng([seed, stream]).permutation(len(names))
    ordered = sorted(names)
    return frozenset(ordered[i] for i in order[:k])


def n_novel_objects(n):
    return math.ceil(NOVEL_FRACTION * n - 1e-9)


def n_novel_relations(n):
    return math.floor(NOVEL_FRACTION * n + 0.5)


def make_split(cs, setting, seed=0):
    """Draw novel object/relation names for a setting from a seeded shuffle.

    OvD marks ceil(30%) of the object names novel, OvR marks 30% of the
    relation names (rounded to nearest, 15 of 50), OvD+R does both with the
    same draws.
    """
    if setting not in SETTINGS:
        raise ContractError(f"unknown setting {setting!r}")
    objects, relations = cs.names("object"), cs.names("relation")
    if setting != "closed" and (len(objects) < 10 or len(relations) < 2):
        raise ContractError(f"vocabulary too small for {setting}: need >= 10 objects and "
                            f">= 2 relations, have {len(objects)} and {len(relations)}")
    novel_obj = _pick(objects, n_novel_objects(len(objects)), seed, 0) \
        if setting in ("ovd", "ovd_r") else frozenset()
    novel_rel = _pick(relations, n_novel_relations(len(relations)), seed, 1) \
        if setting in ("ovr", "ovd_r") else frozenset()
    return SplitSpec(setting, novel_obj, novel_rel, seed)


def apply_split(g, spec):
    """Filtered copy of `g`, kept even when it has no edges left."""
    if spec.setting == "closed":
        return g
    nodes, edges = list(g.nodes), list(g.edges)
    if spec.drops_objects:
        keep = [i for i, n in enumerate(nodes) if n.category not in spec.novel_objects]
        remap = {old: new for new, old in enumerate(keep)}
        nodes = [nodes[i] for i in keep]
        edges = [Edge(remap[e.subject], remap[e.object], e.predicate, e.score)
                 for e in edges if e.subject in remap and e.object in remap]
    if spec.drops_relations:
        edges = [e for e in edges if e.predicate not in spec.novel_relations]
    return SceneGraph(g.image_id, g.width, g.height, nodes, edges)


def filter_training_graph(g, spec):
    """Training annotation for `g` under `spec`, or None if no edge survives.

    Closed is the identity on every graph.
    """
    if spec.setting == "closed":
        return g
    out = apply_split(g, spec)
    return out if out.edges else None


def split_dataset(graphs, spec):
    """(relation-training graphs, detection-only graphs).

    Detection-only graphs are those that lost every edge but still have nodes.
    """
    relation, detection = [], []
    for g in graphs:
        f = apply_split(g, spec)
        if f.edges or spec.setting == "closed":
            relation.append(f)
        elif f.nodes:
            detection.append(f)
    return relation, detection


def split_census(graphs, spec):
    """Counts of images, nodes and edges retained for relation training."""
    images = nodes = edges = 0
    for g in graphs:
        f = filter_training_graph(g, spec)
        if f is None:
            continue
        images += 1
        nodes += len(f.nodes)
        edges += len(f.edges)
    return Census(images, nodes, edges)
