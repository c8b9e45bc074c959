"""Scene-graph data model, JSON (de)serialization and graph validation."""

import json
import math
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from .validation import ContractError, SchemaError, check_unit_interval


def normalize_name(name):
    """Case-fold and collapse whitespace so "Standing  On" == "standing on"."""
    return " ".join(str(name).split()).casefold()


def _frozen_array(x):
    arr = np.array(x, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BBox:
    """Absolute-pixel corner box. Not validated on construction; see `is_valid`."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def from_cxcywh(cls, cx, cy, w, h, width, height):
        """Convert a DETR-style normalized (cx, cy, w, h) box to pixels."""
        return cls(
            (cx - w / 2) * width,
            (cy - h / 2) * height,
            (cx + w / 2) * width,
            (cy + h / 2) * height,
        )

    def to_cxcywh(self, width, height):
        return (
            (self.x1 + self.x2) / 2 / width,
            (self.y1 + self.y2) / 2 / height,
            (self.x2 - self.x1) / width,
            (self.y2 - self.y1) / height,
        )

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def is_finite(self):
        return all(math.isfinite(c) for c in self.as_list())

    def is_valid(self):
        return self.is_finite() and self.x1 < self.x2 and self.y1 < self.y2

    def as_list(self):
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True, eq=False)
class Concept:
    name: str
    kind: str  # "object" | "relation"
    split: str  # "base" | "novel"
    embedding: np.ndarray

    def __post_init__(self):
        if self.kind not in ("object", "relation"):
            raise ContractError(f"unknown concept kind {self.kind!r}")
        if self.split not in ("base", "novel"):
            raise ContractError(f"unknown concept split {self.split!r}")
        object.__setattr__(self, "name", normalize_name(self.name))
        emb = np.asarray(self.embedding, dtype=np.float64)
        norm = np.linalg.norm(emb)
        if emb.ndim != 1 or not np.isfinite(norm) or norm == 0.0:
            raise ContractError(f"concept {self.name!r} needs a finite non-zero embedding")
        # already-unit vectors are kept as is so that save/load is exact
        if abs(norm - 1.0) > 1e-12:
            emb = emb / norm
        object.__setattr__(self, "embedding", _frozen_array(emb))

    def __eq__(self, other):
        return (
            isinstance(other, Concept)
            and (self.name, self.kind, self.split) == (other.name, other.kind, other.split)
            and np.array_equal(self.embedding, other.embedding)
        )

    __hash__ = None


class ConceptSpace:
    """Object and relation vocabularies with base/novel flags and embeddings."""

    def __init__(self, objects, relations, dim):
        self.dim = int(dim)
        if self.dim <= 0:
            raise ContractError("dim must be positive")
        self.objects = tuple(objects)
        self.relations = tuple(relations)
        self._index = {"object": {}, "relation": {}}
        for kind, concepts in (("object", self.objects), ("relation", self.relations)):
            for c in concepts:
                if c.kind != kind:
                    raise ContractError(f"{c.name!r} listed as {kind} but has kind {c.kind}")
                if c.embedding.shape != (self.dim,):
                    raise ContractError(f"{c.name!r} embedding does not have dim {self.dim}")
                if c.name in self._index[kind]:
                    raise ContractError(f"duplicate {kind} concept {c.name!r}")
                self._index[kind][c.name] = c

    def get(self, name, kind):
        return self._index[kind].get(normalize_name(name))

    def object(self, name):
        c = self.get(name, "object")
        if c is None:
            raise KeyError(name)
        return c

    def relation(self, name):
        c = self.get(name, "relation")
        if c is None:
            raise KeyError(name)
        return c

    def names(self, kind, split=None):
        concepts = self.objects if kind == "object" else self.relations
        return [c.name for c in concepts if split is None or c.split == split]

    def relation_index(self, name):
        return self.names("relation").index(normalize_name(name))

    def embedding_matrix(self, kind):
        concepts = self.objects if kind == "object" else self.relations
        if not concepts:
            return np.zeros((0, self.dim))
        return np.stack([c.embedding for c in concepts])

    def with_splits(self, novel_objects=(), novel_relations=()):
        """Copy of this space with the given names flagged novel and the rest base."""
        no = {normalize_name(n) for n in novel_objects}
        nr = {normalize_name(n) for n in novel_relations}
        objs = [Concept(c.name, "object", "novel" if c.name in no else "base", c.embedding)
                for c in self.objects]
        rels = [Concept(c.name, "relation", "novel" if c.name in nr else "base", c.embedding)
                for c in self.relations]
        return ConceptSpace(objs, rels, self.dim)

    @classmethod
    def random(cls, object_names, relation_names, dim, seed=0,
               novel_objects=(), novel_relations=()):
        """Synthetic space with Gaussian-then-normalized embeddings."""
        rng = np.random.default_rng(seed)
        no = {normalize_name(n) for n in novel_objects}
        nr = {normalize_name(n) for n in novel_relations}
        objs = [Concept(n, "object", "novel" if normalize_name(n) in no else "base",
                        rng.standard_normal(dim)) for n in object_names]
        rels = [Concept(n, "relation", "novel" if normalize_name(n) in nr else "base",
                        rng.standard_normal(dim)) for n in relation_names]
        return cls(objs, rels, dim)

    def to_json(self):
        def enc(c):
            return {"name": c.name, "split": c.split, "embedding": c.embedding.tolist()}
        return {"dim": self.dim,
                "objects": [enc(c) for c in self.objects],
                "relations": [enc(c) for c in self.relations]}

    @classmethod
    def from_json(cls, obj):
        try:
            dim = obj["dim"]
            objs = [Concept(o["name"], "object", o.get("split", "base"), o["embedding"])
                    for o in obj["objects"]]
            rels = [Concept(r["name"], "relation", r.get("split", "base"), r["embedding"])
                    for r in obj["relations"]]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed concept space: {exc!r}") from exc
        return cls(objs, rels, dim)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass(frozen=True, eq=False)
class Node:
    box: BBox
    category: str
    score: float = 1.0
    feature: np.ndarray = None
    # concept embedding for an open-vocabulary category absent from the active space
    embedding: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "category", normalize_name(self.category))
        if self.feature is not None:
            object.__setattr__(self, "feature", _frozen_array(self.feature))
        if self.embedding is not None:
            object.__setattr__(self, "embedding", _frozen_array(self.embedding))

    def __eq__(self, other):
        if not isinstance(other, Node):
            return NotImplemented

        def same(a, b):
            return (a is None and b is None) or (
                a is not None and b is not None and np.array_equal(a, b))

        return (self.box == other.box and self.category == other.category
                and self.score == other.score and same(self.feature, other.feature)
                and same(self.embedding, other.embedding))

    __hash__ = None


@dataclass(frozen=True)
class Edge:
    subject: int
    object: int
    predicate: str
    score: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "predicate", normalize_name(self.predicate))

    @property
    def key(self):
        return (self.subject, self.object, self.predicate)


@dataclass(frozen=True)
class SceneGraph:
    image_id: str
    width: int
    height: int
    nodes: tuple = ()
    edges: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "image_id", str(self.image_id))
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    def triplets(self):
        """(subject category, predicate, object category) per edge."""
        return [(self.nodes[e.subject].category, e.predicate, self.nodes[e.object].category)
                for e in self.edges]


Violation = namedtuple("Violation", "field rule message")


def validate_graph(g, cs=None):
    """List every invariant violation in `g`; an empty list means well-formed.

    Never raises for parseable input. Vocabulary checks are skipped when `cs`
    is None.
    """
    out = []
    try:
        w_ok = float(g.width) > 0 and float(g.height) > 0
    except (TypeError, ValueError):
        w_ok = False
    if not w_ok:
        out.append(Violation("width/height", "non-positive size",
                             f"image size {g.width}x{g.height} must be positive"))
    for i, node in enumerate(g.nodes):
        where = f"nodes[{i}]"
        b = node.box
        if not b.is_finite():
            out.append(Violation(f"{where}.box", "non-finite box", f"{b.as_list()}"))
        elif not (b.x1 < b.x2 and b.y1 < b.y2):
            out.append(Violation(f"{where}.box", "degenerate box",
                                 f"{b.as_list()} needs x1<x2 and y1<y2"))
        elif w_ok and not (0 <= b.x1 and 0 <= b.y1 and b.x2 <= g.width and b.y2 <= g.height):
            out.append(Violation(f"{where}.box", "box outside image",
                                 f"{b.as_list()} not inside {g.width}x{g.height}"))
        if not _score_ok(node.score):
            out.append(Violation(f"{where}.score", "score out of range", f"{node.score}"))
        if cs is not None and cs.get(node.category, "object") is None and node.embedding is None:
            out.append(Violation(f"{where}.category", "unknown category",
                                 f"{node.category!r} not in concept space"))
    seen = set()
    n = len(g.nodes)
    for k, e in enumerate(g.edges):
        where = f"edges[{k}]"
        valid_idx = all(isinstance(i, int) and 0 <= i < n for i in (e.subject, e.object))
        if not valid_idx:
            out.append(Violation(where, "bad index",
                                 f"({e.subject}, {e.object}) with {n} nodes"))
        elif e.subject == e.object:
            out.append(Violation(where, "self-loop", f"subject == object == {e.subject}"))
        if e.key in seen:
            out.append(Violation(where, "duplicate edge", f"{e.key}"))
        seen.add(e.key)
        if not _score_ok(e.score):
            out.append(Violation(f"{where}.score", "score out of range", f"{e.score}"))
        if cs is not None and cs.get(e.predicate, "relation") is None:
            out.append(Violation(f"{where}.predicate", "unknown predicate",
                                 f"{e.predicate!r} not in concept space"))
    return out


def _score_ok(s):
    try:
        return 0.0 <= float(s) <= 1.0
    except (TypeError, ValueError):
        return False


def triplet_score(sub_score, obj_score, pred_score):
    """Confidence of a (subject, predicate, object) triplet: product of the parts."""
    return (check_unit_interval(sub_score, "sub_score")
            * check_unit_interval(obj_score, "obj_score")
            * check_unit_interval(pred_score, "pred_score"))


@dataclass(frozen=True)
class Triplet:
    subject: Node
    predicate: str
    object: Node
    confidence: float


@dataclass(frozen=True)
class RankedTriplets:
    image_id: str
    triplets: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "triplets", tuple(self.triplets))

    def is_sorted(self):
        c = [t.confidence for t in self.triplets]
        return all(a >= b for a, b in zip(c, c[1:]))

    @classmethod
    def from_graph(cls, g, cap=None):
        """Rank every edge of a prediction graph by triplet confidence (stable)."""
        trips = []
        for e in g.edges:
            s, o = g.nodes[e.subject], g.nodes[e.object]
            trips.append(Triplet(s, e.predicate, o, triplet_score(s.score, o.score, e.score)))
        trips.sort(key=lambda t: -t.confidence)
        if cap is not None:
            trips = trips[:cap]
        return cls(g.image_id, trips)


# --- JSON -------------------------------------------------------------------

def node_from_json(obj, width, height):
    if "box" in obj:
        box = BBox(*map(float, obj["box"]))
    elif "box_cxcywh" in obj:
        box = BBox.from_cxcywh(*map(float, obj["box_cxcywh"]), width, height)
    else:
        raise SchemaError("node has neither 'box' nor 'box_cxcywh'")
    if len(box.as_list()) != 4:
        raise SchemaError("box must have 4 coordinates")
    return Node(box, obj["category"], float(obj.get("score", 1.0)),
                obj.get("feature"), obj.get("embedding"))


def graph_from_json(obj):
    try:
        width, height = obj["width"], obj["height"]
        nodes = [node_from_json(n, width, height) for n in obj.get("nodes", [])]
        edges = [Edge(e["sub"], e["obj"], e["predicate"], float(e.get("score", 1.0)))
                 for e in obj.get("edges", [])]
        return SceneGraph(obj["image_id"], width, height, nodes, edges)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed image record: {exc!r}") from exc


def graph_to_json(g):
    nodes = []
    for n in g.nodes:
        rec = {"box": n.box.as_list(), "category": n.category, "score": n.score}
        if n.feature is not None:
            rec["feature"] = n.feature.tolist()
        if n.embedding is not None:
            rec["embedding"] = n.embedding.tolist()
        nodes.append(rec)
    edges = [{"sub": e.subject, "obj": e.object, "predicate": e.predicate, "score": e.score}
             for e in g.edges]
    return {"image_id": g.image_id, "width": g.width, "height": g.height,
            "nodes": nodes, "edges": edges}


def dumps_dataset(graphs):
    """Canonical text form: two-space indented JSON with a trailing newline."""
    return json.dumps({"images": [graph_to_json(g) for g in graphs]}, indent=2) + "\n"


def loads_dataset(text):
    try:
        obj = json.loads(text)
        images = obj["images"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SchemaError(f"not a dataset file: {exc!r}") from exc
    return [graph_from_json(im) for im in images]


def load_dataset(path):
    with open(path) as f:
        return loads_dataset(f.read())


def save_dataset(graphs, path):
    with open(path, "w") as f:
        f.write(dumps_dataset(graphs))
