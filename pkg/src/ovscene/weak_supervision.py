"""Caption triplet parsing, triplet grounding and ingestion of synthesized scene graphs.

The parser is a small rule grammar: tokens are tagged from closed word lists
and the lexicon, noun phrases are chunked, and predicates between them are
attached to the clause subject (``of`` attaches to the preceding phrase).
"""

import json
import math
import re
from collections import namedtuple
from dataclasses import dataclass, field

from sklearn.base import BaseEstimator, TransformerMixin

from .core import Edge, normalize_name
from .validation import SchemaError

SOURCES = ("parser", "llm", "mllm")

DETERMINERS = {"a", "an", "the", "this", "these", "those", "some", "his", "her", "their",
               "its", "my", "our", "your", "one", "two", "three", "four", "five", "six",
               "several", "many", "few", "other", "another", "each", "every"}
COPULAS = {"is", "are", "was", "were", "be", "been", "being", "am", "'s"}
RELATIVES = {"who", "which", "that", "while"}
ADVERBS = {"very", "also", "just", "still", "together"}
# nouns that head a quantity or framing phrase before "of"
QUANTIFIERS = {"group", "couple", "pair", "herd", "bunch", "lot", "lots", "flock", "number",
               "row", "pile", "stack", "set", "picture", "photo", "image", "view", "closeup"}
PREPOSITIONS = {"on", "in", "at", "with", "near", "under", "behind", "above", "over",
                "beside", "besides", "by", "of", "into", "onto", "from", "across", "against",
                "along", "around", "through", "inside", "outside", "below", "beneath",
                "underneath", "down", "up", "toward", "towards", "between", "for", "to",
                "atop", "among", "off", "out", "past", "beyond", "like"}
MULTI_PREPOSITIONS = [("in", "front", "of"), ("on", "top", "of"), ("on", "back", "of"),
                      ("on", "side", "of"), ("next", "to"), ("close", "to"), ("out", "of"),
                      ("in", "between")]
ING_NOUNS = {"building", "ceiling", "clothing", "painting", "ring", "king", "thing", "string",
             "wing", "railing", "sling", "evening", "morning", "awning", "icing", "siding"}
ED_NOUNS = {"bed", "shed", "sled", "red", "bread", "head", "seed", "weed"}
IRREGULAR_PLURALS = {"men": "man", "women": "woman", "people": "person", "children": "child",
                     "feet": "foot", "teeth": "tooth", "mice": "mouse", "geese": "goose",
                     "leaves": "leaf", "knives": "knife", "shelves": "shelf", "wolves": "wolf"}

UngroundedTriplet = namedtuple("UngroundedTriplet",
                               "subject_phrase predicate_phrase object_phrase source")


def _make_triplet(s, p, o, source="parser"):
    s, p, o = (normalize_name(x) for x in (s, p, o))
    if not (s and p and o):
        raise ValueError("triplet phrases must be non-empty")
    if source not in SOURCES:
        raise ValueError(f"unknown source {source!r}")
    return UngroundedTriplet(s, p, o, source)


def _verb_stem(word):
    """Crude inflection stripping: riding/rides/ride -> rid, sitting/sits -> sit."""
    w = word
    for suffix in ("ing", "ed", "es", "s"):
        if w.endswith(suffix) and len(w) - len(suffix) >= 2:
            w = w[: -len(suffix)]
            break
    if len(w) > 2 and w[-1] == w[-2] and w[-1] not in "aeiouls":
        w = w[:-1]
    if w.endswith("e") and len(w) > 2:
        w = w[:-1]
    return w


def _edit_distance(a, b):
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


class Lexicon:
    """Object and predicate names used for head matching and predicate normalization."""

    def __init__(self, objects=(), predicates=()):
        self.objects = {normalize_name(o) for o in objects}
        self.predicates = [normalize_name(p) for p in predicates]
        self._stems = {}
        for p in self.predicates:
            self._stems.setdefault(tuple(_verb_stem(w) for w in p.split()), p)
        self.verb_stems = {_verb_stem(p.split()[0]) for p in self.predicates
                           if p.split()[0] not in PREPOSITIONS | {"and", "part", "made"}}
        self.verb_words = {p.split()[0] for p in self.predicates
                           if p.split()[0] not in PREPOSITIONS | {"and", "part"}}

    @classmethod
    def from_concepts(cls, cs):
        return cls(cs.names("object"), cs.names("relation"))

    def noun(self, words):
        """Lexicon name for a noun phrase: longest matching suffix, then singular head."""
        for k in range(len(words)):
            cand = " ".join(words[k:])
            if cand in self.objects:
                return cand
        head = words[-1]
        forms = [IRREGULAR_PLURALS.get(head)]
        if head.endswith("ies"):
            forms.append(head[:-3] + "y")
        if head.endswith("ves"):
            forms += [head[:-3] + "f", head[:-3] + "fe"]
        if head.endswith("es"):
            forms.append(head[:-2])
        if head.endswith("s") and not head.endswith(("ss", "us", "is")):
            forms.append(head[:-1])
        forms = [f for f in forms if f]
        for f in forms:
            if f in self.objects:
                return f
        return forms[0] if forms else head

    def predicate(self, phrase):
        """Exact, inflection-stripped, then edit-distance-1 lexicon match; else raw."""
        if phrase in self.predicates:
            return phrase
        stem = tuple(_verb_stem(w) for w in phrase.split())
        if stem in self._stems:
            return self._stems[stem]
        close = [p for p in self.predicates if _edit_distance(p, phrase) == 1]
        return close[0] if close else phrase


_TOKEN = re.compile(r"[a-z]+(?:'[a-z]+)?|[.;!?]")


def _tokens(caption):
    text = caption.casefold().replace("'s ", " 's ")
    return _TOKEN.findall(text)


def _tag(tokens, lex):
    tags = []
    i = 0
    n = len(tokens)
    while i < n:
        t = tokens[i]
        multi = next((m for m in MULTI_PREPOSITIONS if tuple(tokens[i:i + len(m)]) == m), None)
        if t in ".;!?":
            tags.append(("END", t))
        elif multi is not None:
            tags.append(("PREP", " ".join(multi)))
            i += len(multi)
            continue
        elif t == "there" and i + 1 < n and tokens[i + 1] in COPULAS:
            i += 2
            continue
        elif t in QUANTIFIERS and i + 1 < n and tokens[i + 1] == "of" \
                and (i == 0 or tokens[i - 1] in DETERMINERS):
            i += 2
            continue
        elif t == "and":
            tags.append(("AND", t))
        elif t in DETERMINERS:
            tags.append(("DET", t))
        elif t in COPULAS:
            tags.append(("COP", t))
        elif t in RELATIVES:
            tags.append(("REL", t))
        elif t in ADVERBS:
            tags.append(("ADV", t))
        elif t in PREPOSITIONS:
            tags.append(("PREP", t))
        elif t in lex.objects:
            tags.append(("NOUN", t))
        elif t in lex.verb_words or _is_verb_form(t, lex):
            tags.append(("VERB", t))
        else:
            tags.append(("NOUN", t))
        i += 1
    return tags


def _is_verb_form(t, lex):
    if t.endswith("ing") and len(t) > 4 and t not in ING_NOUNS:
        return True
    if t.endswith("ed") and len(t) > 4 and t not in ED_NOUNS:
        return True
    return t.endswith("s") and len(t) > 3 and _verb_stem(t) in lex.verb_stems


def _chunks(tags):
    """Group tags into NP / PRED / AND / END items."""
    items = []
    for kind, word in tags:
        if kind in ("DET", "REL", "ADV"):
            if items and items[-1][0] == "NP" and kind == "DET":
                items.append(("SEP", None))
            continue
        if kind == "NOUN":
            if items and items[-1][0] == "NP":
                items[-1][1].append(word)
            else:
                items.append(("NP", [word]))
        elif kind in ("VERB", "PREP", "COP"):
            if items and items[-1][0] == "PRED":
                items[-1][1].append((kind, word))
            else:
                items.append(("PRED", [(kind, word)]))
        else:
            items.append((kind, None))
    return [it for it in items if it[0] != "SEP"]


def parse_caption(caption, lexicon=None):
    """Ungrounded (subject, predicate, object) triplets from one caption.

    Never raises on text input; captions the grammar cannot read give [].
    """
    if not isinstance(caption, str) or not caption.strip():
        return []
    lex = lexicon if isinstance(lexicon, Lexicon) else (
        Lexicon.from_concepts(lexicon) if lexicon is not None else default_lexicon())
    items = _chunks(_tag(_tokens(caption), lex))
    out = []
    main = last = None  # subject group of the clause, most recent phrase group
    pending = None  # (predicate, subject group) waiting for its object
    last_pred = None  # predicate that produced `last`, for object coordination
    k = 0
    while k < len(items):
        kind, val = items[k]
        if kind == "END":
            main = last = pending = last_pred = None
        elif kind == "NP":
            head = lex.noun(val)
            if k >= 2 and items[k - 1][0] == "AND" and items[k - 2][0] == "NP" and last:
                last.append(head)
                if last_pred is not None:
                    pred, subjects = last_pred
                    out += [(s, pred, head) for s in subjects]
            elif pending is not None:
                pred, subjects = pending
                out += [(s, pred, head) for s in subjects]
                last, last_pred, pending = [head], pending, None
            else:
                main = last = [head]
                last_pred = None
        elif kind == "PRED":
            words = [w for t, w in val if t != "COP"]
            if words and last is not None:
                phrase = lex.predicate(" ".join(words))
                subjects = last if words[0] == "of" else main
                pending = (phrase, list(subjects))
            else:
                pending = None
        k += 1
    seen, triplets = set(), []
    for t in out:
        if t not in seen:
            seen.add(t)
            triplets.append(_make_triplet(*t))
    return triplets


_DEFAULT = {}


def default_lexicon():
    if "lex" not in _DEFAULT:
        from .resources import load_vocabulary
        objects, predicates = load_vocabulary()
        _DEFAULT["lex"] = Lexicon(objects, predicates)
    return _DEFAULT["lex"]


class CaptionParser(TransformerMixin, BaseEstimator):
    """Maps a list of captions to lists of ungrounded triplets."""

    def __init__(self, lexicon=None):
        self.lexicon = lexicon

    def fit(self, X, y=None):
        self.lexicon_ = (Lexicon.from_concepts(self.lexicon) if self.lexicon is not None
                         else default_lexicon())
        return self

    def transform(self, X):
        lex = getattr(self, "lexicon_", None) or self.fit(X).lexicon_
        return [parse_caption(c, lex) for c in X]


def triplet_f1(predicted, gold):
    """Micro precision, recall and F1 over sets of (s, p, o) per caption."""
    tp = fp = fn = 0
    for p, g in zip(predicted, gold):
        p = {tuple(t[:3]) for t in p}
        g = {tuple(t[:3]) for t in g}
        tp += len(p & g)
        fp += len(p - g)
        fn += len(g - p)
    prec = tp / (tp + fp) if tp + fp else 1.0
    rec = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return prec, rec, f1


# --- grounding --------------------------------------------------------------

def _head(phrase):
    words = normalize_name(phrase).split()
    return words[-1] if words else ""


def ground_triplets(triplets, candidates):
    """Attach phrases to candidate nodes; returns (edges, dropped count).

    A phrase goes to the highest-scoring candidate whose category equals the
    phrase or its head noun, ties broken by larger box area then lower index.
    Triplets with an unmatched phrase, or whose two phrases land on the same
    node, are dropped. Repeated edges are emitted once.
    """
    def best(phrase):
        name = normalize_name(phrase)
        pool = [i for i, c in enumerate(candidates) if c.category == name]
        if not pool:
            pool = [i for i, c in enumerate(candidates) if c.category == _head(phrase)]
        if not pool:
            return None
        return min(pool, key=lambda i: (-candidates[i].score, -candidates[i].box.area, i))

    edges, seen, dropped = [], set(), 0
    for t in triplets:
        s, o = best(t[0]), best(t[2])
        if s is None or o is None or s == o:
            dropped += 1
            continue
        e = Edge(s, o, t[1])
        if e.key not in seen:
            seen.add(e.key)
            edges.append(e)
    return edges, dropped


# --- synthesized graph ingestion ---------------------------------------------

@dataclass(frozen=True)
class SynthNode:
    category: str
    box: tuple = None
    score: float = 1.0


@dataclass(frozen=True)
class SynthEdge:
    subject: int
    object: int
    predicate: str  # kept verbatim
    score: float = 1.0


@dataclass(frozen=True)
class SynthesizedGraphRecord:
    image_id: str
    nodes: tuple
    edges: tuple
    pipeline: str
    model: str = ""
    width: int = None
    height: int = None
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def has_boxes(self):
        return any(n.box is not None for n in self.nodes)

    @property
    def low_trust_boxes(self):
        """Boxes written by a multimodal model are kept but not trusted for localization."""
        return self.pipeline == "mllm" and self.has_boxes

    def to_json(self):
        nodes = []
        for n in self.nodes:
            rec = {"category": n.category, "score": n.score}
            if n.box is not None:
                rec["box"] = list(n.box)
            nodes.append(rec)
        out = {"image_id": self.image_id}
        if self.width is not None:
            out["width"], out["height"] = self.width, self.height
        out["nodes"] = nodes
        out["edges"] = [{"sub": e.subject, "obj": e.object, "predicate": e.predicate,
                         "score": e.score} for e in self.edges]
        out["provenance"] = {"pipeline": self.pipeline, "model": self.model,
                             "low_trust_boxes": self.low_trust_boxes}
        return out


RecordError = namedtuple("RecordError", "index image_id reason")
IngestResult = namedtuple("IngestResult", "records errors")


def _number(x, what):
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
        raise ValueError(f"{what} must be a finite number, got {x!r}")
    return float(x)


def record_from_json(obj, default_provenance=None):
    """Validate one image record; raises ValueError with the reason."""
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    image_id = obj.get("image_id")
    if not isinstance(image_id, (str, int)) or isinstance(image_id, bool) or str(image_id) == "":
        raise ValueError("missing image_id")
    prov = obj.get("provenance", default_provenance)
    if not isinstance(prov, dict):
        raise ValueError("missing provenance block")
    pipeline = prov.get("pipeline")
    if pipeline not in SOURCES:
        raise ValueError(f"provenance pipeline must be one of {SOURCES}, got {pipeline!r}")
    width, height = obj.get("width"), obj.get("height")
    if (width is None) != (height is None):
        raise ValueError("width and height must be given together")
    if width is not None and not (_number(width, "width") > 0 and _number(height, "height") > 0):
        raise ValueError("image size must be positive")
    raw_nodes = obj.get("nodes")
    if not isinstance(raw_nodes, list):
        raise ValueError("nodes must be a list")
    nodes = []
    for k, n in enumerate(raw_nodes):
        if not isinstance(n, dict) or not isinstance(n.get("category"), str) \
                or not normalize_name(n["category"]):
            raise ValueError(f"node {k} has no category")
        box = n.get("box")
        if box is not None:
            if not isinstance(box, list) or len(box) != 4:
                raise ValueError(f"node {k} box must have 4 coordinates")
            box = tuple(_number(v, f"node {k} box") for v in box)
            if not (box[2] > box[0] and box[3] > box[1]):
                raise ValueError(f"node {k} box is degenerate")
        score = _number(n.get("score", 1.0), f"node {k} score")
        nodes.append(SynthNode(normalize_name(n["category"]), box, score))
    raw_edges = obj.get("edges", [])
    if not isinstance(raw_edges, list):
        raise ValueError("edges must be a list")
    edges = []
    for k, e in enumerate(raw_edges):
        if not isinstance(e, dict):
            raise ValueError(f"edge {k} is not an object")
        s, o = e.get("sub"), e.get("obj")
        for idx in (s, o):
            if not isinstance(idx, int) or isinstance(idx, bool) or not 0 <= idx < len(nodes):
                raise ValueError(f"edge {k} has bad node index {idx!r}")
        if s == o:
            raise ValueError(f"edge {k} is a self-loop")
        p = e.get("predicate")
        if not isinstance(p, str) or not p.strip():
            raise ValueError(f"edge {k} has no predicate")
        edges.append(SynthEdge(s, o, p, _number(e.get("score", 1.0), f"edge {k} score")))
    return SynthesizedGraphRecord(str(image_id), tuple(nodes), tuple(edges), pipeline,
                                  str(prov.get("model", "")),
                                  None if width is None else int(width),
                                  None if height is None else int(height))


def loads_synthesized(text):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not JSON: {exc}") from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("images"), list):
        raise SchemaError("expected an object with an 'images' list")
    default = obj.get("provenance")
    records, errors = [], []
    for k, rec in enumerate(obj["images"]):
        try:
            records.append(record_from_json(rec, default))
        except ValueError as exc:
            image_id = rec.get("image_id") if isinstance(rec, dict) else None
            errors.append(RecordError(k, image_id, str(exc)))
    return IngestResult(records, errors)


def ingest_synthesized(path):
    """Read a synthesized-graph file; invalid records are reported, valid ones kept."""
    with open(path) as f:
        return loads_synthesized(f.read())


def dumps_synthesized(records):
    return json.dumps({"images": [r.to_json() for r in records]}, indent=2) + "\n"
