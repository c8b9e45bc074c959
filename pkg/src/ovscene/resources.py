"""Bundled vocabulary, toy dataset and caption corpus."""

import json
from importlib import resources

from .core import ConceptSpace, loads_dataset

DATA = resources.files("ovscene") / "data"


def _text(name):
    return (DATA / name).read_text(encoding="utf-8")


def load_vocabulary():
    """(object names, predicate names) of the 150/50 benchmark vocabulary."""
    obj = json.loads(_text("vocabulary.json"))
    return obj["objects"], obj["predicates"]


def default_concepts(dim=32, seed=0):
    """Benchmark vocabulary with seeded random embeddings (no language model is bundled)."""
    objects, predicates = load_vocabulary()
    return ConceptSpace.random(objects, predicates, dim, seed)


def toy_concepts():
    return ConceptSpace.from_json(json.loads(_text("toy_concepts.json")))


def toy_dataset():
    return loads_dataset(_text("toy_dataset.json"))


def toy_split(setting):
    from .splits import SplitSpec
    return SplitSpec.from_json(json.loads(_text(f"toy_split_{setting}.json")))


def caption_corpus():
    """[(image_id, caption, gold triplets)] of the labelled caption corpus."""
    out = []
    for line in _text("captions.jsonl").splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append((rec["image_id"], rec["caption"], [tuple(t) for t in rec["triplets"]]))
    return out
