"""Concatenated object / relation text prompt with sampled negative words."""

import json
from dataclasses import dataclass

import numpy as np

from .core import normalize_name
from .validation import ContractError

CLS, SEP, PAD = "[CLS]", "[SEP]", "[PAD]"
DEFAULT_BUDGET = 256


@dataclass(frozen=True)
class Prompt:
    objects: tuple  # section order, positives and negatives interleaved
    relations: tuple
    positives: frozenset  # (kind, name)
    negatives: frozenset
    m: int
    budget: int = DEFAULT_BUDGET

    @property
    def content_tokens(self):
        toks = [CLS]
        for name in self.objects:
            toks += name.split() + ["."]
        toks.append(SEP)
        for name in self.relations:
            toks += name.split() + ["."]
        toks.append(SEP)
        return toks

    @property
    def tokens(self):
        toks = self.content_tokens
        return toks + [PAD] * (self.budget - len(toks))

    @property
    def text(self):
        objs = " ".join(f"{n}." for n in self.objects)
        rels = " ".join(f"{n}." for n in self.relations)
        head = f"{CLS} {objs} {SEP} {rels} {SEP}".replace("  ", " ")
        return head + PAD * (self.budget - len(self.content_tokens))

    def to_json(self):
        return {"tokens": self.tokens, "m": self.m, "budget": self.budget,
                "positives": sorted(list(p) for p in self.positives),
                "negatives": sorted(list(n) for n in self.negatives)}

    def dumps(self):
        return json.dumps(self.to_json()) + "\n"


def _entries(names, cs):
    out = []
    for item in names:
        if isinstance(item, (tuple, list)):
            kind, name = item[0], normalize_name(item[1])
            if cs.get(name, kind) is None:
                raise ContractError(f"{name!r} is not a {kind} in the concept space")
            out.append((kind, name))
            continue
        name = normalize_name(item)
        kinds = [k for k in ("object", "relation") if cs.get(name, k) is not None]
        if not kinds:
            raise ContractError(f"{name!r} is not in the concept space")
        out += [(k, name) for k in kinds]
    return list(dict.fromkeys(out))


def build_prompt(positives, cs, m=80, seed=0, budget=DEFAULT_BUDGET):
    """Every positive plus uniformly drawn negatives up to `m` words in total.

    `positives` holds names or (kind, name) pairs; a bare name stands for every
    kind it belongs to. Words within each section are shuffled with the seed.
    """
    pos = _entries(positives, cs)
    if m < len(pos):
        raise ContractError(f"m={m} is smaller than the {len(pos)} positive words")
    pool = [("object", n) for n in cs.names("object")] + \
           [("relation", n) for n in cs.names("relation")]
    taken = set(pos)
    pool = [e for e in pool if e not in taken]
    rng = np.random.default_rng(seed)
    k = min(m - len(pos), len(pool))
    neg = [pool[i] for i in sorted(rng.choice(len(pool), size=k, replace=False))] if k else []
    words = pos + neg
    order = rng.permutation(len(words))
    objects = tuple(words[i][1] for i in order if words[i][0] == "object")
    relations = tuple(words[i][1] for i in order if words[i][0] == "relation")
    p = Prompt(objects, relations, frozenset(pos), frozenset(neg), m, budget)
    if len(p.content_tokens) > budget:
        raise ContractError(f"prompt needs {len(p.content_tokens)} tokens, budget is {budget}")
    return p
