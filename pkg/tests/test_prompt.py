import re

import pytest

from ovscene.core import ConceptSpace
from ovscene.prompt import build_prompt
from ovscene.resources import default_concepts, toy_concepts
from ovscene.validation import ContractError

TEMPLATE = re.compile(r"^\[CLS\] (?:[a-z ]+\. )+\[SEP\] (?:[a-z ]+\. )*\[SEP\](?:\[PAD\])*$")


def test_format_matches_template():
    p = build_prompt(["person", "dog", "near"], toy_concepts(), m=8, seed=0, budget=64)
    assert TEMPLATE.match(p.text)
    assert p.text.endswith("[SEP]" + "[PAD]" * (64 - len(p.content_tokens)))
    toks = p.tokens
    assert len(toks) == 64 and toks[0] == "[CLS]"
    first, second = [i for i, t in enumerate(toks) if t == "[SEP]"]
    expected_objects = [w for n in p.objects for w in n.split() + ["."]]
    expected_relations = [w for n in p.relations for w in n.split() + ["."]]
    assert toks[1:first] == expected_objects
    assert toks[first + 1:second] == expected_relations


def test_every_positive_present_once_and_count_is_m():
    cs = default_concepts()
    pos = cs.names("object")[:20] + cs.names("relation")[:10]
    p = build_prompt(pos, cs, m=80, seed=1)
    assert len(p.negatives) == 50 and len(p.positives) == 30
    words = [("object", n) for n in p.objects] + [("relation", n) for n in p.relations]
    assert len(words) == len(set(words)) == 80
    assert {("object", n) for n in cs.names("object")[:20]} <= set(words)
    assert not p.positives & p.negatives


def test_small_vocabulary_examples():
    cs = ConceptSpace.random([f"o{i}" for i in range(6)], [f"r{i}" for i in range(4)], 4)
    everything = [("object", n) for n in cs.names("object")] + \
                 [("relation", n) for n in cs.names("relation")]
    p = build_prompt(everything, cs, m=10)
    assert not p.negatives and len(p.objects) + len(p.relations) == 10
    p = build_prompt([], cs, m=5)
    assert len(p.negatives) == 5 and not p.positives


def test_cap_is_enforced():
    cs = default_concepts()
    with pytest.raises(ContractError):
        build_prompt(cs.names("object")[:81], cs, m=80)
    with pytest.raises(ContractError):
        build_prompt(["nonexistent thing"], cs)
    with pytest.raises(ContractError, match="budget"):
        build_prompt(cs.names("object")[:40], cs, m=80, budget=60)


def test_seeded_output_is_byte_exact():
    cs = default_concepts()
    a = build_prompt(["man", "riding", "horse"], cs, seed=7)
    b = build_prompt(["man", "riding", "horse"], cs, seed=7)
    assert a.text.encode() == b.text.encode() and a.dumps().encode() == b.dumps().encode()
    assert build_prompt(["man", "riding", "horse"], cs, seed=8).text != a.text
