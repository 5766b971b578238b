import json
import random

import pytest
from hypothesis import given, strategies as st

from halign.io_utils import DataError
from halign.lexicon import (
    Mention,
    build_lexicon,
    extract_mentions,
    load_lexicon,
    normalize_term,
    tokenize_with_spans,
)

from oracles import build_corpus, oracle_lexicon_spec


def lex_from_spec(spec):
    return build_lexicon(
        [(c["name"], c["synonyms"]) for c in spec["classes"]],
        spec["hallucinatory_targets"],
    )


# ---------------------------------------------------------------------------
# normalization


@pytest.mark.parametrize(
    "raw,expected",
    [
        ("dogs", "dog"),
        ("Dogs", "dog"),
        ("DINING TABLES", "dining table"),
        ("people", "person"),
        ("children", "child"),
        ("buses", "bus"),
        ("knives", "knife"),
        ("sheep", "sheep"),
        ("glasses", "glass"),
        ("benches", "bench"),
        ("boxes", "box"),
        ("berries", "berry"),
        ("tennis", "tennis"),  # -is tail is not a plural
        ("bus", "bus"),  # -us tail is not a plural
        ("grass", "grass"),  # -ss tail is not a plural
        ("is", "is"),  # too short to strip
    ],
)
def test_normalize_cases(raw, expected):
    assert normalize_term(raw) == expected


def test_normalize_idempotent_on_word_list():
    rng = random.Random(11)
    vowels = "aeiou"
    consonants = "bcdfghklmnprstvz"
    for _ in range(500):
        word = "".join(
            rng.choice(consonants) + rng.choice(vowels)
            for _ in range(rng.randint(1, 4))
        )
        if rng.random() < 0.5:
            word += "s"
        once = normalize_term(word)
        assert normalize_term(once) == once


@given(st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=0x2FF), max_size=30))
def test_normalize_idempotent_hypothesis(raw):
    once = normalize_term(raw)
    assert normalize_term(once) == once


# ---------------------------------------------------------------------------
# tokenization


def test_tokenize_spans_strip_punctuation():
    text = "A dog, two cats; one fire-hydrant!"
    toks = tokenize_with_spans(text)
    # tokens come back normalized; spans index the original text
    assert [t for t, _, _ in toks] == ["a", "dog", "two", "cat", "one", "fire", "hydrant"]
    assert [text[s:e] for _, s, e in toks] == [
        "A", "dog", "two", "cats", "one", "fire", "hydrant",
    ]


def test_tokenize_empty_and_punct_only():
    assert tokenize_with_spans("") == []
    assert tokenize_with_spans("..., !!") == []


# ---------------------------------------------------------------------------
# extraction


def test_worked_example(starter):
    text = "Two dogs near a fire hydrant."
    mentions = extract_mentions(text, starter)
    assert [m.canonical for m in mentions] == ["dog", "fire hydrant"]
    assert text[mentions[0].start : mentions[0].end] == "dogs"
    assert text[mentions[1].start : mentions[1].end] == "fire hydrant"


def test_repeats_are_kept(starter):
    mentions = extract_mentions("a dog and a dog and a DOG", starter)
    assert [m.canonical for m in mentions] == ["dog", "dog", "dog"]


def test_longest_match_wins(starter):
    # "table" alone is a dining-table synonym; the two-word form must not
    # be split into a shorter match plus leftovers
    mentions = extract_mentions("a dining table and a table", starter)
    assert [m.canonical for m in mentions] == ["dining table", "dining table"]
    assert mentions[0].end - mentions[0].start == len("dining table")


def test_synonyms_fold_to_canonical(starter):
    mentions = extract_mentions("a man with his notebook", starter)
    assert [m.canonical for m in mentions] == ["person", "laptop"]


def test_spans_non_overlapping_in_bounds(starter):
    rng = random.Random(3)
    words = ["dog", "dogs", "fire", "hydrant", "table", "a", "with", "tiny"]
    for _ in range(300):
        text = " ".join(rng.choice(words) for _ in range(rng.randint(0, 12)))
        prev_end = -1
        for m in extract_mentions(text, starter):
            assert 0 <= m.start < m.end <= len(text)
            assert m.start >= prev_end
            prev_end = m.end
            assert m.canonical in starter.class_set


def test_extraction_matches_construction():
    spec = oracle_lexicon_spec()
    lex = lex_from_spec(spec)
    for sample in build_corpus(spec, 200, seed=5):
        got = [m.canonical for m in extract_mentions(sample.caption, lex)]
        assert got == sample.mention_classes, sample.caption


# ---------------------------------------------------------------------------
# construction and loading


def test_build_rejects_bad_tables():
    with pytest.raises(DataError):
        build_lexicon([], [])
    with pytest.raises(DataError):
        build_lexicon([("dog", ["hound"]), ("canine", ["hound"])], [])
    with pytest.raises(DataError):
        build_lexicon([("a b c d", [])], [])
    with pytest.raises(DataError):
        build_lexicon([("dog", [])], ["zebra"])  # target outside classes


def test_duplicate_class_after_normalization():
    with pytest.raises(DataError):
        build_lexicon([("dog", []), ("Dogs", [])], [])


def test_load_lexicon_round_trip(tmp_path):
    doc = {
        "classes": [
            {"name": "dog", "synonyms": ["puppy"]},
            {"name": "fire hydrant", "synonyms": []},
        ],
        "hallucinatory_targets": ["dog"],
    }
    p = tmp_path / "lex.json"
    p.write_text(json.dumps(doc))
    lex = load_lexicon(p)
    assert lex.classes == ["dog", "fire hydrant"]
    assert lex.surface_to_class["puppy"] == "dog"
    assert lex.hallucinatory_targets == frozenset({"dog"})
    assert lex.max_compound == 2


def test_load_lexicon_rejects_malformed(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"classes": []}))
    with pytest.raises(DataError):
        load_lexicon(p)


def test_starter_lexicon_loads(starter):
    assert len(starter.classes) == 80
    assert "person" in starter.class_set
    assert starter.hallucinatory_targets <= starter.class_set
    assert starter.max_compound >= 2


def test_mention_is_frozen():
    m = Mention("dog", 0, 3)
    with pytest.raises(AttributeError):
        m.canonical = "cat"
