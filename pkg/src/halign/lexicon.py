"""Object lexicon: synonym classes, term normalization, mention extraction.

A lexicon maps surface words and short compounds ("puppy", "fire hydrant")
onto canonical object classes. Mention extraction scans text left to right
and prefers the longest matching compound, so "fire hydrant" never double
counts as "hydrant".
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from pathlib import Path

from .io_utils import DataError, load_json

# Longest compound (in tokens) a lexicon entry may have. The scan window is
# derived from the loaded lexicon but never exceeds this cap.
MAX_COMPOUND_TOKENS = 3

# Plurals that suffix rules get wrong. Keys and values are already casefolded.
IRREGULAR_PLURALS = {
    "people": "person",
    "children": "child",
    "men": "man",
    "women": "woman",
    "mice": "mouse",
    "geese": "goose",
    "feet": "foot",
    "teeth": "tooth",
    "buses": "bus",
    "knives": "knife",
    "wolves": "wolf",
    "leaves": "leaf",
    "loaves": "loaf",
    "shelves": "shelf",
    "scarves": "scarf",
    "calves": "calf",
    "sheep": "sheep",
    "scissors": "scissors",
}

# Words ending in these are not plural "-s" forms (bus, glass, tennis).
_NO_STRIP_TAILS = ("ss", "us", "is")

# A token is a maximal run of characters that are neither whitespace nor
# ASCII punctuation; hyphens fall out as separators ("fire-hydrant" ->
# ["fire", "hydrant"]).
_TOKEN_RE = re.compile(r"[^\s%s]+" % re.escape(string.punctuation))


def _singularize(word: str) -> str:
    if word in IRREGULAR_PLURALS:
        return IRREGULAR_PLURALS[word]
    if word.endswith("ies") and len(word) >= 5:
        return word[:-3] + "y"
    for tail in ("ches", "shes", "sses", "xes", "zes"):
        if word.endswith(tail):
            return word[:-2]
    if word.endswith("s") and len(word) >= 3 and not word.endswith(_NO_STRIP_TAILS):
        return word[:-1]
    return word


def normalize_term(raw: str) -> str:
    """Casefold and singularize a term; multiword terms normalize per word.

    Total and idempotent: any string maps to some normal form, and
    normalizing twice equals normalizing once. The suffix rules are a
    documented stand-in for real lemmatization, not linguistics.
    """
    words = raw.casefold().split()
    return " ".join(_singularize(w) for w in words)


@dataclass(frozen=True)
class Mention:
    """One matched object mention with its character span in the source text."""

    canonical: str
    start: int
    end: int


@dataclass
class SynonymLexicon:
    """Canonical object classes, their surface forms, and hallucinatory targets.

    surface_to_class maps every normalized surface form (including each
    canonical name itself) to exactly one canonical class.
    """

    classes: list[str]
    surface_to_class: dict[str, str]
    hallucinatory_targets: frozenset[str] = frozenset()
    max_compound: int = field(default=1)

    def __post_init__(self):
        self.max_compound = max(
            (len(form.split()) for form in self.surface_to_class), default=1
        )

    @property
    def class_set(self) -> frozenset[str]:
        return frozenset(self.classes)


def build_lexicon(
    entries: list[tuple[str, list[str]]],
    hallucinatory_targets: list[str] | None = None,
    max_compound_tokens: int = MAX_COMPOUND_TOKENS,
) -> SynonymLexicon:
    """Construct a lexicon from (canonical_name, synonyms) pairs.

    All forms are normalized on the way in. Raises DataError on an empty
    class list, a duplicate canonical name, a synonym claimed by two
    classes, or a compound longer than max_compound_tokens.
    """
    if not entries:
        raise DataError("lexicon has no classes")
    classes: list[str] = []
    surface_to_class: dict[str, str] = {}
    for name, synonyms in entries:
        canonical = normalize_term(name)
        if not canonical:
            raise DataError("lexicon class with empty name")
        if canonical in classes:
            raise DataError(f"duplicate lexicon class {canonical!r}")
        classes.append(canonical)
        # the canonical name is always one of its own surface forms
        for form in [canonical] + [normalize_term(s) for s in synonyms]:
            if not form:
                raise DataError(f"class {canonical!r} has an empty synonym")
            if len(form.split()) > max_compound_tokens:
                raise DataError(
                    f"synonym {form!r} of class {canonical!r} exceeds "
                    f"{max_compound_tokens} tokens"
                )
            owner = surface_to_class.get(form)
            if owner is not None and owner != canonical:
                raise DataError(
                    f"synonym {form!r} is claimed by both {owner!r} and {canonical!r}"
                )
            surface_to_class[form] = canonical
    targets = frozenset(normalize_term(t) for t in (hallucinatory_targets or []))
    unknown = targets - set(classes)
    if unknown:
        raise DataError(
            "hallucinatory targets not in class list: " + ", ".join(sorted(unknown))
        )
    return SynonymLexicon(
        classes=classes,
        surface_to_class=surface_to_class,
        hallucinatory_targets=targets,
    )


def load_lexicon(path: str | Path) -> SynonymLexicon:
    """Load a lexicon JSON file.

    Schema: {"classes": [{"name": str, "synonyms": [str, ...]}, ...],
             "hallucinatory_targets": [str, ...]}.
    """
    doc = load_json(path)
    if not isinstance(doc, dict) or "classes" not in doc:
        raise DataError(f"{path}: lexicon file must be an object with a 'classes' list")
    raw_classes = doc["classes"]
    if not isinstance(raw_classes, list):
        raise DataError(f"{path}: 'classes' must be a list")
    entries = []
    for i, item in enumerate(raw_classes):
        if not isinstance(item, dict) or "name" not in item:
            raise DataError(f"{path}: classes[{i}] must be an object with a 'name'")
        syns = item.get("synonyms", [])
        if not isinstance(syns, list) or not all(isinstance(s, str) for s in syns):
            raise DataError(f"{path}: classes[{i}].synonyms must be a list of strings")
        entries.append((str(item["name"]), syns))
    targets = doc.get("hallucinatory_targets", [])
    if not isinstance(targets, list) or not all(isinstance(t, str) for t in targets):
        raise DataError(f"{path}: 'hallucinatory_targets' must be a list of strings")
    try:
        return build_lexicon(entries, targets)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def starter_lexicon_path() -> Path:
    """Path of the bundled 80-class starter lexicon."""
    return Path(__file__).parent / "data" / "starter_lexicon.json"


def tokenize_with_spans(text: str) -> list[tuple[str, int, int]]:
    """Split text into (normalized_token, start, end) triples.

    Splits on Unicode whitespace and ASCII punctuation; offsets index the
    original string.
    """
    return [
        (normalize_term(m.group(0)), m.start(), m.end())
        for m in _TOKEN_RE.finditer(text)
    ]


def extract_mentions(text: str, lexicon: SynonymLexicon) -> list[Mention]:
    """Find object mentions in text, longest compound first, left to right.

    Returns mentions in textual order with non-overlapping spans. Repeated
    mentions of the same class are all kept; instance counts matter for the
    downstream hallucination metrics. Deterministic: pure function of
    (text, lexicon).
    """
    tokens = tokenize_with_spans(text)
    mentions: list[Mention] = []
    i = 0
    window = min(lexicon.max_compound, MAX_COMPOUND_TOKENS)
    n = len(tokens)
    while i < n:
        matched = False
        for width in range(min(window, n - i), 0, -1):
            phrase = " ".join(tok for tok, _, _ in tokens[i : i + width])
            canonical = lexicon.surface_to_class.get(phrase)
            if canonical is not None:
                mentions.append(
                    Mention(canonical, tokens[i][1], tokens[i + width - 1][2])
                )
                i += width
                matched = True
                break
        if not matched:
            i += 1
    return mentions
