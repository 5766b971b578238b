"""Small shared helpers: JSONL io, canonical JSON, checksums, seeded sub-streams."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np


class DataError(Exception):
    """Malformed or inconsistent input data (CLI exit code 2)."""


class ConfigError(Exception):
    """Bad configuration or usage (CLI exit code 1)."""


def read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield (line_number, record) pairs; line numbers are 1-based.

    Raises DataError naming the line on parse failure or non-object lines.
    """
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise DataError(f"{path}: line {lineno}: expected a JSON object")
            yield lineno, rec


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(canonical_json(rec))
            fh.write("\n")


def canonical_json(obj: Any) -> str:
    # sorted keys + fixed separators so identical data serializes to identical bytes
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def dump_json(path: str | Path, obj: Any) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False))
        fh.write("\n")


def load_json(path: str | Path) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON at line {exc.lineno} ({exc.msg})") from exc


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# Named sub-stream indices. Every stage derives its generator from the single
# run seed through a fixed spawn key, so adding a stage never shifts another
# stage's stream.
_STREAMS = {
    "scenes": 0,
    "corpus": 1,
    "dialogues": 2,
    "build": 3,
    "split": 4,
    "train": 5,
    "kl": 6,
    "eval": 7,
}


def sub_rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    """Deterministic per-stage generator derived from the run seed."""
    try:
        key = _STREAMS[stream]
    except KeyError:
        raise ValueError(f"unknown rng stream {stream!r}") from None
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(key, *extra))
    return np.random.default_rng(ss)
