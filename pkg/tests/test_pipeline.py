"""Config plumbing and a small end-to-end run checked file by file."""

from __future__ import annotations

import numpy as np
import pytest

from halign import __version__
from halign.io_utils import ConfigError, DataError, load_json, read_jsonl, sha256_file, sub_rng
from halign.lexicon import starter_lexicon_path
from halign.pipeline import (
    DEFAULT_WORLD,
    check_world_in_lexicon,
    config_from_dict,
    config_from_file,
    make_round_source,
    run_pipeline,
    synth_dialogue,
)
from halign.preference import ASSISTANT, HUMAN, load_dataset
from halign.toy_world import Scene, WorldConfig, load_policy, make_scenes, pretrain_reference
from halign.toy_world import CorpusConfig

SMALL_WORLD = {
    "classes": ["dog", "cat", "bird", "cup", "bowl", "fork"],
    "groups": [["dog", "cat", "bird"], ["cup", "bowl", "fork"]],
    "size_min": 2,
    "size_max": 3,
    "correlation": 0.85,
}

# small enough to train in seconds, large enough that ties don't
# exhaust the train split
SMALL_RUN = {
    "world": SMALL_WORLD,
    "n_pretrain_captions": 800,
    "n_dialogues": 160,
    "temperature": 0.9,
    "holdout": 30,
    "total_steps": 30,
    "warmup_steps": 5,
    "batch_size": 16,
    "validation_every": 10,
    "seed": 11,
}

ROUND_FILES = [
    "dataset.jsonl",
    "dataset.provenance.json",
    "policy_best.json",
    "policy_final.json",
    "policy_ref.json",
    "scenes.jsonl",
    "summary.json",
    "train_log.jsonl",
    "train_pairs.jsonl",
    "val_pairs.jsonl",
]


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    summary = run_pipeline(config_from_dict(SMALL_RUN), out)
    return out, summary


def test_config_defaults():
    cfg = config_from_dict({})
    assert cfg.n_dialogues == 8000
    assert cfg.rounds == 1
    assert cfg.filter_ties is True
    assert cfg.seed == 0
    assert cfg.world.to_dict() == WorldConfig.from_dict(DEFAULT_WORLD).to_dict()


def test_config_unknown_key():
    with pytest.raises(ConfigError, match="bogus"):
        config_from_dict({"bogus": 1})


def test_config_overrides():
    cfg = config_from_dict({"seed": 3, "beta": 0.2}, {"beta": 0.5, "seed": None})
    assert cfg.seed == 3  # None override means "not given on the CLI"
    assert cfg.beta == 0.5


def test_config_round_trip():
    doc = config_from_dict(SMALL_RUN).to_dict()
    assert config_from_dict(doc).to_dict() == doc


def test_config_from_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"seed": 9, "n_dialogues": 50}')
    cfg = config_from_file(path, {"n_dialogues": 75})
    assert (cfg.seed, cfg.n_dialogues) == (9, 75)

    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    with pytest.raises(DataError, match="JSON object"):
        config_from_file(bad)


def test_world_must_be_inside_lexicon(starter):
    check_world_in_lexicon(WorldConfig.from_dict(DEFAULT_WORLD), starter)
    alien = WorldConfig.from_dict(
        {
            "classes": ["dog", "floop", "car", "bus"],
            "groups": [["dog", "floop"], ["car", "bus"]],
            "size_min": 1,
            "size_max": 2,
            "correlation": 0.85,
        }
    )
    with pytest.raises(ConfigError, match="floop"):
        check_world_in_lexicon(alien, starter)


def test_synth_dialogue_shape():
    world = WorldConfig.from_dict(SMALL_WORLD)
    reference, _ = pretrain_reference(
        CorpusConfig(world=world, n_captions=400, p_h=0.3), sub_rng(0, "corpus")
    )
    rng = sub_rng(0, "dialogues")
    scenes = make_scenes(50, world, sub_rng(0, "scenes"))
    seen_lengths = set()
    for i, scene in enumerate(scenes):
        d = synth_dialogue(f"s{i}", scene, reference, 0.9, 16, rng)
        roles = [t.role for t in d.turns]
        assert roles[0] == HUMAN and roles[-1] == HUMAN
        assert all(r == (HUMAN if j % 2 == 0 else ASSISTANT) for j, r in enumerate(roles))
        seen_lengths.add(len(roles))
    assert seen_lengths <= {1, 3, 5} and len(seen_lengths) > 1


def test_round_source_deterministic():
    cfg = config_from_dict({**SMALL_RUN, "n_dialogues": 40})
    world = cfg.world
    reference, _ = pretrain_reference(
        CorpusConfig(world=world, n_captions=400, p_h=0.3), sub_rng(cfg.seed, "corpus")
    )
    a = make_round_source(cfg)(0, reference)
    b = make_round_source(cfg)(0, reference)
    assert [(d.sample_id, d.image_id) for d, _ in a] == [(d.sample_id, d.image_id) for d, _ in b]
    assert [[t.text for t in d.turns] for d, _ in a] == [[t.text for t in d.turns] for d, _ in b]
    other = make_round_source(cfg)(1, reference)
    assert {s.image_id for _, s in a}.isdisjoint({s.image_id for _, s in other})


def test_run_writes_every_artifact(small_run):
    out, _ = small_run
    assert (out / "run_config.json").is_file()
    assert (out / "policy_pretrained.json").is_file()
    assert (out / "summary.json").is_file()
    names = sorted(p.name for p in (out / "round_01").iterdir())
    assert names == ROUND_FILES


def test_run_config_snapshot(small_run):
    out, _ = small_run
    doc = load_json(out / "run_config.json")
    assert doc["tool_version"] == __version__
    assert doc["config"] == config_from_dict(SMALL_RUN).to_dict()
    # output paths never enter the snapshot, only the lexicon input does
    assert str(out) not in (out / "run_config.json").read_text()
    starter = str(starter_lexicon_path())
    assert doc["inputs"] == {starter: sha256_file(starter)}


def test_summary_headline(small_run):
    out, summary = small_run
    assert load_json(out / "summary.json") == summary
    assert len(summary["rounds"]) == 1
    ref = summary["hal_rate_reference"]
    tuned = summary["hal_rate_tuned"]
    assert 0.0 <= tuned <= 1.0 and 0.0 <= ref <= 1.0
    if ref > 0:
        assert summary["hal_rate_relative_reduction"] == pytest.approx((ref - tuned) / ref)
    assert summary["best_validation_chair_i"] == summary["rounds"][-1]["best_validation_chair_i"]
    assert summary["final_kl_estimate"] == summary["rounds"][-1]["final_kl_estimate"]


def test_round_summary_accounting(small_run):
    out, summary = small_run
    round_doc = load_json(out / "round_01" / "summary.json")
    assert round_doc == summary["rounds"][0]
    assert round_doc["round"] == 1
    assert round_doc["n_total_pairs"] == SMALL_RUN["n_dialogues"]
    assert round_doc["n_val_pairs"] == SMALL_RUN["holdout"]
    kept = round_doc["n_train_pairs"]
    before = round_doc["n_total_pairs"] - round_doc["n_val_pairs"]
    assert 0 < kept <= before
    assert round_doc["tie_filter_rate"] == pytest.approx((before - kept) / before)
    assert round_doc["reference_id"] != round_doc["best_id"]
    for arm in ("reference", "tuned"):
        for mode in ("greedy", "sampled"):
            report = round_doc["reports"][arm][mode]
            assert set(report) >= {"micro", "macro", "decoding"}

    train = load_dataset(out / "round_01" / "train_pairs.jsonl")
    val = load_dataset(out / "round_01" / "val_pairs.jsonl")
    assert len(train.pairs) == kept
    assert len(val.pairs) == round_doc["n_val_pairs"]
    overlap = {p.context.sample_id for p in train.pairs} & {
        p.context.sample_id for p in val.pairs
    }
    assert not overlap


def test_scenes_artifact_rebuilds_validation(small_run):
    out, _ = small_run
    records = [rec for _, rec in read_jsonl(out / "round_01" / "scenes.jsonl")]
    assert len(records) == SMALL_RUN["n_dialogues"]
    ids = [rec["image_id"] for rec in records]
    assert ids == sorted(ids)
    scenes = {
        rec["image_id"]: Scene(
            image_id=rec["image_id"],
            objects=frozenset(rec["objects"]),
            co_occurrence_group=rec["co_occurrence_group"],
        )
        for rec in records
    }
    val = load_dataset(out / "round_01" / "val_pairs.jsonl")
    for pair in val.pairs:
        assert pair.context.image_id in scenes
        assert scenes[pair.context.image_id].objects  # never empty


def test_multi_round_promotes_best(tmp_path):
    cfg = config_from_dict(
        {
            **SMALL_RUN,
            "n_pretrain_captions": 500,
            "n_dialogues": 100,
            "holdout": 20,
            "total_steps": 10,
            "warmup_steps": 2,
            "validation_every": 5,
            "rounds": 2,
        }
    )
    summary = run_pipeline(cfg, tmp_path)
    assert [r["round"] for r in summary["rounds"]] == [1, 2]
    round1_best = load_policy(tmp_path / "round_01" / "policy_best.json")
    round2_ref = load_policy(tmp_path / "round_02" / "policy_ref.json")
    assert round1_best.checkpoint_id == round2_ref.checkpoint_id
    assert summary["hal_rate_reference"] == summary["rounds"][0]["hal_rate_reference"]
    assert summary["hal_rate_tuned"] == summary["rounds"][1]["hal_rate_tuned"]
