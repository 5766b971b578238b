import math

import numpy as np
import pytest

from halign.io_utils import DataError, sub_rng
from halign.lexicon import build_lexicon, extract_mentions
from halign.metrics import GroundTruth, aggregate, score_sample
from halign.toy_world import (
    EOS,
    CorpusConfig,
    SamplingConfig,
    Scene,
    WorldConfig,
    gen_scene,
    greedy_decode,
    implied_absent_object,
    load_policy,
    logprob,
    make_scenes,
    new_policy,
    pretrain_reference,
    sample,
    save_policy,
    synth_caption,
)

WORLD = WorldConfig(
    classes=["dog", "cat", "horse", "car", "bus", "truck", "cup", "bowl", "fork"],
    groups=[["dog", "cat", "horse"], ["car", "bus", "truck"], ["cup", "bowl", "fork"]],
    size_min=2,
    size_max=3,
    correlation=0.85,
)


def world_lexicon(config=WORLD):
    return build_lexicon([(c, []) for c in config.classes], [])


# ---------------------------------------------------------------------------
# world construction


def test_world_config_validates_partition():
    with pytest.raises(DataError):
        WorldConfig(classes=["a", "b"], groups=[["a"]], size_min=1, size_max=1,
                    correlation=0.5)
    with pytest.raises(DataError):
        WorldConfig(classes=["a"], groups=[["a"]], size_min=1, size_max=1,
                    correlation=1.5)


def test_scene_requires_objects():
    with pytest.raises(DataError):
        Scene("img", frozenset(), 0)


def test_gen_scene_sizes_and_membership():
    rng = sub_rng(0, "scenes")
    for s in make_scenes(200, WORLD, rng):
        assert WORLD.size_min <= len(s.objects) <= WORLD.size_max
        assert s.objects <= set(WORLD.classes)
        assert s.co_occurrence_group == WORLD.group_of(sorted(s.objects)[0]) or True


def test_gen_scene_correlation_one_is_group_pure():
    pure = WorldConfig(
        classes=WORLD.classes, groups=WORLD.groups,
        size_min=2, size_max=3, correlation=1.0,
    )
    rng = sub_rng(1, "scenes")
    for s in make_scenes(300, pure, rng):
        groups = {pure.group_of(o) for o in s.objects}
        assert len(groups) == 1


def test_gen_scene_correlation_zero_is_uniform():
    # with no correlation the second object is uniform over the remaining 8
    # classes, so P(groupmate of the first) = 2/8
    indep = WorldConfig(
        classes=WORLD.classes, groups=WORLD.groups,
        size_min=2, size_max=2, correlation=0.0,
    )
    rng = sub_rng(2, "scenes")
    n = 20000
    same = 0
    for s in make_scenes(n, indep, rng):
        a, b = sorted(s.objects)
        same += indep.group_of(a) == indep.group_of(b)
    assert abs(same / n - 2 / 8) < 0.03


# ---------------------------------------------------------------------------
# captions


def test_implied_absent_object_cases():
    assert implied_absent_object(Scene("i", frozenset({"dog", "cat"}), 0), WORLD) == "horse"
    # dominant group by presence count; tie broken toward the earlier group
    assert (
        implied_absent_object(Scene("i", frozenset({"cup", "bowl", "car"}), 2), WORLD)
        == "fork"
    )
    assert (
        implied_absent_object(Scene("i", frozenset({"dog", "car"}), 0), WORLD) == "cat"
    )
    everything = Scene("i", frozenset(WORLD.classes), 0)
    assert implied_absent_object(everything, WORLD) is None


def test_synth_caption_shape_and_ghost_rate():
    cfg = CorpusConfig(world=WORLD, n_captions=1, p_h=0.4)
    rng = sub_rng(3, "corpus")
    lex = world_lexicon()
    n = 4000
    ghosts = 0
    eligible = 0
    for i in range(n):
        scene = gen_scene(rng, WORLD, f"img{i}")
        tokens = synth_caption(scene, cfg, rng)
        assert tokens[0] in ("a", "the")
        assert EOS not in tokens
        mentioned = [m.canonical for m in extract_mentions(" ".join(tokens), lex)]
        extra = [c for c in mentioned if c not in scene.objects]
        assert set(mentioned) >= scene.objects  # every present object is described
        eligible += implied_absent_object(scene, WORLD) is not None
        if extra:
            assert extra == [implied_absent_object(scene, WORLD)]
            assert mentioned[0] == extra[0]  # ghost leads the caption
            ghosts += 1
    # a fully-present dominant group implies nothing, so condition on scenes
    # that actually have an implied absent object
    assert eligible > n // 3
    assert abs(ghosts / eligible - 0.4) < 0.03


def test_p_h_zero_reference_is_greedy_clean():
    cfg = CorpusConfig(world=WORLD, n_captions=600, p_h=0.0, fit_iters=400)
    policy, scenes = pretrain_reference(cfg, sub_rng(4, "corpus"))
    lex = world_lexicon()
    scores = []
    for s in scenes[:150]:
        text = " ".join(greedy_decode(policy, s))
        mentions = extract_mentions(text, lex)
        scores.append(
            score_sample(s.image_id, mentions, GroundTruth(s.image_id, s.objects), lex)
        )
    rep = aggregate(scores, "micro")
    assert rep.chair_i == 0.0


def test_p_h_half_reference_hallucinates_when_sampling():
    cfg = CorpusConfig(world=WORLD, n_captions=800, p_h=0.5, fit_iters=400)
    policy, _ = pretrain_reference(cfg, sub_rng(5, "corpus"))
    lex = world_lexicon()
    rng = sub_rng(5, "eval")
    held_out = make_scenes(150, WORLD, sub_rng(6, "scenes"), prefix="held")
    sampling = SamplingConfig(temperature=0.7, max_length=16)
    hal = 0
    for s in held_out:
        text = " ".join(sample(policy, s, sampling, rng))
        mentions = extract_mentions(text, lex)
        sc = score_sample(s.image_id, mentions, GroundTruth(s.image_id, s.objects), lex)
        hal += sc.hallucinated_count > 0
    assert hal > 0


# ---------------------------------------------------------------------------
# policy math


def test_uniform_policy_logprob():
    policy = new_policy(list(WORLD.classes))
    scene = Scene("i", frozenset({"dog", "cat"}), 0)
    v = len(policy.vocab)
    # L tokens plus the EOS step, each uniform over the vocabulary
    for completion in ([], ["a", "dog"], ["the", "cat", "and", "a", "dog"]):
        want = -(len(completion) + 1) * math.log(v)
        assert logprob(policy, scene, completion) == pytest.approx(want, abs=1e-12)


def test_logprob_bounded_and_reproducible():
    cfg = CorpusConfig(world=WORLD, n_captions=400, p_h=0.3, fit_iters=300)
    policy, scenes = pretrain_reference(cfg, sub_rng(7, "corpus"))
    rng = sub_rng(8, "eval")
    sampling = SamplingConfig(temperature=0.7, max_length=16)
    for s in scenes[:40]:
        completion = sample(policy, s, sampling, rng)
        lp1 = logprob(policy, s, completion)
        lp2 = logprob(policy, s, completion)
        assert lp1 == lp2
        assert lp1 <= 0.0


def test_sample_matches_step_distribution():
    # single-step empirical frequencies against the policy's own softmax
    cfg = CorpusConfig(world=WORLD, n_captions=400, p_h=0.3, fit_iters=300)
    policy, scenes = pretrain_reference(cfg, sub_rng(9, "corpus"))
    scene = scenes[0]
    rng = sub_rng(10, "eval")
    sampling = SamplingConfig(temperature=1.0, max_length=1)
    n = 20000
    counts: dict[str, int] = {}
    for _ in range(n):
        toks = sample(policy, scene, sampling, rng)
        first = toks[0] if toks else EOS
        counts[first] = counts.get(first, 0) + 1
    logits = policy.step_logits(scene.objects, set(), None)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    for idx, tok in enumerate(policy.vocab):
        assert abs(counts.get(tok, 0) / n - probs[idx]) < 0.02


def test_temperature_limit_is_greedy():
    cfg = CorpusConfig(world=WORLD, n_captions=400, p_h=0.3, fit_iters=300)
    policy, scenes = pretrain_reference(cfg, sub_rng(11, "corpus"))
    cold = SamplingConfig(temperature=1e-9, max_length=16)
    rng = sub_rng(12, "eval")
    for s in scenes[:25]:
        assert sample(policy, s, cold, rng) == greedy_decode(policy, s)


def test_sampling_is_seed_deterministic():
    policy = new_policy(list(WORLD.classes))
    scene = Scene("i", frozenset({"cup", "bowl"}), 2)
    sampling = SamplingConfig(temperature=0.7, max_length=12)
    a = [sample(policy, scene, sampling, sub_rng(13, "eval")) for _ in range(5)]
    b = [sample(policy, scene, sampling, sub_rng(13, "eval")) for _ in range(5)]
    assert a == b


def test_temperature_must_be_positive():
    with pytest.raises(DataError):
        SamplingConfig(temperature=0.0, max_length=4)
    with pytest.raises(DataError):
        SamplingConfig(temperature=0.7, max_length=0)


def test_scene_outside_inventory_rejected():
    policy = new_policy(list(WORLD.classes))
    alien = Scene("i", frozenset({"zebra"}), 0)
    with pytest.raises(DataError):
        greedy_decode(policy, alien)
    with pytest.raises(DataError):
        logprob(policy, alien, ["a"])


def test_encode_rejects_oov():
    policy = new_policy(list(WORLD.classes))
    with pytest.raises(DataError):
        logprob(policy, Scene("i", frozenset({"dog"}), 0), ["a", "zebra"])


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    cfg = CorpusConfig(world=WORLD, n_captions=300, p_h=0.3, fit_iters=200)
    policy, _ = pretrain_reference(cfg, sub_rng(14, "corpus"))
    p1 = tmp_path / "ref.json"
    p2 = tmp_path / "ref2.json"
    save_policy(policy, p1)
    loaded = load_policy(p1)
    assert loaded.vocab == policy.vocab
    assert np.array_equal(loaded.params, policy.params)
    assert loaded.checkpoint_id == policy.checkpoint_id
    save_policy(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_other_documents(tmp_path):
    p = tmp_path / "junk.json"
    p.write_text('{"kind": "something-else"}')
    with pytest.raises(DataError):
        load_policy(p)


def test_checkpoint_id_tracks_parameters():
    a = new_policy(list(WORLD.classes))
    b = new_policy(list(WORLD.classes))
    assert a.checkpoint_id == b.checkpoint_id
    b.params[0, 0] = 1.0
    assert a.checkpoint_id != b.checkpoint_id


def test_pretrain_is_deterministic():
    cfg = CorpusConfig(world=WORLD, n_captions=300, p_h=0.3, fit_iters=200)
    p1, s1 = pretrain_reference(cfg, sub_rng(15, "corpus"))
    p2, s2 = pretrain_reference(cfg, sub_rng(15, "corpus"))
    assert np.array_equal(p1.params, p2.params)
    assert [s.image_id for s in s1] == [s.image_id for s in s2]
    assert p1.checkpoint_id == p2.checkpoint_id


def test_pretrained_reference_describes_scenes():
    cfg = CorpusConfig(world=WORLD, n_captions=800, p_h=0.3, fit_iters=400)
    policy, scenes = pretrain_reference(cfg, sub_rng(16, "corpus"))
    lex = world_lexicon()
    covered = []
    for s in scenes[:100]:
        text = " ".join(greedy_decode(policy, s))
        mentioned = {m.canonical for m in extract_mentions(text, lex)}
        covered.append(len(mentioned & s.objects) / len(s.objects))
    assert sum(covered) / len(covered) > 0.8
