import itertools
from collections import Counter

import numpy as np
import pytest

from lowres_nlu.augment import (INF, CorpusSpec, MaskPlan, ShuffleSpec, admissible_permutations, apply_mask,
                                integrate_corpora, is_admissible, make_noisy_testset, mask_count, sample_permutation,
                                select_corpus, selection_ratio, shuffle_augment, shuffle_labeled, shuffle_order,
                                span_mask, token_mask, units)
from lowres_nlu.bio import spans_from_bio

# Western music sentence split into 13 word pieces; 0-based positions
WESTERN = "Western music 's effect would continue to grow within the country 's sphere".split()


def _brute_admissible(n, k):
    return {p for p in itertools.permutations(range(n)) if all(abs(p[j] - j) <= k for j in range(n))}


# ---------------------------------------------------------------- shuffling

def test_shuffle_k0_identity():
    tokens = list("abcdef")
    out, perm = shuffle_order(tokens, ShuffleSpec(k=0, seed=3))
    assert out == tokens and perm == list(range(6))


def test_shuffle_n3_k1_reachable_set():
    rng = np.random.default_rng(0)
    seen = {tuple(shuffle_order(list("abc"), ShuffleSpec(k=1), rng)[0]) for _ in range(500)}
    assert {"".join(s) for s in seen} == {"abc", "bac", "acb"}


@pytest.mark.parametrize("k", [0, 1, 2, INF])
def test_shuffle_brute_force_admissible(k):
    rng = np.random.default_rng(1)
    for n in range(1, 7):
        allowed = _brute_admissible(n, k)
        assert set(admissible_permutations(n, k)) == allowed
        for _ in range(60):
            perm = tuple(sample_permutation(n, k, rng))
            assert perm in allowed


def test_shuffle_long_sequences_respect_bound():
    rng = np.random.default_rng(2)
    for k in (1, 2, 3):
        for _ in range(50):
            perm = sample_permutation(15, k, rng)
            assert sorted(perm) == list(range(15)) and is_admissible(perm, k)


def test_shuffle_all_six_for_infinite_k():
    rng = np.random.default_rng(3)
    seen = Counter(tuple(shuffle_order(list("abc"), ShuffleSpec(k=INF), rng)[0]) for _ in range(1000))
    assert len(seen) == 6


def test_entity_spans_move_as_units():
    assert units(5, [(1, 2)]) == [(0,), (1, 2), (3,), (4,)]
    rng = np.random.default_rng(4)
    tokens = ["fly", "to", "new", "york", "city", "today"]
    spec = ShuffleSpec(k=INF, entity_spans=[(2, 4)])
    for _ in range(100):
        out, perm = shuffle_order(tokens, spec, rng)
        j = out.index("new")
        assert out[j:j + 3] == ["new", "york", "city"]
        assert sorted(out) == sorted(tokens)
    # bound is over units: with k=1 the entity moves at most one unit
    n_units = len(units(6, [(2, 4)]))
    for _ in range(100):
        out, _ = shuffle_order(tokens, ShuffleSpec(k=1, entity_spans=[(2, 4)]), rng)
        assert out.index("new") in (1, 2, 3)
    assert n_units == 4


def test_shuffle_spec_validation():
    with pytest.raises(ValueError):
        ShuffleSpec(k=-1)
    with pytest.raises(ValueError):
        ShuffleSpec(entity_spans=[(0, 2), (2, 3)])
    assert ShuffleSpec().copies == 10


def test_shuffle_labeled_keeps_spans():
    rng = np.random.default_rng(5)
    tokens = ["play", "taylor", "swift", "on", "spotify", "now"]
    labels = ["O", "B-ARTIST", "I-ARTIST", "O", "B-SERVICE", "O"]
    gold = {(tuple(tokens[s:e + 1]), t) for s, e, t in spans_from_bio(labels)}
    for _ in range(50):
        t2, l2 = shuffle_labeled(tokens, labels, INF, rng)
        assert {(tuple(t2[s:e + 1]), t) for s, e, t in spans_from_bio(l2)} == gold


def test_noisy_testset():
    data = [(["a", "b", "c", "d"], ["B-X", "I-X", "O", "O"]), (["e", "f"], ["O", "B-Y"])]
    assert make_noisy_testset(data, 0, seed=1) == [(list(t), list(l)) for t, l in data]
    assert make_noisy_testset(data, 2, seed=1) == make_noisy_testset(data, 2, seed=1)
    for (t, l), (t2, l2) in zip(data, make_noisy_testset(data, 1, seed=7)):
        assert sorted(zip(t, l)) == sorted(zip(t2, l2))


def test_shuffle_augment_copies():
    data = [(["a", "b", "c"], ["O", "O", "O"])]
    out = shuffle_augment(data, copies=10, seed=0)
    assert len(out) == 11 and out[0] == data[0]
    assert shuffle_augment(data, seed=0) == out


# ---------------------------------------------------------------- masking

def test_mask_count_rule():
    assert mask_count(20) == 3
    assert mask_count(6) == 0 and mask_count(7) == 1
    assert mask_count(10) == 2  # 1.5 rounds up
    assert mask_count(100, 0.0) == 0


def test_token_mask_basic():
    assert token_mask(list("abcdefghij"), rate=0).masked == ()
    plan = token_mask(["w"] * 20, seed=0)
    assert len(plan.masked) == 3 and len(set(plan.masked)) == 3
    assert token_mask(["w"] * 20, seed=0) == plan


def test_token_mask_partition_monte_carlo():
    counts = Counter()
    for seed in range(10_000):
        counts.update(token_mask(20, seed=seed).actions)
    total = sum(counts.values())
    assert abs(counts["mask"] / total - 0.8) < 0.02
    assert abs(counts["random"] / total - 0.1) < 0.02
    assert abs(counts["keep"] / total - 0.1) < 0.02


def _plan(n, masked):
    return MaskPlan(n, tuple(masked), ("mask",) * len(masked))


def test_span_mask_western_example():
    n = len(WESTERN)
    # a draw that masks "continue" and the second "'s"
    out = span_mask(WESTERN, plan=_plan(n, [5, 11]))
    assert out.masked == (10, 11)
    assert [WESTERN[i] for i in out.masked] == ["country", "'s"]
    out = span_mask(WESTERN, plan=_plan(n, [5, 11, 12]))
    assert out.masked == (10, 11, 12)


def test_span_mask_left_attach_example():
    assert span_mask(12, plan=_plan(12, [2, 7, 8]), attach="left").masked == (6, 7, 8)
    assert span_mask(12, plan=_plan(12, [2, 7, 8])).masked == (6, 7, 8)


def test_span_mask_attach_modes_differ():
    # isolated 9 sits right of run {2,3}: nearest side is 4, left side is 1
    assert span_mask(12, plan=_plan(12, [2, 3, 9])).masked == (2, 3, 4)
    assert span_mask(12, plan=_plan(12, [2, 3, 9]), attach="left").masked == (1, 2, 3)


def test_span_mask_untouched_cases():
    p = _plan(12, [3, 4, 8, 9])
    assert span_mask(12, plan=p) == p
    single = _plan(1, [0])
    assert span_mask(1, plan=single) == single
    with pytest.raises(ValueError):
        span_mask(12, plan=p, attach="right")


def test_span_mask_preserves_count_and_actions():
    rng = np.random.default_rng(0)
    for seed in range(10_000):
        n = int(rng.integers(1, 60))
        base = token_mask(n, seed=seed)
        out = span_mask(n, plan=base)
        assert len(out.masked) == len(base.masked) == mask_count(n)
        assert Counter(out.actions) == Counter(base.actions)
        if base.masked:
            assert len(out.runs()) >= 1
        if len(base.masked) >= 2:
            assert all(e > s for s, e in out.runs())


def test_mask_plan_json_and_apply():
    plan = MaskPlan(5, (1, 3, 4), ("mask", "random", "keep"))
    assert MaskPlan.from_json(plan.to_json()) == plan
    tokens = list("abcde")
    out, targets = apply_mask(tokens, plan, vocab=["z"], seed=0)
    assert out == ["a", "[MASK]", "c", "z", "e"]
    assert targets == [None, "b", None, "d", "e"]
    with pytest.raises(ValueError):
        MaskPlan(3, (0,), ("drop",))


# ---------------------------------------------------------------- corpora

SENTENCES = ["the beatles played in london", "a quiet day", "taylor swift met the beatles",
             "london calling by the clash", "nothing here"]
ENTITIES = ["the beatles", "london", "taylor swift", "the clash"]


def test_select_corpus_levels():
    assert select_corpus(SENTENCES, CorpusSpec("domain")) == SENTENCES
    assert select_corpus(SENTENCES, CorpusSpec("entity", ENTITIES, 2)) == [SENTENCES[0], SENTENCES[2], SENTENCES[3]]
    assert select_corpus(SENTENCES, CorpusSpec("task", ["taylor swift"])) == [SENTENCES[2]]
    with pytest.raises(ValueError):
        select_corpus(SENTENCES, CorpusSpec("entity", []))
    with pytest.raises(ValueError):
        CorpusSpec("entity", ENTITIES, min_entities=0)
    sel = select_corpus(SENTENCES, CorpusSpec("entity", ENTITIES, 2))
    assert selection_ratio(sel, SENTENCES) == pytest.approx(0.6)


def test_integrate_corpora():
    ent, task = ["e1", "e2", "e3"], ["t1", "t2"]
    assert integrate_corpora(ent, task, factor=1) == ent + task
    out = integrate_corpora(ent, task, factor=2, seed=0)
    assert len(out) == len(ent) + 2 * len(task)
    assert Counter(out) == Counter(ent + task * 2)
    assert integrate_corpora(ent, task, 2, seed=0) == out
    with pytest.raises(ValueError):
        integrate_corpora(ent, task, factor=0)
