import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from halluguard.core import BBox, Description, Detection, DetectionSet, Grounding, Token, TruthTag
from halluguard.errors import EmptySet, OutOfRange, UnknownTagInOracleMode, UnknownTruthTags, ValidationError
from halluguard.grounding import (
    GroundingMode,
    GroundingReport,
    RateEstimator,
    allowed_words,
    classify_tokens,
    default_whitelist,
    epsilon_detect,
    grounding_score,
    match_token,
    update_rate,
)

G, U, T = Grounding.GROUNDED, Grounding.UNGROUNDED, Grounding.TEMPLATE


def tagged(*pairs, index=0):
    return Description(index, tuple(Token(text, tag) for text, tag in pairs))


def test_counting_example_in_both_modes():
    desc = tagged(
        ("a", T), ("the", T), ("is", T),
        ("dog", G), ("dog", G), ("dog", G), ("dog", G), ("dog", G), ("dog", G),
        ("frisbee", U),
    )
    for mode in (GroundingMode.ORACLE, GroundingMode.TOKEN_LEVEL):
        rep = grounding_score([desc], {"dog"}, mode)
        assert rep.gamma == 6 / 7
        assert (rep.grounded_tokens, rep.scored_tokens) == (6, 7)
        assert rep.hallucinated_descriptions == (0,)
        assert rep.h_frame == 1.0 - rep.gamma


def test_zero_descriptions_are_vacuously_grounded():
    for mode in GroundingMode:
        rep = grounding_score([], set(), mode)
        assert rep.gamma == 1.0 and rep.h_frame == 0.0 and rep.hallucinated_descriptions == ()


def test_zero_content_tokens():
    rep = grounding_score([tagged(("the", T), ("a", T))], {"dog"})
    assert rep.gamma == 1.0 and rep.scored_tokens == 0


def test_gamma_091_gives_h_009():
    desc = tagged(*[("dog", G)] * 91, *[("cat", U)] * 9)
    rep = grounding_score([desc], {"dog"}, GroundingMode.ORACLE)
    assert rep.gamma == 0.91
    assert rep.h_frame == pytest.approx(0.09, abs=1e-15)
    assert rep.h_frame + rep.gamma == 1.0


def test_match_token_examples():
    assert match_token("dog", {"dog"}) is G
    assert match_token("the", {"dog"}) is T
    assert match_token("frisbee", {"dog"}) is U
    assert match_token("Dog", {"dog"}) is G
    assert match_token("light", {"traffic light"}) is G
    assert match_token("traffic", {"traffic light"}) is G
    assert match_token("dog", {"dog"}, whitelist={"dog"}) is T
    with pytest.raises(ValidationError):
        match_token("", {"dog"})


def test_adapter_reply_tagging():
    desc = Description(0, tuple(Token(w) for w in "a dog sitting".split()))
    tags = [t.grounding for t in classify_tokens(desc, {"dog"}).tokens]
    assert tags == [T, G, U]


def test_description_level_counts_descriptions():
    good = tagged(("dog", G), ("the", T))
    bad = tagged(("cat", U), ("dog", G), index=1)
    rep = grounding_score([good, bad, good], {"dog"}, GroundingMode.DESCRIPTION_LEVEL)
    assert rep.gamma == 2 / 3
    assert (rep.grounded_tokens, rep.scored_tokens) == (2, 3)
    assert rep.hallucinated_descriptions == (1,)


def test_oracle_refuses_unknown_tags():
    with pytest.raises(UnknownTagInOracleMode):
        grounding_score([Description(0, (Token("dog"),))], {"dog"}, GroundingMode.ORACLE)


def test_report_round_trip():
    rep = grounding_score([tagged(("dog", G), ("cat", U))], {"dog"})
    assert GroundingReport.from_record(rep.to_record()) == rep


# -- properties --------------------------------------------------------------

VOCAB = ["dog", "cat", "car", "traffic light", "tv"]
WORDS = ["dog", "cat", "car", "traffic", "light", "tv", "the", "a", "is", "in", "zebra", "kite"]
token_lists = st.lists(st.sampled_from(WORDS), min_size=1, max_size=10)
scenes = st.tuples(
    st.lists(token_lists, max_size=6),
    st.sets(st.sampled_from(VOCAB)),
)


def build(desc_words):
    return [Description(i, tuple(Token(w) for w in ws)) for i, ws in enumerate(desc_words)]


@given(scenes, st.sampled_from([GroundingMode.TOKEN_LEVEL, GroundingMode.DESCRIPTION_LEVEL]))
def test_report_invariants(scene, mode):
    desc_words, labels = scene
    rep = grounding_score(build(desc_words), labels, mode)
    assert 0.0 <= rep.gamma <= 1.0
    assert rep.h_frame + rep.gamma == 1.0
    assert rep.h_frame == 1.0 - rep.gamma
    if rep.scored_tokens:
        assert rep.gamma == rep.grounded_tokens / rep.scored_tokens
    assert (rep.gamma == 1.0) == (rep.hallucinated_descriptions == ())


@given(scenes, st.randoms(use_true_random=False))
def test_permutation_invariance(scene, rnd):
    desc_words, labels = scene
    base = grounding_score(build(desc_words), labels).gamma
    shuffled = [rnd.sample(ws, len(ws)) for ws in desc_words]
    rnd.shuffle(shuffled)
    assert grounding_score(build(shuffled), labels).gamma == base


@given(scenes, st.sampled_from(["zebra", "kite"]), st.integers(0, 5))
def test_monotonicity(scene, extra, which):
    desc_words, labels = scene
    if not desc_words:
        return
    i = which % len(desc_words)
    base = grounding_score(build(desc_words), labels).gamma
    worse = [list(ws) for ws in desc_words]
    worse[i].append(extra)
    assert grounding_score(build(worse), labels).gamma <= base
    if labels:
        better = [list(ws) for ws in desc_words]
        better[i].append(sorted(labels)[0])
        assert grounding_score(build(better), labels).gamma >= base


def test_allowed_words_split_multiword_labels():
    assert allowed_words({"traffic light", "dog"}) == {"traffic light", "traffic", "light", "dog"}


# -- rate estimator ----------------------------------------------------------


def test_rate_examples():
    est = RateEstimator(3)
    for h in (0.0, 0.3, 0.3):
        update_rate(est, h)
    assert est.h_t == pytest.approx(0.2)
    update_rate(est, 0.6)
    assert est.h_t == pytest.approx(0.4)
    one = update_rate(RateEstimator(1), 0.09)
    assert one.h_t == 0.09


def test_rate_rejects_out_of_range():
    with pytest.raises(OutOfRange):
        RateEstimator().update(1.2)
    with pytest.raises(ValidationError):
        RateEstimator(0)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=100), st.integers(1, 40))
def test_rate_is_window_mean(hs, window):
    est = RateEstimator(window)
    for h in hs:
        est.update(h)
    tail = hs[-window:]
    assert est.h_t == pytest.approx(sum(tail) / len(tail), abs=1e-12)
    assert 0.0 <= est.h_t <= 1.0


# -- epsilon_detect ----------------------------------------------------------


def dets(n_tp, n_fp):
    out = [Detection(BBox(0, 0, 5, 5), "dog", 0.9, TruthTag.TRUE_POSITIVE)] * n_tp
    out += [Detection(BBox(0, 0, 5, 5), "cat", 0.3, TruthTag.FALSE_POSITIVE)] * n_fp
    random.Random(0).shuffle(out)
    return DetectionSet(0, tuple(out))


def test_epsilon_detect_examples():
    assert epsilon_detect(dets(8, 2)) == 0.2
    assert epsilon_detect(dets(5, 0)) == 0.0
    assert epsilon_detect(dets(0, 4)) == 1.0


def test_epsilon_detect_errors():
    with pytest.raises(EmptySet):
        epsilon_detect(DetectionSet(0, ()))
    with pytest.raises(UnknownTruthTags):
        epsilon_detect(DetectionSet(0, (Detection(BBox(0, 0, 5, 5), "dog", 0.9),)))


def test_default_whitelist_cached():
    assert default_whitelist() is default_whitelist()
