import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layergate import model as tm
from layergate import ranking as rk
from layergate.errors import ConfigError, ContractError

from oracles import brute_force_jaccard

SMALL = tm.ModelConfig(blocks=1, d_model=8, heads=2, d_ffn=16, vocab=20, seq_len=16, seed=0)
DEFAULT = tm.ModelConfig()


def _ranking(scores_by_label=None, config=SMALL, seed=0):
    ids = tm.layer_ids(config)
    if scores_by_label is None:
        rng = np.random.default_rng(seed)
        scores = {lid: float(s) for lid, s in zip(ids, rng.normal(size=len(ids)))}
    else:
        scores = {lid: scores_by_label[str(lid)] for lid in ids}
    return rk.build_ranking(scores, config, {"dataset": "test", "seed": seed, "milestone": None})


def test_entries_sorted_descending_with_tie_break():
    ids = tm.layer_ids(SMALL)
    scores = {lid: 1.0 for lid in ids}  # all tied
    scores[tm.LayerId(0, "W_v")] = 2.0
    r = rk.build_ranking(scores, SMALL)
    assert r.entries[0].layer == tm.LayerId(0, "W_v")
    rest = [e.layer for e in r.entries[1:]]
    assert rest == sorted(rest, key=tm.tie_key)
    assert r.entries[-1].layer == tm.HEAD_LAYER  # head sorts last among ties


def test_entries_are_permutation_of_layers():
    r = _ranking()
    assert sorted(r.layers(), key=tm.tie_key) == sorted(tm.layer_ids(SMALL), key=tm.tie_key)


def test_select_top_fraction_counts():
    r = _ranking(config=DEFAULT)
    assert len(rk.select_top_fraction(r, 1.0)) == 29
    assert len(rk.select_top_fraction(r, 0.75)) == 22  # ceil(21.75)
    small = _ranking(config=tm.ModelConfig(blocks=1, d_model=8, heads=2, d_ffn=16, vocab=20, seq_len=16, seed=0))
    assert len(rk.select_top_fraction(small, 0.75)) == 6  # ceil(6.0) of 8


def test_select_top_fraction_validates_p():
    r = _ranking()
    for p in (0.0, -0.2, 1.5):
        with pytest.raises(ConfigError):
            rk.select_top_fraction(r, p)


def test_select_monotone_in_p():
    r = _ranking(seed=3)
    prev = frozenset()
    for p in (0.1, 0.25, 0.5, 0.75, 1.0):
        cur = rk.select_top_fraction(r, p)
        assert prev <= cur
        prev = cur


def test_jaccard_basics():
    assert rk.jaccard({"a", "b"}, {"a", "b"}) == 1.0
    assert rk.jaccard({"a"}, {"b"}) == 0.0
    assert rk.jaccard({"a", "b", "c"}, {"b", "c", "d"}) == 0.5
    assert rk.jaccard(set(), set()) == 1.0


@settings(max_examples=200)
@given(
    st.sets(st.integers(0, 40), max_size=20),
    st.sets(st.integers(0, 40), max_size=20),
)
def test_jaccard_matches_brute_force_and_properties(a, b):
    j = rk.jaccard(a, b)
    assert j == brute_force_jaccard(a, b)
    assert 0.0 <= j <= 1.0
    assert j == rk.jaccard(b, a)
    assert rk.jaccard(a, a) == 1.0


def test_jaccard_brute_force_thousand_pairs():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        a = set(rng.choice(60, size=rng.integers(0, 30), replace=False).tolist())
        b = set(rng.choice(60, size=rng.integers(0, 30), replace=False).tolist())
        assert rk.jaccard(a, b) == brute_force_jaccard(a, b)


def test_compare_rankings_self():
    r = _ranking()
    m = rk.compare_rankings([r], 0.75)
    assert m.shape == (1, 1) and m[0, 0] == 1.0


def test_compare_rankings_reversed_halves():
    cfg = tm.ModelConfig(blocks=1, d_model=8, heads=2, d_ffn=16, vocab=20, seq_len=16, seed=0)
    ids = tm.layer_ids(cfg)
    fwd = {lid: float(i) for i, lid in enumerate(ids)}
    rev = {lid: float(-i) for i, lid in enumerate(ids)}
    r1 = rk.build_ranking(fwd, cfg)
    r2 = rk.build_ranking(rev, cfg)
    m = rk.compare_rankings([r1, r2], 0.5)
    assert m[0, 1] == 0.0  # top half vs bottom half of 8 distinct scores


def test_compare_rankings_fingerprint_mismatch():
    r1 = _ranking(config=SMALL)
    r2 = _ranking(config=DEFAULT)
    with pytest.raises(ContractError):
        rk.compare_rankings([r1, r2], 0.75)


def test_random_rankings_match_monte_carlo_baseline():
    baseline = rk.random_overlap_baseline(29, 0.75)
    assert abs(baseline - 0.60) < 0.05
    rankings = [_ranking(config=DEFAULT, seed=s) for s in range(3)]
    m = rk.compare_rankings(rankings, 0.75)
    off = [m[i, j] for i in range(3) for j in range(i + 1, 3)]
    assert abs(float(np.mean(off)) - baseline) < 0.12


def test_random_baseline_cached_and_deterministic():
    assert rk.random_overlap_baseline(29, 0.75) == rk.random_overlap_baseline(29, 0.75)


def test_intersect_unimportant():
    cfg = tm.ModelConfig(blocks=1, d_model=8, heads=2, d_ffn=16, vocab=20, seq_len=16, seed=0)
    ids = tm.layer_ids(cfg)
    s1 = {lid: float(i) for i, lid in enumerate(ids)}
    r1 = rk.build_ranking(s1, cfg)
    r2 = rk.build_ranking(s1, cfg)
    assert rk.intersect_unimportant([r1, r2], 3) == rk.bottom_layers(r1, 3)
    assert rk.intersect_unimportant([r1, r2], len(ids)) == frozenset(ids)

    s2 = dict(s1)
    lowest, second = r1.entries[-1].layer, r1.entries[-2].layer
    s2[lowest], s2[second] = s2[second], s2[lowest]  # swap the bottom two
    r3 = rk.build_ranking(s2, cfg)
    assert rk.intersect_unimportant([r1, r3], 1) == frozenset()
    with pytest.raises(ConfigError):
        rk.intersect_unimportant([r1, r2], len(ids) + 1)
    with pytest.raises(ContractError):
        rk.intersect_unimportant([r1], 2)


def test_export_heatmap_rows_and_determinism(tmp_path):
    r = _ranking(config=DEFAULT, seed=1)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    rk.export_heatmap(r, p1)
    rk.export_heatmap(r, p2)
    lines = p1.read_text().splitlines()
    assert len(lines) == 30  # header + 29 layers
    assert lines[0] == "block,role,score,gate,rank,important"
    assert p1.read_bytes() == p2.read_bytes()


def test_ranking_json_roundtrip(tmp_path):
    r = _ranking(config=DEFAULT, seed=2)
    path = tmp_path / "ranking.json"
    rk.save_ranking(r, path)
    loaded = rk.load_ranking(path)
    assert loaded.fingerprint == r.fingerprint
    assert loaded.provenance == r.provenance
    assert loaded.entries == r.entries  # bit-exact scores via repr round-trip
