import json
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillguard.stats import (
    FlagSet,
    UniverseNotCovered,
    UnmappedDigest,
    agreement_report,
    common_universe,
    conditional_overlap,
    flagged_by_k,
    load_flag_sets,
    repo_aggregate,
)

from agreement_oracle import brute_histogram, brute_overlap, generate_repo_corpus, random_instance

U5 = {1, 2, 3, 4, 5}


def sets(**flags):
    return [FlagSet(name, f, U5) for name, f in flags.items()]


def test_asymmetric_overlap():
    m = conditional_overlap(sets(A={1, 2, 3}, B={3, 4}), U5)
    assert m["A"]["B"] == Fraction(1, 3) and m["B"]["A"] == Fraction(1, 2)
    assert m["A"]["A"] == m["B"]["B"] == 1


def test_disjoint_sets():
    m = conditional_overlap(sets(A={1}, B={2}), U5)
    assert m["A"]["B"] == m["B"]["A"] == 0


def test_undefined_is_none():
    m = conditional_overlap(sets(A=set(), B={2}), U5)
    assert m["A"]["B"] is None and m["A"]["A"] is None and m["B"]["A"] == 0


def test_flagged_by_k_examples():
    assert flagged_by_k(sets(A={1, 2}, B={2, 3}), U5) == {1: 2, 2: 1}
    assert flagged_by_k(sets(A=set(), B=set()), U5) == {1: 0, 2: 0}


def test_universe_must_be_covered():
    with pytest.raises(UniverseNotCovered):
        conditional_overlap([FlagSet("A", {1}, {1, 2})], {1, 2, 3})


def test_common_universe():
    assert common_universe([FlagSet("A", set(), {1, 2, 3}), FlagSet("B", {4}, {2, 3})]) == {2, 3}


def test_flags_outside_universe_ignored():
    m = conditional_overlap([FlagSet("A", {1, 9}, {1, 9}), FlagSet("B", {9}, {1, 9})], {1})
    assert m["A"]["B"] == 0


def test_random_instances_match_brute_force():
    rnd = random.Random(5)
    for _ in range(10):
        flags, universe, skills = random_instance(rnd)
        fs = [FlagSet(k, v, skills) for k, v in flags.items()]
        assert conditional_overlap(fs, universe) == brute_overlap(flags, universe)
        assert flagged_by_k(fs, universe) == brute_histogram(flags, universe)


@settings(max_examples=60)
@given(st.lists(st.sets(st.integers(0, 30), max_size=20), min_size=1, max_size=5), st.sets(st.integers(0, 30)))
def test_overlap_properties(flag_lists, universe):
    fs = [FlagSet(f"s{i}", f, set(range(31))) for i, f in enumerate(flag_lists)]
    m = conditional_overlap(fs, universe)
    for a in m:
        for b, v in m[a].items():
            assert v is None or 0 <= v <= 1
        assert m[a][a] in (None, 1)
    hist = flagged_by_k(fs, universe)
    union = set().union(*flag_lists) & universe
    assert sum(hist.values()) == len(union)


def test_repo_aggregation_examples():
    flags, summary = repo_aggregate({"a": True, "b": False, "c": False},
                                    {"a": {"r1"}, "b": {"r1"}, "c": {"r2"}})
    assert flags == {"r1": True, "r2": False}
    assert (summary.skills, summary.flagged_skills, summary.repos, summary.flagged_repos) == (3, 1, 2, 1)


def test_unmapped_flagged_digest():
    with pytest.raises(UnmappedDigest):
        repo_aggregate({"a": True}, {})


def test_repo_rate_exceeds_skill_rate():
    skill_flags, mapping = generate_repo_corpus(random.Random(19))
    _, summary = repo_aggregate(skill_flags, mapping)
    assert 0.15 < summary.skill_rate < 0.23
    assert summary.repo_rate > summary.skill_rate


@given(st.dictionaries(st.text(min_size=1, max_size=3), st.booleans(), max_size=15), st.data())
def test_repo_aggregate_monotone(skill_flags, data):
    repos = ["r1", "r2", "r3"]
    mapping = {d: {data.draw(st.sampled_from(repos))} for d in skill_flags}
    before, _ = repo_aggregate(skill_flags, mapping)
    target = data.draw(st.sampled_from(repos))
    after_add, _ = repo_aggregate({**skill_flags, "NEW": True}, {**mapping, "NEW": {target}})
    assert after_add[target] is True
    assert all(after_add[r] or not before.get(r) for r in before)
    clean = [d for d, f in skill_flags.items() if not f and mapping[d] == {target}]
    if clean and any(mapping[d] == {target} and d != clean[0] for d in skill_flags):
        removed = {d: f for d, f in skill_flags.items() if d != clean[0]}
        after_rm, _ = repo_aggregate(removed, mapping)
        assert after_rm[target] == before[target]


def test_load_flag_sets(tmp_path):
    rows = [{"scanner_id": "x", "digest": "d1", "flagged": True}, {"scanner_id": "x", "digest": "d2", "flagged": False},
            {"scanner_id": "y", "digest": "d2", "flagged": True}]
    (tmp_path / "a.jsonl").write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    [x, y] = load_flag_sets(tmp_path)
    assert (x.flagged, x.scanned, y.flagged, y.scanned) == ({"d1"}, {"d1", "d2"}, {"d2"}, {"d2"})


def test_agreement_report_json_safe():
    report = agreement_report(sets(A={1, 2, 3}, B={3, 4}, C=set()))
    json.dumps(report)
    assert report["matrix"]["A"]["B"] == round(1 / 3, 6) and report["matrix"]["C"]["A"] is None
    assert report["union_flagged"] == 4 and report["flagged_by_k"] == {"1": 3, "2": 1, "3": 0}
