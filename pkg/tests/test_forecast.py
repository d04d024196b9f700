from __future__ import annotations

import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialogsynth.concept_checker import match_concepts
from dialogsynth.corpus import Dialogue, Utterance, serialize_dialogue
from dialogsynth.errors import IngestError, PreconditionError
from dialogsynth.extractor import Concept, ConceptSet
from dialogsynth.forecast import (
    SUMMARY_FIELDS,
    CommitPolicy,
    PredictionTrajectory,
    TrajectoryMetrics,
    TurnPrediction,
    UnrollConfig,
    aggregate,
    build_dynamic_examples,
    build_static_example,
    commit,
    earliness,
    edit_overheads,
    evaluate_trajectory,
    inject_concept_errors,
    read_label_map,
    read_trajectories,
)
from dialogsynth.gateway import IdentityEmbedder

import oracles
from strategies import dialogues


def traj(*probs, T=None):
    return PredictionTrajectory("d", tuple(TurnPrediction(t, p) for t, p in enumerate(probs, 1)), T)


# -- commit -----------------------------------------------------------------------------


def test_commit_examples():
    d = commit(TurnPrediction(1, {"cardiac": 0.7, "stroke": 0.3}))
    assert (d.top, d.confidence, d.labels) == ("cardiac", 0.7, frozenset({"cardiac"}))
    assert commit(TurnPrediction(1, {"a": 0.49, "b": 0.1})).deferred
    assert commit(TurnPrediction(1, {"a": 0.5})).top == "a"


def test_commit_tie_break_is_lexicographic():
    assert commit(TurnPrediction(1, {"b": 0.8, "a": 0.8, "c": 0.6})).top == "a"


def test_policy_bounds():
    for tau in (0.0, 1.0, -1, 2):
        with pytest.raises(PreconditionError):
            CommitPolicy(tau)


def test_turn_validation():
    with pytest.raises(PreconditionError):
        TurnPrediction(1, {"a": 1.5})
    with pytest.raises(PreconditionError):
        TurnPrediction(0, {})
    with pytest.raises(PreconditionError):
        PredictionTrajectory("d", (TurnPrediction(2, {}), TurnPrediction(2, {})))


probs = st.dictionaries(st.sampled_from("abc"), st.floats(0, 1), max_size=3)


@given(probs, st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_commit_set_antitone_in_tau(p, t1, t2):
    lo, hi = sorted((t1, t2))
    tp = TurnPrediction(1, p)
    assert commit(tp, CommitPolicy(hi)).labels <= commit(tp, CommitPolicy(lo)).labels


# -- earliness / EO -------------------------------------------------------------------------


def test_earliness():
    assert earliness(2, 10) == 0.8
    assert earliness(5, 5) == 0.0
    with pytest.raises(PreconditionError):
        earliness(11, 10)
    with pytest.raises(PreconditionError):
        earliness(0, 10)


@given(st.integers(1, 500), st.integers(0, 500))
def test_earliness_formula(t, extra):
    T = t + extra
    assert earliness(t, T) == 1 - t / T
    assert 0 <= earliness(t, T) < 1


def test_edit_overhead_examples():
    assert edit_overheads(["A"], {"A"}) == 0.0
    assert edit_overheads(["B", "A"], {"A"}) == 0.0
    assert edit_overheads(["A", "B", "A"], {"A"}) == 1.0
    assert edit_overheads(["B"], {"A"}) == 1.0
    assert edit_overheads(["B", "C", "A"], {"A"}) == 0.5
    with pytest.raises(PreconditionError):
        edit_overheads([], {"A"})


def test_edit_overheads_exhaustive_small():
    for n in range(1, 5):
        for seq in itertools.product("ABC", repeat=n):
            for gt in ({"A"}, {"B"}, {"C"}):
                v = edit_overheads(list(seq), gt)
                assert v == oracles.edit_overheads(list(seq), gt)
                assert 0.0 <= v <= 1.0


# -- trajectories ------------------------------------------------------------------------------


def test_single_turn_commit():
    m = evaluate_trajectory(traj({"a": 0.9}, {"a": 0.1}, {"a": 0.1}, {"a": 0.1}), {"a"})
    assert m.first_label == m.last_label == "a"
    assert m.first_correct and m.last_correct
    assert m.earliness_first == 0.75 and m.edit_overhead == 0.0


def test_all_defer():
    m = evaluate_trajectory(traj({"a": 0.1}, {"b": 0.2}), {"a"})
    assert m == TrajectoryMetrics("d", False)
    assert m.first_label is None and m.edit_overhead is None and m.earliness_first == 0.0


def test_deferring_turns_after_commit_are_skipped():
    m = evaluate_trajectory(traj({"b": 0.6}, {"b": 0.1}, {"a": 0.7}, {"a": 0.2}), {"a"})
    assert (m.first_label, m.last_label) == ("b", "a")
    assert m.earliness_first == 0.75 and m.earliness_first_correct == 0.25
    assert m.edit_overhead == 0.0


def test_explicit_length_used_for_earliness():
    m = evaluate_trajectory(traj({"a": 0.9}, T=10), {"a"})
    assert m.earliness_first == pytest.approx(0.9)


def test_never_correct_earliness_zero():
    m = evaluate_trajectory(traj({"b": 0.9}, {"c": 0.9}), {"a"})
    assert m.earliness_first_correct == 0.0 and m.edit_overhead == 1.0


@settings(max_examples=300, deadline=None)
@given(st.lists(probs, min_size=1, max_size=6), st.sampled_from("abc"), st.sampled_from([0.25, 0.5, 0.75]))
def test_trajectory_matches_oracle(turns, gt, tau):
    t = traj(*turns)
    m = evaluate_trajectory(t, {gt}, CommitPolicy(tau))
    ref = oracles.trajectory(list(enumerate(turns, 1)), len(turns), {gt}, tau)
    assert m.committed == ref["committed"]
    for k, v in ref.items():
        assert getattr(m, k) == v
    assert 0 <= m.earliness_first <= 1 and 0 <= m.earliness_first_correct <= 1


# -- aggregate ----------------------------------------------------------------------------------


def test_aggregate_examples():
    ok = evaluate_trajectory(traj({"a": 0.8}, {"a": 0.9}), {"a"})
    none = evaluate_trajectory(traj({"a": 0.1}), {"a"})
    s = aggregate([ok, none])
    assert s["first_accuracy"] == 100.0 and s["non_commit_rate"] == 50.0
    assert s["first_confidence"] == 80.0 and s["last_confidence"] == 90.0
    assert set(SUMMARY_FIELDS) <= set(s)
    s = aggregate([ok, ok])
    assert (s["first_accuracy"], s["last_accuracy"], s["edit_overhead"], s["non_commit_rate"]) == (100, 100, 0, 0)
    assert aggregate([none])["first_accuracy"] is None
    with pytest.raises(PreconditionError):
        aggregate([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(probs, min_size=1, max_size=4), min_size=1, max_size=8))
def test_aggregate_recount(all_turns):
    ms = [evaluate_trajectory(traj(*t), {"a"}) for t in all_turns]
    s = aggregate(ms)
    done = [m for m in ms if m.committed]
    assert s["non_commit_rate"] == pytest.approx(100 * (len(ms) - len(done)) / len(ms))
    if done:
        assert s["last_accuracy"] == pytest.approx(100 * sum(m.last_correct for m in done) / len(done))
        assert s["edit_overhead"] == pytest.approx(100 * sum(m.edit_overhead for m in done) / len(done))


# -- training data ---------------------------------------------------------------------------------


def dialogue_of(n, labels=("Cardiac",)):
    utts = tuple(Utterance(i, "Dispatch", "radio_dispatch", "EMT", f"line {i}") for i in range(1, n + 1))
    return Dialogue("d", "r", utts, labels)


def test_static_example():
    d = dialogue_of(12)
    ex = build_static_example(d)
    assert ex.input == serialize_dialogue(d) and ex.labels == ("Cardiac",) and ex.prefix_len == 12
    with pytest.raises(PreconditionError):
        build_static_example(dialogue_of(3, ()))


def test_dynamic_examples():
    assert [e.prefix_len for e in build_dynamic_examples(dialogue_of(12))] == [12, 11, 10, 9, 8]
    assert [e.prefix_len for e in build_dynamic_examples(dialogue_of(3))] == [3, 2, 1]
    assert len(build_dynamic_examples(dialogue_of(12), UnrollConfig(1))) == 1
    with pytest.raises(PreconditionError):
        UnrollConfig(0)
    with pytest.raises(PreconditionError):
        build_dynamic_examples(dialogue_of(2, ()))


@settings(max_examples=100, deadline=None)
@given(dialogues(), st.integers(1, 8))
def test_dynamic_prefix_chain(d, k):
    exs = build_dynamic_examples(d, UnrollConfig(k))
    assert len(exs) == min(k, len(d.utterances))
    assert exs[0].input == serialize_dialogue(d)
    for longer, shorter in zip(exs, exs[1:]):
        assert longer.input.startswith(shorter.input + "\n")


# -- error injection ---------------------------------------------------------------------------------


def concept_set(n, seed=0):
    return ConceptSet(Concept(f"concept {i}", f"C{i:03d}") for i in range(n))


def test_injection_counts_and_determinism():
    cs = concept_set(30)
    a = inject_concept_errors(cs, 10, 10, seed=1)
    b = inject_concept_errors(cs, 10, 10, seed=1)
    assert len(a.gt_fp) == 10 and len(a.gt_fn) == 10
    assert [c.key for c in a.corrupted] == [c.key for c in b.corrupted]
    assert a.gt_fn <= cs.keys() and not (a.gt_fp & cs.keys())
    assert a.corrupted.keys() == (cs.keys() - a.gt_fn) | a.gt_fp


def test_injection_identity_and_bounds():
    cs = concept_set(5)
    same = inject_concept_errors(cs, 0, 0, seed=3)
    assert [c.key for c in same.corrupted] == [c.key for c in cs]
    with pytest.raises(PreconditionError):
        inject_concept_errors(cs, 0, 6, seed=0)
    with pytest.raises(PreconditionError):
        inject_concept_errors(cs, 1, 3, seed=0, n_substitute=2)


def test_substitution_uses_vocabulary_in_place():
    cs = concept_set(10)
    vocab = [Concept(f"alt {i}", f"A{i}") for i in range(20)]
    c = inject_concept_errors(cs, 4, 4, seed=2, n_substitute=4, vocabulary=vocab)
    assert len(c.corrupted) == 10
    assert c.gt_fp <= {v.key for v in vocab}


@settings(max_examples=50, deadline=None)
@given(st.integers(5, 30), st.integers(0, 5), st.integers(0, 5), st.integers(0, 1000))
def test_checker_recovers_insert_delete(n, n_fp, n_fn, seed):
    cs = concept_set(n)
    c = inject_concept_errors(cs, n_fp, n_fn, seed)
    rep = match_concepts(cs, c.corrupted, IdentityEmbedder())
    assert rep.missing.keys() == c.gt_fn
    assert rep.hallucinated.keys() == c.gt_fp


# -- readers ------------------------------------------------------------------------------------------


def test_read_trajectories_and_labels():
    lines = [json.dumps({"dialogue_id": "d1", "turns": [{"t": 1, "probs": {"a": 0.6}}]}), ""]
    [t] = read_trajectories(lines)
    assert t.dialogue_id == "d1" and t.T == 1
    assert read_label_map(['{"dialogue_id": "d1", "labels": ["a"]}']) == {"d1": frozenset({"a"})}


@pytest.mark.parametrize(
    "line",
    ["{", "[]", '{"dialogue_id": "d"}', '{"dialogue_id": "d", "turns": [{"t": 1, "probs": {"a": 2}}]}'],
)
def test_malformed_trajectory_line_is_located(line):
    with pytest.raises(IngestError, match=r"t\.jsonl:2"):
        read_trajectories(['{"dialogue_id": "ok", "turns": []}', line], "t.jsonl")


def test_malformed_labels():
    with pytest.raises(IngestError, match="labels:1"):
        read_label_map(['{"dialogue_id": "d", "labels": "a"}'], "labels")
