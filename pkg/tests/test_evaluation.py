import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qexpand.classic import QEMethodConfig
from qexpand.corpus import SynthConfig, generate_corpus
from qexpand.errors import ConfigError, DataError
from qexpand.evaluation import (UndefinedAP, average_precision, evaluate, evaluate_protocols, group_analysis,
                                mean_map, sweep_nqe)
from qexpand.formats import QueryAnnotation
from qexpand.index import EmbeddingMatrix, VectorIndex

from oracles import ap_reference


def test_ap_fixtures():
    assert average_precision(["a", "b", "x"], ["a", "b"]) == 1.0
    assert average_precision(["x", "a"], ["a"]) == 0.25
    assert average_precision(["a", "x", "b"], ["a", "b"]) == pytest.approx(0.79167, abs=5e-6)
    assert average_precision(["j1", "j2", "a"], ["a"], ["j1", "j2"]) == 1.0


def test_ap_missing_positive_counts_zero_and_empty_is_undefined():
    assert average_precision(["a", "x"], ["a", "b"]) == pytest.approx(0.5)
    with pytest.raises(UndefinedAP):
        average_precision(["a"], [])


def _random_instance(rng):
    n = int(rng.integers(1, 40))
    items = [f"i{j}" for j in range(n)]
    ranked = list(rng.permutation(items))
    roles = rng.integers(0, 3, size=n)
    pos = [i for i, r in zip(items, roles) if r == 1]
    junk = [i for i, r in zip(items, roles) if r == 2]
    if not pos:
        pos = [items[0]]
        junk = [j for j in junk if j != items[0]]
    return ranked, pos, junk


def test_ap_matches_reference_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(500):
        ranked, pos, junk = _random_instance(rng)
        assert abs(average_precision(ranked, pos, junk) - ap_reference(ranked, pos, junk)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_bounds_and_junk_removal(seed):
    ranked, pos, junk = _random_instance(np.random.default_rng(seed))
    ap = average_precision(ranked, pos, junk)
    assert 0 <= ap <= 1
    assert ap == average_precision([r for r in ranked if r not in set(junk)], pos)


def _tiny_corpus(sigma=0.2, seed=0):
    return generate_corpus(SynthConfig(n_classes=20, items_per_class=(5, 12), dim=16, sigma=sigma,
                                       n_distractors=50, seed=seed))


def test_sigma_zero_gives_perfect_map():
    c = _tiny_corpus(sigma=0.0)
    reports = evaluate_protocols(VectorIndex(c.database()), c.queries(), c.annotations, QEMethodConfig("none"))
    assert [r.map for r in reports] == [1.0, 1.0]


def test_evaluate_matches_manual_per_query_ap():
    c = _tiny_corpus()
    idx = VectorIndex(c.database())
    rep = evaluate(idx, c.queries(), c.annotations, QEMethodConfig("none"), "medium")
    q = c.queries()
    for qvec, qid in zip(q.rows, q.ids):
        ranked = idx.knn(qvec, idx.n, [qid]).ids
        pos, junk = c.annotations[qid].resolve("medium")
        assert rep.per_query_ap[qid] == pytest.approx(ap_reference(ranked, pos, junk), abs=1e-12)


def test_query_without_positives_is_skipped():
    idx = VectorIndex(EmbeddingMatrix(np.eye(3), ["a", "b", "c"]))
    queries = EmbeddingMatrix(np.eye(3)[:2], ["q1", "q2"])
    ann = {"q1": QueryAnnotation("q1", ["a"], [], []), "q2": QueryAnnotation("q2", ["b"], [], [])}
    hard = evaluate(idx, queries, ann, QEMethodConfig("none"), "hard")
    assert hard.per_query_ap == {} and np.isnan(hard.map)
    easy = evaluate(idx, queries, ann, QEMethodConfig("none"), "easy")
    assert easy.per_query_ap == {"q1": 1.0, "q2": 1.0}


def test_evaluate_errors():
    c = _tiny_corpus()
    idx = VectorIndex(c.database())
    with pytest.raises(ConfigError):
        evaluate(idx, c.queries(), c.annotations, QEMethodConfig("none"), "extreme")
    with pytest.raises(DataError):
        evaluate(idx, c.queries(), {}, QEMethodConfig("none"))


def test_threads_do_not_change_results():
    c = _tiny_corpus(seed=2)
    idx = VectorIndex(c.database())
    a = evaluate_protocols(idx, c.queries(), c.annotations, QEMethodConfig("aqe", 4), threads=1)
    b = evaluate_protocols(idx, c.queries(), c.annotations, QEMethodConfig("aqe", 4), threads=3)
    assert [r.per_query_ap for r in a] == [r.per_query_ap for r in b]


def test_sweep_equals_individual_evaluations():
    c = _tiny_corpus(seed=3)
    idx = VectorIndex(c.database())
    methods = [QEMethodConfig("aqe"), QEMethodConfig("alpha-qe", alpha=3)]
    table = sweep_nqe(idx, c.queries(), c.annotations, methods, [0, 2, 5])
    assert len(table) == 6
    for m in methods:
        for n in (0, 2, 5):
            want = mean_map(evaluate_protocols(idx, c.queries(), c.annotations, m.with_nqe(n)))
            assert table[(m.label, n)] == want
    none = mean_map(evaluate_protocols(idx, c.queries(), c.annotations, QEMethodConfig("none")))
    assert table[(methods[0].label, 0)] == none


def test_group_analysis():
    before = {f"q{i}": v for i, v in enumerate([0.1, 0.2, 0.3, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])}
    after = {k: min(1.0, v + 0.1) for k, v in before.items()}
    groups = group_analysis(before, after, grouping="by-preqe-ap")
    assert [g.n_queries for g in groups] == [3, 3, 3]
    assert groups[0].map_before == pytest.approx(0.2) and groups[0].map_after == pytest.approx(0.3)
    assert groups[0].relative_improvement == pytest.approx(50.0)
    counts = {k: i for i, k in enumerate(sorted(before))}
    assert sum(g.n_queries for g in group_analysis(before, after, counts)) == 9
    with pytest.raises(ConfigError):
        group_analysis(before, after)
    with pytest.raises(ConfigError):
        group_analysis({"a": 1.0}, {"a": 1.0}, grouping="by-preqe-ap")
    with pytest.raises(ConfigError):
        group_analysis(before, {}, grouping="by-preqe-ap")
