import json

import pytest

from flowcorrect.codec import parse, serialize_canonical
from flowcorrect.evaluate import (
    FailureClass,
    PredictionRecord,
    classify_failure,
    graph_edit_distance,
    match,
    report,
    topk_accuracy,
    _greedy_ged_upper_bound,
    _to_nx,
)

R1 = "(raw)(r)[(C){PC}_1](v)<_1(prod)"
R1_BROKEN = "(raw)(r)(v)(prod)"
TWO_LOOP = "(raw)(r)[(C){PC}_1](v)<_1(tank)[(C){LC}_2](v)<_2(prod)"
TWO_BROKEN = "(raw)(r)(v)(tank)(v)(prod)"
HALF_FIXED = "(raw)(r)(v)(tank)[(C){LC}_1](v)<_1(prod)"
EXTRA_VALVE = "(raw)(r)[(C){PC}_1](v)<_1(v)(prod)"  # target plus a spurious valve


def rec(source, target, *hyps):
    return PredictionRecord(
        source=source, target=target,
        hypotheses=[(h, -float(i)) for i, h in enumerate(hyps)],
    )


def test_match_identity():
    assert match(R1, R1)


def test_match_graph_level_not_string_level():
    non_canonical = "(raw)(dist)[{bout}(prod)]{tout}(prod)"
    target = serialize_canonical(parse(non_canonical))
    assert non_canonical != target
    assert match(non_canonical, target)


def test_match_rejects_unparseable():
    assert not match("(raw)(hex", R1)
    assert not match("", R1)


def test_topk_accuracy():
    records = [
        rec(R1_BROKEN, R1, R1, "(raw)(prod)", "(raw)(r)(prod)"),
        rec(R1_BROKEN, R1, "(raw)(prod)", R1, "(raw)(r)(prod)"),
    ]
    assert topk_accuracy(records, 1) == 0.5
    assert topk_accuracy(records, 5) == 1.0
    prev = 0.0
    for k in range(1, 6):
        cur = topk_accuracy(records, k)
        assert cur >= prev
        prev = cur
    with pytest.raises(ValueError):
        topk_accuracy([], 1)


def test_classify_uncorrected():
    assert classify_failure(rec(R1_BROKEN, R1, R1_BROKEN)) is FailureClass.UNCORRECTED


def test_classify_invalid():
    assert classify_failure(rec(R1_BROKEN, R1, "(raw)(hex")) is FailureClass.INVALID


def test_classify_partial_correction():
    # half of a two-error flowsheet fixed: closer to the target than the source
    h, s, t = parse(HALF_FIXED), parse(TWO_BROKEN), parse(TWO_LOOP)
    assert graph_edit_distance(h, t) < graph_edit_distance(s, t)
    assert classify_failure(rec(TWO_BROKEN, TWO_LOOP, HALF_FIXED)) is (
        FailureClass.PARTIAL_CORRECTION
    )


def test_classify_new_errors_spurious_valve():
    # hypothesis = target plus one spurious valve, caught by the novel-element
    # clause; the exact edit metric maps the target's valve onto either copy,
    # so the distance is 1 node insert + 1 edge delete + 1 edge insert
    h, s, t = parse(EXTRA_VALVE), parse(R1_BROKEN), parse(R1)
    assert graph_edit_distance(h, t) == 3.0
    assert graph_edit_distance(s, t) == 3.0
    assert classify_failure(rec(R1_BROKEN, R1, EXTRA_VALVE)) is (
        FailureClass.NEW_ERRORS
    )


def test_classify_other_for_altered_correct_source():
    assert classify_failure(rec(R1, R1, R1_BROKEN)) is FailureClass.OTHER


def test_classify_rejects_matching_record():
    with pytest.raises(ValueError):
        classify_failure(rec(R1_BROKEN, R1, R1))


def test_ged_exact_values():
    # removing the PC costs: 1 node + 2 signal edges
    assert graph_edit_distance(parse(R1), parse(R1_BROKEN)) == 3.0
    assert graph_edit_distance(parse(R1), parse(R1)) == 0.0
    # retype = 1
    assert graph_edit_distance(
        parse("(raw)(pp)(prod)"), parse("(raw)(comp)(prod)")
    ) == 1.0


def test_greedy_bound_dominates_exact():
    cases = [(R1, R1_BROKEN), (TWO_LOOP, HALF_FIXED), (R1, R1)]
    for a, b in cases:
        g1, g2 = parse(a), parse(b)
        exact = graph_edit_distance(g1, g2)
        greedy = _greedy_ged_upper_bound(_to_nx(g1), _to_nx(g2))
        assert greedy >= exact


def test_report_all_correct():
    records = [rec(R1, R1, R1), rec(R1_BROKEN, R1, R1)]
    rep = report(records)
    assert rep.top1 == rep.top5 == 1.0
    assert sum(rep.failures.values()) == 0
    assert rep.subsets["correct"]["identity_preservation"] == 1.0


def test_report_shape_and_consistency():
    records = [
        rec(R1, R1, R1),                       # correct source, copied
        rec(R1, R1, R1_BROKEN),                # correct source, altered -> other
        rec(R1_BROKEN, R1, R1_BROKEN, R1),     # top-1 miss, top-5 hit
        rec(R1_BROKEN, R1, "(raw)(hex"),       # invalid
    ]
    rep = report(records)
    obj = json.loads(rep.dumps())
    assert set(obj) == {"n", "top1", "top5", "top1_string", "subsets", "failures"}
    assert set(obj["failures"]) == {"invalid", "uncorrected", "partial",
                                    "new_errors", "other"}
    assert obj["n"] == 4
    assert obj["top5"] >= obj["top1"]
    misses = round(obj["n"] * (1 - obj["top1"]))
    assert sum(obj["failures"].values()) == misses
    assert obj["failures"]["invalid"] == 1
    assert obj["failures"]["uncorrected"] == 1
    assert obj["failures"]["other"] == 1
    assert obj["subsets"]["correct"]["identity_preservation"] == 0.5


def test_hypotheses_must_be_sorted():
    with pytest.raises(ValueError):
        PredictionRecord(R1, R1, [(R1, -1.0), (R1_BROKEN, 0.0)])
