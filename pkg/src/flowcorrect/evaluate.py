"""Scoring of trained models: top-k exact-match accuracy on canonical graphs,
subset breakdowns for erroneous vs correct sources, and classification of
top-1 misses into the observed failure modes."""

from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import networkx as nx

from . import codec
from .codec import CodecError, ParseError, parse, serialize_canonical
from .graph import EdgeKind, FlowsheetGraph, UnitKind


@dataclass
class PredictionRecord:
    source: str
    target: str
    hypotheses: list[tuple[str, float]]  # (string, score), best first

    def __post_init__(self):
        scores = [s for _, s in self.hypotheses]
        if scores != sorted(scores, reverse=True):
            raise ValueError("hypotheses must be sorted by score descending")


class FailureClass(enum.Enum):
    INVALID = "invalid"
    UNCORRECTED = "uncorrected"
    PARTIAL_CORRECTION = "partial"
    NEW_ERRORS = "new_errors"
    OTHER = "other"


def _canonical_or_none(s: str) -> Optional[str]:
    try:
        return serialize_canonical(parse(s))
    except (ParseError, CodecError):
        return None


def match(hypothesis: str, target: str) -> bool:
    """Graph-level exact match: the hypothesis parses and its canonical form
    equals the (canonical) target. Unparseable hypotheses never match."""
    c = _canonical_or_none(hypothesis)
    return c is not None and c == target


def topk_accuracy(records: Sequence[PredictionRecord], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not records:
        raise ValueError("no records to score")
    hits = 0
    for r in records:
        if any(match(h, r.target) for h, _ in r.hypotheses[:k]):
            hits += 1
    return hits / len(records)


# -- graph edit metric ---------------------------------------------------------

GED_EXACT_LIMIT = 12


def _to_nx(g: FlowsheetGraph) -> nx.DiGraph:
    out = nx.DiGraph()
    for nid, node in g.nodes.items():
        label = (node.kind.value, node.function.value if node.function else None)
        out.add_node(nid, label=label)
    tags: dict[tuple[int, int], list[str]] = {}
    for e in g.edges:
        tags.setdefault((e.src, e.dst), []).append(e.tag or "")
    for (src, dst), tlist in tags.items():
        out.add_edge(src, dst, tags=tuple(sorted(tlist)))
    return out


def _edge_subst(a: dict, b: dict) -> float:
    ca, cb = Counter(a["tags"]), Counter(b["tags"])
    return float(sum((ca - cb).values()) + sum((cb - ca).values()))


def graph_edit_distance(g1: FlowsheetGraph, g2: FlowsheetGraph) -> float:
    """Node-type-labeled edit distance with unit costs (node insert/delete/
    retype, edge insert/delete). Exact for graphs up to GED_EXACT_LIMIT nodes
    via admissible search; a greedy label-matching upper bound beyond."""
    n1, n2 = _to_nx(g1), _to_nx(g2)
    if max(len(n1), len(n2)) <= GED_EXACT_LIMIT:
        return float(
            nx.graph_edit_distance(
                n1, n2,
                node_subst_cost=lambda a, b: 0.0 if a["label"] == b["label"] else 1.0,
                node_del_cost=lambda a: 1.0,
                node_ins_cost=lambda a: 1.0,
                edge_subst_cost=_edge_subst,
                edge_del_cost=lambda a: float(len(a["tags"])),
                edge_ins_cost=lambda a: float(len(a["tags"])),
            )
        )
    return _greedy_ged_upper_bound(n1, n2)


def _greedy_ged_upper_bound(n1: nx.DiGraph, n2: nx.DiGraph) -> float:
    """Match nodes greedily by (label, degree signature) and charge the
    induced node and edge differences; an upper bound on the exact distance."""

    def signature(g: nx.DiGraph, n) -> tuple:
        ins = sorted(g.nodes[p]["label"] for p in g.predecessors(n))
        outs = sorted(g.nodes[s]["label"] for s in g.successors(n))
        return (g.nodes[n]["label"], tuple(ins), tuple(outs))

    left = {n: signature(n1, n) for n in n1.nodes}
    right = {n: signature(n2, n) for n in n2.nodes}
    mapping: dict = {}
    used: set = set()
    # pass 1: identical signatures; pass 2: identical labels
    for exactness in (2, 1):
        for a in sorted(left):
            if a in mapping:
                continue
            for b in sorted(right):
                if b in used:
                    continue
                if exactness == 2 and left[a] == right[b]:
                    mapping[a] = b
                    used.add(b)
                    break
                if exactness == 1 and left[a][0] == right[b][0]:
                    mapping[a] = b
                    used.add(b)
                    break
    cost = float(len(n1) - len(mapping)) + float(len(n2) - len(used))
    e1 = {
        (a, b): Counter(d["tags"]) for a, b, d in n1.edges(data=True)
    }
    e2 = {
        (a, b): Counter(d["tags"]) for a, b, d in n2.edges(data=True)
    }
    seen2 = set()
    for (a, b), tags in e1.items():
        key = (mapping.get(a), mapping.get(b))
        if key in e2 and None not in key:
            seen2.add(key)
            other = e2[key]
            cost += sum((tags - other).values()) + sum((other - tags).values())
        else:
            cost += sum(tags.values())
    for key, tags in e2.items():
        if key not in seen2:
            cost += sum(tags.values())
    return cost


# -- failure taxonomy ------------------------------------------------------------


def _label_multisets(g: FlowsheetGraph) -> tuple[Counter, Counter]:
    nodes = Counter(
        (nd.kind.value, nd.function.value if nd.function else None)
        for nd in g.nodes.values()
    )
    edges = Counter()
    for e in g.edges:
        s, d = g.nodes[e.src], g.nodes[e.dst]
        edges[(s.kind.value, d.kind.value, e.tag or "")] += 1
    return nodes, edges


def _has_novel_elements(h: FlowsheetGraph, s: FlowsheetGraph, t: FlowsheetGraph) -> bool:
    hn, he = _label_multisets(h)
    sn, se = _label_multisets(s)
    tn, te = _label_multisets(t)
    for key, cnt in hn.items():
        if cnt > max(sn.get(key, 0), tn.get(key, 0)):
            return True
    for key, cnt in he.items():
        if cnt > max(se.get(key, 0), te.get(key, 0)):
            return True
    return False


def classify_failure(record: PredictionRecord) -> FailureClass:
    """Classify a top-1 miss. Precondition: the record's best hypothesis does
    not match the target."""
    top1 = record.hypotheses[0][0] if record.hypotheses else ""
    if match(top1, record.target):
        raise ValueError("record's top-1 hypothesis matches; nothing to classify")
    h_canon = _canonical_or_none(top1)
    if h_canon is None:
        return FailureClass.INVALID
    if record.source == record.target:
        # correct-source record that the model altered
        return FailureClass.OTHER
    if h_canon == record.source:
        return FailureClass.UNCORRECTED
    h, s, t = parse(top1), parse(record.source), parse(record.target)
    d_ht = graph_edit_distance(h, t)
    d_st = graph_edit_distance(s, t)
    if h_canon != record.target and d_ht < d_st:
        return FailureClass.PARTIAL_CORRECTION
    if _has_novel_elements(h, s, t) or d_ht > d_st:
        return FailureClass.NEW_ERRORS
    return FailureClass.OTHER


# -- report ----------------------------------------------------------------------


@dataclass
class EvalReport:
    n: int
    top1: float
    top5: float
    top1_string: float
    subsets: dict
    failures: dict

    def to_json_obj(self) -> dict:
        return {
            "n": self.n,
            "top1": self.top1,
            "top5": self.top5,
            "top1_string": self.top1_string,
            "subsets": self.subsets,
            "failures": self.failures,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json_obj(), indent=2, sort_keys=True)


def _subset_metrics(records: list[PredictionRecord]) -> dict:
    if not records:
        return {"n": 0, "top1": None, "top5": None}
    return {
        "n": len(records),
        "top1": topk_accuracy(records, 1),
        "top5": topk_accuracy(records, 5),
    }


def report(records: Sequence[PredictionRecord]) -> EvalReport:
    if not records:
        raise ValueError("no records to report on")
    records = list(records)
    n = len(records)
    top1 = topk_accuracy(records, 1)
    top5 = topk_accuracy(records, 5)
    top1_string = sum(
        1 for r in records if r.hypotheses and r.hypotheses[0][0] == r.target
    ) / n

    erroneous = [r for r in records if r.source != r.target]
    correct = [r for r in records if r.source == r.target]
    correct_metrics = _subset_metrics(correct)
    if correct:
        correct_metrics["identity_preservation"] = sum(
            1 for r in correct if r.hypotheses and match(r.hypotheses[0][0], r.source)
        ) / len(correct)
    subsets = {"erroneous": _subset_metrics(erroneous), "correct": correct_metrics}

    failures = {fc.value: 0 for fc in FailureClass}
    for r in records:
        if not (r.hypotheses and match(r.hypotheses[0][0], r.target)):
            failures[classify_failure(r).value] += 1
    return EvalReport(n, top1, top5, top1_string, subsets, failures)
