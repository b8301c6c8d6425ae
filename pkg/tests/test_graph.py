import itertools
import json

import numpy as np
import pytest

from flowcorrect.graph import (
    EdgeKind,
    FlowsheetGraph,
    GraphError,
    InstrumentFunction as IF,
    UnitKind as U,
    derive_edge_kind,
    dumps,
    equivalent,
    from_json_obj,
    lint_wellformed,
    loads,
    to_dot,
    to_json_obj,
    validate_structure,
)

from conftest import permute_graph


def chain(*kinds):
    g = FlowsheetGraph()
    ids = [g.add_node(k) for k in kinds]
    for a, b in zip(ids, ids[1:]):
        g.add_edge(a, b)
    return g, ids


def test_first_insertion_gets_id_zero():
    g = FlowsheetGraph()
    assert g.add_node(U.RAW_FEED) == 0


def test_instrument_requires_function():
    g = FlowsheetGraph()
    with pytest.raises(GraphError):
        g.add_node(U.INSTRUMENT)
    with pytest.raises(GraphError):
        g.add_node(U.PUMP, IF.TC)


def test_edge_kind_derivation():
    g = FlowsheetGraph()
    raw = g.add_node(U.RAW_FEED)
    hx = g.add_node(U.HEAT_EXCHANGER)
    r = g.add_node(U.REACTOR)
    pc = g.add_node(U.INSTRUMENT, IF.PC)
    e1 = g.add_edge(raw, hx)
    assert g.edge_kind(e1) is EdgeKind.STREAM
    e2 = g.add_edge(r, pc)
    assert g.edge_kind(e2) is EdgeKind.SIGNAL


def test_edge_kind_derivation_is_total():
    for a, b in itertools.product(U, U):
        kind = derive_edge_kind(a, b)
        expected = (
            EdgeKind.SIGNAL if U.INSTRUMENT in (a, b) else EdgeKind.STREAM
        )
        assert kind is expected


def test_column_tag_placement():
    g = FlowsheetGraph()
    col = g.add_node(U.COLUMN)
    prod = g.add_node(U.PRODUCT)
    e = g.add_edge(col, prod, "tout")
    assert e.tag == "tout"
    pump = g.add_node(U.PUMP)
    with pytest.raises(GraphError):
        g.add_edge(pump, prod, "tout")


def test_add_edge_rejections():
    g = FlowsheetGraph()
    raw = g.add_node(U.RAW_FEED)
    r = g.add_node(U.REACTOR)
    prod = g.add_node(U.PRODUCT)
    with pytest.raises(GraphError):
        g.add_edge(raw, 99)
    with pytest.raises(GraphError):
        g.add_edge(r, r)
    with pytest.raises(GraphError):
        g.add_edge(r, raw)  # stream into RawFeed
    with pytest.raises(GraphError):
        g.add_edge(prod, r)  # stream out of Product
    pc = g.add_node(U.INSTRUMENT, IF.PC)
    with pytest.raises(GraphError):
        g.add_edge(r, pc, "tout")  # signal edges carry no tag


def test_validate_structure_clean_chain():
    g, _ = chain(U.RAW_FEED, U.REACTOR, U.PRODUCT)
    assert validate_structure(g) == []


def test_validate_structure_flags_edge_into_raw():
    g, ids = chain(U.RAW_FEED, U.REACTOR, U.PRODUCT)
    bad = g._add_edge_unchecked(ids[1], ids[0])
    violations = validate_structure(g)
    assert len(violations) == 1
    assert violations[0].code == "into-raw"
    assert violations[0].element == bad


def test_validate_structure_flags_unpaired_hex_pass():
    g = FlowsheetGraph()
    raw = g.add_node(U.RAW_FEED)
    hx = g.add_node(U.HEAT_EXCHANGER)
    g._add_edge_unchecked(raw, hx, "p1")  # p1 in without p1 out
    violations = validate_structure(g)
    assert [v.code for v in violations] == ["pass-pairing"]


def test_lint_flags_splitter_degree():
    g = FlowsheetGraph()
    raw = g.add_node(U.RAW_FEED)
    sp = g.add_node(U.SPLITTER)
    prod = g.add_node(U.PRODUCT)
    g.add_edge(raw, sp)
    g.add_edge(sp, prod)
    findings = lint_wellformed(g)
    assert any(f.rule == "degree" and f.node == sp for f in findings)


def test_lint_clean_chain():
    g, _ = chain(U.RAW_FEED, U.HEAT_EXCHANGER, U.REACTOR, U.PRODUCT)
    assert lint_wellformed(g) == []


def test_lint_instrument_rules():
    g = FlowsheetGraph()
    raw = g.add_node(U.RAW_FEED)
    r = g.add_node(U.REACTOR)
    v = g.add_node(U.VALVE)
    prod = g.add_node(U.PRODUCT)
    pc = g.add_node(U.INSTRUMENT, IF.PC)
    g.add_edge(raw, r)
    g.add_edge(r, v)
    g.add_edge(v, prod)
    g.add_edge(r, pc)
    g.add_edge(pc, v)
    assert lint_wellformed(g) == []
    # actuation to a non-valve unit is a finding
    g2 = FlowsheetGraph()
    raw = g2.add_node(U.RAW_FEED)
    r = g2.add_node(U.REACTOR)
    prod = g2.add_node(U.PRODUCT)
    pc = g2.add_node(U.INSTRUMENT, IF.PC)
    g2.add_edge(raw, r)
    g2.add_edge(r, prod)
    g2.add_edge(r, pc)
    g2.add_edge(pc, r)
    assert any(f.rule == "control" for f in lint_wellformed(g2))


def test_equivalent_under_permutation():
    g, _ = chain(U.RAW_FEED, U.HEAT_EXCHANGER, U.REACTOR, U.PRODUCT)
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert equivalent(g, permute_graph(g, rng))


def test_equivalent_detects_removed_controller():
    def build(with_pc: bool):
        g = FlowsheetGraph()
        raw = g.add_node(U.RAW_FEED)
        r = g.add_node(U.REACTOR)
        v = g.add_node(U.VALVE)
        prod = g.add_node(U.PRODUCT)
        g.add_edge(raw, r)
        g.add_edge(r, v)
        g.add_edge(v, prod)
        if with_pc:
            pc = g.add_node(U.INSTRUMENT, IF.PC)
            g.add_edge(r, pc)
            g.add_edge(pc, v)
        return g

    assert not equivalent(build(True), build(False))


def test_equivalent_independently_built_template_copies(catalog):
    # two H1 instances assembled in different insertion orders are equal
    from flowcorrect.catalog import closed_template, pattern_by_id

    g1, _ = closed_template(pattern_by_id("H1"))
    rng = np.random.default_rng(3)
    g2 = permute_graph(g1, rng)
    assert equivalent(g1, g2)


def test_json_round_trip():
    g = FlowsheetGraph()
    raw = g.add_node(U.RAW_FEED)
    col = g.add_node(U.COLUMN)
    pc = g.add_node(U.INSTRUMENT, IF.PC)
    p1 = g.add_node(U.PRODUCT)
    p2 = g.add_node(U.PRODUCT)
    g.add_edge(raw, col)
    g.add_edge(col, p1, "tout")
    g.add_edge(col, p2, "bout")
    g.add_edge(col, pc)
    obj = to_json_obj(g)
    assert obj["edges"][1] == {"src": col, "dst": p1, "tag": "tout"}
    g2 = loads(dumps(g))
    assert equivalent(g, g2)


def test_json_rejects_malformed():
    with pytest.raises(GraphError):
        from_json_obj({"nodes": [{"id": 0}], "edges": []})


def test_dot_export():
    g = FlowsheetGraph()
    raw = g.add_node(U.RAW_FEED)
    r = g.add_node(U.REACTOR)
    v = g.add_node(U.VALVE)
    prod = g.add_node(U.PRODUCT)
    pc = g.add_node(U.INSTRUMENT, IF.PC)
    g.add_edge(raw, r)
    g.add_edge(r, v)
    g.add_edge(v, prod)
    g.add_edge(r, pc)
    g.add_edge(pc, v)
    dot = to_dot(g)
    assert 'label="C:PC"' in dot
    assert dot.count("style=dashed") == 2  # exactly the instrument-incident edges
    assert to_dot(g) == dot  # stable
