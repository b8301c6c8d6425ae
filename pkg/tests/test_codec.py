import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowcorrect import codec
from flowcorrect.codec import (
    EOS,
    FORMS,
    PAD,
    ParseError,
    SOS,
    UNK,
    CodecError,
    canonical_oracle,
    decode,
    detokenize,
    encode,
    parse,
    serialize_canonical,
    tokenize,
    vocabulary_table,
)
from flowcorrect.corpus import GenConfig, generate_pair
from flowcorrect.graph import FlowsheetGraph, InstrumentFunction as IF, UnitKind as U
from flowcorrect.catalog import closed_template

from conftest import permute_graph


# -- vocabulary ------------------------------------------------------------


def test_vocabulary_has_53_tokens():
    assert len(FORMS) == 53
    assert len(set(FORMS)) == 53
    table = vocabulary_table()
    assert [row["id"] for row in table] == list(range(53))


def test_special_token_ids():
    assert encode([PAD, SOS, EOS, UNK]) == [0, 1, 2, 3]


@pytest.mark.parametrize("form,tid", [
    ("(raw)", 4), ("(C)", 15), ("{1}", 16), ("{tout}", 19), ("{TC}", 21),
    ("[", 25), ("]", 26), ("1", 27), ("9", 35), ("<1", 36), ("_1", 45),
    ("<_4", 52),
])
def test_normative_id_table(form, tid):
    assert encode([form]) == [tid]


def test_encode_decode_bijection():
    assert decode(encode(list(FORMS))) == list(FORMS)
    with pytest.raises(ValueError):
        decode([53])
    with pytest.raises(ValueError):
        encode(["(bogus)"])


# -- tokenize / detokenize ----------------------------------------------------


def test_tokenize_simple():
    assert tokenize("(raw)(hex)(prod)") == [SOS, "(raw)", "(hex)", "(prod)", EOS]


def test_tokenize_longest_match():
    assert tokenize("(v)<_1") == [SOS, "(v)", "<_1", EOS]


def test_tokenize_unknown_run():
    assert tokenize("(xyz)") == [SOS, UNK, EOS]


def test_detokenize():
    assert detokenize(["(raw)", "(r)", "(prod)"]) == "(raw)(r)(prod)"
    assert detokenize([SOS, "(raw)", "(prod)", EOS]) == "(raw)(prod)"
    with pytest.raises(ValueError):
        detokenize([UNK])
    with pytest.raises(ValueError):
        detokenize([PAD])


@given(st.text(alphabet=st.sampled_from("(){}<>_[]rawprodmixsplthexcomdistankvC123456789TPFL"), max_size=60))
@settings(max_examples=200, deadline=None)
def test_tokenize_pure_and_round_trip(s):
    toks = tokenize(s)
    assert toks == tokenize(s)  # pure
    if UNK not in toks:
        assert detokenize(toks) == s


# -- fixtures ---------------------------------------------------------------


def chain_graph():
    g = FlowsheetGraph()
    ids = [g.add_node(k) for k in (U.RAW_FEED, U.HEAT_EXCHANGER, U.REACTOR, U.PRODUCT)]
    for a, b in zip(ids, ids[1:]):
        g.add_edge(a, b)
    return g


def column_graph():
    g = FlowsheetGraph()
    raw = g.add_node(U.RAW_FEED)
    col = g.add_node(U.COLUMN)
    p1 = g.add_node(U.PRODUCT)
    p2 = g.add_node(U.PRODUCT)
    g.add_edge(raw, col)
    g.add_edge(col, p1, "bout")
    g.add_edge(col, p2, "tout")
    return g


def recycle_graph():
    g = FlowsheetGraph()
    raw = g.add_node(U.RAW_FEED)
    mix = g.add_node(U.MIXER)
    r = g.add_node(U.REACTOR)
    sp = g.add_node(U.SPLITTER)
    prod = g.add_node(U.PRODUCT)
    g.add_edge(raw, mix)
    g.add_edge(mix, r)
    g.add_edge(r, sp)
    g.add_edge(sp, prod)
    g.add_edge(sp, mix)
    return g


# -- serializer -----------------------------------------------------------------


def test_serialize_linear_chain():
    assert serialize_canonical(chain_graph()) == "(raw)(hex)(r)(prod)"


def test_serialize_column_branches_match_oracle():
    g = column_graph()
    expected = canonical_oracle(g)  # independent brute-force enumeration
    assert serialize_canonical(g) == expected
    # frozen oracle output: the {tout} branch sorts before the {bout} inline
    assert expected == "(raw)(dist)[{tout}(prod)]{bout}(prod)"


def test_serialize_recycle_matches_oracle():
    g = recycle_graph()
    expected = canonical_oracle(g)
    assert serialize_canonical(g) == expected
    assert expected == "(raw)(mix)<1(r)(splt)1(prod)"


def test_serializer_rejects_unreachable():
    g = FlowsheetGraph()
    g.add_node(U.PUMP)  # no raw feed anywhere
    with pytest.raises(CodecError):
        serialize_canonical(g)


def test_serializer_rejects_signal_cap():
    g = FlowsheetGraph()
    raw = g.add_node(U.RAW_FEED)
    prev = raw
    # five controlled valves -> five numbered actuations > 4
    for _ in range(5):
        r = g.add_node(U.REACTOR)
        v = g.add_node(U.VALVE)
        pc = g.add_node(U.INSTRUMENT, IF.PC)
        g.add_edge(prev, r)
        g.add_edge(r, v)
        g.add_edge(r, pc)
        g.add_edge(pc, v)
        prev = v
    g.add_edge(prev, g.add_node(U.PRODUCT))
    with pytest.raises(CodecError, match="signal connections"):
        serialize_canonical(g)


def test_dangling_instrument_leading_group():
    g = FlowsheetGraph()
    raw = g.add_node(U.RAW_FEED)
    r = g.add_node(U.REACTOR)
    v = g.add_node(U.VALVE)
    prod = g.add_node(U.PRODUCT)
    fc = g.add_node(U.INSTRUMENT, IF.FC)
    g.add_edge(raw, r)
    g.add_edge(r, v)
    g.add_edge(v, prod)
    g.add_edge(fc, v)  # actuation without any measurement: dangling
    s = serialize_canonical(g)
    assert s.startswith("[(C){FC}_1]")
    assert serialize_canonical(parse(s)) == s


# -- parser ----------------------------------------------------------------------


def test_parse_linear_chain():
    g = parse("(raw)(hex)(r)(prod)")
    assert len(g.nodes) == 4
    assert serialize_canonical(g) == "(raw)(hex)(r)(prod)"


@pytest.mark.parametrize("text,code,offset", [
    ("(raw)(hex", "lexical", 5),
    ("(raw)(mix)<1(r)(prod)", "unmatched-connection", 10),
    ("(xyz)", "lexical", 0),
    ("(raw)(hex)]", "unbalanced", 10),
    ("(raw)[(r)(prod)", "unbalanced", 15),
    ("(raw)(r)1(splt)<1(mix)1(prod)", "reused-connection", 22),
    ("(raw)(hex){2}(prod)", "pass-pairing", 10),
    ("{tout}(raw)(prod)", "illegal-tag", 6),
    ("(raw){tout}(prod)", "illegal-tag", 5),
    ("(mix)(prod)", "segment-start", 0),
    ("(raw)(C){TC}(r)", "instrument-position", 12),
    ("(raw)(r)[(C){TC}[(v)(prod)]]", "instrument-position", 17),
    ("(raw)(prod)(r)", "out-of-prod", 11),
    ("(raw)(r)[(raw)(prod)]", "into-raw", 9),
    ("(raw)(C)(prod)", "function-tag", 8),
    ("(raw)(r)1<1(prod)", "marker-order", 9),
    ("(raw)(r)_1(v)<_1(prod)", "signal-endpoints", 13),
])
def test_parse_errors_with_offsets(text, code, offset):
    with pytest.raises(ParseError) as exc_info:
        parse(text)
    assert exc_info.value.code == code, exc_info.value
    assert exc_info.value.offset == offset


def test_parse_accepts_either_closure_order():
    # canonical: ConnIn before ConnOut; the reverse must parse to the same graph
    forward = parse("(raw)(mix)<1(r)(splt)1(prod)")
    reverse = parse("(raw)(splt)1(prod)(raw)2(mix)<2<1(r)(prod)")
    assert serialize_canonical(forward) == "(raw)(mix)<1(r)(splt)1(prod)"


def test_parse_accepts_non_canonical_branch_order():
    a = parse("(raw)(dist)[{tout}(prod)]{bout}(prod)")
    b = parse("(raw)(dist)[{bout}(prod)]{tout}(prod)")
    assert serialize_canonical(a) == serialize_canonical(b)


def test_parse_hex_pass_binding():
    s = "(raw)(hex){1}(prod)(raw)(hex){2}(prod)"
    g = parse(s)
    hexes = [n for n in g.nodes.values() if n.kind is U.HEAT_EXCHANGER]
    assert len(hexes) == 1
    assert serialize_canonical(g) == s


def test_parse_rejects_reserved_pass_tag():
    with pytest.raises(ParseError) as e:
        parse("(raw)(hex){3}(prod)")
    assert e.value.code == "pass-pairing"


def test_empty_string_round_trip():
    g = parse("")
    assert len(g.nodes) == 0
    assert serialize_canonical(g) == ""


# -- canonicalization properties ---------------------------------------------------


GEN_CFG = GenConfig()


def corpus_graphs(n, seed=123):
    out = []
    for i in range(n):
        pair = generate_pair(seed, i, 0, GEN_CFG)
        out.append((parse(pair["source"]), pair["source"]))
        out.append((parse(pair["target"]), pair["target"]))
    return out


def test_round_trip_on_generated_graphs():
    for g, s in corpus_graphs(60):
        assert serialize_canonical(g) == s


def test_canonical_invariance_under_permutation():
    rng = np.random.default_rng(7)
    for g, s in corpus_graphs(25):
        for _ in range(4):
            assert serialize_canonical(permute_graph(g, rng)) == s


def test_oracle_agreement_on_catalog_templates(catalog):
    checked = 0
    for pat in catalog:
        g, _ = closed_template(pat)
        if len(g.nodes) <= 8:
            assert serialize_canonical(g) == canonical_oracle(g), pat.id
            checked += 1
    assert checked >= 20


def test_oracle_rejects_large_graphs():
    g, s = corpus_graphs(1, seed=5)[1]
    if len(g.nodes) > 8:
        with pytest.raises(CodecError):
            canonical_oracle(g)


@given(st.integers(0, 400))
@settings(max_examples=40, deadline=None)
def test_equivalence_relation_on_random_graphs(i):
    # reflexive + symmetric via permuted twins; transitivity via a chain of three
    from flowcorrect.graph import equivalent

    pair = generate_pair(99, i, 0, GEN_CFG)
    g = parse(pair["target"])
    rng = np.random.default_rng(i)
    g2 = permute_graph(g, rng)
    g3 = permute_graph(g2, rng)
    assert equivalent(g, g)
    assert equivalent(g, g2) and equivalent(g2, g)
    assert equivalent(g2, g3)
    assert equivalent(g, g3)
