"""Canonical SFILES-style codec: a fixed 53-token vocabulary, a tokenizer, a
deterministic canonical serializer, a parser, and a brute-force canonical
oracle used to cross-check the serializer.

Notation summary
----------------
A string is zero or more leading instrument groups followed by one or more
rooted segments. A rooted segment starts with "(raw)" and is a chain of node
emissions; "(raw)" never continues a chain, which keeps the separator-free
concatenation of segments unambiguous. One node emission is::

    [{tout}|{bout}] (unit) [{TC}|{PC}|{FC}|{LC}] [{1}|{2}]
    ConnIn* SigIn* ConnOut* SigOut*  Branch*  [inline successor]

Branches are bracketed subtrees "[...]". Non-tree stream edges (recycles,
cross-feeds) close as ConnOut/ConnIn number pairs "n"/"<n"; signal actuations
(instrument to non-instrument) always close as SigOut/SigIn pairs "_n"/"<_n".
Signal edges into an instrument (measurement, or instrument-to-instrument
cascade) are tree edges, so instruments appear as bracketed branches of the
unit that feeds them. An instrument with no incoming signal edge at all is
emitted as a leading bracketed group before the first segment.

A two-pass heat exchanger is emitted twice: the pass first reached in
canonical order as "(hex){1}", the other as "(hex){2}"; a "{2}" emission
binds to the earliest preceding unbound "{1}".

Canonical ordering: bracketed branches of an emission are sorted ascending by
the token-id sequence of their subtrees; the lexicographically greatest
stream-successor subtree continues inline (instruments never inline); root
segments and leading groups are likewise sorted ascending. Closure numbers
are assigned positionally: stream pairs 1,2,... by ConnIn emission position
(tie-break ConnOut position), signal pairs by SigOut position.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .graph import (
    EdgeKind,
    Edge,
    FlowsheetGraph,
    GraphError,
    InstrumentFunction,
    PASS_TAGS,
    UnitKind,
    derive_edge_kind,
    validate_structure,
)

# -- vocabulary ---------------------------------------------------------------

PAD = "<pad>"
SOS = "<sos>"
EOS = "<eos>"
UNK = "<unk>"

_UNIT_FORMS = [
    "(raw)", "(prod)", "(mix)", "(splt)", "(hex)", "(pp)",
    "(comp)", "(r)", "(dist)", "(tank)", "(v)", "(C)",
]
_PASS_FORMS = ["{1}", "{2}", "{3}"]
_EDGE_TAG_FORMS = ["{tout}", "{bout}"]
_FUNC_FORMS = ["{TC}", "{PC}", "{FC}", "{LC}"]
_CONN_OUT_FORMS = [str(n) for n in range(1, 10)]
_CONN_IN_FORMS = [f"<{n}" for n in range(1, 10)]
_SIG_OUT_FORMS = [f"_{n}" for n in range(1, 5)]
_SIG_IN_FORMS = [f"<_{n}" for n in range(1, 5)]

#: The full 53-entry token table; list index is the token id.
FORMS: tuple[str, ...] = tuple(
    [PAD, SOS, EOS, UNK]
    + _UNIT_FORMS
    + _PASS_FORMS
    + _EDGE_TAG_FORMS
    + _FUNC_FORMS
    + ["[", "]"]
    + _CONN_OUT_FORMS
    + _CONN_IN_FORMS
    + _SIG_OUT_FORMS
    + _SIG_IN_FORMS
)
assert len(FORMS) == 53

ID_OF: dict[str, int] = {f: i for i, f in enumerate(FORMS)}
PAD_ID, SOS_ID, EOS_ID, UNK_ID = ID_OF[PAD], ID_OF[SOS], ID_OF[EOS], ID_OF[UNK]
VOCAB_SIZE = len(FORMS)

_SPECIALS = {PAD, SOS, EOS, UNK}
_SCANNABLE = [f for f in FORMS if f not in _SPECIALS]
_SCAN_BY_LEN: dict[int, set[str]] = {}
for _f in _SCANNABLE:
    _SCAN_BY_LEN.setdefault(len(_f), set()).add(_f)
_SCAN_LENGTHS = sorted(_SCAN_BY_LEN, reverse=True)

_UNIT_BY_FORM = {f"({k.value})": k for k in UnitKind}
_FORM_BY_UNIT = {k: f"({k.value})" for k in UnitKind}
_FUNC_BY_FORM = {f"{{{f.value}}}": f for f in InstrumentFunction}
_FORM_BY_FUNC = {f: f"{{{f.value}}}" for f in InstrumentFunction}

# base ids used when comparing marker tokens before numbers are assigned
_BASE_CONN_OUT = ID_OF["1"]
_BASE_CONN_IN = ID_OF["<1"]
_BASE_SIG_OUT = ID_OF["_1"]
_BASE_SIG_IN = ID_OF["<_1"]

MAX_STREAM_CONNECTIONS = 9
MAX_SIGNAL_CONNECTIONS = 4


def vocabulary_table() -> list[dict]:
    """The vocabulary as a JSON-ready list, for conformance dumps."""
    return [{"id": i, "form": f} for i, f in enumerate(FORMS)]


class CodecError(ValueError):
    """Raised when a graph cannot be serialized."""


class ParseError(ValueError):
    """A parse failure, with the byte offset where it was detected."""

    def __init__(self, code: str, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.code = code
        self.offset = offset


# -- scanning / tokenizing ----------------------------------------------------


def scan(s: str) -> list[tuple[str, int]]:
    """Longest-match left-to-right scan; returns (form, byte offset) pairs.
    Maximal unmatched runs collapse to a single UNK."""
    out: list[tuple[str, int]] = []
    i, n = 0, len(s)
    unk_start = -1
    while i < n:
        for ln in _SCAN_LENGTHS:
            cand = s[i : i + ln]
            if cand in _SCAN_BY_LEN[ln]:
                if unk_start >= 0:
                    out.append((UNK, unk_start))
                    unk_start = -1
                out.append((cand, i))
                i += ln
                break
        else:
            if unk_start < 0:
                unk_start = i
            i += 1
    if unk_start >= 0:
        out.append((UNK, unk_start))
    return out


def tokenize(s: str) -> list[str]:
    """Scan a string into token surface forms, wrapped as SOS ... EOS."""
    return [SOS] + [form for form, _ in scan(s)] + [EOS]


def detokenize(tokens: Sequence[str]) -> str:
    """Concatenate surface forms; SOS/EOS are stripped, PAD/UNK rejected."""
    parts = []
    for t in tokens:
        if t in (SOS, EOS):
            continue
        if t == UNK:
            raise ValueError("cannot detokenize UNK")
        if t == PAD:
            raise ValueError("cannot detokenize PAD")
        if t not in ID_OF:
            raise ValueError(f"unknown token {t!r}")
        parts.append(t)
    return "".join(parts)


def encode(tokens: Sequence[str]) -> list[int]:
    try:
        return [ID_OF[t] for t in tokens]
    except KeyError as exc:
        raise ValueError(f"unknown token {exc.args[0]!r}") from None


def decode(ids: Sequence[int]) -> list[str]:
    out = []
    for i in ids:
        if not 0 <= i < VOCAB_SIZE:
            raise ValueError(f"token id {i} out of range 0..{VOCAB_SIZE - 1}")
        out.append(FORMS[i])
    return out


# -- serializer internals -----------------------------------------------------

# A pseudo-node is (node_id, pass_tag). Multi-pass heat exchangers contribute
# one pseudo-node per pass; every other node is (id, None).
_Pseudo = tuple[int, Optional[str]]


class _Pair:
    """A numbered closure (stream connection or signal actuation)."""

    __slots__ = ("kind", "src_em", "dst_em", "number")

    def __init__(self, kind: str):
        self.kind = kind  # "conn" | "sig"
        self.src_em: Optional[_Em] = None
        self.dst_em: Optional[_Em] = None
        self.number: Optional[int] = None


class _Em:
    """One node emission in the output tree."""

    __slots__ = (
        "in_tag", "unit_form", "func_form", "pass_slot",
        "conn_in", "sig_in", "conn_out", "sig_out",
        "children", "brackets", "inline", "index", "node_id", "pseudo", "_key",
    )

    def __init__(self, unit_form: str, node_id: int):
        self.in_tag: Optional[str] = None  # "{tout}"/"{bout}" on the tree edge in
        self.unit_form = unit_form
        self.func_form: Optional[str] = None
        self.pass_slot: Optional[int] = None  # 1 or 2
        self.conn_in: list[_Pair] = []
        self.sig_in: list[_Pair] = []
        self.conn_out: list[_Pair] = []
        self.sig_out: list[_Pair] = []
        self.children: list[tuple[str, "_Em"]] = []  # (edge kind: stream|sig, child)
        self.brackets: list["_Em"] = []
        self.inline: Optional["_Em"] = None
        self.index = -1
        self.node_id = node_id
        self.pseudo: Optional[_Pseudo] = None
        self._key: Optional[tuple[int, ...]] = None

    def key(self) -> tuple[int, ...]:
        """Token-id sequence of this subtree with class-base marker ids;
        drives all canonical comparisons."""
        if self._key is None:
            ids: list[int] = []
            self._flatten_key(ids)
            self._key = tuple(ids)
        return self._key

    def _flatten_key(self, out: list[int]) -> None:
        if self.in_tag:
            out.append(ID_OF[self.in_tag])
        out.append(ID_OF[self.unit_form])
        if self.func_form:
            out.append(ID_OF[self.func_form])
        if self.pass_slot:
            out.append(ID_OF["{%d}" % self.pass_slot])
        out.extend([_BASE_CONN_IN] * len(self.conn_in))
        out.extend([_BASE_SIG_IN] * len(self.sig_in))
        out.extend([_BASE_CONN_OUT] * len(self.conn_out))
        out.extend([_BASE_SIG_OUT] * len(self.sig_out))
        for b in self.brackets:
            out.append(ID_OF["["])
            b._flatten_key(out)
            out.append(ID_OF["]"])
        if self.inline is not None:
            self.inline._flatten_key(out)


class _View:
    """Pre-resolved serialization view of a graph: pseudo-node split for
    multi-pass exchangers plus per-pseudo edge lists."""

    def __init__(self, g: FlowsheetGraph):
        self.g = g
        self.multipass: dict[int, list[str]] = {}
        for nid, node in g.nodes.items():
            if node.kind is not UnitKind.HEAT_EXCHANGER:
                continue
            stream_edges = g.stream_in(nid) + g.stream_out(nid)
            tags = sorted({e.tag for e in stream_edges if e.tag in PASS_TAGS})
            if not tags:
                continue
            if any(e.tag not in PASS_TAGS for e in stream_edges):
                raise CodecError(
                    f"hex {nid} mixes pass-tagged and untagged stream edges"
                )
            if len(tags) > 2:
                raise CodecError(f"hex {nid} uses more than two passes")
            if len(tags) == 2:
                self.multipass[nid] = tags
            # exactly one tagged pass serializes as a single-pass exchanger

        self.pseudos: list[_Pseudo] = []
        for nid in g.nodes:
            if nid in self.multipass:
                self.pseudos.extend((nid, t) for t in self.multipass[nid])
            else:
                self.pseudos.append((nid, None))

        self.stream_out_p: dict[_Pseudo, list[tuple[Edge, _Pseudo]]] = {
            p: [] for p in self.pseudos
        }
        for e in g.edges:
            if g.edge_kind(e) is not EdgeKind.STREAM:
                continue
            src = self._pseudo_of(e.src, e, "source")
            dst = self._pseudo_of(e.dst, e, "destination")
            self.stream_out_p[src].append((e, dst))

        self.sig_out_n: dict[int, list[Edge]] = {nid: [] for nid in g.nodes}
        self.sig_in_count: dict[int, int] = {nid: 0 for nid in g.nodes}
        for e in g.edges:
            if g.edge_kind(e) is EdgeKind.SIGNAL:
                self.sig_out_n[e.src].append(e)
                self.sig_in_count[e.dst] += 1

    def _pseudo_of(self, nid: int, e: Edge, role: str) -> _Pseudo:
        if nid in self.multipass:
            if e.tag not in PASS_TAGS:
                raise CodecError(
                    f"edge {e} reaches multi-pass hex {nid} as {role} without a "
                    f"pass tag; untaggable topology"
                )
            return (nid, e.tag)
        return (nid, None)

    def is_instrument(self, nid: int) -> bool:
        return self.g.nodes[nid].kind is UnitKind.INSTRUMENT


class _Ctx:
    """Mutable exploration state; tentative explorations get a clone."""

    def __init__(self, view: _View):
        self.view = view
        self.visited: set[_Pseudo] = set()
        self.hex_first: dict[int, Optional[_Em]] = {}
        self.em_of: dict[_Pseudo, _Em] = {}
        self.conn_pairs: list[tuple[_Em, _Pseudo, _Pair]] = []
        self.sig_pairs: list[tuple[_Em, int, _Pair]] = []

    def tentative_clone(self) -> "_Ctx":
        c = _Ctx(self.view)
        c.visited = set(self.visited)
        # a hex first-reached by the real exploration stays "already reached"
        # in tentatives, but its emission belongs to the other context
        c.hex_first = {nid: None for nid in self.hex_first}
        return c


def _column_tag_form(tag: Optional[str]) -> Optional[str]:
    if tag in ("tout", "bout"):
        return "{%s}" % tag
    return None


def _explore(ctx: _Ctx, u: _Pseudo, in_tag_form: Optional[str]) -> _Em:
    view = ctx.view
    nid, ptag = u
    node = view.g.nodes[nid]
    em = _Em(_FORM_BY_UNIT[node.kind], nid)
    em.in_tag = in_tag_form
    em.pseudo = u
    if node.function is not None:
        em.func_form = _FORM_BY_FUNC[node.function]
    ctx.visited.add(u)
    ctx.em_of[u] = em

    claims_signals = True
    if nid in view.multipass:
        if nid in ctx.hex_first:
            em.pass_slot = 2
            claims_signals = False
        else:
            em.pass_slot = 1
            ctx.hex_first[nid] = em

    kids: list[tuple[str, _Pseudo, Optional[str]]] = []  # (kind, pseudo, tag form)
    for e, v in view.stream_out_p[u]:
        if v in ctx.visited:
            pair = _Pair("conn")
            pair.src_em = em
            if e.tag in ("tout", "bout"):
                raise CodecError(
                    f"tagged edge {e} closes as a numbered connection; "
                    f"untaggable topology"
                )
            ctx.conn_pairs.append((em, v, pair))
        else:
            kids.append(("stream", v, _column_tag_form(e.tag)))
    if claims_signals:
        for e in view.sig_out_n[nid]:
            v = (e.dst, None)
            if view.is_instrument(e.dst) and v not in ctx.visited:
                kids.append(("sig", v, None))
            else:
                pair = _Pair("sig")
                pair.src_em = em
                ctx.sig_pairs.append((em, e.dst, pair))

    if len(kids) > 1:
        def tentative_key(kid: tuple[str, _Pseudo, Optional[str]]):
            _, v, tagf = kid
            sub = ctx.tentative_clone()
            kem = _explore(sub, v, tagf)
            _resolve_pairs(sub)
            _arrange(kem)
            return kem.key()

        def static_prefix(kid: tuple[str, _Pseudo, Optional[str]]):
            # the leading tokens a child emission is guaranteed to start
            # with; when prefixes differ, full subtree keys differ at the
            # same position, so only prefix ties need a tentative exploration
            _, v, tagf = kid
            vnode = view.g.nodes[v[0]]
            pre = [] if tagf is None else [ID_OF[tagf]]
            pre.append(ID_OF[_FORM_BY_UNIT[vnode.kind]])
            if vnode.function is not None:
                pre.append(ID_OF[_FORM_BY_FUNC[vnode.function]])
            return tuple(pre)

        groups: dict[tuple, list] = {}
        for kid in kids:
            groups.setdefault(static_prefix(kid), []).append(kid)
        ordered = []
        for pre in sorted(groups):
            grp = groups[pre]
            if len(grp) > 1:
                grp.sort(key=tentative_key)
            ordered.extend(grp)
        kids = ordered

    for kind, v, tagf in kids:
        if v in ctx.visited:
            # a sibling explored first claimed this node; close numerically
            pair = _Pair("conn" if kind == "stream" else "sig")
            pair.src_em = em
            if kind == "stream":
                if tagf is not None:
                    raise CodecError(
                        "tagged edge closes as a numbered connection; "
                        "untaggable topology"
                    )
                ctx.conn_pairs.append((em, v, pair))
            else:
                ctx.sig_pairs.append((em, v[0], pair))
            continue
        child = _explore(ctx, v, tagf)
        em.children.append((kind, child))
    return em


def _resolve_pairs(ctx: _Ctx) -> None:
    """Attach closure markers to both endpoint emissions. In tentative
    explorations a pair's far side may live outside this context; the marker
    then only shows on the near side, which is all the ordering key needs."""

    def emission_for_sig_target(nid: int) -> Optional[_Em]:
        if nid in ctx.view.multipass:
            return ctx.hex_first.get(nid)
        return ctx.em_of.get((nid, None))

    for src_em, dst, pair in ctx.conn_pairs:
        dst_em = ctx.em_of.get(dst)
        pair.src_em = src_em
        pair.dst_em = dst_em
        src_em.conn_out.append(pair)
        if dst_em is not None:
            dst_em.conn_in.append(pair)
    for src_em, dst_nid, pair in ctx.sig_pairs:
        dst_em = emission_for_sig_target(dst_nid)
        pair.src_em = src_em
        pair.dst_em = dst_em
        src_em.sig_out.append(pair)
        if dst_em is not None:
            dst_em.sig_in.append(pair)


def _arrange(em: _Em) -> None:
    """Fix bracket/inline order bottom-up per the canonical ordering rules."""
    for _, child in em.children:
        _arrange(child)
    stream_children = [c for k, c in em.children if k == "stream"]
    instr_children = [c for k, c in em.children if k == "sig"]
    if stream_children:
        inline = max(stream_children, key=lambda c: c.key())
        rest = [c for c in stream_children if c is not inline]
        em.inline = inline
        em.brackets = sorted(instr_children + rest, key=lambda c: c.key())
    else:
        em.inline = None
        em.brackets = sorted(instr_children, key=lambda c: c.key())
    em._key = None  # children arrangement changed; recompute lazily


def _preorder(em: _Em, out: list[_Em]) -> None:
    out.append(em)
    for b in em.brackets:
        _preorder(b, out)
    if em.inline is not None:
        _preorder(em.inline, out)


def _assign_numbers(roots: list[_Em]) -> None:
    order: list[_Em] = []
    for r in roots:
        _preorder(r, order)
    for i, em in enumerate(order):
        em.index = i

    conn: list[_Pair] = []
    sig: list[_Pair] = []
    seen: set[int] = set()
    for em in order:
        for p in em.conn_in + em.conn_out:
            if id(p) not in seen:
                seen.add(id(p))
                conn.append(p)
        for p in em.sig_in + em.sig_out:
            if id(p) not in seen:
                seen.add(id(p))
                sig.append(p)
    conn.sort(key=lambda p: (p.dst_em.index, p.src_em.index))
    sig.sort(key=lambda p: (p.src_em.index, p.dst_em.index))
    if len(conn) > MAX_STREAM_CONNECTIONS:
        raise CodecError(
            f"{len(conn)} stream connections exceed the serializable cap of "
            f"{MAX_STREAM_CONNECTIONS}"
        )
    if len(sig) > MAX_SIGNAL_CONNECTIONS:
        raise CodecError(
            f"{len(sig)} signal connections exceed the serializable cap of "
            f"{MAX_SIGNAL_CONNECTIONS}"
        )
    for i, p in enumerate(conn, 1):
        p.number = i
    for i, p in enumerate(sig, 1):
        p.number = i


def _render(em: _Em, out: list[str]) -> None:
    if em.in_tag:
        out.append(em.in_tag)
    out.append(em.unit_form)
    if em.func_form:
        out.append(em.func_form)
    if em.pass_slot:
        out.append("{%d}" % em.pass_slot)
    for p in sorted(em.conn_in, key=lambda p: p.number):
        out.append(f"<{p.number}")
    for p in sorted(em.sig_in, key=lambda p: p.number):
        out.append(f"<_{p.number}")
    for p in sorted(em.conn_out, key=lambda p: p.number):
        out.append(str(p.number))
    for p in sorted(em.sig_out, key=lambda p: p.number):
        out.append(f"_{p.number}")
    for b in em.brackets:
        out.append("[")
        _render(b, out)
        out.append("]")
    if em.inline is not None:
        _render(em.inline, out)


def _check_pass_binding(roots: list[_Em]) -> None:
    """Verify the emitted string re-binds each "{2}" to the right exchanger
    under the parser's earliest-unbound rule."""
    order: list[_Em] = []
    for r in roots:
        _preorder(r, order)
    unbound: list[int] = []
    for em in order:
        if em.pass_slot == 1:
            unbound.append(em.node_id)
        elif em.pass_slot == 2:
            if not unbound or unbound[0] != em.node_id:
                raise CodecError(
                    "pass emissions of distinct exchangers interleave; the "
                    "string would not parse back to this graph"
                )
            unbound.pop(0)


def serialize_tokens(g: FlowsheetGraph) -> list[str]:
    violations = validate_structure(g)
    if violations:
        raise CodecError(f"graph is structurally invalid: {violations[0]}")
    view = _View(g)
    ctx = _Ctx(view)

    raw_roots = [
        (nid, None)
        for nid, node in g.nodes.items()
        if node.kind is UnitKind.RAW_FEED
    ]
    dangling = [
        (nid, None)
        for nid, node in g.nodes.items()
        if node.kind is UnitKind.INSTRUMENT and view.sig_in_count[nid] == 0
    ]

    def independent_key(root: _Pseudo) -> tuple[int, ...]:
        sub = _Ctx(view)
        em = _explore(sub, root, None)
        _resolve_pairs(sub)
        _arrange(em)
        return em.key()

    raw_roots.sort(key=independent_key)
    segment_ems = [_explore(ctx, r, None) for r in raw_roots]
    dangling.sort(key=independent_key)
    group_ems = [_explore(ctx, d, None) for d in dangling if d not in ctx.visited]

    unvisited = [p for p in view.pseudos if p not in ctx.visited]
    if unvisited:
        raise CodecError(
            f"nodes {sorted({p[0] for p in unvisited})} are unreachable from any "
            f"RawFeed segment or dangling instrument group; cannot serialize"
        )

    _resolve_pairs(ctx)
    for em in segment_ems + group_ems:
        _arrange(em)
    segment_ems.sort(key=lambda e: e.key())
    group_ems.sort(key=lambda e: e.key())

    roots = group_ems + segment_ems
    _assign_numbers(roots)
    _check_pass_binding(roots)

    out: list[str] = []
    for gem in group_ems:
        out.append("[")
        _render(gem, out)
        out.append("]")
    for sem in segment_ems:
        _render(sem, out)
    return out


def serialize_canonical(g: FlowsheetGraph) -> str:
    """Deterministic canonical string for a structurally valid graph;
    independent of node ids and edge insertion order."""
    return "".join(serialize_tokens(g))


# -- parser -------------------------------------------------------------------


@dataclass
class _PEmission:
    """Parser-side emission state for the node currently being read."""

    node: Optional[int]  # settled node id
    kind: UnitKind
    offset: int
    stage: int = 0  # 0 unit, 1 conn_in, 2 sig_in, 3 conn_out, 4 sig_out, 5 branches
    is_instrument: bool = False
    pass_ptag: Optional[str] = None  # p-tag carried by closures at this emission
    settled: bool = False
    parent: Optional["_PEmission"] = None
    pending_in_tag: Optional[str] = None  # tout/bout waiting for the tree edge
    pending_tag_offset: int = -1


class _Parser:
    def __init__(self, s: str):
        self.s = s
        self.g = FlowsheetGraph()
        self.tokens = scan(s)
        self.frames: list[Optional[_PEmission]] = []  # bracket stack (parent emission)
        self.cur: Optional[_PEmission] = None
        self.pending_tag: Optional[tuple[str, int]] = None
        self.segment_started = False
        self.unbound_hex: list[tuple[int, _PEmission]] = []  # FIFO of open {1}
        self.conn_pending: dict[int, tuple[str, _PEmission, int]] = {}
        self.conn_closed: set[int] = set()
        self.sig_pending: dict[int, tuple[str, _PEmission, int]] = {}
        self.sig_closed: set[int] = set()
        self.hex_pass_degree: dict[tuple[int, str], list[int]] = {}

    def err(self, code: str, msg: str, offset: int):
        raise ParseError(code, msg, offset)

    # settle: materialize the node for a deferred (C)/(hex) emission
    def settle(self, offset: int) -> None:
        cur = self.cur
        if cur is None or cur.settled:
            return
        if cur.kind is UnitKind.INSTRUMENT:
            self.err(
                "function-tag",
                "instrument emission requires a function tag {TC}/{PC}/{FC}/{LC}",
                offset,
            )
        # hex without a pass tag: plain single-pass node
        self.materialize(cur, None, None, offset)

    def materialize(
        self,
        cur: _PEmission,
        function: Optional[InstrumentFunction],
        bound_node: Optional[int],
        offset: int,
    ) -> None:
        if bound_node is not None:
            cur.node = bound_node
        else:
            cur.node = self.g.add_node(cur.kind, function)
        cur.settled = True
        self.make_tree_edge(cur, offset)

    def make_tree_edge(self, cur: _PEmission, offset: int) -> None:
        parent = cur.parent
        if parent is None:
            if cur.pending_in_tag is not None:
                self.err("illegal-tag", "edge tag with no source emission", offset)
            return
        tag = cur.pending_in_tag
        signal = parent.is_instrument or cur.is_instrument
        if cur.pass_ptag is not None:
            if tag is not None:
                self.err(
                    "illegal-tag",
                    "cannot combine a column tag with a heat-exchanger pass",
                    offset,
                )
            tag = cur.pass_ptag
        elif parent.pass_ptag is not None and tag is None and not signal:
            tag = parent.pass_ptag
        if parent.is_instrument and self.g.nodes[cur.node].kind is not UnitKind.INSTRUMENT:
            self.err(
                "instrument-position",
                "an instrument may only branch to another instrument; actuations "
                "use signal number pairs",
                cur.offset,
            )
        try:
            self.g.add_edge(parent.node, cur.node, tag)
        except GraphError as exc:
            code = "into-raw" if "RawFeed" in str(exc) else (
                "out-of-prod" if "Product" in str(exc) else "illegal-tag"
            )
            where = cur.offset
            if code == "illegal-tag" and cur.pending_tag_offset >= 0:
                where = cur.pending_tag_offset
            self.err(code, str(exc), where)

    # -- token handlers ---------------------------------------------------

    def on_unit(self, form: str, offset: int) -> None:
        kind = _UNIT_BY_FORM[form]
        self.settle(offset)
        depth = len(self.frames)
        if kind is UnitKind.RAW_FEED:
            if depth > 0:
                self.err("into-raw", "RawFeed cannot appear inside a branch", offset)
            if self.pending_tag is not None:
                self.err(
                    "illegal-tag", "edge tag cannot precede a new segment", offset
                )
            # a raw token always begins a new rooted segment
            self.cur = None
        if self.cur is not None and self.cur.is_instrument:
            self.err(
                "instrument-position",
                "chains never continue through an instrument",
                offset,
            )
        parent: Optional[_PEmission]
        if self.cur is not None:
            parent = self.cur
        elif depth > 0:
            parent = self.frames[-1]
            if parent is None and kind is not UnitKind.INSTRUMENT:
                self.err(
                    "instrument-position",
                    "a leading group may only contain an instrument subtree",
                    offset,
                )
        else:
            parent = None
            if kind is not UnitKind.RAW_FEED:
                self.err(
                    "segment-start",
                    f"a rooted segment must start with (raw), got {form}",
                    offset,
                )
        em = _PEmission(node=None, kind=kind, offset=offset, parent=parent)
        em.is_instrument = kind is UnitKind.INSTRUMENT
        if self.pending_tag is not None:
            em.pending_in_tag, em.pending_tag_offset = self.pending_tag
            self.pending_tag = None
        self.cur = em
        if depth == 0:
            self.segment_started = True
        if kind not in (UnitKind.INSTRUMENT, UnitKind.HEAT_EXCHANGER):
            self.materialize(em, None, None, offset)

    def on_func(self, form: str, offset: int) -> None:
        cur = self.cur
        if cur is None or cur.settled or cur.kind is not UnitKind.INSTRUMENT:
            self.err(
                "illegal-tag", f"function tag {form} not after an instrument", offset
            )
        self.materialize(cur, _FUNC_BY_FORM[form], None, offset)

    def on_pass(self, form: str, offset: int) -> None:
        if form == "{3}":
            self.err("pass-pairing", "pass tag {3} is reserved and unused", offset)
        cur = self.cur
        if cur is None or cur.settled or cur.kind is not UnitKind.HEAT_EXCHANGER:
            self.err(
                "illegal-tag", f"pass tag {form} not after a heat exchanger", offset
            )
        if form == "{1}":
            cur.pass_ptag = "p1"
            self.materialize(cur, None, None, offset)
            self.unbound_hex.append((cur.node, cur))
        else:
            if not self.unbound_hex:
                self.err(
                    "pass-pairing", "{2} with no preceding unbound {1}", offset
                )
            node, _first = self.unbound_hex.pop(0)
            cur.pass_ptag = "p2"
            self.materialize(cur, None, node, offset)

    def on_edge_tag(self, form: str, offset: int) -> None:
        self.settle(offset)
        if self.pending_tag is not None:
            self.err("illegal-tag", "two consecutive edge tags", offset)
        self.pending_tag = (form[1:-1], offset)

    def on_open(self, offset: int) -> None:
        self.settle(offset)
        if self.pending_tag is not None:
            self.err("illegal-tag", "edge tag cannot precede a bracket", offset)
        if self.cur is None:
            if len(self.frames) == 0 and not self.segment_started:
                self.frames.append(None)  # leading instrument group
                return
            self.err("syntax", "branch bracket with no emission to attach to", offset)
        self.cur.stage = 5
        self.frames.append(self.cur)
        self.cur = None

    def on_close(self, offset: int) -> None:
        self.settle(offset)
        if self.pending_tag is not None:
            self.err("illegal-tag", "edge tag cannot precede ']'", offset)
        if not self.frames:
            self.err("unbalanced", "']' without matching '['", offset)
        if self.cur is None:
            self.err("syntax", "empty bracket", offset)
        self.cur = self.frames.pop()

    def marker_stage(self, cur: _PEmission, stage: int, what: str, offset: int) -> None:
        if cur.stage > stage:
            self.err(
                "marker-order",
                f"{what} marker out of order (markers follow ConnIn SigIn "
                f"ConnOut SigOut before branches)",
                offset,
            )
        cur.stage = stage

    def close_conn(self, n: int, out_side: tuple[_PEmission, int],
                   in_side: tuple[_PEmission, int], offset: int) -> None:
        src_em, _ = out_side
        dst_em, _ = in_side
        src, dst = src_em.node, dst_em.node
        if self.g.nodes[src].kind is UnitKind.INSTRUMENT or (
            self.g.nodes[dst].kind is UnitKind.INSTRUMENT
        ):
            self.err(
                "signal-endpoints",
                f"stream connection {n} touches an instrument; signal edges use "
                f"_n/<_n pairs",
                offset,
            )
        tag = None
        if src_em.pass_ptag is not None and dst_em.pass_ptag is not None:
            self.err(
                "illegal-tag",
                f"connection {n} joins two exchanger passes; untaggable",
                offset,
            )
        if src_em.pass_ptag is not None:
            tag = src_em.pass_ptag
        elif dst_em.pass_ptag is not None:
            tag = dst_em.pass_ptag
        try:
            self.g.add_edge(src, dst, tag)
        except GraphError as exc:
            code = "into-raw" if "RawFeed" in str(exc) else (
                "out-of-prod" if "Product" in str(exc) else "illegal-tag"
            )
            self.err(code, str(exc), offset)
        self.conn_closed.add(n)

    def on_conn(self, n: int, incoming: bool, offset: int) -> None:
        self.settle(offset)
        cur = self.cur
        if cur is None:
            self.err("syntax", "connection marker with no emission", offset)
        self.marker_stage(cur, 1 if incoming else 3, "stream connection", offset)
        if n in self.conn_closed:
            self.err("reused-connection", f"connection number {n} reused", offset)
        pending = self.conn_pending.get(n)
        side = ("in" if incoming else "out", cur, offset)
        if pending is None:
            self.conn_pending[n] = side
            return
        if pending[0] == side[0]:
            self.err(
                "reused-connection",
                f"connection number {n} opened twice on the same side",
                offset,
            )
        del self.conn_pending[n]
        out_side = (pending[1], pending[2]) if pending[0] == "out" else (cur, offset)
        in_side = (cur, offset) if incoming else (pending[1], pending[2])
        self.close_conn(n, out_side, in_side, offset)

    def on_sig(self, n: int, incoming: bool, offset: int) -> None:
        self.settle(offset)
        cur = self.cur
        if cur is None:
            self.err("syntax", "signal marker with no emission", offset)
        self.marker_stage(cur, 2 if incoming else 4, "signal connection", offset)
        if n in self.sig_closed:
            self.err("reused-connection", f"signal number {n} reused", offset)
        pending = self.sig_pending.get(n)
        if pending is None:
            self.sig_pending[n] = ("in" if incoming else "out", cur, offset)
            return
        if pending[0] == ("in" if incoming else "out"):
            self.err(
                "reused-connection",
                f"signal number {n} opened twice on the same side",
                offset,
            )
        del self.sig_pending[n]
        src_em = pending[1] if pending[0] == "out" else cur
        dst_em = cur if incoming else pending[1]
        src, dst = src_em.node, dst_em.node
        if (
            self.g.nodes[src].kind is not UnitKind.INSTRUMENT
            and self.g.nodes[dst].kind is not UnitKind.INSTRUMENT
        ):
            self.err(
                "signal-endpoints",
                f"signal pair {n} connects two non-instruments",
                offset,
            )
        try:
            self.g.add_edge(src, dst, None)
        except GraphError as exc:
            self.err("illegal-tag", str(exc), offset)
        self.sig_closed.add(n)

    def run(self) -> FlowsheetGraph:
        for form, offset in self.tokens:
            if form == UNK:
                self.err("lexical", "no vocabulary token matches input", offset)
            elif form in _UNIT_BY_FORM:
                self.on_unit(form, offset)
            elif form in _FUNC_BY_FORM:
                self.on_func(form, offset)
            elif form in ("{1}", "{2}", "{3}"):
                self.on_pass(form, offset)
            elif form in ("{tout}", "{bout}"):
                self.on_edge_tag(form, offset)
            elif form == "[":
                self.on_open(offset)
            elif form == "]":
                self.on_close(offset)
            elif form in _CONN_OUT_FORMS:
                self.on_conn(int(form), incoming=False, offset=offset)
            elif form in _CONN_IN_FORMS:
                self.on_conn(int(form[1:]), incoming=True, offset=offset)
            elif form in _SIG_OUT_FORMS:
                self.on_sig(int(form[1:]), incoming=False, offset=offset)
            elif form in _SIG_IN_FORMS:
                self.on_sig(int(form[2:]), incoming=True, offset=offset)
            else:  # pragma: no cover - scanner only yields the forms above
                self.err("lexical", f"unexpected token {form}", offset)
        end = len(self.s)
        self.settle(end)
        if self.pending_tag is not None:
            self.err("illegal-tag", "dangling edge tag at end of input", self.pending_tag[1])
        if self.frames:
            self.err("unbalanced", "unclosed '['", end)
        if self.conn_pending:
            n, (_, _, off) = sorted(self.conn_pending.items())[0]
            self.err(
                "unmatched-connection",
                f"connection number {n} never closed",
                off,
            )
        if self.sig_pending:
            n, (_, _, off) = sorted(self.sig_pending.items())[0]
            self.err(
                "unmatched-connection", f"signal number {n} never closed", off
            )
        if self.unbound_hex:
            _, em = self.unbound_hex[0]
            self.err("pass-pairing", "{1} emission never paired with {2}", em.offset)
        violations = validate_structure(self.g)
        if violations:
            self.err("structure", str(violations[0]), end)
        return self.g


def parse(s: str) -> FlowsheetGraph:
    """Parse an SFILES-style string back into a flowsheet graph. Accepts
    valid non-canonical strings (any branch order, closures in either
    textual order); every failure carries a byte offset."""
    return _Parser(s).run()


def parses(s: str) -> bool:
    try:
        parse(s)
        return True
    except ParseError:
        return False


# -- brute-force canonical oracle ----------------------------------------------


def canonical_oracle(g: FlowsheetGraph, max_nodes: int = 8) -> str:
    """Enumerate every serialization reachable through the emission discipline
    (all root orders, all child exploration orders, all bracket/inline
    arrangements, all closure-number assignments) and return the minimum
    under token-id lexicographic order.

    Independent of serialize_canonical's ordering heuristics; used to verify
    it. Exponential: graphs above `max_nodes` nodes are rejected."""
    if len(g.nodes) > max_nodes:
        raise CodecError(f"oracle limited to {max_nodes} nodes, got {len(g.nodes)}")
    violations = validate_structure(g)
    if violations:
        raise CodecError(f"graph is structurally invalid: {violations[0]}")
    view = _View(g)

    raw_roots = [
        (nid, None) for nid, nd in g.nodes.items() if nd.kind is UnitKind.RAW_FEED
    ]
    dangling = [
        (nid, None)
        for nid, nd in g.nodes.items()
        if nd.kind is UnitKind.INSTRUMENT and view.sig_in_count[nid] == 0
    ]

    best: Optional[tuple[int, ...]] = None
    best_forms: Optional[list[str]] = None

    # one candidate emission tree node: [tag_form, unit_form, func_form,
    # pass_slot, markers..., brackets(list), inline]
    def enum_tree(u, visited, hex_first, tag_form, pairs):
        """Yield (tree, visited, hex_first, pairs) for all exploration orders
        below pseudo-node u. State is threaded functionally (copies)."""
        nid, ptag = u
        node = g.nodes[nid]
        visited = visited | {u}
        pass_slot = None
        claims = True
        if nid in view.multipass:
            if nid in hex_first:
                pass_slot = 2
                claims = False
            else:
                pass_slot = 1
                hex_first = {**hex_first, nid: True}

        kids = []
        closures = []  # (kind, u-side, dst)
        for e, v in view.stream_out_p[u]:
            if v in visited:
                if e.tag in ("tout", "bout"):
                    return  # untaggable under this exploration order
                closures.append(("conn", v))
            else:
                kids.append(("stream", v, _column_tag_form(e.tag)))
        if claims:
            for e in view.sig_out_n[nid]:
                v = (e.dst, None)
                if view.is_instrument(e.dst) and v not in visited:
                    kids.append(("sig", v, None))
                else:
                    closures.append(("sig", (e.dst, None)))

        def rec(remaining, visited, hex_first, pairs, subtrees):
            if not remaining:
                yield list(subtrees), visited, hex_first, list(pairs)
                return
            for i, kid in enumerate(remaining):
                kkind, v, ktag = kid
                rest = remaining[:i] + remaining[i + 1 :]
                if v in visited:
                    if kkind == "stream" and ktag is not None:
                        continue  # tagged edge cannot close numerically
                    extra = ("conn" if kkind == "stream" else "sig", None, v)
                    yield from rec(
                        rest, visited, hex_first, pairs + [extra], subtrees + [None]
                    )
                    continue
                for sub, vis2, hf2, pairs2 in enum_tree(v, visited, hex_first, ktag, []):
                    yield from rec(
                        rest, vis2, hf2, pairs + pairs2, subtrees + [(kkind, sub)]
                    )

        for subtrees, vis2, hf2, extra_pairs in rec(kids, visited, hex_first, [], []):
            built = [s for s in subtrees if s is not None]
            all_pairs = (
                [(ck, u, dst) for ck, dst in closures]
                + [(ck, s if s is not None else u, dst) for ck, s, dst in extra_pairs]
                + pairs
            )
            stream_subs = [s for k, s in built if k == "stream"]
            instr_subs = [s for k, s in built if k == "sig"]
            if stream_subs:
                for inline in stream_subs:
                    others = instr_subs + [s for s in stream_subs if s is not inline]
                    for perm in itertools.permutations(others):
                        yield (
                            {
                                "tag": tag_form, "u": u, "pass": pass_slot,
                                "brackets": list(perm), "inline": inline,
                            },
                            vis2, hf2, all_pairs,
                        )
            else:
                for perm in itertools.permutations(instr_subs):
                    yield (
                        {
                            "tag": tag_form, "u": u, "pass": pass_slot,
                            "brackets": list(perm), "inline": None,
                        },
                        vis2, hf2, all_pairs,
                    )

    def enum_forest(roots, visited, hex_first, pairs):
        if not roots:
            yield [], visited, hex_first, pairs
            return
        for i, r in enumerate(roots):
            rest = roots[:i] + roots[i + 1 :]
            if r in visited:
                yield from enum_forest(rest, visited, hex_first, pairs)
                continue
            for tree, vis2, hf2, pairs2 in enum_tree(r, visited, hex_first, None, []):
                for forest, vis3, hf3, pairs3 in enum_forest(rest, vis2, hf2, pairs + pairs2):
                    yield [tree] + forest, vis3, hf3, pairs3

    def realize(groups, segments, pairs):
        """Assemble token forms for one candidate; enumerate number
        assignments and keep the global minimum."""
        nonlocal best, best_forms
        # preorder emission list; each emission identified by its dict object
        ems: list[dict] = []

        def walk(t):
            ems.append(t)
            for b in t["brackets"]:
                walk(b)
            if t["inline"] is not None:
                walk(t["inline"])

        for t in groups + segments:
            walk(t)

        # reject candidates whose pass emissions would re-bind wrongly under
        # the parser's earliest-unbound rule
        unbound: list[int] = []
        for t in ems:
            if t["pass"] == 1:
                unbound.append(t["u"][0])
            elif t["pass"] == 2:
                if not unbound or unbound[0] != t["u"][0]:
                    return
                unbound.pop(0)

        em_of_pseudo: dict = {t["u"]: t for t in ems}
        em_slot1_of_node: dict = {t["u"][0]: t for t in ems if t["pass"] == 1}

        conn_pairs, sig_pairs = [], []
        for kind, src_pseudo, dst in pairs:
            src_em = em_of_pseudo.get(src_pseudo)
            if kind == "conn":
                dst_em = em_of_pseudo.get(dst)
            else:
                nid = dst[0]
                dst_em = (
                    em_slot1_of_node.get(nid)
                    if nid in view.multipass
                    else em_of_pseudo.get((nid, None))
                )
            if src_em is None or dst_em is None:
                return  # unreachable piece under this candidate: not a serialization
            (conn_pairs if kind == "conn" else sig_pairs).append((src_em, dst_em))
        if len(conn_pairs) > MAX_STREAM_CONNECTIONS or len(sig_pairs) > MAX_SIGNAL_CONNECTIONS:
            return

        markers: dict[int, dict[str, list]] = {
            id(t): {"ci": [], "si": [], "co": [], "so": []} for t in ems
        }

        def flatten(t, out):
            if t["tag"]:
                out.append(t["tag"])
            nid, _zz = t["u"]
            node = g.nodes[nid]
            out.append(_FORM_BY_UNIT[node.kind])
            if node.function is not None:
                out.append(_FORM_BY_FUNC[node.function])
            if t["pass"]:
                out.append("{%d}" % t["pass"])
            m = markers[id(t)]
            for num in sorted(m["ci"]):
                out.append(f"<{num}")
            for num in sorted(m["si"]):
                out.append(f"<_{num}")
            for num in sorted(m["co"]):
                out.append(str(num))
            for num in sorted(m["so"]):
                out.append(f"_{num}")
            for b in t["brackets"]:
                out.append("[")
                flatten(b, out)
                out.append("]")
            if t["inline"] is not None:
                flatten(t["inline"], out)

        for perm_c in itertools.permutations(range(1, len(conn_pairs) + 1)):
            for perm_s in itertools.permutations(range(1, len(sig_pairs) + 1)):
                for t in ems:
                    m = markers[id(t)]
                    m["ci"].clear(); m["si"].clear(); m["co"].clear(); m["so"].clear()
                for (src_em, dst_em), num in zip(conn_pairs, perm_c):
                    markers[id(src_em)]["co"].append(num)
                    markers[id(dst_em)]["ci"].append(num)
                for (src_em, dst_em), num in zip(sig_pairs, perm_s):
                    markers[id(src_em)]["so"].append(num)
                    markers[id(dst_em)]["si"].append(num)
                forms: list[str] = []
                for t in groups:
                    forms.append("[")
                    flatten(t, forms)
                    forms.append("]")
                for t in segments:
                    flatten(t, forms)
                key = tuple(ID_OF[f] for f in forms)
                if best is None or key < best:
                    best = key
                    best_forms = forms

    for seg_forest, vis, hf, pairs in enum_forest(list(raw_roots), set(), {}, []):
        live_dangling = [d for d in dangling if d not in vis]
        for grp_forest, vis2, hf2, pairs2 in enum_forest(live_dangling, vis, hf, pairs):
            if len(vis2) != len(view.pseudos):
                continue
            for seg_order in itertools.permutations(seg_forest):
                for grp_order in itertools.permutations(grp_forest):
                    realize(list(grp_order), list(seg_order), pairs2)

    if best_forms is None:
        raise CodecError("no valid serialization found")
    return "".join(best_forms)
