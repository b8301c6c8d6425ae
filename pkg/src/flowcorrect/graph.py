"""Flowsheet graph data model: typed directed multigraph of unit operations,
stream edges, and control signal edges.

Structural validity (representable at all) is deliberately weaker than lint
well-formedness (what a *correct* flowsheet looks like): erroneous flowsheets
must stay representable and serializable.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional


class UnitKind(enum.Enum):
    """The closed set of unit-operation kinds and their mnemonics."""

    RAW_FEED = "raw"
    PRODUCT = "prod"
    MIXER = "mix"
    SPLITTER = "splt"
    HEAT_EXCHANGER = "hex"
    PUMP = "pp"
    COMPRESSOR = "comp"
    REACTOR = "r"
    COLUMN = "dist"
    STORAGE = "tank"
    VALVE = "v"
    INSTRUMENT = "C"

    @classmethod
    def from_mnemonic(cls, s: str) -> "UnitKind":
        try:
            return _KIND_BY_MNEMONIC[s]
        except KeyError:
            raise GraphError(f"unknown unit kind {s!r}") from None


_KIND_BY_MNEMONIC = {k.value: k for k in UnitKind}


class InstrumentFunction(enum.Enum):
    TC = "TC"  # temperature controller
    PC = "PC"  # pressure controller
    FC = "FC"  # flow controller
    LC = "LC"  # level controller


class EdgeKind(enum.Enum):
    STREAM = "stream"
    SIGNAL = "signal"


#: Legal edge tags. tout/bout mark column top/bottom outlets; p1..p3 pair the
#: stream edges of a multi-pass heat exchanger.
COLUMN_TAGS = ("tout", "bout")
PASS_TAGS = ("p1", "p2", "p3")
ALL_TAGS = COLUMN_TAGS + PASS_TAGS


class GraphError(ValueError):
    """Raised on illegal graph construction."""


@dataclass(frozen=True)
class Node:
    id: int
    kind: UnitKind
    function: Optional[InstrumentFunction] = None


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    tag: Optional[str] = None


@dataclass
class Violation:
    """A broken structural invariant. Violations are data, not exceptions."""

    code: str
    message: str
    element: object = None

    def __str__(self) -> str:
        return f"[{self.code}] {self.message}"


@dataclass
class Finding:
    """A broken well-formedness rule from the lint rulebook."""

    rule: str
    message: str
    node: Optional[int] = None

    def __str__(self) -> str:
        return f"[{self.rule}] {self.message}"


def derive_edge_kind(src_kind: UnitKind, dst_kind: UnitKind) -> EdgeKind:
    """Edge kind is a pure function of endpoint kinds: Signal iff at least
    one endpoint is an Instrument."""
    if src_kind is UnitKind.INSTRUMENT or dst_kind is UnitKind.INSTRUMENT:
        return EdgeKind.SIGNAL
    return EdgeKind.STREAM


class FlowsheetGraph:
    """Mutable flowsheet graph. Construction is single-writer; reads are
    side-effect free and safe to share."""

    def __init__(self) -> None:
        self.nodes: dict[int, Node] = {}
        self.edges: list[Edge] = []
        self._next_id = 0

    # -- construction -----------------------------------------------------

    def add_node(
        self, kind: UnitKind, function: Optional[InstrumentFunction] = None
    ) -> int:
        if (kind is UnitKind.INSTRUMENT) != (function is not None):
            raise GraphError(
                f"function must be supplied iff kind is Instrument "
                f"(got kind={kind.value}, function={function})"
            )
        nid = self._next_id
        self._next_id += 1
        self.nodes[nid] = Node(nid, kind, function)
        return nid

    def add_edge(self, src: int, dst: int, tag: Optional[str] = None) -> Edge:
        self._check_edge(src, dst, tag)
        e = Edge(src, dst, tag)
        self.edges.append(e)
        return e

    def _check_edge(self, src: int, dst: int, tag: Optional[str]) -> None:
        if src not in self.nodes:
            raise GraphError(f"unknown source node {src}")
        if dst not in self.nodes:
            raise GraphError(f"unknown destination node {dst}")
        if src == dst:
            raise GraphError(f"self-loop on node {src}")
        sk, dk = self.nodes[src].kind, self.nodes[dst].kind
        kind = derive_edge_kind(sk, dk)
        if kind is EdgeKind.STREAM:
            if dk is UnitKind.RAW_FEED:
                raise GraphError("RawFeed cannot be the destination of a stream edge")
            if sk is UnitKind.PRODUCT:
                raise GraphError("Product cannot be the source of a stream edge")
        if tag is not None:
            if tag not in ALL_TAGS:
                raise GraphError(f"unknown edge tag {tag!r}")
            if kind is EdgeKind.SIGNAL:
                raise GraphError("signal edges carry no tag")
            if tag in COLUMN_TAGS and sk is not UnitKind.COLUMN:
                raise GraphError(f"tag {tag!r} requires a Column source")
            if tag in PASS_TAGS and UnitKind.HEAT_EXCHANGER not in (sk, dk):
                raise GraphError(f"pass tag {tag!r} requires a HeatExchanger endpoint")

    def _add_edge_unchecked(self, src: int, dst: int, tag: Optional[str] = None) -> Edge:
        # for building deliberately invalid graphs in tests of validate_structure
        e = Edge(src, dst, tag)
        self.edges.append(e)
        return e

    def remove_node(self, nid: int) -> None:
        """Remove a node and every incident edge."""
        if nid not in self.nodes:
            raise GraphError(f"unknown node {nid}")
        del self.nodes[nid]
        self.edges = [e for e in self.edges if e.src != nid and e.dst != nid]

    def remove_edge(self, edge: Edge) -> None:
        try:
            self.edges.remove(edge)
        except ValueError:
            raise GraphError(f"edge {edge} not in graph") from None

    def replace_edge(self, edge: Edge, new: Edge) -> None:
        self.remove_edge(edge)
        self._check_edge(new.src, new.dst, new.tag)
        self.edges.append(new)

    def retype_node(self, nid: int, kind: UnitKind) -> None:
        node = self.nodes.get(nid)
        if node is None:
            raise GraphError(f"unknown node {nid}")
        if UnitKind.INSTRUMENT in (node.kind, kind):
            raise GraphError("cannot retype to or from Instrument")
        self.nodes[nid] = replace(node, kind=kind)

    # -- queries -----------------------------------------------------------

    def kind(self, nid: int) -> UnitKind:
        return self.nodes[nid].kind

    def edge_kind(self, e: Edge) -> EdgeKind:
        return derive_edge_kind(self.nodes[e.src].kind, self.nodes[e.dst].kind)

    def out_edges(self, nid: int) -> list[Edge]:
        return [e for e in self.edges if e.src == nid]

    def in_edges(self, nid: int) -> list[Edge]:
        return [e for e in self.edges if e.dst == nid]

    def stream_out(self, nid: int) -> list[Edge]:
        return [e for e in self.out_edges(nid) if self.edge_kind(e) is EdgeKind.STREAM]

    def stream_in(self, nid: int) -> list[Edge]:
        return [e for e in self.in_edges(nid) if self.edge_kind(e) is EdgeKind.STREAM]

    def signal_out(self, nid: int) -> list[Edge]:
        return [e for e in self.out_edges(nid) if self.edge_kind(e) is EdgeKind.SIGNAL]

    def signal_in(self, nid: int) -> list[Edge]:
        return [e for e in self.in_edges(nid) if self.edge_kind(e) is EdgeKind.SIGNAL]

    def copy(self) -> "FlowsheetGraph":
        g = FlowsheetGraph()
        g.nodes = dict(self.nodes)
        g.edges = list(self.edges)
        g._next_id = self._next_id
        return g

    def __len__(self) -> int:
        return len(self.nodes)

    def __repr__(self) -> str:
        return f"FlowsheetGraph(nodes={len(self.nodes)}, edges={len(self.edges)})"


# -- structural validation --------------------------------------------------


def validate_structure(g: FlowsheetGraph) -> list[Violation]:
    """Return every violated structural invariant.

    Empty list means the graph is representable/serializable territory;
    erroneous flowsheets still pass (their errors are semantic, see
    lint_wellformed)."""
    out: list[Violation] = []
    for nid, node in g.nodes.items():
        if (node.kind is UnitKind.INSTRUMENT) != (node.function is not None):
            out.append(
                Violation("function-kind", f"node {nid}: function/kind mismatch", nid)
            )
    for e in g.edges:
        if e.src not in g.nodes or e.dst not in g.nodes:
            out.append(Violation("dangling-edge", f"edge {e} references missing node", e))
            continue
        if e.src == e.dst:
            out.append(Violation("self-loop", f"self-loop on node {e.src}", e))
            continue
        kind = g.edge_kind(e)
        sk, dk = g.kind(e.src), g.kind(e.dst)
        if kind is EdgeKind.STREAM and dk is UnitKind.RAW_FEED:
            out.append(Violation("into-raw", f"stream edge {e} into RawFeed", e))
        if kind is EdgeKind.STREAM and sk is UnitKind.PRODUCT:
            out.append(Violation("out-of-prod", f"stream edge {e} out of Product", e))
        if e.tag is not None:
            if e.tag not in ALL_TAGS:
                out.append(Violation("bad-tag", f"edge {e} carries unknown tag", e))
            elif kind is EdgeKind.SIGNAL:
                out.append(Violation("signal-tag", f"signal edge {e} carries a tag", e))
            elif e.tag in COLUMN_TAGS and sk is not UnitKind.COLUMN:
                out.append(
                    Violation("tag-source", f"tag {e.tag} on non-Column source", e)
                )
            elif e.tag in PASS_TAGS and UnitKind.HEAT_EXCHANGER not in (sk, dk):
                out.append(
                    Violation("tag-hex", f"pass tag {e.tag} without HeatExchanger", e)
                )
    # heat-exchanger pass pairing: each used pass id has exactly one incoming
    # and one outgoing edge at that exchanger
    for nid, node in g.nodes.items():
        if node.kind is not UnitKind.HEAT_EXCHANGER:
            continue
        for tag in PASS_TAGS:
            n_in = sum(1 for e in g.in_edges(nid) if e.tag == tag)
            n_out = sum(1 for e in g.out_edges(nid) if e.tag == tag)
            if (n_in, n_out) not in ((0, 0), (1, 1)):
                out.append(
                    Violation(
                        "pass-pairing",
                        f"hex {nid}: pass {tag} has {n_in} in / {n_out} out",
                        nid,
                    )
                )
    return out


# -- lint rulebook ------------------------------------------------------------


def _stream_degree_findings(g: FlowsheetGraph, nid: int) -> list[Finding]:
    node = g.nodes[nid]
    n_in = len(g.stream_in(nid))
    n_out = len(g.stream_out(nid))
    k = node.kind
    bad: Optional[str] = None
    if k in (UnitKind.PUMP, UnitKind.COMPRESSOR, UnitKind.VALVE, UnitKind.STORAGE):
        if (n_in, n_out) != (1, 1):
            bad = f"needs exactly 1 stream in and 1 out, has {n_in}/{n_out}"
    elif k is UnitKind.MIXER:
        if n_in < 2 or n_out != 1:
            bad = f"needs >=2 stream in and exactly 1 out, has {n_in}/{n_out}"
    elif k is UnitKind.SPLITTER:
        if n_in != 1 or n_out < 2:
            bad = f"needs exactly 1 stream in and >=2 out, has {n_in}/{n_out}"
    elif k is UnitKind.COLUMN:
        outs = g.stream_out(nid)
        tags = sorted(e.tag or "" for e in outs)
        if n_in != 1 or len(outs) != 2 or tags != ["bout", "tout"]:
            bad = (
                f"needs 1 stream in and exactly 2 outs tagged tout/bout, "
                f"has {n_in} in, outs tagged {tags}"
            )
    if bad is None:
        return []
    return [Finding("degree", f"{k.value} node {nid}: {bad}", nid)]


def lint_wellformed(g: FlowsheetGraph) -> list[Finding]:
    """Apply the well-formedness rulebook. Empty result defines a "correct"
    flowsheet; erroneous flowsheets typically (not always) produce findings."""
    findings: list[Finding] = []
    for nid, node in g.nodes.items():
        findings.extend(_stream_degree_findings(g, nid))
        if node.kind is UnitKind.HEAT_EXCHANGER:
            ins = g.stream_in(nid)
            outs = g.stream_out(nid)
            pass_tags = sorted(
                {e.tag for e in ins + outs if e.tag in PASS_TAGS}
            )
            untagged_in = [e for e in ins if e.tag not in PASS_TAGS]
            untagged_out = [e for e in outs if e.tag not in PASS_TAGS]
            if pass_tags:
                if untagged_in or untagged_out:
                    findings.append(
                        Finding(
                            "hex-pass",
                            f"hex {nid}: mixes tagged passes with untagged streams",
                            nid,
                        )
                    )
                if len(pass_tags) > 2:
                    findings.append(
                        Finding("hex-pass", f"hex {nid}: more than two passes", nid)
                    )
                # per-pass 1-in/1-out is already structural; re-check so lint
                # is self-contained on structurally valid graphs
                for tag in pass_tags:
                    if (
                        sum(1 for e in ins if e.tag == tag) != 1
                        or sum(1 for e in outs if e.tag == tag) != 1
                    ):
                        findings.append(
                            Finding("hex-pass", f"hex {nid}: pass {tag} unpaired", nid)
                        )
            else:
                if len(untagged_in) != 1 or len(untagged_out) != 1:
                    findings.append(
                        Finding(
                            "degree",
                            f"hex node {nid}: single-pass needs 1 stream in/out, has "
                            f"{len(untagged_in)}/{len(untagged_out)}",
                            nid,
                        )
                    )
        if node.kind is UnitKind.INSTRUMENT:
            sig_in = g.signal_in(nid)
            sig_out = g.signal_out(nid)
            if len(sig_in) != 1:
                findings.append(
                    Finding(
                        "control",
                        f"instrument {nid}: needs exactly 1 incoming signal "
                        f"(measurement), has {len(sig_in)}",
                        nid,
                    )
                )
            if len(sig_out) != 1:
                findings.append(
                    Finding(
                        "control",
                        f"instrument {nid}: needs exactly 1 outgoing signal "
                        f"(actuation), has {len(sig_out)}",
                        nid,
                    )
                )
            else:
                target = g.nodes[sig_out[0].dst].kind
                if target not in (UnitKind.VALVE, UnitKind.INSTRUMENT):
                    findings.append(
                        Finding(
                            "control",
                            f"instrument {nid}: actuation target must be a valve or "
                            f"instrument, is {target.value}",
                            nid,
                        )
                    )
    findings.extend(_reachability_findings(g))
    return findings


def _reachability_findings(g: FlowsheetGraph) -> list[Finding]:
    stream_fwd: dict[int, list[int]] = {nid: [] for nid in g.nodes}
    stream_rev: dict[int, list[int]] = {nid: [] for nid in g.nodes}
    for e in g.edges:
        if g.edge_kind(e) is EdgeKind.STREAM:
            stream_fwd[e.src].append(e.dst)
            stream_rev[e.dst].append(e.src)

    def closure(seeds: Iterable[int], adj: dict[int, list[int]]) -> set[int]:
        seen = set(seeds)
        stack = list(seen)
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen

    raws = [n for n, nd in g.nodes.items() if nd.kind is UnitKind.RAW_FEED]
    prods = [n for n, nd in g.nodes.items() if nd.kind is UnitKind.PRODUCT]
    from_raw = closure(raws, stream_fwd)
    to_prod = closure(prods, stream_rev)
    out = []
    for nid, node in sorted(g.nodes.items()):
        if node.kind is UnitKind.INSTRUMENT:
            continue
        if nid not in from_raw:
            out.append(
                Finding("reach", f"node {nid} not stream-reachable from a RawFeed", nid)
            )
        if nid not in to_prod:
            out.append(Finding("reach", f"node {nid} does not stream-reach a Product", nid))
    return out


def equivalent(g1: FlowsheetGraph, g2: FlowsheetGraph) -> bool:
    """Graph equality up to node ids and edge order: canonical serializations
    are compared. Propagates serialization failure."""
    from .codec import serialize_canonical

    return serialize_canonical(g1) == serialize_canonical(g2)


# -- JSON exchange format ----------------------------------------------------


def to_json_obj(g: FlowsheetGraph) -> dict:
    return {
        "nodes": [
            {
                "id": nid,
                "kind": nd.kind.value,
                "function": nd.function.value if nd.function else None,
            }
            for nid, nd in sorted(g.nodes.items())
        ],
        "edges": [{"src": e.src, "dst": e.dst, "tag": e.tag} for e in g.edges],
    }


def from_json_obj(obj: dict) -> FlowsheetGraph:
    g = FlowsheetGraph()
    id_map: dict[int, int] = {}
    try:
        for nd in obj["nodes"]:
            kind = UnitKind.from_mnemonic(nd["kind"])
            fn = nd.get("function")
            function = InstrumentFunction(fn) if fn else None
            id_map[nd["id"]] = g.add_node(kind, function)
        for ed in obj["edges"]:
            g.add_edge(id_map[ed["src"]], id_map[ed["dst"]], ed.get("tag"))
    except (KeyError, TypeError) as exc:
        raise GraphError(f"malformed graph object: {exc}") from exc
    return g


def dumps(g: FlowsheetGraph) -> str:
    return json.dumps(to_json_obj(g), indent=2)


def loads(s: str) -> FlowsheetGraph:
    return from_json_obj(json.loads(s))


def to_dot(g: FlowsheetGraph) -> str:
    """DOT digraph: stream edges solid, signal edges dashed, tags as labels.

    Node ordering follows node ids, which the parser assigns in emission
    order, so the output is stable for a given canonical string."""
    lines = ["digraph flowsheet {"]
    for nid, nd in sorted(g.nodes.items()):
        if nd.kind is UnitKind.INSTRUMENT:
            label = f"C:{nd.function.value}"
        else:
            label = nd.kind.value
        lines.append(f'  n{nid} [label="{label}"];')
    for e in sorted(g.edges, key=lambda e: (e.src, e.dst, e.tag or "")):
        attrs = []
        if g.edge_kind(e) is EdgeKind.SIGNAL:
            attrs.append("style=dashed")
        if e.tag:
            attrs.append(f'label="{e.tag}"')
        suffix = f" [{', '.join(attrs)}]" if attrs else ""
        lines.append(f"  n{e.src} -> n{e.dst}{suffix};")
    lines.append("}")
    return "\n".join(lines) + "\n"
