"""The pattern catalog: 27 flowsheet building blocks grouped into eight unit
families, each with a correct template plus 1..9 declarative error variants.

A template is a graph fragment with one inlet and one outlet port. Closing the
ports (a raw feed at the inlet, a product at the outlet) must yield a
lint-clean flowsheet; every variant applied to the closed template must yield
a structurally valid, serializable graph that is NOT equivalent to it.
``build_catalog`` self-checks all of this and refuses to return a broken
catalog.

Variant edits reference template nodes by name; the pseudo-references "@in"
and "@out" resolve to the unit feeding the inlet / fed by the outlet of a
concrete instance (in the closed template: the raw and the prod).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from .graph import (
    Edge,
    FlowsheetGraph,
    GraphError,
    InstrumentFunction as IF,
    UnitKind as U,
    lint_wellformed,
    validate_structure,
)
from . import codec


class ErrorClass(enum.Enum):
    MISSING_COMPONENT = "MissingComponent"
    MISSING_SUBSYSTEM = "MissingSubsystem"
    MISPLACED_COMPONENT = "MisplacedComponent"
    WRONG_STREAM_CONNECTION = "WrongStreamConnection"
    WRONG_SIGNAL_CONNECTION = "WrongSignalConnection"
    SWAPPED_TAGS = "SwappedTags"
    WRONG_UNIT_TYPE = "WrongUnitType"


# edit ops: ("remove_dangle", node) | ("remove_splice", node)
#           | ("remove_edge", (src, dst, tag)) | ("retype", node, UnitKind)
#           | ("retarget_dst", (src, dst, tag), new_dst)
#           | ("retarget_src", (src, dst, tag), new_src)
#           | ("swap_tags", node) | ("move_between", node, (a, b, tag))
Edit = tuple


@dataclass(frozen=True)
class ErrorVariant:
    id: str
    error_class: ErrorClass
    edits: tuple[Edit, ...]


@dataclass(frozen=True)
class Pattern:
    id: str
    family: str
    nodes: tuple[tuple[str, U, Optional[IF]], ...]
    edges: tuple[tuple[str, str, Optional[str]], ...]
    inlet: str
    outlet: str
    inlet_tag: Optional[str]
    outlet_tag: Optional[str]
    variants: tuple[ErrorVariant, ...]
    # derived serialization costs, filled by build_catalog
    sig_pairs: int = 0
    stream_closures: int = 0
    has_multipass_hex: bool = False


@dataclass
class PatternInstance:
    """A pattern spliced into a host graph."""

    pattern: Pattern
    mapping: dict[str, int]  # template node name -> host node id
    internal_edges: list[Edge]

    def resolve(self, g: FlowsheetGraph, ref: str) -> int:
        if ref == "@in":
            return self._port_neighbor(g, self.pattern.inlet, incoming=True)
        if ref == "@out":
            return self._port_neighbor(g, self.pattern.outlet, incoming=False)
        return self.mapping[ref]

    def _port_neighbor(self, g: FlowsheetGraph, port: str, incoming: bool) -> int:
        nid = self.mapping[port]
        edges = g.stream_in(nid) if incoming else g.stream_out(nid)
        outside = [e for e in edges if e not in self.internal_edges]
        if len(outside) != 1:
            raise GraphError(
                f"pattern {self.pattern.id}: port {port} has {len(outside)} "
                f"outside connections, expected 1"
            )
        return outside[0].src if incoming else outside[0].dst

    def find_edge(self, g: FlowsheetGraph, spec: tuple) -> Edge:
        src_ref, dst_ref, tag = spec
        src = self.resolve(g, src_ref)
        dst = self.resolve(g, dst_ref)
        for e in g.edges:
            if e.src == src and e.dst == dst and e.tag == tag:
                return e
        raise GraphError(
            f"pattern {self.pattern.id}: edge {src_ref}->{dst_ref} (tag {tag}) "
            f"not found"
        )


def apply_variant(
    g: FlowsheetGraph, instance: PatternInstance, variant: ErrorVariant
) -> None:
    """Apply a variant's edits to the host graph in place."""
    for edit in variant.edits:
        op = edit[0]
        if op == "remove_dangle":
            g.remove_node(instance.resolve(g, edit[1]))
        elif op == "remove_splice":
            _remove_splice(g, instance.resolve(g, edit[1]))
        elif op == "remove_edge":
            g.remove_edge(instance.find_edge(g, edit[1]))
        elif op == "retype":
            g.retype_node(instance.resolve(g, edit[1]), edit[2])
        elif op == "retarget_dst":
            e = instance.find_edge(g, edit[1])
            g.replace_edge(e, Edge(e.src, instance.resolve(g, edit[2]), e.tag))
        elif op == "retarget_src":
            e = instance.find_edge(g, edit[1])
            g.replace_edge(e, Edge(instance.resolve(g, edit[2]), e.dst, e.tag))
        elif op == "swap_tags":
            _swap_column_tags(g, instance.resolve(g, edit[1]))
        elif op == "move_between":
            _move_between(g, instance, edit[1], edit[2])
        else:  # pragma: no cover - catalog is static data
            raise GraphError(f"unknown edit op {op}")


def _remove_splice(g: FlowsheetGraph, nid: int) -> None:
    ins = g.stream_in(nid)
    outs = g.stream_out(nid)
    if len(ins) != 1 or len(outs) != 1:
        raise GraphError(f"cannot splice node {nid} with {len(ins)} in/{len(outs)} out")
    tag_in, tag_out = ins[0].tag, outs[0].tag
    if tag_in is not None and tag_out is not None:
        raise GraphError(f"cannot splice node {nid}: both edges tagged")
    g.remove_node(nid)
    g.add_edge(ins[0].src, outs[0].dst, tag_in if tag_in is not None else tag_out)


def _swap_column_tags(g: FlowsheetGraph, nid: int) -> None:
    outs = [e for e in g.stream_out(nid) if e.tag in ("tout", "bout")]
    if len(outs) != 2:
        raise GraphError(f"column {nid} does not have two tagged outlets")
    a, b = outs
    g.remove_edge(a)
    g.remove_edge(b)
    g.add_edge(a.src, a.dst, b.tag)
    g.add_edge(b.src, b.dst, a.tag)


def _move_between(g: FlowsheetGraph, instance: PatternInstance, node_ref, edge_spec):
    nid = instance.resolve(g, node_ref)
    _remove_splice_keep(g, nid)
    e = instance.find_edge(g, edge_spec)
    g.remove_edge(e)
    g.add_edge(e.src, nid, e.tag)
    g.add_edge(nid, e.dst, None)


def _remove_splice_keep(g: FlowsheetGraph, nid: int) -> None:
    # splice a node out of its stream path without deleting the node
    ins = g.stream_in(nid)
    outs = g.stream_out(nid)
    if len(ins) != 1 or len(outs) != 1:
        raise GraphError(f"cannot splice node {nid}")
    g.remove_edge(ins[0])
    g.remove_edge(outs[0])
    g.add_edge(ins[0].src, outs[0].dst, ins[0].tag or outs[0].tag)


def _v(vid: str, cls: ErrorClass, *edits: Edit) -> ErrorVariant:
    return ErrorVariant(vid, cls, tuple(edits))


_MC = ErrorClass.MISSING_COMPONENT
_MS = ErrorClass.MISSING_SUBSYSTEM
_MP = ErrorClass.MISPLACED_COMPONENT
_WSt = ErrorClass.WRONG_STREAM_CONNECTION
_WSg = ErrorClass.WRONG_SIGNAL_CONNECTION
_ST = ErrorClass.SWAPPED_TAGS
_WU = ErrorClass.WRONG_UNIT_TYPE


def _pattern(pid, family, nodes, edges, inlet, outlet, variants,
             inlet_tag=None, outlet_tag=None) -> Pattern:
    return Pattern(
        id=pid, family=family,
        nodes=tuple((n, k, f) for n, k, f in nodes),
        edges=tuple(edges), inlet=inlet, outlet=outlet,
        inlet_tag=inlet_tag, outlet_tag=outlet_tag,
        variants=tuple(variants),
    )


def _raw_patterns() -> list[Pattern]:
    pats: list[Pattern] = []

    # ---- Mixer family ------------------------------------------------------
    pats.append(_pattern(
        "M1", "Mixer",
        [("mix", U.MIXER, None), ("raw2", U.RAW_FEED, None)],
        [("raw2", "mix", None)],
        "mix", "mix",
        [
            _v("remove-feed", _MC, ("remove_dangle", "raw2")),
            _v("feed-bypasses-mixer", _WSt,
               ("retarget_dst", ("raw2", "mix", None), "@out")),
            _v("retype-mixer", _WU, ("retype", "mix", U.STORAGE)),
        ],
    ))
    pats.append(_pattern(
        "M2", "Mixer",
        [("mix", U.MIXER, None), ("raw2", U.RAW_FEED, None),
         ("v", U.VALVE, None), ("fc", U.INSTRUMENT, IF.FC)],
        [("raw2", "v", None), ("v", "mix", None),
         ("raw2", "fc", None), ("fc", "v", None)],
        "mix", "mix",
        [
            _v("remove-FC", _MC, ("remove_dangle", "fc")),
            _v("remove-valve", _MC, ("remove_splice", "v")),
            _v("remove-control", _MS,
               ("remove_dangle", "fc"), ("remove_splice", "v")),
            _v("retarget-measurement", _WSg,
               ("retarget_src", ("raw2", "fc", None), "mix")),
            _v("retarget-actuation", _WSg,
               ("retarget_dst", ("fc", "v", None), "mix")),
        ],
    ))

    # ---- HeatExchanger family ---------------------------------------------
    pats.append(_pattern(
        "H1", "HeatExchanger",
        [("hx", U.HEAT_EXCHANGER, None), ("raws", U.RAW_FEED, None),
         ("vs", U.VALVE, None), ("prods", U.PRODUCT, None),
         ("tc", U.INSTRUMENT, IF.TC), ("fc", U.INSTRUMENT, IF.FC)],
        [("raws", "vs", None), ("vs", "hx", "p2"), ("hx", "prods", "p2"),
         ("hx", "tc", None), ("tc", "fc", None), ("fc", "vs", None)],
        "hx", "hx", inlet_tag="p1", outlet_tag="p1",
        variants=[
            _v("remove-TC", _MC, ("remove_dangle", "tc")),
            _v("remove-FC", _MC, ("remove_dangle", "fc")),
            _v("remove-valve", _MC, ("remove_splice", "vs")),
            _v("remove-control", _MS,
               ("remove_dangle", "tc"), ("remove_dangle", "fc"),
               ("remove_splice", "vs")),
            _v("retarget-measurement", _WSg,
               ("retarget_src", ("hx", "tc", None), "vs")),
            _v("retarget-actuation", _WSg,
               ("retarget_dst", ("fc", "vs", None), "hx")),
        ],
    ))
    pats.append(_pattern(
        "H2", "HeatExchanger",
        [("hx", U.HEAT_EXCHANGER, None), ("raws", U.RAW_FEED, None),
         ("vs", U.VALVE, None), ("prods", U.PRODUCT, None),
         ("tc", U.INSTRUMENT, IF.TC)],
        [("raws", "vs", None), ("vs", "hx", "p2"), ("hx", "prods", "p2"),
         ("hx", "tc", None), ("tc", "vs", None)],
        "hx", "hx", inlet_tag="p1", outlet_tag="p1",
        variants=[
            _v("remove-TC", _MC, ("remove_dangle", "tc")),
            _v("remove-valve", _MC, ("remove_splice", "vs")),
            _v("remove-control", _MS,
               ("remove_dangle", "tc"), ("remove_splice", "vs")),
            _v("retarget-measurement", _WSg,
               ("retarget_src", ("hx", "tc", None), "raws")),
        ],
    ))
    pats.append(_pattern(
        "H3", "HeatExchanger",
        [("hx", U.HEAT_EXCHANGER, None), ("raw2", U.RAW_FEED, None),
         ("pp2", U.PUMP, None), ("prod2", U.PRODUCT, None)],
        [("raw2", "hx", "p2"), ("hx", "pp2", "p2"), ("pp2", "prod2", None)],
        "hx", "hx", inlet_tag="p1", outlet_tag="p1",
        variants=[
            _v("remove-second-pass", _MS,
               ("remove_dangle", "pp2"), ("remove_dangle", "raw2"),
               ("remove_dangle", "prod2")),
            _v("retype-pump", _WU, ("retype", "pp2", U.COMPRESSOR)),
        ],
    ))
    pats.append(_pattern(
        "H4", "HeatExchanger",
        [("sp", U.SPLITTER, None), ("hx", U.HEAT_EXCHANGER, None),
         ("vb", U.VALVE, None), ("mx", U.MIXER, None),
         ("tc", U.INSTRUMENT, IF.TC)],
        [("sp", "hx", None), ("hx", "mx", None), ("sp", "vb", None),
         ("vb", "mx", None), ("mx", "tc", None), ("tc", "vb", None)],
        "sp", "mx",
        variants=[
            _v("remove-TC", _MC, ("remove_dangle", "tc")),
            _v("remove-valve", _MC, ("remove_splice", "vb")),
            _v("remove-control", _MS,
               ("remove_dangle", "tc"), ("remove_splice", "vb")),
            _v("retarget-measurement", _WSg,
               ("retarget_src", ("mx", "tc", None), "hx")),
            _v("retarget-actuation", _WSg,
               ("retarget_dst", ("tc", "vb", None), "hx")),
        ],
    ))

    # ---- Pump family -------------------------------------------------------
    pats.append(_pattern(
        "P1", "Pump",
        [("pp", U.PUMP, None), ("v", U.VALVE, None),
         ("fc", U.INSTRUMENT, IF.FC)],
        [("pp", "v", None), ("pp", "fc", None), ("fc", "v", None)],
        "pp", "v",
        [
            _v("remove-FC", _MC, ("remove_dangle", "fc")),
            _v("remove-valve", _MC, ("remove_splice", "v")),
            _v("remove-control", _MS,
               ("remove_dangle", "fc"), ("remove_splice", "v")),
            _v("retype-pump", _WU, ("retype", "pp", U.COMPRESSOR)),
        ],
    ))
    pats.append(_pattern(
        "P2", "Pump",
        [("mx", U.MIXER, None), ("pp", U.PUMP, None), ("sp", U.SPLITTER, None),
         ("vr", U.VALVE, None), ("fc", U.INSTRUMENT, IF.FC)],
        [("mx", "pp", None), ("pp", "sp", None), ("sp", "vr", None),
         ("vr", "mx", None), ("sp", "fc", None), ("fc", "vr", None)],
        "mx", "sp",
        [
            _v("remove-FC", _MC, ("remove_dangle", "fc")),
            _v("remove-valve", _MC, ("remove_splice", "vr")),
            _v("remove-control", _MS,
               ("remove_dangle", "fc"), ("remove_splice", "vr")),
            _v("retarget-recycle", _WSt,
               ("retarget_dst", ("vr", "mx", None), "pp")),
            _v("retype-pump", _WU, ("retype", "pp", U.COMPRESSOR)),
        ],
    ))
    pats.append(_pattern(
        "P3", "Pump",
        [("vf", U.VALVE, None), ("tk", U.STORAGE, None), ("pp", U.PUMP, None),
         ("lc", U.INSTRUMENT, IF.LC)],
        [("vf", "tk", None), ("tk", "pp", None), ("tk", "lc", None),
         ("lc", "vf", None)],
        "vf", "pp",
        [
            _v("remove-LC", _MC, ("remove_dangle", "lc")),
            _v("remove-valve", _MC, ("remove_splice", "vf")),
            _v("remove-control", _MS,
               ("remove_dangle", "lc"), ("remove_splice", "vf")),
            _v("move-LC", _MP, ("retarget_src", ("tk", "lc", None), "pp")),
        ],
    ))

    # ---- Compressor family --------------------------------------------------
    pats.append(_pattern(
        "C1", "Compressor",
        [("cp", U.COMPRESSOR, None), ("v", U.VALVE, None),
         ("pc", U.INSTRUMENT, IF.PC)],
        [("cp", "v", None), ("cp", "pc", None), ("pc", "v", None)],
        "cp", "v",
        [
            _v("remove-PC", _MC, ("remove_dangle", "pc")),
            _v("remove-valve", _MC, ("remove_splice", "v")),
            _v("remove-control", _MS,
               ("remove_dangle", "pc"), ("remove_splice", "v")),
            _v("retype-compressor", _WU, ("retype", "cp", U.PUMP)),
        ],
    ))
    pats.append(_pattern(
        "C2", "Compressor",
        [("mx", U.MIXER, None), ("cp", U.COMPRESSOR, None),
         ("sp", U.SPLITTER, None), ("vr", U.VALVE, None),
         ("fc", U.INSTRUMENT, IF.FC)],
        [("mx", "cp", None), ("cp", "sp", None), ("sp", "vr", None),
         ("vr", "mx", None), ("sp", "fc", None), ("fc", "vr", None)],
        "mx", "sp",
        [
            _v("remove-FC", _MC, ("remove_dangle", "fc")),
            _v("remove-valve", _MC, ("remove_splice", "vr")),
            _v("remove-control", _MS,
               ("remove_dangle", "fc"), ("remove_splice", "vr")),
            _v("retarget-recycle", _WSt,
               ("retarget_dst", ("vr", "mx", None), "cp")),
            _v("retype-compressor", _WU, ("retype", "cp", U.PUMP)),
        ],
    ))
    pats.append(_pattern(
        "C3", "Compressor",
        [("c1", U.COMPRESSOR, None), ("hx", U.HEAT_EXCHANGER, None),
         ("c2", U.COMPRESSOR, None)],
        [("c1", "hx", None), ("hx", "c2", None)],
        "c1", "c2",
        [
            _v("remove-intercooler", _MC, ("remove_splice", "hx")),
            _v("retype-stage-one", _WU, ("retype", "c1", U.PUMP)),
            _v("retype-stage-two", _WU, ("retype", "c2", U.PUMP)),
            _v("move-intercooler", _MP,
               ("move_between", "hx", ("c2", "@out", None))),
        ],
    ))

    # ---- Storage family ------------------------------------------------------
    pats.append(_pattern(
        "S1", "Storage",
        [("tk", U.STORAGE, None), ("vo", U.VALVE, None),
         ("lc", U.INSTRUMENT, IF.LC)],
        [("tk", "vo", None), ("tk", "lc", None), ("lc", "vo", None)],
        "tk", "vo",
        [
            _v("remove-LC", _MC, ("remove_dangle", "lc")),
            _v("remove-valve", _MC, ("remove_splice", "vo")),
            _v("remove-control", _MS,
               ("remove_dangle", "lc"), ("remove_splice", "vo")),
            _v("retype-tank", _WU, ("retype", "tk", U.MIXER)),
        ],
    ))
    pats.append(_pattern(
        "S2", "Storage",
        [("vi", U.VALVE, None), ("tk", U.STORAGE, None),
         ("lc", U.INSTRUMENT, IF.LC)],
        [("vi", "tk", None), ("tk", "lc", None), ("lc", "vi", None)],
        "vi", "tk",
        [
            _v("remove-LC", _MC, ("remove_dangle", "lc")),
            _v("remove-valve", _MC, ("remove_splice", "vi")),
            _v("remove-control", _MS,
               ("remove_dangle", "lc"), ("remove_splice", "vi")),
            _v("move-LC", _MP, ("retarget_src", ("tk", "lc", None), "vi")),
        ],
    ))
    pats.append(_pattern(
        "S3", "Storage",
        [("tk", U.STORAGE, None)],
        [],
        "tk", "tk",
        [
            _v("retype-tank", _WU, ("retype", "tk", U.MIXER)),
        ],
    ))

    # ---- ReactantAddition family ----------------------------------------------
    pats.append(_pattern(
        "A1", "ReactantAddition",
        [("mx", U.MIXER, None), ("raw2", U.RAW_FEED, None),
         ("v", U.VALVE, None), ("fc", U.INSTRUMENT, IF.FC)],
        [("raw2", "v", None), ("v", "mx", None), ("mx", "fc", None),
         ("fc", "v", None)],
        "mx", "mx",
        [
            _v("remove-FC", _MC, ("remove_dangle", "fc")),
            _v("remove-valve", _MC, ("remove_splice", "v")),
            _v("remove-control", _MS,
               ("remove_dangle", "fc"), ("remove_splice", "v")),
            _v("retarget-measurement", _WSg,
               ("retarget_src", ("mx", "fc", None), "v")),
        ],
    ))
    pats.append(_pattern(
        "A2", "ReactantAddition",
        [("mx", U.MIXER, None), ("raw2", U.RAW_FEED, None),
         ("pp", U.PUMP, None)],
        [("raw2", "pp", None), ("pp", "mx", None)],
        "mx", "mx",
        [
            _v("remove-pump", _MC, ("remove_splice", "pp")),
            _v("retype-pump", _WU, ("retype", "pp", U.COMPRESSOR)),
            _v("feed-bypasses-mixer", _WSt,
               ("retarget_dst", ("pp", "mx", None), "@out")),
        ],
    ))
    pats.append(_pattern(
        "A3", "ReactantAddition",
        [("mx", U.MIXER, None), ("raw2", U.RAW_FEED, None),
         ("v", U.VALVE, None), ("fm", U.INSTRUMENT, IF.FC),
         ("fs", U.INSTRUMENT, IF.FC)],
        [("raw2", "v", None), ("v", "mx", None), ("mx", "fm", None),
         ("fm", "fs", None), ("fs", "v", None)],
        "mx", "mx",
        [
            _v("remove-master-FC", _MC, ("remove_dangle", "fm")),
            _v("remove-slave-FC", _MC, ("remove_dangle", "fs")),
            _v("remove-valve", _MC, ("remove_splice", "v")),
            _v("remove-control", _MS,
               ("remove_dangle", "fm"), ("remove_dangle", "fs"),
               ("remove_splice", "v")),
            _v("retarget-actuation", _WSg,
               ("retarget_dst", ("fs", "v", None), "mx")),
        ],
    ))

    # ---- Reactor family ----------------------------------------------------------
    pats.append(_pattern(
        "R1", "Reactor",
        [("rx", U.REACTOR, None), ("v", U.VALVE, None),
         ("pc", U.INSTRUMENT, IF.PC)],
        [("rx", "v", None), ("rx", "pc", None), ("pc", "v", None)],
        "rx", "v",
        [
            _v("remove-PC", _MC, ("remove_dangle", "pc")),
            _v("remove-valve", _MC, ("remove_splice", "v")),
            _v("remove-control", _MS,
               ("remove_dangle", "pc"), ("remove_splice", "v")),
            _v("retarget-measurement", _WSg,
               ("retarget_src", ("rx", "pc", None), "v")),
            _v("move-PC", _MP, ("retarget_src", ("rx", "pc", None), "@in")),
        ],
    ))
    pats.append(_pattern(
        "R2", "Reactor",
        [("rx", U.REACTOR, None), ("raws", U.RAW_FEED, None),
         ("vs", U.VALVE, None), ("prods", U.PRODUCT, None),
         ("tc", U.INSTRUMENT, IF.TC), ("fc", U.INSTRUMENT, IF.FC)],
        [("raws", "vs", None), ("vs", "rx", None), ("rx", "prods", None),
         ("rx", "tc", None), ("tc", "fc", None), ("fc", "vs", None)],
        "rx", "rx",
        [
            _v("remove-TC", _MC, ("remove_dangle", "tc")),
            _v("remove-FC", _MC, ("remove_dangle", "fc")),
            _v("remove-valve", _MC, ("remove_splice", "vs")),
            _v("remove-control", _MS,
               ("remove_dangle", "tc"), ("remove_dangle", "fc"),
               ("remove_splice", "vs")),
            _v("retarget-measurement", _WSg,
               ("retarget_src", ("rx", "tc", None), "vs")),
            _v("retarget-actuation", _WSg,
               ("retarget_dst", ("fc", "vs", None), "rx")),
        ],
    ))
    pats.append(_pattern(
        "R3", "Reactor",
        [("rx", U.REACTOR, None), ("v", U.VALVE, None),
         ("lc", U.INSTRUMENT, IF.LC)],
        [("rx", "v", None), ("rx", "lc", None), ("lc", "v", None)],
        "rx", "v",
        [
            _v("remove-LC", _MC, ("remove_dangle", "lc")),
            _v("remove-valve", _MC, ("remove_splice", "v")),
            _v("remove-control", _MS,
               ("remove_dangle", "lc"), ("remove_splice", "v")),
            _v("move-LC", _MP, ("retarget_src", ("rx", "lc", None), "v")),
        ],
    ))
    pats.append(_pattern(
        "R4", "Reactor",
        [("mx", U.MIXER, None), ("rx", U.REACTOR, None),
         ("sp", U.SPLITTER, None)],
        [("mx", "rx", None), ("rx", "sp", None), ("sp", "mx", None)],
        "mx", "sp",
        [
            _v("remove-recycle", _MS,
               ("remove_edge", ("sp", "mx", None)), ("remove_splice", "sp")),
            _v("missing-recycle-line", _WSt,
               ("remove_edge", ("sp", "mx", None))),
            _v("retarget-recycle", _WSt,
               ("retarget_dst", ("sp", "mx", None), "rx")),
            _v("retype-mixer", _WU, ("retype", "mx", U.STORAGE)),
        ],
    ))

    # ---- Column family -----------------------------------------------------------
    pats.append(_pattern(
        "D1", "Column",
        [("col", U.COLUMN, None), ("vb", U.VALVE, None),
         ("lc", U.INSTRUMENT, IF.LC), ("pt", U.PRODUCT, None)],
        [("col", "pt", "tout"), ("col", "vb", "bout"), ("col", "lc", None),
         ("lc", "vb", None)],
        "col", "vb",
        [
            _v("remove-LC", _MC, ("remove_dangle", "lc")),
            _v("remove-valve", _MC, ("remove_splice", "vb")),
            _v("remove-control", _MS,
               ("remove_dangle", "lc"), ("remove_splice", "vb")),
            _v("swap-tags", _ST, ("swap_tags", "col")),
            _v("retarget-measurement", _WSg,
               ("retarget_src", ("col", "lc", None), "vb")),
        ],
    ))
    pats.append(_pattern(
        "D2", "Column",
        [("col", U.COLUMN, None), ("vt", U.VALVE, None),
         ("pc", U.INSTRUMENT, IF.PC), ("pb", U.PRODUCT, None)],
        [("col", "vt", "tout"), ("col", "pb", "bout"), ("col", "pc", None),
         ("pc", "vt", None)],
        "col", "vt",
        [
            _v("remove-PC", _MC, ("remove_dangle", "pc")),
            _v("remove-valve", _MC, ("remove_splice", "vt")),
            _v("remove-control", _MS,
               ("remove_dangle", "pc"), ("remove_splice", "vt")),
            _v("swap-tags", _ST, ("swap_tags", "col")),
            _v("retarget-measurement", _WSg,
               ("retarget_src", ("col", "pc", None), "vt")),
        ],
    ))
    pats.append(_pattern(
        "D3", "Column",
        [("hx", U.HEAT_EXCHANGER, None), ("raws", U.RAW_FEED, None),
         ("vs", U.VALVE, None), ("prods", U.PRODUCT, None),
         ("tc", U.INSTRUMENT, IF.TC), ("fc", U.INSTRUMENT, IF.FC),
         ("col", U.COLUMN, None), ("pt", U.PRODUCT, None)],
        [("raws", "vs", None), ("vs", "hx", "p2"), ("hx", "prods", "p2"),
         ("hx", "col", "p1"), ("hx", "tc", None), ("tc", "fc", None),
         ("fc", "vs", None), ("col", "pt", "tout")],
        "hx", "col", inlet_tag="p1", outlet_tag="bout",
        variants=[
            _v("remove-TC", _MC, ("remove_dangle", "tc")),
            _v("remove-FC", _MC, ("remove_dangle", "fc")),
            _v("remove-valve", _MC, ("remove_splice", "vs")),
            _v("remove-control", _MS,
               ("remove_dangle", "tc"), ("remove_dangle", "fc"),
               ("remove_splice", "vs")),
            _v("retarget-measurement", _WSg,
               ("retarget_src", ("hx", "tc", None), "col")),
            _v("retarget-actuation", _WSg,
               ("retarget_dst", ("fc", "vs", None), "col")),
        ],
    ))
    pats.append(_pattern(
        "D4", "Column",
        [("mx", U.MIXER, None), ("col", U.COLUMN, None),
         ("sp", U.SPLITTER, None), ("pt", U.PRODUCT, None)],
        [("mx", "col", None), ("col", "sp", "tout"), ("sp", "pt", None),
         ("sp", "mx", None)],
        "mx", "col", outlet_tag="bout",
        variants=[
            _v("missing-reflux-line", _WSt, ("remove_edge", ("sp", "mx", None))),
            _v("remove-reflux", _MS,
               ("remove_edge", ("sp", "mx", None)), ("remove_splice", "sp")),
            _v("swap-tags", _ST, ("swap_tags", "col")),
            _v("retype-mixer", _WU, ("retype", "mx", U.STORAGE)),
        ],
    ))
    pats.append(_pattern(
        "D5", "Column",
        [("col", U.COLUMN, None), ("vt", U.VALVE, None), ("pt", U.PRODUCT, None),
         ("pc", U.INSTRUMENT, IF.PC), ("vb", U.VALVE, None),
         ("lc", U.INSTRUMENT, IF.LC)],
        [("col", "vt", "tout"), ("vt", "pt", None), ("col", "vb", "bout"),
         ("col", "pc", None), ("pc", "vt", None), ("col", "lc", None),
         ("lc", "vb", None)],
        "col", "vb",
        [
            _v("remove-PC", _MC, ("remove_dangle", "pc")),
            _v("remove-LC", _MC, ("remove_dangle", "lc")),
            _v("swap-tags", _ST, ("swap_tags", "col")),
            _v("cross-actuation-tops", _WSg,
               ("retarget_dst", ("pc", "vt", None), "vb")),
            _v("cross-actuation-bottoms", _WSg,
               ("retarget_dst", ("lc", "vb", None), "vt")),
            _v("remove-tops-valve", _MC, ("remove_splice", "vt")),
        ],
    ))
    return pats


_FAMILY_COUNTS = {
    "Mixer": 2, "HeatExchanger": 4, "Pump": 3, "Compressor": 3,
    "Storage": 3, "ReactantAddition": 3, "Reactor": 4, "Column": 5,
}


def instantiate(
    g: FlowsheetGraph, pattern: Pattern, feed_from: Optional[int], feed_tag=None
) -> PatternInstance:
    """Splice a pattern template into `g`, feeding its inlet from node
    `feed_from` (None for self-checks that close the inlet themselves)."""
    mapping: dict[str, int] = {}
    for name, kind, func in pattern.nodes:
        mapping[name] = g.add_node(kind, func)
    internal = [
        g.add_edge(mapping[s], mapping[d], t) for s, d, t in pattern.edges
    ]
    if feed_from is not None:
        tag = pattern.inlet_tag if pattern.inlet_tag else feed_tag
        g.add_edge(feed_from, mapping[pattern.inlet], tag)
    return PatternInstance(pattern, mapping, internal)


def closed_template(pattern: Pattern) -> tuple[FlowsheetGraph, PatternInstance]:
    """The template with a raw feed at the inlet and a product at the outlet."""
    g = FlowsheetGraph()
    raw = g.add_node(U.RAW_FEED)
    inst = instantiate(g, pattern, raw)
    prod = g.add_node(U.PRODUCT)
    g.add_edge(inst.mapping[pattern.outlet], prod, pattern.outlet_tag)
    return g, inst


class CatalogError(RuntimeError):
    pass


def build_catalog() -> list[Pattern]:
    """Build and self-check the 27-pattern catalog.

    Checks: family counts, 1..9 variants per pattern, closed templates
    lint-clean, and every variant producing a structurally valid,
    serializable, non-equivalent graph."""
    pats = _raw_patterns()
    if len(pats) != 27:
        raise CatalogError(f"catalog has {len(pats)} patterns, expected 27")
    fam_counts: dict[str, int] = {}
    for p in pats:
        fam_counts[p.family] = fam_counts.get(p.family, 0) + 1
        if not 1 <= len(p.variants) <= 9:
            raise CatalogError(f"{p.id}: {len(p.variants)} variants out of 1..9")
    if fam_counts != _FAMILY_COUNTS:
        raise CatalogError(f"family counts {fam_counts} != {_FAMILY_COUNTS}")

    checked = []
    for p in pats:
        g, inst = closed_template(p)
        if validate_structure(g):
            raise CatalogError(f"{p.id}: closed template structurally invalid")
        findings = lint_wellformed(g)
        if findings:
            raise CatalogError(f"{p.id}: closed template not lint-clean: {findings[0]}")
        base = codec.serialize_canonical(g)
        counts = _serialization_costs(base)
        for var in p.variants:
            gv, iv = closed_template(p)
            try:
                apply_variant(gv, iv, var)
            except GraphError as exc:
                raise CatalogError(f"{p.id}:{var.id}: edit failed: {exc}") from exc
            if validate_structure(gv):
                raise CatalogError(f"{p.id}:{var.id}: result structurally invalid")
            try:
                s = codec.serialize_canonical(gv)
            except codec.CodecError as exc:
                raise CatalogError(f"{p.id}:{var.id}: unserializable: {exc}") from exc
            if s == base:
                raise CatalogError(f"{p.id}:{var.id}: equivalent to the template")
            if codec.serialize_canonical(codec.parse(s)) != s:
                raise CatalogError(f"{p.id}:{var.id}: round trip failed")
        checked.append(
            Pattern(
                id=p.id, family=p.family, nodes=p.nodes, edges=p.edges,
                inlet=p.inlet, outlet=p.outlet, inlet_tag=p.inlet_tag,
                outlet_tag=p.outlet_tag, variants=p.variants,
                sig_pairs=counts[0], stream_closures=counts[1],
                has_multipass_hex=_has_multipass(p),
            )
        )
    return checked


def _serialization_costs(s: str) -> tuple[int, int]:
    toks = [f for f, _ in codec.scan(s)]
    sig = sum(1 for t in toks if t in codec._SIG_OUT_FORMS)
    conn = sum(1 for t in toks if t in codec._CONN_OUT_FORMS)
    return sig, conn


def _has_multipass(p: Pattern) -> bool:
    return p.inlet_tag in ("p1", "p2", "p3") or any(
        t in ("p1", "p2", "p3") for _, _, t in p.edges
    )


_CATALOG_CACHE: Optional[list[Pattern]] = None


def get_catalog() -> list[Pattern]:
    global _CATALOG_CACHE
    if _CATALOG_CACHE is None:
        _CATALOG_CACHE = build_catalog()
    return _CATALOG_CACHE


def pattern_by_id(pid: str) -> Pattern:
    for p in get_catalog():
        if p.id == pid:
            return p
    raise KeyError(pid)


# -- reference case study -------------------------------------------------------


def case_study_pair() -> tuple[FlowsheetGraph, FlowsheetGraph]:
    """The illustrative regression case: a reactor with a pressure-relief
    control loop feeding a heated column train. Returns (erroneous, correct)
    where the erroneous version is missing the reactor's PC and the
    exchanger's TC (leaving the service-stream FC without feedback)."""

    def build() -> tuple[FlowsheetGraph, dict[str, PatternInstance]]:
        g = FlowsheetGraph()
        raw = g.add_node(U.RAW_FEED)
        r1 = instantiate(g, pattern_by_id("R1"), raw)
        h1 = instantiate(g, pattern_by_id("H1"), r1.mapping["v"])
        d1 = instantiate(
            g, pattern_by_id("D1"), h1.mapping["hx"],
            feed_tag=pattern_by_id("H1").outlet_tag,
        )
        prod = g.add_node(U.PRODUCT)
        g.add_edge(d1.mapping["vb"], prod)
        return g, {"R1": r1, "H1": h1, "D1": d1}

    correct, _ = build()
    erroneous, insts = build()
    apply_variant(erroneous, insts["R1"],
                  next(v for v in insts["R1"].pattern.variants if v.id == "remove-PC"))
    apply_variant(erroneous, insts["H1"],
                  next(v for v in insts["H1"].pattern.variants if v.id == "remove-TC"))
    return erroneous, correct
