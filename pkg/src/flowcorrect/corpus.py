"""Synthetic training corpus: Monte Carlo flowsheet assembly from the pattern
catalog, error injection into a configurable fraction of pairs, global
deduplication, and a stratified 80/10/10 split.

Determinism contract: every pair is a pure function of (seed, sample index,
regeneration attempt), so output is byte-identical for any worker count.
"""

from __future__ import annotations

import json
import multiprocessing
import os
from collections import deque
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import codec
from .catalog import (
    Pattern,
    PatternInstance,
    apply_variant,
    get_catalog,
    instantiate,
)
from .codec import CodecError, serialize_canonical
from .graph import (
    COLUMN_TAGS,
    PASS_TAGS,
    FlowsheetGraph,
    GraphError,
    UnitKind as U,
    lint_wellformed,
    validate_structure,
)


class CorpusError(RuntimeError):
    pass


@dataclass
class GenConfig:
    n_pairs: int = 20_000
    seed: int = 7
    erroneous_fraction: float = 0.40
    split: tuple[float, float, float] = (0.80, 0.10, 0.10)
    patterns_min: int = 3
    patterns_max: int = 8
    branch_probability: float = 0.20
    recycle_probability: float = 0.15
    two_error_probability: float = 0.20
    max_tokens: int = 254  # body budget; +SOS/EOS stays within 256
    threads: int = 1

    def validate(self) -> None:
        if self.n_pairs <= 0:
            raise CorpusError("n_pairs must be positive")
        for name in ("erroneous_fraction", "branch_probability",
                     "recycle_probability", "two_error_probability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise CorpusError(f"{name}={v} outside [0,1]")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise CorpusError(f"split {self.split} does not sum to 1")
        if not 1 <= self.patterns_min <= self.patterns_max:
            raise CorpusError("patterns range empty")
        if self.threads < 1:
            raise CorpusError("threads must be >= 1")


@dataclass
class SampledFlowsheet:
    graph: FlowsheetGraph
    instances: list[PatternInstance]


class _SampleRetry(Exception):
    pass


# build-time closure budget: leaves room for one flowsheet recycle plus up to
# two injection edits that each may add one numbered connection
_BUILD_CONN_CAP = codec.MAX_STREAM_CONNECTIONS - 3


def _rng_for(seed: int, idx: int, attempt: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=(seed, idx, attempt)))
    )


def sample_flowsheet(
    rng: np.random.Generator, config: GenConfig, catalog: list[Pattern]
) -> SampledFlowsheet:
    """Assemble one lint-clean flowsheet by splicing randomly drawn catalog
    patterns into open chains, with optional branching and one optional
    recycle. Retries internally on serialization-cap violations."""
    for _ in range(100):
        try:
            return _sample_once(rng, config, catalog)
        except _SampleRetry:
            continue
    raise CorpusError("flowsheet sampling failed 100 times in a row")


def _sample_once(
    rng: np.random.Generator, config: GenConfig, catalog: list[Pattern]
) -> SampledFlowsheet:
    g = FlowsheetGraph()
    raw0 = g.add_node(U.RAW_FEED)
    k = int(rng.integers(config.patterns_min, config.patterns_max + 1))
    # (node, pending outlet tag, opened by a branch splitter)
    ends: deque[tuple[int, Optional[str], bool]] = deque([(raw0, None, False)])
    instances: list[PatternInstance] = []
    sig_used = 0
    conn_used = 0
    multipass_used = False

    for _ in range(k):
        end, tag, from_branch = ends.popleft()
        if rng.random() < config.branch_probability:
            sp = g.add_node(U.SPLITTER)
            g.add_edge(end, sp, tag)
            ends.append((sp, None, True))
            end, tag = sp, None
        eligible = [
            p for p in catalog
            if sig_used + p.sig_pairs <= codec.MAX_SIGNAL_CONNECTIONS
            and conn_used + p.stream_closures <= _BUILD_CONN_CAP
            and not (p.has_multipass_hex and multipass_used)
            and not (tag is not None and p.inlet_tag is not None)
        ]
        if not eligible:
            raise _SampleRetry
        p = eligible[int(rng.integers(len(eligible)))]
        inst = instantiate(g, p, end, feed_tag=tag)
        instances.append(inst)
        sig_used += p.sig_pairs
        conn_used += p.stream_closures
        multipass_used = multipass_used or p.has_multipass_hex
        ends.appendleft((inst.mapping[p.outlet], p.outlet_tag, from_branch))

    if rng.random() < config.recycle_probability and conn_used < _BUILD_CONN_CAP:
        if _close_recycle(g, rng, ends):
            conn_used += 1

    for end, tag, _ in ends:
        prod = g.add_node(U.PRODUCT)
        g.add_edge(end, prod, tag)

    if lint_wellformed(g):
        raise _SampleRetry
    try:
        tokens = codec.serialize_tokens(g)
    except CodecError:
        raise _SampleRetry from None
    if len(tokens) > config.max_tokens:
        raise _SampleRetry
    return SampledFlowsheet(g, instances)


def _close_recycle(
    g: FlowsheetGraph, rng: np.random.Generator,
    ends: deque,
) -> bool:
    """Route one open splitter branch back to an upstream mixer, inserting the
    mixer on an upstream edge when no suitable one exists."""
    branch_ends = [(i, e) for i, e in enumerate(ends) if e[2]]
    if not branch_ends:
        return False
    pos, (end, tag, _) = branch_ends[int(rng.integers(len(branch_ends)))]

    def reaches(frm: int, to: int) -> bool:
        seen = {frm}
        stack = [frm]
        while stack:
            for e in g.stream_out(stack.pop()):
                if e.dst == to:
                    return True
                if e.dst not in seen:
                    seen.add(e.dst)
                    stack.append(e.dst)
        return False

    mixers = sorted(
        nid for nid, nd in g.nodes.items()
        if nd.kind is U.MIXER and reaches(nid, end)
    )
    if mixers:
        target = mixers[int(rng.integers(len(mixers)))]
    else:
        candidates = [
            e for e in g.edges
            if g.edge_kind(e).value == "stream" and reaches(e.dst, end)
        ]
        if not candidates:
            return False
        e = candidates[int(rng.integers(len(candidates)))]
        mx = g.add_node(U.MIXER)
        src_kind, dst_kind = g.kind(e.src), g.kind(e.dst)
        u_tag = e.tag if (
            (e.tag in COLUMN_TAGS)
            or (e.tag in PASS_TAGS and src_kind is U.HEAT_EXCHANGER)
        ) else None
        v_tag = e.tag if (
            e.tag in PASS_TAGS and dst_kind is U.HEAT_EXCHANGER
        ) else None
        g.remove_edge(e)
        g.add_edge(e.src, mx, u_tag)
        g.add_edge(mx, e.dst, v_tag)
        target = mx
    g.add_edge(end, target, tag)
    del ends[pos]
    return True


def inject_errors(
    sampled: SampledFlowsheet, rng: np.random.Generator, config: GenConfig
) -> tuple[FlowsheetGraph, list[str]]:
    """Corrupt one pattern instance (or two, with two_error_probability) by a
    uniformly drawn variant each. The result is structurally valid,
    serializable, and not equivalent to the input."""
    target = serialize_canonical(sampled.graph)
    n_err = 2 if (
        rng.random() < config.two_error_probability and len(sampled.instances) >= 2
    ) else 1
    for _ in range(100):
        g = sampled.graph.copy()
        idxs = sorted(
            int(i) for i in
            rng.choice(len(sampled.instances), size=n_err, replace=False)
        )
        applied = []
        try:
            for i in idxs:
                inst = sampled.instances[i]
                var = inst.pattern.variants[int(rng.integers(len(inst.pattern.variants)))]
                apply_variant(g, inst, var)
                applied.append(f"{inst.pattern.id}:{var.id}")
            if validate_structure(g):
                raise GraphError("structural violation after edit")
            tokens = codec.serialize_tokens(g)
            if len(tokens) > config.max_tokens:
                raise GraphError("token budget exceeded")
            if "".join(tokens) == target:
                raise GraphError("edit produced an equivalent graph")
            return g, applied
        except (GraphError, CodecError):
            continue
    raise CorpusError("error injection failed 100 times in a row")


def generate_pair(seed: int, idx: int, attempt: int, config: GenConfig) -> dict:
    """The (source, target) pair for one sample index; pure in its inputs."""
    catalog = get_catalog()
    # the erroneous/correct decision is keyed by (seed, idx) only: uniqueness
    # regeneration redraws the flowsheet, never the category, so the corpus
    # fraction stays an unbiased binomial around erroneous_fraction
    cat_rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=(seed, idx)))
    )
    is_erroneous = cat_rng.random() < config.erroneous_fraction
    rng = _rng_for(seed, idx, attempt)
    sampled = sample_flowsheet(rng, config, catalog)
    target = serialize_canonical(sampled.graph)
    if is_erroneous:
        erroneous, applied = inject_errors(sampled, rng, config)
        source = serialize_canonical(erroneous)
    else:
        source, applied = target, []
    return {
        "source": source,
        "target": target,
        "errors": applied,
        "patterns": [inst.pattern.id for inst in sampled.instances],
        "idx": idx,
    }


def _worker_chunk(args: tuple) -> list[dict]:
    seed, lo, hi, cfg_dict = args
    cfg = GenConfig(**cfg_dict)
    return [generate_pair(seed, i, 0, cfg) for i in range(lo, hi)]


def _first_pass(config: GenConfig) -> list[dict]:
    n = config.n_pairs
    if config.threads <= 1 or n < 256:
        return [generate_pair(config.seed, i, 0, config) for i in range(n)]
    cfg_dict = asdict(config)
    chunk = max(64, n // (config.threads * 16))
    jobs = [
        (config.seed, lo, min(lo + chunk, n), cfg_dict)
        for lo in range(0, n, chunk)
    ]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(config.threads) as pool:
        parts = pool.map(_worker_chunk, jobs)
    out: list[dict] = []
    for part in parts:
        out.extend(part)
    return out


def generate_corpus(config: GenConfig) -> tuple[dict[str, list[dict]], dict]:
    """Generate n unique pairs and split them train/val/test.

    Returns ({"train": [...], "val": [...], "test": [...]}, stats)."""
    config.validate()
    pairs = _first_pass(config)

    seen: set[tuple[str, str]] = set()
    for idx in range(config.n_pairs):
        pair = pairs[idx]
        attempt = 0
        while (pair["source"], pair["target"]) in seen:
            attempt += 1
            if attempt > 64:
                raise CorpusError(
                    f"could not find a unique pair for index {idx}; the "
                    f"configuration is too small for this much diversity"
                )
            pair = generate_pair(config.seed, idx, attempt, config)
        seen.add((pair["source"], pair["target"]))
        pairs[idx] = pair

    splits = _stratified_split(pairs, config)
    stats = corpus_stats(splits, config)
    return splits, stats


def _largest_remainder(total: int, fractions: tuple[float, ...]) -> list[int]:
    raw = [f * total for f in fractions]
    base = [int(x) for x in raw]
    short = total - sum(base)
    order = sorted(range(len(raw)), key=lambda i: raw[i] - base[i], reverse=True)
    for i in order[:short]:
        base[i] += 1
    return base


def _stratified_split(pairs: list[dict], config: GenConfig) -> dict[str, list[dict]]:
    n = config.n_pairs
    n_train = int(config.split[0] * n)
    n_val = int(config.split[1] * n)
    n_test = n - n_train - n_val
    err = [i for i, p in enumerate(pairs) if p["errors"]]
    cor = [i for i, p in enumerate(pairs) if not p["errors"]]
    rng = _rng_for(config.seed, 2**32, 0)
    rng.shuffle(err)
    rng.shuffle(cor)
    e_alloc = _largest_remainder(len(err), config.split)
    c_alloc = [n_train - e_alloc[0], n_val - e_alloc[1], n_test - e_alloc[2]]
    if min(c_alloc) < 0 or sum(c_alloc) != len(cor):
        raise CorpusError("stratified split allocation failed")
    out: dict[str, list[dict]] = {}
    e_pos = c_pos = 0
    for name, ne, nc in zip(("train", "val", "test"), e_alloc, c_alloc):
        chosen = sorted(err[e_pos : e_pos + ne] + cor[c_pos : c_pos + nc])
        e_pos += ne
        c_pos += nc
        out[name] = [pairs[i] for i in chosen]
    return out


def corpus_stats(splits: dict[str, list[dict]], config: GenConfig) -> dict:
    def frac(rows: list[dict]) -> float:
        return sum(1 for r in rows if r["errors"]) / max(1, len(rows))

    all_rows = [r for rows in splits.values() for r in rows]
    return {
        "n_pairs": len(all_rows),
        "seed": config.seed,
        "counts": {k: len(v) for k, v in splits.items()},
        "erroneous_fraction": {
            "global": frac(all_rows),
            **{k: frac(v) for k, v in splits.items()},
        },
    }


# -- persistence ---------------------------------------------------------------

SPLIT_FILES = {"train": "train.jsonl", "val": "val.jsonl", "test": "test.jsonl"}


def write_corpus(
    splits: dict[str, list[dict]], out_dir: str | Path, config: GenConfig,
    extra_manifest: Optional[dict] = None,
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, fname in SPLIT_FILES.items():
        rows = splits.get(name, [])
        with open(out / fname, "w") as fh:
            fh.write(f"# flowcorrect corpus split={name} pairs={len(rows)}\n")
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    manifest = {
        "config": asdict(config),
        **corpus_stats(splits, config),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_corpus(in_dir: str | Path) -> dict[str, list[dict]]:
    src = Path(in_dir)
    splits: dict[str, list[dict]] = {}
    for name, fname in SPLIT_FILES.items():
        path = src / fname
        if not path.exists():
            raise CorpusError(f"missing corpus file {path}")
        rows = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusError(
                        f"{path}:{lineno}: malformed record: {exc}"
                    ) from exc
                for key in ("source", "target", "errors", "patterns", "idx"):
                    if key not in row:
                        raise CorpusError(f"{path}:{lineno}: missing field {key!r}")
                rows.append(row)
        splits[name] = rows
    return splits
