import json

import numpy as np
import pytest

from flowcorrect.codec import UNK, parse, serialize_canonical, tokenize
from flowcorrect.corpus import (
    CorpusError,
    GenConfig,
    _rng_for,
    generate_corpus,
    generate_pair,
    inject_errors,
    read_corpus,
    sample_flowsheet,
    write_corpus,
)
from flowcorrect.graph import UnitKind as U, equivalent, lint_wellformed


CFG = GenConfig()


def test_config_validation():
    with pytest.raises(CorpusError):
        GenConfig(n_pairs=0).validate()
    with pytest.raises(CorpusError):
        GenConfig(erroneous_fraction=1.5).validate()
    with pytest.raises(CorpusError):
        GenConfig(split=(0.5, 0.2, 0.2)).validate()
    with pytest.raises(CorpusError):
        GenConfig(patterns_min=5, patterns_max=3).validate()


def test_sample_determinism(catalog):
    a = sample_flowsheet(_rng_for(1, 5, 0), CFG, catalog)
    b = sample_flowsheet(_rng_for(1, 5, 0), CFG, catalog)
    assert serialize_canonical(a.graph) == serialize_canonical(b.graph)
    assert [i.pattern.id for i in a.instances] == [i.pattern.id for i in b.instances]


def test_degenerate_config_gives_simple_chain(catalog):
    cfg = GenConfig(branch_probability=0.0, recycle_probability=0.0)
    template_splitters = {
        p.id: sum(1 for _, kind, _ in p.nodes if kind is U.SPLITTER)
        for p in catalog
    }
    for i in range(30):
        s = sample_flowsheet(_rng_for(3, i, 0), cfg, catalog)
        n_splt = sum(
            1 for nd in s.graph.nodes.values() if nd.kind is U.SPLITTER
        )
        expected = sum(template_splitters[inst.pattern.id] for inst in s.instances)
        assert n_splt == expected  # splitters only come from the templates


def test_sampled_flowsheets_lint_clean(catalog):
    for i in range(50):
        s = sample_flowsheet(_rng_for(4, i, 0), CFG, catalog)
        assert lint_wellformed(s.graph) == []


def test_node_count_bounds(catalog):
    # bounds derived from the catalog itself, not hardcoded
    sizes = {p.id: len(p.nodes) for p in catalog}
    kmin, kmax = CFG.patterns_min, CFG.patterns_max
    low = 1 + kmin * min(sizes.values()) + 1  # raw + patterns + one product
    # raw + patterns + a splitter and product per branch + recycle mixer + products
    high = 1 + kmax * max(sizes.values()) + kmax * 2 + 1 + kmax
    seen_lo, seen_hi = 10**9, 0
    for i in range(400):
        s = sample_flowsheet(_rng_for(5, i, 0), CFG, catalog)
        seen_lo = min(seen_lo, len(s.graph.nodes))
        seen_hi = max(seen_hi, len(s.graph.nodes))
    assert low <= seen_lo
    assert seen_hi <= high


def test_inject_single_error_when_two_error_probability_zero(catalog):
    cfg = GenConfig(two_error_probability=0.0)
    for i in range(40):
        rng = _rng_for(6, i, 0)
        s = sample_flowsheet(rng, cfg, catalog)
        _, applied = inject_errors(s, rng, cfg)
        assert len(applied) == 1


def test_inject_never_equivalent(catalog):
    for i in range(60):
        rng = _rng_for(8, i, 0)
        s = sample_flowsheet(rng, CFG, catalog)
        err, applied = inject_errors(s, rng, CFG)
        assert applied
        assert not equivalent(err, s.graph)


def test_generate_pair_fields():
    p = generate_pair(7, 0, 0, CFG)
    assert set(p) == {"source", "target", "errors", "patterns", "idx"}
    assert p["idx"] == 0
    assert (p["source"] == p["target"]) == (not p["errors"])


SMALL = GenConfig(n_pairs=600, seed=13)


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(SMALL)


def test_corpus_split_sizes_and_uniqueness(small_corpus):
    splits, stats = small_corpus
    assert stats["counts"] == {"train": 480, "val": 60, "test": 60}
    seen = set()
    for rows in splits.values():
        for r in rows:
            key = (r["source"], r["target"])
            assert key not in seen
            seen.add(key)
    assert len(seen) == 600


def test_corpus_fraction_bounds(small_corpus):
    _, stats = small_corpus
    f = stats["erroneous_fraction"]
    assert abs(f["global"] - 0.40) < 0.05  # n=600; acceptance pins 0.01 at n=20k
    for split in ("train", "val", "test"):
        assert abs(f[split] - f["global"]) < 0.05


def test_corpus_round_trips_and_vocabulary_closure(small_corpus):
    splits, _ = small_corpus
    for rows in splits.values():
        for r in rows[:40]:
            for s in (r["source"], r["target"]):
                assert UNK not in tokenize(s)
                assert serialize_canonical(parse(s)) == s
            assert lint_wellformed(parse(r["target"])) == []


def test_corpus_determinism_across_threads(small_corpus):
    splits, _ = small_corpus
    again, _ = generate_corpus(GenConfig(n_pairs=600, seed=13, threads=2))
    assert splits == again


def test_corpus_changes_with_seed(small_corpus):
    splits, _ = small_corpus
    other, _ = generate_corpus(GenConfig(n_pairs=600, seed=14))
    assert splits != other


def test_write_read_round_trip(tmp_path, small_corpus):
    splits, _ = small_corpus
    write_corpus(splits, tmp_path, SMALL)
    assert (tmp_path / "manifest.json").exists()
    back = read_corpus(tmp_path)
    assert back == splits
    # byte-identical on rewrite
    first = (tmp_path / "train.jsonl").read_bytes()
    write_corpus(splits, tmp_path, SMALL)
    assert (tmp_path / "train.jsonl").read_bytes() == first


def test_read_reports_malformed_line(tmp_path, small_corpus):
    splits, _ = small_corpus
    write_corpus(splits, tmp_path, SMALL)
    path = tmp_path / "val.jsonl"
    lines = path.read_text().splitlines()
    lines[3] = lines[3][: len(lines[3]) // 2]  # truncate a record
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusError, match="val.jsonl:4"):
        read_corpus(tmp_path)


def test_empty_split_keeps_header(tmp_path):
    write_corpus({"train": [], "val": [], "test": []}, tmp_path,
                 GenConfig(n_pairs=1))
    text = (tmp_path / "test.jsonl").read_text()
    assert text.startswith("# flowcorrect corpus split=test")
    back = read_corpus(tmp_path)
    assert back == {"train": [], "val": [], "test": []}
