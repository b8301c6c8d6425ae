"""Command-line entry point: corpus generation, training, grid search,
single-flowsheet correction, evaluation, validation, and DOT export.

Exit codes: 0 success, 1 domain error (parse/lint/divergence), 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import codec, graph as graphmod
from .catalog import get_catalog
from .codec import CodecError, ParseError, parse, serialize_canonical, tokenize, encode
from .corpus import CorpusError, GenConfig, generate_corpus, read_corpus, write_corpus
from .evaluate import PredictionRecord, report
from .graph import lint_wellformed, validate_structure
from .model import (
    ModelConfig,
    TrainConfig,
    TrainingDiverged,
    beam_decode_batch,
    grid_search,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train_model,
)
from .estimator import encode_pairs, hypothesis_string


class UsageError(Exception):
    pass


_SECTIONS = {"gen": GenConfig, "model": ModelConfig, "train": TrainConfig}


def load_run_config(path: str | None) -> dict[str, dict]:
    """A run config file holds flat dotted keys ("gen.n_pairs",
    "model.d_model", "train.learning_rate"); unknown keys are rejected."""
    out: dict[str, dict] = {name: {} for name in _SECTIONS}
    if path is None:
        return out
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    for key, value in data.items():
        section, _, field = key.partition(".")
        cls = _SECTIONS.get(section)
        if cls is None or not field:
            raise UsageError(f"unknown config key {key!r}")
        names = {f.name for f in dataclasses.fields(cls)}
        if field not in names:
            raise UsageError(f"unknown config key {key!r}")
        out[section][field] = value
    return out


def effective_config(cfg: dict[str, dict]) -> dict:
    flat = {}
    for section, values in cfg.items():
        cls = _SECTIONS[section]
        merged = cls(**values)
        for f in dataclasses.fields(cls):
            flat[f"{section}.{f.name}"] = getattr(merged, f.name)
    return flat


def _apply_overrides(cfg: dict[str, dict], section: str, **overrides) -> None:
    for key, value in overrides.items():
        if value is not None:
            cfg[section][key] = value


def _read_input(args) -> str:
    if getattr(args, "input", None):
        return args.input
    if getattr(args, "input_file", None):
        return Path(args.input_file).read_text().strip()
    data = sys.stdin.read().strip()
    if not data:
        raise UsageError("no input flowsheet given (use --input, --file, or stdin)")
    return data


def _parse_input(text: str) -> graphmod.FlowsheetGraph:
    """Accept either an SFILES string or the JSON graph exchange format."""
    if text.lstrip().startswith("{"):
        try:
            return graphmod.from_json_obj(json.loads(text))
        except json.JSONDecodeError as exc:
            raise graphmod.GraphError(f"malformed graph JSON: {exc}") from exc
    return parse(text)


def _write_manifest(out_dir: Path, cfg: dict[str, dict], extra: dict) -> None:
    manifest = {"effective_config": effective_config(cfg)}
    manifest.update(extra)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- subcommands --------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = load_run_config(args.config)
    _apply_overrides(
        cfg, "gen", n_pairs=args.n, seed=args.seed, threads=args.threads,
        erroneous_fraction=args.erroneous_fraction,
    )
    gen = GenConfig(**cfg["gen"])
    if gen.n_pairs <= 0:
        raise UsageError("--n must be positive")
    splits, stats = generate_corpus(gen)
    out = Path(args.out)
    write_corpus(splits, out, gen, extra_manifest={
        "effective_config": effective_config(cfg),
    })
    print(json.dumps(stats, indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    _apply_overrides(
        cfg, "model", d_model=args.d_model, n_layers=args.n_layers,
    )
    _apply_overrides(
        cfg, "train", learning_rate=args.lr, batch_size=args.batch_size,
        max_steps=args.max_steps, seed=args.seed, eval_interval=args.eval_interval,
        patience=args.patience,
    )
    model_cfg = ModelConfig(**cfg["model"])
    train_cfg = TrainConfig(**cfg["train"])
    splits = read_corpus(args.corpus)
    train_pairs = encode_pairs(
        [r["source"] for r in splits["train"]], [r["target"] for r in splits["train"]]
    )
    val_pairs = encode_pairs(
        [r["source"] for r in splits["val"]], [r["target"] for r in splits["val"]]
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "training_log.jsonl"
    model = init_model(model_cfg, seed=train_cfg.seed)
    with open(log_path, "w") as log_fh:
        def log(rec):
            log_fh.write(json.dumps(
                {"step": rec["step"], "train_loss": rec["train_loss"],
                 "val_loss": rec["val_loss"]}) + "\n")
            log_fh.flush()
            print(f"step {rec['step']}: train {rec['train_loss']:.4f} "
                  f"val {rec['val_loss']:.4f}")

        result = train_model(model, train_pairs, val_pairs, train_cfg, log=log)
    ckpt = out / "model.ckpt"
    save_checkpoint(result.model, ckpt, step=result.steps,
                    best_val_loss=result.best_val_loss)
    _write_manifest(out, cfg, {
        "checkpoint": str(ckpt), "best_val_loss": result.best_val_loss,
        "steps": result.steps, "corpus": str(args.corpus),
    })
    print(f"best validation loss {result.best_val_loss:.4f} after "
          f"{result.steps} steps -> {ckpt}")
    return 0


def cmd_grid(args) -> int:
    cfg = load_run_config(args.config)
    splits = read_corpus(args.corpus)
    train_rows = splits["train"][: args.limit] if args.limit else splits["train"]
    val_rows = splits["val"][: max(1, (args.limit or len(splits["val"])) // 8)] \
        if args.limit else splits["val"]
    train_pairs = encode_pairs([r["source"] for r in train_rows],
                               [r["target"] for r in train_rows])
    val_pairs = encode_pairs([r["source"] for r in val_rows],
                             [r["target"] for r in val_rows])
    space = json.loads(args.space) if args.space else {
        "d_model": [128, 256, 512],
        "n_layers": [2, 4, 6],
        "learning_rate": [1e-4, 5e-4, 1e-3],
        "batch_size": [8, 16, 32],
    }
    base_model = ModelConfig(**cfg["model"])
    base_train = TrainConfig(**cfg["train"])
    results = grid_search(
        space, train_pairs, val_pairs, args.budget_steps,
        base_model=base_model, base_train=base_train,
        log=lambda rec: print(json.dumps(rec, sort_keys=True)),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "grid_results.json", "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
    _write_manifest(out, cfg, {"space": space, "budget_steps": args.budget_steps})
    best = results[0]
    print(f"best cell: {best['cell']} val_loss={best['val_loss']:.4f}")
    return 0


def _graph_diff(src: graphmod.FlowsheetGraph, hyp: graphmod.FlowsheetGraph) -> dict:
    """Structured diff keyed by canonical node indices (emission order)."""

    def node_rows(g):
        return [
            {"id": nid, "kind": nd.kind.value,
             "function": nd.function.value if nd.function else None}
            for nid, nd in sorted(g.nodes.items())
        ]

    def edge_rows(g):
        return {
            (e.src, e.dst, e.tag or ""): {
                "src": e.src, "dst": e.dst, "tag": e.tag,
                "kind": g.edge_kind(e).value,
            }
            for e in g.edges
        }

    s_nodes, h_nodes = node_rows(src), node_rows(hyp)
    added_nodes = [r for r in h_nodes if r not in s_nodes]
    removed_nodes = [r for r in s_nodes if r not in h_nodes]
    s_edges, h_edges = edge_rows(src), edge_rows(hyp)
    added_edges = [h_edges[k] for k in sorted(h_edges.keys() - s_edges.keys())]
    removed_edges = [s_edges[k] for k in sorted(s_edges.keys() - h_edges.keys())]
    return {
        "added_nodes": added_nodes, "removed_nodes": removed_nodes,
        "added_edges": added_edges, "removed_edges": removed_edges,
    }


def cmd_correct(args) -> int:
    text = _read_input(args)
    g = _parse_input(text)  # reject unparseable input before any model call
    canonical_input = serialize_canonical(g)
    model, _ = load_checkpoint(args.model)
    src = encode(tokenize(canonical_input))
    hyps = beam_decode_batch(model, [src], beam_width=args.beam)[0]
    rows = []
    top1_graph = None
    for rank, h in enumerate(hyps, 1):
        s = hypothesis_string(h)
        try:
            hg = parse(s)
            valid = "valid"
            if rank == 1:
                top1_graph = hg
        except (ParseError, CodecError) as exc:
            valid = f"invalid ({exc})"
            hg = None
        rows.append({"rank": rank, "score": h.score, "flowsheet": s, "status": valid})
        print(f"#{rank} score={h.score:.4f} [{valid.split(' ')[0]}] {s}")
    diff = None
    if top1_graph is not None:
        canon_src = parse(canonical_input)
        canon_hyp = parse(serialize_canonical(top1_graph))
        diff = _graph_diff(canon_src, canon_hyp)
    print(json.dumps({"input": canonical_input, "hypotheses": rows, "diff": diff},
                     indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.model)
    splits = read_corpus(args.corpus)
    if args.split not in splits:
        raise UsageError(f"unknown split {args.split!r}")
    rows = splits[args.split]
    if args.limit:
        rows = rows[: args.limit]
    records = []
    batch = 32
    for i in range(0, len(rows), batch):
        chunk = rows[i : i + batch]
        sources = [encode(tokenize(r["source"])) for r in chunk]
        results = beam_decode_batch(model, sources, beam_width=args.beam)
        for r, hyps in zip(chunk, results):
            records.append(PredictionRecord(
                source=r["source"], target=r["target"],
                hypotheses=[(hypothesis_string(h), h.score) for h in hyps],
            ))
        if args.progress and (i // batch) % 10 == 0:
            print(f"decoded {min(i + batch, len(rows))}/{len(rows)}", file=sys.stderr)
    rep = report(records)
    print(rep.dumps())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as fh:
            fh.write(rep.dumps() + "\n")
        _write_manifest(out, load_run_config(args.config), {
            "model": str(args.model), "corpus": str(args.corpus),
            "split": args.split, "beam": args.beam, "n": len(records),
        })
    return 0


def cmd_validate(args) -> int:
    text = _read_input(args)
    g = _parse_input(text)
    violations = validate_structure(g)
    findings = lint_wellformed(g)
    for v in violations:
        print(f"structure: {v}")
    for f in findings:
        print(f"lint: {f}")
    if violations or findings:
        return 1
    print("clean")
    return 0


def cmd_export_dot(args) -> int:
    text = _read_input(args)
    g = _parse_input(text)
    sys.stdout.write(graphmod.to_dot(g))
    return 0


def cmd_convert(args) -> int:
    g = _parse_input(_read_input(args))
    if args.to == "json":
        print(graphmod.dumps(g))
    else:
        print(serialize_canonical(g))
    return 0


def cmd_vocab(args) -> int:
    print(json.dumps(codec.vocabulary_table(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="flowcorrect",
        description="Flowsheet autocorrection: corpus, training, evaluation.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, default=None, help="number of pairs")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--erroneous-fraction", type=float, default=None,
                   dest="erroneous_fraction")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the autocorrection model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d-model", type=int, default=None, dest="d_model")
    p.add_argument("--n-layers", type=int, default=None, dest="n_layers")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--max-steps", type=int, default=None, dest="max_steps")
    p.add_argument("--eval-interval", type=int, default=None, dest="eval_interval")
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="hyperparameter grid search")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget-steps", type=int, default=500, dest="budget_steps")
    p.add_argument("--space", default=None,
                   help='JSON dict, e.g. {"d_model":[64,128],"learning_rate":[5e-4]}')
    p.add_argument("--limit", type=int, default=None,
                   help="cap the number of training pairs per cell")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("correct", help="suggest corrections for one flowsheet")
    p.add_argument("--model", required=True)
    p.add_argument("--input", default=None)
    p.add_argument("--file", default=None, dest="input_file")
    p.add_argument("--beam", type=int, default=5)
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--progress", action="store_true")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate", help="structural + well-formedness check")
    p.add_argument("--input", default=None)
    p.add_argument("--file", default=None, dest="input_file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("export-dot", help="emit a DOT digraph")
    p.add_argument("--input", default=None)
    p.add_argument("--file", default=None, dest="input_file")
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser(
        "convert", help="convert between the string notation and graph JSON"
    )
    p.add_argument("--input", default=None)
    p.add_argument("--file", default=None, dest="input_file")
    p.add_argument("--to", choices=["json", "sfiles"], required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("vocab", help="dump the token vocabulary as JSON")
    p.set_defaults(func=cmd_vocab)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, CodecError, CorpusError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except graphmod.GraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
