"""Flowsheet autocorrection: graph model, canonical SFILES-style codec,
synthetic error corpus, seq2seq transformer, and evaluation harness."""

from .graph import (
    EdgeKind,
    FlowsheetGraph,
    GraphError,
    InstrumentFunction,
    UnitKind,
    equivalent,
    lint_wellformed,
    validate_structure,
)
from .codec import (
    CodecError,
    ParseError,
    canonical_oracle,
    decode,
    detokenize,
    encode,
    parse,
    serialize_canonical,
    tokenize,
)
from .catalog import build_catalog, case_study_pair, get_catalog
from .corpus import GenConfig, generate_corpus, read_corpus, write_corpus
from .model import (
    ModelConfig,
    TrainConfig,
    beam_decode,
    count_params,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train_model,
)
from .estimator import FlowsheetAutocorrector
from .evaluate import (
    EvalReport,
    FailureClass,
    PredictionRecord,
    classify_failure,
    graph_edit_distance,
    match,
    report,
    topk_accuracy,
)

__version__ = "0.1.0"

__all__ = [
    "EdgeKind", "FlowsheetGraph", "GraphError", "InstrumentFunction", "UnitKind",
    "equivalent", "lint_wellformed", "validate_structure",
    "CodecError", "ParseError", "canonical_oracle", "decode", "detokenize",
    "encode", "parse", "serialize_canonical", "tokenize",
    "build_catalog", "case_study_pair", "get_catalog",
    "GenConfig", "generate_corpus", "read_corpus", "write_corpus",
    "ModelConfig", "TrainConfig", "beam_decode", "count_params", "init_model",
    "load_checkpoint", "save_checkpoint", "train_model",
    "FlowsheetAutocorrector",
    "EvalReport", "FailureClass", "PredictionRecord", "classify_failure",
    "graph_edit_distance", "match", "report", "topk_accuracy",
]
