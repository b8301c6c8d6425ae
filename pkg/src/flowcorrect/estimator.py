"""scikit-learn style estimator wrapping the autocorrection model: fit on
(erroneous, correct) string pairs, predict corrected flowsheet strings.

Composes with the sklearn ecosystem (``get_params``/``set_params``/``clone``
work as usual); the heavy lifting lives in :mod:`flowcorrect.model`.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import codec
from .codec import UNK, encode, tokenize
from .model import (
    EncodedPair,
    ModelConfig,
    TrainConfig,
    Hypothesis,
    beam_decode_batch,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train_model,
)
from .evaluate import match


def check_flowsheet_strings(
    X, name: str = "X", max_seq_len: Optional[int] = None
) -> list[str]:
    """Validate an array-like of flowsheet strings: non-empty, str dtype,
    fully tokenizable (no unknown runs), optionally within a length budget."""
    if isinstance(X, (str, bytes)):
        raise ValueError(f"{name} must be a sequence of strings, not a single string")
    seqs = list(X)
    if len(seqs) == 0:
        raise ValueError(f"{name} is empty")
    for i, s in enumerate(seqs):
        if not isinstance(s, str):
            raise ValueError(f"{name}[{i}] is {type(s).__name__}, expected str")
        toks = tokenize(s)
        if UNK in toks:
            raise ValueError(
                f"{name}[{i}] contains text outside the flowsheet vocabulary: {s!r}"
            )
        if max_seq_len is not None and len(toks) > max_seq_len:
            raise ValueError(
                f"{name}[{i}] tokenizes to {len(toks)} tokens, over the limit "
                f"of {max_seq_len}"
            )
    return seqs


def check_pair_lengths(X: Sequence[str], y: Sequence[str]) -> None:
    if len(X) != len(y):
        raise ValueError(f"X and y have different lengths: {len(X)} vs {len(y)}")


def encode_pairs(sources: Sequence[str], targets: Sequence[str]) -> list[EncodedPair]:
    return [
        EncodedPair(encode(tokenize(s)), encode(tokenize(t)))
        for s, t in zip(sources, targets)
    ]


def hypothesis_string(hyp: Hypothesis) -> str:
    """Surface string of a decoded hypothesis. PAD/UNK ids render as their
    literal placeholder forms, which never parse (honest invalidity)."""
    forms = codec.decode(hyp.tokens)
    return "".join(f for f in forms if f not in (codec.SOS, codec.EOS))


class FlowsheetAutocorrector(BaseEstimator):
    """Sequence-to-sequence flowsheet autocorrector.

    Parameters mirror ModelConfig/TrainConfig; ``fit`` holds out
    ``validation_fraction`` of the pairs to select the best checkpoint,
    ``predict`` returns the highest-likelihood corrected string per input.
    """

    def __init__(
        self,
        d_model: int = 128,
        n_layers: int = 4,
        n_heads: int = 4,
        d_ff: int = 512,
        dropout: float = 0.1,
        max_seq_len: int = 256,
        learning_rate: float = 5e-4,
        batch_size: int = 32,
        max_steps: int = 20_000,
        eval_interval: int = 500,
        patience: int = 10,
        label_smoothing: float = 0.0,
        beam_width: int = 5,
        validation_fraction: float = 0.1,
        seed: int = 0,
    ):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.dropout = dropout
        self.max_seq_len = max_seq_len
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.eval_interval = eval_interval
        self.patience = patience
        self.label_smoothing = label_smoothing
        self.beam_width = beam_width
        self.validation_fraction = validation_fraction
        self.seed = seed

    # -- sklearn plumbing ---------------------------------------------------

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
            d_ff=self.d_ff, dropout=self.dropout, max_seq_len=self.max_seq_len,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            max_steps=self.max_steps, eval_interval=self.eval_interval,
            patience=self.patience, label_smoothing=self.label_smoothing,
            seed=self.seed,
        )

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise RuntimeError(
                "this FlowsheetAutocorrector is not fitted yet; call fit or load"
            )

    # -- estimator API ------------------------------------------------------

    def fit(
        self, X, y, validation_pairs: Optional[tuple[Sequence[str], Sequence[str]]] = None,
        log=None,
    ) -> "FlowsheetAutocorrector":
        """Train on (erroneous-or-correct, correct) string pairs.

        `validation_pairs` overrides the internal validation holdout, e.g.
        to use a corpus's dedicated split."""
        X = check_flowsheet_strings(X, "X", self.max_seq_len)
        y = check_flowsheet_strings(y, "y", self.max_seq_len)
        check_pair_lengths(X, y)
        if validation_pairs is not None:
            vx = check_flowsheet_strings(validation_pairs[0], "validation X",
                                         self.max_seq_len)
            vy = check_flowsheet_strings(validation_pairs[1], "validation y",
                                         self.max_seq_len)
            check_pair_lengths(vx, vy)
            train_pairs = encode_pairs(X, y)
            val_pairs = encode_pairs(vx, vy)
        else:
            rng = np.random.default_rng(self.seed)
            order = rng.permutation(len(X))
            n_val = max(1, int(self.validation_fraction * len(X))) if len(X) > 1 else 0
            val_idx = set(order[:n_val].tolist())
            train_pairs = encode_pairs(
                [X[i] for i in range(len(X)) if i not in val_idx],
                [y[i] for i in range(len(X)) if i not in val_idx],
            )
            val_pairs = encode_pairs(
                [X[i] for i in sorted(val_idx)], [y[i] for i in sorted(val_idx)]
            )
        model = init_model(self._model_config(), seed=self.seed)
        result = train_model(model, train_pairs, val_pairs, self._train_config(), log=log)
        self.model_ = result.model
        self.curves_ = result.curves
        self.best_val_loss_ = result.best_val_loss
        self.n_steps_ = result.steps
        return self

    def predict_topk(self, X, k: Optional[int] = None) -> list[list[tuple[str, float]]]:
        """Ranked (string, score) hypotheses per input, best first."""
        self._check_fitted()
        X = check_flowsheet_strings(X, "X", self.max_seq_len)
        k = k if k is not None else self.beam_width
        out: list[list[tuple[str, float]]] = []
        batch = 32
        for i in range(0, len(X), batch):
            chunk = X[i : i + batch]
            sources = [encode(tokenize(s)) for s in chunk]
            for hyps in beam_decode_batch(self.model_, sources, beam_width=k):
                out.append([(hypothesis_string(h), h.score) for h in hyps])
        return out

    def predict(self, X) -> list[str]:
        return [hyps[0][0] if hyps else "" for hyps in self.predict_topk(X, k=1)]

    def score(self, X, y) -> float:
        """Top-1 graph-level exact-match accuracy."""
        y = check_flowsheet_strings(y, "y")
        preds = self.predict(X)
        check_pair_lengths(preds, y)
        return sum(1 for p, t in zip(preds, y) if match(p, t)) / len(y)

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        self._check_fitted()
        save_checkpoint(self.model_, path, step=getattr(self, "n_steps_", 0),
                        best_val_loss=getattr(self, "best_val_loss_", float("nan")))

    @classmethod
    def load(cls, path) -> "FlowsheetAutocorrector":
        model, header = load_checkpoint(path)
        cfg = model.config
        est = cls(
            d_model=cfg.d_model, n_layers=cfg.n_layers, n_heads=cfg.n_heads,
            d_ff=cfg.d_ff, dropout=cfg.dropout, max_seq_len=cfg.max_seq_len,
        )
        est.model_ = model
        est.best_val_loss_ = header.get("best_val_loss", float("nan"))
        est.n_steps_ = header.get("step", 0)
        return est
