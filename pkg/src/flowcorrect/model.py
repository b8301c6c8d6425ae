"""Encoder-decoder transformer over the flowsheet token vocabulary.

A compact T5-style realization: pre-norm residual blocks with scale-only RMS
norms, bias-free linear maps, one shared input embedding with an untied
output projection, and bucketed relative position biases (one 32-bucket table
for the bidirectional encoder, one for the causal decoder, shared across
layers; cross-attention carries no position bias). ``count_params`` is the
closed-form count of exactly these tensors.
"""

from __future__ import annotations

import copy
import io
import json
import math
import struct
from dataclasses import dataclass, asdict, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import PAD_ID, SOS_ID, EOS_ID, VOCAB_SIZE

_REL_BUCKETS = 32
_REL_MAX_DISTANCE = 128


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    dropout: float = 0.1
    max_seq_len: int = 256

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ModelError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads,
               self.d_ff, self.max_seq_len) <= 0:
            raise ModelError("all model dimensions must be positive")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 32
    max_steps: int = 20_000
    eval_interval: int = 500
    patience: int = 10  # evals without val improvement before stopping
    clip_norm: float = 1.0
    label_smoothing: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_steps <= 0:
            raise ModelError("learning_rate, batch_size, max_steps must be positive")
        if self.eval_interval <= 0 or self.patience <= 0:
            raise ModelError("eval_interval and patience must be positive")


def count_params(config: ModelConfig) -> int:
    """Closed-form trainable-parameter count for this architecture."""
    d, dff, L, h, V = (
        config.d_model, config.d_ff, config.n_layers, config.n_heads,
        config.vocab_size,
    )
    embeddings = V * d + d * V
    per_encoder = 4 * d * d + 2 * d * dff + 2 * d
    per_decoder = 8 * d * d + 2 * d * dff + 3 * d
    rel_bias = 2 * h * _REL_BUCKETS
    return embeddings + L * per_encoder + L * per_decoder + rel_bias


class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        var = x.pow(2).mean(dim=-1, keepdim=True)
        return self.weight * x * torch.rsqrt(var + self.eps)


def _relative_position_bucket(
    relative_position: torch.Tensor, bidirectional: bool,
    num_buckets: int = _REL_BUCKETS, max_distance: int = _REL_MAX_DISTANCE,
) -> torch.Tensor:
    ret = torch.zeros_like(relative_position)
    n = -relative_position
    if bidirectional:
        num_buckets //= 2
        ret = ret + (n < 0).long() * num_buckets
        n = n.abs()
    else:
        n = torch.clamp(n, min=0)
    max_exact = num_buckets // 2
    is_small = n < max_exact
    val_large = max_exact + (
        torch.log(n.float().clamp(min=1) / max_exact)
        / math.log(max_distance / max_exact)
        * (num_buckets - max_exact)
    ).long()
    val_large = torch.clamp(val_large, max=num_buckets - 1)
    return ret + torch.where(is_small, n, val_large)


class RelativeBias(nn.Module):
    """Bucketed relative position bias shared across layers."""

    def __init__(self, n_heads: int, bidirectional: bool):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(_REL_BUCKETS, n_heads))
        self.bidirectional = bidirectional

    def forward(self, q_len: int, k_len: int, device) -> torch.Tensor:
        ctx = torch.arange(q_len, device=device)[:, None]
        mem = torch.arange(k_len, device=device)[None, :]
        buckets = _relative_position_bucket(mem - ctx, self.bidirectional)
        return self.table[buckets].permute(2, 0, 1).unsqueeze(0)  # 1,h,q,k


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model, bias=False)
        self.k = nn.Linear(d_model, d_model, bias=False)
        self.v = nn.Linear(d_model, d_model, bias=False)
        self.o = nn.Linear(d_model, d_model, bias=False)
        self.drop = nn.Dropout(dropout)

    def forward(
        self, query: torch.Tensor, kv: torch.Tensor,
        key_pad: Optional[torch.Tensor] = None,
        causal: bool = False,
        pos_bias: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        B, Tq, D = query.shape
        Tk = kv.shape[1]
        q = self.q(query).view(B, Tq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k(kv).view(B, Tk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v(kv).view(B, Tk, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if pos_bias is not None:
            scores = scores + pos_bias
        if causal:
            mask = torch.ones(Tq, Tk, dtype=torch.bool, device=query.device)
            mask = torch.triu(mask, diagonal=1 + (Tk - Tq))
            scores = scores.masked_fill(mask, float("-inf"))
        if key_pad is not None:  # True where PAD
            scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        attn = self.drop(attn)
        out = (attn @ v).transpose(1, 2).reshape(B, Tq, D)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.w1 = nn.Linear(d_model, d_ff, bias=False)
        self.w2 = nn.Linear(d_ff, d_model, bias=False)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w2(self.drop(F.relu(self.w1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = RMSNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm2 = RMSNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, key_pad, pos_bias):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, key_pad=key_pad, pos_bias=pos_bias))
        x = x + self.drop(self.ff(self.norm2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = RMSNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm2 = RMSNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm3 = RMSNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, self_pad, mem_pad, pos_bias):
        h = self.norm1(x)
        x = x + self.drop(
            self.self_attn(h, h, key_pad=self_pad, causal=True, pos_bias=pos_bias)
        )
        h = self.norm2(x)
        x = x + self.drop(self.cross_attn(h, memory, key_pad=mem_pad))
        x = x + self.drop(self.ff(self.norm3(x)))
        return x


class Seq2SeqTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.d_model)
        self.enc_bias = RelativeBias(config.n_heads, bidirectional=True)
        self.dec_bias = RelativeBias(config.n_heads, bidirectional=False)
        self.encoder = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_layers))
        self.decoder = nn.ModuleList(DecoderLayer(config) for _ in range(config.n_layers))
        self.out_proj = nn.Linear(config.d_model, config.vocab_size, bias=False)
        self.drop = nn.Dropout(config.dropout)

    def encode(self, src: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if src.shape[1] > self.config.max_seq_len:
            raise ModelError(
                f"source length {src.shape[1]} exceeds max_seq_len "
                f"{self.config.max_seq_len}"
            )
        pad = src.eq(PAD_ID)
        x = self.drop(self.embedding(src))
        bias = self.enc_bias(src.shape[1], src.shape[1], src.device)
        for layer in self.encoder:
            x = layer(x, pad, bias)
        return x, pad

    def decode(
        self, tgt: torch.Tensor, memory: torch.Tensor, mem_pad: torch.Tensor
    ) -> torch.Tensor:
        if tgt.shape[1] > self.config.max_seq_len:
            raise ModelError(
                f"target length {tgt.shape[1]} exceeds max_seq_len "
                f"{self.config.max_seq_len}"
            )
        # no decoder-side PAD mask: with right-padded batches the causal mask
        # already hides trailing PAD from every supervised position, and the
        # incremental decode path must see identical attention patterns
        x = self.drop(self.embedding(tgt))
        bias = self.dec_bias(tgt.shape[1], tgt.shape[1], tgt.device)
        for layer in self.decoder:
            x = layer(x, memory, None, mem_pad, bias)
        return self.out_proj(x)

    def forward(self, src: torch.Tensor, tgt: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits, shape (batch, len(tgt), vocab)."""
        memory, mem_pad = self.encode(src)
        return self.decode(tgt, memory, mem_pad)

    # -- incremental decoding (KV cache) -----------------------------------

    def start_cache(self, memory: torch.Tensor, mem_pad: torch.Tensor) -> "DecodeCache":
        cross = []
        for layer in self.decoder:
            attn = layer.cross_attn
            B, S, D = memory.shape
            k = attn.k(memory).view(B, S, attn.n_heads, attn.d_head).transpose(1, 2)
            v = attn.v(memory).view(B, S, attn.n_heads, attn.d_head).transpose(1, 2)
            cross.append((k, v))
        return DecodeCache(cross=cross, mem_pad=mem_pad,
                           self_kv=[None] * len(self.decoder), t=0)

    def decode_step(self, cache: "DecodeCache", last_tokens: torch.Tensor) -> torch.Tensor:
        """Logits for the next position given cached state; appends to the
        cache. `last_tokens` has shape (rows,)."""
        t = cache.t
        if t + 1 > self.config.max_seq_len:
            raise ModelError(f"decode length exceeds max_seq_len {self.config.max_seq_len}")
        x = self.embedding(last_tokens)[:, None, :]  # R,1,D
        positions = torch.arange(t + 1, device=x.device)
        buckets = _relative_position_bucket(positions[None, :] - t, bidirectional=False)
        bias = self.dec_bias.table[buckets[0]].T[None, :, None, :]  # 1,h,1,t+1
        for li, layer in enumerate(self.decoder):
            h = layer.norm1(x)
            attn = layer.self_attn
            R = h.shape[0]
            q = attn.q(h).view(R, 1, attn.n_heads, attn.d_head).transpose(1, 2)
            k_new = attn.k(h).view(R, 1, attn.n_heads, attn.d_head).transpose(1, 2)
            v_new = attn.v(h).view(R, 1, attn.n_heads, attn.d_head).transpose(1, 2)
            if cache.self_kv[li] is None:
                k_all, v_all = k_new, v_new
            else:
                k_prev, v_prev = cache.self_kv[li]
                k_all = torch.cat([k_prev, k_new], dim=2)
                v_all = torch.cat([v_prev, v_new], dim=2)
            cache.self_kv[li] = (k_all, v_all)
            scores = q @ k_all.transpose(-1, -2) / math.sqrt(attn.d_head) + bias
            out = torch.softmax(scores, dim=-1) @ v_all
            out = attn.o(out.transpose(1, 2).reshape(R, 1, -1))
            x = x + out
            h = layer.norm2(x)
            cattn = layer.cross_attn
            q = cattn.q(h).view(R, 1, cattn.n_heads, cattn.d_head).transpose(1, 2)
            ck, cv = cache.cross[li]
            scores = q @ ck.transpose(-1, -2) / math.sqrt(cattn.d_head)
            scores = scores.masked_fill(cache.mem_pad[:, None, None, :], float("-inf"))
            out = torch.softmax(scores, dim=-1) @ cv
            x = x + cattn.o(out.transpose(1, 2).reshape(R, 1, -1))
            x = x + layer.ff(layer.norm3(x))
        cache.t = t + 1
        return self.out_proj(x[:, 0])


@dataclass
class DecodeCache:
    cross: list[tuple[torch.Tensor, torch.Tensor]]
    mem_pad: torch.Tensor
    self_kv: list[Optional[tuple[torch.Tensor, torch.Tensor]]]
    t: int

    def reorder(self, index: torch.Tensor) -> None:
        self.cross = [(k[index], v[index]) for k, v in self.cross]
        self.mem_pad = self.mem_pad[index]
        self.self_kv = [
            None if kv is None else (kv[0][index], kv[1][index])
            for kv in self.self_kv
        ]


def init_model(config: ModelConfig, seed: int = 0) -> Seq2SeqTransformer:
    """Fresh parameters: weights ~ N(0, 1/sqrt(fan_in)), norm scales 1,
    bias tables 0; deterministic per seed."""
    config.validate()
    gen = torch.Generator().manual_seed(seed)
    model = Seq2SeqTransformer(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() == 2 and "table" not in name:
                fan_in = p.shape[1] if "embedding" not in name else config.d_model
                p.normal_(0.0, fan_in ** -0.5, generator=gen)
            elif "table" in name:
                p.zero_()
            else:  # RMSNorm scales
                p.fill_(1.0)
    n = sum(p.numel() for p in model.parameters())
    expected = count_params(config)
    assert n == expected, f"parameter count {n} != formula {expected}"
    return model


def sequence_loss(
    logits: torch.Tensor, targets: torch.Tensor, label_smoothing: float = 0.0
) -> torch.Tensor:
    """Mean token cross-entropy over non-PAD target positions."""
    if logits.shape[:-1] != targets.shape:
        raise ModelError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(targets.shape)}")
    if bool(targets.ne(PAD_ID).sum() == 0):
        raise ModelError("no supervised positions: all targets are PAD")
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        targets.reshape(-1),
        ignore_index=PAD_ID,
        label_smoothing=label_smoothing,
    )


# -- data plumbing ---------------------------------------------------------------


def pad_batch(seqs: Sequence[Sequence[int]], device=None) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), PAD_ID, dtype=torch.long, device=device)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long, device=device)
    return out


@dataclass
class EncodedPair:
    src: list[int]  # SOS ... EOS
    tgt: list[int]  # SOS ... EOS


def make_batches(
    pairs: Sequence[EncodedPair], batch_size: int, rng: np.random.Generator
) -> list[list[int]]:
    """Length-bucketed batch index lists, shuffled reproducibly."""
    order = sorted(
        range(len(pairs)), key=lambda i: (len(pairs[i].src) + len(pairs[i].tgt), i)
    )
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    perm = rng.permutation(len(batches))
    return [batches[int(j)] for j in perm]


@dataclass
class TrainResult:
    model: Seq2SeqTransformer
    curves: list[dict]
    best_val_loss: float
    steps: int


def evaluate_loss(
    model: Seq2SeqTransformer, pairs: Sequence[EncodedPair], batch_size: int = 64
) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i : i + batch_size]
            src = pad_batch([p.src for p in chunk])
            tgt = pad_batch([p.tgt for p in chunk])
            logits = model(src, tgt[:, :-1])
            labels = tgt[:, 1:]
            n_tok = int(labels.ne(PAD_ID).sum())
            loss = sequence_loss(logits, labels)
            total += float(loss) * n_tok
            count += n_tok
    model.train()
    return total / max(1, count)


def train_model(
    model: Seq2SeqTransformer,
    train_pairs: Sequence[EncodedPair],
    val_pairs: Sequence[EncodedPair],
    cfg: TrainConfig,
    log: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Adam on teacher-forced cross-entropy; returns the best-validation
    parameters and the training curves."""
    cfg.validate()
    max_len = max(
        max(len(p.src) for p in train_pairs), max(len(p.tgt) for p in train_pairs)
    )
    if max_len > model.config.max_seq_len:
        raise ModelError(
            f"corpus sequence length {max_len} exceeds max_seq_len "
            f"{model.config.max_seq_len}"
        )
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    curves: list[dict] = []
    best_val = float("inf")
    best_state: Optional[dict] = None
    bad_evals = 0
    step = 0
    run_loss, run_count = 0.0, 0
    model.train()
    done = False
    while not done:
        for idxs in make_batches(train_pairs, cfg.batch_size, rng):
            chunk = [train_pairs[i] for i in idxs]
            src = pad_batch([p.src for p in chunk])
            tgt = pad_batch([p.tgt for p in chunk])
            logits = model(src, tgt[:, :-1])
            loss = sequence_loss(logits, tgt[:, 1:], cfg.label_smoothing)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            opt.zero_grad()
            loss.backward()
            if cfg.clip_norm > 0:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            run_loss += float(loss.detach())
            run_count += 1
            step += 1
            if step % cfg.eval_interval == 0 or step >= cfg.max_steps:
                val = evaluate_loss(model, val_pairs) if val_pairs else float("nan")
                rec = {
                    "step": step,
                    "train_loss": run_loss / max(1, run_count),
                    "val_loss": val,
                }
                curves.append(rec)
                if log:
                    log(rec)
                run_loss, run_count = 0.0, 0
                if val_pairs:
                    if val < best_val - 1e-6:
                        best_val = val
                        best_state = copy.deepcopy(model.state_dict())
                        bad_evals = 0
                    else:
                        bad_evals += 1
                        if bad_evals >= cfg.patience:
                            done = True
            if step >= cfg.max_steps:
                done = True
            if done:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    elif val_pairs:
        best_val = evaluate_loss(model, val_pairs)
    model.eval()
    return TrainResult(model, curves, best_val, step)


def grid_search(
    space: dict[str, Sequence],
    train_pairs: Sequence[EncodedPair],
    val_pairs: Sequence[EncodedPair],
    budget_steps: int,
    base_model: Optional[ModelConfig] = None,
    base_train: Optional[TrainConfig] = None,
    log: Optional[Callable[[dict], None]] = None,
) -> list[dict]:
    """Train every cell of the Cartesian grid for `budget_steps` and rank by
    best validation loss. Diverged cells are reported, not fatal."""
    import itertools

    base_model = base_model or ModelConfig()
    base_train = base_train or TrainConfig()
    keys = sorted(space)
    results = []
    for values in itertools.product(*(space[k] for k in keys)):
        cell = dict(zip(keys, values))
        mc = ModelConfig(**{**asdict(base_model), **{
            k: v for k, v in cell.items() if k in asdict(base_model)
        }})
        tc = TrainConfig(**{**asdict(base_train), **{
            k: v for k, v in cell.items() if k in asdict(base_train)
        }})
        tc.max_steps = budget_steps
        rec = {"cell": cell, "params": count_params(mc)}
        try:
            model = init_model(mc, seed=tc.seed)
            out = train_model(model, train_pairs, val_pairs, tc)
            rec.update(status="ok", val_loss=out.best_val_loss, steps=out.steps)
        except TrainingDiverged as exc:
            rec.update(status="diverged", val_loss=float("inf"), error=str(exc))
        results.append(rec)
        if log:
            log(rec)
    results.sort(key=lambda r: r["val_loss"])
    return results


# -- beam search -------------------------------------------------------------------


@dataclass
class Hypothesis:
    tokens: list[int]  # SOS ... (EOS if naturally finished)
    logprob: float  # accumulated log-likelihood
    score: float  # length-normalized: logprob / generated token count


def default_max_len(src_len: int, max_seq_len: int) -> int:
    return min(max_seq_len, int(1.5 * src_len) + 20)


def beam_decode(
    model: Seq2SeqTransformer,
    src_ids: Sequence[int],
    beam_width: int = 5,
    max_len: Optional[int] = None,
) -> list[Hypothesis]:
    return beam_decode_batch(model, [src_ids], beam_width, max_len)[0]


def beam_decode_batch(
    model: Seq2SeqTransformer,
    sources: Sequence[Sequence[int]],
    beam_width: int = 5,
    max_len: Optional[int] = None,
) -> list[list[Hypothesis]]:
    """Standard beam search with incremental KV-cached decoding, batched over
    sources. Hypotheses finalize at EOS or max_len; results are sorted by
    length-normalized score, descending."""
    if beam_width < 1:
        raise ModelError("beam_width must be >= 1")
    model.eval()
    B = len(sources)
    limits = [
        max_len if max_len is not None
        else default_max_len(len(s), model.config.max_seq_len)
        for s in sources
    ]
    with torch.no_grad():
        memory, mem_pad = model.encode(pad_batch(list(sources)))
        rows: list[tuple[int, list[int], float]] = [
            (b, [SOS_ID], 0.0) for b in range(B)
        ]
        cache = model.start_cache(memory, mem_pad)
        finished: list[list[Hypothesis]] = [[] for _ in range(B)]
        while rows:
            last = torch.tensor([r[1][-1] for r in rows], dtype=torch.long)
            logits = model.decode_step(cache, last)
            logp = torch.log_softmax(logits, dim=-1)
            k = min(beam_width, logp.shape[-1])
            top_lp, top_id = logp.topk(k, dim=-1)
            cand: dict[int, list[tuple[float, list[int], int]]] = {}
            for r, (b, toks, lp) in enumerate(rows):
                for j in range(k):
                    cand.setdefault(b, []).append(
                        (lp + float(top_lp[r, j]), toks + [int(top_id[r, j])], r)
                    )
            new_rows: list[tuple[int, list[int], float]] = []
            parents: list[int] = []
            for b, cands in cand.items():
                cands.sort(key=lambda c: (-c[0], c[1]))
                for lp, toks, parent in cands[:beam_width]:
                    if toks[-1] == EOS_ID or len(toks) - 1 >= limits[b]:
                        finished[b].append(_finalize(toks, lp))
                    else:
                        new_rows.append((b, toks, lp))
                        parents.append(parent)
            rows = new_rows
            if rows:
                cache.reorder(torch.tensor(parents, dtype=torch.long))
    out = []
    for b in range(B):
        hyps = sorted(finished[b], key=lambda h: (-h.score, h.tokens))
        out.append(hyps[:beam_width])
    return out


def _finalize(tokens: list[int], logprob: float) -> Hypothesis:
    generated = max(1, len(tokens) - 1)  # SOS is given
    return Hypothesis(tokens, logprob, logprob / generated)


def greedy_decode(
    model: Seq2SeqTransformer, src_ids: Sequence[int], max_len: Optional[int] = None
) -> list[int]:
    """Plain argmax decoding via full teacher-forced forwards; kept free of
    the beam/caching machinery so it can serve as its reference."""
    model.eval()
    limit = max_len if max_len is not None else default_max_len(
        len(src_ids), model.config.max_seq_len
    )
    with torch.no_grad():
        memory, mem_pad = model.encode(pad_batch([list(src_ids)]))
        toks = [SOS_ID]
        while len(toks) - 1 < limit:
            logits = model.decode(pad_batch([toks]), memory, mem_pad)
            nxt = int(logits[0, -1].argmax())
            toks.append(nxt)
            if nxt == EOS_ID:
                break
    return toks


# -- checkpoint format ------------------------------------------------------------

_MAGIC = b"FACK"
_VERSION = 1


def save_checkpoint(
    model: Seq2SeqTransformer, path, step: int = 0,
    best_val_loss: float = float("nan"),
) -> None:
    header = {
        "config": asdict(model.config),
        "step": step,
        "best_val_loss": best_val_loss,
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        for name, tensor in model.state_dict().items():
            data = tensor.detach().cpu().to(torch.float32).contiguous()
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", data.dim()))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.numpy().astype("<f4").tobytes())


def load_checkpoint(
    path, expected_config: Optional[ModelConfig] = None
) -> tuple[Seq2SeqTransformer, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    buf = io.BytesIO(blob)
    if buf.read(4) != _MAGIC:
        raise CheckpointError("corrupt header: bad magic bytes")
    (version,) = struct.unpack("<H", buf.read(2))
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", buf.read(4))
    try:
        header = json.loads(buf.read(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    config = ModelConfig(**header["config"])
    if expected_config is not None and asdict(expected_config) != asdict(config):
        raise CheckpointError(
            f"checkpoint config {asdict(config)} does not match requested "
            f"{asdict(expected_config)}"
        )
    model = Seq2SeqTransformer(config)
    state = {}
    while True:
        raw = buf.read(4)
        if not raw:
            break
        (nlen,) = struct.unpack("<I", raw)
        name = buf.read(nlen).decode()
        (rank,) = struct.unpack("<I", buf.read(4))
        dims = struct.unpack(f"<{rank}I", buf.read(4 * rank))
        count = int(np.prod(dims)) if dims else 1
        payload = buf.read(4 * count)
        if len(payload) < 4 * count:
            raise CheckpointError(f"truncated tensor payload for {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
        state[name] = torch.from_numpy(arr.copy())
    expected_state = model.state_dict()
    if set(state) != set(expected_state):
        missing = set(expected_state) - set(state)
        extra = set(state) - set(expected_state)
        raise CheckpointError(f"tensor set mismatch: missing={missing} extra={extra}")
    for name, tensor in expected_state.items():
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: {tuple(state[name].shape)} vs "
                f"{tuple(tensor.shape)}"
            )
    model.load_state_dict(state)
    model.eval()
    return model, header


# -- quality probes -------------------------------------------------------------


def token_accuracy(
    model: Seq2SeqTransformer, pairs: Sequence[EncodedPair], batch_size: int = 64
) -> float:
    """Teacher-forced next-token accuracy over non-PAD positions."""
    model.eval()
    hit, total = 0, 0
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i : i + batch_size]
            src = pad_batch([p.src for p in chunk])
            tgt = pad_batch([p.tgt for p in chunk])
            logits = model(src, tgt[:, :-1])
            labels = tgt[:, 1:]
            mask = labels.ne(PAD_ID)
            pred = logits.argmax(dim=-1)
            hit += int((pred.eq(labels) & mask).sum())
            total += int(mask.sum())
    return hit / max(1, total)


def greedy_exact_match(
    model: Seq2SeqTransformer, pairs: Sequence[EncodedPair], batch_size: int = 64
) -> float:
    model.eval()
    hits = 0
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        results = beam_decode_batch(model, [p.src for p in chunk], beam_width=1)
        for p, hyps in zip(chunk, results):
            if hyps and hyps[0].tokens == p.tgt:
                hits += 1
    return hits / max(1, len(pairs))
