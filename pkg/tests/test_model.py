import math

import numpy as np
import pytest
import torch

from flowcorrect.codec import EOS_ID, PAD_ID, SOS_ID, VOCAB_SIZE, encode, tokenize
from flowcorrect.corpus import GenConfig, generate_pair
from flowcorrect.model import (
    CheckpointError,
    EncodedPair,
    ModelConfig,
    ModelError,
    TrainConfig,
    TrainingDiverged,
    beam_decode,
    beam_decode_batch,
    count_params,
    grid_search,
    greedy_decode,
    init_model,
    load_checkpoint,
    pad_batch,
    save_checkpoint,
    sequence_loss,
    train_model,
)

TINY = ModelConfig(d_model=8, n_layers=1, n_heads=2, d_ff=16, dropout=0.0,
                   max_seq_len=32)


def small_pairs(n, seed=11):
    cfg = GenConfig()
    out = []
    for i in range(n):
        p = generate_pair(seed, i, 0, cfg)
        out.append(EncodedPair(encode(tokenize(p["source"])),
                               encode(tokenize(p["target"]))))
    return out


# -- configuration and counting ------------------------------------------------


def test_count_params_default_config():
    # hand-derived: 2*53*128 + 4*(4*128^2 + 2*128*512 + 2*128)
    #             + 4*(8*128^2 + 2*128*512 + 3*128) + 2*4*32
    assert count_params(ModelConfig()) == 1_851_392


def test_count_params_matches_allocated_tensors():
    for cfg in (TINY, ModelConfig(d_model=32, n_layers=2, n_heads=4, d_ff=64)):
        model = init_model(cfg, seed=0)
        assert sum(p.numel() for p in model.parameters()) == count_params(cfg)


def test_attention_terms_quadruple_when_width_doubles():
    def attention_part(d):
        cfg = ModelConfig(d_model=d, d_ff=256)
        non_attention = (
            2 * cfg.vocab_size * d
            + cfg.n_layers * (2 * d * cfg.d_ff + 2 * d)
            + cfg.n_layers * (2 * d * cfg.d_ff + 3 * d)
            + 2 * cfg.n_heads * 32
        )
        return count_params(cfg) - non_attention

    assert attention_part(128) == 4 * attention_part(64)


def test_divisibility_rejected():
    with pytest.raises(ModelError):
        ModelConfig(d_model=128, n_heads=5).validate()
    with pytest.raises(ModelError):
        init_model(ModelConfig(d_model=128, n_heads=5))


def test_init_deterministic_per_seed():
    a = init_model(TINY, seed=9)
    b = init_model(TINY, seed=9)
    c = init_model(TINY, seed=10)
    for (n, pa), (_, pb), (_, pc) in zip(
        a.named_parameters(), b.named_parameters(), c.named_parameters()
    ):
        assert torch.equal(pa, pb), n
    assert any(
        not torch.equal(pa, pc)
        for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters())
    )


# -- forward contracts ------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_model():
    m = init_model(TINY, seed=1)
    m.eval()
    return m


def test_softmax_rows_normalize(tiny_model):
    src = torch.tensor([[SOS_ID, 10, 11, EOS_ID]])
    tgt = torch.tensor([[SOS_ID, 10, 11]])
    with torch.no_grad():
        probs = torch.softmax(tiny_model(src, tgt), dim=-1)
    assert probs.shape[-1] == VOCAB_SIZE
    assert torch.allclose(probs.sum(-1), torch.ones(1, 3), atol=1e-5)


def test_causal_masking(tiny_model):
    src = torch.tensor([[SOS_ID, 10, 11, EOS_ID]])
    tgt = torch.tensor([[SOS_ID, 8, 9, 10]])
    tgt2 = tgt.clone()
    tgt2[0, 2] = 30  # perturb position 2
    with torch.no_grad():
        a = tiny_model(src, tgt)
        b = tiny_model(src, tgt2)
    assert torch.allclose(a[0, :2], b[0, :2], atol=1e-6)
    assert not torch.allclose(a[0, 2:], b[0, 2:])


def test_source_perturbation_reaches_all_positions(tiny_model):
    src = torch.tensor([[SOS_ID, 10, 11, EOS_ID]])
    src2 = src.clone()
    src2[0, 1] = 12
    tgt = torch.tensor([[SOS_ID, 8, 9, 10]])
    with torch.no_grad():
        a = tiny_model(src, tgt)
        b = tiny_model(src2, tgt)
    for t in range(tgt.shape[1]):
        assert not torch.allclose(a[0, t], b[0, t])


def test_sequence_too_long_rejected(tiny_model):
    src = torch.full((1, TINY.max_seq_len + 1), 4, dtype=torch.long)
    with pytest.raises(ModelError):
        tiny_model.encode(src)


# -- loss ---------------------------------------------------------------------------


def test_uniform_logits_loss_is_log_vocab():
    logits = torch.zeros(2, 3, VOCAB_SIZE)
    targets = torch.tensor([[4, 5, 6], [7, 8, EOS_ID]])
    assert abs(float(sequence_loss(logits, targets)) - math.log(53)) < 1e-6


def test_confident_correct_logits_loss_near_zero():
    targets = torch.tensor([[4, 5, EOS_ID]])
    logits = torch.full((1, 3, VOCAB_SIZE), -30.0)
    for i, t in enumerate(targets[0]):
        logits[0, i, t] = 30.0
    assert float(sequence_loss(logits, targets)) < 1e-6


def test_all_pad_target_rejected():
    with pytest.raises(ModelError):
        sequence_loss(torch.zeros(1, 2, VOCAB_SIZE),
                      torch.full((1, 2), PAD_ID, dtype=torch.long))


def test_loss_shape_mismatch():
    with pytest.raises(ModelError):
        sequence_loss(torch.zeros(1, 3, VOCAB_SIZE), torch.zeros(1, 2, dtype=torch.long))


def test_pad_positions_excluded():
    logits = torch.zeros(1, 3, VOCAB_SIZE)
    a = sequence_loss(logits, torch.tensor([[4, 5, PAD_ID]]))
    b = sequence_loss(logits[:, :2], torch.tensor([[4, 5]]))
    assert abs(float(a) - float(b)) < 1e-7


# -- gradients ------------------------------------------------------------------------


def _grad_probe(n_coords=40, seed=3):
    src = torch.tensor([[SOS_ID, 10, 11, 14, EOS_ID], [SOS_ID, 7, 5, EOS_ID, PAD_ID]])
    tgt = torch.tensor([[SOS_ID, 10, 14, EOS_ID, PAD_ID], [SOS_ID, 7, 5, 5, EOS_ID]])
    m32 = init_model(TINY, seed=seed)
    m32.train()
    loss = sequence_loss(m32(src, tgt[:, :-1]), tgt[:, 1:])
    m32.zero_grad()
    loss.backward()
    m64 = init_model(TINY, seed=seed).double()
    m64.train()
    p64 = list(m64.parameters())
    p32 = list(m32.parameters())

    def f() -> float:
        return float(sequence_loss(m64(src, tgt[:, :-1]), tgt[:, 1:]))

    rng = np.random.default_rng(seed)
    eps = 1e-5
    worst32 = worst64 = 0.0
    for _ in range(n_coords):
        pi = int(rng.integers(len(p64)))
        idx = tuple(int(rng.integers(s)) for s in p64[pi].shape)
        with torch.no_grad():
            orig = p64[pi][idx].item()
            p64[pi][idx] = orig + eps
            up = f()
            p64[pi][idx] = orig - eps
            dn = f()
            p64[pi][idx] = orig
        fd = (up - dn) / (2 * eps)
        rel32 = abs(fd - float(p32[pi].grad[idx])) / max(abs(fd), 1e-8)
        worst32 = max(worst32, rel32)
    # analytic 64-bit gradients against the same oracle
    loss64 = sequence_loss(m64(src, tgt[:, :-1]), tgt[:, 1:])
    m64.zero_grad()
    loss64.backward()
    rng = np.random.default_rng(seed)
    for _ in range(n_coords):
        pi = int(rng.integers(len(p64)))
        idx = tuple(int(rng.integers(s)) for s in p64[pi].shape)
        g = p64[pi].grad[idx]
        with torch.no_grad():
            orig = p64[pi][idx].item()
            p64[pi][idx] = orig + eps
            up = f()
            p64[pi][idx] = orig - eps
            dn = f()
            p64[pi][idx] = orig
        fd = (up - dn) / (2 * eps)
        worst64 = max(worst64, abs(fd - float(g)) / max(abs(fd), abs(float(g)), 1e-10))
    return worst32, worst64


def test_gradients_match_central_differences():
    assert count_params(TINY) <= 10_000
    worst32, worst64 = _grad_probe()
    assert worst32 <= 1e-3
    assert worst64 <= 1e-6


# -- training ---------------------------------------------------------------------------


def test_training_reproducible_single_thread():
    torch.set_num_threads(1)
    try:
        pairs = small_pairs(24)
        cfg = TrainConfig(learning_rate=1e-3, batch_size=8, max_steps=30,
                          eval_interval=10, patience=50, seed=5)
        curves = []
        for _ in range(2):
            model = init_model(ModelConfig(d_model=16, n_layers=1, n_heads=2,
                                           d_ff=32, dropout=0.1), seed=5)
            out = train_model(model, pairs, pairs[:6], cfg)
            curves.append(out.curves)
        assert curves[0] == curves[1]
    finally:
        torch.set_num_threads(2)


def test_training_improves_loss():
    pairs = small_pairs(32)
    model = init_model(ModelConfig(d_model=32, n_layers=1, n_heads=2, d_ff=64,
                                   dropout=0.0), seed=0)
    first = None

    def log(rec):
        nonlocal first
        if first is None:
            first = rec["val_loss"]

    out = train_model(
        model, pairs, pairs[:8],
        TrainConfig(learning_rate=1e-3, batch_size=8, max_steps=300,
                    eval_interval=50, patience=50, seed=0),
        log=log,
    )
    assert out.best_val_loss < first * 0.5


def test_divergence_guard():
    pairs = small_pairs(8)
    model = init_model(
        ModelConfig(d_model=8, n_layers=1, n_heads=2, d_ff=16, dropout=0.0),
        seed=0,
    )
    with pytest.raises(TrainingDiverged):
        train_model(
            model, pairs, pairs[:2],
            TrainConfig(learning_rate=1e18, batch_size=4, max_steps=50,
                        eval_interval=10, patience=5, seed=0, clip_norm=0.0),
        )


def test_corpus_longer_than_max_seq_len_rejected():
    pairs = small_pairs(4)
    cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=8)
    model = init_model(cfg, seed=0)
    with pytest.raises(ModelError):
        train_model(model, pairs, pairs[:1], TrainConfig(max_steps=5))


def test_grid_search_ranks_cells():
    pairs = small_pairs(16)
    space = {"d_model": [8, 16], "learning_rate": [1e-3]}
    results = grid_search(
        space, pairs, pairs[:4], budget_steps=20,
        base_model=ModelConfig(n_layers=1, n_heads=2, d_ff=16, dropout=0.0),
        base_train=TrainConfig(batch_size=8, eval_interval=10, patience=50),
    )
    assert len(results) == 2
    assert results[0]["val_loss"] <= results[1]["val_loss"]
    assert all(r["status"] == "ok" for r in results)


def test_default_grid_space_size():
    import itertools
    space = {
        "d_model": [128, 256, 512],
        "n_layers": [2, 4, 6],
        "learning_rate": [1e-4, 5e-4, 1e-3],
        "batch_size": [8, 16, 32],
    }
    assert len(list(itertools.product(*space.values()))) == 81


# -- beam search -----------------------------------------------------------------------


def test_beam_width_one_equals_greedy(tiny_model):
    torch.manual_seed(2)
    for _ in range(30):
        src = [SOS_ID] + torch.randint(4, 52, (6,)).tolist() + [EOS_ID]
        assert (
            beam_decode(tiny_model, src, beam_width=1, max_len=15)[0].tokens
            == greedy_decode(tiny_model, src, max_len=15)
        )


def test_beam_scores_non_increasing(tiny_model):
    torch.manual_seed(3)
    for _ in range(10):
        src = [SOS_ID] + torch.randint(4, 52, (5,)).tolist() + [EOS_ID]
        hyps = beam_decode(tiny_model, src, beam_width=5, max_len=12)
        scores = [h.score for h in hyps]
        assert scores == sorted(scores, reverse=True)


def _toy_model():
    """3-token vocabulary with hand-set parameters for exhaustive checks."""
    cfg = ModelConfig(vocab_size=3, d_model=4, n_layers=1, n_heads=1, d_ff=8,
                      dropout=0.0, max_seq_len=16)
    model = init_model(cfg, seed=4)
    with torch.no_grad():  # fix an arbitrary but non-degenerate output map
        model.out_proj.weight.copy_(torch.tensor(
            [[0.7, -0.2, 0.1, 0.4],
             [-0.3, 0.5, -0.6, 0.2],
             [0.1, 0.3, 0.2, -0.5]]))
    model.eval()
    return model


def _exhaustive_hypotheses(model, src, max_len):
    """Score every sequence that terminates at EOS or max_len by full
    forwards; independent of the beam/caching code path."""
    from flowcorrect.model import Hypothesis, pad_batch

    results = []

    def walk(prefix, logprob):
        with torch.no_grad():
            memory, mem_pad = model.encode(pad_batch([src]))
            logits = model.decode(pad_batch([prefix]), memory, mem_pad)
            logp = torch.log_softmax(logits[0, -1], dim=-1)
        for tok in range(model.config.vocab_size):
            lp = logprob + float(logp[tok])
            seq = prefix + [tok]
            if tok == EOS_ID or len(seq) - 1 >= max_len:
                results.append(Hypothesis(seq, lp, lp / (len(seq) - 1)))
            else:
                walk(seq, lp)

    walk([SOS_ID], 0.0)
    return sorted(results, key=lambda h: (-h.score, h.tokens))


def test_beam_equals_exhaustive_enumeration_on_toy_model():
    model = _toy_model()
    src = [SOS_ID, 0, 2]
    max_len = 4
    exhaustive = _exhaustive_hypotheses(model, src, max_len)
    wide = beam_decode(model, src, beam_width=3 ** max_len, max_len=max_len)
    assert len(wide) <= len(exhaustive)
    for got, want in zip(wide, exhaustive[: len(wide)]):
        assert got.tokens == want.tokens
        assert abs(got.score - want.score) < 1e-4


def test_beam_batch_matches_single(tiny_model):
    torch.manual_seed(5)
    sources = [
        [SOS_ID] + torch.randint(4, 52, (5,)).tolist() + [EOS_ID] for _ in range(6)
    ]
    batch = beam_decode_batch(tiny_model, sources, beam_width=3, max_len=10)
    for src, hyps in zip(sources, batch):
        solo = beam_decode(tiny_model, src, beam_width=3, max_len=10)
        assert [h.tokens for h in solo] == [h.tokens for h in hyps]


# -- checkpointing -----------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path, step=7, best_val_loss=0.5)
    model2, header = load_checkpoint(path)
    assert header["step"] == 7
    src = torch.tensor([[SOS_ID, 10, EOS_ID]])
    tgt = torch.tensor([[SOS_ID, 10]])
    with torch.no_grad():
        assert torch.equal(tiny_model(src, tgt), model2(src, tgt))


def test_checkpoint_config_mismatch(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(path, expected_config=ModelConfig())


def test_checkpoint_truncation_names_tensor(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-20])
    with pytest.raises(CheckpointError, match="truncated tensor payload"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
