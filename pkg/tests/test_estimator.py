import pytest
import torch
from sklearn.base import clone

from flowcorrect.corpus import GenConfig, generate_pair
from flowcorrect.estimator import (
    FlowsheetAutocorrector,
    check_flowsheet_strings,
    check_pair_lengths,
)


def tiny_pairs(n, seed=21):
    cfg = GenConfig(patterns_min=2, patterns_max=3)
    xs, ys = [], []
    for i in range(n):
        p = generate_pair(seed, i, 0, cfg)
        xs.append(p["source"])
        ys.append(p["target"])
    return xs, ys


def test_sklearn_param_plumbing():
    est = FlowsheetAutocorrector(d_model=32, max_steps=5)
    params = est.get_params()
    assert params["d_model"] == 32
    est2 = clone(est)
    assert est2.get_params() == params
    est2.set_params(n_layers=1)
    assert est2.n_layers == 1


def test_input_validation():
    with pytest.raises(ValueError, match="sequence of strings"):
        check_flowsheet_strings("(raw)(prod)")
    with pytest.raises(ValueError, match="empty"):
        check_flowsheet_strings([])
    with pytest.raises(ValueError, match="expected str"):
        check_flowsheet_strings([42])
    with pytest.raises(ValueError, match="outside the flowsheet vocabulary"):
        check_flowsheet_strings(["(raw)(bogus)(prod)"])
    with pytest.raises(ValueError, match="over the limit"):
        check_flowsheet_strings(["(raw)" * 300], max_seq_len=256)
    with pytest.raises(ValueError, match="different lengths"):
        check_pair_lengths(["a"], ["a", "b"])


def test_predict_before_fit_raises():
    with pytest.raises(RuntimeError, match="not fitted"):
        FlowsheetAutocorrector().predict(["(raw)(prod)"])


@pytest.fixture(scope="module")
def fitted():
    xs, ys = tiny_pairs(24)
    est = FlowsheetAutocorrector(
        d_model=48, n_layers=2, n_heads=4, d_ff=96, dropout=0.0,
        learning_rate=1e-3, batch_size=12, max_steps=700, eval_interval=100,
        patience=50, seed=0,
    )
    # memorization fixture: validate on the training pairs themselves
    est.fit(xs, ys, validation_pairs=(xs, ys))
    return est, xs, ys


def test_fit_memorizes_and_predicts(fitted):
    est, xs, ys = fitted
    score = est.score(xs, ys)
    assert score >= 0.75  # memorization of 24 pairs
    preds = est.predict(xs[:4])
    assert all(isinstance(p, str) for p in preds)


def test_predict_topk_sorted(fitted):
    est, xs, _ = fitted
    for hyps in est.predict_topk(xs[:3], k=4):
        scores = [s for _, s in hyps]
        assert scores == sorted(scores, reverse=True)
        assert len(hyps) <= 4


def test_save_load_round_trip(tmp_path, fitted):
    est, xs, ys = fitted
    path = tmp_path / "est.ckpt"
    est.save(path)
    loaded = FlowsheetAutocorrector.load(path)
    assert loaded.predict(xs[:5]) == est.predict(xs[:5])
    assert loaded.d_model == est.d_model


def test_fit_with_explicit_validation_pairs():
    xs, ys = tiny_pairs(12)
    vx, vy = tiny_pairs(4, seed=22)
    est = FlowsheetAutocorrector(
        d_model=16, n_layers=1, n_heads=2, d_ff=32, max_steps=20,
        eval_interval=10, patience=50, seed=1,
    )
    est.fit(xs, ys, validation_pairs=(vx, vy))
    assert est.best_val_loss_ < float("inf")
    assert est.n_steps_ == 20
