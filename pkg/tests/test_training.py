import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL, small_dataset
from relisten.embed import EmbeddingTable
from relisten.model import Featurizer, SessionModel
from relisten.training import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    expand_prefixes,
    grad_check,
    sample_negatives,
    sample_negatives_batch,
    sampling_weights,
    session_loss,
    song_loss,
    train,
)


class TestLosses:
    def test_equal_scores_give_ln2_per_pair(self):
        table = EmbeddingTable(torch.ones(6, 3, dtype=torch.float64))
        u = torch.tensor([0.2, -0.1, 0.4], dtype=torch.float64)
        loss = song_loss(u, [0, 1, 2], [3, 4, 5], table)
        assert float(loss) == pytest.approx(9 * math.log(2), abs=1e-12)

    def test_single_pair(self):
        M = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        loss = song_loss(torch.tensor([2.0, 0.0], dtype=torch.float64), [0], [1], M)
        assert float(loss) == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_song_loss_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        M = torch.from_numpy(rng.normal(size=(10, 4)) * 5)
        u = torch.from_numpy(rng.normal(size=4) * 5)
        perm = rng.permutation(10)
        assert float(song_loss(u, perm[:3], perm[3:6], M)) >= 0

    def test_negative_count_must_match(self):
        with pytest.raises(ValueError):
            song_loss(torch.zeros(2), [0, 1], [2], torch.zeros(3, 2))

    def test_session_loss(self):
        u = torch.tensor([1.0, 2.0], dtype=torch.float64)
        s = torch.tensor([3.0, 0.5], dtype=torch.float64)
        assert float(session_loss(u, s)) == pytest.approx(1 - 4.0)
        assert float(session_loss(u, s, clamp=True)) == 0.0


class TestSampling:
    def test_popularity_weights(self):
        assert sampling_weights(np.array([1, 4]), "popularity", 0.5).tolist() == [1.0, 2.0]
        assert sampling_weights(np.array([1, 4]), "uniform").tolist() == [1.0, 1.0]

    def test_too_small_catalog(self):
        with pytest.raises(ValueError):
            sample_negatives([0, 1], np.ones(4), "uniform", 0.5, np.random.default_rng(0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["uniform", "popularity"]))
    def test_disjoint_and_distinct(self, seed, mode):
        rng = np.random.default_rng(seed)
        pop = rng.integers(1, 50, size=40)
        pos = rng.choice(40, size=int(rng.integers(1, 10)), replace=False)
        neg = sample_negatives(pos, pop, mode, 0.5, rng)
        assert len(neg) == len(pos) == len(set(neg.tolist()))
        assert not set(neg.tolist()) & set(pos.tolist())

    def test_batch_never_hits_positives(self):
        rng = np.random.default_rng(1)
        V, K = 30, 6
        pos = np.stack([rng.choice(V, size=K, replace=False) for _ in range(10_000)])
        mask = np.arange(K)[None, :] < rng.integers(1, K + 1, size=(10_000, 1))
        neg = sample_negatives_batch(pos, mask, np.ones(V), rng)
        for p, n, m in zip(pos, neg, mask):
            picked = set(n[m].tolist())
            assert len(picked) == m.sum()
            assert not picked & set(p[m].tolist())
        assert np.all(neg[~mask] == 0)

    def test_batch_seeded(self):
        pos = np.array([[0, 1], [2, 3]])
        mask = np.ones_like(pos, dtype=bool)
        a = sample_negatives_batch(pos, mask, np.ones(20), np.random.default_rng(5))
        b = sample_negatives_batch(pos, mask, np.ones(20), np.random.default_rng(5))
        assert np.array_equal(a, b)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = {"x": torch.tensor([1.0, -1.0], dtype=torch.float64)}
        g = {"x": torch.tensor([0.5, -3.0], dtype=torch.float64)}
        adam_step(p, g, AdamState(), lr=0.1)
        # bias-corrected first step is lr * sign(g) up to eps
        assert p["x"].tolist() == pytest.approx([0.9, -0.9], abs=1e-6)

    def test_lr_zero_leaves_params(self):
        p = {"x": torch.tensor([1.0], dtype=torch.float64)}
        adam_step(p, {"x": torch.tensor([2.0], dtype=torch.float64)}, AdamState(), lr=0.0)
        assert p["x"].tolist() == [1.0]

    def test_nan_gradient_rejected(self):
        p = {"x": torch.zeros(1, dtype=torch.float64)}
        with pytest.raises(FloatingPointError):
            adam_step(p, {"x": torch.tensor([float("nan")], dtype=torch.float64)}, AdamState(), lr=0.1)

    def test_matches_torch_adam(self):
        rng = np.random.default_rng(0)
        x = torch.from_numpy(rng.normal(size=5))
        ref = x.clone().requires_grad_(True)
        opt = torch.optim.Adam([ref], lr=0.01)
        state, p = AdamState(), {"x": x.clone()}
        for _ in range(20):
            g = torch.from_numpy(rng.normal(size=5))
            adam_step(p, {"x": g}, state, lr=0.01)
            ref.grad = g.clone()
            opt.step()
        assert torch.allclose(p["x"], ref.detach(), atol=1e-12)


def test_expand_prefixes(small):
    seq = small.splits.train[0]
    ex = expand_prefixes(seq)
    assert [len(e.prefix) for e in ex] == list(range(1, seq.L))
    assert ex[-1].positive == seq.history[-1].songs
    assert len(expand_prefixes(seq, full_window=True)) == seq.L


class TestGradients:
    @pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
    def test_grad_check_small(self, lam):
        cfg = SMALL.replace(lam=lam)
        ds = small_dataset(cfg)
        batch = Featurizer.for_dataset(ds).featurize(ds.splits.train[:3])
        model = SessionModel.initialize(cfg, ds.n_songs)
        neg = sample_negatives_batch(batch.songs[:, 1:-1], batch.mask[:, 1:-1], np.ones(ds.n_songs), np.random.default_rng(0))
        gc = grad_check(model, batch, neg, TrainConfig.from_run_config(cfg))
        assert gc.max_rel_error < 1e-4, gc.per_tensor

    def test_frozen_songs_get_no_gradient(self, small):
        model = SessionModel.initialize(SMALL, small.n_songs)
        model.trainable_songs = False
        assert "songs" not in model.trainable_names


class TestTrain:
    def test_deterministic(self, small):
        a = train(small, SMALL)
        b = train(small, SMALL)
        assert a.trace == b.trace
        for k in a.model.params:
            assert torch.equal(a.model.params[k], b.model.params[k])

    def test_lr_zero(self, small):
        model = SessionModel.initialize(SMALL, small.n_songs)
        before = model.copy()
        train(small, SMALL.replace(lr=0.0), model=model)
        for k in model.params:
            assert torch.equal(model.params[k], before.params[k])

    def test_song_loss_halves_on_tiny_set(self):
        cfg = SMALL.replace(epochs=200, lam=1.0, batch_size=50, lr=0.02, d=16)
        ds = small_dataset(cfg)
        assert len(ds.splits.train) <= 50
        res = train(ds, cfg)
        losses = [r["loss"] for r in res.trace if r["split"] == "train"]
        assert losses[-1] <= 0.5 * losses[0]

    def test_lambda_changes_result(self, small):
        a = train(small, SMALL.replace(lam=1.0))
        b = train(small, SMALL.replace(lam=0.0))
        assert not torch.equal(a.model.params["block0.wq"], b.model.params["block0.wq"])

    def test_resume_equals_straight_run(self, small):
        straight = train(small, SMALL.replace(epochs=4))
        first = train(small, SMALL.replace(epochs=2))
        rest = train(small, SMALL.replace(epochs=2), model=first.final_model, adam=first.adam, start_epoch=2)
        assert rest.trace == straight.trace[len(first.trace):]
        for k in straight.model.params:
            assert torch.equal(straight.final_model.params[k], rest.final_model.params[k])

    def test_early_stopping_returns_best(self, small):
        res = train(small, SMALL.replace(epochs=30, patience=2))
        val = [r["ndcg"] for r in res.trace if r["split"] == "val"]
        assert res.epochs_run <= 30
        assert val[res.best_epoch - 1] == max(val)

    def test_divergence_reports_last_good(self, small):
        with pytest.raises(TrainingDiverged) as info:
            train(small, SMALL.replace(lr=1e200, lam=0.0, epochs=50))
        assert info.value.last_good is not None

    def test_log_file(self, small, tmp_path):
        train(small, SMALL, log_path=tmp_path / "log.txt")
        lines = (tmp_path / "log.txt").read_text().splitlines()
        assert sum(line.startswith("epoch=") and "split=train" in line for line in lines) == SMALL.epochs
