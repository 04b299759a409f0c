import numpy as np
import pytest
import torch

from conftest import SMALL
from relisten.actr import actr_scores, base_level_session, spreading, top_bl_songs
from relisten.dataset import load_bundle, save_bundle
from relisten.embed import ComponentMixer, EmbeddingTable, long_term_embedding, session_embedding
from relisten.model import Featurizer, SessionModel
from relisten.seqmodel import encode_sequence, fuse


def test_forward_matches_unbatched_composition(small):
    """Batched forward == per-session embedding -> encoder -> fusion, done by hand."""
    model = SessionModel.initialize(SMALL, small.n_songs)
    p = model.params
    p["mixer"] += torch.tensor([0.3, -0.2, 0.1], dtype=torch.float64)
    p["gate.w"] += 0.05
    seqs = small.splits.train[:3]
    state = model.forward(Featurizer.for_dataset(small).featurize(seqs))
    table = EmbeddingTable(p["songs"])
    for i, seq in enumerate(seqs):
        sess = []
        for s in seq.history:
            sc = actr_scores(s, seq.user, small.history, small.cooccurrence, p["songs"].numpy(), SMALL.alpha)
            sess.append(session_embedding(s.songs, sc, ComponentMixer(p["mixer"]), table))
        enc = encode_sequence(torch.stack(sess), p)
        chain = seq.history + (seq.target,)
        for pos in range(seq.L):
            long = long_term_embedding(seq.user, chain[pos + 1].start_time, table, small.history, SMALL.alpha, SMALL.n_top)
            user, _ = fuse(enc[pos], long, p["gate.w"], p["gate.b"])
            assert torch.allclose(state.user[i, pos], user, atol=1e-12)


def test_featurizer_components(small):
    seq = small.splits.train[0]
    batch = Featurizer.for_dataset(small).featurize([seq])
    s = seq.history[1]
    k = len(s)
    assert batch.songs[0, 1, :k].tolist() == list(s.songs)
    assert batch.mask[0, 1].sum() == k
    assert np.allclose(batch.bl[0, 1, :k], base_level_session(s, seq.user, s.start_time, SMALL.alpha, small.history))
    assert np.allclose(batch.spr[0, 1, :k], spreading(s, small.cooccurrence))
    top = top_bl_songs(seq.user, seq.history[1].start_time, SMALL.alpha, small.history, SMALL.n_top)
    assert batch.top_idx[0, 0, : len(top)].tolist() == [t for t, _ in top]


def test_mixed_lengths_rejected(small):
    a = small.splits.train[0]
    from relisten.dataio import SessionSequence

    b = SessionSequence(a.user, a.history[1:], a.target)
    with pytest.raises(ValueError):
        Featurizer.for_dataset(small).featurize([a, b])


def test_initial_gate_and_mixer(small):
    model = SessionModel.initialize(SMALL, small.n_songs)
    assert np.allclose(model.mixer_weights(), 1 / 3)
    state = model.forward(Featurizer.for_dataset(small).featurize(small.splits.train[:2]))
    assert torch.all(state.beta == 0.5)


def test_pretrained_table_frozen(small):
    table = EmbeddingTable(torch.zeros(small.n_songs, SMALL.d, dtype=torch.float64), trainable=False)
    model = SessionModel.initialize(SMALL, small.n_songs, table)
    assert "songs" not in model.trainable_names
    with pytest.raises(ValueError):
        SessionModel.initialize(SMALL, small.n_songs + 1, table)


def test_bundle_round_trip(small, tmp_path):
    path = save_bundle(small, tmp_path)
    back = load_bundle(path)
    assert back.catalog_hash == small.catalog_hash
    assert back.summary() == small.summary()
    assert back.splits.test == small.splits.test
    assert back.config == small.config
    assert save_bundle(back, tmp_path / "again").read_bytes() == path.read_bytes()
