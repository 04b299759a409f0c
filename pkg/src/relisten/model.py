"""The full recommender: featurization of session sequences and the forward pass.

A :class:`Featurizer` turns :class:`~relisten.dataio.SessionSequence` objects into
padded constant arrays (song ids, BL and SPR weights, Top-BL sets). The
:class:`SessionModel` holds every trainable tensor and maps those arrays to user
embeddings. Position ``p`` of a featurized sequence predicts session ``p + 1``:
positions ``0 .. L-2`` target later history sessions, position ``L-1`` the
sequence's own target.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import torch

from relisten.actr import (
    CooccurrenceStats,
    ListenHistoryIndex,
    base_level_session,
    spreading,
    top_bl_songs,
)
from relisten.config import RunConfig
from relisten.dataio import Session, SessionSequence
from relisten.embed import DTYPE, EmbeddingTable, init_random, long_term_batch, session_embeddings
from relisten.seqmodel import encode_sequence, fuse, init_gate, init_transformer


@dataclass
class SequenceBatch:
    users: list[str]
    songs: np.ndarray  # (n, l+1, K) song indices, 0-padded
    mask: np.ndarray  # (n, l+1, K) bool
    bl: np.ndarray  # (n, l+1, K)
    spr: np.ndarray  # (n, l+1, K)
    top_idx: np.ndarray  # (n, l, n_top)
    top_w: np.ndarray  # (n, l, n_top)

    def __len__(self) -> int:
        return len(self.users)

    @property
    def length(self) -> int:
        """History length l."""
        return self.top_idx.shape[1]

    def take(self, idx) -> "SequenceBatch":
        idx = np.asarray(idx)
        return SequenceBatch(
            [self.users[i] for i in idx],
            *(getattr(self, f.name)[idx] for f in fields(self) if f.name != "users"),
        )


class Featurizer:
    """Computes (and caches) the parameter-free ACT-R inputs of sequences."""

    def __init__(self, history: ListenHistoryIndex, stats: CooccurrenceStats, config: RunConfig):
        self.history = history
        self.stats = stats
        self.config = config
        self._sessions: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        self._top: dict[tuple[str, int], list[tuple[int, float]]] = {}

    @classmethod
    def for_dataset(cls, dataset) -> "Featurizer":
        return cls(dataset.history, dataset.cooccurrence, dataset.config)

    def session(self, user: str, s: Session) -> tuple[np.ndarray, np.ndarray]:
        key = (user, s.start_time, s.songs)
        if key not in self._sessions:
            cfg = self.config
            bl = base_level_session(s, user, s.start_time, cfg.alpha, self.history, cfg.time_scale)
            self._sessions[key] = (bl, spreading(s, self.stats))
        return self._sessions[key]

    def top(self, user: str, t_ref: int) -> list[tuple[int, float]]:
        key = (user, t_ref)
        if key not in self._top:
            cfg = self.config
            self._top[key] = top_bl_songs(user, t_ref, cfg.alpha, self.history, cfg.n_top, cfg.time_scale)
        return self._top[key]

    def featurize(self, sequences: Sequence[SessionSequence]) -> SequenceBatch:
        if not sequences:
            raise ValueError("no sequences to featurize")
        l = sequences[0].L
        if any(seq.L != l for seq in sequences):
            raise ValueError("all sequences of a batch must share one history length")
        if l == 0:
            raise ValueError("empty history")
        n, K, n_top = len(sequences), self.config.k, self.config.n_top
        K = max(K, max(len(s) for seq in sequences for s in seq.history + (seq.target,)))
        songs = np.zeros((n, l + 1, K), dtype=np.int64)
        mask = np.zeros((n, l + 1, K), dtype=bool)
        bl = np.zeros((n, l + 1, K))
        spr = np.zeros((n, l + 1, K))
        top_idx = np.zeros((n, l, n_top), dtype=np.int64)
        top_w = np.zeros((n, l, n_top))
        for i, seq in enumerate(sequences):
            chain = seq.history + (seq.target,)
            for p, s in enumerate(chain):
                k = len(s)
                songs[i, p, :k] = s.songs
                mask[i, p, :k] = True
                bl[i, p, :k], spr[i, p, :k] = self.session(seq.user, s)
                if p > 0:
                    top = self.top(seq.user, s.start_time)
                    if top:
                        idx, w = zip(*top)
                        top_idx[i, p - 1, : len(idx)] = idx
                        top_w[i, p - 1, : len(w)] = w
        return SequenceBatch([seq.user for seq in sequences], songs, mask, bl, spr, top_idx, top_w)


@dataclass
class UserState:
    user: torch.Tensor  # (n, l, d) fused user embedding per prefix
    beta: torch.Tensor  # (n, l)
    sessions: torch.Tensor  # (n, l+1, d) session embeddings incl. target


class SessionModel:
    """All trainable tensors of the recommender, keyed by name."""

    def __init__(self, params: dict[str, torch.Tensor], config: RunConfig, trainable_songs: bool = True):
        self.params = params
        self.config = config
        self.trainable_songs = trainable_songs

    @classmethod
    def initialize(cls, config: RunConfig, n_songs: int, table: EmbeddingTable | None = None, seed: int | None = None):
        seed = config.seed if seed is None else seed
        if table is None:
            table = init_random(n_songs, config.d, seed)
        elif table.d != config.d or len(table) != n_songs:
            raise ValueError("embedding table does not match catalog size / d")
        rng = np.random.default_rng([seed, 0x5E9])
        params = {"songs": table.matrix.clone().to(DTYPE)}
        params.update(init_transformer(config.d, config.L, config.B, config.H, rng))
        params["mixer"] = torch.zeros(3, dtype=DTYPE)
        params.update(init_gate(config.d))
        return cls(params, config, trainable_songs=table.trainable)

    @property
    def trainable_names(self) -> list[str]:
        return [k for k in self.params if k != "songs" or self.trainable_songs]

    @property
    def table(self) -> EmbeddingTable:
        return EmbeddingTable(self.params["songs"], self.trainable_songs)

    @property
    def n_songs(self) -> int:
        return self.params["songs"].shape[0]

    def mixer_weights(self) -> np.ndarray:
        return torch.softmax(self.params["mixer"], -1).detach().numpy()

    def copy(self) -> "SessionModel":
        return SessionModel({k: v.detach().clone() for k, v in self.params.items()}, self.config, self.trainable_songs)

    def forward(self, batch: SequenceBatch) -> UserState:
        p = self.params
        l = batch.length
        sess, _ = session_embeddings(p["songs"], p["mixer"], batch.songs, batch.mask, batch.bl, batch.spr)
        short = encode_sequence(sess[:, :l], p, self.config.residual)
        long = long_term_batch(p["songs"], batch.top_idx, batch.top_w)
        user, beta = fuse(short, long, p["gate.w"], p["gate.b"])
        return UserState(user, beta, sess)

    def user_embedding(self, batch: SequenceBatch) -> torch.Tensor:
        """Fused embedding after the whole history, (n, d)."""
        return self.forward(batch).user[:, -1]

    def scores(self, batch: SequenceBatch) -> np.ndarray:
        with torch.no_grad():
            return (self.user_embedding(batch) @ self.params["songs"].T).numpy()
