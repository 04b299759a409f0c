"""Dot-product scoring, deterministic top-K and the simple baselines."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch

from relisten.actr import CooccurrenceStats, ListenHistoryIndex, base_level_all, softmax
from relisten.dataio import SessionSequence, SongCatalog
from relisten.embed import EmbeddingTable


@dataclass(frozen=True)
class RecommendationList:
    user: str
    songs: tuple[int, ...]
    scores: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(set(self.songs)) != len(self.songs):
            raise ValueError("recommended songs must be distinct")
        if len(self.songs) != len(self.scores):
            raise ValueError("one score per song")
        if any(a < b for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError("scores must be non-increasing")


def score_all(user_embedding, table: EmbeddingTable | np.ndarray) -> np.ndarray:
    m = table.matrix if isinstance(table, EmbeddingTable) else table
    with torch.no_grad():
        return np.asarray(torch.as_tensor(m) @ torch.as_tensor(user_embedding, dtype=torch.as_tensor(m).dtype))


def top_k_indices(scores: np.ndarray, K: int) -> np.ndarray:
    """Indices of the K best scores along the last axis; ties by ascending index."""
    scores = np.asarray(scores)
    if scores.shape[-1] < K:
        raise ValueError(f"cannot pick top-{K} from {scores.shape[-1]} songs")
    return np.argsort(-scores, axis=-1, kind="stable")[..., :K]


def top_k(scores, K: int, user: str = "") -> RecommendationList:
    scores = np.asarray(scores, dtype=np.float64)
    idx = top_k_indices(scores, K)
    return RecommendationList(user, tuple(idx.tolist()), tuple(scores[idx].tolist()))


def recommend(model, sequence: SessionSequence, K: int, featurizer) -> RecommendationList:
    """Top-K songs for the session following ``sequence.history``."""
    if not sequence.history:
        raise ValueError("cannot recommend from an empty history")
    batch = featurizer.featurize([sequence])
    return top_k(model.scores(batch)[0], K, sequence.user)


class BaselineKind(enum.Enum):
    GTOP = "g-top"
    PTOP = "p-top"
    ACTR_REPEAT = "actr-repeat"


def baseline_recommend(
    kind: BaselineKind | str,
    user: str,
    t_ref: float,
    K: int,
    catalog: SongCatalog,
    history: ListenHistoryIndex,
    stats: CooccurrenceStats | None = None,
    context: Sequence[int] = (),
    alpha: float = 0.5,
    time_scale: float = 3600.0,
) -> RecommendationList:
    """G-Top, P-Top or ACT-R-Repeat list for ``user`` at ``t_ref``.

    Personal lists too short for K are padded with G-Top songs (score 0).
    ACT-R-Repeat sums the softmax-normalized raw BL and raw SPR of every
    previously heard song; SPR is taken against the ``context`` session.
    """
    kind = BaselineKind(kind)
    gtop = top_k(catalog.listen_count.astype(np.float64), len(catalog), user)
    if kind is BaselineKind.GTOP:
        return RecommendationList(user, gtop.songs[:K], gtop.scores[:K])
    if kind is BaselineKind.PTOP:
        counts = history.counts_before(user, t_ref)
        songs = np.array(sorted(counts), dtype=np.int64)
        values = np.array([counts[s] for s in songs.tolist()], dtype=np.float64)
    else:
        songs, bl = base_level_all(user, t_ref, alpha, history, time_scale)
        if songs.size and stats is not None:
            spr = _context_spreading(songs, context, stats)
        else:
            spr = np.zeros(songs.size)
        values = softmax(bl) + softmax(spr) if songs.size else np.empty(0)
    order = np.lexsort((songs, -values))[:K]
    out_songs = songs[order].tolist()
    out_scores = values[order].tolist()
    for s in gtop.songs:
        if len(out_songs) >= K:
            break
        if s not in out_songs:
            out_songs.append(s)
            out_scores.append(0.0)
    return RecommendationList(user, tuple(out_songs), tuple(out_scores))


def _context_spreading(candidates: np.ndarray, context: Sequence[int], stats: CooccurrenceStats) -> np.ndarray:
    ctx = np.asarray([c for c in context if c < stats.n_songs], dtype=np.int64)
    known = candidates < stats.n_songs
    out = np.zeros(candidates.size)
    if ctx.size and known.any():
        block = stats.C[candidates[known]][:, ctx].toarray()
        # a candidate inside the context does not spread to itself
        block[candidates[known][:, None] == ctx[None, :]] = 0.0
        out[known] = block.sum(axis=1)
    return out


class Recommender(Protocol):
    def recommend_many(self, sequences: Sequence[SessionSequence], K: int) -> list[RecommendationList]: ...


class ModelRecommender:
    def __init__(self, model, featurizer):
        self.model = model
        self.featurizer = featurizer

    def recommend_many(self, sequences, K):
        out: list[RecommendationList | None] = [None] * len(sequences)
        by_len: dict[int, list[int]] = {}
        for i, seq in enumerate(sequences):
            by_len.setdefault(seq.L, []).append(i)
        for idx in by_len.values():
            batch = self.featurizer.featurize([sequences[i] for i in idx])
            scores = self.model.scores(batch)
            for row, i in zip(scores, idx):
                out[i] = top_k(row, K, sequences[i].user)
        return out


class BaselineRecommender:
    def __init__(self, kind: BaselineKind | str, dataset):
        self.kind = BaselineKind(kind)
        self.dataset = dataset

    def recommend_many(self, sequences, K):
        ds = self.dataset
        cfg = ds.config
        stats = ds.cooccurrence if self.kind is BaselineKind.ACTR_REPEAT else None
        return [
            baseline_recommend(
                self.kind, seq.user, seq.target.start_time, K, ds.catalog, ds.history, stats,
                context=seq.history[-1].songs, alpha=cfg.alpha, time_scale=cfg.time_scale,
            )
            for seq in sequences
        ]


class OracleRecommender:
    """Recommends the ground truth first; an upper bound for sanity checks."""

    def __init__(self, n_songs: int):
        self.n_songs = n_songs

    def recommend_many(self, sequences, K):
        out = []
        for seq in sequences:
            scores = np.zeros(self.n_songs)
            scores[list(seq.target.songs)] = 1.0
            out.append(top_k(scores, K, seq.user))
        return out
