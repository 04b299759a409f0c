"""ACT-R declarative-memory components: base level, spreading, partial matching.

All functions here are pure numpy over immutable inputs. Timestamps are integer
seconds; base-level decay is evaluated in ``time_scale``-second units (hours by
default, see :class:`relisten.config.RunConfig`).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from relisten.dataio import ListeningEvent, Session, SongCatalog, group_by_user

HOUR = 3600.0


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x
    z = np.exp(x - x.max())
    return z / z.sum()


class ListenHistoryIndex:
    """Per-user listen timestamps, with identical (song, timestamp) pairs collapsed."""

    def __init__(self, per_user: dict[str, tuple[np.ndarray, np.ndarray]]):
        # user -> (times, songs), both sorted by (time, song)
        self._per_user = per_user
        self._by_song: dict[str, dict[int, np.ndarray]] = {}

    @classmethod
    def from_events(cls, events: Iterable[ListeningEvent], catalog: SongCatalog) -> "ListenHistoryIndex":
        per_user = {}
        for user, evs in group_by_user(events).items():
            pairs = np.array(
                [(e.timestamp, catalog.index(e.song_id)) for e in evs], dtype=np.int64
            ).reshape(-1, 2)
            pairs = np.unique(pairs, axis=0)  # sorts by time then song, drops duplicates
            times, songs = pairs[:, 0].copy(), pairs[:, 1].copy()
            times.setflags(write=False)
            songs.setflags(write=False)
            per_user[user] = (times, songs)
        return cls(per_user)

    @property
    def users(self) -> list[str]:
        return list(self._per_user)

    def listens(self, user: str, song: int) -> np.ndarray:
        """Sorted listen timestamps of ``song`` by ``user``."""
        if user not in self._by_song:
            times, songs = self._per_user.get(user, (np.empty(0, np.int64),) * 2)
            order = np.argsort(songs, kind="stable")
            s, t = songs[order], times[order]
            cuts = np.flatnonzero(np.diff(s)) + 1
            self._by_song[user] = {
                int(chunk_s[0]): chunk_t for chunk_s, chunk_t in zip(np.split(s, cuts), np.split(t, cuts)) if len(chunk_s)
            }
        return self._by_song[user].get(int(song), np.empty(0, np.int64))

    def before(self, user: str, t_ref: float) -> tuple[np.ndarray, np.ndarray]:
        """(times, songs) of every listen by ``user`` strictly before ``t_ref``."""
        times, songs = self._per_user.get(user, (np.empty(0, np.int64),) * 2)
        cut = np.searchsorted(times, t_ref, side="left")
        return times[:cut], songs[:cut]

    def heard_before(self, user: str, t_ref: float) -> set[int]:
        return set(self.before(user, t_ref)[1].tolist())

    def counts_before(self, user: str, t_ref: float) -> dict[int, int]:
        songs, counts = np.unique(self.before(user, t_ref)[1], return_counts=True)
        return dict(zip(songs.tolist(), counts.tolist()))


def _check_alpha(alpha: float) -> None:
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")


def base_level_raw(
    user: str, song: int, t_ref: float, alpha: float, history: ListenHistoryIndex, time_scale: float = HOUR
) -> float:
    """Power-law decayed sum over the user's listens of ``song`` before ``t_ref``."""
    _check_alpha(alpha)
    t = history.listens(user, song)
    t = t[t < t_ref]
    if t.size == 0:
        return 0.0
    return float(np.sum(((t_ref - t) / time_scale) ** -alpha))


def base_level_all(
    user: str, t_ref: float, alpha: float, history: ListenHistoryIndex, time_scale: float = HOUR
) -> tuple[np.ndarray, np.ndarray]:
    """Raw BL of every song the user heard before ``t_ref``: (songs, values)."""
    _check_alpha(alpha)
    times, songs = history.before(user, t_ref)
    if times.size == 0:
        return np.empty(0, np.int64), np.empty(0)
    contrib = ((t_ref - times) / time_scale) ** -alpha
    uniq, inv = np.unique(songs, return_inverse=True)
    return uniq, np.bincount(inv, weights=contrib, minlength=uniq.size)


def base_level_many(
    user: str, songs: Sequence[int], t_ref: float, alpha: float, history: ListenHistoryIndex,
    time_scale: float = HOUR,
) -> np.ndarray:
    known, values = base_level_all(user, t_ref, alpha, history, time_scale)
    lookup = dict(zip(known.tolist(), values.tolist()))
    return np.array([lookup.get(int(s), 0.0) for s in songs], dtype=np.float64)


def base_level_session(
    session: Session | Sequence[int], user: str, t_ref: float, alpha: float, history: ListenHistoryIndex,
    time_scale: float = HOUR,
) -> np.ndarray:
    songs = session.songs if isinstance(session, Session) else session
    return softmax(base_level_many(user, songs, t_ref, alpha, history, time_scale))


@dataclass(frozen=True)
class CooccurrenceStats:
    """Session co-listen counts ``F`` and ``C = D^-1/2 F D^-1/2`` (both CSR)."""

    F: sp.csr_matrix
    C: sp.csr_matrix

    @property
    def n_songs(self) -> int:
        return self.F.shape[0]

    def submatrix(self, songs: Sequence[int]) -> np.ndarray:
        """Dense ``C[songs][:, songs]``; songs outside the matrix give zero rows."""
        idx = np.asarray(songs, dtype=np.int64)
        known = idx < self.n_songs
        out = np.zeros((idx.size, idx.size))
        if known.any():
            k = idx[known]
            out[np.ix_(known, known)] = self.C[k][:, k].toarray()
        return out


def build_cooccurrence(sessions: Iterable[Session | Sequence[int]], n_songs: int) -> CooccurrenceStats:
    """Count unordered song pairs once per session, then symmetric-normalize."""
    rows, cols = [], []
    for s in sessions:
        songs = np.unique(np.asarray(s.songs if isinstance(s, Session) else s, dtype=np.int64))
        if songs.size < 2:
            continue
        r, c = np.meshgrid(songs, songs, indexing="ij")
        off = r != c
        rows.append(r[off])
        cols.append(c[off])
    if rows:
        r, c = np.concatenate(rows), np.concatenate(cols)
    else:
        r = c = np.empty(0, np.int64)
    F = sp.coo_matrix((np.ones(r.size), (r, c)), shape=(n_songs, n_songs)).tocsr()
    F.sum_duplicates()
    degree = np.asarray(F.sum(axis=1)).ravel()
    inv_sqrt = np.zeros(n_songs)
    nz = degree > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(degree[nz])
    D = sp.diags(inv_sqrt)
    C = (D @ F @ D).tocsr()
    return CooccurrenceStats(F=F, C=C)


def spreading_raw(session: Session | Sequence[int], stats: CooccurrenceStats) -> np.ndarray:
    songs = session.songs if isinstance(session, Session) else session
    sub = stats.submatrix(songs)
    np.fill_diagonal(sub, 0.0)
    return sub.sum(axis=1)


def spreading(session: Session | Sequence[int], stats: CooccurrenceStats) -> np.ndarray:
    return softmax(spreading_raw(session, stats))


def partial_matching_raw(session: Session | Sequence[int], song_embeddings: np.ndarray) -> np.ndarray:
    songs = session.songs if isinstance(session, Session) else session
    m = np.asarray(song_embeddings)[np.asarray(songs, dtype=np.int64)]
    gram = m @ m.T
    return gram.sum(axis=1) - np.diag(gram)


def partial_matching(session: Session | Sequence[int], song_embeddings: np.ndarray) -> np.ndarray:
    return softmax(partial_matching_raw(session, song_embeddings))


def top_bl_songs(
    user: str, t_ref: float, alpha: float, history: ListenHistoryIndex, n: int = 20, time_scale: float = HOUR
) -> list[tuple[int, float]]:
    """The ``n`` previously heard songs with highest raw BL, softmax-weighted.

    Ties in raw BL are broken by ascending song index. Returns ``[]`` for a user
    with no listens before ``t_ref``.
    """
    songs, values = base_level_all(user, t_ref, alpha, history, time_scale)
    if songs.size == 0:
        return []
    order = np.lexsort((songs, -values))[:n]
    weights = softmax(values[order])
    return list(zip(songs[order].tolist(), weights.tolist()))


@dataclass(frozen=True)
class ActrScores:
    songs: tuple[int, ...]
    bl: np.ndarray
    spr: np.ndarray
    pm: np.ndarray
    reference_time: float


def actr_scores(
    session: Session,
    user: str,
    history: ListenHistoryIndex,
    stats: CooccurrenceStats,
    song_embeddings: np.ndarray,
    alpha: float = 0.5,
    time_scale: float = HOUR,
    t_ref: float | None = None,
) -> ActrScores:
    """All three normalized components for one session (``t_ref`` defaults to its start)."""
    t_ref = session.start_time if t_ref is None else t_ref
    return ActrScores(
        songs=session.songs,
        bl=base_level_session(session, user, t_ref, alpha, history, time_scale),
        spr=spreading(session, stats),
        pm=partial_matching(session, song_embeddings),
        reference_time=t_ref,
    )


def dump_correlation(stats: CooccurrenceStats, path) -> None:
    """Write ``C`` as ``i j value`` triplets, row-major."""
    coo = stats.C.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{i} {j} {v:.9g}\n")
