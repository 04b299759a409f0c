"""Listening-log ingestion: events -> sessions -> session sequences -> splits.

The event file is UTF-8 text with one ``user_id<TAB>song_id<TAB>timestamp``
record per line; lines starting with ``#`` are ignored.
"""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, TextIO

import numpy as np

log = logging.getLogger(__name__)


class ParseError(ValueError):
    """Too many malformed lines in an event stream."""


@dataclass(frozen=True)
class ListeningEvent:
    user_id: str
    song_id: str
    timestamp: int

    def __post_init__(self) -> None:
        if not self.user_id or not self.song_id:
            raise ValueError("user_id and song_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class Session:
    """A set of distinct song indices played within one activity burst.

    ``songs`` keeps first-listen order for reproducibility, but every consumer
    treats it as a set.
    """

    songs: tuple[int, ...]
    start_time: int
    end_time: int

    def __post_init__(self) -> None:
        if not self.songs:
            raise ValueError("empty session")
        if len(set(self.songs)) != len(self.songs):
            raise ValueError(f"duplicate songs in session {self.songs}")
        if self.start_time > self.end_time:
            raise ValueError("session ends before it starts")

    def __len__(self) -> int:
        return len(self.songs)


@dataclass(frozen=True)
class SessionSequence:
    user: str
    history: tuple[Session, ...]
    target: Session

    def __post_init__(self) -> None:
        chain = self.history + (self.target,)
        for prev, nxt in zip(chain, chain[1:]):
            if prev.end_time > nxt.start_time:
                raise ValueError("sessions of a sequence must be chronological")

    @property
    def L(self) -> int:
        return len(self.history)


@dataclass(frozen=True)
class SongCatalog:
    song_ids: tuple[str, ...]
    popularity: np.ndarray
    listen_count: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.song_ids)})
        self.popularity.setflags(write=False)
        self.listen_count.setflags(write=False)

    @property
    def id_to_index(self) -> Mapping[str, int]:
        return self._index

    def __len__(self) -> int:
        return len(self.song_ids)

    def index(self, song_id: str) -> int:
        return self._index[song_id]


class Splits(NamedTuple):
    train: list[SessionSequence]
    validation: list[SessionSequence]
    test: list[SessionSequence]


class EventList(list):
    """Parsed events plus the number of malformed lines that were skipped."""

    skipped: int = 0


def parse_events(stream: TextIO | Iterable[str], tolerance: float = 0.01) -> EventList:
    """Parse tab-separated ``user, song, timestamp`` lines.

    Malformed lines are skipped and counted. The parse aborts when the number of
    skipped lines exceeds ``max(1, floor(tolerance * lines))``; a single bad
    line is always tolerated.
    """
    events = EventList()
    n_lines = 0
    skipped = 0
    for lineno, raw in enumerate(stream, 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        n_lines += 1
        parts = line.split("\t")
        try:
            if len(parts) != 3:
                raise ValueError(f"expected 3 fields, got {len(parts)}")
            events.append(ListeningEvent(parts[0], parts[1], int(parts[2])))
        except ValueError as exc:
            skipped += 1
            log.warning("line %d skipped: %s", lineno, exc)
    events.skipped = skipped
    if skipped > max(1, math.floor(tolerance * n_lines)):
        raise ParseError(f"{skipped} of {n_lines} lines malformed (tolerance {tolerance:.2%})")
    return events


def build_catalog(events: Iterable[ListeningEvent]) -> SongCatalog:
    listeners: dict[str, set[str]] = defaultdict(set)
    counts: dict[str, int] = defaultdict(int)
    for e in events:
        listeners[e.song_id].add(e.user_id)
        counts[e.song_id] += 1
    if not counts:
        raise ValueError("cannot build a catalog from no events")
    song_ids = tuple(sorted(counts))
    return SongCatalog(
        song_ids=song_ids,
        popularity=np.array([len(listeners[s]) for s in song_ids], dtype=np.int64),
        listen_count=np.array([counts[s] for s in song_ids], dtype=np.int64),
    )


def group_by_user(events: Iterable[ListeningEvent]) -> dict[str, list[ListeningEvent]]:
    """Events per user, users in sorted order, each list stably sorted by time."""
    by_user: dict[str, list[ListeningEvent]] = defaultdict(list)
    for e in events:
        by_user[e.user_id].append(e)
    return {u: sorted(by_user[u], key=lambda e: e.timestamp) for u in sorted(by_user)}


def sessionize(
    events: Iterable[ListeningEvent],
    gap_seconds: int,
    k_max: int,
    min_session_len: int = 2,
    catalog: SongCatalog | None = None,
) -> dict[str, list[Session]]:
    """Split each user's events into sessions at inactivity gaps >= ``gap_seconds``.

    Within a session only the first ``k_max`` distinct songs are kept; sessions
    with fewer than ``min_session_len`` distinct songs are dropped.
    """
    if gap_seconds <= 0 or k_max < 1:
        raise ValueError("gap_seconds and k_max must be positive")
    events = list(events)
    if catalog is None:
        catalog = build_catalog(events)
    out: dict[str, list[Session]] = {}
    for user, evs in group_by_user(events).items():
        sessions = []
        burst: list[ListeningEvent] = []
        for e in evs:
            if burst and e.timestamp - burst[-1].timestamp >= gap_seconds:
                sessions.append(burst)
                burst = []
            burst.append(e)
        if burst:
            sessions.append(burst)
        kept = []
        for burst in sessions:
            songs: list[int] = []
            for e in burst:
                idx = catalog.index(e.song_id)
                if idx not in songs:
                    songs.append(idx)
                    if len(songs) == k_max:
                        break
            if len(songs) >= min_session_len:
                kept.append(Session(tuple(songs), burst[0].timestamp, burst[-1].timestamp))
        out[user] = kept
    return out


def build_sequences(
    sessions: Mapping[str, list[Session]],
    L: int,
    step: int,
    min_sessions_per_user: int = 0,
) -> dict[str, list[SessionSequence]]:
    """Sliding windows of ``L + 1`` consecutive sessions per user."""
    if L < 1 or step < 1:
        raise ValueError("L and step must be >= 1")
    out: dict[str, list[SessionSequence]] = {}
    for user in sorted(sessions):
        user_sessions = sessions[user]
        if len(user_sessions) < max(min_sessions_per_user, L + 1):
            continue
        out[user] = [
            SessionSequence(user, tuple(user_sessions[o : o + L]), user_sessions[o + L])
            for o in range(0, len(user_sessions) - L, step)
        ]
    return out


def eval_counts(n: int, n_test: int = 10, n_val: int = 5) -> tuple[int, int, int]:
    """(train, val, test) sizes for a user with ``n`` chronological sequences."""
    if n < 2:
        return n, 0, 0
    full = n_test + n_val + 1
    if n >= full:
        return n - n_test - n_val, n_val, n_test
    avail = n - 1
    test = min(avail, max(1, n * n_test // full))
    val = min(avail - test, max(1, n * n_val // full)) if n_val > 0 else 0
    return n - test - val, val, test


def split_chronological(
    sequences: Mapping[str, list[SessionSequence]], n_test: int = 10, n_val: int = 5
) -> Splits:
    """Per user: last ``n_test`` sequences to test, the ``n_val`` before to validation.

    Users with too few sequences keep at least one training sequence and give up
    evaluation sequences proportionally.
    """
    train, val, test = [], [], []
    for user in sorted(sequences):
        seqs = sequences[user]
        n_tr, n_va, _ = eval_counts(len(seqs), n_test, n_val)
        train.extend(seqs[:n_tr])
        val.extend(seqs[n_tr : n_tr + n_va])
        test.extend(seqs[n_tr + n_va :])
    return Splits(train, val, test)


def read_events(path, tolerance: float = 0.01) -> EventList:
    with open(path, encoding="utf-8") as fh:
        return parse_events(fh, tolerance)


def write_events(path, events: Iterable[ListeningEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(f"{e.user_id}\t{e.song_id}\t{e.timestamp}\n")
