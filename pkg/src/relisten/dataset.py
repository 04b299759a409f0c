"""The dataset bundle: catalog, sessions, listen history and chronological splits."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from relisten.actr import CooccurrenceStats, ListenHistoryIndex, build_cooccurrence
from relisten.config import RunConfig, parse_config_text
from relisten.dataio import (
    ListeningEvent,
    Session,
    SessionSequence,
    SongCatalog,
    Splits,
    build_catalog,
    build_sequences,
    sessionize,
    split_chronological,
)

BUNDLE_VERSION = 1
BUNDLE_FILE = "bundle.json"


def catalog_hash(catalog: SongCatalog) -> str:
    return hashlib.sha256("\n".join(catalog.song_ids).encode("utf-8")).hexdigest()


@dataclass
class Dataset:
    config: RunConfig
    catalog: SongCatalog
    sessions: dict[str, list[Session]]
    splits: Splits
    history: ListenHistoryIndex
    # (user, offset) of every sequence, split by split; kept for serialization
    offsets: dict[str, list[tuple[str, int]]] = field(default_factory=dict)

    @property
    def n_songs(self) -> int:
        return len(self.catalog)

    @property
    def catalog_hash(self) -> str:
        return catalog_hash(self.catalog)

    def train_sessions(self) -> list[Session]:
        """Distinct sessions covered by training sequences, in user/time order."""
        seen: dict[tuple[str, int], Session] = {}
        for seq in self.splits.train:
            for s in seq.history + (seq.target,):
                seen.setdefault((seq.user, s.start_time), s)
        return [seen[key] for key in sorted(seen)]

    @cached_property
    def cooccurrence(self) -> CooccurrenceStats:
        return build_cooccurrence(self.train_sessions(), self.n_songs)

    def summary(self) -> dict[str, int]:
        return {
            "users": sum(1 for v in self.sessions.values() if v),
            "songs": self.n_songs,
            "sessions": sum(len(v) for v in self.sessions.values()),
            "train": len(self.splits.train),
            "validation": len(self.splits.validation),
            "test": len(self.splits.test),
        }


def build_dataset(events: list[ListeningEvent], config: RunConfig) -> Dataset:
    """Run catalog -> sessionize -> sequences -> split on an event list."""
    catalog = build_catalog(events)
    sessions = sessionize(events, config.gap_seconds, config.k, config.min_session_len, catalog)
    per_user = build_sequences(sessions, config.L, config.step, config.min_sessions_per_user)
    splits = split_chronological(per_user, config.n_test, config.n_val)
    history = ListenHistoryIndex.from_events(events, catalog)
    return Dataset(config, catalog, sessions, splits, history, _offsets(splits, sessions))


def _offsets(splits: Splits, sessions: dict[str, list[Session]]) -> dict[str, list[tuple[str, int]]]:
    starts = {u: {s.start_time: i for i, s in enumerate(v)} for u, v in sessions.items()}
    return {
        name: [(seq.user, starts[seq.user][seq.history[0].start_time]) for seq in getattr(splits, name)]
        for name in Splits._fields
    }


def save_bundle(dataset: Dataset, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history = {}
    for user in dataset.history.users:
        times, songs = dataset.history.before(user, np.inf)
        history[user] = [times.tolist(), songs.tolist()]
    payload = {
        "version": BUNDLE_VERSION,
        "config": dataset.config.to_text(),
        "catalog": {
            "hash": dataset.catalog_hash,
            "song_ids": list(dataset.catalog.song_ids),
            "popularity": dataset.catalog.popularity.tolist(),
            "listen_count": dataset.catalog.listen_count.tolist(),
        },
        "sessions": {
            u: [[list(s.songs), s.start_time, s.end_time] for s in v] for u, v in dataset.sessions.items()
        },
        "history": history,
        "splits": {k: [list(x) for x in v] for k, v in dataset.offsets.items()},
    }
    path = out_dir / BUNDLE_FILE
    path.write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")
    return path


def load_bundle(path: str | Path, config: RunConfig | None = None) -> Dataset:
    """Load a bundle; ``config`` overrides the stored one for model settings.

    Sequence windows are rebuilt with the stored ``L``, whatever ``config`` says.
    """
    path = Path(path)
    if path.is_dir():
        path = path / BUNDLE_FILE
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("version") != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {payload.get('version')}")
    stored = RunConfig.from_dict(parse_config_text(payload["config"]))
    cat = payload["catalog"]
    catalog = SongCatalog(
        tuple(cat["song_ids"]),
        np.array(cat["popularity"], dtype=np.int64),
        np.array(cat["listen_count"], dtype=np.int64),
    )
    sessions = {
        u: [Session(tuple(songs), start, end) for songs, start, end in v] for u, v in payload["sessions"].items()
    }
    history = ListenHistoryIndex(
        {u: (np.array(t, dtype=np.int64), np.array(s, dtype=np.int64)) for u, (t, s) in payload["history"].items()}
    )
    L = stored.L
    split_lists = {}
    offsets = {}
    for name in Splits._fields:
        pairs = [(u, int(o)) for u, o in payload["splits"][name]]
        offsets[name] = pairs
        split_lists[name] = [
            SessionSequence(u, tuple(sessions[u][o : o + L]), sessions[u][o + L]) for u, o in pairs
        ]
    if config is None:
        config = stored
    elif config.L != L:
        config = config.replace(L=L)
    return Dataset(config, catalog, sessions, Splits(**split_lists), history, offsets)
