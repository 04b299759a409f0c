"""Synthetic listening logs with a controllable repeat probability.

Songs are grouped in taste clusters; each user draws new songs from a few
clusters (global popularity skewed by a Zipf exponent) and, with probability
``p_rep`` per slot, relistens to a previously heard song picked proportionally
to how often they have played it (``repeat_law="count"``) or to its decayed
activation, a sum of ``hours_since_listen ** -0.5`` over past plays
(``repeat_law="activation"``). A user's first session is always full and
new, so every later slot can be a repeat.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from relisten.dataio import ListeningEvent, write_events

T0 = 1_600_000_000


@dataclass(frozen=True)
class SynthProfile:
    n_users: int = 20
    n_sessions: int = 60
    k: int = 10
    k_min: int = 10
    p_rep: float = 0.8
    n_songs: int = 600
    n_clusters: int = 12
    clusters_per_user: int = 2
    popularity_skew: float = 0.0
    mean_gap_hours: float = 20.0
    min_gap_seconds: int = 1500
    song_seconds: int = 200
    repeat_law: str = "count"
    seed: int = 0

    def __post_init__(self):
        if self.repeat_law not in ("count", "activation"):
            raise ValueError(f"unknown repeat_law {self.repeat_law!r}")


PROFILES = {
    "repeat": SynthProfile(repeat_law="activation"),
    "skewed": SynthProfile(popularity_skew=1.2, p_rep=0.7),
    "explore": SynthProfile(p_rep=0.0, n_sessions=12, n_users=10, n_songs=2000),
    "tiny": SynthProfile(n_users=3, n_sessions=8, k=4, k_min=3, n_songs=60, n_clusters=3, clusters_per_user=1),
}


def generate(profile: SynthProfile) -> list[ListeningEvent]:
    rng = np.random.default_rng(profile.seed)
    V = profile.n_songs
    cluster_of = np.arange(V) % profile.n_clusters
    # Zipf-like global appeal; song 0 of the catalog is the most popular
    appeal = (np.arange(V) + 1.0) ** -profile.popularity_skew
    width = len(str(V - 1))
    events: list[ListeningEvent] = []
    for u in range(profile.n_users):
        user = f"u{u:03d}"
        taste = rng.choice(profile.n_clusters, size=profile.clusters_per_user, replace=False)
        in_taste = np.isin(cluster_of, taste)
        counts = np.zeros(V)
        plays: list[tuple[int, int]] = []
        t = T0 + int(rng.integers(0, 86_400))
        for s in range(profile.n_sessions):
            size = profile.k if s == 0 else int(rng.integers(profile.k_min, profile.k + 1))
            chosen: list[int] = []
            for _ in range(size):
                heard = counts > 0
                free = np.ones(V, dtype=bool)
                free[chosen] = False
                can_repeat = (heard & free).any()
                if s > 0 and can_repeat and rng.random() < profile.p_rep:
                    w = np.where(heard & free, _repeat_weights(profile, counts, plays, t), 0.0)
                else:
                    pool = ~heard & free & in_taste
                    if not pool.any():
                        pool = ~heard & free
                    if not pool.any():
                        raise ValueError("catalog exhausted; raise n_songs")
                    w = np.where(pool, appeal, 0.0)
                chosen.append(int(rng.choice(V, p=w / w.sum())))
            for j, song in enumerate(chosen):
                events.append(ListeningEvent(user, f"s{song:0{width}d}", t + j * profile.song_seconds))
            counts[chosen] += 1
            plays.extend((song, t + j * profile.song_seconds) for j, song in enumerate(chosen))
            t += len(chosen) * profile.song_seconds + profile.min_gap_seconds
            t += int(rng.exponential(profile.mean_gap_hours * 3600))
    return events


def _repeat_weights(profile: SynthProfile, counts: np.ndarray, plays, t: int) -> np.ndarray:
    if profile.repeat_law == "count":
        return counts
    act = np.zeros(len(counts))
    songs = np.fromiter((p[0] for p in plays), dtype=np.int64, count=len(plays))
    ages = np.fromiter(((t - p[1]) / 3600.0 for p in plays), dtype=np.float64, count=len(plays))
    np.add.at(act, songs, ages**-0.5)
    return act


def write_synthetic(path: str | Path, profile: SynthProfile) -> Path:
    """Write the events file and ``<path>.params.json`` with the generator settings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_events(path, generate(profile))
    params = path.with_name(path.name + ".params.json")
    params.write_text(json.dumps(asdict(profile), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
