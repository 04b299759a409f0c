"""Song table, ACT-R-weighted session embeddings and long-term user embeddings.

Everything that feeds a gradient is a float64 torch tensor; the ACT-R base-level
and spreading values are constants computed by :mod:`relisten.actr`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from relisten.actr import ActrScores, ListenHistoryIndex, top_bl_songs
from relisten.config import ConfigError
from relisten.dataio import SongCatalog

log = logging.getLogger(__name__)

DTYPE = torch.float64
INIT_STD = 0.1
MAX_ROW_NORM = 10.0


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


@dataclass
class EmbeddingTable:
    matrix: torch.Tensor
    trainable: bool = True

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2:
            raise ValueError("embedding matrix must be 2-D")
        if not torch.isfinite(self.matrix).all():
            raise ValueError("embedding matrix has non-finite entries")

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class LoadReport:
    missing: int
    unknown: int


def init_random(n_songs: int, d: int, seed: int) -> EmbeddingTable:
    rng = np.random.default_rng([seed, 0xE3B])
    return EmbeddingTable(torch.from_numpy(rng.normal(0.0, INIT_STD, size=(n_songs, d))), trainable=True)


def load_pretrained(
    path: str | Path, catalog: SongCatalog, d: int, seed: int = 0, trainable: bool = False
) -> tuple[EmbeddingTable, LoadReport]:
    """Read a ``|V| d`` header followed by ``song_id v_1 ... v_d`` lines.

    Rows with norm above 10 are rescaled to norm 10. Catalog songs absent from
    the file get N(0, 0.1^2) rows; file songs absent from the catalog are ignored.
    """
    rng = np.random.default_rng([seed, 0xE3B])
    matrix = rng.normal(0.0, INIT_STD, size=(len(catalog), d))
    seen = np.zeros(len(catalog), dtype=bool)
    unknown = 0
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ConfigError(f"{path}: first line must be '<n_songs> <d>'")
        file_d = int(header[1])
        if file_d != d:
            raise ConfigError(f"{path}: embedding dimension {file_d} does not match d={d}")
        for lineno, line in enumerate(fh, 2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != d + 1:
                raise ConfigError(f"{path}:{lineno}: expected {d + 1} fields, got {len(parts)}")
            idx = catalog.id_to_index.get(parts[0])
            if idx is None:
                unknown += 1
                continue
            matrix[idx] = np.array(parts[1:], dtype=np.float64)
            seen[idx] = True
    norms = np.linalg.norm(matrix, axis=1)
    big = norms > MAX_ROW_NORM
    matrix[big] *= (MAX_ROW_NORM / norms[big])[:, None]
    report = LoadReport(missing=int((~seen).sum()), unknown=unknown)
    if report.missing or report.unknown:
        log.warning("pretrained embeddings: %d songs missing, %d unknown ids ignored", report.missing, report.unknown)
    return EmbeddingTable(torch.from_numpy(matrix), trainable=trainable), report


def write_embeddings(path: str | Path, table: EmbeddingTable, catalog: SongCatalog) -> None:
    m = table.matrix.detach().numpy()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{m.shape[0]} {m.shape[1]}\n")
        for song_id, row in zip(catalog.song_ids, m):
            fh.write(song_id + " " + " ".join(repr(float(v)) for v in row) + "\n")


class ComponentMixer:
    """Global (w_BL, w_SPR, w_P) = softmax(logits), shared by every user."""

    def __init__(self, logits=None):
        self.logits = as_tensor(np.zeros(3) if logits is None else logits)

    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)


def song_weights(logits: torch.Tensor, bl, spr, pm) -> torch.Tensor:
    """w_v = w_BL bl_v + w_SPR spr_v + w_P pm_v (broadcast over leading axes)."""
    w = torch.softmax(logits, dim=-1)
    return w[0] * bl + w[1] * spr + w[2] * pm


def session_embedding(
    songs: Sequence[int], scores: ActrScores, mixer: ComponentMixer, table: EmbeddingTable
) -> torch.Tensor:
    if tuple(songs) != tuple(scores.songs):
        raise ValueError(f"scores were computed for {scores.songs}, not {tuple(songs)}")
    w = song_weights(mixer.logits, as_tensor(scores.bl), as_tensor(scores.spr), as_tensor(scores.pm))
    return w @ table.matrix[torch.as_tensor(list(songs))]


def masked_softmax(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    x = x.masked_fill(~mask, float("-inf"))
    out = torch.softmax(x, dim=-1)
    # all-padding rows (never produced by real data) would be NaN
    return torch.nan_to_num(out, nan=0.0)


def partial_matching_batch(m: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Normalized P over padded sessions; ``m`` is (..., K, d), ``mask`` (..., K)."""
    m = m * mask[..., None]
    total = m.sum(dim=-2, keepdim=True)
    raw = (m * total).sum(-1) - (m * m).sum(-1)
    return masked_softmax(raw, mask)


def session_embeddings(
    M: torch.Tensor, logits: torch.Tensor, songs, mask, bl, spr
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched session embeddings over padded song index arrays.

    Returns (embeddings (..., d), per-song weights (..., K)).
    """
    songs = torch.as_tensor(songs)
    mask = torch.as_tensor(mask)
    m = M[songs]
    pm = partial_matching_batch(m, mask)
    w = song_weights(logits, as_tensor(bl), as_tensor(spr), pm) * mask
    return (w[..., None] * m).sum(dim=-2), w


def long_term_embedding(
    user: str,
    t_ref: float,
    table: EmbeddingTable,
    history: ListenHistoryIndex,
    alpha: float = 0.5,
    n_top: int = 20,
    time_scale: float = 3600.0,
) -> torch.Tensor:
    """BL-weighted mean of the user's Top-BL songs; zero vector for a cold user."""
    top = top_bl_songs(user, t_ref, alpha, history, n_top, time_scale)
    if not top:
        return torch.zeros(table.d, dtype=table.matrix.dtype)
    idx, w = zip(*top)
    return as_tensor(w) @ table.matrix[torch.as_tensor(idx)]


def long_term_batch(M: torch.Tensor, idx, weights) -> torch.Tensor:
    """Σ w M[idx] over the last axis of padded (…, n_top) index/weight arrays."""
    return (as_tensor(weights)[..., None] * M[torch.as_tensor(idx)]).sum(dim=-2)
