"""End-to-end training: prefix expansion, negatives, losses, Adam and grad checks.

The loss of one featurized batch sums, over every sequence and every prefix
length l, a pairwise softplus ranking term between the (l+1)-th session's songs
and an equally sized negative set, and a session-alignment term
``1 - <user, next session>``, mixed as ``lam * song + (1 - lam) * session``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from relisten.config import RunConfig
from relisten.dataio import Session, SessionSequence, SongCatalog
from relisten.embed import as_tensor
from relisten.metrics import mean_ndcg_recall
from relisten.model import Featurizer, SequenceBatch, SessionModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: SessionModel | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.5
    lr: float = 0.001
    epochs: int = 100
    batch_size: int = 512
    neg_mode: str = "popularity"
    neg_beta: float = 0.5
    seed: int = 0
    patience: int = 5
    full_window: bool = False
    clamp_session_loss: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.neg_mode not in ("uniform", "popularity"):
            raise ValueError(f"unknown neg_mode {self.neg_mode!r}")

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "TrainConfig":
        return cls(
            lam=cfg.lam, lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size, neg_mode=cfg.neg_mode,
            neg_beta=cfg.neg_beta, seed=cfg.seed, patience=cfg.patience, full_window=cfg.full_window,
            clamp_session_loss=cfg.clamp_session_loss,
        )


@dataclass(frozen=True)
class TrainingExample:
    user: str
    prefix: tuple[Session, ...]
    positive: tuple[int, ...]
    negatives: tuple[int, ...] = ()


def expand_prefixes(sequence: SessionSequence, full_window: bool = False) -> list[TrainingExample]:
    """One example per prefix length l = 1 .. L-1 (l = L too with ``full_window``)."""
    chain = sequence.history + (sequence.target,)
    last = sequence.L if full_window else sequence.L - 1
    return [TrainingExample(sequence.user, chain[:l], chain[l].songs) for l in range(1, last + 1)]


# -- negative sampling -------------------------------------------------------


def sampling_weights(catalog: SongCatalog | np.ndarray, mode: str, beta: float = 0.5) -> np.ndarray:
    pop = catalog.popularity if isinstance(catalog, SongCatalog) else np.asarray(catalog)
    if mode == "uniform":
        return np.ones(len(pop))
    if mode == "popularity":
        return np.asarray(pop, dtype=np.float64) ** beta
    raise ValueError(f"unknown sampling mode {mode!r}")


def sample_negatives(
    positive: Sequence[int],
    catalog: SongCatalog | np.ndarray,
    mode: str,
    beta: float,
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray:
    """Draw ``size`` (default ``|positive|``) distinct songs outside ``positive``.

    Sequential draws without replacement, each with probability proportional to
    the weight of the remaining songs (1 or popularity**beta).
    """
    weights = sampling_weights(catalog, mode, beta)
    size = len(positive) if size is None else size
    pos = np.unique(np.asarray(positive, dtype=np.int64))
    if len(weights) <= 2 * len(pos) or len(weights) - len(pos) < size:
        raise ValueError(f"catalog of {len(weights)} songs too small for {len(pos)} positives")
    p = weights.copy()
    p[pos] = 0.0
    return rng.choice(len(p), size=size, replace=False, p=p / p.sum())


def sample_negatives_batch(
    positives: np.ndarray, mask: np.ndarray, weights: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Vectorized version over padded (..., K) positive arrays.

    Uses Gumbel-top-k keys, which gives the same law as sequential weighted
    sampling without replacement. Row r gets ``mask[r].sum()`` negatives in its
    leading slots; the rest are 0 and must be masked by the caller.
    """
    shape = positives.shape
    pos = positives.reshape(-1, shape[-1])
    msk = mask.reshape(-1, shape[-1])
    n_rows, K = pos.shape
    V = len(weights)
    if V <= 2 * K:
        raise ValueError(f"catalog of {V} songs too small for sessions of {K}")
    log_w = np.log(weights)
    out = np.zeros((n_rows, K), dtype=np.int64)
    chunk = max(1, 4_000_000 // V)
    for start in range(0, n_rows, chunk):
        stop = min(n_rows, start + chunk)
        keys = log_w + rng.gumbel(size=(stop - start, V))
        rows = np.arange(stop - start)[:, None]
        keys[np.broadcast_to(rows, (stop - start, K))[msk[start:stop]], pos[start:stop][msk[start:stop]]] = -np.inf
        top = np.argpartition(-keys, K - 1, axis=1)[:, :K]
        order = np.argsort(-np.take_along_axis(keys, top, axis=1), axis=1, kind="stable")
        out[start:stop] = np.take_along_axis(top, order, axis=1)
    out[~msk] = 0
    return out.reshape(shape)


# -- losses --------------------------------------------------------------------


def song_loss(user_embedding, positive: Sequence[int], negatives: Sequence[int], table) -> torch.Tensor:
    """Σ over all (positive, negative) pairs of softplus(-(s_pos - s_neg))."""
    if len(positive) != len(negatives):
        raise ValueError("need as many negatives as positives")
    M = table.matrix if hasattr(table, "matrix") else as_tensor(table)
    u = as_tensor(user_embedding)
    sp = M[torch.as_tensor(list(positive))] @ u
    sn = M[torch.as_tensor(list(negatives))] @ u
    return F.softplus(-(sp[:, None] - sn[None, :])).sum()


def session_loss(user_embedding, target_session_embedding, clamp: bool = False) -> torch.Tensor:
    """1 - <user, session>; unbounded below unless ``clamp`` caps the dot at 1."""
    dot = (as_tensor(user_embedding) * as_tensor(target_session_embedding)).sum(-1)
    if clamp:
        dot = torch.clamp(dot, max=1.0)
    return 1.0 - dot


def total_loss(song, session, lam: float) -> torch.Tensor:
    return lam * song + (1.0 - lam) * session


@dataclass
class LossParts:
    total: torch.Tensor
    song: torch.Tensor
    session: torch.Tensor


def n_positions(batch: SequenceBatch, full_window: bool) -> int:
    return batch.length if full_window else batch.length - 1


def batch_loss(model: SessionModel, batch: SequenceBatch, negatives: np.ndarray, cfg: TrainConfig) -> LossParts:
    """Loss summed over sequences and prefixes; ``negatives`` is (n, P, K)."""
    P = n_positions(batch, cfg.full_window)
    if P < 1:
        raise ValueError("sequences need at least 2 history sessions (or full_window)")
    state = model.forward(batch)
    M = model.params["songs"]
    u = state.user[:, :P]  # (n, P, d)
    pos = torch.as_tensor(batch.songs[:, 1 : P + 1])
    pmask = torch.as_tensor(batch.mask[:, 1 : P + 1])
    sp = (M[pos] * u[:, :, None]).sum(-1)  # (n, P, K)
    sn = (M[torch.as_tensor(negatives)] * u[:, :, None]).sum(-1)
    pairs = pmask[..., :, None] & pmask[..., None, :]
    song = (F.softplus(-(sp[..., :, None] - sn[..., None, :])) * pairs).sum()
    session = session_loss(u, state.sessions[:, 1 : P + 1], cfg.clamp_session_loss).sum()
    return LossParts(total_loss(song, session, cfg.lam), song, session)


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, torch.Tensor], AdamState]:
    """One bias-corrected Adam update, in place on ``params``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    with torch.no_grad():
        for name, g in grads.items():
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(g)
                state.v[name] = torch.zeros_like(g)
            v = state.v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = m / (1 - beta1**t)
            v_hat = v / (1 - beta2**t)
            params[name].sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return params, state


def gradients(model: SessionModel, batch: SequenceBatch, negatives: np.ndarray, cfg: TrainConfig):
    """(loss parts, {name: grad}) for every trainable tensor."""
    names = model.trainable_names
    for name, p in model.params.items():
        p.requires_grad_(name in names)
    try:
        parts = batch_loss(model, batch, negatives, cfg)
        grads = torch.autograd.grad(parts.total, [model.params[n] for n in names], allow_unused=True)
    finally:
        for p in model.params.values():
            p.requires_grad_(False)
    out = {n: (g if g is not None else torch.zeros_like(model.params[n])) for n, g in zip(names, grads)}
    return LossParts(parts.total.detach(), parts.song.detach(), parts.session.detach()), out


@dataclass
class GradCheck:
    max_rel_error: float
    per_tensor: dict[str, float]
    analytic: dict[str, torch.Tensor]
    numeric: dict[str, torch.Tensor]


def _richardson(d_h: float, d_half: float) -> float:
    return (4 * d_half - d_h) / 3


def _disagree(x: float, y: float, rel: float = 1e-6, noise: float = 1e-8) -> bool:
    gap = abs(x - y)
    return gap > noise and gap > rel * max(abs(x), abs(y))


def grad_check(
    model: SessionModel, batch: SequenceBatch, negatives: np.ndarray, cfg: TrainConfig,
    epsilon: float = 1e-3, floor: float = 1e-6, min_epsilon: float = 1e-6,
) -> GradCheck:
    """Compare autograd gradients with central differences, entry by entry.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    entries whose true gradient is zero from dividing round-off by round-off.
    Each entry uses steps ``h``, ``h/2`` and ``h/4``; the two Richardson
    extrapolations they give agree to O(h^4) on a smooth stretch. When they do
    not, the step straddles a ReLU kink and ``h`` shrinks tenfold.
    """
    _, analytic = gradients(model, batch, negatives, cfg)
    numeric = {}
    per_tensor = {}
    with torch.no_grad():
        for name in model.trainable_names:
            p = model.params[name]
            flat = p.view(-1)
            num = torch.zeros_like(flat)

            def central(i: int, h: float) -> float:
                orig = flat[i].item()
                flat[i] = orig + h
                up = batch_loss(model, batch, negatives, cfg).total.item()
                flat[i] = orig - h
                down = batch_loss(model, batch, negatives, cfg).total.item()
                flat[i] = orig
                return (up - down) / (2 * h)

            for i in range(flat.numel()):
                h = epsilon
                while True:
                    d = [central(i, h / 2**j) for j in range(3)]
                    coarse, fine = _richardson(d[0], d[1]), _richardson(d[1], d[2])
                    if not _disagree(coarse, fine) or h / 10 < min_epsilon:
                        break
                    h /= 10
                num[i] = fine
            numeric[name] = num.view_as(p)
            a = analytic[name]
            denom = torch.maximum(torch.maximum(a.abs(), numeric[name].abs()), torch.tensor(floor, dtype=a.dtype))
            per_tensor[name] = float(((a - numeric[name]).abs() / denom).max())
    return GradCheck(max(per_tensor.values()), per_tensor, analytic, numeric)


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: SessionModel  # best-validation (or final) parameters
    final_model: SessionModel
    adam: AdamState
    trace: list[dict]
    best_epoch: int
    epochs_run: int


def _targets(sequences: Sequence[SessionSequence]) -> list[tuple[int, ...]]:
    return [seq.target.songs for seq in sequences]


def trace_line(row: dict) -> str:
    return f"epoch={row['epoch']} split={row['split']} loss={row['loss']:.6f} ndcg={row['ndcg']:.6f}"


def train(
    dataset,
    config: RunConfig,
    model: SessionModel | None = None,
    adam: AdamState | None = None,
    featurizer: Featurizer | None = None,
    log_path: str | Path | None = None,
    start_epoch: int = 0,
) -> TrainResult:
    """Mini-batch Adam over the training split with validation early stopping.

    ``batch_size`` counts sequences; every sequence contributes all of its
    prefixes. Negatives are redrawn at every visit from a per-(epoch, batch)
    seeded stream. With ``patience > 0`` and a validation split, training stops
    after ``patience`` epochs without a validation NDCG gain and the best
    checkpoint is returned.
    """
    cfg = TrainConfig.from_run_config(config)
    train_seqs = dataset.splits.train
    if not train_seqs:
        raise ValueError("empty training split")
    featurizer = featurizer or Featurizer.for_dataset(dataset)
    if model is None:
        from relisten.embed import load_pretrained

        table = None
        if config.embeddings_path:
            table, _ = load_pretrained(
                config.embeddings_path, dataset.catalog, config.d, config.seed, config.embeddings_trainable
            )
        model = SessionModel.initialize(config, dataset.n_songs, table)
    adam = adam or AdamState()
    train_batch = featurizer.featurize(train_seqs)
    val_seqs = dataset.splits.validation
    val_batch = featurizer.featurize(val_seqs) if val_seqs else None
    weights = sampling_weights(dataset.catalog, cfg.neg_mode, cfg.neg_beta)
    P = n_positions(train_batch, cfg.full_window)
    K = config.k

    trace: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    best_ndcg, best_epoch, best_model, stale = -np.inf, start_epoch, model.copy(), 0
    last_good = model.copy()
    epoch = start_epoch
    try:
        for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_seqs))
            ep_loss = 0.0
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                sub = train_batch.take(order[start : start + cfg.batch_size])
                rng = np.random.default_rng([cfg.seed, epoch, b])
                neg = sample_negatives_batch(sub.songs[:, 1 : P + 1], sub.mask[:, 1 : P + 1], weights, rng)
                parts, grads = gradients(model, sub, neg, cfg)
                if not torch.isfinite(parts.total):
                    raise TrainingDiverged(f"loss became {parts.total.item()} at epoch {epoch}", last_good)
                try:
                    adam_step(model.params, grads, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good) from exc
                ep_loss += parts.total.item()
            last_good = model.copy()
            tr_ndcg, _ = mean_ndcg_recall(model.scores(train_batch), _targets(train_seqs), K)
            rows = [{"epoch": epoch, "split": "train", "loss": ep_loss, "ndcg": tr_ndcg}]
            if val_batch is not None:
                val_neg = sample_negatives_batch(
                    val_batch.songs[:, 1 : P + 1], val_batch.mask[:, 1 : P + 1], weights,
                    np.random.default_rng([cfg.seed, epoch, 2**31]),
                )
                with torch.no_grad():
                    val_loss = batch_loss(model, val_batch, val_neg, cfg).total.item()
                val_ndcg, _ = mean_ndcg_recall(model.scores(val_batch), _targets(val_seqs), K)
                rows.append({"epoch": epoch, "split": "val", "loss": val_loss, "ndcg": val_ndcg})
            for row in rows:
                trace.append(row)
                log.info(trace_line(row))
                if log_fh:
                    log_fh.write(trace_line(row) + "\n")
            score = rows[-1]["ndcg"]
            if val_batch is None or cfg.patience <= 0:
                best_model, best_epoch = model, epoch
                continue
            if score > best_ndcg:
                best_ndcg, best_epoch, best_model, stale = score, epoch, model.copy(), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(best_model, model, adam, trace, best_epoch, epoch)
