"""Accuracy, repetition/exploration and beyond-accuracy metrics, and the report.

Per-session values are fractions in [0, 1]; :class:`EvalReport` stores the
session averages in percent (MR stays a raw listener count).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from relisten.actr import ListenHistoryIndex
from relisten.dataio import SessionSequence, SongCatalog
from relisten.recsys import RecommendationList, top_k_indices


def recall_at_k(recommended: Sequence[int], truth: Iterable[int]) -> float:
    truth = set(truth)
    if not truth:
        raise ValueError("empty ground truth")
    return len(truth.intersection(recommended)) / len(truth)


def ndcg_at_k(recommended: Sequence[int], truth: Iterable[int]) -> float:
    """Binary-relevance NDCG with a 1/log2(rank + 1) discount, rank 1-based."""
    truth = set(truth)
    if not truth:
        raise ValueError("empty ground truth")
    dcg = sum(1.0 / math.log2(i + 2) for i, s in enumerate(recommended) if s in truth)
    ideal = sum(1.0 / math.log2(i + 2) for i in range(min(len(recommended), len(truth))))
    return dcg / ideal


def split_truth(truth: Iterable[int], heard: set[int]) -> tuple[set[int], set[int]]:
    """(repeated, explored) partition of the ground truth given previously heard songs."""
    truth = set(truth)
    return truth & heard, truth - heard


def rep_exp_metrics(
    recommended: Sequence[int], repeated: set[int], explored: set[int]
) -> tuple[float | None, float | None, float | None, float | None]:
    """(Recall^Rep, NDCG^Rep, Recall^Exp, NDCG^Exp); None where a partition is empty."""
    out: list[float | None] = []
    for part in (repeated, explored):
        if part:
            out += [recall_at_k(recommended, part), ndcg_at_k(recommended, part)]
        else:
            out += [None, None]
    return tuple(out)  # type: ignore[return-value]


def rep_ratio(recommended: Sequence[int], heard: set[int]) -> float:
    return sum(1 for s in recommended if s in heard) / len(recommended)


def rep_ratio_gt(truth: Sequence[int], heard: set[int]) -> float:
    return rep_ratio(list(truth), heard)


def median_rank(recommended: Sequence[int], catalog: SongCatalog | np.ndarray) -> float:
    """Median listener count of the list; even lengths average the central pair."""
    pop = catalog.popularity if isinstance(catalog, SongCatalog) else np.asarray(catalog)
    return float(np.median(pop[np.asarray(recommended, dtype=np.int64)]))


@dataclass(frozen=True)
class EvalReport:
    ndcg: float
    recall: float
    ndcg_rep: float
    recall_rep: float
    ndcg_exp: float
    recall_exp: float
    rep_ratio: float
    rep_ratio_gt: float
    rep_bias: float
    mr: float
    n_sessions: int
    n_sessions_with_rep: int
    n_sessions_with_exp: int

    def __post_init__(self) -> None:
        if self.rep_bias != self.rep_ratio - self.rep_ratio_gt:
            raise ValueError("rep_bias must equal rep_ratio - rep_ratio_gt")

    def as_dict(self) -> dict:
        return asdict(self)


def _mean_pct(values: list[float]) -> float:
    return 100.0 * float(np.mean(values)) if values else float("nan")


def evaluate_lists(
    recs: Sequence[RecommendationList],
    sequences: Sequence[SessionSequence],
    history: ListenHistoryIndex,
    catalog: SongCatalog,
) -> EvalReport:
    """Aggregate per-session metrics over aligned (recommendation, sequence) pairs.

    A song counts as repeated when the user listened to it at any time before
    the target session started.
    """
    if not sequences:
        raise ValueError("empty evaluation split")
    acc: dict[str, list[float]] = {k: [] for k in ("ndcg", "recall", "nr", "rr", "ne", "re", "ratio", "gt", "mr")}
    for rec, seq in zip(recs, sequences, strict=True):
        truth = seq.target.songs
        heard = history.heard_before(seq.user, seq.target.start_time)
        rep, exp = split_truth(truth, heard)
        acc["recall"].append(recall_at_k(rec.songs, truth))
        acc["ndcg"].append(ndcg_at_k(rec.songs, truth))
        r_rep, n_rep, r_exp, n_exp = rep_exp_metrics(rec.songs, rep, exp)
        if rep:
            acc["rr"].append(r_rep)
            acc["nr"].append(n_rep)
        if exp:
            acc["re"].append(r_exp)
            acc["ne"].append(n_exp)
        acc["ratio"].append(rep_ratio(rec.songs, heard))
        acc["gt"].append(rep_ratio_gt(truth, heard))
        acc["mr"].append(median_rank(rec.songs, catalog))
    ratio, gt = _mean_pct(acc["ratio"]), _mean_pct(acc["gt"])
    return EvalReport(
        ndcg=_mean_pct(acc["ndcg"]),
        recall=_mean_pct(acc["recall"]),
        ndcg_rep=_mean_pct(acc["nr"]),
        recall_rep=_mean_pct(acc["rr"]),
        ndcg_exp=_mean_pct(acc["ne"]),
        recall_exp=_mean_pct(acc["re"]),
        rep_ratio=ratio,
        rep_ratio_gt=gt,
        rep_bias=ratio - gt,
        mr=float(np.mean(acc["mr"])),
        n_sessions=len(acc["recall"]),
        n_sessions_with_rep=len(acc["rr"]),
        n_sessions_with_exp=len(acc["re"]),
    )


def evaluate(recommender, sequences: Sequence[SessionSequence], dataset, K: int | None = None) -> EvalReport:
    """Evaluate anything with ``recommend_many(sequences, K)`` on a split."""
    K = dataset.config.k if K is None else K
    recs = recommender.recommend_many(list(sequences), K)
    return evaluate_lists(recs, sequences, dataset.history, dataset.catalog)


def mean_ndcg_recall(scores: np.ndarray, truths: Sequence[Sequence[int]], K: int) -> tuple[float, float]:
    """Mean NDCG and Recall (fractions) of score rows against target song sets."""
    idx = top_k_indices(scores, K)
    nd = [ndcg_at_k(row.tolist(), t) for row, t in zip(idx, truths)]
    rc = [recall_at_k(row.tolist(), t) for row, t in zip(idx, truths)]
    return float(np.mean(nd)), float(np.mean(rc))


# -- reports ---------------------------------------------------------------

METRIC_KEYS = [f.name for f in fields(EvalReport)]
TABLE_COLUMNS = [
    ("NDCG (in %)", "ndcg"),
    ("Recall (in %)", "recall"),
    ("NDCG^Rep (in %)", "ndcg_rep"),
    ("Recall^Rep (in %)", "recall_rep"),
    ("NDCG^Exp (in %)", "ndcg_exp"),
    ("Recall^Exp (in %)", "recall_exp"),
    ("RepRatio (in %)", "rep_ratio"),
    ("RepBias", "rep_bias"),
    ("MR", "mr"),
]


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.6f}"


def summarize(reports: Sequence[EvalReport]) -> dict[str, tuple[float, float]]:
    """Mean and (population) stdev of every field over runs.

    The mean RepBias is recomputed from the formatted mean ratios so that the
    written report keeps ``rep_bias = rep_ratio - rep_ratio_gt`` digit for digit.
    """
    out = {}
    for key in METRIC_KEYS:
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = (float(np.mean(vals)), float(np.std(vals)) if len(vals) > 1 else 0.0)
    ratio, gt = Decimal(_fmt(out["rep_ratio"][0])), Decimal(_fmt(out["rep_ratio_gt"][0]))
    out["rep_bias"] = (float(ratio - gt), out["rep_bias"][1])
    return out


def report_text(reports: Sequence[EvalReport] | EvalReport, name: str = "model", config=None) -> str:
    if isinstance(reports, EvalReport):
        reports = [reports]
    stats = summarize(reports)
    lines = [f"model={name}", f"n_runs={len(reports)}"]
    if config is not None:
        lines += [f"config.{line}" for line in config.to_text().splitlines()]
    ratio, gt = Decimal(_fmt(stats["rep_ratio"][0])), Decimal(_fmt(stats["rep_ratio_gt"][0]))
    for key in METRIC_KEYS:
        mean, std = stats[key]
        if key == "rep_bias":
            value = f"{ratio - gt:.6f}"
        elif key.startswith("n_"):
            value = str(int(round(mean)))
        else:
            value = _fmt(mean)
        lines.append(f"{key}={value}")
        if not key.startswith("n_"):
            lines.append(f"{key}_std={_fmt(std)}")
    lines.append("")
    lines.append(f"RepRatio-GT = {_fmt(stats['rep_ratio_gt'][0])}%")
    lines.append("| Model | " + " | ".join(c for c, _ in TABLE_COLUMNS) + " |")
    lines.append("|" + "---|" * (len(TABLE_COLUMNS) + 1))
    cells = [f"{stats[k][0]:.2f} ± {stats[k][1]:.2f}" for _, k in TABLE_COLUMNS]
    lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, str]:
    values = {}
    for line in text.splitlines():
        if not line or line.startswith("|") or "=" not in line or " " in line.split("=", 1)[0]:
            continue
        key, value = line.split("=", 1)
        values[key] = value
    return values


def write_report(path: str | Path, reports, name: str = "model", config=None) -> Path:
    path = Path(path)
    path.write_text(report_text(reports, name, config), encoding="utf-8")
    return path
