"""Command-line entry point: ``relisten <subcommand> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from relisten.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from relisten.config import ConfigError, RunConfig, load_config, parse_config_text
from relisten.dataio import ParseError, Session, SessionSequence, read_events
from relisten.dataset import BUNDLE_FILE, build_dataset, load_bundle, save_bundle
from relisten.metrics import evaluate, write_report
from relisten.model import Featurizer
from relisten.recsys import BaselineRecommender, ModelRecommender, OracleRecommender
from relisten.synth import PROFILES, write_synthetic
from relisten.training import TrainingDiverged, train

log = logging.getLogger("relisten")

BEST = "model.ckpt"
LAST = "last.ckpt"
BASELINES = ("g-top", "p-top", "actr-repeat", "oracle")


class UsageError(Exception):
    pass


def _overrides(args) -> dict[str, str]:
    values: dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return values


def _config(args, base: RunConfig | None = None) -> RunConfig:
    """base (e.g. a bundle's stored config) < --config file < --set / --seed."""
    values = {} if base is None else {k: v for k, v in base.to_dict().items()}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(encoding="utf-8")))
    values.update(_overrides(args))
    return RunConfig.from_dict(values) if values else load_config()


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bundle(args):
    path = Path(args.bundle)
    if not (path / BUNDLE_FILE if path.is_dir() else path).is_file():
        raise FileNotFoundError(f"bundle not found: {path}")
    stored = load_bundle(path)
    return load_bundle(path, _config(args, stored.config))


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# -- subcommands -----------------------------------------------------------

def cmd_ingest(args) -> int:
    events_path = _require(args.events, "events file")
    config = _config(args)
    events = read_events(events_path, config.malformed_tolerance)
    if events.skipped:
        log.warning("skipped %d malformed lines", events.skipped)
    ds = build_dataset(events, config)
    path = save_bundle(ds, _out_dir(args))
    for key, value in ds.summary().items():
        print(f"{key}={value}")
    print(f"bundle={path}")
    return 0


def cmd_synth(args) -> int:
    profile = PROFILES[args.profile]
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    for key in ("p_rep", "n_users", "n_sessions", "n_songs", "popularity_skew", "repeat_law"):
        value = getattr(args, key)
        if value is not None:
            changes[key] = value
    profile = dataclasses.replace(profile, **changes)
    path = write_synthetic(_out_dir(args) / args.name, profile)
    print(f"events={path}")
    return 0


def _run_names(n_runs: int, i: int) -> tuple[str, str, str]:
    suffix = "" if n_runs == 1 else f"-{i}"
    return f"model{suffix}.ckpt", f"last{suffix}.ckpt", f"train_log{suffix}.txt"


def cmd_train(args) -> int:
    """Train ``n_runs`` models with seeds ``seed, seed+1, ...``."""
    ds = _bundle(args)
    config = ds.config
    out = _out_dir(args)
    model = adam = None
    start = 0
    if args.resume:
        ckpt = load_checkpoint(_require(args.resume, "resume checkpoint"), ds.catalog_hash)
        # the checkpoint's settings win over the bundle's; explicit flags win over both
        config = _config(args, ckpt.model.config)
        if config.d != ckpt.model.config.d:
            raise ConfigError(f"cannot resume a d={ckpt.model.config.d} checkpoint with d={config.d}")
        if config.n_runs != 1:
            raise UsageError("--resume continues a single run; set n_runs=1")
        ds.config = config
        model, adam, start = ckpt.model, ckpt.adam, ckpt.epoch
        model.config = config
    for i in range(config.n_runs):
        run_cfg = config.replace(seed=config.seed + i)
        best, last, log_name = _run_names(config.n_runs, i)
        try:
            res = train(ds, run_cfg, model=model, adam=adam, log_path=out / log_name, start_epoch=start)
        except TrainingDiverged as exc:
            if exc.last_good is not None:
                save_checkpoint(out / best, Checkpoint(exc.last_good, ds.catalog_hash))
            raise
        save_checkpoint(out / best, Checkpoint(res.model, ds.catalog_hash, res.best_epoch))
        save_checkpoint(out / last, Checkpoint(res.final_model, ds.catalog_hash, res.epochs_run, res.adam))
        print(f"run={i} seed={run_cfg.seed} best_epoch={res.best_epoch} epochs_run={res.epochs_run}")
        print(f"checkpoint={out / best}")
    return 0


def _recommenders(args, ds) -> tuple[str, list, RunConfig]:
    """(name, one recommender per run, config echoed in the report)."""
    if args.baseline and args.checkpoint:
        raise UsageError("give either --checkpoint or --baseline, not both")
    if args.baseline == "oracle":
        return "oracle", [OracleRecommender(ds.n_songs)], ds.config
    if args.baseline:
        return args.baseline, [BaselineRecommender(args.baseline, ds)], ds.config
    if not args.checkpoint:
        raise UsageError("--checkpoint or --baseline is required")
    featurizer = Featurizer.for_dataset(ds)
    out = []
    for path in args.checkpoint:
        ckpt = load_checkpoint(_require(path, "checkpoint"), ds.catalog_hash)
        ckpt.model.config = dataclasses.replace(ckpt.model.config, **_runtime_fields(ds.config))
        out.append(ModelRecommender(ckpt.model, featurizer))
    return "model", out, out[0].model.config


def _runtime_fields(config: RunConfig) -> dict:
    # evaluation-time settings come from the current run, not the checkpoint
    return {"k": config.k, "n_top": config.n_top, "alpha": config.alpha, "time_unit": config.time_unit}


def cmd_evaluate(args) -> int:
    ds = _bundle(args)
    name, recs, config = _recommenders(args, ds)
    seqs = getattr(ds.splits, args.split)
    if not seqs:
        raise UsageError(f"split {args.split!r} is empty")
    reports = [evaluate(rec, seqs, ds, args.K or ds.config.k) for rec in recs]
    path = write_report(_out_dir(args) / args.report, reports, name, config)
    print(path.read_text(encoding="utf-8"), end="")
    return 0


def _latest_sequence(ds, user: str, at: int | None) -> SessionSequence:
    sessions = ds.sessions.get(user)
    if not sessions:
        raise UsageError(f"unknown user {user!r}")
    history = tuple(sessions[-ds.config.L :])
    t = history[-1].end_time + ds.config.gap_seconds if at is None else at
    if t <= history[-1].end_time:
        raise UsageError("--at must lie after the user's last session")
    return SessionSequence(user, history, Session(history[-1].songs, t, t))


def cmd_recommend(args) -> int:
    ds = _bundle(args)
    _, recs, _ = _recommenders(args, ds)
    rec = recs[0]
    users = args.user or sorted(ds.sessions)
    seqs = [_latest_sequence(ds, u, args.at) for u in users if ds.sessions.get(u) or args.user]
    K = args.K or ds.config.k
    ids = ds.catalog.song_ids
    for seq, lst in zip(seqs, rec.recommend_many(seqs, K)):
        print(seq.user + "\t" + ",".join(f"{ids[s]}:{v:.6f}" for s, v in zip(lst.songs, lst.scores)))
    return 0


def cmd_stats(args) -> int:
    ds = _bundle(args)
    for key, value in ds.summary().items():
        print(f"{key}={value}")
    sizes = [len(s) for v in ds.sessions.values() for s in v]
    print(f"mean_session_len={sum(sizes) / max(1, len(sizes)):.6f}")
    for name in ("train", "validation", "test"):
        seqs = getattr(ds.splits, name)
        if not seqs:
            continue
        rep = [
            len(set(q.target.songs) & ds.history.heard_before(q.user, q.target.start_time)) / len(q.target)
            for q in seqs
        ]
        print(f"{name}.rep_ratio_gt={100 * sum(rep) / len(rep):.6f}")
    if args.dump_correlation:
        from relisten.actr import dump_correlation

        dump_correlation(ds.cooccurrence, args.dump_correlation)
    if args.json:
        print(json.dumps(ds.summary(), sort_keys=True))
    return 0


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default=".", help="directory for written artifacts")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="relisten", description="Repeat-aware session recommender.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="events file -> dataset bundle")
    p.add_argument("events")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic events file")
    p.add_argument("--profile", choices=sorted(PROFILES), default="repeat")
    p.add_argument("--name", default="events.tsv")
    p.add_argument("--p-rep", dest="p_rep", type=float)
    p.add_argument("--n-users", dest="n_users", type=int)
    p.add_argument("--n-sessions", dest="n_sessions", type=int)
    p.add_argument("--n-songs", dest="n_songs", type=int)
    p.add_argument("--popularity-skew", dest="popularity_skew", type=float)
    p.add_argument("--repeat-law", dest="repeat_law", choices=["count", "activation"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train on a bundle")
    p.add_argument("bundle")
    p.add_argument("--resume", help="checkpoint with optimizer state to continue from")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("evaluate", cmd_evaluate, "score a checkpoint or baseline on a split"),
        ("recommend", cmd_recommend, "print top-K lists for users"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("bundle")
        p.add_argument("--checkpoint", action="append", help="repeat to average runs (evaluate)")
        p.add_argument("--baseline", choices=BASELINES)
        p.add_argument("-K", type=int)
        p.set_defaults(func=func)
    sub.choices["evaluate"].add_argument("--split", choices=["train", "validation", "test"], default="test")
    sub.choices["evaluate"].add_argument("--report", default="report.txt")
    sub.choices["recommend"].add_argument("--user", action="append")
    sub.choices["recommend"].add_argument("--at", type=int, help="timestamp of the session to recommend for")

    p = sub.add_parser("stats", parents=[common], help="summary counts of a bundle")
    p.add_argument("bundle")
    p.add_argument("--dump-correlation", metavar="PATH")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"relisten {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"relisten {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
