"""``geoleak`` command line: generate, ingest, train, evaluate, sweep.

Settings come from built-in defaults, then ``--config FILE`` (flat
``key = value`` lines), then the ``GEOLEAK_SEED`` variable, then flags such
as ``--n-users 100``. Each command writes the resolved configuration to
``config.txt`` in its output directory. Errors print
``ERROR:<category>: message`` on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import geosn, neural, synth
from .config import RunConfig, resolve
from .errors import ConfigMismatchError, GeoleakError, InvalidInputError
from .graph import graph_statistics, normalized_laplacian, read_edge_list, write_edge_list

log = logging.getLogger("geoleak")

COMMANDS = ("generate", "ingest", "train", "evaluate", "sweep")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoleak", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="flat key = value file")
        cmd.add_argument("-v", "--verbose", action="store_true")
        for f in fields(RunConfig):
            cmd.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None)
    return parser


# -- helpers -----------------------------------------------------------------

def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: str, what: str) -> Path:
    if not path:
        raise InvalidInputError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise InvalidInputError(f"{what} file not found: {p}")
    return p


def _load_sequence(cfg: RunConfig):
    tweets = synth.ingest(_require(cfg.tweets, "tweets"), cfg.tweet_format)
    graph = read_edge_list(_require(cfg.graph, "graph"))
    seq = geosn.discretize(tweets, cfg.t_start, cfg.slot_duration_s, cfg.n_slots, graph.n_users)
    return seq, graph


def _warn(msg: str) -> None:
    print(f"WARNING: {msg}", file=sys.stderr)


# -- commands ----------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> None:
    scfg = cfg.synth_config()
    graph, models, tweets = synth.generate(scfg)
    out = _out_dir(cfg)
    suffix = "jsonl" if cfg.tweet_format.lower() == "jsonl" else "csv"
    synth.write_tweets(tweets, out / f"tweets.{suffix}", suffix)
    write_edge_list(graph, out / "graph.tsv")
    mobility = [{"user_id": u, "kind": m.kind.value, "home": list(m.home),
                 "anchors": [list(a) for a in m.anchors], "wander_std_km": m.wander_std_km}
                for u, m in enumerate(models)]
    (out / "mobility.json").write_text(json.dumps(mobility, indent=1) + "\n")
    (out / "graph_stats.json").write_text(json.dumps(graph_statistics(graph), indent=1, sort_keys=True) + "\n")
    cfg.write(out)
    print(f"wrote {len(tweets)} tweets and {len(graph.friend_edges)} friendships to {out}")


def cmd_ingest(cfg: RunConfig) -> None:
    path = _require(cfg.tweets, "tweets")
    records, bad = synth.read_tweets(path, cfg.tweet_format)
    synth.ingest(path, cfg.tweet_format)  # applies the malformed-row limit
    n_users = max((r.user_id for r in records), default=-1) + 1
    if cfg.graph:
        n_users = max(n_users, read_edge_list(_require(cfg.graph, "graph")).n_users)
    seq = geosn.discretize(records, cfg.t_start, cfg.slot_duration_s, cfg.n_slots, n_users)
    summary = {
        "n_records": len(records),
        "n_geotagged": sum(r.has_geotag for r in records),
        "n_malformed": len(bad),
        "malformed_lines": [n for n, _ in bad[:10]],
        "n_users": n_users,
        "n_slots": seq.n_slots,
        "n_outside_slots": seq.n_skipped,
        "observed_cells": int(seq.observed.sum()),
    }
    out = _out_dir(cfg)
    (out / "ingest_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    cfg.write(out)
    print(json.dumps(summary, sort_keys=True))


def cmd_train(cfg: RunConfig) -> None:
    seq, graph = _load_sequence(cfg)
    mcfg = cfg.model_config()
    run = ev.prepare_run(seq, cfg.p, cfg.seed, cfg.n_ts, cfg.mode)
    if cfg.p >= 1.0:
        _warn("p = 1 leaves the validation set empty; patience is ignored and the final weights are kept")
    op = normalized_laplacian(graph)
    progress = None
    if log.isEnabledFor(logging.INFO):
        progress = lambda row: log.info("epoch %d train %.6f val %s", row["epoch"], row["train_loss"], row["val_loss"])
    result = neural.train(run.examples, op, mcfg, progress=progress)
    out = _out_dir(cfg)
    neural.save_checkpoint(out / "checkpoint.json", mcfg, result.params, run.norm, result.adam,
                           pipeline=cfg.pipeline())
    lines = ["epoch,train_loss,val_loss"]
    for row in result.log:
        val = "" if row["val_loss"] is None else repr(row["val_loss"])
        lines.append(f"{row['epoch']},{row['train_loss']!r},{val}")
    (out / "train_log.csv").write_text("\n".join(lines) + "\n")
    cfg.write(out)
    print(f"trained {len(result.log)} epochs (best epoch {result.best_epoch}); checkpoint in {out}")


def _check_checkpoint(cfg: RunConfig, ck: neural.Checkpoint) -> None:
    want = cfg.model_config().architecture()
    have = ck.cfg.architecture()
    diffs = [k for k in want if want[k] != have[k]]
    stored = ck.pipeline or {}
    diffs += [k for k, v in cfg.pipeline().items() if k in stored and stored[k] != v]
    if diffs:
        detail = ", ".join(f"{k}: config {getattr(cfg, k, want.get(k))!r} vs checkpoint "
                           f"{stored.get(k, have.get(k))!r}" for k in diffs)
        raise ConfigMismatchError(f"configuration disagrees with the checkpoint ({detail})")


def cmd_evaluate(cfg: RunConfig) -> None:
    ck = neural.load_checkpoint(_require(cfg.checkpoint, "checkpoint"))
    _check_checkpoint(cfg, ck)
    seq, graph = _load_sequence(cfg)
    run = ev.prepare_run(seq, cfg.p, cfg.seed, cfg.n_ts, cfg.mode)
    norm = ck.norm if ck.norm is not None else run.norm
    op = normalized_laplacian(graph)
    report = ev.evaluate(ev.model_predictor(ck.params, ck.cfg, op), run.examples, seq, norm, p=cfg.p)
    report.category_counts = ev.categorize(report, cfg.high_km, cfg.poor_km)
    threshold = None if cfg.split_threshold_km < 0 else cfg.split_threshold_km
    rows = ev.mobility_scatter(report, threshold)
    centroid = ev.training_centroid(seq, run.splits, norm)
    baselines = {
        "last_known": ev.evaluate(ev.baseline_last_known(run.examples, centroid), run.examples, seq, norm).mean_km,
        "friend_centroid": ev.evaluate(ev.baseline_friend_centroid(run.examples, graph, centroid),
                                       run.examples, seq, norm).mean_km,
    }
    out = _out_dir(cfg)
    blob = report.to_dict()
    blob["fraction_users_below_threshold"] = ev.fraction_below(rows)
    blob["baselines_mean_km"] = baselines
    (out / "report.json").write_text(json.dumps(blob, indent=1, sort_keys=True) + "\n")
    ev.write_percentiles_csv(report, out / "percentiles.csv")
    ev.write_mobility_csv(rows, out / "mobility.csv")
    cfg.write(out)
    print(f"mean {report.mean_km:.3f} km, {report.pct_below_1km:.2f}% below 1 km over "
          f"{report.errors_km.size} test entries")


def cmd_sweep(cfg: RunConfig) -> None:
    seq, graph = _load_sequence(cfg)
    out = _out_dir(cfg)
    path = out / "sweep.csv"
    done = ev.read_sweep_csv(path)
    wanted = {(p, s) for p in cfg.p_grid for s in cfg.seed_list}
    skip = {k for k in done if k in wanted}
    if skip:
        print(f"resuming: {len(skip)} of {len(wanted)} cells already in {path}")
    result = ev.critical_mass_sweep(seq, graph, cfg.p_grid, cfg.model_config(), cfg.seed_list,
                                    cfg.mode, jobs=cfg.jobs, skip=skip)
    rows = dict(done)
    for key, cell in result.cells.items():
        if cell.report is not None:
            rows[key] = (cell.report.mean_km, cell.report.pct_below_1km)
    ev.write_sweep_csv(rows, path)
    cfg.write(out)
    for p in sorted({k[0] for k in rows}):
        vals = [rows[k][0] for k in rows if k[0] == p]
        print(f"p={p:g}: mean {np.mean(vals):.3f} km over {len(vals)} seeds")
    failed = result.errors
    if failed:
        (p, s), msg = sorted(failed.items())[0]
        category, _, text = msg.partition(": ")
        raise _CellError(category, f"{len(failed)} sweep cell(s) failed; first (p={p:g}, seed={s}): {text}")


class _CellError(GeoleakError):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


HANDLERS = {"generate": cmd_generate, "ingest": cmd_ingest, "train": cmd_train,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s:%(name)s: %(message)s", stream=sys.stderr)
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)
                 if getattr(args, f.name) is not None}
    try:
        cfg = resolve(args.config, overrides)
        HANDLERS[args.command](cfg)
    except GeoleakError as exc:
        print(f"ERROR:{exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ERROR:io: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
