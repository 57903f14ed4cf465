"""Privacy-leakage measurement: km errors, percentile curves, predictability
categories, per-user mobility analysis, the p sweep and non-learned baselines."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import EmptyReportError, GeoleakError, InvalidInputError
from .geosn import (
    NormalizationBounds,
    SnapshotSequence,
    Split,
    SplitAssignment,
    TargetMode,
    assign_splits,
    bounds_from_splits,
    build_examples,
    stack_examples,
)
from .graph import SocialGraph, SpectralOperator, normalized_laplacian
from . import neural


EARTH_RADIUS_KM = 6371.0088
DEFAULT_P_GRID = (0.01, 0.1, 0.3, 0.7, 0.9)


def haversine_km(a, b) -> float | np.ndarray:
    """Great-circle distance between ``(lat, lon)`` points in degrees.

    Works elementwise when the coordinates are arrays.
    """
    lat1, lon1 = (np.asarray(v, dtype=np.float64) for v in a)
    lat2, lon2 = (np.asarray(v, dtype=np.float64) for v in b)
    for lat, lon in ((lat1, lon1), (lat2, lon2)):
        if np.any(np.abs(lat) > 90.0) or np.any(np.abs(lon) > 180.0) \
                or not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
            raise InvalidInputError("coordinates out of range")
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2 - lon1)
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    return float(d) if d.ndim == 0 else d


def nearest_rank_percentiles(errors) -> dict[int, float]:
    """Percentiles 1..100 by nearest rank: the ceil(P/100 * n)-th smallest value."""
    e = np.sort(np.asarray(errors, dtype=np.float64))
    n = len(e)
    if n == 0:
        return {}
    return {q: float(e[max(math.ceil(q * n / 100), 1) - 1]) for q in range(1, 101)}


def categorize(errors, high_km: float = 1.0, poor_km: float = 7.0) -> dict[str, int]:
    """Highly (<= high_km), poorly (> poor_km) and average (the rest) predictable counts."""
    if isinstance(errors, EvalReport):
        errors = errors.errors_km
    e = np.asarray(errors, dtype=np.float64)
    highly = int(np.sum(e <= high_km))
    poorly = int(np.sum((e > poor_km) & ~(e <= high_km)))
    return {"highly": highly, "average": int(e.size) - highly - poorly, "poorly": poorly}


@dataclass
class EvalReport:
    errors_km: np.ndarray
    entries: list          # (target_slot, user) per error
    percentiles: dict
    mean_km: float
    pct_below_1km: float
    per_user: list
    category_counts: dict
    p: float | None = None

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "n_test": int(self.errors_km.size),
            "mean_km": self.mean_km,
            "pct_below_1km": self.pct_below_1km,
            "category_counts": self.category_counts,
            "percentiles": {str(k): v for k, v in self.percentiles.items()},
            "per_user": self.per_user,
            "errors": [{"slot": int(s), "user_id": int(u), "km": float(k)}
                       for (s, u), k in zip(self.entries, self.errors_km)],
        }


def user_coordinate_std(seq: SnapshotSequence) -> tuple[np.ndarray, np.ndarray]:
    """Per-user std (degrees) of all geo-tags over the full period; 0 under 2 geo-tags."""
    obs = seq.observed
    count = obs.sum(axis=0)
    std_lat = np.zeros(seq.n_users)
    std_lon = np.zeros(seq.n_users)
    for u in np.flatnonzero(count >= 2):
        std_lat[u] = np.std(seq.lat[obs[:, u], u])
        std_lon[u] = np.std(seq.lon[obs[:, u], u])
    return std_lat, std_lon


def evaluate(predictions, examples, seq: SnapshotSequence, norm: NormalizationBounds,
             p: float | None = None, audit: list | None = None) -> EvalReport:
    """Score normalized predictions on the TEST entries of every example.

    ``predictions`` is a (B, N, 2) array or a callable mapping the example
    list to one. If ``audit`` is a list, every scored ``(target_slot, user,
    split)`` is appended to it.
    """
    if callable(predictions):
        predictions = predictions(examples)
    predictions = np.asarray(predictions, dtype=np.float64)
    lat_p, lat_t, lon_p, lon_t, entries = [], [], [], [], []
    for b, ex in enumerate(examples):
        users = np.flatnonzero(ex.test_mask & ex.target.known)
        if users.size == 0:
            continue
        plat, plon = norm.denormalize(predictions[b, users, 0], predictions[b, users, 1])
        lat_p.append(plat)
        lon_p.append(plon)
        lat_t.append(seq.lat[ex.target_slot, users])
        lon_t.append(seq.lon[ex.target_slot, users])
        entries.extend((ex.target_slot, int(u)) for u in users)
        if audit is not None:
            audit.extend((ex.target_slot, int(u), "TEST" if ex.test_mask[u] else "OTHER") for u in users)
    if not entries:
        raise EmptyReportError("no TEST entries to evaluate")
    plat, plon = np.clip(np.concatenate(lat_p), -90, 90), np.clip(np.concatenate(lon_p), -180, 180)
    errors = haversine_km((plat, plon), (np.concatenate(lat_t), np.concatenate(lon_t)))
    errors = np.atleast_1d(errors)

    std_lat, std_lon = user_coordinate_std(seq)
    users = np.array([u for _, u in entries])
    per_user = []
    for u in np.unique(users):
        e = errors[users == u]
        per_user.append({"user_id": int(u), "std_lat": float(std_lat[u]), "std_lon": float(std_lon[u]),
                         "mean_error_km": float(e.mean()), "n_predictions": int(e.size)})
    return EvalReport(
        errors_km=errors,
        entries=entries,
        percentiles=nearest_rank_percentiles(errors),
        mean_km=float(errors.mean()),
        pct_below_1km=float(100.0 * np.mean(errors < 1.0)),
        per_user=per_user,
        category_counts=categorize(errors),
        p=p,
    )


def mobility_scatter(report: EvalReport, split_threshold_km: float | None = None) -> list[dict]:
    """Per-user (coordinate std, mean error) rows flagged against a km threshold.

    The threshold defaults to the run's overall mean error.
    """
    thr = report.mean_km if split_threshold_km is None else split_threshold_km
    return [{**row, "flag": "below" if row["mean_error_km"] <= thr else "above"}
            for row in report.per_user]


def fraction_below(rows) -> float:
    return float(np.mean([r["flag"] == "below" for r in rows])) if rows else 0.0


def subset_mean_km(report: EvalReport, users) -> float:
    """Mean error over the test entries that belong to ``users``."""
    keep = set(int(u) for u in users)
    sel = [k for (_, u), k in zip(report.entries, report.errors_km) if int(u) in keep]
    if not sel:
        raise EmptyReportError("no test entries for the requested users")
    return float(np.mean(sel))


# -- baselines ---------------------------------------------------------------

def training_centroid(seq: SnapshotSequence, splits: SplitAssignment,
                      norm: NormalizationBounds) -> np.ndarray:
    train = splits.labels == Split.TRAIN
    zlat, zlon = norm.normalize(seq.lat[train], seq.lon[train])
    return np.array([zlat.mean(), zlon.mean()])


def baseline_last_known(examples, centroid) -> np.ndarray:
    """Each user's latest visible geo-tag; users with none get the training centroid."""
    out = np.empty((len(examples), examples[0].features.values.shape[1], 2))
    for b, ex in enumerate(examples):
        last = ex.features.values[-1, :, :2]
        out[b] = np.where(ex.features.mask[-1][:, None], last, np.asarray(centroid)[None, :])
    return out


def baseline_friend_centroid(examples, graph: SocialGraph, centroid) -> np.ndarray:
    """Mean of friends' current imputed locations, falling back to last-known."""
    fallback = baseline_last_known(examples, centroid)
    adj = graph.adjacency
    out = np.empty_like(fallback)
    for b, ex in enumerate(examples):
        m = ex.features.mask[-1].astype(np.float64)
        loc = ex.features.values[-1, :, :2]
        total = adj @ (loc * m[:, None])
        count = adj @ m
        has = count > 0
        out[b] = fallback[b]
        out[b, has] = total[has] / count[has, None]
    return out


# -- sweep -------------------------------------------------------------------

@dataclass
class PreparedRun:
    seq: SnapshotSequence
    splits: SplitAssignment
    norm: NormalizationBounds
    examples: list


def prepare_run(seq: SnapshotSequence, p: float, seed: int, n_ts: int,
                target_mode=TargetMode.NEXT_SLOT) -> PreparedRun:
    splits = assign_splits(seq, p, seed)
    norm = bounds_from_splits(seq, splits)
    return PreparedRun(seq, splits, norm, build_examples(seq, n_ts, splits, norm, target_mode))


def model_predictor(params, cfg: neural.ModelConfig, op: SpectralOperator):
    def predict(examples):
        x = np.stack([e.features.values for e in examples])
        return neural.predict_batch(x, op, params, cfg)
    return predict


@dataclass
class CellResult:
    p: float
    seed: int
    report: EvalReport | None = None
    error: str | None = None
    train_log: list = field(default_factory=list)


def run_cell(seq, graph, p, seed, model_cfg: neural.ModelConfig,
             target_mode=TargetMode.NEXT_SLOT, op=None) -> CellResult:
    """Fresh split, fresh training and evaluation for one (p, seed)."""
    try:
        op = op if op is not None else normalized_laplacian(graph)
        cfg = replace(model_cfg, seed=seed)
        run = prepare_run(seq, p, seed, cfg.n_ts, target_mode)
        if not any(e.test_mask.any() for e in run.examples):
            raise EmptyReportError(f"p={p} leaves no TEST entries")
        result = neural.train(run.examples, op, cfg)
        report = evaluate(model_predictor(result.params, cfg, op), run.examples, seq, run.norm, p=p)
        return CellResult(p, seed, report, None, result.log)
    except GeoleakError as exc:
        return CellResult(p, seed, None, f"{exc.category}: {exc}")


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class SweepResult:
    cells: dict  # (p, seed) -> CellResult

    @property
    def errors(self) -> dict:
        return {k: c.error for k, c in self.cells.items() if c.error}

    def mean_by_p(self) -> dict[float, dict]:
        out = {}
        for p in sorted({k[0] for k in self.cells}):
            reps = [c.report for k, c in sorted(self.cells.items()) if k[0] == p and c.report]
            if reps:
                out[p] = {"mean_km": float(np.mean([r.mean_km for r in reps])),
                          "pct_below_1km": float(np.mean([r.pct_below_1km for r in reps])),
                          "n_seeds": len(reps)}
        return out


def critical_mass_sweep(seq, graph, p_values=DEFAULT_P_GRID, model_cfg=None, seeds=(1, 2, 3),
                        target_mode=TargetMode.NEXT_SLOT, jobs: int = 1, skip=()) -> SweepResult:
    """Retrain from scratch for every (p, seed); ``skip`` lists cells already done."""
    model_cfg = model_cfg or neural.ModelConfig()
    for p in p_values:
        if not 0.0 < p <= 1.0:
            raise InvalidInputError(f"p must lie in (0, 1], got {p}")
    todo = [(float(p), int(s)) for p in sorted(p_values) for s in sorted(seeds)
            if (float(p), int(s)) not in set(skip)]
    if jobs > 1 and len(todo) > 1:
        args = [(seq, graph, p, s, model_cfg, target_mode) for p, s in todo]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_args, args))
    else:
        op = normalized_laplacian(graph)
        results = [run_cell(seq, graph, p, s, model_cfg, target_mode, op) for p, s in todo]
    return SweepResult({(r.p, r.seed): r for r in results})


# -- report files ------------------------------------------------------------

def write_report_json(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")


def write_percentiles_csv(report: EvalReport, path) -> None:
    lines = ["percentile,km\n"] + [f"{q},{v:.6f}\n" for q, v in sorted(report.percentiles.items())]
    Path(path).write_text("".join(lines))


def write_mobility_csv(rows, path) -> None:
    lines = ["user_id,std_lat,std_lon,mean_error_km,flag\n"]
    lines += [f"{r['user_id']},{r['std_lat']:.8f},{r['std_lon']:.8f},{r['mean_error_km']:.6f},{r['flag']}\n"
              for r in rows]
    Path(path).write_text("".join(lines))


SWEEP_HEADER = "p,seed,mean_km,pct_below_1km"


def read_sweep_csv(path) -> dict:
    rows = {}
    if not Path(path).exists():
        return rows
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows[(float(row["p"]), int(row["seed"]))] = (float(row["mean_km"]), float(row["pct_below_1km"]))
    return rows


def write_sweep_csv(rows: dict, path) -> None:
    """``rows`` maps (p, seed) -> (mean_km, pct_below_1km); written in sorted key order."""
    lines = [SWEEP_HEADER + "\n"]
    lines += [f"{p:g},{s},{m:.6f},{pct:.4f}\n" for (p, s), (m, pct) in sorted(rows.items())]
    Path(path).write_text("".join(lines))
