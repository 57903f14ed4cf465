"""Synthetic social graphs and socially correlated mobility traces, plus tweet file I/O.

The generator stands in for the private NYC Twitter data at desk scale:
a Watts-Strogatz friendship graph, users grouped into spatial communities
along the ring (so friends tend to live near each other), and per-slot
locations that either follow the user's own anchors or join a random
friend's current anchor.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import rng
from .errors import IngestionError, InvalidParameterError
from .geosn import TweetRecord
from .graph import SocialGraph
from .evaluation import EARTH_RADIUS_KM, haversine_km

log = logging.getLogger(__name__)

KM_PER_DEG = EARTH_RADIUS_KM * math.pi / 180.0


@dataclass
class SynthConfig:
    n_users: int = 200
    mean_degree: int = 10
    rewiring_prob: float = 0.1
    center_lat: float = 40.7128
    center_lon: float = -74.0060
    radius_km: float = 100.0
    n_slots: int = 248
    slot_duration_s: int = 10800
    t_start: int = 1262304000  # 2010-01-01T00:00:00Z
    tweets_per_user_per_slot_rate: float = 1.0
    fraction_stationary: float = 0.6
    co_location_prob: float = 0.5
    geotag_prob: float = 1.0
    community_size: int = 20
    community_spread_km: float = 2.0
    community_center_std_km: float = 15.0
    anchor_spread_km: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.radius_km <= 0:
            raise InvalidParameterError("radius_km must be positive")
        for name in ("rewiring_prob", "fraction_stationary", "co_location_prob", "geotag_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidParameterError(f"{name} must lie in [0, 1], got {v}")
        if self.tweets_per_user_per_slot_rate < 0:
            raise InvalidParameterError("tweets_per_user_per_slot_rate must be >= 0")
        if self.n_users < 1 or self.n_slots < 1 or self.community_size < 1:
            raise InvalidParameterError("n_users, n_slots and community_size must be >= 1")


class MobilityKind(str, enum.Enum):
    STATIONARY = "stationary"
    MOBILE = "mobile"


WANDER_KM = {MobilityKind.STATIONARY: 0.3, MobilityKind.MOBILE: 3.0}


@dataclass
class MobilityModel:
    kind: MobilityKind
    home: tuple[float, float]
    anchors: list[tuple[float, float]] = field(default_factory=list)
    wander_std_km: float = 0.3

    def __post_init__(self):
        if not self.anchors:
            self.anchors = [self.home]


# -- local planar geometry ---------------------------------------------------

def _to_km(cfg: SynthConfig, lat, lon):
    y = (np.asarray(lat) - cfg.center_lat) * KM_PER_DEG
    x = (np.asarray(lon) - cfg.center_lon) * KM_PER_DEG * math.cos(math.radians(cfg.center_lat))
    return x, y


def _to_deg(cfg: SynthConfig, x, y):
    lat = cfg.center_lat + np.asarray(y) / KM_PER_DEG
    lon = cfg.center_lon + np.asarray(x) / (KM_PER_DEG * math.cos(math.radians(cfg.center_lat)))
    return lat, lon


def in_bbox(cfg: SynthConfig, lat, lon) -> np.ndarray:
    """Great-circle test against the bbox radius."""
    return haversine_km((lat, lon), (cfg.center_lat, cfg.center_lon)) <= cfg.radius_km


def _inside_xy(cfg: SynthConfig, xy) -> np.ndarray:
    xy = np.asarray(xy)
    return in_bbox(cfg, *_to_deg(cfg, xy[..., 0], xy[..., 1]))


def _sample_near(gen, cfg, center_xy, std_km, limit_km, tries=100):
    for _ in range(tries):
        p = np.asarray(center_xy) + gen.normal(0.0, std_km, size=2)
        if np.hypot(*p) <= limit_km and _inside_xy(cfg, p):
            return p
    return np.asarray(center_xy, dtype=np.float64)


# -- graph -------------------------------------------------------------------

def generate_graph(cfg: SynthConfig, max_tries: int = 100) -> SocialGraph:
    """Connected Watts-Strogatz graph emitted as mutual follow pairs."""
    n, k = cfg.n_users, cfg.mean_degree
    if k >= n:
        raise InvalidParameterError(f"mean_degree={k} must be < n_users={n}")
    if k % 2 or k < 2:
        raise InvalidParameterError(f"mean_degree must be even and >= 2, got {k}")
    for attempt in range(max_tries):
        edges = _watts_strogatz(n, k, cfg.rewiring_prob, rng.generator(cfg.seed, rng.GRAPH, attempt))
        graph = SocialGraph.from_friendships(n, edges)
        if _connected(graph):
            return graph
    raise InvalidParameterError("could not draw a connected small-world graph; lower rewiring_prob")


def _watts_strogatz(n, k, beta, gen):
    adj = [set() for _ in range(n)]
    for u in range(n):
        for j in range(1, k // 2 + 1):
            v = (u + j) % n
            adj[u].add(v)
            adj[v].add(u)
    for j in range(1, k // 2 + 1):
        for u in range(n):
            v = (u + j) % n
            if v not in adj[u] or gen.random() >= beta:
                continue
            if len(adj[u]) >= n - 1:
                continue
            w = int(gen.integers(n))
            while w == u or w in adj[u]:
                w = int(gen.integers(n))
            adj[u].discard(v)
            adj[v].discard(u)
            adj[u].add(w)
            adj[w].add(u)
    return [(u, v) for u in range(n) for v in adj[u] if u < v]


def _connected(graph: SocialGraph) -> bool:
    from scipy.sparse import csgraph
    n_comp, _ = csgraph.connected_components(graph.adjacency, directed=False)
    return n_comp == 1


# -- mobility ----------------------------------------------------------------

def make_mobility_models(cfg: SynthConfig) -> list[MobilityModel]:
    """Homes cluster by community (contiguous runs of users along the ring)."""
    limit = cfg.radius_km
    n_comm = -(-cfg.n_users // cfg.community_size)
    centers = []
    for c in range(n_comm):
        g = rng.generator(cfg.seed, rng.MOBILITY, 0, c)
        centers.append(_sample_near(g, cfg, (0.0, 0.0), cfg.community_center_std_km, 0.8 * limit))
    models = []
    for u in range(cfg.n_users):
        g = rng.generator(cfg.seed, rng.MOBILITY, 1, u)
        center = centers[u // cfg.community_size]
        home_xy = _sample_near(g, cfg, center, cfg.community_spread_km, limit)
        home = tuple(float(v) for v in _to_deg(cfg, *home_xy))
        if g.random() < cfg.fraction_stationary:
            models.append(MobilityModel(MobilityKind.STATIONARY, home, [home],
                                        WANDER_KM[MobilityKind.STATIONARY]))
            continue
        anchors = [home]
        for _ in range(int(g.integers(1, 5))):
            xy = _sample_near(g, cfg, center, cfg.anchor_spread_km, limit)
            anchors.append(tuple(float(v) for v in _to_deg(cfg, *xy)))
        models.append(MobilityModel(MobilityKind.MOBILE, home, anchors,
                                    WANDER_KM[MobilityKind.MOBILE]))
    return models


def slot_locations(graph: SocialGraph, models, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """True (lat, lon) of every user in every slot, each of shape (n_slots, n_users)."""
    n, m = graph.n_users, cfg.n_slots
    if len(models) != n:
        raise InvalidParameterError("need one mobility model per user")
    anchor_xy = np.empty((m, n, 2))
    for u, mm in enumerate(models):
        g = rng.generator(cfg.seed, rng.TRACES, u, 0)
        pts = np.array([_to_km(cfg, a[0], a[1]) for a in mm.anchors])
        if mm.kind is MobilityKind.STATIONARY or len(pts) == 1:
            anchor_xy[:, u] = pts[0]
        else:
            anchor_xy[:, u] = pts[g.integers(len(pts), size=m)]
    out = np.empty((m, n, 2))
    for u, mm in enumerate(models):
        g = rng.generator(cfg.seed, rng.TRACES, u, 1)
        friends = graph.neighbors(u)
        join = g.random(m) < cfg.co_location_prob
        pick = g.integers(max(len(friends), 1), size=m)
        base = anchor_xy[:, u].copy()
        if len(friends):
            base[join] = anchor_xy[join, friends[pick[join]]]
        pos = base + g.normal(0.0, mm.wander_std_km, size=(m, 2))
        for s in np.flatnonzero(~_inside_xy(cfg, pos)):
            pos[s] = _sample_near(g, cfg, base[s], mm.wander_std_km, cfg.radius_km)
        out[:, u] = pos
    lat, lon = _to_deg(cfg, out[..., 0], out[..., 1])
    return lat, lon


def generate_traces(graph: SocialGraph, models, cfg: SynthConfig) -> list[TweetRecord]:
    """Poisson tweets per (user, slot), each geo-tagged with probability ``geotag_prob``."""
    lat, lon = slot_locations(graph, models, cfg)
    dt = cfg.slot_duration_s
    records = []
    for u in range(graph.n_users):
        g = rng.generator(cfg.seed, rng.TRACES, u, 2)
        counts = g.poisson(cfg.tweets_per_user_per_slot_rate, size=cfg.n_slots)
        total = int(counts.sum())
        offsets = np.floor(g.random(total) * dt).astype(np.int64)
        tagged = g.random(total) < cfg.geotag_prob
        slots = np.repeat(np.arange(cfg.n_slots), counts)
        for s, off, tag in zip(slots, offsets, tagged):
            ts = cfg.t_start + int(s) * dt + int(off)
            if tag:
                records.append(TweetRecord(u, ts, float(lat[s, u]), float(lon[s, u])))
            else:
                records.append(TweetRecord(u, ts))
    records.sort(key=lambda r: (r.timestamp, r.user_id))
    return records


def generate(cfg: SynthConfig):
    graph = generate_graph(cfg)
    models = make_mobility_models(cfg)
    return graph, models, generate_traces(graph, models, cfg)


# -- tweet files -------------------------------------------------------------

FIELDS = ("user_id", "timestamp_iso8601", "lat", "lon")
MALFORMED_LIMIT = 0.01


def _fmt_time(ts: float) -> str:
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    if float(ts).is_integer():
        return dt.strftime("%Y-%m-%dT%H:%M:%SZ")
    return dt.isoformat().replace("+00:00", "Z")


def _parse_time(text: str) -> float:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _infer_format(path, fmt):
    if fmt:
        return fmt.lower()
    suffix = Path(path).suffix.lower()
    return "jsonl" if suffix in (".jsonl", ".json") else "csv"


def write_tweets(records, path, fmt: str | None = None) -> None:
    fmt = _infer_format(path, fmt)
    with open(path, "w", newline="") as fh:
        if fmt == "csv":
            fh.write(",".join(FIELDS) + "\n")
            for r in records:
                la = repr(r.lat) if r.has_geotag else ""
                lo = repr(r.lon) if r.has_geotag else ""
                fh.write(f"{r.user_id},{_fmt_time(r.timestamp)},{la},{lo}\n")
        elif fmt == "jsonl":
            for r in records:
                fh.write(json.dumps({"user_id": r.user_id, "timestamp_iso8601": _fmt_time(r.timestamp),
                                     "lat": r.lat, "lon": r.lon}) + "\n")
        else:
            raise InvalidParameterError(f"unknown tweet format {fmt!r}")


def _record(raw: dict) -> TweetRecord:
    user = int(str(raw["user_id"]).strip())
    if user < 0:
        raise ValueError("negative user id")
    ts = _parse_time(str(raw["timestamp_iso8601"]))
    lat, lon = raw.get("lat"), raw.get("lon")
    lat = None if lat is None or str(lat).strip() == "" else float(lat)
    lon = None if lon is None or str(lon).strip() == "" else float(lon)
    return TweetRecord(user, ts, lat, lon)


def read_tweets(path, fmt: str | None = None) -> tuple[list[TweetRecord], list[tuple[int, str]]]:
    """Parse a tweet file, returning the records and ``(line, reason)`` for bad rows."""
    fmt = _infer_format(path, fmt)
    records, bad = [], []
    with open(path, newline="") as fh:
        if fmt == "csv":
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return records, bad
            header = [h.strip() for h in header]
            if tuple(header) != FIELDS:
                raise IngestionError(f"{path}: expected header {','.join(FIELDS)}, got {','.join(header)}")
            rows = ((i, row) for i, row in enumerate(reader, 2))
            for lineno, row in rows:
                if not row:
                    continue
                try:
                    if len(row) != len(FIELDS):
                        raise ValueError(f"expected {len(FIELDS)} fields, got {len(row)}")
                    records.append(_record(dict(zip(FIELDS, row))))
                except (ValueError, KeyError) as exc:
                    bad.append((lineno, str(exc)))
        elif fmt == "jsonl":
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                    if not isinstance(raw, dict):
                        raise ValueError("row is not an object")
                    records.append(_record(raw))
                except (ValueError, KeyError, TypeError) as exc:
                    bad.append((lineno, str(exc)))
        else:
            raise InvalidParameterError(f"unknown tweet format {fmt!r}")
    return records, bad


def ingest(path, fmt: str | None = None) -> list[TweetRecord]:
    """Read tweets, tolerating up to 1% malformed rows."""
    records, bad = read_tweets(path, fmt)
    total = len(records) + len(bad)
    if bad:
        if len(bad) > MALFORMED_LIMIT * total:
            listing = "; ".join(f"line {n}: {why}" for n, why in bad[:10])
            raise IngestionError(f"{path}: {len(bad)} of {total} rows malformed (limit 1%): {listing}")
        log.warning("%s: skipped %d malformed rows of %d", path, len(bad), total)
    return records
