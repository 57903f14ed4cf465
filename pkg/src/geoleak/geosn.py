"""From a tweet stream to model-ready snapshot sequences.

Time is cut into fixed slots, each user keeps at most one geo-tag per slot,
observations are split into train / validation / test per (slot, user) and
turned into windowed feature tensors plus next-slot (or same-slot) targets.

A geo-tag is *visible* to the model only when its (slot, user) entry is
TRAIN-assigned: validation and test geo-tags stand for the posts users did
not share, so they are hidden from every input tensor, at their own slot
and at every later slot alike.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import (
    EmptyTrainingSetError,
    InsufficientDataError,
    InvalidInputError,
    InvalidParameterError,
)

log = logging.getLogger(__name__)

DEFAULT_SLOT_S = 3 * 3600
N_FEATURES = 3
N_OUTPUTS = 2


@dataclass(frozen=True)
class TweetRecord:
    user_id: int
    timestamp: float
    lat: float | None = None
    lon: float | None = None

    @property
    def has_geotag(self) -> bool:
        return self.lat is not None

    def __post_init__(self):
        if (self.lat is None) != (self.lon is None):
            raise InvalidInputError("lat and lon must both be present or both absent")
        if self.lat is not None and not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise InvalidInputError(f"coordinates out of range: ({self.lat}, {self.lon})")


@dataclass
class SnapshotSequence:
    """Per (slot, user) geo-tag, NaN where the user posted no geo-tag."""

    lat: np.ndarray  # (n_slots, n_users)
    lon: np.ndarray
    t_start: float
    slot_duration_s: float
    n_skipped: int = 0

    @property
    def n_slots(self) -> int:
        return self.lat.shape[0]

    @property
    def n_users(self) -> int:
        return self.lat.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.lat)

    def observation(self, slot: int, user: int):
        if np.isnan(self.lat[slot, user]):
            return None
        return float(self.lat[slot, user]), float(self.lon[slot, user])


def discretize(tweets, t_start: float, slot_duration_s: float = DEFAULT_SLOT_S,
               n_slots: int | None = None, n_users: int | None = None) -> SnapshotSequence:
    """Bucket geo-tagged tweets into slots, keeping each user's earliest per slot.

    Tweets outside ``[t_start, t_start + n_slots * slot_duration_s)`` are
    skipped and counted.
    """
    if slot_duration_s <= 0:
        raise InvalidParameterError("slot_duration_s must be positive")
    tweets = list(tweets)
    if n_slots is None:
        last = max((t.timestamp for t in tweets), default=t_start)
        n_slots = int(np.floor((last - t_start) / slot_duration_s)) + 1
    if n_users is None:
        n_users = max((t.user_id for t in tweets), default=-1) + 1
    lat = np.full((n_slots, n_users), np.nan)
    lon = np.full((n_slots, n_users), np.nan)
    skipped = 0
    # stable sort: ties keep file order
    for tw in sorted(tweets, key=lambda t: t.timestamp):
        slot = int(np.floor((tw.timestamp - t_start) / slot_duration_s))
        if slot < 0 or slot >= n_slots:
            skipped += 1
            continue
        if not 0 <= tw.user_id < n_users:
            raise InvalidInputError(f"user id {tw.user_id} outside [0, {n_users})")
        if tw.has_geotag and np.isnan(lat[slot, tw.user_id]):
            lat[slot, tw.user_id] = tw.lat
            lon[slot, tw.user_id] = tw.lon
    if skipped:
        log.warning("skipped %d tweets outside the slot range", skipped)
    return SnapshotSequence(lat, lon, float(t_start), float(slot_duration_s), skipped)


# -- normalization -------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationBounds:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    @staticmethod
    def _fwd(x, lo, hi):
        x = np.asarray(x, dtype=np.float64)
        if hi == lo:
            return np.full_like(x, 0.5)
        return np.clip((x - lo) / (hi - lo), 0.0, 1.0)

    @staticmethod
    def _inv(z, lo, hi):
        z = np.asarray(z, dtype=np.float64)
        if hi == lo:
            return np.full_like(z, lo)
        return lo + z * (hi - lo)

    def normalize(self, lat, lon):
        return (self._fwd(lat, self.lat_min, self.lat_max),
                self._fwd(lon, self.lon_min, self.lon_max))

    def denormalize(self, zlat, zlon):
        return (self._inv(zlat, self.lat_min, self.lat_max),
                self._inv(zlon, self.lon_min, self.lon_max))

    def to_dict(self) -> dict:
        return {"lat_min": self.lat_min, "lat_max": self.lat_max,
                "lon_min": self.lon_min, "lon_max": self.lon_max}


def normalization_bounds(lats, lons) -> NormalizationBounds:
    """Min/max bounds from training observations only."""
    lats = np.asarray(lats, dtype=np.float64).ravel()
    lons = np.asarray(lons, dtype=np.float64).ravel()
    if lats.size == 0:
        raise EmptyTrainingSetError("no training observations to fit normalization bounds")
    return NormalizationBounds(float(lats.min()), float(lats.max()),
                               float(lons.min()), float(lons.max()))


def bounds_from_splits(seq: SnapshotSequence, splits: "SplitAssignment") -> NormalizationBounds:
    train = splits.labels == Split.TRAIN
    return normalization_bounds(seq.lat[train], seq.lon[train])


# -- splits --------------------------------------------------------------------

class Split(enum.IntEnum):
    DISCARDED = 0
    TRAIN = 1
    VALIDATION = 2
    TEST = 3


@dataclass(frozen=True)
class SplitAssignment:
    labels: np.ndarray  # (n_slots, n_users) of Split values
    p: float
    seed: int

    def mask(self, which: Split) -> np.ndarray:
        return self.labels == which

    @property
    def visible(self) -> np.ndarray:
        return self.labels == Split.TRAIN


def assign_splits(seq: SnapshotSequence, p: float, seed: int) -> SplitAssignment:
    """Draw TRAIN / VALIDATION / TEST with probabilities p, (1-p)/2, (1-p)/2.

    The draw for (slot, user) depends only on ``(seed, slot, user)``.
    Entries without a geo-tag are DISCARDED.
    """
    if not 0.0 < p <= 1.0:
        raise InvalidParameterError(f"p must lie in (0, 1], got {p}")
    slots, users = np.indices((seq.n_slots, seq.n_users))
    u = rng.counter_uniform(seed, rng.SPLITS, slots, users)
    labels = np.where(u < p, Split.TRAIN,
                      np.where(u < p + 0.5 * (1.0 - p), Split.VALIDATION, Split.TEST))
    labels = np.where(seq.observed, labels, Split.DISCARDED).astype(np.int8)
    return SplitAssignment(labels, float(p), int(seed))


# -- features ------------------------------------------------------------------

@dataclass
class FeatureTensor:
    values: np.ndarray  # (n_ts, n_users, 3): norm lat, norm lon, staleness
    mask: np.ndarray    # (n_ts, n_users): a visible geo-tag exists at or before the slot
    source: np.ndarray  # (n_ts, n_users): slot the geo-tag came from, -1 if none

    @property
    def shape(self):
        return self.values.shape


SENTINEL = (0.5, 0.5, 1.0)


def last_visible_slot(visible: np.ndarray) -> np.ndarray:
    """For every (slot, user), the latest slot <= it with a visible geo-tag (-1 if none)."""
    idx = np.where(visible, np.arange(visible.shape[0])[:, None], -1)
    return np.maximum.accumulate(idx, axis=0)


def impute_and_featurize(seq: SnapshotSequence, window, norm: NormalizationBounds,
                         visible: np.ndarray | None = None, s_cap: int | None = None,
                         last_visible: np.ndarray | None = None) -> FeatureTensor:
    """Features for the slots in ``window`` from each user's latest visible geo-tag.

    ``visible`` defaults to every observation. Staleness is capped at
    ``s_cap`` (default: window length) and divided by it. Users with no
    visible geo-tag yet get the sentinel ``(0.5, 0.5, 1.0)`` and mask False.
    """
    window = np.asarray(list(window), dtype=np.int64)
    if window.size == 0 or window.min() < 0 or window.max() >= seq.n_slots:
        raise InvalidInputError("window slots outside the sequence")
    if s_cap is None:
        s_cap = len(window)
    if last_visible is None:
        if visible is None:
            visible = seq.observed
        last_visible = last_visible_slot(visible & seq.observed)
    src = last_visible[window]
    mask = src >= 0
    safe = np.where(mask, src, 0)
    users = np.arange(seq.n_users)[None, :]
    zlat, zlon = norm.normalize(seq.lat[safe, users], seq.lon[safe, users])
    stale = np.minimum(window[:, None] - safe, s_cap) / s_cap
    values = np.empty(src.shape + (N_FEATURES,))
    values[..., 0] = np.where(mask, zlat, SENTINEL[0])
    values[..., 1] = np.where(mask, zlon, SENTINEL[1])
    values[..., 2] = np.where(mask, stale, SENTINEL[2])
    return FeatureTensor(values, mask, src)


# -- examples ------------------------------------------------------------------

class TargetMode(str, enum.Enum):
    NEXT_SLOT = "next_slot"
    SAME_SLOT_MASKED = "same_slot_masked"


@dataclass
class TargetMatrix:
    values: np.ndarray  # (n_users, 2), NaN where unknown
    known: np.ndarray   # (n_users,)


@dataclass
class Example:
    features: FeatureTensor
    target: TargetMatrix
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    terminal_slot: int
    target_slot: int


def build_examples(seq: SnapshotSequence, n_ts: int, splits: SplitAssignment,
                   norm: NormalizationBounds,
                   target_mode: TargetMode | str = TargetMode.NEXT_SLOT) -> list[Example]:
    """One example per terminal slot.

    NEXT_SLOT: input slots ``[t-n_ts+1, t]``, target = geo-tags at ``t+1``.
    SAME_SLOT_MASKED: target = geo-tags at ``t`` itself. In both modes only
    TRAIN-assigned geo-tags reach the inputs, so a validation or test target
    is never visible.
    """
    target_mode = TargetMode(target_mode)
    if n_ts < 1:
        raise InvalidParameterError("n_ts must be >= 1")
    if seq.n_slots <= n_ts:
        raise InsufficientDataError(f"need more than n_ts={n_ts} slots, have {seq.n_slots}")
    shift = 1 if target_mode is TargetMode.NEXT_SLOT else 0
    last_terminal = seq.n_slots - 1 - shift
    last_visible = last_visible_slot(splits.visible & seq.observed)
    examples = []
    for t in range(n_ts - 1, last_terminal + 1):
        feats = impute_and_featurize(seq, range(t - n_ts + 1, t + 1), norm,
                                     s_cap=n_ts, last_visible=last_visible)
        ts = t + shift
        known = seq.observed[ts]
        zlat, zlon = norm.normalize(seq.lat[ts], seq.lon[ts])
        values = np.where(known[:, None], np.stack([zlat, zlon], axis=1), np.nan)
        labels = splits.labels[ts]
        examples.append(Example(
            features=feats,
            target=TargetMatrix(values, known),
            train_mask=labels == Split.TRAIN,
            val_mask=labels == Split.VALIDATION,
            test_mask=labels == Split.TEST,
            terminal_slot=t,
            target_slot=ts,
        ))
    return examples


def stack_examples(examples) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays: X (B, n_ts, N, 3), Y (B, N, 2) and the three split masks (B, N)."""
    x = np.stack([e.features.values for e in examples])
    y = np.stack([np.nan_to_num(e.target.values, nan=0.0) for e in examples])
    train = np.stack([e.train_mask for e in examples])
    val = np.stack([e.val_mask for e in examples])
    test = np.stack([e.test_mask for e in examples])
    return x, y, train, val, test
