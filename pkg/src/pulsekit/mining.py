"""Anchor / positive / negative mining over PLP peaks.

Positives sit a nonzero multiple of ``alpha = 2**n`` peaks away from the
anchor. Easy negatives are non-peak frames outside a safety window around
every peak; hard negatives are peaks that are neither the anchor nor one of
its positive candidates.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .plp import PeakSet

log = logging.getLogger(__name__)

EASY, HARD = "easy", "hard"


class MiningError(ValueError):
    pass


@dataclass(frozen=True)
class MiningConfig:
    n_exponent: int = 2
    num_negatives: int = 10
    hard_fraction: float = 0.5
    safety_window: int = 1
    anchor_fraction: float = 0.8
    segment_frames: int = 1000

    def __post_init__(self):
        if self.n_exponent < 0:
            raise ValueError("n_exponent must be >= 0")
        n_hard = self.num_negatives * self.hard_fraction
        if abs(n_hard - round(n_hard)) > 1e-9:
            raise ValueError("num_negatives * hard_fraction must be integral")
        if not 0 < self.anchor_fraction <= 1:
            raise ValueError("anchor_fraction must be in (0, 1]")

    @property
    def alpha(self) -> int:
        return 2 ** self.n_exponent

    @property
    def num_hard(self) -> int:
        return int(round(self.num_negatives * self.hard_fraction))


@dataclass
class TripletSample:
    anchor_frame: int
    positive_frame: int
    negative_frames: list  # [(frame, tag)]
    anchor_pos: int = -1
    positive_pos: int = -1


@dataclass
class MiningBatch:
    clip_id: str
    triplets: list = field(default_factory=list)
    rng_seed: int | None = None
    reason: str = ""
    substitutions: int = 0

    def __len__(self):
        return len(self.triplets)


def derive_seed(global_seed: int, *keys) -> int:
    """Stable 63-bit seed from a master seed and any keys (clip id, epoch...)."""
    h = hashlib.sha256(repr((int(global_seed),) + tuple(str(k) for k in keys)).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


def positive_set(peaks, a: int, alpha: int) -> np.ndarray:
    """Peak-list positions ``a + i * alpha`` (i != 0) inside ``[0, K - 1]``."""
    k = len(peaks)
    if not 0 <= a < k:
        raise IndexError(f"anchor position {a} outside [0, {k})")
    left = np.arange(a - alpha, -1, -alpha)[::-1]
    right = np.arange(a + alpha, k, alpha)
    return np.concatenate([left, right]).astype(np.int64)


def easy_pool(peaks: PeakSet, length: int, safety_window: int) -> np.ndarray:
    blocked = np.zeros(length, dtype=bool)
    for d in range(-safety_window, safety_window + 1):
        idx = peaks.peaks + d
        blocked[idx[(idx >= 0) & (idx < length)]] = True
    return np.flatnonzero(~blocked)


def hard_pool(peaks: PeakSet, a: int, positives) -> np.ndarray:
    keep = np.ones(len(peaks), dtype=bool)
    keep[a] = False
    keep[np.asarray(positives, dtype=np.int64)] = False
    return peaks.peaks[keep]


def sample_negatives(peaks: PeakSet, a: int, positives, cfg: MiningConfig,
                     rng: np.random.Generator, length: int | None = None,
                     easy_candidates: np.ndarray | None = None):
    """Draw ``cfg.num_negatives`` negatives as ``([(frame, tag)], substituted)``.

    A pool that cannot meet its quota is topped up from the other pool; the
    number of substituted draws is returned alongside the negatives.
    """
    length = peaks.length if length is None else length
    easy = easy_pool(peaks, length, cfg.safety_window) if easy_candidates is None else easy_candidates
    hard = hard_pool(peaks, a, positives)
    if len(easy) == 0 and len(hard) == 0:
        raise MiningError("both negative pools are empty")

    n_hard = cfg.num_hard
    n_easy = cfg.num_negatives - n_hard
    # without replacement while the pool allows, otherwise with replacement
    take_hard = min(n_hard, len(hard))
    take_easy = min(n_easy, len(easy))
    short = (n_hard - take_hard) + (n_easy - take_easy)
    if short and take_hard < n_hard:
        take_easy += short
    elif short:
        take_hard += short

    def draw(pool, count):
        if count == 0:
            return np.empty(0, dtype=np.int64)
        return rng.choice(pool, size=count, replace=count > len(pool))

    negatives = [(int(f), HARD) for f in draw(hard, take_hard)]
    negatives += [(int(f), EASY) for f in draw(easy, take_easy)]
    return negatives, short


def mine_segment(peaks: PeakSet, length: int, cfg: MiningConfig = MiningConfig(),
                 rng: np.random.Generator | int | None = None, clip_id: str = "") -> MiningBatch:
    seed = rng if isinstance(rng, (int, np.integer)) else None
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    batch = MiningBatch(clip_id, rng_seed=seed)
    if len(peaks) == 0:
        batch.reason = "no peaks"
        return batch

    positive_sets = [positive_set(peaks, a, cfg.alpha) for a in range(len(peaks))]
    usable = np.array([a for a, ys in enumerate(positive_sets) if len(ys)], dtype=np.int64)
    if len(usable) == 0:
        batch.reason = "no usable anchors"
        return batch

    n_anchors = max(1, int(round(cfg.anchor_fraction * len(usable))))
    anchors = np.sort(rng.choice(usable, size=n_anchors, replace=False))
    easy = easy_pool(peaks, length, cfg.safety_window)
    for a in anchors:
        ys = positive_sets[a]
        p = int(ys[rng.integers(len(ys))])
        try:
            negatives, short = sample_negatives(peaks, a, ys, cfg, rng, length, easy)
        except MiningError as exc:
            batch.triplets = []
            batch.reason = str(exc)
            return batch
        batch.substitutions += short
        batch.triplets.append(TripletSample(int(peaks.peaks[a]), int(peaks.peaks[p]),
                                            negatives, int(a), p))
    if batch.substitutions:
        log.debug("%s: %d negative draws substituted across pools", clip_id, batch.substitutions)
    return batch


def batch_records(batch: MiningBatch, offset: int = 0, **extra):
    """One JSON-ready dict per triplet; ``offset`` shifts segment frames to clip frames."""
    for tr in batch.triplets:
        yield {
            "clip": batch.clip_id,
            "anchor": tr.anchor_frame + offset,
            "positive": tr.positive_frame + offset,
            "negatives": [{"frame": f + offset, "tag": tag} for f, tag in tr.negative_frames],
            **extra,
        }


def write_batch_jsonl(path, batch: MiningBatch, offset: int = 0, **extra):
    with open(path, "w") as fh:
        for rec in batch_records(batch, offset, **extra):
            fh.write(json.dumps(rec) + "\n")
