"""Click-log ingestion, filtering, augmentation, temporal splits, and synthetic data.

Input formats (one click per row):

* yoochoose   CSV  ``session_id,timestamp,item_id,category`` with ISO-8601 timestamps
* diginetica  CSV  ``sessionId;userId;itemId;timeframe;eventdate`` ordered by
                   (eventdate, timeframe)
* tsv         the normalized interchange format ``session_id<TAB>unix_ts<TAB>item_id``

Pipeline order for benchmark logs: parse -> filter (rare items, then short
sessions) -> temporal split -> most-recent training fraction -> augment.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .sessgraph import Session

SECONDS_PER_DAY = 86400.0
MIN_ITEM_COUNT = 5
MIN_SESSION_LEN = 2


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Sessions with a contiguous item vocabulary and provenance metadata."""

    sessions: list[Session]
    vocab: dict  # raw item id -> contiguous index in [0, m)
    meta: dict = field(default_factory=dict)

    @property
    def num_items(self) -> int:
        return len(self.vocab)

    def stats(self) -> dict:
        clicks = sum(len(s) for s in self.sessions)
        count = len(self.sessions)
        return {
            "sessions": count,
            "clicks": clicks,
            "items": self.num_items,
            "avg_length": clicks / count if count else 0.0,
        }


@dataclass
class SplitSpec:
    """How to carve train/test and which most-recent training slice to keep."""

    test_rule: str = "final-day"  # final-day | final-week
    fraction: float = 1.0
    augment: bool = True

    def __post_init__(self):
        if self.test_rule not in ("final-day", "final-week"):
            raise DataError(f"test_rule must be final-day|final-week, got {self.test_rule!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise DataError(f"fraction must be in (0, 1], got {self.fraction}")


def _parse_iso(ts: str) -> float:
    dt = datetime.fromisoformat(ts.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _parse_date(day: str) -> float:
    return datetime.strptime(day, "%Y-%m-%d").replace(tzinfo=timezone.utc).timestamp()


def parse_raw(path, fmt: str) -> Dataset:
    """Group clicks into sessions ordered by timestamp; skip and count malformed rows."""
    if fmt not in ("yoochoose", "diginetica", "tsv"):
        raise DataError(f"unknown format {fmt!r}; expected yoochoose|diginetica|tsv")
    clicks: dict[str, list[tuple[float, int]]] = {}
    malformed: list[str] = []
    total = 0
    try:
        handle = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with handle:
        if fmt == "tsv":
            rows = csv.reader(handle, delimiter="\t")
        elif fmt == "yoochoose":
            rows = csv.reader(handle, delimiter=",")
        else:
            rows = csv.reader(handle, delimiter=";")
        header_skipped = False
        for row in rows:
            if not row:
                continue
            total += 1
            try:
                if fmt == "tsv":
                    sid, ts, item = row[0], float(row[1]), int(row[2])
                elif fmt == "yoochoose":
                    sid, ts, item = row[0], _parse_iso(row[1]), int(row[2])
                else:
                    sid, item = row[0], int(row[2])
                    ts = _parse_date(row[4]) + float(row[3]) / 1000.0
            except (ValueError, IndexError):
                # one header line is tolerated without counting it malformed
                if not header_skipped and total == 1:
                    header_skipped = True
                    total -= 1
                    continue
                malformed.append(",".join(row))
                continue
            clicks.setdefault(sid, []).append((ts, item))

    if total and len(malformed) > 0.01 * total:
        samples = "; ".join(malformed[:5])
        raise DataError(f"{len(malformed)}/{total} malformed rows in {path}; samples: {samples}")
    if not clicks:
        raise DataError(f"no sessions parsed from {path}")

    vocab: dict = {}
    sessions = []
    for sid in clicks:
        ordered = sorted(clicks[sid], key=lambda pair: pair[0])
        items = []
        for _, raw_item in ordered:
            if raw_item not in vocab:
                vocab[raw_item] = len(vocab)
            items.append(vocab[raw_item])
        sessions.append(Session(items=items, timestamps=[ts for ts, _ in ordered]))
    meta = {"source": str(path), "format": fmt, "malformed_rows": len(malformed)}
    return Dataset(sessions=sessions, vocab=vocab, meta=meta)


def _reindex(sessions: list[Session], old_vocab: dict, keep: set[int]) -> Dataset:
    """Drop items outside ``keep``, drop sessions shorter than 2, renumber contiguously."""
    index_to_raw = {idx: raw for raw, idx in old_vocab.items()}
    new_vocab: dict = {}
    remap: dict[int, int] = {}
    for old_idx in sorted(keep):
        remap[old_idx] = len(new_vocab)
        new_vocab[index_to_raw[old_idx]] = remap[old_idx]
    out = []
    for s in sessions:
        kept = [(remap[i], t) for i, t in zip(s.items, s.timestamps or [0.0] * len(s))
                if i in remap]
        if len(kept) >= MIN_SESSION_LEN:
            out.append(Session(items=[i for i, _ in kept],
                               timestamps=[t for _, t in kept] if s.timestamps else None,
                               label=s.label))
    return Dataset(sessions=out, vocab=new_vocab)


def filter_dataset(ds: Dataset) -> Dataset:
    """Remove items seen fewer than 5 times, then sessions shorter than 2."""
    counts = Counter(i for s in ds.sessions for i in s.items)
    keep = {i for i, c in counts.items() if c >= MIN_ITEM_COUNT}
    result = _reindex(ds.sessions, ds.vocab, keep)
    if not result.sessions:
        raise DataError("filtering removed every session")
    result.meta = dict(ds.meta, filtered=True)
    return result


def augment(ds: Dataset) -> list[Session]:
    """Expand each session into its (prefix, next item) training pairs.

    A length-n session yields n-1 pairs, the i-th using the first i items
    as input and item i+1 as the label.
    """
    pairs = []
    for s in ds.sessions:
        for i in range(1, len(s)):
            pairs.append(Session(
                items=s.items[:i],
                timestamps=s.timestamps[:i] if s.timestamps else None,
                label=s.items[i],
            ))
    return pairs


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Temporal train/test split, then the most-recent training fraction.

    The cutoff is the start of the final calendar day (``final-day``) or of
    the final seven calendar days (``final-week``), in UTC.  Training keeps
    sessions that end before the cutoff; test keeps sessions that start at
    or after it; the rare session straddling the cutoff is discarded so
    that no training click postdates a test session's start.  Items absent
    from the (fraction-reduced) training set are removed from test
    sessions, and the vocabulary is rebuilt from training items.
    """
    if any(s.timestamps is None for s in ds.sessions):
        raise DataError("temporal split requires timestamps on every session")
    latest = max(s.end_time for s in ds.sessions)
    day_start = math.floor(latest / SECONDS_PER_DAY) * SECONDS_PER_DAY
    cutoff = day_start if spec.test_rule == "final-day" else day_start - 6 * SECONDS_PER_DAY

    train = [s for s in ds.sessions if s.end_time < cutoff]
    test = [s for s in ds.sessions if s.timestamps[0] >= cutoff]
    if not train or not test:
        raise DataError(f"cutoff {cutoff} leaves an empty train or test side")

    if spec.fraction < 1.0:
        keep = math.ceil(spec.fraction * len(train))
        order = sorted(range(len(train)), key=lambda k: (train[k].end_time, k))
        chosen = sorted(order[-keep:])
        train = [train[k] for k in chosen]

    train_items = {i for s in train for i in s.items}
    train_ds = _reindex(train, ds.vocab, train_items)
    test_ds = _reindex(test, ds.vocab, train_items)
    test_ds.vocab = train_ds.vocab
    if not train_ds.sessions or not test_ds.sessions:
        raise DataError("split produced an empty train or test side after item pruning")
    train_ds.meta = dict(ds.meta, role="train", test_rule=spec.test_rule, fraction=spec.fraction)
    test_ds.meta = dict(ds.meta, role="test", test_rule=spec.test_rule, fraction=spec.fraction)
    return train_ds, test_ds


def synth_generate(m: int, n_sessions: int, len_range=(2, 19), seed: int = 0) -> Dataset:
    """Deterministic synthetic sessions whose label couples first and last items.

    Items are uniform over [0, m); the label of a session is
    ``(31 * first + 17 * last) mod m``, so predicting it requires both the
    initial and the latest intent.  Timestamps increase across sessions,
    making temporal holdouts well defined.
    """
    lo, hi = int(len_range[0]), int(len_range[1])
    if m < 10:
        raise DataError(f"synthetic vocabulary must have at least 10 items, got {m}")
    if lo < 2 or hi > 19 or lo > hi:
        raise DataError(f"len_range must lie within [2, 19], got {len_range}")
    rng = np.random.default_rng(seed)
    sessions = []
    for k in range(n_sessions):
        length = int(rng.integers(lo, hi + 1))
        items = rng.integers(0, m, size=length).tolist()
        label = (31 * items[0] + 17 * items[-1]) % m
        base = float(k) * 100.0
        sessions.append(Session(
            items=[int(i) for i in items],
            timestamps=[base + j for j in range(length)],
            label=int(label),
        ))
    meta = {"source": "synthetic", "m": m, "n_sessions": n_sessions,
            "len_min": lo, "len_max": hi, "seed": seed}
    return Dataset(sessions=sessions, vocab={i: i for i in range(m)}, meta=meta)
