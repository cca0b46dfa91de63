"""Training loop, ranking metrics, experiment harnesses, and heatmap export.

The harnesses here reproduce the desk-scale experiment designs: swapping
positional-encoding kinds under a shared seed, toggling anchor aggregation,
sweeping the first-state readout weight, and dumping encoding heatmaps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import manifest as mf
from . import numcore as nc
from . import posenc
from .datapipe import DataError
from .model import PosRecModel, cross_entropy, prediction_from_scores
from .numcore import AdamState, Tape
from .posenc import EncodingScheme
from .sessgraph import Session

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss; the offending batch is attached."""

    def __init__(self, message: str, batch=None):
        super().__init__(message)
        self.batch = batch


@dataclass
class TrainConfig:
    """Hyperparameters; the defaults are the reference desk-scale settings."""

    lr: float = 0.001
    lr_decay: float = 0.1
    decay_every: int = 3          # epochs between learning-rate decays
    batch_size: int = 100
    d: int = 100
    l2: float = 1e-5
    max_epochs: int = 4           # hard stop at the end of this epoch
    seed: int = 0
    scheme: str = posenc.LDPE
    anchor_enabled: bool = True
    anchor_weight: str = "distance"
    lambda0: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 0.5
    layer_norm: bool = True
    heads: int = 1
    max_len: int | None = None    # derived from the data when None
    val_fraction: float = 0.1
    threads: int = 1

    def to_manifest(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class MetricsReport:
    """Recall and mean reciprocal rank at each cutoff, as percentages."""

    recall: dict[int, float]
    mrr: dict[int, float]
    n: int
    manifest_hash: str | None = None

    def describe(self) -> str:
        ks = sorted(self.recall)
        parts = [f"R@{k}={self.recall[k]:.2f}" for k in ks] + [f"M@{k}={self.mrr[k]:.2f}" for k in ks]
        return " ".join(parts) + f" (N={self.n})"


def rank_of(scores: np.ndarray, label: int) -> int:
    """1-based rank of the label under descending score, ties by ascending id."""
    target = scores[label]
    better = int(np.sum(scores > target))
    tied_before = int(np.sum(scores[:label] == target))
    return better + tied_before + 1


def evaluate(model: PosRecModel, pairs: list[Session], ks=(5, 10)) -> MetricsReport:
    """Full-catalogue ranking metrics over labeled (prefix, next item) pairs."""
    if not pairs:
        raise DataError("cannot evaluate on an empty pair list")
    ks = tuple(sorted(ks))
    hits = {k: 0 for k in ks}
    rr = {k: 0.0 for k in ks}
    max_len = model.scheme.max_len
    for pair in pairs:
        label = pair.label
        if label is None or not 0 <= label < model.m:
            logger.warning("evaluate: label %r outside vocabulary, counted as miss", label)
            continue
        session = pair
        if len(pair) > max_len:
            session = Session(items=pair.items[-max_len:],
                              timestamps=pair.timestamps[-max_len:] if pair.timestamps else None,
                              label=pair.label)
        pred = model.forward_full(session)
        rank = rank_of(pred.scores, label)
        for k in ks:
            if rank <= k:
                hits[k] += 1
                rr[k] += 1.0 / rank
    n = len(pairs)
    return MetricsReport(
        recall={k: 100.0 * hits[k] / n for k in ks},
        mrr={k: 100.0 * rr[k] / n for k in ks},
        n=n,
    )


def _build_model(config: TrainConfig, m: int, max_len: int) -> PosRecModel:
    scheme = posenc.make_scheme(config.scheme, config.d, max_len, seed=config.seed)
    return PosRecModel(
        m=m,
        d=config.d,
        scheme=scheme,
        lambda0=config.lambda0,
        lambda1=config.lambda1,
        lambda2=config.lambda2,
        anchor_enabled=config.anchor_enabled,
        anchor_weight=config.anchor_weight,
        layer_norm=config.layer_norm,
        heads=config.heads,
        seed=config.seed,
    )


def train(
    pairs: list[Session],
    config: TrainConfig,
    m: int | None = None,
    eval_ks=(1, 5, 10),
) -> tuple[PosRecModel, list[MetricsReport]]:
    """Mini-batch Adam training with per-epoch validation reports.

    The last ``val_fraction`` of pairs by end time is held out for the
    per-epoch reports; the checkpoint with the best validation M@10 (or the
    largest cutoff available) is restored before returning.  Identical
    config and seed reproduce identical parameters bit for bit.
    """
    if not pairs:
        raise DataError("no training pairs")
    if m is None:
        m = 1 + max(max(max(s.items) for s in pairs),
                    max(s.label for s in pairs if s.label is not None))
    max_len = config.max_len or max(len(s) for s in pairs)
    model = _build_model(config, m, max_len)

    order = sorted(range(len(pairs)), key=lambda k: (pairs[k].end_time, k))
    n_val = max(1, int(round(config.val_fraction * len(pairs)))) if config.val_fraction > 0 else 0
    if n_val >= len(pairs):
        raise DataError("validation fraction leaves no training pairs")
    val_pairs = [pairs[k] for k in order[-n_val:]] if n_val else []
    fit_pairs = [pairs[k] for k in order[:-n_val]] if n_val else list(pairs)

    prepared = [model.prepare(_clip(p, max_len)) for p in fit_pairs]
    state = AdamState(lr=config.lr, weight_decay=config.l2)
    rng = np.random.default_rng(config.seed)
    reports: list[MetricsReport] = []
    best_key = None
    best_snapshot = None
    pick = max(eval_ks)

    for epoch in range(1, config.max_epochs + 1):
        state.lr = config.lr * config.lr_decay ** ((epoch - 1) // config.decay_every)
        perm = rng.permutation(len(prepared))
        epoch_loss = 0.0
        for start in range(0, len(perm), config.batch_size):
            batch = [prepared[k] for k in perm[start:start + config.batch_size]]
            with Tape() as tape:
                probs = [model.forward_prepared(prep) for prep in batch]
                loss = cross_entropy(probs, [prep.label for prep in batch])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite loss {value} in epoch {epoch}",
                    batch=[(list(p.node_items), p.label) for p in batch],
                )
            epoch_loss += value
            grads = nc.backward(tape, loss)
            named = {name: grads[t] for name, t in model.params.items() if t in grads}
            nc.adam_step(model.params, named, state)
        logger.info("epoch %d: lr=%g train-loss=%.4f", epoch, state.lr, epoch_loss)
        if val_pairs:
            report = evaluate(model, val_pairs, ks=eval_ks)
            reports.append(report)
            key = report.mrr.get(10, report.mrr[pick])
            logger.info("epoch %d: validation %s", epoch, report.describe())
            if best_key is None or key > best_key:
                best_key = key
                best_snapshot = model.snapshot()
    if best_snapshot is not None:
        model.restore(best_snapshot)
    return model, reports


def _clip(pair: Session, max_len: int) -> Session:
    if len(pair) <= max_len:
        return pair
    return Session(items=pair.items[-max_len:],
                   timestamps=pair.timestamps[-max_len:] if pair.timestamps else None,
                   label=pair.label)


# ---------------------------------------------------------------------------
# experiment harnesses
# ---------------------------------------------------------------------------

def results_csv(rows: list[tuple[str, MetricsReport, int, str]]) -> str:
    """Rows of (variant, report, seed, manifest hash) -> the results table."""
    lines = ["scheme,R@5,R@10,M@5,M@10,N,seed,manifest_hash"]
    for name, rep, seed, mhash in rows:
        lines.append(
            f"{name},{rep.recall[5]:.2f},{rep.recall[10]:.2f},"
            f"{rep.mrr[5]:.2f},{rep.mrr[10]:.2f},{rep.n},{seed},{mhash}"
        )
    return "\n".join(lines) + "\n"


def run_encoding_sweep(
    train_pairs: list[Session],
    test_pairs: list[Session],
    config: TrainConfig,
    kinds: list[str],
    m: int | None = None,
) -> list[tuple[str, MetricsReport]]:
    """Train one model per encoding kind under a shared seed and config."""
    if not kinds:
        raise DataError("encoding sweep needs at least one kind")
    for kind in kinds:
        if kind not in posenc.ALL_KINDS:
            raise DataError(f"unknown encoding kind {kind!r}")
    mhash = mf.digest_mapping(config.to_manifest())
    out = []
    for kind in kinds:
        cfg = replace(config, scheme=kind)
        model, _ = train(train_pairs, cfg, m=m)
        report = evaluate(model, test_pairs, ks=(1, 5, 10))
        report.manifest_hash = mhash
        logger.info("sweep %s: %s", kind, report.describe())
        out.append((kind, report))
    return out


def run_anchor_ablation(
    train_pairs: list[Session],
    test_pairs: list[Session],
    config: TrainConfig,
    m: int | None = None,
) -> tuple[MetricsReport, MetricsReport]:
    """Train with and without anchor aggregation under a shared seed."""
    mhash = mf.digest_mapping(config.to_manifest())
    results = []
    for flag in (True, False):
        cfg = replace(config, anchor_enabled=flag)
        model, _ = train(train_pairs, cfg, m=m)
        report = evaluate(model, test_pairs, ks=(1, 5, 10))
        report.manifest_hash = mhash
        logger.info("anchors %s: %s", "on" if flag else "off", report.describe())
        results.append(report)
    return results[0], results[1]


def run_lambda2_sweep(
    train_pairs: list[Session],
    test_pairs: list[Session],
    config: TrainConfig,
    values=(0.25, 0.5, 1.0, 2.0),
    m: int | None = None,
) -> list[tuple[float, MetricsReport]]:
    """Sweep the first-state readout weight with identical seeds."""
    mhash = mf.digest_mapping(config.to_manifest())
    out = []
    for value in values:
        cfg = replace(config, lambda2=float(value))
        model, _ = train(train_pairs, cfg, m=m)
        report = evaluate(model, test_pairs, ks=(1, 5, 10))
        report.manifest_hash = mhash
        logger.info("lambda2=%g: %s", value, report.describe())
        out.append((float(value), report))
    return out


def export_heatmap(scheme: EncodingScheme, l1: int, l2: int, out_path) -> list[Path]:
    """Write the pairwise dot-product heatmap; dual kinds also get per-half files."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    written = []
    full = posenc.pairwise_heatmap(scheme, l1, l2)
    out_path.write_text(posenc.heatmap_csv(full), encoding="utf-8")
    written.append(out_path)
    if scheme.kind in posenc.DUAL_KINDS:
        for half in ("forward", "backward"):
            side = posenc.pairwise_heatmap(scheme, l1, l2, half=half)
            path = out_path.with_name(f"{out_path.stem}_{half}{out_path.suffix}")
            path.write_text(posenc.heatmap_csv(side), encoding="utf-8")
            written.append(path)
    return written
