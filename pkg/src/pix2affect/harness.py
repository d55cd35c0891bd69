"""Leave-one-video-out evaluation: per-fold record-level 90/10 early-stopping
split, Adam training of the softmax cross-entropy objective, majority-class
baseline, and aggregation with a normal-approximation 95% confidence
interval. Fold seeds derive from the run seed XOR an FNV-1a hash of the
held-out video id, so folds are independent, reproducible, and insensitive
to scheduling order.
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import multiprocessing
from dataclasses import asdict, dataclass, field

import numpy as np

from . import models
from .dataset import LabeledDataset, Record
from .errors import DataError, TrainingError
from .layers import softmax_cross_entropy
from .models import ModelParams, ModelSpec
from .tensors import FLOAT, Rng, fnv1a64

log = logging.getLogger("pix2affect.harness")


@dataclass
class TrainConfig:
    max_epochs: int = 100
    patience: int = 15
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1 or self.max_epochs < 1:
            raise DataError("patience and max_epochs must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise DataError("val_fraction must lie in (0, 1)")
        if self.batch_size < 2:
            raise DataError("batch_size must be >= 2 (batch-norm constraint)")


@dataclass
class TrainingCurve:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.val_losses)

    @property
    def best_val_loss(self) -> float:
        return self.val_losses[self.best_epoch - 1]


@dataclass
class FoldReport:
    video_id: str
    accuracy: float
    baseline: float
    epochs_run: int
    stopped_early: bool
    best_val_loss: float
    final_train_loss: float
    final_val_loss: float


@dataclass
class RunReport:
    model: str
    epsilon: float
    seed: int
    folds: list[FoldReport]
    mean_accuracy: float
    ci95: float
    mean_baseline: float


def model_input(spec: ModelSpec, record: Record) -> np.ndarray:
    """Map a record onto the architecture's input layout.

    Rank-4 inputs take the whole window under one channel (3D nets);
    single-channel rank-3 inputs take the segment's last frame; multi-channel
    rank-3 inputs take the window with frames as channels.
    """
    if len(spec.input_shape) == 4:
        return record.window[None]
    if spec.input_shape[0] == 1:
        return record.last_frame
    return record.window


def _batch_inputs(spec: ModelSpec, records: list[Record]) -> np.ndarray:
    return np.stack([model_input(spec, r) for r in records]).astype(FLOAT, copy=False)


def _batch_labels(records: list[Record]) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)


def lovo_folds(ds: LabeledDataset) -> list[tuple[list[str], str]]:
    """One fold per video: (training video ids, held-out video id)."""
    if len(ds.video_ids) < 2:
        raise DataError(f"leave-one-video-out needs >= 2 videos, got {len(ds.video_ids)}")
    return [([v for v in ds.video_ids if v != held], held) for held in ds.video_ids]


def split_train_val(records: list[Record], val_fraction: float, rng: Rng):
    """Uniform record-level shuffle, then split; floor(n * fraction) to val."""
    n = len(records)
    val_count = int(n * val_fraction)
    if val_count < 1 or n - val_count < 1:
        raise DataError(f"{n} records cannot support a {val_fraction:.0%} validation split")
    perm = rng.permutation(n)
    train = [records[i] for i in perm[:n - val_count]]
    val = [records[i] for i in perm[n - val_count:]]
    return train, val


class AdamState:
    """First/second moment accumulators aligned with the trainable tensors."""

    def __init__(self, spec: ModelSpec, params: ModelParams):
        self.step = 0
        self.m = [np.zeros_like(a) for _, _, a in models.trainable_entries(spec, params)]
        self.v = [np.zeros_like(a) for _, _, a in models.trainable_entries(spec, params)]

    def update(self, spec: ModelSpec, params: ModelParams, grads: list[dict], cfg: TrainConfig):
        self.step += 1
        b1, b2 = cfg.beta1, cfg.beta2
        bias1 = 1.0 - b1 ** self.step
        bias2 = 1.0 - b2 ** self.step
        targets = models.trainable_entries(spec, params)
        gs = models.trainable_entries(spec, grads)
        for (m, v, (_, _, p), (_, _, g)) in zip(self.m, self.v, targets, gs):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p -= (cfg.learning_rate * (m / bias1)
                  / (np.sqrt(v / bias2) + cfg.adam_eps)).astype(p.dtype)


def evaluate_loss(spec: ModelSpec, params: ModelParams, records: list[Record],
                  batch_size: int = 128) -> float:
    """Mean cross-entropy in inference mode (running batch-norm statistics)."""
    if not records:
        raise DataError("cannot evaluate on an empty record list")
    total = 0.0
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        logits = models.forward(spec, params, _batch_inputs(spec, chunk), train=False)
        loss, _ = softmax_cross_entropy(logits, _batch_labels(chunk))
        total += loss * len(chunk)
    return total / len(records)


def evaluate(spec: ModelSpec, params: ModelParams, records: list[Record],
             batch_size: int = 128) -> float:
    """Fraction of records whose argmax logit matches the label."""
    if not records:
        raise DataError("cannot evaluate on an empty record list")
    correct = 0
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        logits = models.forward(spec, params, _batch_inputs(spec, chunk), train=False)
        correct += int((logits.argmax(axis=1) == _batch_labels(chunk)).sum())
    return correct / len(records)


def baseline_majority(train_records: list[Record], test_records: list[Record]) -> float:
    """Accuracy of always predicting the training set's modal class.

    A tie in training class counts resolves to Low.
    """
    if not train_records or not test_records:
        raise DataError("baseline needs non-empty train and test records")
    label_counts = np.bincount(_batch_labels(train_records), minlength=2)
    majority = 0 if label_counts[0] >= label_counts[1] else 1
    return float((_batch_labels(test_records) == majority).mean())


def train_model(spec: ModelSpec, train_records: list[Record], val_records: list[Record],
                cfg: TrainConfig, rng: Rng | None = None):
    """Mini-batch Adam with early stopping on validation loss.

    Improvement means strictly lower validation loss; training stops once
    the non-improving streak exceeds ``patience`` (a constant-loss run
    therefore stops after patience+1 epochs past the first) and the
    best-epoch parameters, including batch-norm running statistics, are
    restored. Trailing mini-batches of one record are skipped (batch norm
    needs two). Returns (params, TrainingCurve).
    """
    if not train_records or not val_records:
        raise DataError("training needs non-empty train and validation sets")
    rng = rng if rng is not None else Rng(cfg.seed)
    params = models.init_params(spec, rng)
    adam = AdamState(spec, params)
    curve = TrainingCurve()
    best = np.inf
    best_params = params.copy()
    streak = 0
    n = len(train_records)
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        epoch_loss, seen = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            batch = [train_records[j] for j in perm[i:i + cfg.batch_size]]
            if len(batch) < 2:
                continue
            x = _batch_inputs(spec, batch)
            logits, cache = models.forward(spec, params, x, train=True, want_cache=True)
            loss, dlogits = softmax_cross_entropy(logits, _batch_labels(batch))
            if not np.isfinite(loss):
                raise TrainingError(f"training loss became non-finite at epoch {epoch}",
                                    epoch=epoch)
            grads, _ = models.backward(spec, params, cache, dlogits)
            adam.update(spec, params, grads, cfg)
            epoch_loss += loss * len(batch)
            seen += len(batch)
        val_loss = evaluate_loss(spec, params, val_records)
        if not np.isfinite(val_loss):
            raise TrainingError(f"validation loss became non-finite at epoch {epoch}",
                                epoch=epoch)
        curve.train_losses.append(epoch_loss / max(seen, 1))
        curve.val_losses.append(val_loss)
        if val_loss < best:
            best = val_loss
            curve.best_epoch = epoch
            best_params = params.copy()
            streak = 0
        else:
            streak += 1
            if streak > cfg.patience:
                curve.stopped_early = True
                break
    return best_params, curve


def run_fold(ds: LabeledDataset, spec: ModelSpec, test_id: str, cfg: TrainConfig) -> FoldReport:
    """Train on all other videos, evaluate on the held-out one."""
    fold_seed = (cfg.seed ^ fnv1a64(test_id)) & (2 ** 64 - 1)
    rng = Rng(fold_seed)
    train_pool = [r for r in ds.records if r.video_id != test_id]
    test_records = ds.records_for(test_id)
    train, val = split_train_val(train_pool, cfg.val_fraction, rng)
    params, curve = train_model(spec, train, val, cfg, rng)
    return FoldReport(
        video_id=test_id,
        accuracy=evaluate(spec, params, test_records),
        baseline=baseline_majority(train_pool, test_records),
        epochs_run=curve.epochs_run,
        stopped_early=curve.stopped_early,
        best_val_loss=float(curve.best_val_loss),
        final_train_loss=float(curve.train_losses[-1]),
        final_val_loss=float(curve.val_losses[-1]),
    )


def aggregate(model: str, epsilon: float, seed: int, folds: list[FoldReport]) -> RunReport:
    """Mean fold accuracy with 1.96 * s/sqrt(n) half-width (sample std)."""
    if len(folds) < 2:
        raise DataError("aggregation needs at least 2 folds")
    accs = np.array([f.accuracy for f in folds], dtype=np.float64)
    bases = np.array([f.baseline for f in folds], dtype=np.float64)
    ci = 1.96 * accs.std(ddof=1) / np.sqrt(len(folds))
    return RunReport(model, epsilon, seed, folds,
                     float(accs.mean()), float(ci), float(bases.mean()))


_WORKER_DS: LabeledDataset | None = None


def _fold_worker(args):
    model_name, test_id, cfg = args
    spec = models.build_architecture(model_name)
    return run_fold(_WORKER_DS, spec, test_id, cfg)


def run_cross_validation(ds: LabeledDataset, model_name: str, cfg: TrainConfig,
                         jobs: int = 1) -> RunReport:
    """Full leave-one-video-out run; results independent of ``jobs``."""
    spec = models.build_architecture(model_name)
    folds = lovo_folds(ds)
    reports: list[FoldReport] = []
    if jobs <= 1:
        for i, (_, test_id) in enumerate(folds):
            rep = run_fold(ds, spec, test_id, cfg)
            log.info("fold %d/%d (%s): acc=%.3f baseline=%.3f epochs=%d",
                     i + 1, len(folds), test_id, rep.accuracy, rep.baseline, rep.epochs_run)
            reports.append(rep)
    else:
        global _WORKER_DS
        _WORKER_DS = ds
        try:
            ctx = multiprocessing.get_context("fork")
            with concurrent.futures.ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
                tasks = [(spec.name, test_id, cfg) for _, test_id in folds]
                reports = list(pool.map(_fold_worker, tasks))
        finally:
            _WORKER_DS = None
        for i, rep in enumerate(reports):
            log.info("fold %d/%d (%s): acc=%.3f baseline=%.3f epochs=%d",
                     i + 1, len(folds), rep.video_id, rep.accuracy, rep.baseline,
                     rep.epochs_run)
    return aggregate(spec.name, ds.epsilon, cfg.seed, reports)


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------

def report_to_json(report: RunReport) -> str:
    doc = {
        "model": report.model,
        "epsilon": report.epsilon,
        "seed": report.seed,
        "mean_accuracy": report.mean_accuracy,
        "ci95": report.ci95,
        "mean_baseline": report.mean_baseline,
        "folds": [asdict(f) for f in report.folds],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> RunReport:
    doc = json.loads(text)
    folds = [FoldReport(**f) for f in doc["folds"]]
    return RunReport(doc["model"], doc["epsilon"], doc["seed"], folds,
                     doc["mean_accuracy"], doc["ci95"], doc["mean_baseline"])


def format_report_table(reports: list[RunReport]) -> str:
    """Plain-text accuracy table: one row per epsilon, one column per model,
    baseline first, each cell mean +/- 95% CI.
    """
    eps_values = sorted({r.epsilon for r in reports})
    model_names = [m for m in models.MODEL_IDS if any(r.model == m for r in reports)]
    by_key = {(r.epsilon, r.model): r for r in reports}
    header = ["epsilon", "Baseline"] + model_names
    rows = [header]
    for eps in eps_values:
        any_run = next(r for r in reports if r.epsilon == eps)
        row = [f"{eps:.2f}", f"{100 * any_run.mean_baseline:.0f}%"]
        for name in model_names:
            run = by_key.get((eps, name))
            row.append("-" if run is None else
                       f"{100 * run.mean_accuracy:.0f}% +/-{100 * run.ci95:.1f}%")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"
