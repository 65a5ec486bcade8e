import csv
import itertools
import logging
import math
import time

import numpy as np
from pydantic import ValidationError
from tqdm import tqdm

from app import tensor
from app.dataset import ImageStore, batch_iterator, subset_manifest
from app.exceptions import (ModelError, TrainingDiverged, TrainingFailure, TensorShapeError,
                            UsageError)
from app.model import build_model
from app.models import EpochReport, GradientCheckReport, SweepRow, TrainingConfig
from app.tools import get_logger, process_rss_mb, seeded_rng
from modules.optimizers import OPTIMIZERS

# seed stream ids, so dropout and gradient-check draws never share a generator
DROPOUT_STREAM = 1
GRADCHECK_STREAM = 2

SWEEP_AXES = {
    "lr": "learning_rate",
    "batch": "batch_size",
    "filters": "filters",
    "dropout": "dropout",
    "dense_layers": "dense_layers",
    "dense": "dense_layers",
}


class EarlyStopping:
    """Tracks the best validation loss and its parameter snapshot."""

    def __init__(self, patience):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = None
        self.best_params = None
        self.wait = 0

    def update(self, epoch, val_loss, model):
        """Returns True once patience epochs passed without improvement."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_params = model.snapshot()
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


class FitResult:
    def __init__(self, model, reports, best_epoch, skipped=None):
        self.model = model
        self.reports = reports
        self.best_epoch = best_epoch
        self.skipped = skipped or {}

    @property
    def best_report(self):
        for report in self.reports:
            if report.epoch == self.best_epoch:
                return report
        return None


def evaluate_loss(model, source, l2=0.0):
    """Mean loss (plus the L2 term) and accuracy over a batch source."""
    total, correct, n = 0.0, 0, 0
    for images, onehot in source:
        logits, _ = model.logits(images)
        loss, probs, _ = tensor.softmax_cross_entropy(logits, onehot)
        total += loss * len(images)
        correct += int(np.sum(np.argmax(probs, axis=1) == np.argmax(onehot, axis=1)))
        n += len(images)
    if n == 0:
        raise TrainingFailure("evaluation split produced no samples")
    return total / n + model.l2_penalty(l2), correct / n


def _checkpoint(model, params):
    checkpoint = model.copy()
    checkpoint.restore(params)
    return checkpoint


def train_loop(model, config: TrainingConfig, train_source, val_source, progress=False):
    """Epoch loop with early stopping; restores the best-epoch weights into model."""
    logs_training = get_logger("training")
    optimizer_cls, defaults, _ = OPTIMIZERS[config.optimizer]
    params = model.parameters()
    optimizer = optimizer_cls(params, lr=config.learning_rate, **defaults)
    rng = seeded_rng(config.seed, DROPOUT_STREAM)
    stopper = EarlyStopping(config.patience)
    initial = model.snapshot()
    reports = []

    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        if hasattr(train_source, "set_epoch"):
            train_source.set_epoch(epoch)

        total, correct, n = 0.0, 0, 0
        batches = tqdm(train_source, desc=f"epoch {epoch}", leave=False, disable=not progress)
        for images, onehot in batches:
            logits, caches = model.logits(images, training=True, rng=rng)
            loss, probs, grad = tensor.softmax_cross_entropy(logits, onehot)
            loss += model.l2_penalty(config.l2)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite training loss at epoch {epoch}",
                    checkpoint=_checkpoint(model, stopper.best_params or initial),
                    reports=reports)
            grads = model.backward(caches, grad, l2=config.l2)
            optimizer.step(params, grads)
            model.touch()

            total += loss * len(images)
            correct += int(np.sum(np.argmax(probs, axis=1) == np.argmax(onehot, axis=1)))
            n += len(images)

        if n == 0:
            raise TrainingFailure("training split produced no samples")
        train_loss = total / n
        val_loss, val_acc = evaluate_loss(model, val_source, config.l2)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingDiverged(
                f"non-finite loss after epoch {epoch}",
                checkpoint=_checkpoint(model, stopper.best_params or initial),
                reports=reports)

        report = EpochReport(epoch=epoch, train_loss=train_loss, train_acc=correct / n,
                             val_loss=val_loss, val_acc=val_acc,
                             seconds=time.perf_counter() - start)
        reports.append(report)
        logs_training.info(
            "epoch %d train_loss=%.4f train_acc=%.4f val_loss=%.4f val_acc=%.4f seconds=%.1f rss=%.1fMB",
            epoch, report.train_loss, report.train_acc, report.val_loss, report.val_acc,
            report.seconds, process_rss_mb())

        if stopper.update(epoch, val_loss, model):
            logging.info("Early stopping after epoch %d, best epoch %d", epoch, stopper.best_epoch)
            break

    model.restore(stopper.best_params)
    return reports, stopper


def fit(config: TrainingConfig, manifest, root=None, store=None, progress=False):
    if store is None:
        store = ImageStore(root, preprocess=config.preprocess, image_size=config.image_size)
    for split in ("train", "val"):
        if not any(manifest.counts(split).values()):
            raise UsageError(f"manifest has no {split} samples")

    model = build_model(config)
    train_source = batch_iterator(manifest, "train", config.batch_size, shuffle_seed=config.seed,
                                  augment=config.augment, store=store, workers=config.workers)
    val_source = batch_iterator(manifest, "val", config.batch_size, store=store, workers=config.workers)
    reports, stopper = train_loop(model, config, train_source, val_source, progress=progress)
    return FitResult(model, reports, stopper.best_epoch, skipped=dict(store.skipped))


def _kink_signature(model, caches):
    """ReLU sign masks and pool argmax positions of a training forward pass."""
    signature = []
    for layer, cache in zip(model.layers, caches.layers):
        if getattr(layer, "activation", None) == "relu":
            signature.append(cache.pre_activation > 0)
        if cache.argmax is not None:
            signature.append(cache.argmax)
    return signature


def _same_signature(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(model, images, labels, n_params=30, eps=1e-4, l2=0.0, seed=0, per_tensor=None,
                   max_redraws=50):
    """Analytic gradients against central differences, in double precision.

    n_params entries are drawn across all tensors (each tensor at least once),
    or per_tensor entries from every tensor when given. An entry whose ±eps
    step flips a ReLU sign or moves a pool argmax sits on a kink, so it is
    dropped and another entry of the same tensor is drawn.
    """
    model = model.astype("double")
    images = np.asarray(images, dtype=np.float64)
    onehot = np.zeros((len(labels), model.layers[-1].units))
    onehot[np.arange(len(labels)), labels] = 1.0

    def evaluate():
        logits, caches = model.logits(images, training=True, rng=seeded_rng(seed, GRADCHECK_STREAM))
        loss, _, grad_logits = tensor.softmax_cross_entropy(logits, onehot)
        return loss + model.l2_penalty(l2), caches, grad_logits

    _, caches, grad_logits = evaluate()
    reference = _kink_signature(model, caches)
    grads = model.backward(caches, grad_logits, l2=l2)
    tensors = list(model.tensors())
    analytic = {name: g for (name, _, _, _), g in zip(tensors, grads)}

    rng = seeded_rng(seed)
    if per_tensor:
        picks = [i for i in range(len(tensors)) for _ in range(per_tensor)]
    else:
        picks = list(range(len(tensors)))
        picks += [int(i) for i in rng.integers(len(tensors), size=max(0, n_params - len(tensors)))]

    per_tensor_error = {}
    checked = redrawn = 0
    for i in picks:
        name, layer, key, value = tensors[i]
        for _ in range(max_redraws):
            idx = tuple(int(v) for v in np.unravel_index(rng.integers(value.size), value.shape))
            original = value[idx]
            value[idx] = original + eps
            loss_plus, caches_plus, _ = evaluate()
            value[idx] = original - eps
            loss_minus, caches_minus, _ = evaluate()
            value[idx] = original
            if (_same_signature(reference, _kink_signature(model, caches_plus))
                    and _same_signature(reference, _kink_signature(model, caches_minus))):
                break
            redrawn += 1
        else:
            logging.warning("Gradient check: no kink-free entry found in %s", name)
            continue

        numeric = (loss_plus - loss_minus) / (2 * eps)
        a = float(analytic[name][idx])
        error = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        per_tensor_error[name] = max(per_tensor_error.get(name, 0.0), error)
        checked += 1

    return GradientCheckReport(per_tensor=per_tensor_error,
                               max_error=max(per_tensor_error.values(), default=0.0),
                               n_checked=checked, n_redrawn=redrawn)


def parse_grid(text):
    """'lr=0.001,0.01;batch=16,32' into {axis: [values]}."""
    grid = {}
    if not text or not text.strip():
        return grid
    for part in text.split(";"):
        if not part.strip():
            continue
        if "=" not in part:
            raise UsageError(f"grid axis {part!r} must look like name=v1,v2")
        axis, values = part.split("=", 1)
        axis = axis.strip()
        if axis not in SWEEP_AXES:
            raise UsageError(f"unknown sweep axis {axis}, expected one of {', '.join(SWEEP_AXES)}")
        parsed = []
        for v in values.split(","):
            v = v.strip()
            if not v:
                continue
            try:
                parsed.append(int(v) if SWEEP_AXES[axis] in ("batch_size", "filters", "dense_layers")
                              else float(v))
            except ValueError:
                raise UsageError(f"bad value {v!r} for sweep axis {axis}")
        grid[axis] = parsed
    return grid


def _rank(rows):
    ok = [r for r in rows if r.status == "ok"]
    failed = [r for r in rows if r.status != "ok"]
    ok.sort(key=lambda r: (-r.val_accuracy, r.val_loss))
    return ok + failed


def sweep(grid, manifest, base_config: TrainingConfig, root=None, store=None, subset=None,
          progress=False):
    """One fit per grid point on a fixed subset; rows ranked best first."""
    if not grid or any(len(values) == 0 for values in grid.values()):
        return []
    if subset:
        manifest = subset_manifest(manifest, subset)
    if store is None:
        store = ImageStore(root, preprocess=base_config.preprocess, image_size=base_config.image_size)

    axes = list(grid)
    rows = []
    points = list(itertools.product(*(grid[a] for a in axes)))
    for point in tqdm(points, desc="sweep", disable=not progress):
        point_config = dict(zip(axes, point))
        start = time.perf_counter()
        try:
            overrides = {SWEEP_AXES[a]: v for a, v in point_config.items()}
            config = TrainingConfig(**{**base_config.model_dump(), **overrides})
            result = fit(config, manifest, store=store)
            best = result.best_report
            rows.append(SweepRow(config=point_config, val_accuracy=best.val_acc,
                                 val_loss=best.val_loss, epochs_to_best=result.best_epoch,
                                 seconds=time.perf_counter() - start))
        except TrainingDiverged as e:
            logging.warning("Sweep point %s diverged: %s", point_config, e.detail)
            rows.append(SweepRow(config=point_config, seconds=time.perf_counter() - start,
                                 status="diverged"))
        except (ValidationError, ModelError, TensorShapeError, TrainingFailure) as e:
            logging.warning("Sweep point %s failed: %s", point_config, e)
            rows.append(SweepRow(config=point_config, seconds=time.perf_counter() - start,
                                 status="failed"))
    return _rank(rows)


def write_epoch_log(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds"])
        for r in reports:
            writer.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.train_acc:.6f}",
                             f"{r.val_loss:.6f}", f"{r.val_acc:.6f}", f"{r.seconds:.3f}"])


def write_sweep(rows, path, axes=None):
    if axes is None:
        axes = []
        for row in rows:
            axes.extend(a for a in row.config if a not in axes)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["rank", *axes, "val_accuracy", "val_loss", "epochs_to_best", "seconds", "status"])
        for rank, row in enumerate(rows, start=1):
            writer.writerow([
                rank, *[row.config.get(a, "") for a in axes],
                "" if row.val_accuracy is None else f"{row.val_accuracy:.6f}",
                "" if row.val_loss is None else f"{row.val_loss:.6f}",
                "" if row.epochs_to_best is None else row.epochs_to_best,
                f"{row.seconds:.3f}", row.status])
