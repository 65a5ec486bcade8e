import logging
import math
import os
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image
from pydantic import ValidationError

from app import imaging
from app.exceptions import DatasetError, GrainNotFound, ImageDecodeError, SplitError
from app.models import (CLASS_NAMES, SPLITS, CannyConfig, DatasetStats, DimensionSummary,
                        SampleRecord, SplitManifest)
from app.tools import get_logger, seeded_rng, write_json
from modules.loaders import LOADERS

# guards float products like 100 * 0.29 landing just under an integer
CUT_EPSILON = 1e-9

# about 600 MB of 50x50x3 float32 samples
DEFAULT_CACHE_IMAGES = 20000


def scan_dataset(root):
    """Enumerates root/<ClassName>/*.{jpg,png} in sorted filename order."""
    if not os.path.isdir(root):
        raise DatasetError(f"dataset root {root} is not a directory")

    samples = []
    counts = {}
    for label, name in enumerate(CLASS_NAMES):
        folder = os.path.join(root, name)
        if not os.path.isdir(folder):
            raise DatasetError(f"missing class directory: {name}")
        files = sorted(f for f in os.listdir(folder)
                       if os.path.splitext(f)[1].lower() in LOADERS
                       and os.path.isfile(os.path.join(folder, f)))
        if not files:
            raise DatasetError(f"class {name} has no images")
        counts[name] = len(files)
        samples.extend(SampleRecord(path=f"{name}/{f}", label=label) for f in files)

    return DatasetStats(counts=counts, total=sum(counts.values())), samples


def inspect_dimensions(root, samples):
    """Per-class min/max source image size, read from file headers only."""
    sizes = {}
    for record in samples:
        try:
            with Image.open(os.path.join(root, record.path)) as im:
                sizes.setdefault(CLASS_NAMES[record.label], []).append(im.size)
        except OSError as e:
            get_logger("ingestion").warning("Skipping %s: %s", record.path, e)
    summary = {}
    for name, dims in sizes.items():
        widths = [w for w, _ in dims]
        heights = [h for _, h in dims]
        summary[name] = DimensionSummary(
            min_width=min(widths), max_width=max(widths),
            min_height=min(heights), max_height=max(heights))
    return summary


def _check_ratios(ratios):
    if len(ratios) != len(SPLITS):
        raise SplitError(f"expected {len(SPLITS)} split ratios, got {len(ratios)}")
    if any(r <= 0 for r in ratios):
        raise SplitError("split ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"split ratios must sum to 1, got {sum(ratios)}")


def stratified_split(samples, seed, ratios=(0.8, 0.1, 0.1)):
    _check_ratios(ratios)
    _, r_val, r_test = ratios

    by_class = {name: [] for name in CLASS_NAMES}
    for record in samples:
        by_class[CLASS_NAMES[record.label]].append(record.path)

    classes = {}
    fingerprint = {}
    for label, name in enumerate(CLASS_NAMES):
        paths = sorted(by_class[name])
        n = len(paths)
        if n < len(SPLITS):
            raise SplitError(f"class {name} has {n} samples, fewer than {len(SPLITS)} splits")
        order = seeded_rng(seed, label).permutation(n)
        shuffled = [paths[i] for i in order]
        n_val = math.floor(n * r_val + CUT_EPSILON)
        n_test = math.floor(n * r_test + CUT_EPSILON)
        n_train = n - n_val - n_test
        classes[name] = {
            "train": shuffled[:n_train],
            "val": shuffled[n_train:n_train + n_val],
            "test": shuffled[n_train + n_val:],
        }
        fingerprint[name] = n

    return SplitManifest(seed=seed, ratios=list(ratios), classes=classes, fingerprint=fingerprint)


def subset_manifest(manifest: SplitManifest, n):
    """Caps each class at n train samples and a proportional val/test count."""
    if n < 1:
        raise SplitError("subset size must be at least 1")
    r_train, r_val, r_test = manifest.ratios
    caps = {
        "train": n,
        "val": max(1, int(n * r_val / r_train)),
        "test": max(1, int(n * r_test / r_train)),
    }
    classes = {name: {split: files[:caps[split]] for split, files in splits.items()}
               for name, splits in manifest.classes.items()}
    fingerprint = {name: sum(len(files) for files in splits.values())
                   for name, splits in classes.items()}
    return SplitManifest(seed=manifest.seed, ratios=manifest.ratios,
                         classes=classes, fingerprint=fingerprint)


def save_manifest(manifest: SplitManifest, path):
    write_json(path, manifest.model_dump())


def load_manifest(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return SplitManifest.model_validate_json(f.read())
    except OSError as e:
        raise DatasetError(f"cannot read manifest {path}: {e}")
    except ValidationError as e:
        raise DatasetError(f"invalid manifest {path}: {e}")


class ImageStore:
    """Decoded, preprocessed and normalized samples, cached by path.

    The cache keeps at most cache_size samples (least recently used go first);
    0 disables it. Defaults to RICE_CACHE_IMAGES.
    """

    def __init__(self, root, preprocess="raw", canny=None, image_size=50, cache_size=None):
        self.root = root
        self.preprocess = preprocess
        self.canny = canny or CannyConfig()
        self.image_size = image_size
        if cache_size is None:
            cache_size = int(os.environ.get("RICE_CACHE_IMAGES", DEFAULT_CACHE_IMAGES))
        self.cache_size = cache_size
        self.cache = OrderedDict()
        self.lock = threading.Lock()
        self.skipped = {}

    def load(self, path):
        with self.lock:
            if path in self.cache:
                self.cache.move_to_end(path)
                return self.cache[path]
        img = imaging.decode_and_resize(os.path.join(self.root, path), self.image_size)
        img = imaging.preprocess_image(img, self.preprocess, self.canny)
        pixels = imaging.normalize(img).pixels.astype(np.float32)
        if self.cache_size > 0:
            with self.lock:
                self.cache[path] = pixels
                while len(self.cache) > self.cache_size:
                    self.cache.popitem(last=False)
        return pixels

    def try_load(self, path):
        try:
            return self.load(path)
        except (ImageDecodeError, GrainNotFound) as e:
            if path not in self.skipped:
                self.skipped[path] = str(e)
                get_logger("ingestion").warning("Skipping %s: %s", path, e)
                logging.warning("Skipping sample %s: %s", path, e)
            return None


def onehot(labels, n_classes=len(CLASS_NAMES)):
    out = np.zeros((len(labels), n_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


class BatchIterator:
    """Per-epoch stream of (images[B,H,W,3], onehot[B,5]) for one split.

    Decoding may fan out to worker threads; batches always come out in the
    seeded shuffle order.
    """

    def __init__(self, manifest: SplitManifest, split, batch_size, store: ImageStore,
                 shuffle_seed=None, augment=False, workers=0):
        if batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        self.records = manifest.files(split)
        self.split = split
        self.batch_size = batch_size
        self.store = store
        self.shuffle_seed = shuffle_seed
        self.augment = augment
        self.workers = workers
        self.epoch = 0

    def __len__(self):
        return math.ceil(len(self.records) / self.batch_size)

    @property
    def skipped(self):
        paths = {r.path for r in self.records}
        return {p: reason for p, reason in self.store.skipped.items() if p in paths}

    def set_epoch(self, epoch):
        self.epoch = epoch

    def order(self):
        if self.shuffle_seed is None:
            return list(self.records)
        perm = seeded_rng(self.shuffle_seed, self.epoch).permutation(len(self.records))
        return [self.records[i] for i in perm]

    def _augmented(self, pixels, position):
        rng = seeded_rng(self.shuffle_seed or 0, self.epoch, position)
        for transform in imaging.random_transforms(rng):
            pixels = imaging.augment_pixels(pixels, transform)
        return np.ascontiguousarray(pixels)

    def __iter__(self):
        records = self.order()
        pool = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 0 else None
        try:
            for start in range(0, len(records), self.batch_size):
                chunk = records[start:start + self.batch_size]
                paths = [r.path for r in chunk]
                loaded = list(pool.map(self.store.try_load, paths)) if pool else \
                    [self.store.try_load(p) for p in paths]

                images, labels = [], []
                for offset, (record, pixels) in enumerate(zip(chunk, loaded)):
                    if pixels is None:
                        continue
                    if self.augment:
                        pixels = self._augmented(pixels, start + offset)
                    images.append(pixels)
                    labels.append(record.label)
                if images:
                    yield np.stack(images), onehot(labels)
        finally:
            if pool:
                pool.shutdown()


def batch_iterator(manifest, split, batch_size, shuffle_seed=None, augment=False,
                   store=None, root=None, workers=0):
    if store is None:
        store = ImageStore(root)
    return BatchIterator(manifest, split, batch_size, store,
                         shuffle_seed=shuffle_seed, augment=augment, workers=workers)


class ArrayBatches:
    """In-memory batch source with the BatchIterator interface."""

    def __init__(self, images, labels, batch_size, shuffle_seed=None):
        self.images = np.asarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=int)
        self.batch_size = batch_size
        self.shuffle_seed = shuffle_seed
        self.epoch = 0
        self.skipped = {}

    def __len__(self):
        return math.ceil(len(self.labels) / self.batch_size)

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __iter__(self):
        idx = np.arange(len(self.labels))
        if self.shuffle_seed is not None:
            idx = seeded_rng(self.shuffle_seed, self.epoch).permutation(len(self.labels))
        for start in range(0, len(idx), self.batch_size):
            sel = idx[start:start + self.batch_size]
            yield self.images[sel], onehot(self.labels[sel])
