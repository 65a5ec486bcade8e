import os

import numpy as np
import pytest

from app.dataset import (ArrayBatches, BatchIterator, ImageStore, batch_iterator, inspect_dimensions,
                         load_manifest, onehot, save_manifest, scan_dataset, stratified_split,
                         subset_manifest)
from app.exceptions import DatasetError, SplitError
from app.models import CLASS_NAMES, SampleRecord, SplitManifest


class IndexStore:
    """Returns a tiny image whose pixels encode the sample index."""

    def __init__(self):
        self.skipped = {}

    def try_load(self, path):
        return np.full((2, 2, 3), float(path.split("_")[-1]), dtype=np.float32)


def single_class_manifest(n, split="train"):
    paths = [f"Arborio/img_{i}" for i in range(n)]
    classes = {"Arborio": {"train": [], "val": [], "test": []}}
    classes["Arborio"][split] = paths
    return SplitManifest(seed=0, ratios=[0.8, 0.1, 0.1], classes=classes, fingerprint={"Arborio": n})


def records(per_class):
    return [SampleRecord(path=f"{name}/{i:05d}.jpg", label=label)
            for label, name in enumerate(CLASS_NAMES) for i in range(per_class)]


def test_scanCountsPerClass(corpus):
    stats, samples = scan_dataset(corpus)
    assert stats.counts == {name: 10 for name in CLASS_NAMES}
    assert stats.total == 50
    assert samples[0].path == "Arborio/arborio_000.png"
    assert [s.label for s in samples[:10]] == [0] * 10


def test_scanIgnoresOtherFiles(corpus):
    with open(os.path.join(corpus, "Basmati", "notes.txt"), "w") as f:
        f.write("not an image")
    stats, _ = scan_dataset(corpus)
    assert stats.counts["Basmati"] == 10


def test_scanMissingClass(corpus):
    for f in os.listdir(os.path.join(corpus, "Jasmine")):
        os.remove(os.path.join(corpus, "Jasmine", f))
    with pytest.raises(DatasetError, match="Jasmine"):
        scan_dataset(corpus)
    os.rmdir(os.path.join(corpus, "Jasmine"))
    with pytest.raises(DatasetError, match="Jasmine"):
        scan_dataset(corpus)


def test_scanMissingRoot(tmp_path):
    with pytest.raises(DatasetError):
        scan_dataset(str(tmp_path / "nowhere"))


def test_inspectDimensions(corpus):
    _, samples = scan_dataset(corpus)
    summary = inspect_dimensions(corpus, samples)
    assert set(summary) == set(CLASS_NAMES)
    assert summary["Ipsala"].min_width == summary["Ipsala"].max_height == 60


def test_splitSmallCorpus(corpus):
    _, samples = scan_dataset(corpus)
    manifest = stratified_split(samples, seed=0)
    for split, expected in (("train", 8), ("val", 1), ("test", 1)):
        assert manifest.counts(split) == {name: expected for name in CLASS_NAMES}
    assert manifest.fingerprint == {name: 10 for name in CLASS_NAMES}


def test_splitFullSizeCounts():
    manifest = stratified_split(records(15000), seed=7)
    assert manifest.counts("train")["Karacadag"] == 12000
    assert manifest.counts("val")["Karacadag"] == 1500
    assert manifest.counts("test")["Karacadag"] == 1500


def test_splitsAreDisjointAndComplete():
    samples = records(37)
    manifest = stratified_split(samples, seed=3, ratios=(0.7, 0.15, 0.15))
    seen = [r.path for split in ("train", "val", "test") for r in manifest.files(split)]
    assert len(seen) == len(set(seen)) == len(samples)
    assert manifest.counts("val")["Arborio"] == 5


def test_splitIsDeterministic(tmp_path):
    samples = records(20)
    save_manifest(stratified_split(samples, seed=11), tmp_path / "a.json")
    save_manifest(stratified_split(list(reversed(samples)), seed=11), tmp_path / "b.json")
    save_manifest(stratified_split(samples, seed=12), tmp_path / "c.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.json").read_bytes() != (tmp_path / "c.json").read_bytes()


def test_splitRejectsBadRatios():
    for ratios in ((0.8, 0.1), (0.5, 0.3, 0.1), (1.0, 0.0, 0.0), (0.9, 0.2, -0.1)):
        with pytest.raises(SplitError):
            stratified_split(records(10), seed=0, ratios=ratios)


def test_splitRejectsTinyClass():
    samples = [s for s in records(10) if s.label != 4] + records(2)[-2:]
    with pytest.raises(SplitError, match="Karacadag"):
        stratified_split(samples, seed=0)


def test_manifestRoundTrip(tmp_path):
    manifest = stratified_split(records(10), seed=1)
    save_manifest(manifest, tmp_path / "m.json")
    assert load_manifest(tmp_path / "m.json") == manifest


def test_loadManifestErrors(tmp_path):
    with pytest.raises(DatasetError):
        load_manifest(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text('{"seed": "x"}')
    with pytest.raises(DatasetError):
        load_manifest(tmp_path / "bad.json")


def test_subsetManifest():
    manifest = subset_manifest(stratified_split(records(100), seed=0), 20)
    assert manifest.counts("train") == {name: 20 for name in CLASS_NAMES}
    assert manifest.counts("val") == {name: 2 for name in CLASS_NAMES}
    assert manifest.fingerprint["Basmati"] == 24
    with pytest.raises(SplitError):
        subset_manifest(manifest, 0)


def test_onehot():
    assert onehot([2, 0]).tolist() == [[0, 0, 1, 0, 0], [1, 0, 0, 0, 0]]


def test_batchSizes():
    batches = BatchIterator(single_class_manifest(100), "train", 32, IndexStore())
    assert len(batches) == 4
    assert [len(images) for images, _ in batches] == [32, 32, 32, 4]


def test_batchesFollowManifestOrderWithoutShuffle():
    batches = BatchIterator(single_class_manifest(10), "train", 4, IndexStore())
    values = [int(img[0, 0, 0]) for images, _ in batches for img in images]
    assert values == list(range(10))


def test_shuffledEpochCoversEverySample():
    batches = BatchIterator(single_class_manifest(50), "train", 8, IndexStore(), shuffle_seed=5)
    orders = []
    for epoch in (1, 2):
        batches.set_epoch(epoch)
        values = [int(img[0, 0, 0]) for images, _ in batches for img in images]
        assert sorted(values) == list(range(50))
        orders.append(values)
    assert orders[0] != orders[1]


def test_labelsMatchRecords(corpus):
    _, samples = scan_dataset(corpus)
    manifest = stratified_split(samples, seed=0)
    batches = BatchIterator(manifest, "train", 16, ImageStore(corpus))
    labels = np.concatenate([np.argmax(y, axis=1) for _, y in batches])
    assert labels.tolist() == [r.label for r in manifest.files("train")]


def test_augmentOffMatchesStore(corpus):
    _, samples = scan_dataset(corpus)
    manifest = stratified_split(samples, seed=0)
    store = ImageStore(corpus)
    images = np.concatenate([x for x, _ in BatchIterator(manifest, "val", 2, store)])
    expected = np.stack([store.load(r.path) for r in manifest.files("val")])
    assert images.dtype == np.float32
    assert images.shape == (5, 50, 50, 3)
    assert np.array_equal(images, expected)


def test_augmentationIsSeededPermutation(corpus):
    _, samples = scan_dataset(corpus)
    manifest = stratified_split(samples, seed=0)
    store = ImageStore(corpus)

    def run():
        return np.concatenate([x for x, _ in BatchIterator(manifest, "train", 8, store,
                                                            shuffle_seed=2, augment=True)])

    first, second = run(), run()
    assert np.array_equal(first, second)
    plain = np.concatenate([x for x, _ in BatchIterator(manifest, "train", 8, store, shuffle_seed=2)])
    for a, b in zip(first, plain):
        assert np.array_equal(np.sort(a.ravel()), np.sort(b.ravel()))


def test_workersDoNotChangeBatches(corpus):
    _, samples = scan_dataset(corpus)
    manifest = stratified_split(samples, seed=0)
    serial = list(BatchIterator(manifest, "train", 7, ImageStore(corpus), shuffle_seed=1))
    threaded = list(BatchIterator(manifest, "train", 7, ImageStore(corpus), shuffle_seed=1, workers=3))
    assert len(serial) == len(threaded)
    for (xa, ya), (xb, yb) in zip(serial, threaded):
        assert np.array_equal(xa, xb)
        assert np.array_equal(ya, yb)


def test_corruptFileIsSkipped(corpus):
    with open(os.path.join(corpus, "Arborio", "arborio_999.png"), "wb") as f:
        f.write(b"\x89PNG garbage")
    _, samples = scan_dataset(corpus)
    manifest = stratified_split(samples, seed=0)
    store = ImageStore(corpus)
    total = 0
    for split in ("train", "val", "test"):
        batches = BatchIterator(manifest, split, 4, store)
        total += sum(len(x) for x, _ in batches)
    assert total == 50
    assert list(store.skipped) == ["Arborio/arborio_999.png"]
    assert os.path.isfile(os.path.join(os.environ["LOGS_PATH"], "ingestion.log"))


def test_arrayBatches():
    images = np.zeros((5, 2, 2, 3))
    batches = ArrayBatches(images, [0, 1, 2, 3, 4], 2, shuffle_seed=0)
    assert len(batches) == 3
    labels = np.concatenate([np.argmax(y, axis=1) for _, y in batches])
    assert sorted(labels.tolist()) == [0, 1, 2, 3, 4]


def test_batchIteratorOpensStoreFromRoot(corpus):
    _, samples = scan_dataset(corpus)
    manifest = stratified_split(samples, seed=0)
    batches = batch_iterator(manifest, "test", 4, root=corpus)
    assert len(batches) == 2
    got = [(x.shape, y.shape) for x, y in batches]
    assert got == [((4, 50, 50, 3), (4, 5)), ((1, 50, 50, 3), (1, 5))]


def test_imageStoreCacheIsBounded(corpus):
    _, samples = scan_dataset(corpus)
    paths = [s.path for s in samples[:5]]
    store = ImageStore(corpus, cache_size=3)
    first = store.load(paths[0])
    for path in paths[1:3]:
        store.load(path)
    assert store.load(paths[0]) is first
    store.load(paths[3])
    store.load(paths[4])
    assert list(store.cache) == [paths[0], paths[3], paths[4]]
    assert np.array_equal(store.load(paths[1]), ImageStore(corpus, cache_size=0).load(paths[1]))


def test_imageStoreWithoutCache(corpus):
    store = ImageStore(corpus, cache_size=0)
    store.load("Arborio/arborio_000.png")
    assert len(store.cache) == 0
