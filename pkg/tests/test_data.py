from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
import pytest
from PIL import Image

from cosmo.data import (
    BatchPair,
    batch_indices,
    blend_targets,
    build_source_pool,
    count_known_unknown,
    group_by_domain,
    make_open_set_split,
    read_feature_cache,
    read_manifest,
    sample_batch_pairs,
    scan_dataset,
    write_feature_cache,
    write_manifest,
)
from cosmo.exceptions import DatasetError, SplitError, ValidationError
from tests.utils import (
    KNOWN_CLASSES,
    SOURCE,
    TARGETS,
    UNKNOWN_CLASSES,
    create_input_data,
    synthetic_records,
    synthetic_split,
)


@pytest.fixture
def records():
    return group_by_domain(synthetic_records(per_class=4))


def create_image_tree(root: Path, layout: dict[str, dict[str, int]]) -> None:
    for domain, classes in layout.items():
        for class_name, n_images in classes.items():
            class_dir = root / domain / class_name
            class_dir.mkdir(parents=True)
            for i in range(n_images):
                Image.new("RGB", (4, 4), color=(i, 0, 0)).save(class_dir / f"{i}.png")


def test_scan_image_tree():
    with TemporaryDirectory() as tmp_dir:
        root = Path(tmp_dir)
        create_image_tree(root, {"amazon": {"bike": 2, "mug": 1}, "dslr": {"bike": 1, "mug": 0}})
        (root / "amazon" / "bike" / "notes.txt").write_text("not an image")

        records = scan_dataset(root)

    assert len(records) == 4
    assert [r.domain_tag for r in records] == ["amazon", "amazon", "amazon", "dslr"]
    assert {r.class_name for r in records} == {"bike", "mug"}


def test_scan_missing_root():
    with pytest.raises(FileNotFoundError):
        scan_dataset(Path("/no/such/dataset"))


def test_scan_missing_domain():
    with TemporaryDirectory() as tmp_dir:
        create_image_tree(Path(tmp_dir), {"amazon": {"bike": 1}})
        with pytest.raises(DatasetError):
            scan_dataset(Path(tmp_dir), ["amazon", "webcam"])


def test_scan_empty_root():
    with TemporaryDirectory() as tmp_dir:
        assert scan_dataset(Path(tmp_dir)) == []


def test_scan_feature_cache():
    with TemporaryDirectory() as tmp_dir:
        path = create_input_data(tmp_dir, per_class=3)
        records = scan_dataset(path, [SOURCE])

    assert len(records) == 3 * (len(KNOWN_CLASSES) + len(UNKNOWN_CLASSES))
    assert all(r.feature is not None and r.feature.shape == (64,) for r in records)


def test_make_open_set_split():
    classes = [f"class_{i:02d}" for i in range(31)]
    split = make_open_set_split(classes, 10, "amazon", ["dslr", "webcam"], seed=0)

    assert split.known_classes == tuple(classes[:10])
    assert split.unknown_classes == tuple(classes[10:])
    assert split.label_space.unknown_index == 10


@pytest.mark.parametrize("n_known", [0, 3])
def test_closed_set_split(n_known):
    with pytest.raises(SplitError):
        make_open_set_split(["a", "b", "c"], n_known, "amazon", ["dslr"], seed=0)


def test_build_source_pool_drops_unknown_classes(records):
    pool = build_source_pool(records, synthetic_split())

    assert len(pool) == 4 * len(KNOWN_CLASSES)
    assert all(r.is_source and r.class_name in KNOWN_CLASSES for r in pool)


def test_blend_targets_hides_labels(records):
    pool = blend_targets(records, synthetic_split())

    assert len(pool) == 2 * 4 * (len(KNOWN_CLASSES) + len(UNKNOWN_CLASSES))
    assert not hasattr(pool[0], "class_name")
    assert not hasattr(pool[0], "domain_tag")
    assert {r.domain_tag for r in pool.unseal()} == set(TARGETS)


def test_blend_targets_is_deterministic(records):
    first = blend_targets(records, synthetic_split(seed=1))
    second = blend_targets(records, synthetic_split(seed=1))
    other = blend_targets(records, synthetic_split(seed=2))

    assert [i.item_ref for i in first.items] == [i.item_ref for i in second.items]
    assert [i.item_ref for i in first.items] != [i.item_ref for i in other.items]


def test_blend_targets_empty():
    with pytest.raises(DatasetError):
        blend_targets({SOURCE: []}, synthetic_split())


def test_count_known_unknown(records):
    counts = count_known_unknown(records[TARGETS[0]], synthetic_split())
    assert counts == {"known": 4 * len(KNOWN_CLASSES), "unknown": 4 * len(UNKNOWN_CLASSES)}


def test_batch_indices_cover_each_epoch():
    indices = np.concatenate([batch_indices(10, 5, seed=0, stream=0, iteration=i) for i in range(4)])

    assert sorted(indices[:10]) == list(range(10))
    assert sorted(indices[10:]) == list(range(10))
    assert list(indices[:10]) != list(indices[10:])


def test_batch_indices_cross_epoch_boundary():
    indices = batch_indices(7, 5, seed=0, stream=1, iteration=1)
    assert len(indices) == 5
    assert all(0 <= i < 7 for i in indices)


def test_sample_batch_pairs_resume(records):
    split = synthetic_split()
    source_pool = build_source_pool(records, split)
    target_pool = blend_targets(records, split)

    stream = sample_batch_pairs(source_pool, target_pool, batch_size=8, seed=3)
    pairs = [next(stream) for _ in range(5)]
    resumed = next(sample_batch_pairs(source_pool, target_pool, batch_size=8, seed=3, start_iteration=4))

    assert len(pairs[0].source_batch) == len(pairs[0].target_batch) == 8
    assert np.array_equal(resumed.source_indices, pairs[4].source_indices)
    assert np.array_equal(resumed.target_indices, pairs[4].target_indices)


def test_sample_batch_pairs_empty_pool():
    with pytest.raises(DatasetError):
        next(sample_batch_pairs([], [], batch_size=4, seed=0))


def test_batch_pair_sizes_differ(records):
    source = records[SOURCE][:2]
    with pytest.raises(ValidationError):
        BatchPair(source, [], np.arange(2), np.arange(0))


def test_manifest_round_trip():
    with TemporaryDirectory() as tmp_dir:
        root = Path(tmp_dir)
        create_image_tree(root / "data", {"amazon": {"bike": 2}})
        records = scan_dataset(root / "data")
        write_manifest(records, root / "manifest.csv", root / "data")
        read_back = read_manifest(root / "manifest.csv", root / "data")

    assert read_back == records


def test_feature_cache_round_trip():
    vectors = np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32)
    rows = [{"relative_path": f"x/{i}.jpg", "class_name": "bike", "domain": "amazon", "kind": "image"} for i in range(3)]
    with TemporaryDirectory() as tmp_dir:
        write_feature_cache(Path(tmp_dir), vectors, rows)
        cache = read_feature_cache(Path(tmp_dir))
        blob_size = (Path(tmp_dir) / "features.bin").stat().st_size

    assert blob_size == 3 * 5 * 4
    assert np.array_equal(cache.matrix(), vectors)
    assert list(cache.index["offset"]) == [0, 5, 10]
    assert list(cache.index["kind"]) == ["image"] * 3


def test_feature_cache_version_mismatch():
    with TemporaryDirectory() as tmp_dir:
        write_feature_cache(Path(tmp_dir), np.zeros((1, 2)), [{"relative_path": "a", "class_name": "b", "domain": "c"}])
        index = Path(tmp_dir) / "index.json"
        index.write_text(index.read_text().replace('"format_version": 1', '"format_version": 2'))
        with pytest.raises(DatasetError):
            read_feature_cache(Path(tmp_dir))


def test_feature_cache_truncated_blob():
    vectors = np.ones((3, 4), dtype=np.float32)
    rows = [{"relative_path": f"x/{i}.jpg", "class_name": "bike", "domain": "amazon"} for i in range(3)]
    with TemporaryDirectory() as tmp_dir:
        write_feature_cache(Path(tmp_dir), vectors, rows)
        blob = Path(tmp_dir) / "features.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(DatasetError, match="truncated"):
            read_feature_cache(Path(tmp_dir))
