import json
import typing as tp
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt
import pandas as pd

from cosmo.core import SplitSpec
from cosmo.exceptions import DatasetError, SplitError, ValidationError
from cosmo.log import LOGGER

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
MANIFEST_COLUMNS = ["relative_path", "class_name", "domain"]
CACHE_INDEX = "index.json"
CACHE_BLOB = "features.bin"
CACHE_FORMAT_VERSION = 1
FEATURE_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class ExampleRecord:
    """
    One image of the dataset, either as a path or as a cached feature vector.
    Ingestion keeps class and domain for every record; the trainer only ever
    sees target data through `TargetItem`.
    """

    item_ref: str
    class_name: str | None
    domain_tag: str | None
    is_source: bool = False
    feature: npt.NDArray[np.float32] | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class TargetItem:
    """Training view of a target record: no class name, no domain tag."""

    item_ref: str
    feature: npt.NDArray[np.float32] | None = field(default=None, compare=False, repr=False)


@dataclass
class BlendedTargetPool:
    """
    All target domains merged and shuffled into one unlabeled pool. Labels
    and domain tags sit in a side-table that only evaluation opens.
    """

    items: tuple[TargetItem, ...]
    _side_table: tuple[tuple[str, str], ...] = field(repr=False)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, index: int) -> TargetItem:
        return self.items[index]

    def unseal(self) -> list[ExampleRecord]:
        """Labelled records for evaluation, aligned with `items`."""
        return [
            ExampleRecord(item.item_ref, class_name, domain, False, item.feature)
            for item, (class_name, domain) in zip(self.items, self._side_table)
        ]


@dataclass
class BatchPair:
    source_batch: list[ExampleRecord]
    target_batch: list[TargetItem]
    source_indices: npt.NDArray[np.int64]
    target_indices: npt.NDArray[np.int64]

    def __post_init__(self) -> None:
        if len(self.source_batch) != len(self.target_batch):
            raise ValidationError(
                f"Batch halves differ in size: {len(self.source_batch)} source, {len(self.target_batch)} target."
            )


def _is_feature_cache(path: Path) -> bool:
    return (path / CACHE_INDEX).exists()


def scan_dataset(root: Path, domains: tp.Sequence[str] | None = None) -> list[ExampleRecord]:
    """
    Collect image records from a `root/domain/class/image` tree, or from a
    feature cache directory standing in for one.

    Args:
        root (Path): dataset root
        domains (tp.Sequence[str] | None): domains to read; None reads every
            domain directory under root

    Raises:
        FileNotFoundError: if root does not exist
        DatasetError: if a requested domain directory is missing

    Returns:
        list[ExampleRecord]: one record per image, sorted by domain, class, path
    """
    if not root.exists():
        raise FileNotFoundError(f"Dataset root {root} does not exist.")
    if _is_feature_cache(root):
        records = read_feature_cache(root).records()
        if domains is not None:
            missing = sorted(set(domains) - {r.domain_tag for r in records})
            if missing:
                raise DatasetError(f"Feature cache {root} has no records for domains {missing}.")
            records = [r for r in records if r.domain_tag in set(domains)]
        return records

    if domains is None:
        domains = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not domains:
        LOGGER.warning(f"No domain directories found under {root}.")
        return []

    records = []
    for domain in sorted(domains):
        domain_path = root / domain
        if not domain_path.is_dir():
            raise DatasetError(f"Domain directory {domain_path} does not exist.")
        for class_path in sorted(p for p in domain_path.iterdir() if p.is_dir()):
            images = sorted(
                p for p in class_path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
            )
            if not images:
                LOGGER.warning(f"Class directory {class_path} contains no images.")
            records.extend(ExampleRecord(str(p), class_path.name, domain) for p in images)
    LOGGER.info(
        f"Found {len(records)} images in {len(domains)} domains and "
        f"{len({r.class_name for r in records})} classes under {root}."
    )
    return records


def make_open_set_split(
    all_classes: tp.Iterable[str],
    n_known: int,
    source: str,
    targets: tp.Sequence[str],
    seed: int,
    dataset_name: str = "",
    dataset_root: str | None = None,
) -> SplitSpec:
    """Known classes are the lexicographically first `n_known`, unknown ones the rest.

    Raises:
        SplitError: if no unknown class would be left, or no target domain is given
    """
    classes = sorted(set(all_classes))
    if not 1 <= n_known < len(classes):
        raise SplitError(
            f"n_known={n_known} should be between 1 and {len(classes) - 1} for {len(classes)} "
            "classes, otherwise the split is not open-set."
        )
    if not targets:
        raise SplitError("At least one target domain is required.")
    return SplitSpec(
        dataset_name=dataset_name,
        source_domain=source,
        target_domains=tuple(targets),
        known_classes=tuple(classes[:n_known]),
        unknown_classes=tuple(classes[n_known:]),
        seed=seed,
        dataset_root=dataset_root,
    )


def group_by_domain(records: tp.Iterable[ExampleRecord]) -> dict[str, list[ExampleRecord]]:
    grouped: dict[str, list[ExampleRecord]] = {}
    for record in records:
        grouped.setdefault(record.domain_tag or "", []).append(record)
    return grouped


def build_source_pool(
    records: tp.Mapping[str, tp.Sequence[ExampleRecord]], split: SplitSpec
) -> list[ExampleRecord]:
    """Labelled source records restricted to the known classes."""
    known = set(split.known_classes)
    pool = [
        ExampleRecord(r.item_ref, r.class_name, r.domain_tag, True, r.feature)
        for r in records.get(split.source_domain, [])
        if r.class_name in known
    ]
    if not pool:
        raise DatasetError(f"Source domain {split.source_domain!r} has no records of known classes.")
    return pool


def blend_targets(
    records: tp.Mapping[str, tp.Sequence[ExampleRecord]], split: SplitSpec
) -> BlendedTargetPool:
    """Merge every target domain into one shuffled, unlabeled pool.

    Raises:
        DatasetError: if the target domains hold no records of the split's classes
    """
    target_classes = set(split.all_classes)
    merged: list[ExampleRecord] = []
    for domain in split.target_domains:
        domain_records = [r for r in records.get(domain, []) if r.class_name in target_classes]
        missing = sorted(target_classes - {r.class_name for r in domain_records})
        if missing:
            LOGGER.warning(f"Target domain {domain!r} has no records for {len(missing)} classes: {missing[:10]}")
        merged.extend(domain_records)
    if not merged:
        raise DatasetError(f"Target domains {list(split.target_domains)} contain no records.")

    order = np.random.default_rng(split.seed).permutation(len(merged))
    shuffled = [merged[i] for i in order]
    return BlendedTargetPool(
        items=tuple(TargetItem(r.item_ref, r.feature) for r in shuffled),
        _side_table=tuple((tp.cast(str, r.class_name), tp.cast(str, r.domain_tag)) for r in shuffled),
    )


def count_known_unknown(records: tp.Iterable[ExampleRecord], split: SplitSpec) -> dict[str, int]:
    known = set(split.known_classes)
    unknown = set(split.unknown_classes)
    counts = {"known": 0, "unknown": 0}
    for record in records:
        if record.class_name in known:
            counts["known"] += 1
        elif record.class_name in unknown:
            counts["unknown"] += 1
    return counts


def batch_indices(pool_size: int, batch_size: int, seed: int, stream: int, iteration: int) -> npt.NDArray[np.int64]:
    """Indices of one batch when the pool is cycled with a fresh permutation every epoch.

    The result depends only on its arguments, so any iteration can be
    produced without replaying the previous ones.
    """
    positions = np.arange(iteration * batch_size, (iteration + 1) * batch_size)
    epochs, offsets = np.divmod(positions, pool_size)
    indices = np.empty(batch_size, dtype=np.int64)
    for epoch in np.unique(epochs):
        order = np.random.default_rng([seed, stream, int(epoch)]).permutation(pool_size)
        mask = epochs == epoch
        indices[mask] = order[offsets[mask]]
    return indices


def sample_batch_pairs(
    source_pool: tp.Sequence[ExampleRecord],
    target_pool: tp.Sequence[TargetItem] | BlendedTargetPool,
    batch_size: int,
    seed: int,
    start_iteration: int = 0,
) -> tp.Iterator[BatchPair]:
    """Endless stream of (N source, N target) batches, deterministic given the seed.

    Raises:
        ValidationError: if batch_size < 1
        DatasetError: if a pool is empty
    """
    if batch_size < 1:
        raise ValidationError(f"Batch size should be at least 1, got {batch_size}.")
    if len(source_pool) == 0 or len(target_pool) == 0:
        raise DatasetError("Both source and target pools should be non-empty.")
    iteration = start_iteration
    while True:
        source_indices = batch_indices(len(source_pool), batch_size, seed, 0, iteration)
        target_indices = batch_indices(len(target_pool), batch_size, seed, 1, iteration)
        yield BatchPair(
            source_batch=[source_pool[i] for i in source_indices],
            target_batch=[target_pool[i] for i in target_indices],
            source_indices=source_indices,
            target_indices=target_indices,
        )
        iteration += 1


def write_manifest(records: tp.Iterable[ExampleRecord], path: Path, root: Path | None = None) -> None:
    rows = [
        {
            "relative_path": str(Path(r.item_ref).relative_to(root)) if root is not None else r.item_ref,
            "class_name": r.class_name,
            "domain": r.domain_tag,
        }
        for r in records
    ]
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(path, index=False)


def read_manifest(path: Path, root: Path) -> list[ExampleRecord]:
    if not path.exists():
        raise FileNotFoundError(f"Manifest {path} does not exist.")
    manifest = pd.read_csv(path, dtype=str)
    missing = sorted(set(MANIFEST_COLUMNS) - set(manifest.columns))
    if missing:
        raise DatasetError(f"Manifest {path} lacks columns {missing}.")
    return [
        ExampleRecord(str(root / row.relative_path), row.class_name, row.domain)
        for row in manifest.itertuples(index=False)
    ]


@dataclass
class FeatureCache:
    """Feature vectors read back from a cache directory, with their index rows."""

    index: pd.DataFrame
    vectors: list[npt.NDArray[np.float32]]

    def __len__(self) -> int:
        return len(self.vectors)

    def matrix(self) -> npt.NDArray[np.float32]:
        return np.stack(self.vectors) if self.vectors else np.empty((0, 0), dtype=np.float32)

    def records(self) -> list[ExampleRecord]:
        return [
            ExampleRecord(
                item_ref=str(row["relative_path"]),
                class_name=row["class_name"],
                domain_tag=row["domain"],
                feature=vector,
            )
            for row, vector in zip(self.index.to_dict("records"), self.vectors)
        ]


def write_feature_cache(
    directory: Path,
    vectors: npt.ArrayLike,
    index_rows: tp.Sequence[tp.Mapping[str, tp.Any]],
) -> None:
    """Write vectors as raw little-endian float32 plus an index document.

    Each index row needs `relative_path`, `class_name` and `domain`; extra keys
    are kept. `id`, `offset` (in floats) and `dim` are filled in here.
    """
    matrix = np.asarray(vectors, dtype=FEATURE_DTYPE)
    if matrix.ndim != 2 or matrix.shape[0] != len(index_rows):
        raise ValidationError(f"Expected {len(index_rows)} feature rows, got array of shape {matrix.shape}.")
    directory.mkdir(parents=True, exist_ok=True)
    dim = matrix.shape[1]
    records = [
        {"id": i, "offset": i * dim, "dim": dim} | dict(row) for i, row in enumerate(index_rows)
    ]
    (directory / CACHE_BLOB).write_bytes(matrix.tobytes(order="C"))
    (directory / CACHE_INDEX).write_text(
        json.dumps({"format_version": CACHE_FORMAT_VERSION, "records": records}, indent=1)
    )


def read_feature_cache(directory: Path) -> FeatureCache:
    index_path = directory / CACHE_INDEX
    if not index_path.exists():
        raise FileNotFoundError(f"Feature cache index {index_path} does not exist.")
    document = json.loads(index_path.read_text())
    if document.get("format_version") != CACHE_FORMAT_VERSION:
        raise DatasetError(
            f"Feature cache {directory} has format version {document.get('format_version')}, "
            f"expected {CACHE_FORMAT_VERSION}."
        )
    blob = np.fromfile(directory / CACHE_BLOB, dtype=FEATURE_DTYPE)
    needed = max((r["offset"] + r["dim"] for r in document["records"]), default=0)
    if blob.size < needed:
        raise DatasetError(
            f"Feature cache {directory} holds {blob.size} floats, its index needs {needed}; "
            f"{CACHE_BLOB} is truncated or does not belong to this index."
        )
    index = pd.DataFrame(document["records"], columns=None)
    vectors = [blob[r["offset"] : r["offset"] + r["dim"]] for r in document["records"]]
    if index.empty:
        index = pd.DataFrame(columns=["id", "offset", "dim"] + MANIFEST_COLUMNS)
    return FeatureCache(index=index, vectors=vectors)
