from pathlib import Path

import numpy as np
import torch

from cosmo.core import SplitSpec, TrainConfig
from cosmo.data import ExampleRecord, write_feature_cache
from cosmo.encoders import UNKNOWN_WORD, EncoderBackend, toy_backend

FEATURE_DIM = 64
KNOWN_CLASSES = ("apple", "bicycle", "candle", "desk", "eagle")
UNKNOWN_CLASSES = ("forest", "guitar", "hammer")
SOURCE = "studio"
TARGETS = ("sketch", "street")
DOMAIN_SHIFT = 0.3


def unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def synthetic_backend(dtype: torch.dtype = torch.float32, seed: int = 0) -> EncoderBackend:
    return toy_backend(FEATURE_DIM, FEATURE_DIM, seed, KNOWN_CLASSES, dtype)


def synthetic_split(seed: int = 0, dataset_root: str | None = None) -> SplitSpec:
    return SplitSpec(
        dataset_name="synthetic",
        source_domain=SOURCE,
        target_domains=TARGETS,
        known_classes=KNOWN_CLASSES,
        unknown_classes=UNKNOWN_CLASSES,
        seed=seed,
        dataset_root=dataset_root,
    )


def synthetic_config(**overrides) -> TrainConfig:
    values = {
        "batch_size": 16,
        "temperature": 0.1,
        "learning_rate": 0.005,
        "total_iterations": 40,
        "checkpoint_every": 20,
    }
    return TrainConfig(**(values | overrides))


def class_means(backend: EncoderBackend, seed: int = 0) -> dict[str, np.ndarray]:
    """
    Known classes sit on the text features of their bare names, so the
    untrained prompts already point at them. Unknown classes get random
    directions orthogonal to every known mean and to the "unknown." prompt.
    """
    known = np.stack([backend.encode_text(name).double().numpy() for name in KNOWN_CLASSES])
    unknown_prompt = backend.encode_text(UNKNOWN_WORD).double().numpy()
    rng = np.random.default_rng([seed, 7])
    span = np.concatenate([known, unknown_prompt[None]])
    basis, _ = np.linalg.qr(span.T)
    unknown = rng.standard_normal((len(UNKNOWN_CLASSES), FEATURE_DIM))
    unknown = unknown - (unknown @ basis) @ basis.T
    means = dict(zip(KNOWN_CLASSES, unit(known)))
    means |= dict(zip(UNKNOWN_CLASSES, unit(unknown)))
    return means


def sample_features(
    means: dict[str, np.ndarray],
    domains: tuple[str, ...],
    per_class: int,
    seed: int,
) -> tuple[np.ndarray, list[dict[str, str]]]:
    """Gaussian clusters around the class means, shifted by a fixed offset per domain."""
    offsets = {
        domain: DOMAIN_SHIFT * unit(np.random.default_rng([i, 11]).standard_normal(FEATURE_DIM))
        for i, domain in enumerate((SOURCE, *TARGETS))
    }
    rng = np.random.default_rng(seed)
    noise_scale = 0.2 / np.sqrt(FEATURE_DIM)
    vectors, rows = [], []
    for domain in domains:
        for class_name, mean in means.items():
            noise = rng.standard_normal((per_class, FEATURE_DIM)) * noise_scale
            vectors.append(unit(mean + offsets[domain] + noise))
            rows.extend(
                {"relative_path": f"{domain}/{class_name}/{seed}_{i:03d}.npy", "class_name": class_name, "domain": domain}
                for i in range(per_class)
            )
    return np.concatenate(vectors).astype(np.float32), rows


def synthetic_records(
    domains: tuple[str, ...] = (SOURCE, *TARGETS), per_class: int = 20, seed: int = 0
) -> list[ExampleRecord]:
    vectors, rows = sample_features(class_means(synthetic_backend()), domains, per_class, seed)
    return [
        ExampleRecord(row["relative_path"], row["class_name"], row["domain"], feature=vector)
        for row, vector in zip(rows, vectors)
    ]


def create_input_data(dir_path, per_class: int = 20, seed: int = 0) -> Path:
    """Write a feature cache dataset with one source and two target domains."""
    vectors, rows = sample_features(class_means(synthetic_backend()), (SOURCE, *TARGETS), per_class, seed)
    path = Path(dir_path) / "features"
    write_feature_cache(path, vectors, rows)
    return path


def write_config(path: Path, **overrides) -> Path:
    lines = {
        "kappa_lower": 0.4,
        "kappa_upper": 0.6,
        "kappa_known": 0.6,
        "total_iterations": 40,
        "weight_decay": 0.01,
        "batch_size": 16,
        "temperature": 0.1,
        "learning_rate": 0.005,
        "checkpoint_every": 20,
    } | overrides
    path.write_text("".join(f"{key}: {value}\n" for key, value in lines.items()))
    return path
