import json
import typing as tp
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt
import pandas as pd
import torch
from sklearn.metrics import confusion_matrix

from cosmo.core import LabelSpace, MetricsReport
from cosmo.data import ExampleRecord, write_feature_cache
from cosmo.encoders import EncoderBackend
from cosmo.exceptions import LabelSpaceError, ValidationError
from cosmo.log import LOGGER
from cosmo.prompts import assemble_text_features
from cosmo.trainer import TrainState

BASELINE_TEMPLATE = "a {}"
BASELINE_TEMPERATURE = 0.01
DEFAULT_THRESHOLD = 0.5
BLENDED = "blended"
METRICS_JSON = "metrics.json"
METRICS_TABLE = "metrics.txt"
EMBEDDINGS_DIR = "embeddings"
METRICS_COLUMNS_ROUNDING = {
    "OS*": 2,
    "UNK": 2,
    "HOS": 2,
    "OS": 2,
}


@dataclass(frozen=True)
class PredictionSet:
    """Predicted and ground-truth indices over the same label space, one per sample."""

    predicted: npt.NDArray[np.int64]
    ground_truth: npt.NDArray[np.int64]
    label_space: LabelSpace
    domain_tags: tuple[str | None, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "predicted", np.asarray(self.predicted, dtype=np.int64))
        object.__setattr__(self, "ground_truth", np.asarray(self.ground_truth, dtype=np.int64))
        if not self.domain_tags:
            object.__setattr__(self, "domain_tags", (None,) * len(self.predicted))
        if not len(self.predicted) == len(self.ground_truth) == len(self.domain_tags):
            raise ValidationError(
                f"{len(self.predicted)} predictions, {len(self.ground_truth)} labels and "
                f"{len(self.domain_tags)} domain tags."
            )
        for name, values in (("predicted", self.predicted), ("ground_truth", self.ground_truth)):
            if len(values) and (values.min() < 0 or values.max() > self.label_space.unknown_index):
                raise LabelSpaceError(
                    f"{name} indices should be in [0, {self.label_space.unknown_index}]."
                )

    def __len__(self) -> int:
        return len(self.predicted)

    def select(self, mask: npt.NDArray[np.bool_]) -> "PredictionSet":
        return PredictionSet(
            self.predicted[mask],
            self.ground_truth[mask],
            self.label_space,
            tuple(tag for tag, keep in zip(self.domain_tags, mask) if keep),
        )

    @property
    def domains(self) -> list[str]:
        return sorted({tag for tag in self.domain_tags if tag is not None})


def predict(v: torch.Tensor, W: torch.Tensor, temperature: float) -> torch.Tensor:
    """Most probable slot among the |C_k|+1; ties go to the lowest index.

    The temperature does not change the argmax of a softmax, so it only
    scales the logits.
    """
    similarities = (W @ v.unsqueeze(-1)).squeeze(-1) if W.dim() == v.dim() + 1 else v @ W.T
    return torch.argmax(similarities / temperature, dim=-1)


def harmonic_mean(os_star: float, unk: float) -> float:
    """HOS = 2 * OS* * UNK / (OS* + UNK), 0 when both are 0.

    Examples:
        >>> round(harmonic_mean(90.64, 94.36), 2)
        92.46
    """
    if os_star + unk == 0:
        return 0.0
    return 2 * os_star * unk / (os_star + unk)


def compute_metrics(preds: PredictionSet, label_space: LabelSpace | None = None) -> MetricsReport:
    """Open-set metrics of a prediction set, in percent.

    Args:
        preds (PredictionSet): predictions with ground truth
        label_space (LabelSpace | None): must match the prediction set's;
            defaults to it

    Raises:
        ValidationError: on an empty prediction set
        LabelSpaceError: on mismatching label spaces

    Returns:
        MetricsReport: OS* over known classes with samples, UNK (None when no
            unknown sample was evaluated), HOS and OS
    """
    label_space = label_space or preds.label_space
    if label_space != preds.label_space:
        raise LabelSpaceError("Predictions were made over a different label space.")
    if len(preds) == 0:
        raise ValidationError("Cannot compute metrics of an empty prediction set.")

    n_known = label_space.n_known
    matrix = confusion_matrix(preds.ground_truth, preds.predicted, labels=np.arange(label_space.n_outputs))
    support = matrix.sum(axis=1)
    per_class = {
        name: matrix[c, c] / support[c] for c, name in enumerate(label_space.known_classes) if support[c] > 0
    }
    os_star = 100 * float(np.mean(list(per_class.values()))) if per_class else None
    unk = 100 * matrix[n_known, n_known] / support[n_known] if support[n_known] > 0 else None

    hos = os = None
    if os_star is not None and unk is not None:
        unk = float(unk)
        hos = harmonic_mean(os_star, unk)
        os = (n_known * os_star + unk) / (n_known + 1)
    return MetricsReport(
        per_known_class_accuracy={name: float(accuracy) for name, accuracy in per_class.items()},
        os_star=os_star,
        unk=None if unk is None else float(unk),
        hos=hos,
        os=os,
        counts={"known": int(support[:n_known].sum()), "unknown": int(support[n_known])},
    )


def compute_domain_metrics(preds: PredictionSet) -> dict[str, MetricsReport]:
    """Blended-pool metrics followed by one report per domain tag."""
    reports = {BLENDED: compute_metrics(preds)}
    tags = np.array(preds.domain_tags, dtype=object)
    for domain in preds.domains:
        reports[domain] = compute_metrics(preds.select(tags == domain))
    return reports


def build_zero_shot_classifier(
    backend: EncoderBackend, class_names: tp.Sequence[str], template: str = BASELINE_TEMPLATE
) -> torch.Tensor:
    """Text features (|C_k|, d_v) of fixed prompts such as "a dog", no learned context."""
    return torch.stack([backend.encode_text(template.format(name.replace("_", " "))) for name in class_names])


def zero_shot_predict(
    v: torch.Tensor,
    known_text_features: torch.Tensor,
    threshold: float = DEFAULT_THRESHOLD,
    temperature: float = BASELINE_TEMPERATURE,
) -> torch.Tensor:
    """Argmax over the known classes; unknown (index |C_k|) when the winning
    probability is below `threshold`. A threshold of 1 or more rejects everything."""
    with torch.no_grad():
        probs = torch.softmax((v @ known_text_features.T) / temperature, dim=-1)
        predicted = probs.argmax(dim=-1)
        confidence = probs.gather(-1, predicted.unsqueeze(-1)).squeeze(-1)
        reject = (confidence < threshold) | (threshold >= 1.0)
        return torch.where(reject, torch.full_like(predicted, known_text_features.shape[0]), predicted)


def _ground_truth(records: tp.Sequence[ExampleRecord], label_space: LabelSpace) -> PredictionSet:
    return PredictionSet(
        predicted=np.zeros(len(records), dtype=np.int64),
        ground_truth=np.array([label_space.index_of(tp.cast(str, r.class_name)) for r in records], dtype=np.int64),
        label_space=label_space,
        domain_tags=tuple(r.domain_tag for r in records),
    )


def zero_shot_baseline(
    v: torch.Tensor,
    known_text_features: torch.Tensor,
    threshold: float,
    records: tp.Sequence[ExampleRecord],
    label_space: LabelSpace,
) -> PredictionSet:
    """Threshold baseline predictions for `records` with their ground truth attached."""
    truth = _ground_truth(records, label_space)
    predicted = zero_shot_predict(v, known_text_features, threshold).numpy()
    return PredictionSet(predicted, truth.ground_truth, label_space, truth.domain_tags)


def evaluate_features(
    state: TrainState,
    v: torch.Tensor,
    records: tp.Sequence[ExampleRecord],
    batch_size: int = 256,
) -> PredictionSet:
    """Predictions of a trained state on encoded records."""
    truth = _ground_truth(records, state.label_space)
    text_encoder = state.backend.text_encoder
    predicted = []
    with torch.no_grad():
        for start in range(0, len(v), batch_size):
            batch = v[start : start + batch_size]
            predicted.append(predict(batch, state.model.text_features(batch, text_encoder), state.config.temperature))
    predicted_array = torch.cat(predicted).numpy() if predicted else np.zeros(0, dtype=np.int64)
    return PredictionSet(predicted_array, truth.ground_truth, state.label_space, truth.domain_tags)


def export_embeddings(
    state: TrainState, v: torch.Tensor, records: tp.Sequence[ExampleRecord], out_dir: Path
) -> None:
    """Write the |C_k|+1 text features and the image features in the feature cache format.

    Text rows come first, in label space order with the unknown prompt last.
    The bias token is averaged over the exported images.
    """
    with torch.no_grad():
        if len(v):
            beta = state.model.bias(v).reshape(-1, state.model.bias_net.token_dim).mean(dim=0)
        else:
            beta = v.new_zeros(state.model.bias_net.token_dim)
        W = assemble_text_features(state.model.prompt_state, beta, state.backend.text_encoder)
    names = list(state.label_space.known_classes) + ["unknown"]
    text_rows = [
        {"relative_path": f"text/{name}", "class_name": name, "domain": "text", "kind": "text"} for name in names
    ]
    image_rows = [
        {"relative_path": r.item_ref, "class_name": r.class_name, "domain": r.domain_tag, "kind": "image"}
        for r in records
    ]
    vectors = torch.cat([W.float(), v.float()]).numpy()
    write_feature_cache(out_dir, vectors, text_rows + image_rows)
    LOGGER.info(f"Exported {len(text_rows)} text and {len(image_rows)} image embeddings to {out_dir}")


def metrics_table(reports: tp.Mapping[str, MetricsReport]) -> pd.DataFrame:
    table = pd.DataFrame(
        [
            {"pool": pool, "OS*": report.os_star, "UNK": report.unk, "HOS": report.hos, "OS": report.os}
            for pool, report in reports.items()
        ]
    )
    table[list(METRICS_COLUMNS_ROUNDING)] = table[list(METRICS_COLUMNS_ROUNDING)].astype(float).round(
        METRICS_COLUMNS_ROUNDING
    )
    return table


def format_metrics_table(reports: tp.Mapping[str, MetricsReport]) -> str:
    table = metrics_table(reports)
    for column, decimals in METRICS_COLUMNS_ROUNDING.items():
        table[column] = table[column].map(lambda x: "n/a" if pd.isna(x) else f"{x:.{decimals}f}")
    return table.to_string(index=False)


def save_metrics(reports: tp.Mapping[str, MetricsReport], out_dir: Path) -> tuple[Path, Path]:
    """Write the structured metrics document and the plain-text table."""
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / METRICS_JSON
    table_path = out_dir / METRICS_TABLE
    LOGGER.info(f"Saving metrics to {json_path}")
    json_path.write_text(json.dumps({pool: report.to_dict() for pool, report in reports.items()}, indent=1))
    table_path.write_text(format_metrics_table(reports) + "\n")
    return json_path, table_path
