import contextlib
import dataclasses
import hashlib
import json
import math
import os
import shutil
import tempfile
import typing as tp
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from cosmo.bias_net import BiasNet, compute_bias
from cosmo.core import LabelSpace, TrainConfig, validate_config
from cosmo.data import BatchPair, BlendedTargetPool, ExampleRecord, sample_batch_pairs
from cosmo.encoders import EncoderBackend, TextEncoder, build_backend, encode_records
from cosmo.exceptions import CheckpointError, NonFiniteLossError
from cosmo.log import LOGGER
from cosmo.objective import (
    ProbVector,
    assign_pseudo_labels,
    class_probabilities,
    source_loss,
    target_loss,
)
from cosmo.prompts import PromptState, assemble_text_features, init_prompt_state

CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_METADATA = "metadata.json"
CHECKPOINTS_DIR = "checkpoints"
STEPS_FILE = "steps.jsonl"
DTYPES = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8")}


class CosmoModel(nn.Module):
    """Trainable surface: known/unknown contexts and the bias network.

    The frozen encoders are not submodules; they are passed in at call time.
    """

    def __init__(self, prompt_state: PromptState, bias_net: BiasNet, use_bias_net: bool = True) -> None:
        super().__init__()
        self.prompt_state = prompt_state
        self.bias_net = bias_net
        self.use_bias_net = use_bias_net
        if not use_bias_net:
            bias_net.requires_grad_(False)

    def bias(self, v: torch.Tensor) -> torch.Tensor:
        if not self.use_bias_net:
            return v.new_zeros(self.bias_net.token_dim)
        return compute_bias(v, self.bias_net)

    def text_features(self, v: torch.Tensor, text_encoder: TextEncoder) -> torch.Tensor:
        return assemble_text_features(self.prompt_state, self.bias(v), text_encoder)

    def forward(self, v: torch.Tensor, text_encoder: TextEncoder, temperature: float) -> ProbVector:
        return class_probabilities(v, self.text_features(v, text_encoder), temperature)

    def probabilities(self, v: torch.Tensor, text_encoder: TextEncoder, temperature: float) -> ProbVector:
        return self(v, text_encoder, temperature)


@dataclass
class EncodedPools:
    """Source and blended target pools with their frozen image features computed once."""

    source_records: list[ExampleRecord]
    target_pool: BlendedTargetPool
    source_features: torch.Tensor
    source_labels: torch.Tensor
    target_features: torch.Tensor

    def batch(self, pair: BatchPair) -> "FeatureBatch":
        return FeatureBatch(
            source_features=self.source_features[torch.as_tensor(pair.source_indices)],
            source_labels=self.source_labels[torch.as_tensor(pair.source_indices)],
            target_features=self.target_features[torch.as_tensor(pair.target_indices)],
        )


@dataclass
class FeatureBatch:
    source_features: torch.Tensor
    source_labels: torch.Tensor
    target_features: torch.Tensor


@dataclass
class TrainState:
    model: CosmoModel
    optimizer: torch.optim.AdamW
    iteration: int
    config: TrainConfig
    label_space: LabelSpace
    backend: EncoderBackend

    @property
    def prompt_state(self) -> PromptState:
        return self.model.prompt_state

    @property
    def bias_params(self) -> BiasNet:
        return self.model.bias_net


@dataclass
class StepReport:
    iteration: int
    source_loss: float
    target_loss: float
    known: int
    unknown: int
    discarded: int
    learning_rate: float
    target_skipped: bool = False

    def to_dict(self) -> dict[str, tp.Any]:
        return dataclasses.asdict(self)


@dataclass
class RunReport:
    steps: list[StepReport] = field(default_factory=list)
    resumed_from: int | None = None
    final_checksum: str = ""


def tensor_checksum(tensors: tp.Iterable[torch.Tensor]) -> str:
    digest = hashlib.sha256()
    for tensor in tensors:
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def cosine_learning_rate(iteration: int, total_iterations: int, base_learning_rate: float) -> float:
    """Cosine annealing from the base rate at iteration 0 to 0 at `total_iterations`."""
    return base_learning_rate * 0.5 * (1 + math.cos(math.pi * iteration / total_iterations))


@contextlib.contextmanager
def frozen(*params: nn.Parameter) -> tp.Iterator[None]:
    """Mask parameters for the duration of a sub-step: they get no gradient,
    so AdamW skips them (no moment update, no weight decay)."""
    previous = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, previous):
            p.requires_grad_(flag)


def init_train_state(backend: EncoderBackend, label_space: LabelSpace, cfg: TrainConfig) -> TrainState:
    """Fresh prompts, bias network and optimizer, seeded by `cfg.seed`."""
    if backend.token_bank.class_names != label_space.known_classes:
        backend = backend.with_classes(label_space.known_classes)
    dtype, _ = DTYPES[cfg.precision]
    prompt_state = init_prompt_state(
        backend.token_bank,
        cfg.context_length,
        cfg.seed,
        cfg.context_init,
        backend.embed_words,
        cfg.separate_prompts,
    )
    bias_net = BiasNet(
        backend.image_encoder.feature_dim,
        backend.token_bank.token_dim,
        cfg.hidden_width,
        torch.Generator().manual_seed(cfg.seed + 1),
        dtype=dtype,
    )
    model = CosmoModel(prompt_state, bias_net, cfg.use_bias_net).to(dtype)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    return TrainState(model, optimizer, 0, cfg, label_space, backend)


def _snapshot(loss: torch.Tensor, state: TrainState, sub_step: str) -> dict[str, tp.Any]:
    return {
        "iteration": state.iteration,
        "sub_step": sub_step,
        "loss": float(loss),
        "parameter_norms": {n: float(p.detach().norm()) for n, p in state.model.named_parameters()},
    }


def _check_finite(loss: torch.Tensor, state: TrainState, sub_step: str) -> None:
    if torch.isfinite(loss):
        return
    raise NonFiniteLossError(
        f"Non-finite {sub_step} loss at iteration {state.iteration}.", _snapshot(loss, state, sub_step)
    )


def _check_finite_gradients(loss: torch.Tensor, state: TrainState, sub_step: str) -> None:
    """Runs between backward and the optimizer step, so parameters are still clean when it raises."""
    bad = [
        n for n, p in state.model.named_parameters() if p.grad is not None and not bool(torch.isfinite(p.grad).all())
    ]
    if not bad:
        return
    snapshot = _snapshot(loss, state, sub_step) | {"non_finite_gradients": bad}
    raise NonFiniteLossError(
        f"Non-finite {sub_step} gradients at iteration {state.iteration} for {bad}.", snapshot
    )


def train_step(
    state: TrainState, batch: FeatureBatch, cfg: TrainConfig | None = None
) -> tuple[TrainState, StepReport]:
    """One iteration of the alternating-freeze schedule.

    (a) source batch with u frozen: source loss, update theta and s;
    (b) pseudo-labels for the target batch with the updated parameters;
    (c) target batch with s frozen: target loss, update theta and u.
    When every target instance is discarded, (c) is skipped.

    Raises:
        NonFiniteLossError: if a loss or a gradient is NaN or infinite
    """
    cfg = cfg or state.config
    model, optimizer = state.model, state.optimizer
    prompts = model.prompt_state
    text_encoder = state.backend.text_encoder
    learning_rate = cosine_learning_rate(state.iteration, cfg.total_iterations, cfg.learning_rate)
    for group in optimizer.param_groups:
        group["lr"] = learning_rate

    optimizer.zero_grad(set_to_none=True)
    with frozen(prompts.unknown_context):
        probs = model.probabilities(batch.source_features, text_encoder, cfg.temperature)
        loss_source = source_loss(probs, batch.source_labels, cfg.entropy_weight)
        _check_finite(loss_source, state, "source")
        loss_source.backward()
        _check_finite_gradients(loss_source, state, "source")
        optimizer.step()

    with torch.no_grad():
        target_probs = model.probabilities(batch.target_features, text_encoder, cfg.temperature)
    pseudo_labels = assign_pseudo_labels(
        target_probs, cfg.kappa_lower, cfg.kappa_upper, tp.cast(float, cfg.kappa_known)
    )
    retained = pseudo_labels.retained

    loss_target = 0.0
    if retained.any():
        optimizer.zero_grad(set_to_none=True)
        # with a shared prompt there is no separate u, so s learns in both sub-steps
        masked = (prompts.known_context,) if prompts.separate_prompts else ()
        with frozen(*masked):
            probs = model.probabilities(batch.target_features[retained], text_encoder, cfg.temperature)
            loss = target_loss(probs, pseudo_labels.labels[retained], cfg.entropy_weight)
            _check_finite(loss, state, "target")
            loss.backward()
            _check_finite_gradients(loss, state, "target")
            optimizer.step()
        loss_target = float(loss)
    else:
        LOGGER.debug(f"Iteration {state.iteration}: every target instance discarded, target update skipped.")
    optimizer.zero_grad(set_to_none=True)

    counts = pseudo_labels.counts()
    report = StepReport(
        iteration=state.iteration,
        source_loss=float(loss_source),
        target_loss=loss_target,
        known=counts["known"],
        unknown=counts["unknown"],
        discarded=counts["discarded"],
        learning_rate=learning_rate,
        target_skipped=not bool(retained.any()),
    )
    state.iteration += 1
    return state, report


def encode_pools(
    source_records: tp.Sequence[ExampleRecord],
    target_pool: BlendedTargetPool,
    backend: EncoderBackend,
    label_space: LabelSpace,
    dtype: torch.dtype = torch.float32,
) -> EncodedPools:
    """Run the frozen image encoder once over both pools."""
    LOGGER.info(f"Encoding {len(source_records)} source and {len(target_pool)} target images...")
    source_features = encode_records(list(source_records), backend.image_encoder).to(dtype)
    target_features = encode_records(target_pool.unseal(), backend.image_encoder).to(dtype)
    source_labels = torch.tensor([label_space.index_of(r.class_name) for r in source_records], dtype=torch.long)
    return EncodedPools(list(source_records), target_pool, source_features, source_labels, target_features)


def latest_checkpoint(run_dir: Path) -> Path | None:
    checkpoints = sorted((run_dir / CHECKPOINTS_DIR).glob("iter_*"))
    checkpoints = [c for c in checkpoints if (c / CHECKPOINT_METADATA).exists()]
    return checkpoints[-1] if checkpoints else None


def _truncate_steps(path: Path, iteration: int) -> None:
    """Keep the step reports of iterations before `iteration`, drop the rest."""
    if not path.exists():
        return
    kept = [line for line in path.read_text().splitlines() if line and json.loads(line)["iteration"] < iteration]
    path.write_text("".join(f"{line}\n" for line in kept))


def fit(
    pools: EncodedPools,
    backend: EncoderBackend,
    label_space: LabelSpace,
    cfg: TrainConfig,
    run_dir: Path | None = None,
    resume: bool = False,
) -> tuple[TrainState, RunReport]:
    """Train for `cfg.total_iterations` iterations with periodic checkpoints.

    Args:
        pools (EncodedPools): encoded source and target pools
        backend (EncoderBackend): frozen encoders and token bank
        label_space (LabelSpace): known classes in model row order
        cfg (TrainConfig): validated config
        run_dir (Path | None): where checkpoints and the step stream go;
            None trains in memory only
        resume (bool): continue from the latest checkpoint in `run_dir`

    Returns:
        tuple[TrainState, RunReport]: final state and per-step reports
    """
    cfg = validate_config(cfg)
    state = init_train_state(backend, label_space, cfg)
    report = RunReport()
    if resume and run_dir is not None and (checkpoint := latest_checkpoint(run_dir)) is not None:
        state = load_checkpoint(checkpoint, backend=state.backend, cfg=cfg)
        report.resumed_from = state.iteration
        LOGGER.info(f"Resuming from {checkpoint} at iteration {state.iteration}.")

    steps_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        _truncate_steps(run_dir / STEPS_FILE, state.iteration)
        steps_file = (run_dir / STEPS_FILE).open("a")

    batches = sample_batch_pairs(
        pools.source_records, pools.target_pool, cfg.batch_size, cfg.seed, start_iteration=state.iteration
    )
    progress_bar = tqdm(total=cfg.total_iterations, initial=state.iteration, desc="Training")
    try:
        while state.iteration < cfg.total_iterations:
            state, step_report = train_step(state, pools.batch(next(batches)), cfg)
            report.steps.append(step_report)
            if steps_file is not None:
                steps_file.write(json.dumps(step_report.to_dict()) + "\n")
            progress_bar.update(1)
            if state.iteration % 10 == 0:
                progress_bar.set_postfix(
                    {
                        "L_src": f"{step_report.source_loss:.3f}",
                        "L_tgt": f"{step_report.target_loss:.3f}",
                        "unk": step_report.unknown,
                        "lr": f"{step_report.learning_rate:.2e}",
                    },
                    refresh=False,
                )
            if run_dir is not None and (
                state.iteration % cfg.checkpoint_every == 0 or state.iteration == cfg.total_iterations
            ):
                save_checkpoint(state, run_dir / CHECKPOINTS_DIR / f"iter_{state.iteration:07d}")
    finally:
        progress_bar.close()
        if steps_file is not None:
            steps_file.close()

    skipped = sum(s.target_skipped for s in report.steps)
    if skipped:
        LOGGER.warning(f"Target update skipped in {skipped} of {len(report.steps)} iterations, every instance discarded.")
    report.final_checksum = tensor_checksum(state.model.parameters())
    LOGGER.info(f"Training finished at iteration {state.iteration}.")
    return state, report


def _named_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    tensors = {name: p.detach() for name, p in state.model.named_parameters()}
    for name, p in state.model.named_parameters():
        moments = state.optimizer.state.get(p, {})
        for key in ("exp_avg", "exp_avg_sq"):
            if key in moments:
                tensors[f"optimizer.{key}.{name}"] = moments[key].detach()
    return tensors


def save_checkpoint(state: TrainState, path: Path) -> None:
    """Write parameters and optimizer moments as raw blobs plus a metadata document.

    The directory is assembled next to its destination and renamed into place.
    """
    _, blob_dtype = DTYPES[state.config.precision]
    tensors = _named_tensors(state)
    steps = {
        name: float(state.optimizer.state[p]["step"])
        for name, p in state.model.named_parameters()
        if "step" in state.optimizer.state.get(p, {})
    }
    metadata = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "iteration": state.iteration,
        "config": state.config.to_dict(),
        "class_names": list(state.label_space.known_classes),
        "backend": state.backend.description,
        "dtype": state.config.precision,
        "tensors": {name: list(t.shape) for name, t in tensors.items()},
        "optimizer_steps": steps,
    }

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_dir = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        for name, tensor in tensors.items():
            (tmp_dir / f"{name}.bin").write_bytes(
                tensor.cpu().contiguous().numpy().astype(blob_dtype).tobytes()
            )
        (tmp_dir / CHECKPOINT_METADATA).write_text(json.dumps(metadata, indent=1, sort_keys=True))
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp_dir, path)
    except BaseException:
        shutil.rmtree(tmp_dir, ignore_errors=True)
        raise
    LOGGER.debug(f"Saved checkpoint {path}")


def load_checkpoint(
    path: Path,
    backend: EncoderBackend | None = None,
    cfg: TrainConfig | None = None,
) -> TrainState:
    """Restore a training state saved by `save_checkpoint`.

    Args:
        path (Path): checkpoint directory
        backend (EncoderBackend | None): encoders to attach; rebuilt from the
            stored description when None
        cfg (TrainConfig | None): current config; tensor shapes are checked
            against it, and it replaces the stored config

    Raises:
        CheckpointError: on a missing checkpoint, a format version mismatch or
            a tensor whose shape does not match the current config

    Returns:
        TrainState: state with parameters, moments and iteration restored
    """
    metadata_path = path / CHECKPOINT_METADATA
    if not metadata_path.exists():
        raise CheckpointError(f"Checkpoint {path} has no {CHECKPOINT_METADATA}.")
    metadata = json.loads(metadata_path.read_text())
    if metadata.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint {path} has format version {metadata.get('format_version')}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}."
        )

    label_space = LabelSpace(tuple(metadata["class_names"]))
    cfg = validate_config(cfg if cfg is not None else metadata["config"])
    torch_dtype, blob_dtype = DTYPES[metadata["dtype"]]
    if backend is None:
        backend = build_backend(metadata["backend"], label_space.known_classes, torch_dtype)
    state = init_train_state(backend, label_space, cfg)

    parameters = dict(state.model.named_parameters())
    for name, shape in metadata["tensors"].items():
        param_name = name.split(".", 2)[-1] if name.startswith("optimizer.") else name
        if param_name not in parameters:
            raise CheckpointError(f"Checkpoint tensor {name!r} has no counterpart in the model.")
        expected = list(parameters[param_name].shape)
        if shape != expected:
            raise CheckpointError(
                f"Checkpoint tensor {name!r} has shape {shape}, current config expects {expected}."
            )

    def read(name: str) -> torch.Tensor:
        blob = np.frombuffer((path / f"{name}.bin").read_bytes(), dtype=blob_dtype)
        return torch.from_numpy(blob.copy()).reshape(metadata["tensors"][name]).to(torch_dtype)

    with torch.no_grad():
        for name, param in parameters.items():
            param.copy_(read(name))
    for name, step in metadata["optimizer_steps"].items():
        state.optimizer.state[parameters[name]] = {
            "step": torch.tensor(step, dtype=torch.float32),
            "exp_avg": read(f"optimizer.exp_avg.{name}"),
            "exp_avg_sq": read(f"optimizer.exp_avg_sq.{name}"),
        }
    state.iteration = int(metadata["iteration"])
    return state
