import dataclasses
import json
import shutil
from pathlib import Path
from tempfile import TemporaryDirectory

import pytest
import torch
from pytest import approx
from torch.func import functional_call
from tqdm import tqdm

from cosmo.core import LabelSpace, validate_config
from cosmo.data import blend_targets, build_source_pool, group_by_domain, sample_batch_pairs
from cosmo.encoders import toy_backend
from cosmo.exceptions import CheckpointError, NonFiniteLossError
from cosmo.objective import DISCARD, source_loss, target_loss
from cosmo.trainer import (
    CHECKPOINTS_DIR,
    STEPS_FILE,
    cosine_learning_rate,
    encode_pools,
    fit,
    frozen,
    init_train_state,
    load_checkpoint,
    save_checkpoint,
    tensor_checksum,
    train_step,
)
from tests.utils import synthetic_backend, synthetic_config, synthetic_records, synthetic_split


@pytest.fixture(scope="module")
def pools():
    split = synthetic_split()
    records = group_by_domain(synthetic_records(per_class=6))
    backend = synthetic_backend()
    return encode_pools(
        build_source_pool(records, split), blend_targets(records, split), backend, split.label_space
    )


@pytest.fixture
def cfg():
    return validate_config(synthetic_config())


@pytest.fixture
def state(cfg):
    return init_train_state(synthetic_backend(), synthetic_split().label_space, cfg)


def batch_stream(pools, batch_size, seed=0):
    for pair in sample_batch_pairs(pools.source_records, pools.target_pool, batch_size, seed):
        yield pools.batch(pair)


def checksum(tensor: torch.Tensor) -> str:
    return tensor_checksum([tensor])


def test_cosine_learning_rate():
    assert cosine_learning_rate(0, 2000, 0.001) == 0.001
    assert cosine_learning_rate(1000, 2000, 0.001) == approx(0.0005)
    assert cosine_learning_rate(1999, 2000, 0.001) == approx(0.0, abs=1e-6)
    assert cosine_learning_rate(2000, 2000, 0.001) == approx(0.0, abs=1e-12)


def test_learning_rate_written_to_optimizer(state, pools, cfg):
    batches = batch_stream(pools, cfg.batch_size)
    reports = [train_step(state, next(batches), cfg)[1] for _ in range(3)]

    assert reports[0].learning_rate == cfg.learning_rate
    assert state.optimizer.param_groups[0]["lr"] == reports[2].learning_rate
    assert [r.iteration for r in reports] == [0, 1, 2]


def test_frozen_restores_flags(state):
    prompts = state.prompt_state
    with frozen(prompts.known_context, prompts.unknown_context):
        assert not prompts.known_context.requires_grad
        assert not prompts.unknown_context.requires_grad
    assert prompts.known_context.requires_grad
    assert prompts.unknown_context.requires_grad


def test_freeze_invariants(pools, monkeypatch):
    cfg = validate_config(synthetic_config(total_iterations=100))
    state = init_train_state(synthetic_backend(), synthetic_split().label_space, cfg)
    prompts = state.prompt_state
    named = dict(state.model.named_parameters())
    constants_before = tensor_checksum(state.backend.constants())
    calls = []
    original_step = state.optimizer.step

    def recording_step(*args, **kwargs):
        without_grad = {name for name, p in named.items() if p.grad is None}
        before = {name: checksum(p) for name, p in named.items()}
        result = original_step(*args, **kwargs)
        after = {name: checksum(p) for name, p in named.items()}
        calls.append((without_grad, before, after))
        return result

    monkeypatch.setattr(state.optimizer, "step", recording_step)
    batches = batch_stream(pools, cfg.batch_size)
    reports = [train_step(state, next(batches), cfg)[1] for _ in range(100)]

    position = 0
    for report in reports:
        source_call = calls[position]
        assert "prompt_state.unknown_context" in source_call[0]
        assert source_call[1]["prompt_state.unknown_context"] == source_call[2]["prompt_state.unknown_context"]
        assert source_call[1]["prompt_state.known_context"] != source_call[2]["prompt_state.known_context"]
        assert source_call[1]["bias_net.b2"] != source_call[2]["bias_net.b2"]
        position += 1
        if report.target_skipped:
            continue
        target_call = calls[position]
        assert "prompt_state.known_context" in target_call[0]
        assert target_call[1]["prompt_state.known_context"] == target_call[2]["prompt_state.known_context"]
        assert target_call[1]["prompt_state.unknown_context"] != target_call[2]["prompt_state.unknown_context"]
        assert target_call[1]["bias_net.b2"] != target_call[2]["bias_net.b2"]
        position += 1

    assert position == len(calls)
    assert any(not r.target_skipped for r in reports)
    assert prompts.known_context.requires_grad and prompts.unknown_context.requires_grad
    assert tensor_checksum(state.backend.constants()) == constants_before


def test_step_report_counts(state, pools, cfg):
    batches = batch_stream(pools, cfg.batch_size)
    for _ in range(5):
        _, report = train_step(state, next(batches), cfg)
        assert report.known + report.unknown + report.discarded == cfg.batch_size
        assert report.target_skipped == (report.known + report.unknown == 0)


def test_all_discarded_reduces_to_source_only_step(pools):
    cfg = validate_config(synthetic_config(entropy_weight=0.0, kappa_lower=1e-6, kappa_upper=1.5, kappa_known=1.5))
    state = init_train_state(synthetic_backend(), synthetic_split().label_space, cfg)
    reference = init_train_state(synthetic_backend(), synthetic_split().label_space, cfg)
    batch = next(batch_stream(pools, cfg.batch_size))

    _, report = train_step(state, batch, cfg)

    for group in reference.optimizer.param_groups:
        group["lr"] = cfg.learning_rate
    with frozen(reference.prompt_state.unknown_context):
        probs = reference.model.probabilities(batch.source_features, reference.backend.text_encoder, cfg.temperature)
        source_loss(probs, batch.source_labels, 0.0).backward()
        reference.optimizer.step()

    assert report.target_skipped
    assert report.discarded == cfg.batch_size
    assert report.target_loss == 0.0
    assert tensor_checksum(state.model.parameters()) == tensor_checksum(reference.model.parameters())


def test_shared_prompt_leaves_unknown_context_untrained(pools):
    cfg = validate_config(synthetic_config(separate_prompts=False))
    state = init_train_state(synthetic_backend(), synthetic_split().label_space, cfg)
    u_before = checksum(state.prompt_state.unknown_context)
    batches = batch_stream(pools, cfg.batch_size)
    for _ in range(5):
        train_step(state, next(batches), cfg)

    assert checksum(state.prompt_state.unknown_context) == u_before
    assert not state.prompt_state.unknown_context.requires_grad


def test_bias_net_disabled(pools):
    cfg = validate_config(synthetic_config(use_bias_net=False))
    state = init_train_state(synthetic_backend(), synthetic_split().label_space, cfg)
    before = tensor_checksum(state.model.bias_net.parameters())
    batches = batch_stream(pools, cfg.batch_size)
    for _ in range(5):
        train_step(state, next(batches), cfg)

    assert tensor_checksum(state.model.bias_net.parameters()) == before


def test_non_finite_loss(state, pools, cfg):
    with torch.no_grad():
        state.prompt_state.known_context.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as error:
        train_step(state, next(batch_stream(pools, cfg.batch_size)), cfg)
    assert error.value.snapshot["sub_step"] == "source"
    assert error.value.snapshot["iteration"] == 0


def test_non_finite_gradients_stop_before_the_update(state, pools, cfg, monkeypatch):
    # sqrt at -0.0 is finite but its gradient is not
    monkeypatch.setattr("cosmo.trainer.source_loss", lambda probs, labels, weight: torch.sqrt(probs.log_probs.sum() * 0.0))
    before = tensor_checksum(state.model.parameters())

    with pytest.raises(NonFiniteLossError) as error:
        train_step(state, next(batch_stream(pools, cfg.batch_size)), cfg)

    assert error.value.snapshot["sub_step"] == "source"
    assert "prompt_state.known_context" in error.value.snapshot["non_finite_gradients"]
    assert tensor_checksum(state.model.parameters()) == before


def test_training_at_default_temperature_stays_finite(pools):
    cfg = validate_config(synthetic_config(temperature=0.01))
    state = init_train_state(synthetic_backend(), synthetic_split().label_space, cfg)
    batches = batch_stream(pools, cfg.batch_size)

    for _ in range(20):
        state, _ = train_step(state, next(batches), cfg)

    for name, param in state.model.named_parameters():
        assert torch.isfinite(param).all(), name


def test_progress_bar_reaches_total_on_resume(pools, monkeypatch):
    finished_at = []

    class RecordingBar(tqdm):
        def close(self):
            finished_at.append(self.n)
            super().close()

    monkeypatch.setattr("cosmo.trainer.tqdm", RecordingBar)
    cfg = validate_config(synthetic_config(total_iterations=25, checkpoint_every=7))
    with TemporaryDirectory() as tmp_dir:
        run_dir = Path(tmp_dir)
        fit(pools, synthetic_backend(), synthetic_split().label_space, cfg, run_dir)
        for name in ("iter_0000021", "iter_0000025"):
            shutil.rmtree(run_dir / CHECKPOINTS_DIR / name)
        _, report = fit(pools, synthetic_backend(), synthetic_split().label_space, cfg, run_dir, resume=True)

    assert report.resumed_from == 14
    assert finished_at == [25, 25]


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(seed):
    backend = toy_backend(8, 6, seed=seed, class_names=["dog", "cat", "fire_truck"], dtype=torch.float64)
    cfg = validate_config({"context_length": 2, "hidden_width": 4, "precision": "float64", "seed": seed})
    state = init_train_state(backend, LabelSpace(("dog", "cat", "fire_truck")), cfg)
    generator = torch.Generator().manual_seed(seed)
    params = {
        name: (torch.randn(p.shape, generator=generator, dtype=torch.float64) * 0.5).requires_grad_()
        for name, p in state.model.named_parameters()
    }
    names = list(params)
    v = torch.nn.functional.normalize(torch.randn(4, 8, generator=generator, dtype=torch.float64), dim=-1)
    source_labels = torch.tensor([0, 1, 2, 1])
    target_labels = torch.tensor([0, 3, DISCARD, 3])

    def probs(*tensors):
        return functional_call(state.model, dict(zip(names, tensors)), (v, backend.text_encoder, 0.5))

    def source_objective(*tensors):
        return source_loss(probs(*tensors), source_labels, 1.0)

    def target_objective(*tensors):
        return target_loss(probs(*tensors), target_labels, 1.0)

    inputs = tuple(params[name] for name in names)
    assert torch.autograd.gradcheck(source_objective, inputs, eps=1e-6, atol=1e-8, rtol=1e-4)
    assert torch.autograd.gradcheck(target_objective, inputs, eps=1e-6, atol=1e-8, rtol=1e-4)


def test_fit_is_deterministic(pools, cfg):
    backend, label_space = synthetic_backend(), synthetic_split().label_space
    first, _ = fit(pools, backend, label_space, cfg)
    second, _ = fit(pools, backend, label_space, cfg)
    other, _ = fit(pools, backend, label_space, dataclasses.replace(cfg, seed=1))

    assert tensor_checksum(first.model.parameters()) == tensor_checksum(second.model.parameters())
    assert tensor_checksum(first.model.parameters()) != tensor_checksum(other.model.parameters())


def test_fit_writes_steps_and_checkpoints(pools, cfg):
    with TemporaryDirectory() as tmp_dir:
        run_dir = Path(tmp_dir)
        state, report = fit(pools, synthetic_backend(), synthetic_split().label_space, cfg, run_dir)
        lines = (run_dir / STEPS_FILE).read_text().splitlines()
        checkpoints = sorted(p.name for p in (run_dir / CHECKPOINTS_DIR).iterdir())

    assert state.iteration == cfg.total_iterations
    assert len(lines) == len(report.steps) == cfg.total_iterations
    assert json.loads(lines[0])["iteration"] == 0
    assert checkpoints == ["iter_0000020", "iter_0000040"]


def test_checkpoint_round_trip(state, pools, cfg):
    batches = batch_stream(pools, cfg.batch_size)
    for _ in range(3):
        train_step(state, next(batches), cfg)

    with TemporaryDirectory() as tmp_dir:
        first, second = Path(tmp_dir) / "first", Path(tmp_dir) / "second"
        save_checkpoint(state, first)
        loaded = load_checkpoint(first)
        save_checkpoint(loaded, second)

        assert loaded.iteration == 3
        assert tensor_checksum(loaded.model.parameters()) == tensor_checksum(state.model.parameters())
        for path in sorted(first.iterdir()):
            assert path.read_bytes() == (second / path.name).read_bytes()
        assert [p.name for p in sorted(first.iterdir())] == [p.name for p in sorted(second.iterdir())]

    loaded_params = dict(loaded.model.named_parameters())
    for name, p in state.model.named_parameters():
        moments, loaded_moments = state.optimizer.state[p], loaded.optimizer.state[loaded_params[name]]
        assert torch.equal(moments["exp_avg"], loaded_moments["exp_avg"])
        assert float(moments["step"]) == float(loaded_moments["step"])


def test_checkpoint_shape_guard(state, cfg):
    with TemporaryDirectory() as tmp_dir:
        save_checkpoint(state, Path(tmp_dir) / "ckpt")
        with pytest.raises(CheckpointError, match="known_context"):
            load_checkpoint(Path(tmp_dir) / "ckpt", cfg=dataclasses.replace(cfg, context_length=8))


def test_checkpoint_version_guard(state):
    with TemporaryDirectory() as tmp_dir:
        path = Path(tmp_dir) / "ckpt"
        save_checkpoint(state, path)
        metadata = json.loads((path / "metadata.json").read_text())
        metadata["format_version"] = 99
        (path / "metadata.json").write_text(json.dumps(metadata))
        with pytest.raises(CheckpointError, match="format version"):
            load_checkpoint(path)


def test_missing_checkpoint():
    with pytest.raises(CheckpointError):
        load_checkpoint(Path("/no/such/checkpoint"))


def test_resumed_run_matches_unbroken_run(pools, cfg):
    backend, label_space = synthetic_backend(), synthetic_split().label_space
    with TemporaryDirectory() as tmp_dir:
        run_dir = Path(tmp_dir)
        unbroken, _ = fit(pools, backend, label_space, cfg, run_dir)
        shutil.rmtree(run_dir / CHECKPOINTS_DIR / "iter_0000040")
        resumed, report = fit(pools, backend, label_space, cfg, run_dir, resume=True)
        n_lines = len((run_dir / STEPS_FILE).read_text().splitlines())

    assert report.resumed_from == 20
    assert len(report.steps) == 20
    assert n_lines == 40
    for p, q in zip(unbroken.model.parameters(), resumed.model.parameters()):
        assert torch.allclose(p, q, atol=1e-6)
    assert tensor_checksum(unbroken.model.parameters()) == tensor_checksum(resumed.model.parameters())
