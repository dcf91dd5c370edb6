import json

import numpy as np
import pytest
import torch
from conftest import small_config

from hsi_fewshot.errors import ConfigError, TrainingError
from hsi_fewshot.objectives import ObjectiveConfig, compute_prototypes, fsl_loss
from hsi_fewshot.trainer import (
    TrainState,
    check_log_identity,
    compute_losses,
    load_checkpoint,
    next_task,
    prepare_data,
    read_log,
    resolve_checkpoint,
    run_training,
    seed_streams,
    train,
    train_step,
)


@pytest.fixture
def setup(synthetic_pair):
    src, tgt = synthetic_pair
    cfg = small_config()
    data = prepare_data(cfg, src, tgt)
    return cfg, data, TrainState.create(cfg, data)


def test_prepare_data_counts(setup):
    cfg, data, _ = setup
    assert len(data.target_support) == 3 * 5
    assert len(data.target_pool) == 3 * 200
    assert data.ways == 3
    assert data.source.role == "source" and data.target.role == "target"


def test_seed_streams_deterministic():
    a, b = seed_streams(3), seed_streams(3)
    assert a[0].integers(1 << 30) == b[0].integers(1 << 30)
    assert a[3] == b[3] and a[3] != seed_streams(4)[3]


def test_missing_target_path_raises(synthetic_pair):
    with pytest.raises(ConfigError):
        prepare_data(small_config(), synthetic_pair[0], None)


def test_parity_alternates(setup):
    cfg, data, state = setup
    episode, opposite = next_task(state, data, cfg)
    assert episode.domain == "source" and opposite.domain == "target"
    state.step = 1
    episode, opposite = next_task(state, data, cfg)
    assert episode.domain == "target" and opposite.domain == "source"


def test_two_episode_log_domains(synthetic_pair, tmp_path):
    cfg = small_config(train={"episodes": 2})
    run_training(cfg, tmp_path, *synthetic_pair)
    assert [r["domain"] for r in read_log(tmp_path / "train.log.jsonl")] == ["source", "target"]


def test_same_domain_rejected(setup):
    cfg, data, state = setup
    episode, _ = next_task(state, data, cfg)
    with pytest.raises(TrainingError):
        compute_losses(state.model, episode, episode.query, cfg.objective)


def _grads(model, loss):
    model.zero_grad(set_to_none=True)
    loss.backward()
    return {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in model.named_parameters()}


def test_fsl_only_matches_plain_prototypical_gradient(setup):
    cfg, data, state = setup
    model = state.model.eval()  # no dropout, batch norm from running stats in both passes
    obj = ObjectiveConfig(tau=0.5, lambda1=0, lambda2=1, lambda3=0)
    episode, opposite = next_task(state, data, cfg)
    g_full = _grads(model, compute_losses(model, episode, opposite, obj).objective(obj))

    mapper = model.mapper[episode.domain]
    s = model.extractor(mapper(torch.from_numpy(episode.support.patches)))
    q = model.extractor(mapper(torch.from_numpy(episode.query.patches)))
    protos = compute_prototypes(s, torch.from_numpy(episode.support.labels), episode.ways)
    loss, _ = fsl_loss(model.attention(q, s), torch.from_numpy(episode.query.labels), protos)
    # the discriminator still fits its own loss, so only the other modules are compared
    g_plain = _grads(model, loss)
    for name, g in g_plain.items():
        if name.startswith("discriminator."):
            continue
        torch.testing.assert_close(g_full[name], g, atol=1e-5, rtol=1e-4, msg=name)


def test_zero_lambda3_blocks_domain_gradient(setup):
    cfg, data, state = setup
    model = state.model.eval()
    obj = ObjectiveConfig(tau=0.5, lambda1=0, lambda2=0, lambda3=0)
    episode, opposite = next_task(state, data, cfg)
    grads = _grads(model, compute_losses(model, episode, opposite, obj).objective(obj))
    assert any(torch.count_nonzero(g) > 0 for n, g in grads.items() if n.startswith("discriminator."))
    for n, g in grads.items():
        if n.startswith(("extractor.", "mapper.", "attention.")):
            assert torch.count_nonzero(g) == 0, n


def test_descent_on_fixed_episode(setup):
    cfg, data, state = setup
    obj = ObjectiveConfig(tau=0.5, lambda1=1, lambda2=1, lambda3=0)
    for group in state.optimizer.param_groups:
        group["lr"] = 1e-4
    episode, opposite = next_task(state, data, cfg)
    state.model.eval()
    before = compute_losses(state.model, episode, opposite, obj).objective(obj).item()
    state.model.train()
    torch.manual_seed(0)
    losses = compute_losses(state.model, episode, opposite, obj)
    state.optimizer.zero_grad()
    losses.objective(obj).backward()
    state.optimizer.step()
    state.model.eval()
    after = compute_losses(state.model, episode, opposite, obj).objective(obj).item()
    assert after < before


def test_every_parameter_receives_gradient(setup):
    cfg, data, state = setup
    touched = set()
    for _ in range(4):
        episode, opposite = next_task(state, data, cfg)
        train_step(state, episode, opposite, cfg.objective)
        touched |= {n for n, p in state.model.named_parameters()
                    if p.grad is not None and torch.count_nonzero(p.grad) > 0}
    assert touched == {n for n, _ in state.model.named_parameters()}


def test_log_rows_and_identity(synthetic_pair, tmp_path):
    cfg = small_config(train={"episodes": 6, "checkpoint_every": 3})
    state, _ = run_training(cfg, tmp_path, *synthetic_pair)
    rows = read_log(tmp_path / "train.log.jsonl")
    assert len(rows) == 6 and [r["step"] for r in rows] == list(range(6))
    assert set(rows[0]) == {"step", "l_con", "l_fsl", "l_d", "total", "query_accuracy", "domain"}
    assert check_log_identity(rows, cfg.objective)
    assert state.step == 6
    assert sorted(p.name for p in (tmp_path / "checkpoints").glob("step-*")) == ["step-3", "step-6"]
    assert (tmp_path / "checkpoints" / "latest").read_text().strip() == "step-6"
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == cfg.seed


def test_reload_continues_bit_exactly(synthetic_pair, tmp_path):
    cfg = small_config()
    full, _ = run_training(cfg, tmp_path / "full", *synthetic_pair)
    full_rows = read_log(tmp_path / "full" / "train.log.jsonl")

    state, cfg2 = load_checkpoint(tmp_path / "full" / "checkpoints" / "step-2")
    assert state.step == 2 and cfg2.to_dict() == cfg.to_dict()
    data = prepare_data(cfg2, *synthetic_pair)
    rows = []
    train(state, data, cfg2, progress=rows.append)
    assert rows == full_rows[2:]
    for (n, a), (_, b) in zip(full.model.state_dict().items(), state.model.state_dict().items()):
        assert torch.equal(a, b), n


def test_latest_pointer_and_resolution(synthetic_pair, tmp_path):
    run_training(small_config(), tmp_path, *synthetic_pair)
    ckpts = tmp_path / "checkpoints"
    assert resolve_checkpoint(tmp_path) == ckpts / "step-4" / "model.ckpt"
    assert resolve_checkpoint(ckpts / "step-2") == ckpts / "step-2" / "model.ckpt"
    assert not list(ckpts.glob(".tmp-*")) and not (ckpts / ".latest.tmp").exists()
    with pytest.raises(FileNotFoundError):
        resolve_checkpoint(tmp_path / "nowhere")


def test_identical_runs_are_byte_identical(synthetic_pair, tmp_path):
    cfg = small_config()
    run_training(cfg, tmp_path / "a", *synthetic_pair)
    run_training(cfg, tmp_path / "b", *synthetic_pair)
    for rel in ("train.log.jsonl", "checkpoints/step-4/model.ckpt", "checkpoints/step-2/model.ckpt"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_different_seeds_differ(synthetic_pair, tmp_path):
    run_training(small_config(seed=0), tmp_path / "a", *synthetic_pair)
    run_training(small_config(seed=1), tmp_path / "b", *synthetic_pair)
    assert (tmp_path / "a" / "train.log.jsonl").read_bytes() != (tmp_path / "b" / "train.log.jsonl").read_bytes()


def test_non_finite_loss_raises(setup):
    cfg, data, state = setup
    with torch.no_grad():
        next(state.model.extractor.parameters()).fill_(float("nan"))
    episode, opposite = next_task(state, data, cfg)
    with pytest.raises((TrainingError, ValueError)):
        train_step(state, episode, opposite, cfg.objective)
    assert state.step == 0


def test_target_selection_independent_of_episode_stream(synthetic_pair):
    a = prepare_data(small_config(seed=2), *synthetic_pair)
    b = prepare_data(small_config(seed=2, sampler={"train_queries_per_class": 7}), *synthetic_pair)
    assert a.target_support.pixel_coords == b.target_support.pixel_coords
    np.testing.assert_array_equal(a.target_pool.patches, b.target_pool.patches)
