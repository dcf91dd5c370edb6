"""Alternating source/target episode training with a domain discriminator."""
from __future__ import annotations

import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from hsi_fewshot.config import RunConfig
from hsi_fewshot.errors import ConfigError, TrainingError
from hsi_fewshot.network import (
    ModelConfig,
    MultiLevelModel,
    load_model_tensors,
    model_tensors,
    read_archive,
    write_archive,
)
from hsi_fewshot.objectives import (
    LossReport,
    ObjectiveConfig,
    class_probabilities,
    compute_prototypes,
    contrastive_loss,
    domain_loss,
    fsl_loss,
    total_loss,
)
from hsi_fewshot.sampling import (
    Episode,
    PatchBatch,
    augment_target_pool,
    labeled_pixel_index,
    sample_domain_batch,
    sample_episode,
    sample_pool_episode,
    select_target_labels,
)
from hsi_fewshot.scene_store import HsiScene, load_scene, normalize_scene

log = logging.getLogger(__name__)

DOMAIN_LABEL = {"source": 0, "target": 1}
CHECKPOINT_FILE = "model.ckpt"


@dataclass
class RunData:
    """Scenes and derived sample sets for one seeded run."""

    source: HsiScene
    target: HsiScene
    source_index: dict
    target_support: PatchBatch  # the real few labeled target pixels
    target_pool: PatchBatch  # the same pixels grown by Gaussian copies
    ways: int


def seed_streams(seed: int):
    """Independent generators for target-label selection, augmentation and episodes, plus a torch seed."""
    ss = np.random.SeedSequence(seed)
    select, augment, episodes, torch_ss = ss.spawn(4)
    return (np.random.default_rng(select), np.random.default_rng(augment), np.random.default_rng(episodes),
            int(torch_ss.generate_state(1, dtype=np.uint64)[0] % (2**63)))


def prepare_target(cfg: RunConfig, target: HsiScene | None = None, seed: int | None = None):
    """Target scene (normalized, role set) and its seeded few labeled pixels."""
    if target is None:
        if not cfg.target.path:
            raise ConfigError("target scene path not configured")
        target = load_scene(cfg.target.path)
    if cfg.normalize:
        target = normalize_scene(target)
    target = target.with_role("target")
    select_rng, _, _, _ = seed_streams(cfg.seed if seed is None else seed)
    support = select_target_labels(target, cfg.sampler.target_labels_per_class, select_rng, cfg.sampler.patch_size)
    return target, support


def prepare_data(cfg: RunConfig, source: HsiScene | None = None, target: HsiScene | None = None) -> RunData:
    if source is None:
        if not cfg.source.path:
            raise ConfigError("source scene path not configured")
        source = load_scene(cfg.source.path)
    if cfg.normalize:
        source = normalize_scene(source)
    source = source.with_role("source")
    target, support = prepare_target(cfg, target)
    _, augment_rng, _, _ = seed_streams(cfg.seed)
    pool = augment_target_pool(support, cfg.sampler, augment_rng)
    source_index = labeled_pixel_index(source)
    ways = cfg.sampler.train_ways or min(len(source_index), len(labeled_pixel_index(target)))
    return RunData(source, target, source_index, support, pool, ways)


def build_model(cfg: RunConfig, data: RunData) -> MultiLevelModel:
    n = cfg.network
    mc = ModelConfig(
        source_bands=data.source.bands, target_bands=data.target.bands, mapped_bands=n.mapped_bands,
        ways=data.ways, heads=n.heads, attention_layers=n.attention_layers, ffn_multiplier=n.ffn_multiplier,
        disc_mode=n.disc_mode, disc_hidden=n.disc_hidden, disc_dropout=n.disc_dropout,
        grl_coefficient=n.grl_coefficient, patch_size=cfg.sampler.patch_size,
    )
    return MultiLevelModel(mc).to(cfg.train.device)


@dataclass
class TrainState:
    model: MultiLevelModel
    optimizer: torch.optim.Adam
    rng: np.random.Generator
    step: int = 0
    best: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: RunConfig, data: RunData) -> "TrainState":
        _, _, episode_rng, torch_seed = seed_streams(cfg.seed)
        torch.manual_seed(torch_seed)
        model = build_model(cfg, data)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.learning_rate, betas=(0.9, 0.999), eps=1e-8)
        return cls(model, optimizer, episode_rng)


@dataclass
class StepLosses:
    l_con: torch.Tensor
    l_fsl: torch.Tensor
    l_d: torch.Tensor
    query_probs: torch.Tensor
    query_labels: torch.Tensor

    def objective(self, cfg: ObjectiveConfig) -> torch.Tensor:
        # lambda3 is applied at the reversal point, so the discriminator sees l_d at full weight
        return cfg.lambda1 * self.l_con + cfg.lambda2 * self.l_fsl + self.l_d

    def total(self, cfg: ObjectiveConfig) -> float:
        return total_loss(self.l_con.item(), self.l_fsl.item(), self.l_d.item(), cfg)

    def report(self, cfg: ObjectiveConfig) -> LossReport:
        accuracy = (self.query_probs.argmax(dim=1) == self.query_labels).float().mean().item()
        return LossReport(self.l_con.item(), self.l_fsl.item(), self.l_d.item(), self.total(cfg), accuracy)


def compute_losses(model: MultiLevelModel, episode: Episode, opposite: PatchBatch,
                   objective: ObjectiveConfig) -> StepLosses:
    """Forward pass of one training step, without touching the optimizer."""
    if episode.domain == opposite.domain:
        raise TrainingError("episode and opposite batch come from the same domain")
    device = model.device
    patches = np.concatenate([episode.support.patches, episode.query.patches])
    episode_feats = model.extractor(model.mapper[episode.domain](torch.from_numpy(patches).to(device)))
    opposite_feats = model.embed(opposite)
    n_support = len(episode.support)
    support_feats, query_feats = episode_feats[:n_support], episode_feats[n_support:]
    support_labels = torch.from_numpy(episode.support.labels).to(device)
    query_labels = torch.from_numpy(episode.query.labels).to(device)

    l_con = contrastive_loss(episode_feats, torch.cat([support_labels, query_labels]), objective.tau)
    protos = compute_prototypes(support_feats, support_labels, episode.ways)
    updated = model.attention(query_feats, support_feats)
    l_fsl, probs = fsl_loss(updated, query_labels, protos)

    disc_feats = torch.cat([episode_feats, opposite_feats])
    domain_labels = torch.cat([
        torch.full((len(episode_feats),), DOMAIN_LABEL[episode.domain], device=device),
        torch.full((len(opposite_feats),), DOMAIN_LABEL[opposite.domain], device=device),
    ])
    cond = class_probabilities(disc_feats, protos) if model.discriminator.mode == "conditional" else None
    coefficient = model.discriminator.grl_coefficient * objective.lambda3
    logits = model.discriminator(disc_feats, cond, coefficient=coefficient)
    l_d = domain_loss(logits, domain_labels)
    return StepLosses(l_con, l_fsl, l_d, probs.detach(), query_labels)


def train_step(state: TrainState, episode: Episode, opposite: PatchBatch, objective: ObjectiveConfig) -> LossReport:
    """One forward/backward pass and one Adam update.

    The discriminator is fitted on the unweighted domain loss; the features
    and mappers receive its gradient reversed and scaled by ``lambda3``.
    """
    state.model.train()
    losses = compute_losses(state.model, episode, opposite, objective)
    value = losses.objective(objective)
    if not torch.isfinite(value):
        raise TrainingError(
            f"non-finite loss at step {state.step}: l_con={losses.l_con.item()} "
            f"l_fsl={losses.l_fsl.item()} l_d={losses.l_d.item()}"
        )
    state.optimizer.zero_grad(set_to_none=True)
    value.backward()
    state.optimizer.step()
    state.step += 1
    return losses.report(objective)


def sample_pool_batch(pool: PatchBatch, size: int, rng: np.random.Generator) -> PatchBatch:
    return pool.subset(rng.integers(0, len(pool), size=size))


def next_task(state: TrainState, data: RunData, cfg: RunConfig) -> tuple[Episode, PatchBatch]:
    """Episode and opposite-domain batch for the current step (even: source-led, odd: target-led)."""
    sc = cfg.sampler
    if state.step % 2 == 0:
        episode = sample_episode(data.source_index, data.source, sc, state.rng, ways=data.ways)
        size = sc.domain_batch_size or len(episode.support) + len(episode.query)
        opposite = sample_pool_batch(data.target_pool, size, state.rng)
    else:
        episode = sample_pool_episode(data.target_pool, sc, state.rng, ways=data.ways)
        size = sc.domain_batch_size or len(episode.support) + len(episode.query)
        opposite = sample_domain_batch(data.source, size, state.rng, sc.patch_size, labeled_only=True)
    return episode, opposite


def train(state: TrainState, data: RunData, cfg: RunConfig, run_dir=None, progress=None) -> TrainState:
    """Run steps ``state.step .. episodes - 1``, logging and checkpointing into ``run_dir``."""
    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(run_dir / "train.log.jsonl", "a", encoding="utf-8")
    try:
        while state.step < cfg.train.episodes:
            episode, opposite = next_task(state, data, cfg)
            step = state.step
            report = train_step(state, episode, opposite, cfg.objective)
            row = {"step": step, **report.as_dict(), "domain": episode.domain}
            if log_file is not None:
                log_file.write(json.dumps(row) + "\n")
            if progress is not None:
                progress(row)
            if run_dir is not None and (state.step % cfg.train.checkpoint_every == 0
                                        or state.step == cfg.train.episodes):
                log_file.flush()
                save_checkpoint(state, cfg, run_dir)
    finally:
        if log_file is not None:
            log_file.close()
    return state


def checkpoint_tensors(state: TrainState) -> dict:
    tensors = dict(model_tensors(state.model))
    names = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            tensors[f"optimizer.{name}.exp_avg"] = st["exp_avg"]
            tensors[f"optimizer.{name}.exp_avg_sq"] = st["exp_avg_sq"]
            tensors[f"optimizer.{name}.step"] = torch.as_tensor(st["step"]).reshape(1).to(torch.int64)
    tensors["rng.torch"] = torch.get_rng_state()
    return tensors


def save_checkpoint(state: TrainState, cfg: RunConfig, run_dir) -> Path:
    """Write ``checkpoints/step-<n>/model.ckpt`` atomically, then repoint ``latest``."""
    ckpt_root = Path(run_dir) / "checkpoints"
    ckpt_root.mkdir(parents=True, exist_ok=True)
    final = ckpt_root / f"step-{state.step}"
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=ckpt_root))
    meta = {
        "step": state.step,
        "config": cfg.to_dict(),
        "model_config": state.model.cfg.__dict__,
        "rng": _jsonable(state.rng.bit_generator.state),
        "best": state.best,
    }
    write_archive(tmp / CHECKPOINT_FILE, checkpoint_tensors(state), meta)
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)
    latest_tmp = ckpt_root / ".latest.tmp"
    latest_tmp.write_text(final.name + "\n", encoding="utf-8")
    os.replace(latest_tmp, ckpt_root / "latest")
    return final / CHECKPOINT_FILE


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=int))


def resolve_checkpoint(path) -> Path:
    """Accept an archive, a ``step-<n>`` directory or a run directory."""
    path = Path(path)
    if path.is_file():
        return path
    if (path / CHECKPOINT_FILE).is_file():
        return path / CHECKPOINT_FILE
    for root in (path / "checkpoints", path):
        latest = root / "latest"
        if latest.is_file():
            return root / latest.read_text(encoding="utf-8").strip() / CHECKPOINT_FILE
    raise FileNotFoundError(f"no checkpoint found at {path}")


def load_checkpoint(path, data: RunData | None = None, device: str = "cpu"):
    """Rebuild (TrainState, RunConfig) from a checkpoint archive."""
    tensors, meta = read_archive(resolve_checkpoint(path))
    cfg = RunConfig.from_dict(meta["config"])
    mc = ModelConfig(**meta["model_config"])
    model = MultiLevelModel(mc).to(device)
    load_model_tensors(model, tensors)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    for name, p in model.named_parameters():
        key = f"optimizer.{name}"
        if f"{key}.exp_avg" in tensors:
            optimizer.state[p] = {
                "step": torch.tensor(float(tensors[f"{key}.step"][0])),
                "exp_avg": torch.as_tensor(tensors[f"{key}.exp_avg"]).to(device),
                "exp_avg_sq": torch.as_tensor(tensors[f"{key}.exp_avg_sq"]).to(device),
            }
    torch.set_rng_state(torch.as_tensor(tensors["rng.torch"], dtype=torch.uint8))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = TrainState(model, optimizer, rng, step=int(meta["step"]), best=meta.get("best", {}))
    return state, cfg


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def check_log_identity(rows, objective: ObjectiveConfig, tol: float = 1e-6) -> bool:
    return all(
        math.isclose(r["total"], objective.lambda1 * r["l_con"] + objective.lambda2 * r["l_fsl"]
                     + objective.lambda3 * r["l_d"], rel_tol=tol, abs_tol=tol)
        for r in rows
    )


def run_training(cfg: RunConfig, run_dir=None, source: HsiScene | None = None, target: HsiScene | None = None,
                 progress=None) -> tuple[TrainState, RunData]:
    """Load data, freeze the config into ``run_dir`` and train from scratch."""
    data = prepare_data(cfg, source, target)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
        log_path = run_dir / "train.log.jsonl"
        if log_path.exists():
            log_path.unlink()
    state = TrainState.create(cfg, data)
    train(state, data, cfg, run_dir, progress)
    return state, data
