"""Training objectives: supervised contrastive, prototype few-shot, domain and their weighted total."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class ObjectiveConfig:
    tau: float = 0.5
    lambda1: float = 10.0  # contrastive
    lambda2: float = 1.0  # few-shot
    lambda3: float = 1.0  # domain

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


# Per-dataset weights and temperatures used for the three target scenes.
PRESETS = {
    "ip": ObjectiveConfig(tau=0.5, lambda1=10.0, lambda2=1.0, lambda3=1.0),
    "pu": ObjectiveConfig(tau=0.1, lambda1=10.0, lambda2=2.0, lambda3=0.005),
    "sa": ObjectiveConfig(tau=0.5, lambda1=10.0, lambda2=2.0, lambda3=0.005),
}


@dataclass
class Prototypes:
    vectors: torch.Tensor  # (C, D)
    class_ids: list[int]


@dataclass
class LossReport:
    l_con: float
    l_fsl: float
    l_d: float
    total: float
    query_accuracy: float

    def as_dict(self) -> dict:
        return {"l_con": self.l_con, "l_fsl": self.l_fsl, "l_d": self.l_d,
                "total": self.total, "query_accuracy": self.query_accuracy}


def contrastive_loss(features: torch.Tensor, labels: torch.Tensor, tau: float) -> torch.Tensor:
    """Supervised contrastive loss summed over anchors.

    Features are L2-normalised here. Anchors without another sample of their
    class contribute nothing.
    """
    n = features.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least two samples")
    z = F.normalize(features, dim=1)
    logits = z @ z.T / tau
    self_mask = torch.eye(n, dtype=torch.bool, device=features.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    positives = (labels[:, None] == labels[None, :]) & ~self_mask
    counts = positives.sum(dim=1)
    pos_log_prob = torch.where(positives, log_prob, torch.zeros_like(log_prob)).sum(dim=1)
    has_pos = counts > 0
    if not has_pos.any():
        return features.sum() * 0.0
    return -(pos_log_prob[has_pos] / counts[has_pos]).sum()


def compute_prototypes(support: torch.Tensor, labels: torch.Tensor, ways: int | None = None) -> Prototypes:
    ways = int(labels.max().item()) + 1 if ways is None else ways
    present = torch.unique(labels).tolist()
    missing = sorted(set(range(ways)) - set(present))
    if missing:
        raise ValueError(f"support has no samples for classes {missing}")
    onehot = F.one_hot(labels, ways).to(support.dtype)  # (N, C)
    vectors = (onehot.T @ support) / onehot.sum(dim=0)[:, None]
    return Prototypes(vectors, list(range(ways)))


def squared_distances(x: torch.Tensor, protos: torch.Tensor) -> torch.Tensor:
    return ((x[:, None, :] - protos[None, :, :]) ** 2).sum(dim=-1)


def class_probabilities(x: torch.Tensor, protos: Prototypes) -> torch.Tensor:
    return torch.softmax(-squared_distances(x, protos.vectors), dim=1)


def fsl_loss(query: torch.Tensor, labels: torch.Tensor, protos: Prototypes) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean negative log-likelihood under softmax(-||q - p||^2) over classes.

    Returns the loss and the (N, C) probability matrix.
    """
    log_p = torch.log_softmax(-squared_distances(query, protos.vectors), dim=1)
    loss = F.nll_loss(log_p, labels)
    return loss, log_p.exp()


def domain_loss(logits: torch.Tensor, domain_labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy; source = 0, target = 1."""
    return F.binary_cross_entropy_with_logits(logits, domain_labels.to(logits.dtype))


def total_loss(l_con: float, l_fsl: float, l_d: float, cfg: ObjectiveConfig) -> float:
    parts = (float(l_con), float(l_fsl), float(l_d))
    if any(math.isnan(p) for p in parts):
        raise ValueError(f"NaN loss component: {parts}")
    return cfg.lambda1 * parts[0] + cfg.lambda2 * parts[1] + cfg.lambda3 * parts[2]
