"""Training objectives.

All losses reduce with a batch mean. KL-based losses compute
``tau**2 * KL(target || student)`` on temperature-softened distributions,
with the target side detached, so the full per-peer objective is

    ce + alpha * dml + beta * mmd + gamma * pt

with no extra temperature factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ParameterError, ValidationError

PROB_FLOOR = 1e-12
_LOG_FLOOR = math.log(PROB_FLOOR)
TARGET_TOL = 1e-5


@dataclass(frozen=True)
class DistillConfig:
    J: int = 2
    tau: float = 3.0
    alpha: float = 0.6
    beta: float = 0.2
    gamma: float = 0.1

    def __post_init__(self) -> None:
        if self.J < 2:
            raise ConfigurationError(f"J must be >= 2, got {self.J}")
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be nonnegative")


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")


def softmax(logits: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """``softmax(logits / tau)`` over the last axis."""
    _check_tau(tau)
    z = logits / tau
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def _log_prob(logits: torch.Tensor, tau: float) -> torch.Tensor:
    # log(max(p, 1e-12)) evaluated without forming p
    return torch.clamp(F.log_softmax(logits / tau, dim=-1), min=_LOG_FLOOR)


def _as_tensor(targets, like: torch.Tensor) -> torch.Tensor:
    probs = getattr(targets, "probs", targets)
    if isinstance(probs, torch.Tensor):
        return probs.to(dtype=like.dtype, device=like.device)
    return torch.tensor(probs, dtype=like.dtype, device=like.device)


def soft_ce(logits: torch.Tensor, targets) -> torch.Tensor:
    """Cross-entropy against probability targets (a ``SoftLabelBatch`` or ``[n, K]`` array)."""
    y = _as_tensor(targets, logits)
    if y.shape != logits.shape:
        raise ValidationError(f"targets {tuple(y.shape)} do not match logits {tuple(logits.shape)}")
    if (y < -TARGET_TOL).any() or (y.sum(dim=-1) - 1).abs().max() > TARGET_TOL:
        raise ValidationError("target rows must lie on the probability simplex")
    return -(y * _log_prob(logits, 1.0)).sum(dim=-1).mean()


def kd_kl(student_logits: torch.Tensor, teacher_logits: torch.Tensor, tau: float) -> torch.Tensor:
    """``tau**2 * mean_i KL(p_teacher || p_student)``; the teacher is detached."""
    _check_tau(tau)
    if student_logits.shape != teacher_logits.shape:
        raise ValidationError(
            f"student {tuple(student_logits.shape)} and teacher {tuple(teacher_logits.shape)} shapes differ"
        )
    t = teacher_logits.detach()
    p_t = softmax(t, tau)
    kl = (p_t * (_log_prob(t, tau) - _log_prob(student_logits, tau))).sum(dim=-1)
    return tau * tau * kl.mean()


def pt_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor, tau: float) -> torch.Tensor:
    """Distillation from the peer-teacher logits (detached)."""
    return kd_kl(student_logits, teacher_logits, tau)


def _others(n_peers: int, j: int) -> list[int]:
    if n_peers < 2:
        raise ConfigurationError(f"mutual losses need at least two peers, got {n_peers}")
    if not 0 <= j < n_peers:
        raise ParameterError(f"peer index {j} out of range for {n_peers} peers")
    return [k for k in range(n_peers) if k != j]


def dml_loss(all_logits: Sequence[torch.Tensor], j: int, tau: float) -> torch.Tensor:
    """Mean KD divergence from peer ``j`` to each other peer."""
    others = _others(len(all_logits), j)
    return sum(kd_kl(all_logits[j], all_logits[k], tau) for k in others) / len(others)


def mmd_loss(all_features: Sequence[torch.Tensor], j: int) -> torch.Tensor:
    """Mean squared distance between peer ``j``'s batch-mean feature and each other peer's."""
    others = _others(len(all_features), j)
    d = all_features[j].shape[-1]
    for f in all_features:
        if f.ndim != 2 or f.shape[-1] != d:
            raise ValidationError("all peers must produce [n, d] features with the same d")
    mu_j = all_features[j].mean(dim=0)
    total = sum(((mu_j - all_features[k].detach().mean(dim=0)) ** 2).sum() for k in others)
    return total / len(others)


def total_loss(cfg: DistillConfig, parts: Mapping[str, torch.Tensor | float]) -> torch.Tensor | float:
    """``ce + alpha*dml + beta*mmd + gamma*pt``. Zero-weighted terms are skipped, not multiplied."""
    out = parts["ce"]
    for key, weight in (("dml", cfg.alpha), ("mmd", cfg.beta), ("pt", cfg.gamma)):
        if weight != 0:
            out = out + weight * parts[key]
    return out
