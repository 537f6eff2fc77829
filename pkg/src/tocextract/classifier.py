"""Heading detection: a BiGRU over the entity sequence and a 2-way softmax."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

FOCAL_EPS = 1e-7


def focal_loss(probs: torch.Tensor, target: torch.Tensor, gamma: float = 2.0,
               alpha: float = 0.25, reduction: str = "mean") -> torch.Tensor:
    """``-alpha * (1 - p_true)**gamma * log(p_true)`` over rows of ``probs``.

    ``p_true`` is clamped to ``[eps, 1 - eps]`` before the log.
    """
    if probs.dim() == 1:
        probs = probs[None]
        target = torch.as_tensor(target).reshape(1)
    p_true = probs.gather(-1, target.long().reshape(-1, 1)).squeeze(-1)
    p_true = p_true.clamp(FOCAL_EPS, 1 - FOCAL_EPS)
    loss = -alpha * (1 - p_true) ** gamma * torch.log(p_true)
    if reduction == "none":
        return loss
    if reduction == "sum":
        return loss.sum()
    return loss.mean()


class HeadingClassifier(nn.Module):
    """BiGRU context (projected back to ``d``) followed by ``softmax(W_c g + b_c)``."""

    def __init__(self, d: int = 128, hidden: int = 128):
        super().__init__()
        self.gru = nn.GRU(d, hidden, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden, d)
        self.head = nn.Linear(d, 2)

    def contextualize(self, f: torch.Tensor) -> torch.Tensor:
        if f.dim() != 2 or f.shape[0] < 1:
            raise ValueError(f"expected (N, d) features with N >= 1, got {tuple(f.shape)}")
        g, _ = self.gru(f[None])
        return self.proj(g[0])

    def classify(self, g: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.head(g), dim=-1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        """Class probabilities ``(N, 2)``; column 1 is "heading"."""
        return self.classify(self.contextualize(f))

    def loss(self, probs, labels, gamma=2.0, alpha=0.25):
        return focal_loss(probs, labels, gamma, alpha)
