"""Tree decoder: one (reference, relation) decision per detected heading.

Heading features are contextualized by a small transformer and a trainable
root row is prepended, giving the candidate matrix ``M`` (row 0 = root,
row ``k`` = heading ``k``). For heading ``s`` the decoder

1. predicts a query state ``h_hat = GRU_a(input, h_prev)``;
2. scores every candidate with coverage attention
   ``e_hat_i = v . tanh(W_h h_hat + W_m m_i + W_d d_i)`` where ``D`` is a 1-D
   convolution over how often each candidate was selected so far;
3. selects a single row (hard one-hot over candidates ``0..s-1``), so the
   context ``c_s`` is exactly that row of ``M``;
4. updates ``h_s = GRU_b(c_s, h_hat)`` and classifies the relation from
   ``FFN([c_s, h_s])``.

During training the gold reference drives the selection (teacher forcing).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .classifier import focal_loss
from .core import Relation, RelationStep
from .treeops import repair_relation

log = logging.getLogger(__name__)

N_RELATIONS = 3


def sinusoid_table(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    table = torch.zeros(n, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : d // 2]
    return table


class HeadingContext(nn.Module):
    """Pre-norm transformer over the heading sequence with sinusoidal positions.

    Positions are scaled by a trainable gain, so zeroing every weight turns
    the whole stack into the identity.
    """

    def __init__(self, d: int = 128, n_layers: int = 3, n_heads: int = 4, ff_dim: int = 256,
                 dropout: float = 0.1, max_len: int = 512):
        super().__init__()
        layer = nn.TransformerEncoderLayer(d, n_heads, ff_dim, dropout=dropout,
                                           batch_first=True, norm_first=True)
        self.layers = nn.TransformerEncoder(layer, n_layers, enable_nested_tensor=False)
        self.pos_gain = nn.Parameter(torch.tensor(1.0))
        self.register_buffer("positions", sinusoid_table(max_len, d).float(), persistent=False)

    def forward(self, m_hat: torch.Tensor) -> torch.Tensor:
        n = m_hat.shape[0]
        if n > self.positions.shape[0]:
            self.positions = sinusoid_table(n, m_hat.shape[1]).to(self.positions)
        x = m_hat + self.pos_gain * self.positions[:n].to(m_hat.dtype)
        return self.layers(x[None])[0]


@dataclass
class AttentionTrace:
    energies: list[list[float]] = field(default_factory=list)
    selections: list[int] = field(default_factory=list)
    coverage: list[list[int]] = field(default_factory=list)
    relation_logits: list[list[float]] = field(default_factory=list)

    def to_records(self) -> list[dict]:
        return [{"step": s + 1, "energies": self.energies[s], "selection": self.selections[s],
                 "coverage": self.coverage[s], "relation_logits": self.relation_logits[s]}
                for s in range(len(self.selections))]


@dataclass
class TeacherOutputs:
    energies: torch.Tensor      # (C, C + 1), -inf outside the causal mask
    relation_logits: torch.Tensor  # (C, 3)
    contexts: torch.Tensor      # (C, d)
    selections: list[int]


class TreeDecoder(nn.Module):
    def __init__(self, d: int = 128, hidden: int = 128, attn_dim: int = 128, n_layers: int = 3,
                 n_heads: int = 4, ff_dim: int = 256, dropout: float = 0.1,
                 coverage_kernel: int = 3, relation_hidden: int = 128,
                 query_current: bool = True):
        super().__init__()
        self.d = d
        self.hidden = hidden
        self.query_current = query_current
        self.context = HeadingContext(d, n_layers, n_heads, ff_dim, dropout)
        self.root = nn.Parameter(torch.randn(d) * 0.1)
        self.gru_a = nn.GRUCell(2 * d if query_current else d, hidden)
        self.gru_b = nn.GRUCell(d, hidden)
        self.coverage_conv = nn.Conv1d(1, attn_dim, coverage_kernel,
                                       padding=coverage_kernel // 2, bias=False)
        self.W_h = nn.Linear(hidden, attn_dim, bias=False)
        self.W_m = nn.Linear(d, attn_dim)
        self.W_d = nn.Linear(attn_dim, attn_dim, bias=False)
        self.v = nn.Linear(attn_dim, 1, bias=False)
        self.W_1 = nn.Linear(d + hidden, relation_hidden)
        self.W_2 = nn.Linear(relation_hidden, N_RELATIONS)

    # -- building blocks -----------------------------------------------------

    def contextualize_headings(self, m_hat: torch.Tensor) -> torch.Tensor:
        """``(C, d)`` heading features -> ``(C + 1, d)`` candidates, root first."""
        if m_hat.shape[0] < 1:
            raise ValueError("no headings to contextualize")
        m = self.context(m_hat)
        return torch.cat([self.root.to(m.dtype)[None], m], dim=0)

    def energies(self, h_hat: torch.Tensor, keys: torch.Tensor,
                 coverage: torch.Tensor) -> torch.Tensor:
        """Raw energies for all ``C + 1`` candidates; ``keys = W_m M`` precomputed."""
        d_cov = self.coverage_conv(coverage.to(keys.dtype)[None, None])[0].T
        return self.v(torch.tanh(self.W_h(h_hat) + keys + self.W_d(d_cov))).squeeze(-1)

    def attend(self, M: torch.Tensor, h_hat: torch.Tensor, coverage: torch.Tensor,
               n_valid: int, keys: Optional[torch.Tensor] = None,
               forced: Optional[int] = None):
        """Score candidates, pick one among the first ``n_valid``, return its row.

        Returns ``(energies, one_hot, context)``.
        """
        if keys is None:
            keys = self.W_m(M)
        e_hat = self.energies(h_hat, keys, coverage)
        sel = int(torch.argmax(e_hat[:n_valid])) if forced is None else int(forced)
        one_hot = torch.zeros_like(e_hat)
        one_hot[sel] = 1.0
        # one_hot / |one_hot|_1 @ M is exactly row `sel`; index instead of multiplying
        return e_hat, one_hot, M[sel]

    def relation_logits(self, c: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        return self.W_2(F.relu(self.W_1(torch.cat([c, h], dim=-1))))

    def _query_input(self, c_prev, M, s):
        return torch.cat([c_prev, M[s]], dim=-1) if self.query_current else c_prev

    def decode_step(self, c_prev, h_prev, M, coverage, s, keys=None, forced=None):
        """One decoding step for heading ``s`` (1-based).

        Returns ``(h_hat, e_hat, one_hot, c, h, r)``.
        """
        h_hat = self.gru_a(self._query_input(c_prev, M, s)[None], h_prev[None])[0]
        e_hat, one_hot, c = self.attend(M, h_hat, coverage, s, keys=keys, forced=forced)
        h = self.gru_b(c[None], h_hat[None])[0]
        r = self.relation_logits(c, h)
        return h_hat, e_hat, one_hot, c, h, r

    # -- full sequences --------------------------------------------------------

    def _initial(self, M):
        return M.new_zeros(self.d), M.new_zeros(self.hidden), M.new_zeros(M.shape[0])

    def teacher_forward(self, m_hat: torch.Tensor, gold_refs: Sequence[int]) -> TeacherOutputs:
        """Run all steps with the gold reference selected at each one."""
        M = self.contextualize_headings(m_hat)
        C = M.shape[0] - 1
        if len(gold_refs) != C:
            raise ValueError(f"{len(gold_refs)} gold references for {C} headings")
        keys = self.W_m(M)
        c, h, coverage = self._initial(M)
        energies, logits, contexts = [], [], []
        for s in range(1, C + 1):
            _, e_hat, one_hot, c, h, r = self.decode_step(c, h, M, coverage, s, keys=keys,
                                                          forced=gold_refs[s - 1])
            coverage = coverage + one_hot.detach()
            energies.append(e_hat)
            logits.append(r)
            contexts.append(c)
        E = torch.stack(energies)
        mask = torch.ones(C, C + 1, dtype=torch.bool).tril(0)
        E = E.masked_fill(~mask, float("-inf"))
        return TeacherOutputs(E, torch.stack(logits), torch.stack(contexts), list(gold_refs))

    @torch.no_grad()
    def decode(self, m_hat: torch.Tensor, trace: Optional[AttentionTrace] = None
               ) -> list[RelationStep]:
        """Greedy decode; steps always reference an earlier heading or the root."""
        if m_hat.shape[0] == 0:
            return []
        M = self.contextualize_headings(m_hat)
        C = M.shape[0] - 1
        keys = self.W_m(M)
        c, h, coverage = self._initial(M)
        steps = []
        for s in range(1, C + 1):
            _, e_hat, one_hot, c, h, r = self.decode_step(c, h, M, coverage, s, keys=keys)
            sel = int(one_hot.argmax())
            if trace is not None:
                trace.energies.append([float(x) for x in e_hat[:s]])
                trace.selections.append(sel)
                trace.coverage.append([int(x) for x in coverage[:s]])
                trace.relation_logits.append([float(x) for x in r])
            coverage = coverage + one_hot
            steps.append(repair_relation(s, sel, Relation.from_index(int(r.argmax()))))
        return steps


class DepthHead(nn.Module):
    """Baseline replacing the tree decoder: per-heading depth classes over the same transformer."""

    def __init__(self, d: int = 128, n_classes: int = 5, n_layers: int = 3, n_heads: int = 4,
                 ff_dim: int = 256, dropout: float = 0.1):
        super().__init__()
        self.n_classes = n_classes
        self.context = HeadingContext(d, n_layers, n_heads, ff_dim, dropout)
        self.head = nn.Linear(d, n_classes)

    def forward(self, m_hat):
        return self.head(self.context(m_hat))

    @torch.no_grad()
    def predict_depths(self, m_hat) -> list[int]:
        if m_hat.shape[0] == 0:
            return []
        return [int(k) + 1 for k in self(m_hat).argmax(-1)]


def reference_loss(energies: torch.Tensor, gold: Sequence[int], gamma: float = 2.0,
                   alpha: float = 0.25) -> torch.Tensor:
    """Focal loss on softmax-normalized, causally masked energies, averaged over steps."""
    gold = torch.as_tensor(list(gold), dtype=torch.long)
    if energies.shape[0] != gold.shape[0]:
        raise ValueError(f"{energies.shape[0]} steps vs {gold.shape[0]} gold references")
    return focal_loss(F.softmax(energies, dim=-1), gold, gamma, alpha)


def relation_loss(logits: torch.Tensor, gold: Sequence, gamma: float = 2.0,
                  alpha: float = 0.25) -> torch.Tensor:
    gold = torch.as_tensor([g.index if isinstance(g, Relation) else int(g) for g in gold],
                           dtype=torch.long)
    if logits.shape[0] != gold.shape[0]:
        raise ValueError(f"{logits.shape[0]} steps vs {gold.shape[0]} gold relations")
    return focal_loss(F.softmax(logits, dim=-1), gold, gamma, alpha)
