"""Ablation harness: modality masks, fusion strategies and the depth baseline.

Every variant is trained from scratch with the same training settings and
scored on the same held-out documents.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .data import HierDocRecord
from .training import TrainingConfig, evaluate, train

MASK_VARIANTS = {
    "full": (),
    "w/o text": ("text",),
    "w/o layout": ("layout",),
    "w/o vision": ("vision",),
}
FUSION_VARIANTS = ("gated", "add", "concat", "dot")


@dataclass
class AblationRow:
    group: str
    name: str
    teds: float
    pair_f1: float
    detection_f1: float
    max_depth: int
    seconds: float


def variants(groups: Sequence[str] = ("mask", "fusion", "decoding")) -> list[tuple[str, str, dict]]:
    """``(group, name, model overrides)`` for every requested ablation."""
    out = []
    if "mask" in groups:
        out += [("mask", name, {"mask": mask}) for name, mask in MASK_VARIANTS.items()]
    if "fusion" in groups:
        out += [("fusion", name, {"fusion": name}) for name in FUSION_VARIANTS]
    if "decoding" in groups:
        out += [("decoding", "tree decoder", {"decoding": "tree"}),
                ("decoding", "depth classes", {"decoding": "depth"})]
    return out


def run_ablation(base: TrainingConfig, train_records: Sequence[HierDocRecord],
                 eval_records: Sequence[HierDocRecord],
                 groups: Sequence[str] = ("mask", "fusion", "decoding"),
                 progress: Optional[Callable[[AblationRow], None]] = None) -> list[AblationRow]:
    rows = []
    for group, name, overrides in variants(groups):
        config = dataclasses.replace(base, model=dataclasses.replace(base.model, **overrides))
        t0 = time.time()
        result = train(config, train_records, eval_records)
        preds: list = []
        report = evaluate(result.model, eval_records, predictions=preds)
        corpus = report.corpus()
        row = AblationRow(group, name, corpus["teds"], corpus["pair_f1"], corpus["detection_f1"],
                          max(p.tree.depth() for p in preds), round(time.time() - t0, 1))
        rows.append(row)
        if progress:
            progress(row)
    return rows


def format_table(rows: Sequence[AblationRow]) -> str:
    header = f"{'group':<10}{'variant':<16}{'TEDS':>8}{'pair F1':>9}{'det F1':>8}{'depth':>7}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.group:<10}{r.name:<16}{r.teds:>8.4f}{r.pair_f1:>9.4f}"
                     f"{r.detection_f1:>8.4f}{r.max_depth:>7d}")
    return "\n".join(lines)
