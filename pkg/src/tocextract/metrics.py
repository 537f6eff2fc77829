"""Scoring: tree edit distance / TEDS, relation-pair F1, detection P/R/F1, WER."""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from difflib import SequenceMatcher
from typing import Iterable, Sequence

from .core import RelationStep, ToCNode

ROOT_REF = -1


def normalize_label(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip().lower()


def _relabel_cost(a: str, b: str, graded: bool) -> float:
    if a == b:
        return 0.0
    if not graded:
        return 1.0
    return 1.0 - SequenceMatcher(None, a, b).ratio()


class _Annotated:
    """Postorder labels, leftmost-leaf descendants and keyroots of a tree."""

    def __init__(self, root: ToCNode):
        self.labels: list[str] = []
        self.lml: list[int] = []

        def walk(node):
            first = None
            for child in node.children:
                leaf = walk(child)
                if first is None:
                    first = leaf
            idx = len(self.labels)
            self.labels.append(normalize_label(node.text))
            self.lml.append(idx if first is None else first)
            return self.lml[idx]

        walk(root)
        last: dict[int, int] = {}
        for i, leaf in enumerate(self.lml):
            last[leaf] = i
        self.keyroots = sorted(last.values())


def tree_edit_distance(a: ToCNode, b: ToCNode, graded: bool = False) -> float:
    """Ordered tree edit distance (Zhang & Shasha) with unit insert/delete.

    Relabelling costs 0 when the normalized labels agree and 1 otherwise;
    ``graded=True`` swaps in a string-similarity cost instead.
    """
    ta, tb = _Annotated(a), _Annotated(b)
    n, m = len(ta.labels), len(tb.labels)
    td = [[0.0] * m for _ in range(n)]
    for i in ta.keyroots:
        for j in tb.keyroots:
            li, lj = ta.lml[i], tb.lml[j]
            rows, cols = i - li + 2, j - lj + 2
            fd = [[0.0] * cols for _ in range(rows)]
            for x in range(1, rows):
                fd[x][0] = fd[x - 1][0] + 1
            for y in range(1, cols):
                fd[0][y] = fd[0][y - 1] + 1
            for x in range(1, rows):
                i1 = li + x - 1
                for y in range(1, cols):
                    j1 = lj + y - 1
                    if ta.lml[i1] == li and tb.lml[j1] == lj:
                        fd[x][y] = min(fd[x - 1][y] + 1, fd[x][y - 1] + 1,
                                       fd[x - 1][y - 1]
                                       + _relabel_cost(ta.labels[i1], tb.labels[j1], graded))
                        td[i1][j1] = fd[x][y]
                    else:
                        px = ta.lml[i1] - li
                        py = tb.lml[j1] - lj
                        fd[x][y] = min(fd[x - 1][y] + 1, fd[x][y - 1] + 1,
                                       fd[px][py] + td[i1][j1])
    dist = td[n - 1][m - 1]
    return int(dist) if not graded else dist


def teds(a: ToCNode, b: ToCNode, graded: bool = False) -> float:
    """Tree-edit-distance similarity; node counts include the root.

    Unit-cost edit distance can exceed the larger tree size on structurally
    incompatible trees, so the score is floored at 0.
    """
    size = max(a.size(), b.size())
    return max(0.0, 1.0 - tree_edit_distance(a, b, graded=graded) / size)


def steps_to_pairs(steps: Sequence[RelationStep], doc_orders: Sequence[int]) -> set:
    """Re-key heading-index steps by document order so different heading sets compare.

    ``doc_orders[k]`` is the document-order index of heading ``k + 1``; the
    root maps to ``ROOT_REF``.
    """
    out = set()
    for s in steps:
        ref = ROOT_REF if s.reference == 0 else doc_orders[s.reference - 1]
        out.add((doc_orders[s.current - 1], ref, s.relation.value))
    return out


def _prf(correct: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = correct / n_pred if n_pred else 0.0
    r = correct / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def pair_f1(predicted: Iterable[tuple], gold: Iterable[tuple]) -> tuple[float, float, float]:
    predicted, gold = set(predicted), set(gold)
    if not predicted and not gold:
        return 1.0, 1.0, 1.0
    return _prf(len(predicted & gold), len(predicted), len(gold))


def detection_prf(predicted: Sequence[bool], gold: Sequence[bool]) -> tuple[float, float, float]:
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predictions for {len(gold)} labels")
    tp = sum(1 for p, g in zip(predicted, gold) if p and g)
    return _prf(tp, sum(map(bool, predicted)), sum(map(bool, gold)))


def token_edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: str | Sequence[str], hypothesis: str | Sequence[str]) -> float:
    """Token-level Levenshtein distance over the reference length."""
    ref = reference.split() if isinstance(reference, str) else list(reference)
    hyp = hypothesis.split() if isinstance(hypothesis, str) else list(hypothesis)
    if not ref:
        raise ValueError("WER is undefined for an empty reference")
    return token_edit_distance(ref, hyp) / len(ref)


@dataclass
class DocumentScore:
    doc_id: str
    teds: float
    pair_precision: float
    pair_recall: float
    pair_f1: float
    detection_precision: float
    detection_recall: float
    detection_f1: float


@dataclass
class ScoreReport:
    """Per-document scores plus macro (per-document mean) corpus averages."""

    documents: list[DocumentScore] = field(default_factory=list)

    METRICS = ("teds", "pair_precision", "pair_recall", "pair_f1",
               "detection_precision", "detection_recall", "detection_f1")

    def add(self, score: DocumentScore) -> None:
        self.documents.append(score)

    def corpus(self) -> dict[str, float]:
        if not self.documents:
            return {k: 0.0 for k in self.METRICS}
        n = len(self.documents)
        return {k: sum(getattr(d, k) for d in self.documents) / n for k in self.METRICS}

    @property
    def teds(self) -> float:
        return self.corpus()["teds"]

    @property
    def pair_f1(self) -> float:
        return self.corpus()["pair_f1"]

    def to_json(self) -> str:
        return json.dumps({"corpus": self.corpus(),
                           "documents": [asdict(d) for d in self.documents]}, indent=2)

    def to_table(self) -> str:
        header = f"{'document':<24}" + "".join(f"{k:>22}" for k in self.METRICS)
        lines = [header, "-" * len(header)]
        for d in self.documents:
            lines.append(f"{d.doc_id[:24]:<24}" + "".join(f"{getattr(d, k):>22.4f}"
                                                           for k in self.METRICS))
        lines.append("-" * len(header))
        corpus = self.corpus()
        lines.append(f"{'CORPUS (macro)':<24}" + "".join(f"{corpus[k]:>22.4f}"
                                                         for k in self.METRICS))
        return "\n".join(lines)
