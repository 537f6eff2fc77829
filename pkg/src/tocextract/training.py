"""Joint training, evaluation, prediction and checkpoints."""
from __future__ import annotations

import copy
import dataclasses
import logging
import math
import time
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .core import DataError
from .data import FeatureCache, HierDocRecord
from .metrics import DocumentScore, ScoreReport, detection_prf, pair_f1, steps_to_pairs, teds
from .model import ModelConfig, Prediction, TocModel, prepare_inputs

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainingConfig:
    alpha_cls: float = 1.0
    alpha_ref: float = 1.0
    alpha_re: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    lr_initial: float = 5e-4
    lr_min: float = 1e-6
    epochs: int = 20
    max_docs_per_batch: int = 4
    max_pages_per_batch: int = 12
    scale_range: tuple[float, float] = (0.8, 1.2)
    max_grad_norm: float = 5.0
    seed: int = 0
    deterministic: bool = True
    eval_every: int = 1
    patience: int = 0
    cache_dir: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if min(self.alpha_cls, self.alpha_ref, self.alpha_re) < 0:
            raise ValueError("loss weights must be non-negative")
        if not (0 < self.lr_min < self.lr_initial):
            raise ValueError("need 0 < lr_min < lr_initial")
        if not 1 <= self.max_docs_per_batch:
            raise ValueError("max_docs_per_batch must be >= 1")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale_range {self.scale_range}")
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)

    @property
    def alphas(self) -> tuple[float, float, float]:
        return (self.alpha_cls, self.alpha_ref, self.alpha_re)


# ----------------------------------------------------------------- config files


def _coerce(text: str, hint):
    origin = typing.get_origin(hint)
    if hint is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if hint in (int, float, str):
        return hint(text.strip())
    if origin is tuple:
        args = typing.get_args(hint)
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_coerce(p, a) for p, a in zip(parts, args))
    raise ValueError(f"unsupported field type {hint}")


def apply_overrides(config: TrainingConfig, pairs: dict[str, str]) -> TrainingConfig:
    """Set fields from ``key -> text`` pairs; ``model.<field>`` reaches the model config."""
    top_hints = typing.get_type_hints(TrainingConfig)
    model_hints = typing.get_type_hints(ModelConfig)
    top, model = {}, {}
    for key, text in pairs.items():
        if key.startswith("model."):
            name = key[len("model."):]
            if name not in model_hints:
                raise KeyError(f"unknown model setting {name!r}")
            model[name] = _coerce(text, model_hints[name])
        else:
            if key not in top_hints or key == "model":
                raise KeyError(f"unknown training setting {key!r}")
            top[key] = _coerce(text, top_hints[key])
    new_model = dataclasses.replace(config.model, **model)
    return dataclasses.replace(config, model=new_model, **top)


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines are ignored."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | Path, base: Optional[TrainingConfig] = None) -> TrainingConfig:
    return apply_overrides(base or TrainingConfig(), parse_config_text(Path(path).read_text()))


def dump_config(config: TrainingConfig) -> str:
    lines = []

    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(str(x) for x in v)
        return str(v).lower() if isinstance(v, bool) else str(v)

    for f in dataclasses.fields(config):
        if f.name != "model":
            lines.append(f"{f.name} = {fmt(getattr(config, f.name))}")
    for f in dataclasses.fields(config.model):
        lines.append(f"model.{f.name} = {fmt(getattr(config.model, f.name))}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------- training


def joint_loss(l_cls, l_ref, l_re, alphas=(1.0, 1.0, 1.0)):
    """``alpha_1 * L_cls + alpha_2 * L_ref + alpha_3 * L_re``; non-finite input aborts."""
    total = alphas[0] * l_cls + alphas[1] * l_ref + alphas[2] * l_re
    value = float(total.detach()) if torch.is_tensor(total) else float(total)
    if not math.isfinite(value):
        v = lambda x: float(x.detach()) if torch.is_tensor(x) else float(x)
        raise TrainingDiverged(
            f"non-finite loss: cls={v(l_cls)!r} ref={v(l_ref)!r} re={v(l_re)!r}")
    return total


def make_batches(records: Sequence[HierDocRecord], rng: np.random.Generator,
                 max_docs: int = 4, max_pages: int = 12) -> list[list[int]]:
    """Bucket documents by page count, then pack up to ``max_docs`` / ``max_pages``."""
    order = sorted(rng.permutation(len(records)),
                   key=lambda i: len(records[i].document.pages))
    batches, cur, pages = [], [], 0
    for i in order:
        n = len(records[i].document.pages)
        if cur and (len(cur) >= max_docs or pages + n > max_pages):
            batches.append(cur)
            cur, pages = [], 0
        cur.append(int(i))
        pages += n
    if cur:
        batches.append(cur)
    return [batches[k] for k in rng.permutation(len(batches))]


def cosine_lr(step: int, total: int, lr_initial: float, lr_min: float) -> float:
    t = min(step / max(total, 1), 1.0)
    return lr_min + 0.5 * (lr_initial - lr_min) * (1 + math.cos(math.pi * t))


def set_determinism(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


@dataclass
class TrainResult:
    model: TocModel
    history: list[dict]
    best_epoch: int
    best_teds: float
    checkpoint: Optional[Path] = None


def train(config: TrainingConfig, train_records: Sequence[HierDocRecord],
          eval_records: Optional[Sequence[HierDocRecord]] = None,
          out_dir: Optional[str | Path] = None,
          progress: Optional[Callable[[dict], None]] = None,
          max_steps: Optional[int] = None) -> TrainResult:
    """Teacher-forced joint training with periodic held-out evaluation.

    The parameters with the best held-out TEDS are restored at the end (and
    written to ``best.pt`` when ``out_dir`` is given).
    """
    if not train_records:
        raise DataError("empty training corpus")
    set_determinism(config.seed, config.deterministic)
    rng = np.random.default_rng(config.seed)
    model = TocModel(config.model)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr_initial, betas=(config.beta1, config.beta2))
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    cache = FeatureCache(config.cache_dir) if config.cache_dir else None
    bags = {r.doc_id: (cache.get(r.doc_id, model.text_provider.fingerprint) or {}).get("text")
            if cache else None for r in train_records}
    for r in train_records:
        if bags[r.doc_id] is None:
            bags[r.doc_id] = model.text_provider([e.content for e in r.document.entities])
            if cache:
                cache.put(r.doc_id, model.text_provider.fingerprint, {"text": bags[r.doc_id]})
    n_batches = len(make_batches(train_records, np.random.default_rng(0),
                                 config.max_docs_per_batch, config.max_pages_per_batch))
    total_steps = config.epochs * n_batches
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    history: list[dict] = []
    best_state, best_teds, best_epoch = None, -1.0, -1
    step = 0
    stale = 0

    for epoch in range(1, config.epochs + 1):
        model.train()
        t0 = time.time()
        sums = {"cls": 0.0, "ref": 0.0, "re": 0.0, "total": 0.0}
        n_docs = 0
        for batch in make_batches(train_records, rng, config.max_docs_per_batch,
                                  config.max_pages_per_batch):
            if max_steps is not None and step >= max_steps:
                break
            lr = cosine_lr(step, total_steps, config.lr_initial, config.lr_min)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad()
            for i in batch:
                rec = train_records[i]
                scale = float(rng.uniform(*config.scale_range)) if model.uses_vision else 1.0
                inp = prepare_inputs(rec.document, model.text_provider, rec.steps, scale,
                                     need_images=model.uses_vision, text_bags=bags[rec.doc_id])
                losses = model.losses(inp)
                try:
                    total = joint_loss(losses["cls"], losses["ref"], losses["re"],
                                       config.alphas)
                except TrainingDiverged as exc:
                    ckpt = save_checkpoint(model, config, history, out / "last_good.pt") \
                        if out else None
                    raise TrainingDiverged(f"epoch {epoch}, document {rec.doc_id}: {exc}",
                                           ckpt) from exc
                (total / len(batch)).backward()
                for k in ("cls", "ref", "re"):
                    sums[k] += float(losses[k].detach())
                sums["total"] += float(total.detach())
                n_docs += 1
            if config.max_grad_norm > 0:
                torch.nn.utils.clip_grad_norm_(params, config.max_grad_norm)
            opt.step()
            step += 1
        row = {"epoch": epoch, "steps": step, "lr": cosine_lr(step, total_steps,
                                                               config.lr_initial, config.lr_min),
               "seconds": round(time.time() - t0, 2)}
        row.update({f"loss_{k}": v / max(n_docs, 1) for k, v in sums.items()})
        if eval_records and (epoch % config.eval_every == 0 or epoch == config.epochs):
            report = evaluate(model, eval_records)
            row.update({f"eval_{k}": v for k, v in report.corpus().items()})
            if report.teds > best_teds:
                best_teds, best_epoch = report.teds, epoch
                best_state = copy.deepcopy(model.state_dict())
                stale = 0
            else:
                stale += 1
        history.append(row)
        log.info("epoch %s", row)
        if progress:
            progress(row)
        if out:
            save_checkpoint(model, config, history, out / "last.pt")
        if config.patience and stale >= config.patience:
            log.info("early stop after %d epochs without TEDS improvement", stale)
            break
        if max_steps is not None and step >= max_steps:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = history[-1]["epoch"]
    model.eval()
    ckpt = save_checkpoint(model, config, history, out / "best.pt") if out else None
    return TrainResult(model, history, best_epoch, best_teds, ckpt)


# -------------------------------------------------------------------- evaluation


def score_document(pred: Prediction, record: HierDocRecord) -> DocumentScore:
    doc = record.document
    gold_rows = [i for i, e in enumerate(doc.entities) if e.heading]
    gold_pairs = steps_to_pairs(record.steps, [doc.entities[i].doc_order for i in gold_rows])
    pred_pairs = steps_to_pairs(pred.steps, [doc.entities[i].doc_order for i in pred.heading_rows])
    pp, pr, pf = pair_f1(pred_pairs, gold_pairs)
    gold_mask = [e.heading for e in doc.entities]
    if not any(gold_mask) and not any(pred.heading_mask):
        dp = dr = df = 1.0
    else:
        dp, dr, df = detection_prf(pred.heading_mask, gold_mask)
    return DocumentScore(doc.doc_id, teds(pred.tree, record.toc), pp, pr, pf, dp, dr, df)


def evaluate(model: TocModel, records: Sequence[HierDocRecord],
             predictions: Optional[list] = None) -> ScoreReport:
    """Score every document; ``predictions`` (if a list) collects the raw outputs."""
    report = ScoreReport()
    for rec in records:
        if not rec.document.entities:
            raise DataError(f"{rec.doc_id}: no entities to evaluate")
        pred = model.predict(rec)
        if predictions is not None:
            predictions.append(pred)
        report.add(score_document(pred, rec))
    return report


def predict(model: TocModel, record_or_doc, trace: bool = False) -> Prediction:
    pred = model.predict(record_or_doc, trace=trace)
    if not pred.heading_rows:
        log.warning("%s: no headings detected; emitting a root-only tree", pred.doc_id)
    return pred


# -------------------------------------------------------------------- checkpoints


def save_checkpoint(model: TocModel, config: TrainingConfig, history: list[dict],
                    path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format_version": CHECKPOINT_VERSION,
                "training_config": asdict(config),
                "model_config": asdict(model.config),
                "state_dict": model.state_dict(),
                "history": history}, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[TocModel, TrainingConfig, list[dict]]:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except (FileNotFoundError, RuntimeError, EOFError) as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {blob.get('format_version')!r}")
    mcfg = ModelConfig(**blob["model_config"])
    tcfg_raw = dict(blob["training_config"])
    tcfg_raw["model"] = mcfg
    tcfg_raw["scale_range"] = tuple(tcfg_raw["scale_range"])
    tcfg = TrainingConfig(**tcfg_raw)
    model = TocModel(mcfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, tcfg, blob.get("history", [])
