"""End-to-end model: encoder -> heading classifier -> tree decoder (or depth baseline)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .classifier import HeadingClassifier, focal_loss
from .core import DataError, Document, Entity, PageMeta, RelationStep, ToCNode
from .data import FeatureCache, HierDocRecord
from .decoder import AttentionTrace, DepthHead, TreeDecoder, reference_loss, relation_loss
from .encoder import Encoder, HashBagText, compute_layout_features
from .treeops import (MAX_DEPTH_CLASSES, depths_from_ids, steps_from_depths, tree_from_depths,
                      tree_from_steps)

DECODINGS = ("tree", "depth")


@dataclass
class ModelConfig:
    d: int = 128
    n_buckets: int = 1024
    text_hidden: int = 256
    classifier_hidden: int = 128
    decoder_hidden: int = 128
    attn_dim: int = 128
    n_layers: int = 3
    n_heads: int = 4
    ff_dim: int = 256
    dropout: float = 0.1
    coverage_kernel: int = 3
    relation_hidden: int = 128
    query_current: bool = True
    fusion: str = "gated"
    mask: tuple[str, ...] = ()
    decoding: str = "tree"
    max_depth: int = MAX_DEPTH_CLASSES
    gamma: float = 2.0
    alpha: float = 0.25
    text_seed: int = 0
    vision_backbone: str = ""   # pretrained backbone state dict; loaded and frozen if set

    def __post_init__(self):
        self.mask = tuple(self.mask)
        if self.decoding not in DECODINGS:
            raise ValueError(f"unknown decoding {self.decoding!r}")


@dataclass
class DocumentInputs:
    """Tensors for one document, ready for the model."""

    doc_id: str
    contents: list[str]
    images: list[Optional[torch.Tensor]]
    boxes: torch.Tensor
    pages: torch.Tensor
    text_bags: torch.Tensor
    layout: torch.Tensor
    labels: torch.Tensor
    heading_rows: list[int]
    gold_refs: list[int] = field(default_factory=list)
    gold_relations: list[int] = field(default_factory=list)
    gold_depths: list[int] = field(default_factory=list)
    vision_pooled: Optional[torch.Tensor] = None

    @property
    def n_entities(self) -> int:
        return len(self.contents)

    def to(self, dtype) -> "DocumentInputs":
        conv = lambda t: None if t is None else t.to(dtype)
        return replace(self, images=[conv(i) for i in self.images], boxes=conv(self.boxes),
                       text_bags=conv(self.text_bags), layout=conv(self.layout),
                       vision_pooled=conv(self.vision_pooled))


def scale_document(doc: Document, factor: float) -> Document:
    """Scale page sizes and boxes together (rasters are resized separately)."""
    pages = tuple(PageMeta(p.width * factor, p.height * factor, p.image) for p in doc.pages)
    ents = tuple(replace(e, box=tuple(v * factor for v in e.box)) for e in doc.entities)
    return Document(pages=pages, entities=ents, doc_id=doc.doc_id)


def ink_map(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(1.0 - image.astype(np.float32) / 255.0)[None]


def prepare_inputs(doc: Document, provider: HashBagText, steps: Sequence[RelationStep] = (),
                   scale: float = 1.0, need_images: bool = True,
                   text_bags: Optional[np.ndarray] = None,
                   vision_pooled: Optional[np.ndarray] = None) -> DocumentInputs:
    if not doc.entities:
        raise DataError(f"document {doc.doc_id!r} has no entities")
    images: list[Optional[torch.Tensor]] = []
    for p, page in enumerate(doc.pages):
        if page.image is None:
            if need_images and vision_pooled is None and any(e.page == p for e in doc.entities):
                raise DataError(f"document {doc.doc_id!r}: page {p} has no raster and no cached "
                                "visual features")
            images.append(None)
            continue
        img = ink_map(page.image)
        if scale != 1.0:
            size = (max(8, round(img.shape[1] * scale)), max(8, round(img.shape[2] * scale)))
            img = F.interpolate(img[None], size=size, mode="bilinear", align_corners=False)[0]
        images.append(img)
    sdoc = scale_document(doc, scale) if scale != 1.0 else doc
    if text_bags is None:
        text_bags = provider([e.content for e in doc.entities])
    heading_rows = [i for i, e in enumerate(doc.entities) if e.heading]
    depths = depths_from_ids(doc.entities) if heading_rows else []
    return DocumentInputs(
        doc_id=doc.doc_id,
        contents=[e.content for e in doc.entities],
        images=images,
        boxes=torch.tensor([e.box for e in sdoc.entities], dtype=torch.float32),
        pages=torch.tensor([e.page for e in doc.entities], dtype=torch.long),
        text_bags=torch.from_numpy(np.asarray(text_bags, dtype=np.float32)),
        layout=torch.from_numpy(compute_layout_features(sdoc).astype(np.float32)),
        labels=torch.tensor([int(e.heading) for e in doc.entities], dtype=torch.long),
        heading_rows=heading_rows,
        gold_refs=[s.reference for s in steps],
        gold_relations=[s.relation.index for s in steps],
        gold_depths=[min(d, MAX_DEPTH_CLASSES) for d in depths],
        vision_pooled=None if vision_pooled is None
        else torch.from_numpy(np.asarray(vision_pooled, dtype=np.float32)),
    )


@dataclass
class Prediction:
    doc_id: str
    heading_mask: list[bool]
    heading_rows: list[int]
    steps: list[RelationStep]
    tree: ToCNode
    depths: Optional[list[int]] = None
    trace: Optional[AttentionTrace] = None


class TocModel(nn.Module):
    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        self.text_provider = HashBagText(config.n_buckets, config.text_seed)
        self.encoder = Encoder(config.d, config.n_buckets, config.text_hidden, config.fusion,
                               config.mask)
        if config.vision_backbone:
            self.encoder.vision.load_backbone(config.vision_backbone)
        self.classifier = HeadingClassifier(config.d, config.classifier_hidden)
        if config.decoding == "tree":
            self.decoder = TreeDecoder(config.d, config.decoder_hidden, config.attn_dim,
                                       config.n_layers, config.n_heads, config.ff_dim,
                                       config.dropout, config.coverage_kernel,
                                       config.relation_hidden, config.query_current)
        else:
            self.decoder = DepthHead(config.d, config.max_depth, config.n_layers,
                                     config.n_heads, config.ff_dim, config.dropout)

    @property
    def uses_vision(self) -> bool:
        return "vision" not in self.config.mask

    def prepare(self, record_or_doc, scale: float = 1.0,
                cache: Optional[FeatureCache] = None) -> DocumentInputs:
        if isinstance(record_or_doc, HierDocRecord):
            doc, steps = record_or_doc.document, record_or_doc.steps
        else:
            doc, steps = record_or_doc, []
        bags = pooled = None
        if cache is not None:
            hit = cache.get(doc.doc_id, self.text_provider.fingerprint)
            if hit is None:
                bags = self.text_provider([e.content for e in doc.entities])
                cache.put(doc.doc_id, self.text_provider.fingerprint, {"text": bags})
            else:
                bags = hit["text"]
            if self.encoder.vision.frozen and scale == 1.0:
                pooled = self.cached_vision(doc, cache)
        return prepare_inputs(doc, self.text_provider, steps, scale,
                              need_images=self.uses_vision, text_bags=bags,
                              vision_pooled=pooled)

    def vision_fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256(b"vision-v1")
        for name, t in sorted(self.encoder.vision.backbone.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    @torch.no_grad()
    def cached_vision(self, doc: Document, cache: FeatureCache) -> np.ndarray:
        """Pooled backbone features for a frozen backbone, computed once per document."""
        fp = self.vision_fingerprint()
        hit = cache.get(doc.doc_id, fp)
        if hit is not None:
            return hit["pooled"]
        inputs = prepare_inputs(doc, self.text_provider, need_images=True)
        pooled = self.encoder.vision.pooled(inputs.images, inputs.boxes, inputs.pages).numpy()
        cache.put(doc.doc_id, fp, {"pooled": pooled})
        return pooled

    def features(self, inp: DocumentInputs):
        return self.encoder(inp.images, inp.boxes, inp.pages, inp.text_bags, inp.layout,
                            vision_pooled=inp.vision_pooled)

    def losses(self, inp: DocumentInputs) -> dict[str, torch.Tensor]:
        """Teacher-forced per-document losses: ``cls``, ``ref`` and ``re``.

        For the depth baseline ``ref`` is zero and ``re`` holds the depth loss.
        """
        cfg = self.config
        feats = self.features(inp)
        probs = self.classifier(feats.f)
        out = {"cls": focal_loss(probs, inp.labels, cfg.gamma, cfg.alpha)}
        zero = feats.f.new_zeros(())
        if not inp.heading_rows:
            out["ref"] = zero
            out["re"] = zero
            return out
        m_hat = feats.f[inp.heading_rows]
        if cfg.decoding == "tree":
            teach = self.decoder.teacher_forward(m_hat, inp.gold_refs)
            out["ref"] = reference_loss(teach.energies, inp.gold_refs, cfg.gamma, cfg.alpha)
            out["re"] = relation_loss(teach.relation_logits, inp.gold_relations, cfg.gamma,
                                      cfg.alpha)
        else:
            logits = self.decoder(m_hat)
            target = torch.tensor([d - 1 for d in inp.gold_depths], dtype=torch.long)
            out["ref"] = zero
            out["re"] = focal_loss(F.softmax(logits, -1), target, cfg.gamma, cfg.alpha)
        return out

    @torch.no_grad()
    def predict_inputs(self, inp: DocumentInputs, trace: bool = False,
                       headings: Optional[Sequence[int]] = None) -> Prediction:
        """``headings`` (entity rows) bypasses the classifier, e.g. to score
        the decoder on gold headings."""
        feats = self.features(inp)
        if headings is None:
            mask = (self.classifier(feats.f).argmax(-1) == 1).tolist()
        else:
            mask = [False] * inp.n_entities
            for i in headings:
                mask[i] = True
        rows = [i for i, m in enumerate(mask) if m]
        texts = [inp.contents[i] for i in rows]
        m_hat = feats.f[rows]
        tr = AttentionTrace() if trace else None
        depths = None
        if self.config.decoding == "tree":
            steps = self.decoder.decode(m_hat, trace=tr)
            tree = tree_from_steps(steps, texts, rows)
        else:
            depths = self.decoder.predict_depths(m_hat)
            tree = tree_from_depths(depths, texts, rows, self.config.max_depth)
            steps = steps_from_depths(depths, self.config.max_depth)
        return Prediction(inp.doc_id, mask, rows, steps, tree, depths, tr)

    def predict(self, record_or_doc, trace: bool = False,
                headings: Optional[Sequence[int]] = None) -> Prediction:
        doc = record_or_doc.document if isinstance(record_or_doc, HierDocRecord) \
            else record_or_doc
        if not doc.entities:
            return Prediction(doc.doc_id, [], [], [], ToCNode())
        was_training = self.training
        self.eval()
        try:
            return self.predict_inputs(self.prepare(record_or_doc), trace=trace,
                                       headings=headings)
        finally:
            self.train(was_training)

    def config_dict(self) -> dict:
        return asdict(self.config)
