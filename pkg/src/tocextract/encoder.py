"""Per-entity feature extraction and multimodal fusion.

Three modalities are embedded for every entity and fused into one vector:

* layout: an 8-d hand-normalized box descriptor (:func:`compute_layout_features`);
* text: a frozen provider (hash-bucket bag of tokens by default) followed by
  two trainable linear maps with a ReLU between them;
* vision: a small convolutional backbone with a top-down feature pyramid,
  RoI-aligned to a 3x3 grid per entity, flattened and projected.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import roi_align

from .core import DataError, Document

LAYOUT_DIM = 8
FUSIONS = ("gated", "add", "concat", "dot")
MODALITIES = ("vision", "text", "layout")


@dataclass(frozen=True)
class LayoutStats:
    mean_width: float
    mean_height: float


def layout_stats(doc: Document) -> LayoutStats:
    if not doc.entities:
        raise DataError(f"document {doc.doc_id!r} has no entities")
    widths = [e.width for e in doc.entities]
    heights = [e.height for e in doc.entities]
    return LayoutStats(float(np.mean(widths)), float(np.mean(heights)))


def compute_layout_features(doc: Document) -> np.ndarray:
    """Return an ``(N, 8)`` array of layout descriptors.

    Columns: box corners normalized by page size (4), width and height over
    the document-mean width/height (2), and the vertical gaps to the previous
    and next entity over the mean height (2). Gaps stay within a page: the
    first entity on a page measures from the page top and the last one to the
    page bottom.
    """
    stats = layout_stats(doc)
    ents = doc.entities
    out = np.zeros((len(ents), LAYOUT_DIM), dtype=np.float64)
    for t, e in enumerate(ents):
        page = doc.pages[e.page]
        W, H = page.width, page.height
        x0, y0, x1, y1 = e.box
        prev_bottom = ents[t - 1].box[3] if t > 0 and ents[t - 1].page == e.page else 0.0
        next_top = ents[t + 1].box[1] if t + 1 < len(ents) and ents[t + 1].page == e.page else H
        out[t] = (x0 / W, y0 / H, x1 / W, y1 / H,
                  (x1 - x0) / stats.mean_width, (y1 - y0) / stats.mean_height,
                  (y0 - prev_bottom) / stats.mean_height,
                  (next_top - y1) / stats.mean_height)
    return out


# --------------------------------------------------------------------------- text


def word_shape(token: str) -> str:
    out = []
    for ch in token:
        c = "9" if ch.isdigit() else "A" if ch.isupper() else "a" if ch.isalpha() else ch
        if not out or out[-1] != c:
            out.append(c)
    return "".join(out)


def tokenize(text: str) -> list[str]:
    """Lowercased words, word shapes (``"2.1"`` -> ``shape:9.9``) and, like a
    subword tokenizer, the digit runs of mixed tokens (``piece:2``, ``piece:1``)."""
    words = text.split()
    if not words:
        return ["<empty>"]
    feats = [f"len:{min(len(words), 12)}", f"first:{word_shape(words[0])}"]
    for w in words:
        feats.append(w.lower())
        shape = word_shape(w)
        feats.append(f"shape:{shape}")
        if shape != "9" and "9" in shape:
            feats += [f"piece:{d}" for d in re.findall(r"\d+", w)]
    return feats


class HashBagText:
    """Deterministic, vocabulary-free bag-of-tokens embedder.

    Each token is hashed (BLAKE2b, salted with ``seed``) to a bucket and a
    sign; counts are L2-normalized. This is the frozen text provider; its
    output is cacheable.
    """

    def __init__(self, n_buckets: int = 1024, seed: int = 0):
        self.n_buckets = n_buckets
        self.seed = seed
        self._memo: dict[str, tuple[int, float]] = {}

    @property
    def fingerprint(self) -> str:
        return f"hashbag-v2-b{self.n_buckets}-s{self.seed}"

    def _bucket(self, token: str) -> tuple[int, float]:
        hit = self._memo.get(token)
        if hit is None:
            h = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                                salt=self.seed.to_bytes(8, "little")).digest()
            v = int.from_bytes(h, "little")
            hit = (v % self.n_buckets, 1.0 if (v >> 63) & 1 else -1.0)
            self._memo[token] = hit
        return hit

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.n_buckets, dtype=np.float32)
        for tok in tokenize(text):
            b, sign = self._bucket(tok)
            vec[b] += sign
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def __call__(self, contents: Sequence[str]) -> np.ndarray:
        rows = []
        for i, text in enumerate(contents):
            if not isinstance(text, str):
                raise DataError(f"text provider: entity {i} has non-string content {text!r}")
            rows.append(self.embed(text))
        return np.stack(rows) if rows else np.zeros((0, self.n_buckets), dtype=np.float32)


class TextModule(nn.Module):
    """Two linear maps with a ReLU on top of the frozen provider output."""

    def __init__(self, in_dim: int, d: int = 128, hidden: int = 256):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, bags):
        return self.fc2(F.relu(self.fc1(bags)))


# ------------------------------------------------------------------------- vision


class VisionBackbone(nn.Module):
    """Three strided conv blocks merged by a top-down pyramid at stride 2."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64), out_channels: int = 32):
        super().__init__()
        blocks = []
        cin = 1
        for c in channels:
            blocks.append(nn.Sequential(nn.Conv2d(cin, c, 3, stride=2, padding=1), nn.ReLU()))
            cin = c
        self.blocks = nn.ModuleList(blocks)
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in channels)
        self.out_channels = out_channels
        self.stride = 2

    def forward(self, images):
        feats = []
        x = images
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        top = self.lateral[-1](feats[-1])
        for lat, f in zip(reversed(self.lateral[:-1]), reversed(feats[:-1])):
            top = lat(f) + F.interpolate(top, size=f.shape[-2:], mode="nearest")
        return top


class VisionModule(nn.Module):
    def __init__(self, d: int = 128, pool: int = 3, backbone: Optional[VisionBackbone] = None):
        super().__init__()
        self.backbone = backbone or VisionBackbone()
        self.pool = pool
        self.pooled_dim = self.backbone.out_channels * pool * pool
        self.proj = nn.Linear(self.pooled_dim, d)
        self.frozen = False

    def freeze(self) -> None:
        """Stop training the backbone (e.g. after loading pretrained weights)."""
        self.frozen = True
        for p in self.backbone.parameters():
            p.requires_grad_(False)

    def load_backbone(self, path: str) -> None:
        self.backbone.load_state_dict(torch.load(path, map_location="cpu"))
        self.freeze()

    def pooled(self, images: Sequence[torch.Tensor], boxes: torch.Tensor,
               pages: torch.Tensor) -> torch.Tensor:
        """RoI-pooled, flattened backbone features, ``(N, C * pool * pool)``.

        ``images[p]`` is a ``(1, H, W)`` ink map for page ``p``; ``boxes`` are
        page-pixel coordinates.
        """
        out = boxes.new_zeros((boxes.shape[0], self.pooled_dim))
        by_shape: dict[tuple, list[int]] = {}
        for p, img in enumerate(images):
            by_shape.setdefault(tuple(img.shape), []).append(p)
        for shape, page_ids in by_shape.items():
            batch = torch.stack([images[p] for p in page_ids]).to(boxes.dtype)
            fmap = self.backbone(batch)
            rois, rows = [], []
            for bi, p in enumerate(page_ids):
                idx = (pages == p).nonzero(as_tuple=True)[0]
                if len(idx) == 0:
                    continue
                rows.append(idx)
                rois.append(torch.cat([boxes.new_full((len(idx), 1), bi), boxes[idx]], dim=1))
            if not rois:
                continue
            pooled = roi_align(fmap, torch.cat(rois), output_size=self.pool,
                               spatial_scale=1.0 / self.backbone.stride, sampling_ratio=2,
                               aligned=True)
            out = out.index_put((torch.cat(rows),), pooled.flatten(1))
        return out

    def forward(self, images, boxes, pages):
        return self.proj(self.pooled(images, boxes, pages))


# ------------------------------------------------------------------------- fusion


def fuse_gated(f_v, f_s, f_p, W_z, E_z):
    """Gated fusion: ``z = sigmoid(W_z [f_v; f_s; f_p])``, ``f = z*f_v + (1-z)*f_s + E_z f_p``.

    Works on single vectors or row-stacked batches.
    """
    d = f_v.shape[-1]
    if f_s.shape[-1] != d or f_p.shape[-1] != LAYOUT_DIM:
        raise ValueError(f"fusion shapes {tuple(f_v.shape)}, {tuple(f_s.shape)}, {tuple(f_p.shape)}")
    if tuple(W_z.shape) != (d, 2 * d + LAYOUT_DIM) or tuple(E_z.shape) != (d, LAYOUT_DIM):
        raise ValueError(f"gate weights {tuple(W_z.shape)}, {tuple(E_z.shape)} do not match d={d}")
    z = torch.sigmoid(torch.cat([f_v, f_s, f_p], dim=-1) @ W_z.T)
    return z * f_v + (1 - z) * f_s + f_p @ E_z.T


class GatedUnit(nn.Module):
    def __init__(self, d: int = 128):
        super().__init__()
        self.W_z = nn.Parameter(torch.empty(d, 2 * d + LAYOUT_DIM))
        self.E_z = nn.Parameter(torch.empty(d, LAYOUT_DIM))
        nn.init.xavier_uniform_(self.W_z)
        nn.init.xavier_uniform_(self.E_z)

    def gate(self, f_v, f_s, f_p):
        return torch.sigmoid(torch.cat([f_v, f_s, f_p], dim=-1) @ self.W_z.T)

    def forward(self, f_v, f_s, f_p):
        return fuse_gated(f_v, f_s, f_p, self.W_z, self.E_z)


class FusionVariant(nn.Module):
    """Baseline fusions for ablations.

    ``add``: ``f_v + f_s + P f_p``; ``dot``: ``f_v * f_s * P f_p`` (all
    element-wise); ``concat``: a linear map of ``[f_v; f_s; f_p]``. ``P`` is
    a learned affine projection of the layout vector.
    """

    def __init__(self, strategy: str, d: int = 128):
        super().__init__()
        if strategy not in ("add", "dot", "concat"):
            raise ValueError(f"unknown fusion strategy {strategy!r}")
        self.strategy = strategy
        if strategy == "concat":
            self.proj = nn.Linear(2 * d + LAYOUT_DIM, d)
        else:
            self.layout = nn.Linear(LAYOUT_DIM, d)

    def forward(self, f_v, f_s, f_p):
        if self.strategy == "concat":
            return self.proj(torch.cat([f_v, f_s, f_p], dim=-1))
        p = self.layout(f_p)
        if self.strategy == "add":
            return f_v + f_s + p
        return f_v * f_s * p


def fuse_variant(strategy: str, f_v, f_s, f_p, module: Optional[FusionVariant] = None):
    module = module or FusionVariant(strategy, f_v.shape[-1]).to(f_v.dtype)
    if module.strategy != strategy:
        raise ValueError(f"module implements {module.strategy!r}, not {strategy!r}")
    return module(f_v, f_s, f_p)


def make_fusion(strategy: str, d: int) -> nn.Module:
    if strategy == "gated":
        return GatedUnit(d)
    return FusionVariant(strategy, d)


# ------------------------------------------------------------------------ encoder


@dataclass
class EntityFeatures:
    f_v: torch.Tensor
    f_s: torch.Tensor
    f_p: torch.Tensor
    f: torch.Tensor


class Encoder(nn.Module):
    """Embed every entity of a document and fuse the modalities.

    ``mask`` lists the modalities to drop; a dropped modality is zeroed
    before fusion.
    """

    def __init__(self, d: int = 128, n_buckets: int = 1024, text_hidden: int = 256,
                 fusion: str = "gated", mask: Sequence[str] = ()):
        super().__init__()
        if fusion not in FUSIONS:
            raise ValueError(f"unknown fusion strategy {fusion!r}")
        bad = set(mask) - set(MODALITIES)
        if bad:
            raise ValueError(f"unknown modality in mask: {sorted(bad)}")
        self.d = d
        self.mask = tuple(mask)
        self.vision = VisionModule(d)
        self.text = TextModule(n_buckets, d, text_hidden)
        self.fusion_name = fusion
        self.fusion = make_fusion(fusion, d)

    def forward(self, images, boxes, pages, text_bags, layout, vision_pooled=None) -> EntityFeatures:
        """``vision_pooled`` short-circuits the backbone with cached pooled features."""
        if "vision" in self.mask:
            f_v = layout.new_zeros((layout.shape[0], self.d))
        elif vision_pooled is not None:
            f_v = self.vision.proj(vision_pooled)
        else:
            f_v = self.vision(images, boxes, pages)
        f_s = layout.new_zeros((layout.shape[0], self.d)) if "text" in self.mask \
            else self.text(text_bags)
        f_p = torch.zeros_like(layout) if "layout" in self.mask else layout
        return EntityFeatures(f_v=f_v, f_s=f_s, f_p=f_p, f=self.fusion(f_v, f_s, f_p))

