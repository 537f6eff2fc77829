"""HierDoc-style corpora: on-disk format, label alignment, synthesis, feature cache.

One directory per document::

    <doc_dir>/
        meta.json        {"format_version": 1, "doc_id": str,
                          "pages": [{"width": W, "height": H, "image": "pages/page_000.png"}]}
        entities.jsonl   one JSON object per line:
                         {"page": int, "content": str, "position": [x0, y0, x1, y1],
                          "heading": bool, "id": "2.2.1" | null}
        toc.json         {"format_version": 1, "text": "", "children": [{"text", "children"}, ...]}
        pages/page_NNN.png   8-bit grayscale page rasters (optional)

A corpus is a directory whose subdirectories are documents, optionally
grouped into ``train/`` and ``test/`` splits.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from filelock import FileLock
from PIL import Image

from .core import (DataError, Document, Entity, PageMeta, RelationStep, ToCNode,
                   order_entities)
from .metrics import normalize_label, wer
from .treeops import ids_from_tree, steps_from_ids, tree_from_steps

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
WER_THRESHOLD = 0.2
SPLIT_WINDOW = 2


@dataclass
class HierDocRecord:
    document: Document
    toc: ToCNode
    steps: list[RelationStep]
    path: Optional[Path] = None

    @property
    def doc_id(self) -> str:
        return self.document.doc_id

    @property
    def heading_entities(self) -> list[Entity]:
        return self.document.headings


# ------------------------------------------------------------------------ writing


def _png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image.astype(np.uint8), mode="L").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def entity_record(e: Entity) -> dict:
    return {"page": e.page, "content": e.content, "position": [float(v) for v in e.box],
            "heading": e.heading, "id": e.id}


def write_hierdoc(record: HierDocRecord, doc_dir: str | Path) -> Path:
    doc_dir = Path(doc_dir)
    (doc_dir / "pages").mkdir(parents=True, exist_ok=True)
    doc = record.document
    pages = []
    for p, page in enumerate(doc.pages):
        entry = {"width": page.width, "height": page.height, "image": None}
        if page.image is not None:
            rel = f"pages/page_{p:03d}.png"
            (doc_dir / rel).write_bytes(_png_bytes(page.image))
            entry["image"] = rel
        pages.append(entry)
    meta = {"format_version": FORMAT_VERSION, "doc_id": doc.doc_id, "pages": pages}
    (doc_dir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    with open(doc_dir / "entities.jsonl", "w", encoding="utf-8") as fh:
        for e in doc.entities:
            fh.write(json.dumps(entity_record(e), sort_keys=True) + "\n")
    toc = {"format_version": FORMAT_VERSION, **record.toc.to_dict()}
    (doc_dir / "toc.json").write_text(json.dumps(toc, indent=1, sort_keys=True) + "\n")
    return doc_dir


def write_corpus(records: Iterable[HierDocRecord], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [write_hierdoc(r, out_dir / r.doc_id) for r in records]


# ------------------------------------------------------------------------ loading


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"{path}: missing") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc


def _check_version(data: dict, path: Path) -> None:
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format_version {version!r}")


def read_entities(path: Path) -> list[Entity]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                x0, y0, x1, y1 = (float(v) for v in rec["position"])
                heading = bool(rec.get("heading", False))
                ent_id = rec.get("id")
                out.append(Entity(content=str(rec["content"]), page=int(rec["page"]),
                                  box=(x0, y0, x1, y1), heading=heading,
                                  id=None if ent_id in (None, "") else str(ent_id)))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad entity record ({exc})") from exc
    return out


def load_document(doc_dir: str | Path, images: bool = True) -> Document:
    doc_dir = Path(doc_dir)
    meta = _read_json(doc_dir / "meta.json")
    _check_version(meta, doc_dir / "meta.json")
    pages = []
    for p, entry in enumerate(meta.get("pages", [])):
        image = None
        if images and entry.get("image"):
            img_path = doc_dir / entry["image"]
            try:
                image = np.asarray(Image.open(img_path).convert("L"))
            except (FileNotFoundError, OSError) as exc:
                raise DataError(f"{img_path}: cannot read page image ({exc})") from exc
            if image.shape != (int(entry["height"]), int(entry["width"])):
                raise DataError(f"{img_path}: image is {image.shape[::-1]}, meta says "
                                f"{entry['width']}x{entry['height']}")
        pages.append(PageMeta(float(entry["width"]), float(entry["height"]), image))
    ents = read_entities(doc_dir / "entities.jsonl")
    try:
        return order_entities(ents, pages, doc_id=str(meta.get("doc_id", doc_dir.name)))
    except DataError as exc:
        raise DataError(f"{doc_dir / 'entities.jsonl'}: {exc}") from exc


def load_toc(path: str | Path) -> ToCNode:
    path = Path(path)
    data = _read_json(path)
    _check_version(data, path)
    return ToCNode.from_dict(data)


def validate_against_toc(doc: Document, toc: ToCNode, steps: Sequence[RelationStep]) -> None:
    """The ids carried by heading entities must describe exactly the toc tree."""
    toc_ids = {dotted for _, dotted in ids_from_tree(toc)}
    ent_ids = {e.id for e in doc.headings}
    for e in doc.headings:
        if e.id not in toc_ids:
            raise DataError(f"{e.describe()}: id {e.id} is not a node of the toc")
    missing = sorted(toc_ids - ent_ids)
    if missing:
        raise DataError(f"toc nodes without heading entities: {', '.join(missing[:5])}")
    rebuilt = tree_from_steps(steps, [e.content for e in doc.headings])
    if _structure(rebuilt) != _structure(toc):
        raise DataError("heading ids do not reproduce the toc structure")
    for (node, dotted), (gold, _) in zip(ids_from_tree(rebuilt), ids_from_tree(toc)):
        if normalize_label(node.text) != normalize_label(gold.text):
            log.warning("%s: heading %s text %r differs from toc %r", doc.doc_id, dotted,
                        node.text, gold.text)


def _structure(node: ToCNode):
    return tuple(_structure(c) for c in node.children)


def load_hierdoc(doc_dir: str | Path, images: bool = True) -> HierDocRecord:
    """Load one document, derive gold steps from its ids and check them against toc.json."""
    doc_dir = Path(doc_dir)
    doc = load_document(doc_dir, images=images)
    toc = load_toc(doc_dir / "toc.json")
    try:
        steps = steps_from_ids(doc.entities)
        validate_against_toc(doc, toc, steps)
    except DataError as exc:
        raise DataError(f"{doc_dir}: {exc}") from exc
    return HierDocRecord(doc, toc, steps, doc_dir)


def load_corpus(root: str | Path, images: bool = True) -> list[HierDocRecord]:
    root = Path(root)
    if (root / "meta.json").exists():
        return [load_hierdoc(root, images)]
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").exists())
    if not dirs:
        raise DataError(f"{root}: no documents found")
    return [load_hierdoc(p, images) for p in dirs]


# ---------------------------------------------------------------------- alignment


@dataclass
class AlignmentResult:
    entities: list[Entity]
    unmatched: list[str] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return bool(self.unmatched)


def align_labels(entities: Sequence[Entity], toc: ToCNode, threshold: float = WER_THRESHOLD,
                 window: int = SPLIT_WINDOW) -> AlignmentResult:
    """Assign heading flags and ids to unlabeled entities by WER matching.

    Every toc heading is compared with every run of 1..``window`` consecutive
    entities. Pairs are accepted greedily from the lowest WER up (ties: the
    shorter window, then the earlier heading, then the earlier entity) as long
    as the heading and all entities of the run are still free and the WER is
    within ``threshold``.
    """
    nodes = ids_from_tree(toc)
    texts = [normalize_label(e.content).split() for e in entities]
    candidates = []
    for ni, (node, _) in enumerate(nodes):
        ref = normalize_label(node.text).split()
        if not ref:
            continue
        for size in range(1, window + 1):
            for start in range(len(entities) - size + 1):
                hyp = [tok for t in texts[start:start + size] for tok in t]
                # cheap length bound: WER >= |len(ref) - len(hyp)| / len(ref)
                if abs(len(ref) - len(hyp)) / len(ref) > threshold:
                    continue
                score = wer(ref, hyp)
                if score <= threshold:
                    candidates.append((score, size, ni, start))
    candidates.sort()
    node_done: set[int] = set()
    taken: dict[int, str] = {}
    for score, size, ni, start in candidates:
        span = range(start, start + size)
        if ni in node_done or any(i in taken for i in span):
            continue
        node_done.add(ni)
        for i in span:
            taken[i] = nodes[ni][1]
    out = []
    for i, e in enumerate(entities):
        dotted = taken.get(i)
        out.append(Entity(content=e.content, page=e.page, box=e.box, heading=dotted is not None,
                          id=dotted, doc_order=e.doc_order))
    unmatched = [nodes[ni][1] for ni in range(len(nodes)) if ni not in node_done]
    if unmatched:
        log.warning("%d toc headings unmatched: %s", len(unmatched), ", ".join(unmatched[:5]))
    return AlignmentResult(out, unmatched)


# -------------------------------------------------------------------- synthesis


def _pseudo_vocab(seed: int, size: int, capitalize: bool) -> list[str]:
    syll = ["ka", "lo", "mi", "ter", "sen", "po", "ra", "vi", "dun", "el", "mar", "to", "qui",
            "ne", "sa", "bor", "lin", "fa", "gro", "tis", "ve", "cu", "dra", "hol", "pen"]
    rng = np.random.default_rng(seed)
    words: list[str] = []
    seen = set()
    while len(words) < size:
        w = "".join(rng.choice(syll, size=int(rng.integers(2, 4))))
        if w in seen:
            continue
        seen.add(w)
        words.append(w.capitalize() if capitalize else w)
    return words


HEADING_WORDS = _pseudo_vocab(101, 300, capitalize=True)
BODY_WORDS = _pseudo_vocab(202, 600, capitalize=False)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic corpus; generation is a pure function of these."""

    seed: int = 0
    n_docs: int = 10
    start_index: int = 0
    depth_range: tuple[int, int] = (1, 4)
    branching_range: tuple[int, int] = (1, 5)
    entities_per_section: tuple[int, int] = (2, 6)
    max_headings: int = 24
    page_width: int = 320
    page_height: int = 416
    margin: int = 16
    body_height: int = 7
    line_gap: int = 3
    heading_scale: tuple[float, ...] = (2.0, 1.7, 1.45, 1.25, 1.1)
    heading_ink: int = 0
    body_ink: int = 110
    split_prob: float = 0.15
    title_prob: float = 0.3
    decoy_prob: float = 0.05

    def __post_init__(self):
        for name in ("depth_range", "branching_range", "entities_per_section"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be a non-empty range, got {(lo, hi)}")
        if not 1 <= self.depth_range[0] <= self.depth_range[1] <= 4:
            raise ValueError("depth_range must lie within [1, 4]")
        if self.branching_range[0] < 1:
            raise ValueError("branching_range must start at >= 1")
        if not 0.0 <= self.split_prob <= 1.0:
            raise ValueError("split_prob must be a probability")


def _random_tree(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[ToCNode, bool]:
    """Return the heading tree (texts without numbers yet) and whether it has a title."""
    depth = int(rng.integers(spec.depth_range[0], spec.depth_range[1] + 1))
    with_title = depth >= 2 and rng.random() < spec.title_prob
    budget = [spec.max_headings - (1 if with_title else 0)]

    def words(n):
        return " ".join(rng.choice(HEADING_WORDS, size=n))

    def grow(node: ToCNode, level: int, max_level: int):
        if level > max_level or budget[0] <= 0:
            return
        lo, hi = spec.branching_range
        n = int(rng.integers(lo, hi + 1))
        for _ in range(n):
            if budget[0] <= 0:
                break
            budget[0] -= 1
            child = ToCNode(text=words(int(rng.integers(1, 5))))
            node.children.append(child)
        for child in node.children:
            if level < max_level and rng.random() < 0.55:
                grow(child, level + 1, max_level)

    root = ToCNode()
    if with_title:
        title = ToCNode(text=words(int(rng.integers(4, 8))))
        root.children.append(title)
        grow(title, 1, depth - 1)
    else:
        grow(root, 1, depth)
    return root, with_title


def _number_headings(root: ToCNode, with_title: bool) -> None:
    def walk(node, path):
        for i, child in enumerate(node.children, start=1):
            p = path + (i,)
            child.text = f"{'.'.join(map(str, p))} {child.text}"
            walk(child, p)

    if with_title:
        walk(root.children[0], ())
    else:
        walk(root, ())


class _PageWriter:
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.pages: list[np.ndarray] = []
        self.entities: list[Entity] = []
        self._new_page()

    def _new_page(self):
        self.pages.append(np.full((self.spec.page_height, self.spec.page_width), 255, np.uint8))
        self.y = self.spec.margin

    def char_width(self, height: int) -> float:
        return max(1.0, 0.42 * height)

    def fit_words(self, words: Sequence[str], height: int, width: float) -> int:
        """How many leading words fit on a line of the given width."""
        cw = self.char_width(height)
        used, n = 0.0, 0
        for w in words:
            extra = len(w) * cw + (cw if n else 0)
            if n and used + extra > width:
                break
            used += extra
            n += 1
        return n

    def line(self, words: Sequence[str], height: int, ink: int, bold: bool,
             x0: Optional[float] = None, center: bool = False, space_before: int = 0,
             heading_id: Optional[str] = None, char_width: Optional[float] = None) -> None:
        spec = self.spec
        if self.y + space_before + height > spec.page_height - spec.margin:
            self._new_page()
        else:
            self.y += space_before
        cw = char_width or self.char_width(height)
        total = sum(len(w) for w in words) * cw + cw * (len(words) - 1)
        if center:
            x0 = (spec.page_width - total) / 2
        x = float(x0 if x0 is not None else spec.margin)
        x = max(float(spec.margin), x)
        img = self.pages[-1]
        y0, y1 = self.y, self.y + height
        # body glyphs leave room for ascenders/descenders; headings fill the line
        pad = 0 if bold else max(1, height // 4)
        start = int(round(x))
        for w in words:
            x1 = x + len(w) * cw
            img[y0 + pad:y1 - pad, int(round(x)):max(int(round(x1)), int(round(x)) + 1)] = ink
            x = x1 + cw
        end = min(int(round(x - cw)), spec.page_width)
        end = max(end, start + 1)
        self.entities.append(Entity(
            content=" ".join(words), page=len(self.pages) - 1,
            box=(float(start), float(y0), float(end), float(y1)),
            heading=heading_id is not None, id=heading_id))
        self.y = y1 + spec.line_gap


def _heading_height(spec: SyntheticSpec, level: int) -> int:
    scale = spec.heading_scale[min(level, len(spec.heading_scale)) - 1]
    return int(round(spec.body_height * scale))


def _body(writer: _PageWriter, spec: SyntheticSpec, rng: np.random.Generator, n_lines: int):
    content_w = spec.page_width - 2 * spec.margin
    left = n_lines
    while left > 0:
        para = min(left, int(rng.integers(2, 6)))
        for k in range(para):
            frac = rng.uniform(0.3, 0.7) if k == para - 1 else rng.uniform(0.85, 1.0)
            pool = rng.choice(BODY_WORDS, size=40)
            words = list(pool[: writer.fit_words(pool, spec.body_height, frac * content_w)])
            if k == 0 and rng.random() < spec.decoy_prob:
                words[0] = str(int(rng.integers(1, 10))) + ("." + str(int(rng.integers(1, 6)))
                                                            if rng.random() < 0.5 else "")
            writer.line(words, spec.body_height, spec.body_ink, bold=False,
                        space_before=spec.line_gap * 2 if k == 0 else 0)
        left -= para


def synthesize_document(spec: SyntheticSpec, index: int) -> HierDocRecord:
    rng = np.random.default_rng([spec.seed, index])
    root, with_title = _random_tree(spec, rng)
    _number_headings(root, with_title)
    writer = _PageWriter(spec)
    content_w = spec.page_width - 2 * spec.margin

    def emit(node: ToCNode, dotted: str, level: int, is_title: bool):
        height = _heading_height(spec, 1 if is_title else level + (1 if with_title else 0))
        words = node.text.split()
        head_room = content_w * (0.75 if not is_title else 0.9)
        pieces = [words]
        min_words = 2 if is_title else 3
        if len(words) >= min_words and rng.random() < spec.split_prob:
            lo = 1 if is_title else 2
            cut = int(rng.integers(lo, len(words)))
            pieces = [words[:cut], words[cut:]]
        condense = None
        if spec.split_prob > 0:
            # very long headings wrap, which also yields multi-fragment headings
            while writer.fit_words(pieces[-1], height, head_room) < len(pieces[-1]):
                last = pieces.pop()
                n = writer.fit_words(last, height, head_room)
                pieces.extend([last[:n], last[n:]])
        elif writer.fit_words(words, height, head_room) < len(words):
            # with splitting disabled a long heading is set in condensed glyphs instead
            condense = head_room / (sum(map(len, words)) + len(words) - 1)
        for k, piece in enumerate(pieces):
            writer.line(piece, height, spec.heading_ink, bold=True, center=is_title,
                        space_before=(spec.line_gap * 3 if k == 0 else 0), heading_id=dotted,
                        char_width=condense)

    def walk(node: ToCNode, path: tuple[int, ...]):
        for i, child in enumerate(node.children, start=1):
            p = path + (i,)
            is_title = with_title and len(p) == 1
            emit(child, ".".join(map(str, p)), len(p) - (1 if with_title else 0), is_title)
            if is_title:
                _body(writer, spec, rng, int(rng.integers(1, 3)))
            else:
                lo, hi = spec.entities_per_section
                _body(writer, spec, rng, int(rng.integers(lo, hi + 1)))
            walk(child, p)

    if not root.children:
        _body(writer, spec, rng, 3)
    walk(root, ())
    pages = [PageMeta(spec.page_width, spec.page_height, img) for img in writer.pages]
    doc = order_entities(writer.entities, pages, doc_id=f"synth-{spec.seed:04d}-{index:05d}")
    steps = steps_from_ids(doc.entities)
    return HierDocRecord(doc, root, steps)


def synthesize_corpus(spec: SyntheticSpec, out_dir: Optional[str | Path] = None
                      ) -> list[HierDocRecord]:
    """Generate ``spec.n_docs`` documents; write them under ``out_dir`` if given."""
    records = [synthesize_document(spec, spec.start_index + i) for i in range(spec.n_docs)]
    if out_dir is not None:
        paths = write_corpus(records, out_dir)
        for rec, path in zip(records, paths):
            rec.path = path
    return records


# ------------------------------------------------------------------ feature cache


class FeatureCache:
    """Per-document store of frozen-extractor outputs.

    Files live at ``<root>/<doc_id>/<sha256(fingerprint)[:16]>.npz``. Each
    archive holds the feature arrays plus two header entries,
    ``__format_version__`` and ``__fingerprint__``; a fingerprint that does not
    match the request is a miss. Writes go through a per-key file lock and an
    atomic rename, so readers never see partial files.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, doc_id: str, fingerprint: str) -> Path:
        key = hashlib.sha256(fingerprint.encode("utf-8")).hexdigest()[:16]
        return self.root / doc_id / f"{key}.npz"

    def put(self, doc_id: str, fingerprint: str, features: dict[str, np.ndarray]) -> Path:
        path = self._path(doc_id, fingerprint)
        path.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(path) + ".lock"):
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            with os.fdopen(fd, "wb") as fh:
                np.savez(fh, __format_version__=np.array(FORMAT_VERSION),
                         __fingerprint__=np.array(fingerprint), **features)
            os.replace(tmp, path)
        return path

    def get(self, doc_id: str, fingerprint: str) -> Optional[dict[str, np.ndarray]]:
        path = self._path(doc_id, fingerprint)
        if not path.exists():
            return None
        with np.load(path, allow_pickle=False) as data:
            if int(data["__format_version__"]) != FORMAT_VERSION:
                return None
            if str(data["__fingerprint__"]) != fingerprint:
                return None
            return {k: data[k] for k in data.files if not k.startswith("__")}
