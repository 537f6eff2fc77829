"""Domain types shared across the package.

Entities are text lines with a bounding box. A document is a list of pages
plus its entities in reading order. The extraction target is an ordered
tree of headings hanging off a virtual root; the decoder produces it as a
sequence of :class:`RelationStep`.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

_ID_RE = re.compile(r"^[1-9][0-9]*(\.[1-9][0-9]*)*$")


class DataError(ValueError):
    """Raised for malformed documents, annotations or files."""


class StructureError(ValueError):
    """Raised when a relation sequence cannot be turned into a tree."""


def parse_dotted_id(text: str) -> tuple[int, ...]:
    """Parse ``"2.2.1"`` into ``(2, 2, 1)``.

    Components are positive integers. Anything else (``"2..1"``, ``"0"``,
    ``"a.1"``, ``""``) raises :class:`DataError`.
    """
    if not isinstance(text, str) or not _ID_RE.match(text.strip()):
        raise DataError(f"malformed heading id {text!r}")
    return tuple(int(p) for p in text.strip().split("."))


def format_dotted_id(path: Sequence[int]) -> str:
    return ".".join(str(p) for p in path)


class Relation(str, enum.Enum):
    PARENT = "parent"
    SIBLING = "sibling"
    IDENTITY = "identity"

    @property
    def index(self) -> int:
        return _RELATION_ORDER.index(self)

    @classmethod
    def from_index(cls, i: int) -> "Relation":
        return _RELATION_ORDER[int(i)]


_RELATION_ORDER = (Relation.PARENT, Relation.SIBLING, Relation.IDENTITY)


@dataclass(frozen=True)
class PageMeta:
    width: float
    height: float
    image: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise DataError(f"page size must be positive, got {self.width}x{self.height}")


@dataclass(frozen=True)
class Entity:
    """One text line: content, page index, box ``(x0, y0, x1, y1)``, labels."""

    content: str
    page: int
    box: tuple[float, float, float, float]
    heading: bool = False
    id: Optional[str] = None
    doc_order: int = -1

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise DataError(f"degenerate box {self.box} for entity {self.content!r}")
        if self.page < 0:
            raise DataError(f"negative page index for entity {self.content!r}")
        if self.heading != (self.id is not None):
            raise DataError(f"entity {self.content!r}: heading flag and id disagree")
        if self.id is not None:
            try:
                parse_dotted_id(self.id)
            except DataError as exc:
                raise DataError(f"entity {self.content!r}: {exc}") from None

    @property
    def id_path(self) -> Optional[tuple[int, ...]]:
        return None if self.id is None else parse_dotted_id(self.id)

    @property
    def width(self) -> float:
        return self.box[2] - self.box[0]

    @property
    def height(self) -> float:
        return self.box[3] - self.box[1]

    def describe(self) -> str:
        return f"entity #{self.doc_order} (page {self.page}, {self.content[:40]!r})"


@dataclass(frozen=True)
class Document:
    pages: tuple[PageMeta, ...]
    entities: tuple[Entity, ...]
    doc_id: str = ""

    @property
    def headings(self) -> list[Entity]:
        return [e for e in self.entities if e.heading]

    def with_entities(self, entities: Sequence[Entity]) -> "Document":
        return replace(self, entities=tuple(entities))


@dataclass(frozen=True)
class RelationStep:
    """``current`` and ``reference`` are heading indices; 0 is the virtual root."""

    current: int
    reference: int
    relation: Relation

    def __post_init__(self):
        if not 0 <= self.reference < self.current:
            raise StructureError(
                f"reference {self.reference} must precede current heading {self.current}")
        if self.relation is Relation.IDENTITY and self.reference < 1:
            raise StructureError("identity relation cannot point at the root")

    def as_tuple(self) -> tuple[int, int, str]:
        return (self.current, self.reference, self.relation.value)


@dataclass
class ToCNode:
    text: str = ""
    children: list["ToCNode"] = field(default_factory=list)
    entity_refs: list[int] = field(default_factory=list)

    def iter_preorder(self) -> Iterable["ToCNode"]:
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def size(self) -> int:
        return sum(1 for _ in self.iter_preorder())

    def depth(self) -> int:
        """Number of levels below this node (a leaf has depth 0)."""
        if not self.children:
            return 0
        return 1 + max(c.depth() for c in self.children)

    def to_dict(self) -> dict:
        return {"text": self.text, "children": [c.to_dict() for c in self.children]}

    @classmethod
    def from_dict(cls, data: dict) -> "ToCNode":
        try:
            return cls(text=str(data.get("text", "")),
                       children=[cls.from_dict(c) for c in data.get("children", [])])
        except (AttributeError, TypeError) as exc:
            raise DataError(f"bad toc node {data!r}") from exc

    def shape(self):
        """Nested (text, children) tuple, handy for equality checks."""
        return (self.text, tuple(c.shape() for c in self.children))

    def outline(self, indent: str = "  ") -> str:
        lines: list[str] = []

        def walk(node, level):
            for child in node.children:
                lines.append(f"{indent * level}{child.text}")
                walk(child, level + 1)

        walk(self, 0)
        return "\n".join(lines)


# A tree is represented by its root node; the root carries no text and no entities.
ToCTree = ToCNode


def order_entities(entities: Iterable[Entity], pages: Sequence[PageMeta],
                   doc_id: str = "") -> Document:
    """Sort entities page-major, then top-to-bottom, then left-to-right.

    Ties on ``(page, y0, x0)`` keep their input order. ``doc_order`` is
    reassigned ``0..N-1``.
    """
    entities = list(entities)
    pages = tuple(pages)
    for i, ent in enumerate(entities):
        if ent.page >= len(pages):
            raise DataError(f"entity {i} ({ent.content[:40]!r}) refers to missing page {ent.page}")
        page = pages[ent.page]
        x0, y0, x1, y1 = ent.box
        if x0 < 0 or y0 < 0 or x1 > page.width or y1 > page.height:
            raise DataError(
                f"entity {i} ({ent.content[:40]!r}) box {ent.box} lies outside "
                f"page {ent.page} ({page.width}x{page.height})")
    ranked = sorted(range(len(entities)),
                    key=lambda i: (entities[i].page, entities[i].box[1], entities[i].box[0], i))
    ordered = tuple(replace(entities[i], doc_order=k) for k, i in enumerate(ranked))
    return Document(pages=pages, entities=ordered, doc_id=doc_id)
