"""Table-of-contents extraction from paged documents.

Entities (text lines with boxes) are encoded from vision, text and layout,
headings are detected, and a tree decoder attaches every heading to an
earlier one as its child, next sibling, or continuation.
"""
from .core import (DataError, Document, Entity, PageMeta, Relation, RelationStep, StructureError,
                   ToCNode, ToCTree, order_entities)

__version__ = "0.1.0"

__all__ = ["DataError", "Document", "Entity", "PageMeta", "Relation", "RelationStep",
           "StructureError", "ToCNode", "ToCTree", "order_entities"]
