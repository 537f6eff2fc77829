"""Conversions between relation steps, dotted heading ids and ToC trees."""
from __future__ import annotations

import logging
from typing import Optional, Sequence

from .core import (DataError, Entity, Relation, RelationStep, StructureError, ToCNode,
                   format_dotted_id, parse_dotted_id)

log = logging.getLogger(__name__)

MAX_DEPTH_CLASSES = 5


def tree_from_steps(steps: Sequence[RelationStep], texts: Sequence[str],
                    entity_refs: Optional[Sequence[int]] = None) -> ToCNode:
    """Build a ToC tree by replaying relation steps in order.

    ``texts[k]`` is the content of heading ``k + 1``. ``entity_refs`` maps the
    same positions to document-order indices (defaults to heading indices).
    """
    if len(steps) != len(texts):
        raise StructureError(f"{len(steps)} steps for {len(texts)} headings")
    if entity_refs is None:
        entity_refs = list(range(len(texts)))
    root = ToCNode()
    node_of: dict[int, ToCNode] = {0: root}
    parent_of: dict[int, ToCNode] = {}
    for k, step in enumerate(steps):
        cur = k + 1
        if step.current != cur:
            raise StructureError(f"step {k} is for heading {step.current}, expected {cur}")
        ref = step.reference
        if ref not in node_of:
            raise StructureError(f"heading {cur} references unknown heading {ref}")
        ref_node = node_of[ref]
        text = texts[k].strip()
        if step.relation is Relation.IDENTITY:
            if ref == 0:
                raise StructureError(f"heading {cur}: identity with the root")
            ref_node.text = f"{ref_node.text} {text}" if ref_node.text else text
            ref_node.entity_refs.append(entity_refs[k])
            node_of[cur] = ref_node
            continue
        node = ToCNode(text=text, entity_refs=[entity_refs[k]])
        if step.relation is Relation.PARENT:
            ref_node.children.append(node)
            parent_of[id(node)] = ref_node
        else:
            if ref == 0:
                raise StructureError(f"heading {cur}: sibling of the root")
            parent = parent_of[id(ref_node)]
            pos = next(i for i, c in enumerate(parent.children) if c is ref_node)
            parent.children.insert(pos + 1, node)
            parent_of[id(node)] = parent
        node_of[cur] = node
    return root


def _heading_paths(entities: Sequence[Entity]) -> list[tuple[Entity, tuple[int, ...]]]:
    out = []
    for ent in entities:
        if not ent.heading:
            continue
        if ent.id is None:
            raise DataError(f"{ent.describe()}: heading without id")
        out.append((ent, parse_dotted_id(ent.id)))
    return out


def steps_from_ids(entities: Sequence[Entity]) -> list[RelationStep]:
    """Derive gold relation steps from the dotted ids of heading entities.

    Consecutive headings with equal ids are fragments of one heading and are
    linked by IDENTITY to the preceding fragment. Otherwise the reference is
    the nearest earlier heading group that is the parent or the previous
    sibling; sibling references point at the first fragment of the group.
    """
    headings = _heading_paths(entities)
    steps: list[RelationStep] = []
    # (path, heading index of the group's first fragment), newest last
    groups: list[tuple[tuple[int, ...], int]] = []
    seen: set[tuple[int, ...]] = set()
    for k, (ent, path) in enumerate(headings):
        cur = k + 1
        if groups and groups[-1][0] == path:
            steps.append(RelationStep(cur, cur - 1, Relation.IDENTITY))
            continue
        if path in seen:
            raise DataError(f"{ent.describe()}: id {ent.id} repeats a non-adjacent heading")
        parent_path = path[:-1]
        found = None
        for gpath, gidx in reversed(groups):
            if gpath == parent_path:
                found = (Relation.PARENT, gidx, gpath)
                break
            if gpath[:-1] == parent_path and gpath[-1] < path[-1]:
                found = (Relation.SIBLING, gidx, gpath)
                break
        if found is None:
            if parent_path:
                raise DataError(f"{ent.describe()}: id {ent.id} has no parent or sibling before it")
            found = (Relation.PARENT, 0, ())
        relation, ref, gpath = found
        expected_last = 1 if relation is Relation.PARENT else gpath[-1] + 1
        if path[-1] != expected_last:
            raise DataError(
                f"{ent.describe()}: id {ent.id} skips numbering (expected last component "
                f"{expected_last})")
        steps.append(RelationStep(cur, ref, relation))
        groups.append((path, cur))
        seen.add(path)
    return steps


def ids_from_tree(root: ToCNode) -> list[tuple[ToCNode, str]]:
    """Every non-root node in preorder with its dotted path id."""
    out: list[tuple[ToCNode, str]] = []

    def walk(node, path):
        for i, child in enumerate(node.children, start=1):
            p = path + (i,)
            out.append((child, format_dotted_id(p)))
            walk(child, p)

    walk(root, ())
    return out


def depths_from_ids(entities: Sequence[Entity]) -> list[int]:
    return [len(path) for _, path in _heading_paths(entities)]


def tree_from_depths(depths: Sequence[int], texts: Sequence[str],
                     entity_refs: Optional[Sequence[int]] = None,
                     max_depth: int = MAX_DEPTH_CLASSES) -> ToCNode:
    """Depth-stack construction used by the depth-classifier baseline.

    A heading becomes a child of the nearest earlier heading with a smaller
    depth. Jumps of more than one level are clamped to previous depth + 1.
    """
    if len(depths) != len(texts):
        raise StructureError(f"{len(depths)} depths for {len(texts)} headings")
    if entity_refs is None:
        entity_refs = list(range(len(texts)))
    root = ToCNode()
    stack: list[tuple[int, ToCNode]] = [(0, root)]
    for k, (depth, fixed, text) in enumerate(zip(depths, repair_depths(depths, max_depth),
                                                 texts)):
        if fixed != depth:
            log.warning("heading %d: depth %d repaired to %d", k + 1, depth, fixed)
        while stack[-1][0] >= fixed:
            stack.pop()
        node = ToCNode(text=text.strip(), entity_refs=[entity_refs[k]])
        stack[-1][1].children.append(node)
        stack.append((fixed, node))
    return root


def repair_depths(depths: Sequence[int], max_depth: int = MAX_DEPTH_CLASSES) -> list[int]:
    out, prev = [], 0
    for d in depths:
        prev = min(max(int(d), 1), prev + 1, max_depth)
        out.append(prev)
    return out


def steps_from_depths(depths: Sequence[int], max_depth: int = MAX_DEPTH_CLASSES
                      ) -> list[RelationStep]:
    """Relation steps equivalent to :func:`tree_from_depths` (never IDENTITY)."""
    fixed = repair_depths(depths, max_depth)
    steps = []
    for k, d in enumerate(fixed):
        ref, rel = 0, Relation.PARENT
        for j in range(k - 1, -1, -1):
            if fixed[j] <= d:
                ref = j + 1
                rel = Relation.SIBLING if fixed[j] == d else Relation.PARENT
                break
        steps.append(RelationStep(k + 1, ref, rel))
    return steps


def repair_relation(current: int, reference: int, relation: Relation) -> RelationStep:
    """Turn a root-referencing SIBLING/IDENTITY into PARENT so the tree stays buildable."""
    if reference == 0 and relation is not Relation.PARENT:
        log.warning("heading %d: %s with the root coerced to parent", current, relation.value)
        relation = Relation.PARENT
    return RelationStep(current, reference, relation)


def steps_to_json(steps: Sequence[RelationStep]) -> list[dict]:
    return [{"current": s.current, "reference": s.reference, "relation": s.relation.value}
            for s in steps]


def steps_from_json(rows: Sequence[dict]) -> list[RelationStep]:
    try:
        return [RelationStep(int(r["current"]), int(r["reference"]), Relation(r["relation"]))
                for r in rows]
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"bad relation step record: {exc}") from exc


def serialize_headings(root: ToCNode, split_prob: float = 0.0, rng=None) -> list[Entity]:
    """Flatten a tree into heading entities carrying dotted ids.

    With ``split_prob > 0`` a multi-word heading is split at a random word
    boundary into two consecutive entities sharing one id, the way a long
    heading wraps onto a second line.
    """
    out: list[Entity] = []
    for node, dotted in ids_from_tree(root):
        words = node.text.split()
        pieces = [node.text]
        if split_prob > 0 and len(words) >= 2 and rng is not None and rng.random() < split_prob:
            cut = int(rng.integers(1, len(words)))
            pieces = [" ".join(words[:cut]), " ".join(words[cut:])]
        for piece in pieces:
            k = len(out)
            out.append(Entity(content=piece, page=0, box=(0.0, float(k), 1.0, float(k + 1)),
                              heading=True, id=dotted, doc_order=k))
    return out
