import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch

from tocextract.core import DataError, Document, Entity, PageMeta, Relation
from tocextract.data import (FeatureCache, HierDocRecord, SyntheticSpec, align_labels,
                             load_corpus, load_hierdoc, synthesize_corpus, synthesize_document,
                             write_hierdoc)
from tocextract.metrics import wer
from tocextract.treeops import steps_from_ids, tree_from_steps

from conftest import node, root

FIXTURE = Path(__file__).parent / "fixtures" / "minimal"


def line(content, y, heading_id=None, page=0):
    return Entity(content=content, page=page, box=(10.0, y, 200.0, y + 10.0),
                  heading=heading_id is not None, id=heading_id)


def write_doc(tmp_path, entities, toc, name="doc"):
    doc = Document(pages=(PageMeta(300, 400),),
                   entities=tuple(Entity(e.content, e.page, e.box, e.heading, e.id, k)
                                  for k, e in enumerate(entities)), doc_id=name)
    return write_hierdoc(HierDocRecord(doc, toc, []), tmp_path / name)


def test_minimal_fixture_loads():
    rec = load_hierdoc(FIXTURE)
    assert len(rec.document.entities) == 3
    assert [e.content for e in rec.document.entities][0] == "1 Overview"
    assert [s.as_tuple() for s in rec.steps] == [(1, 0, Relation.PARENT)]
    assert rec.document.pages[0].image is None


def test_second_child_id_validates(tmp_path):
    ents = [line("1 Motivation", 10, "1"), line("2 Science case", 30, "2"),
            line("2.1 Galaxies", 50, "2.1"), line("2.2 Stars", 70, "2.2"),
            line("body", 90)]
    toc = root(node("1 Motivation"), node("2 Science case", node("2.1 Galaxies"),
                                          node("2.2 Stars")))
    rec = load_hierdoc(write_doc(tmp_path, ents, toc))
    assert rec.steps[-1].as_tuple() == (4, 3, Relation.SIBLING)
    assert rec.toc.children[1].children[1].text == "2.2 Stars"


def test_corrupt_id_names_entity(tmp_path):
    path = write_doc(tmp_path, [line("1 Intro", 10, "1")], root(node("1 Intro")))
    bad = {"content": "2.1 Broken", "heading": True, "id": "2..1", "page": 0,
           "position": [10, 40, 100, 50]}
    with open(path / "entities.jsonl", "a") as fh:
        fh.write(json.dumps(bad) + "\n")
    with pytest.raises(DataError, match=r"entities\.jsonl:2.*2\.1 Broken.*2\.\.1"):
        load_hierdoc(path)


def test_ids_inconsistent_with_toc(tmp_path):
    ents = [line("1 A", 10, "1"), line("2 B", 30, "2")]
    path = write_doc(tmp_path, ents, root(node("1 A", node("1.1 B"))))
    with pytest.raises(DataError, match="not a node of the toc"):
        load_hierdoc(path)


def test_box_outside_page_is_rejected(tmp_path):
    path = write_doc(tmp_path, [line("1 A", 10, "1")], root(node("1 A")))
    rec = json.loads((path / "entities.jsonl").read_text())
    rec["position"] = [10, 390, 100, 420]
    (path / "entities.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(DataError, match="1 A"):
        load_hierdoc(path)


def test_bad_format_version(tmp_path):
    target = tmp_path / "doc"
    shutil.copytree(FIXTURE, target)
    meta = json.loads((target / "meta.json").read_text())
    meta["format_version"] = 99
    (target / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DataError, match="format_version"):
        load_hierdoc(target)


# -- alignment ------------------------------------------------------------------


def test_align_exact_match():
    toc = root(node("1 Introduction"))
    res = align_labels([line("1 Introduction", 10), line("some body", 30)], toc)
    assert [(e.heading, e.id) for e in res.entities] == [(True, "1"), (False, None)]
    assert not res.flagged


def test_align_split_heading_shares_id():
    toc = root(node("1 Intro"), node("2 Efficient Batch Computation"))
    ents = [line("1 Intro", 10), line("text", 30), line("2 Efficient Batch", 50),
            line("Computation", 62), line("more text", 80)]
    res = align_labels(ents, toc)
    assert [e.id for e in res.entities] == ["1", None, "2", "2", None]
    steps = steps_from_ids(res.entities)
    assert steps[-1].relation is Relation.IDENTITY


def test_align_rejects_decoy():
    heading, decoy = "3 Method and Results", "3 body text here"
    assert wer(heading.lower().split(), decoy.lower().split()) == pytest.approx(0.75)
    res = align_labels([line(decoy, 10)], root(node(heading)))
    assert not res.entities[0].heading
    assert res.unmatched == ["1"]


def test_align_recovers_unperturbed_synthetic_labels():
    for rec in synthesize_corpus(SyntheticSpec(seed=11, n_docs=8, decoy_prob=0.0)):
        stripped = [Entity(e.content, e.page, e.box, doc_order=e.doc_order)
                    for e in rec.document.entities]
        res = align_labels(stripped, rec.toc)
        assert [e.id for e in res.entities] == [e.id for e in rec.document.entities]


# -- synthesis ------------------------------------------------------------------


def tree_files(path):
    return {p.relative_to(path): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_synthesis_is_byte_identical(tmp_path):
    spec = SyntheticSpec(seed=5, n_docs=3)
    synthesize_corpus(spec, tmp_path / "a")
    synthesize_corpus(spec, tmp_path / "b")
    a, b = tree_files(tmp_path / "a"), tree_files(tmp_path / "b")
    assert a.keys() == b.keys() and a == b
    synthesize_corpus(SyntheticSpec(seed=6, n_docs=3), tmp_path / "c")
    assert tree_files(tmp_path / "c") != a


def test_no_split_means_no_identity_steps():
    spec = SyntheticSpec(seed=3, n_docs=60, split_prob=0.0)
    for rec in synthesize_corpus(spec):
        assert all(s.relation is not Relation.IDENTITY for s in rec.steps)


def test_flat_depth_range():
    for rec in synthesize_corpus(SyntheticSpec(seed=4, n_docs=10, depth_range=(1, 1))):
        assert rec.toc.depth() == 1
        assert all(s.reference == 0 or s.relation is not Relation.PARENT for s in rec.steps)


def test_invalid_spec():
    with pytest.raises(ValueError):
        SyntheticSpec(depth_range=(3, 2))
    with pytest.raises(ValueError):
        SyntheticSpec(depth_range=(1, 6))


def test_generated_documents_satisfy_core_invariants():
    for rec in synthesize_corpus(SyntheticSpec(seed=8, n_docs=10)):
        doc = rec.document
        keys = [(e.page, e.box[1], e.box[0]) for e in doc.entities]
        assert keys == sorted(keys)
        assert [e.doc_order for e in doc.entities] == list(range(len(doc.entities)))
        for e in doc.entities:
            page = doc.pages[e.page]
            assert 0 <= e.box[0] < e.box[2] <= page.width
            assert 0 <= e.box[1] < e.box[3] <= page.height
            assert e.heading == (e.id is not None)
        # heading glyphs are darker than body glyphs on the raster
        img = doc.pages[0].image
        assert img.shape == (416, 320) and img.min() == 0


def test_load_of_synthesis_round_trips(tmp_path):
    records = synthesize_corpus(SyntheticSpec(seed=9, n_docs=6), tmp_path)
    loaded = load_corpus(tmp_path)
    assert [r.doc_id for r in loaded] == sorted(r.doc_id for r in records)
    by_id = {r.doc_id: r for r in records}
    for rec in loaded:
        gen = by_id[rec.doc_id]
        assert rec.document.entities == gen.document.entities
        assert rec.steps == gen.steps
        rebuilt = tree_from_steps(rec.steps, [e.content for e in rec.document.headings])
        assert rebuilt.shape() == gen.toc.shape() == rec.toc.shape()
        for p, q in zip(rec.document.pages, gen.document.pages):
            assert np.array_equal(p.image, q.image)


def test_load_corpus_empty_dir(tmp_path):
    with pytest.raises(DataError):
        load_corpus(tmp_path)


# -- feature cache -----------------------------------------------------------------


def test_cache_round_trip_and_miss(tmp_path):
    cache = FeatureCache(tmp_path)
    x = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32)
    cache.put("doc-1", "fp-a", {"text": x})
    hit = cache.get("doc-1", "fp-a")
    assert hit is not None and hit["text"].dtype == np.float32
    assert np.array_equal(hit["text"], x)
    assert cache.get("doc-1", "fp-b") is None
    assert cache.get("doc-2", "fp-a") is None


def test_cache_hit_gives_same_features(tmp_path):
    from tocextract.model import ModelConfig, TocModel
    rec = synthesize_document(SyntheticSpec(seed=1), 0)
    model = TocModel(ModelConfig(d=16, n_buckets=128, text_hidden=16, classifier_hidden=8,
                                 decoder_hidden=8, attn_dim=8, n_heads=2, ff_dim=16)).eval()
    cache = FeatureCache(tmp_path)
    with torch.no_grad():
        direct = model.features(model.prepare(rec)).f
        model.prepare(rec, cache=cache)
        cached = model.features(model.prepare(rec, cache=cache)).f
    assert torch.equal(direct, cached)
