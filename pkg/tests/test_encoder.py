import numpy as np
import pytest
import torch

from tocextract.core import DataError, Document, Entity, PageMeta
from tocextract.data import FeatureCache
from tocextract.encoder import (Encoder, FusionVariant, GatedUnit, HashBagText, TextModule,
                                VisionModule, compute_layout_features, fuse_gated, fuse_variant,
                                layout_stats, tokenize)
from tocextract.model import ModelConfig, TocModel

from oracles import central_difference


def doc_of(boxes, width=100.0, height=200.0, pages=None):
    pages = pages or [0] * len(boxes)
    n_pages = max(pages) + 1
    ents = tuple(Entity(content=f"line {k}", page=p, box=b, doc_order=k)
                 for k, (b, p) in enumerate(zip(boxes, pages)))
    return Document(pages=tuple(PageMeta(width, height) for _ in range(n_pages)), entities=ents)


# -- layout -------------------------------------------------------------------


def test_layout_worked_example():
    # mean width 50 and mean height 10; the middle box has prev bottom 12, next top 36
    doc = doc_of([(10, 2, 60, 12), (10, 20, 60, 30), (10, 36, 60, 46)])
    stats = layout_stats(doc)
    assert (stats.mean_width, stats.mean_height) == (50.0, 10.0)
    f = compute_layout_features(doc)
    np.testing.assert_allclose(f[1], [0.1, 0.1, 0.6, 0.15, 1.0, 1.0, 0.8, 0.6], atol=1e-12)


def test_full_page_box():
    f = compute_layout_features(doc_of([(0, 0, 100, 200)]))
    np.testing.assert_allclose(f[0, :4], [0, 0, 1, 1])
    # sentinels: page top and page bottom
    assert f[0, 6] == 0 and f[0, 7] == 0


def test_stacked_boxes_gap_symmetry():
    f = compute_layout_features(doc_of([(10, 10, 50, 20), (10, 35, 50, 45)]))
    assert f[0, 7] == f[1, 6] == pytest.approx(1.5)


def test_gaps_stay_within_page():
    f = compute_layout_features(doc_of([(10, 10, 50, 20), (10, 5, 50, 15)], pages=[0, 1]))
    assert f[0, 7] == pytest.approx((200 - 20) / 10)
    assert f[1, 6] == pytest.approx(5 / 10)


def test_layout_horizontal_translation_covariance(rng):
    boxes = []
    y = 5.0
    for _ in range(6):
        x0 = float(rng.uniform(0, 40))
        h = float(rng.uniform(5, 15))
        boxes.append((x0, y, x0 + float(rng.uniform(10, 50)), y + h))
        y += h + float(rng.uniform(1, 10))
    base = compute_layout_features(doc_of(boxes))
    shifted = [(x0 + 37, y0, x1 + 37, y1) for x0, y0, x1, y1 in boxes]
    moved = compute_layout_features(doc_of(shifted, width=137.0))
    np.testing.assert_allclose(base[:, 4:], moved[:, 4:], atol=1e-12)
    assert np.all((base[:, :4] >= 0) & (base[:, :4] <= 1))


def test_layout_rejects_empty_document():
    with pytest.raises(DataError):
        compute_layout_features(Document(pages=(PageMeta(10, 10),), entities=()))


# -- text ---------------------------------------------------------------------


def test_tokenizer_ignores_trailing_space():
    assert tokenize("1 Introduction") == tokenize("1 Introduction ")
    emb = HashBagText()
    np.testing.assert_array_equal(emb.embed("1 Introduction"), emb.embed("1 Introduction "))


def test_tokenizer_shape_features():
    toks = tokenize("2.1 Related Work")
    assert "shape:9.9" in toks and "first:9.9" in toks and "related" in toks


def test_tokenizer_digit_pieces():
    assert [t for t in tokenize("12.3 Results") if t.startswith("piece:")] == ["piece:12", "piece:3"]
    assert not any(t.startswith("piece:") for t in tokenize("2024 Results"))


def test_hash_bag_deterministic_and_normalized():
    a, b = HashBagText(seed=3), HashBagText(seed=3)
    x = a(["3.2 Results", "the body text here", ""])
    np.testing.assert_array_equal(x, b(["3.2 Results", "the body text here", ""]))
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, rtol=1e-6)
    assert not np.array_equal(x, HashBagText(seed=4)(["3.2 Results", "the body text here", ""]))


def test_text_provider_error_names_entity():
    with pytest.raises(DataError, match="entity 1"):
        HashBagText()(["ok", None])


def test_same_string_same_text_feature():
    emb = HashBagText(64)
    mod = TextModule(64, d=16, hidden=32)
    bags = torch.from_numpy(emb(["4 Conclusion", "4 Conclusion"]))
    f_s = mod(bags)
    assert torch.equal(f_s[0], f_s[1])


def test_zero_projection_weights_leave_bias_path():
    mod = TextModule(64, d=16, hidden=32)
    with torch.no_grad():
        mod.fc1.weight.zero_()
        mod.fc2.weight.zero_()
    f_s = mod(torch.from_numpy(HashBagText(64)(["a b", "c d e", "f"])))
    assert torch.equal(f_s[0], f_s[1]) and torch.equal(f_s[1], f_s[2])
    assert torch.allclose(f_s[0], mod.fc2.bias)


# -- gated unit ---------------------------------------------------------------


def test_gate_zero_weights_average():
    d = 6
    f_v, f_s, f_p = torch.randn(d), torch.randn(d), torch.randn(8)
    unit = GatedUnit(d)
    with torch.no_grad():
        unit.W_z.zero_()
        unit.E_z.zero_()
    assert torch.allclose(unit.gate(f_v, f_s, f_p), torch.full((d,), 0.5))
    assert torch.allclose(unit(f_v, f_s, f_p), 0.5 * f_v + 0.5 * f_s)


def test_gate_saturation_selects_vision():
    d = 4
    f_v = torch.ones(d, dtype=torch.float64)
    f_s, f_p = -torch.ones(d, dtype=torch.float64), torch.zeros(8, dtype=torch.float64)
    W_z = torch.zeros(d, 2 * d + 8, dtype=torch.float64)
    W_z[:, :d] = 50.0
    f = fuse_gated(f_v, f_s, f_p, W_z, torch.zeros(d, 8, dtype=torch.float64))
    assert torch.allclose(f, f_v, atol=1e-12)


def test_gate_matches_hand_computation(rng):
    d = 4
    f_v, f_s, f_p = rng.normal(size=d), rng.normal(size=d), rng.normal(size=8)
    W_z, E_z = rng.normal(size=(d, 2 * d + 8)), rng.normal(size=(d, 8))
    z = np.empty(d)
    for i in range(d):
        acc = sum(W_z[i, j] * x for j, x in enumerate(np.concatenate([f_v, f_s, f_p])))
        z[i] = 1.0 / (1.0 + np.exp(-acc))
    expected = [z[i] * f_v[i] + (1 - z[i]) * f_s[i] + sum(E_z[i, j] * f_p[j] for j in range(8))
                for i in range(d)]
    t = lambda a: torch.from_numpy(a)
    got = fuse_gated(t(f_v), t(f_s), t(f_p), t(W_z), t(E_z)).numpy()
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_gate_is_bounded():
    # float32 sigmoid rounds to exactly 1 beyond ~17, so check in double
    unit = GatedUnit(16).double()
    x = lambda k: torch.randn(50, k, dtype=torch.float64) * 3
    z = unit.gate(x(16), x(16), x(8))
    assert torch.all(z > 0) and torch.all(z < 1)


def test_gate_shape_mismatch():
    with pytest.raises(ValueError):
        fuse_gated(torch.zeros(4), torch.zeros(5), torch.zeros(8), torch.zeros(4, 16),
                   torch.zeros(4, 8))
    with pytest.raises(ValueError):
        fuse_gated(torch.zeros(4), torch.zeros(4), torch.zeros(8), torch.zeros(4, 15),
                   torch.zeros(4, 8))


def gated_gradient_errors(rng, d=8):
    """Relative errors of autograd vs central differences for every gated-unit input."""
    arrays = {"f_v": rng.normal(size=d), "f_s": rng.normal(size=d), "f_p": rng.normal(size=8),
              "W_z": rng.normal(size=(d, 2 * d + 8)) * 0.3, "E_z": rng.normal(size=(d, 8))}
    weights = rng.normal(size=d)

    def scalar(values):
        f = fuse_gated(*(torch.from_numpy(values[k]) for k in arrays))
        return float(f @ torch.from_numpy(weights))

    tensors = {k: torch.tensor(v, requires_grad=True) for k, v in arrays.items()}
    (fuse_gated(*tensors.values()) @ torch.from_numpy(weights)).backward()
    errors = {}
    for name in arrays:
        def f(x, name=name):
            return scalar({**arrays, name: x})
        numeric = central_difference(f, arrays[name].copy())
        analytic = tensors[name].grad.numpy()
        errors[name] = np.abs(numeric - analytic).max() / max(np.abs(numeric).max(), 1e-12)
    return errors


def test_gate_gradients_match_finite_differences(rng):
    errors = gated_gradient_errors(rng)
    assert max(errors.values()) < 1e-4, errors


# -- fusion variants ----------------------------------------------------------


def test_add_identity():
    d = 5
    mod = FusionVariant("add", d)
    with torch.no_grad():
        mod.layout.weight.zero_()
        mod.layout.bias.zero_()
    f_v = torch.randn(d)
    assert torch.equal(fuse_variant("add", f_v, torch.zeros(d), torch.randn(8), mod), f_v)


def test_dot_with_unit_vision():
    d = 5
    mod = FusionVariant("dot", d)
    f_s, f_p = torch.randn(d), torch.randn(8)
    out = fuse_variant("dot", torch.ones(d), f_s, f_p, mod)
    assert torch.allclose(out, f_s * mod.layout(f_p))


def test_concat_projects_to_d():
    assert FusionVariant("concat", 7)(torch.randn(3, 7), torch.randn(3, 7),
                                      torch.randn(3, 8)).shape == (3, 7)


def test_unknown_strategy():
    with pytest.raises(ValueError):
        FusionVariant("max", 4)
    with pytest.raises(ValueError):
        Encoder(d=8, n_buckets=16, text_hidden=8, fusion="max")
    with pytest.raises(ValueError):
        Encoder(d=8, n_buckets=16, text_hidden=8, mask=("audio",))


# -- vision -------------------------------------------------------------------


def test_zero_raster_identical_boxes_identical_features():
    vis = VisionModule(d=16)
    img = torch.zeros(1, 64, 64)
    boxes = torch.tensor([[8.0, 8.0, 40.0, 16.0], [8.0, 8.0, 40.0, 16.0]])
    f_v = vis([img], boxes, torch.tensor([0, 0]))
    assert torch.equal(f_v[0], f_v[1])
    assert torch.isfinite(f_v).all()


def test_vision_translation_invariance_on_interior_crops():
    vis = VisionModule(d=16).double()
    img = torch.zeros(1, 96, 128, dtype=torch.float64)
    patch = torch.rand(8, 24, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    img[0, 24:32, 16:40] = patch
    img[0, 56:64, 80:104] = patch   # shifted by (32, 64): multiples of the stride-8 grid
    boxes = torch.tensor([[16.0, 24.0, 40.0, 32.0], [80.0, 56.0, 104.0, 64.0]],
                         dtype=torch.float64)
    f_v = vis([img], boxes, torch.tensor([0, 0]))
    assert torch.allclose(f_v[0], f_v[1], atol=1e-12)


def test_cached_vision_is_bit_identical(tmp_path):
    from tocextract.data import SyntheticSpec, synthesize_document
    record = synthesize_document(SyntheticSpec(seed=2), 0)
    model = TocModel(ModelConfig(d=16, n_buckets=64, text_hidden=16, classifier_hidden=8,
                                 decoder_hidden=8, attn_dim=8, n_heads=2, ff_dim=16))
    model.encoder.vision.freeze()
    model.eval()
    direct = model.prepare(record)
    cache = FeatureCache(tmp_path)
    first = model.prepare(record, cache=cache)
    second = model.prepare(record, cache=cache)
    with torch.no_grad():
        f_direct = model.features(direct).f
        f_first = model.features(first).f
        f_second = model.features(second).f
    pooled = model.encoder.vision.pooled(direct.images, direct.boxes, direct.pages)
    assert torch.equal(first.vision_pooled, pooled.detach())
    assert torch.equal(second.vision_pooled, first.vision_pooled)
    assert torch.equal(f_first, f_second)
    assert torch.allclose(f_direct, f_first, atol=1e-6)


# -- encoder masks ------------------------------------------------------------


@pytest.mark.parametrize("mask", [(), ("vision",), ("text",), ("layout",),
                                  ("vision", "text", "layout")])
def test_masked_modalities_are_zero(mask):
    enc = Encoder(d=8, n_buckets=16, text_hidden=8, mask=mask)
    img = torch.rand(1, 32, 32)
    boxes = torch.tensor([[2.0, 2.0, 20.0, 8.0], [2.0, 12.0, 28.0, 20.0]])
    feats = enc([img], boxes, torch.tensor([0, 0]), torch.rand(2, 16), torch.rand(2, 8))
    for name, t in (("vision", feats.f_v), ("text", feats.f_s), ("layout", feats.f_p)):
        assert bool((t == 0).all()) == (name in mask)
    assert torch.isfinite(feats.f).all() and feats.f.shape == (2, 8)
