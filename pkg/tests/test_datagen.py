import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from domain_embed.datagen import (
    DatasetManifest,
    DomainSpec,
    IdxGlyphs,
    ProceduralGlyphs,
    RenderMode,
    TexturePatches,
    apply_mode,
    blend_abs_diff,
    build_corpus,
    default_config,
    domain_grid,
    glyph_source,
    load_domain,
    pad_to_canvas,
    render_domain,
    split_indices,
)
from domain_embed.exceptions import ConfigurationError, DimensionError, PreconditionError

from .oracles import blend_loop, mode_loop

images = arrays(np.uint8, (4, 4, 3))


def test_blend_identity_and_extremes():
    a = np.full((32, 32, 3), 77, np.uint8)
    assert not blend_abs_diff(a, a).any()
    white = np.full((32, 32, 3), 255, np.uint8)
    assert (blend_abs_diff(white, np.zeros_like(white)) == 255).all()


def test_blend_matches_loop_oracle(rng):
    fg = rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)
    bg = rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)
    assert np.array_equal(blend_abs_diff(fg, bg), blend_loop(fg, bg))


@given(images, images)
def test_blend_symmetric(a, b):
    assert np.array_equal(blend_abs_diff(a, b), blend_abs_diff(b, a))


@given(images)
def test_blend_zero_background_is_identity(a):
    assert np.array_equal(blend_abs_diff(a, np.zeros_like(a)), a)


def test_blend_shape_mismatch():
    with pytest.raises(DimensionError):
        blend_abs_diff(np.zeros((4, 4, 3), np.uint8), np.zeros((4, 5, 3), np.uint8))


def test_modes_match_oracle(rng):
    blended = rng.integers(0, 256, (6, 6, 3), dtype=np.uint8)
    glyph = rng.integers(0, 3, (6, 6)).astype(np.uint8) * 100
    for mode in ("BB", "WB", "GS", "Cr"):
        assert np.array_equal(apply_mode(blended, glyph, mode), mode_loop(blended, glyph, mode)), mode


def test_mode_examples():
    blended = np.zeros((2, 2, 3), np.uint8)
    blended[..., 0] = 255
    glyph = np.zeros((2, 2), np.uint8)
    assert np.array_equal(apply_mode(blended, glyph, "Cr"), blended)
    assert not apply_mode(blended, glyph, "BB").any()
    assert (apply_mode(blended, glyph, "WB") == 255).all()
    assert (apply_mode(blended, glyph, "GS") == 76).all()
    fg = np.full((2, 2, 3), 9, np.uint8)
    assert np.array_equal(apply_mode(blended, glyph, "Or", fg), fg)


@given(images, arrays(np.uint8, (4, 4)))
def test_masked_modes_agree_with_colour_on_mask(blended, glyph):
    mask = glyph > 0
    cr = apply_mode(blended, glyph, "Cr")
    for mode in ("BB", "WB"):
        assert np.array_equal(apply_mode(blended, glyph, mode)[mask], cr[mask])


def test_five_modes():
    assert [m.value for m in RenderMode] == ["BB", "WB", "GS", "Cr", "Or"]


def test_domain_spec_background_rule():
    DomainSpec(0, "fine", None, "Or")
    with pytest.raises(ConfigurationError):
        DomainSpec(0, "fine", None, "BB")
    with pytest.raises(ConfigurationError):
        DomainSpec(0, "fine", "texture-a", "Or")


@pytest.mark.parametrize("f", [1, 3, 6])
def test_grid_size(f):
    fgs = ["fine", "bold", "italic", "wide", "jagged", "compact"][:f]
    specs = domain_grid(fgs)
    assert len(specs) == 9 * f
    assert [s.domain_id for s in specs] == list(range(9 * f))
    assert sum(s.mode is RenderMode.Or for s in specs) == f


def test_glyph_canvas_and_range(rng):
    g = ProceduralGlyphs("fine")
    pixels, labels = g.sample(rng, 20, 10)
    assert pixels.shape == (20, 32, 32) and pixels.dtype == np.uint8
    assert labels.min() >= 0 and labels.max() < 10
    # 28 x 28 content zero-padded by two pixels
    assert not pixels[:, :2].any() and not pixels[:, -2:].any()
    assert pad_to_canvas(np.ones((28, 28), np.uint8)).shape == (32, 32)


def test_unknown_family():
    with pytest.raises(ConfigurationError):
        ProceduralGlyphs("no-such-family")


def test_patches_shape_and_determinism():
    p = TexturePatches("texture-b")
    a = p.sample(np.random.default_rng(3), 4)
    b = p.sample(np.random.default_rng(3), 4)
    assert a.shape == (4, 32, 32, 3) and a.dtype == np.uint8
    assert np.array_equal(a, b)


def test_render_domain_deterministic():
    spec = DomainSpec(4, "bold", "texture-a", "GS")
    a, la = render_domain(spec, "bold", "texture-a", 1, seed=9)
    b, lb = render_domain(spec, "bold", "texture-a", 1, seed=9)
    assert hashlib.sha256(a.tobytes()).hexdigest() == hashlib.sha256(b.tobytes()).hexdigest()
    assert np.array_equal(la, lb)
    c, _ = render_domain(spec, "bold", "texture-a", 1, seed=10)
    assert not np.array_equal(a, c)


def test_render_domain_errors():
    spec = DomainSpec(0, "fine", "texture-a", "Cr")
    with pytest.raises(PreconditionError):
        render_domain(spec, "fine", "texture-a", 0, 0)
    with pytest.raises(ConfigurationError):
        render_domain(spec, "fine", None, 3, 0)


def test_grayscale_domain_channels_equal():
    images, _ = render_domain(DomainSpec(0, "fine", "texture-a", "GS"), "fine", "texture-a", 5, 0)
    assert np.array_equal(images[..., 0], images[..., 1])
    assert np.array_equal(images[..., 1], images[..., 2])


def test_split_deterministic_and_disjoint():
    tr, ev = split_indices(3, 1, 500)
    tr2, ev2 = split_indices(3, 1, 500)
    assert np.array_equal(tr, tr2) and np.array_equal(ev, ev2)
    assert not set(tr) & set(ev)
    assert len(tr) + len(ev) == 500
    assert 0.12 < len(ev) / 500 < 0.28


def _write_idx(path, array, magic):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        for d in array.shape:
            fh.write(struct.pack(">I", d))
        fh.write(array.astype(np.uint8).tobytes())


def test_idx_adapter(tmp_path, rng):
    imgs = rng.integers(0, 256, (5, 28, 28), dtype=np.uint8)
    labels = np.array([0, 1, 2, 3, 4], np.uint8)
    _write_idx(tmp_path / "img.idx", imgs, 0x00000803)
    _write_idx(tmp_path / "lab.idx", labels, 0x00000801)
    src = glyph_source({"name": "real", "idx_images": str(tmp_path / "img.idx"), "idx_labels": str(tmp_path / "lab.idx")})
    assert isinstance(src, IdxGlyphs)
    pixels, lab = src.sample(np.random.default_rng(0), 3)
    assert pixels.shape == (3, 32, 32)
    for p, l in zip(pixels, lab):
        assert np.array_equal(p[2:30, 2:30], imgs[l])


SMALL = {"foregrounds": ["fine", "bold"], "backgrounds": ["texture-a"], "modes": ["BB", "Cr", "Or"],
         "counts": {"backgrounded": 12, "original": 6}, "write_png": True}


def test_build_corpus_and_roundtrip(tmp_path):
    m = build_corpus(SMALL, tmp_path / "c", seed=5)
    assert m.num_domains == 2 * (1 * 2 + 1)
    loaded = DatasetManifest.load(tmp_path / "c" / "manifest.json")
    assert loaded.to_dict() == m.to_dict()
    doc = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert set(doc["domains"][0]) == {"domain_id", "foreground_set", "background_source", "mode", "num_classes",
                                      "count", "shard_path"}
    images, labels = load_domain(loaded, 0)
    assert images.shape == (12, 32, 32, 3)
    assert len(list((tmp_path / "c" / loaded.entry(0).shard_path / "png").glob("*.png"))) == 12
    tr, _ = load_domain(loaded, 0, "train")
    ev, _ = load_domain(loaded, 0, "eval")
    assert len(tr) + len(ev) == 12


def test_build_corpus_byte_identical(tmp_path):
    build_corpus(SMALL, tmp_path / "a", seed=1)
    build_corpus(SMALL, tmp_path / "b", seed=1)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_manifest_validation():
    spec = DomainSpec(1, "fine", "texture-a", "BB")
    from domain_embed.datagen import DomainEntry

    with pytest.raises(PreconditionError):
        DatasetManifest([DomainEntry(spec, 5, "x")], seed=0)


def test_default_config_counts():
    assert default_config("full")["counts"] == {"backgrounded": 40000, "original": 20000}
    assert len(default_config("desk")["foregrounds"]) == 3
