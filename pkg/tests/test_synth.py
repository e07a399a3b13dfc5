import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hifinet import synth
from hifinet.synth import DatasetConfig, METHODS, apply_forgery, apply_postprocess, generate_real, make_sample
from hifinet.taxonomy import REAL, builtin


def test_real_deterministic_and_unmasked():
    a, b = generate_real(42), generate_real(42)
    assert np.array_equal(a.image, b.image)
    assert not a.mask.any() and a.leaf == REAL
    assert not np.array_equal(a.image, generate_real(43).image)


def test_real_histogram_non_degenerate():
    stds = [generate_real(s).image.std() for s in range(100)]
    assert min(stds) > 0.01


def test_real_values_in_range_and_min_size():
    img = generate_real(0, 16, 24).image
    assert img.shape == (3, 16, 24) and img.min() >= 0 and img.max() <= 1
    with pytest.raises(ValueError):
        generate_real(0, 8, 32)


@pytest.mark.parametrize("method", METHODS)
def test_forgery_mask_invariants(method):
    for seed in range(10):
        s = make_sample(method, seed)
        area = s.mask.mean()
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
        assert s.image.min() >= 0 and s.image.max() <= 1
        if method in synth.FULL_METHODS:
            assert area == 1.0
        else:
            lo, hi = synth.area_bounds(method)
            assert 0 < area < 1 and lo <= area <= hi


def test_splice_mask_is_rectangle_indicator():
    for seed in range(5):
        s = make_sample("splice", seed)
        r = s.provenance["region"]
        ref = np.zeros((32, 32))
        ref[r[0]:r[0] + r[2], r[1]:r[1] + r[3]] = 1
        assert np.array_equal(s.mask[0], ref)


def test_partial_forgery_keeps_outside_pixels():
    base = generate_real(7)
    for method in synth.PARTIAL_METHODS:
        donor = generate_real(8) if method == "splice" else None
        s = apply_forgery(base, method, donor, seed=3)
        outside = s.mask[0] == 0
        assert np.array_equal(s.image[:, outside], base.image[:, outside])


@pytest.mark.parametrize("method", METHODS)
def test_mean_area_near_target(method):
    areas = [make_sample(method, synth.derive_seed(99, i)).mask.mean() for i in range(500)]
    assert abs(np.mean(areas) - synth.AREA_TARGETS[method]) <= 0.05


def test_forgery_errors():
    base = generate_real(0)
    with pytest.raises(ValueError, match="donor"):
        apply_forgery(base, "splice", None)
    with pytest.raises(ValueError):
        apply_forgery(base, "nope")
    forged = apply_forgery(base, "inpaint", seed=1)
    with pytest.raises(ValueError):
        apply_forgery(forged, "inpaint")
    with pytest.raises(ValueError):
        apply_forgery(base, "splice", generate_real(1, 16, 16))


# --------------------------------------------------------------------------
# post-processing


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(list(METHODS) + [REAL]))
def test_identity_transforms(seed, leaf):
    s = make_sample(leaf, seed)
    for t, p in (("gaussian_noise", 0.0), ("resize", 1.0), ("gaussian_blur", 1.0)):
        out = apply_postprocess(s, t, p)
        assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask) and out.leaf == s.leaf


def test_blur_keeps_mask_and_label():
    s = make_sample("copy_move", 5)
    out = apply_postprocess(s, "gaussian_blur", 5)
    assert np.array_equal(out.mask, s.mask) and out.leaf == s.leaf
    assert not np.array_equal(out.image, s.image)


def test_blur_matches_separable_oracle():
    from scipy import ndimage
    s = generate_real(3)
    out = apply_postprocess(s, "gaussian_blur", 3).image
    g = synth._blur_kernel(3)
    ref = ndimage.convolve(s.image, (g[:, None] * g[None, :])[None], mode="reflect")
    np.testing.assert_allclose(out, np.clip(ref, 0, 1), atol=1e-12)


def test_resize_geometry():
    s = make_sample("splice", 2)
    out = apply_postprocess(s, "resize", 0.5)
    assert out.image.shape == (3, 16, 16) and out.mask.shape == (1, 16, 16)
    assert set(np.unique(out.mask)) <= {0.0, 1.0}
    full = apply_postprocess(make_sample("synth_texture_a", 2), "resize", 0.5)
    assert full.mask.all()


def test_noise_is_seeded():
    s = generate_real(1)
    a = apply_postprocess(s, "gaussian_noise", 0.05, seed=3)
    b = apply_postprocess(s, "gaussian_noise", 0.05, seed=3)
    assert np.array_equal(a.image, b.image) and not np.array_equal(a.image, s.image)


def test_postprocess_errors():
    s = generate_real(0)
    for t, p in (("resize", 0.0), ("gaussian_blur", 4), ("gaussian_blur", 2.5), ("gaussian_noise", -1.0), ("jpeg", 1)):
        with pytest.raises(ValueError):
            apply_postprocess(s, t, p)


def test_parse_transform():
    assert synth.parse_transform("blur:5") == ("gaussian_blur", 5.0)
    assert synth.parse_transform("noise:0") == ("gaussian_noise", 0.0)
    assert synth.parse_transform("resize:0.5") == ("resize", 0.5)
    for bad in ("blur", "jpeg:5", ""):
        with pytest.raises(ValueError):
            synth.parse_transform(bad)


# --------------------------------------------------------------------------
# files and datasets


def test_image_roundtrip_is_quantized(tmp_path):
    s = generate_real(11)
    synth.write_image(tmp_path / "a.ppm", s.image)
    back = synth.read_image(tmp_path / "a.ppm")
    assert np.abs(back - s.image).max() <= 0.5 / 255 + 1e-12
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6")
    m = make_sample("inpaint", 1).mask
    synth.write_mask(tmp_path / "m.pgm", m)
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5")
    assert np.array_equal(synth.read_mask(tmp_path / "m.pgm"), m)


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_build_dataset_deterministic_and_split(tmp_path):
    tree = builtin("mini")
    cfg = DatasetConfig(master_seed=5, per_leaf=10, real_count=20)
    recs = synth.build_dataset(cfg, tmp_path / "a", tree)
    synth.build_dataset(cfg, tmp_path / "b", tree)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    assert len(recs) == 6 * 10 + 20
    for leaf in tree.leaves:
        splits = [r.split for r in recs if r.leaf == leaf]
        n = len(splits)
        assert splits.count("train") == round(0.7 * n) and splits.count("val") == round(0.1 * n)
    loaded = synth.load_manifest(tmp_path / "a" / synth.MANIFEST, tree)
    assert loaded == recs
    imgs, masks = synth.load_arrays(tmp_path / "a", loaded[:3])
    assert imgs.shape == (3, 3, 32, 32) and masks.shape == (3, 1, 32, 32)


def test_default_config_count():
    cfg = DatasetConfig(master_seed=0)
    assert len(builtin("mini").forgery_leaves()) * cfg.per_leaf + cfg.real_count == 4800


def test_empty_dataset(tmp_path):
    recs = synth.build_dataset(DatasetConfig(0, per_leaf=0, real_count=0), tmp_path, builtin("mini"))
    assert recs == [] and (tmp_path / synth.MANIFEST).read_text() == ""


def test_build_dataset_rejects_unmapped_leaf(tmp_path):
    with pytest.raises(ValueError, match="ddpm|generator"):
        synth.build_dataset(DatasetConfig(0, per_leaf=1, real_count=1), tmp_path, builtin("full"))


def test_manifest_validation(tmp_path):
    tree = builtin("mini")
    synth.build_dataset(DatasetConfig(1, per_leaf=1, real_count=2), tmp_path, tree)
    man = tmp_path / synth.MANIFEST
    lines = man.read_text().splitlines()
    man.write_text("\n".join(lines + [lines[0]]) + "\n")
    with pytest.raises(ValueError, match="twice"):
        synth.load_manifest(man, tree)
    man.write_text(lines[0].replace("\ttrain", "\tholdout") + "\n")
    with pytest.raises(ValueError, match="split"):
        synth.load_manifest(man, tree)
    man.write_text(lines[0].replace("real", "ddpm") + "\n")
    with pytest.raises(ValueError):
        synth.load_manifest(man, tree)
    (tmp_path / lines[1].split("\t")[0]).unlink()
    man.write_text(lines[1] + "\n")
    with pytest.raises(FileNotFoundError):
        synth.load_manifest(man, tree)
