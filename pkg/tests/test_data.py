import numpy as np
import pytest
from scipy.ndimage import binary_dilation

from udet.data.augment import (ALL_OPS, GEOMETRIC_OPS, AugmentSpec, augment, elastic_deform, salt_pepper,
                               with_ops)
from udet.data.dataset import (Sample, diameter_from_mask, load_dataset, normalize_minmax, read_manifest,
                               save_sample, write_manifest)
from udet.data.mhd import MhdError, MhdVolume, read_mhd, write_mhd
from udet.data.phantom import NoduleSpec, ellipse_mask, generate_phantom
from udet.data.split import split_dataset


# ---------------------------------------------------------------- mhd

def test_mhd_uchar_round_trip(tmp_path):
    data = np.arange(16, dtype=np.uint8).reshape(1, 4, 4)
    write_mhd(MhdVolume(data, (0.5, 0.75, 2.0)), tmp_path / "m.mhd")
    back = read_mhd(tmp_path / "m.mhd")
    assert back.data.tobytes() == data.tobytes()
    assert back.data.dtype == np.uint8
    assert back.header["DimSize"] == "4 4 1"
    assert back.spacing == (0.5, 0.75, 2.0)


def test_mhd_short_round_trip(tmp_path, rng):
    data = rng.choice(np.array([-1000, 0, 400], np.int16), size=(3, 5, 7))
    write_mhd(MhdVolume(data, (0.7, 0.7, 1.25)), tmp_path / "v.mhd")
    back = read_mhd(tmp_path / "v.mhd")
    assert back.data.shape == (3, 5, 7)
    assert back.data.tobytes() == data.astype("<i2").tobytes()
    assert back.dims == (7, 5, 3)
    # the rewritten header is identical too
    write_mhd(back, tmp_path / "w.mhd")
    assert (tmp_path / "w.mhd").read_text().replace("w.raw", "v.raw") == (tmp_path / "v.mhd").read_text()


def test_mhd_size_mismatch(tmp_path):
    (tmp_path / "a.raw").write_bytes(bytes(50))
    (tmp_path / "a.mhd").write_text(
        "ObjectType = Image\nNDims = 2\nDimSize = 10 10\nElementType = MET_UCHAR\nElementDataFile = a.raw\n")
    with pytest.raises(MhdError, match="bytes"):
        read_mhd(tmp_path / "a.mhd")


def test_mhd_big_endian_and_2d(tmp_path):
    data = np.array([[1, -2], [300, -400]], dtype=">i2")
    (tmp_path / "b.raw").write_bytes(data.tobytes())
    (tmp_path / "b.mhd").write_text(
        "ObjectType = Image\nNDims = 2\nBinaryDataByteOrderMSB = True\nDimSize = 2 2\n"
        "ElementSpacing = 0.5 0.5\nElementType = MET_SHORT\nElementDataFile = b.raw\n")
    vol = read_mhd(tmp_path / "b.mhd")
    assert vol.data[0].tolist() == [[1, -2], [300, -400]]
    assert vol.spacing == (0.5, 0.5, 1.0)


@pytest.mark.parametrize("header,match", [
    ("ObjectType = Image\nNDims = 2\n", "missing"),
    ("ObjectType = Image\nNDims = 2\nDimSize = 2 2\nElementType = MET_FLOAT\nElementDataFile = x.raw\n",
     "ElementType"),
    ("no equals sign here\n", "malformed"),
])
def test_mhd_header_errors(tmp_path, header, match):
    (tmp_path / "h.mhd").write_text(header)
    with pytest.raises(MhdError, match=match):
        read_mhd(tmp_path / "h.mhd")


def test_mhd_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(MhdError):
        write_mhd(MhdVolume(np.zeros((2, 2), np.float32)), tmp_path / "f.mhd")


# ---------------------------------------------------------------- phantom and dataset

def test_phantom_without_nodules_has_empty_mask():
    s = generate_phantom(np.random.default_rng(0), 64, NoduleSpec(count=0))
    assert s.mask.sum() == 0
    assert s.meta["diameter_mm"] is None


def test_radius_five_disc_pixel_count():
    spec = NoduleSpec(count=1, radius_range=(5, 5), centers=[(64, 64)])
    s = generate_phantom(np.random.default_rng(0), 128, spec)
    assert 69 <= s.mask.sum() <= 89
    assert s.mask[64, 64] == 1


def test_phantom_is_deterministic():
    a = generate_phantom(np.random.default_rng([3, 1]), 96, NoduleSpec(count=3))
    b = generate_phantom(np.random.default_rng([3, 1]), 96, NoduleSpec(count=3))
    assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()
    assert a.image.min() >= 0 and a.image.max() <= 1
    assert a.mask.sum() > 0


def test_attached_nodules_touch_the_lung_wall():
    lungs = ellipse_mask(128, 64, 0.3 * 128, 0.32 * 128, 0.16 * 128) | \
        ellipse_mask(128, 64, 0.7 * 128, 0.32 * 128, 0.16 * 128)
    for seed in range(10):
        spec = NoduleSpec(count=1, attach_to_wall=True, aspect_range=(1.0, 1.0))
        s = generate_phantom(np.random.default_rng(seed), 128, spec)
        assert s.meta["attached"] is True
        # tangent from inside: two pixels of growth cross the wall
        assert np.any(binary_dilation(s.mask, iterations=2) & ~lungs)


def test_phantom_rejects_oversized_nodules():
    with pytest.raises(ValueError):
        generate_phantom(np.random.default_rng(0), 64, NoduleSpec(radius_range=(30, 40)))


def test_dataset_round_trip(tmp_path):
    spec = NoduleSpec(count=1, radius_range=(3, 6))
    samples = [generate_phantom(np.random.default_rng(i), 64, spec, f"p{i}") for i in range(3)]
    for s in samples:
        save_sample(s, tmp_path)
    write_manifest(tmp_path, samples)
    rows = read_manifest(tmp_path)
    assert [r.id for r in rows] == ["p0", "p1", "p2"]
    loaded = load_dataset(tmp_path)
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.mask, b.mask)
        # the int16 HU encoding quantizes intensities to 1/1400 before min-max rescaling
        np.testing.assert_allclose(b.image, normalize_minmax(np.round(a.image * 1400) / 1400), atol=1e-12)
        # phantoms are already min-max scaled, so the model sees the same input after a reload
        assert a.image.min() == 0 and a.image.max() == 1
        assert np.abs(b.image - a.image).max() <= 0.5 / 1400 + 1e-12
        assert b.meta["attached"] is False


def test_sample_validates_shapes():
    with pytest.raises(ValueError):
        Sample(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        Sample(np.full((2, 2), np.nan), np.zeros((2, 2)))


def test_diameter_from_disc():
    m = ellipse_mask(128, 64, 64, 10, 10)
    assert diameter_from_mask(m, 1.0) == pytest.approx(20, rel=0.02)


# ---------------------------------------------------------------- augmentation

@pytest.fixture(scope="module")
def disc_sample():
    return generate_phantom(np.random.default_rng(7), 128,
                            NoduleSpec(count=1, radius_range=(10, 10), centers=[(50, 40)]), "disc")


def test_disabled_spec_is_identity(disc_sample):
    out = augment(disc_sample, AugmentSpec.none(), np.random.default_rng(0))
    assert np.array_equal(out.image, disc_sample.image) and np.array_equal(out.mask, disc_sample.mask)


def test_flip_is_an_involution(disc_sample):
    spec = with_ops(AugmentSpec(), "flip_h")
    once = augment(disc_sample, spec, np.random.default_rng(0), force=True)
    twice = augment(once, spec, np.random.default_rng(1), force=True)
    assert not np.array_equal(once.mask, disc_sample.mask)
    assert np.array_equal(twice.image, disc_sample.image) and np.array_equal(twice.mask, disc_sample.mask)


def test_rotating_a_disc_keeps_its_area(disc_sample):
    spec = with_ops(AugmentSpec(), "rotate", rotate=(90.0, 90.0))
    out = augment(disc_sample, spec, np.random.default_rng(0), force=True)
    before, after = disc_sample.mask.sum(), out.mask.sum()
    assert abs(int(after) - int(before)) <= 0.02 * before
    assert not np.array_equal(out.mask, disc_sample.mask)


def test_elastic_examples(disc_sample):
    img, mask = elastic_deform(disc_sample.image, disc_sample.mask, 0.0, 4.0, np.random.default_rng(0))
    assert np.array_equal(img, disc_sample.image) and np.array_equal(mask, disc_sample.mask)
    n0 = int(disc_sample.mask.sum())
    change = []
    for seed in range(20):
        _, m = elastic_deform(disc_sample.image, disc_sample.mask, 30.0, 4.0, np.random.default_rng(seed))
        assert set(np.unique(m)) <= {0, 1}
        change.append(int(m.sum()) / n0 - 1)
    # single draws swing by about 12% (sd); the area is preserved on average
    assert abs(np.mean(change)) < 0.1
    with pytest.raises(ValueError):
        elastic_deform(disc_sample.image, disc_sample.mask, 1.0, 0.0, np.random.default_rng(0))


def test_salt_pepper_density_and_range(rng):
    img = np.full((1000, 1000), 0.5)
    assert np.array_equal(salt_pepper(img, 0.0, rng), img)
    out = salt_pepper(img, 1e-2, rng)
    assert 0.009 <= np.mean(out != 0.5) <= 0.011
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        salt_pepper(img, 0.6, rng)


def _random_spec(rng, ops=ALL_OPS):
    chosen = [op for op in ops if rng.random() < 0.6]
    lo = rng.uniform(-40, 0)
    return AugmentSpec(
        enabled=frozenset(chosen),
        probability=float(rng.uniform(0, 1)),
        shift=float(rng.uniform(0, 0.3)),
        rotate=(lo, lo + rng.uniform(0, 80)),
        zoom=(0.8, 0.8 + rng.uniform(0, 0.5)),
        shear=(-rng.uniform(0, 20), rng.uniform(0, 20)),
        elastic_alpha=float(rng.uniform(0, 40)),
        elastic_sigma=float(rng.uniform(2, 6)),
        salt_pepper=(0.0, float(rng.uniform(0, 0.05))),
    )


def test_augment_preserves_shape_binarity_finiteness(rng):
    base = generate_phantom(np.random.default_rng(0), 64, NoduleSpec(count=2, radius_range=(3, 6)))
    for k in range(200):
        out = augment(base, _random_spec(rng), np.random.default_rng(k))
        assert out.image.shape == base.image.shape and out.mask.shape == base.mask.shape
        assert set(np.unique(out.mask)) <= {0, 1}
        assert np.all(np.isfinite(out.image))
        assert out.mask.dtype == base.mask.dtype


def test_mask_as_image_tracks_geometry(rng):
    base = generate_phantom(np.random.default_rng(1), 64, NoduleSpec(count=2, radius_range=(3, 6)))
    probe = Sample(base.mask.astype(np.float64), base.mask)
    for k in range(200):
        out = augment(probe, _random_spec(rng, GEOMETRIC_OPS), np.random.default_rng(k))
        assert np.array_equal((out.image >= 0.5).astype(np.uint8), out.mask)


def test_augment_is_deterministic_in_rng():
    base = generate_phantom(np.random.default_rng(0), 64, NoduleSpec(count=1, radius_range=(3, 6)))
    a = augment(base, AugmentSpec(), np.random.default_rng(5), force=True)
    b = augment(base, AugmentSpec(), np.random.default_rng(5), force=True)
    assert a.image.tobytes() == b.image.tobytes()


def test_augment_spec_validation():
    with pytest.raises(ValueError):
        AugmentSpec(enabled={"warp"})
    with pytest.raises(ValueError):
        AugmentSpec(probability=1.5)
    with pytest.raises(ValueError):
        AugmentSpec(salt_pepper=(0.0, 0.7))


# ---------------------------------------------------------------- split

def test_published_split_sizes():
    sp = split_dataset(list(range(1166)), folds=4, seed=0)
    assert (len(sp.train), len(sp.test)) == (922, 244)
    assert sorted(len(f) for f in sp.folds) == [230, 230, 231, 231]
    flat = [i for f in sp.folds for i in f]
    assert sorted(flat) == list(range(922))
    assert not set(sp.train) & set(sp.test)
    tr, va = sp.fold(0)
    assert len(tr) + len(va) == 922 and not set(tr) & set(va)


def test_split_seed_changes_assignment_not_sizes():
    a = split_dataset(list(range(100)), seed=0)
    b = split_dataset(list(range(100)), seed=0)
    c = split_dataset(list(range(100)), seed=1)
    assert a.train == b.train and a.test == b.test
    assert a.test != c.test
    assert [len(f) for f in a.folds] == [len(f) for f in c.folds]


def test_split_errors():
    with pytest.raises(ValueError):
        split_dataset(list(range(10)), folds=1)
    with pytest.raises(ValueError):
        split_dataset(list(range(3)), test_fraction=0.0, folds=4)
