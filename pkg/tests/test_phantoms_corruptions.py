import numpy as np
import pytest

from app.core.exceptions import SamplingError, ShapeError
from app.schemas.sampler import PhantomConfig
from app.services.corruptions import CORRUPTION_KINDS, _central_rows, add_noise, corrupt, fft2
from app.services.losses import psnr
from app.services.perlin import MASK_FRACTION_RANGE, perlin_mask, perlin_noise
from app.services.phantoms import (
    ANATOMY_LABELS,
    TEST_SUBJECT_OFFSET,
    generate_phantom,
    generate_pool,
    split_pool,
)


def test_phantom_is_deterministic():
    a = generate_phantom(7, PhantomConfig(), 32)
    b = generate_phantom(7, PhantomConfig(), 32)
    np.testing.assert_array_equal(a.seg_map, b.seg_map)
    np.testing.assert_array_equal(a.modalities, b.modalities)
    assert a.dataset_id == b.dataset_id


def test_phantom_contents():
    subject = generate_phantom(3, PhantomConfig(), 32)
    assert subject.modalities.shape == (4, 32, 32)
    assert subject.modalities.min() >= 0.0 and subject.modalities.max() <= 1.0
    assert set(np.unique(subject.brain_mask)) <= {0, 1}
    # фон нулевой во всех модальностях
    assert not subject.modalities[:, subject.seg_map == 0].any()
    assert set(np.unique(subject.seg_map)) & set(ANATOMY_LABELS)


def test_skull_follows_dataset_parity():
    for subject in generate_pool(PhantomConfig(), 32, 16, seed=0):
        assert subject.has_skull == (subject.dataset_id % 2 == 0)


def test_phantom_rejects_small_images():
    with pytest.raises(ShapeError):
        generate_phantom(0, PhantomConfig(), 8)


def test_pool_ids_and_test_offset():
    pool = generate_pool(PhantomConfig(), 16, 5, seed=1)
    test = generate_pool(PhantomConfig(), 16, 5, seed=1, id_offset=TEST_SUBJECT_OFFSET)
    assert [s.subject_id for s in pool] == list(range(5))
    assert not {s.subject_id for s in pool} & {s.subject_id for s in test}


def test_split_pool_is_disjoint_and_complete(phantom_pool):
    train, val = split_pool(phantom_pool, 0.25, seed=0)
    train_ids, val_ids = {s.subject_id for s in train}, {s.subject_id for s in val}
    assert not train_ids & val_ids
    assert train_ids | val_ids == {s.subject_id for s in phantom_pool}
    assert len(val) == 3


def test_split_pool_needs_two_subjects(phantom_pool):
    with pytest.raises(SamplingError):
        split_pool(phantom_pool[:1], 0.5, seed=0)


@pytest.mark.parametrize("seed", range(5))
def test_fft_round_trip_and_parseval(seed):
    x = np.random.default_rng(seed).random((16, 32))
    spectrum = fft2(x)
    np.testing.assert_allclose(fft2(spectrum, "inverse").real, x, atol=1e-6)
    energy = np.sum(np.abs(spectrum) ** 2) / x.size
    assert energy == pytest.approx(np.sum(x ** 2), abs=1e-6)


def test_fft_requires_power_of_two():
    with pytest.raises(ShapeError):
        fft2(np.zeros((12, 16)))


def test_central_rows_are_low_frequencies():
    rows = _central_rows(32)
    assert 0 in rows
    assert len(rows) == 4


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_zero_severity_returns_a_copy(kind):
    img = np.random.default_rng(0).random((16, 16)).astype(np.float32)
    out = corrupt(img, kind, 0.0, seed=0)
    np.testing.assert_array_equal(out, img)
    assert out is not img


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_corruption_is_deterministic_and_bounded(kind):
    img = np.random.default_rng(1).random((16, 16)).astype(np.float32)
    a = corrupt(img, kind, 0.8, seed=5)
    b = corrupt(img, kind, 0.8, seed=5)
    np.testing.assert_array_equal(a, b)
    assert a.dtype == img.dtype
    assert a.min() >= 0.0 and a.max() <= 1.0 + 1e-6
    if kind != "undersample":
        # недовыборка может не вырезать ни одной строки
        assert not np.array_equal(a, img)


def test_corrupt_rejects_unknown_kind_and_bad_shape():
    with pytest.raises(SamplingError):
        corrupt(np.zeros((4, 4)), "blur", 1.0, seed=0)
    with pytest.raises(ShapeError):
        corrupt(np.zeros((1, 4, 4)), "noise", 1.0, seed=0)


@pytest.mark.parametrize("seed", range(50))
def test_perlin_mask_fraction(seed):
    mask = perlin_mask((32, 32), cell=8, seed=seed)
    low, high = MASK_FRACTION_RANGE
    assert low <= mask.mean() <= high
    assert set(np.unique(mask)) <= {0, 1}


def test_perlin_mask_clamps_explicit_threshold():
    mask = perlin_mask((16, 16), cell=4, threshold=-10.0, seed=0)
    assert mask.mean() <= MASK_FRACTION_RANGE[1]


def test_perlin_noise_rejects_bad_cell():
    with pytest.raises(ShapeError):
        perlin_noise((16, 16), 5, np.random.default_rng(0))


def test_anatomy_labels_are_common_and_inside_brain():
    pool = generate_pool(PhantomConfig(), 32, 100, seed=0)
    for label in ANATOMY_LABELS:
        present = sum(bool((s.seg_map == label).any()) for s in pool)
        assert present >= 95, f"label {label} present in {present} subjects"
    for subject in pool:
        anatomy = np.isin(subject.seg_map, ANATOMY_LABELS)
        assert subject.brain_mask[anatomy].all()


def test_noise_std_matches_sigma():
    img = np.full((128, 128), 0.5)
    out = corrupt(img, "noise", 1.0, seed=0, sigma=0.2)
    # на среднем сером обрезка затрагивает около 1% пикселей
    assert np.std(out - img) == pytest.approx(0.2, abs=0.01)
    raw = add_noise(img, 0.2, np.random.default_rng(0), clip=False)
    assert np.std(raw - img) == pytest.approx(0.2, abs=0.01)


def test_undersampling_psnr_falls_with_severity():
    img = generate_phantom(4, PhantomConfig(), 32).modalities[0].astype(np.float64)
    severities = (0.25, 0.5, 1.0)
    means = [np.mean([psnr(corrupt(img, "undersample", s, seed=seed), img) for seed in range(10)]) for s in severities]
    assert all(a >= b for a, b in zip(means, means[1:]))
    assert means[0] > means[-1]


def test_perlin_mask_is_deterministic():
    np.testing.assert_array_equal(perlin_mask((32, 32), seed=9), perlin_mask((32, 32), seed=9))
    assert not np.array_equal(perlin_mask((32, 32), seed=9), perlin_mask((32, 32), seed=10))


@pytest.mark.parametrize("seed", range(10))
def test_perlin_noise_is_continuous(seed):
    noise = perlin_noise((64, 64), 8, np.random.default_rng(seed))
    assert np.abs(np.diff(noise, axis=0)).max() < 0.3
    assert np.abs(np.diff(noise, axis=1)).max() < 0.3
