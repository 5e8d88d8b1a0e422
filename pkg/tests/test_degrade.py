from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from resroute.core import ConfigError, DataError, LabeledSample, NumericError, resolution_classes
from resroute.degrade import (
    BicubicDegrader,
    DatasetManifest,
    DegradeConfig,
    Normalization,
    augment,
    augment_batch,
    bicubic_kernel,
    degrade_image,
    degrade_sample,
    degraded_size,
    hflip,
    load_image,
    load_split,
    prepare,
    read_normalization,
    resize_bicubic,
    synth_corpus,
)


def keys_exact(t: Fraction, a: Fraction) -> Fraction:
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return Fraction(0)


# ---------------------------------------------------------------- sizes


@pytest.mark.parametrize("factor,expected", [(1, 100), (2, 50), (4, 25), (6, 17), (8, 13)])
def test_degraded_size_base_100(factor, expected):
    assert degraded_size(100, factor) == expected


def test_degraded_size_best_pixel_count_for_x6():
    target = Fraction(100 * 100, 36)
    best = min(range(1, 101), key=lambda s: abs(s * s - target))
    assert degraded_size(100, 6) == best == 17


def test_degraded_size_errors():
    with pytest.raises(ValueError):
        degraded_size(4, 8)
    with pytest.raises(ValueError):
        degraded_size(10, 0)


@given(st.integers(1, 500), st.integers(1, 64))
def test_degraded_size_bounds(base, factor):
    if factor > base:
        return
    s = degraded_size(base, factor)
    assert s <= base
    assert (s == base) == (factor == 1)
    assert s == int(Fraction(base, factor) + Fraction(1, 2))


# ---------------------------------------------------------------- kernel


@pytest.mark.parametrize("t,expected", [(0, 1.0), (1, 0.0), (0.5, 0.5625)])
def test_kernel_examples(t, expected):
    assert bicubic_kernel(t, -0.5) == expected


def test_kernel_matches_exact_rational_evaluation():
    a = Fraction(-1, 2)
    for i in range(-250, 251):
        t = Fraction(i, 100)
        assert bicubic_kernel(float(t), -0.5) == pytest.approx(float(keys_exact(t, a)), abs=1e-12)


@pytest.mark.parametrize("a", [-0.5, -0.75])
def test_kernel_partition_of_unity(a):
    t = np.round(np.arange(0, 1, 0.01), 2)
    total = sum(bicubic_kernel(t - i, a) for i in range(-3, 4))
    assert np.max(np.abs(total - 1.0)) <= 1e-9


# ---------------------------------------------------------------- resize


@given(st.floats(0, 1), st.integers(1, 40), st.integers(1, 40), st.integers(1, 40), st.integers(1, 40))
def test_constant_image_is_fixed_point(c, h, w, oh, ow):
    img = np.full((h, w, 3), c, dtype=np.float32)
    out = resize_bicubic(img, oh, ow)
    assert out.shape == (oh, ow, 3)
    assert np.array_equal(out, np.full((oh, ow, 3), np.float32(c)))


def test_linear_ramp_survives_2x_downsample():
    x = np.linspace(0.1, 0.9, 64)
    img = np.repeat(np.tile(x, (16, 1))[:, :, None], 3, axis=2)
    out = resize_bicubic(img, 16, 32)
    # output pixel j covers input centre 2j + 0.5
    expected = np.interp(2 * np.arange(32) + 0.5, np.arange(64), x)
    interior = slice(3, -3)
    assert np.max(np.abs(out[:, interior, 0] - expected[interior])) <= 1e-4


def _smooth_image(n=100):
    yy, xx = np.mgrid[0:n, 0:n] / n
    img = np.stack([
        0.5 + 0.3 * np.sin(2 * np.pi * xx) * np.cos(2 * np.pi * yy),
        0.5 + 0.25 * np.cos(2 * np.pi * (xx + yy)),
        0.4 + 0.3 * np.exp(-((xx - 0.4) ** 2 + (yy - 0.6) ** 2) / 0.05),
    ], axis=2)
    return img


def psnr(a, b):
    return 10 * np.log10(1.0 / np.mean((np.asarray(a, np.float64) - b) ** 2))


def test_round_trip_psnr():
    img = _smooth_image()
    back = resize_bicubic(resize_bicubic(img, 50, 50), 100, 100)
    value = psnr(back, img)
    assert value >= 30.0
    # regression baseline recorded when the resampler was written
    assert value == pytest.approx(63.47, abs=0.05)


def test_resize_rejects_non_finite():
    img = np.zeros((4, 4, 3))
    img[0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        resize_bicubic(img, 2, 2)


def test_resize_output_clipped():
    img = np.zeros((8, 8, 3))
    img[::2, ::2] = 1.0
    out = resize_bicubic(img, 13, 13)
    assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------- degrade_sample


def _sample(img, factor=1):
    return LabeledSample(img.astype(np.float32), 3, resolution_classes((1, 2, 4, 6, 8))[factor])


def test_degrade_sample_factor_one():
    cfg = DegradeConfig(base_size=100, net_input_size=224)
    s = degrade_sample(_sample(_smooth_image()), 1, cfg)
    assert s.image.shape == (224, 224, 3)
    assert s.resolution.index == 0 and s.resolution.factor == 1
    assert s.expression == 3


def test_degrade_sample_factor_eight_goes_through_13(monkeypatch):
    import resroute.degrade as dg

    calls = []
    real = dg.resize_bicubic

    def spy(img, h, w, a=-0.5):
        calls.append((img.shape[0], h))
        return real(img, h, w, a)

    monkeypatch.setattr(dg, "resize_bicubic", spy)
    cfg = DegradeConfig(base_size=100, net_input_size=224)
    s = degrade_sample(_sample(_smooth_image()), 8, cfg)
    assert calls == [(100, 13), (13, 224)]
    assert s.image.shape == (224, 224, 3)
    assert s.resolution.factor == 8 and s.resolution.index == 4


def test_degrade_sample_extra_factor_flagged():
    cfg = DegradeConfig(base_size=100, net_input_size=224)
    s = degrade_sample(_sample(_smooth_image()), 12, cfg)
    assert s.resolution.extra
    with pytest.raises(ValueError):
        degrade_sample(_sample(_smooth_image()), 3, cfg)


def test_degrade_factor_one_is_idempotent():
    cfg = DegradeConfig(base_size=48, net_input_size=48)
    s1 = degrade_sample(_sample(_smooth_image(48)), 1, cfg)
    s2 = degrade_sample(s1, 1, cfg)
    assert np.max(np.abs(s1.image - s2.image)) <= 1e-6


@pytest.mark.parametrize("kwargs", [
    dict(factors=(2, 4)),
    dict(factors=(1, 4, 2)),
    dict(base_size=6, factors=(1, 8)),
    dict(bicubic_a=0.5),
    dict(factors=(1, 2), eval_extra_factors=(2,)),
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        DegradeConfig(**kwargs)


# ---------------------------------------------------------------- augmentation


def test_augment_eval_deterministic(rng):
    s = _sample(rng.random((8, 8, 3)))
    a, b = augment(s, None, False), augment(s, None, False)
    assert np.array_equal(a.image, b.image)


def test_augment_train_same_seed_same_flips(rng):
    s = _sample(rng.random((8, 8, 3)))
    r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
    for _ in range(20):
        assert np.array_equal(augment(s, r1, True).image, augment(s, r2, True).image)


def test_forced_flip_is_involution(rng):
    s = _sample(rng.random((8, 8, 3)))
    norm = Normalization((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    twice = augment(augment(s, None, True, norm, force_flip=True), None, True, norm, force_flip=True)
    assert np.array_equal(twice.image, s.image)
    assert np.array_equal(hflip(hflip(s.image)), s.image)


def test_augment_flip_rate(rng):
    x = np.zeros((4000, 3, 2, 2), dtype=np.float32)
    x[:, :, :, 0] = 1.0
    norm = Normalization((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    out = augment_batch(x, np.random.default_rng(0), True, norm)
    flipped = np.mean(out[:, 0, 0, 0] == 0.0)
    assert abs(flipped - 0.5) < 0.03


def test_normalization_from_corpus_standardizes(rng):
    x = (rng.random((500, 3, 6, 6)) * np.array([0.3, 0.6, 0.9])[None, :, None, None]
         + np.array([0.1, 0.2, 0.0])[None, :, None, None]).astype(np.float32)
    norm = Normalization.from_images(x)
    out = augment_batch(x, None, False, norm)
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 0.05)
    assert np.all(np.abs(out.std(axis=(0, 2, 3)) - 1.0) < 0.05)


# ---------------------------------------------------------------- corpus and files


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = DegradeConfig(base_size=24, net_input_size=24, eval_extra_factors=(12,))
    synth_corpus(10, 4, cfg, 7, root / "base", test_per_class=3)
    prepare(root / "base", root / "data", cfg, cfg.all_factors)
    return root, cfg


def test_synth_manifest_counts(small_corpus):
    root, _ = small_corpus
    m = DatasetManifest.read(root / "base")
    train = m.select("train")
    assert len(train) == 40
    assert np.bincount([e[1] for e in train]).tolist() == [10, 10, 10, 10]
    assert len(m.select("test")) == 12


def test_synth_is_byte_deterministic(small_corpus, tmp_path):
    root, cfg = small_corpus
    synth_corpus(10, 4, cfg, 7, tmp_path / "again", test_per_class=3)
    files = sorted(p.relative_to(root / "base") for p in (root / "base").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (root / "base" / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes()


def test_synth_argument_errors(tmp_path):
    cfg = DegradeConfig(base_size=24, net_input_size=24)
    with pytest.raises(ValueError):
        synth_corpus(10, 1, cfg, 0, tmp_path)
    with pytest.raises(ValueError):
        synth_corpus(0, 3, cfg, 0, tmp_path)


def test_synth_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        synth_corpus(1, 2, DegradeConfig(base_size=24, net_input_size=24), 0, blocker / "sub")


def test_prepare_layout_and_sizes(small_corpus):
    root, cfg = small_corpus
    data = root / "data"
    header = (data / "manifest.csv").read_text().splitlines()[0]
    assert header == "relative_path,expression,factor"
    m = DatasetManifest.read(data)
    for f in cfg.all_factors:
        entries = m.select("train", f)
        assert len(entries) == 40
        assert all(e[0].startswith(f"train/x{f}/") for e in entries)
        img = load_image(data / entries[0][0])
        assert img.shape == (24, 24, 3)
    X, y = load_split(data, "test", 4)
    assert X.shape == (12, 3, 24, 24) and X.dtype == np.uint8
    norm = read_normalization(data)
    assert all(0 < s < 1 for s in norm.std)


def test_prepare_matches_direct_degradation(small_corpus):
    root, cfg = small_corpus
    base = DatasetManifest.read(root / "base").select("train")[0][0]
    img = load_image(root / "base" / base)
    expected = np.rint(degrade_image(img, 6, cfg) * 255) / 255
    got = load_image(root / "data" / "train" / "x6" / Path(base).name)
    assert np.max(np.abs(got - expected)) < 1e-6


def test_load_split_missing(small_corpus):
    root, _ = small_corpus
    with pytest.raises(FileNotFoundError, match="x16"):
        load_split(root / "data", "test", 16)
    with pytest.raises(FileNotFoundError):
        load_split(root / "nowhere", "test", 1)


def test_load_split_label_range(small_corpus):
    root, _ = small_corpus
    with pytest.raises(DataError):
        load_split(root / "data", "test", 1, num_classes=2)


def test_linear_probe_on_thumbnails(tmp_path):
    """Class identity in the generator is recoverable by a linear model at 8x8."""
    cfg = DegradeConfig(base_size=48, net_input_size=48)
    synth_corpus(150, 4, cfg, 0, tmp_path, test_per_class=50)
    m = DatasetManifest.read(tmp_path)

    def features(split):
        entries = m.select(split)
        X = np.array([resize_bicubic(load_image(tmp_path / rel), 8, 8).ravel() for rel, _, _ in entries])
        return np.c_[X, np.ones(len(X))], np.array([e[1] for e in entries])

    A, y = features("train")
    B, yt = features("test")
    W = np.linalg.solve(A.T @ A + 0.1 * np.eye(A.shape[1]), A.T @ np.eye(4)[y])
    acc = np.mean((B @ W).argmax(axis=1) == yt)
    assert acc >= 0.80


def test_bicubic_degrader_estimator():
    from sklearn.base import clone

    rng = np.random.default_rng(0)
    X = rng.random((3, 3, 16, 16)).astype(np.float32)
    d = BicubicDegrader(factor=4, net_input_size=16)
    out = d.fit_transform(X)
    assert out.shape == X.shape
    assert clone(d).get_params() == d.get_params()
    direct = degrade_image(X[0].transpose(1, 2, 0), 4, DegradeConfig(base_size=16, net_input_size=16,
                                                                      factors=(1, 2, 4), eval_extra_factors=()))
    assert np.allclose(out[0].transpose(1, 2, 0), direct)
