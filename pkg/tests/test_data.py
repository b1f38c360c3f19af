import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradrev.data import (DEFAULT_SHIFTS, DomainDataset, DomainShift, generate_synthetic, load_datasets,
                          make_epoch, preprocess, save_datasets, steps_per_epoch)
from gradrev.errors import ConfigError, DataError, InputError
from gradrev.model import ModelConfig, init_params
from gradrev.training import domain_probe_accuracy


def _fake(label, train_size, val_size=0):
    n = train_size + val_size
    return DomainDataset(label, np.arange(n, dtype=float).reshape(n, 1, 1, 1) + 1000 * label,
                         np.zeros(n, dtype=np.int64), np.arange(train_size),
                         np.arange(train_size, n))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def test_preprocess_mid_gray():
    out = preprocess(np.full((40, 40), 128.0), 32)
    assert out.shape == (1, 32, 32)
    np.testing.assert_allclose(out, 2 * 128 / 255 - 1, rtol=0, atol=1e-12)
    assert abs(out[0, 0, 0] - 0.00392) < 1e-5


def test_preprocess_white_and_black():
    assert np.all(preprocess(np.full((20, 30, 3), 255.0), 16) == 1.0)
    assert np.all(preprocess(np.zeros((16, 16)), 16) == -1.0)


def test_preprocess_square_input_only_normalizes():
    raw = np.random.default_rng(0).uniform(0, 255, size=(8, 8))
    np.testing.assert_allclose(preprocess(raw, 8)[0], raw * 2 / 255 - 1, rtol=0, atol=1e-15)


def test_preprocess_grayscale_is_channel_mean():
    raw = np.random.default_rng(1).uniform(0, 255, size=(8, 8, 3))
    np.testing.assert_allclose(preprocess(raw, 8), preprocess(raw.mean(axis=2), 8), rtol=0, atol=1e-15)


def test_preprocess_center_crop():
    raw = np.zeros((8, 12))
    raw[:, 2:10] = 255.0
    assert np.all(preprocess(raw, 8) == 1.0)


def test_preprocess_too_small():
    with pytest.raises(InputError):
        preprocess(np.zeros((10, 40)), 16)
    with pytest.raises(InputError):
        preprocess(np.zeros((2, 2, 2, 2)), 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 20), st.integers(4, 20), st.integers(1, 4), st.integers(0, 2**31))
def test_preprocess_range_and_shape(h, w, s, seed):
    raw = np.random.default_rng(seed).uniform(-50, 300, size=(h, w))
    out = preprocess(raw, min(s, h, w))
    assert out.shape == (1, min(s, h, w), min(s, h, w))
    assert out.min() >= -1 and out.max() <= 1


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def test_generate_sizes():
    ds = generate_synthetic(per_class=(20, 12, 8, 4), image_size=8)
    assert [len(d) for d in ds] == [140, 84, 56, 28]
    assert [d.domain_label for d in ds] == [0, 1, 2, 3]


def test_generate_defaults_four_domains_seven_classes():
    ds = generate_synthetic(per_class=4, image_size=8)
    assert len(ds) == 4
    assert all(sorted(set(d.class_labels.tolist())) == list(range(7)) for d in ds)


def test_generate_deterministic():
    a = generate_synthetic(per_class=4, image_size=8, seed=5)
    b = generate_synthetic(per_class=4, image_size=8, seed=5)
    c = generate_synthetic(per_class=4, image_size=8, seed=6)
    for x, y in zip(a, b):
        assert x.images.tobytes() == y.images.tobytes()
        assert x.train_index.tobytes() == y.train_index.tobytes()
    assert a[0].images.tobytes() != c[0].images.tobytes()


def test_samples_in_range():
    for ds in generate_synthetic(per_class=4, image_size=16):
        assert ds.images.shape[1:] == (1, 16, 16)
        assert ds.images.min() >= -1 and ds.images.max() <= 1
        s = ds[0]
        assert 0 <= s.class_label < 7 and s.domain_label == ds.domain_label


@pytest.mark.parametrize("kwargs", [dict(domains=1), dict(per_class=3), dict(per_class=(4, 4)),
                                    dict(classes=1), dict(domains=5)])
def test_generate_invalid(kwargs):
    with pytest.raises(ConfigError):
        generate_synthetic(**{"image_size": 8, **kwargs})


def test_split_disjoint_exhaustive_stratified():
    for ds in generate_synthetic(per_class=(20, 12, 8, 4), image_size=8):
        train, val = set(ds.train_index.tolist()), set(ds.val_index.tolist())
        assert not train & val and train | val == set(range(len(ds)))
        for k in range(7):
            count = int(np.sum(ds.class_labels == k))
            share = int(np.sum(ds.class_labels[ds.val_index] == k))
            assert share in (math.floor(0.2 * count), math.ceil(0.2 * count))


def test_domains_differ_under_default_shift():
    ds = generate_synthetic(per_class=10, image_size=16)
    means = [d.images.mean() for d in ds]
    assert max(means) - min(means) > 0.1


def test_identity_shift_domains_indistinguishable():
    cfg = ModelConfig(input_size=16, conv_channels=(4, 8))
    ds = generate_synthetic(per_class=20, image_size=16, shift="identity", seed=3)
    assert all(d.shift == DomainShift() for d in ds)
    acc = domain_probe_accuracy(init_params(cfg, 0), ds, cfg)
    # 112 validation samples, chance 0.25: well inside binomial noise
    assert acc < 0.4


def test_custom_shift_list():
    specs = [dict(contrast=0.5), dict(contrast=-0.5)]
    ds = generate_synthetic(domains=2, per_class=4, image_size=8, shift=specs)
    assert ds[1].shift.contrast == -0.5
    with pytest.raises(ConfigError):
        generate_synthetic(domains=3, per_class=4, image_size=8, shift=specs)
    with pytest.raises(ConfigError):
        generate_synthetic(per_class=4, image_size=8, shift="sepia")


def test_default_shift_count():
    assert len(DEFAULT_SHIFTS) == 4


# ---------------------------------------------------------------------------
# balanced sampler
# ---------------------------------------------------------------------------


def test_epoch_length_and_cycling_counts():
    sets = [_fake(d, n) for d, n in enumerate((12, 6, 4, 2))]
    batches = make_epoch(sets, 2, seed=0)
    assert len(batches) == 6 == steps_per_epoch(sets, 2)
    # counting oracle: 6 steps x 2 draws, cycled over n samples -> 12 / n passes
    for j, n in enumerate((12, 6, 4, 2)):
        seen = Counter(np.concatenate([b.indices[j] for b in batches]).tolist())
        assert sorted(seen) == list(range(n))
        assert set(seen.values()) == {12 // n}


def test_batch_layout():
    sets = [_fake(d, n) for d, n in enumerate((5, 3))]
    for b in make_epoch(sets, 3, seed=1):
        assert len(b) == 6
        assert b.domain_labels.tolist() == [0, 0, 0, 1, 1, 1]
        assert b.source_mask.tolist() == [True] * 3 + [False] * 3
        for j, ds in enumerate(sets):
            np.testing.assert_array_equal(b.images[3 * j:3 * j + 3], ds.images[b.indices[j]])


def test_source_mask_follows_source_domain():
    sets = [_fake(d, 4) for d in range(3)]
    b = make_epoch(sets, 2, seed=0, source_domain=2)[0]
    assert b.source_mask.tolist() == [False] * 4 + [True] * 2


def test_equal_sizes_each_sample_once():
    sets = [_fake(d, 6) for d in range(3)]
    batches = make_epoch(sets, 3, seed=4)
    for j in range(3):
        assert sorted(np.concatenate([b.indices[j] for b in batches]).tolist()) == list(range(6))


def test_single_domain_is_plain_shuffled_batching():
    batches = make_epoch([_fake(0, 7)], 2, seed=0)
    flat = np.concatenate([b.indices[0] for b in batches]).tolist()
    assert len(batches) == 4
    assert sorted(flat[:7]) == list(range(7))


def test_sampler_only_uses_train_split():
    ds = _fake(0, 4, val_size=3)
    flat = np.concatenate([b.indices[0] for b in make_epoch([ds], 1, seed=0)])
    assert set(flat.tolist()) == {0, 1, 2, 3}


def test_sampler_determinism_and_epoch_dependence():
    sets = [_fake(d, n) for d, n in enumerate((8, 3))]
    a = make_epoch(sets, 2, seed=7, epoch=1)
    b = make_epoch(sets, 2, seed=7, epoch=1)
    c = make_epoch(sets, 2, seed=7, epoch=2)
    assert all(np.array_equal(x.images, y.images) for x, y in zip(a, b))
    assert any(not np.array_equal(x.images, y.images) for x, y in zip(a, c))


def test_domain_order_independent_of_other_domains():
    # a domain's stream is keyed by its own label, so adding domains leaves it alone
    a = make_epoch([_fake(0, 8), _fake(1, 3)], 2, seed=0)
    b = make_epoch([_fake(0, 8), _fake(1, 3), _fake(2, 5)], 2, seed=0)
    assert all(np.array_equal(x.indices[0], y.indices[0]) for x, y in zip(a, b))


def test_sampler_errors():
    with pytest.raises(DataError):
        make_epoch([_fake(0, 4), _fake(1, 0, 2)], 2, seed=0)
    with pytest.raises(DataError):
        make_epoch([_fake(0, 4)], 0, seed=0)
    with pytest.raises(DataError):
        make_epoch([], 1, seed=0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 15), min_size=1, max_size=5), st.integers(1, 4), st.integers(0, 1000))
def test_sampler_balance_property(sizes, m, seed):
    sets = [_fake(d, n) for d, n in enumerate(sizes)]
    batches = make_epoch(sets, m, seed=seed)
    assert len(batches) == math.ceil(max(sizes) / m)
    for b in batches:
        assert np.bincount(b.domain_labels, minlength=len(sizes)).tolist() == [m] * len(sizes)
        assert int(b.source_mask.sum()) == m
    big = int(np.argmax(sizes))
    if sizes[big] % m == 0:
        drawn = np.concatenate([b.indices[big] for b in batches])
        assert sorted(drawn.tolist()) == list(range(sizes[big]))


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    ds = generate_synthetic(per_class=(5, 4, 4, 6), image_size=8, seed=2)
    save_datasets(ds, tmp_path, seed=2)
    back = load_datasets(tmp_path)
    for a, b in zip(ds, back):
        assert a.domain_label == b.domain_label and a.shift == b.shift
        for f in ("images", "class_labels", "train_index", "val_index"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    meta = json.loads((tmp_path / "domain_3" / "meta.json").read_text())
    assert meta["class_counts"] == [6] * 7 and meta["seed"] == 2


def test_save_is_byte_identical(tmp_path):
    for sub in ("a", "b"):
        save_datasets(generate_synthetic(per_class=4, image_size=8, seed=1), tmp_path / sub, seed=1)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_load_missing(tmp_path):
    with pytest.raises(DataError):
        load_datasets(tmp_path)
    (tmp_path / "domain_0").mkdir()
    with pytest.raises(DataError):
        load_datasets(tmp_path)
