import numpy as np
import pytest

from ads.config import ConfigError, GenSpec, preset
from ads.data import (FormatError, VersionError, derive_label, dumps, generate, generate_pretrain_pairs,
                      load_dataset, loads, save_dataset, token_ranges)


def small_spec(**kw):
    base = dict(n_train=64, n_val=16, n_test=32, seed=3)
    base.update(kw)
    return GenSpec(**base).validate()


def test_default_spec_matches_toy_model():
    rc = preset("toy")
    for f in ("m", "n", "patch_dim", "vocab_size"):
        assert getattr(rc.data, f) == getattr(rc.model, f)


def test_split_sizes_and_shapes():
    spec = small_spec()
    tr, va, te = generate(spec)
    assert (len(tr), len(va), len(te)) == (64, 16, 32)
    assert tr.tokens.shape == (64, spec.n)
    assert tr.patches.shape == (64, spec.m, spec.patch_dim)
    assert tr.tokens.max() < spec.vocab_size and tr.tokens.min() >= 0
    assert set(np.unique(tr.labels)) <= {0, 1}


def test_regions_must_divide_patch_count():
    with pytest.raises(ConfigError):
        GenSpec(regions=3).validate()


def test_each_sample_has_one_polarity_and_one_key_token():
    spec = small_spec()
    ds = generate(spec)[0]
    r = token_ranges(spec)
    for row, pol, key in zip(ds.tokens, ds.text_polarity, ds.key):
        pos = [t for t in row if t in r["positive"]]
        neg = [t for t in row if t in r["negative"]]
        keys = [t for t in row if t in r["key"]]
        assert len(pos) + len(neg) == 1
        assert (len(pos) == 1) == (pol > 0)
        assert keys == [r["key"].start + key]


def test_patch_means_follow_region_polarity():
    spec = small_spec(noise=0.0)
    ds = generate(spec)[0]
    per = spec.m // spec.regions
    for r in range(spec.regions):
        block = ds.patches[:, r * per:(r + 1) * per, r]
        np.testing.assert_array_equal(block, np.broadcast_to(spec.bump * ds.region_polarity[:, r:r + 1], block.shape))


def test_labels_rederive_from_latents():
    ds = generate(small_spec(n_train=500))[0]
    np.testing.assert_array_equal(derive_label(ds.text_polarity, ds.key, ds.region_polarity), ds.labels)


def test_label_rule_by_hand():
    # text +, keyed region -: incongruent -> 1 ; text -, keyed region - -> 0
    assert derive_label([1, -1], [0, 1], [[-1, 1], [1, -1]]).tolist() == [1, 0]


def test_label_marginal_near_half():
    ds = generate(small_spec(n_train=10_000, seed=11))[0]
    assert abs(ds.labels.mean() - 0.5) <= 0.02


def test_each_modality_alone_is_uninformative():
    ds = generate(small_spec(n_train=20_000, seed=5))[0]
    # label rate conditioned on text polarity or on any region polarity stays ~0.5
    for mask in (ds.text_polarity > 0, ds.text_polarity < 0, ds.region_polarity[:, 0] > 0):
        assert abs(ds.labels[mask].mean() - 0.5) < 0.02


def test_same_seed_same_bytes(tmp_path):
    spec = small_spec()
    a, b = tmp_path / "a.adsd", tmp_path / "b.adsd"
    save_dataset(a, generate(spec)[1])
    save_dataset(b, generate(spec)[1])
    assert a.read_bytes() == b.read_bytes()
    assert dumps(generate(small_spec(seed=4))[1]) != a.read_bytes()


def test_round_trip_bit_exact(tmp_path):
    ds = generate(small_spec())[2]
    path = tmp_path / "t.adsd"
    save_dataset(path, ds)
    back = load_dataset(path)
    for f in ("tokens", "patches", "labels", "text_polarity", "key", "region_polarity"):
        a, b = getattr(ds, f), getattr(back, f)
        assert a.tobytes() == b.tobytes() and a.dtype == b.dtype
    assert back.spec == ds.spec
    assert dumps(back) == path.read_bytes()


def test_truncated_file_is_format_error_with_offset():
    blob = dumps(generate(small_spec())[1])
    for cut in (8, 20, len(blob) - 7):
        with pytest.raises(FormatError, match="offset"):
            loads(blob[:cut])


def test_wrong_magic_is_version_error_naming_magic():
    blob = dumps(generate(small_spec())[1])
    with pytest.raises(VersionError, match="ADSD"):
        loads(b"XXXX" + blob[4:])


def test_wrong_version_is_version_error():
    blob = bytearray(dumps(generate(small_spec())[1]))
    blob[4] = 9
    with pytest.raises(VersionError):
        loads(bytes(blob))


def test_pretrain_pairs_are_congruent_and_single_region():
    spec = small_spec(noise=0.0)
    pairs = generate_pretrain_pairs(spec, 200, seed=0)
    assert np.all(pairs.labels == 0)
    per = spec.m // spec.regions
    for i in range(20):
        k = pairs.key[i]
        other = np.delete(pairs.patches[i], np.s_[k * per:(k + 1) * per], axis=0)
        assert not other.any()
