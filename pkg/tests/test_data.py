import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vireid.data import (
    BatchSpec,
    Dataset,
    Image,
    augment,
    erase_box,
    make_identity_spec,
    read_manifest,
    render,
    sample_batch,
    synth_generate,
    toy_benchmark,
    write_manifest,
)
from vireid.errors import ContractError
from vireid.model import Modality


@pytest.fixture(scope="module")
def small():
    return synth_generate(4, 6, 32, 16, seed=3)


def test_counts_and_labels():
    ds = synth_generate(2, 4, 32, 16, seed=0)
    assert len(ds) == 16
    assert set(ds.labels) == {0, 1}
    assert ds.counts() == {0: (4, 4), 1: (4, 4)}


def test_generation_is_deterministic():
    a = synth_generate(3, 2, 32, 16, seed=5)
    b = synth_generate(3, 2, 32, 16, seed=5)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.modalities, b.modalities)


def test_different_seed_changes_images():
    a = synth_generate(2, 2, 32, 16, seed=5)
    b = synth_generate(2, 2, 32, 16, seed=6)
    assert not np.array_equal(a.images, b.images)


def test_infrared_channels_are_replicated(small):
    ir = small.by_modality("ir").images
    np.testing.assert_array_equal(ir[:, 0], ir[:, 1])
    np.testing.assert_array_equal(ir[:, 0], ir[:, 2])


def test_pixels_in_unit_range(small):
    assert small.images.min() >= 0.0 and small.images.max() <= 1.0
    assert small.images.shape[1:] == (3, 32, 16)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_infrared_correlates_with_visible_luminance(seed):
    # render both modalities of an identity from the same jitter draw
    for q in range(40):
        spec = make_identity_spec(q, seed)
        vis = render(spec, "vis", 64, 32, np.random.default_rng([seed, q]))
        ir = render(spec, "ir", 64, 32, np.random.default_rng([seed, q]))[0]
        lum = vis.transpose(1, 2, 0) @ np.array([0.299, 0.587, 0.114])
        assert np.corrcoef(lum.ravel(), ir.ravel())[0, 1] > 0.5


@pytest.mark.parametrize("seed", [0, 1, 7])
def test_distinct_identities_have_distinct_mean_images(seed):
    ds = synth_generate(6, 2, 32, 16, seed=seed)
    means = [ds.images[ds.labels == q].mean(axis=0) for q in ds.identities]
    for i in range(len(means)):
        for j in range(i):
            assert np.linalg.norm(means[i] - means[j]) > 0


@pytest.mark.parametrize("args", [(1, 4, 32, 16), (3, 4, 8, 16), (3, 4, 32, 15), (3, 0, 32, 16)])
def test_generator_rejects_degenerate_requests(args):
    with pytest.raises(ContractError):
        synth_generate(*args)


def test_toy_benchmark_layout():
    train, test = toy_benchmark(seed=0, num_train_ids=3, num_test_ids=2, per_modality=2, img_h=32, img_w=16)
    assert set(train.identities) == {0, 1, 2}
    assert set(test.identities) == {3, 4}
    assert train.split == "train" and test.split == "test"


# -- augmentation ------------------------------------------------------------------------------
def test_no_augmentation_is_identity(small):
    img = small.images[0]
    np.testing.assert_array_equal(augment(img, 0.0, 0.0, seed=1), img)


def test_forced_flip_is_involution(small):
    img = small.images[5]
    once = augment(img, 1.0, 0.0, seed=2)
    np.testing.assert_array_equal(once, img[:, :, ::-1])
    np.testing.assert_array_equal(augment(once, 1.0, 0.0, seed=3), img)


def test_augment_keeps_image_metadata(small):
    out = augment(small[0], 1.0, 1.0, seed=4)
    assert isinstance(out, Image)
    assert out.identity == small[0].identity and out.modality is small[0].modality


def test_quarter_area_erase_on_default_size():
    eh, ew = erase_box(64, 32, 0.25)
    assert eh * ew == 512
    img = np.full((3, 64, 32), 0.5)
    out = augment(img, 0.0, 1.0, erase_area_range=(0.25, 0.25), seed=0, fill=[-1.0, -1.0, -1.0])
    assert (out[0] == -1.0).sum() == 512
    assert ((out == -1.0).all(axis=0) | (out == 0.5).all(axis=0)).all()


@settings(max_examples=100)
@given(st.floats(0.02, 0.4), st.floats(0.3, 3.3))
def test_erase_box_has_exact_area_when_possible(frac, aspect):
    eh, ew = erase_box(64, 32, frac, aspect)
    target = int(np.floor(frac * 64 * 32))
    assert 1 <= eh <= 64 and 1 <= ew <= 32
    if any(target % d == 0 and target // d <= 32 for d in range(1, 65)):
        assert eh * ew == target


def test_erase_fills_with_given_mean(small):
    fill = small.channel_mean()
    out = augment(small.images[0], 0.0, 1.0, seed=9, fill=fill)
    changed = (out != small.images[0]).any(axis=0)
    assert changed.any()
    for c in range(3):
        np.testing.assert_array_equal(out[c][changed], fill[c])


@pytest.mark.parametrize("p", [-0.1, 1.5])
def test_augment_rejects_bad_probability(p):
    with pytest.raises(ContractError):
        augment(np.zeros((3, 4, 4)), flip_prob=p)


# -- sampler ---------------------------------------------------------------------------------------------
def check_batch(b, spec):
    assert len(b.labels) == spec.size
    ids, counts = np.unique(b.labels, return_counts=True)
    assert len(ids) == spec.q and (counts == spec.k).all()
    for q in ids:
        assert (b.modalities[b.labels == q] == 0).sum() == spec.k // 2
    assert len(set(b.indices.tolist())) == spec.size
    same = b.labels[:, None] == b.labels[None, :]
    assert ((same.sum(1) - 1) >= 1).all() and ((~same).sum(1) >= 1).all()


def test_full_size_batch_composition():
    ds = synth_generate(10, 4, 32, 16, seed=0)
    spec = BatchSpec(8, 8)
    b = sample_batch(ds, spec, seed=0)
    check_batch(b, spec)
    assert (b.modalities == 0).sum() == 32 and (b.modalities == 1).sum() == 32


def test_minimal_batch():
    ds = synth_generate(3, 1, 32, 16, seed=0)
    b = sample_batch(ds, BatchSpec(2, 2), seed=1)
    check_batch(b, BatchSpec(2, 2))


def test_exact_identity_count_uses_every_identity():
    ds = synth_generate(4, 2, 32, 16, seed=0)
    b = sample_batch(ds, BatchSpec(4, 2), seed=5)
    assert sorted(set(b.labels.tolist())) == [0, 1, 2, 3]


@given(st.integers(2, 5), st.sampled_from([2, 4, 6]), st.integers(0, 10_000))
def test_sampled_batches_satisfy_structure(small, q, k, seed):
    spec = BatchSpec(min(q, 4), k)
    b = sample_batch(small, spec, seed=seed)
    check_batch(b, spec)
    np.testing.assert_array_equal(b.images, small.images[b.indices])


def test_sampler_deterministic(small):
    a = sample_batch(small, BatchSpec(3, 4), seed=12)
    b = sample_batch(small, BatchSpec(3, 4), seed=12)
    np.testing.assert_array_equal(a.indices, b.indices)


def test_sampler_rejects_short_identity(small):
    with pytest.raises(ContractError):
        sample_batch(small, BatchSpec(2, 14), seed=0)
    with pytest.raises(ContractError):
        sample_batch(small, BatchSpec(5, 2), seed=0)


@pytest.mark.parametrize("q, k", [(1, 4), (4, 3), (4, 0)])
def test_batch_spec_validation(q, k):
    with pytest.raises(ContractError):
        BatchSpec(q, k)


# -- manifest ----------------------------------------------------------------------------------------------
def test_manifest_round_trip(tmp_path):
    train, test = toy_benchmark(seed=1, num_train_ids=2, num_test_ids=2, per_modality=1, img_h=16, img_w=16)
    path = write_manifest([train, test], tmp_path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(train) + len(test)
    back = read_manifest(path)
    for ds in (train, test):
        np.testing.assert_array_equal(back[ds.split].images, ds.images)
        np.testing.assert_array_equal(back[ds.split].labels, ds.labels)
        np.testing.assert_array_equal(back[ds.split].modalities, ds.modalities)


def test_dataset_validation():
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 3, 4, 4)), [0, 1], [0], "train")
    with pytest.raises(ContractError):
        Dataset(np.zeros((1, 3, 4, 4)), [0], [0], "validation")
    assert Modality.parse("thermal") is Modality.INFRARED
