import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vireid import numerics as nx
from vireid.errors import ContractError
from vireid.model import (
    BNNeck,
    CrossModalityTransformer,
    EmbeddingTables,
    EncoderWeights,
    Modality,
    ModelConfig,
    PatchConfig,
    class_feature,
    embed_input,
    encoder_forward,
    extract_patches,
    id_logits,
    seq_len,
)
from vireid.numerics import Tape, Tensor


def tiny_config(**kw):
    base = dict(num_ids=3, img_h=12, img_w=8, patch=4, stride=2, dim=16, depth=2, heads=2, mlp_ratio=2)
    base.update(kw)
    return ModelConfig(**base)


def randomize_me(model, rng, same=False):
    model.tables.me_vis.data = rng.standard_normal(model.config.dim)
    model.tables.me_ir.data = model.tables.me_vis.data.copy() if same else rng.standard_normal(model.config.dim)


# -- sequence length -------------------------------------------------------------
@pytest.mark.parametrize("stride, n", [(16, 128), (14, 162), (12, 210), (10, 300), (8, 465)])
def test_seq_len_large_images(stride, n):
    assert seq_len(256, 128, 16, stride) == n


def test_seq_len_single_patch():
    assert seq_len(16, 16, 16, 8) == 1


def test_default_model_has_105_patches():
    assert ModelConfig(num_ids=2).num_patches == 15 * 7


@pytest.mark.parametrize("args", [(8, 16, 16, 8), (16, 8, 16, 8), (16, 16, 8, 9), (16, 16, 8, 0)])
def test_seq_len_rejects_bad_geometry(args):
    with pytest.raises(ContractError):
        seq_len(*args)


def test_model_config_rejects_heads_not_dividing_dim():
    with pytest.raises(ContractError):
        tiny_config(dim=15, heads=2)


# -- patches -----------------------------------------------------------------------
def test_whole_image_patch():
    img = np.random.default_rng(0).random((3, 16, 16))
    p = extract_patches(img, PatchConfig(16, 8))
    assert p.shape == (1, 3 * 256)
    np.testing.assert_array_equal(p[0], img.reshape(-1))


def test_two_overlapping_patches():
    img = np.random.default_rng(1).random((3, 24, 16))
    p = extract_patches(img, PatchConfig(16, 8))
    assert p.shape == (2, 3 * 256)
    # oracle: explicit slicing at anchors (0, 0) and (8, 0)
    np.testing.assert_array_equal(p[0], img[:, 0:16, 0:16].reshape(-1))
    np.testing.assert_array_equal(p[1], img[:, 8:24, 0:16].reshape(-1))
    shared_a = p[0].reshape(3, 16, 16)[:, 8:16]
    shared_b = p[1].reshape(3, 16, 16)[:, 0:8]
    np.testing.assert_array_equal(shared_a, shared_b)


def test_constant_image_gives_identical_patches():
    p = extract_patches(np.full((3, 20, 12), 0.3), PatchConfig(8, 4))
    assert (p == 0.3).all()


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_patches_match_index_oracle(patch, rows, cols, seed):
    stride = np.random.default_rng(seed).integers(1, patch + 1)
    h, w = patch + (rows - 1) * stride, patch + (cols - 1) * stride
    img = np.random.default_rng(seed).random((3, h, w))
    p = extract_patches(img, PatchConfig(patch, stride))
    expected = [img[:, r * stride:r * stride + patch, c * stride:c * stride + patch].reshape(-1)
                for r in range(rows) for c in range(cols)]
    np.testing.assert_array_equal(p, np.array(expected))


@given(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_non_overlapping_patches_tile_image(patch, rows, cols, seed):
    img = np.random.default_rng(seed).random((3, rows * patch, cols * patch))
    p = extract_patches(img, PatchConfig(patch, patch)).reshape(rows, cols, 3, patch, patch)
    rebuilt = p.transpose(2, 0, 3, 1, 4).reshape(img.shape)
    np.testing.assert_array_equal(rebuilt, img)
    assert p.size == img.size


# -- input embedding -----------------------------------------------------------------
def _tables(rng, n, d):
    return EmbeddingTables(Tensor(rng.standard_normal((n + 1, d))), Tensor(rng.standard_normal(d)),
                           Tensor(rng.standard_normal(d)), Tensor(rng.standard_normal(d)))


def test_embedding_independent_of_modality_when_me_zero(rng):
    n, d, pd = 5, 6, 12
    tables = _tables(rng, n, d)
    tables.me_vis.data[:] = 0.0
    tables.me_ir.data[:] = 0.0
    patches, w, b = rng.random((n, pd)), rng.standard_normal((pd, d)), rng.standard_normal(d)
    a = embed_input(patches, tables, "vis", w, b).data
    c = embed_input(patches, tables, "ir", w, b).data
    np.testing.assert_array_equal(a, c)


def test_modality_difference_is_row_broadcast(rng):
    n, d, pd = 7, 8, 12
    tables = _tables(rng, n, d)
    patches, w, b = rng.random((n, pd)), rng.standard_normal((pd, d)), rng.standard_normal(d)
    diff = embed_input(patches, tables, Modality.VISIBLE, w, b).data - embed_input(patches, tables, Modality.INFRARED, w, b).data
    np.testing.assert_array_equal(diff[0], np.zeros(d))
    expected = tables.me_vis.data - tables.me_ir.data
    np.testing.assert_allclose(diff[1:], np.broadcast_to(expected, (n, d)), rtol=0, atol=1e-12)


def test_zero_patches_give_position_plus_modality(rng):
    n, d = 4, 5
    tables = _tables(rng, n, d)
    out = embed_input(np.zeros((n, 9)), tables, "ir", rng.standard_normal((9, d)), np.zeros(d)).data
    np.testing.assert_allclose(out[1:], tables.pos.data[1:] + tables.me_ir.data, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out[0], tables.cls.data + tables.pos.data[0], rtol=0, atol=1e-15)


def test_class_token_gets_modality_only_when_switched_on(rng):
    n, d = 3, 4
    tables = _tables(rng, n, d)
    args = (np.zeros((n, 6)), tables)
    w, b = np.zeros((6, d)), np.zeros(d)
    on = embed_input(*args, "vis", w, b, me_on_class_token=True).data[0]
    off = embed_input(*args, "vis", w, b).data[0]
    np.testing.assert_allclose(on - off, tables.me_vis.data, atol=1e-15)


def test_embedding_rejects_patch_count_mismatch(rng):
    tables = _tables(rng, 4, 3)
    with pytest.raises(ContractError):
        embed_input(np.zeros((5, 6)), tables, "vis", np.zeros((6, 3)), np.zeros(3))


# -- encoder ----------------------------------------------------------------------------
def test_zero_depth_encoder_is_identity(rng):
    x = rng.standard_normal((2, 6, 8))
    enc = EncoderWeights(Tensor(np.zeros((1, 8))), Tensor(np.zeros(8)), [], Tensor(np.ones(8)),
                         Tensor(np.zeros(8)), heads=2)
    np.testing.assert_array_equal(encoder_forward(x, enc).data, x)
    np.testing.assert_array_equal(class_feature(encoder_forward(x, enc)).data, x[:, 0])


def test_class_output_invariant_to_patch_permutation(rng):
    model = CrossModalityTransformer(tiny_config(), seed=3)
    tokens = rng.standard_normal((1, model.config.num_patches + 1, 16))
    perm = np.concatenate([[0], 1 + rng.permutation(model.config.num_patches)])
    a = class_feature(encoder_forward(tokens, model.encoder)).data
    b = class_feature(encoder_forward(tokens[:, perm], model.encoder)).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_full_model_patch_permutation_with_embeddings_zeroed(rng):
    model = CrossModalityTransformer(tiny_config(stride=4, img_h=12, img_w=12), seed=4)
    model.tables.pos.data[:] = 0.0
    img = rng.random((1, 3, 12, 12))
    # swap the two 4x4 tiles at anchors (0,0) and (8,4): a permutation of patch rows
    swapped = img.copy()
    swapped[:, :, 0:4, 0:4], swapped[:, :, 8:12, 4:8] = img[:, :, 8:12, 4:8], img[:, :, 0:4, 0:4]
    a = model.backbone(img, "vis").data
    b = model.backbone(swapped, "vis").data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_encoder_gradients_pass_check(rng):
    model = CrossModalityTransformer(tiny_config(), seed=5)
    tokens = rng.standard_normal((2, model.config.num_patches + 1, 16))
    probe = rng.standard_normal((2, 16))
    params = [p for blk in model.encoder.blocks for p in vars(blk).values()]
    params += [model.encoder.norm_w, model.encoder.norm_b]

    def f():
        return nx.sum(nx.mul(class_feature(encoder_forward(tokens, model.encoder)), probe))

    err = nx.grad_check_tensors(f, params, eps=1e-6, max_coords=4, rng=np.random.default_rng(0))
    assert err < 1e-4


def test_batch_feature_order_preserved(rng):
    model = CrossModalityTransformer(tiny_config(), seed=6)
    imgs = rng.random((4, 3, 12, 8))
    batch = model.backbone(imgs, ["vis", "ir", "vis", "ir"]).data
    for i in range(4):
        single = model.backbone(imgs[i:i + 1], ["vis", "ir"][i % 2]).data[0]
        np.testing.assert_allclose(batch[i], single, rtol=0, atol=1e-12)


# -- whole-network modality behaviour ------------------------------------------------------
def test_equal_modality_embeddings_make_network_tag_blind(rng):
    model = CrossModalityTransformer(tiny_config(), seed=7)
    randomize_me(model, rng, same=True)
    imgs = rng.random((3, 3, 12, 8))
    a = model.forward(imgs, ["vis"] * 3, training=False)
    b = model.forward(imgs, ["ir"] * 3, training=False)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)


def test_distinct_modality_embeddings_change_output(rng):
    model = CrossModalityTransformer(tiny_config(), seed=7)
    randomize_me(model, rng)
    imgs = rng.random((2, 3, 12, 8))
    a = model.backbone(imgs, "vis").data
    b = model.backbone(imgs, "ir").data
    assert not np.allclose(a, b)


def test_modality_embeddings_start_at_zero():
    model = CrossModalityTransformer(tiny_config(), seed=0)
    assert not model.tables.me_vis.data.any() and not model.tables.me_ir.data.any()
    assert model.tables.me_vis is not model.tables.me_ir


def test_end_to_end_gradient(rng):
    model = CrossModalityTransformer(tiny_config(), seed=8)
    randomize_me(model, rng)
    imgs = rng.random((4, 3, 12, 8))
    mods = [0, 1, 0, 1]
    probe = rng.standard_normal((4, 3))

    def f():
        _, _, logits = model.forward(imgs, mods, training=True)
        return nx.sum(nx.mul(logits, probe))

    params = list(model.named_parameters().values())
    # the BN running stats move on every forward; the check only reads outputs
    err = nx.grad_check_tensors(f, params, eps=1e-6, max_coords=3, rng=np.random.default_rng(1))
    assert err < 1e-4


def test_model_parameter_names_unique_and_complete():
    model = CrossModalityTransformer(tiny_config(depth=1), seed=0)
    names = set(model.named_parameters())
    for required in ("me_vis", "me_ir", "pos_embed", "cls_token", "patch_proj.weight", "neck.weight",
                     "classifier.weight", "blocks.0.attn.q.weight", "norm.bias"):
        assert required in names
    assert model.named_parameters()["pos_embed"].shape == (model.config.num_patches + 1, 16)


# -- BN neck -----------------------------------------------------------------------------
def test_neck_zero_variance_dimension_is_finite(rng):
    v = rng.standard_normal((5, 4))
    v[:, 2] = 1.5
    out = BNNeck(4)(v).data
    assert np.isfinite(out).all()
    np.testing.assert_array_equal(out[:, 2], 0.0)


def test_neck_leaves_normalized_batch_alone(rng):
    v = rng.standard_normal((50, 3))
    v = (v - v.mean(0)) / v.std(0)
    out = BNNeck(3, eps=1e-10)(v).data
    np.testing.assert_allclose(out, v, atol=1e-8)


@pytest.mark.parametrize("k", [1, 5, 200])
def test_neck_running_stats_recurrence(rng, k):
    v = rng.standard_normal((6, 3)) * 2 + 1
    neck = BNNeck(3, momentum=0.1)
    for _ in range(k):
        neck(v)
    keep = 0.9 ** k
    np.testing.assert_allclose(neck.running_mean, (1 - keep) * v.mean(0), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(neck.running_var, keep + (1 - keep) * v.var(0), rtol=1e-12)


def test_neck_converges_to_batch_stats(rng):
    v = rng.standard_normal((6, 3))
    neck = BNNeck(3)
    for _ in range(400):
        neck(v)
    np.testing.assert_allclose(neck.running_mean, v.mean(0), atol=1e-12)
    np.testing.assert_allclose(neck.running_var, v.var(0), atol=1e-12)


def test_neck_inference_uses_running_stats(rng):
    neck = BNNeck(2)
    neck.running_mean = np.array([1.0, -1.0])
    neck.running_var = np.array([4.0, 9.0])
    out = neck(np.array([[3.0, 2.0]]), training=False).data
    np.testing.assert_allclose(out, [[2.0 / np.sqrt(4 + 1e-5), 3.0 / np.sqrt(9 + 1e-5)]])


def test_neck_training_needs_two_samples():
    with pytest.raises(ContractError):
        BNNeck(3)(np.zeros((1, 3)))


# -- classifier head ---------------------------------------------------------------------------
def test_zero_classifier_gives_zero_logits(rng):
    out = id_logits(rng.standard_normal((3, 4)), np.zeros((4, 5)), np.zeros(5)).data
    np.testing.assert_array_equal(out, 0.0)


def test_one_hot_classifier_selects_coordinates(rng):
    f = rng.standard_normal((3, 4))
    w = np.zeros((4, 2))
    w[2, 0] = w[0, 1] = 1.0
    np.testing.assert_array_equal(id_logits(f, w).data, f[:, [2, 0]])


def test_classifier_gradient(rng):
    f = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    b = Tensor(rng.standard_normal(5), requires_grad=True)
    probe = rng.standard_normal((3, 5))
    err = nx.grad_check_tensors(lambda: nx.sum(nx.mul(id_logits(f, w, b), probe)), [f, w, b], eps=1e-6)
    assert err < 1e-6


# -- inference path ------------------------------------------------------------------------------
def test_extract_features_matches_inference_forward(rng):
    model = CrossModalityTransformer(tiny_config(), seed=9)
    imgs = rng.random((5, 3, 12, 8))
    mods = [0, 1, 1, 0, 1]
    feats = model.extract_features(imgs, mods, batch_size=2)
    _, f, _ = model.forward(imgs, mods, training=False)
    np.testing.assert_allclose(feats, f.data, rtol=0, atol=1e-12)


def test_extract_features_records_nothing(rng):
    model = CrossModalityTransformer(tiny_config(), seed=9)
    with Tape() as tape:
        model.extract_features(rng.random((2, 3, 12, 8)), "ir")
    assert len(tape) == 0
