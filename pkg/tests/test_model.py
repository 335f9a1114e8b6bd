"""Backbone, background grid, descriptor pooling, encode/decode, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskattn.checkpoint import load_model, read_checkpoint, save_checkpoint
from maskattn.errors import CheckpointError, ConfigError, ContractError, ShapeError, UsageError
from maskattn.model import (
    DescriptorSegmenter,
    DescriptorSet,
    MaskSet,
    ModelConfig,
    ablate_catch_all,
    downsample_mask,
    init_descriptors,
    initial_mask_channels,
    split_background_grid,
)
from maskattn.tensor import Tensor, backward, finite_diff_check, no_grad, record

TINY = dict(model_dim=16, num_heads=2, encoder_layers=1, decoder_layers=1, bg_grid=3, input_size=(32, 32))


def tiny_model(seed=0, **kw):
    return DescriptorSegmenter(ModelConfig(**{**TINY, **kw}), seed=seed)


def soft_masks(rng, n, h, w, lo=0.05, hi=0.42):
    return rng.uniform(lo, hi, (n, h, w))


# -- config ------------------------------------------------------------------------


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(model_dim=10, num_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(input_size=(30, 64))
    with pytest.raises(ConfigError):
        ModelConfig(input_size=(24, 24))  # < 32
    with pytest.raises(ConfigError):
        ModelConfig(attention_mode="wat")
    cfg = ModelConfig()
    assert cfg.encoder_layers == 5 and cfg.bg_grid == 3 and cfg.num_bg_cells == 9


def test_ablate_catch_all_flips_flag_only():
    cfg = ModelConfig(**TINY)
    ab = ablate_catch_all(cfg)
    assert ab.use_catch_all is False and cfg.use_catch_all is True
    assert ab.model_dim == cfg.model_dim and ab.bg_grid == cfg.bg_grid


# -- backbone -----------------------------------------------------------------------


def test_backbone_zero_image_zero_features():
    model = tiny_model()
    feats = model.extract_features(Tensor(np.zeros((3, 32, 32))))
    np.testing.assert_array_equal(feats.f8.data, 0.0)
    np.testing.assert_array_equal(feats.f4.data, 0.0)


def test_backbone_shape_contract():
    model = tiny_model()
    feats = model.extract_features(Tensor(np.random.default_rng(0).uniform(0, 1, (3, 48, 64))))
    assert feats.f8.data.shape == (16, 6, 8)
    assert feats.f4.data.shape == (16, 12, 16)


def test_backbone_rejects_bad_divisibility():
    model = tiny_model()
    with pytest.raises(ConfigError):
        model.extract_features(Tensor(np.zeros((3, 30, 32))))


def test_backbone_input_gradient():
    model = tiny_model(model_dim=8, num_heads=1)
    img = Tensor(np.random.default_rng(1).uniform(0, 1, (3, 16, 16)), grad_enabled=True)
    probe8 = Tensor(np.random.default_rng(2).normal(size=(8, 2, 2)))
    probe4 = Tensor(np.random.default_rng(3).normal(size=(8, 4, 4)))

    def f():
        feats = model.extract_features(img)
        return (feats.f8 * probe8).sum() + (feats.f4 * probe4).sum()

    assert finite_diff_check(f, [img]) < 1e-4


# -- background grid ------------------------------------------------------------------


def grid_oracle(object_masks, g):
    """Pixel-loop partition of the clipped background map."""
    n, h, w = object_masks.shape
    bg = np.clip(1.0 - object_masks.sum(axis=0), 0.0, 1.0)
    ys = [i * (h // g) for i in range(g)] + [h]
    xs = [j * (w // g) for j in range(g)] + [w]
    cells = np.zeros((g * g, h, w))
    for i in range(g):
        for j in range(g):
            for y in range(ys[i], ys[i + 1]):
                for x in range(xs[j], xs[j + 1]):
                    cells[i * g + j, y, x] = bg[y, x]
    return cells


def test_grid_no_objects_tiles_frame():
    cells = split_background_grid(Tensor(np.zeros((1, 9, 9))), 3).data
    assert cells.shape == (9, 9, 9)
    np.testing.assert_array_equal(cells.sum(axis=0), np.ones((9, 9)))
    for c in cells:
        assert c.sum() == 9.0  # 3x3 block of ones each


def test_grid_full_coverage_gives_zero_cells():
    masks = np.ones((2, 6, 6)) * 0.5
    cells = split_background_grid(Tensor(masks), 3).data
    np.testing.assert_array_equal(cells, np.zeros((9, 6, 6)))


def test_grid_block_case_matches_pixel_oracle():
    masks = np.zeros((1, 6, 6))
    masks[0, 2:4, 2:4] = 1.0
    got = split_background_grid(Tensor(masks), 3).data
    np.testing.assert_array_equal(got, grid_oracle(masks, 3))


@given(
    st.integers(1, 3),
    st.integers(2, 4),
    st.sampled_from([6, 7, 9, 12]),
    st.integers(0, 10_000),
)
@settings(max_examples=40, deadline=None)
def test_grid_partition_properties(n_obj, g, size, seed):
    rng = np.random.default_rng(seed)
    masks = rng.uniform(0, 1, (n_obj, size, size)) / n_obj
    bg = np.clip(1.0 - masks.sum(axis=0), 0.0, 1.0)
    cells = split_background_grid(Tensor(masks), g).data
    # disjoint supports: pointwise product of distinct cells is zero
    for i in range(g * g):
        for j in range(i + 1, g * g):
            assert (cells[i] * cells[j] == 0).all()
    # exact sum (no tolerance: disjoint supports add exactly)
    np.testing.assert_array_equal(cells.sum(axis=0), bg)


def test_grid_remainder_goes_to_last_cells():
    cells = split_background_grid(Tensor(np.zeros((1, 7, 7))), 3).data
    assert cells[8].sum() == 9.0  # last cell is 3x3
    assert cells[0].sum() == 4.0  # first cell is 2x2


def test_grid_differentiable():
    masks = Tensor(soft_masks(np.random.default_rng(4), 2, 6, 6), grad_enabled=True)
    probe = Tensor(np.random.default_rng(5).normal(size=(4, 6, 6)))

    def f():
        return (split_background_grid(masks, 2) * probe).sum()

    assert finite_diff_check(f, [masks]) < 1e-7


# -- descriptor pooling -----------------------------------------------------------------


def test_init_descriptors_uniform_mask_is_mean():
    rng = np.random.default_rng(6)
    f8 = rng.normal(size=(5, 4, 4))
    desc = init_descriptors(Tensor(f8), Tensor(np.ones((1, 4, 4)))).data
    np.testing.assert_allclose(desc[0], f8.reshape(5, -1).mean(axis=1), rtol=1e-6)


def test_init_descriptors_one_hot_picks_pixel():
    rng = np.random.default_rng(7)
    f8 = rng.normal(size=(3, 4, 4))
    mask = np.zeros((1, 4, 4))
    mask[0, 2, 1] = 1.0
    desc = init_descriptors(Tensor(f8), Tensor(mask)).data
    np.testing.assert_allclose(desc[0], f8[:, 2, 1], rtol=1e-5)


def test_init_descriptors_weighted_two_pixels():
    f8 = np.zeros((2, 2, 2))
    f8[:, 0, 0] = [1.0, 3.0]
    f8[:, 1, 1] = [5.0, 7.0]
    mask = np.zeros((1, 2, 2))
    mask[0, 0, 0] = 0.5
    mask[0, 1, 1] = 0.5
    desc = init_descriptors(Tensor(f8), Tensor(mask)).data
    eps = 1e-6
    expected = np.array([0.5 * 1 + 0.5 * 5, 0.5 * 3 + 0.5 * 7]) / (1.0 + eps)
    np.testing.assert_allclose(desc[0], expected, rtol=1e-12)


def test_init_descriptors_empty_mask_zero_descriptor():
    f8 = np.random.default_rng(8).normal(size=(3, 4, 4))
    desc = init_descriptors(Tensor(f8), Tensor(np.zeros((1, 4, 4)))).data
    np.testing.assert_array_equal(desc, np.zeros((1, 3)))


def test_init_descriptors_differentiable():
    rng = np.random.default_rng(9)
    f8 = Tensor(rng.normal(size=(3, 4, 4)), grad_enabled=True)
    masks = Tensor(soft_masks(rng, 2, 4, 4), grad_enabled=True)
    probe = Tensor(rng.normal(size=(2, 3)))

    def f():
        return (init_descriptors(f8, masks) * probe).sum()

    assert finite_diff_check(f, [f8, masks]) < 1e-6


def test_downsample_mask_area_average():
    m = np.arange(16.0).reshape(1, 4, 4) / 16.0
    got = downsample_mask(Tensor(m), 2).data
    expected = m.reshape(1, 2, 2, 2, 2).mean(axis=(2, 4))
    np.testing.assert_allclose(got, expected, atol=1e-15)
    assert got.min() >= 0.0 and got.max() <= 1.0


# -- encode ------------------------------------------------------------------------------


def features_for(model, seed=0, size=32):
    rng = np.random.default_rng(seed)
    with no_grad():
        return model.extract_features(Tensor(rng.uniform(0, 1, (3, size, size))))


def test_encode_zero_layers_returns_pooled():
    model = tiny_model(encoder_layers=0)
    feats = features_for(model)
    masks = Tensor(soft_masks(np.random.default_rng(10), 2, 32, 32))
    chans = initial_mask_channels(masks, 3)
    with no_grad():
        ds = model.encode(feats, chans)
        pooled = init_descriptors(feats.f8, downsample_mask(chans, 8))
    np.testing.assert_allclose(ds.all_descriptors().data, pooled.data, atol=1e-12)
    assert ds.num_objects == 2 and ds.count == 11


def test_encode_identical_masks_give_identical_descriptors():
    model = tiny_model(seed=3)
    feats = features_for(model, seed=11)
    one = np.zeros((1, 32, 32))
    one[0, 8:16, 8:16] = 1.0
    masks = Tensor(np.concatenate([one, one]))
    with no_grad():
        ds = model.encode(feats, initial_mask_channels(masks, 3))
    np.testing.assert_allclose(ds.foreground.data[0], ds.foreground.data[1], atol=1e-12)


def test_encode_permutation_equivariance():
    model = tiny_model(seed=4)
    feats = features_for(model, seed=12)
    rng = np.random.default_rng(13)
    masks = soft_masks(rng, 3, 32, 32, lo=0.01, hi=0.3)
    with no_grad():
        a = model.encode(feats, initial_mask_channels(Tensor(masks), 3))
        b = model.encode(feats, initial_mask_channels(Tensor(masks[[2, 0, 1]]), 3))
    np.testing.assert_allclose(b.foreground.data, a.foreground.data[[2, 0, 1]], atol=1e-10)
    np.testing.assert_allclose(b.background.data, a.background.data, atol=1e-10)


def test_encode_mask_gradient_nonzero():
    model = tiny_model()
    feats = features_for(model, seed=14)
    masks = Tensor(soft_masks(np.random.default_rng(15), 2, 32, 32), grad_enabled=True)
    with record():
        ds = model.encode(feats, initial_mask_channels(masks, 3))
        backward((ds.all_descriptors() * ds.all_descriptors()).sum())
    assert np.abs(masks.grad).max() > 1e-10


# -- decode ------------------------------------------------------------------------------


def encoded(model, seed=0):
    feats = features_for(model, seed=seed)
    masks = Tensor(soft_masks(np.random.default_rng(seed + 1), 2, 32, 32))
    with no_grad():
        return feats, model.encode(feats, initial_mask_channels(masks, 3))


def test_decode_channel_normalization_and_count():
    model = tiny_model(seed=5)
    feats, ds = encoded(model, seed=16)
    with no_grad():
        ms = model.decode(feats, [ds])
    assert ms.channels.data.shape == (12, 32, 32)
    np.testing.assert_allclose(ms.channels.data.sum(axis=0), 1.0, atol=1e-9)
    assert ms.channels.data.min() >= 0.0 and ms.channels.data.max() <= 1.0


def test_decode_identical_history_equals_single():
    model = tiny_model(seed=6)
    feats, ds = encoded(model, seed=17)
    with no_grad():
        one = model.decode(feats, [ds])
        many = model.decode(feats, [ds, ds, ds])
    np.testing.assert_allclose(one.channels.data, many.channels.data, atol=1e-12)


def test_decode_empty_history_rejected():
    model = tiny_model()
    feats, _ = encoded(model, seed=18)
    with pytest.raises(UsageError):
        model.decode(feats, [])


def test_decode_mismatched_counts_rejected():
    model = tiny_model(seed=7)
    feats, ds = encoded(model, seed=19)
    other = DescriptorSet(
        foreground=Tensor(np.zeros((3, 16))), background=Tensor(np.zeros((9, 16))), frame_index=1
    )
    with pytest.raises(ContractError):
        model.decode(feats, [ds, other])


def test_decode_catch_all_ablation_channel_count_and_logits():
    cfg = ModelConfig(**TINY)
    model_on = DescriptorSegmenter(cfg, seed=8)
    model_off = DescriptorSegmenter(ablate_catch_all(cfg), seed=8)
    # same seed -> identical parameters
    for a, b in zip(model_on.parameters(), model_off.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    feats, ds = encoded(model_on, seed=20)
    with no_grad():
        on, logits_on = model_on.decode(feats, [ds], return_logits=True)
        off, logits_off = model_off.decode(feats, [ds], return_logits=True)
    assert on.channels.data.shape[0] == off.channels.data.shape[0] + 1
    # shared channels identical bit-for-bit before the softmax
    np.testing.assert_array_equal(logits_on.data[:-1], logits_off.data)
    np.testing.assert_allclose(off.channels.data.sum(axis=0), 1.0, atol=1e-9)


def test_full_pipeline_mask_gradient():
    model = tiny_model(model_dim=16, num_heads=2)
    rng = np.random.default_rng(21)
    img = Tensor(rng.uniform(0, 1, (3, 16, 16)))
    masks = Tensor(soft_masks(rng, 2, 16, 16), grad_enabled=True)
    probe = Tensor(rng.normal(size=(12, 16, 16)))

    def f():
        feats = model.extract_features(img)
        ds = model.encode(feats, initial_mask_channels(masks, 3))
        return (model.decode(feats, [ds]).channels * probe).sum()

    assert finite_diff_check(f, [masks]) < 1e-3


def test_pipeline_permutation_equivariance_of_channels():
    model = tiny_model(seed=9)
    rng = np.random.default_rng(22)
    img = Tensor(rng.uniform(0, 1, (3, 32, 32)))
    masks = soft_masks(rng, 3, 32, 32, lo=0.01, hi=0.3)
    perm = [1, 2, 0]
    with no_grad():
        feats = model.extract_features(img)
        a = model.decode(feats, [model.encode(feats, initial_mask_channels(Tensor(masks), 3))])
        b = model.decode(
            feats, [model.encode(feats, initial_mask_channels(Tensor(masks[perm]), 3))]
        )
    np.testing.assert_allclose(
        b.channels.data[:3], a.channels.data[:3][perm], atol=1e-10
    )
    np.testing.assert_allclose(b.channels.data[3:], a.channels.data[3:], atol=1e-10)


# -- mask set / descriptor set types ---------------------------------------------------------


def test_mask_set_layout_validation():
    with pytest.raises(ShapeError):
        MaskSet(channels=Tensor(np.zeros((5, 4, 4))), num_objects=2, bg_grid=2, has_catch_all=True)
    ms = MaskSet(channels=Tensor(np.full((7, 4, 4), 1.0 / 7)), num_objects=2, bg_grid=2)
    assert ms.object_channels().data.shape == (2, 4, 4)
    assert ms.propagated_channels().data.shape == (6, 4, 4)


def test_descriptor_set_validation_and_bytes():
    ds = DescriptorSet(Tensor(np.ones((2, 8))), Tensor(np.ones((4, 8))), frame_index=3)
    assert ds.count == 6 and ds.dim == 8
    assert len(ds.state_bytes()) == 6 * 8 * 8
    with pytest.raises(ContractError):
        DescriptorSet(Tensor(np.ones((0, 8))).reshape(0, 8), Tensor(np.ones((4, 8))))


# -- checkpoints ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = tiny_model(seed=10)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    loaded = load_model(path)
    assert loaded.config == model.config
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert a.name == b.name
        np.testing.assert_array_equal(a.data, b.data)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    model = tiny_model(seed=11)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    blob = path.read_bytes()
    for cut in (len(blob) - 7, len(blob) // 2, 10):
        clipped = tmp_path / f"cut{cut}.ckpt"
        clipped.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            read_checkpoint(clipped)


def test_checkpoint_deterministic_bytes(tmp_path):
    model = tiny_model(seed=12)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, model)
    save_checkpoint(p2, model)
    assert p1.read_bytes() == p2.read_bytes()
