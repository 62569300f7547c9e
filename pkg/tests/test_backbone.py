"""Frozen encoder stack and the checkpoint container."""

import numpy as np
import pytest

import gft.backbone as bb
import gft.numcore as nc
from gft.pointops import EmbeddingMatrix


def small_cfg():
    return bb.BackboneConfig(embed_dim=8, num_layers=3, num_heads=2,
                             mlp_ratio=2)


def random_embedding(rng, rows=6, dim=8, prompts=0):
    data = nc.tensor(rng.normal(size=(rows, dim)))
    return EmbeddingMatrix(data, num_prompts=prompts,
                           num_patches=rows - prompts - 1)


def test_config_validation():
    with pytest.raises(ValueError):
        bb.BackboneConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ValueError):
        bb.BackboneConfig(num_layers=0)


def test_backbone_params_are_frozen_with_unique_names():
    layers = bb.init_backbone(np.random.default_rng(0), small_cfg())
    params = [p for lyr in layers for p in lyr.parameters()]
    assert all(p.frozen for p in params)
    names = [p.name for p in params]
    assert len(set(names)) == len(names) == 3 * 16
    assert names[0].startswith("encoder.layer01.")


def test_attention_probabilities_are_row_stochastic():
    rng = np.random.default_rng(1)
    q = nc.tensor(rng.normal(size=(5, 8)))
    k = nc.tensor(rng.normal(size=(7, 8)))
    v = nc.tensor(rng.normal(size=(7, 8)))
    cap = {}
    out = bb.scaled_dot_attention(q, k, v, num_heads=2, capture=cap)
    assert out.values.shape == (5, 8)
    probs = cap["probs"]
    assert probs.shape == (2, 5, 7)
    np.testing.assert_allclose(probs.sum(axis=2), 1.0, atol=1e-12)


def test_attention_head_count_must_divide_width():
    rng = np.random.default_rng(2)
    t = nc.tensor(rng.normal(size=(4, 9)))
    with pytest.raises(ValueError):
        bb.scaled_dot_attention(t, t, t, num_heads=2)


def test_encode_taps_and_attention_taps():
    rng = np.random.default_rng(3)
    layers = bb.init_backbone(rng, small_cfg())
    e0 = random_embedding(rng)
    final, taps, attn = bb.encode(e0, layers, num_heads=2, taps=(1, 3),
                                  attention_taps=(2,))
    assert set(taps) == {1, 3} and set(attn) == {2}
    # the last tap equals the stack output (no extra normalization here)
    np.testing.assert_array_equal(taps[3].data.values, final.data.values)
    assert attn[2].shape == (2, 6, 6)
    # running the stack manually reproduces the tap at layer 1
    manual = bb.self_attention_layer(e0, layers[0], 2)
    np.testing.assert_array_equal(taps[1].data.values, manual.data.values)


def test_encode_hooks_run_before_their_layer():
    rng = np.random.default_rng(4)
    layers = bb.init_backbone(rng, small_cfg())
    e0 = random_embedding(rng)
    seen = {}

    def hook(e):
        seen["rows"] = e.data.values.copy()
        return e

    final_plain, _, _ = bb.encode(e0, layers, num_heads=2)
    final_hooked, _, _ = bb.encode(e0, layers, num_heads=2, hooks={1: hook})
    # identity hook at layer 1 sees exactly the input embedding
    np.testing.assert_array_equal(seen["rows"], e0.data.values)
    np.testing.assert_array_equal(final_plain.data.values,
                                  final_hooked.data.values)


def test_encode_rejects_layout_breaking_hook():
    rng = np.random.default_rng(5)
    layers = bb.init_backbone(rng, small_cfg())
    e0 = random_embedding(rng)

    def bad_hook(e):
        return EmbeddingMatrix(nc.tensor(e.data.values[:-1]),
                               e.num_prompts, e.num_patches - 1)

    with pytest.raises(ValueError):
        bb.encode(e0, layers, num_heads=2, hooks={2: bad_hook})


def test_encode_validates_tap_indices():
    rng = np.random.default_rng(6)
    layers = bb.init_backbone(rng, small_cfg())
    e0 = random_embedding(rng)
    with pytest.raises(ValueError):
        bb.encode(e0, layers, num_heads=2, taps=(0,))
    with pytest.raises(ValueError):
        bb.encode(e0, layers, num_heads=2, taps=(4,))


def make_params(rng, frozen_mask=(False, True)):
    return [
        nc.param("alpha", rng.normal(size=(3, 4)), frozen=frozen_mask[0]),
        nc.param("beta.bias", rng.normal(size=7), frozen=frozen_mask[1]),
    ]


def test_checkpoint_round_trip_is_float32_exact(tmp_path):
    rng = np.random.default_rng(7)
    params = make_params(rng)
    path = tmp_path / "w.ckpt"
    bb.save_checkpoint(path, params)
    # the on-disk payload is float32; restoring twice is a fixed point
    fresh = make_params(np.random.default_rng(99), frozen_mask=(True, False))
    bb.load_checkpoint(path, fresh)
    assert fresh[0].frozen is False and fresh[1].frozen is True
    bb.save_checkpoint(tmp_path / "w2.ckpt", fresh)
    assert (tmp_path / "w.ckpt").read_bytes() == (tmp_path / "w2.ckpt").read_bytes()
    for a, b in zip(params, fresh):
        np.testing.assert_array_equal(
            a.tensor.values.astype(np.float32), b.tensor.values.astype(np.float32))


def test_checkpoint_load_is_order_independent(tmp_path):
    rng = np.random.default_rng(8)
    params = make_params(rng)
    path = tmp_path / "w.ckpt"
    bb.save_checkpoint(path, params)
    fresh = make_params(np.random.default_rng(1))[::-1]  # reversed order
    bb.load_checkpoint(path, fresh)
    np.testing.assert_array_equal(fresh[1].tensor.values,
                                  params[0].tensor.values.astype(np.float32))


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(bb.CheckpointError):
        bb.load_checkpoint(path, make_params(np.random.default_rng(0)))


def test_checkpoint_rejects_truncation(tmp_path):
    rng = np.random.default_rng(9)
    params = make_params(rng)
    path = tmp_path / "w.ckpt"
    bb.save_checkpoint(path, params)
    blob = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(blob[:-5])
    with pytest.raises(bb.CheckpointError):
        bb.load_checkpoint(tmp_path / "cut.ckpt", make_params(rng))


def test_checkpoint_rejects_trailing_bytes(tmp_path):
    rng = np.random.default_rng(10)
    params = make_params(rng)
    path = tmp_path / "w.ckpt"
    bb.save_checkpoint(path, params)
    (tmp_path / "fat.ckpt").write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(bb.CheckpointError):
        bb.load_checkpoint(tmp_path / "fat.ckpt", make_params(rng))


def test_checkpoint_rejects_unknown_and_missing_names(tmp_path):
    rng = np.random.default_rng(11)
    params = make_params(rng)
    path = tmp_path / "w.ckpt"
    bb.save_checkpoint(path, params)
    only_one = [make_params(rng)[0]]
    with pytest.raises(bb.CheckpointError):
        bb.load_checkpoint(path, only_one)  # file has beta.bias, model lacks it
    path2 = tmp_path / "one.ckpt"
    bb.save_checkpoint(path2, only_one)
    with pytest.raises(bb.CheckpointError):
        bb.load_checkpoint(path2, make_params(rng))  # model wants beta.bias


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    rng = np.random.default_rng(12)
    path = tmp_path / "w.ckpt"
    bb.save_checkpoint(path, make_params(rng))
    wrong = [nc.param("alpha", rng.normal(size=(4, 3))),
             nc.param("beta.bias", rng.normal(size=7))]
    with pytest.raises(bb.CheckpointError):
        bb.load_checkpoint(path, wrong)


def test_checkpoint_rejects_duplicate_model_names(tmp_path):
    rng = np.random.default_rng(13)
    dupes = [nc.param("same", rng.normal(size=2)),
             nc.param("same", rng.normal(size=2))]
    with pytest.raises(bb.CheckpointError):
        bb.save_checkpoint(tmp_path / "d.ckpt", dupes)
