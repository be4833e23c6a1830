import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference_impl as ref
from zsal.blocks import BlockWeights, qkv_block, vv_block
from zsal.vision import EncodeMode, encode_image, patchify
from zsal.weights_io import ConfigError, ModelConfig, WeightStore, make_synthetic_model

MODES = [m.value for m in EncodeMode]


def with_entries(store, **changes):
    entries = dict(store.entries)
    entries.update(changes)
    return WeightStore(entries, store.metadata)


def zero_pos(store):
    return with_entries(store, **{"visual.positional_embedding": np.zeros_like(store["visual.positional_embedding"])})


def random_block(rng, width, scale=1.0, zero=False):
    mlp = 4 * width
    shapes = dict(
        ln_1_weight=(width,), ln_1_bias=(width,), qkv_weight=(3 * width, width), qkv_bias=(3 * width,),
        out_weight=(width, width), out_bias=(width,), ln_2_weight=(width,), ln_2_bias=(width,),
        fc_weight=(mlp, width), fc_bias=(mlp,), proj_weight=(width, mlp), proj_bias=(width,),
    )
    make = (lambda s: np.zeros(s, np.float32)) if zero else (lambda s: (scale * rng.standard_normal(s)).astype(np.float32))
    return BlockWeights(**{k: make(s) for k, s in shapes.items()})


def test_token_counts(tiny_store, tiny_config):
    image = np.zeros((3, 32, 32), np.float32)
    assert patchify(image, tiny_store, tiny_config).shape == (5, tiny_config.vision_width)
    assert ModelConfig().num_patches == 225


def test_zero_image_zero_pos_gives_identical_rows(tiny_store, tiny_config):
    tokens = patchify(np.zeros((3, 32, 32), np.float32), zero_pos(tiny_store), tiny_config)
    assert np.all(tokens[1:] == tokens[1])


def test_zero_weights_are_identity(rng):
    w = random_block(rng, 8, zero=True)
    w = BlockWeights(**{**w.__dict__, "ln_1_weight": np.ones(8, np.float32), "ln_2_weight": np.ones(8, np.float32)})
    z = rng.standard_normal((5, 8)).astype(np.float32)
    assert np.array_equal(qkv_block(z, w, 2), z)
    assert np.array_equal(vv_block(z, w, 2), z)


def test_single_token_qkv_block(rng):
    w = random_block(rng, 8, scale=0.3)
    z = rng.standard_normal((1, 8)).astype(np.float32)
    wd = {k: v.astype(np.float64) for k, v in w.__dict__.items()}
    h = ref.ln(z.astype(np.float64), wd["ln_1_weight"], wd["ln_1_bias"])
    v = (h @ wd["qkv_weight"].T + wd["qkv_bias"])[:, 16:]
    mid = z + v @ wd["out_weight"].T + wd["out_bias"]  # one key -> attention weight 1
    h2 = ref.gelu(ref.ln(mid, wd["ln_2_weight"], wd["ln_2_bias"]) @ wd["fc_weight"].T + wd["fc_bias"])
    expected = mid + h2 @ wd["proj_weight"].T + wd["proj_bias"]
    np.testing.assert_allclose(qkv_block(z, w, 2), expected, rtol=1e-5, atol=1e-5)


def test_single_token_vv_with_identity_projection(rng):
    w = random_block(rng, 8)
    w = BlockWeights(**{**w.__dict__, "out_weight": np.eye(8, dtype=np.float32), "out_bias": np.zeros(8, np.float32)})
    z = rng.standard_normal((1, 8)).astype(np.float32)
    np.testing.assert_allclose(vv_block(z, w, 2), 2 * z, rtol=1e-6)


def test_random_block_matches_reference(rng):
    w = random_block(rng, 8, scale=0.3)
    z = rng.standard_normal((6, 8)).astype(np.float32)
    wd = {
        "ln_1.weight": w.ln_1_weight, "ln_1.bias": w.ln_1_bias, "attn.qkv_weight": w.qkv_weight,
        "attn.qkv_bias": w.qkv_bias, "attn.out_weight": w.out_weight, "attn.out_bias": w.out_bias,
        "ln_2.weight": w.ln_2_weight, "ln_2.bias": w.ln_2_bias, "mlp.fc_weight": w.fc_weight,
        "mlp.fc_bias": w.fc_bias, "mlp.proj_weight": w.proj_weight, "mlp.proj_bias": w.proj_bias,
    }
    wd = {k: v.astype(np.float64) for k, v in wd.items()}
    np.testing.assert_allclose(qkv_block(z, w, 2), ref.block(z.astype(np.float64), wd, 2), rtol=1e-5, atol=1e-5)


def test_heads_must_divide_width(rng):
    with pytest.raises(ConfigError):
        qkv_block(rng.standard_normal((2, 8)).astype(np.float32), random_block(rng, 8), 3)


def test_qkv_mode_matches_reference_forward(fixture_store, fixture_config, rng):
    image = rng.standard_normal((3, 64, 64)).astype(np.float32)
    out = encode_image(image, fixture_store, fixture_config, "qkv")
    v_ref, p_ref = ref.encode_image_qkv(image, fixture_store, fixture_config)
    np.testing.assert_allclose(out.v, v_ref, atol=1e-5)
    np.testing.assert_allclose(out.patches, p_ref, atol=1e-5)


def test_shapes_and_class_token_shared(fixture_store, fixture_config, rng):
    image = rng.standard_normal((3, 64, 64)).astype(np.float32)
    outs = {m: encode_image(image, fixture_store, fixture_config, m) for m in MODES}
    for o in outs.values():
        assert o.v.shape == (16,) and o.patches.shape == (64, 16) and o.grid == (8, 8)
        np.testing.assert_allclose(np.linalg.norm(o.patches, axis=1), 1, atol=1e-5)
        assert o.v.tobytes() == outs["qkv"].v.tobytes()
    assert len({o.patches.tobytes() for o in outs.values()}) == 4


def test_vv_multi_from_last_layer_equals_vv_last(fixture_store, fixture_config, rng):
    image = rng.standard_normal((3, 64, 64)).astype(np.float32)
    cfg = fixture_config.replace(vv_start_layer=fixture_config.vision_layers - 1)
    a = encode_image(image, fixture_store, cfg, "vv_multi").patches
    b = encode_image(image, fixture_store, cfg, "vv_last").patches
    assert np.array_equal(a, b)


def test_chained_and_dual_path_differ_but_agree_on_single_layer(fixture_store, fixture_config, rng):
    image = rng.standard_normal((3, 64, 64)).astype(np.float32)
    dual = encode_image(image, fixture_store, fixture_config.replace(vv_start_layer=0), "vv_multi").patches
    chained = encode_image(
        image, fixture_store, fixture_config.replace(vv_start_layer=0, vv_mode="chained"), "vv_multi"
    ).patches
    assert not np.allclose(dual, chained)
    last = fixture_config.vision_layers - 1
    a = encode_image(image, fixture_store, fixture_config.replace(vv_start_layer=last), "vv_multi").patches
    b = encode_image(
        image, fixture_store, fixture_config.replace(vv_start_layer=last, vv_mode="chained"), "vv_multi"
    ).patches
    assert np.array_equal(a, b)


def permute_patches(image, perm, p):
    c, s, _ = image.shape
    g = s // p
    tiles = image.reshape(c, g, p, g, p).transpose(1, 3, 0, 2, 4).reshape(g * g, c, p, p)
    tiles = tiles[perm]
    return tiles.reshape(g, g, c, p, p).transpose(2, 0, 3, 1, 4).reshape(c, s, s)


@pytest.mark.parametrize("mode", MODES)
def test_cyclic_shift_equivariance(mode, fixture_store, fixture_config, rng):
    store = zero_pos(fixture_store)
    image = rng.standard_normal((3, 64, 64)).astype(np.float32)
    perm = np.roll(np.arange(64), 5)
    a = encode_image(image, store, fixture_config, mode)
    b = encode_image(permute_patches(image, perm, 8), store, fixture_config, mode)
    np.testing.assert_allclose(b.patches, a.patches[perm], atol=1e-5)
    np.testing.assert_allclose(b.v, a.v, atol=1e-5)


@settings(max_examples=12, deadline=None)
@given(st.permutations(list(range(4))), st.sampled_from(MODES), st.integers(0, 2**31))
def test_permutation_equivariance_property(perm, mode, seed):
    cfg = ModelConfig.tiny()
    store = zero_pos(make_synthetic_model(cfg, seed % 7))
    image = np.random.default_rng(seed).standard_normal((3, 32, 32)).astype(np.float32)
    perm = np.array(perm)
    a = encode_image(image, store, cfg, mode)
    b = encode_image(permute_patches(image, perm, 16), store, cfg, mode)
    np.testing.assert_allclose(b.patches, a.patches[perm], atol=1e-5)


def test_bad_inputs(fixture_store, fixture_config):
    with pytest.raises(ConfigError):
        encode_image(np.zeros((3, 32, 32), np.float32), fixture_store, fixture_config)
    with pytest.raises(ConfigError):
        encode_image(np.zeros((3, 64, 64), np.float32), fixture_store, fixture_config, "kqv")


def test_determinism(fixture_store, fixture_config, rng):
    image = rng.standard_normal((3, 64, 64)).astype(np.float32)
    a = encode_image(image, fixture_store, fixture_config)
    b = encode_image(image, fixture_store, fixture_config)
    assert a.patches.tobytes() == b.patches.tobytes()
