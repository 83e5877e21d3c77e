import math

import numpy as np
import pytest
from scipy.special import softmax

from priornet.backbone import (
    EncoderConfig,
    PriorNetModel,
    attention_forward,
    classify,
    encode,
    frozen_param_shapes,
    load_checkpoint,
    patchify,
    save_checkpoint,
    sinusoidal_positions,
)
from priornet.lora import LoraAdapter, PlacementPolicy, merge_adapter, place_adapters
from priornet.numerics import ShapeError, finite_difference_gradient, relative_error

TINY = EncoderConfig(d=8, num_blocks=3, heads=2, tubelet=(2, 4, 4), clip_length=4, image_size=8,
                     num_classes=3, seed=7)


def _clips(n, cfg=TINY, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, cfg.clip_length, cfg.image_size, cfg.image_size, 3))


def _randomize_adapters(model, seed=1):
    rng = np.random.default_rng(seed)
    for ad in model.adapters.values():
        ad.A[...] = rng.normal(0, 0.3, size=ad.A.shape)
        ad.B[...] = rng.normal(0, 0.3, size=ad.B.shape)


def reference_forward(model, frames):
    """Token-by-token forward on merged weights, sharing no code with the model."""
    cfg = model.cfg
    t, ph, pw = cfg.tubelet
    N, H, W = frames.shape[:3]
    tokens = []
    for a in range(N // t):
        for b in range(H // ph):
            for c in range(W // pw):
                patch = frames[a * t:(a + 1) * t, b * ph:(b + 1) * ph, c * pw:(c + 1) * pw]
                tokens.append(patch.reshape(-1) @ model.frozen["embed.W"] + model.frozen["embed.b"])
    L = len(tokens)
    pe = np.zeros((L, cfg.d))
    for pos in range(L):
        for k in range(cfg.d // 2):
            ang = pos / 10000 ** (2 * k / cfg.d)
            pe[pos, 2 * k], pe[pos, 2 * k + 1] = math.sin(ang), math.cos(ang)
    x = np.array(tokens) + cfg.pos_scale * pe

    def ln(v, g, b):
        return (v - v.mean(-1, keepdims=True)) / np.sqrt(v.var(-1, keepdims=True) + cfg.ln_eps) * g + b

    def gelu(v):
        return 0.5 * v * (1 + np.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))

    dh = cfg.d // cfg.heads
    for i in range(cfg.num_blocks):
        f = {k.split(".", 1)[1]: v for k, v in model.frozen.items() if k.startswith(f"block{i}.")}
        W = {}
        for p in "qkv":
            ad = model.adapters.get((i, p))
            W[p] = f["attn." + p] if ad is None else merge_adapter(f["attn." + p], ad)
        h = ln(x, f["ln1.g"], f["ln1.b"])
        q, k, v = h @ W["q"], h @ W["k"], h @ W["v"]
        out = np.zeros_like(x)
        for hd in range(cfg.heads):
            s = slice(hd * dh, (hd + 1) * dh)
            att = softmax(q[:, s] @ k[:, s].T / math.sqrt(dh), axis=1)
            out[:, s] = att @ v[:, s]
        x = x + out @ f["attn.o"] + f["attn.o_bias"]
        h = ln(x, f["ln2.g"], f["ln2.b"])
        x = x + gelu(h @ f["mlp.W1"] + f["mlp.b1"]) @ f["mlp.W2"] + f["mlp.b2"]
    feat = ln(x, model.frozen["final_ln.g"], model.frozen["final_ln.b"]).mean(0)
    return feat @ model.head["head.W"] + model.head["head.b"]


class TestForward:
    def test_matches_reference_without_adapters(self):
        model = PriorNetModel.build(TINY)
        for clip in _clips(3):
            np.testing.assert_allclose(model.forward(clip)[0], reference_forward(model, clip), atol=1e-12)

    def test_matches_reference_with_adapters(self):
        model = place_adapters(PriorNetModel.build(TINY), PlacementPolicy("all"), rank=2, alpha=3.0)
        _randomize_adapters(model)
        for clip in _clips(3, seed=1):
            np.testing.assert_allclose(model.forward(clip)[0], reference_forward(model, clip), atol=1e-12)

    def test_zero_init_adapters_are_identity(self):
        base = PriorNetModel.build(TINY)
        adapted = place_adapters(PriorNetModel.build(TINY), PlacementPolicy(), rank=4)
        X = _clips(10, seed=2)
        assert np.max(np.abs(base.forward(X) - adapted.forward(X))) <= 1e-12

    def test_batch_equals_single(self):
        model = PriorNetModel.build(TINY)
        X = _clips(4, seed=3)
        batch = model.forward(X)
        for i in range(4):
            np.testing.assert_allclose(batch[i], model.forward(X[i])[0], atol=1e-13)

    def test_encode_classify(self):
        model = PriorNetModel.build(TINY)
        clip = _clips(1)[0]
        feat = encode(clip, model)
        assert feat.shape == (TINY.d,)
        np.testing.assert_allclose(classify(feat, model), model.forward(clip)[0], atol=1e-14)
        with pytest.raises(ShapeError):
            classify(np.zeros(TINY.d + 1), model)

    def test_deterministic_init(self):
        a, b = PriorNetModel.build(TINY), PriorNetModel.build(TINY)
        assert a.frozen_checksum() == b.frozen_checksum()
        other = EncoderConfig(**{**TINY.to_dict(), "seed": 8})
        assert PriorNetModel.build(other).frozen_checksum() != a.frozen_checksum()

    def test_attention_single_and_batched(self):
        model = PriorNetModel.build(TINY)
        X = np.random.default_rng(4).normal(size=(2, 5, TINY.d))
        blk = model.block_weights(0)
        out = attention_forward(X, blk, None, TINY.heads)
        np.testing.assert_allclose(attention_forward(X[1], blk, None, TINY.heads), out[1], atol=1e-14)
        with pytest.raises(ShapeError):
            attention_forward(np.zeros((5, TINY.d + 2)), blk, None, TINY.heads)


def test_patchify_counts_and_order():
    frames = _clips(1)[0]
    tokens = patchify(frames, TINY)
    assert tokens.shape == (1, TINY.num_tokens, TINY.patch_dim)
    assert TINY.num_tokens == 2 * 2 * 2
    np.testing.assert_array_equal(tokens[0, 1], frames[0:2, 0:4, 4:8].reshape(-1))
    with pytest.raises(ShapeError):
        patchify(frames[:, :7], TINY)


def test_positions_first_rows():
    pe = sinusoidal_positions(3, 4)
    np.testing.assert_allclose(pe[0], [0, 1, 0, 1])
    np.testing.assert_allclose(pe[1], [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)])


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(d=10, heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(tubelet=(3, 8, 8), clip_length=16)


def test_large_config_shapes():
    cfg = EncoderConfig.full_scale()
    shapes = frozen_param_shapes(cfg)
    assert cfg.num_tokens == 8 * 14 * 14
    assert shapes["block23.attn.q"] == (1024, 1024)
    assert shapes["embed.W"] == (2 * 16 * 16 * 3, 1024)


class TestBackward:
    @pytest.mark.parametrize("policy", [PlacementPolicy(), PlacementPolicy("all"), PlacementPolicy.none()])
    def test_against_finite_differences(self, policy):
        model = place_adapters(PriorNetModel.build(TINY), policy, rank=2, alpha=2.0, seed=3)
        _randomize_adapters(model)
        x0 = model.embed(_clips(2, seed=5))
        w = np.random.default_rng(6).normal(size=(2, TINY.num_classes))

        def loss():
            logits, _ = model.forward_train(x0)
            return float((logits * w).sum())

        _, cache = model.forward_train(x0)
        grads = model.backward(cache, w)
        params = model.trainable_parameters()
        assert set(grads) == set(params)
        for name, p in params.items():
            def f(v, p=p):
                saved = p.copy()
                p[...] = v
                out = loss()
                p[...] = saved
                return out

            num = finite_difference_gradient(f, p.copy(), h=1e-5)
            _, rel = relative_error(grads[name], num)
            assert rel < 1e-6, name

    def test_frozen_untouched_by_backward(self):
        model = place_adapters(PriorNetModel.build(TINY), PlacementPolicy(), rank=2)
        before = model.frozen_checksum()
        _, cache = model.forward_train(model.embed(_clips(2)))
        model.backward(cache, np.ones((2, TINY.num_classes)))
        assert model.frozen_checksum() == before


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = place_adapters(PriorNetModel.build(TINY), PlacementPolicy(), rank=2, alpha=5.0)
        _randomize_adapters(model)
        model.placeholders = False
        save_checkpoint(model, tmp_path / "m.pnmd", extra={"note": [1, 2]})
        back, extra = load_checkpoint(tmp_path / "m.pnmd")
        assert extra == {"note": [1, 2]}
        assert back.placeholders is False
        assert back.frozen_checksum() == model.frozen_checksum()
        assert sorted(back.adapters) == sorted(model.adapters)
        assert back.adapters[(0, "q")].alpha == 5.0
        X = _clips(2)
        np.testing.assert_array_equal(back.forward(X), model.forward(X))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x")

    def test_adapter_dataclass_from_checkpoint(self, tmp_path):
        model = place_adapters(PriorNetModel.build(TINY), PlacementPolicy("explicit", [1]), rank=1)
        save_checkpoint(model, tmp_path / "m")
        back, _ = load_checkpoint(tmp_path / "m")
        assert isinstance(back.adapters[(1, "v")], LoraAdapter)
        assert back.policy.adapted_layer_indices(3) == [1]
