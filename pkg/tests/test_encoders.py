import math

import numpy as np
import pytest

from xfm import autodiff as ad
from xfm.autodiff import ShapeError, Tensor
from xfm.encoders import XFM, EncoderConfig, FeatureSequence, TokenSequence, l2_normalize, project_for_itc
from xfm.gradflow import GradFlowConfig
from xfm.step import compute_losses, plan_step


def tokens(rng, batch=2, length=7, pad_from=None, vocab=64):
    ids = rng.integers(3, vocab, size=(batch, length))
    ids[:, 0] = 1
    pad = np.zeros((batch, length), dtype=bool)
    if pad_from is not None:
        pad[:, pad_from:] = True
        ids[pad] = 0
    return TokenSequence(ids, pad)


def images(rng, batch=2, side=32):
    return rng.uniform(-1, 1, size=(batch, side, side, 3))


# --- config -------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs", [{"hidden_dim": 30, "heads": 4}, {"image_side": 30, "patch_side": 4}, {"text_layers": 0}, {"fusion_layers": 0}]
)
def test_config_invariants_rejected(kwargs):
    with pytest.raises(ValueError):
        EncoderConfig(**kwargs)


def test_config_round_trip():
    cfg = EncoderConfig(hidden_dim=32, heads=2)
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg
    assert EncoderConfig().num_patches == 64


# --- encode_text ----------------------------------------------------------------------


def test_text_shape_contract(rng):
    cfg = EncoderConfig(hidden_dim=32, heads=4)
    out = XFM(cfg).encode_text(tokens(rng, batch=1, length=7))
    assert out.shape == (1, 7, 32) and out.kind == "text"


def test_text_attention_rows_normalized(rng, model):
    out = model.encode_text(tokens(rng, length=9, pad_from=6))
    for layer in out.attentions:
        probs = layer["self"]
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)
        # padding keys receive no weight
        assert np.all(probs[..., 6:] < 1e-12)


def test_pad_content_never_changes_non_pad_outputs(rng, model):
    seq = tokens(rng, length=10, pad_from=6)
    base = model.encode_text(seq).values.data
    for trial in range(5):
        ids = seq.ids.copy()
        ids[:, 6:] = rng.integers(0, 64, size=(2, 4))
        perturbed = model.encode_text(TokenSequence(ids, seq.pad_mask)).values.data
        np.testing.assert_allclose(perturbed[:, :6], base[:, :6], atol=1e-12, rtol=0)


def test_text_rejects_out_of_vocabulary(model):
    with pytest.raises(ValueError, match="vocabulary"):
        model.encode_text(TokenSequence([[1, 64]], [[False, False]]))
    with pytest.raises(ValueError, match="max_text_len"):
        model.encode_text(TokenSequence(np.ones((1, 17), int), np.zeros((1, 17), bool)))


# --- encode_image --------------------------------------------------------------------------


def test_image_shape_contract(rng, model):
    out = model.encode_image(images(rng))
    assert out.shape == (2, 65, 64) and out.kind == "vision"


def test_empty_mask_is_noop(rng, model):
    img = images(rng)
    plain = model.encode_image(img).values.data
    masked = model.encode_image(img, np.zeros((2, 64), dtype=bool)).values.data
    assert np.array_equal(plain, masked)


def test_full_mask_erases_image_content(rng, model):
    full = np.ones((1, 64), dtype=bool)
    a = model.encode_image(images(rng, 1), full).values.data
    b = model.encode_image(images(rng, 1), full).values.data
    assert np.array_equal(a, b)


def test_masking_changes_masked_image(rng, model):
    img = images(rng, 1)
    m = np.zeros((1, 64), dtype=bool)
    m[0, :10] = True
    assert not np.array_equal(model.encode_image(img).values.data, model.encode_image(img, m).values.data)


def test_image_geometry_rejected(model):
    with pytest.raises(ValueError, match="geometry"):
        model.encode_image(np.zeros((1, 28, 28, 3)))
    with pytest.raises(ValueError, match="mask plan"):
        model.encode_image(np.zeros((1, 32, 32, 3)), np.zeros((1, 63), dtype=bool))


# --- fuse -----------------------------------------------------------------------------------


def test_fuse_shape_and_cross_attention_rows(rng, model):
    text = model.encode_text(tokens(rng, length=7))
    image = model.encode_image(images(rng))
    fused = model.fuse(text, image)
    assert fused.shape == (2, 7, 64) and fused.kind == "fused"
    for layer in fused.attentions:
        assert layer["cross"].shape[-1] == 65
        np.testing.assert_allclose(layer["cross"].sum(-1), 1.0, atol=1e-6)


def test_fuse_width_mismatch_rejected(rng, model):
    text = FeatureSequence(Tensor(np.zeros((2, 5, 64))), "text")
    image = FeatureSequence(Tensor(np.zeros((2, 65, 32))), "vision")
    with pytest.raises(ShapeError):
        model.fuse(text, image)


def _np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _np_attention(att, x, bias):
    b, n, d = x.shape
    h = att.heads
    split = lambda t: t.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)  # noqa: E731
    q = split(x @ att.q.weight.data + att.q.bias.data)
    k = split(x @ att.k.weight.data + att.k.bias.data)
    v = split(x @ att.v.weight.data + att.v.bias.data)
    s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(d // h) + bias
    p = np.exp(s - s.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    ctx = (p @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return ctx @ att.out.weight.data + att.out.bias.data


def _np_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def test_zeroed_cross_attention_reduces_to_text_transformer(rng):
    """Independent numpy transformer (self-attn + FFN only) as the oracle."""
    model = XFM(EncoderConfig(), seed=3)
    for layer in model.fusion_encoder.layers:
        layer.cross.out.weight.data[...] = 0.0
        layer.cross.out.bias.data[...] = 0.0
    seq = tokens(rng, length=8, pad_from=6)
    text = model.encode_text(seq)
    fused = model.fuse(text, model.encode_image(images(rng))).values.data

    x = text.values.data.copy()
    bias = np.where(seq.pad_mask, -1e9, 0.0)[:, None, None, :]
    for layer in model.fusion_encoder.layers:
        h = _np_layer_norm(x, layer.ln_attn.gamma.data, layer.ln_attn.beta.data)
        x = x + _np_attention(layer.attn, h, bias)
        h = _np_layer_norm(x, layer.ln_ffn.gamma.data, layer.ln_ffn.beta.data)
        f = layer.ffn
        x = x + _np_gelu(h @ f.fc1.weight.data + f.fc1.bias.data) @ f.fc2.weight.data + f.fc2.bias.data
    ln = model.fusion_encoder.ln_final
    oracle = _np_layer_norm(x, ln.gamma.data, ln.beta.data)
    np.testing.assert_allclose(fused, oracle, atol=1e-10)


def test_fused_output_depends_on_image(rng, model):
    text = model.encode_text(tokens(rng, batch=1))
    a = model.fuse(text, model.encode_image(images(rng, 1))).cls().data
    b = model.fuse(text, model.encode_image(images(rng, 1))).cls().data
    assert np.max(np.abs(a - b)) > 0


# --- project_for_itc ---------------------------------------------------------------------------


def test_projection_unit_norm(rng, model):
    for side, feats in (("text", model.encode_text(tokens(rng))), ("vision", model.encode_image(images(rng)))):
        out = model.project_for_itc(feats, side).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(np.sum(out * out, axis=-1), 1.0, atol=1e-12)


def test_projection_scale_invariant_under_identity_map(rng):
    from xfm.encoders import Linear

    proj = Linear(8, 8, np.random.default_rng(0), np.float64)
    proj.weight.data[...] = np.eye(8)
    v = rng.normal(size=(1, 3, 8))
    a = project_for_itc(FeatureSequence(Tensor(v), "text"), proj).data
    b = project_for_itc(FeatureSequence(Tensor(10 * v), "text"), proj).data
    np.testing.assert_allclose(a, b, atol=1e-15)
    np.testing.assert_allclose(a[0], v[0, 0] / np.linalg.norm(v[0, 0]), atol=1e-15)


def test_zero_vector_rejected():
    with pytest.raises(ValueError, match="zero vector"):
        l2_normalize(Tensor(np.zeros((1, 4))))


# --- model-level invariants ---------------------------------------------------------------------


def test_same_seed_same_parameters_and_outputs(rng):
    a, b = XFM(seed=5), XFM(seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    img = images(rng)
    assert np.array_equal(a.encode_image(img).values.data, b.encode_image(img).values.data)
    assert not np.array_equal(XFM(seed=6).text_encoder.token_embed.data, a.text_encoder.token_embed.data)


def test_state_dict_round_trip(model):
    other = XFM(seed=99)
    other.load_state_dict(model.state_dict())
    for (_, p), (_, q) in zip(model.named_parameters(), other.named_parameters()):
        assert np.array_equal(p.data, q.data)


def test_param_groups_partition_all_parameters(model):
    groups = model.param_groups()
    names = [n for members in groups.values() for n, _ in members]
    assert sorted(names) == sorted(n for n, _ in model.named_parameters())
    assert all(groups[g] for g in ("language", "vision", "fusion", "heads"))


def test_every_encoder_parameter_receives_gradient(model, batch):
    plan = plan_step(batch, np.random.default_rng(0), model.config)
    bundle, _ = compute_losses(model, batch, plan, GradFlowConfig.parse("all"))
    model.zero_grad()
    bundle.total.backward()
    groups = model.param_groups()
    dead = [n for g in ("language", "vision", "fusion") for n, p in groups[g]
            if p.grad is None or not np.any(p.grad != 0)]
    assert dead == []


def test_float32_model(rng):
    m = XFM(seed=0, dtype=np.float32)
    assert m.encode_image(images(rng)).values.dtype == np.float32
