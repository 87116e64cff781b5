import math

import numpy as np
import pytest

from guidedmt import numerics as nx
from guidedmt.adapters import partition_parameters
from guidedmt.guidance import AlignmentRecord, ValidationError, build_guidance, degrade_guidance, sever_visual
from guidedmt.model import (BOS, EOS, EncoderOutput, ModelConfig, MultimodalInput, MultimodalTransformer,
                            guided_self_attention, init_parameters, load_checkpoint, multi_head_attention,
                            pad_targets, save_checkpoint, sinusoidal_positions)


def small_config(**kw):
    base = dict(vocab_size=20, d_model=16, n_heads=2, d_ffn=32, d_local_in=8, d_global_in=12,
                n_local_features=3, adapter_reduction=4, max_text_len=16)
    base.update(kw)
    return ModelConfig(**base)


def random_input(rng, cfg, T=4, N=2, links=((1, 2, 0),), has_global=True):
    ids = np.concatenate([rng.integers(5, cfg.vocab_size, T - 1), [EOS]])
    C = build_guidance(T, N, [AlignmentRecord(*l) for l in links], has_global)
    return MultimodalInput(ids, rng.normal(size=(N, cfg.d_local_in)), rng.normal(size=cfg.d_global_in), C)


def model_with(cfg, seed=0, policy="frozen-with-adapters", randomise_adapters=False, **init_kw):
    rng = np.random.default_rng(seed)
    raw = init_parameters(cfg, rng, **init_kw)
    if randomise_adapters:
        for n in raw:
            if ".adapter_" in n and ".up." in n:
                raw[n] = rng.normal(0, 0.3, raw[n].shape)
    return MultimodalTransformer(cfg, partition_parameters(raw, policy))


def reference_mha(x, p, prefix, n_heads):
    """Plain numpy multi-head self-attention with no mask."""
    B, S, d = x.shape
    dk = d // n_heads
    q, k, v = (x @ p[f"{prefix}.{c}.w"].data + p[f"{prefix}.{c}.b"].data for c in "qkv")
    out = np.zeros_like(x)
    for h in range(n_heads):
        sl = slice(h * dk, (h + 1) * dk)
        s = q[..., sl] @ np.swapaxes(k[..., sl], -1, -2) / math.sqrt(dk)
        s = np.exp(s - s.max(-1, keepdims=True))
        out[..., sl] = (s / s.sum(-1, keepdims=True)) @ v[..., sl]
    return out @ p[f"{prefix}.o.w"].data + p[f"{prefix}.o.b"].data


# -- embeddings -------------------------------------------------------------

def test_embedding_layout():
    cfg = small_config()
    m = model_with(cfg)
    x = random_input(np.random.default_rng(1), cfg, T=3, N=2)
    e = m.embed_inputs(x).data[0]
    p = m.params
    assert e.shape == (6, 16)
    text = p["embed.tokens"].data[x.text_ids] * math.sqrt(16) + sinusoidal_positions(3, 16)
    np.testing.assert_allclose(e[:3], text, atol=1e-12)
    np.testing.assert_allclose(e[3:5], x.local_features @ p["visual.local.w"].data + p["visual.local.b"].data,
                               atol=1e-12)
    np.testing.assert_allclose(e[5], x.global_feature @ p["visual.global.w"].data + p["visual.global.b"].data,
                               atol=1e-12)


def test_zero_projection_gives_zero_local_rows():
    cfg = small_config()
    m = model_with(cfg)
    m.params["visual.local.w"].data[:] = 0
    m.params["visual.local.b"].data[:] = 0
    x = random_input(np.random.default_rng(1), cfg)
    assert not m.embed_inputs(x).data[0, 4:6].any()


def test_one_hot_feature_reads_projection_row():
    cfg = small_config()
    m = model_with(cfg)
    m.params["visual.local.b"].data[:] = 0
    x = random_input(np.random.default_rng(1), cfg, N=1, links=())
    x.local_features[0] = np.eye(cfg.d_local_in)[5]
    np.testing.assert_array_equal(m.embed_inputs(x).data[0, 4], m.params["visual.local.w"].data[5])


def test_text_too_long():
    cfg = small_config(max_text_len=4)
    m = model_with(cfg)
    ids = np.array([5, 6, 7, 8, EOS])
    x = MultimodalInput(ids, np.zeros((0, 8)), np.zeros(12), build_guidance(5, 0))
    with pytest.raises(ValidationError, match="max_text_len"):
        m.encode(x)


# -- attention --------------------------------------------------------------

def test_all_ones_guidance_is_plain_attention():
    cfg = small_config()
    m = model_with(cfg)
    rng = np.random.default_rng(2)
    h = rng.normal(size=(2, 6, 16))
    out = guided_self_attention(nx.Tensor(h), np.ones((2, 6, 6), bool), m.params, "enc.0.attn", 2).data
    np.testing.assert_allclose(out, reference_mha(h, m.params, "enc.0.attn", 2), atol=1e-12, rtol=0)


def test_figure_style_row_structure():
    cfg = small_config()
    m = model_with(cfg)
    x = random_input(np.random.default_rng(3), cfg, T=4, N=3, links=((2, 3, 1),))
    mask = m.collate([x]).attn_mask[0]
    np.testing.assert_array_equal(mask[2], [1, 1, 1, 1, 0, 1, 0, 1])
    enc = m.encode(x, record=True)
    w = enc.attention[0].weights[0]               # (H, S, S)
    assert (w[:, 2, [4, 6]] == 0).all() and (w[:, 2, [0, 1, 2, 3, 5, 7]] > 0).all()


def test_two_position_closed_form():
    # one text token and one box, not linked: the text row attends only to itself,
    # so its output is the projected value of the text vector
    d = 2
    p = {}
    rng = np.random.default_rng(4)
    for c in "qkvo":
        p[f"a.{c}.w"] = nx.Tensor(rng.normal(size=(d, d)))
        p[f"a.{c}.b"] = nx.Tensor(rng.normal(size=d))
    C = build_guidance(1, 1, (), has_global=False).matrix
    h = rng.normal(size=(1, 2, d))
    out = guided_self_attention(nx.Tensor(h), C[None], p, "a", 1).data
    v0 = h[0, 0] @ p["a.v.w"].data + p["a.v.b"].data
    np.testing.assert_allclose(out[0, 0], v0 @ p["a.o.w"].data + p["a.o.b"].data, atol=1e-14)
    h2 = h.copy()
    h2[0, 1] += 10.0
    np.testing.assert_array_equal(guided_self_attention(nx.Tensor(h2), C[None], p, "a", 1).data[0, 0], out[0, 0])


def test_attention_rows_sum_to_one():
    cfg = small_config()
    m = model_with(cfg, randomise_adapters=True)
    rng = np.random.default_rng(5)
    xs = [random_input(rng, cfg, T=t, N=n, links=()) for t, n in ((3, 1), (5, 2))]
    enc = m.encode(m.collate(xs), record=True)
    for rec in enc.attention:
        np.testing.assert_allclose(rec.weights.sum(-1), 1.0, atol=1e-12)
    # decoder self and cross attention through the same routine
    rec = []
    y = nx.Tensor(rng.normal(size=(2, 3, 16)))
    multi_head_attention(y, y, m.params, "dec.0.self", np.tril(np.ones((3, 3), bool))[None], 2, rec)
    multi_head_attention(y, enc.text_states, m.params, "dec.0.cross", enc.batch.text_mask[:, None, :], 2, rec)
    for r in rec:
        np.testing.assert_allclose(r.weights.sum(-1), 1.0, atol=1e-12)
    assert rec[1].weights.shape[-1] == enc.batch.n_text


# -- encoder ----------------------------------------------------------------

def test_zero_layer_encoder_is_identity():
    cfg = small_config(n_encoder_layers=0)
    m = model_with(cfg)
    x = random_input(np.random.default_rng(6), cfg)
    np.testing.assert_array_equal(m.encode(x).states.data, m.embed_inputs(x).data)


def test_adapters_at_init_match_backbone():
    cfg = small_config()
    adapted = model_with(cfg, seed=7)
    backbone = MultimodalTransformer(cfg, partition_parameters(
        {n: t.data for n, t in adapted.params.items() if ".adapter_" not in n}, "fully-unfrozen-no-adapters"))
    x = random_input(np.random.default_rng(8), cfg)
    prefix = np.array([[BOS, 7, 9]])
    np.testing.assert_allclose(adapted.decode(adapted.encode(x), prefix).data,
                               backbone.decode(backbone.encode(x), prefix).data, atol=1e-12, rtol=0)


def test_flipping_guidance_entry():
    cfg = small_config(n_encoder_layers=1)
    m = model_with(cfg, randomise_adapters=True)
    x = random_input(np.random.default_rng(9), cfg, T=4, N=2, links=((1, 2, 0),))
    base = m.encode(x).states.data[0]
    y = MultimodalInput(x.text_ids, x.local_features, x.global_feature, build_guidance(4, 2, ()))
    flipped = m.encode(y).states.data[0]
    assert np.abs(flipped[1] - base[1]).max() > 1e-6
    # rows whose mask did not change are untouched after one layer
    for i in (0, 2, 3, 5):
        np.testing.assert_array_equal(flipped[i], base[i])


# -- decoder ----------------------------------------------------------------

def test_decoder_ignores_visual_encoder_states():
    cfg = small_config()
    m = model_with(cfg, randomise_adapters=True)
    x = random_input(np.random.default_rng(10), cfg)
    enc = m.encode(x)
    prefix = np.array([[BOS, 6, 8, 9]])
    before = m.decode(enc, prefix).data
    states = enc.states.data.copy()
    states[0, 4:] = np.random.default_rng(11).normal(size=states[0, 4:].shape) * 100
    after = m.decode(EncoderOutput(nx.Tensor(states), enc.batch), prefix).data
    np.testing.assert_array_equal(before, after)


def test_causal_decoder():
    cfg = small_config()
    m = model_with(cfg, randomise_adapters=True)
    enc = m.encode(random_input(np.random.default_rng(12), cfg))
    a = m.decode(enc, np.array([[BOS, 6, 7, 8, 9]])).data
    b = m.decode(enc, np.array([[BOS, 6, 11, 15, 5]])).data
    np.testing.assert_array_equal(a[:, :2], b[:, :2])
    assert not np.allclose(a[:, 2], b[:, 2])


@pytest.mark.parametrize("mode", ["severed", "text-only"])
def test_text_only_reduction_ignores_visual_features(mode):
    cfg = small_config()
    m = model_with(cfg, randomise_adapters=True)
    rng = np.random.default_rng(13)
    x = random_input(rng, cfg, links=((0, 3, 1),))
    C = sever_visual(x.guidance) if mode == "severed" else degrade_guidance(x.guidance, "text-only")
    prefix = np.array([[BOS, 6, 8]])
    outs = []
    for scale in (1.0, 50.0):
        y = MultimodalInput(x.text_ids, x.local_features * scale + scale, x.global_feature * -scale, C)
        outs.append(m.decode(m.encode(y), prefix).data)
    np.testing.assert_array_equal(outs[0], outs[1])


def test_empty_prefix_rejected():
    cfg = small_config()
    m = model_with(cfg)
    enc = m.encode(random_input(np.random.default_rng(14), cfg))
    with pytest.raises(ValueError, match="at least BOS"):
        m.decode(enc, np.zeros((1, 0), dtype=np.int64))


# -- scoring and generation -------------------------------------------------

def test_uniform_output_gives_minus_log_v():
    cfg = small_config()
    m = model_with(cfg)
    m.params["embed.tokens"].data[:] = 0
    m.params["out.bias"].data[:] = 0
    lp = m.sequence_log_prob(random_input(np.random.default_rng(15), cfg), [BOS, 7, 8, 9, EOS])[0]
    assert lp.shape == (4,)
    np.testing.assert_allclose(lp, -math.log(cfg.vocab_size), rtol=1e-12)


def test_distributions_normalised_and_stepwise_equal():
    cfg = small_config()
    m = model_with(cfg, randomise_adapters=True)
    x = random_input(np.random.default_rng(16), cfg)
    target = [BOS, 7, 12, 9, EOS]
    enc = m.encode(x)
    logp = nx.log_softmax(m.decode(enc, np.array([target[:-1]]))).data
    np.testing.assert_allclose(np.exp(logp).sum(-1), 1.0, atol=1e-12)
    batched = m.sequence_log_prob(x, target)[0]
    for t in range(1, len(target)):
        step = m.decode_step(enc, [target[:t]])[0]
        step = step - step.max()
        expected = step[target[t]] - math.log(np.exp(step).sum())
        assert abs(batched[t - 1] - expected) < 1e-10


def test_padding_does_not_change_scores():
    cfg = small_config()
    m = model_with(cfg, randomise_adapters=True)
    rng = np.random.default_rng(17)
    xs = [random_input(rng, cfg, T=3, N=1, links=((0, 1, 0),)), random_input(rng, cfg, T=6, N=3, links=())]
    ts = [[BOS, 7, EOS], [BOS, 8, 9, 10, 11, EOS]]
    together = m.sequence_log_prob(xs, ts)
    for x, t, lp in zip(xs, ts, together):
        np.testing.assert_allclose(m.sequence_log_prob(x, t)[0], lp, atol=1e-10)


def test_bad_target_rejected():
    cfg = small_config()
    m = model_with(cfg)
    with pytest.raises(ValueError, match="BOS"):
        m.sequence_log_prob(random_input(np.random.default_rng(18), cfg), [7, 8, EOS])


def test_greedy_translate():
    cfg = small_config()
    m = model_with(cfg, randomise_adapters=True)
    x = random_input(np.random.default_rng(19), cfg)
    assert len(m.greedy_translate(x, max_len=1)[0]) <= 1
    assert m.greedy_translate(x, 8) == m.greedy_translate(x, 8)
    # all logits tied -> lowest id wins
    m.params["embed.tokens"].data[:] = 0
    m.params["out.bias"].data[:] = 0
    assert m.greedy_translate(x, 3) == [[0, 0, 0]]
    m.params["out.bias"].data[EOS] = 1.0
    assert m.greedy_translate(x, 3) == [[]]


def test_pad_targets():
    dec_in, gold, mask = pad_targets([np.array([BOS, 5, EOS]), np.array([BOS, 6, 7, 8, EOS])])
    assert dec_in.tolist() == [[BOS, 5, 0, 0], [BOS, 6, 7, 8]]
    assert gold.tolist() == [[5, EOS, 0, 0], [6, 7, 8, EOS]]
    assert mask.tolist() == [[True, True, False, False], [True] * 4]


# -- gradients and checkpoints ----------------------------------------------

def test_mmt_loss_gradient_matches_finite_differences():
    cfg = small_config(d_local_in=4, d_global_in=4)
    m = model_with(cfg, randomise_adapters=True)
    rng = np.random.default_rng(20)
    xs = [random_input(rng, cfg, T=3, N=2, links=((0, 1, 1),)), random_input(rng, cfg, T=4, N=1, links=())]
    dec_in, gold, tmask = pad_targets([np.array([BOS, 6, 7, EOS]), np.array([BOS, 9, EOS])])
    batch = m.collate(xs)

    def loss():
        return nx.label_smoothed_ce(m.decode(m.encode(batch), dec_in), gold, 0.1, tmask)

    m.params.zero_grad()
    with nx.Tape() as tape:
        tape.backward(loss())
    for name, t in m.params.trainable().items():
        num = nx.numerical_gradient(lambda: float(loss().data), t)
        assert nx.relative_error(t.grad, num) < 1e-4, name


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    cfg = small_config()
    m = model_with(cfg, randomise_adapters=True)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, m, meta={"note": "x"})
    loaded, header = load_checkpoint(a)
    assert header["policy"] == "frozen-with-adapters" and header["meta"] == {"note": "x"}
    assert loaded.config == cfg
    for n, t in m.params.items():
        np.testing.assert_array_equal(loaded.params[n].data, t.data)
        assert loaded.params.is_frozen(n) == m.params.is_frozen(n)
    save_checkpoint(b, loaded, meta={"note": "x"})
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValidationError, match="not a guidedmt checkpoint"):
        load_checkpoint(p)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(vocab_size=10, d_model=10, n_heads=4)
    assert ModelConfig(vocab_size=10).d_local_in == 64 and ModelConfig(vocab_size=10).d_global_in == 512
