import numpy as np
import pytest
import torch

from oracles import dense_attention, temporal_attention_update
from univid.conditioning import (ConditionBundle, DualCrossAttention, ImageEncoder,
                                 TemporalAttention, TextEncoder, Vocabulary,
                                 sinusoidal_embedding)
from univid.errors import ConditionError, ShapeError, VocabError


# ---------------------------------------------------------------------------
# vocabulary and encoders


def test_vocabulary_order_defines_ids(tmp_path):
    vocab = Vocabulary(["red", "circle", "moving"])
    assert vocab.encode(["moving", "red"]).tolist() == [2, 0]
    vocab.save(tmp_path / "vocab.txt")
    again = Vocabulary.load(tmp_path / "vocab.txt")
    assert again.tokens == vocab.tokens


def test_vocabulary_unknown_token():
    vocab = Vocabulary(["a", "b"])
    with pytest.raises(VocabError):
        vocab.encode(["a", "zebra"])


def test_vocabulary_rejects_duplicates():
    with pytest.raises(VocabError):
        Vocabulary(["a", "a"])


def test_text_encoder_empty_caption_gives_zero_rows():
    enc = TextEncoder(vocab_size=10, width=6)
    out = enc(torch.tensor([], dtype=torch.long))
    assert out.shape == (0, 6)


def test_text_encoder_deterministic_and_shaped():
    enc = TextEncoder(vocab_size=32, width=16)
    enc.init_weights(torch.Generator().manual_seed(0))
    ids = torch.tensor([3, 1, 4, 1])
    a, b = enc(ids), enc(ids)
    assert a.shape == (4, 16)
    assert torch.equal(a, b)


def test_text_encoder_rejects_too_long_captions():
    enc = TextEncoder(vocab_size=8, width=4, max_len=2)
    with pytest.raises(ShapeError):
        enc(torch.tensor([0, 1, 2]))


def test_image_encoder_patch_count():
    enc = ImageEncoder(in_channels=3, patch=8, width=8, n_tokens=4)
    out = enc(torch.zeros(3, 16, 16))
    assert out.shape == (4, 8)


def test_image_encoder_constant_image_equal_embeddings():
    enc = ImageEncoder(in_channels=3, patch=4, width=8, n_tokens=4)
    enc.init_weights(torch.Generator().manual_seed(1))
    with torch.no_grad():
        enc.pos.zero_()
        out = enc(torch.zeros(3, 8, 8))
    for i in range(1, 4):
        assert torch.equal(out[i], out[0])


def test_image_encoder_divisibility_error():
    enc = ImageEncoder(in_channels=3, patch=8, width=8, n_tokens=4)
    with pytest.raises(ShapeError):
        enc(torch.zeros(3, 12, 16))


def test_image_encoder_checksum_pinned():
    # frozen from the first run of this configuration; guards drift in the
    # patchify/projection/positional pipeline
    enc = ImageEncoder(in_channels=3, patch=8, width=8, n_tokens=4)
    enc.init_weights(torch.Generator().manual_seed(42))
    image = torch.linspace(0, 1, 3 * 16 * 16).view(3, 16, 16)
    with torch.no_grad():
        checksum = float(enc(image).double().sum())
    assert checksum == pytest.approx(0.27852547727525234, abs=1e-9)


# ---------------------------------------------------------------------------
# condition bundle


def test_bundle_absent_stream_forces_zero_weight():
    with pytest.raises(ConditionError):
        ConditionBundle.create(None, None, 1.0, 0.0)
    with pytest.raises(ConditionError):
        ConditionBundle.create(torch.zeros(2, 4), None, 1.0, 0.5)


def test_bundle_zero_weight_drops_stream():
    b = ConditionBundle.create(torch.zeros(2, 4), torch.zeros(3, 4), 1.0, 0.0)
    assert b.image is None and b.text is not None


def test_bundle_empty_sequences_count_as_absent():
    b = ConditionBundle.create(torch.zeros(0, 4), None, 0.0, 0.0)
    assert b.text is None


def test_bundle_rejects_negative_weights_and_width_mismatch():
    with pytest.raises(ConditionError):
        ConditionBundle.create(torch.zeros(2, 4), None, -1.0, 0.0)
    with pytest.raises(ConditionError):
        ConditionBundle.create(torch.zeros(2, 4), torch.zeros(2, 6), 1.0, 1.0)


# ---------------------------------------------------------------------------
# dual-stream cross attention


def _random_dualca(seed, channels=4, width=4, heads=2):
    mod = DualCrossAttention(channels=channels, cond_width=width, heads=heads)
    gen = torch.Generator().manual_seed(seed)
    for lin in (mod.w_q, mod.w_k_text, mod.w_v_text, mod.w_k_image, mod.w_v_image):
        lin.weight.data.normal_(0, 0.5, generator=gen)
    return mod, gen


def test_dualca_text_only_equals_single_stream_bitwise():
    mod, gen = _random_dualca(0)
    z = torch.randn(1, 2, 4, 2, 2, generator=gen)
    text = torch.randn(3, 4, generator=gen)
    image = torch.randn(5, 4, generator=gen)
    with torch.no_grad():
        both_off_image = mod(z, ConditionBundle.create(text, image, 1.0, 0.0))
        text_only = mod(z, ConditionBundle.create(text, None, 1.0, 0.0))
    assert torch.equal(both_off_image, text_only)


def test_dualca_all_zero_weights_is_residual_passthrough():
    mod, gen = _random_dualca(1)
    z = torch.randn(1, 1, 4, 3, 3, generator=gen)
    with torch.no_grad():
        out = mod(z, ConditionBundle.unconditional())
    assert torch.equal(out, z)


def test_dualca_two_token_mean_case_and_oracle():
    # 1 query, d=1, identity projections, E_t = (0, 0): scores are zero, so the
    # text term is the mean of V_t
    mod = DualCrossAttention(channels=1, cond_width=1, heads=1)
    with torch.no_grad():
        for lin in (mod.w_q, mod.w_k_text, mod.w_v_text, mod.w_k_image, mod.w_v_image):
            lin.weight.copy_(torch.eye(1))
    z = torch.full((1, 1, 1, 1, 1), 0.7)
    text = torch.tensor([[0.0], [0.0]])
    with torch.no_grad():
        delta = mod.update(z, ConditionBundle.create(text, None, 1.0, 0.0))
    assert delta.item() == pytest.approx(0.0, abs=1e-7)  # mean of values (0, 0)

    text2 = torch.tensor([[0.2], [0.8]])
    with torch.no_grad():
        delta2 = mod.update(z, ConditionBundle.create(text2, None, 1.0, 0.0))
    want = dense_attention(np.array([[0.7]]), text2.numpy(), text2.numpy(), 1.0)
    assert delta2.item() == pytest.approx(float(want[0, 0]), abs=1e-6)


@pytest.mark.parametrize("seed", range(6))
def test_dualca_bilinearity_exact_on_updates(seed):
    mod, gen = _random_dualca(seed + 10)
    z = torch.randn(1, 2, 4, 2, 2, generator=gen)
    text = torch.randn(3, 4, generator=gen)
    image = torch.randn(5, 4, generator=gen)
    lt = float(torch.rand((), generator=gen)) + 0.1
    lv = float(torch.rand((), generator=gen)) + 0.1
    with torch.no_grad():
        mixed = mod.update(z, ConditionBundle.create(text, image, lt, lv))
        a = mod.update(z, ConditionBundle.create(text, image, 1.0, 0.0))
        b = mod.update(z, ConditionBundle.create(text, image, 0.0, 1.0))
    assert torch.equal(mixed, lt * a + lv * b)


def test_dualca_residual_matches_update():
    mod, gen = _random_dualca(3)
    z = torch.randn(1, 2, 4, 2, 2, generator=gen)
    text = torch.randn(3, 4, generator=gen)
    bundle = ConditionBundle.create(text, None, 1.0, 0.0)
    with torch.no_grad():
        assert torch.allclose(mod(z, bundle), z + mod.update(z, bundle), atol=1e-6)


def test_dualca_stream_independence():
    mod, gen = _random_dualca(4)
    z = torch.randn(1, 1, 4, 2, 2, generator=gen)
    text = torch.randn(3, 4, generator=gen)
    with torch.no_grad():
        base = mod(z, ConditionBundle.create(text, torch.randn(5, 4, generator=gen), 1.0, 0.0))
        perturbed = mod(z, ConditionBundle.create(text, torch.randn(5, 4, generator=gen), 1.0, 0.0))
    assert torch.equal(base, perturbed)


def test_dualca_width_mismatch_error():
    mod, gen = _random_dualca(5)
    z = torch.randn(1, 1, 4, 2, 2, generator=gen)
    bad = ConditionBundle(text=torch.randn(3, 6, generator=gen), image=None, lambda_t=1.0, lambda_v=0.0)
    with pytest.raises(ShapeError):
        mod.update(z, bad)


# ---------------------------------------------------------------------------
# temporal attention


def test_temporal_rearrange_round_trip_is_bitwise():
    from einops import rearrange

    z = torch.randn(2, 3, 4, 5, 6, generator=torch.Generator().manual_seed(20))
    seq = rearrange(z, "b f c h w -> (b h w) f c")
    back = rearrange(seq, "(b h w) f c -> b f c h w", b=2, h=5, w=6)
    assert torch.equal(back, z)


def test_temporal_attention_zero_out_is_identity():
    mod = TemporalAttention(channels=4, heads=2)
    mod.init_weights(torch.Generator().manual_seed(21))  # w_o stays zero
    z = torch.randn(1, 1, 4, 2, 2, generator=torch.Generator().manual_seed(22))
    assert torch.equal(mod(z), z)
    z5 = torch.randn(2, 5, 4, 2, 2, generator=torch.Generator().manual_seed(23))
    assert torch.equal(mod(z5), z5)


def test_temporal_attention_scalar_case_matches_oracle():
    mod = TemporalAttention(channels=1, heads=1)
    with torch.no_grad():
        for lin in (mod.proj.w_q, mod.proj.w_k, mod.proj.w_v, mod.proj.w_o):
            lin.weight.copy_(torch.eye(1))
    z = torch.tensor([0.5, -1.0, 2.0]).view(1, 3, 1, 1, 1)
    with torch.no_grad():
        got = mod.update(z, use_pos=False).numpy()
    eye = np.eye(1)
    want = temporal_attention_update(z.numpy(), eye, eye, eye, eye, heads=1)
    assert np.max(np.abs(got - want)) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_temporal_attention_random_matches_oracle(seed):
    mod = TemporalAttention(channels=4, heads=2)
    gen = torch.Generator().manual_seed(seed + 30)
    for lin in (mod.proj.w_q, mod.proj.w_k, mod.proj.w_v, mod.proj.w_o):
        lin.weight.data.normal_(0, 0.5, generator=gen)
    z = torch.randn(1, 4, 4, 2, 3, generator=gen)
    with torch.no_grad():
        got = mod.update(z, use_pos=False).numpy()
    p = mod.proj
    want = temporal_attention_update(
        z.numpy(), p.w_q.weight.detach().numpy(), p.w_k.weight.detach().numpy(),
        p.w_v.weight.detach().numpy(), p.w_o.weight.detach().numpy(), heads=2)
    assert np.max(np.abs(got - want)) < 1e-5


def test_temporal_attention_permutation_equivariance_without_pos():
    mod = TemporalAttention(channels=4, heads=2)
    gen = torch.Generator().manual_seed(40)
    for lin in (mod.proj.w_q, mod.proj.w_k, mod.proj.w_v, mod.proj.w_o):
        lin.weight.data.normal_(0, 0.5, generator=gen)
    z = torch.randn(1, 5, 4, 2, 2, generator=gen)
    perm = torch.tensor([3, 0, 4, 1, 2])
    with torch.no_grad():
        a = mod(z, use_pos=False)[:, perm]
        b = mod(z[:, perm], use_pos=False)
    assert torch.allclose(a, b, atol=1e-6)
    # with the positional embedding the equivariance must break
    with torch.no_grad():
        c = mod(z, use_pos=True)[:, perm]
        d = mod(z[:, perm], use_pos=True)
    assert not torch.allclose(c, d, atol=1e-6)


def test_sinusoidal_embedding_shape_and_odd_width():
    e = sinusoidal_embedding(torch.arange(5), 8)
    assert e.shape == (5, 8)
    o = sinusoidal_embedding(torch.arange(3), 7)
    assert o.shape == (3, 7)
    assert torch.all(o[:, -1] == 0)
