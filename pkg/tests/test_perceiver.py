import numpy as np
import pytest

from volperceiver.gradchecks import END_TO_END_TOLERANCE, end_to_end_checks
from volperceiver.objectives import joint_loss_from_logits
from volperceiver.perceiver import (Attention, CrossAttention, Perceiver, PerceiverConfig, SelfAttentionBlock,
                                    fourier_channels, fourier_pos_2d, load_checkpoint, load_parameters,
                                    record_encoder, save_checkpoint)
from volperceiver.tensor import Tensor, backward, default_dtype


def _small(**kw):
    base = dict(input_channels=6, num_classes=3, num_latents=8, latent_dim=16, num_heads=2, num_blocks=2,
                num_bands=2, max_freq=4.0)
    base.update(kw)
    return PerceiverConfig(**base)


def test_fourier_shape_rule():
    assert fourier_channels(4) == 18
    assert fourier_pos_2d(2, 2, 4, 8.0).shape == (4, 18)
    assert fourier_channels(16) == 66


def test_fourier_centre_pixel():
    enc = fourier_pos_2d(5, 5, 3, 8.0)
    centre = enc[2 * 5 + 2]
    per_axis = 2 * 3 + 1
    for axis in range(2):
        block = centre[axis * per_axis:(axis + 1) * per_axis]
        np.testing.assert_allclose(block[:3], 0.0, atol=1e-15)
        np.testing.assert_allclose(block[3:6], 1.0)
        assert block[6] == 0.0


def test_fourier_matches_formula():
    h, w, nb, fmax = 3, 4, 3, 6.0
    enc = fourier_pos_2d(h, w, nb, fmax)
    freqs = np.linspace(1, fmax / 2, nb)
    for i in range(h):
        for j in range(w):
            y, x = np.linspace(-1, 1, h)[i], np.linspace(-1, 1, w)[j]
            expect = np.concatenate([np.sin(np.pi * freqs * y), np.cos(np.pi * freqs * y), [y],
                                     np.sin(np.pi * freqs * x), np.cos(np.pi * freqs * x), [x]])
            np.testing.assert_allclose(enc[i * w + j], expect, atol=1e-14)


def test_fourier_rows_share_column_features():
    enc = fourier_pos_2d(4, 3, 2, 4.0).reshape(4, 3, -1)
    half = enc.shape[-1] // 2
    np.testing.assert_array_equal(enc[0, :, half:], enc[3, :, half:])


def test_config_validation():
    with pytest.raises(ValueError):
        _small(latent_dim=15)
    with pytest.raises(ValueError):
        _small(num_classes=1)
    with pytest.raises(ValueError):
        _small(num_latents=0)
    with pytest.raises(ValueError):
        _small(pos_encoding="sinusoid")


def test_zeroed_projections_give_mean_of_values():
    rng = np.random.default_rng(0)
    with default_dtype(np.float64):
        ca = CrossAttention(4, 3, 2, rng)
        ca.attn.to_q.weight.data[:] = 0
        ca.attn.to_k.weight.data[:] = 0
        q = Tensor(rng.normal(size=(1, 1, 4)))
        kv = Tensor(rng.normal(size=(1, 7, 3)))
        out = ca(q, kv).data
        attn = ca.attn
        v = ca.norm_kv(kv).data @ attn.to_v.weight.data + attn.to_v.bias.data
        expect = q.data + v.mean(axis=1, keepdims=True) @ attn.to_out.weight.data + attn.to_out.bias.data
    np.testing.assert_allclose(out, expect, atol=1e-12)
    np.testing.assert_allclose(attn.last_weights, 1 / 7)


def test_single_key_gets_weight_one_and_rows_sum_to_one():
    rng = np.random.default_rng(1)
    attn = Attention(8, 5, 2, rng)
    attn(Tensor(rng.normal(size=(2, 3, 8))), Tensor(rng.normal(size=(2, 1, 5))))
    np.testing.assert_array_equal(attn.last_weights, 1.0)
    attn(Tensor(rng.normal(size=(2, 3, 8))), Tensor(rng.normal(size=(2, 9, 5))))
    np.testing.assert_allclose(attn.last_weights.sum(axis=-1), 1.0, atol=1e-6)


def test_head_divisibility_error():
    with pytest.raises(ValueError):
        Attention(6, 6, 4, np.random.default_rng(0))


def test_self_attention_zero_outputs_is_identity():
    rng = np.random.default_rng(2)
    block = SelfAttentionBlock(8, 2, 2, rng)
    block.attn.to_out.weight.data[:] = 0
    block.attn.to_out.bias.data[:] = 0
    block.mlp.fc2.weight.data[:] = 0
    block.mlp.fc2.bias.data[:] = 0
    x = Tensor(rng.normal(size=(1, 5, 8)).astype(np.float32))
    np.testing.assert_array_equal(block(x).data, x.data)


def test_self_attention_is_permutation_equivariant():
    rng = np.random.default_rng(3)
    with default_dtype(np.float64):
        block = SelfAttentionBlock(8, 2, 2, rng).astype(np.float64)
        x = rng.normal(size=(1, 6, 8))
        perm = rng.permutation(6)
        a = block(Tensor(x)).data[:, perm]
        b = block(Tensor(x[:, perm])).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_forward_shapes_and_parameter_count_independent_of_m():
    rng = np.random.default_rng(4)
    cfg = _small()
    model = Perceiver(cfg, rng)
    counts = set()
    for m in (16, 32):
        pos = Tensor(rng.normal(size=(m, cfg.pos_channels)).astype(np.float32))
        x = Tensor(rng.normal(size=(2, m, 6)).astype(np.float32))
        assert model(x, pos).shape == (2, m, 3)
        counts.add(model.num_parameters())
    assert len(counts) == 1


def test_decoder_bias_when_latent_and_values_zero():
    rng = np.random.default_rng(5)
    cfg = _small(decoder_queries="position")
    model = Perceiver(cfg, rng)
    attn = model.decoder.cross.attn
    attn.to_v.weight.data[:] = 0
    attn.to_v.bias.data[:] = 0
    attn.to_out.bias.data[:] = 0
    model.decoder.mlp.fc2.weight.data[:] = 0
    model.decoder.mlp.fc2.bias.data[:] = 0
    queries = model.output_queries(Tensor(rng.normal(size=(4, cfg.pos_channels)).astype(np.float32)))
    logits = model.decode(queries, Tensor(np.zeros((1, 8, 16), dtype=np.float32)))
    np.testing.assert_allclose(logits.data, np.broadcast_to(model.head.bias.data, (1, 4, 3)), atol=1e-7)


def test_identical_queries_give_identical_logits():
    rng = np.random.default_rng(6)
    cfg = _small()
    model = Perceiver(cfg, rng)
    pos = rng.normal(size=(5, cfg.pos_channels)).astype(np.float32)
    pos[3] = pos[1]
    logits = model(Tensor(rng.normal(size=(1, 5, 6)).astype(np.float32)), Tensor(pos)).data
    np.testing.assert_array_equal(logits[0, 1], logits[0, 3])


def test_query_features_required_when_configured():
    cfg = _small(decoder_queries="position+features")
    model = Perceiver(cfg, np.random.default_rng(0), query_feature_channels=4)
    with pytest.raises(ValueError):
        model.output_queries(Tensor(np.zeros((5, cfg.pos_channels), dtype=np.float32)))


def test_channel_mismatch_rejected():
    model = Perceiver(_small(), np.random.default_rng(0))
    with pytest.raises(ValueError, match="channels"):
        model.encode(Tensor(np.zeros((1, 4, 5), dtype=np.float32)))


def test_encoder_storage_is_linear_in_m():
    rng = np.random.default_rng(7)
    cfg = _small(input_channels=5)
    model = Perceiver(cfg, rng)
    counts = []
    for m in (96, 192):
        tape = record_encoder(model, Tensor(rng.normal(size=(1, m, 5)).astype(np.float32)))
        assert tape.max_axes_of(m) == 1
        counts.append(tape.elements_along(m))
    assert counts[1] == 2 * counts[0]


def test_every_parameter_receives_gradient():
    rng = np.random.default_rng(8)
    cfg = _small(decoder_queries="position+features")
    model = Perceiver(cfg, rng, query_feature_channels=3)
    x = Tensor(rng.normal(size=(2, 12, 6)).astype(np.float32))
    pos = Tensor(rng.normal(size=(12, cfg.pos_channels)).astype(np.float32))
    feats = Tensor(rng.normal(size=(2, 12, 3)).astype(np.float32))
    backward(joint_loss_from_logits(model(x, pos, feats), rng.integers(0, 3, (2, 12))))
    for name, p in model.named_parameters():
        assert p.grad is not None and np.any(p.grad != 0), name


def test_end_to_end_gradcheck():
    for result in end_to_end_checks():
        assert result.max_rel_error < END_TO_END_TOLERANCE, result.line()


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    model = Perceiver(_small(), rng)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    state = load_checkpoint(path)
    for name, p in model.named_parameters():
        assert state[name].tobytes() == p.data.astype("<f4").tobytes()
    other = Perceiver(_small(), np.random.default_rng(10))
    load_parameters(other, state)
    x = Tensor(rng.normal(size=(1, 6, 6)).astype(np.float32))
    pos = Tensor(rng.normal(size=(6, 10)).astype(np.float32))
    assert model(x, pos).data.tobytes() == other(x, pos).data.tobytes()
    save_checkpoint(tmp_path / "again.ckpt", other)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_mismatch_errors(tmp_path):
    model = Perceiver(_small(), np.random.default_rng(0))
    save_checkpoint(tmp_path / "m.ckpt", model)
    bigger = Perceiver(_small(num_latents=9), np.random.default_rng(0))
    with pytest.raises(ValueError):
        load_parameters(bigger, load_checkpoint(tmp_path / "m.ckpt"))
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")
