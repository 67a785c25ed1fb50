import numpy as np
import pytest

from ssadvae import gradcore as gc
from ssadvae import netblocks as nb


CARDIO_SPEC = nb.MlpSpec(widths=(32, 16, 8))


def test_spec_rejects_missing_hidden_layer():
    with pytest.raises(ValueError):
        nb.MlpSpec(widths=(8,))
    with pytest.raises(ValueError):
        nb.MlpSpec(widths=(32, 0, 8))


def test_init_same_seed_bit_identical():
    a = nb.init_encoder(CARDIO_SPEC, 21, seed=7)
    b = nb.init_encoder(CARDIO_SPEC, 21, seed=7)
    for ta, tb in zip(a.tensors(), b.tensors()):
        np.testing.assert_array_equal(ta.data, tb.data)


def test_init_different_seeds_differ():
    a = nb.init_encoder(CARDIO_SPEC, 21, seed=1)
    b = nb.init_encoder(CARDIO_SPEC, 21, seed=2)
    assert any(not np.array_equal(ta.data, tb.data)
               for ta, tb in zip(a.tensors(), b.tensors()))


def test_init_mlp_fan_in_bound_and_zero_bias():
    ws, bs = nb.init_mlp(CARDIO_SPEC, 21, seed=3)
    assert [w.shape for w in ws] == [(21, 32), (32, 16), (16, 8)]
    assert np.abs(ws[0].data).max() <= 1.0 / np.sqrt(21)
    for b in bs:
        np.testing.assert_array_equal(b.data, 0.0)


def test_encoder_shapes_cardio():
    enc = nb.init_encoder(CARDIO_SPEC, 21, seed=0)
    x = nb.philox_rng(0, 9).standard_normal((128, 21))
    post = nb.encode(enc, x)
    assert post.mu.shape == (128, 8)
    assert post.logvar.shape == (128, 8)


def test_zero_weight_encoder_maps_to_zero():
    enc = nb.init_encoder(CARDIO_SPEC, 4, seed=0)
    for t in enc.tensors():
        t.data[...] = 0.0
    post = nb.encode(enc, np.ones((5, 4)))
    np.testing.assert_array_equal(post.mu.data, 0.0)
    np.testing.assert_array_equal(post.logvar.data, 0.0)


def test_encoder_rejects_nonfinite_and_bad_dims():
    enc = nb.init_encoder(CARDIO_SPEC, 4, seed=0)
    bad = np.ones((2, 4))
    bad[1, 2] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        nb.encode(enc, bad)
    with pytest.raises(ValueError, match="expects"):
        nb.encode(enc, np.ones((2, 5)))


def test_logvar_clamped():
    enc = nb.init_encoder(nb.MlpSpec(widths=(4, 2)), 3, seed=0)
    enc.logvar_b.data[...] = 50.0
    post = nb.encode(enc, np.zeros((2, 3)))
    assert post.logvar.data.max() <= nb.LOGVAR_MAX


def test_reparameterize_cases():
    mu = gc.constant([[2.0]])
    post = nb.GaussianPosterior(gc.constant([[0.0]]), gc.constant([[0.0]]))
    np.testing.assert_array_equal(
        nb.reparameterize(post, np.zeros((1, 1))).data, [[0.0]])
    np.testing.assert_array_equal(
        nb.reparameterize(post, np.ones((1, 1))).data, [[1.0]])
    post2 = nb.GaussianPosterior(mu, gc.constant([[np.log(4.0)]]))
    np.testing.assert_allclose(
        nb.reparameterize(post2, -np.ones((1, 1))).data, [[0.0]], atol=1e-12)


def test_reparameterize_shape_mismatch_rejected():
    post = nb.GaussianPosterior(gc.constant(np.zeros((2, 3))),
                                gc.constant(np.zeros((2, 3))))
    with pytest.raises(ValueError, match="noise shape"):
        nb.reparameterize(post, np.zeros((2, 2)))


def test_reparameterized_z_affine_in_noise():
    enc = nb.init_encoder(CARDIO_SPEC, 6, seed=5)
    x = nb.philox_rng(5, 9).standard_normal((4, 6))
    post = nb.encode(enc, x)
    a = nb.philox_rng(6, 9).standard_normal((4, 8))
    z_a = nb.reparameterize(post, a).data
    z_0 = nb.reparameterize(post, np.zeros((4, 8))).data
    # affine to rounding: the mu +/- cancellation costs at most a few ulp
    np.testing.assert_allclose(z_a - z_0, np.exp(post.logvar.data / 2.0) * a,
                               rtol=0, atol=1e-14)


def test_noise_gets_no_gradient():
    post = nb.GaussianPosterior(gc.parameter([[1.0]]), gc.parameter([[0.2]]))
    eps = gc.parameter([[0.7]])
    z = nb.reparameterize(post, eps)
    gc.backward(gc.reduce_sum(gc.square(z)))
    assert eps.grad is None
    assert post.mu.grad is not None and post.logvar.grad is not None


def test_decoder_shapes_mirror_encoder():
    dec = nb.init_decoder(CARDIO_SPEC, 21, seed=0)
    assert [w.shape for w in dec.ws] == [(8, 16), (16, 32), (32, 21)]
    z = nb.philox_rng(1, 9).standard_normal((128, 8))
    assert nb.decode(dec, z).shape == (128, 21)


def test_zero_weight_decoder_outputs_zero():
    dec = nb.init_decoder(CARDIO_SPEC, 5, seed=0)
    for t in dec.tensors():
        t.data[...] = 0.0
    np.testing.assert_array_equal(nb.decode(dec, np.ones((3, 8))).data, 0.0)


def test_bernoulli_logits_zero_give_half_probability():
    out = gc.sigmoid(gc.constant(np.zeros((2, 4))))
    np.testing.assert_array_equal(out.data, 0.5)


def test_forward_is_deterministic():
    enc = nb.init_encoder(CARDIO_SPEC, 6, seed=5)
    x = nb.philox_rng(5, 9).standard_normal((4, 6))
    p1 = nb.encode(enc, x)
    p2 = nb.encode(enc, x)
    np.testing.assert_array_equal(p1.mu.data, p2.mu.data)
    np.testing.assert_array_equal(p1.logvar.data, p2.logvar.data)


def test_no_bias_network_still_forward_and_backward():
    spec = nb.MlpSpec(widths=(8, 4), use_bias=False)
    enc = nb.init_encoder(spec, 3, seed=1)
    dec = nb.init_decoder(spec, 3, seed=1)
    x = nb.philox_rng(2, 9).standard_normal((5, 3))
    post = nb.encode(enc, x)
    z = nb.reparameterize(post, np.zeros((5, 4)))
    out = nb.decode(dec, z)
    gc.backward(gc.reduce_mean(gc.square(out)))
    assert all(t.grad is not None for t in enc.trunk_w)


def test_detached_decoder_shares_buffers():
    dec = nb.init_decoder(CARDIO_SPEC, 5, seed=0)
    frozen = dec.detached()
    assert all(f.data is t.data for f, t in zip(frozen.tensors(), dec.tensors()))
    assert not any(t.requires_grad for t in frozen.tensors())


def test_serialization_roundtrip(tmp_path):
    spec = nb.MlpSpec(widths=(16, 8, 4))
    enc = nb.init_encoder(spec, 9, seed=42)
    dec = nb.init_decoder(spec, 9, seed=42, family="bernoulli")
    pbin = tmp_path / "m.bin"
    pjson = tmp_path / "m.json"
    nb.save_params(pbin, pjson, enc, dec)
    enc2, dec2 = nb.load_params(pbin, pjson)
    assert dec2.family == "bernoulli"
    for a, b in zip(enc.tensors() + dec.tensors(), enc2.tensors() + dec2.tensors()):
        np.testing.assert_array_equal(a.data, b.data)


def test_serialization_bad_magic_rejected(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        nb.read_arrays(p)


def test_serialization_truncated_rejected(tmp_path):
    good = tmp_path / "good.bin"
    nb.write_arrays(good, [np.arange(12.0).reshape(3, 4)])
    data = good.read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(data[:-8])  # drop the last value
    with pytest.raises(ValueError, match="truncated"):
        nb.read_arrays(bad)
