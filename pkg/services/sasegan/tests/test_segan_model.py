import numpy as np
import pytest

from audio_pipeline import AudioBuffer
from errors import InvalidConfig, ShapeMismatch, UninitializedState
from models import ModelConfig
from nn_core import grad_check_params
from segan_model import (
    attention_overhead,
    build_discriminator,
    build_generator,
    discriminator_forward,
    encoder_ladder,
    enhance_buffer,
    generator_forward,
    init_vbn_reference,
    parameter_count,
    sample_latent,
)

FULL_LADDER = [
    (8192, 16), (4096, 32), (2048, 32), (1024, 64), (512, 64), (256, 128),
    (128, 128), (64, 256), (32, 256), (16, 512), (8, 1024),
]


def ready_discriminator(cfg, seed=0, batch=2):
    disc = build_discriminator(cfg, seed)
    rng = np.random.default_rng(seed)
    init_vbn_reference(disc, rng.uniform(-0.5, 0.5, (batch, cfg.scaled_input_len)),
                       rng.uniform(-0.5, 0.5, (batch, cfg.scaled_input_len)))
    return disc


def test_full_scale_encoder_ladder():
    assert encoder_ladder(ModelConfig()) == FULL_LADDER
    assert ModelConfig().latent_shape == (8, 1024)


def test_shrunk_ladder_drops_bottom_rungs():
    cfg = ModelConfig(scale_divisor=4)
    assert cfg.layers == list(range(3, 12))
    assert encoder_ladder(cfg) == [(t, c // 4) for t, c in FULL_LADDER[2:]]


def test_quarter_scale_generator_preserves_length():
    cfg = ModelConfig(scale_divisor=4)
    gen = build_generator(cfg, seed=0)
    rng = np.random.default_rng(0)
    noisy = rng.uniform(-0.5, 0.5, 4096)
    out = generator_forward(gen, noisy, sample_latent(cfg, rng))
    assert out.shape == (4096,)
    assert np.all(np.abs(out) <= 1.0)


def test_generator_rejects_wrong_lengths(tiny_config):
    gen = build_generator(tiny_config)
    z = sample_latent(tiny_config, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        gen.forward(np.zeros(63), z)
    with pytest.raises(ShapeMismatch):
        gen.forward(np.zeros(64), z[:-1])


def test_zero_weights_give_silence(tiny_config):
    cfg = tiny_config.model_copy(update={"spectral_norm": False, "output_activation": "linear"})
    gen = build_generator(cfg)
    for arr in gen.params.values():
        arr[...] = 0.0
    rng = np.random.default_rng(1)
    out = gen.forward(rng.standard_normal((3, 64)), sample_latent(cfg, rng, batch=3))
    np.testing.assert_array_equal(out, np.zeros((3, 64)))


def test_build_is_seeded(tiny_config):
    a, b, c = build_generator(tiny_config, 5), build_generator(tiny_config, 5), build_generator(tiny_config, 6)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params)


def test_parameter_names(tiny_config):
    gen = build_generator(tiny_config)
    assert gen.attention_names() == ["dec.3.attn", "enc.3.attn"]
    assert "dec.1.alpha" not in gen.params
    assert gen.params["dec.1.kernel"].shape == (5, 8, 1)
    assert gen.params["dec.4.kernel"].shape == (5, 32, 8)
    assert gen.params["dec.3.attn.w_q"].shape == (8, 4)
    assert gen.betas() == [0.0, 0.0]


def test_attention_adds_exact_overhead(tiny_config):
    plain = tiny_config.model_copy(update={"attention_layers": []})
    with_attn = tiny_config.model_copy(update={"attention_layers": [3, 4]})
    assert attention_overhead(plain) == 0
    assert parameter_count(build_generator(with_attn)) == (
        parameter_count(build_generator(plain)) + attention_overhead(with_attn)
    )
    # layer 3: 8 channels both sides; layer 4: 16 encoder, 32 decoder channels
    assert attention_overhead(with_attn) == (4 * 8 * 4 + 1) * 2 + (4 * 16 * 8 + 1) + (4 * 32 * 16 + 1)


def test_attention_maps_have_pooled_keys(tiny_config):
    gen = build_generator(tiny_config)
    rng = np.random.default_rng(0)
    out, _, maps = gen.forward_vjp(rng.standard_normal((2, 64)), sample_latent(tiny_config, rng, batch=2))
    assert out.shape == (2, 64)
    assert maps["enc.3.attn"].shape == (2, 8, 4)
    assert maps["dec.3.attn"].shape == (2, 8, 4)
    np.testing.assert_allclose(maps["enc.3.attn"].sum(axis=-1), 1.0)


def test_skips_carry_the_encoder_to_the_decoder(tiny_config):
    cfg = tiny_config.model_copy(update={"spectral_norm": False})
    gen = build_generator(cfg)
    rng = np.random.default_rng(2)
    noisy = rng.uniform(-0.5, 0.5, 64)
    z1, z2 = sample_latent(cfg, rng), sample_latent(cfg, rng)
    assert not np.allclose(gen.forward(noisy, z1), gen.forward(noisy, z2))

    # cut the bottleneck and every decoder-to-decoder path; only skips remain
    gen.params["dec.4.kernel"][...] = 0.0
    for layer in (1, 2, 3):
        gen.params[f"dec.{layer}.kernel"][:, :cfg.channels(layer), :] = 0.0
    out = gen.forward(noisy, z1)
    np.testing.assert_array_equal(out, gen.forward(noisy, z2))
    assert np.max(np.abs(out)) > 0

    nudged = noisy.copy()
    nudged[10] += 0.25
    assert not np.allclose(gen.forward(nudged, z1), out)


def conv_shapes(cfg):
    """(input, output) shape of every conv and deconv in one generator pass."""
    gen = build_generator(cfg, seed=0)
    shapes = {}
    wrapped = gen._conv_vjp

    def recording(name, x, stride, transposed=False):
        y, back = wrapped(name, x, stride, transposed)
        shapes[name] = (x.shape, y.shape)
        return y, back

    gen._conv_vjp = recording
    rng = np.random.default_rng(0)
    out = gen.forward(rng.uniform(-0.5, 0.5, cfg.scaled_input_len), sample_latent(cfg, rng))
    return shapes, out.shape


@pytest.fixture(scope="module")
def plain_quarter_shapes():
    return conv_shapes(ModelConfig(scale_divisor=4, attention_layers=[]))


@pytest.mark.parametrize("layer", range(3, 12))
def test_attention_placement_keeps_every_shape(plain_quarter_shapes, layer):
    shapes, out_shape = conv_shapes(ModelConfig(scale_divisor=4, attention_layers=[layer]))
    plain_shapes, plain_out = plain_quarter_shapes
    assert out_shape == plain_out == (4096,)
    assert shapes == plain_shapes
    assert set(shapes) == {f"enc.{l}" for l in range(3, 12)} | {f"dec.{l}" for l in range(3, 12)}


def test_invalid_placement_is_rejected():
    with pytest.raises(InvalidConfig):
        build_generator(ModelConfig(scale_divisor=4, attention_layers=[2]))
    with pytest.raises(InvalidConfig):
        build_generator(ModelConfig(attention_layers=[12]))


def test_latent_is_standard_normal():
    z = sample_latent(ModelConfig(), np.random.default_rng(0), batch=123)
    assert z.shape == (123, 8, 1024)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01


def test_discriminator_needs_reference(tiny_config):
    disc = build_discriminator(tiny_config)
    with pytest.raises(UninitializedState):
        disc.forward(np.zeros(64), np.zeros(64))


def test_discriminator_scores(tiny_config):
    disc = ready_discriminator(tiny_config)
    rng = np.random.default_rng(9)
    a, b = rng.uniform(-0.5, 0.5, (3, 64)), rng.uniform(-0.5, 0.5, (3, 64))
    scores = discriminator_forward(disc, a, b)
    assert scores.shape == (3,)
    np.testing.assert_array_equal(scores, discriminator_forward(disc, a, b))
    assert not np.allclose(scores, discriminator_forward(disc, b, a))
    assert np.ndim(disc.forward(a[0], b[0])) == 0


def test_discriminator_rejects_unequal_pair(tiny_config):
    disc = ready_discriminator(tiny_config)
    with pytest.raises(ShapeMismatch):
        disc.forward(np.zeros(64), np.zeros((2, 64)))


def mini_config():
    return ModelConfig(scale_divisor=32, attention_layers=[9, 11])


def test_generator_gradients_end_to_end():
    cfg = mini_config()
    gen = build_generator(cfg, seed=0)
    for name in gen.attention_names():
        gen.params[f"{name}.beta"][:] = 0.5
    rng = np.random.default_rng(0)
    noisy = rng.uniform(-0.5, 0.5, (2, 512))
    z = sample_latent(cfg, rng, batch=2)
    weights = rng.standard_normal((2, 512))

    _, backward, _ = gen.forward_vjp(noisy, z)
    grads, d_z = backward(weights)
    assert set(grads) == set(gen.params)

    def loss():
        return float(np.sum(weights * gen.forward(noisy, z)))

    errors = grad_check_params(loss, gen.params, grads, eps=1e-7, kink_tol=1e-5)
    assert max(errors.values()) < 1e-4
    z_error = grad_check_params(loss, {"z": z}, {"z": d_z}, eps=1e-7, coords_per_param=20, kink_tol=1e-5)
    assert z_error["z"] < 1e-4


def test_discriminator_gradients_end_to_end():
    cfg = mini_config()
    disc = ready_discriminator(cfg, batch=3)
    for name in disc.attention_names():
        disc.params[f"{name}.beta"][:] = 0.5
    rng = np.random.default_rng(4)
    a, b = rng.uniform(-0.5, 0.5, (2, 512)), rng.uniform(-0.5, 0.5, (2, 512))
    weights = rng.standard_normal(2)

    _, backward = disc.forward_vjp(a, b, training=True)
    grads, d_input = backward(weights)
    assert set(grads) == set(disc.params)
    assert d_input.shape == (2, 512, 2)

    def loss():
        return float(np.sum(weights * disc.forward(a, b, training=True)))

    errors = grad_check_params(loss, disc.params, grads, eps=1e-7, kink_tol=1e-5)
    assert max(errors.values()) < 1e-4
    a_error = grad_check_params(loss, {"a": a}, {"a": d_input[..., 0]}, eps=1e-7, coords_per_param=20, kink_tol=1e-5)
    assert a_error["a"] < 1e-4


def test_enhance_buffer_keeps_length(tiny_config):
    gen = build_generator(tiny_config)
    buf = AudioBuffer(samples=np.random.default_rng(3).uniform(-0.5, 0.5, 150))
    first = enhance_buffer(gen, buf, np.random.default_rng(0))
    second = enhance_buffer(gen, buf, np.random.default_rng(0))
    assert len(first) == 150
    np.testing.assert_array_equal(first.samples, second.samples)
    assert np.all(np.isfinite(first.samples))
