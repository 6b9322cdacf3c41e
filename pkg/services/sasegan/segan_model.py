"""
Generator and discriminator networks.

Parameters live in one flat dict per network, keyed like `enc.3.kernel`,
`dec.5.attn.w_q` or `disc.11.gamma`, so the optimizer and the checkpoint
container can treat every array alike. Layer names use full-scale indices
even when the ladder is shrunk.
"""

from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import structlog

from audio_pipeline import (
    AudioBuffer,
    deemphasize,
    preemphasize,
    reconstruct,
    segment_for_inference,
    SegmentBatch,
)
from checkpoints import Checkpoint, unpack_networks
from config import rng_stream
from errors import InvalidConfig, ShapeMismatch, UninitializedState
from models import ModelConfig
from nn_core import (
    ConvParams,
    PRELU_INIT,
    SpectralState,
    VbnState,
    conv1d_vjp,
    conv_geometry,
    deconv1d_vjp,
    dense_vjp,
    glorot_uniform,
    init_spectral_state,
    leaky_relu_vjp,
    power_iteration,
    prelu_vjp,
    spectral_normalize_vjp,
    tanh_vjp,
    vbn_apply_vjp,
    vbn_reference,
)
from self_attention import AttentionParams, attention_parameter_count, attn_forward_vjp, attn_init

logger = structlog.get_logger()

Grads = Dict[str, np.ndarray]
AttentionMaps = Dict[str, np.ndarray]


class _Network:
    """Shared parameter handling for both networks."""

    prefix = ""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: Dict[str, np.ndarray] = {}
        self.spectral: Dict[str, SpectralState] = {}
        self._rng = rng

    # -- construction -------------------------------------------------------

    def _add_conv(self, name: str, width: int, c_in: int, c_out: int) -> None:
        kernel = glorot_uniform(self._rng, (width, c_in, c_out), width * c_in, width * c_out)
        self.params[f"{name}.kernel"] = kernel
        self.params[f"{name}.bias"] = np.zeros(c_out)
        if self.cfg.spectral_norm:
            self.spectral[name] = init_spectral_state(kernel, self._rng)

    def _add_attention(self, name: str, channels: int) -> None:
        attn = attn_init(channels, self.cfg.k, self.cfg.p, self._rng)
        for key, arr in attn.arrays().items():
            self.params[f"{name}.{key}"] = arr
        self.params[f"{name}.beta"] = np.zeros(1)

    # -- layer wrappers -----------------------------------------------------

    def _conv_vjp(self, name: str, x: np.ndarray, stride: int, transposed: bool = False):
        raw = self.params[f"{name}.kernel"]
        sn_back = None
        kernel = raw
        if self.cfg.spectral_norm:
            kernel, sn_back = spectral_normalize_vjp(raw, self.spectral[name])
        conv = ConvParams(kernel=kernel, bias=self.params[f"{name}.bias"], stride=stride)
        y, back = (deconv1d_vjp if transposed else conv1d_vjp)(x, conv)

        def backward(dy, grads: Grads):
            dx, dkernel, dbias = back(dy)
            grads[f"{name}.kernel"] = sn_back(dkernel)[0] if sn_back else dkernel
            grads[f"{name}.bias"] = dbias
            return dx

        return y, backward

    def _prelu_vjp(self, name: str, x: np.ndarray):
        y, back = prelu_vjp(x, self.params[f"{name}.alpha"])

        def backward(dy, grads: Grads):
            dx, dalpha = back(dy)
            grads[f"{name}.alpha"] = dalpha
            return dx

        return y, backward

    def attention(self, name: str) -> AttentionParams:
        return AttentionParams(
            w_q=self.params[f"{name}.w_q"],
            w_k=self.params[f"{name}.w_k"],
            w_v=self.params[f"{name}.w_v"],
            w_o=self.params[f"{name}.w_o"],
            beta=float(self.params[f"{name}.beta"][0]),
            k=self.cfg.k,
            p=self.cfg.p,
        )

    def _attn_vjp(self, name: str, x: np.ndarray, maps: AttentionMaps):
        out, back = attn_forward_vjp(x, self.attention(name))
        maps[name] = out.attn_map

        def backward(dy, grads: Grads):
            dx, attn_grads = back(dy)
            for key in ("w_q", "w_k", "w_v", "w_o"):
                grads[f"{name}.{key}"] = attn_grads[key]
            grads[f"{name}.beta"] = np.array([attn_grads["beta"]])
            return dx

        return out.f_tilde, backward

    # -- bookkeeping --------------------------------------------------------

    def attention_names(self) -> List[str]:
        return sorted(
            (key[:-len(".beta")] for key in self.params if key.endswith(".attn.beta")),
            key=_layer_sort_key,
        )

    def betas(self) -> List[float]:
        return [float(self.params[f"{name}.beta"][0]) for name in self.attention_names()]

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Non-trainable state (power-iteration vectors, VBN statistics)."""
        arrays = {}
        for name, state in self.spectral.items():
            arrays[f"spectral.{name}.u"] = state.u
            arrays[f"spectral.{name}.v"] = state.v
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, state in self.spectral.items():
            state.u = np.array(arrays[f"spectral.{name}.u"])
            state.v = np.array(arrays[f"spectral.{name}.v"])


def _layer_sort_key(name: str) -> Tuple[str, int]:
    part, index = name.split(".")[:2]
    return part, int(index)


def encoder_ladder(cfg: ModelConfig) -> List[Tuple[int, int]]:
    """(time, channels) of every encoder map, from the conv geometry alone."""
    shapes, length = [], cfg.scaled_input_len
    for layer in cfg.layers:
        length = conv_geometry(length, cfg.filter_width, cfg.stride)[0]
        shapes.append((length, cfg.channels(layer)))
    return shapes


class Generator(_Network):
    """Encoder-decoder with channel-concatenated skips and a stacked latent."""

    prefix = "G"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        width = cfg.filter_width
        for layer in cfg.layers:
            self._add_conv(f"enc.{layer}", width, cfg.channels(layer - 1), cfg.channels(layer))
            self.params[f"enc.{layer}.alpha"] = np.full(cfg.channels(layer), PRELU_INIT)
            if layer in cfg.attention_layers:
                self._add_attention(f"enc.{layer}.attn", cfg.channels(layer))

        for layer in reversed(cfg.layers):
            # decoder step `layer` maps level-`layer` maps back to level layer-1
            c_out = cfg.channels(layer - 1)
            self._add_conv(f"dec.{layer}", width, 2 * cfg.channels(layer), c_out)
            if layer - 1 > cfg.shrink:
                self.params[f"dec.{layer}.alpha"] = np.full(c_out, PRELU_INIT)
            if layer in cfg.attention_layers:
                self._add_attention(f"dec.{layer}.attn", cfg.decoder_attention_channels(layer))
        self._rng = None

    def encoder_shapes(self) -> List[Tuple[int, int]]:
        return encoder_ladder(self.cfg)

    def forward_vjp(
        self,
        noisy: np.ndarray,
        z: np.ndarray
    ) -> Tuple[np.ndarray, Callable[[np.ndarray], Tuple[Grads, np.ndarray]], AttentionMaps]:
        """
        Enhance a batch of segments.

        Args:
            noisy: (B, T) or (T,) segments, T = scaled input length
            z: (B, T_top, C_top) or (T_top, C_top) latent

        Returns:
            (enhanced, backward, attention maps); `backward(d_enhanced)` gives
            parameter gradients and the latent gradient
        """
        cfg = self.cfg
        single = noisy.ndim == 1
        x = np.atleast_2d(noisy)
        z = z[None] if z.ndim == 2 else z
        if x.shape[1] != cfg.scaled_input_len:
            raise ShapeMismatch(f"generator expects {cfg.scaled_input_len} samples, got {x.shape[1]}")
        if z.shape[1:] != cfg.latent_shape or z.shape[0] != x.shape[0]:
            raise ShapeMismatch(f"latent shape {z.shape} does not match {cfg.latent_shape}")

        maps: AttentionMaps = {}
        enc_steps: Dict[int, list] = {}
        skips: Dict[int, np.ndarray] = {}
        h = x[:, :, None]
        for layer in cfg.layers:
            steps = []
            h, back = self._conv_vjp(f"enc.{layer}", h, cfg.stride)
            steps.append(back)
            h, back = self._prelu_vjp(f"enc.{layer}", h)
            steps.append(back)
            if layer in cfg.attention_layers:
                h, back = self._attn_vjp(f"enc.{layer}.attn", h, maps)
                steps.append(back)
            enc_steps[layer] = steps
            skips[layer] = h

        top_channels = cfg.channels(cfg.depth)
        h = np.concatenate([h, z], axis=-1)
        dec_steps: Dict[int, list] = {}
        out_back = None
        for layer in reversed(cfg.layers):
            steps = []
            if layer in cfg.attention_layers:
                h, back = self._attn_vjp(f"dec.{layer}.attn", h, maps)
                steps.append(("attn", back))
            if layer < cfg.depth:
                h = np.concatenate([h, skips[layer]], axis=-1)
            h, back = self._conv_vjp(f"dec.{layer}", h, cfg.stride, transposed=True)
            steps.append(("conv", back))
            if layer - 1 > cfg.shrink:
                h, back = self._prelu_vjp(f"dec.{layer}", h)
                steps.append(("prelu", back))
            elif cfg.output_activation == "tanh":
                h, out_back = tanh_vjp(h)
            dec_steps[layer] = steps

        enhanced = h[:, :, 0]

        def backward(d_enhanced):
            grads: Grads = {}
            dh = np.atleast_2d(d_enhanced)[:, :, None]
            if out_back is not None:
                (dh,) = out_back(dh)
            d_skip: Dict[int, np.ndarray] = {}
            for layer in cfg.layers:
                for kind, back in reversed(dec_steps[layer]):
                    dh = back(dh, grads)
                    if kind == "conv" and layer < cfg.depth:
                        width = cfg.channels(layer)
                        d_skip[layer] = dh[..., width:]
                        dh = dh[..., :width]
            d_z = dh[..., top_channels:]
            dh = dh[..., :top_channels]
            for layer in reversed(cfg.layers):
                if layer in d_skip:
                    dh = dh + d_skip[layer]
                for back in reversed(enc_steps[layer]):
                    dh = back(dh, grads)
            return grads, (d_z[0] if single else d_z)

        return (enhanced[0] if single else enhanced), backward, maps

    def forward(self, noisy: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.forward_vjp(noisy, z)[0]


class Discriminator(_Network):
    """Conv stack over a stacked (candidate, noisy) pair with a scalar score."""

    prefix = "D"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        self.vbn: Dict[int, VbnState] = {}
        c_in = 2
        for layer in cfg.layers:
            c_out = cfg.channels(layer)
            self._add_conv(f"disc.{layer}", cfg.filter_width, c_in, c_out)
            self.params[f"disc.{layer}.gamma"] = np.ones(c_out)
            self.params[f"disc.{layer}.beta_shift"] = np.zeros(c_out)
            self.vbn[layer] = VbnState()
            if layer in cfg.attention_layers:
                self._add_attention(f"disc.{layer}.attn", c_out)
            c_in = c_out

        self._add_conv("disc.reduce", 1, c_in, 1)
        features = cfg.time_dim(cfg.depth)
        self.params["disc.head.weight"] = glorot_uniform(self._rng, (features, 1), features, 1)
        self.params["disc.head.bias"] = np.zeros(1)
        self._rng = None

    @property
    def reference_ready(self) -> bool:
        return all(state.initialized for state in self.vbn.values())

    def _stack(self, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, bool]:
        if a.shape != b.shape:
            raise ShapeMismatch(f"discriminator pair shapes differ: {a.shape} vs {b.shape}")
        single = a.ndim == 1
        pair = np.stack([np.atleast_2d(a), np.atleast_2d(b)], axis=-1)
        if pair.shape[1] != self.cfg.scaled_input_len:
            raise ShapeMismatch(
                f"discriminator expects {self.cfg.scaled_input_len} samples, got {pair.shape[1]}"
            )
        return pair, single

    def set_reference(self, a: np.ndarray, b: np.ndarray) -> None:
        """Freeze VBN statistics layer by layer on a reference pair batch."""
        h, _ = self._stack(a, b)
        scratch: AttentionMaps = {}
        for layer in self.cfg.layers:
            h, _ = self._conv_vjp(f"disc.{layer}", h, self.cfg.stride)
            self.vbn[layer] = vbn_reference(h)
            h, _ = vbn_apply_vjp(
                h, self.vbn[layer],
                self.params[f"disc.{layer}.gamma"], self.params[f"disc.{layer}.beta_shift"],
                training=False,
            )
            h, _ = leaky_relu_vjp(h)
            if layer in self.cfg.attention_layers:
                h, _ = self._attn_vjp(f"disc.{layer}.attn", h, scratch)

    def forward_vjp(
        self,
        a: np.ndarray,
        b: np.ndarray,
        training: bool = True
    ) -> Tuple[np.ndarray, Callable[[np.ndarray], Tuple[Grads, np.ndarray]]]:
        """
        Score (a, b) pairs.

        Returns:
            (scores, backward); `backward(d_scores)` gives parameter gradients
            and the gradient w.r.t. the stacked (B, T, 2) input
        """
        if not self.reference_ready:
            raise UninitializedState("discriminator used before its VBN reference batch was set")
        h, single = self._stack(a, b)
        maps: AttentionMaps = {}
        steps = []
        for layer in self.cfg.layers:
            name = f"disc.{layer}"
            h, back = self._conv_vjp(name, h, self.cfg.stride)
            steps.append(back)
            h, vbn_back = vbn_apply_vjp(
                h, self.vbn[layer], self.params[f"{name}.gamma"], self.params[f"{name}.beta_shift"],
                training=training,
            )
            steps.append(_vbn_step(name, vbn_back))
            h, act_back = leaky_relu_vjp(h)
            steps.append(_plain_step(act_back))
            if layer in self.cfg.attention_layers:
                h, back = self._attn_vjp(f"{name}.attn", h, maps)
                steps.append(back)

        h, back = self._conv_vjp("disc.reduce", h, 1)
        steps.append(back)
        h, act_back = leaky_relu_vjp(h)
        steps.append(_plain_step(act_back))
        features = h[:, :, 0]
        scores, head_back = dense_vjp(features, self.params["disc.head.weight"], self.params["disc.head.bias"])
        scores = scores[:, 0]

        def backward(d_scores):
            grads: Grads = {}
            d_features, grads["disc.head.weight"], grads["disc.head.bias"] = head_back(
                np.reshape(d_scores, (-1, 1))
            )
            dh = d_features[:, :, None]
            for step in reversed(steps):
                dh = step(dh, grads)
            return grads, (dh[0] if single else dh)

        return (scores[0] if single else scores), backward

    def forward(self, a: np.ndarray, b: np.ndarray, training: bool = False) -> np.ndarray:
        return self.forward_vjp(a, b, training)[0]

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = super().state_arrays()
        for layer, state in self.vbn.items():
            if state.initialized:
                arrays[f"vbn.{layer}.ref_mean"] = state.ref_mean
                arrays[f"vbn.{layer}.ref_var"] = state.ref_var
                arrays[f"vbn.{layer}.ref_count"] = np.array([float(state.ref_count)])
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        super().load_state_arrays(arrays)
        for layer in self.vbn:
            if f"vbn.{layer}.ref_mean" in arrays:
                self.vbn[layer] = VbnState(
                    ref_mean=np.array(arrays[f"vbn.{layer}.ref_mean"]),
                    ref_var=np.array(arrays[f"vbn.{layer}.ref_var"]),
                    ref_count=int(arrays[f"vbn.{layer}.ref_count"][0]),
                )


def _vbn_step(name: str, back):
    def step(dy, grads: Grads):
        dx, grads[f"{name}.gamma"], grads[f"{name}.beta_shift"] = back(dy)
        return dx
    return step


def _plain_step(back):
    def step(dy, grads: Grads):
        return back(dy)[0]
    return step


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def build_generator(cfg: ModelConfig, seed: int = 0) -> Generator:
    """
    Build a generator with fresh weights.

    Raises:
        InvalidConfig: inconsistent ladder, scale or attention placement
    """
    cfg.ensure_valid()
    gen = Generator(cfg, rng_stream(seed, "init.generator"))
    logger.debug("generator_built", layers=len(cfg.layers), attention=cfg.attention_layers,
                 parameters=parameter_count(gen))
    return gen


def build_discriminator(cfg: ModelConfig, seed: int = 0) -> Discriminator:
    cfg.ensure_valid()
    disc = Discriminator(cfg, rng_stream(seed, "init.discriminator"))
    logger.debug("discriminator_built", layers=len(cfg.layers), parameters=parameter_count(disc))
    return disc


def generator_forward(gen: Generator, noisy: np.ndarray, z: np.ndarray) -> np.ndarray:
    return gen.forward(noisy, z)


def discriminator_forward(disc: Discriminator, a: np.ndarray, b: np.ndarray, training: bool = False) -> np.ndarray:
    return disc.forward(a, b, training)


def sample_latent(cfg: ModelConfig, rng: np.random.Generator, batch: Optional[int] = None) -> np.ndarray:
    """Standard normal latent shaped like the top encoder map."""
    shape = cfg.latent_shape if batch is None else (batch, *cfg.latent_shape)
    return rng.standard_normal(shape)


def init_vbn_reference(disc: Discriminator, clean: np.ndarray, noisy: np.ndarray) -> None:
    """Freeze the discriminator's VBN statistics on a (clean, noisy) reference batch."""
    disc.set_reference(clean, noisy)
    logger.info("vbn_reference_set", batch=int(np.atleast_2d(clean).shape[0]))


def refresh_spectral(net: _Network) -> None:
    """One power-iteration step for every normalised kernel."""
    for name, state in net.spectral.items():
        power_iteration(net.params[f"{name}.kernel"], state)


def parameter_count(net: _Network) -> int:
    return int(sum(arr.size for arr in net.params.values()))


def attention_overhead(cfg: ModelConfig) -> int:
    """Generator parameters added by attention at the configured layers."""
    total = 0
    for layer in cfg.attention_layers:
        total += attention_parameter_count(cfg.channels(layer), cfg.k)
        total += attention_parameter_count(cfg.decoder_attention_channels(layer), cfg.k)
    return total


def enhance_segments(gen: Generator, batch: SegmentBatch, rng: np.random.Generator) -> SegmentBatch:
    """Run G over every window with one latent draw per window, in order."""
    if batch.window != gen.cfg.scaled_input_len:
        raise InvalidConfig(f"segments of {batch.window} samples, generator expects {gen.cfg.scaled_input_len}")
    enhanced = np.zeros_like(batch.segments)
    for i, segment in enumerate(batch.segments):
        enhanced[i] = gen.forward(segment, sample_latent(gen.cfg, rng))
    return SegmentBatch(segments=enhanced, pad_len=batch.pad_len, window=batch.window)


def enhance_buffer(gen: Generator, buf: AudioBuffer, rng: np.random.Generator) -> AudioBuffer:
    """
    Full inference chain: preemphasis, non-overlapping windows, G, concatenation,
    deemphasis. Output length equals input length.
    """
    emphasized = preemphasize(buf)
    batch = segment_for_inference(emphasized, gen.cfg.scaled_input_len)
    enhanced = reconstruct(enhance_segments(gen, batch, rng))
    return deemphasize(enhanced)


def networks_from_checkpoint(ckpt: Checkpoint) -> Tuple[Generator, Discriminator]:
    """Rebuild both networks from a checkpoint's config and arrays."""
    gen = build_generator(ckpt.model_config)
    disc = build_discriminator(ckpt.model_config)
    unpack_networks(ckpt, gen, disc)
    return gen, disc
