"""Pydantic models for the SASEGAN enhancer."""

import math
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field

from config import settings
from errors import InvalidConfig

FULL_SCALE_SCHEDULE = [16, 32, 32, 64, 64, 128, 128, 256, 256, 512, 1024]


def parse_attention_layers(text: str, depth: int = 11, first_layer: int = 1) -> List[int]:
    """
    Parse an attention placement flag.

    "none" gives the plain SEGAN layout, "all" gives every layer from 3 (or the
    first layer kept at the current scale) to the top, otherwise a comma list.
    """
    text = text.strip().lower()
    if text in ("", "none"):
        return []
    if text == "all":
        return list(range(max(3, first_layer), depth + 1))
    try:
        layers = sorted({int(v) for v in text.split(",") if v.strip()})
    except ValueError:
        raise InvalidConfig(f"attention layers must be 'all', 'none' or a comma list, got '{text}'")
    return layers


class ModelConfig(BaseModel):
    """Generator/discriminator architecture."""
    filter_schedule: List[int] = Field(default_factory=lambda: list(FULL_SCALE_SCHEDULE))
    filter_width: int = 31
    stride: int = 2
    input_len: int = 16384
    attention_layers: List[int] = Field(default_factory=lambda: [11])
    k: int = 8
    p: int = 4
    scale_divisor: int = 1
    spectral_norm: bool = True
    output_activation: Literal["tanh", "linear"] = "tanh"

    @classmethod
    def from_settings(cls, **overrides: Any) -> "ModelConfig":
        """
        Build from `settings`; non-None overrides win. `attention_layers` may be
        given as placement text ("all", "none", "3,11").
        """
        values: Dict[str, Any] = {
            "filter_schedule": settings.filter_schedule(),
            "filter_width": settings.FILTER_WIDTH,
            "stride": settings.STRIDE,
            "input_len": settings.WINDOW,
            "k": settings.ATTENTION_K,
            "p": settings.ATTENTION_P,
            "scale_divisor": settings.SCALE_DIVISOR,
            "spectral_norm": settings.SPECTRAL_NORM,
        }
        values.update({key: val for key, val in overrides.items() if val is not None})
        placement = values.pop("attention_layers", settings.ATTENTION_LAYERS)
        cfg = cls(**values)
        if isinstance(placement, str):
            placement = parse_attention_layers(placement, cfg.depth, cfg.shrink + 1)
        cfg.attention_layers = list(placement)
        return cfg

    @property
    def depth(self) -> int:
        return len(self.filter_schedule)

    @property
    def shrink(self) -> int:
        """Number of bottom rungs removed by scale_divisor."""
        j, d = 0, self.scale_divisor
        while d > 1 and d % self.stride == 0:
            d //= self.stride
            j += 1
        return j

    @property
    def layers(self) -> List[int]:
        """Full-scale indices of the layers present at this scale."""
        return list(range(self.shrink + 1, self.depth + 1))

    @property
    def scaled_input_len(self) -> int:
        return self.input_len // self.scale_divisor

    def channels(self, layer: int) -> int:
        """Channel count of encoder map `layer` (0 is the waveform)."""
        if layer == self.shrink:
            return 1
        return max(1, self.filter_schedule[layer - 1] // self.scale_divisor)

    def time_dim(self, layer: int) -> int:
        return self.input_len // self.stride ** layer

    @property
    def latent_shape(self) -> Tuple[int, int]:
        return self.time_dim(self.depth), self.channels(self.depth)

    def decoder_attention_channels(self, layer: int) -> int:
        # the top level attends over the stacked [enc || z] bottleneck
        if layer == self.depth:
            return 2 * self.channels(layer)
        return self.channels(layer)

    def ensure_valid(self) -> "ModelConfig":
        """Raise InvalidConfig unless the ladder, scale and placement are consistent."""
        if self.depth < 1 or any(c < 1 for c in self.filter_schedule):
            raise InvalidConfig("filter_schedule must hold at least one positive count")
        if self.filter_width < 1 or self.filter_width % 2 == 0:
            raise InvalidConfig(f"filter_width must be odd, got {self.filter_width}")
        if self.stride < 2:
            raise InvalidConfig(f"stride must be at least 2, got {self.stride}")
        if self.input_len % self.stride ** self.depth != 0:
            raise InvalidConfig(
                f"input_len {self.input_len} is not divisible by stride^{self.depth}"
            )
        if self.scale_divisor < 1 or self.stride ** self.shrink != self.scale_divisor:
            raise InvalidConfig(
                f"scale_divisor must be a power of the stride, got {self.scale_divisor}"
            )
        if self.shrink >= self.depth:
            raise InvalidConfig(f"scale_divisor {self.scale_divisor} removes every layer")
        if self.k < 1 or self.p < 1:
            raise InvalidConfig("attention k and p must be at least 1")
        for layer in self.attention_layers:
            if not 1 <= layer <= self.depth:
                raise InvalidConfig(
                    f"attention layer {layer} out of range 1..{self.depth}"
                )
            if layer <= self.shrink:
                raise InvalidConfig(
                    f"attention layer {layer} is removed at scale_divisor {self.scale_divisor}"
                )
            for channels in (self.channels(layer), self.decoder_attention_channels(layer)):
                if channels % self.k != 0:
                    raise InvalidConfig(
                        f"attention layer {layer}: {channels} channels not divisible by k={self.k}"
                    )
        return self


class TrainConfig(BaseModel):
    """Adversarial training hyper-parameters."""
    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=50, ge=1)
    lr: float = Field(default=2e-4, gt=0)
    rmsprop_decay: float = Field(default=0.9, ge=0, lt=1)
    rmsprop_eps: float = Field(default=1e-8, gt=0)
    lambda_l1: float = Field(default=100.0, ge=0)
    seed: int = 0
    max_steps: Optional[int] = Field(default=None, ge=1)
    checkpoint_every: int = Field(default=100, ge=1)
    keep_checkpoints: int = Field(default=5, ge=1)
    log_every: int = Field(default=10, ge=1)

    @classmethod
    def from_settings(cls, **overrides: Any) -> "TrainConfig":
        values: Dict[str, Any] = {
            "epochs": settings.EPOCHS,
            "batch_size": settings.BATCH_SIZE,
            "lr": settings.LEARNING_RATE,
            "rmsprop_decay": settings.RMSPROP_DECAY,
            "rmsprop_eps": settings.RMSPROP_EPS,
            "lambda_l1": settings.LAMBDA_L1,
            "seed": settings.SEED,
            "checkpoint_every": settings.CHECKPOINT_EVERY,
            "keep_checkpoints": settings.KEEP_CHECKPOINTS,
            "log_every": settings.LOG_EVERY,
        }
        values.update({key: val for key, val in overrides.items() if val is not None})
        return cls(**values)


class TrainRecord(BaseModel):
    """One optimisation step."""
    step: int
    epoch: int
    d_loss: float
    g_adv: float
    g_l1: float
    betas: List[float] = Field(default_factory=list)

    def is_finite(self) -> bool:
        values = [self.d_loss, self.g_adv, self.g_l1, *self.betas]
        return all(math.isfinite(v) for v in values)


class Footprint(BaseModel):
    """Attention map memory at one layer."""
    layer: int
    time_dim: int
    pooled_keys: int
    raw_map_elems: int
    pooled_map_elems: int


class UtteranceMetrics(BaseModel):
    """Objective metrics of one utterance."""
    id: str
    ssnr_db: float
    stoi: float


class MetricReport(BaseModel):
    """Per-utterance metrics plus corpus means."""
    utterances: List[UtteranceMetrics]

    @property
    def mean_ssnr_db(self) -> float:
        return math.fsum(u.ssnr_db for u in self.utterances) / len(self.utterances)

    @property
    def mean_stoi(self) -> float:
        return math.fsum(u.stoi for u in self.utterances) / len(self.utterances)


class RunManifest(BaseModel):
    """One manifest per CLI run, written next to its outputs."""
    command: str
    seed: Optional[int] = None
    config: Dict[str, Any] = Field(default_factory=dict)
    started_at: str
    finished_at: Optional[str] = None
    artifacts: Dict[str, str] = Field(default_factory=dict)

    def to_text(self) -> str:
        """Flat key=value text, one entry per line."""
        lines = [f"command={self.command}", f"seed={self.seed}"]
        lines += [f"config.{key}={_flat(val)}" for key, val in sorted(self.config.items())]
        lines += [f"started_at={self.started_at}", f"finished_at={self.finished_at}"]
        lines += [f"artifact.{key}={val}" for key, val in sorted(self.artifacts.items())]
        return "\n".join(lines) + "\n"


def _flat(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


class ArrayEntry(BaseModel):
    """Location of one named parameter inside a checkpoint payload."""
    name: str
    shape: List[int]
    offset: int  # bytes from the start of the payload


class CheckpointManifest(BaseModel):
    """Header of a checkpoint file."""
    format_version: int
    created: Dict[str, Any]
    network_config: ModelConfig
    train_config: Optional[TrainConfig] = None
    step: int = 0
    arrays: List[ArrayEntry]
    payload_bytes: int
    payload_sha256: str


class PlacementRow(BaseModel):
    """One attention placement of the placement study."""
    label: str
    attention_layers: List[int]
    mean_ssnr_db: float
    mean_stoi: float
    ssnr_gain_db: float = 0.0
    stoi_gain: float = 0.0
    final_g_l1: Optional[float] = None
