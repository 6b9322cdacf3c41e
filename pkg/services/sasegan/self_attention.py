"""
Non-local self-attention over 1D feature maps.

Queries come from every time step; keys and values are max-pooled over time
by a factor p after their 1x1 projections. The attentive output is added back
through a learnable scalar gate initialised to zero.
"""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Optional, Tuple, Union

import numpy as np
import structlog

from errors import IndivisibleChannels, OutOfRangeLayer, ShapeMismatch
from models import Footprint
from nn_core import dense_vjp, glorot_uniform, maxpool1d_vjp, softmax_rows_vjp

logger = structlog.get_logger()

ATTENTION_CSV_HEADER = ["layer", "row_index", "key_index", "weight"]


@dataclass
class AttentionParams:
    w_q: np.ndarray  # C x C/k
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # C/k x C
    beta: float = 0.0
    k: int = 8
    p: int = 4

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def width(self) -> int:
        return self.w_q.shape[1]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


@dataclass
class AttentionOutput:
    f_tilde: np.ndarray
    attn_map: np.ndarray  # L x ceil(L/p), batched maps carry a leading axis


def attention_parameter_count(channels: int, k: int) -> int:
    """Three C x C/k projections, one C/k x C projection and the gate."""
    return 4 * channels * (channels // k) + 1


def attn_init(
    channels: int,
    k: int = 8,
    p: int = 4,
    rng: Union[np.random.Generator, int, None] = None
) -> AttentionParams:
    """
    Fresh attention layer for C channels.

    Raises:
        IndivisibleChannels: C is not a multiple of k
    """
    if k < 1 or p < 1:
        raise ValueError(f"k and p must be at least 1, got k={k}, p={p}")
    if channels % k != 0:
        raise IndivisibleChannels(f"{channels} channels not divisible by k={k}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    width = channels // k
    project = lambda: glorot_uniform(rng, (channels, width), channels, width)  # noqa: E731
    return AttentionParams(
        w_q=project(),
        w_k=project(),
        w_v=project(),
        w_o=glorot_uniform(rng, (width, channels), width, channels),
        beta=0.0,
        k=k,
        p=p,
    )


def attn_forward_vjp(
    feature_map: np.ndarray,
    params: AttentionParams
) -> Tuple[AttentionOutput, Callable[[np.ndarray], Tuple[np.ndarray, Dict[str, np.ndarray]]]]:
    """
    Attention forward pass with its backward closure.

    `backward(d_f_tilde)` returns the input gradient and a dict of parameter
    gradients keyed w_q, w_k, w_v, w_o and beta.
    """
    if feature_map.shape[-1] != params.channels:
        raise ShapeMismatch(
            f"attention expects {params.channels} channels, got {feature_map.shape[-1]}"
        )

    q, q_back = dense_vjp(feature_map, params.w_q)
    k_raw, k_back = dense_vjp(feature_map, params.w_k)
    v_raw, v_back = dense_vjp(feature_map, params.w_v)
    k_pool, k_pool_back = maxpool1d_vjp(k_raw, params.p)
    v_pool, v_pool_back = maxpool1d_vjp(v_raw, params.p)

    k_pool_t = np.swapaxes(k_pool, -1, -2)
    attn, attn_back = softmax_rows_vjp(q @ k_pool_t)
    context = attn @ v_pool
    out, out_back = dense_vjp(context, params.w_o)
    f_tilde = params.beta * out + feature_map

    def backward(d_f_tilde):
        d_beta = float(np.sum(d_f_tilde * out))
        d_context, d_w_o = out_back(params.beta * d_f_tilde)
        d_attn = d_context @ np.swapaxes(v_pool, -1, -2)
        d_v_pool = np.swapaxes(attn, -1, -2) @ d_context
        (d_scores,) = attn_back(d_attn)
        d_q = d_scores @ k_pool
        d_k_pool = np.swapaxes(d_scores, -1, -2) @ q

        (d_k_raw,) = k_pool_back(d_k_pool)
        (d_v_raw,) = v_pool_back(d_v_pool)
        d_in_q, d_w_q = q_back(d_q)
        d_in_k, d_w_k = k_back(d_k_raw)
        d_in_v, d_w_v = v_back(d_v_raw)

        grads = {"w_q": d_w_q, "w_k": d_w_k, "w_v": d_w_v, "w_o": d_w_o, "beta": d_beta}
        return d_f_tilde + d_in_q + d_in_k + d_in_v, grads

    return AttentionOutput(f_tilde=f_tilde, attn_map=attn), backward


def attn_forward(feature_map: np.ndarray, params: AttentionParams) -> AttentionOutput:
    """F~ = beta * ((softmax(Q K^T) V) W_O) + F with K, V pooled over time."""
    return attn_forward_vjp(feature_map, params)[0]


def attn_footprint(
    input_len: int = 16384,
    layer: int = 11,
    p: int = 4,
    depth: int = 11,
    stride: int = 2
) -> Footprint:
    """
    Attention map size at encoder layer `layer`.

    Raises:
        OutOfRangeLayer: layer outside 1..depth
    """
    if not 1 <= layer <= depth:
        raise OutOfRangeLayer(f"layer {layer} outside 1..{depth}")
    time_dim = input_len // stride ** layer
    pooled_keys = -(-time_dim // p)
    return Footprint(
        layer=layer,
        time_dim=time_dim,
        pooled_keys=pooled_keys,
        raw_map_elems=time_dim * time_dim,
        pooled_map_elems=time_dim * pooled_keys,
    )


def write_attention_csv(
    path: Union[str, Path],
    layer: int,
    attn_map: np.ndarray,
    rows: Optional[Iterable[int]] = None
) -> int:
    """
    Dump attention rows as `layer,row_index,key_index,weight` lines.

    Returns:
        number of rows written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(range(attn_map.shape[0])) if rows is None else list(rows)
    for row in rows:
        if not 0 <= row < attn_map.shape[0]:
            raise ValueError(f"row index {row} outside 0..{attn_map.shape[0] - 1}")

    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ATTENTION_CSV_HEADER)
        for row in rows:
            for key, weight in enumerate(attn_map[row]):
                writer.writerow([layer, row, key, repr(float(weight))])

    logger.info("attention_dumped", path=str(path), layer=layer, rows=len(rows), keys=attn_map.shape[1])
    return len(rows)
