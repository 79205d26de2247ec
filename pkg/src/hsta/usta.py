"""Unimodal space-time attention.

One layer concatenates a modality's feature tokens with its [CLS] row,
applies single-head self-attention (scores scaled by 1/sqrt(d)), adds the
residual, layer-normalizes, and splits the rows back apart. Layers cascade;
the video and special-frame stacks run independently with their own weights.

Faithful to the printed formulation: no feed-forward sublayer, no biases on
the q/k/v projections, post-norm ordering, exactly one head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import (
    Param,
    Tape,
    Tensor,
    add,
    concat_rows,
    layer_norm,
    matmul,
    scale,
    softmax_rows,
    split_rows,
    transpose,
)

LAYER_NORM_EPS = 1e-5


class Modality(Enum):
    VIDEO = "video"
    SPECIAL = "special"


@dataclass(frozen=True)
class TokenState:
    """A modality's N feature tokens plus its single [CLS] token."""

    features: Tensor
    cls: Tensor
    modality: Modality

    def __post_init__(self):
        if self.features.data.ndim != 2 or self.cls.shape != (1, self.features.shape[1]):
            raise DimensionError(
                f"token state: features {self.features.shape} with cls {self.cls.shape}"
            )

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def count(self) -> int:
        return self.features.shape[0]


def init_weight(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    """Uniform in [-1/sqrt(cols), +1/sqrt(cols)]: keeps attention logits O(1)."""
    bound = 1.0 / math.sqrt(cols)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)))


@dataclass
class UstaLayerParams:
    w_q: Param
    w_k: Param
    w_v: Param
    gamma: Param
    beta: Param

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, prefix: str) -> "UstaLayerParams":
        return cls(
            w_q=Param(f"{prefix}.w_q", init_weight(rng, d, d)),
            w_k=Param(f"{prefix}.w_k", init_weight(rng, d, d)),
            w_v=Param(f"{prefix}.w_v", init_weight(rng, d, d)),
            gamma=Param(f"{prefix}.ln_gamma", Tensor(np.ones(d))),
            beta=Param(f"{prefix}.ln_beta", Tensor(np.zeros(d))),
        )

    @property
    def width(self) -> int:
        return self.w_q.value.shape[0]

    def params(self) -> list[Param]:
        return [self.w_q, self.w_k, self.w_v, self.gamma, self.beta]


def usta_layer_forward(
    state: TokenState, params: UstaLayerParams, tape: Tape | None = None
) -> TokenState:
    """One self-attention refinement over [features ‖ cls]; shapes preserved."""
    d = state.width
    if params.width != d:
        raise DimensionError(
            f"usta layer of width {params.width} applied to tokens of width {d}"
        )

    def p(param):
        return param.value if tape is None else tape.watch(param)

    z = concat_rows(state.features, state.cls)
    q = matmul(z, p(params.w_q))
    k = matmul(z, p(params.w_k))
    v = matmul(z, p(params.w_v))
    attn = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d)))
    refined = layer_norm(
        add(z, matmul(attn, v)), p(params.gamma), p(params.beta), LAYER_NORM_EPS
    )
    features, cls_out = split_rows(refined, state.count)
    return TokenState(features, cls_out, state.modality)


def usta_stack_forward(
    state: TokenState,
    layers: list[UstaLayerParams],
    depth: int,
    tape: Tape | None = None,
) -> TokenState:
    """Cascade ``depth`` layers left to right; depth 0 is the identity."""
    if len(layers) != depth:
        raise ConfigurationError(
            f"usta stack configured for {depth} layers but given {len(layers)}"
        )
    for layer in layers:
        state = usta_layer_forward(state, layer, tape)
    return state


def usta_parallel(
    video: TokenState,
    special: TokenState,
    video_layers: list[UstaLayerParams],
    special_layers: list[UstaLayerParams],
    tape: Tape | None = None,
) -> tuple[TokenState, TokenState]:
    """Run both modality stacks independently; no parameter or data sharing."""
    out_video = usta_stack_forward(video, video_layers, len(video_layers), tape)
    out_special = usta_stack_forward(special, special_layers, len(special_layers), tape)
    return out_video, out_special
