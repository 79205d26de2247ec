"""Crossmodal space-time attention.

Each direction takes one modality's [CLS] row and the other modality's
feature tokens: the [CLS] is projected by an input MLP, concatenated on top
of the foreign features, and used as the sole attention query over that
concatenation; a bare residual (no LayerNorm here) and an output MLP produce
the refined [CLS]. Feature tokens pass through unchanged, bitwise. The two
directions are symmetric with independent parameters.

The MLPs are linear -> GELU -> linear with hidden width 2d and biases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .tensor import (
    Param,
    Tape,
    Tensor,
    add,
    concat_rows,
    gelu,
    matmul,
    scale,
    softmax_rows,
    transpose,
)
from .usta import TokenState, init_weight

MLP_HIDDEN_FACTOR = 2


@dataclass
class MlpParams:
    w1: Param
    b1: Param
    w2: Param
    b2: Param

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, prefix: str) -> "MlpParams":
        hidden = MLP_HIDDEN_FACTOR * d
        return cls(
            w1=Param(f"{prefix}.w1", init_weight(rng, d, hidden)),
            b1=Param(f"{prefix}.b1", Tensor(np.zeros((1, hidden)))),
            w2=Param(f"{prefix}.w2", init_weight(rng, hidden, d)),
            b2=Param(f"{prefix}.b2", Tensor(np.zeros((1, d)))),
        )

    def params(self) -> list[Param]:
        return [self.w1, self.b1, self.w2, self.b2]


def mlp_forward(x: Tensor, params: MlpParams, tape: Tape | None = None) -> Tensor:
    def p(param):
        return param.value if tape is None else tape.watch(param)

    hidden = gelu(add(matmul(x, p(params.w1)), p(params.b1)))
    return add(matmul(hidden, p(params.w2)), p(params.b2))


@dataclass
class CstaDirectionParams:
    """Parameters for one [CLS]-queries-foreign-features direction."""

    mlp_in: MlpParams
    w_q: Param
    w_k: Param
    w_v: Param
    mlp_out: MlpParams

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, prefix: str) -> "CstaDirectionParams":
        return cls(
            mlp_in=MlpParams.init(d, rng, f"{prefix}.mlp_in"),
            w_q=Param(f"{prefix}.w_q", init_weight(rng, d, d)),
            w_k=Param(f"{prefix}.w_k", init_weight(rng, d, d)),
            w_v=Param(f"{prefix}.w_v", init_weight(rng, d, d)),
            mlp_out=MlpParams.init(d, rng, f"{prefix}.mlp_out"),
        )

    def params(self) -> list[Param]:
        return [
            *self.mlp_in.params(),
            self.w_q,
            self.w_k,
            self.w_v,
            *self.mlp_out.params(),
        ]


@dataclass
class CstaParams:
    video_to_special: CstaDirectionParams
    special_to_video: CstaDirectionParams

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, prefix: str) -> "CstaParams":
        return cls(
            video_to_special=CstaDirectionParams.init(d, rng, f"{prefix}.v2s"),
            special_to_video=CstaDirectionParams.init(d, rng, f"{prefix}.s2v"),
        )

    def params(self) -> list[Param]:
        return [*self.video_to_special.params(), *self.special_to_video.params()]


def csta_direction(
    cls_src: Tensor,
    feat_other: Tensor,
    params: CstaDirectionParams,
    tape: Tape | None = None,
) -> Tensor:
    """Refine one [CLS] row against the other modality's feature tokens.

    The query comes from the projected [CLS] row only; keys and values come
    from the concatenation [projected-cls ‖ foreign features], so the [CLS]
    participates as one of the N+1 key/value rows.
    """
    d = cls_src.shape[1]
    if cls_src.shape[0] != 1:
        raise DimensionError(f"cls_src must be a single row, got {cls_src.shape}")
    if feat_other.data.ndim != 2 or feat_other.shape[1] != d:
        raise DimensionError(
            f"csta direction: cls width {d} vs features {feat_other.shape}"
        )

    def p(param):
        return param.value if tape is None else tape.watch(param)

    c = mlp_forward(cls_src, params.mlp_in, tape)
    cat = concat_rows(c, feat_other)
    q = matmul(c, p(params.w_q))
    k = matmul(cat, p(params.w_k))
    v = matmul(cat, p(params.w_v))
    attn = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d)))
    h = add(c, matmul(attn, v))
    return mlp_forward(h, params.mlp_out, tape)


def csta_forward(
    video: TokenState,
    special: TokenState,
    params: CstaParams,
    tape: Tape | None = None,
) -> tuple[TokenState, TokenState]:
    """Symmetric crossmodal exchange of [CLS] rows; features pass through."""
    if video.width != special.width:
        raise DimensionError(
            f"csta: modality widths differ ({video.width} vs {special.width})"
        )
    video_cls = csta_direction(
        video.cls, special.features, params.video_to_special, tape
    )
    special_cls = csta_direction(
        special.cls, video.features, params.special_to_video, tape
    )
    return (
        TokenState(video.features, video_cls, video.modality),
        TokenState(special.features, special_cls, special.modality),
    )
