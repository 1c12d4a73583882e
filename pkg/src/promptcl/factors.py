"""Three-factor low-rank representation of 3-D parameter tensors.

A (I, J, K) tensor is stored as three factor matrices of width r and
reconstructed as the rank-averaged triple product
P[i,j,k] = (1/r) * sum_t d1[i,t]*d2[j,t]*d3[k,t]. Prompts for the two
modalities share one depth factor (same storage, two uses); fused
projection weights use the same scheme with the bias folded in as an
extra input row. Factors are trained directly; nothing here fits a
given dense tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, cp3, narrow, parameter, reshape

INIT_SCALE = 0.5  # per-factor std is (1/r)^(1/3) * INIT_SCALE


@dataclass
class TriFactor:
    """Factors for one (I, J, K) tensor."""

    d1: Tensor  # I x r
    d2: Tensor  # J x r
    d3: Tensor  # K x r

    @property
    def rank(self) -> int:
        return self.d1.shape[1]

    @property
    def target_shape(self) -> tuple:
        return (self.d1.shape[0], self.d2.shape[0], self.d3.shape[0])

    def params(self) -> list:
        return [self.d1, self.d2, self.d3]


def init_factors(shape: tuple, rank: int, gen: np.random.Generator) -> TriFactor:
    """Fresh trainable factors with std (1/rank)^(1/3) * INIT_SCALE."""
    i, j, k = shape
    std = (1.0 / rank) ** (1.0 / 3.0) * INIT_SCALE
    return TriFactor(
        d1=parameter(gen.normal(0.0, std, size=(i, rank))),
        d2=parameter(gen.normal(0.0, std, size=(j, rank))),
        d3=parameter(gen.normal(0.0, std, size=(k, rank))),
    )


def reconstruct(f: TriFactor) -> Tensor:
    """Differentiable (I, J, K) reconstruction."""
    return cp3(f.d1, f.d2, f.d3)


def brute_force_reconstruct(f: TriFactor) -> np.ndarray:
    """Test oracle: explicit triple loop, no tape."""
    i_n, j_n, k_n = f.target_shape
    r = f.rank
    d1, d2, d3 = f.d1.data, f.d2.data, f.d3.data
    out = np.zeros((i_n, j_n, k_n))
    for i in range(i_n):
        for j in range(j_n):
            for k in range(k_n):
                acc = 0.0
                for t in range(r):
                    acc += d1[i, t] * d2[j, t] * d3[k, t]
                out[i, j, k] = acc / r
    return out


@dataclass
class CoupledPromptFactors:
    """Per-task prompt factors with the depth factor shared across modalities.

    PV (D, L, d_v) reconstructs through (shared_depth, vis_token, vis_dim);
    PL (D, L, d_l) through (shared_depth, txt_token, txt_dim). The shared
    factor is one Tensor referenced twice, so gradients from both
    reconstructions accumulate into the same leaf.
    """

    shared_depth: Tensor  # D x r
    vis_token: Tensor     # L x r
    vis_dim: Tensor       # d_v x r
    txt_token: Tensor     # L x r
    txt_dim: Tensor       # d_l x r

    @classmethod
    def init(cls, depth: int, length: int, d_v: int, d_l: int, rank: int,
             gen: np.random.Generator) -> "CoupledPromptFactors":
        std = (1.0 / rank) ** (1.0 / 3.0) * INIT_SCALE
        return cls(
            shared_depth=parameter(gen.normal(0.0, std, size=(depth, rank))),
            vis_token=parameter(gen.normal(0.0, std, size=(length, rank))),
            vis_dim=parameter(gen.normal(0.0, std, size=(d_v, rank))),
            txt_token=parameter(gen.normal(0.0, std, size=(length, rank))),
            txt_dim=parameter(gen.normal(0.0, std, size=(d_l, rank))),
        )

    def vision(self) -> TriFactor:
        return TriFactor(self.shared_depth, self.vis_token, self.vis_dim)

    def text(self) -> TriFactor:
        return TriFactor(self.shared_depth, self.txt_token, self.txt_dim)

    def params(self) -> list:
        return [self.shared_depth, self.vis_token, self.vis_dim,
                self.txt_token, self.txt_dim]


@dataclass
class FusionFactors:
    """Factored affine maps between modalities, one layer slice per fused depth.

    Each direction holds factors of a (D-1, d_in+1, d_out) tensor; the last
    input row is the bias.
    """

    vis_depth: Tensor     # (D-1) x r, language -> vision
    vis_in: Tensor        # (d_l+1) x r
    vis_out: Tensor       # d_v x r
    txt_depth: Tensor     # (D-1) x r, vision -> language
    txt_in: Tensor        # (d_v+1) x r
    txt_out: Tensor       # d_l x r

    @classmethod
    def init(cls, depth: int, d_v: int, d_l: int, rank: int,
             gen: np.random.Generator) -> "FusionFactors":
        std = (1.0 / rank) ** (1.0 / 3.0) * INIT_SCALE

        def p(n, m):
            return parameter(gen.normal(0.0, std, size=(n, m)))

        return cls(
            vis_depth=p(depth - 1, rank), vis_in=p(d_l + 1, rank), vis_out=p(d_v, rank),
            txt_depth=p(depth - 1, rank), txt_in=p(d_v + 1, rank), txt_out=p(d_l, rank),
        )

    def direction(self, name: str) -> TriFactor:
        if name == "vis":  # language -> vision
            return TriFactor(self.vis_depth, self.vis_in, self.vis_out)
        if name == "txt":  # vision -> language
            return TriFactor(self.txt_depth, self.txt_in, self.txt_out)
        raise ValueError(f"unknown fusion direction {name!r}")

    def params(self) -> list:
        return [self.vis_depth, self.vis_in, self.vis_out,
                self.txt_depth, self.txt_in, self.txt_out]


def reconstruct_linear(f: TriFactor, layer: int) -> tuple:
    """Weight (d_in, d_out) and bias (d_out,) for one fused layer.

    `layer` indexes the depth axis, i.e. 0..D-2 for a D-deep prompt stack.
    """
    depth, d_in_plus_1, d_out = f.target_shape
    if not (0 <= layer < depth):
        raise ValueError(f"reconstruct_linear: layer {layer} out of range [0, {depth})")
    full = cp3(f.d1, f.d2, f.d3)
    sliced = narrow(full, 0, layer, layer + 1)
    mat = reshape(sliced, (d_in_plus_1, d_out))
    weight = narrow(mat, 0, 0, d_in_plus_1 - 1)
    bias = reshape(narrow(mat, 0, d_in_plus_1 - 1, d_in_plus_1), (d_out,))
    return weight, bias


def param_count(depth: int, length: int, d_v: int, d_l: int, rank: int,
                variant: str, with_fusion: bool = False,
                fusion_rank: Optional[int] = None) -> int:
    """Trainable parameters per task for CP (dense) vs DP (factored) prompts.

    Fusion adds, per direction, the factored count for DP or the dense
    (D-1)*(d_in+1)*d_out count for CP.
    """
    if variant not in ("cp", "dp"):
        raise ValueError(f"param_count: variant must be 'cp' or 'dp', got {variant!r}")
    if variant == "cp":
        total = depth * length * d_v + depth * length * d_l
    else:
        total = rank * (depth + length + d_v + length + d_l)
    if with_fusion:
        fr = fusion_rank if fusion_rank is not None else rank
        for d_in, d_out in ((d_l, d_v), (d_v, d_l)):
            if variant == "cp":
                total += (depth - 1) * (d_in + 1) * d_out
            else:
                total += fr * ((depth - 1) + (d_in + 1) + d_out)
    return total
