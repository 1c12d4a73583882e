"""A small dual-encoder (vision-like and text-like transformer stacks).

Each encoder is a pre-norm transformer with a leading pooling token and L
prompt slots between the pooling token and the content tokens. Deep
prompting adds the reconstructed per-layer prompt to the slot states at
the input of the first `depth` layers; with fusion enabled the two
encoders advance in lockstep and blend each other's pre-fusion slot
states through factored affine maps. The backbone is pretrained once on
generic pairs and frozen; all later training flows through prompts only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng
from .autodiff import (
    Tensor, add, concat, constant, embed, gelu, l2_normalize, layer_norm,
    matmul, narrow, parameter, reshape, scale, softmax, transpose,
)
from .factors import CoupledPromptFactors, FusionFactors, reconstruct, reconstruct_linear
from .optim import Adam, CosineSchedule


@dataclass
class BackboneConfig:
    n_layers: int = 4
    depth: int = 3          # prompted layers, <= n_layers
    d_v: int = 32
    d_l: int = 24
    prompt_len: int = 8
    heads: int = 4
    ffn_mult: int = 2
    d_joint: int = 16
    vocab: int = 512
    n_patches: int = 16
    patch_dim: int = 8
    cap_len: int = 16

    def __post_init__(self):
        if self.depth > self.n_layers:
            raise ValueError(f"depth {self.depth} exceeds n_layers {self.n_layers}")
        if self.d_v % self.heads or self.d_l % self.heads:
            raise ValueError(f"widths ({self.d_v}, {self.d_l}) not divisible by heads {self.heads}")


class _Layer:
    """One pre-norm transformer layer: x += attn(ln1 x); x += mlp(ln2 x)."""

    def __init__(self, d: int, heads: int, ffn_mult: int, gen: np.random.Generator):
        s = 1.0 / math.sqrt(d)
        self.heads = heads
        self.d = d
        self.ln1_g = parameter(np.ones(d))
        self.ln1_b = parameter(np.zeros(d))
        self.wq = parameter(gen.normal(0, s, (d, d)))
        self.wk = parameter(gen.normal(0, s, (d, d)))
        self.wv = parameter(gen.normal(0, s, (d, d)))
        self.wo = parameter(gen.normal(0, s, (d, d)))
        self.bo = parameter(np.zeros(d))
        self.ln2_g = parameter(np.ones(d))
        self.ln2_b = parameter(np.zeros(d))
        h = ffn_mult * d
        self.w1 = parameter(gen.normal(0, s, (d, h)))
        self.b1 = parameter(np.zeros(h))
        self.w2 = parameter(gen.normal(0, 1.0 / math.sqrt(h), (h, d)))
        self.b2 = parameter(np.zeros(d))

    _PARAM_NAMES = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "bo",
                    "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")

    def params(self):
        return [getattr(self, n) for n in self._PARAM_NAMES]

    def named_params(self, prefix: str):
        return [(f"{prefix}/{n}", getattr(self, n)) for n in self._PARAM_NAMES]

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h = self.heads
        hd = d // h
        xn = layer_norm(x, self.ln1_g, self.ln1_b)

        def split_heads(m):
            return transpose(reshape(m, (b, t, h, hd)), (0, 2, 1, 3))

        q = split_heads(matmul(xn, self.wq))
        k = split_heads(matmul(xn, self.wk))
        v = split_heads(matmul(xn, self.wv))
        att = softmax(scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd)))
        ctx = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (b, t, d))
        x = add(x, add(matmul(ctx, self.wo), self.bo))
        xn = layer_norm(x, self.ln2_g, self.ln2_b)
        hmid = gelu(add(matmul(xn, self.w1), self.b1))
        return add(x, add(matmul(hmid, self.w2), self.b2))


class _Encoder:
    """One modality stack: input embedding, pool token, layers, joint head."""

    def __init__(self, kind: str, cfg: BackboneConfig, gen: np.random.Generator):
        self.kind = kind
        d = cfg.d_v if kind == "vision" else cfg.d_l
        self.d = d
        content = cfg.n_patches if kind == "vision" else cfg.cap_len
        self.seq_len = 1 + cfg.prompt_len + content
        if kind == "vision":
            self.in_proj = parameter(gen.normal(0, 1.0 / math.sqrt(cfg.patch_dim),
                                                (cfg.patch_dim, d)))
            self.in_bias = parameter(np.zeros(d))
        else:
            self.table = parameter(gen.normal(0, 0.02, (cfg.vocab, d)))
        self.pool = parameter(gen.normal(0, 0.02, (d,)))
        self.pos = parameter(gen.normal(0, 0.02, (self.seq_len, d)))
        self.layers = [_Layer(d, cfg.heads, cfg.ffn_mult, gen) for _ in range(cfg.n_layers)]
        self.ln_f_g = parameter(np.ones(d))
        self.ln_f_b = parameter(np.zeros(d))
        self.head = parameter(gen.normal(0, 1.0 / math.sqrt(d), (d, cfg.d_joint)))

    def params(self):
        return [t for _, t in self.named_params(self.kind)]

    def named_params(self, prefix: str):
        out = [(f"{prefix}/{n}", getattr(self, n))
               for n in ("pool", "pos", "ln_f_g", "ln_f_b", "head")]
        if self.kind == "vision":
            out += [(f"{prefix}/in_proj", self.in_proj), (f"{prefix}/in_bias", self.in_bias)]
        else:
            out += [(f"{prefix}/table", self.table)]
        for i, layer in enumerate(self.layers):
            out += layer.named_params(f"{prefix}/layer{i}")
        return out

    def embed_input(self, x, prompt_len: int) -> Tensor:
        """[pool, L zero slots, content] + positions, as a (B, T, d) tensor."""
        if self.kind == "vision":
            x = constant(np.asarray(x, dtype=np.float64))
            content = add(matmul(x, self.in_proj), self.in_bias)
        else:
            content = embed(self.table, np.asarray(x))
        b = content.shape[0]
        pool = constant(np.ones((b, 1, 1))) * reshape(self.pool, (1, 1, self.d))
        slots = constant(np.zeros((b, prompt_len, self.d)))
        seq = concat([pool, slots, content], axis=1)
        return add(seq, reshape(self.pos, (1, self.seq_len, self.d)))

    def pooled(self, x: Tensor) -> Tensor:
        xn = layer_norm(x, self.ln_f_g, self.ln_f_b)
        head_in = reshape(narrow(xn, 1, 0, 1), (x.shape[0], self.d))
        return l2_normalize(matmul(head_in, self.head))


@dataclass
class PromptSet:
    """One task's learnable state: prompt factors (or dense prompts for the
    uncompressed variant) and optional fusion projections."""

    task_id: int
    prompt_type: str                     # "dp" (factored) or "cp" (dense)
    prompts: object                      # CoupledPromptFactors or DensePrompts
    fusion: Optional[object] = None      # FusionFactors or DenseFusion
    lambda_v: float = 0.9
    lambda_l: float = 0.9
    frozen: bool = False

    def vision_prompts(self) -> Tensor:
        if self.prompt_type == "dp":
            return reconstruct(self.prompts.vision())
        return self.prompts.pv

    def text_prompts(self) -> Tensor:
        if self.prompt_type == "dp":
            return reconstruct(self.prompts.text())
        return self.prompts.pl

    def effective_prompts(self) -> tuple:
        """The (vision, text) prompt stacks actually inserted: the raw
        prompts, blended across modalities when fusion maps are present."""
        pv, pl = self.vision_prompts(), self.text_prompts()
        if self.fusion is None:
            return pv, pl
        return fuse_prompts(pv, pl, self, self.lambda_v, self.lambda_l)

    def fusion_linear(self, direction: str, layer: int):
        """Affine map for fused depth `layer` (0-based, 0..depth-2)."""
        if isinstance(self.fusion, FusionFactors):
            return reconstruct_linear(self.fusion.direction(direction), layer)
        return self.fusion.linear(direction, layer)

    def params(self) -> list:
        out = list(self.prompts.params())
        if self.fusion is not None:
            out += self.fusion.params()
        return out

    def freeze(self):
        for p in self.params():
            p.requires_grad = False
        self.frozen = True


@dataclass
class DensePrompts:
    """Uncompressed (D, L, d) prompts, one tensor per modality."""

    pv: Tensor
    pl: Tensor

    @classmethod
    def init(cls, depth, length, d_v, d_l, gen: np.random.Generator, std=0.02):
        return cls(pv=parameter(gen.normal(0, std, (depth, length, d_v))),
                   pl=parameter(gen.normal(0, std, (depth, length, d_l))))

    def params(self):
        return [self.pv, self.pl]


@dataclass
class DenseFusion:
    """Uncompressed fusion maps: per direction a (D-1, d_in+1, d_out) tensor."""

    vis: Tensor  # language -> vision
    txt: Tensor  # vision -> language

    @classmethod
    def init(cls, depth, d_v, d_l, gen: np.random.Generator, std=0.02):
        return cls(vis=parameter(gen.normal(0, std, (depth - 1, d_l + 1, d_v))),
                   txt=parameter(gen.normal(0, std, (depth - 1, d_v + 1, d_l))))

    def linear(self, direction: str, layer: int):
        t = self.vis if direction == "vis" else self.txt
        d_in_plus_1, d_out = t.shape[1], t.shape[2]
        mat = reshape(narrow(t, 0, layer, layer + 1), (d_in_plus_1, d_out))
        weight = narrow(mat, 0, 0, d_in_plus_1 - 1)
        bias = reshape(narrow(mat, 0, d_in_plus_1 - 1, d_in_plus_1), (d_out,))
        return weight, bias

    def params(self):
        return [self.vis, self.txt]


def new_prompt_set(task_id: int, cfg: BackboneConfig, prompt_rank: int,
                   fusion_rank: int, prompt_type: str, with_fusion: bool,
                   gen: np.random.Generator, lambda_v: float = 0.9,
                   lambda_l: float = 0.9) -> PromptSet:
    if prompt_type == "dp":
        prompts = CoupledPromptFactors.init(cfg.depth, cfg.prompt_len,
                                            cfg.d_v, cfg.d_l, prompt_rank, gen)
        fusion = FusionFactors.init(cfg.depth, cfg.d_v, cfg.d_l, fusion_rank, gen) \
            if with_fusion else None
    elif prompt_type == "cp":
        prompts = DensePrompts.init(cfg.depth, cfg.prompt_len, cfg.d_v, cfg.d_l, gen)
        fusion = DenseFusion.init(cfg.depth, cfg.d_v, cfg.d_l, gen) if with_fusion else None
    else:
        raise ValueError(f"unknown prompt_type {prompt_type!r}")
    return PromptSet(task_id=task_id, prompt_type=prompt_type, prompts=prompts,
                     fusion=fusion, lambda_v=lambda_v, lambda_l=lambda_l)


def fuse_layer(i_v: Tensor, i_l: Tensor, prompt_set: PromptSet, layer: int,
               lambda_v: float, lambda_l: float):
    """Momentum blend of the two modalities' prompts at one fused depth.

    `layer` counts prompted layers from the input; the first prompted layer
    (0) is never fused. Both outputs are computed from the pre-fusion pair.
    """
    if layer < 1:
        raise ValueError(f"fuse_layer: layer {layer} invalid, fusion starts at layer 1")
    w_v, b_v = prompt_set.fusion_linear("vis", layer - 1)
    w_l, b_l = prompt_set.fusion_linear("txt", layer - 1)
    proj_v = add(matmul(i_l, w_v), b_v)   # language -> vision
    proj_l = add(matmul(i_v, w_l), b_l)   # vision -> language
    fused_v = add(scale(i_v, lambda_v), scale(proj_v, 1.0 - lambda_v))
    fused_l = add(scale(i_l, lambda_l), scale(proj_l, 1.0 - lambda_l))
    return fused_v, fused_l


def fuse_prompts(pv: Tensor, pl: Tensor, prompt_set: PromptSet,
                 lambda_v: float, lambda_l: float):
    """Blend full (depth, L, d) prompt stacks layer by layer; depth 0 passes
    through unfused. The blend happens before insertion, so a single fused
    stack serves every input of either modality."""
    depth, length, d_v = pv.shape
    d_l = pl.shape[2]
    out_v = [narrow(pv, 0, 0, 1)]
    out_l = [narrow(pl, 0, 0, 1)]
    for li in range(1, depth):
        i_v = reshape(narrow(pv, 0, li, li + 1), (length, d_v))
        i_l = reshape(narrow(pl, 0, li, li + 1), (length, d_l))
        f_v, f_l = fuse_layer(i_v, i_l, prompt_set, li, lambda_v, lambda_l)
        out_v.append(reshape(f_v, (1, length, d_v)))
        out_l.append(reshape(f_l, (1, length, d_l)))
    return concat(out_v, axis=0), concat(out_l, axis=0)


class Backbone:
    """Frozen-after-pretraining dual encoder.

    `token_features` (vocab, patch_dim), when given, seeds the word
    embedding table through a fixed random projection so tokens unseen
    during pretraining still carry transferable content (the stand-in for
    a web-scale-pretrained embedding table).
    """

    def __init__(self, cfg: BackboneConfig, seed: int = 0,
                 token_features: Optional[np.ndarray] = None):
        self.cfg = cfg
        self.vision = _Encoder("vision", cfg, rng.stream(seed, "backbone.vision"))
        self.language = _Encoder("language", cfg, rng.stream(seed, "backbone.language"))
        if token_features is not None:
            if token_features.shape[0] > cfg.vocab:
                raise ValueError(f"token_features for {token_features.shape[0]} tokens "
                                 f"exceed vocab {cfg.vocab}")
            proj = rng.stream(seed, "backbone.token_proj").normal(
                0.0, 1.0 / math.sqrt(cfg.patch_dim), (cfg.patch_dim, cfg.d_l))
            table = self.language.table.data.copy()
            table[:token_features.shape[0]] = 0.5 * (token_features @ proj)
            self.language.table.data = table
            # The table stays fixed at its feature-derived values so that
            # tokens never seen during pretraining live in the same
            # representation space as the seen ones.
            self.language.table.requires_grad = False
        self.frozen = False

    def params(self) -> list:
        return self.vision.params() + self.language.params()

    def named_params(self) -> list:
        return (self.vision.named_params("backbone/vision")
                + self.language.named_params("backbone/language"))

    def freeze(self):
        for p in self.params():
            p.requires_grad = False
        self.frozen = True

    def _encoder(self, modality: str) -> _Encoder:
        if modality == "vision":
            return self.vision
        if modality == "language":
            return self.language
        raise ValueError(f"unknown modality {modality!r}")

    def encode(self, modality: str, x, prompt_set: Optional[PromptSet] = None):
        """Pooled joint-space feature (B, d_joint) for one modality alone.

        Prompt slots receive the additive per-layer prompt (cross-modally
        blended when the prompt set carries fusion maps) for the first
        `depth` layers; remaining layers run plain.
        """
        enc = self._encoder(modality)
        cfg = self.cfg
        length = cfg.prompt_len
        if prompt_set is not None:
            pv, pl = prompt_set.effective_prompts()
            pm = pv if modality == "vision" else pl
            if pm.shape != (cfg.depth, length, enc.d):
                raise ValueError(
                    f"task {prompt_set.task_id}: prompt shape {pm.shape} vs "
                    f"expected {(cfg.depth, length, enc.d)}")
        seq = enc.embed_input(x, length)
        for li, layer in enumerate(enc.layers):
            if prompt_set is not None and li < cfg.depth:
                slots = narrow(seq, 1, 1, 1 + length)
                p_i = reshape(narrow(pm, 0, li, li + 1), (1, length, enc.d))
                slots = add(slots, p_i)
                seq = concat([narrow(seq, 1, 0, 1), slots,
                              narrow(seq, 1, 1 + length, enc.seq_len)], axis=1)
            seq = layer(seq)
        return enc.pooled(seq)


def pretrain_backbone(backbone: Backbone, vision: np.ndarray, captions: np.ndarray,
                      steps: int, batch_size: int, base_lr: float, seed: int,
                      min_lr: float = 0.0, tau: float = 0.05) -> Backbone:
    """Train the backbone on generic pairs with the symmetric retrieval
    loss (no prompts), then freeze it. steps == 0 leaves a random frozen
    backbone, which is a permitted fallback mode."""
    from .losses import retrieval_loss

    if steps > 0:
        n = vision.shape[0]
        gen = rng.stream(seed, "pretrain.batches")
        opt = Adam(backbone.params())
        sched = CosineSchedule(base_lr=base_lr, total_steps=steps, min_lr=min_lr)
        for step in range(steps):
            idx = gen.choice(n, size=min(batch_size, n), replace=False)
            fv = backbone.encode("vision", vision[idx])
            fl = backbone.encode("language", captions[idx])
            loss = retrieval_loss(fv, fl, tau)
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"pretrain: non-finite loss at step {step} (lr={sched.lr(step):.4g})")
            opt.zero_grad()
            loss.backward()
            opt.step(sched.lr(step))
    backbone.freeze()
    return backbone
