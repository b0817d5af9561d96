"""Patch tokenization, self-attention encoders, and the per-class text provider.

Both visual modalities run through the same architecture: non-overlapping
patches are linearly embedded with learned positional offsets, a learned
global token is prepended, and a stack of pre-norm transformer blocks
(attention + residual, then MLP + residual) transforms the sequence. The
final global token summarizes the sample; the per-patch tokens feed the
local alignment scoring.

The text path is a trainable per-class embedding table behind a linear
projection: one deterministic, seeded row per class acting as that class's
semantic anchor. Rows for unseen classes exist but may not be read while
training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, SplitViolationError


@dataclass(frozen=True)
class EncoderConfig:
    grid: int = 32
    patch: int = 4
    d: int = 64
    layers: int = 4
    heads: int = 4

    def __post_init__(self):
        if self.grid <= 0 or self.patch <= 0 or self.grid % self.patch != 0:
            raise ConfigurationError(f"grid {self.grid} not divisible by patch {self.patch}")
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads != 0:
            raise ConfigurationError(f"token width {self.d} not divisible by heads {self.heads}")
        if self.layers < 0:
            raise ConfigurationError(f"negative layer count {self.layers}")

    @property
    def n_tokens(self) -> int:
        return (self.grid // self.patch) ** 2


@dataclass
class TokenSet:
    """One batch of encoded samples: global summary plus per-patch tokens."""

    global_tokens: Tensor  # [B, d]
    local_tokens: Tensor  # [B, n_tokens, d]
    modality: str

    @property
    def batch_size(self) -> int:
        return self.global_tokens.shape[0]

    def tokens(self) -> Tensor:
        """Full [B, n_tokens + 1, d] sequence with the global token first."""
        b, d = self.global_tokens.shape
        return ad.concat([ad.reshape(self.global_tokens, (b, 1, d)), self.local_tokens], axis=1)


def split_tokens(tokens: Tensor, modality: str) -> TokenSet:
    return TokenSet(
        global_tokens=tokens[:, 0, :],
        local_tokens=tokens[:, 1:, :],
        modality=modality,
    )


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    def named(self, prefix: str):
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.w_v", self.w_v
        yield f"{prefix}.w_o", self.w_o


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def named(self, prefix: str):
        yield f"{prefix}.ln1_gain", self.ln1_gain
        yield f"{prefix}.ln1_bias", self.ln1_bias
        yield from self.attn.named(f"{prefix}.attn")
        yield f"{prefix}.ln2_gain", self.ln2_gain
        yield f"{prefix}.ln2_bias", self.ln2_bias
        yield f"{prefix}.mlp_w1", self.mlp_w1
        yield f"{prefix}.mlp_b1", self.mlp_b1
        yield f"{prefix}.mlp_w2", self.mlp_w2
        yield f"{prefix}.mlp_b2", self.mlp_b2


@dataclass
class EncoderParams:
    patch_w: Tensor  # [patch*patch, d]
    pos: Tensor  # [n_tokens, d]
    cls: Tensor  # [d], the learned global token
    blocks: list[BlockParams] = field(default_factory=list)

    def named(self, prefix: str):
        yield f"{prefix}.patch_w", self.patch_w
        yield f"{prefix}.pos", self.pos
        yield f"{prefix}.cls", self.cls
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"{prefix}.block{i}")


def init_attention_params(d: int, rng: np.random.Generator) -> AttentionParams:
    scale = 1.0 / np.sqrt(d)
    return AttentionParams(
        w_q=Tensor(rng.normal(0.0, scale, (d, d))),
        w_k=Tensor(rng.normal(0.0, scale, (d, d))),
        w_v=Tensor(rng.normal(0.0, scale, (d, d))),
        w_o=Tensor(rng.normal(0.0, scale, (d, d))),
    )


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    d = cfg.d
    patch_dim = cfg.patch * cfg.patch
    blocks = []
    for _ in range(cfg.layers):
        blocks.append(
            BlockParams(
                ln1_gain=Tensor(np.ones(d)),
                ln1_bias=Tensor(np.zeros(d)),
                attn=init_attention_params(d, rng),
                ln2_gain=Tensor(np.ones(d)),
                ln2_bias=Tensor(np.zeros(d)),
                mlp_w1=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, 4 * d))),
                mlp_b1=Tensor(np.zeros(4 * d)),
                mlp_w2=Tensor(rng.normal(0.0, 1.0 / np.sqrt(4 * d), (4 * d, d))),
                mlp_b2=Tensor(np.zeros(d)),
            )
        )
    return EncoderParams(
        patch_w=Tensor(rng.normal(0.0, 1.0 / np.sqrt(patch_dim), (patch_dim, d))),
        pos=Tensor(rng.normal(0.0, 0.02, (cfg.n_tokens, d))),
        cls=Tensor(rng.normal(0.0, 0.02, d)),
        blocks=blocks,
    )


def patch_embed(batch, params: EncoderParams, cfg: EncoderConfig) -> Tensor:
    """Flatten non-overlapping patches, project, add positional offsets."""
    x = ad.as_tensor(batch)
    g, p = cfg.grid, cfg.patch
    if x.ndim != 3 or x.shape[1] != g or x.shape[2] != g:
        raise DimensionError(f"patch_embed: expected [B, {g}, {g}], got {x.shape}")
    b = x.shape[0]
    side = g // p
    x = ad.reshape(x, (b, side, p, side, p))
    x = ad.swapaxes(x, 2, 3)
    flat = ad.reshape(x, (b, side * side, p * p))
    return ad.add(ad.matmul(flat, params.patch_w), params.pos)


def multi_head_attention(
    query_tokens: Tensor,
    kv_tokens: Tensor,
    params: AttentionParams,
    heads: int,
    return_weights: bool = False,
):
    """Scaled dot-product attention; queries and keys/values may differ.

    Per-head scale is 1/sqrt(d/heads). Returns [B, Tq, d]; with
    ``return_weights`` also the [B, heads, Tq, Tk] row-stochastic weights.
    """
    q_in, kv_in = ad.as_tensor(query_tokens), ad.as_tensor(kv_tokens)
    if q_in.shape[-1] != kv_in.shape[-1]:
        raise DimensionError(f"attention: token widths differ {q_in.shape} vs {kv_in.shape}")
    b, tq, d = q_in.shape
    tk = kv_in.shape[1]
    hd = d // heads

    def heads_split(t: Tensor, tlen: int) -> Tensor:
        return ad.swapaxes(ad.reshape(t, (b, tlen, heads, hd)), 1, 2)

    q = heads_split(ad.matmul(q_in, params.w_q), tq)
    k = heads_split(ad.matmul(kv_in, params.w_k), tk)
    v = heads_split(ad.matmul(kv_in, params.w_v), tk)
    logits = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(hd))
    weights = ad.softmax(logits, axis=-1)
    mixed = ad.swapaxes(ad.matmul(weights, v), 1, 2)
    out = ad.matmul(ad.reshape(mixed, (b, tq, d)), params.w_o)
    if return_weights:
        return out, weights
    return out


def self_attention(tokens: Tensor, params: AttentionParams, heads: int) -> Tensor:
    return multi_head_attention(tokens, tokens, params, heads)


def _mlp(x: Tensor, blk: BlockParams) -> Tensor:
    hidden = ad.gelu(ad.add(ad.matmul(x, blk.mlp_w1), blk.mlp_b1))
    return ad.add(ad.matmul(hidden, blk.mlp_w2), blk.mlp_b2)


def encode(batch, cfg: EncoderConfig, params: EncoderParams, modality: str) -> TokenSet:
    """Run the full encoder: embed, prepend global token, L pre-norm blocks."""
    embedded = patch_embed(batch, params, cfg)
    b = embedded.shape[0]
    cls = ad.broadcast_to(ad.reshape(params.cls, (1, 1, cfg.d)), (b, 1, cfg.d))
    z = ad.concat([cls, embedded], axis=1)
    for blk in params.blocks:
        normed = ad.layer_norm(z, blk.ln1_gain, blk.ln1_bias)
        z = ad.add(z, multi_head_attention(normed, normed, blk.attn, cfg.heads))
        z = ad.add(z, _mlp(ad.layer_norm(z, blk.ln2_gain, blk.ln2_bias), blk))
    return split_tokens(z, modality)


# ---------------------------------------------------------------------------
# text feature provider


@dataclass
class TextProvider:
    """Trainable per-class embedding table plus projection into token width."""

    table: Tensor  # [num_classes, d_text]
    proj_w: Tensor  # [d_text, d]
    proj_b: Tensor  # [d]
    seen_classes: frozenset[int]

    @property
    def d_text(self) -> int:
        return self.table.shape[1]

    def named(self, prefix: str = "text"):
        yield f"{prefix}.table", self.table
        yield f"{prefix}.proj_w", self.proj_w
        yield f"{prefix}.proj_b", self.proj_b


def init_text_provider(
    num_classes: int,
    seen_classes,
    d_text: int,
    d: int,
    rng: np.random.Generator,
) -> TextProvider:
    return TextProvider(
        table=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_text), (num_classes, d_text))),
        proj_w=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_text), (d_text, d))),
        proj_b=Tensor(np.zeros(d)),
        seen_classes=frozenset(int(c) for c in seen_classes),
    )


def text_features(provider: TextProvider, class_ids, training: bool = True) -> Tensor:
    """Look up and project the class anchors for a batch of labels."""
    ids = np.atleast_1d(np.asarray(class_ids, dtype=np.int64))
    if training:
        unseen = sorted(set(ids.tolist()) - provider.seen_classes)
        if unseen:
            raise SplitViolationError(f"text_features: classes {unseen} are not in the training split")
    rows = ad.take_rows(provider.table, ids)
    return ad.add(ad.matmul(rows, provider.proj_w), provider.proj_b)
