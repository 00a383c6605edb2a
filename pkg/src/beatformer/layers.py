"""Neural building blocks: patch embedding, attention, FFN, encoder block, head.

All functions are pure graph builders over :mod:`beatformer.tensor` ops; they
take parameter containers plus a mode flag ("train" enables dropout, "eval"
is deterministic) and an rng for the dropout masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    add,
    concat_cols,
    first_rows,
    matmul,
    mean_rows,
    mul,
    relu,
    scale,
    softmax_rows,
    transpose,
    vecmat,
)
from .tensor import layer_norm as _layer_norm

LN_EPS = 1e-6

__all__ = [
    "LN_EPS",
    "AttentionParams",
    "EncoderBlockParams",
    "HeadParams",
    "dropout",
    "patch_embed",
    "sinusoidal_table",
    "positional_embedding",
    "scaled_dot_attention",
    "multi_head_attention",
    "feed_forward",
    "encoder_block",
    "classification_head",
]


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


@dataclass
class AttentionParams:
    """Per-head query/key/value projections plus the shared output projection."""

    w_q: list[Tensor]  # h matrices of (d_model, d_head)
    w_k: list[Tensor]
    w_v: list[Tensor]
    b_q: list[Tensor]  # h vectors of (d_head,)
    b_k: list[Tensor]
    b_v: list[Tensor]
    w_o: Tensor  # (h * d_head, d_model)
    b_o: Tensor  # (d_model,)

    def __post_init__(self):
        h = len(self.w_q)
        if not (len(self.w_k) == len(self.w_v) == h) or h == 0:
            raise ConfigError("attention projections must have one matrix per head")
        d_head = self.w_q[0].shape[1]
        if self.w_o.shape[0] != h * d_head:
            raise ConfigError(
                f"output projection expects {h * d_head} input columns "
                f"(heads * head size), got {self.w_o.shape[0]}"
            )

    @property
    def heads(self) -> int:
        return len(self.w_q)

    def tensors(self):
        for i in range(self.heads):
            yield f"head{i}.w_q", self.w_q[i]
            yield f"head{i}.b_q", self.b_q[i]
            yield f"head{i}.w_k", self.w_k[i]
            yield f"head{i}.b_k", self.b_k[i]
            yield f"head{i}.w_v", self.w_v[i]
            yield f"head{i}.b_v", self.b_v[i]
        yield "w_o", self.w_o
        yield "b_o", self.b_o


@dataclass
class EncoderBlockParams:
    """One encoder block: attention, position-wise FFN, two LayerNorm pairs."""

    attn: AttentionParams
    w1: Tensor  # (d_model, d_ff)
    b1: Tensor
    w2: Tensor  # (d_ff, d_model)
    b2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    def __post_init__(self):
        d_model = self.w1.shape[0]
        if self.w2.shape[1] != d_model:
            raise ConfigError(
                f"FFN must map back to width {d_model} for the residual sum, "
                f"got output width {self.w2.shape[1]}"
            )

    def tensors(self):
        for name, t in self.attn.tensors():
            yield f"attn.{name}", t
        yield "ffn.w1", self.w1
        yield "ffn.b1", self.b1
        yield "ffn.w2", self.w2
        yield "ffn.b2", self.b2
        yield "ln1.gamma", self.ln1_gamma
        yield "ln1.beta", self.ln1_beta
        yield "ln2.gamma", self.ln2_gamma
        yield "ln2.beta", self.ln2_beta


@dataclass
class HeadParams:
    """Classification head: dense ReLU stack on the pooled token mean."""

    hidden: list[tuple[Tensor, Tensor]] = field(default_factory=list)  # (w, b) pairs
    out_w: Tensor = None
    out_b: Tensor = None

    def tensors(self):
        for i, (w, b) in enumerate(self.hidden):
            yield f"dense{i}.w", w
            yield f"dense{i}.b", b
        yield "out.w", self.out_w
        yield "out.b", self.out_b


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: in train mode keep with prob 1-p and rescale by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    _check_mode(mode)
    if mode == "eval" or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return mul(x, Tensor(mask))


def patch_embed(signal, patch_len: int, w: Tensor, b: Tensor) -> Tensor:
    """Split a 1-D signal into contiguous patches and embed each linearly.

    The signal is right-padded with zeros to a multiple of ``patch_len``;
    token t is patch_t @ w + b, giving ceil(L / patch_len) tokens.
    """
    sig = signal.data if isinstance(signal, Tensor) else np.asarray(signal, dtype=np.float64)
    if sig.ndim != 1:
        raise ShapeError(f"patch_embed expects a rank-1 signal, got shape {sig.shape}")
    length = sig.shape[0]
    if patch_len <= 0 or patch_len > length:
        raise ConfigError(f"patch_len must lie in [1, {length}], got {patch_len}")
    if patch_len != w.shape[0]:
        raise ShapeError(f"embedding matrix expects patches of {w.shape[0]}, got {patch_len}")
    n_tokens = -(-length // patch_len)
    padded = np.zeros(n_tokens * patch_len)
    padded[:length] = sig
    patches = Tensor(padded.reshape(n_tokens, patch_len))
    return add(matmul(patches, w), b)


def sinusoidal_table(t_max: int, d_model: int) -> np.ndarray:
    """Classic fixed sin/cos positional table, an ablation alternative."""
    table = np.zeros((t_max, d_model))
    position = np.arange(t_max)[:, None].astype(np.float64)
    div = np.exp(np.arange(0, d_model, 2) * -(math.log(10000.0) / d_model))
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div[: d_model // 2])
    return table


def positional_embedding(t: int, table: Tensor) -> Tensor:
    """First ``t`` rows of the additive positional table."""
    return first_rows(table, t)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor):
    """weights = softmax_rows(Q K^T / sqrt(d_k)); out = weights V.

    Returns (out, weights); the weights are exposed for inspection and the
    row-stochasticity checks.
    """
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query/key widths disagree: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key/value row counts disagree: {k.shape} vs {v.shape}")
    d_k = q.shape[1]
    logits = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d_k))
    weights = softmax_rows(logits)
    return matmul(weights, v), weights


def multi_head_attention(
    x: Tensor,
    params: AttentionParams,
    dropout_p: float = 0.0,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Self-attention over the token rows of ``x`` with h parallel heads.

    Each head projects x into its own query/key/value spaces, the head
    outputs are concatenated and projected back to d_model, and dropout is
    applied to the sublayer output in train mode.
    """
    heads = []
    for i in range(params.heads):
        q = add(matmul(x, params.w_q[i]), params.b_q[i])
        k = add(matmul(x, params.w_k[i]), params.b_k[i])
        v = add(matmul(x, params.w_v[i]), params.b_v[i])
        out, _ = scaled_dot_attention(q, k, v)
        heads.append(out)
    combined = add(matmul(concat_cols(heads), params.w_o), params.b_o)
    return dropout(combined, dropout_p, mode, rng or np.random.default_rng())


def feed_forward(x: Tensor, params: EncoderBlockParams) -> Tensor:
    """Position-wise FFN: relu(x w1 + b1) w2 + b2, identical at every token."""
    hidden = relu(add(matmul(x, params.w1), params.b1))
    return add(matmul(hidden, params.w2), params.b2)


def encoder_block(
    x: Tensor,
    params: EncoderBlockParams,
    dropout_p: float = 0.0,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Post-norm encoder block: LN(x + MHA(x)) then LN(a + FFN(a)).

    Dropout hits each sublayer output before its residual sum (the MHA
    applies its own; the FFN's is applied here).
    """
    rng = rng or np.random.default_rng()
    attn_out = multi_head_attention(x, params.attn, dropout_p, mode, rng)
    a = _layer_norm(add(x, attn_out), params.ln1_gamma, params.ln1_beta, LN_EPS)
    ffn_out = dropout(feed_forward(a, params), dropout_p, mode, rng)
    return _layer_norm(add(a, ffn_out), params.ln2_gamma, params.ln2_beta, LN_EPS)


def classification_head(
    x: Tensor,
    params: HeadParams,
    dropout_p: float = 0.0,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean-pool the tokens, run the dense ReLU stack, emit raw class logits.

    Softmax is deliberately left to the loss / prediction consumers.
    """
    rng = rng or np.random.default_rng()
    h = mean_rows(x)
    for w, b in params.hidden:
        h = relu(add(vecmat(h, w), b))
        h = dropout(h, dropout_p, mode, rng)
    return add(vecmat(h, params.out_w), params.out_b)
