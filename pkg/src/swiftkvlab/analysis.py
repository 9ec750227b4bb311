"""Hidden-state similarity profiles and the analytic FLOPs accountant.

All flop figures use the 2-flops-per-multiply-accumulate convention.  The
vocab column counts both the embedding lookup and the output head as dense
projections (2dV each); a runtime matmul counter never sees the embedding
because the lookup is a gather, so counter reconciliations subtract
`gather_flops` per token.  Attention cost is parameterized by an explicit
context length and a causal factor instead of a guessed sequence length;
`calibrate_attn_context` inverts the attention column to recover the context
a given baseline figure implies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model as mdl
from . import numerics as nm
from .swiftkv import SwiftKVConfig


@dataclass(frozen=True)
class FlopsBreakdown:
    """Per-prefill-token flops, by column, plus the fraction of baseline."""

    vocab: float
    kv: float
    qo: float
    mlp: float
    attn: float
    rel: float

    @property
    def total(self) -> float:
        return self.vocab + self.kv + self.qo + self.mlp + self.attn


def _layer_counts(model_desc: mdl.ModelConfig, cfg: SwiftKVConfig | None) -> tuple[int, int]:
    """(layers running QO/MLP/attention during prefill, layers projecting KV)."""
    layers = model_desc.num_layers
    if cfg is None:
        return layers, layers
    if cfg.cutoff > layers:
        raise ValueError(f"cutoff {cfg.cutoff} exceeds {layers} layers")
    kv_layers = cfg.cutoff + math.ceil((layers - cfg.cutoff) / cfg.group_size)
    return cfg.cutoff, kv_layers


def gather_flops(model_desc: mdl.ModelConfig) -> int:
    """Embedding share of the vocab column: 2dV per token, counted as if the
    gather were a dense one-hot projection."""
    return 2 * model_desc.d_model * model_desc.vocab_size


def flops_prefill_token(
    model_desc: mdl.ModelConfig,
    cfg: SwiftKVConfig | None,
    attn_context: float,
    causal_factor: float = 1.0,
) -> FlopsBreakdown:
    """Analytic per-prompt-token flops at a given attention context.

    Skipped layers drop their QO, MLP, and attention terms; KV projection
    runs in every shallow layer and every group leader.
    """
    if attn_context < 0:
        raise ValueError("attn_context must be >= 0")
    if not 0.0 < causal_factor <= 1.0:
        raise ValueError("causal_factor must be in (0, 1]")
    d, d_kv, d_ff, v = (
        model_desc.d_model, model_desc.d_kv, model_desc.d_ff, model_desc.vocab_size,
    )
    l_eff, kv_layers = _layer_counts(model_desc, cfg)
    vocab = 4.0 * d * v
    kv = 2.0 * d * 2 * d_kv * kv_layers
    qo = 2.0 * d * d * 2 * l_eff
    mlp = 2.0 * d * d_ff * 3 * l_eff
    attn = 4.0 * attn_context * d * l_eff * causal_factor
    total = vocab + kv + qo + mlp + attn
    if cfg is None:
        rel = 1.0
    else:
        base = flops_prefill_token(model_desc, None, attn_context, causal_factor)
        rel = total / base.total
    return FlopsBreakdown(vocab=vocab, kv=kv, qo=qo, mlp=mlp, attn=attn, rel=rel)


def flops_decode_token(
    model_desc: mdl.ModelConfig, cfg: SwiftKVConfig | None, context: float
) -> float:
    """Exact matmul flops for one decode token reading `context` positions.

    Decode runs the full depth either way; the only SwiftKV difference is
    that group leaders project KV from the boundary state while non-leaders
    project nothing.  The embedding gather is not a matmul and the head runs
    once, so the vocab share is 2dV.
    """
    if context < 1:
        raise ValueError("context must be >= 1")
    d, d_kv, d_ff, v = (
        model_desc.d_model, model_desc.d_kv, model_desc.d_ff, model_desc.vocab_size,
    )
    layers = model_desc.num_layers
    _, kv_layers = _layer_counts(model_desc, cfg)
    return (
        2.0 * d * v
        + 2.0 * d * d * 2 * layers
        + 2.0 * d * d_ff * 3 * layers
        + 4.0 * context * d * layers
        + 2.0 * d * 2 * d_kv * kv_layers
    )


def calibrate_attn_context(
    model_desc: mdl.ModelConfig, target_attn_flops: float, causal_factor: float = 1.0
) -> float:
    """Context length at which the baseline attention column hits the target."""
    if target_attn_flops <= 0:
        raise ValueError("target_attn_flops must be positive")
    return target_attn_flops / (
        4.0 * model_desc.d_model * model_desc.num_layers * causal_factor
    )


def param_count(model_desc: mdl.ModelConfig) -> int:
    d, d_kv, d_ff, v = (
        model_desc.d_model, model_desc.d_kv, model_desc.d_ff, model_desc.vocab_size,
    )
    per_layer = d + d * d + 2 * d * d_kv + d * d + d + 3 * d * d_ff
    return d * v + model_desc.num_layers * per_layer + d + d * v


def sim_score(trace: mdl.HiddenTrace, include_final: bool = False) -> np.ndarray:
    """Mean cosine similarity of each layer input against all deeper ones.

    Entry l-1 (1-based l < L) averages, over deeper layers j = l+1..L and
    then over token positions, the cosine between x_l and x_j rows.  The
    post-final-layer state x_{L+1} joins the average only when asked.
    """
    layers = len(trace) - 1
    if layers < 2:
        raise ValueError("similarity profile needs at least 2 layers")
    last = layers + 1 if include_final else layers
    profile = np.empty(layers - 1)
    for l in range(1, layers):
        sims = []
        for j in range(l, last):
            x_l, x_j = trace[l - 1], trace[j]
            per_token = []
            for t in range(x_l.shape[0]):
                try:
                    per_token.append(nm.cosine_similarity(x_l[t], x_j[t]))
                except ValueError as err:
                    raise ValueError(
                        f"zero-norm hidden state between layer inputs {l} and "
                        f"{j + 1} at position {t}"
                    ) from err
            sims.append(np.mean(per_token))
        profile[l - 1] = np.mean(sims)
    return profile
