"""Baseline decoder-only transformer in the Llama style.

Pre-norm blocks: RMSNorm feeding grouped-query attention with rotary
position embeddings, then RMSNorm feeding a SwiGLU MLP, residual adds around
both.  The unembedding is untied from the token embedding.  Attention scores
scale by 1/sqrt(head_dim); keys are stored rotated, values unrotated.

Everything here runs on numpy via the numerics kernels, deterministically
given a seed, in single or double storage precision with float64
accumulation either way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .kvcache import CacheConfig, GroupMap, KVCache


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    d_model: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    d_ff: int
    vocab_size: int
    rope_theta: float = 10000.0
    rms_eps: float = 1e-5
    max_seq_len: int = 512
    precision: str = "double"

    def __post_init__(self) -> None:
        if min(self.num_layers, self.d_model, self.num_heads, self.num_kv_heads,
               self.head_dim, self.d_ff, self.vocab_size, self.max_seq_len) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.d_model != self.num_heads * self.head_dim:
            raise ValueError(
                f"d_model {self.d_model} != num_heads*head_dim "
                f"{self.num_heads}*{self.head_dim}"
            )
        if self.num_heads % self.num_kv_heads != 0:
            raise ValueError(
                f"num_heads {self.num_heads} not divisible by num_kv_heads {self.num_kv_heads}"
            )
        nm.dtype_of(self.precision)

    @property
    def d_kv(self) -> int:
        return self.num_kv_heads * self.head_dim


def toy_config(precision: str = "double") -> ModelConfig:
    """Desk-scale config used across the test suite."""
    return ModelConfig(
        num_layers=8, d_model=64, num_heads=8, num_kv_heads=2, head_dim=8,
        d_ff=172, vocab_size=256, max_seq_len=512, precision=precision,
    )


def llama70b_config() -> ModelConfig:
    """Shape descriptor of the 80-layer 8192-wide production model."""
    return ModelConfig(
        num_layers=80, d_model=8192, num_heads=64, num_kv_heads=8, head_dim=128,
        d_ff=28672, vocab_size=128256, max_seq_len=131072 + 1024,
    )


def llama8b_config() -> ModelConfig:
    """Shape descriptor of the 32-layer 4096-wide production model."""
    return ModelConfig(
        num_layers=32, d_model=4096, num_heads=32, num_kv_heads=8, head_dim=128,
        d_ff=14336, vocab_size=128256, max_seq_len=131072 + 1024,
    )


@dataclass
class LayerParams:
    attn_norm: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    mlp_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class Parameters:
    config: ModelConfig
    token_embedding: np.ndarray
    layers: list[LayerParams]
    final_norm: np.ndarray
    lm_head: np.ndarray


@dataclass
class HiddenTrace:
    """Layer inputs x_1..x_L plus the final block output x_{L+1}.

    inputs[j] is the residual stream entering layer j (0-based); inputs[L]
    is the stream leaving the last layer, before the final norm.
    """

    inputs: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.inputs)

    def __getitem__(self, idx: int) -> np.ndarray:
        return self.inputs[idx]


def init_random(config: ModelConfig, seed: int) -> Parameters:
    """Scaled-normal init: std 1/sqrt(fan_in), fan_in being the input width
    of each projection (d_model for the embedding); norm gains start at 1."""
    rng = np.random.default_rng(seed)
    dtype = nm.dtype_of(config.precision)
    d, d_kv, d_ff, v = config.d_model, config.d_kv, config.d_ff, config.vocab_size

    def mat(rows: int, cols: int, fan_in: int | None = None) -> np.ndarray:
        std = 1.0 / np.sqrt(fan_in if fan_in is not None else rows)
        return (rng.standard_normal((rows, cols)) * std).astype(dtype)

    embedding = mat(v, d, fan_in=d)
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerParams(
                attn_norm=np.ones(d, dtype=dtype),
                w_q=mat(d, d),
                w_k=mat(d, d_kv),
                w_v=mat(d, d_kv),
                w_o=mat(d, d),
                mlp_norm=np.ones(d, dtype=dtype),
                w_gate=mat(d, d_ff),
                w_up=mat(d, d_ff),
                w_down=mat(d_ff, d),
            )
        )
    return Parameters(
        config=config,
        token_embedding=embedding,
        layers=layers,
        final_norm=np.ones(d, dtype=dtype),
        lm_head=mat(d, v),
    )


def silu(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = x[~pos] * ex / (1.0 + ex)
    return out


def attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    config: ModelConfig,
    causal: bool,
) -> np.ndarray:
    """Grouped-query attention over already-rotated q and k.

    q is n x d_model; k and v are m x d_kv.  With causal=True, n and m must
    match and query i sees keys 0..i; otherwise every query sees all m keys
    (the single-row decode case).
    """
    n, m = q.shape[0], k.shape[0]
    hd = config.head_dim
    share = config.num_heads // config.num_kv_heads
    scale = 1.0 / np.sqrt(hd)
    mask = None
    if causal and n > 1:
        if n != m:
            raise ValueError(f"causal attention needs square layout, got {n}x{m}")
        mask = np.triu(np.full((n, m), -np.inf), k=1)
    outputs = []
    for h in range(config.num_heads):
        kv = h // share
        qh = q[:, h * hd:(h + 1) * hd]
        kh = k[:, kv * hd:(kv + 1) * hd]
        vh = v[:, kv * hd:(kv + 1) * hd]
        scores = nm.matmul(qh, kh.T) * scale
        if mask is not None:
            scores = scores + mask
        outputs.append(nm.matmul(nm.softmax_rows(scores), vh))
    return np.concatenate(outputs, axis=1)


def project_qkv(
    layer: LayerParams, x: np.ndarray, positions, config: ModelConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Norm, project, and rotate one layer's q/k/v for the given rows."""
    normed = nm.rmsnorm(x, layer.attn_norm, config.rms_eps)
    q = nm.rope_apply(nm.matmul(normed, layer.w_q), positions, config.rope_theta, config.head_dim)
    k = nm.rope_apply(nm.matmul(normed, layer.w_k), positions, config.rope_theta, config.head_dim)
    v = nm.matmul(normed, layer.w_v)
    return q, k, v


def mlp_block(layer: LayerParams, x: np.ndarray, config: ModelConfig) -> np.ndarray:
    normed = nm.rmsnorm(x, layer.mlp_norm, config.rms_eps)
    gated = silu(nm.matmul(normed, layer.w_gate)) * nm.matmul(normed, layer.w_up)
    return nm.matmul(gated, layer.w_down)


def layer_forward(
    params: Parameters, layer_idx: int, x: np.ndarray, positions
) -> np.ndarray:
    """One full pre-norm block over all rows of x (causal attention)."""
    layer = params.layers[layer_idx]
    q, k, v = project_qkv(layer, x, positions, params.config)
    x = x + nm.matmul(attention(q, k, v, params.config, causal=True), layer.w_o)
    return x + mlp_block(layer, x, params.config)


def head_logits(params: Parameters, x: np.ndarray) -> np.ndarray:
    return nm.matmul(nm.rmsnorm(x, params.final_norm, params.config.rms_eps), params.lm_head)


def check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64).ravel()
    if arr.size == 0:
        raise ValueError("empty token sequence")
    if arr.size > config.max_seq_len:
        raise ValueError(f"sequence length {arr.size} exceeds max_seq_len {config.max_seq_len}")
    if arr.min() < 0 or arr.max() >= config.vocab_size:
        raise ValueError(f"token id outside [0, {config.vocab_size})")
    return arr


def forward_full(params: Parameters, tokens) -> tuple[np.ndarray, HiddenTrace]:
    """Batched causal forward over the whole sequence.

    Returns per-position logits (n x vocab) and the hidden trace holding the
    inputs of every layer plus the final block output.
    """
    toks = check_tokens(params.config, tokens)
    positions = np.arange(toks.size)
    x = params.token_embedding[toks]
    trace = HiddenTrace([x])
    for j in range(params.config.num_layers):
        x = layer_forward(params, j, x, positions)
        trace.inputs.append(x)
    return head_logits(params, x), trace


def default_cache_config(config: ModelConfig, **overrides) -> CacheConfig:
    base = dict(
        group_map=GroupMap.identity(config.num_layers),
        d_kv=config.d_kv,
        precision=config.precision,
    )
    base.update(overrides)
    return CacheConfig(**base)


def decode_layer_with_cache(
    params: Parameters,
    layer_idx: int,
    x: np.ndarray,
    position: int,
    cache: KVCache,
) -> np.ndarray:
    """One block for a single row, appending this position's K/V first."""
    layer = params.layers[layer_idx]
    q, k, v = project_qkv(layer, x, [position], params.config)
    group = cache.group_for_layer(layer_idx)
    cache.append(group, k[0], v[0])
    k_all, v_all = cache.read_block(group, position + 1)
    x = x + nm.matmul(attention(q, k_all, v_all, params.config, causal=False), layer.w_o)
    return x + mlp_block(layer, x, params.config)


def decode_step(params: Parameters, token: int, position: int, cache: KVCache) -> np.ndarray:
    """Advance one token through every layer, reading and growing the cache.

    The cache must sit exactly at `position` rows; gaps and overwrites are
    rejected.  Returns the next-token logits as a flat vector.
    """
    if not 0 <= token < params.config.vocab_size:
        raise ValueError(f"token id {token} outside vocab")
    if position >= params.config.max_seq_len:
        raise ValueError(f"position {position} exceeds max_seq_len")
    cache.expect_length(position)
    x = params.token_embedding[np.array([token])]
    for j in range(params.config.num_layers):
        x = decode_layer_with_cache(params, j, x, position, cache)
    return head_logits(params, x).ravel()


def generate(
    params: Parameters,
    prompt,
    out_len: int,
    cache_config: CacheConfig | None = None,
) -> list[int]:
    """Greedy generation of exactly out_len tokens after the prompt."""
    toks = check_tokens(params.config, prompt)
    if out_len < 0:
        raise ValueError("out_len must be >= 0")
    if toks.size + out_len > params.config.max_seq_len:
        raise ValueError(
            f"prompt {toks.size} + out_len {out_len} exceeds max_seq_len "
            f"{params.config.max_seq_len}"
        )
    cache = KVCache(cache_config or default_cache_config(params.config))
    logits = None
    for i, tok in enumerate(toks):
        logits = decode_step(params, int(tok), i, cache)
    out: list[int] = []
    for step in range(out_len):
        nxt = nm.sample_argmax(logits)
        out.append(nxt)
        if step + 1 < out_len:
            logits = decode_step(params, nxt, toks.size + step, cache)
    return out
