"""SwiftKV rewiring of the baseline model, with AcrossKV sharing.

The student keeps the teacher's parameters frozen and adds fresh Q
projections for every layer at or beyond the cutoff plus fresh K/V
projections for each AcrossKV group leader, all initialized as exact copies
of the originals.  In swiftkv mode the K/V of a rewired layer are projected
from the boundary hidden state (the residual stream entering the first
rewired layer), so prompt tokens never need the deeper layers: prefill runs
the shallow layers for all tokens, projects all boundary K/V, and then
carries only the final prompt token through the deep layers.  Decode tokens
still run the full depth.

Rewired projections consume the raw residual stream: Q_j applies to the
layer's own input x_j, K_j and V_j to the boundary state, without the
attention input norm.  Keys are position-rotated after projection, exactly
as cached keys are elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model as mdl
from . import numerics as nm
from .kvcache import CacheConfig, GroupMap, KVCache

FULL_SCOPE_KINDS = ("w_o", "mlp_norm", "w_gate", "w_up", "w_down")


@dataclass(frozen=True)
class SwiftKVConfig:
    cutoff: int
    group_size: int = 1
    early_exit: bool = False
    exit_threshold: float = 0.95

    def __post_init__(self) -> None:
        if self.cutoff < 1:
            raise ValueError(f"cutoff must be >= 1, got {self.cutoff}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if not 0.0 < self.exit_threshold <= 1.0:
            raise ValueError(
                f"exit_threshold must be in (0, 1], got {self.exit_threshold}"
            )


@dataclass
class StudentParameters:
    """Frozen teacher plus the trainable rewired tensors.

    `extras` holds copies of the deep layers' non-attention-input tensors
    when full-layer training is requested; the frozen base is never mutated
    either way.
    """

    base: mdl.Parameters
    config: SwiftKVConfig
    group_map: GroupMap
    new_wq: dict[int, np.ndarray]
    new_wk: dict[int, np.ndarray]
    new_wv: dict[int, np.ndarray]
    exit_head: np.ndarray | None = None
    extras: dict[tuple[str, int], np.ndarray] | None = None

    def trainable_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for j, w in sorted(self.new_wq.items()):
            out[f"layers.{j}.new_wq"] = w
        for j, w in sorted(self.new_wk.items()):
            out[f"layers.{j}.new_wk"] = w
        for j, w in sorted(self.new_wv.items()):
            out[f"layers.{j}.new_wv"] = w
        if self.extras is not None:
            for (kind, j), w in sorted(self.extras.items(), key=lambda kv: (kv[0][1], kv[0][0])):
                out[f"layers.{j}.{kind}"] = w
        if self.exit_head is not None:
            out["exit_head"] = self.exit_head
        return out

    def trainable_parameter_count(self) -> int:
        return sum(w.size for w in self.trainable_tensors().values())

    def layer_tensor(self, kind: str, j: int) -> np.ndarray:
        if self.extras is not None and (kind, j) in self.extras:
            return self.extras[(kind, j)]
        return getattr(self.base.layers[j], kind)


def rewire(params: mdl.Parameters, config: SwiftKVConfig, train_scope: str = "wqkv") -> StudentParameters:
    """Build a student from a frozen base; new tensors are exact copies."""
    num_layers = params.config.num_layers
    if config.cutoff > num_layers:
        raise ValueError(f"cutoff {config.cutoff} exceeds {num_layers} layers")
    if train_scope not in ("wqkv", "full"):
        raise ValueError(f"unknown train_scope {train_scope!r}")
    gm = GroupMap(num_layers=num_layers, cutoff=config.cutoff, group_size=config.group_size)
    new_wq = {j: params.layers[j].w_q.copy() for j in range(config.cutoff, num_layers)}
    new_wk = {j: params.layers[j].w_k.copy() for j in gm.shared_leaders()}
    new_wv = {j: params.layers[j].w_v.copy() for j in gm.shared_leaders()}
    exit_head = params.lm_head.copy() if config.early_exit else None
    extras = None
    if train_scope == "full":
        extras = {
            (kind, j): getattr(params.layers[j], kind).copy()
            for j in range(config.cutoff, num_layers)
            for kind in FULL_SCOPE_KINDS
        }
    return StudentParameters(
        base=params, config=config, group_map=gm,
        new_wq=new_wq, new_wk=new_wk, new_wv=new_wv,
        exit_head=exit_head, extras=extras,
    )


@dataclass(frozen=True)
class ReductionStats:
    prefill_reduction: float
    kv_reduction: float
    kv_projection_layers: int


def reduction_stats(config: SwiftKVConfig, model_config: mdl.ModelConfig) -> ReductionStats:
    """Fractions of prefill compute and KV memory removed by the rewiring."""
    layers = model_config.num_layers
    if config.cutoff > layers:
        raise ValueError(f"cutoff {config.cutoff} exceeds {layers} layers")
    kv_layers = config.cutoff + math.ceil((layers - config.cutoff) / config.group_size)
    return ReductionStats(
        prefill_reduction=(layers - config.cutoff) / layers,
        kv_reduction=1.0 - kv_layers / layers,
        kv_projection_layers=kv_layers,
    )


def student_cache_config(student: StudentParameters, **overrides) -> CacheConfig:
    base = dict(
        group_map=student.group_map,
        d_kv=student.base.config.d_kv,
        precision=student.base.config.precision,
    )
    base.update(overrides)
    return CacheConfig(**base)


def _check_cache(student: StudentParameters, cache: KVCache) -> None:
    if cache.config.group_map != student.group_map:
        raise ValueError(
            f"cache group map {cache.config.group_map} does not match student "
            f"{student.group_map}"
        )


def _boundary_kv(
    student: StudentParameters, boundary: np.ndarray, positions
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Rewired K/V per leader: project the boundary rows, rotate the keys."""
    cfg = student.base.config
    out = {}
    for leader in student.group_map.shared_leaders():
        k = nm.rope_apply(
            nm.matmul(boundary, student.new_wk[leader]), positions, cfg.rope_theta, cfg.head_dim
        )
        v = nm.matmul(boundary, student.new_wv[leader])
        out[leader] = (k, v)
    return out


def _rewired_layer(
    student: StudentParameters,
    j: int,
    x: np.ndarray,
    positions,
    k: np.ndarray,
    v: np.ndarray,
    causal: bool,
) -> np.ndarray:
    """Deep-layer block: rewired Q over given K/V, then the layer's MLP."""
    cfg = student.base.config
    q = nm.rope_apply(nm.matmul(x, student.new_wq[j]), positions, cfg.rope_theta, cfg.head_dim)
    attn = mdl.attention(q, k, v, cfg, causal=causal)
    x = x + nm.matmul(attn, student.layer_tensor("w_o", j))
    normed = nm.rmsnorm(x, student.layer_tensor("mlp_norm", j), cfg.rms_eps)
    gated = mdl.silu(nm.matmul(normed, student.layer_tensor("w_gate", j))) * nm.matmul(
        normed, student.layer_tensor("w_up", j)
    )
    return x + nm.matmul(gated, student.layer_tensor("w_down", j))


def forward_student(
    student: StudentParameters, tokens, mode: str = "swiftkv"
) -> tuple[np.ndarray, mdl.HiddenTrace]:
    """Full-sequence forward in teacher or swiftkv mode.

    Teacher mode is exactly the base model.  Swiftkv mode keeps every token
    in every layer (the training-time view): deep layers attend causally to
    K/V projected from the boundary state.
    """
    if mode == "teacher":
        return mdl.forward_full(student.base, tokens)
    if mode != "swiftkv":
        raise ValueError(f"unknown mode {mode!r}")
    base = student.base
    cfg = base.config
    toks = mdl.check_tokens(cfg, tokens)
    positions = np.arange(toks.size)
    x = base.token_embedding[toks]
    trace = mdl.HiddenTrace([x])
    for j in range(student.config.cutoff):
        x = mdl.layer_forward(base, j, x, positions)
        trace.inputs.append(x)
    shared = _boundary_kv(student, x, positions)
    for j in range(student.config.cutoff, cfg.num_layers):
        k, v = shared[student.group_map.leader(j)]
        x = _rewired_layer(student, j, x, positions, k, v, causal=True)
        trace.inputs.append(x)
    return mdl.head_logits(base, x), trace


def prefill_skip(student: StudentParameters, tokens, cache: KVCache) -> np.ndarray:
    """Prompt pass that skips the deep layers for all but the last token.

    Fills the cache for every group: shallow layers append their normal K/V
    per token, rewired groups get K/V projected from the boundary state for
    every token.  Only the final prompt token then walks the deep layers,
    reading the just-filled caches (its own rewired K/V included).  Returns
    that token's next-token logits.
    """
    _check_cache(student, cache)
    cache.expect_length(0)
    base = student.base
    cfg = base.config
    toks = mdl.check_tokens(cfg, tokens)
    n = toks.size
    positions = np.arange(n)
    x = base.token_embedding[toks]
    for j in range(student.config.cutoff):
        layer = base.layers[j]
        q, k, v = mdl.project_qkv(layer, x, positions, cfg)
        group = cache.group_for_layer(j)
        for i in range(n):
            cache.append(group, k[i], v[i])
        x = x + nm.matmul(mdl.attention(q, k, v, cfg, causal=True), layer.w_o)
        x = x + mdl.mlp_block(layer, x, cfg)
    for leader, (k, v) in _boundary_kv(student, x, positions).items():
        group = cache.config.group_map.group_index(leader)
        for i in range(n):
            cache.append(group, k[i], v[i])
    row = x[n - 1 : n]
    for j in range(student.config.cutoff, cfg.num_layers):
        k_all, v_all = cache.read_block(cache.group_for_layer(j), n)
        row = _rewired_layer(student, j, row, [n - 1], k_all, v_all, causal=False)
    return mdl.head_logits(base, row).ravel()


def _decode_through(
    student: StudentParameters, token: int, position: int, cache: KVCache
) -> np.ndarray:
    """Shared decode front half: shallow layers plus boundary K/V appends.

    Returns the boundary row, which is also what the first deep layer reads.
    """
    base = student.base
    cfg = base.config
    if not 0 <= token < cfg.vocab_size:
        raise ValueError(f"token id {token} outside vocab")
    if position >= cfg.max_seq_len:
        raise ValueError(f"position {position} exceeds max_seq_len")
    _check_cache(student, cache)
    cache.expect_length(position)
    x = base.token_embedding[np.array([token])]
    for j in range(student.config.cutoff):
        x = mdl.decode_layer_with_cache(base, j, x, position, cache)
    for leader, (k, v) in _boundary_kv(student, x, [position]).items():
        cache.append(cache.config.group_map.group_index(leader), k[0], v[0])
    return x


def _decode_deep(
    student: StudentParameters, x: np.ndarray, position: int, cache: KVCache
) -> np.ndarray:
    cfg = student.base.config
    for j in range(student.config.cutoff, cfg.num_layers):
        k_all, v_all = cache.read_block(cache.group_for_layer(j), position + 1)
        x = _rewired_layer(student, j, x, [position], k_all, v_all, causal=False)
    return mdl.head_logits(student.base, x).ravel()


def decode_step_skip(
    student: StudentParameters, token: int, position: int, cache: KVCache
) -> np.ndarray:
    """One decode token through the full depth under the rewired caches."""
    x = _decode_through(student, token, position, cache)
    return _decode_deep(student, x, position, cache)


def exit_logits(student: StudentParameters, boundary_row: np.ndarray) -> np.ndarray:
    """Early-exit logits: final norm then the exit head on the boundary row."""
    if student.exit_head is None:
        raise ValueError("student has no exit head (early_exit disabled)")
    cfg = student.base.config
    normed = nm.rmsnorm(boundary_row, student.base.final_norm, cfg.rms_eps)
    return nm.matmul(np.atleast_2d(normed), student.exit_head).ravel()


def early_exit_decode(
    student: StudentParameters, token: int, position: int, cache: KVCache
) -> tuple[np.ndarray, bool]:
    """Decode step that may stop at the boundary.

    The boundary K/V for the deep groups are always appended before the exit
    test, so later tokens attend to this one whether or not it exited.  Exit
    fires when the exit head's max softmax probability strictly exceeds the
    threshold: threshold 1.0 never exits, thresholds near 0 always do.
    """
    boundary = _decode_through(student, token, position, cache)
    logits = exit_logits(student, boundary)
    probs = nm.softmax_rows(logits[None, :])[0]
    if float(np.max(probs)) > student.config.exit_threshold:
        return logits, True
    return _decode_deep(student, boundary, position, cache), False


def generate_student(
    student: StudentParameters,
    prompt,
    out_len: int,
    cache_config: CacheConfig | None = None,
    use_early_exit: bool = False,
) -> tuple[list[int], list[bool]]:
    """Greedy generation via prefill_skip then per-token decode.

    Returns the generated tokens and, per token, whether it came from the
    exit head (always False when use_early_exit is off).
    """
    base_cfg = student.base.config
    toks = mdl.check_tokens(base_cfg, prompt)
    if out_len < 0:
        raise ValueError("out_len must be >= 0")
    if toks.size + out_len > base_cfg.max_seq_len:
        raise ValueError("prompt plus out_len exceeds max_seq_len")
    cache = KVCache(cache_config or student_cache_config(student))
    logits = prefill_skip(student, toks, cache)
    out: list[int] = []
    exited: list[bool] = []
    flag = False
    for step in range(out_len):
        nxt = nm.sample_argmax(logits)
        out.append(nxt)
        exited.append(flag)
        if step + 1 < out_len:
            position = toks.size + step
            if use_early_exit:
                logits, flag = early_exit_decode(student, nxt, position, cache)
            else:
                logits = decode_step_skip(student, nxt, position, cache)
    return out, exited


@dataclass
class AlignmentStats:
    """Agreement between exit-head and full-depth argmax, by confidence bin."""

    bin_edges: np.ndarray
    counts: np.ndarray
    agreement: np.ndarray  # NaN where a bin is empty
    overall_rate: float
    total: int


def exit_alignment_stats(
    student: StudentParameters, prompts, out_len: int, num_bins: int = 10
) -> AlignmentStats:
    """Measure exit/full argmax agreement over greedy continuations.

    Generation is driven by the full-depth logits; the exit head is evaluated
    alongside at every decode position and bucketed by its max probability.
    """
    records: list[tuple[float, bool]] = []
    for prompt in prompts:
        toks = mdl.check_tokens(student.base.config, prompt)
        cache = KVCache(student_cache_config(student))
        logits = prefill_skip(student, toks, cache)
        for step in range(out_len):
            nxt = nm.sample_argmax(logits)
            position = toks.size + step
            if position >= student.base.config.max_seq_len:
                break
            boundary = _decode_through(student, nxt, position, cache)
            e_logits = exit_logits(student, boundary)
            probs = nm.softmax_rows(e_logits[None, :])[0]
            full_logits = _decode_deep(student, boundary, position, cache)
            records.append(
                (
                    float(np.max(probs)),
                    nm.sample_argmax(e_logits) == nm.sample_argmax(full_logits),
                )
            )
            logits = full_logits
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    counts = np.zeros(num_bins, dtype=np.int64)
    agree = np.zeros(num_bins, dtype=np.int64)
    for prob, ok in records:
        b = min(int(prob * num_bins), num_bins - 1)
        counts[b] += 1
        agree[b] += int(ok)
    with np.errstate(invalid="ignore"):
        rate = np.where(counts > 0, agree / np.maximum(counts, 1), np.nan)
    overall = float(sum(ok for _, ok in records) / len(records)) if records else float("nan")
    return AlignmentStats(
        bin_edges=edges, counts=counts, agreement=rate,
        overall_rate=overall, total=len(records),
    )
