"""Knowledge recovery by logit distillation, on a hand-rolled reverse tape.

The student's swiftkv-mode forward is replayed with taped primitives from
the boundary state onward; everything below the cutoff is frozen and runs as
plain numpy constants, so gradients for frozen tensors are never
materialized.  The tape records nodes in creation order and the backward
sweep walks them strictly in reverse, accumulating vector-Jacobian products.

The loss is temperature-scaled KL from the frozen teacher's token
distribution to the student's, averaged over positions; with an exit head
the boundary head's loss is added with equal weight.  The optimizer is the
adaptive-moment family with bias correction and decoupled weight decay, and
the learning rate warms up linearly before holding constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from . import numerics as nm
from . import swiftkv as sk


# ---------------------------------------------------------------------------
# Tape machinery


class Node:
    __slots__ = ("value", "parents", "grad")

    def __init__(self, value: np.ndarray, parents) -> None:
        self.value = value
        self.parents = parents  # tuple of (Node, pullback)
        self.grad = None


class Tape:
    """Recorded primitives of one forward pass; single-use for backward."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False

    def param(self, value: np.ndarray) -> Node:
        return self._make(value, ())

    def _make(self, value, parents) -> Node:
        node = Node(value, parents)
        self.nodes.append(node)
        return node


def backward(tape: Tape, loss: Node) -> None:
    """Reverse sweep from a scalar loss; the tape cannot be replayed."""
    if tape.consumed:
        raise RuntimeError("tape already consumed; record a fresh forward")
    tape.consumed = True
    if np.ndim(loss.value) != 0:
        raise ValueError("backward needs a scalar loss node")
    loss.grad = np.array(1.0)
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        for parent, pull in node.parents:
            contrib = pull(node.grad)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


def _val(x):
    return x.value if isinstance(x, Node) else x


def _op(tape: Tape, value, *pairs) -> "Node | np.ndarray":
    """Make a node wired to the Node inputs; collapse to ndarray if none."""
    parents = tuple((x, pull) for x, pull in pairs if isinstance(x, Node))
    if not parents:
        return value
    return tape._make(value, parents)


def t_matmul(tape: Tape, a, b):
    av, bv = _val(a), _val(b)
    out = nm.matmul(av, bv)
    return _op(
        tape, out,
        (a, lambda g, bv=bv: nm.matmul(g, bv.T)),
        (b, lambda g, av=av: nm.matmul(av.T, g)),
    )


def t_add(tape: Tape, a, b):
    out = _val(a) + _val(b)
    return _op(tape, out, (a, lambda g: g), (b, lambda g: g))


def t_add_const(tape: Tape, a, const):
    return _op(tape, _val(a) + const, (a, lambda g: g))


def t_scale(tape: Tape, a, factor: float):
    return _op(tape, _val(a) * factor, (a, lambda g: g * factor))


def t_mul(tape: Tape, a, b):
    av, bv = _val(a), _val(b)
    return _op(
        tape, av * bv,
        (a, lambda g, bv=bv: g * bv),
        (b, lambda g, av=av: g * av),
    )


def t_transpose(tape: Tape, a):
    return _op(tape, _val(a).T, (a, lambda g: g.T))


def t_col_slice(tape: Tape, a, j0: int, j1: int):
    av = _val(a)

    def pull(g, shape=av.shape):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, j0:j1] = g
        return full

    return _op(tape, av[:, j0:j1], (a, pull))


def t_concat_cols(tape: Tape, parts):
    values = [_val(p) for p in parts]
    widths = [v.shape[1] for v in values]
    offsets = np.concatenate([[0], np.cumsum(widths)])
    out = np.concatenate(values, axis=1)
    pairs = []
    for idx, part in enumerate(parts):
        j0, j1 = int(offsets[idx]), int(offsets[idx + 1])
        pairs.append((part, lambda g, j0=j0, j1=j1: g[:, j0:j1]))
    return _op(tape, out, *pairs)


def t_dot(tape: Tape, a, const):
    """Scalar contraction sum(a * const) against a constant probe."""
    out = np.float64(np.sum(_val(a) * const))
    return _op(tape, out, (a, lambda g: float(g) * const))


def t_silu(tape: Tape, a):
    av = _val(a)
    out = mdl.silu(av)

    def pull(g, av=av):
        s = np.empty_like(av)
        pos = av >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
        ex = np.exp(av[~pos])
        s[~pos] = ex / (1.0 + ex)
        return g * (s + av * s * (1.0 - s))

    return _op(tape, out, (a, pull))


def t_softmax_rows(tape: Tape, a):
    out = nm.softmax_rows(_val(a))

    def pull(g, p=out):
        return (g - np.sum(g * p, axis=1, keepdims=True)) * p

    return _op(tape, out, (a, pull))


def t_rmsnorm(tape: Tape, x, w, eps: float):
    xv, wv = _val(x), _val(w)
    out = nm.rmsnorm(xv, wv, eps)
    d = xv.shape[1]
    rms = np.sqrt(np.mean(xv * xv, axis=1, keepdims=True) + eps)

    def pull_x(g, xv=xv, wv=wv, rms=rms, d=d):
        gw = g * wv
        return gw / rms - xv * (np.sum(gw * xv, axis=1, keepdims=True) / (d * rms**3))

    def pull_w(g, xv=xv, rms=rms):
        return np.sum(g * (xv / rms), axis=0)

    return _op(tape, out, (x, pull_x), (w, pull_w))


def t_rope(tape: Tape, a, positions, theta: float, head_dim: int):
    pos = np.asarray(positions)
    out = nm.rope_apply(_val(a), pos, theta, head_dim)
    # the inverse rotation is the transpose, i.e. rotation by negated angles
    return _op(tape, out, (a, lambda g: nm.rope_apply(g, -pos, theta, head_dim)))


def t_attention(tape: Tape, q, k, v, config: mdl.ModelConfig, causal: bool):
    n, m = _val(q).shape[0], _val(k).shape[0]
    hd = config.head_dim
    share = config.num_heads // config.num_kv_heads
    scale = 1.0 / math.sqrt(hd)
    mask = np.triu(np.full((n, m), -np.inf), k=1) if causal and n > 1 else None
    outs = []
    for h in range(config.num_heads):
        kv = h // share
        qh = t_col_slice(tape, q, h * hd, (h + 1) * hd)
        kh = t_col_slice(tape, k, kv * hd, (kv + 1) * hd)
        vh = t_col_slice(tape, v, kv * hd, (kv + 1) * hd)
        scores = t_scale(tape, t_matmul(tape, qh, t_transpose(tape, kh)), scale)
        if mask is not None:
            scores = t_add_const(tape, scores, mask)
        outs.append(t_matmul(tape, t_softmax_rows(tape, scores), vh))
    return t_concat_cols(tape, outs)


# ---------------------------------------------------------------------------
# Loss


def _log_softmax(a: np.ndarray) -> np.ndarray:
    a64 = a.astype(np.float64)
    shifted = a64 - np.max(a64, axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def distill_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, temperature: float) -> float:
    """T^2-scaled KL(teacher || student) of tempered token distributions,
    averaged over positions.  The teacher term is a constant offset that is
    kept, so identical logits give exactly zero."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"logit shape mismatch {student_logits.shape} vs {teacher_logits.shape}"
        )
    t = temperature
    lp = _log_softmax(np.atleast_2d(teacher_logits) / t)
    lq = _log_softmax(np.atleast_2d(student_logits) / t)
    p = np.exp(lp)
    kl_rows = np.sum(p * (lp - lq), axis=1)
    return float(t * t * np.mean(kl_rows))


def t_distill_loss(tape: Tape, student, teacher_logits: np.ndarray, temperature: float):
    sv = _val(student)
    value = np.float64(distill_loss(sv, teacher_logits, temperature))
    t = temperature
    rows = np.atleast_2d(sv).shape[0]
    p = nm.softmax_rows(teacher_logits.astype(np.float64) / t)
    q = nm.softmax_rows(sv.astype(np.float64) / t)

    def pull(g, p=p, q=q, t=t, rows=rows):
        return float(g) * t * (q - p) / rows

    return _op(tape, value, (student, pull))


# ---------------------------------------------------------------------------
# Taped student forward


def student_forward_taped(
    tape: Tape,
    student: sk.StudentParameters,
    tokens,
    param_nodes: dict[str, Node],
    want_exit: bool = False,
):
    """Swiftkv-mode forward over taped primitives.

    Layers below the cutoff run as constants; param_nodes supplies Nodes for
    whichever trainable tensors exist.  Returns (logits, exit_logits-or-None),
    each a Node (or ndarray if nothing trainable feeds it).
    """
    base = student.base
    cfg = base.config
    toks = mdl.check_tokens(cfg, tokens)
    positions = np.arange(toks.size)
    x = base.token_embedding[toks]
    for j in range(student.config.cutoff):
        x = mdl.layer_forward(base, j, x, positions)
    boundary = x

    def tensor(kind: str, j: int):
        return param_nodes.get(f"layers.{j}.{kind}", student.layer_tensor(kind, j))

    shared = {}
    for leader in student.group_map.shared_leaders():
        wk = param_nodes[f"layers.{leader}.new_wk"]
        wv = param_nodes[f"layers.{leader}.new_wv"]
        k = t_rope(tape, t_matmul(tape, boundary, wk), positions, cfg.rope_theta, cfg.head_dim)
        shared[leader] = (k, t_matmul(tape, boundary, wv))

    h = x
    for j in range(student.config.cutoff, cfg.num_layers):
        k, v = shared[student.group_map.leader(j)]
        wq = param_nodes[f"layers.{j}.new_wq"]
        q = t_rope(tape, t_matmul(tape, h, wq), positions, cfg.rope_theta, cfg.head_dim)
        attn = t_attention(tape, q, k, v, cfg, causal=True)
        h = t_add(tape, h, t_matmul(tape, attn, tensor("w_o", j)))
        normed = t_rmsnorm(tape, h, tensor("mlp_norm", j), cfg.rms_eps)
        gated = t_mul(
            tape,
            t_silu(tape, t_matmul(tape, normed, tensor("w_gate", j))),
            t_matmul(tape, normed, tensor("w_up", j)),
        )
        h = t_add(tape, h, t_matmul(tape, gated, tensor("w_down", j)))

    logits = t_matmul(
        tape, t_rmsnorm(tape, h, base.final_norm, cfg.rms_eps), base.lm_head
    )
    exit_node = None
    if want_exit:
        if "exit_head" not in param_nodes:
            raise ValueError("exit loss requested but student has no exit head")
        normed = nm.rmsnorm(boundary, base.final_norm, cfg.rms_eps)
        exit_node = t_matmul(tape, normed, param_nodes["exit_head"])
    return logits, exit_node


def make_param_nodes(tape: Tape, student: sk.StudentParameters) -> dict[str, Node]:
    return {name: tape.param(arr) for name, arr in student.trainable_tensors().items()}


def loss_and_grads(
    student: sk.StudentParameters,
    tokens,
    teacher_logits: np.ndarray,
    temperature: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """One taped forward/backward; returns the scalar loss and named grads."""
    tape = Tape()
    nodes = make_param_nodes(tape, student)
    want_exit = student.config.early_exit
    logits, exit_node = student_forward_taped(tape, student, tokens, nodes, want_exit)
    loss = t_distill_loss(tape, logits, teacher_logits, temperature)
    if want_exit:
        loss = t_add(tape, loss, t_distill_loss(tape, exit_node, teacher_logits, temperature))
    backward(tape, loss)
    grads = {
        name: (node.grad if node.grad is not None else np.zeros_like(node.value))
        for name, node in nodes.items()
    }
    return float(_val(loss)), grads


def student_loss(
    student: sk.StudentParameters, tokens, teacher_logits: np.ndarray, temperature: float
) -> float:
    """Tape-free loss via the plain inference forward (the oracle route)."""
    logits, trace = sk.forward_student(student, tokens, mode="swiftkv")
    total = distill_loss(logits, teacher_logits, temperature)
    if student.config.early_exit:
        boundary = trace[student.config.cutoff]
        e_logits = nm.matmul(
            nm.rmsnorm(boundary, student.base.final_norm, student.base.config.rms_eps),
            student.exit_head,
        )
        total += distill_loss(e_logits, teacher_logits, temperature)
    return total


# ---------------------------------------------------------------------------
# Optimizer and training loop


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 0.05
    warmup_fraction: float = 0.05
    epochs: int = 2
    temperature: float = 2.0
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    train_scope: str = "wqkv"

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.train_scope not in ("wqkv", "full"):
            raise ValueError(f"unknown train_scope {self.train_scope!r}")


@dataclass
class TrainState:
    total_steps: int
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    history: list = field(default_factory=list)  # (step, lr, loss) rows


def warmup_steps(config: TrainConfig, total_steps: int) -> int:
    return max(1, math.ceil(config.warmup_fraction * total_steps))


def learning_rate_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup to the configured rate, then constant."""
    w = warmup_steps(config, total_steps)
    if step < w:
        return config.learning_rate * (step + 1) / w
    return config.learning_rate


def optimizer_step(
    state: TrainState,
    tensors: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    config: TrainConfig,
) -> float:
    """Bias-corrected adaptive-moment update with decoupled weight decay,
    applied in place.  Returns the learning rate used."""
    lr = learning_rate_at(config, state.step, state.total_steps)
    t = state.step + 1
    for name, w in tensors.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        m_hat = m / (1.0 - config.beta1**t)
        v_hat = v / (1.0 - config.beta2**t)
        w -= lr * (m_hat / (np.sqrt(v_hat) + config.eps))
        w -= lr * config.weight_decay * w
    state.step += 1
    return lr


def synth_dataset(
    vocab_size: int,
    num_sequences: int,
    seq_len: int,
    seed: int,
    branching: int = 4,
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded order-1 Markov corpus.

    Each state transitions to `branching` random successors with random
    normalized weights; rows of the returned transition matrix sum to 1.
    Returns (sequences[num_sequences, seq_len], transition[vocab, vocab]).
    """
    if branching < 1 or branching > vocab_size:
        raise ValueError("branching must be in [1, vocab_size]")
    rng = np.random.default_rng(seed)
    transition = np.zeros((vocab_size, vocab_size))
    for s in range(vocab_size):
        successors = rng.choice(vocab_size, size=branching, replace=False)
        weights = rng.uniform(0.1, 1.0, size=branching)
        transition[s, successors] = weights / weights.sum()
    seqs = np.empty((num_sequences, seq_len), dtype=np.int64)
    for i in range(num_sequences):
        state = int(rng.integers(vocab_size))
        for p in range(seq_len):
            seqs[i, p] = state
            state = int(rng.choice(vocab_size, p=transition[state]))
    return seqs, transition


def evaluate(student: sk.StudentParameters, dataset: np.ndarray, temperature: float) -> float:
    """Mean distillation loss over a corpus, current weights, no training."""
    data = np.asarray(dataset, dtype=np.int64)
    total = 0.0
    for seq in data:
        teacher_logits, _ = mdl.forward_full(student.base, seq)
        total += student_loss(student, seq, teacher_logits, temperature)
    return total / data.shape[0]


def train(
    student: sk.StudentParameters,
    dataset: np.ndarray,
    config: TrainConfig,
) -> TrainState:
    """Distill the frozen teacher into the student's trainable tensors.

    Teacher logits are computed on the fly per sequence.  Gradients are
    averaged over each batch; one optimizer step per batch.  Bit-exactly
    reproducible for the same student, dataset, and config.
    """
    if (config.train_scope == "full") != (student.extras is not None):
        raise ValueError(
            "train_scope must match how the student was rewired "
            f"(scope={config.train_scope!r}, extras present={student.extras is not None})"
        )
    tensors = student.trainable_tensors()
    if not tensors:
        raise ValueError("student has no trainable tensors")
    data = np.asarray(dataset, dtype=np.int64)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ValueError("dataset must be a non-empty 2-D token array")
    num_batches = math.ceil(data.shape[0] / config.batch_size)
    state = TrainState(total_steps=config.epochs * num_batches)
    order_rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        order = order_rng.permutation(data.shape[0])
        for b in range(num_batches):
            rows = order[b * config.batch_size : (b + 1) * config.batch_size]
            acc = {name: np.zeros_like(w) for name, w in tensors.items()}
            batch_loss = 0.0
            for row in rows:
                seq = data[row]
                teacher_logits, _ = mdl.forward_full(student.base, seq)
                loss, grads = loss_and_grads(
                    student, seq, teacher_logits, config.temperature
                )
                batch_loss += loss
                for name in acc:
                    acc[name] += grads[name]
            scale = 1.0 / len(rows)
            for name in acc:
                acc[name] *= scale
            lr = optimizer_step(state, tensors, acc, config)
            state.history.append((state.step - 1, lr, batch_loss * scale))
    return state


# ---------------------------------------------------------------------------
# Gradient check


def gradient_check(
    student: sk.StudentParameters,
    tokens,
    temperature: float = 2.0,
    num_coords: int = 50,
    step: float = 1e-5,
    seed: int = 0,
) -> tuple[float, list[tuple[str, int, float, float, float]]]:
    """Tape gradients vs central finite differences of the tape-free loss.

    Perturbs `num_coords` random coordinates across the trainable tensors.
    Returns (max relative error, per-coordinate records (name, flat index,
    analytic, numeric, rel error)).  Relative error uses a 1e-6 floor so
    near-zero gradients do not divide by noise.
    """
    teacher_logits, _ = mdl.forward_full(student.base, tokens)
    _, grads = loss_and_grads(student, tokens, teacher_logits, temperature)
    tensors = student.trainable_tensors()
    rng = np.random.default_rng(seed)
    names = sorted(tensors)
    sizes = np.array([tensors[n].size for n in names])
    total = int(sizes.sum())
    records = []
    worst = 0.0
    for _ in range(num_coords):
        flat = int(rng.integers(total))
        cum = 0
        for name, size in zip(names, sizes):
            if flat < cum + size:
                idx = flat - cum
                break
            cum += size
        w = tensors[name]
        original = w.flat[idx]
        w.flat[idx] = original + step
        up = student_loss(student, tokens, teacher_logits, temperature)
        w.flat[idx] = original - step
        down = student_loss(student, tokens, teacher_logits, temperature)
        w.flat[idx] = original
        numeric = (up - down) / (2.0 * step)
        analytic = float(grads[name].flat[idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, rel)
        records.append((name, idx, analytic, numeric, rel))
    return worst, records
