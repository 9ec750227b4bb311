"""Rewiring, skip-prefill equivalence, reductions, and early exit."""

import dataclasses

import numpy as np
import pytest

from swiftkvlab import kvcache as kvc
from swiftkvlab import model as mdl
from swiftkvlab import numerics as nm
from swiftkvlab import swiftkv as sk


def toy_cfg(**overrides):
    return mdl.toy_config(**overrides)


def make_student(
    cutoff=4, group_size=1, early_exit=False, scope="wqkv", seed=0, cfg=None,
    exit_threshold=0.95,
):
    cfg = cfg or toy_cfg()
    base = mdl.init_random(cfg, seed=seed)
    swift = sk.SwiftKVConfig(
        cutoff=cutoff, group_size=group_size, early_exit=early_exit,
        exit_threshold=exit_threshold,
    )
    return sk.rewire(base, swift, train_scope=scope)


def greedy_recompute(student, prompt, out_len):
    """Oracle: re-run the whole swiftkv-mode forward for every step."""
    toks = list(prompt)
    out, rows = [], []
    for _ in range(out_len):
        logits, _ = sk.forward_student(student, toks, mode="swiftkv")
        nxt = int(np.argmax(logits[-1]))
        out.append(nxt)
        rows.append(logits[-1])
        toks.append(nxt)
    return out, rows


def skip_path(student, prompt, out_len):
    """Skip prefill then cached decode, collecting one logit row per output."""
    cache = kvc.KVCache(sk.student_cache_config(student))
    logits = sk.prefill_skip(student, prompt, cache)
    out, rows = [], []
    pos = len(prompt)
    for _ in range(out_len):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        rows.append(logits)
        logits = sk.decode_step_skip(student, nxt, pos, cache)
        pos += 1
    return out, rows


# ---------------------------------------------------------------------------
# rewire


def test_rewire_copies_base_projections():
    student = make_student(cutoff=4, group_size=2)
    base = student.base
    for j in range(4, 8):
        assert np.array_equal(student.new_wq[j], base.layers[j].w_q)
        assert student.new_wq[j] is not base.layers[j].w_q
    assert sorted(student.new_wq) == [4, 5, 6, 7]
    assert sorted(student.new_wk) == [4, 6]
    for leader in (4, 6):
        assert np.array_equal(student.new_wk[leader], base.layers[leader].w_k)
        assert np.array_equal(student.new_wv[leader], base.layers[leader].w_v)
    assert student.exit_head is None
    assert student.extras is None


def test_rewire_exit_head_copies_lm_head():
    student = make_student(early_exit=True)
    assert np.array_equal(student.exit_head, student.base.lm_head)
    assert student.exit_head is not student.base.lm_head


def test_rewire_full_scope_extras():
    student = make_student(cutoff=6, scope="full")
    want_keys = {(kind, j) for j in (6, 7) for kind in sk.FULL_SCOPE_KINDS}
    assert set(student.extras) == want_keys
    for kind, j in want_keys:
        assert np.array_equal(
            student.extras[(kind, j)], getattr(student.base.layers[j], kind)
        )
    # returned tensors for shallow layers come from the base
    assert student.layer_tensor("w_o", 0) is student.base.layers[0].w_o


def test_rewire_validation():
    base = mdl.init_random(toy_cfg(), seed=0)
    with pytest.raises(ValueError):
        sk.SwiftKVConfig(cutoff=0, group_size=1)
    with pytest.raises(ValueError):
        sk.SwiftKVConfig(cutoff=4, group_size=0)
    with pytest.raises(ValueError):
        sk.SwiftKVConfig(cutoff=4, exit_threshold=0.0)
    with pytest.raises(ValueError):
        sk.rewire(base, sk.SwiftKVConfig(cutoff=4), train_scope="everything")


def test_cutoff_bound_checked_at_rewire():
    base = mdl.init_random(toy_cfg(), seed=0)
    with pytest.raises(ValueError):
        sk.rewire(base, sk.SwiftKVConfig(cutoff=9))


# ---------------------------------------------------------------------------
# forward_student


def test_teacher_mode_matches_forward_full():
    student = make_student()
    toks = [1, 5, 9, 2, 7]
    want, want_trace = mdl.forward_full(student.base, toks)
    got, got_trace = sk.forward_student(student, toks, mode="teacher")
    assert np.array_equal(got, want)
    assert len(got_trace) == len(want_trace)
    for a, b in zip(got_trace.inputs, want_trace.inputs):
        assert np.array_equal(a, b)


def test_swiftkv_mode_with_cutoff_at_depth_is_teacher():
    cfg = toy_cfg()
    student = make_student(cutoff=cfg.num_layers)
    toks = [3, 1, 4, 1, 5]
    want, _ = mdl.forward_full(student.base, toks)
    got, _ = sk.forward_student(student, toks, mode="swiftkv")
    assert np.array_equal(got, want)


def test_fresh_student_swiftkv_differs_from_teacher():
    # with cutoff < depth the deep keys/queries see different inputs, so the
    # two routes must not coincide on a random model
    student = make_student(cutoff=2)
    toks = [3, 1, 4, 1, 5, 9]
    teacher, _ = sk.forward_student(student, toks, mode="teacher")
    swift, _ = sk.forward_student(student, toks, mode="swiftkv")
    assert not np.allclose(teacher, swift)


def test_forward_student_rejects_unknown_mode():
    student = make_student()
    with pytest.raises(ValueError):
        sk.forward_student(student, [1, 2], mode="both")


# ---------------------------------------------------------------------------
# boundary-state projections in the cache


def test_prefill_cache_keys_project_boundary_state():
    cfg = toy_cfg()
    student = make_student(cutoff=5, group_size=1, cfg=cfg)
    toks = [2, 4, 6, 8, 1, 3]
    _, trace = sk.forward_student(student, toks, mode="swiftkv")
    boundary = trace[5]
    positions = np.arange(len(toks))

    cache = kvc.KVCache(sk.student_cache_config(student))
    sk.prefill_skip(student, toks, cache)
    for j in range(5, cfg.num_layers):
        k, v = cache.read_block(student.group_map.group_index(j), len(toks))
        want_k = nm.rope_apply(
            nm.matmul(boundary, student.new_wk[j]), positions, cfg.rope_theta, cfg.head_dim
        )
        want_v = nm.matmul(boundary, student.new_wv[j])
        assert np.allclose(k, want_k, atol=1e-12)
        assert np.allclose(v, want_v, atol=1e-12)


def test_group_members_share_leader_cache():
    student = make_student(cutoff=4, group_size=2)
    toks = [7, 7, 1, 0]
    cache = kvc.KVCache(sk.student_cache_config(student))
    sk.prefill_skip(student, toks, cache)
    # layers 4,5 read group 4's block; layers 6,7 read group 5's
    assert student.group_map.group_index(4) == student.group_map.group_index(5)
    assert student.group_map.group_index(6) == student.group_map.group_index(7)
    assert student.group_map.group_index(5) != student.group_map.group_index(6)
    k45, v45 = cache.read_block(student.group_map.group_index(5), len(toks))
    want_k, _ = cache.read_block(student.group_map.group_index(4), len(toks))
    assert np.array_equal(k45, want_k)
    # and the shared block is the leader's projection, not layer 5's
    _, trace = sk.forward_student(student, toks, mode="swiftkv")
    leader_v = nm.matmul(trace[4], student.new_wv[4])
    assert np.allclose(v45, leader_v, atol=1e-12)


# ---------------------------------------------------------------------------
# skip-prefill / cached-decode equivalence


@pytest.mark.parametrize("group_size", [1, 2, 4])
def test_skip_path_matches_full_recompute(group_size):
    student = make_student(cutoff=4, group_size=group_size, seed=11)
    rng = np.random.default_rng(5)
    prompt = rng.integers(0, student.base.config.vocab_size, size=9).tolist()
    want_tokens, want_rows = greedy_recompute(student, prompt, 6)
    got_tokens, got_rows = skip_path(student, prompt, 6)
    assert got_tokens == want_tokens
    for got, want in zip(got_rows, want_rows):
        assert np.max(np.abs(got - want)) <= 1e-9


def test_skip_path_single_token_prompt():
    student = make_student(cutoff=4)
    want_tokens, _ = greedy_recompute(student, [3], 4)
    got_tokens, _ = skip_path(student, [3], 4)
    assert got_tokens == want_tokens


def test_generate_student_matches_skip_path():
    student = make_student(cutoff=4, group_size=2, seed=3)
    prompt = [1, 2, 3, 4, 5]
    want_tokens, _ = skip_path(student, prompt, 7)
    got_tokens, exited = sk.generate_student(student, prompt, 7)
    assert got_tokens == want_tokens
    assert exited == [False] * 7


def test_decode_step_skip_with_cutoff_at_depth_matches_plain_decode():
    cfg = toy_cfg()
    student = make_student(cutoff=cfg.num_layers, cfg=cfg)
    prompt = [5, 6, 7]

    swift_cache = kvc.KVCache(sk.student_cache_config(student))
    sk.prefill_skip(student, prompt, swift_cache)

    plain_cache = kvc.KVCache(mdl.default_cache_config(cfg))
    last = None
    for pos, tok in enumerate(prompt):
        last = mdl.decode_step(student.base, tok, pos, plain_cache)

    got = sk.decode_step_skip(student, 2, len(prompt), swift_cache)
    want = mdl.decode_step(student.base, 2, len(prompt), plain_cache)
    assert np.allclose(got, want, atol=1e-12)


def test_prefill_rejects_wrong_group_map():
    student = make_student(cutoff=4, group_size=2)
    wrong = kvc.KVCache(
        kvc.CacheConfig(
            group_map=kvc.GroupMap.identity(student.base.config.num_layers),
            d_kv=student.base.config.d_kv,
        )
    )
    with pytest.raises(ValueError):
        sk.prefill_skip(student, [1, 2, 3], wrong)


def test_prefill_requires_empty_cache():
    student = make_student(cutoff=4)
    cache = kvc.KVCache(sk.student_cache_config(student))
    sk.prefill_skip(student, [1, 2], cache)
    with pytest.raises(ValueError):
        sk.prefill_skip(student, [1, 2], cache)


# ---------------------------------------------------------------------------
# reduction accounting


def test_reduction_stats_reference_grid():
    # 32 layers, cutoff at half depth
    cfg32 = mdl.llama8b_config()
    cases = {1: 0.0, 2: 0.25, 4: 0.375, 8: 0.4375, 16: 0.46875}
    for g, want_kv in cases.items():
        stats = sk.reduction_stats(sk.SwiftKVConfig(cutoff=16, group_size=g), cfg32)
        assert stats.prefill_reduction == pytest.approx(0.5)
        assert stats.kv_reduction == pytest.approx(want_kv)
        assert stats.kv_projection_layers == 16 + -(-16 // g)


def test_reduction_stats_ragged_group():
    # 6 deep layers in groups of 4 -> 2 groups (4 + 2)
    cfg12 = dataclasses.replace(toy_cfg(), num_layers=12)
    stats = sk.reduction_stats(sk.SwiftKVConfig(cutoff=6, group_size=4), cfg12)
    assert stats.kv_projection_layers == 6 + 2
    assert stats.kv_reduction == pytest.approx(1 - 8 / 12)
    assert stats.prefill_reduction == pytest.approx(0.5)


def test_reduction_stats_full_depth_cutoff_is_identity():
    stats = sk.reduction_stats(sk.SwiftKVConfig(cutoff=8, group_size=1), toy_cfg())
    assert stats.prefill_reduction == 0.0
    assert stats.kv_reduction == 0.0


# ---------------------------------------------------------------------------
# trainable tensors


def test_trainable_parameter_count_oracle():
    student = make_student(cutoff=4, group_size=2, early_exit=True)
    base = student.base
    want = 0
    for j in range(4, 8):
        want += base.layers[j].w_q.size
    for leader in (4, 6):
        want += base.layers[leader].w_k.size + base.layers[leader].w_v.size
    want += base.lm_head.size
    assert student.trainable_parameter_count() == want
    named = student.trainable_tensors()
    assert sum(a.size for a in named.values()) == want
    assert "exit_head" in named
    assert "layers.4.new_wk" in named and "layers.5.new_wk" not in named


def test_trainable_full_scope_adds_deep_layer_tensors():
    narrow = make_student(cutoff=6, scope="wqkv", seed=2)
    full = make_student(cutoff=6, scope="full", seed=2)
    base = full.base
    extra = sum(
        getattr(base.layers[j], kind).size
        for j in (6, 7)
        for kind in sk.FULL_SCOPE_KINDS
    )
    assert full.trainable_parameter_count() == narrow.trainable_parameter_count() + extra
    names = set(full.trainable_tensors())
    assert "layers.6.w_o" in names and "layers.7.w_down" in names
    assert "layers.5.w_o" not in names


def test_trainable_tensors_are_live_views():
    student = make_student(cutoff=4)
    named = student.trainable_tensors()
    named["layers.4.new_wq"][0, 0] += 1.0
    assert student.new_wq[4][0, 0] == named["layers.4.new_wq"][0, 0]


# ---------------------------------------------------------------------------
# early exit


def setup_exit(threshold):
    student = make_student(cutoff=4, early_exit=True, exit_threshold=threshold)
    cache = kvc.KVCache(sk.student_cache_config(student))
    sk.prefill_skip(student, [1, 2, 3, 4], cache)
    return student, cache


def exit_head_oracle(student, toks):
    """Boundary state through the final norm and the exit head."""
    _, trace = sk.forward_student(student, toks, mode="swiftkv")
    cfg = student.base.config
    return nm.matmul(
        nm.rmsnorm(trace[4][-1:], student.base.final_norm, cfg.rms_eps),
        student.exit_head,
    )[0]


def test_early_exit_requires_exit_head():
    student = make_student(cutoff=4, early_exit=False)
    cache = kvc.KVCache(sk.student_cache_config(student))
    sk.prefill_skip(student, [1, 2], cache)
    with pytest.raises(ValueError):
        sk.early_exit_decode(student, 1, 2, cache)


def test_threshold_one_never_exits():
    student, cache = setup_exit(threshold=1.0)
    ref_cache = cache.clone()
    logits, exited = sk.early_exit_decode(student, 5, 4, cache)
    want = sk.decode_step_skip(student, 5, 4, ref_cache)
    assert not exited
    assert np.array_equal(logits, want)


def test_tiny_threshold_exits_with_boundary_head():
    student, cache = setup_exit(threshold=1e-12)
    logits, exited = sk.early_exit_decode(student, 5, 4, cache)
    assert exited
    want = exit_head_oracle(student, [1, 2, 3, 4, 5])
    assert np.allclose(logits, want, atol=1e-12)


def test_exit_still_appends_kv():
    student, cache = setup_exit(threshold=1e-12)
    before = cache.length(0)
    _, exited = sk.early_exit_decode(student, 5, 4, cache)
    assert exited
    for g in range(student.group_map.num_groups):
        assert cache.length(g) == before + 1
    # the cache stays usable for the next position
    sk.decode_step_skip(student, 0, 5, cache)


def test_exit_probability_rule_is_strict_max():
    # with threshold exactly equal to the max probability, no exit
    student, cache = setup_exit(threshold=1e-12)
    probe_logits, exited = sk.early_exit_decode(student, 5, 4, cache.clone())
    assert exited
    top = float(nm.softmax_rows(probe_logits[None, :])[0].max())
    # same seed, so same weights; only the threshold differs
    strict = make_student(cutoff=4, early_exit=True, exit_threshold=top)
    _, exited2 = sk.early_exit_decode(strict, 5, 4, cache)
    assert not exited2


def test_generate_student_reports_exits():
    student = make_student(cutoff=4, early_exit=True, exit_threshold=1e-12)
    tokens, exited = sk.generate_student(student, [1, 2, 3], 5, use_early_exit=True)
    assert len(tokens) == 5
    # the first token comes from prefill and can never exit
    assert exited == [False, True, True, True, True]
    never = make_student(cutoff=4, early_exit=True, exit_threshold=1.0)
    _, exited2 = sk.generate_student(never, [1, 2, 3], 5, use_early_exit=True)
    assert exited2 == [False] * 5


# ---------------------------------------------------------------------------
# exit alignment harness


def test_exit_alignment_stats_counts():
    student = make_student(cutoff=4, early_exit=True, seed=7)
    rng = np.random.default_rng(1)
    prompts = [rng.integers(0, 16, size=6).tolist() for _ in range(8)]
    stats = sk.exit_alignment_stats(student, prompts, out_len=4, num_bins=5)
    assert stats.total == 8 * 4
    assert stats.counts.sum() == stats.total
    assert 0.0 <= stats.overall_rate <= 1.0
    for count, rate in zip(stats.counts, stats.agreement):
        if count == 0:
            assert np.isnan(rate)
        else:
            assert 0.0 <= rate <= 1.0
    assert len(stats.bin_edges) == 6


def test_exit_alignment_recount_oracle():
    student = make_student(cutoff=4, early_exit=True, seed=9)
    prompts = [[1, 2, 3], [4, 5, 6, 7]]
    stats = sk.exit_alignment_stats(student, prompts, out_len=3, num_bins=4)

    # independent recount straight from full-path generation
    agree = total = 0
    confs = []
    cfg = student.base.config
    for prompt in prompts:
        toks = list(prompt)
        for _ in range(3):
            logits, trace = sk.forward_student(student, toks, mode="swiftkv")
            full_tok = int(np.argmax(logits[-1]))
            e_logits = nm.matmul(
                nm.rmsnorm(trace[4][-1:], student.base.final_norm, cfg.rms_eps),
                student.exit_head,
            )[0]
            probs = nm.softmax_rows(e_logits[None, :])[0]
            exit_tok = int(np.argmax(e_logits))
            agree += exit_tok == full_tok
            total += 1
            confs.append(float(probs.max()))
            toks.append(full_tok)
    assert stats.total == total
    assert stats.overall_rate == pytest.approx(agree / total)
    want_counts, _ = np.histogram(confs, bins=stats.bin_edges)
    assert np.array_equal(stats.counts, want_counts)
