"""Command-line tool exposing every workflow as one subcommand each.

Outputs are machine-readable first: every report writes CSV (or JSON)
into --out, with a companion PNG figure, and prints a short human summary.
Exit codes: 0 success, 1 failed check or rejected operation, 2 usage,
3 malformed config, 4 unreadable checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis as an
from . import checkpoint as ckpt
from . import distill as dl
from . import model as mdl
from . import plots
from . import servesim as sv
from . import swiftkv as sk
from .runconfig import ConfigError, RunConfig, load_config

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4


class CheckpointError(ValueError):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path: Path):
    try:
        return ckpt.load_checkpoint(path)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc


def _load_teacher(path: Path) -> mdl.Parameters:
    params = _load(path)
    if not isinstance(params, mdl.Parameters):
        raise CheckpointError(f"{path} holds a student checkpoint, expected a teacher")
    return params


def _load_student(path: Path) -> sk.StudentParameters:
    params = _load(path)
    if not isinstance(params, sk.StudentParameters):
        raise CheckpointError(f"{path} holds a teacher checkpoint, expected a student")
    return params


def _write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _parse_tokens(text: str) -> list[int]:
    try:
        return [int(p) for p in text.replace(",", " ").split()]
    except ValueError:
        raise ValueError(f"prompt must be integer token ids, got {text!r}") from None


def _random_prompts(
    vocab_size: int, num_prompts: int, length: int, seed: int
) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.integers(vocab_size, size=length) for _ in range(num_prompts)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_init(args, config: RunConfig) -> int:
    out = _out_dir(args)
    seed = config.model.seed if args.seed is None else args.seed
    params = mdl.init_random(config.model_config(), seed)
    path = ckpt.save_checkpoint(out / "teacher.json", params)
    print(f"wrote {path} and {ckpt.blob_path(path)} (seed {seed})")
    return EXIT_OK


def _swiftkv_overrides(args, config: RunConfig) -> sk.SwiftKVConfig:
    base = config.swiftkv_config()
    cutoff = base.cutoff if args.cutoff is None else args.cutoff
    group = base.group_size if args.group_size is None else args.group_size
    early = base.early_exit or args.early_exit
    return sk.SwiftKVConfig(
        cutoff=cutoff, group_size=group, early_exit=early,
        exit_threshold=base.exit_threshold,
    )


def cmd_transform(args, config: RunConfig) -> int:
    out = _out_dir(args)
    teacher_path = Path(args.teacher) if args.teacher else out / "teacher.json"
    teacher = _load_teacher(teacher_path)
    swift = _swiftkv_overrides(args, config)
    scope = args.train_scope or config.swiftkv.train_scope
    student = sk.rewire(teacher, swift, train_scope=scope)
    path = ckpt.save_checkpoint(out / "student.json", student)
    stats = sk.reduction_stats(swift, teacher.config)
    print(
        f"wrote {path}: cutoff {swift.cutoff}/{teacher.config.num_layers}, "
        f"group size {swift.group_size}, scope {scope}"
    )
    print(
        f"prefill reduction {stats.prefill_reduction * 100:.2f}%, "
        f"KV reduction {stats.kv_reduction * 100:.2f}% "
        f"({stats.kv_projection_layers} projecting layers)"
    )
    return EXIT_OK


def cmd_distill(args, config: RunConfig) -> int:
    out = _out_dir(args)
    student_path = Path(args.student) if args.student else out / "student.json"
    student = _load_student(student_path)
    train_cfg = config.train_config()
    if args.epochs is not None:
        train_cfg = dl.TrainConfig(
            **{**train_cfg.__dict__, "epochs": args.epochs}
        )
    t = config.train
    sequences = t.num_sequences if args.sequences is None else args.sequences
    corpus, _ = dl.synth_dataset(
        student.base.config.vocab_size, sequences, t.sequence_length,
        seed=train_cfg.seed, branching=t.branching,
    )
    initial = dl.evaluate(student, corpus, train_cfg.temperature)
    state = dl.train(student, corpus, train_cfg)
    final = dl.evaluate(student, corpus, train_cfg.temperature)
    path = ckpt.save_checkpoint(out / "student_trained.json", student)
    _write_csv(
        out / "history.csv", ["step", "lr", "loss"],
        [[step, repr(lr), repr(loss)] for step, lr, loss in state.history],
    )
    plots.loss_figure(state.history, out / "loss.png")
    ratio = final / initial if initial > 0 else float("nan")
    print(f"wrote {path}, {out / 'history.csv'}, {out / 'loss.png'}")
    print(
        f"loss {initial:.6f} -> {final:.6f} (ratio {ratio:.4f}) "
        f"over {state.total_steps} steps"
    )
    return EXIT_OK


def cmd_generate(args, config: RunConfig) -> int:
    out = _out_dir(args)
    path = Path(args.checkpoint) if args.checkpoint else out / "student.json"
    params = _load(path)

    if args.exit_stats:
        if not isinstance(params, sk.StudentParameters):
            raise CheckpointError(f"{path} holds a teacher; exit stats need a student")
        prompts = _random_prompts(
            params.base.config.vocab_size, args.num_prompts,
            args.prompt_length, args.seed,
        )
        stats = sk.exit_alignment_stats(params, prompts, args.length, args.bins)
        rows = [
            [repr(float(stats.bin_edges[i])), repr(float(stats.bin_edges[i + 1])),
             int(stats.counts[i]), repr(float(stats.agreement[i]))]
            for i in range(len(stats.counts))
        ]
        _write_csv(out / "alignment.csv",
                   ["bin_lo", "bin_hi", "count", "agreement"], rows)
        plots.alignment_figure(stats, out / "alignment.png")
        print(f"wrote {out / 'alignment.csv'} and {out / 'alignment.png'}")
        print("bin_lo  bin_hi  count  agreement")
        for i in range(len(stats.counts)):
            agree = stats.agreement[i]
            agree_s = "  (empty)" if np.isnan(agree) else f"{agree:9.4f}"
            print(
                f"{stats.bin_edges[i]:6.2f}  {stats.bin_edges[i + 1]:6.2f}  "
                f"{int(stats.counts[i]):5d}  {agree_s}"
            )
        print(f"overall agreement {stats.overall_rate * 100:.2f}% "
              f"over {stats.total} positions")
        return EXIT_OK

    if args.prompt is None:
        raise ValueError("generate needs --prompt (or --exit-stats)")
    prompt = _parse_tokens(args.prompt)
    if isinstance(params, mdl.Parameters):
        if args.mode != "teacher":
            raise ValueError(f"{path} holds a teacher; only --mode teacher applies")
        tokens = mdl.generate(params, prompt, args.length)
        exited = [False] * len(tokens)
    elif args.mode == "teacher":
        tokens = mdl.generate(params.base, prompt, args.length)
        exited = [False] * len(tokens)
    else:
        tokens, exited = sk.generate_student(
            params, prompt, args.length, use_early_exit=args.early_exit
        )
    record = {
        "mode": args.mode, "prompt": prompt, "tokens": tokens,
        "exited": exited, "early_exit": bool(args.early_exit),
    }
    (out / "generate.json").write_text(
        json.dumps(record, indent=2) + "\n", encoding="utf-8"
    )
    print(" ".join(str(t) for t in tokens))
    if args.early_exit:
        print(f"early exits: {sum(exited)}/{len(exited)}")
    return EXIT_OK


def cmd_simscore(args, config: RunConfig) -> int:
    out = _out_dir(args)
    path = Path(args.checkpoint) if args.checkpoint else out / "teacher.json"
    params = _load(path)
    teacher = params.base if isinstance(params, sk.StudentParameters) else params
    prompts = _random_prompts(
        teacher.config.vocab_size, args.num_prompts, args.prompt_length, args.seed
    )
    profiles = []
    for prompt in prompts:
        _, trace = mdl.forward_full(teacher, prompt)
        profiles.append(an.sim_score(trace, include_final=args.include_final))
    scores = np.mean(profiles, axis=0)
    _write_csv(
        out / "simscore.csv", ["layer", "score"],
        [[l + 1, repr(float(s))] for l, s in enumerate(scores)],
    )
    plots.simscore_figure(scores, out / "simscore.png")
    best = int(np.argmax(scores)) + 1
    print(f"wrote {out / 'simscore.csv'} and {out / 'simscore.png'}")
    print(f"highest similarity at boundary layer {best} "
          f"(score {scores[best - 1]:.4f})")
    return EXIT_OK


def _parse_swiftkv_spec(text: str, num_layers: int) -> tuple[str, sk.SwiftKVConfig]:
    """'0.5' or '0.5:4' -> (label, config); the fraction is layers skipped."""
    frac_s, _, group_s = text.partition(":")
    frac = float(frac_s)
    if not 0.0 < frac < 1.0:
        raise ValueError(f"swiftkv fraction must be in (0, 1), got {frac_s!r}")
    group = int(group_s) if group_s else 1
    cutoff = num_layers - round(frac * num_layers)
    label = f"swiftkv {frac * 100:.0f}%"
    if group > 1:
        label += f" + {group}x acrosskv"
    return label, sk.SwiftKVConfig(cutoff=cutoff, group_size=group)


def cmd_flops(args, config: RunConfig) -> int:
    out = _out_dir(args)
    if args.preset:
        section = type(config.model)(preset=args.preset)
        model_cfg = type(config)(model=section).model_config()
    else:
        model_cfg = config.model_config()
    ctx = (
        args.context
        if args.context is not None
        else an.calibrate_attn_context(
            model_cfg, args.attn_gflops * 1e9, args.causal_factor
        )
    )
    specs = args.swiftkv if args.swiftkv else ["0.25", "0.5", "0.5:4"]
    variants: list[tuple[str, sk.SwiftKVConfig | None]] = [("baseline", None)]
    variants += [_parse_swiftkv_spec(s, model_cfg.num_layers) for s in specs]

    rows = []
    for label, swift in variants:
        b = an.flops_prefill_token(model_cfg, swift, ctx, args.causal_factor)
        rows.append(
            (label, {"vocab": b.vocab, "kv": b.kv, "qo": b.qo, "mlp": b.mlp,
                     "attn": b.attn, "total": b.total, "rel": b.rel})
        )
    _write_csv(
        out / "flops.csv",
        ["config", "vocab", "kv", "qo", "mlp", "attn", "total", "rel"],
        [[label] + [repr(cols[k]) for k in
                    ("vocab", "kv", "qo", "mlp", "attn", "total", "rel")]
         for label, cols in rows],
    )
    plots.flops_figure(rows, out / "flops.png")

    widths = max(len(label) for label, _ in rows)
    print(f"per-prompt-token GFLOPs at context {ctx:.2f}")
    print(f"{'config':<{widths}}  {'vocab':>9} {'kv':>9} {'qo':>9} "
          f"{'mlp':>9} {'attn':>9} {'total':>9} {'rel':>7}")
    for label, cols in rows:
        print(
            f"{label:<{widths}}  "
            f"{cols['vocab'] / 1e9:9.3f} {cols['kv'] / 1e9:9.3f} "
            f"{cols['qo'] / 1e9:9.3f} {cols['mlp'] / 1e9:9.3f} "
            f"{cols['attn'] / 1e9:9.3f} {cols['total'] / 1e9:9.3f} "
            f"{cols['rel'] * 100:6.1f}%"
        )
    print(f"wrote {out / 'flops.csv'} and {out / 'flops.png'}")
    return EXIT_OK


METRICS_HEADER = ["request_id", "arrival_s", "ttft_s", "tpot_s",
                  "in_tokens", "out_tokens"]


def _metrics_rows(metrics: sv.SimMetrics) -> list[list]:
    return [
        [r.request_id, repr(r.arrival_s), repr(r.ttft_s), repr(r.tpot_s),
         r.in_tokens, r.out_tokens]
        for r in metrics.requests
    ]


def cmd_simulate(args, config: RunConfig) -> int:
    out = _out_dir(args)
    workload = config.workload_spec()
    hardware = config.hardware_model()
    swift = config.swiftkv_config() if args.mode == "swiftkv" else None
    engine = config.engine_config(swift)

    if args.sweep:
        rates = [float(r) for r in args.sweep.replace(",", " ").split()]
        engines = {
            "baseline": config.engine_config(None),
            "swiftkv": config.engine_config(config.swiftkv_config()),
        }
        sweep_rows = []
        lines: dict[str, list[tuple[float, float]]] = {}
        for label, eng in engines.items():
            sweep = sv.sweep_arrival(workload, rates, eng, hardware)
            knee = sv.find_knee(sweep, sv.zero_load_ttft(workload, eng, hardware))
            lines[label] = [(rate, m.mean_ttft_s) for rate, m in sweep]
            for rate, m in sweep:
                sweep_rows.append(
                    [label, repr(rate), repr(m.mean_ttft_s), repr(m.mean_tpot_s),
                     repr(m.throughput_tokens_per_s)]
                )
            print(f"{label}: knee at rate {knee}")
        _write_csv(
            out / "sweep.csv",
            ["engine", "rate", "mean_ttft_s", "mean_tpot_s",
             "throughput_tokens_per_s"],
            sweep_rows,
        )
        plots.sweep_figure(lines, out / "sweep.png")
        print(f"wrote {out / 'sweep.csv'} and {out / 'sweep.png'}")
        return EXIT_OK

    metrics = sv.run_sim(workload, engine, hardware)
    _write_csv(out / "metrics.csv", METRICS_HEADER, _metrics_rows(metrics))
    summary = {
        "mode": args.mode,
        "feasible": metrics.feasible,
        "makespan_s": metrics.makespan_s,
        "throughput_tokens_per_s": metrics.throughput_tokens_per_s,
        "mean_ttft_s": metrics.mean_ttft_s,
        "mean_tpot_s": metrics.mean_tpot_s,
        "completed": len(metrics.requests),
        "rejected": metrics.rejected,
        "memory_high_water_bytes": metrics.memory_high_water_bytes,
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    plots.latency_figure(metrics.requests, out / "latency.png")
    print(f"wrote {out / 'metrics.csv'}, {out / 'summary.json'}, "
          f"{out / 'latency.png'}")
    if not metrics.feasible:
        print("infeasible: parameters alone exceed memory capacity")
    else:
        print(
            f"{args.mode}: {len(metrics.requests)} completed, "
            f"{len(metrics.rejected)} rejected, "
            f"throughput {metrics.throughput_tokens_per_s:.1f} tok/s, "
            f"mean TTFT {metrics.mean_ttft_s:.3f}s"
        )
    return EXIT_OK


def cmd_memstudy(args, config: RunConfig) -> int:
    out = _out_dir(args)
    capacities = [float(c) for c in args.capacities.replace(",", " ").split()]
    engine = config.engine_config(None)
    rows = sv.memory_study(
        engine, capacities, config.workload_spec(), config.hardware_model()
    )
    _write_csv(
        out / "memstudy.csv",
        ["capacity_bytes", "variant", "feasible", "throughput_tokens_per_s",
         "kv_bytes_per_token", "rejected"],
        [[repr(r.capacity_bytes), r.variant, r.feasible,
          repr(r.throughput_tokens_per_s), r.kv_bytes_per_token, r.rejected]
         for r in rows],
    )
    plots.memory_figure(rows, out / "memstudy.png")
    print(f"wrote {out / 'memstudy.csv'} and {out / 'memstudy.png'}")
    for cap in capacities:
        at_cap = [r for r in rows if r.capacity_bytes == cap]
        best = max(at_cap, key=lambda r: r.throughput_tokens_per_s)
        if not best.feasible:
            print(f"{cap / 1e9:.0f} GB: infeasible for every variant")
        else:
            print(f"{cap / 1e9:.0f} GB: best {best.variant} "
                  f"at {best.throughput_tokens_per_s:.1f} tok/s")
    return EXIT_OK


def cmd_gradcheck(args, config: RunConfig) -> int:
    out = _out_dir(args)
    model_cfg = config.model_config()
    teacher = mdl.init_random(model_cfg, config.model.seed)
    swift = _swiftkv_overrides(args, config)
    scope = args.train_scope or config.swiftkv.train_scope
    student = sk.rewire(teacher, swift, train_scope=scope)
    rng = np.random.default_rng(args.seed)
    tokens = rng.integers(model_cfg.vocab_size, size=args.prompt_length)
    worst, records = dl.gradient_check(
        student, tokens, temperature=config.train.temperature,
        num_coords=args.coords, step=args.step, seed=args.seed,
    )
    payload = {
        "max_rel_error": worst,
        "tolerance": args.tolerance,
        "coords": args.coords,
        "passed": bool(worst <= args.tolerance),
        "records": [
            {"tensor": name, "index": int(idx), "analytic": a, "numeric": n,
             "rel_error": rel}
            for name, idx, a, n, rel in records
        ],
    }
    (out / "gradcheck.json").write_text(
        json.dumps(payload, indent=2) + "\n", encoding="utf-8"
    )
    tensors = sorted({name for name, *_ in records})
    print(f"checked {args.coords} coordinates across {len(tensors)} tensors")
    print(f"max relative error {worst:.3e} (tolerance {args.tolerance:.1e})")
    print(f"wrote {out / 'gradcheck.json'}")
    if worst > args.tolerance:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_FAILURE
    print("gradcheck passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swiftkvlab",
        description="Desk-scale laboratory for SwiftKV-style prefill skipping.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI run configuration")
        p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("init", help="initialize a random teacher checkpoint")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("transform", help="rewire a teacher into a student")
    common(p)
    p.add_argument("--teacher", default=None, help="teacher checkpoint path")
    p.add_argument("--cutoff", type=int, default=None)
    p.add_argument("--group-size", type=int, default=None)
    p.add_argument("--early-exit", action="store_true")
    p.add_argument("--train-scope", choices=("wqkv", "full"), default=None)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("distill", help="train a student against its teacher")
    common(p)
    p.add_argument("--student", default=None, help="student checkpoint path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--sequences", type=int, default=None)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("generate", help="greedy generation from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--mode", choices=("teacher", "swiftkv"), default="swiftkv")
    p.add_argument("--prompt", default=None, help="comma-separated token ids")
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--early-exit", action="store_true")
    p.add_argument("--exit-stats", action="store_true",
                   help="emit the exit alignment table instead of tokens")
    p.add_argument("--num-prompts", type=int, default=8)
    p.add_argument("--prompt-length", type=int, default=8)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simscore", help="layer-similarity profile of a model")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--num-prompts", type=int, default=4)
    p.add_argument("--prompt-length", type=int, default=32)
    p.add_argument("--include-final", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simscore)

    p = sub.add_parser("flops", help="analytic per-token flop table")
    common(p)
    p.add_argument("--preset", choices=("toy", "llama8b", "llama70b"),
                   default=None)
    p.add_argument("--swiftkv", action="append", default=None,
                   metavar="FRAC[:GROUP]",
                   help="skip fraction, e.g. 0.5 or 0.5:4 (repeatable)")
    p.add_argument("--attn-gflops", type=float, default=160.0,
                   help="calibrate context so baseline attention hits this")
    p.add_argument("--context", type=float, default=None,
                   help="explicit attention context (skips calibration)")
    p.add_argument("--causal-factor", type=float, default=1.0)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("simulate", help="serving simulation over a workload")
    common(p)
    p.add_argument("--mode", choices=("baseline", "swiftkv"), default="swiftkv")
    p.add_argument("--sweep", default=None,
                   help="comma-separated arrival rates; sweeps both engines")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("memstudy", help="throughput under memory caps")
    common(p)
    p.add_argument("--capacities", default="80e9,40e9,20e9,16e9")
    p.set_defaults(func=cmd_memstudy)

    p = sub.add_parser("gradcheck", help="autodiff vs finite differences")
    common(p)
    p.add_argument("--cutoff", type=int, default=None)
    p.add_argument("--group-size", type=int, default=None)
    p.add_argument("--early-exit", action="store_true")
    p.add_argument("--train-scope", choices=("wqkv", "full"), default=None)
    p.add_argument("--coords", type=int, default=50)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--prompt-length", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        config = load_config(args.config)
        return args.func(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
