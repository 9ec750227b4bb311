"""Checkpoint format, run-configuration parsing, and CLI workflows."""

import json

import numpy as np
import pytest

from swiftkvlab import checkpoint as ckpt
from swiftkvlab import cli
from swiftkvlab import distill as dl
from swiftkvlab import model as mdl
from swiftkvlab import runconfig as rc
from swiftkvlab import swiftkv as sk


def toy_teacher(seed=0):
    return mdl.init_random(mdl.toy_config(), seed)


# ---------------------------------------------------------------------------
# checkpoint round-trips


def test_teacher_roundtrip_bitexact(tmp_path):
    params = toy_teacher(3)
    path = ckpt.save_checkpoint(tmp_path / "t.json", params)
    loaded = ckpt.load_checkpoint(path)
    assert isinstance(loaded, mdl.Parameters)
    assert loaded.config == params.config
    assert np.array_equal(loaded.token_embedding, params.token_embedding)
    assert np.array_equal(loaded.final_norm, params.final_norm)
    assert np.array_equal(loaded.lm_head, params.lm_head)
    for mine, theirs in zip(loaded.layers, params.layers):
        for kind in ckpt.TEACHER_LAYER_KINDS:
            assert np.array_equal(getattr(mine, kind), getattr(theirs, kind))


def test_save_load_save_byte_identical(tmp_path):
    params = toy_teacher(5)
    first = ckpt.save_checkpoint(tmp_path / "a.json", params)
    loaded = ckpt.load_checkpoint(first)
    second = ckpt.save_checkpoint(tmp_path / "b.json", loaded)
    assert first.read_bytes() == second.read_bytes()
    assert ckpt.blob_path(first).read_bytes() == ckpt.blob_path(second).read_bytes()


@pytest.mark.parametrize("scope", ["wqkv", "full"])
def test_student_roundtrip(tmp_path, scope):
    teacher = toy_teacher(1)
    swift = sk.SwiftKVConfig(cutoff=4, group_size=2, early_exit=True,
                             exit_threshold=0.7)
    student = sk.rewire(teacher, swift, train_scope=scope)
    path = ckpt.save_checkpoint(tmp_path / "s.json", student)
    loaded = ckpt.load_checkpoint(path)
    assert isinstance(loaded, sk.StudentParameters)
    assert loaded.config == swift
    assert loaded.group_map == student.group_map
    assert (loaded.extras is None) == (scope == "wqkv")
    mine = loaded.trainable_tensors()
    theirs = student.trainable_tensors()
    assert sorted(mine) == sorted(theirs)
    for name in theirs:
        assert np.array_equal(mine[name], theirs[name])
    assert np.array_equal(loaded.base.lm_head, teacher.lm_head)

    tokens = np.arange(6) % teacher.config.vocab_size
    want, _ = sk.forward_student(student, tokens)
    got, _ = sk.forward_student(loaded, tokens)
    assert np.array_equal(want, got)


def test_student_roundtrip_after_training(tmp_path):
    teacher = toy_teacher(2)
    student = sk.rewire(teacher, sk.SwiftKVConfig(cutoff=4, early_exit=True))
    data, _ = dl.synth_dataset(teacher.config.vocab_size, 4, 8, seed=0)
    dl.train(student, data, dl.TrainConfig(epochs=1, batch_size=4))
    path = ckpt.save_checkpoint(tmp_path / "trained.json", student)
    loaded = ckpt.load_checkpoint(path)
    for name, w in student.trainable_tensors().items():
        assert np.array_equal(loaded.trainable_tensors()[name], w)


def test_manifest_contents(tmp_path):
    params = toy_teacher(0)
    path = ckpt.save_checkpoint(tmp_path / "t.json", params)
    manifest = json.loads(path.read_text())
    assert manifest["format"] == ckpt.FORMAT_NAME
    assert manifest["version"] == ckpt.FORMAT_VERSION
    assert manifest["kind"] == "teacher"
    assert manifest["swiftkv_config"] is None
    assert manifest["model_config"]["num_layers"] == params.config.num_layers
    offsets = [t["offset"] for t in manifest["tensors"]]
    assert offsets[0] == 0 and offsets == sorted(offsets)
    sizes = [
        int(np.prod(t["shape"])) * 8 for t in manifest["tensors"]
    ]
    assert manifest["blob_bytes"] == sum(sizes)
    assert manifest["blob_bytes"] == ckpt.blob_path(path).stat().st_size
    for t in manifest["tensors"]:
        assert t["precision"] == "double"


def test_blob_is_little_endian_ieee754(tmp_path):
    params = toy_teacher(0)
    path = ckpt.save_checkpoint(tmp_path / "t.json", params)
    manifest = json.loads(path.read_text())
    blob = ckpt.blob_path(path).read_bytes()
    entry = next(t for t in manifest["tensors"] if t["name"] == "token_embedding")
    count = int(np.prod(entry["shape"]))
    decoded = np.frombuffer(
        blob, dtype="<f8", count=count, offset=entry["offset"]
    ).reshape(entry["shape"])
    assert np.array_equal(decoded, params.token_embedding)


def test_load_errors(tmp_path):
    with pytest.raises(ValueError, match="unreadable checkpoint"):
        ckpt.load_checkpoint(tmp_path / "missing.json")

    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    with pytest.raises(ValueError, match="malformed manifest"):
        ckpt.load_checkpoint(bad)

    other = tmp_path / "other.json"
    other.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(ValueError, match="not a swiftkvlab-checkpoint"):
        ckpt.load_checkpoint(other)

    params = toy_teacher(0)
    path = ckpt.save_checkpoint(tmp_path / "t.json", params)
    manifest = json.loads(path.read_text())
    manifest["version"] = 99
    path.write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="version"):
        ckpt.load_checkpoint(path)

    path = ckpt.save_checkpoint(tmp_path / "t2.json", params)
    blob = ckpt.blob_path(path)
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ValueError, match="bytes"):
        ckpt.load_checkpoint(path)


def test_save_rejects_other_types(tmp_path):
    with pytest.raises(TypeError):
        ckpt.save_checkpoint(tmp_path / "x.json", {"not": "params"})


# ---------------------------------------------------------------------------
# run configuration


def test_defaults_match_documented_values():
    config = rc.RunConfig()
    train = config.train_config()
    assert train.learning_rate == 3e-4
    assert train.weight_decay == 0.05
    assert train.warmup_fraction == 0.05
    assert train.epochs == 2
    assert train.temperature == 2.0
    assert config.engine.max_batched_tokens == 2048
    assert config.workload.output_length == 256
    assert config.swiftkv.exit_threshold == 0.95


def test_default_cutoff_is_half_depth():
    config = rc.RunConfig()
    assert config.swiftkv_config().cutoff == mdl.toy_config().num_layers // 2
    config.model.preset = "llama70b"
    assert config.swiftkv_config().cutoff == 40


def test_full_ini_roundtrip():
    text = """
[model]
preset = llama8b
seed = 11

[swiftkv]
cutoff = 20
group_size = 4
early_exit = true
exit_threshold = 0.8
train_scope = full

[train]
learning_rate = 1e-3
epochs = 3
batch_size = 4

[workload]
arrival = poisson
num_requests = 12
input_length = 2000, 8000
output_length = 128
rate = 0.5
concurrency = none
seed = 5

[hardware]
memory_capacity = 40e9
efficiency = 0.8

[engine]
max_batched_tokens = 1024
attn_context = 4096
quantization = fp8
"""
    config = rc.parse_config(text)
    assert config.model.preset == "llama8b" and config.model.seed == 11
    swift = config.swiftkv_config()
    assert swift.cutoff == 20 and swift.group_size == 4
    assert swift.early_exit and swift.exit_threshold == 0.8
    train = config.train_config()
    assert train.learning_rate == 1e-3 and train.epochs == 3
    assert train.train_scope == "full"
    wl = config.workload_spec()
    assert wl.arrival == "poisson" and wl.rate == 0.5 and wl.concurrency is None
    assert wl.input_length == (2000, 8000)
    hw = config.hardware_model()
    assert hw.memory_capacity == 40e9 and hw.efficiency == 0.8
    eng = config.engine_config(swift)
    assert eng.max_batched_tokens == 1024
    assert eng.attn_context == 4096.0
    assert eng.quantization == "fp8"
    assert eng.model.num_layers == 32


def test_unknown_section_and_key_rejected():
    with pytest.raises(rc.ConfigError, match=r"unknown config section \[colors\]"):
        rc.parse_config("[colors]\nred = 1\n")
    with pytest.raises(rc.ConfigError, match="unknown key 'width'"):
        rc.parse_config("[model]\nwidth = 3\n")
    with pytest.raises(rc.ConfigError, match="bad value"):
        rc.parse_config("[train]\nepochs = three\n")
    with pytest.raises(rc.ConfigError, match="malformed config"):
        rc.parse_config("no section header")
    with pytest.raises(rc.ConfigError, match="unknown model preset"):
        rc.parse_config("[model]\npreset = llامΑ\n").model_config()


def test_bool_and_optional_parsing():
    assert rc.parse_config("[swiftkv]\nearly_exit = off\n").swiftkv.early_exit is False
    assert rc.parse_config("[swiftkv]\nearly_exit = YES\n").swiftkv.early_exit is True
    with pytest.raises(rc.ConfigError, match="boolean"):
        rc.parse_config("[swiftkv]\nearly_exit = maybe\n")
    assert rc.parse_config("[workload]\nrate = none\n").workload.rate is None
    assert rc.parse_config("[engine]\nattn_context = none\n").engine.attn_context is None


def test_load_config_missing_file(tmp_path):
    with pytest.raises(rc.ConfigError, match="cannot read config"):
        rc.load_config(tmp_path / "nope.ini")
    assert rc.load_config(None).model.preset == "toy"


# ---------------------------------------------------------------------------
# CLI workflows (in-process through main)


def run_cli(*args):
    return cli.main([str(a) for a in args])


def test_init_deterministic_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("init", "--seed", 7, "--out", a) == 0
    assert run_cli("init", "--seed", 7, "--out", b) == 0
    assert (a / "teacher.json").read_bytes() == (b / "teacher.json").read_bytes()
    assert (a / "teacher.bin").read_bytes() == (b / "teacher.bin").read_bytes()
    c = tmp_path / "c"
    assert run_cli("init", "--seed", 8, "--out", c) == 0
    assert (a / "teacher.bin").read_bytes() != (c / "teacher.bin").read_bytes()


def test_full_workflow(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli("init", "--seed", 0, "--out", out) == 0
    assert run_cli("transform", "--out", out, "--cutoff", 4, "--early-exit") == 0
    assert run_cli("distill", "--out", out, "--epochs", 1, "--sequences", 8) == 0
    for name in ("student.json", "student_trained.json", "history.csv", "loss.png"):
        assert (out / name).exists()
    history = (out / "history.csv").read_text().splitlines()
    assert history[0] == "step,lr,loss"
    assert len(history) == 2  # 1 epoch x ceil(8/8) batches

    capsys.readouterr()
    assert run_cli(
        "generate", "--out", out, "--checkpoint", out / "student_trained.json",
        "--prompt", "1,2,3", "--length", 6,
    ) == 0
    tokens = capsys.readouterr().out.strip().splitlines()[0].split()
    assert len(tokens) == 6
    record = json.loads((out / "generate.json").read_text())
    assert record["tokens"] == [int(t) for t in tokens]
    assert record["exited"] == [False] * 6


def test_generate_swiftkv_equals_teacher_at_full_depth(tmp_path, capsys):
    out = tmp_path / "run"
    run_cli("init", "--seed", 1, "--out", out)
    run_cli("transform", "--out", out, "--cutoff", 8)  # toy model has 8 layers
    capsys.readouterr()
    assert run_cli("generate", "--out", out, "--mode", "swiftkv",
                   "--prompt", "3,1,4", "--length", 8) == 0
    swift = capsys.readouterr().out.strip().splitlines()[0]
    assert run_cli("generate", "--out", out, "--mode", "teacher",
                   "--prompt", "3,1,4", "--length", 8) == 0
    teacher = capsys.readouterr().out.strip().splitlines()[0]
    assert swift == teacher


def test_generate_exit_stats(tmp_path):
    out = tmp_path / "run"
    run_cli("init", "--out", out)
    run_cli("transform", "--out", out, "--cutoff", 4, "--early-exit")
    assert run_cli("generate", "--out", out, "--exit-stats", "--length", 4,
                   "--num-prompts", 3, "--bins", 5) == 0
    rows = (out / "alignment.csv").read_text().splitlines()
    assert rows[0] == "bin_lo,bin_hi,count,agreement"
    assert len(rows) == 6
    counts = [int(r.split(",")[2]) for r in rows[1:]]
    assert sum(counts) == 3 * 4
    assert (out / "alignment.png").exists()


def test_simscore_outputs(tmp_path):
    out = tmp_path / "run"
    run_cli("init", "--out", out)
    assert run_cli("simscore", "--out", out, "--num-prompts", 2,
                   "--prompt-length", 12) == 0
    rows = (out / "simscore.csv").read_text().splitlines()
    assert rows[0] == "layer,score"
    assert len(rows) == mdl.toy_config().num_layers  # L-1 entries + header
    assert (out / "simscore.png").exists()


def test_flops_table_and_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli("flops", "--preset", "llama70b", "--swiftkv", "0.5",
                   "--out", out) == 0
    printed = capsys.readouterr().out
    rel_cell = printed.splitlines()[3].split()[-1]
    assert abs(float(rel_cell.rstrip("%")) - 51.0) <= 0.5
    rows = (out / "flops.csv").read_text().splitlines()
    assert rows[0] == "config,vocab,kv,qo,mlp,attn,total,rel"
    assert len(rows) == 3  # header + baseline + one variant
    assert (out / "flops.png").exists()


def test_flops_rejects_bad_fraction(tmp_path, capsys):
    assert run_cli("flops", "--swiftkv", "1.5", "--out", tmp_path) == 1
    assert "fraction" in capsys.readouterr().err


def test_simulate_metrics_csv_contract(tmp_path):
    out = tmp_path / "run"
    ini = tmp_path / "cfg.ini"
    ini.write_text(
        "[model]\npreset = llama8b\n"
        "[workload]\nnum_requests = 4\ninput_length = 1000\n"
        "output_length = 8\nconcurrency = 4\n"
    )
    assert run_cli("simulate", "--config", ini, "--out", out,
                   "--mode", "baseline") == 0
    rows = (out / "metrics.csv").read_text().splitlines()
    assert rows[0] == "request_id,arrival_s,ttft_s,tpot_s,in_tokens,out_tokens"
    assert len(rows) == 5
    cells = rows[1].split(",")
    assert cells[0] == "0" and cells[4] == "1000" and cells[5] == "8"
    float(cells[1]), float(cells[2]), float(cells[3])  # parseable floats
    summary = json.loads((out / "summary.json").read_text())
    assert summary["feasible"] is True and summary["completed"] == 4
    assert (out / "latency.png").exists()


def test_simulate_reruns_identical(tmp_path):
    ini = tmp_path / "cfg.ini"
    ini.write_text(
        "[model]\npreset = llama8b\n"
        "[workload]\narrival = poisson\nnum_requests = 6\ninput_length = 1000\n"
        "output_length = 8\nrate = 5.0\nconcurrency = none\n"
    )
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("simulate", "--config", ini, "--out", a) == 0
    assert run_cli("simulate", "--config", ini, "--out", b) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_simulate_sweep_outputs(tmp_path):
    out = tmp_path / "run"
    ini = tmp_path / "cfg.ini"
    ini.write_text(
        "[model]\npreset = llama8b\n"
        "[workload]\nnum_requests = 4\ninput_length = 1000\noutput_length = 8\n"
    )
    assert run_cli("simulate", "--config", ini, "--out", out,
                   "--sweep", "1.0,5.0") == 0
    rows = (out / "sweep.csv").read_text().splitlines()
    assert rows[0] == "engine,rate,mean_ttft_s,mean_tpot_s,throughput_tokens_per_s"
    assert len(rows) == 5  # two engines x two rates
    assert (out / "sweep.png").exists()


def test_memstudy_outputs(tmp_path):
    out = tmp_path / "run"
    ini = tmp_path / "cfg.ini"
    ini.write_text(
        "[model]\npreset = llama8b\n"
        "[workload]\nnum_requests = 4\ninput_length = 2000\noutput_length = 8\n"
        "concurrency = 4\n"
    )
    assert run_cli("memstudy", "--config", ini, "--out", out,
                   "--capacities", "80e9,16e9") == 0
    rows = (out / "memstudy.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 5  # header + 2 capacities x 5 variants
    assert (out / "memstudy.png").exists()


def test_gradcheck_cli(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli("gradcheck", "--out", out, "--coords", 8,
                   "--early-exit") == 0
    assert "gradcheck passed" in capsys.readouterr().out
    payload = json.loads((out / "gradcheck.json").read_text())
    assert payload["passed"] is True
    assert payload["max_rel_error"] <= payload["tolerance"]
    assert len(payload["records"]) == 8


def test_exit_codes_distinct(tmp_path, capsys):
    assert run_cli("explode") == 2
    assert run_cli("init", "--bogus") == 2
    capsys.readouterr()

    bad = tmp_path / "bad.ini"
    bad.write_text("[colors]\nred = 1\n")
    assert run_cli("flops", "--config", bad, "--out", tmp_path) == 3
    assert "config error" in capsys.readouterr().err

    assert run_cli("generate", "--checkpoint", tmp_path / "nope.json",
                   "--prompt", "1", "--out", tmp_path) == 4
    assert "checkpoint error" in capsys.readouterr().err

    run_cli("init", "--out", tmp_path)
    assert run_cli("transform", "--out", tmp_path, "--cutoff", 99) == 1
    assert "error" in capsys.readouterr().err


def test_transform_rejects_student_checkpoint(tmp_path, capsys):
    out = tmp_path / "run"
    run_cli("init", "--out", out)
    run_cli("transform", "--out", out, "--cutoff", 4)
    assert run_cli("transform", "--out", out,
                   "--teacher", out / "student.json") == 4
    assert "expected a teacher" in capsys.readouterr().err


def test_generate_requires_prompt(tmp_path, capsys):
    out = tmp_path / "run"
    run_cli("init", "--out", out)
    run_cli("transform", "--out", out, "--cutoff", 4)
    assert run_cli("generate", "--out", out) == 1
    assert "--prompt" in capsys.readouterr().err
