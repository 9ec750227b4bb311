"""Checkpoints: a JSON manifest next to a little-endian binary blob.

The manifest records every tensor's name, shape, precision, and byte
offset, plus the serialized model (and student) configs needed to rebuild
the object.  The blob is the tensors' raw IEEE-754 bytes, little-endian,
concatenated in manifest order.  Both files are written deterministically
so identical parameters produce byte-identical checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import model as mdl
from . import numerics as nm
from . import swiftkv as sk
from .kvcache import GroupMap

FORMAT_NAME = "swiftkvlab-checkpoint"
FORMAT_VERSION = 1

TEACHER_LAYER_KINDS = (
    "attn_norm", "w_q", "w_k", "w_v", "w_o",
    "mlp_norm", "w_gate", "w_up", "w_down",
)

_PRECISION_CODES = {"double": "<f8", "single": "<f4"}


def blob_path(manifest_path: str | Path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def _entries(params: mdl.Parameters | sk.StudentParameters):
    """Deterministic (name, array) stream covering every tensor."""
    if isinstance(params, mdl.Parameters):
        base, prefix = params, ""
    else:
        base, prefix = params.base, "base."
    yield prefix + "token_embedding", base.token_embedding
    for i, layer in enumerate(base.layers):
        for kind in TEACHER_LAYER_KINDS:
            yield f"{prefix}layers.{i}.{kind}", getattr(layer, kind)
    yield prefix + "final_norm", base.final_norm
    yield prefix + "lm_head", base.lm_head
    if isinstance(params, sk.StudentParameters):
        yield from params.trainable_tensors().items()


def save_checkpoint(
    manifest_path: str | Path, params: mdl.Parameters | sk.StudentParameters
) -> Path:
    """Write manifest + blob; returns the manifest path."""
    manifest_path = Path(manifest_path)
    if isinstance(params, sk.StudentParameters):
        kind = "student"
        model_config = params.base.config
        swiftkv_config = asdict(params.config)
        train_scope = "full" if params.extras is not None else "wqkv"
    elif isinstance(params, mdl.Parameters):
        kind = "teacher"
        model_config = params.config
        swiftkv_config = None
        train_scope = None
    else:
        raise TypeError(f"cannot checkpoint {type(params).__name__}")

    code = _PRECISION_CODES[model_config.precision]
    tensors = []
    chunks = []
    offset = 0
    for name, array in _entries(params):
        raw = np.ascontiguousarray(array, dtype=code).tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(array.shape),
                "precision": model_config.precision,
                "offset": offset,
            }
        )
        chunks.append(raw)
        offset += len(raw)

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": kind,
        "model_config": asdict(model_config),
        "swiftkv_config": swiftkv_config,
        "train_scope": train_scope,
        "blob_bytes": offset,
        "tensors": tensors,
    }
    manifest_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    blob_path(manifest_path).write_bytes(b"".join(chunks))
    return manifest_path


def _read_manifest(manifest_path: Path) -> dict:
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValueError(f"unreadable checkpoint {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(
            f"unreadable checkpoint {manifest_path}: malformed manifest ({exc})"
        ) from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise ValueError(f"unreadable checkpoint {manifest_path}: not a {FORMAT_NAME}")
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(
            f"unreadable checkpoint {manifest_path}: "
            f"unsupported version {manifest.get('version')!r}"
        )
    return manifest


def load_checkpoint(
    manifest_path: str | Path,
) -> mdl.Parameters | sk.StudentParameters:
    manifest_path = Path(manifest_path)
    manifest = _read_manifest(manifest_path)
    config = mdl.ModelConfig(**manifest["model_config"])
    code = _PRECISION_CODES[config.precision]
    try:
        blob = blob_path(manifest_path).read_bytes()
    except OSError as exc:
        raise ValueError(f"unreadable checkpoint {manifest_path}: {exc}") from exc
    if len(blob) != manifest["blob_bytes"]:
        raise ValueError(
            f"unreadable checkpoint {manifest_path}: blob is {len(blob)} bytes, "
            f"manifest promises {manifest['blob_bytes']}"
        )

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        flat = np.frombuffer(blob, dtype=code, count=count, offset=start)
        arrays[entry["name"]] = flat.reshape(shape).astype(
            nm.dtype_of(config.precision), copy=True
        )

    prefix = "base." if manifest["kind"] == "student" else ""
    base = _teacher_from(arrays, config, prefix)
    if manifest["kind"] == "teacher":
        return base
    if manifest["kind"] != "student":
        raise ValueError(
            f"unreadable checkpoint {manifest_path}: unknown kind {manifest['kind']!r}"
        )
    return _student_from(arrays, base, manifest)


def _take(arrays: dict[str, np.ndarray], name: str) -> np.ndarray:
    try:
        return arrays[name]
    except KeyError:
        raise ValueError(f"unreadable checkpoint: missing tensor {name!r}") from None


def _teacher_from(
    arrays: dict[str, np.ndarray], config: mdl.ModelConfig, prefix: str
) -> mdl.Parameters:
    layers = [
        mdl.LayerParams(
            **{
                kind: _take(arrays, f"{prefix}layers.{i}.{kind}")
                for kind in TEACHER_LAYER_KINDS
            }
        )
        for i in range(config.num_layers)
    ]
    return mdl.Parameters(
        config=config,
        token_embedding=_take(arrays, prefix + "token_embedding"),
        layers=layers,
        final_norm=_take(arrays, prefix + "final_norm"),
        lm_head=_take(arrays, prefix + "lm_head"),
    )


def _student_from(
    arrays: dict[str, np.ndarray], base: mdl.Parameters, manifest: dict
) -> sk.StudentParameters:
    swift = sk.SwiftKVConfig(**manifest["swiftkv_config"])
    gm = GroupMap(
        num_layers=base.config.num_layers,
        cutoff=swift.cutoff,
        group_size=swift.group_size,
    )
    new_wq: dict[int, np.ndarray] = {}
    new_wk: dict[int, np.ndarray] = {}
    new_wv: dict[int, np.ndarray] = {}
    extras: dict[tuple[str, int], np.ndarray] = {}
    exit_head = None
    for name, array in arrays.items():
        if name.startswith("base."):
            continue
        if name == "exit_head":
            exit_head = array
            continue
        _, j, kind = name.split(".")
        if kind == "new_wq":
            new_wq[int(j)] = array
        elif kind == "new_wk":
            new_wk[int(j)] = array
        elif kind == "new_wv":
            new_wv[int(j)] = array
        elif kind in sk.FULL_SCOPE_KINDS:
            extras[(kind, int(j))] = array
        else:
            raise ValueError(f"unreadable checkpoint: unexpected tensor {name!r}")
    return sk.StudentParameters(
        base=base,
        config=swift,
        group_map=gm,
        new_wq=new_wq,
        new_wk=new_wk,
        new_wv=new_wv,
        exit_head=exit_head,
        extras=extras if manifest["train_scope"] == "full" else None,
    )
