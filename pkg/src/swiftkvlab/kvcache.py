"""Grouped key/value caches with optional FP8 payloads.

A cache holds one K/V store per *group* rather than per layer.  Layers below
the cutoff each own a private group; layers at or beyond the cutoff share a
group with their leader in blocks of ``group_size`` consecutive layers, the
last block possibly ragged.  Positions are dense per group: appends land at
the current length, reads cover a prefix.

FP8 payloads keep one byte per element plus one float32 scale per
(position, group, K-or-V) vector; the accounting helpers below mirror that
exactly.  ``bytes_per_element`` on the config is the *accounting* element
size used for capacity modeling (2 mirrors 16-bit production elements), not
the in-memory dtype of the toy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm


@dataclass(frozen=True)
class GroupMap:
    """Assignment of layers to cache groups.

    Layers 0..cutoff-1 keep private caches.  Layers cutoff..num_layers-1 are
    partitioned into consecutive runs of group_size; the first layer of each
    run is the leader and owns the shared store.
    """

    num_layers: int
    cutoff: int
    group_size: int = 1

    def __post_init__(self) -> None:
        if not 1 <= self.cutoff <= self.num_layers:
            raise ValueError(
                f"cutoff must be in [1, {self.num_layers}], got {self.cutoff}"
            )
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")

    @classmethod
    def identity(cls, num_layers: int) -> "GroupMap":
        return cls(num_layers=num_layers, cutoff=num_layers, group_size=1)

    def leader(self, layer: int) -> int:
        """Layer whose projections feed the group that `layer` reads."""
        self._check_layer(layer)
        if layer < self.cutoff:
            return layer
        return self.cutoff + self.group_size * ((layer - self.cutoff) // self.group_size)

    def group_index(self, layer: int) -> int:
        self._check_layer(layer)
        if layer < self.cutoff:
            return layer
        return self.cutoff + (layer - self.cutoff) // self.group_size

    @property
    def num_groups(self) -> int:
        shared = math.ceil((self.num_layers - self.cutoff) / self.group_size)
        return self.cutoff + shared

    def shared_leaders(self) -> list[int]:
        """Leader layers of the shared groups beyond the cutoff, in order."""
        return list(range(self.cutoff, self.num_layers, self.group_size))

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer < self.num_layers:
            raise ValueError(f"layer {layer} outside [0, {self.num_layers})")


@dataclass(frozen=True)
class CacheConfig:
    group_map: GroupMap
    d_kv: int
    precision: str = "double"
    quantization: str = "none"  # "none" or "fp8"
    accounting: str = "normal"  # "normal" or "merge_all_layers"
    bytes_per_element: int = 2

    def __post_init__(self) -> None:
        if self.quantization not in ("none", "fp8"):
            raise ValueError(f"unknown quantization {self.quantization!r}")
        if self.accounting not in ("normal", "merge_all_layers"):
            raise ValueError(f"unknown accounting {self.accounting!r}")
        if self.d_kv < 1 or self.bytes_per_element < 1:
            raise ValueError("d_kv and bytes_per_element must be positive")


@dataclass
class _GroupStore:
    k_rows: list = field(default_factory=list)
    v_rows: list = field(default_factory=list)
    k_scales: list = field(default_factory=list)
    v_scales: list = field(default_factory=list)


class KVCache:
    """Per-group append-only K/V stores."""

    def __init__(self, config: CacheConfig) -> None:
        self.config = config
        self._groups = [_GroupStore() for _ in range(config.group_map.num_groups)]

    def group_for_layer(self, layer: int) -> int:
        return self.config.group_map.group_index(layer)

    def length(self, group: int) -> int:
        return len(self._store(group).k_rows)

    def expect_length(self, position: int) -> None:
        """Reject decode positions that would leave gaps or overwrite rows."""
        lengths = {len(g.k_rows) for g in self._groups}
        if lengths != {position}:
            raise ValueError(
                f"cache position mismatch: expected all groups at {position}, "
                f"found lengths {sorted(lengths)}"
            )

    def append(self, group: int, k_vec: np.ndarray, v_vec: np.ndarray) -> None:
        store = self._store(group)
        k = np.asarray(k_vec).ravel()
        v = np.asarray(v_vec).ravel()
        if k.shape[0] != self.config.d_kv or v.shape[0] != self.config.d_kv:
            raise ValueError(
                f"expected d_kv={self.config.d_kv} vectors, got {k.shape} / {v.shape}"
            )
        if self.config.quantization == "fp8":
            k_codes, k_scale = nm.quantize_fp8_token(k)
            v_codes, v_scale = nm.quantize_fp8_token(v)
            store.k_rows.append(k_codes)
            store.v_rows.append(v_codes)
            store.k_scales.append(k_scale)
            store.v_scales.append(v_scale)
        else:
            dtype = nm.dtype_of(self.config.precision)
            store.k_rows.append(k.astype(dtype))
            store.v_rows.append(v.astype(dtype))

    def read_block(self, group: int, up_to: int) -> tuple[np.ndarray, np.ndarray]:
        """Dense rows [0, up_to) of the group's K and V, dequantized if needed."""
        store = self._store(group)
        if not 0 <= up_to <= len(store.k_rows):
            raise ValueError(
                f"read of {up_to} rows from group {group} holding {len(store.k_rows)}"
            )
        dtype = nm.dtype_of(self.config.precision)
        if self.config.quantization == "fp8":
            k = np.stack(
                [
                    nm.dequantize_fp8_token(store.k_rows[i], store.k_scales[i])
                    for i in range(up_to)
                ]
            ) if up_to else np.zeros((0, self.config.d_kv))
            v = np.stack(
                [
                    nm.dequantize_fp8_token(store.v_rows[i], store.v_scales[i])
                    for i in range(up_to)
                ]
            ) if up_to else np.zeros((0, self.config.d_kv))
            return k.astype(dtype), v.astype(dtype)
        if up_to == 0:
            empty = np.zeros((0, self.config.d_kv), dtype=dtype)
            return empty, empty.copy()
        return np.stack(store.k_rows[:up_to]), np.stack(store.v_rows[:up_to])

    def payload_bytes(self) -> int:
        """Bytes actually held by the stores, scales included for FP8."""
        total = 0
        for store in self._groups:
            for rows, scales in ((store.k_rows, store.k_scales), (store.v_rows, store.v_scales)):
                for row in rows:
                    total += row.nbytes
                for scale in scales:
                    total += np.dtype(np.float32).itemsize if scale is not None else 0
        return total

    def clone(self) -> "KVCache":
        """Deep copy; mutating either cache never touches the other."""
        twin = KVCache(self.config)
        for src, dst in zip(self._groups, twin._groups):
            dst.k_rows = [row.copy() for row in src.k_rows]
            dst.v_rows = [row.copy() for row in src.v_rows]
            dst.k_scales = list(src.k_scales)
            dst.v_scales = list(src.v_scales)
        return twin

    def _store(self, group: int) -> _GroupStore:
        if not 0 <= group < len(self._groups):
            raise ValueError(f"group {group} does not exist (have {len(self._groups)})")
        return self._groups[group]


def memory_bytes(cache_config: CacheConfig, tokens: int) -> int:
    """Accounting bytes for `tokens` cached positions under the config.

    Normal accounting charges every group; merge_all_layers charges a single
    group (compute is unchanged, only the bytes collapse).  FP8 charges one
    byte per element plus a 4-byte scale per K-or-V vector.
    """
    if tokens < 0:
        raise ValueError(f"negative token count {tokens}")
    groups = 1 if cache_config.accounting == "merge_all_layers" else cache_config.group_map.num_groups
    if cache_config.quantization == "fp8":
        per_vector = cache_config.d_kv + 4
    else:
        per_vector = cache_config.d_kv * cache_config.bytes_per_element
    return tokens * groups * 2 * per_vector


def with_quantization(config: CacheConfig, quantization: str) -> CacheConfig:
    return replace(config, quantization=quantization)
