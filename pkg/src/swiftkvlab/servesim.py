"""Discrete-event simulation of a chunked-prefill serving engine.

Each iteration first admits one decode token per running sequence, then
fills the remaining token budget with prefill chunks in FIFO order.
Iteration latency follows a roofline: max of compute time (analytic flops
over derated peak compute) and memory time (parameter bytes plus the KV
bytes the decode tokens read, over derated bandwidth), plus a fixed
overhead.  Requests are admitted all-or-nothing: the full KV footprint of
input+output tokens is reserved up front, and a request that could never
fit is reported as rejected rather than silently dropped.

Per-token flop rates are fixed per engine at a configurable attention
context (defaulting to the workload's mean input length) so that closed
forms stay checkable; per-iteration KV bytes use each sequence's actual
context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import analysis as an
from . import kvcache as kvc
from . import model as mdl
from .swiftkv import SwiftKVConfig


@dataclass(frozen=True)
class HardwareModel:
    peak_compute: float  # flops/second
    peak_bandwidth: float  # bytes/second
    memory_capacity: float  # bytes
    overhead_s: float = 0.0
    efficiency: float = 0.5

    def __post_init__(self) -> None:
        if min(self.peak_compute, self.peak_bandwidth, self.memory_capacity) <= 0:
            raise ValueError("peaks and capacity must be positive")
        if self.overhead_s < 0:
            raise ValueError("overhead_s must be >= 0")
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError("efficiency must be in (0, 1]")


def h100_like() -> HardwareModel:
    """Default accelerator stand-in: ~1e15 flops/s, 3.35e12 bytes/s, 80 GB."""
    return HardwareModel(
        peak_compute=989e12, peak_bandwidth=3.35e12,
        memory_capacity=80e9, overhead_s=1e-3,
    )


@dataclass(frozen=True)
class WorkloadSpec:
    arrival: str  # "poisson" or "closed"
    num_requests: int
    input_length: int | tuple[int, ...]
    output_length: int = 256
    rate: float | None = None  # requests/second, poisson only
    concurrency: int | None = None  # closed-loop only
    seed: int = 0

    def __post_init__(self) -> None:
        if self.arrival not in ("poisson", "closed"):
            raise ValueError(f"unknown arrival process {self.arrival!r}")
        if self.num_requests < 0:
            raise ValueError("num_requests must be >= 0")
        if self.output_length < 1:
            raise ValueError("output_length must be >= 1")
        lengths = (
            (self.input_length,) if np.isscalar(self.input_length) else tuple(self.input_length)
        )
        if not lengths or min(lengths) < 1:
            raise ValueError("input lengths must be >= 1")
        if self.arrival == "poisson" and (self.rate is None or self.rate <= 0):
            raise ValueError("poisson arrivals need a positive rate")
        if self.arrival == "closed" and (self.concurrency is None or self.concurrency < 1):
            raise ValueError("closed-loop arrivals need concurrency >= 1")

    def input_lengths(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        if np.isscalar(self.input_length):
            return np.full(self.num_requests, int(self.input_length), dtype=np.int64)
        choices = np.asarray(self.input_length, dtype=np.int64)
        return rng.choice(choices, size=self.num_requests)

    def arrival_times(self) -> np.ndarray:
        """Poisson arrivals as a seeded cumulative-exponential clock; closed
        loops spawn at completion time so every slot starts at zero."""
        if self.arrival == "closed":
            return np.zeros(self.num_requests)
        rng = np.random.default_rng(self.seed + 1)
        gaps = rng.exponential(1.0 / self.rate, size=self.num_requests)
        return np.cumsum(gaps)

    def mean_input_length(self) -> float:
        if self.num_requests == 0:
            return float(np.mean(np.atleast_1d(self.input_length)))
        return float(self.input_lengths().mean())


@dataclass
class EngineConfig:
    model: mdl.ModelConfig
    swiftkv: SwiftKVConfig | None = None
    max_batched_tokens: int = 2048
    attn_context: float | None = None  # None -> workload mean input length
    causal_factor: float = 0.5
    quantization: str = "none"
    accounting: str = "normal"
    kv_bytes_per_element: int = 2
    param_bytes_per_element: int = 2

    def __post_init__(self) -> None:
        if self.max_batched_tokens < 1:
            raise ValueError("max_batched_tokens must be >= 1")

    def cache_config(self) -> kvc.CacheConfig:
        if self.swiftkv is None:
            group_map = kvc.GroupMap.identity(self.model.num_layers)
        else:
            group_map = kvc.GroupMap(
                num_layers=self.model.num_layers,
                cutoff=self.swiftkv.cutoff,
                group_size=self.swiftkv.group_size,
            )
        return kvc.CacheConfig(
            group_map=group_map, d_kv=self.model.d_kv,
            quantization=self.quantization, accounting=self.accounting,
            bytes_per_element=self.kv_bytes_per_element,
        )

    def param_bytes(self) -> int:
        return an.param_count(self.model) * self.param_bytes_per_element


@dataclass
class RequestMetrics:
    request_id: int
    arrival_s: float
    ttft_s: float
    tpot_s: float
    in_tokens: int
    out_tokens: int


@dataclass
class SimMetrics:
    feasible: bool
    requests: list[RequestMetrics] = field(default_factory=list)
    rejected: list[int] = field(default_factory=list)
    makespan_s: float = 0.0
    throughput_tokens_per_s: float = 0.0
    queue_depth: list[tuple[float, int]] = field(default_factory=list)
    memory_high_water_bytes: float = 0.0

    @property
    def mean_ttft_s(self) -> float:
        if not self.requests:
            return float("nan")
        return float(np.mean([r.ttft_s for r in self.requests]))

    @property
    def mean_tpot_s(self) -> float:
        if not self.requests:
            return float("nan")
        return float(np.mean([r.tpot_s for r in self.requests]))


@dataclass
class _Running:
    request_id: int
    arrival: float
    in_tokens: int
    out_tokens: int
    remaining_prefill: int
    generated: int = 0
    first_token_s: float | None = None


def run_sim(
    workload: WorkloadSpec, engine: EngineConfig, hardware: HardwareModel
) -> SimMetrics:
    """Simulate one engine over one workload; deterministic for a seed."""
    param_bytes = engine.param_bytes()
    if param_bytes > hardware.memory_capacity:
        return SimMetrics(feasible=False, rejected=list(range(workload.num_requests)))

    kv_budget = hardware.memory_capacity - param_bytes
    cache_cfg = engine.cache_config()
    kv_per_token = kvc.memory_bytes(cache_cfg, 1)
    ctx = engine.attn_context
    if ctx is None:
        ctx = max(1.0, workload.mean_input_length())
    f_prefill = an.flops_prefill_token(
        engine.model, engine.swiftkv, ctx, engine.causal_factor
    ).total - an.gather_flops(engine.model)
    f_decode = an.flops_decode_token(engine.model, engine.swiftkv, ctx)
    compute_rate = hardware.peak_compute * hardware.efficiency
    byte_rate = hardware.peak_bandwidth * hardware.efficiency

    in_lengths = workload.input_lengths()
    arrivals = workload.arrival_times()
    out_len = workload.output_length

    metrics = SimMetrics(feasible=True)
    # (arrival time, id) not yet visible to the scheduler
    future = list(range(workload.num_requests))
    closed = workload.arrival == "closed"
    window = workload.concurrency if closed else workload.num_requests
    pending: list[int] = []
    running: list[_Running] = []
    reserved = 0.0
    now = 0.0
    spawned = 0
    total_tokens = 0

    def spawn(rid: int, at: float) -> None:
        nonlocal spawned
        arrivals[rid] = at
        need = (int(in_lengths[rid]) + out_len) * kv_per_token
        if need > kv_budget:
            metrics.rejected.append(rid)
        else:
            pending.append(rid)
        spawned += 1

    if closed:
        while future and spawned < window:
            spawn(future.pop(0), 0.0)

    while pending or running or future:
        if not closed:
            while future and arrivals[future[0]] <= now:
                rid = future.pop(0)
                spawn(rid, arrivals[rid])
        # head-of-line admission: reserve the whole footprint or wait
        while pending:
            rid = pending[0]
            need = (int(in_lengths[rid]) + out_len) * kv_per_token
            if reserved + need > kv_budget:
                break
            reserved += need
            pending.pop(0)
            running.append(
                _Running(
                    request_id=rid, arrival=arrivals[rid],
                    in_tokens=int(in_lengths[rid]), out_tokens=out_len,
                    remaining_prefill=int(in_lengths[rid]),
                )
            )
        metrics.memory_high_water_bytes = max(
            metrics.memory_high_water_bytes, param_bytes + reserved
        )
        if not running:
            if not closed and future:
                now = max(now, arrivals[future[0]])
                continue
            break  # nothing can ever run again

        budget = engine.max_batched_tokens
        decoding = [r for r in running if r.remaining_prefill == 0][:budget]
        budget -= len(decoding)
        prefill_tokens = 0
        prefilled: list[tuple[_Running, int]] = []
        for r in running:
            if budget == 0:
                break
            if r.remaining_prefill > 0:
                chunk = min(r.remaining_prefill, budget)
                prefilled.append((r, chunk))
                prefill_tokens += chunk
                budget -= chunk

        flops = len(decoding) * f_decode + prefill_tokens * f_prefill
        bytes_read = param_bytes + sum(
            (r.in_tokens + r.generated) * kv_per_token for r in decoding
        )
        now += max(flops / compute_rate, bytes_read / byte_rate) + hardware.overhead_s
        metrics.queue_depth.append((now, len(pending)))

        for r, chunk in prefilled:
            r.remaining_prefill -= chunk
            if r.remaining_prefill == 0:
                # the final prefill chunk emits the first output token
                r.first_token_s = now
                r.generated = 1
        finished = []
        for r in decoding:
            r.generated += 1
        for r in running:
            if r.generated >= r.out_tokens:
                finished.append(r)
        for r in finished:
            running.remove(r)
            reserved -= (r.in_tokens + r.out_tokens) * kv_per_token
            tpot = 0.0
            if r.out_tokens > 1:
                tpot = (now - r.first_token_s) / (r.out_tokens - 1)
            metrics.requests.append(
                RequestMetrics(
                    request_id=r.request_id, arrival_s=float(r.arrival),
                    ttft_s=float(r.first_token_s - r.arrival), tpot_s=float(tpot),
                    in_tokens=r.in_tokens, out_tokens=r.out_tokens,
                )
            )
            total_tokens += r.in_tokens + r.out_tokens
            if closed and future:
                spawn(future.pop(0), now)

    metrics.makespan_s = now
    if total_tokens and now > 0:
        metrics.throughput_tokens_per_s = total_tokens / now
    metrics.requests.sort(key=lambda r: r.request_id)
    return metrics


def sweep_arrival(
    workload: WorkloadSpec,
    rates: list[float],
    engine: EngineConfig,
    hardware: HardwareModel,
) -> list[tuple[float, SimMetrics]]:
    """Re-run the same poisson workload at each arrival rate."""
    out = []
    for rate in rates:
        spec = replace(workload, arrival="poisson", rate=rate, concurrency=None)
        out.append((rate, run_sim(spec, engine, hardware)))
    return out


def zero_load_ttft(
    workload: WorkloadSpec, engine: EngineConfig, hardware: HardwareModel
) -> float:
    """TTFT of one request on an idle engine (the knee reference point)."""
    solo = replace(
        workload, arrival="closed", num_requests=1, concurrency=1, rate=None
    )
    metrics = run_sim(solo, engine, hardware)
    if not metrics.requests:
        return float("nan")
    return metrics.requests[0].ttft_s


def find_knee(
    sweep: list[tuple[float, SimMetrics]], reference_ttft: float, factor: float = 10.0
) -> float:
    """First swept rate whose mean TTFT blows past factor x the idle TTFT;
    infinity when the engine stays under it everywhere."""
    for rate, metrics in sweep:
        if metrics.mean_ttft_s > factor * reference_ttft:
            return rate
    return float("inf")


MEMORY_STUDY_VARIANTS = (
    "baseline",
    "merge_all_layers",
    "swiftkv_50",
    "swiftkv_50_acrosskv_4",
    "swiftkv_50_acrosskv_4_fp8",
)


def _variant_engine(name: str, engine: EngineConfig) -> EngineConfig:
    half = engine.model.num_layers // 2
    table = {
        "baseline": dict(swiftkv=None),
        "merge_all_layers": dict(swiftkv=None, accounting="merge_all_layers"),
        "swiftkv_50": dict(swiftkv=SwiftKVConfig(cutoff=half)),
        "swiftkv_50_acrosskv_4": dict(swiftkv=SwiftKVConfig(cutoff=half, group_size=4)),
        "swiftkv_50_acrosskv_4_fp8": dict(
            swiftkv=SwiftKVConfig(cutoff=half, group_size=4), quantization="fp8"
        ),
    }
    if name not in table:
        raise ValueError(f"unknown memory-study variant {name!r}")
    return replace(engine, **table[name])


@dataclass
class MemoryStudyRow:
    capacity_bytes: float
    variant: str
    feasible: bool
    throughput_tokens_per_s: float
    kv_bytes_per_token: int
    rejected: int


def memory_study(
    engine: EngineConfig,
    capacities: list[float],
    workload: WorkloadSpec,
    hardware: HardwareModel,
) -> list[MemoryStudyRow]:
    """Throughput of every cache variant under each memory cap."""
    rows = []
    for capacity in capacities:
        hw = replace(hardware, memory_capacity=capacity)
        for name in MEMORY_STUDY_VARIANTS:
            variant = _variant_engine(name, engine)
            metrics = run_sim(workload, variant, hw)
            rows.append(
                MemoryStudyRow(
                    capacity_bytes=capacity, variant=name,
                    feasible=metrics.feasible,
                    throughput_tokens_per_s=metrics.throughput_tokens_per_s,
                    kv_bytes_per_token=kvc.memory_bytes(variant.cache_config(), 1),
                    rejected=len(metrics.rejected),
                )
            )
    return rows
