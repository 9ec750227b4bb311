"""Desk-scale laboratory for prefill-skipping transformers.

Subpackages cover the dense kernels, the baseline decoder model, the
SwiftKV/AcrossKV rewiring, grouped KV caches with optional FP8 payloads,
distillation-based knowledge recovery, flop/similarity analysis, and a
roofline serving simulator, all wired together by the `swiftkvlab` CLI.
"""

__version__ = "0.1.0"
