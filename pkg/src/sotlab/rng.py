"""Deterministic random streams.

Every sampling entry point takes an explicit u64 seed and derives a Philox
(counter-based) generator from (seed, stream id).  Distinct subsystems use
distinct stream ids so they never share a stream, and results are independent
of thread scheduling because draws happen in fixed array layouts.
"""
from __future__ import annotations

import numpy as np

_U64 = (1 << 64) - 1

# stream ids, one per subsystem
STREAM_MEASURES = 0x01
STREAM_PATHS = 0x02
STREAM_YZ = 0x03
STREAM_X0 = 0x04
STREAM_PROBES = 0x05
STREAM_INIT = 0x06


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator keyed by (seed, stream)."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & _U64, int(stream) & _U64]))


def child_seed(seed: int, index: int) -> int:
    """Stable per-task seed for sweeps; distinct indices give distinct Philox keys."""
    return (int(seed) + 0x9E3779B97F4A7C15 * (int(index) + 1)) & _U64
