"""In-process simulation of the statistics all-reduce across K workers.

Each worker reduces its shard of a layer's gradient to three sufficient
statistics (count, sum of g^2, sum of |g|). The sums are accumulated as
exact fixed-point integers scaled by ``2**-FIXED_POINT_SHIFT``, so any
partition of the gradient across workers reduces to the same integers and
therefore to bit-identical LayerStats and policies.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .policy import BitPolicy
from .stats import DEFAULT_EPSILON, LayerStats

# Every finite float64 is an integer multiple of 2**-1126 once its 53-bit
# significand is taken as an integer (frexp exponent >= -1073).
FIXED_POINT_SHIFT = 1126
_HALF = 26
_HALF_MASK = (1 << _HALF) - 1


def exact_sum(x: np.ndarray) -> int:
    """Exact sum of nonnegative finite floats, as an integer multiple of
    ``2**-FIXED_POINT_SHIFT``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        return 0
    mant, exp = np.frexp(x)
    sig = (mant * 2.0**53).astype(np.int64)
    shift = exp.astype(np.int64) - 53 + FIXED_POINT_SHIFT
    order = np.argsort(shift, kind="stable")
    sig, shift = sig[order], shift[order]
    starts = np.flatnonzero(np.r_[True, shift[1:] != shift[:-1]])
    # Split significands so int64 group sums cannot overflow.
    hi = np.add.reduceat(sig >> _HALF, starts)
    lo = np.add.reduceat(sig & _HALF_MASK, starts)
    total = 0
    for h, l, s in zip(hi.tolist(), lo.tolist(), shift[starts].tolist()):
        total += ((h << _HALF) + l) << s
    return total


def _to_float(num: int, den: int) -> float:
    # int / int is correctly rounded in Python
    return num / den


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("STQUANT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class MomentEntry:
    """Sufficient statistics of one layer shard; constant size in N_l."""

    layer_id: int
    count: int
    sum_sq: int
    sum_abs: int

    def as_floats(self) -> tuple[int, float, float]:
        d = 1 << FIXED_POINT_SHIFT
        return self.count, _to_float(self.sum_sq, d), _to_float(self.sum_abs, d)


@dataclass
class WorkerShard:
    worker_id: int
    entries: list[MomentEntry] = field(default_factory=list)
    element_visits: int = 0


AUX_SCALARS_PER_LAYER = len([f for f in fields(MomentEntry) if f.name != "layer_id"])


def local_moments(gradient_shard, layer_id: int) -> MomentEntry:
    g = np.asarray(gradient_shard, dtype=np.float64).ravel()
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient")
    with np.errstate(over="ignore"):
        sq = g * g
    if not np.all(np.isfinite(sq)):
        raise ValueError("gradient square overflows float64")
    return MomentEntry(layer_id, int(g.size), exact_sum(sq), exact_sum(np.abs(g)))


def shard_gradient(gradient, k: int) -> list[np.ndarray]:
    """Contiguous split of a flattened gradient into ``k`` near-equal shards."""
    if k < 1:
        raise ValueError("K must be >= 1")
    return np.array_split(np.asarray(gradient, dtype=np.float64).ravel(), k)


def worker_shard(worker_id: int, layer_shards: Sequence[np.ndarray]) -> WorkerShard:
    """Compute one worker's moment entries for every layer it holds."""
    shard = WorkerShard(worker_id)
    for layer_id, g in enumerate(layer_shards):
        entry = local_moments(g, layer_id)
        shard.entries.append(entry)
        shard.element_visits += entry.count
    return shard


def _merge(a: dict[int, MomentEntry], b: dict[int, MomentEntry]) -> dict[int, MomentEntry]:
    out = dict(a)
    for lid, e in b.items():
        if lid in out:
            o = out[lid]
            out[lid] = MomentEntry(lid, o.count + e.count, o.sum_sq + e.sum_sq, o.sum_abs + e.sum_abs)
        else:
            out[lid] = e
    return out


def all_reduce_stats(
    shards: Sequence[WorkerShard], k: int | None = None, epsilon: float = DEFAULT_EPSILON
) -> list[LayerStats]:
    if k is not None and len(shards) != k:
        raise ValueError(f"expected {k} worker shards, got {len(shards)}")
    ids = [s.worker_id for s in shards]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate worker_id")
    level = [{e.layer_id: e for e in s.entries} for s in sorted(shards, key=lambda s: s.worker_id)]
    # pairwise tree keyed by worker_id order
    while len(level) > 1:
        nxt = [_merge(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    merged = level[0] if level else {}
    out = []
    for lid in sorted(merged):
        e = merged[lid]
        if e.count == 0:
            raise ValueError(f"layer {lid} has no elements")
        out.append(_finalize(e, epsilon))
    return out


def _finalize(e: MomentEntry, epsilon: float) -> LayerStats:
    d = 1 << FIXED_POINT_SHIFT
    n_el = e.count
    v = _to_float(e.sum_sq, n_el * d)
    mean_abs = _to_float(e.sum_abs, n_el * d)
    # E[g^2] - E[|g|]^2 formed exactly in integers before the single rounding
    var_num = n_el * e.sum_sq * d - e.sum_abs * e.sum_abs
    var = _to_float(max(var_num, 0), n_el * n_el * d * d)
    return LayerStats(layer_id=e.layer_id, n=float(np.sqrt(v)), r=float(np.sqrt(var)) / (mean_abs + epsilon), v=v)


def distributed_layer_stats(
    gradients: Sequence[np.ndarray], k: int, epsilon: float = DEFAULT_EPSILON
) -> tuple[list[LayerStats], list[WorkerShard]]:
    """Shard every layer across ``k`` workers, reduce, and return the stats
    together with the worker shards (for accounting)."""
    per_layer = [shard_gradient(g, k) for g in gradients]
    per_worker = [[layer[w] for layer in per_layer] for w in range(k)]
    threads = min(k, thread_cap())
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            shards = list(pool.map(worker_shard, range(k), per_worker))
    else:
        shards = [worker_shard(w, per_worker[w]) for w in range(k)]
    return all_reduce_stats(shards, k, epsilon), shards


def broadcast_policy(policy: BitPolicy, k: int) -> list[BitPolicy]:
    """Give each of ``k`` workers its own decoded copy of the policy."""
    if k < 1:
        raise ValueError("K must be >= 1")
    wire = policy.to_bytes()
    return [BitPolicy.from_bytes(wire) for _ in range(k)]
