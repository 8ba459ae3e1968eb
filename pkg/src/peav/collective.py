"""Simulated data-parallel all-gather for multi-pair sigmoid losses.

Two strategies compute the same global loss. ``gather_naive`` issues two
gathers per loss pair; ``gather_packed`` stacks the left (and right) streams of
every pair along the batch axis so the whole step needs two gathers.
Collectives are in-process concatenations in fixed shard order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, DimensionError, ParameterError
from .numeric import as_tensor
from .objective import PairRegistry, sigmoid_pair_loss


@dataclass
class ShardedBatch:
    shards: list  # one {stream tag: (b_w, C_h) array} per shard

    def __post_init__(self):
        if not self.shards:
            raise ParameterError("world size must be positive")
        self.shards = [{k: as_tensor(v) for k, v in s.items()} for s in self.shards]
        tags = set(self.shards[0])
        dims = {v.shape[1] for s in self.shards for v in s.values()}
        for w, s in enumerate(self.shards):
            if set(s) != tags:
                raise ConfigurationError(f"shard {w} carries streams {sorted(s)}, expected {sorted(tags)}")
            if len({v.shape[0] for v in s.values()}) > 1:
                raise DimensionError(f"shard {w} streams disagree on local batch size")
        if len(dims) > 1:
            raise DimensionError(f"shards disagree on embedding width: {sorted(dims)}")

    @classmethod
    def split(cls, bundle: dict, world_size: int) -> "ShardedBatch":
        """Split a global bundle into ``world_size`` contiguous row blocks."""
        if world_size < 1:
            raise ParameterError("world size must be positive")
        parts = {k: np.array_split(as_tensor(v), world_size) for k, v in bundle.items()}
        return cls([{k: parts[k][w] for k in parts} for w in range(world_size)])

    @property
    def world_size(self) -> int:
        return len(self.shards)

    @property
    def local_sizes(self) -> list[int]:
        return [next(iter(s.values())).shape[0] if s else 0 for s in self.shards]

    @property
    def global_batch(self) -> int:
        return sum(self.local_sizes)

    @property
    def streams(self) -> list[str]:
        return sorted(self.shards[0])


class CollectiveLedger:
    """Counts gather calls and gathered floats; reset between steps."""

    def __init__(self):
        self.gather_calls = 0
        self.payload_floats = 0

    def record(self, n_floats: int) -> None:
        self.gather_calls += 1
        self.payload_floats += int(n_floats)

    def reset(self) -> None:
        self.gather_calls = 0
        self.payload_floats = 0


def all_gather(parts, ledger: CollectiveLedger | None = None) -> np.ndarray:
    """Concatenate per-shard tensors along the batch axis in shard order."""
    out = np.concatenate(parts, axis=0)
    if ledger is not None:
        ledger.record(out.size)
    return out


class GatherResult(NamedTuple):
    total: float
    per_pair: list
    shard_grads: list      # per shard {stream tag: (b_w, C_h) gradient}
    alpha_grads: list
    beta_grads: list


def _check(batch: ShardedBatch, registry: PairRegistry) -> None:
    missing = sorted(set(registry.streams()) - set(batch.streams))
    if missing:
        raise ConfigurationError(f"streams {missing} are not present on the shards")


def _losses(batch: ShardedBatch, registry: PairRegistry, gathered) -> GatherResult:
    """Evaluate every pair on global tensors and scatter stream gradients back by rows."""
    offsets = np.concatenate([[0], np.cumsum(batch.local_sizes)])
    grads: dict = {}
    per_pair, a_grads, b_grads = [], [], []
    total = 0.0
    for pair, (left, right) in zip(registry, gathered):
        res = sigmoid_pair_loss(left, right, pair.alpha, pair.beta)
        per_pair.append(res.loss)
        total += pair.weight * res.loss
        for tag, g in ((pair.left, res.grad_left), (pair.right, res.grad_right)):
            g = pair.weight * g
            grads[tag] = grads[tag] + g if tag in grads else g
        a_grads.append(pair.weight * res.grad_alpha)
        b_grads.append(pair.weight * res.grad_beta)
    shard_grads = [{tag: g[offsets[w]:offsets[w + 1]] for tag, g in grads.items()}
                   for w in range(batch.world_size)]
    return GatherResult(total, per_pair, shard_grads, a_grads, b_grads)


def gather_naive(batch: ShardedBatch, registry: PairRegistry,
                 ledger: CollectiveLedger | None = None) -> GatherResult:
    """Two gathers per pair: one for the left stream, one for the right."""
    _check(batch, registry)
    gathered = []
    for pair in registry:
        left = all_gather([s[pair.left] for s in batch.shards], ledger)
        right = all_gather([s[pair.right] for s in batch.shards], ledger)
        gathered.append((left, right))
    return _losses(batch, registry, gathered)


def pack(shard: dict, tags) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Stack ``tags`` of one shard along the batch axis; returns the stack and row extents."""
    blocks = [shard[t] for t in tags]
    stops = np.cumsum([b.shape[0] for b in blocks])
    extents = [(int(a), int(b)) for a, b in zip(np.concatenate([[0], stops[:-1]]), stops)]
    return np.concatenate(blocks, axis=0), extents


def unpack(gathered: np.ndarray, shard_rows, shard_extents) -> list[np.ndarray]:
    """Invert a gather of packed stacks: one global tensor per packed slot."""
    starts = np.concatenate([[0], np.cumsum(shard_rows)[:-1]]).astype(int)
    n_slots = len(shard_extents[0])
    return [np.concatenate([gathered[s + ext[i][0]:s + ext[i][1]]
                            for s, ext in zip(starts, shard_extents)], axis=0)
            for i in range(n_slots)]


def gather_packed(batch: ShardedBatch, registry: PairRegistry,
                  ledger: CollectiveLedger | None = None) -> GatherResult:
    """Two gathers per step: all left streams stacked, then all right streams stacked."""
    _check(batch, registry)
    sides = []
    for side in ("left", "right"):
        tags = [getattr(p, side) for p in registry]
        packed = [pack(s, tags) for s in batch.shards]
        g = all_gather([p[0] for p in packed], ledger)
        sides.append(unpack(g, [p[0].shape[0] for p in packed], [p[1] for p in packed]))
    return _losses(batch, registry, list(zip(*sides)))


def bench_gather(W: int, P: int, B: int, C_h: int, latency_per_call: float = 5e-5,
                 bandwidth: float = 1e10) -> dict:
    """Cost-model comparison of both strategies: time = calls * latency + payload / bandwidth.

    ``bandwidth`` is in floats per second and may be ``inf``.
    """
    for name, v in (("W", W), ("P", P), ("B", B), ("C_h", C_h)):
        if int(v) != v or v < 1:
            raise ParameterError(f"{name} must be a positive integer, got {v}")
    if not latency_per_call >= 0 or not bandwidth > 0 or math.isnan(bandwidth):
        raise ParameterError("latency must be >= 0 and bandwidth > 0")
    payload = 2 * P * B * C_h
    rows = []
    for strategy, calls in (("naive", 2 * P), ("packed", 2)):
        t = calls * latency_per_call + payload / bandwidth
        rows.append({"strategy": strategy, "calls": calls, "payload_floats": payload,
                     "modeled_time": t})
    packed_t = rows[1]["modeled_time"]
    ratio = rows[0]["modeled_time"] / packed_t if packed_t > 0 else float("nan")
    return {"W": W, "P": P, "B": B, "C_h": C_h, "latency_per_call": latency_per_call,
            "bandwidth": bandwidth, "strategies": rows, "modeled_speedup": ratio}
