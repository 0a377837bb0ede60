"""Adjacency, hop distances and the spatial-configuration partition.

Partition matrices are indexed ``A[p, i, j]``: row ``i`` is the receiving
joint, column ``j`` the neighbor whose feature is aggregated.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .conventions import SkeletonConvention

ROOT, CENTRIPETAL, CENTRIFUGAL = 0, 1, 2
UNREACHABLE = -1


class DisconnectedGraphError(ValueError):
    pass


@dataclass(frozen=True)
class AdjacencySet:
    convention: str
    partitions: np.ndarray  # (3, V_max, V_max)
    hop_matrix: np.ndarray  # (V_s, V_s)

    @property
    def joint_count(self) -> int:
        return self.hop_matrix.shape[0]

    @property
    def v_max(self) -> int:
        return self.partitions.shape[-1]

    def native(self) -> np.ndarray:
        v = self.joint_count
        return self.partitions[:, :v, :v]


def build_adjacency(convention: SkeletonConvention) -> np.ndarray:
    v = convention.joint_count
    a = np.zeros((v, v), dtype=np.int64)
    for i, j in convention.edges:
        a[i, j] = a[j, i] = 1
    return a


def hop_distance(adjacency: np.ndarray) -> np.ndarray:
    """All-pairs shortest hop counts by BFS; -1 marks unreachable pairs."""
    adjacency = np.asarray(adjacency)
    v = adjacency.shape[0]
    nbrs = [np.flatnonzero(adjacency[i]) for i in range(v)]
    hops = np.full((v, v), UNREACHABLE, dtype=np.int64)
    for src in range(v):
        hops[src, src] = 0
        queue = deque([src])
        while queue:
            i = queue.popleft()
            for j in nbrs[i]:
                if hops[src, j] == UNREACHABLE:
                    hops[src, j] = hops[src, i] + 1
                    queue.append(j)
    return hops


def neighbor_set(hop_matrix: np.ndarray, joint: int, t: int, K: int = 1, gamma: int = 9,
                 T: int | None = None) -> set[tuple[int, int]]:
    """Spatio-temporal neighborhood of ``(t, joint)`` as ``(frame, joint)`` pairs.

    Joints within ``K`` hops, frames within ``gamma // 2`` of ``t``, clipped
    to ``[0, T)`` when ``T`` is given.
    """
    v = hop_matrix.shape[0]
    if not 0 <= joint < v:
        raise IndexError(f"joint {joint} out of range [0, {v})")
    if K < 0:
        raise ValueError("K must be non-negative")
    if gamma < 1 or gamma % 2 == 0:
        raise ValueError("gamma must be a positive odd integer")
    if T is not None and not 0 <= t < T:
        raise IndexError(f"frame {t} out of range [0, {T})")
    half = gamma // 2
    lo = t - half if T is None else max(0, t - half)
    hi = t + half if T is None else min(T - 1, t + half)
    joints = [j for j in range(v) if 0 <= hop_matrix[j, joint] <= K]
    return {(q, j) for q in range(lo, hi + 1) for j in joints}


def partition_spatial(adjacency: np.ndarray, hop_matrix: np.ndarray,
                      center_joint: int) -> np.ndarray:
    """Split ``A + I`` into root, centripetal and centrifugal 0/1 matrices."""
    v = adjacency.shape[0]
    to_center = hop_matrix[:, center_joint]
    if np.any(to_center == UNREACHABLE):
        raise DisconnectedGraphError("some joints cannot reach the center joint")
    parts = np.zeros((3, v, v), dtype=np.int64)
    for i in range(v):
        for j in range(v):
            if not 0 <= hop_matrix[i, j] <= 1:
                continue
            if i == j:
                parts[ROOT, i, j] = 1
            elif to_center[j] < to_center[i]:
                parts[CENTRIPETAL, i, j] = 1
            else:
                parts[CENTRIFUGAL, i, j] = 1
    return parts


def normalize_and_pad(partitions: np.ndarray, v_max: int, convention: str = "",
                      hop_matrix: np.ndarray | None = None) -> AdjacencySet:
    """Row-normalize each partition and embed it top-left in ``v_max x v_max``."""
    partitions = np.asarray(partitions, dtype=np.float64)
    k, v, _ = partitions.shape
    if v > v_max:
        raise ValueError(f"partition size {v} exceeds v_max {v_max}")
    sums = partitions.sum(axis=2, keepdims=True)
    normed = np.divide(partitions, sums, out=np.zeros_like(partitions), where=sums > 0)
    padded = np.zeros((k, v_max, v_max))
    padded[:, :v, :v] = normed
    if hop_matrix is None:
        hop_matrix = hop_distance((partitions.sum(axis=0) > 0).astype(np.int64) - np.eye(v, dtype=np.int64))
    return AdjacencySet(convention, padded, np.asarray(hop_matrix))


def adjacency_for(convention: SkeletonConvention, v_max: int | None = None) -> AdjacencySet:
    """Full pipeline: binary adjacency -> hops -> partition -> normalize/pad."""
    a = build_adjacency(convention)
    hops = hop_distance(a)
    parts = partition_spatial(a, hops, convention.center_joint)
    return normalize_and_pad(parts, v_max or convention.joint_count, convention.name, hops)
