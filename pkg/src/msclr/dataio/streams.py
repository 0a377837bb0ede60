"""Frame resampling and the joint / bone / motion input streams."""

from __future__ import annotations

from collections import deque

import numpy as np

from ..conventions import PoseSequence, SkeletonConvention

STREAMS = ("joint", "motion", "bone")
DEFAULT_FRAMES = 50


def interpolate_frames(seq: np.ndarray, t_out: int = DEFAULT_FRAMES, axis: int = 2) -> np.ndarray:
    """Linearly resample ``seq`` along ``axis`` onto ``t_out`` evenly spaced frames."""
    seq = np.asarray(seq)
    t_in = seq.shape[axis]
    if t_in < 1:
        raise ValueError("cannot interpolate an empty sequence")
    if t_out < 1:
        raise ValueError("t_out must be positive")
    moved = np.moveaxis(seq, axis, 0)
    if t_in == 1:
        out = np.repeat(moved, t_out, axis=0)
    else:
        pos = np.linspace(0.0, t_in - 1, t_out)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, t_in - 1)
        frac = (pos - lo).reshape((-1,) + (1,) * (moved.ndim - 1))
        out = moved[lo] + (moved[hi] - moved[lo]) * frac
    return np.moveaxis(out, 0, axis).astype(seq.dtype, copy=False)


def parent_tree(convention: SkeletonConvention) -> np.ndarray:
    """BFS parents of the edge graph rooted at the center joint (root -> -1)."""
    v = convention.joint_count
    nbrs: list[list[int]] = [[] for _ in range(v)]
    for a, b in convention.edges:
        nbrs[a].append(b)
        nbrs[b].append(a)
    parent = np.full(v, -2, dtype=np.int64)
    root = convention.center_joint
    parent[root] = -1
    queue = deque([root])
    while queue:
        i = queue.popleft()
        for j in sorted(nbrs[i]):
            if parent[j] == -2:
                parent[j] = i
                queue.append(j)
    return parent


def _check(seq: PoseSequence, convention: SkeletonConvention) -> None:
    if seq.convention != convention.name or seq.joint_count != convention.joint_count:
        raise ValueError(f"sequence is {seq.convention!r} ({seq.joint_count} joints), "
                         f"convention is {convention.name!r} ({convention.joint_count})")


def derive_bone_stream(seq: PoseSequence, convention: SkeletonConvention) -> PoseSequence:
    _check(seq, convention)
    parent = parent_tree(convention)
    bone = np.zeros_like(seq.data)
    child = np.flatnonzero(parent >= 0)
    bone[:, child] = seq.data[:, child] - seq.data[:, parent[child]]
    return seq.replace(bone)


def derive_motion_stream(seq: PoseSequence) -> PoseSequence:
    motion = np.zeros_like(seq.data)
    motion[:, :, :-1] = seq.data[:, :, 1:] - seq.data[:, :, :-1]
    return seq.replace(motion)


def derive_stream(seq: PoseSequence, stream: str, convention: SkeletonConvention) -> PoseSequence:
    if stream == "joint":
        return seq
    if stream == "motion":
        return derive_motion_stream(seq)
    if stream == "bone":
        return derive_bone_stream(seq, convention)
    raise ValueError(f"unknown stream {stream!r}; expected one of {STREAMS}")
