"""Skeleton conventions and the unified zero-padded pose layout.

Every convention is a named joint layout. Poses from different conventions
share one array layout by zero-padding the joint axis up to ``V_max``, the
largest joint count in the registry.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

DEFAULT_PERSONS = 2
BUILTIN_NAMES = ("smpl", "smplx", "mhad", "kinectv2")


class ConventionError(ValueError):
    """Base class for convention/registry errors."""


class InvalidTopologyError(ConventionError):
    pass


class DuplicateConventionError(ConventionError):
    pass


class UnknownConventionError(ConventionError, KeyError):
    def __str__(self) -> str:  # KeyError would otherwise repr() the message
        return str(self.args[0]) if self.args else ""


class ShapeMismatchError(ConventionError):
    pass


@dataclass(frozen=True)
class SkeletonConvention:
    """A named joint layout.

    ``anchors`` is optional metadata used only by the synthetic data
    generator: one ``[part, distance, dx, dy, dz]`` entry per joint placing
    the joint on the shared virtual body.
    """

    name: str
    joint_count: int
    edges: tuple[tuple[int, int], ...]
    center_joint: int
    swap_map: tuple[int, ...]
    joint_names: tuple[str, ...]
    description: str = ""
    anchors: tuple[tuple, ...] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "edges", tuple((int(a), int(b)) for a, b in self.edges))
        object.__setattr__(self, "swap_map", tuple(int(s) for s in self.swap_map))
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        if self.anchors is not None:
            object.__setattr__(self, "anchors", tuple(tuple(a) for a in self.anchors))
        self.validate()

    def validate(self) -> None:
        v = self.joint_count
        if not self.name:
            raise InvalidTopologyError("convention name must be non-empty")
        if v < 1:
            raise InvalidTopologyError(f"{self.name}: joint_count must be positive, got {v}")
        if len(self.joint_names) != v:
            raise InvalidTopologyError(
                f"{self.name}: {len(self.joint_names)} joint names for {v} joints")
        if not 0 <= self.center_joint < v:
            raise InvalidTopologyError(f"{self.name}: center_joint {self.center_joint} out of range")
        seen = set()
        for a, b in self.edges:
            if not (0 <= a < v and 0 <= b < v):
                raise InvalidTopologyError(f"{self.name}: edge ({a}, {b}) out of range [0, {v})")
            if a == b:
                raise InvalidTopologyError(f"{self.name}: self-loop at joint {a}")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise InvalidTopologyError(f"{self.name}: duplicate edge {key}")
            seen.add(key)
        if len(self.swap_map) != v:
            raise InvalidTopologyError(f"{self.name}: swap_map has {len(self.swap_map)} entries")
        for i, s in enumerate(self.swap_map):
            if not 0 <= s < v or self.swap_map[s] != i:
                raise InvalidTopologyError(f"{self.name}: swap_map is not an involution at {i}")
        if self.anchors is not None and len(self.anchors) != v:
            raise InvalidTopologyError(f"{self.name}: {len(self.anchors)} anchors for {v} joints")
        if len(_reachable(v, self.edges, 0)) != v:
            raise InvalidTopologyError(f"{self.name}: edge graph is disconnected")

    def index(self, joint_name: str) -> int:
        return self.joint_names.index(joint_name)

    def to_dict(self) -> dict:
        doc = {
            "name": self.name,
            "description": self.description,
            "joint_count": self.joint_count,
            "joint_names": list(self.joint_names),
            "edges": [list(e) for e in self.edges],
            "center_joint": self.center_joint,
            "swap_map": list(self.swap_map),
        }
        if self.anchors is not None:
            doc["anchors"] = [list(a) for a in self.anchors]
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SkeletonConvention":
        try:
            return cls(
                name=str(doc["name"]),
                joint_count=int(doc["joint_count"]),
                edges=doc["edges"],
                center_joint=int(doc["center_joint"]),
                swap_map=doc["swap_map"],
                joint_names=doc["joint_names"],
                description=doc.get("description", ""),
                anchors=doc.get("anchors"),
            )
        except KeyError as exc:
            raise InvalidTopologyError(f"topology document missing key {exc}") from None


def _reachable(v: int, edges: Iterable[tuple[int, int]], start: int) -> set[int]:
    nbrs: list[list[int]] = [[] for _ in range(v)]
    for a, b in edges:
        nbrs[a].append(b)
        nbrs[b].append(a)
    seen = {start}
    queue = deque([start])
    while queue:
        i = queue.popleft()
        for j in nbrs[i]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    return seen


def load_convention(path: str | Path) -> SkeletonConvention:
    """Load a topology file (JSON document) from ``path``."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidTopologyError(f"{path}: not a valid topology document: {exc}") from None
    return SkeletonConvention.from_dict(doc)


def save_convention(convention: SkeletonConvention, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(convention.to_dict(), fh, indent=2)
        fh.write("\n")


class ConventionRegistry:
    """Ordered, immutable collection of conventions.

    ``register`` returns a new registry rather than mutating this one.
    """

    def __init__(self, conventions: Sequence[SkeletonConvention] = ()):
        by_name: dict[str, SkeletonConvention] = {}
        for conv in conventions:
            if conv.name in by_name:
                raise DuplicateConventionError(f"convention {conv.name!r} already registered")
            by_name[conv.name] = conv
        self._by_name = by_name

    @property
    def v_max(self) -> int:
        return max((c.joint_count for c in self._by_name.values()), default=0)

    @property
    def names(self) -> list[str]:
        return list(self._by_name)

    def __getitem__(self, name: str) -> SkeletonConvention:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownConventionError(f"unknown convention {name!r}") from None

    def __contains__(self, name: object) -> bool:
        return name in self._by_name

    def __iter__(self) -> Iterator[SkeletonConvention]:
        return iter(self._by_name.values())

    def __len__(self) -> int:
        return len(self._by_name)

    def register(self, convention: SkeletonConvention) -> "ConventionRegistry":
        convention.validate()
        return ConventionRegistry([*self._by_name.values(), convention])

    def __repr__(self) -> str:
        return f"ConventionRegistry({self.names}, v_max={self.v_max})"


def register_convention(registry: ConventionRegistry,
                        convention: SkeletonConvention) -> ConventionRegistry:
    return registry.register(convention)


def builtin_registry() -> ConventionRegistry:
    """SMPL (24), SMPL-X (42), Berkeley MHAD (43) and Kinect v2 (25)."""
    root = resources.files("msclr") / "data" / "conventions"
    convs = []
    for name in BUILTIN_NAMES:
        with (root / f"{name}.json").open(encoding="utf-8") as fh:
            convs.append(SkeletonConvention.from_dict(json.load(fh)))
    return ConventionRegistry(convs)


@dataclass
class PoseSequence:
    """Pose array of shape ``(C, V_max, T, P)`` with a valid-joint mask."""

    data: np.ndarray
    convention: str
    valid_mask: np.ndarray
    label: int | None = None

    @property
    def joint_count(self) -> int:
        return int(self.valid_mask.sum())

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def native(self) -> np.ndarray:
        """Unpadded ``(C, V_s, T, P)`` view."""
        return self.data[:, : self.joint_count]

    def replace(self, data: np.ndarray) -> "PoseSequence":
        return PoseSequence(data, self.convention, self.valid_mask, self.label)


def pad_to_unified(raw: np.ndarray, convention: str, registry: ConventionRegistry,
                   label: int | None = None) -> PoseSequence:
    """Embed a native ``(C, V_s, T, P)`` array in the registry's ``V_max`` layout."""
    conv = registry[convention]
    raw = np.asarray(raw)
    if raw.ndim != 4:
        raise ShapeMismatchError(f"expected a 4-d (C, V, T, P) array, got shape {raw.shape}")
    if raw.shape[1] != conv.joint_count:
        raise ShapeMismatchError(
            f"{convention} has {conv.joint_count} joints but array has {raw.shape[1]}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("pose array contains non-finite values")
    c, v, t, p = raw.shape
    data = np.zeros((c, registry.v_max, t, p), dtype=raw.dtype if raw.dtype.kind == "f" else np.float32)
    data[:, :v] = raw
    mask = np.zeros(registry.v_max, dtype=bool)
    mask[:v] = True
    return PoseSequence(data, convention, mask, label)
