"""Synthetic multi-format action clips.

A shared virtual body (torso, two arms, two legs) is animated by a small
set of joint angles. Each class is a motion family: a mean posture plus
sinusoidal oscillation of every angle with class-specific amplitudes,
frequency and phases. Every convention is rendered from the same animated
body by placing each of its joints at its anchor, so all formats of one
record depict the same motion.

Body frame: +y up, +x toward the body's left, +z forward. Units are meters.
"""

from __future__ import annotations

import numpy as np

from ..conventions import DEFAULT_PERSONS, ConventionRegistry, SkeletonConvention
from .container import SequenceRecord

PELVIS_HEIGHT = 0.95
SHOULDER_HEIGHT = 0.50  # distance along the torso
SHOULDER_HALF_WIDTH = 0.18
HIP_HALF_WIDTH = 0.10
UPPER_ARM, FOREARM = 0.30, 0.27
THIGH, SHIN = 0.45, 0.43

ANGLES = ("torso_pitch",
          "l_abduct", "l_flex", "l_elbow", "r_abduct", "r_flex", "r_elbow",
          "l_hip", "l_knee", "r_hip", "r_knee")

# (low, high) range of the class-mean posture for each angle, radians
_POSTURE_RANGE = np.array([
    (-0.1, 0.5),
    (0.0, 1.4), (-0.3, 1.5), (0.0, 1.6), (0.0, 1.4), (-0.3, 1.5), (0.0, 1.6),
    (-0.2, 0.9), (0.0, 1.2), (-0.2, 0.9), (0.0, 1.2),
])
_MAX_AMPLITUDE = np.array([0.2, 0.6, 0.7, 0.8, 0.6, 0.7, 0.8, 0.5, 0.6, 0.5, 0.6])


def _rot_x(a: np.ndarray) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1),
                     np.stack([z, s, c], -1)], -2)


def _rot_y(a: np.ndarray) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1),
                     np.stack([-s, z, c], -1)], -2)


def _rot_z(a: np.ndarray) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1),
                     np.stack([z, z, o], -1)], -2)


_UP = np.array([0.0, 1.0, 0.0])
_DOWN = -_UP
_FORWARD = np.array([0.0, 0.0, 1.0])


def _mv(r: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("tij,j->ti", r, v)


def _apply(r: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("tij,tj->ti", r, v)


class VirtualBody:
    """Forward kinematics of the shared body for a ``(T, len(ANGLES))`` angle track."""

    def __init__(self, angles: np.ndarray):
        a = {name: angles[:, k] for k, name in enumerate(ANGLES)}
        t = angles.shape[0]
        self.pelvis = np.tile([0.0, PELVIS_HEIGHT, 0.0], (t, 1))
        self.torso_rot = _rot_x(-a["torso_pitch"])  # positive pitch leans forward
        self.chains = {}
        for side, sign in (("left", 1.0), ("right", -1.0)):
            p = side[0]
            shoulder = (self.pelvis + _mv(self.torso_rot, SHOULDER_HEIGHT * _UP)
                        + _mv(self.torso_rot, np.array([sign * SHOULDER_HALF_WIDTH, 0, 0])))
            upper = self.torso_rot @ _rot_z(sign * a[f"{p}_abduct"]) @ _rot_x(-a[f"{p}_flex"])
            lower = upper @ _rot_x(-a[f"{p}_elbow"])
            self.chains[f"{side}_arm"] = (shoulder, [(UPPER_ARM, upper, _DOWN), (np.inf, lower, _DOWN)])
            hip = self.pelvis + np.array([sign * HIP_HALF_WIDTH, 0, 0])
            thigh = _rot_x(-a[f"{p}_hip"])
            shin = thigh @ _rot_x(a[f"{p}_knee"])
            self.chains[f"{side}_leg"] = (hip, [(THIGH, thigh, _DOWN), (SHIN, shin, _DOWN),
                                                (np.inf, shin, _FORWARD)])
        self.chains["torso"] = (self.pelvis, [(np.inf, self.torso_rot, _UP)])

    def point(self, part: str, distance: float, offset: np.ndarray) -> np.ndarray:
        """Position ``distance`` meters along ``part``, plus a segment-frame offset."""
        origin, segments = self.chains[part]
        pos = origin.copy()
        remaining = distance
        for length, rot, direction in segments:
            step = min(remaining, length)
            pos = pos + step * _mv(rot, direction)
            remaining -= step
            if remaining <= 0:
                break
        return pos + _mv(rot, offset)


def render(body: VirtualBody, convention: SkeletonConvention) -> np.ndarray:
    """Render a ``(T, V_s, 3)`` joint track for ``convention``."""
    if convention.anchors is None:
        raise ValueError(f"convention {convention.name!r} has no anchors; cannot render synthetic data")
    return np.stack([body.point(str(part), float(d), np.array([dx, dy, dz], dtype=float))
                     for part, d, dx, dy, dz in convention.anchors], axis=1)


def class_families(n_classes: int, seed: int) -> list[dict]:
    rng = np.random.default_rng([seed, 0xC1A55])
    families = []
    for _ in range(n_classes):
        lo, hi = _POSTURE_RANGE.T
        families.append({
            "posture": rng.uniform(lo, hi),
            "amplitude": _MAX_AMPLITUDE * rng.uniform(0.0, 1.0, size=len(ANGLES)),
            "cycles": rng.uniform(0.5, 3.0),
            "phase": rng.uniform(0, 2 * np.pi, size=len(ANGLES)),
        })
    return families


def generate_synthetic_dataset(n_classes: int, n_per_class: int, registry: ConventionRegistry,
                               seed: int = 0, test_fraction: float = 1 / 3,
                               frame_range: tuple[int, int] = (40, 64), persons: int = DEFAULT_PERSONS,
                               format_noise: float = 0.005) -> list[SequenceRecord]:
    """Records of ``n_classes`` motion families rendered in every registered convention.

    The last ``round(test_fraction * n_per_class)`` records of each class are
    tagged ``test``, the rest ``train``. Person slots after the first are zero.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be at least 2")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    families = class_families(n_classes, seed)
    n_test = int(round(test_fraction * n_per_class))
    records = []
    for label, fam in enumerate(families):
        for k in range(n_per_class):
            rng = np.random.default_rng([seed, label, k])
            t_raw = int(rng.integers(frame_range[0], frame_range[1] + 1))
            tempo = fam["cycles"] * rng.uniform(0.9, 1.1)
            u = np.linspace(0.0, 1.0, t_raw)[:, None]
            amp = fam["amplitude"] * rng.uniform(0.8, 1.2, size=len(ANGLES))
            posture = fam["posture"] + rng.normal(0.0, 0.05, size=len(ANGLES))
            phase = fam["phase"] + rng.uniform(-0.5, 0.5)
            angles = posture + amp * np.sin(2 * np.pi * tempo * u + phase)
            body = VirtualBody(angles)
            yaw = _rot_y(np.full(t_raw, rng.uniform(-0.25, 0.25)))
            shift = np.array([rng.uniform(-0.3, 0.3), 0.0, rng.uniform(2.5, 3.5)])
            scale = rng.uniform(0.95, 1.05)
            formats = {}
            for conv in registry:
                joints = render(body, conv)  # (T, V, 3)
                joints = np.einsum("tij,tvj->tvi", yaw, joints) * scale + shift
                joints = joints + rng.normal(0.0, format_noise, size=joints.shape)
                arr = np.zeros((3, conv.joint_count, t_raw, persons), dtype=np.float32)
                arr[..., 0] = joints.transpose(2, 1, 0)
                formats[conv.name] = arr
            split = "test" if k >= n_per_class - n_test else "train"
            records.append(SequenceRecord(f"c{label:02d}_s{k:04d}", formats, label, split))
    return records
