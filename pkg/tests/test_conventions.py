import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msclr.conventions import (
    DuplicateConventionError,
    InvalidTopologyError,
    ShapeMismatchError,
    SkeletonConvention,
    UnknownConventionError,
    builtin_registry,
    load_convention,
    pad_to_unified,
    register_convention,
    save_convention,
)

from conftest import chain

JOINTS = {"smpl": 24, "smplx": 42, "mhad": 43, "kinectv2": 25}


def test_builtin_joint_counts(registry):
    assert {c.name: c.joint_count for c in registry} == JOINTS
    assert registry.v_max == 43
    assert registry["kinectv2"].joint_count == 25


@pytest.mark.parametrize("name", sorted(JOINTS))
def test_builtin_conventions_are_trees_with_valid_swaps(registry, name):
    conv = registry[name]
    assert len(conv.edges) == conv.joint_count - 1
    assert len(conv.joint_names) == len(set(conv.joint_names)) == conv.joint_count
    swap = np.array(conv.swap_map)
    assert np.array_equal(swap[swap], np.arange(conv.joint_count))
    # swapped joints carry mirrored names
    for i, j in enumerate(swap):
        a, b = conv.joint_names[i], conv.joint_names[j]
        assert a.replace("left", "X").replace("right", "left").replace("X", "right") == b


def test_single_small_convention_sets_vmax():
    from msclr.conventions import ConventionRegistry
    reg = ConventionRegistry(()).register(chain(2))
    assert reg.v_max == 2


def test_register_updates_vmax(registry):
    assert register_convention(registry, chain(50, "big")).v_max == 50
    assert register_convention(registry, chain(10, "small")).v_max == 43
    assert registry.v_max == 43  # original untouched


def test_register_rejects_duplicates_and_bad_topology(registry):
    with pytest.raises(DuplicateConventionError):
        register_convention(registry, chain(5, "smpl"))
    with pytest.raises(InvalidTopologyError):
        SkeletonConvention("bad", 24, ((0, 99),), 0, tuple(range(24)), tuple(map(str, range(24))))
    with pytest.raises(InvalidTopologyError):  # disconnected
        SkeletonConvention("bad", 3, ((0, 1),), 0, (0, 1, 2), ("a", "b", "c"))
    with pytest.raises(InvalidTopologyError):  # not an involution
        SkeletonConvention("bad", 3, ((0, 1), (1, 2)), 0, (1, 2, 0), ("a", "b", "c"))
    with pytest.raises(InvalidTopologyError):  # self loop
        SkeletonConvention("bad", 2, ((0, 1), (1, 1)), 0, (0, 1), ("a", "b"))
    with pytest.raises(InvalidTopologyError):  # duplicate undirected edge
        SkeletonConvention("bad", 2, ((0, 1), (1, 0)), 0, (0, 1), ("a", "b"))
    with pytest.raises(InvalidTopologyError):
        SkeletonConvention("bad", 2, ((0, 1),), 5, (0, 1), ("a", "b"))


def test_unknown_convention(registry):
    with pytest.raises(UnknownConventionError):
        registry["openpose"]
    with pytest.raises(KeyError):
        pad_to_unified(np.zeros((3, 25, 4, 2)), "openpose", registry)


def test_topology_file_round_trip(tmp_path, registry):
    path = tmp_path / "k.json"
    save_convention(registry["kinectv2"], path)
    doc = json.loads(path.read_text())
    assert {"name", "joint_count", "joint_names", "edges", "center_joint", "swap_map"} <= set(doc)
    assert load_convention(path) == registry["kinectv2"]


def test_pad_kinect(registry, rng):
    raw = rng.normal(size=(3, 25, 7, 2))
    seq = pad_to_unified(raw, "kinectv2", registry)
    assert seq.data.shape == (3, 43, 7, 2)
    assert np.all(seq.data[:, 25:] == 0)
    assert seq.valid_mask.sum() == 25 and seq.valid_mask[:25].all()
    assert np.array_equal(seq.native(), raw.astype(seq.data.dtype))


def test_pad_mhad_is_identity(registry, rng):
    raw = rng.normal(size=(3, 43, 5, 2)).astype(np.float32)
    seq = pad_to_unified(raw, "mhad", registry)
    assert np.array_equal(seq.data, raw) and seq.valid_mask.all()


def test_pad_shape_mismatch(registry):
    with pytest.raises(ShapeMismatchError):
        pad_to_unified(np.zeros((3, 24, 4, 2)), "kinectv2", registry)
    with pytest.raises(ValueError):
        pad_to_unified(np.full((3, 25, 4, 2), np.nan), "kinectv2", registry)


@settings(max_examples=30, deadline=None)
@given(name=st.sampled_from(sorted(JOINTS)), t=st.integers(1, 6), p=st.integers(1, 3),
       seed=st.integers(0, 2**31))
def test_pad_round_trip_property(name, t, p, seed):
    registry = builtin_registry()
    raw = np.random.default_rng(seed).normal(size=(3, JOINTS[name], t, p)).astype(np.float32)
    seq = pad_to_unified(raw, name, registry)
    assert np.array_equal(seq.data[:, :JOINTS[name]], raw)
    assert seq.valid_mask.sum() == JOINTS[name]
    assert np.abs(seq.data).sum() == pytest.approx(np.abs(raw).sum(dtype=np.float32), rel=1e-6)
