import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msclr.conventions import pad_to_unified
from msclr.dataio import (
    AugmentationConfig,
    DimensionMismatchError,
    MalformedHeaderError,
    MissingFileError,
    SequenceRecord,
    TruncatedFileError,
    UnknownFormatError,
    augment,
    check_dataset,
    derive_bone_stream,
    derive_motion_stream,
    generate_synthetic_dataset,
    interpolate_frames,
    read_dataset,
    read_sequence,
    write_dataset,
    write_sequence,
)
from msclr.dataio.augment import flip

from conftest import chain

# ---- interpolation ---------------------------------------------------------


def test_interpolate_identity_on_aligned_grid(rng):
    x = rng.normal(size=(3, 5, 50, 2))
    assert np.array_equal(interpolate_frames(x, 50), x)


def test_interpolate_midpoint_and_ramp():
    x = np.zeros((1, 1, 2, 1))
    x[0, 0, 1, 0] = 1
    assert interpolate_frames(x, 3)[0, 0, :, 0].tolist() == [0, 0.5, 1]
    ramp = np.arange(7.0).reshape(1, 1, 7, 1)
    out = interpolate_frames(ramp, 50)[0, 0, :, 0]
    np.testing.assert_allclose(out, 6 * np.arange(50) / 49, atol=1e-12)


def test_interpolate_broadcasts_single_frame(rng):
    x = rng.normal(size=(3, 4, 1, 2))
    out = interpolate_frames(x, 50)
    assert out.shape == (3, 4, 50, 2) and np.array_equal(out, np.repeat(x, 50, axis=2))


def test_interpolate_empty_raises():
    with pytest.raises(ValueError):
        interpolate_frames(np.zeros((3, 4, 0, 1)), 10)


@settings(max_examples=40, deadline=None)
@given(x=arrays(np.float64, st.tuples(st.just(2), st.just(3), st.integers(1, 12), st.just(1)),
                elements=st.floats(-100, 100)),
       t_out=st.integers(1, 60))
def test_interpolate_stays_within_range(x, t_out):
    out = interpolate_frames(x, t_out)
    lo, hi = x.min(axis=2, keepdims=True), x.max(axis=2, keepdims=True)
    assert np.all(out >= lo - 1e-9) and np.all(out <= hi + 1e-9)
    const = np.broadcast_to(x[:, :, :1], x.shape)
    assert np.array_equal(interpolate_frames(const, t_out), np.broadcast_to(x[:, :, :1], out.shape))


# ---- streams ---------------------------------------------------------------


def test_bone_two_joint_chain():
    from msclr.conventions import ConventionRegistry
    conv = chain(2)
    reg = ConventionRegistry(()).register(conv)
    raw = np.zeros((3, 2, 1, 1))
    raw[0, 1] = 1.0
    bone = derive_bone_stream(pad_to_unified(raw, "chain", reg), conv)
    assert bone.data[:, :, 0, 0].T.tolist() == [[0, 0, 0], [1, 0, 0]]


def test_bone_of_coincident_joints_is_zero(registry):
    raw = np.ones((3, 25, 4, 2))
    bone = derive_bone_stream(pad_to_unified(raw, "kinectv2", registry), registry["kinectv2"])
    assert not bone.data.any()


def test_bone_norms_equal_edge_lengths(registry, small_dataset):
    conv = registry["kinectv2"]
    raw = small_dataset[0].formats["kinectv2"].astype(np.float64)
    bone = derive_bone_stream(pad_to_unified(raw, "kinectv2", registry), conv).data
    norms = np.linalg.norm(bone[:, :, :, 0], axis=0)  # (V, T)
    expected = sorted(np.linalg.norm(raw[:, i, :, 0] - raw[:, j, :, 0], axis=0).sum()
                      for i, j in conv.edges)
    got = sorted(norms[:25].sum(axis=1))
    assert norms[conv.center_joint].max() == 0
    np.testing.assert_allclose(sorted(got)[1:], expected, rtol=1e-5)
    assert not bone[:, 25:].any()


def test_motion_static_single_frame_and_drift(registry):
    static = pad_to_unified(np.ones((3, 25, 50, 2)), "kinectv2", registry)
    assert not derive_motion_stream(static).data.any()
    assert not derive_motion_stream(pad_to_unified(np.ones((3, 25, 1, 2)), "kinectv2", registry)).data.any()
    drift = np.zeros((3, 25, 10, 2))
    drift[0, 4, :, 0] = 0.1 * np.arange(10)
    m = derive_motion_stream(pad_to_unified(drift, "kinectv2", registry)).data
    np.testing.assert_allclose(m[0, 4, :9, 0], 0.1, atol=1e-6)
    assert m[0, 4, 9, 0] == 0 and np.count_nonzero(m) == 9


def test_motion_cumsum_reconstructs(registry, rng):
    raw = rng.normal(size=(3, 25, 12, 2))
    seq = pad_to_unified(raw, "kinectv2", registry)
    m = derive_motion_stream(seq).data
    rebuilt = np.concatenate([np.zeros_like(m[:, :, :1]), np.cumsum(m[:, :, :-1], axis=2)], axis=2)
    np.testing.assert_allclose(rebuilt, seq.data - seq.data[:, :, :1], atol=1e-6)


# ---- augmentation ----------------------------------------------------------


def padded(registry, rng, name="kinectv2", t=30):
    raw = np.zeros((3, registry[name].joint_count, t, 2), np.float32)
    raw[..., 0] = rng.normal(size=raw.shape[:3])
    return pad_to_unified(raw, name, registry)


def test_disabled_augment_is_identity(registry, rng):
    seq = padded(registry, rng)
    out = augment(seq, registry["kinectv2"], AugmentationConfig.disabled(), rng)
    assert np.array_equal(out.data, seq.data) and out.data is not seq.data


def test_flip_is_involution(registry, rng):
    seq = padded(registry, rng)
    cfg = AugmentationConfig.disabled(flip=True, flip_probability=1.0)
    conv = registry["kinectv2"]
    twice = augment(augment(seq, conv, cfg, rng), conv, cfg, rng)
    assert np.array_equal(twice.data, seq.data)
    once = flip(seq.data, conv)
    left, right = conv.index("left_hand"), conv.index("right_hand")
    assert once[0, left, 0, 0] == -seq.data[0, right, 0, 0]
    assert once[1, left, 0, 0] == seq.data[1, right, 0, 0]


def test_noise_statistics(registry):
    rng = np.random.default_rng(0)
    seq = padded(registry, rng, t=200)
    cfg = AugmentationConfig.disabled(noise=True, noise_sigma=0.05)
    diff = augment(seq, registry["kinectv2"], cfg, rng).data - seq.data
    assert abs(diff[:, :25, :, 0].std() - 0.05) < 0.002
    assert not diff[:, 25:].any()
    assert not diff[..., 1].any()  # absent person stays absent


@pytest.mark.parametrize("name", ["kinectv2", "smpl", "smplx"])
def test_full_augment_keeps_padding_and_mask(registry, name):
    rng = np.random.default_rng(5)
    seq = padded(registry, rng, name)
    out = augment(seq, registry[name], AugmentationConfig(flip_probability=1.0), rng)
    v = registry[name].joint_count
    assert not out.data[:, v:].any()
    assert np.array_equal(out.valid_mask, seq.valid_mask)
    assert out.data.shape == seq.data.shape and np.isfinite(out.data).all()


def test_augment_deterministic_given_rng(registry):
    seq = padded(registry, np.random.default_rng(1))
    a = augment(seq, registry["kinectv2"], AugmentationConfig(), np.random.default_rng(9))
    b = augment(seq, registry["kinectv2"], AugmentationConfig(), np.random.default_rng(9))
    assert np.array_equal(a.data, b.data)


@pytest.mark.parametrize("kw", [dict(crop_ratio_min=0.0), dict(crop_ratio_max=1.5),
                                dict(flip_probability=2.0), dict(noise_sigma=-1.0),
                                dict(shear_amplitude=float("nan"))])
def test_invalid_augmentation_config(kw):
    with pytest.raises(ValueError):
        AugmentationConfig(**kw)


# ---- synthetic data --------------------------------------------------------


def test_synthetic_cardinality_and_determinism(registry):
    a = generate_synthetic_dataset(3, 20, registry, seed=7)
    b = generate_synthetic_dataset(3, 20, registry, seed=7)
    assert len(a) == 60 and all(len(r.formats) == 4 for r in a)
    assert a == b
    assert sum(r.split_tag == "test" for r in a) == 21
    with pytest.raises(ValueError):
        generate_synthetic_dataset(1, 5, registry)


def test_synthetic_nearest_centroid_beats_chance(registry):
    recs = generate_synthetic_dataset(3, 20, registry, seed=0)
    x = np.stack([interpolate_frames(r.formats["kinectv2"][..., 0], 50, axis=2).ravel() for r in recs])
    y = np.array([r.label for r in recs])
    train = np.array([r.split_tag == "train" for r in recs])
    centroids = np.stack([x[train & (y == c)].mean(axis=0) for c in range(3)])
    pred = np.argmin(((x[~train, None] - centroids) ** 2).sum(-1), axis=1)
    assert (pred == y[~train]).mean() > 1 / 3 + 0.2


def test_synthetic_formats_describe_same_motion(small_dataset, registry):
    rec = small_dataset[0]
    t = {a.shape[2] for a in rec.formats.values()}
    assert len(t) == 1
    # pelvis-like centers sit at the same place in every format
    centers = [rec.formats[c.name][:, c.center_joint, :, 0] for c in registry]
    for c in centers[1:]:
        assert np.abs(c - centers[0]).max() < 0.15


# ---- container -------------------------------------------------------------


def test_sequence_round_trip_bitwise(tmp_path, rng):
    x = rng.normal(size=(3, 25, 7, 2)).astype(np.float32)
    write_sequence(tmp_path / "a.mskl", x, "kinectv2")
    name, y = read_sequence(tmp_path / "a.mskl")
    assert name == "kinectv2" and y.dtype == np.float32 and y.tobytes() == x.tobytes()


def test_sequence_layout_matches_hand_encoding(tmp_path):
    x = np.arange(2 * 3 * 4 * 1, dtype=np.float32).reshape(2, 3, 4, 1)
    write_sequence(tmp_path / "a.mskl", x, "abc")
    blob = (tmp_path / "a.mskl").read_bytes()
    expected = (b"MSKL" + struct.pack("<5I", 1, 2, 3, 4, 1) + struct.pack("<H", 3) + b"abc"
                + x.astype("<f4").tobytes(order="C"))
    assert blob == expected


def test_truncated_and_malformed_files(tmp_path):
    (tmp_path / "t.mskl").write_bytes(b"MSKL\x01\x00\x00\x00")
    with pytest.raises(TruncatedFileError):
        read_sequence(tmp_path / "t.mskl")
    x = np.zeros((3, 2, 2, 1), np.float32)
    write_sequence(tmp_path / "m.mskl", x, "chain")
    blob = bytearray((tmp_path / "m.mskl").read_bytes())
    blob[:4] = b"XXXX"
    (tmp_path / "m.mskl").write_bytes(bytes(blob))
    with pytest.raises(MalformedHeaderError):
        read_sequence(tmp_path / "m.mskl")
    write_sequence(tmp_path / "s.mskl", x, "chain")
    (tmp_path / "s.mskl").write_bytes((tmp_path / "s.mskl").read_bytes()[:-3])
    with pytest.raises(TruncatedFileError):
        read_sequence(tmp_path / "s.mskl")


def test_dataset_round_trip(tmp_path, small_dataset, registry):
    manifest = write_dataset(small_dataset, tmp_path / "ds")
    back = read_dataset(manifest, registry)
    assert back == small_dataset
    assert len(list((tmp_path / "ds" / "sequences").iterdir())) == 4 * len(small_dataset)
    only = read_dataset(tmp_path / "ds", registry, ["smpl"])
    assert all(set(r.formats) == {"smpl"} for r in only)
    assert check_dataset(manifest, registry, ["kinectv2", "smplx"]) == []


def test_dataset_errors(tmp_path, small_dataset, registry):
    manifest = write_dataset(small_dataset[:2], tmp_path / "ds")
    victim = tmp_path / "ds" / "sequences" / f"{small_dataset[0].sample_id}.smplx.mskl"
    victim.unlink()
    with pytest.raises(MissingFileError):
        read_dataset(manifest, registry)
    findings = check_dataset(manifest, registry, ["smplx"])
    assert findings and small_dataset[0].sample_id in str(findings[0])

    write_dataset(small_dataset[:1], tmp_path / "d2")
    other = tmp_path / "d2" / "sequences" / f"{small_dataset[0].sample_id}.smpl.mskl"
    write_sequence(other, np.zeros((3, 25, 4, 2), np.float32), "smpl")
    with pytest.raises(DimensionMismatchError):
        read_dataset(tmp_path / "d2", registry)
    with pytest.raises(UnknownFormatError):
        read_dataset(tmp_path / "d2", registry, ["openpose"])


def test_record_invariants():
    with pytest.raises(ValueError):
        SequenceRecord("x", {}, 0)
    with pytest.raises(DimensionMismatchError):
        SequenceRecord("x", {"a": np.zeros((3, 2, 4, 1)), "b": np.zeros((3, 2, 5, 1))}, 0)
