import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lidarvote.errors import ParseError, PoseError
from lidarvote.pointcloud import (
    UNLABELED,
    DensePointCloud,
    Pose,
    RawScan,
    ScanSequence,
    align,
    clip_intensity,
    load_poses,
    load_scans,
    normalize_scan_intensity,
    parse_pose_line,
    read_bin_scan,
    read_labels,
    read_ply_scan,
    rescale_intensity,
    rotation_about,
    save_sequence,
    write_bin_scan,
    write_ply_scan,
)

from conftest import random_pose


@pytest.mark.parametrize(
    "value, expected",
    [(0.9, 0.5), (0.3, 0.3), (0.05, 0.1)],
)
def test_clip_intensity_examples(value, expected):
    assert clip_intensity(value, 0.1, 0.5) == expected


def test_clip_rejects_inverted_range():
    with pytest.raises(ValueError, match="invalid clip range"):
        clip_intensity(0.3, 0.5, 0.1)


@pytest.mark.parametrize(
    "values, eta, expected",
    [
        ([0.1, 0.3, 0.5], (0, 1), [0.0, 0.5, 1.0]),
        ([0.2, 0.2], (0, 1), [0.0, 0.0]),
        ([0.1, 0.2, 0.5], (0.1, 0.9), [0.1, 0.3, 0.9]),
    ],
)
def test_rescale_examples(values, eta, expected):
    np.testing.assert_allclose(rescale_intensity(values, *eta), expected, atol=1e-12)


def test_rescale_empty():
    with pytest.raises(ValueError, match="empty"):
        rescale_intensity([], 0, 1)


finite = st.floats(0, 1e4, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 60), elements=finite), st.floats(0, 0.5), st.floats(0.5, 1))
def test_intensity_pipeline_monotone_and_bounded(values, eta_lo, eta_hi):
    out = normalize_scan_intensity(values, 0.0, None, eta_lo, eta_hi)
    assert out.min() >= eta_lo and out.max() <= eta_hi
    order = np.argsort(values, kind="stable")
    assert np.all(np.diff(out[order]) >= 0)


def test_default_beta_max_is_99th_percentile():
    vals = np.concatenate([np.linspace(0, 1, 1000), [500.0]])
    out = normalize_scan_intensity(vals)
    # the outlier is clipped to the percentile, so it maps to 1 alongside the top 1%
    assert out[-1] == 1.0
    assert np.count_nonzero(out == 1.0) > 1


def test_pose_line_identity():
    pose = parse_pose_line("1 0 0 0 0 1 0 0 0 0 1 0")
    assert pose == Pose.identity()


def test_pose_line_wrong_count(tmp_path):
    f = tmp_path / "poses.txt"
    f.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n")
    with pytest.raises(ParseError) as info:
        load_poses(f)
    assert info.value.line == 2 and "poses.txt:2" in str(info.value)


def test_pose_non_orthonormal(tmp_path):
    f = tmp_path / "poses.txt"
    f.write_text("2 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(PoseError):
        load_poses(f)
    with pytest.raises(PoseError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_bin_scan_two_points(tmp_path):
    pts = np.array([[1, 2, 3, 0.5], [4, 5, 6, 0.25]], dtype=np.float32)
    f = tmp_path / "000000.bin"
    pts.astype("<f4").tofile(f)
    assert f.stat().st_size == 32
    scan = RawScan(read_bin_scan(f))
    assert len(scan) == 2
    np.testing.assert_array_equal(scan.points, pts)


def test_bin_scan_bad_size(tmp_path):
    f = tmp_path / "bad.bin"
    f.write_bytes(b"\x00" * 20)
    with pytest.raises(ParseError):
        read_bin_scan(f)


def test_ply_roundtrip(tmp_path):
    pts = np.array([[1.5, -2, 3, 0.5], [0, 0, 0, 1]])
    write_ply_scan(tmp_path / "a.ply", pts)
    np.testing.assert_allclose(read_ply_scan(tmp_path / "a.ply"), pts)


def test_ply_property_order_and_errors(tmp_path):
    f = tmp_path / "b.ply"
    f.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float intensity\n"
        "property float z\nproperty float y\nproperty float x\nend_header\n0.7 3 2 1\n"
    )
    np.testing.assert_allclose(read_ply_scan(f), [[1, 2, 3, 0.7]])
    f.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n")
    with pytest.raises(ParseError, match="intensity"):
        read_ply_scan(f)


def test_align_identity_and_rotation():
    scan = RawScan([[1, 0, 0, 0.2], [0, 2, 0, 0.8]])
    cloud = align(ScanSequence([scan], [Pose.identity()]))
    np.testing.assert_array_equal(cloud.positions, scan.xyz)

    one = RawScan([[1, 0, 0, 1.0]])
    yaw = Pose(rotation_about("z", np.pi / 2), np.zeros(3))
    np.testing.assert_allclose(align(ScanSequence([one], [yaw])).positions, [[0, 1, 0]], atol=1e-15)


def test_align_union_order_and_labels():
    rng = np.random.default_rng(3)
    a = RawScan(np.column_stack([rng.normal(size=(5, 3)), rng.uniform(size=5)]), 0, labels=[0, 1, 0, 1, 0])
    b = RawScan(np.column_stack([rng.normal(size=(7, 3)), rng.uniform(size=7)]), 1, labels=[1] * 7)
    pa, pb = random_pose(rng), random_pose(rng)
    cloud = align(ScanSequence([a, b], [pa, pb], ("x", "y")))
    assert len(cloud) == 12
    np.testing.assert_allclose(cloud.positions[:5], pa.apply(a.xyz))
    np.testing.assert_allclose(cloud.positions[5:], pb.apply(b.xyz))
    np.testing.assert_array_equal(cloud.source_scan, [0] * 5 + [1] * 7)
    np.testing.assert_array_equal(cloud.gt_class, [0, 1, 0, 1, 0] + [1] * 7)


def test_align_empty_scan_allowed():
    seq = ScanSequence([RawScan(np.zeros((0, 4))), RawScan([[1, 1, 1, 1]], 1)], [Pose.identity()] * 2)
    assert len(align(seq)) == 1


def test_sequence_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        ScanSequence([RawScan([[0, 0, 0, 1]])], [])


def test_sequence_rejects_out_of_range_class():
    with pytest.raises(ValueError, match="ground-truth class"):
        ScanSequence([RawScan([[0, 0, 0, 1]], labels=[3])], [Pose.identity()], ("a", "b"))
    # sentinel is fine
    ScanSequence([RawScan([[0, 0, 0, 1]], labels=[UNLABELED])], [Pose.identity()], ("a", "b"))


def test_raw_scan_rejects_bad_values():
    with pytest.raises(ValueError, match="negative"):
        RawScan([[0, 0, 0, -1]])
    with pytest.raises(ValueError, match="non-finite"):
        RawScan([[np.nan, 0, 0, 1]])


def test_rigid_motion_preserves_distances():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pose = random_pose(rng, 100)
        p, q = rng.uniform(-50, 50, (2, 500, 3))
        d0 = np.linalg.norm(p - q, axis=1)
        d1 = np.linalg.norm(pose.apply(p) - pose.apply(q), axis=1)
        assert np.abs(d0 - d1).max() < 1e-6


def test_sequence_file_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    scans = [
        RawScan(np.column_stack([rng.normal(size=(n, 3)), rng.uniform(size=n)]), i, labels=rng.integers(0, 3, n))
        for i, n in enumerate([4, 0, 9])
    ]
    poses = [random_pose(rng) for _ in scans]
    seq = ScanSequence(scans, poses, ("a", "b", "c"))
    paths = save_sequence(seq, tmp_path)
    back = load_scans(paths["scans"], paths["poses"], label_dir=paths["labels"], class_names=seq.class_names)
    assert len(back) == 3
    for s0, s1 in zip(seq.scans, back.scans):
        np.testing.assert_allclose(s1.points, s0.points.astype(np.float32))
        np.testing.assert_array_equal(s1.labels, s0.labels)
    for p0, p1 in zip(seq.poses, back.poses):
        assert p0 == p1
    assert read_labels(paths["labels"] / "000002.label").shape == (9,)


def test_dense_cloud_save_load(tmp_path):
    cloud = DensePointCloud(np.eye(3), [0, 0.5, 1], [0, 0, 1], gt_class=[1, 0, UNLABELED], class_names=("a", "b"))
    cloud.save(tmp_path / "c.npz")
    back = DensePointCloud.load(tmp_path / "c.npz")
    np.testing.assert_array_equal(back.positions, cloud.positions)
    np.testing.assert_array_equal(back.gt_class, cloud.gt_class)
    assert back.class_names == ("a", "b")


def test_dense_cloud_intensity_out_of_range():
    with pytest.raises(ValueError, match="intensity_norm"):
        DensePointCloud(np.zeros((1, 3)), [1.5], [0])


def test_write_bin_scan(tmp_path):
    write_bin_scan(tmp_path / "x.bin", [[1, 2, 3, 4]])
    assert (tmp_path / "x.bin").stat().st_size == 16
