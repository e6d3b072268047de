import numpy as np
import pytest
from PIL import Image

from lidarvote.errors import MissingGroundTruthError, MissingResultError, SegmentationError, ShapeMismatchError
from lidarvote.pointcloud import UNLABELED, Pose
from lidarvote.segmenter import (
    READY_MARKER,
    ExternalSegmenter,
    OracleSegmenter,
    SegmentationResult,
    Segmenter,
    external_segment,
    mark_ready,
    oracle_segment,
    write_result,
)
from lidarvote.viewgen import CameraIntrinsics, RenderedView, export_views, render

from conftest import make_cloud


def full_view(h, w, n_points, rng, index=0):
    """A view where every pixel is covered, points assigned at random."""
    return RenderedView(
        view_index=index,
        pose=Pose.identity(),
        image=np.zeros((h, w), np.uint8),
        depth=np.ones((h, w), np.float32),
        point_index=rng.integers(0, n_points, (h, w)).astype(np.int32),
        intrinsics=CameraIntrinsics.from_fov(w, h),
    )


@pytest.fixture
def scene():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-4, 4, 400), rng.uniform(-3, 3, 400), rng.uniform(3, 15, 400)])
    gt = rng.integers(0, 3, 400)
    cloud = make_cloud(pts, gt=gt)
    view = render(cloud, Pose.identity(), CameraIntrinsics.from_fov(48, 32), 1, view_index=4)
    return cloud, view


def check_contract(view, res, C):
    assert res.labels.shape == view.image.shape
    assert res.logits.shape == view.image.shape + (C,)
    np.testing.assert_array_equal(res.labels, np.argmax(res.logits, axis=-1))
    assert np.all(np.isfinite(res.logits))


def test_noiseless_oracle(scene):
    cloud, view = scene
    res = oracle_segment(view, cloud.gt_class, 3)
    check_contract(view, res, 3)
    m = view.mask
    np.testing.assert_array_equal(res.labels[m], cloud.gt_class[view.point_index[m]])
    assert np.all(res.logits[m].max(axis=-1) == 10.0)
    assert not res.logits[~m].any() and not res.labels[~m].any()


def test_full_flip_binary():
    rng = np.random.default_rng(1)
    gt = rng.integers(0, 2, 50)
    view = full_view(20, 30, 50, rng)
    res = oracle_segment(view, gt, 2, noise_rate=1.0)
    assert np.all(res.labels != gt[view.point_index])


def test_flip_rate_concentrates():
    rng = np.random.default_rng(2)
    gt = rng.integers(0, 5, 1000)
    view = full_view(1000, 1000, 1000, rng)
    res = oracle_segment(view, gt, 5, noise_rate=0.5, seed=11)
    wrong = np.mean(res.labels != gt[view.point_index])
    assert abs(wrong - 0.5) <= 0.01
    # wrong labels spread evenly over the other 4 classes
    truth = gt[view.point_index]
    offsets = (res.labels - truth) % 5
    counts = np.bincount(offsets[offsets > 0], minlength=5)[1:]
    assert np.all(np.abs(counts / counts.sum() - 0.25) < 0.01)


def test_oracle_deterministic_per_view(scene):
    cloud, view = scene
    seg = OracleSegmenter(cloud.gt_class, 3, noise_rate=0.4, seed=3, mode="calibrated", margin=1.0)
    a, b = seg.segment(view), seg.segment(view)
    np.testing.assert_array_equal(a.logits, b.logits)
    other = OracleSegmenter(cloud.gt_class, 3, noise_rate=0.4, seed=4, mode="calibrated", margin=1.0)
    assert not np.array_equal(a.logits, other.segment(view).logits)


def test_calibrated_mode_contract(scene):
    cloud, view = scene
    res = oracle_segment(view, cloud.gt_class, 3, margin=2.0, mode="calibrated")
    check_contract(view, res, 3)
    # high margin: argmax mostly the true class
    m = view.mask
    assert np.mean(res.labels[m] == cloud.gt_class[view.point_index[m]]) > 0.8


def test_oracle_unlabeled_points_get_zero_scores():
    gt = np.array([UNLABELED])
    view = render(make_cloud([[0, 0, 5.0]], gt=gt), Pose.identity(), CameraIntrinsics.from_fov(8, 8))
    res = oracle_segment(view, gt, 3)
    assert not res.logits.any()


def test_oracle_errors(scene):
    _, view = scene
    with pytest.raises(MissingGroundTruthError):
        OracleSegmenter(None, 3)
    with pytest.raises(ValueError):
        OracleSegmenter(np.zeros(3, int), 3, noise_rate=1.5)
    with pytest.raises(ValueError):
        OracleSegmenter(np.zeros(3, int), 3, margin=0)


def test_protocol_membership(scene, tmp_path):
    cloud, _ = scene
    assert isinstance(OracleSegmenter(cloud.gt_class, 3), Segmenter)
    assert isinstance(ExternalSegmenter(tmp_path, 3), Segmenter)


def test_result_rejects_inconsistent_labels():
    logits = np.zeros((2, 2, 3), np.float32)
    logits[..., 1] = 1
    with pytest.raises(SegmentationError, match="argmax"):
        SegmentationResult(np.zeros((2, 2), int), logits)
    with pytest.raises(ShapeMismatchError):
        SegmentationResult(np.ones((3, 2), int), logits)
    logits[0, 0, 0] = np.nan
    with pytest.raises(SegmentationError, match="non-finite"):
        SegmentationResult(np.ones((2, 2), int), logits)


@pytest.fixture
def exchange(tmp_path, scene):
    cloud, _ = scene
    intr = CameraIntrinsics.from_fov(24, 16)
    views = [render(cloud, Pose.identity(), intr, view_index=i) for i in range(10)]
    vdir, rdir = tmp_path / "views", tmp_path / "results"
    export_views(views, vdir)
    rdir.mkdir()
    return views, vdir, rdir


def test_external_constant_labels(exchange):
    views, vdir, rdir = exchange
    for v in views:
        Image.fromarray(np.full(v.image.shape, 3, np.uint8)).save(rdir / f"labels_{v.view_index:06d}.png")
    mark_ready(rdir)
    out = external_segment(vdir, rdir, 5)
    assert sorted(out) == list(range(10))
    assert all(np.all(r.labels == 3) for r in out.values())
    assert np.all(out[0].logits[..., 3] == 10.0)


def test_external_logits_roundtrip(exchange):
    views, vdir, rdir = exchange
    rng = np.random.default_rng(5)
    written = {}
    for v in views:
        logits = rng.standard_normal(v.image.shape + (4,)).astype(np.float32)
        res = SegmentationResult(np.argmax(logits, -1), logits)
        write_result(res, rdir, v.view_index)
        written[v.view_index] = res
    mark_ready(rdir)
    out = external_segment(vdir, rdir, 4)
    for i, res in written.items():
        np.testing.assert_array_equal(out[i].logits, res.logits)
        np.testing.assert_array_equal(out[i].labels, res.labels)
    # layout is [height][width][C], little-endian float32
    raw = np.fromfile(rdir / "logits_000003.bin", dtype="<f4")
    np.testing.assert_array_equal(raw.reshape(16, 24, 4), written[3].logits)


def test_external_wrong_logit_length(exchange):
    views, vdir, rdir = exchange
    for v in views:
        write_result(SegmentationResult.from_labels(np.zeros(v.image.shape, int), 3), rdir, v.view_index)
    (rdir / "logits_000002.bin").write_bytes(b"\x00" * 12)
    mark_ready(rdir)
    with pytest.raises(ShapeMismatchError):
        external_segment(vdir, rdir, 3)


def test_external_missing_view_five(exchange):
    views, vdir, rdir = exchange
    for v in views:
        if v.view_index != 5:
            write_result(SegmentationResult.from_labels(np.zeros(v.image.shape, int), 3), rdir, v.view_index)
    mark_ready(rdir)
    with pytest.raises(MissingResultError) as info:
        external_segment(vdir, rdir, 3)
    assert info.value.view_index == 5 and "5" in str(info.value)


def test_external_not_ready(exchange):
    views, vdir, rdir = exchange
    for v in views:
        write_result(SegmentationResult.from_labels(np.zeros(v.image.shape, int), 3), rdir, v.view_index)
    with pytest.raises(SegmentationError, match=READY_MARKER):
        external_segment(vdir, rdir, 3)


def test_external_nonfinite_and_bad_class(exchange):
    views, vdir, rdir = exchange
    v = views[0]
    logits = np.zeros(v.image.shape + (3,), np.float32)
    logits[0, 0, 1] = np.inf
    Image.fromarray(np.zeros(v.image.shape, np.uint8)).save(rdir / "labels_000000.png")
    logits.astype("<f4").tofile(rdir / "logits_000000.bin")
    seg = ExternalSegmenter(rdir, 3)
    with pytest.raises(SegmentationError, match="non-finite"):
        seg.segment(v)
    Image.fromarray(np.full(v.image.shape, 7, np.uint8)).save(rdir / "labels_000000.png")
    (rdir / "logits_000000.bin").unlink()
    with pytest.raises(SegmentationError, match="class index"):
        seg.segment(v)


def test_external_label_shape_mismatch(exchange):
    views, _, rdir = exchange
    Image.fromarray(np.zeros((5, 5), np.uint8)).save(rdir / "labels_000000.png")
    with pytest.raises(ShapeMismatchError):
        ExternalSegmenter(rdir, 3).segment(views[0])
