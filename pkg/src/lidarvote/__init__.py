"""3D semantic pseudo-labels for LiDAR sequences from multi-view 2D segmentation."""

from .errors import (
    LidarVoteError,
    MissingGroundTruthError,
    MissingResultError,
    ParseError,
    PoseError,
    SegmentationError,
    ShapeMismatchError,
    StageError,
)
from .evaluation import EvalConfig, EvalReport, compute_iou, crop_mask, evaluate, merge_classes
from .pointcloud import (
    UNLABELED,
    DensePointCloud,
    Pose,
    RawScan,
    ScanSequence,
    align,
    clip_intensity,
    load_poses,
    load_scans,
    rescale_intensity,
)
from .segmenter import (
    ExternalSegmenter,
    OracleSegmenter,
    SegmentationResult,
    Segmenter,
    external_segment,
    oracle_segment,
)
from .synth import SceneSpec, default_scene, generate
from .viewgen import (
    EMPTY,
    CameraIntrinsics,
    PoseNoiseParams,
    RenderedView,
    export_views,
    render,
    sample_poses,
)
from .voting import PointLabels, VoteTable, accumulate, backproject, collect_votes, elect

__version__ = "0.1.0"
