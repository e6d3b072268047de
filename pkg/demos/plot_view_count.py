"""
How many views are enough?
==========================

With a segmenter that flips 30% of its pixels, label quality climbs fast
with the number of rendered views. Because poses are drawn one after
another, one long run gives the vote table for every shorter run too.
"""

from lidarvote import align, synth
from lidarvote.evaluation import EvalConfig, evaluate
from lidarvote.segmenter import OracleSegmenter
from lidarvote.viewgen import PoseNoiseParams, render, sample_poses
from lidarvote.voting import VoteTable, accumulate, backproject, elect

seq = synth.generate(synth.default_scene(seed=3))
cloud = align(seq)
seg = OracleSegmenter(cloud.gt_class, cloud.num_classes, noise_rate=0.3, seed=3)
protocol = EvalConfig(class_merge=((synth.TERRAIN, synth.SIDEWALK),))

table = VoteTable(len(cloud), cloud.num_classes)
checkpoints = (1, 2, 5, 10, 20, 50)
for i, pose in enumerate(sample_poses(seq.poses, PoseNoiseParams(K=max(checkpoints), seed=3))):
    view = render(cloud, pose, view_index=i)
    accumulate(table, backproject(view, seg.segment(view)))
    if i + 1 in checkpoints:
        report = evaluate(elect(table).labels, cloud, seq.poses, protocol)
        print(f"K={i + 1:3d}  mIoU {report.miou:.3f}  coverage {report.coverage:.3f}")
