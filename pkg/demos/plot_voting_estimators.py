"""
Electing a class from many noisy views
======================================

A simulated 2D segmenter that is right only about half the time still
produces clean point labels once enough views vote. This compares the
three election rules on the same votes, and shows why multiplying raw
scores is a poor idea.
"""

import numpy as np

from lidarvote import align, synth
from lidarvote.evaluation import EvalConfig, evaluate
from lidarvote.segmenter import OracleSegmenter
from lidarvote.viewgen import PoseNoiseParams, render, sample_poses
from lidarvote.voting import collect_votes, elect

seq = synth.generate(synth.default_scene(seed=2))
cloud = align(seq)
poses = sample_poses(seq.poses, PoseNoiseParams(K=20, seed=2))
views = (render(cloud, p, view_index=i) for i, p in enumerate(poses))

# scores ~ N(0, 1) with a +1 bump on the true class: argmax is noisy
seg = OracleSegmenter(cloud.gt_class, cloud.num_classes, margin=1.0, mode="calibrated", seed=2)
table = collect_votes(views, seg, len(cloud))

protocol = EvalConfig(class_merge=((synth.TERRAIN, synth.SIDEWALK),))
for est, mode in [("hard_sum", None), ("soft_sum", None), ("soft_compound", "log_softmax"), ("soft_compound", "raw_product")]:
    result = elect(table, est, mode or "log_softmax")
    report = evaluate(result.labels, cloud, seq.poses, protocol)
    print(f"{est:14s} {mode or '':12s} mIoU {report.miou:.3f}  coverage {report.coverage:.3f}")

print("votes per point (median of voted):", int(np.median(table.vote_count[table.vote_count > 0])))
