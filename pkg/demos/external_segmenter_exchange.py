"""
Plugging in an external 2D segmenter
====================================

Views go out as PNG files with a text sidecar; a segmenter (any program)
writes ``labels_%06d.png`` and optionally ``logits_%06d.bin`` next to a
``RESULTS_READY`` marker. Here a trivial "segmenter" thresholds intensity:
dark pixels are road, everything else is manmade.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from lidarvote import align, synth
from lidarvote.evaluation import evaluate
from lidarvote.segmenter import ExternalSegmenter, mark_ready
from lidarvote.viewgen import PoseNoiseParams, export_views, render, sample_poses
from lidarvote.voting import collect_votes, elect

seq = synth.generate(synth.default_scene(seed=4))
cloud = align(seq)
poses = sample_poses(seq.poses, PoseNoiseParams(K=8, seed=4))
views = [render(cloud, p, view_index=i) for i, p in enumerate(poses)]

root = Path("demo_output") / "exchange"
export_views(views, root / "views")

# the "external program": read each view image, write a label image
results = root / "results"
results.mkdir(parents=True, exist_ok=True)
for png in sorted((root / "views").glob("view_*.png")):
    grey = np.asarray(Image.open(png))
    labels = np.where(grey < 0.25 * 255, synth.ROAD, synth.MANMADE).astype(np.uint8)
    Image.fromarray(labels).save(results / png.name.replace("view_", "labels_"))
mark_ready(results)

seg = ExternalSegmenter(results, cloud.num_classes)
table = collect_votes(views, seg, len(cloud))
report = evaluate(elect(table).labels, cloud, seq.poses)
print(report.to_text())
