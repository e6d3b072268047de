"""End-to-end pseudo-labeling with per-stage caching in a work directory.

Stages run in order ``align -> render -> segment -> vote -> eval``; ``synth``
optionally writes a synthetic input sequence first. Each stage stores a
``stage.json`` holding a hash of its parameters and of the upstream stage's
hash; a stage is skipped when that hash is unchanged (unless forced), and
any upstream change propagates down the chain.

Work directory layout::

    synth/                 scans/, labels/, poses.txt, classes.txt (synth only)
    cloud.npz, cloud.json  aligned dense cloud
    views/                 view_%06d.png / .txt / .npz
    seg/                   labels_%06d.png [logits_%06d.bin] RESULTS_READY
    votes/                 table.npz
    labels/                pseudo_labels_<estimator>.bin (+ .json summary)
    report.json, report.txt, report_iou.csv
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from . import evaluation, pointcloud, segmenter, synth, viewgen, voting
from .errors import MissingGroundTruthError, ParseError, StageError

log = logging.getLogger(__name__)

STAGES = ("synth", "align", "render", "segment", "vote", "eval")

DEFAULTS: dict[str, Any] = {
    "paths.scans": None,
    "paths.poses": None,
    "paths.labels": None,
    "paths.classes": None,
    "paths.scan_format": "bin",
    "paths.work_dir": "work",
    "classes": None,
    "intensity.beta_min": 0.0,
    "intensity.beta_max": None,
    "intensity.eta_min": 0.0,
    "intensity.eta_max": 1.0,
    "views.K": 600,
    "views.theta": 30.0,
    "views.lambda": 1.0,
    "views.gamma": 1.0,
    "views.seed": 0,
    "camera.width": 1024,
    "camera.height": 512,
    "camera.hfov": 90.0,
    "render.splat_radius": 1,
    "render.d_min": 1.0,
    "render.d_max": 30.0,
    "segmenter.kind": "oracle",
    "segmenter.noise_rate": 0.0,
    "segmenter.margin": 10.0,
    "segmenter.mode": "onehot",
    "segmenter.seed": 0,
    "segmenter.result_dir": None,
    "vote.estimator": "hard_sum",
    "vote.compound_mode": "log_softmax",
    "vote.eps": voting.DEFAULT_EPS,
    "vote.dedup": False,
    "eval.lateral_crop": 30.0,
    "eval.height_crop": 10.0,
    "eval.class_merge": [],
    "eval.unlabeled_policy": "count_as_wrong",
    "synth.seed": 0,
    "synth.format": "bin",
    "run.workers": 1,
}

# parameters each stage's cache depends on (besides the upstream hash)
STAGE_KEYS = {
    "synth": ("synth.",),
    "align": ("paths.scans", "paths.poses", "paths.labels", "paths.classes", "paths.scan_format", "classes", "intensity."),
    "render": ("views.", "camera.", "render."),
    "segment": ("segmenter.",),
    "vote": ("vote.eps", "vote.dedup"),
}


def _flatten(d: Mapping, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping) and key != "eval.class_merge":
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class PipelineConfig:
    """Flat dotted-key settings; every key must appear in :data:`DEFAULTS`."""

    values: dict[str, Any] = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self) -> None:
        flat = _flatten(self.values)
        unknown = sorted(set(flat) - set(DEFAULTS))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        merged = dict(DEFAULTS)
        merged.update(flat)
        self.values = merged
        self.base_dir = Path(self.base_dir)
        self._validate()

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "PipelineConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            line = getattr(getattr(exc, "problem_mark", None), "line", None)
            raise ParseError(path, str(exc), None if line is None else line + 1) from None
        if not isinstance(data, Mapping):
            raise ParseError(path, "config must be a mapping of dotted keys")
        return cls(dict(data), base_dir=path.parent)

    def __getitem__(self, key: str):
        return self.values[key]

    def with_values(self, updates: Mapping[str, Any]) -> "PipelineConfig":
        vals = dict(self.values)
        vals.update(updates)
        return PipelineConfig(vals, self.base_dir)

    def _validate(self) -> None:
        # build each sub-config once so invalid values fail early
        self.noise_params()
        self.intrinsics()
        self.eval_config()
        if not (0 < self["render.d_min"] < self["render.d_max"]):
            raise ValueError("render.d_min must be in (0, render.d_max)")
        if self["segmenter.kind"] not in ("oracle", "external"):
            raise ValueError("segmenter.kind must be 'oracle' or 'external'")
        if self["vote.estimator"] not in voting.ESTIMATORS:
            raise ValueError(f"vote.estimator must be one of {voting.ESTIMATORS}")
        if self["vote.compound_mode"] not in voting.COMPOUND_MODES:
            raise ValueError(f"vote.compound_mode must be one of {voting.COMPOUND_MODES}")
        if int(self["run.workers"]) < 1:
            raise ValueError("run.workers must be >= 1")

    def path(self, key: str) -> Path | None:
        v = self[key]
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def work_dir(self) -> Path:
        return self.path("paths.work_dir")

    def noise_params(self) -> viewgen.PoseNoiseParams:
        return viewgen.PoseNoiseParams(
            theta=float(self["views.theta"]),
            lam=float(self["views.lambda"]),
            gamma=float(self["views.gamma"]),
            K=int(self["views.K"]),
            seed=int(self["views.seed"]),
        )

    def intrinsics(self) -> viewgen.CameraIntrinsics:
        return viewgen.CameraIntrinsics.from_fov(
            int(self["camera.width"]), int(self["camera.height"]), float(self["camera.hfov"])
        )

    def eval_config(self) -> evaluation.EvalConfig:
        return evaluation.EvalConfig(
            lateral_crop=float(self["eval.lateral_crop"]),
            height_crop=float(self["eval.height_crop"]),
            class_merge=tuple(tuple(p) for p in self["eval.class_merge"]),
            unlabeled_policy=self["eval.unlabeled_policy"],
        )

    def stage_params(self, stage: str) -> dict:
        prefixes = STAGE_KEYS[stage]
        return {k: v for k, v in sorted(self.values.items()) if any(k == p or (p.endswith(".") and k.startswith(p)) for p in prefixes)}


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _hash_files(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


class Pipeline:
    """Runs stages against a work directory, reusing valid caches."""

    def __init__(self, config: PipelineConfig, force: bool = False, workers: int | None = None):
        self.config = config
        self.force = force
        self.workers = int(workers if workers is not None else config["run.workers"])
        self.work = config.work_dir
        self._done: dict[str, str] = {}

    # -- cache bookkeeping -------------------------------------------------

    def _stage_file(self, stage: str) -> Path:
        return {
            "synth": self.work / "synth" / "stage.json",
            "align": self.work / "cloud.json",
            "render": self.work / "views" / "stage.json",
            "segment": self.work / "seg" / "stage.json",
            "vote": self.work / "votes" / "stage.json",
        }[stage]

    def _cached_key(self, stage: str) -> str | None:
        f = self._stage_file(stage)
        if not f.exists():
            return None
        return json.loads(f.read_text()).get("key")

    def _fresh(self, stage: str, key: str) -> bool:
        fresh = not self.force and self._cached_key(stage) == key
        if fresh:
            log.info("%s: cached", stage)
        return fresh

    def _commit(self, stage: str, key: str, **extra) -> None:
        f = self._stage_file(stage)
        f.parent.mkdir(parents=True, exist_ok=True)
        f.write_text(json.dumps({"stage": stage, "key": key, **extra}, indent=2, sort_keys=True) + "\n")
        log.info("%s: done", stage)

    def _run(self, stage: str, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc

    # -- inputs -------------------------------------------------------------

    def _input_paths(self) -> dict[str, Path | None]:
        cfg = self.config
        scans = cfg.path("paths.scans")
        if scans is None:
            root = self.work / "synth"
            return {
                "scans": root / "scans",
                "poses": root / "poses.txt",
                "labels": root / "labels",
                "classes": root / "classes.txt",
            }
        return {
            "scans": scans,
            "poses": cfg.path("paths.poses"),
            "labels": cfg.path("paths.labels"),
            "classes": cfg.path("paths.classes"),
        }

    def _class_names(self, classes_file: Path | None) -> tuple[str, ...]:
        if self.config["classes"]:
            return tuple(self.config["classes"])
        if classes_file is not None and classes_file.exists():
            return tuple(line.strip() for line in classes_file.read_text().splitlines() if line.strip())
        return ()

    def load_sequence(self) -> pointcloud.ScanSequence:
        p = self._input_paths()
        if p["poses"] is None:
            raise ValueError("paths.poses is required when paths.scans is set")
        labels = p["labels"] if p["labels"] is not None and p["labels"].exists() else None
        return pointcloud.load_scans(
            p["scans"], p["poses"], self.config["paths.scan_format"], labels, self._class_names(p["classes"])
        )

    # -- stages ---------------------------------------------------------------

    def synth(self) -> str:
        if "synth" in self._done:
            return self._done["synth"]
        self._done["synth"] = key = self._synth()
        return key

    def _synth(self) -> str:
        cfg = self.config
        key = _hash({"stage": "synth", **cfg.stage_params("synth")})
        if self._fresh("synth", key):
            return key

        def go():
            seq = synth.generate(synth.default_scene(int(cfg["synth.seed"])))
            pointcloud.save_sequence(seq, self.work / "synth", cfg["synth.format"])

        self._run("synth", go)
        self._commit("synth", key)
        return key

    def align(self) -> str:
        if "align" in self._done:
            return self._done["align"]
        self._done["align"] = key = self._align()
        return key

    def _align(self) -> str:
        cfg = self.config
        if cfg["paths.scans"] is None:
            self.synth()

        def key_of():
            p = self._input_paths()
            files = pointcloud.list_scan_files(p["scans"], cfg["paths.scan_format"])
            if p["poses"] is not None and p["poses"].exists():
                files.append(p["poses"])
            if p["labels"] is not None and p["labels"].exists():
                files += sorted(p["labels"].glob("*.label"))
            if p["classes"] is not None and p["classes"].exists():
                files.append(p["classes"])
            return _hash({"stage": "align", "inputs": _hash_files(files), **cfg.stage_params("align")})

        key = self._run("align", key_of)
        if self._fresh("align", key):
            return key

        def go():
            seq = self.load_sequence()
            cloud = pointcloud.align(
                seq,
                cfg["intensity.beta_min"],
                cfg["intensity.beta_max"],
                float(cfg["intensity.eta_min"]),
                float(cfg["intensity.eta_max"]),
            )
            self.work.mkdir(parents=True, exist_ok=True)
            cloud.save(self.work / "cloud.npz")
            pointcloud.save_poses(self.work / "trajectory.txt", seq.poses)

        self._run("align", go)
        self._commit("align", key)
        return key

    def load_cloud(self) -> pointcloud.DensePointCloud:
        return pointcloud.DensePointCloud.load(self.work / "cloud.npz")

    def trajectory(self) -> list[pointcloud.Pose]:
        return pointcloud.load_poses(self.work / "trajectory.txt")

    def render(self) -> str:
        if "render" in self._done:
            return self._done["render"]
        self._done["render"] = key = self._render()
        return key

    def _render(self) -> str:
        cfg = self.config
        up = self.align()
        key = _hash({"stage": "render", "up": up, **cfg.stage_params("render")})
        if self._fresh("render", key):
            return key

        def go():
            cloud = self.load_cloud()
            poses = viewgen.sample_poses(self.trajectory(), cfg.noise_params())
            out = self.work / "views"
            _clear(out, ("view_*",))
            out.mkdir(parents=True, exist_ok=True)
            views = viewgen.render_views(
                cloud,
                poses,
                cfg.intrinsics(),
                int(cfg["render.splat_radius"]),
                float(cfg["render.d_min"]),
                float(cfg["render.d_max"]),
                workers=self.workers,
            )
            for view in views:
                viewgen.export_view(view, out, with_arrays=True)
            return len(poses)

        n = self._run("render", go)
        self._commit("render", key, views=n)
        return key

    def view_count(self) -> int:
        return json.loads(self._stage_file("render").read_text())["views"]

    def result_dir(self) -> Path:
        return self.config.path("segmenter.result_dir") or self.work / "seg"

    def make_segmenter(self, cloud: pointcloud.DensePointCloud | None = None):
        cfg = self.config
        C = (cloud or self.load_cloud()).num_classes
        if cfg["segmenter.kind"] == "external":
            return segmenter.ExternalSegmenter(self.result_dir(), C, float(cfg["segmenter.margin"]))
        cloud = cloud or self.load_cloud()
        return segmenter.OracleSegmenter(
            cloud.gt_class,
            C,
            float(cfg["segmenter.noise_rate"]),
            float(cfg["segmenter.margin"]),
            int(cfg["segmenter.seed"]),
            cfg["segmenter.mode"],
        )

    def segment(self) -> str:
        if "segment" in self._done:
            return self._done["segment"]
        self._done["segment"] = key = self._segment()
        return key

    def _segment(self) -> str:
        cfg = self.config
        up = self.render()
        n = self.view_count()
        out = self.result_dir()

        if cfg["segmenter.kind"] == "external":
            def key_of():
                seg = segmenter.ExternalSegmenter(out, 0)
                seg.check_ready(range(n))
                files = sorted(p for p in out.iterdir() if p.name.startswith(("labels_", "logits_")))
                return _hash({"stage": "segment", "up": up, "results": _hash_files(files), **cfg.stage_params("segment")})

            key = self._run("segment", key_of)
            if not self._fresh("segment", key):
                self._commit("segment", key)
            return key

        key = _hash({"stage": "segment", "up": up, **cfg.stage_params("segment")})
        if self._fresh("segment", key):
            return key

        def go():
            cloud = self.load_cloud()
            seg = self.make_segmenter(cloud)
            _clear(out, ("labels_*", "logits_*", segmenter.READY_MARKER))
            out.mkdir(parents=True, exist_ok=True)
            with_logits = cfg["segmenter.mode"] != "onehot"

            def one(i):
                view = viewgen.load_view(self.work / "views", i)
                segmenter.write_result(seg.segment(view), out, i, with_logits)

            _for_each(one, range(n), self.workers)
            segmenter.mark_ready(out)

        self._run("segment", go)
        self._commit("segment", key)
        return key

    def vote(self) -> str:
        if "vote" in self._done:
            return self._done["vote"]
        self._done["vote"] = key = self._vote()
        return key

    def _vote(self) -> str:
        cfg = self.config
        up = self.segment()
        key = _hash({"stage": "vote", "up": up, **cfg.stage_params("vote")})
        if self._fresh("vote", key):
            return key

        def go():
            cloud = self.load_cloud()
            n = self.view_count()
            seg = segmenter.ExternalSegmenter(self.result_dir(), cloud.num_classes, float(cfg["segmenter.margin"]))
            views = (viewgen.load_view(self.work / "views", i) for i in range(n))
            table = voting.collect_votes(
                views, seg, len(cloud), self.workers, bool(cfg["vote.dedup"]), float(cfg["vote.eps"])
            )
            (self.work / "votes").mkdir(parents=True, exist_ok=True)
            table.save(self.work / "votes" / "table.npz")

        self._run("vote", go)
        self._commit("vote", key)
        return key

    def label_path(self, estimator: str | None = None, compound_mode: str | None = None) -> Path:
        est = estimator or self.config["vote.estimator"]
        mode = compound_mode or self.config["vote.compound_mode"]
        suffix = "_raw" if est == "soft_compound" and mode == "raw_product" else ""
        return self.work / "labels" / f"pseudo_labels_{est}{suffix}.bin"

    def elect(self, estimator: str | None = None, compound_mode: str | None = None) -> Path:
        """Write the pseudo-label file for one estimator from the cached votes."""
        est = estimator or self.config["vote.estimator"]
        mode = compound_mode or self.config["vote.compound_mode"]
        self.vote()

        def go():
            table = voting.VoteTable.load(self.work / "votes" / "table.npz")
            result = voting.elect(table, est, mode)
            path = self.label_path(est, mode)
            path.parent.mkdir(parents=True, exist_ok=True)
            voting.write_pseudo_labels(path, result, table)
            return path

        return self._run("vote", go)

    def evaluate(self, estimator: str | None = None, compound_mode: str | None = None) -> evaluation.EvalReport:
        path = self.elect(estimator, compound_mode)

        def go():
            cloud = self.load_cloud()
            if cloud.gt_class is None:
                raise MissingGroundTruthError("no ground-truth labels available for evaluation")
            pred = pointcloud.read_labels(path, len(cloud))
            report = evaluation.evaluate(pred, cloud, self.trajectory(), self.config.eval_config())
            report.write(self.work, "report")
            return report

        return self._run("eval", go)

    def run(self) -> dict:
        path = self.elect()
        out = {"labels": path, "report": None}
        if self.load_cloud().gt_class is not None:
            out["report"] = self.evaluate()
        return out


def _clear(directory: Path, patterns) -> None:
    if not directory.exists():
        return
    for pat in patterns:
        for p in directory.glob(pat):
            p.unlink()


def _for_each(fn, items, workers: int) -> None:
    if workers <= 1:
        for it in items:
            fn(it)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for _ in pool.map(fn, items):
            pass


def run_pipeline(config: PipelineConfig | Mapping | str | os.PathLike, force: bool = False, workers: int | None = None) -> dict:
    """Run every stage; returns ``{"labels": Path, "report": EvalReport | None}``."""
    if isinstance(config, (str, os.PathLike)):
        config = PipelineConfig.from_file(config)
    elif not isinstance(config, PipelineConfig):
        config = PipelineConfig(dict(config))
    return Pipeline(config, force=force, workers=workers).run()
