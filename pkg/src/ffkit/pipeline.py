"""Glue between frames on disk, frustum samples and evaluation inputs."""

from __future__ import annotations

from typing import Iterable, Sequence

from .frustum import BuildStats, Detection2D, FrustumConfig, FrustumSample, build_samples
from .kitti import LabelRecord, SceneFrame
from .metrics import GroundTruth
from .synth import SynthSpec, generate_synthetic_scene, scene_rng


def detections_from_labels(labels: Iterable[LabelRecord]) -> list[Detection2D]:
    """Ground-truth 2D boxes as detector output, confidence from a 16th field or 1.0."""
    return [
        Detection2D(r.box2d, r.type, 1.0 if r.score is None else float(r.score), r.to_box3d())
        for r in labels
    ]


def ground_truth_from_labels(labels: Iterable[LabelRecord]) -> list[GroundTruth]:
    return [GroundTruth(r.to_box3d(), r.occluded, r.truncated) for r in labels]


def synth_frames(spec: SynthSpec, count: int, seed: int, start: int = 0) -> list[SceneFrame]:
    return [generate_synthetic_scene(spec, scene_rng(seed, i), f"{i:06d}") for i in range(start, start + count)]


def frames_to_samples(
    frames: Sequence[SceneFrame],
    mode: str,
    cfg: FrustumConfig,
    classes: Sequence[str],
    seed: int = 0,
    stats: BuildStats | None = None,
) -> list[FrustumSample]:
    stats = stats if stats is not None else BuildStats()
    out: list[FrustumSample] = []
    for f in frames:
        out.extend(build_samples(f, detections_from_labels(f.labels), mode, cfg, classes, seed, stats))
    return out
