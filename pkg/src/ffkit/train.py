"""Loss, training loop, inference and model checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import tensor as T
from .codec import BoxParams, SizePriorTable, decode_box, encode_heading
from .errors import ConfigMismatch, EmptyDataset, MissingGroundTruth, NumericError
from .frustum import FrustumSample, frame_key
from .geometry import Box3D, points_in_box3d, rot_y
from .metrics import GroundTruth, MatchConfig, ScoredBox, evaluate
from .model import DetectionResult, FusionNet, ModelConfig, check_sample_shapes, select_and_center, split_params

log = logging.getLogger(__name__)

# LiDAR range noise scatters surface returns a few mm to either side of a face
MASK_MARGIN = 0.02

LOSS_KEYS = ("seg", "center", "heading_cls", "heading_res", "size", "total")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    box_weight: float = 1.0  # weight of the box terms against segmentation
    seed: int = 0
    val_every: int = 1
    residual_floor: float = -0.9  # size residuals are clamped here at inference
    score_mode: str = "carry"  # "carry": 2D confidence; "fused": times mask and heading confidence
    # pick box-network points with the gt mask during training (inference always uses the prediction)
    gt_selection: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------- targets


@dataclass
class Targets:
    mask: np.ndarray  # (n,) int64, 1 inside the gt box
    center: np.ndarray  # gt center in the normalized frame
    heading_bin: int
    heading_res: float
    size_res: np.ndarray


def normalized_gt(sample: FrustumSample) -> Box3D:
    b = sample.gt_box
    c = rot_y(-sample.frame_rotation) @ b.center
    return Box3D(c[0], c[1], c[2], b.l, b.w, b.h, b.yaw - sample.frame_rotation, b.label)


def make_targets(sample: FrustumSample, priors: SizePriorTable) -> Targets:
    if sample.gt_box is None:
        raise MissingGroundTruth(f"sample {sample.frame_id}/{sample.object_index} has no ground-truth box")
    gt = normalized_gt(sample)
    mask = points_in_box3d(sample.points[:, :3].astype(np.float64), gt, margin=MASK_MARGIN).astype(np.int64)
    code = encode_heading(gt.yaw)
    prior = np.asarray(priors[sample.label], dtype=np.float64)
    return Targets(mask, gt.center, code.bin, code.residual, np.asarray(gt.size) / prior - 1.0)


# ------------------------------------------------------------------- loss


def box_loss_terms(out: torch.Tensor, centroids: torch.Tensor, tg: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    p = split_params(out)
    center = T.smooth_l1(p["center"] - (tg["center"] - centroids)).sum(-1).mean()
    hcls = T.cross_entropy(p["heading_logits"], tg["heading_bin"])
    res = torch.gather(p["heading_residuals"], -1, tg["heading_bin"].long().unsqueeze(-1)).squeeze(-1)
    hres = T.smooth_l1(res - tg["heading_res"]).mean()
    size = T.smooth_l1(p["size"] - tg["size_res"]).sum(-1).mean()
    return {"center": center, "heading_cls": hcls, "heading_res": hres, "size": size}


def loss(
    seg_logits: torch.Tensor,
    out: torch.Tensor,
    centroids: torch.Tensor,
    tg: dict[str, torch.Tensor],
    box_weight: float = 1.0,
) -> dict[str, torch.Tensor]:
    """Segmentation cross-entropy plus weighted box terms; every component is returned."""
    terms = {"seg": T.cross_entropy(seg_logits.reshape(-1, 2), tg["mask"].reshape(-1))}
    terms.update(box_loss_terms(out, centroids, tg))
    box = terms["center"] + terms["heading_cls"] + terms["heading_res"] + terms["size"]
    terms["total"] = terms["seg"] + box_weight * box
    return terms


def sample_loss(model: FusionNet, sample: FrustumSample, priors: SizePriorTable, box_weight: float = 1.0, rng=None):
    """Loss of one sample end to end; raises MissingGroundTruth without a gt box."""
    batch = Batch.from_samples([sample], model.cfg, [make_targets(sample, priors)])
    rng = rng if rng is not None else np.random.default_rng(0)
    seg, out, cent, _ = forward(model, batch, [rng])
    return loss(seg, out, cent, batch.targets, box_weight)


# ----------------------------------------------------------------- batches


@dataclass
class Batch:
    points: torch.Tensor
    onehot: torch.Tensor
    crops: torch.Tensor
    targets: dict | None

    @classmethod
    def from_samples(cls, samples: Sequence[FrustumSample], cfg: ModelConfig, targets: Sequence[Targets] | None = None):
        dt = cfg.torch_dtype
        pts = torch.as_tensor(np.stack([s.points for s in samples]), dtype=dt)
        oh = torch.as_tensor(np.stack([s.class_code for s in samples]), dtype=dt)
        crops = torch.as_tensor(np.stack([s.pixels for s in samples]).astype(np.float64) / 255.0 - 0.5, dtype=dt)
        tg = None
        if targets is not None:
            tg = {
                "mask": torch.as_tensor(np.stack([t.mask for t in targets])),
                "center": torch.as_tensor(np.stack([t.center for t in targets]), dtype=dt),
                "heading_bin": torch.as_tensor([t.heading_bin for t in targets]),
                "heading_res": torch.as_tensor([t.heading_res for t in targets], dtype=dt),
                "size_res": torch.as_tensor(np.stack([t.size_res for t in targets]), dtype=dt),
            }
        return cls(pts, oh, crops, tg)


def forward(model: FusionNet, batch: Batch, rngs: Sequence[np.random.Generator], selections=None):
    """Segment, select, and regress; returns (seg logits, outputs, centroids, selections).

    Passing ``selections`` from an earlier call reuses them instead of
    selecting again, which keeps the map from parameters to loss smooth.
    """
    seg = model.segment(batch.points, batch.onehot)
    if selections is None:
        sels = [select_and_center(p, l, model.cfg.m_points, r) for p, l, r in zip(batch.points, seg, rngs)]
    else:
        sels = list(selections)
    obj = torch.stack([s.points for s in sels])
    cent = torch.as_tensor(np.stack([s.centroid for s in sels]), dtype=model.dtype)
    out = model.fuse(model.point_feature(obj, batch.onehot), model.image_feature(batch.crops))
    return seg, out, cent, sels


def gt_selections(batch: Batch, m: int, rngs: Sequence[np.random.Generator]):
    """Selections driven by the target masks instead of the predicted ones."""
    out = []
    for pts, mask, r in zip(batch.points, batch.targets["mask"], rngs):
        logits = torch.stack([(mask == 0), (mask == 1)], dim=-1).to(pts.dtype)
        out.append(select_and_center(pts, logits, m, r))
    return out


# ---------------------------------------------------------------- training


def _finite_loss(terms: dict[str, torch.Tensor]) -> None:
    if not bool(torch.isfinite(terms["total"])):
        raise NumericError(f"non-finite training loss {float(terms['total'])}")


def train(
    samples: Sequence[FrustumSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    priors: SizePriorTable,
    val_samples: Sequence[FrustumSample] | None = None,
    val_eval: Callable[[list[DetectionResult]], dict] | None = None,
    log_path: str | Path | None = None,
    model: FusionNet | None = None,
) -> tuple[FusionNet, list[dict]]:
    """Minibatch Adam training; deterministic for fixed seeds.

    ``val_eval`` maps validation detections to a metrics dict for the log; by
    default AP is computed against the samples' own ground-truth boxes.
    """
    samples = list(samples)
    if not samples:
        raise EmptyDataset("no training samples")
    for s in samples:
        check_sample_shapes(model_cfg, s)
    model = model if model is not None else FusionNet(model_cfg, seed=train_cfg.seed)
    targets = [make_targets(s, priors) for s in samples]
    params = list(model.parameters())
    state, hyper = T.AdamState(), T.AdamHyper(lr=train_cfg.lr)
    records: list[dict] = []
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(train_cfg.epochs):
            t0 = time.perf_counter()
            order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(samples))
            sums = dict.fromkeys(LOSS_KEYS, 0.0)
            model.train()
            for start in range(0, len(order), train_cfg.batch_size):
                ids = order[start : start + train_cfg.batch_size]
                batch = Batch.from_samples([samples[i] for i in ids], model_cfg, [targets[i] for i in ids])
                rngs = [np.random.default_rng([train_cfg.seed, epoch, int(i)]) for i in ids]
                sels = gt_selections(batch, model_cfg.m_points, rngs) if train_cfg.gt_selection else None
                seg, out, cent, _ = forward(model, batch, rngs, selections=sels)
                terms = loss(seg, out, cent, batch.targets, train_cfg.box_weight)
                _finite_loss(terms)
                grads = torch.autograd.grad(terms["total"], params, allow_unused=True)
                grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
                T.optimizer_step(params, grads, state, hyper)
                for k in LOSS_KEYS:
                    sums[k] += float(terms[k].detach()) * len(ids)
            rec = {"epoch": epoch + 1, "loss": {k: v / len(samples) for k, v in sums.items()}}
            if val_samples and (epoch + 1) % train_cfg.val_every == 0:
                dets = infer(val_samples, model, priors, train_cfg)
                rec["val"] = val_eval(dets) if val_eval else sample_ap(dets, val_samples)
            rec["wall_time"] = time.perf_counter() - t0
            records.append(rec)
            log.info("epoch %d %s", epoch + 1, json.dumps(rec["loss"]))
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    return model, records


# ---------------------------------------------------------------- inference


def _score(sample: FrustumSample, seg: torch.Tensor, out: torch.Tensor, mode: str) -> float:
    if mode == "carry":
        return float(sample.confidence)
    if mode != "fused":
        raise ValueError(f"unknown score mode {mode!r}")
    fg = torch.softmax(seg, dim=-1)[:, 1]
    mask = fg > 0.5
    seg_conf = float(fg[mask].mean()) if bool(mask.any()) else 0.0
    head_conf = float(torch.softmax(split_params(out)["heading_logits"], dim=-1).max())
    return float(sample.confidence) * seg_conf * head_conf


def infer(
    samples: Sequence[FrustumSample],
    model: FusionNet,
    priors: SizePriorTable,
    train_cfg: TrainConfig | None = None,
    batch_size: int = 64,
    timing: dict | None = None,
) -> list[DetectionResult]:
    """One DetectionResult per sample; selection randomness is seeded per sample."""
    cfg = train_cfg or TrainConfig()
    results: list[DetectionResult] = []
    samples = list(samples)
    for s in samples:
        check_sample_shapes(model.cfg, s)
    was_training = model.training
    model.eval()
    t0 = time.perf_counter()
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            batch = Batch.from_samples(chunk, model.cfg)
            rngs = [np.random.default_rng([cfg.seed, frame_key(s.frame_id), s.object_index]) for s in chunk]
            seg, out, cent, sels = forward(model, batch, rngs)
            for s, sg, o, sel in zip(chunk, seg, out, sels):
                params = BoxParams.from_vector(o.double().numpy())
                params.size_residual = np.maximum(params.size_residual, cfg.residual_floor)
                box = decode_box(params, s.label, sel.centroid, s.frame_rotation, priors)
                results.append(
                    DetectionResult(
                        box=box,
                        label=s.label,
                        confidence=float(s.confidence),
                        mask=sel.foreground.copy(),
                        frame_id=s.frame_id,
                        object_index=s.object_index,
                        score=_score(s, sg, o, cfg.score_mode),
                    )
                )
    elapsed = time.perf_counter() - t0
    if timing is not None:
        frames = {s.frame_id for s in samples}
        timing.update(
            total_s=elapsed,
            objects=len(samples),
            frames=len(frames),
            per_object_ms=1e3 * elapsed / max(len(samples), 1),
            per_frame_ms=1e3 * elapsed / max(len(frames), 1),
        )
    model.train(was_training)
    return results


def group_by_frame(dets: Sequence[DetectionResult]) -> dict[str, list[ScoredBox]]:
    out: dict[str, list[ScoredBox]] = {}
    for d in dets:
        out.setdefault(d.frame_id, []).append(ScoredBox(d.box, d.score))
    return out


def sample_ap(dets: Sequence[DetectionResult], samples: Sequence[FrustumSample], cfg: MatchConfig | None = None) -> dict:
    """Quick AP against the samples' own gt boxes (used for per-epoch logging)."""
    gts: dict[str, list[GroundTruth]] = {}
    seen = set()
    for s in samples:
        key = (s.frame_id, s.object_index)
        if s.gt_box is not None and key not in seen:
            seen.add(key)
            gts.setdefault(s.frame_id, []).append(GroundTruth(s.gt_box, 0, 0.0))
    rep = evaluate(group_by_frame(dets), gts, cfg or MatchConfig())
    return {c: {"ap_3d": m.ap_3d, "ap_bev": m.ap_bev} for c, m in rep.per_class.items()}


# ------------------------------------------------------------- checkpoints


def model_state(model: FusionNet) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def save_model(path: str | Path, model: FusionNet, classes: Sequence[str], priors: SizePriorTable, extra: dict | None = None) -> None:
    meta = {
        "model_config": model.cfg.to_dict(),
        "classes": list(classes),
        "priors": {c: list(priors[c]) for c in classes},
    }
    meta.update(extra or {})
    T.save_checkpoint(path, model_state(model), meta)


def load_model(path: str | Path) -> tuple[FusionNet, dict]:
    tensors, meta = T.load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = FusionNet(cfg)
    own = model.state_dict()
    if set(own) != set(tensors):
        raise ConfigMismatch(f"{path}: checkpoint tensors do not match the model layout")
    for k, v in tensors.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise ConfigMismatch(f"{path}: tensor {k} has shape {tuple(v.shape)}, expected {tuple(own[k].shape)}")
    model.load_state_dict({k: v.to(cfg.torch_dtype) for k, v in tensors.items()})
    return model, meta
