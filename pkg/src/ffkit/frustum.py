"""From (point cloud, image, 2D box) to fixed-size frustum samples.

A 2D box selects the LiDAR points whose projection falls inside it; each
point gets a Gaussian centrality weight computed from its pixel position, the
set is resampled to a fixed count, and a square context crop of the image is
cut around the box.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import BadContainer, EmptyFrustum, InvalidRatio
from .geometry import Box2D, Box3D, ProjectionMatrix, points_in_box2d, project_cloud, rotate_y

log = logging.getLogger(__name__)


@dataclass
class FrustumConfig:
    n_points: int = 1024
    shift_ratio: float = 0.1
    n_perturb: int = 5
    crop_alpha: float = 1.5
    crop_size: int = 56
    # mask denominators use the full box width/height unless this is set
    mask_half_extent: bool = False
    rotate_to_frustum: bool = True
    clip_to_image: bool = False
    store_pixels: bool = True


@dataclass(frozen=True)
class CropWindow:
    cx: float
    cy: float
    side: float

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError("crop side must be positive")


def perturb_box2d(b: Box2D, shift_ratio: float, rng: np.random.Generator, alpha=None) -> Box2D:
    """Jitter center and size by up to ``shift_ratio`` of the box extent.

    One uniform draw in [-1, 1] per component (cx, cy, w, h); ``alpha`` may be
    given explicitly (scalar or 4 values) to bypass the random source.
    """
    if shift_ratio < 0:
        raise InvalidRatio(f"shift_ratio must be >= 0, got {shift_ratio}")
    if shift_ratio >= 1:
        raise InvalidRatio(f"shift_ratio must be < 1, got {shift_ratio}")
    if alpha is None:
        a = rng.uniform(-1.0, 1.0, size=4)
    else:
        a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (4,))
    return Box2D(
        b.cx + b.w * shift_ratio * a[0],
        b.cy + b.h * shift_ratio * a[1],
        b.w + b.w * shift_ratio * a[2],
        b.h + b.h * shift_ratio * a[3],
    )


def gaussian_mask(pixel, b: Box2D, half_extent: bool = False) -> float:
    u, v = pixel
    sx, sy = (b.w / 2.0, b.h / 2.0) if half_extent else (b.w, b.h)
    return math.exp(-((u - b.cx) ** 2) / (2.0 * sx * sx) - ((v - b.cy) ** 2) / (2.0 * sy * sy))


def gaussian_mask_array(pixels: np.ndarray, b: Box2D, half_extent: bool = False) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    sx, sy = (b.w / 2.0, b.h / 2.0) if half_extent else (b.w, b.h)
    return np.exp(-((pixels[:, 0] - b.cx) ** 2) / (2.0 * sx * sx) - ((pixels[:, 1] - b.cy) ** 2) / (2.0 * sy * sy))


class Frustum(NamedTuple):
    points: np.ndarray  # (K, 4) camera-frame x, y, z and mask weight
    indices: np.ndarray  # (K,) rows of the input cloud
    pixels: np.ndarray  # (K, 2)


def extract_frustum(points, b: Box2D, proj: ProjectionMatrix, half_extent: bool = False) -> Frustum:
    """Points projecting inside ``b``, in the rectified camera frame, with the mask channel."""
    proj_cloud = project_cloud(points, proj)
    inside = points_in_box2d(proj_cloud.pixels, b)
    pix = proj_cloud.pixels[inside]
    xi = gaussian_mask_array(pix, b, half_extent)
    pts = np.concatenate([proj_cloud.camera_xyz[inside], xi[:, None]], axis=1)
    return Frustum(pts, proj_cloud.indices[inside], pix)


def sample_fixed(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Resample to exactly ``n`` rows.

    Larger inputs are subsampled without replacement; smaller ones keep every
    row and pad with rows drawn with replacement.
    """
    points = np.asarray(points)
    k = len(points)
    if k == 0:
        raise EmptyFrustum("no points to sample from")
    if k >= n:
        idx = rng.choice(k, size=n, replace=False)
    else:
        idx = np.concatenate([np.arange(k), rng.choice(k, size=n - k, replace=True)])
        rng.shuffle(idx)
    return points[idx]


def crop_window(b: Box2D, alpha: float, image_w: int | None = None, image_h: int | None = None) -> CropWindow:
    """Square window of side ``max(w, h) * alpha`` centred on the box.

    The window is not clipped; pixels outside the image read as zero.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    return CropWindow(b.cx, b.cy, max(b.w, b.h) * alpha)


def extract_crop(image: np.ndarray, window: CropWindow, size: int) -> np.ndarray:
    """Bilinear resample of ``window`` from a (3, H, W) image to (3, size, size).

    Samples that fall outside the image are zero.  Returns float32 in the
    input's value range.
    """
    c, h, w = image.shape
    scale = window.side / size
    x0 = window.cx - window.side / 2.0
    y0 = window.cy - window.side / 2.0
    # pixel-center convention: pixel i covers [i, i+1) and its center is i + 0.5
    grid = (np.arange(size) + 0.5) * scale
    xs = x0 + grid - 0.5
    ys = y0 + grid - 0.5
    padded = np.zeros((c, h + 2, w + 2), dtype=np.float32)
    padded[:, 1:-1, 1:-1] = image
    xf = np.floor(xs)
    yf = np.floor(ys)
    wx = (xs - xf).astype(np.float32)
    wy = (ys - yf).astype(np.float32)
    # out-of-range indices clip onto the zero border column/row
    xi = np.clip(xf.astype(np.int64) + 1, 0, w + 1)
    yi = np.clip(yf.astype(np.int64) + 1, 0, h + 1)
    xi1 = np.clip(xf.astype(np.int64) + 2, 0, w + 1)
    yi1 = np.clip(yf.astype(np.int64) + 2, 0, h + 1)
    top = padded[:, yi[:, None], xi[None, :]] * (1 - wx) + padded[:, yi[:, None], xi1[None, :]] * wx
    bot = padded[:, yi1[:, None], xi[None, :]] * (1 - wx) + padded[:, yi1[:, None], xi1[None, :]] * wx
    return top * (1 - wy[:, None]) + bot * wy[:, None]


def frustum_angle(b: Box2D, proj: ProjectionMatrix) -> float:
    """Yaw of the viewing ray through the box center, ``atan2(x, z)`` in the camera frame."""
    d = np.linalg.solve(proj.p[:, :3], np.array([b.cx, b.cy, 1.0]))
    return math.atan2(d[0], d[2])


@dataclass
class FrustumSample:
    points: np.ndarray  # (n, 4) float32; normalized frame when frame_rotation != 0
    class_code: np.ndarray  # (K,) one-hot
    label: str
    crop: CropWindow
    source_box2d: Box2D
    gt_box: Box3D | None = None
    frame_rotation: float = 0.0
    confidence: float = 1.0
    frame_id: str = ""
    object_index: int = 0
    pixels: np.ndarray | None = None  # (3, S, S) uint8

    @property
    def n(self) -> int:
        return len(self.points)


@dataclass
class Detection2D:
    """A 2D box handed to the 3D stage, from ground truth or an external detector."""

    box: Box2D
    label: str
    confidence: float = 1.0
    gt_box: Box3D | None = None


@dataclass
class BuildStats:
    objects: int = 0
    samples: int = 0
    empty_dropped: int = 0
    skipped_classes: int = 0
    by_class: dict = field(default_factory=dict)


def object_rng(seed: int, frame_key: int, obj: int, k: int) -> np.random.Generator:
    """Per-(frame, object, draw) generator so serial and parallel runs agree."""
    return np.random.default_rng([int(seed), int(frame_key), int(obj), int(k)])


def frame_key(frame_id: str) -> int:
    try:
        return int(frame_id)
    except ValueError:
        return int.from_bytes(frame_id.encode()[:8].ljust(8, b"\0"), "little")


def _one_sample(
    points: np.ndarray,
    image: np.ndarray,
    proj: ProjectionMatrix,
    det: Detection2D,
    box: Box2D,
    classes: Sequence[str],
    cfg: FrustumConfig,
    rng: np.random.Generator,
    frame_id: str,
    obj: int,
) -> FrustumSample | None:
    fr = extract_frustum(points, box, proj, cfg.mask_half_extent)
    if len(fr.points) == 0:
        return None
    pts = sample_fixed(fr.points, cfg.n_points, rng)
    phi = frustum_angle(box, proj) if cfg.rotate_to_frustum else 0.0
    if phi:
        pts = rotate_y(pts, -phi)
    onehot = np.zeros(len(classes), dtype=np.float32)
    onehot[list(classes).index(det.label)] = 1.0
    win = crop_window(box, cfg.crop_alpha)
    pixels = None
    if cfg.store_pixels and image is not None:
        pixels = np.clip(np.rint(extract_crop(image, win, cfg.crop_size)), 0, 255).astype(np.uint8)
    return FrustumSample(
        points=pts.astype(np.float32),
        class_code=onehot,
        label=det.label,
        crop=win,
        source_box2d=box,
        gt_box=det.gt_box,
        frame_rotation=phi,
        confidence=det.confidence,
        frame_id=frame_id,
        object_index=obj,
        pixels=pixels,
    )


def build_samples(
    frame,
    detections: Sequence[Detection2D],
    mode: str,
    cfg: FrustumConfig,
    classes: Sequence[str],
    seed: int = 0,
    stats: BuildStats | None = None,
) -> list[FrustumSample]:
    """Frustum samples for one frame.

    ``mode="train"`` draws ``cfg.n_perturb`` jittered boxes per object;
    ``mode="eval"`` uses each box once as given.  Objects whose frustum is
    empty are skipped and counted in ``stats.empty_dropped``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    stats = stats if stats is not None else BuildStats()
    h, w = frame.image.shape[1:]
    fkey = frame_key(frame.frame_id)
    out = []
    for obj, det in enumerate(detections):
        if det.label not in classes:
            stats.skipped_classes += 1
            continue
        stats.objects += 1
        draws = cfg.n_perturb if mode == "train" else 1
        for k in range(draws):
            rng = object_rng(seed, fkey, obj, k)
            box = perturb_box2d(det.box, cfg.shift_ratio, rng) if mode == "train" else det.box
            if cfg.clip_to_image:
                x1, y1, x2, y2 = box.corners
                x1, y1, x2, y2 = max(x1, 0.0), max(y1, 0.0), min(x2, w - 1.0), min(y2, h - 1.0)
                if x2 <= x1 or y2 <= y1:
                    stats.empty_dropped += 1
                    continue
                box = Box2D.from_corners(x1, y1, x2, y2)
            s = _one_sample(frame.points, frame.image, frame.calib, det, box, classes, cfg, rng, frame.frame_id, obj)
            if s is None:
                stats.empty_dropped += 1
                continue
            out.append(s)
            stats.samples += 1
            stats.by_class[det.label] = stats.by_class.get(det.label, 0) + 1
    if stats.empty_dropped:
        log.debug("frame %s: %d empty frustums dropped so far", frame.frame_id, stats.empty_dropped)
    return out


# ---------------------------------------------------------------------------
# Binary container: little-endian, 32-bit floats.
#
#   b"FFSAMPLE" | u32 version | u32 count | u32 meta_len | meta JSON
#   count x (u64 offset, u64 length)      offsets from start of file
#   records, each:
#     u32 n, u32 K, u32 flags, u32 S
#     f32[n*4] points | f32[K] one-hot | f32[3] crop (cx, cy, side)
#     f32[4] source box (cx, cy, w, h) | f32 frame_rotation | f32 confidence
#     u32 frame index (into meta["frames"]) | u32 object index
#     flags & 1: f32[7] gt box (x, y, z, l, w, h, yaw)
#     flags & 2: u8[3*S*S] crop pixels
#     flags & 4: points are in the rotated frustum frame
# ---------------------------------------------------------------------------

MAGIC = b"FFSAMPLE"
VERSION = 1
FLAG_GT = 1
FLAG_PIXELS = 2
FLAG_ROTATED = 4
_HEAD = struct.Struct("<4I")
_TAIL = struct.Struct("<3f4fffII")


def _encode_record(s: FrustumSample, frame_index: int) -> bytes:
    flags = (FLAG_GT if s.gt_box is not None else 0) | (FLAG_PIXELS if s.pixels is not None else 0)
    flags |= FLAG_ROTATED if s.frame_rotation != 0.0 else 0
    size = s.pixels.shape[-1] if s.pixels is not None else 0
    parts = [
        _HEAD.pack(s.n, len(s.class_code), flags, size),
        np.ascontiguousarray(s.points, dtype="<f4").tobytes(),
        np.asarray(s.class_code, dtype="<f4").tobytes(),
        _TAIL.pack(
            s.crop.cx, s.crop.cy, s.crop.side,
            s.source_box2d.cx, s.source_box2d.cy, s.source_box2d.w, s.source_box2d.h,
            s.frame_rotation, s.confidence, frame_index, s.object_index,
        ),
    ]
    if s.gt_box is not None:
        parts.append(s.gt_box.as_array().astype("<f4").tobytes())
    if s.pixels is not None:
        parts.append(np.ascontiguousarray(s.pixels, dtype=np.uint8).tobytes())
    return b"".join(parts)


def _decode_record(buf: memoryview, classes: list[str], frames: list[str]) -> FrustumSample:
    n, k, flags, size = _HEAD.unpack_from(buf, 0)
    off = _HEAD.size
    pts = np.frombuffer(buf, dtype="<f4", count=n * 4, offset=off).reshape(n, 4).astype(np.float32)
    off += n * 16
    onehot = np.frombuffer(buf, dtype="<f4", count=k, offset=off).astype(np.float32)
    off += k * 4
    ccx, ccy, side, bx, by, bw, bh, rot, conf, fidx, obj = _TAIL.unpack_from(buf, off)
    off += _TAIL.size
    gt = None
    label = classes[int(np.argmax(onehot))]
    if flags & FLAG_GT:
        gt = Box3D.from_array(np.frombuffer(buf, dtype="<f4", count=7, offset=off).astype(np.float64), label)
        off += 28
    pixels = None
    if flags & FLAG_PIXELS:
        pixels = np.frombuffer(buf, dtype=np.uint8, count=3 * size * size, offset=off).reshape(3, size, size).copy()
        off += 3 * size * size
    if off != len(buf):
        raise BadContainer(f"record length mismatch ({off} != {len(buf)})")
    return FrustumSample(
        points=pts,
        class_code=onehot,
        label=label,
        crop=CropWindow(ccx, ccy, side),
        source_box2d=Box2D(bx, by, bw, bh),
        gt_box=gt,
        frame_rotation=float(rot),
        confidence=float(conf),
        frame_id=frames[fidx],
        object_index=int(obj),
        pixels=pixels,
    )


def write_samples(path: str | Path, samples: Sequence[FrustumSample], classes: Sequence[str], meta: dict | None = None) -> None:
    frames = sorted({s.frame_id for s in samples})
    meta = dict(meta or {})
    meta["classes"] = list(classes)
    meta.setdefault("frames", [])
    frames = sorted(set(meta["frames"]) | set(frames))
    meta["frames"] = frames
    findex = {f: i for i, f in enumerate(frames)}
    blob = json.dumps(meta, sort_keys=True).encode()
    records = [_encode_record(s, findex[s.frame_id]) for s in samples]
    head = MAGIC + struct.pack("<3I", VERSION, len(records), len(blob)) + blob
    offset = len(head) + 16 * len(records)
    table = []
    for r in records:
        table.append(struct.pack("<2Q", offset, len(r)))
        offset += len(r)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(b"".join(table))
        for r in records:
            fh.write(r)


def read_samples(path: str | Path) -> tuple[list[FrustumSample], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise BadContainer(f"{path}: not a frustum sample container")
    version, count, meta_len = struct.unpack_from("<3I", data, 8)
    if version != VERSION:
        raise BadContainer(f"{path}: unsupported version {version}")
    pos = 20
    meta = json.loads(data[pos : pos + meta_len].decode())
    pos += meta_len
    mv = memoryview(data)
    out = []
    for i in range(count):
        off, length = struct.unpack_from("<2Q", data, pos + 16 * i)
        if off + length > len(data):
            raise BadContainer(f"{path}: record {i} runs past end of file")
        out.append(_decode_record(mv[off : off + length], meta["classes"], meta["frames"]))
    return out, meta


def sample_summary(samples: Sequence[FrustumSample]) -> dict:
    by_class: dict[str, int] = {}
    for s in samples:
        by_class[s.label] = by_class.get(s.label, 0) + 1
    return {"samples": len(samples), "by_class": by_class}


def config_dict(cfg: FrustumConfig) -> dict:
    return asdict(cfg)
