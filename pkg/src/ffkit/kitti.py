"""KITTI-format labels, calibration, velodyne scans, splits and dataset layout.

Directory layout::

    root/
      velodyne/<id>.bin     float32 (x, y, z, intensity) quadruples
      image_2/<id>.png      8-bit RGB (``.ppm`` also read)
      label_2/<id>.txt      one object per line
      calib/<id>.txt        P2, R0_rect, Tr_velo_to_cam
      splits.json           SplitManifest
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BadRatios, MalformedLine, MissingKey, TruncatedFile, WrongArity
from .geometry import Box2D, Box3D, ProjectionMatrix, wrap_angle

# printed angles are rounded, so a value of exactly pi can come back slightly larger
_ANGLE_SLACK = 1e-6


@dataclass
class LabelRecord:
    type: str
    truncated: float
    occluded: int
    alpha: float
    x1: float
    y1: float
    x2: float
    y2: float
    h: float
    w: float
    l: float
    x: float
    y: float
    z: float
    rotation_y: float
    score: float | None = None

    @property
    def box2d(self) -> Box2D:
        return Box2D.from_corners(self.x1, self.y1, self.x2, self.y2)

    def to_box3d(self) -> Box3D:
        # KITTI locations are the bottom-face center; camera y points down
        return Box3D(self.x, self.y - self.h / 2.0, self.z, self.l, self.w, self.h, self.rotation_y, self.type)

    @classmethod
    def from_boxes(
        cls,
        box: Box3D,
        box2d: Box2D,
        label: str | None = None,
        truncated: float = 0.0,
        occluded: int = 0,
        score: float | None = None,
    ) -> "LabelRecord":
        x1, y1, x2, y2 = box2d.corners
        alpha = wrap_angle(box.yaw - math.atan2(box.x, box.z))
        return cls(
            label or box.label, float(truncated), int(occluded), alpha,
            x1, y1, x2, y2, box.h, box.w, box.l,
            box.x, box.y + box.h / 2.0, box.z, box.yaw, score,
        )

    def to_line(self, precision: int = 6) -> str:
        p = precision
        fields = [
            self.type,
            f"{self.truncated:.{p}f}",
            f"{self.occluded:d}",
            f"{self.alpha:.{p}f}",
            *(f"{v:.{p}f}" for v in (self.x1, self.y1, self.x2, self.y2)),
            *(f"{v:.{p}f}" for v in (self.h, self.w, self.l)),
            *(f"{v:.{p}f}" for v in (self.x, self.y, self.z)),
            f"{self.rotation_y:.{p}f}",
        ]
        if self.score is not None:
            fields.append(f"{self.score:.{p}f}")
        return " ".join(fields)


def _parse_label_line(line: str, lineno: int, path: str | None) -> LabelRecord:
    parts = line.split()
    if len(parts) not in (15, 16):
        raise MalformedLine(lineno, f"expected 15 or 16 fields, got {len(parts)}", path)
    name = parts[0]
    try:
        nums = [float(p) for p in parts[1:]]
    except ValueError as e:
        raise MalformedLine(lineno, f"non-numeric field ({e})", path) from None
    if not all(math.isfinite(v) for v in nums):
        raise MalformedLine(lineno, "non-finite numeric field", path)
    trunc, occ, alpha, x1, y1, x2, y2, h, w, l, x, y, z, ry = nums[:14]
    score = nums[14] if len(nums) == 15 else None
    if not 0.0 <= trunc <= 1.0:
        raise MalformedLine(lineno, f"truncation {trunc} outside [0, 1]", path)
    if occ not in (0.0, 1.0, 2.0, 3.0):
        raise MalformedLine(lineno, f"occlusion {parts[2]} not in {{0, 1, 2, 3}}", path)
    if not (x2 > x1 and y2 > y1):
        raise MalformedLine(lineno, "2D box corners are not ordered (x2 > x1, y2 > y1)", path)
    if not (h > 0 and w > 0 and l > 0):
        raise MalformedLine(lineno, "dimensions must be positive", path)
    for nm, ang in (("rotation_y", ry), ("alpha", alpha)):
        if abs(ang) > math.pi + _ANGLE_SLACK:
            raise MalformedLine(lineno, f"{nm} {ang} outside [-pi, pi]", path)
    ry = max(-math.pi, min(math.pi, ry))
    return LabelRecord(name, trunc, int(occ), alpha, x1, y1, x2, y2, h, w, l, x, y, z, ry, score)


def parse_label_file(text: str, path: str | None = None, skip_dontcare: bool = True) -> list[LabelRecord]:
    """One record per non-empty line.

    ``DontCare`` regions use sentinel values that fail the range checks, so
    they are dropped by default.
    """
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if skip_dontcare and line.split(None, 1)[0] == "DontCare":
            continue
        out.append(_parse_label_line(line, lineno, path))
    return out


def format_label_file(records: Iterable[LabelRecord], precision: int = 6) -> str:
    lines = [r.to_line(precision) for r in records]
    return "\n".join(lines) + ("\n" if lines else "")


CALIB_KEYS = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}


def parse_calib_file(text: str) -> ProjectionMatrix:
    values: dict[str, str] = {}
    for line in text.splitlines():
        if ":" not in line:
            continue
        key, rest = line.split(":", 1)
        values[key.strip()] = rest
    mats = {}
    for key, arity in CALIB_KEYS.items():
        if key not in values:
            raise MissingKey(f"calibration is missing {key}")
        try:
            nums = [float(v) for v in values[key].split()]
        except ValueError:
            raise WrongArity(f"{key}: non-numeric entry") from None
        if len(nums) != arity:
            raise WrongArity(f"{key}: expected {arity} values, got {len(nums)}")
        mats[key] = np.array(nums)
    return ProjectionMatrix(mats["P2"].reshape(3, 4), mats["R0_rect"].reshape(3, 3), mats["Tr_velo_to_cam"].reshape(3, 4))


def format_calib_file(proj: ProjectionMatrix) -> str:
    rect = proj.rect if proj.rect is not None else np.eye(3)
    tr = proj.lidar_to_cam if proj.lidar_to_cam is not None else np.hstack([np.eye(3), np.zeros((3, 1))])

    def row(a):
        return " ".join(repr(float(v)) for v in np.ravel(a))

    return f"P2: {row(proj.p)}\nR0_rect: {row(rect)}\nTr_velo_to_cam: {row(tr)}\n"


def read_point_cloud_bin(src: str | Path | bytes) -> np.ndarray:
    data = src if isinstance(src, (bytes, bytearray)) else Path(src).read_bytes()
    if len(data) % 16:
        raise TruncatedFile(f"point file length {len(data)} is not a multiple of 16 bytes")
    return np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float32)


def write_point_cloud_bin(path: str | Path, points: np.ndarray) -> None:
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ValueError("points must be (N, 4): x, y, z, intensity")
    Path(path).write_bytes(np.ascontiguousarray(pts, dtype="<f4").tobytes())


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int
    ratios: tuple[float, float, float]

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        sets = [set(self.train), set(self.val), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("split lists overlap")

    def split(self, name: str) -> list[str]:
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)

    def to_json(self) -> str:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(d["train"], d["val"], d["test"], int(d["seed"]), tuple(d["ratios"]))


def make_splits(frame_ids: Sequence[str], ratios=(0.70, 0.15, 0.15), seed: int = 0) -> SplitManifest:
    """Seeded shuffle, then contiguous train/val/test blocks.

    Train and val sizes are floored; the remainder goes to test.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(not r > 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three positive numbers summing to 1, got {ratios}")
    ids = list(frame_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate frame ids")
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = math.floor(n * ratios[0] + 1e-9)
    n_val = math.floor(n * ratios[1] + 1e-9)
    return SplitManifest(
        sorted(shuffled[:n_train]),
        sorted(shuffled[n_train : n_train + n_val]),
        sorted(shuffled[n_train + n_val :]),
        seed,
        ratios,
    )


@dataclass
class SceneFrame:
    frame_id: str
    points: np.ndarray  # (N, 4) float32 sensor frame: x, y, z, intensity
    image: np.ndarray  # (3, H, W) uint8
    calib: ProjectionMatrix
    labels: list[LabelRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3 or min(self.image.shape[1:]) <= 0:
            raise ValueError("image must be (3, H, W) with positive extents")


def _read_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _write_image(path: Path, image: np.ndarray) -> None:
    hwc = np.ascontiguousarray(np.asarray(image, dtype=np.uint8).transpose(1, 2, 0))
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover - Pillow is a declared dependency
        path = path.with_suffix(".ppm")
        h, w = hwc.shape[:2]
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + hwc.tobytes())
        return
    Image.fromarray(hwc, "RGB").save(path, format="PNG", optimize=False, compress_level=6)


class KittiDataset:
    """Read/write access to a KITTI-layout directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, sub: str, frame_id: str, ext: str) -> Path:
        return self.root / sub / f"{frame_id}{ext}"

    def frame_ids(self) -> list[str]:
        d = self.root / "velodyne"
        return sorted(p.stem for p in d.glob("*.bin")) if d.is_dir() else []

    def ensure_layout(self) -> None:
        for sub in ("velodyne", "image_2", "label_2", "calib"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def read_labels(self, frame_id: str) -> list[LabelRecord]:
        p = self._path("label_2", frame_id, ".txt")
        return parse_label_file(p.read_text(), str(p)) if p.exists() else []

    def read_calib(self, frame_id: str) -> ProjectionMatrix:
        p = self._path("calib", frame_id, ".txt")
        try:
            return parse_calib_file(p.read_text())
        except (MissingKey, WrongArity) as e:
            raise type(e)(f"{p}: {e}") from None

    def read_frame(self, frame_id: str, with_image: bool = True) -> SceneFrame:
        pts = read_point_cloud_bin(self._path("velodyne", frame_id, ".bin"))
        calib = self.read_calib(frame_id)
        image = None
        if with_image:
            png = self._path("image_2", frame_id, ".png")
            image = _read_image(png if png.exists() else png.with_suffix(".ppm"))
        else:
            image = np.zeros((3, 1, 1), dtype=np.uint8)
        return SceneFrame(frame_id, pts, image, calib, self.read_labels(frame_id))

    def write_frame(self, frame: SceneFrame) -> None:
        self.ensure_layout()
        write_point_cloud_bin(self._path("velodyne", frame.frame_id, ".bin"), frame.points)
        _write_image(self._path("image_2", frame.frame_id, ".png"), frame.image)
        self._path("label_2", frame.frame_id, ".txt").write_text(format_label_file(frame.labels))
        self._path("calib", frame.frame_id, ".txt").write_text(format_calib_file(frame.calib))

    def read_splits(self) -> SplitManifest:
        return SplitManifest.from_json((self.root / "splits.json").read_text())

    def write_splits(self, manifest: SplitManifest) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "splits.json").write_text(manifest.to_json())


def read_detections_dir(root: str | Path, frame_ids: Sequence[str]) -> dict[str, list[LabelRecord]]:
    """Per-frame detection files (KITTI label lines plus a confidence field)."""
    root = Path(root)
    out = {}
    for fid in frame_ids:
        p = root / f"{fid}.txt"
        out[fid] = parse_label_file(p.read_text(), str(p)) if p.exists() else []
    return out


def write_detections_dir(root: str | Path, detections: dict[str, list[LabelRecord]]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for fid, recs in detections.items():
        (root / f"{fid}.txt").write_text(format_label_file(recs))
