"""Fixed-length clip assembly with zero-frame placeholders for failed detections.

Frame indices are 1-based throughout, matching detection sidecar files.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_CLIP_LENGTH = 16
DEFAULT_RESOLUTION = 224


class SidecarParseError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


@dataclass(frozen=True)
class FrameIndexPlan:
    T: int
    N: int
    indices: tuple[int, ...]


@dataclass(frozen=True)
class Box:
    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class DetectionRecord:
    frame_index: int
    box: Box | None = None

    @property
    def detected(self) -> bool:
        return self.box is not None


@dataclass
class ClipTensor:
    frames: np.ndarray  # (N, H, W, 3) float64 in network-input space
    placeholder_mask: np.ndarray  # (N,) bool, True = placeholder

    @property
    def N(self) -> int:
        return self.frames.shape[0]

    @property
    def H(self) -> int:
        return self.frames.shape[1]

    @property
    def W(self) -> int:
        return self.frames.shape[2]


@dataclass
class ClipMeta:
    missing_count: int
    missing_rate: float
    label: int = -1
    subject_id: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


class MissingnessGroup(str, enum.Enum):
    LOW = "Low"
    MEDIUM = "Medium"
    HIGH = "High"


def plan_frame_indices(T: int, N: int = DEFAULT_CLIP_LENGTH) -> FrameIndexPlan:
    """t_i = floor((i-1)(T-1)/(N-1)) + 1 for i = 1..N."""
    if T < 1:
        raise ValueError(f"video must have at least one frame, got T={T}")
    if N < 2:
        raise ValueError(f"clip length must be at least 2, got N={N}")
    idx = tuple((i * (T - 1)) // (N - 1) + 1 for i in range(N))
    return FrameIndexPlan(T=T, N=N, indices=idx)


def _as_box(box) -> Box:
    if isinstance(box, Box):
        return box
    x, y, w, h = (int(v) for v in box)
    return Box(x, y, w, h)


def crop(image: np.ndarray, box) -> np.ndarray:
    """Region of ``image`` (H x W x 3) inside box = (x, y, w, h), x = column."""
    b = _as_box(box)
    H, W = image.shape[:2]
    if b.w <= 0 or b.h <= 0 or b.x < 0 or b.y < 0 or b.x + b.w > W or b.y + b.h > H:
        raise ValueError(f"box {b} out of bounds for image {H}x{W}")
    return image[b.y:b.y + b.h, b.x:b.x + b.w].copy()


def _resize_axis(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (align_corners=False), edge clamped."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if min(h, w, out_h, out_w) < 1:
        raise ValueError("image and output sizes must be at least 1")
    if (h, w) == (out_h, out_w):
        return image.copy()
    r0, r1, fr = _resize_axis(h, out_h)
    c0, c1, fc = _resize_axis(w, out_w)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bot = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def normalize_pixels(image: np.ndarray) -> np.ndarray:
    """Raw [0, 255] -> [0, 1]."""
    return np.asarray(image, dtype=np.float64) / 255.0


def assemble_clip(frames: Sequence[np.ndarray], detections: Sequence[DetectionRecord],
                  plan: FrameIndexPlan, target: int = DEFAULT_RESOLUTION,
                  label: int = -1, subject_id: str = "") -> tuple[ClipTensor, ClipMeta]:
    """Crop, resize and normalize each planned frame; failed detections become zero frames.

    ``frames[t - 1]`` is frame ``t``.  Zeros are written after normalization,
    so placeholders are exactly zero in the network-input space.
    """
    by_frame = {rec.frame_index: rec for rec in detections}
    out = np.zeros((plan.N, target, target, 3))
    mask = np.zeros(plan.N, dtype=bool)
    for i, t in enumerate(plan.indices):
        rec = by_frame.get(t)
        if rec is None:
            raise KeyError(f"no detection record for planned frame {t}")
        if rec.box is None:
            mask[i] = True
            continue
        face = crop(np.asarray(frames[t - 1]), rec.box)
        out[i] = normalize_pixels(bilinear_resize(face, target, target))
    count = int(mask.sum())
    meta = ClipMeta(missing_count=count, missing_rate=count / plan.N, label=label, subject_id=subject_id)
    return ClipTensor(frames=out, placeholder_mask=mask), meta


def missingness_group(rate: float) -> MissingnessGroup:
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"missing rate must lie in [0, 1], got {rate}")
    if rate <= 2 / 16:
        return MissingnessGroup.LOW
    if rate <= 6 / 16:
        return MissingnessGroup.MEDIUM
    return MissingnessGroup.HIGH


def fill_placeholders(clip: ClipTensor) -> ClipTensor:
    """Replace each placeholder by the nearest detected frame (earlier frame on ties).

    Used for the no-placeholder arm; the mask is kept so the true missing rate
    stays available for diagnostics.  A clip with no detected frame is left zero.
    """
    mask = clip.placeholder_mask
    if not mask.any() or mask.all():
        return ClipTensor(frames=clip.frames.copy(), placeholder_mask=mask.copy())
    detected = np.flatnonzero(~mask)
    frames = clip.frames.copy()
    for i in np.flatnonzero(mask):
        src = detected[np.argmin(np.abs(detected - i))]
        frames[i] = clip.frames[src]
    return ClipTensor(frames=frames, placeholder_mask=mask.copy())


# -- detection sidecar -----------------------------------------------------

def parse_detection_line(line: str) -> DetectionRecord:
    obj = json.loads(line)
    if not isinstance(obj, dict) or "frame" not in obj or "box" not in obj:
        raise ValueError('expected an object with "frame" and "box"')
    frame = obj["frame"]
    if not isinstance(frame, int) or isinstance(frame, bool) or frame < 1:
        raise ValueError(f"frame must be a positive integer, got {frame!r}")
    box = obj["box"]
    if box is None:
        return DetectionRecord(frame_index=frame)
    if not isinstance(box, list) or len(box) != 4 or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in box):
        raise ValueError(f"box must be [x, y, w, h] or null, got {box!r}")
    if any(float(v) != int(v) for v in box):
        raise ValueError(f"box coordinates must be whole pixels, got {box!r}")
    b = _as_box(box)
    if b.w <= 0 or b.h <= 0 or b.x < 0 or b.y < 0:
        raise ValueError(f"degenerate box {box!r}")
    return DetectionRecord(frame_index=frame, box=b)


def read_detection_sidecar(path) -> list[DetectionRecord]:
    """JSON-Lines, one ``{"frame": int, "box": [x, y, w, h] | null}`` per line."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(parse_detection_line(line))
            except (ValueError, TypeError) as exc:
                raise SidecarParseError(path, n, str(exc)) from None
    return records


def write_detection_sidecar(path, records: Sequence[DetectionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            box = None if rec.box is None else [rec.box.x, rec.box.y, rec.box.w, rec.box.h]
            fh.write(json.dumps({"frame": rec.frame_index, "box": box}) + "\n")


# -- clip store ------------------------------------------------------------

CLIP_MAGIC = b"PNCL"
CLIP_VERSION = 1
_CLIP_HEADER = struct.Struct("<4sHHHH")


def write_clip(path, clip: ClipTensor, meta: ClipMeta) -> None:
    """Header, float32 frames (frame-major), N mask bytes, trailing JSON metadata."""
    N, H, W = clip.frames.shape[:3]
    with open(path, "wb") as fh:
        fh.write(_CLIP_HEADER.pack(CLIP_MAGIC, CLIP_VERSION, N, H, W))
        fh.write(np.ascontiguousarray(clip.frames, dtype="<f4").tobytes())
        fh.write(clip.placeholder_mask.astype(np.uint8).tobytes())
        fh.write(json.dumps(meta.to_dict(), sort_keys=True).encode())


def read_clip(path) -> tuple[ClipTensor, ClipMeta]:
    data = Path(path).read_bytes()
    if len(data) < _CLIP_HEADER.size:
        raise ValueError(f"{path}: truncated clip file")
    magic, version, N, H, W = _CLIP_HEADER.unpack_from(data)
    if magic != CLIP_MAGIC:
        raise ValueError(f"{path}: not a clip file")
    if version != CLIP_VERSION:
        raise ValueError(f"{path}: unsupported clip version {version}")
    off = _CLIP_HEADER.size
    n_vals = N * H * W * 3
    frames = np.frombuffer(data, dtype="<f4", count=n_vals, offset=off).astype(np.float64)
    off += 4 * n_vals
    mask = np.frombuffer(data, dtype=np.uint8, count=N, offset=off).astype(bool)
    off += N
    meta = ClipMeta(**json.loads(data[off:]))
    return ClipTensor(frames=frames.reshape(N, H, W, 3), placeholder_mask=mask), meta


def write_dataset(directory, clips: Sequence[ClipTensor], metas: Sequence[ClipMeta]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for j, (clip, meta) in enumerate(zip(clips, metas)):
        p = directory / f"clip_{j:05d}.pncl"
        write_clip(p, clip, meta)
        paths.append(p)
    return paths


def read_dataset(directory) -> tuple[list[ClipTensor], list[ClipMeta]]:
    paths = sorted(Path(directory).glob("*.pncl"))
    if not paths:
        raise FileNotFoundError(f"no .pncl clips in {directory}")
    pairs = [read_clip(p) for p in paths]
    return [c for c, _ in pairs], [m for _, m in pairs]


def load_frame_directory(directory) -> list[np.ndarray]:
    """Frames of one video as H x W x 3 arrays in [0, 255], sorted by file name.

    Accepts ``.npy`` arrays or any image format Pillow reads.
    """
    paths = sorted(p for p in Path(directory).iterdir() if p.is_file())
    frames = []
    for p in paths:
        if p.suffix == ".npy":
            arr = np.load(p)
        else:
            from PIL import Image

            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"))
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"{p}: expected an H x W x 3 frame, got shape {arr.shape}")
        frames.append(arr)
    if not frames:
        raise FileNotFoundError(f"no frames in {directory}")
    return frames
