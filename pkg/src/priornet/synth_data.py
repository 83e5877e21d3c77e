"""Deterministic synthetic engagement clips.

Each class owns a drifting sinusoidal grating (its "texture") and a per-frame
face-detection failure probability.  Texture alone is deliberately ambiguous
(per-clip frequency, phase and brightness jitter), so a model only reaches
its best accuracy when it can also see where frames went missing.

Every random draw comes from a Philox stream keyed on (seed, clip) or
(seed, clip, frame), so clips can be generated in any order or in parallel and
come out identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .clip_pipeline import ClipMeta, ClipTensor


@dataclass
class SynthSpec:
    num_classes: int = 4
    clips_per_class: int = 200
    N: int = 16
    H: int = 32
    W: int = 32
    subjects: int = 20
    missing_rates: tuple[float, ...] = (0.02, 0.10, 0.25, 0.45)
    spatial_frequency: tuple[float, ...] = (2.0, 3.0, 4.0, 5.0)
    base_intensity: tuple[float, ...] = (0.50, 0.50, 0.50, 0.50)
    amplitude: float = 0.3
    orientation: float = 0.7853981633974483
    temporal_drift: float = 0.4
    frequency_jitter: float = 0.75
    phase_jitter: float = 1.0
    brightness_jitter: float = 0.05
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.missing_rates = tuple(float(v) for v in self.missing_rates)
        self.spatial_frequency = tuple(float(v) for v in self.spatial_frequency)
        self.base_intensity = tuple(float(v) for v in self.base_intensity)
        C = self.num_classes
        if C < 2:
            raise ValueError("need at least two classes")
        for name in ("missing_rates", "spatial_frequency", "base_intensity"):
            if len(getattr(self, name)) != C:
                raise ValueError(f"{name} must have one entry per class ({C})")
        if any(not 0.0 <= m <= 1.0 for m in self.missing_rates):
            raise ValueError("missing rates must lie in [0, 1]")
        if self.clips_per_class < 1 or self.subjects < 1 or self.N < 1:
            raise ValueError("clips_per_class, subjects and N must be positive")
        if min(self.H, self.W) < 1 or self.noise_std < 0:
            raise ValueError("invalid image size or noise level")

    @property
    def num_clips(self) -> int:
        return self.num_classes * self.clips_per_class

    def to_dict(self) -> dict:
        out = asdict(self)
        for k in ("missing_rates", "spatial_frequency", "base_intensity"):
            out[k] = list(out[k])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown SynthSpec fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def class_pattern(cls: int, frame_index: int, H: int, W: int, params: SynthSpec,
                  frequency: float | None = None, phase: float = 0.0,
                  brightness: float = 0.0) -> np.ndarray:
    """H x W x 3 grating for ``cls`` at ``frame_index``; values clipped to [0, 1].

    All classes share one orientation and differ in spatial frequency; the
    grating drifts by ``temporal_drift`` radians per frame.  ``frequency``,
    ``phase`` and ``brightness`` are per-clip perturbations; the defaults give
    the canonical class pattern.
    """
    if not 0 <= cls < params.num_classes:
        raise IndexError(f"class {cls} out of range")
    f = params.spatial_frequency[cls] if frequency is None else frequency
    theta = params.orientation
    yy, xx = np.mgrid[0:H, 0:W]
    coord = (xx * np.cos(theta) + yy * np.sin(theta)) / max(H, W)
    wave = np.sin(2 * np.pi * f * coord + phase + params.temporal_drift * frame_index)
    img = params.base_intensity[cls] + brightness + params.amplitude * wave
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[:, :, None], 3, axis=2)


def generate_clip(spec: SynthSpec, j: int) -> tuple[ClipTensor, ClipMeta]:
    """Clip ``j`` of the dataset (class-major order)."""
    cls = j // spec.clips_per_class
    subject = j % spec.subjects
    crng = _rng(spec.seed, j)
    freq = spec.spatial_frequency[cls] + spec.frequency_jitter * crng.uniform(-1.0, 1.0)
    phase = spec.phase_jitter * crng.uniform(-np.pi, np.pi)
    bright = spec.brightness_jitter * crng.standard_normal()
    frames = np.zeros((spec.N, spec.H, spec.W, 3))
    mask = np.zeros(spec.N, dtype=bool)
    for t in range(spec.N):
        frng = _rng(spec.seed, j, t)
        if frng.random() < spec.missing_rates[cls]:
            mask[t] = True
            continue
        img = class_pattern(cls, t, spec.H, spec.W, spec, freq, phase, bright)
        img = img + spec.noise_std * frng.standard_normal(img.shape)
        frames[t] = np.clip(img, 0.0, 1.0)
    # round to float32 so clips survive the on-disk store bit-exactly
    frames = frames.astype(np.float32).astype(np.float64)
    count = int(mask.sum())
    meta = ClipMeta(missing_count=count, missing_rate=count / spec.N, label=cls,
                    subject_id=f"s{subject:03d}")
    return ClipTensor(frames=frames, placeholder_mask=mask), meta


def generate_dataset(spec: SynthSpec) -> tuple[list[ClipTensor], list[ClipMeta]]:
    clips, metas = [], []
    for j in range(spec.num_clips):
        c, m = generate_clip(spec, j)
        clips.append(c)
        metas.append(m)
    return clips, metas
