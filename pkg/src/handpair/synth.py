"""Synthetic planar-hand corpora with known pose parameters.

A hand is a 2D kinematic chain: wrist at the origin plus five finger chains
of four segments each. Per finger, flexion bends successive segments by
equal sub-angles (segment k is bent by k * flexion / 3, so the distal
segment carries the full flexion angle) and abduction rotates the whole
chain root. The assembled point set is rotated by the global rotation,
scaled, and mapped into the unit square by a fixed affine map sized so that
every reachable pose stays inside [0, 1]^2 with margin.

Segment-length ratios are fixed constants; pose variation is isolated from
shape variation on purpose.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, HandCrop, Handedness
from .errors import ParseError

# Base direction of each finger chain, radians from +x (thumb .. pinky).
FINGER_BASE_ANGLES = (0.50, 1.25, 1.57, 1.90, 2.25)

# Segment lengths per finger, proximal to distal, in hand units.
SEGMENT_LENGTHS = (
    (0.25, 0.18, 0.12, 0.10),
    (0.45, 0.22, 0.13, 0.09),
    (0.44, 0.25, 0.15, 0.10),
    (0.42, 0.23, 0.14, 0.10),
    (0.40, 0.17, 0.11, 0.08),
)

FLEXION_RANGE = (0.0, math.pi / 2)
ABDUCTION_RANGE = (-0.3, 0.3)
SCALE_RANGE = (0.5, 1.5)

# Fixed map into the unit square: the longest chain at maximum scale reaches
# MAX_REACH from the wrist, which is mapped to MAP_MARGIN around the center.
MAX_REACH = SCALE_RANGE[1] * max(sum(lengths) for lengths in SEGMENT_LENGTHS)
MAP_MARGIN = 0.4
MAP_SCALE = MAP_MARGIN / MAX_REACH
MAP_CENTER = 0.5


@dataclass(frozen=True)
class PoseParams:
    """Latent pose of one synthetic hand."""

    global_rotation: float
    flexion: tuple[float, float, float, float, float]
    abduction: tuple[float, float, float, float, float]
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "flexion", tuple(float(v) for v in self.flexion))
        object.__setattr__(self, "abduction", tuple(float(v) for v in self.abduction))
        if len(self.flexion) != 5 or len(self.abduction) != 5:
            raise ValueError("flexion and abduction need exactly 5 entries")
        if not all(FLEXION_RANGE[0] <= v <= FLEXION_RANGE[1] for v in self.flexion):
            raise ValueError(f"flexion outside {FLEXION_RANGE}: {self.flexion}")
        if not all(
            ABDUCTION_RANGE[0] <= v <= ABDUCTION_RANGE[1] for v in self.abduction
        ):
            raise ValueError(f"abduction outside {ABDUCTION_RANGE}: {self.abduction}")
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise ValueError(f"scale outside {SCALE_RANGE}: {self.scale}")
        if not math.isfinite(self.global_rotation):
            raise ValueError("global_rotation must be finite")

    def to_target_vector(self) -> np.ndarray:
        """13-dim regression target: (cos r, sin r, flexion, abduction, scale).

        Rotation enters as (cos, sin) so the target is continuous across the
        +/- pi wrap.
        """
        return np.array(
            [math.cos(self.global_rotation), math.sin(self.global_rotation)]
            + list(self.flexion)
            + list(self.abduction)
            + [self.scale],
            dtype=np.float64,
        )

    def to_record(self, crop_id: int) -> dict:
        return {
            "crop_id": crop_id,
            "rotation": self.global_rotation,
            "flexion": list(self.flexion),
            "abduction": list(self.abduction),
            "scale": self.scale,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PoseParams":
        return cls(
            global_rotation=float(rec["rotation"]),
            flexion=tuple(rec["flexion"]),
            abduction=tuple(rec["abduction"]),
            scale=float(rec["scale"]),
        )


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int
    crops_per_video: int
    keypoint_noise_sigma: float = 0.0
    intra_video_drift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_videos < 1 or self.crops_per_video < 1:
            raise ValueError("n_videos and crops_per_video must be >= 1")
        if self.keypoint_noise_sigma < 0 or self.intra_video_drift < 0:
            raise ValueError("noise and drift must be >= 0")


def chain_points(params: PoseParams) -> np.ndarray:
    """(21, 2) joint positions with the wrist at the origin, before the
    unit-square mapping. Row 0 is the wrist; rows 1+4f..4+4f are finger f."""
    pts = np.zeros((21, 2), dtype=np.float64)
    rot = params.global_rotation
    for f in range(5):
        base = FINGER_BASE_ANGLES[f] + params.abduction[f] + rot
        sub = params.flexion[f] / 3.0
        angles = base - sub * np.arange(4)
        seg = np.asarray(SEGMENT_LENGTHS[f])[:, None] * np.stack(
            [np.cos(angles), np.sin(angles)], axis=1
        )
        pts[1 + 4 * f : 5 + 4 * f] = np.cumsum(seg, axis=0)
    return pts * params.scale


def forward_kinematics(params: PoseParams) -> np.ndarray:
    """(21, 2) keypoints in [0, 1]^2 for a right hand in the given pose."""
    return MAP_CENTER + MAP_SCALE * chain_points(params)


def _sample_pose(rng: np.random.Generator) -> PoseParams:
    return PoseParams(
        global_rotation=rng.uniform(-math.pi, math.pi),
        flexion=tuple(rng.uniform(*FLEXION_RANGE, size=5)),
        abduction=tuple(rng.uniform(*ABDUCTION_RANGE, size=5)),
        scale=rng.uniform(*SCALE_RANGE),
    )


def _drift_pose(base: PoseParams, rng: np.random.Generator, drift: float) -> PoseParams:
    """Gaussian perturbation of every parameter, clamped to valid ranges.

    The normal draws happen even at drift=0 so the per-frame RNG stream does
    not depend on the drift value.
    """
    d_rot, d_scale = rng.standard_normal(2) * drift
    d_flex = rng.standard_normal(5) * drift
    d_abd = rng.standard_normal(5) * drift
    return PoseParams(
        global_rotation=base.global_rotation + d_rot,
        flexion=tuple(np.clip(np.asarray(base.flexion) + d_flex, *FLEXION_RANGE)),
        abduction=tuple(
            np.clip(np.asarray(base.abduction) + d_abd, *ABDUCTION_RANGE)
        ),
        scale=float(np.clip(base.scale + d_scale, *SCALE_RANGE)),
    )


def generate_corpus(config: SynthConfig) -> tuple[Corpus, dict[int, PoseParams]]:
    """Generate a corpus plus a crop_id -> PoseParams ground-truth map.

    Each video draws a base pose; frames are drift perturbations of it.
    Keypoints get additive Gaussian noise (clipped back into [0, 1]).
    Handedness is a fair coin per crop; left crops store mirrored keypoints,
    exactly as a detector would report them for a left hand. Per-video seeds
    are spawned from the top seed, so videos are independent and the whole
    corpus is reproducible.
    """
    children = np.random.SeedSequence(config.seed).spawn(config.n_videos)
    crops = []
    truth: dict[int, PoseParams] = {}
    crop_id = 0
    for vid, child in enumerate(children):
        rng = np.random.default_rng(child)
        base = _sample_pose(rng)
        for frame in range(config.crops_per_video):
            pose = _drift_pose(base, rng, config.intra_video_drift)
            pts = forward_kinematics(pose)
            if config.keypoint_noise_sigma > 0:
                pts = pts + rng.normal(0.0, config.keypoint_noise_sigma, (21, 2))
                pts = np.clip(pts, 0.0, 1.0)
            handedness = Handedness.LEFT if rng.random() < 0.5 else Handedness.RIGHT
            if handedness is Handedness.LEFT:
                pts = pts.copy()
                pts[:, 0] = 1.0 - pts[:, 0]
            confidence = float(rng.uniform(0.5, 1.0))
            crops.append(
                HandCrop(
                    crop_id=crop_id,
                    video_id=vid,
                    frame_idx=frame,
                    handedness=handedness,
                    keypoints=pts,
                    confidence=confidence,
                )
            )
            truth[crop_id] = pose
            crop_id += 1
    return Corpus(crops, config.n_videos), truth


def param_distance(a: PoseParams, b: PoseParams) -> float:
    """Euclidean distance in parameter space with a wrapped rotation term."""
    d_rot = abs((a.global_rotation - b.global_rotation + math.pi) % (2 * math.pi) - math.pi)
    d_flex = np.asarray(a.flexion) - np.asarray(b.flexion)
    d_abd = np.asarray(a.abduction) - np.asarray(b.abduction)
    d_scale = a.scale - b.scale
    return float(
        math.sqrt(d_rot**2 + d_flex @ d_flex + d_abd @ d_abd + d_scale**2)
    )


def save_ground_truth(truth: dict[int, PoseParams], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for crop_id in sorted(truth):
            rec = truth[crop_id].to_record(crop_id)
            f.write(json.dumps(rec, separators=(", ", ": ")) + "\n")


def load_ground_truth(path) -> dict[int, PoseParams]:
    truth: dict[int, PoseParams] = {}
    with open(Path(path), "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                truth[int(rec["crop_id"])] = PoseParams.from_record(rec)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ParseError(f"bad ground-truth record: {e}", line_no) from e
    return truth
