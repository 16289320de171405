"""Hand-crop data model, handedness normalization, and manifest I/O.

A corpus is an immutable, ordered collection of hand crops grouped by source
video. Keypoints are stored in crop-normalized [0, 1] units so nothing
downstream depends on pixel resolution.

Manifest format (one JSON object per line, UTF-8):
    line 1: {"format": "handcrop-corpus-v1", "n_videos": N, "n_crops": M}
    lines 2..: {"crop_id": int, "video_id": int, "frame_idx": int,
                "handedness": "Left"|"Right", "confidence": float,
                "keypoints": [x1, y1, ..., x21, y21]}
Floats are serialized with shortest round-trip repr, so save/load is
bit-exact and re-serialization is byte-identical.
"""

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import CorruptCrop, DuplicateRecord, ParseError

NUM_JOINTS = 21
MANIFEST_FORMAT = "handcrop-corpus-v1"
DEFAULT_CONFIDENCE_THRESHOLD = 0.5


class Handedness(str, Enum):
    LEFT = "Left"
    RIGHT = "Right"


@dataclass(frozen=True)
class HandCrop:
    """One detected hand instance.

    ``keypoints`` is a read-only (21, 2) float64 array of (x, y) pairs in
    [0, 1]; joint order is wrist followed by four joints for each of the
    five fingers.
    """

    crop_id: int
    video_id: int
    frame_idx: int
    handedness: Handedness
    keypoints: np.ndarray
    confidence: float

    def __post_init__(self):
        pts = np.asarray(self.keypoints, dtype=np.float64)
        if pts.shape != (NUM_JOINTS, 2):
            raise CorruptCrop(
                f"crop {self.crop_id}: expected {NUM_JOINTS} (x, y) keypoints, "
                f"got shape {tuple(pts.shape)}"
            )
        if not np.all(np.isfinite(pts)):
            raise CorruptCrop(f"crop {self.crop_id}: non-finite keypoint coordinate")
        if pts.min() < 0.0 or pts.max() > 1.0:
            raise CorruptCrop(f"crop {self.crop_id}: keypoints outside [0, 1]")
        if not (np.isfinite(self.confidence) and 0.0 <= self.confidence <= 1.0):
            raise CorruptCrop(
                f"crop {self.crop_id}: confidence {self.confidence!r} outside [0, 1]"
            )
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "handedness", Handedness(self.handedness))
        object.__setattr__(self, "keypoints", pts)

    def to_record(self) -> dict:
        return {
            "crop_id": self.crop_id,
            "video_id": self.video_id,
            "frame_idx": self.frame_idx,
            "handedness": self.handedness.value,
            "confidence": self.confidence,
            "keypoints": [float(v) for v in self.keypoints.ravel()],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "HandCrop":
        flat = rec["keypoints"]
        if len(flat) != 2 * NUM_JOINTS:
            raise CorruptCrop(
                f"crop {rec.get('crop_id')}: expected {2 * NUM_JOINTS} coordinates, "
                f"got {len(flat)}"
            )
        return cls(
            crop_id=int(rec["crop_id"]),
            video_id=int(rec["video_id"]),
            frame_idx=int(rec["frame_idx"]),
            handedness=Handedness(rec["handedness"]),
            keypoints=np.asarray(flat, dtype=np.float64).reshape(NUM_JOINTS, 2),
            confidence=float(rec["confidence"]),
        )


class Corpus:
    """Immutable ordered collection of hand crops.

    ``n_videos`` counts video slots, including any emptied by filtering;
    ``per_video_counts[i]`` is the number of crops from video i.
    """

    def __init__(self, crops, n_videos: int | None = None):
        crops = tuple(crops)
        max_vid = max((c.video_id for c in crops), default=-1)
        if n_videos is None:
            n_videos = max_vid + 1
        if max_vid >= n_videos:
            raise ValueError(
                f"video_id {max_vid} out of range for n_videos={n_videos}"
            )
        seen_keys: set[tuple[int, int]] = set()
        seen_ids: set[int] = set()
        counts = [0] * n_videos
        for c in crops:
            key = (c.video_id, c.frame_idx)
            if key in seen_keys:
                raise DuplicateRecord(f"duplicate (video_id, frame_idx) {key}")
            if c.crop_id in seen_ids:
                raise DuplicateRecord(f"duplicate crop_id {c.crop_id}")
            seen_keys.add(key)
            seen_ids.add(c.crop_id)
            counts[c.video_id] += 1
        self.crops = crops
        self.n_videos = n_videos
        self.per_video_counts = tuple(counts)

    def __len__(self) -> int:
        return len(self.crops)

    def __iter__(self):
        return iter(self.crops)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        if self.n_videos != other.n_videos or len(self) != len(other):
            return False
        for a, b in zip(self.crops, other.crops):
            if (
                a.crop_id != b.crop_id
                or a.video_id != b.video_id
                or a.frame_idx != b.frame_idx
                or a.handedness != b.handedness
                or a.confidence != b.confidence
                or not np.array_equal(a.keypoints, b.keypoints)
            ):
                return False
        return True

    def count_handedness(self) -> tuple[int, int]:
        """(#left, #right)."""
        n_left = sum(1 for c in self.crops if c.handedness is Handedness.LEFT)
        return n_left, len(self.crops) - n_left


def normalize_handedness(crop: HandCrop, crop_width: float = 1.0) -> HandCrop:
    """Convert a left crop to the right-hand convention by mirroring x.

    Right crops are returned unchanged; joint ordering is never touched, so
    the mirrored left hand reads as an anatomically right hand under the
    same indexing.
    """
    if crop.handedness is Handedness.RIGHT:
        return crop
    pts = crop.keypoints.copy()
    pts[:, 0] = crop_width - pts[:, 0]
    return replace(crop, handedness=Handedness.RIGHT, keypoints=pts)


def convert_all_right(corpus: Corpus) -> Corpus:
    """Apply normalize_handedness to every crop without any subsampling."""
    return Corpus([normalize_handedness(c) for c in corpus.crops], corpus.n_videos)


def balance_handedness(corpus: Corpus, seed: int) -> Corpus:
    """Equalize left/right counts, then convert everything to right.

    The majority class is subsampled uniformly with the given seed
    (oversampling would inject duplicate crops, which mining would then pick
    up as distance-zero positives). A single-class corpus passes through and
    is only converted.
    """
    n_left, n_right = corpus.count_handedness()
    keep = list(corpus.crops)
    if n_left != n_right and n_left > 0 and n_right > 0:
        majority = Handedness.LEFT if n_left > n_right else Handedness.RIGHT
        target = min(n_left, n_right)
        idx = [i for i, c in enumerate(corpus.crops) if c.handedness is majority]
        rng = np.random.default_rng(seed)
        kept_idx = set(rng.choice(len(idx), size=target, replace=False).tolist())
        drop = {idx[i] for i in range(len(idx)) if i not in kept_idx}
        keep = [c for i, c in enumerate(corpus.crops) if i not in drop]
    return Corpus([normalize_handedness(c) for c in keep], corpus.n_videos)


def filter_by_confidence(corpus: Corpus, threshold: float) -> Corpus:
    """Keep crops with confidence >= threshold. An empty result is legal."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    return Corpus(
        [c for c in corpus.crops if c.confidence >= threshold], corpus.n_videos
    )


def concat_corpora(a: Corpus, b: Corpus) -> Corpus:
    """Concatenate two corpora with disjoint video-id and crop-id ranges."""
    id_offset = max((c.crop_id for c in a.crops), default=-1) + 1
    shifted = [
        replace(
            c,
            crop_id=c.crop_id + id_offset,
            video_id=c.video_id + a.n_videos,
            keypoints=c.keypoints.copy(),
        )
        for c in b.crops
    ]
    return Corpus(list(a.crops) + shifted, a.n_videos + b.n_videos)


def save_manifest(corpus: Corpus, path) -> None:
    header = {
        "format": MANIFEST_FORMAT,
        "n_videos": corpus.n_videos,
        "n_crops": len(corpus),
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, separators=(", ", ": ")) + "\n")
        for crop in corpus.crops:
            f.write(json.dumps(crop.to_record(), separators=(", ", ": ")) + "\n")


def load_manifest(path) -> Corpus:
    """Load a corpus manifest; an empty file yields an empty corpus."""
    path = Path(path)
    crops = []
    n_videos = None
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON ({e.msg})", line_no) from e
            if line_no == 1:
                if not isinstance(rec, dict) or rec.get("format") != MANIFEST_FORMAT:
                    raise ParseError(
                        f"expected header with format={MANIFEST_FORMAT!r}", line_no
                    )
                n_videos = int(rec["n_videos"])
                continue
            try:
                crops.append(HandCrop.from_record(rec))
            except (CorruptCrop, KeyError, TypeError, ValueError) as e:
                raise ParseError(f"bad crop record: {e}", line_no) from e
    if n_videos is None:  # empty file
        return Corpus([], 0)
    return Corpus(crops, n_videos)
