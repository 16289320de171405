"""Geometric augmentations, inverse feature correction, and the contrastive loss.

Augmentations are planar similarity transforms applied about the crop
center: p' = center + scale * R(rotation) * (p - center) + translation.
They form a group; ``AffineTransform.inverse`` is exact.

Features are interpreted as F/2 planar 2-vectors. ``transform_features``
applies the rotation/scale part of a transform to each 2-vector and
``inverse_correct`` undoes it, re-aligning features of geometrically
transformed inputs. Translation acts on points, not directions, so it is
excluded by default; ``translate=True`` treats feature 2-vectors as points
and inverts the full transform.

``nt_xent`` is the normalized temperature-scaled cross entropy over a batch
of 2n rows paired as (2k, 2k+1): each row is an anchor, its pair partner is
the positive, and every other row is a negative. Returns the loss and its
exact gradient with respect to the raw (pre-normalization) rows.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import BatchTooSmall, DegenerateFeature, ShapeError

CROP_CENTER = np.array([0.5, 0.5])
SCALE_GATE = (0.5, 2.0)
DEFAULT_ROTATION_RANGE = math.pi / 2  # +/- 90 degrees
DEFAULT_SCALE_RANGE = (0.8, 1.2)
DEFAULT_TRANSLATION_RANGE = 0.1
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class AffineTransform:
    rotation: float
    scale: float
    translation: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        if len(self.translation) != 2:
            raise ValueError("translation must be (tx, ty)")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be finite and > 0, got {self.scale!r}")
        if not math.isfinite(self.rotation):
            raise ValueError("rotation must be finite")

    def inverse(self) -> "AffineTransform":
        """Exact group inverse about the same center."""
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        tx, ty = self.translation
        inv_s = 1.0 / self.scale
        return AffineTransform(
            rotation=-self.rotation,
            scale=inv_s,
            translation=(
                -inv_s * (c * tx - s * ty),
                -inv_s * (s * tx + c * ty),
            ),
        )


def sample_transform(
    rng_seed,
    rotation_range: float = DEFAULT_ROTATION_RANGE,
    scale_range: tuple[float, float] = DEFAULT_SCALE_RANGE,
    translation_range: float = DEFAULT_TRANSLATION_RANGE,
) -> AffineTransform:
    """Draw a random transform; accepts an int seed or a Generator.

    Draw order is rotation, scale, tx, ty. Scale ranges outside the
    [0.5, 2.0] gate are rejected at sampling time.
    """
    if not (SCALE_GATE[0] <= scale_range[0] <= scale_range[1] <= SCALE_GATE[1]):
        raise ValueError(f"scale_range {scale_range} outside gate {SCALE_GATE}")
    rng = (
        rng_seed
        if isinstance(rng_seed, np.random.Generator)
        else np.random.default_rng(rng_seed)
    )
    return AffineTransform(
        rotation=float(rng.uniform(-rotation_range, rotation_range)),
        scale=float(rng.uniform(*scale_range)),
        translation=(
            float(rng.uniform(-translation_range, translation_range)),
            float(rng.uniform(-translation_range, translation_range)),
        ),
    )


def apply_transform(t: AffineTransform, points: np.ndarray) -> np.ndarray:
    """Transform (n, 2) points about the crop center."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(f"expected (n, 2) points, got {pts.shape}")
    c, s = math.cos(t.rotation), math.sin(t.rotation)
    rot = np.array([[c, -s], [s, c]])
    centered = pts - CROP_CENTER
    return CROP_CENTER + t.scale * centered @ rot.T + np.asarray(t.translation)


def apply_transforms_batch(
    transforms: list[AffineTransform], points: np.ndarray
) -> np.ndarray:
    """Apply transforms[i] to points[i]; points is (m, n, 2).

    Row-wise identical to apply_transform, just vectorized over the batch.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 3 or pts.shape[2] != 2 or pts.shape[0] != len(transforms):
        raise ShapeError(f"expected ({len(transforms)}, n, 2) points, got {pts.shape}")
    ang = np.array([t.rotation for t in transforms])
    scale = np.array([t.scale for t in transforms])
    trans = np.array([t.translation for t in transforms])
    c, s = np.cos(ang), np.sin(ang)
    x = pts[:, :, 0] - CROP_CENTER[0]
    y = pts[:, :, 1] - CROP_CENTER[1]
    out = np.empty_like(pts)
    out[:, :, 0] = CROP_CENTER[0] + scale[:, None] * (c[:, None] * x - s[:, None] * y) + trans[:, 0:1]
    out[:, :, 1] = CROP_CENTER[1] + scale[:, None] * (s[:, None] * x + c[:, None] * y) + trans[:, 1:2]
    return out


def _feature_rotscale(features: np.ndarray, rotation: float, scale: float) -> np.ndarray:
    """Apply scale * R(rotation) to each of the F/2 feature 2-vectors."""
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] % 2 != 0:
        raise ShapeError(f"feature dimension must be even, got {f.shape[-1]}")
    pairs = f.reshape(*f.shape[:-1], -1, 2)
    c, s = math.cos(rotation), math.sin(rotation)
    out = np.empty_like(pairs)
    out[..., 0] = scale * (c * pairs[..., 0] - s * pairs[..., 1])
    out[..., 1] = scale * (s * pairs[..., 0] + c * pairs[..., 1])
    return out.reshape(f.shape)


def transform_features(t: AffineTransform, features: np.ndarray) -> np.ndarray:
    """Forward action of t's rotation and scale on feature 2-vectors."""
    return _feature_rotscale(features, t.rotation, t.scale)


def inverse_correct(
    t: AffineTransform, features: np.ndarray, translate: bool = False
) -> np.ndarray:
    """Undo t's geometric action on a feature row (or batch of rows).

    Default: apply (1/scale) * R(-rotation) to each 2-vector, the inverse of
    the rotation/scale group action. With ``translate=True`` the 2-vectors
    are treated as points and the full point transform (center offset and
    translation included) is inverted instead.
    """
    if not translate:
        return _feature_rotscale(features, -t.rotation, 1.0 / t.scale)
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] % 2 != 0:
        raise ShapeError(f"feature dimension must be even, got {f.shape[-1]}")
    pairs = f.reshape(-1, 2)
    inv = t.inverse()
    c, s = math.cos(inv.rotation), math.sin(inv.rotation)
    rot = np.array([[c, -s], [s, c]])
    out = CROP_CENTER + inv.scale * (pairs - CROP_CENTER) @ rot.T + np.asarray(inv.translation)
    return out.reshape(f.shape)


@dataclass(frozen=True)
class NtXentConfig:
    temperature: float = 0.5  # similarity is always cosine

    def __post_init__(self):
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError(f"temperature must be > 0, got {self.temperature!r}")


def nt_xent(batch: np.ndarray, cfg: NtXentConfig) -> tuple[float, np.ndarray]:
    """Contrastive loss over 2n paired rows and its gradient.

    Rows are L2-normalized internally; similarities are cosine. For anchor i
    with positive p(i) = i XOR 1, the per-anchor loss is
    -log( exp(s_ip/tau) / sum_{k != i} exp(s_ik/tau) ), and the total is the
    mean over all 2n anchors. The returned gradient is with respect to the
    raw input rows.
    """
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"expected a 2-D batch, got shape {X.shape}")
    m = X.shape[0]
    if m % 2 != 0:
        raise ShapeError(f"batch needs an even number of rows, got {m}")
    if m < 4:
        raise BatchTooSmall(f"need at least 2 pairs (4 rows), got {m} rows")
    if not np.all(np.isfinite(X)):
        raise DegenerateFeature("batch contains non-finite features")
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    if np.any(norms < _NORM_FLOOR):
        raise DegenerateFeature("zero-norm feature row (encoder collapse?)")
    U = X / norms[:, None]

    tau = cfg.temperature
    logits = (U @ U.T) / tau
    np.fill_diagonal(logits, -np.inf)
    row_max = logits.max(axis=1)
    lse = row_max + np.log(np.exp(logits - row_max[:, None]).sum(axis=1))
    pos = np.arange(m) ^ 1
    per_anchor = lse - logits[np.arange(m), pos]
    loss = float(per_anchor.mean())

    P = np.exp(logits - lse[:, None])  # softmax over candidates; diag is 0
    P[np.arange(m), pos] -= 1.0
    G = P / (m * tau)
    dU = (G + G.T) @ U
    dX = (dU - np.einsum("ij,ij->i", dU, U)[:, None] * U) / norms[:, None]
    return loss, dX


def scalar_invariance_check(batch: np.ndarray, cfg: NtXentConfig, scales=7.3) -> dict:
    """Cosine similarity ignores row magnitudes; report the loss drift when
    rows are rescaled by a positive constant (or per-row constants)."""
    X = np.asarray(batch, dtype=np.float64)
    factors = np.asarray(scales, dtype=np.float64)
    if np.any(factors <= 0):
        raise ValueError("scales must be positive")
    scaled = X * (factors[:, None] if factors.ndim == 1 else factors)
    loss_base, _ = nt_xent(X, cfg)
    loss_scaled, _ = nt_xent(scaled, cfg)
    return {
        "loss_base": loss_base,
        "loss_scaled": loss_scaled,
        "abs_difference": abs(loss_base - loss_scaled),
    }
