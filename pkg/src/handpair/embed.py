"""42-dim pose vectorization and PCA projection.

The 21 keypoints of a right-converted crop are flattened to an interleaved
(x1, y1, ..., x21, y21) vector. A PCA model projects such vectors into a
lower-dimensional pose space: p = M^T (v - mean), where M holds the top
eigenvectors of the sample covariance.

Model file layout (little-endian, all offsets in bytes):
    0    8   magic b"HPPCA_v1"
    8    4   uint32 d_out
    12   4   uint32 flags (bit 0: rank_deficient)
    16   16  sign-convention tag, ASCII, NUL-padded
    32   8   uint64 n_fit_samples
    40   64  fit-source sha256 hex, ASCII, NUL-padded (all-NUL if unset)
    104  8   float64 total_variance
    112  336 mean, 42 float64
    448  42*d_out*8 projection matrix, float64, column-major
    ...  d_out*8 eigenvalues, float64
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, HandCrop, Handedness
from .errors import HandednessError

VECTOR_DIM = 42
DEFAULT_D_OUT = 14  # default width of the pose space
DEFAULT_MAX_FIT_SAMPLES = 200_000
SIGN_CONVENTION = "maxabs-positive"
_MAGIC = b"HPPCA_v1"


def vectorize(crop: HandCrop) -> np.ndarray:
    """Flatten a right-converted crop's keypoints to a (42,) vector."""
    if crop.handedness is not Handedness.RIGHT:
        raise HandednessError(
            f"crop {crop.crop_id} is {crop.handedness.value}; convert to right first"
        )
    return crop.keypoints.ravel().astype(np.float64, copy=True)


def vectorize_corpus(corpus: Corpus) -> np.ndarray:
    """(n, 42) matrix of pose vectors in corpus order."""
    out = np.empty((len(corpus), VECTOR_DIM), dtype=np.float64)
    for i, crop in enumerate(corpus):
        out[i] = vectorize(crop)
    return out


@dataclass
class PcaModel:
    """Fitted PCA with orthonormal projection columns.

    ``rank_deficient`` is set when the fit data had fewer effective
    dimensions than d_out; trailing eigenvalues are then zero but the model
    is still usable.
    """

    mean: np.ndarray
    projection: np.ndarray  # (42, d_out), orthonormal columns
    eigenvalues: np.ndarray  # (d_out,), non-increasing, >= 0
    d_out: int
    total_variance: float
    rank_deficient: bool = False
    n_fit_samples: int = 0
    fit_source_hash: str = ""
    sign_convention: str = field(default=SIGN_CONVENTION)

    def project(self, v: np.ndarray) -> np.ndarray:
        """Project one (42,) vector or an (n, 42) batch."""
        return (np.asarray(v, dtype=np.float64) - self.mean) @ self.projection

    def reconstruct(self, e: np.ndarray) -> np.ndarray:
        """Map an embedding back to the 42-dim space (lossy unless full rank)."""
        return np.asarray(e, dtype=np.float64) @ self.projection.T + self.mean


def pca_fit(
    vectors: np.ndarray,
    d_out: int = DEFAULT_D_OUT,
    sample_seed: int = 0,
    max_fit_samples: int = DEFAULT_MAX_FIT_SAMPLES,
) -> PcaModel:
    """Fit PCA on pose vectors.

    Eigendecomposes the 42x42 sample covariance (ddof=1) and keeps the top
    d_out eigenpairs. Column signs follow a fixed convention (the
    largest-magnitude entry of each column is positive) so fits are
    bit-reproducible. When more than max_fit_samples vectors are given, a
    seeded uniform subsample is used.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != VECTOR_DIM:
        raise ValueError(f"expected (n, {VECTOR_DIM}) vectors, got {X.shape}")
    if not 1 <= d_out <= VECTOR_DIM:
        raise ValueError(f"d_out must be in [1, {VECTOR_DIM}], got {d_out}")
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot fit PCA on zero samples")
    if n > max_fit_samples:
        rng = np.random.default_rng(sample_seed)
        idx = np.sort(rng.choice(n, size=max_fit_samples, replace=False))
        X = X[idx]
        n = max_fit_samples

    mean = X.mean(axis=0)
    Xc = X - mean
    if n > 1:
        cov = (Xc.T @ Xc) / (n - 1)
    else:
        cov = np.zeros((VECTOR_DIM, VECTOR_DIM))
    w, V = np.linalg.eigh(cov)
    w = np.clip(w[::-1], 0.0, None)  # non-increasing, clamp tiny negatives
    V = V[:, ::-1]

    tol = max(w[0] * 1e-10, 1e-15)
    effective_rank = int(np.count_nonzero(w > tol))

    eigenvalues = w[:d_out].copy()
    M = V[:, :d_out].copy()
    for j in range(d_out):
        pivot = int(np.argmax(np.abs(M[:, j])))
        if M[pivot, j] < 0:
            M[:, j] = -M[:, j]

    return PcaModel(
        mean=mean,
        projection=M,
        eigenvalues=eigenvalues,
        d_out=d_out,
        total_variance=float(w.sum()),
        rank_deficient=effective_rank < d_out,
        n_fit_samples=n,
    )


def pca_project(model: PcaModel, v: np.ndarray) -> np.ndarray:
    """Pose embedding M^T (v - mean)."""
    return model.project(v)


def pca_reconstruct(model: PcaModel, e: np.ndarray) -> np.ndarray:
    return model.reconstruct(e)


def explained_variance(model: PcaModel, k: int) -> float:
    """Fraction of total fit variance captured by the first k components."""
    if not 1 <= k <= model.d_out:
        raise ValueError(f"k must be in [1, {model.d_out}], got {k}")
    if model.total_variance <= 0.0:
        return 1.0
    return float(model.eigenvalues[:k].sum() / model.total_variance)


def model_to_bytes(model: PcaModel) -> bytes:
    tag = model.sign_convention.encode("ascii")
    if len(tag) > 16:
        raise ValueError("sign convention tag too long")
    src = model.fit_source_hash.encode("ascii")
    if len(src) > 64:
        raise ValueError("fit source hash too long")
    head = struct.pack(
        "<8sII16sQ64sd",
        _MAGIC,
        model.d_out,
        1 if model.rank_deficient else 0,
        tag.ljust(16, b"\x00"),
        model.n_fit_samples,
        src.ljust(64, b"\x00"),
        model.total_variance,
    )
    body = (
        np.ascontiguousarray(model.mean, dtype=np.float64).tobytes()
        + np.asfortranarray(model.projection, dtype=np.float64).tobytes(order="F")
        + np.ascontiguousarray(model.eigenvalues, dtype=np.float64).tobytes()
    )
    return head + body


def model_from_bytes(data: bytes) -> PcaModel:
    head_size = struct.calcsize("<8sII16sQ64sd")
    magic, d_out, flags, tag, n_fit, src, total_var = struct.unpack(
        "<8sII16sQ64sd", data[:head_size]
    )
    if magic != _MAGIC:
        raise ValueError(f"not a PCA model file (magic {magic!r})")
    off = head_size
    mean = np.frombuffer(data, dtype="<f8", count=VECTOR_DIM, offset=off).copy()
    off += VECTOR_DIM * 8
    proj = np.frombuffer(data, dtype="<f8", count=VECTOR_DIM * d_out, offset=off)
    proj = proj.reshape((VECTOR_DIM, d_out), order="F").copy()
    off += VECTOR_DIM * d_out * 8
    eig = np.frombuffer(data, dtype="<f8", count=d_out, offset=off).copy()
    return PcaModel(
        mean=mean,
        projection=proj,
        eigenvalues=eig,
        d_out=int(d_out),
        total_variance=float(total_var),
        rank_deficient=bool(flags & 1),
        n_fit_samples=int(n_fit),
        fit_source_hash=src.rstrip(b"\x00").decode("ascii"),
        sign_convention=tag.rstrip(b"\x00").decode("ascii"),
    )


def save_model(model: PcaModel, path) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> PcaModel:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())


def export_model_text(model: PcaModel, path) -> None:
    """Human-readable dump for debugging; not meant to be loaded back."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"d_out {model.d_out}\n")
        f.write(f"sign_convention {model.sign_convention}\n")
        f.write(f"rank_deficient {model.rank_deficient}\n")
        f.write(f"n_fit_samples {model.n_fit_samples}\n")
        f.write(f"fit_source_hash {model.fit_source_hash or '-'}\n")
        f.write(f"total_variance {model.total_variance!r}\n")
        f.write("mean " + " ".join(repr(v) for v in model.mean) + "\n")
        f.write("eigenvalues " + " ".join(repr(v) for v in model.eigenvalues) + "\n")
        for j in range(model.d_out):
            col = " ".join(repr(v) for v in model.projection[:, j])
            f.write(f"column {j} {col}\n")
