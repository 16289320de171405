"""Desk-scale contrastive pre-training with manual gradients, plus a ridge probe.

Observations are noisy keypoint vectors (42 dims) concatenated with
per-video nuisance dimensions that stand in for appearance and background:
crops of one video share the same nuisance vector. Two augmentations of the
same crop therefore share nuisance content, while a mined cross-video pair
shares pose but not nuisance -- which is exactly the signal that separates
the three pair sources.

The encoder is a small tanh MLP: E(x) = W2 tanh(W1 x + b1) + b2 followed by
a linear projection head g(e) = W3 e + b3. Gradients are written out by
hand and checked against finite differences in the test suite.

Encoder file layout (little-endian):
    0   8  magic b"HPENC_v1"
    8  16  uint32 x4: input_dim, hidden_dim, embed_dim, projection_dim
    24  .. parameter arrays as float64, C order, in the fixed order
           W1, b1, W2, b2, W3, b3
"""

import math
import struct
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .corpus import Corpus, balance_handedness
from .embed import DEFAULT_D_OUT, pca_fit, vectorize_corpus
from .errors import DivergenceError, ShapeError, SingularProbe
from .loss import (
    DEFAULT_ROTATION_RANGE,
    DEFAULT_SCALE_RANGE,
    DEFAULT_TRANSLATION_RANGE,
    NtXentConfig,
    _feature_rotscale,
    apply_transforms_batch,
    inverse_correct,
    nt_xent,
    sample_transform,
)
from .mine import build_index, mine_all
from .synth import PoseParams, SynthConfig, generate_corpus
from .util import derive_seed

_ENC_MAGIC = b"HPENC_v1"
PARAM_ORDER = ("W1", "b1", "W2", "b2", "W3", "b3")


class PairSource(str, Enum):
    SELF_AUGMENT = "self_augment"
    SELF_AUGMENT_EQUIVARIANT = "self_augment_equivariant"
    MINED_PAIRS = "mined_pairs"


@dataclass(frozen=True)
class TrainConfig:
    pair_source: PairSource = PairSource.MINED_PAIRS
    batch_pairs: int = 32
    steps: int = 1000
    learning_rate: float = 0.3
    seed: int = 0
    temperature: float = 0.5
    hidden_dim: int = 64
    embed_dim: int = 32
    projection_dim: int = 16
    rotation_range: float = DEFAULT_ROTATION_RANGE
    scale_range: tuple[float, float] = DEFAULT_SCALE_RANGE
    translation_range: float = DEFAULT_TRANSLATION_RANGE
    nuisance_noise: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "pair_source", PairSource(self.pair_source))
        if self.batch_pairs < 2:
            raise ValueError("batch_pairs must be >= 2")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.projection_dim % 2 != 0:
            raise ValueError("projection_dim must be even")


class Encoder:
    """Two affine layers with a tanh between (E) plus a linear head (g)."""

    def __init__(self, input_dim, hidden_dim=64, embed_dim=32, projection_dim=16, rng=0):
        if projection_dim % 2 != 0:
            raise ValueError("projection_dim must be even")
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.projection_dim = projection_dim
        self.params = {
            "W1": rng.normal(0.0, 1.0 / math.sqrt(input_dim), (hidden_dim, input_dim)),
            "b1": np.zeros(hidden_dim),
            "W2": rng.normal(0.0, 1.0 / math.sqrt(hidden_dim), (embed_dim, hidden_dim)),
            "b2": np.zeros(embed_dim),
            "W3": rng.normal(0.0, 1.0 / math.sqrt(embed_dim), (projection_dim, embed_dim)),
            "b3": np.zeros(projection_dim),
        }

    def copy(self) -> "Encoder":
        clone = Encoder.__new__(Encoder)
        clone.input_dim = self.input_dim
        clone.hidden_dim = self.hidden_dim
        clone.embed_dim = self.embed_dim
        clone.projection_dim = self.projection_dim
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone


def forward(enc: Encoder, obs: np.ndarray):
    """Deterministic forward pass.

    Returns (embedding, projection, cache); accepts one observation or an
    (m, input_dim) batch. The cache holds the intermediates the backward
    pass needs.
    """
    X = np.asarray(obs, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != enc.input_dim:
        raise ShapeError(f"expected (*, {enc.input_dim}) observations, got {X.shape}")
    p = enc.params
    H = np.tanh(X @ p["W1"].T + p["b1"])
    E = H @ p["W2"].T + p["b2"]
    Z = E @ p["W3"].T + p["b3"]
    cache = {"X": X, "H": H, "E": E}
    if single:
        return E[0], Z[0], cache
    return E, Z, cache


def backward(enc: Encoder, cache: dict, dZ: np.ndarray) -> dict:
    """Parameter gradients given the loss gradient at the projection output."""
    p = enc.params
    X, H, E = cache["X"], cache["H"], cache["E"]
    grads = {}
    grads["W3"] = dZ.T @ E
    grads["b3"] = dZ.sum(axis=0)
    dE = dZ @ p["W3"]
    grads["W2"] = dE.T @ H
    grads["b2"] = dE.sum(axis=0)
    dH = (dE @ p["W2"]) * (1.0 - H * H)
    grads["W1"] = dH.T @ X
    grads["b1"] = dH.sum(axis=0)
    return grads


def loss_and_grads(enc, batch_obs, cfg: TrainConfig, transforms=None):
    """NT-Xent loss of a prepared (already augmented) batch plus parameter grads.

    When ``transforms`` is given (one per row), projection outputs are
    corrected with the inverse rotation/scale before the loss, and the
    correction is accounted for in the backward pass.
    """
    _, Z, cache = forward(enc, batch_obs)
    if transforms is not None:
        Zc = np.stack([inverse_correct(t, z) for t, z in zip(transforms, Z)])
    else:
        Zc = Z
    loss, dZc = nt_xent(Zc, NtXentConfig(cfg.temperature))
    if transforms is not None:
        dZ = np.stack(
            [
                _feature_rotscale(g, t.rotation, 1.0 / t.scale)
                for t, g in zip(transforms, dZc)
            ]
        )
    else:
        dZ = dZc
    return loss, backward(enc, cache, dZ)


def _augment_batch(rows: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    """Sample one transform per row, warp the keypoint dims, jitter nuisance.

    Draw order per call: 2n transforms (rotation, scale, tx, ty each), then
    one normal block for the nuisance jitter.
    """
    transforms = [
        sample_transform(
            rng,
            rotation_range=cfg.rotation_range,
            scale_range=cfg.scale_range,
            translation_range=cfg.translation_range,
        )
        for _ in range(rows.shape[0])
    ]
    out = rows.copy()
    pts = out[:, :42].reshape(-1, 21, 2)
    out[:, :42] = apply_transforms_batch(transforms, pts).reshape(-1, 42)
    if out.shape[1] > 42 and cfg.nuisance_noise > 0:
        out[:, 42:] += rng.normal(0.0, cfg.nuisance_noise, out[:, 42:].shape)
    return out, transforms


def train_step(enc: Encoder, pair_batch: np.ndarray, cfg: TrainConfig,
               rng: np.random.Generator, step: int | None = None):
    """One gradient-descent update on a batch of positive observation pairs.

    ``pair_batch`` is (n, 2, obs_dim); member 0 of each pair lands on row 2k
    and member 1 on row 2k+1. Returns (enc, loss) with enc updated in place.
    """
    batch = np.asarray(pair_batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[1] != 2:
        raise ShapeError(f"expected (n, 2, obs_dim) pairs, got {batch.shape}")
    rows = batch.reshape(-1, batch.shape[2])
    aug, transforms = _augment_batch(rows, cfg, rng)
    corrected = cfg.pair_source in (
        PairSource.SELF_AUGMENT_EQUIVARIANT,
        PairSource.MINED_PAIRS,
    )
    loss, grads = loss_and_grads(enc, aug, cfg, transforms if corrected else None)
    if not math.isfinite(loss):
        at = f" at step {step}" if step is not None else ""
        raise DivergenceError(f"non-finite loss{at}: {loss!r}")
    for name, g in grads.items():
        enc.params[name] -= cfg.learning_rate * g
    return enc, loss


def pretrain(observations: np.ndarray, cfg: TrainConfig, pairs=None):
    """Full pre-training loop; returns (encoder, [(step, loss), ...]).

    ``pairs`` is an (m, 2) array of observation row indices and is required
    for the mined-pairs source; the self-augment sources ignore it and pair
    each sampled crop with itself.
    """
    obs = np.asarray(observations, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    enc = Encoder(
        obs.shape[1],
        hidden_dim=cfg.hidden_dim,
        embed_dim=cfg.embed_dim,
        projection_dim=cfg.projection_dim,
        rng=rng,
    )
    if cfg.pair_source is PairSource.MINED_PAIRS:
        if pairs is None or len(pairs) == 0:
            raise ValueError("mined_pairs source requires a pair array")
        pairs = np.asarray(pairs, dtype=np.int64)
        if len(pairs) < cfg.batch_pairs:
            raise ValueError(
                f"need at least batch_pairs={cfg.batch_pairs} mined pairs, "
                f"got {len(pairs)}"
            )
    elif obs.shape[0] < cfg.batch_pairs:
        raise ValueError("fewer observations than batch_pairs")

    history = []
    for step in range(cfg.steps):
        if cfg.pair_source is PairSource.MINED_PAIRS:
            pick = rng.choice(len(pairs), size=cfg.batch_pairs, replace=False)
            batch = np.stack([obs[pairs[pick, 0]], obs[pairs[pick, 1]]], axis=1)
        else:
            pick = rng.choice(obs.shape[0], size=cfg.batch_pairs, replace=False)
            batch = np.stack([obs[pick], obs[pick]], axis=1)
        enc, loss = train_step(enc, batch, cfg, rng, step=step)
        history.append((step, loss))
    return enc, history


def build_observations(
    corpus: Corpus, nuisance_dims: int = 16, nuisance_scale: float = 1.0, seed: int = 0
) -> np.ndarray:
    """(n_crops, 42 + nuisance_dims) observation matrix in corpus order.

    Nuisance vectors are drawn once per video, so all crops of a video share
    them -- the stand-in for shared backgrounds and appearance.
    """
    rng = np.random.default_rng(seed)
    nuisance = rng.normal(0.0, nuisance_scale, (max(corpus.n_videos, 1), nuisance_dims))
    out = np.empty((len(corpus), 42 + nuisance_dims), dtype=np.float64)
    for i, crop in enumerate(corpus):
        out[i, :42] = crop.keypoints.ravel()
        out[i, 42:] = nuisance[crop.video_id]
    return out


def build_targets(corpus: Corpus, truth: dict[int, PoseParams]) -> np.ndarray:
    """(n_crops, 13) pose-parameter regression targets in corpus order."""
    return np.stack([truth[c.crop_id].to_target_vector() for c in corpus])


def ridge_probe(
    features: np.ndarray,
    targets: np.ndarray,
    lam: float = 1e-3,
    heldout_fraction: float = 0.25,
    seed: int = 0,
) -> float:
    """Closed-form ridge regression from frozen features to targets.

    Returns the held-out mean squared error. A singular or non-finite solve
    escalates lambda tenfold up to three times before giving up.
    """
    F = np.asarray(features, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, d = F.shape
    if n < 10 * d:
        raise ValueError(f"need >= {10 * d} samples for {d}-dim features, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_held = max(1, int(round(n * heldout_fraction)))
    held, fit = perm[:n_held], perm[n_held:]

    A = np.concatenate([F[fit], np.ones((len(fit), 1))], axis=1)
    B = np.concatenate([F[held], np.ones((len(held), 1))], axis=1)
    gram = A.T @ A
    rhs = A.T @ Y[fit]
    for _ in range(4):
        try:
            W = np.linalg.solve(gram + lam * np.eye(d + 1), rhs)
        except np.linalg.LinAlgError:
            W = None
        if W is not None and np.all(np.isfinite(W)):
            pred = B @ W
            return float(np.mean((pred - Y[held]) ** 2))
        lam *= 10.0
    raise SingularProbe("ridge system stayed singular after 3 escalations")


def linear_probe(
    enc: Encoder,
    observations: np.ndarray,
    targets: np.ndarray,
    lam: float = 1e-3,
    heldout_fraction: float = 0.25,
    seed: int = 0,
) -> float:
    """Held-out MSE of a ridge regressor on the frozen encoder's embeddings."""
    E, _, _ = forward(enc, observations)
    return ridge_probe(E, targets, lam=lam, heldout_fraction=heldout_fraction, seed=seed)


def run_experiment(
    synth_cfg: SynthConfig,
    train_cfg: TrainConfig,
    nuisance_dims: int = 16,
    nuisance_scale: float = 1.0,
    pca_d_out: int = DEFAULT_D_OUT,
) -> dict:
    """One (corpus, mode) cell: generate, preprocess, mine, pretrain, probe."""
    seed = synth_cfg.seed
    corpus, truth = generate_corpus(synth_cfg)
    corpus = balance_handedness(corpus, seed=derive_seed(seed, "balance"))
    obs = build_observations(
        corpus, nuisance_dims, nuisance_scale, seed=derive_seed(seed, "nuisance")
    )
    targets = build_targets(corpus, truth)
    pairs_rows = None
    if train_cfg.pair_source is PairSource.MINED_PAIRS:
        model = pca_fit(vectorize_corpus(corpus), d_out=pca_d_out,
                        sample_seed=derive_seed(seed, "pca"))
        index = build_index(corpus, model)
        manifest = mine_all(index)
        row_of = {c.crop_id: i for i, c in enumerate(corpus)}
        pairs_rows = np.array([(row_of[q], row_of[p]) for q, p, _ in manifest.pairs])
    enc, history = pretrain(obs, train_cfg, pairs=pairs_rows)
    mse = linear_probe(enc, obs, targets, seed=derive_seed(seed, "probe"))
    return {"mse": mse, "final_loss": history[-1][1] if history else float("nan")}


def compare_pair_sources(
    synth_cfg: SynthConfig,
    train_cfg: TrainConfig,
    seeds=(0, 1, 2, 3, 4),
    nuisance_dims: int = 16,
    nuisance_scale: float = 1.0,
    pca_d_out: int = DEFAULT_D_OUT,
) -> dict:
    """Probe MSE for every pair source over shared corpora and seeds.

    Per seed, the three modes see the same corpus, the same observations,
    and the same encoder initialization; only the positive-pair recipe
    differs. Reports per-cell MSE, per-mode medians, and pairwise win rates.
    """
    modes = [
        PairSource.SELF_AUGMENT,
        PairSource.SELF_AUGMENT_EQUIVARIANT,
        PairSource.MINED_PAIRS,
    ]
    mse: dict[str, dict[int, float]] = {m.value: {} for m in modes}
    for seed in seeds:
        scfg = replace(synth_cfg, seed=seed)
        for mode in modes:
            tcfg = replace(train_cfg, pair_source=mode, seed=seed)
            cell = run_experiment(
                scfg, tcfg, nuisance_dims, nuisance_scale, pca_d_out
            )
            mse[mode.value][seed] = cell["mse"]
    medians = {m: float(np.median(list(v.values()))) for m, v in mse.items()}
    win_rate = {}
    for a in modes:
        for b in modes:
            if a is b:
                continue
            wins = sum(
                1 for s in seeds if mse[a.value][s] < mse[b.value][s]
            )
            win_rate[f"{a.value}<{b.value}"] = wins / len(seeds)
    return {
        "modes": [m.value for m in modes],
        "seeds": list(seeds),
        "mse": mse,
        "medians": medians,
        "win_rate": win_rate,
    }


def save_encoder(enc: Encoder, path) -> None:
    head = struct.pack(
        "<8sIIII",
        _ENC_MAGIC,
        enc.input_dim,
        enc.hidden_dim,
        enc.embed_dim,
        enc.projection_dim,
    )
    with open(path, "wb") as f:
        f.write(head)
        for name in PARAM_ORDER:
            f.write(np.ascontiguousarray(enc.params[name], dtype=np.float64).tobytes())


def load_encoder(path) -> Encoder:
    with open(path, "rb") as f:
        data = f.read()
    head_size = struct.calcsize("<8sIIII")
    magic, d_in, d_h, d_e, d_f = struct.unpack("<8sIIII", data[:head_size])
    if magic != _ENC_MAGIC:
        raise ValueError(f"not an encoder file (magic {magic!r})")
    enc = Encoder(int(d_in), int(d_h), int(d_e), int(d_f), rng=0)
    off = head_size
    for name in PARAM_ORDER:
        shape = enc.params[name].shape
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).copy()
        enc.params[name] = arr.reshape(shape)
        off += count * 8
    return enc
