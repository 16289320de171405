"""handpair: mine similar-hand positive pairs and pre-train a contrastive encoder.

Pipeline stages, each backed by one module:

- ``corpus``: hand-crop data model, handedness balancing, manifest I/O
- ``synth``:  synthetic kinematic corpora with ground-truth pose parameters
- ``embed``:  42-dim keypoint vectors and PCA pose embeddings
- ``mine``:   cross-video nearest-pose positive pairs (exact or approximate)
- ``loss``:   geometric augmentations, inverse feature correction, NT-Xent
- ``train``:  manual-gradient encoder, pre-training loop, ridge probe
- ``cli``:    command-line pipeline with provenance-hashed artifacts
"""

__version__ = "0.1.0"

from .corpus import (
    Corpus,
    HandCrop,
    Handedness,
    balance_handedness,
    concat_corpora,
    convert_all_right,
    filter_by_confidence,
    load_manifest,
    normalize_handedness,
    save_manifest,
)
from .embed import (
    PcaModel,
    explained_variance,
    load_model,
    pca_fit,
    pca_project,
    pca_reconstruct,
    save_model,
    vectorize,
    vectorize_corpus,
)
from .errors import (
    BatchTooSmall,
    CorruptCrop,
    DegenerateFeature,
    DivergenceError,
    DuplicateRecord,
    EmptyCorpus,
    HandPairError,
    HandednessError,
    MissingGroundTruth,
    NoEligibleCandidate,
    ParseError,
    ShapeError,
    SingularProbe,
    StaleArtifact,
)
from .loss import (
    AffineTransform,
    NtXentConfig,
    apply_transform,
    inverse_correct,
    nt_xent,
    sample_transform,
    scalar_invariance_check,
    transform_features,
)
from .mine import (
    EmbeddingIndex,
    IndexMode,
    PairManifest,
    build_index,
    load_pairs,
    mine_all,
    mining_quality,
    save_pairs,
    sim_query,
)
from .synth import (
    PoseParams,
    SynthConfig,
    forward_kinematics,
    generate_corpus,
    load_ground_truth,
    param_distance,
    save_ground_truth,
)
from .train import (
    Encoder,
    PairSource,
    TrainConfig,
    build_observations,
    build_targets,
    compare_pair_sources,
    forward,
    linear_probe,
    load_encoder,
    pretrain,
    ridge_probe,
    save_encoder,
    train_step,
)
