"""Exception types shared across the pipeline."""


class HandPairError(Exception):
    """Base class for all handpair errors."""


class CorruptCrop(HandPairError):
    """A hand crop violates its structural invariants (keypoint count, ranges)."""


class ParseError(HandPairError):
    """A manifest line could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class DuplicateRecord(HandPairError):
    """Two records share a (video_id, frame_idx) key or a crop id."""


class HandednessError(HandPairError):
    """Operation requires right-converted crops but got a left one."""


class EmptyCorpus(HandPairError):
    """An index cannot be built over zero crops."""


class NoEligibleCandidate(HandPairError):
    """Every candidate shares the query's video, so no positive exists."""


class MissingGroundTruth(HandPairError):
    """A mined crop id has no ground-truth pose parameters."""


class ShapeError(HandPairError):
    """Array shape is incompatible with the operation."""


class DegenerateFeature(HandPairError):
    """A feature row has (near-)zero norm; cosine similarity is undefined."""


class BatchTooSmall(HandPairError):
    """Contrastive batch has fewer than two pairs, so no negatives exist."""


class DivergenceError(HandPairError):
    """Training produced a non-finite loss."""


class SingularProbe(HandPairError):
    """Ridge system stayed singular after regularization escalation."""


class StaleArtifact(HandPairError):
    """Provenance hash mismatch between dependent pipeline artifacts."""
