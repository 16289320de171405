"""Small shared helpers: seed derivation and artifact hashing."""

import hashlib
from pathlib import Path


def derive_seed(seed: int, label: str) -> int:
    """Derive a per-stage seed from the top-level seed.

    The same (seed, label) always yields the same value, so one top-level
    seed reproduces every stage of the pipeline.
    """
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def sha256_file(path) -> str:
    """Hex sha256 of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def require_file(path, what: str) -> Path:
    """Return path if it exists, else raise FileNotFoundError naming the artifact."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing {what}: {p}")
    return p
