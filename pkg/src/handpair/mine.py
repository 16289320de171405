"""Cross-video similar-hand mining.

For every query crop, find the crop with the minimum Euclidean embedding
distance among all crops from *other* videos. Restricting candidates to
other videos is what makes the pairs informative: the unconstrained nearest
neighbor is almost always an adjacent frame of the same video.

The exact path is a flat scan. Index rows are sorted by (video_id,
frame_idx), which buys two things: the same-video exclusion becomes one
contiguous column slice per query video, and the first-occurrence argmin is
exactly the lexicographic tie-break. Queries are processed in fixed-size
chunks via one GEMM per chunk; chunk boundaries do not depend on the thread
count, so multi-threaded mining is byte-identical to single-threaded.

Pair manifest format (UTF-8 text):
    # pair-manifest-v1
    # mode=exact
    # tiebreak=video-frame-lex-v1
    # corpus_sha256=<hex or ->
    # model_sha256=<hex or ->
    <query_crop_id> <positive_crop_id> <distance-repr>
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .corpus import Corpus
from .embed import PcaModel, vectorize_corpus
from .errors import (
    EmptyCorpus,
    MissingGroundTruth,
    NoEligibleCandidate,
    ParseError,
)
from .synth import PoseParams, param_distance

TIEBREAK_VERSION = "video-frame-lex-v1"
CHUNK = 128  # query rows per GEMM; fixed so threading cannot change results
APPROX_EPS = 0.05  # kd-tree branch-pruning slack in approximate mode


class IndexMode(str, Enum):
    EXACT = "exact"
    APPROX = "approx"


class EmbeddingIndex:
    """Immutable search pool of pose embeddings.

    Rows are sorted by (video_id, frame_idx); ``row_of`` maps crop ids to
    rows. Approximate mode adds a kd-tree over the same rows.
    """

    def __init__(self, embeddings, crop_ids, video_ids, frame_idxs, mode: IndexMode):
        order = np.lexsort((frame_idxs, video_ids))
        self.embeddings = np.ascontiguousarray(embeddings[order], dtype=np.float64)
        self.crop_ids = crop_ids[order].copy()
        self.video_ids = video_ids[order].copy()
        self.frame_idxs = frame_idxs[order].copy()
        self.mode = IndexMode(mode)
        self.norms = np.einsum("ij,ij->i", self.embeddings, self.embeddings)
        self.row_of = {int(c): i for i, c in enumerate(self.crop_ids)}
        self.tree = cKDTree(self.embeddings) if self.mode is IndexMode.APPROX else None
        for arr in (self.embeddings, self.crop_ids, self.video_ids, self.frame_idxs, self.norms):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.crop_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def video_span(self, video_id: int) -> tuple[int, int]:
        """Half-open row range [start, end) holding this video's crops."""
        start = int(np.searchsorted(self.video_ids, video_id, side="left"))
        end = int(np.searchsorted(self.video_ids, video_id, side="right"))
        return start, end


@dataclass(frozen=True)
class PairManifest:
    """Mined (query, positive, distance) triples with provenance."""

    pairs: tuple[tuple[int, int, float], ...]
    mode: str = IndexMode.EXACT.value
    tiebreak: str = TIEBREAK_VERSION
    corpus_hash: str = ""
    model_hash: str = ""

    def __post_init__(self):
        object.__setattr__(
            self, "pairs", tuple((int(q), int(p), float(d)) for q, p, d in self.pairs)
        )
        seen = set()
        for q, p, d in self.pairs:
            if q in seen:
                raise ValueError(f"duplicate query crop_id {q} in manifest")
            seen.add(q)
            if not (math.isfinite(d) and d >= 0.0):
                raise ValueError(f"bad distance {d!r} for query {q}")

    def __len__(self) -> int:
        return len(self.pairs)


def build_index(
    corpus: Corpus, model: PcaModel, mode: IndexMode = IndexMode.EXACT
) -> EmbeddingIndex:
    """Embed every crop and assemble the search pool."""
    if len(corpus) == 0:
        raise EmptyCorpus("cannot build an index over an empty corpus")
    embeddings = model.project(vectorize_corpus(corpus))
    crop_ids = np.fromiter((c.crop_id for c in corpus), dtype=np.int64, count=len(corpus))
    video_ids = np.fromiter((c.video_id for c in corpus), dtype=np.int64, count=len(corpus))
    frame_idxs = np.fromiter((c.frame_idx for c in corpus), dtype=np.int64, count=len(corpus))
    return EmbeddingIndex(embeddings, crop_ids, video_ids, frame_idxs, IndexMode(mode))


def _exact_chunk(index: EmbeddingIndex, row_start: int, row_end: int) -> np.ndarray:
    """Best cross-video row per query row in [row_start, row_end).

    All query rows must belong to one video. Returns -1 where no eligible
    candidate exists. The score is ||x||^2 - 2 q.x, which orders candidates
    identically to the true squared distance (the ||q||^2 term is constant
    per query); np.argmin's first-occurrence rule plus the sorted row order
    implements the (video_id, frame_idx) tie-break.
    """
    q = index.embeddings[row_start:row_end]
    scores = q @ index.embeddings.T
    scores *= -2.0
    scores += index.norms[None, :]
    vs, ve = index.video_span(int(index.video_ids[row_start]))
    scores[:, vs:ve] = np.inf
    best = np.argmin(scores, axis=1)
    hit = scores[np.arange(len(best)), best]
    best[~np.isfinite(hit)] = -1
    return best


def _exact_topk_chunk(
    index: EmbeddingIndex, row_start: int, row_end: int, k: int
) -> list[np.ndarray]:
    """Top-k eligible rows per query, ordered by (distance, row)."""
    q = index.embeddings[row_start:row_end]
    scores = q @ index.embeddings.T
    scores *= -2.0
    scores += index.norms[None, :]
    vs, ve = index.video_span(int(index.video_ids[row_start]))
    scores[:, vs:ve] = np.inf
    out = []
    for r in range(scores.shape[0]):
        row = scores[r]
        finite = np.isfinite(row)
        n_ok = int(np.count_nonzero(finite))
        if n_ok == 0:
            out.append(np.empty(0, dtype=np.int64))
            continue
        kk = min(k, n_ok)
        thresh = np.partition(row, kk - 1)[kk - 1]
        cand = np.flatnonzero(row <= thresh)
        cand = cand[np.lexsort((cand, row[cand]))][:kk]
        out.append(cand.astype(np.int64))
    return out


def _approx_rows(index: EmbeddingIndex, rows: np.ndarray) -> np.ndarray:
    """Approximate best cross-video row per query row (kd-tree, escalating k)."""
    best = np.full(len(rows), -1, dtype=np.int64)
    n = len(index)
    for i, r in enumerate(rows):
        qvid = index.video_ids[r]
        k = 8
        while True:
            kk = min(k, n)
            _, nbr = index.tree.query(index.embeddings[r], k=kk, eps=APPROX_EPS)
            nbr = np.atleast_1d(nbr)
            ok = nbr[index.video_ids[nbr] != qvid]
            if len(ok):
                best[i] = ok[0]
                break
            if kk == n:
                break
            k *= 4
    return best


def _exact_distances(index: EmbeddingIndex, qrows: np.ndarray, prows: np.ndarray) -> np.ndarray:
    diff = index.embeddings[qrows] - index.embeddings[prows]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def _query_chunks(index: EmbeddingIndex) -> list[tuple[int, int]]:
    """Fixed chunk boundaries: runs of at most CHUNK rows within one video."""
    chunks = []
    n = len(index)
    start = 0
    while start < n:
        _, vend = index.video_span(int(index.video_ids[start]))
        end = min(start + CHUNK, vend)
        chunks.append((start, end))
        start = end
    return chunks


def sim_query(index: EmbeddingIndex, query_crop_id: int) -> tuple[int, float]:
    """Nearest cross-video crop for one query: (positive_crop_id, distance)."""
    if query_crop_id not in index.row_of:
        raise KeyError(f"crop_id {query_crop_id} is not in the index")
    row = index.row_of[query_crop_id]
    if index.mode is IndexMode.APPROX:
        best = _approx_rows(index, np.array([row]))
    else:
        best = _exact_chunk(index, row, row + 1)
    if best[0] < 0:
        raise NoEligibleCandidate(
            f"crop_id {query_crop_id}: every candidate shares its video"
        )
    dist = _exact_distances(index, np.array([row]), best)[0]
    return int(index.crop_ids[best[0]]), float(dist)


def mine_all(
    index: EmbeddingIndex,
    max_distance: float | None = None,
    top_k: int = 1,
    threads: int = 1,
    seed: int = 0,
) -> PairManifest:
    """Mine one positive per query crop.

    Queries with no eligible candidate are omitted; with ``max_distance``
    set, pairs above it are dropped. ``top_k`` > 1 samples the positive
    uniformly among the k nearest eligible crops, seeded per query so the
    result does not depend on chunking or threading. Output is sorted by
    query crop id.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    n = len(index)
    best = np.full(n, -1, dtype=np.int64)
    chunks = _query_chunks(index)

    def work(span: tuple[int, int]) -> None:
        s, e = span
        if index.mode is IndexMode.APPROX:
            best[s:e] = _approx_rows(index, np.arange(s, e))
        elif top_k == 1:
            best[s:e] = _exact_chunk(index, s, e)
        else:
            cands = _exact_topk_chunk(index, s, e, top_k)
            for off, cand in enumerate(cands):
                if len(cand) == 0:
                    continue
                rng = np.random.default_rng([seed, int(index.crop_ids[s + off])])
                best[s + off] = cand[rng.integers(len(cand))]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, chunks))
    else:
        for span in chunks:
            work(span)

    mask = best >= 0
    qrows = np.flatnonzero(mask)
    prows = best[qrows]
    assert np.all(index.video_ids[qrows] != index.video_ids[prows]), (
        "exclusion invariant violated: same-video pair mined"
    )
    dists = _exact_distances(index, qrows, prows)
    if max_distance is not None:
        keep = dists <= max_distance
        qrows, prows, dists = qrows[keep], prows[keep], dists[keep]
    pairs = sorted(
        zip(
            index.crop_ids[qrows].tolist(),
            index.crop_ids[prows].tolist(),
            dists.tolist(),
        )
    )
    return PairManifest(pairs=tuple(pairs), mode=index.mode.value)


def verify_exclusion(manifest: PairManifest, corpus: Corpus) -> None:
    """Assert no pair joins two crops of the same video."""
    video_of = {c.crop_id: c.video_id for c in corpus}
    for q, p, _ in manifest.pairs:
        if video_of[q] == video_of[p]:
            raise AssertionError(f"pair ({q}, {p}) comes from one video")


def save_pairs(manifest: PairManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# pair-manifest-v1\n")
        f.write(f"# mode={manifest.mode}\n")
        f.write(f"# tiebreak={manifest.tiebreak}\n")
        f.write(f"# corpus_sha256={manifest.corpus_hash or '-'}\n")
        f.write(f"# model_sha256={manifest.model_hash or '-'}\n")
        for q, p, d in manifest.pairs:
            f.write(f"{q} {p} {d!r}\n")


def load_pairs(path) -> PairManifest:
    meta = {"mode": "", "tiebreak": "", "corpus_sha256": "", "model_sha256": ""}
    pairs = []
    with open(Path(path), "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if "=" in body:
                    key, val = body.split("=", 1)
                    if key in meta:
                        meta[key] = "" if val == "-" else val
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"expected 'query positive distance', got {line!r}", line_no)
            try:
                pairs.append((int(parts[0]), int(parts[1]), float(parts[2])))
            except ValueError as e:
                raise ParseError(str(e), line_no) from e
    try:
        return PairManifest(
            pairs=tuple(pairs),
            mode=meta["mode"] or IndexMode.EXACT.value,
            tiebreak=meta["tiebreak"] or TIEBREAK_VERSION,
            corpus_hash=meta["corpus_sha256"],
            model_hash=meta["model_sha256"],
        )
    except ValueError as e:
        raise ParseError(str(e)) from e


def mining_quality(
    corpus: Corpus,
    manifest: PairManifest,
    ground_truth: dict[int, PoseParams],
    seed: int = 0,
    max_recall_queries: int = 2000,
) -> dict:
    """Quantify how similar mined pairs really are, in pose-parameter space.

    Reports the mean parameter distance of mined pairs against a seeded
    random cross-video baseline, plus the recall of the parameter-space
    cross-video nearest neighbor among the mined positives.
    """
    for q, p, _ in manifest.pairs:
        if q not in ground_truth or p not in ground_truth:
            raise MissingGroundTruth(f"pair ({q}, {p}) lacks ground-truth parameters")

    video_of = {c.crop_id: c.video_id for c in corpus}
    pair_d = [param_distance(ground_truth[q], ground_truth[p]) for q, p, _ in manifest.pairs]
    mean_pair = float(np.mean(pair_d)) if pair_d else float("nan")

    rng = np.random.default_rng(seed)
    ids = [c.crop_id for c in corpus if c.crop_id in ground_truth]
    rand_d = []
    for _ in range(len(manifest.pairs)):
        for _attempt in range(64):
            a, b = rng.choice(len(ids), size=2, replace=False)
            qa, qb = ids[int(a)], ids[int(b)]
            if video_of[qa] != video_of[qb]:
                rand_d.append(param_distance(ground_truth[qa], ground_truth[qb]))
                break
    mean_rand = float(np.mean(rand_d)) if rand_d else float("nan")

    # parameter-space cross-video nearest neighbor, same tie-break rule
    ids_arr = np.asarray(ids, dtype=np.int64)
    rot = np.array([ground_truth[i].global_rotation for i in ids])
    rest = np.array(
        [
            list(ground_truth[i].flexion)
            + list(ground_truth[i].abduction)
            + [ground_truth[i].scale]
            for i in ids
        ]
    )
    vids_arr = np.array([video_of[i] for i in ids], dtype=np.int64)
    keys = np.array([(c.video_id, c.frame_idx) for c in corpus if c.crop_id in ground_truth], dtype=np.int64)
    row_idx = {cid: i for i, cid in enumerate(ids)}

    queries = [q for q, _, _ in manifest.pairs]
    if len(queries) > max_recall_queries:
        pick = rng.choice(len(queries), size=max_recall_queries, replace=False)
        queries = [queries[int(i)] for i in np.sort(pick)]
    mined_pos = {q: p for q, p, _ in manifest.pairs}
    hits = 0
    n_scored = 0
    for q in queries:
        qi = row_idx[q]
        d_rot = np.abs((rot - rot[qi] + math.pi) % (2 * math.pi) - math.pi)
        diff = rest - rest[qi]
        d2 = d_rot**2 + np.einsum("ij,ij->i", diff, diff)
        d2[vids_arr == vids_arr[qi]] = np.inf
        if not np.isfinite(d2).any():
            continue
        best_row = np.lexsort((keys[:, 1], keys[:, 0], d2))[0]
        n_scored += 1
        if mined_pos[q] == int(ids_arr[best_row]):
            hits += 1
    recall = hits / n_scored if n_scored else float("nan")

    return {
        "n_pairs": len(manifest.pairs),
        "mean_pair_param_distance": mean_pair,
        "mean_random_param_distance": mean_rand,
        "improvement_ratio": (mean_rand / mean_pair) if mean_pair > 0 else math.inf,
        "param_nn_recall": recall,
        "n_recall_queries": len(queries),
    }
