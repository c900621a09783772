"""Cosine top-k search over bank keys.

Two modes share one interface: an exact scan used as the reference, and a
partitioned search where keys are bucketed by spherical k-means and block-
quantized to 4-bit codes.  Approximate candidate scores come from per-block
lookup tables against the full-precision query; the best ``reorder_n``
candidates are rescored against the true keys, so the returned scores are
always exact cosines.  Final ordering everywhere is by exact float64 cosine,
descending, with ties broken by lower row id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .bank import MemoryBank

CODEBOOK_SIZE = 16  # 4-bit codes per block

# Above this many rows we stop claiming desk scale: k-means then trains on a
# subsample (assignment still covers every row).
KMEANS_TRAIN_CAP = 262_144
CODEBOOK_TRAIN_CAP = 131_072

# Preselect this many candidates in float32 before exact float64 rescoring.
_EXACT_POOL = 128
_SCAN_CHUNK = 1 << 17


@dataclass(frozen=True)
class IndexParams:
    num_leaves: int = 512
    leaves_to_search: int = 32
    dims_per_block: int = 4
    reorder_n: int = 120
    kmeans_iters: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.leaves_to_search <= self.num_leaves:
            raise ValueError(
                f"need 1 <= leaves_to_search <= num_leaves, got "
                f"{self.leaves_to_search} / {self.num_leaves}")
        if self.dims_per_block < 1 or self.reorder_n < 1 or self.kmeans_iters < 1:
            raise ValueError("dims_per_block, reorder_n, kmeans_iters must be >= 1")


def scaled_params(bank_size: int, k: int = 30, seed: int = 0) -> IndexParams:
    """Shrink the production partition shape to a small bank.

    At production scale (ten full partitions' worth of rows or more) this is
    the stock configuration: 512 leaves, 32 searched, reorder 120.  Below
    that, leaves follow sqrt(|M|)/2; the searched fraction widens to 1/8 and
    the reorder pool to 32k candidates because small banks put a far larger
    share of each query's true neighbors inside any single leaf.
    """
    if bank_size >= 10 * 512 ** 2:
        return IndexParams(num_leaves=min(512, bank_size), seed=seed)
    leaves = min(max(1, round(np.sqrt(bank_size) / 2)), bank_size)
    return IndexParams(num_leaves=leaves,
                       leaves_to_search=max(1, round(leaves / 8)),
                       dims_per_block=4,
                       reorder_n=max(32 * k, 120),
                       seed=seed)


@dataclass
class AnnIndex:
    """Immutable search structure over one bank's keys."""

    mode: str                         # "exact" | "quantized"
    keys: np.ndarray                  # (M, D) float32 unit rows
    params: IndexParams | None = None
    centroids: np.ndarray | None = None   # (L, D) float32 unit rows
    leaf_offsets: np.ndarray | None = None  # (L+1,) int64, CSR over leaf_rows
    leaf_rows: np.ndarray | None = None     # (M,) int64 row ids grouped by leaf
    codebooks: np.ndarray | None = None     # (num_blocks, 16, dims_per_block) f32
    codes: np.ndarray | None = None         # (M, num_blocks) uint8, bank row order
    # Scan-friendly copy: codes[leaf_rows].T, so each block's codes for one
    # leaf form a contiguous slice.
    codes_by_leaf_t: np.ndarray | None = None  # (num_blocks, M) uint8

    def __len__(self) -> int:
        return len(self.keys)


# --- k-means ----------------------------------------------------------------

def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding on squared Euclidean distance.

    Distances to each new center come from the norm expansion (one matvec),
    not a materialized difference matrix.
    """
    n = len(points)
    pnorm2 = np.einsum("ij,ij->i", points, points)

    def dist2_to(center):
        d2 = pnorm2 - 2.0 * (points @ center) + center @ center
        return np.maximum(d2, 0.0)

    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = dist2_to(centers[0])
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i:] = points[rng.integers(n, size=k - i)]
            break
        centers[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, dist2_to(centers[i]))
    return centers


def _kmeans(points: np.ndarray, k: int, iters: int, rng: np.random.Generator,
            spherical: bool) -> np.ndarray:
    """Plain Lloyd iterations; spherical mode renormalizes centroids."""
    pts = points.astype(np.float64)
    centers = _kmeans_pp_init(pts, k, rng)
    if spherical:
        centers /= np.maximum(np.linalg.norm(centers, axis=1, keepdims=True), 1e-12)
    for _ in range(iters):
        if spherical:
            assign = np.argmax(pts @ centers.T, axis=1)
        else:
            d2 = (np.sum(pts ** 2, axis=1)[:, None]
                  - 2 * pts @ centers.T + np.sum(centers ** 2, axis=1))
            assign = np.argmin(d2, axis=1)
        for c in range(k):
            members = pts[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
            else:
                centers[c] = pts[rng.integers(len(pts))]
        if spherical:
            centers /= np.maximum(np.linalg.norm(centers, axis=1, keepdims=True), 1e-12)
    return centers


# --- build ------------------------------------------------------------------

def build_exact(bank: MemoryBank) -> AnnIndex:
    if len(bank) == 0:
        raise ValueError("cannot index an empty bank")
    return AnnIndex("exact", bank.keys)


def build_quantized(bank: MemoryBank, params: IndexParams) -> AnnIndex:
    """Partition keys by spherical k-means and quantize them blockwise.

    Each dims_per_block-wide slice of the keys gets its own 16-center
    codebook trained by plain k-means; rows store one 4-bit code per block.
    """
    if len(bank) == 0:
        raise ValueError("cannot index an empty bank")
    m, dim = bank.keys.shape
    if params.num_leaves > m:
        raise ValueError(f"num_leaves {params.num_leaves} exceeds bank size {m}")
    if dim % params.dims_per_block:
        raise ValueError(f"dims_per_block {params.dims_per_block} must divide D={dim}")

    rng = np.random.default_rng([params.seed, 0xC1_0C])
    keys = bank.keys
    train = keys
    if m > KMEANS_TRAIN_CAP:
        train = keys[rng.choice(m, KMEANS_TRAIN_CAP, replace=False)]
    centroids = _kmeans(train, params.num_leaves, params.kmeans_iters, rng,
                        spherical=True).astype(np.float32)

    assign = np.empty(m, dtype=np.int64)
    for start in range(0, m, _SCAN_CHUNK):
        chunk = keys[start:start + _SCAN_CHUNK]
        assign[start:start + len(chunk)] = np.argmax(chunk @ centroids.T, axis=1)
    order = np.argsort(assign, kind="stable")
    counts = np.bincount(assign, minlength=params.num_leaves)
    offsets = np.zeros(params.num_leaves + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])

    num_blocks = dim // params.dims_per_block
    codebooks = np.empty((num_blocks, CODEBOOK_SIZE, params.dims_per_block),
                         dtype=np.float32)
    codes = np.empty((m, num_blocks), dtype=np.uint8)
    cb_train_rows = None
    if m > CODEBOOK_TRAIN_CAP:
        cb_train_rows = rng.choice(m, CODEBOOK_TRAIN_CAP, replace=False)
    for b in range(num_blocks):
        sub = keys[:, b * params.dims_per_block:(b + 1) * params.dims_per_block]
        train_sub = sub if cb_train_rows is None else sub[cb_train_rows]
        cb = _kmeans(train_sub, min(CODEBOOK_SIZE, m), params.kmeans_iters,
                     rng, spherical=False)
        if len(cb) < CODEBOOK_SIZE:  # tiny banks: pad with copies of center 0
            cb = np.vstack([cb, np.tile(cb[:1], (CODEBOOK_SIZE - len(cb), 1))])
        codebooks[b] = cb.astype(np.float32)
        for start in range(0, m, _SCAN_CHUNK):
            s = sub[start:start + _SCAN_CHUNK].astype(np.float64)
            d2 = (np.sum(s ** 2, axis=1)[:, None] - 2 * s @ cb.T
                  + np.sum(cb ** 2, axis=1))
            codes[start:start + len(s), b] = np.argmin(d2, axis=1)

    leaf_rows = order.astype(np.int64)
    return AnnIndex("quantized", keys, params, centroids, offsets, leaf_rows,
                    codebooks, codes,
                    np.ascontiguousarray(codes[leaf_rows].T))


def reconstruct_keys(index: AnnIndex, rows: np.ndarray) -> np.ndarray:
    """Decode quantized rows back to approximate key vectors."""
    parts = [index.codebooks[b][index.codes[rows, b]]
             for b in range(index.codebooks.shape[0])]
    return np.concatenate(parts, axis=1)


# --- search -----------------------------------------------------------------

def _normalize_queries(queries: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if not np.all(np.isfinite(q)):
        raise ValueError("query contains non-finite values")
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero query vector cannot be searched")
    return q / norms


def _top_by_exact(keys: np.ndarray, qn: np.ndarray, candidates: np.ndarray,
                  k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact float64 cosine over candidate rows; ties to lower row id."""
    scores = keys[candidates].astype(np.float64) @ qn
    order = np.lexsort((candidates, -scores))[:k]
    return candidates[order], scores[order]


def _search_exact_block(index: AnnIndex, qn: np.ndarray, k: int,
                        ids: np.ndarray, scores: np.ndarray) -> None:
    """Exact top-k for a block of queries at once.

    Keys are streamed chunk by chunk through one sgemm per chunk (so the key
    matrix is read once per block, not once per query); a float32 candidate
    pool per query is then rescored exactly in float64.
    """
    m = len(index.keys)
    nq = len(qn)
    pool = min(m, max(_EXACT_POOL, 4 * k))
    q32 = np.ascontiguousarray(qn.astype(np.float32))  # (nq, D)
    pool_ids: list[np.ndarray] = []
    pool_scores: list[np.ndarray] = []
    for start in range(0, m, _SCAN_CHUNK):
        sims = q32 @ index.keys[start:start + _SCAN_CHUNK].T  # (nq, chunk)
        take = min(pool, sims.shape[1])
        idx = np.argpartition(sims, sims.shape[1] - take, axis=1)[:, sims.shape[1] - take:]
        pool_ids.append(idx + start)
        pool_scores.append(np.take_along_axis(sims, idx, axis=1))
    all_ids = np.concatenate(pool_ids, axis=1)        # (nq, P)
    all_scores = np.concatenate(pool_scores, axis=1)
    if all_ids.shape[1] > pool:
        keep = np.argpartition(all_scores, all_scores.shape[1] - pool,
                               axis=1)[:, all_scores.shape[1] - pool:]
        all_ids = np.take_along_axis(all_ids, keep, axis=1)
    for i in range(nq):
        ids[i], scores[i] = _top_by_exact(index.keys, qn[i],
                                          np.sort(all_ids[i]), k)


def _search_quantized_one(index: AnnIndex, qn: np.ndarray, k: int,
                          leaves_to_search: int, reorder_n: int,
                          ) -> tuple[np.ndarray, np.ndarray]:
    p = index.params
    leaf_scores = index.centroids @ qn.astype(np.float32)
    ranked = np.lexsort((np.arange(p.num_leaves), -leaf_scores))
    counts = np.diff(index.leaf_offsets)
    # Probe the requested leaves, then keep extending to the next-nearest
    # ones until the candidate pool can fill min(k, |M|) results.
    take = min(leaves_to_search, p.num_leaves)
    while take < p.num_leaves and counts[ranked[:take]].sum() < min(k, len(index.keys)):
        take += 1
    leaves = np.sort(ranked[:take])

    # Positions into the leaf-ordered layout, one contiguous run per leaf.
    spans = [np.arange(index.leaf_offsets[l], index.leaf_offsets[l + 1])
             for l in leaves]
    pos = np.concatenate(spans)

    num_blocks = index.codebooks.shape[0]
    lut = np.einsum("bcd,bd->bc", index.codebooks,
                    qn.reshape(num_blocks, p.dims_per_block).astype(np.float32))
    approx = np.zeros(len(pos), dtype=np.float32)
    for b in range(num_blocks):
        approx += lut[b][index.codes_by_leaf_t[b][pos]]

    keep = min(reorder_n, len(pos))
    if keep < len(pos):
        top = np.argpartition(approx, len(pos) - keep)[-keep:]
        pos = pos[top]
    return _top_by_exact(index.keys, qn, np.sort(index.leaf_rows[pos]), k)


def search(index: AnnIndex, query: np.ndarray, k: int,
           leaves_to_search: int | None = None,
           reorder_n: int | None = None) -> list[tuple[int, float]]:
    """Top-k rows by cosine similarity for one query.

    Returns (row_id, score) pairs with exact cosine scores, descending.
    ``leaves_to_search`` and ``reorder_n`` override the build-time values for
    the quantized mode.
    """
    ids, scores = search_batch(index, np.asarray(query)[None, :], k,
                               leaves_to_search, reorder_n)
    return [(int(i), float(s)) for i, s in zip(ids[0], scores[0])]


_QUERY_BLOCK = 256


def search_batch(index: AnnIndex, queries: np.ndarray, k: int,
                 leaves_to_search: int | None = None,
                 reorder_n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized search; returns (Q, k') ids and scores, k' = min(k, |M|)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    qn = _normalize_queries(queries)
    if qn.shape[1] != index.keys.shape[1]:
        raise ValueError(f"query dim {qn.shape[1]} != index dim {index.keys.shape[1]}")
    kk = min(k, len(index.keys))
    if index.mode == "quantized":
        p = index.params
        lts = p.leaves_to_search if leaves_to_search is None else leaves_to_search
        ron = p.reorder_n if reorder_n is None else reorder_n
        if not 1 <= lts <= p.num_leaves:
            raise ValueError(f"leaves_to_search {lts} out of range 1..{p.num_leaves}")
        if ron < k:
            raise ValueError(f"reorder_n {ron} must be >= k {k}")
    ids = np.empty((len(qn), kk), dtype=np.int64)
    scores = np.empty((len(qn), kk), dtype=np.float64)
    if index.mode == "exact":
        for start in range(0, len(qn), _QUERY_BLOCK):
            stop = start + _QUERY_BLOCK
            _search_exact_block(index, qn[start:stop], kk,
                                ids[start:stop], scores[start:stop])
    else:
        for i, q in enumerate(qn):
            ids[i], scores[i] = _search_quantized_one(index, q, kk, lts, ron)
    return ids, scores


def recall_at_k(approx_ids, exact_ids) -> float:
    """Fraction of the exact top-k ids the approximate search recovered."""
    approx = [i for i, *_ in approx_ids] if _is_pairs(approx_ids) else list(approx_ids)
    exact = [i for i, *_ in exact_ids] if _is_pairs(exact_ids) else list(exact_ids)
    if len(approx) != len(exact):
        raise ValueError(f"result lengths differ: {len(approx)} vs {len(exact)}")
    if not exact:
        raise ValueError("empty result lists")
    return len(set(approx) & set(exact)) / len(exact)


def _is_pairs(items) -> bool:
    items = list(items) if not isinstance(items, (list, tuple, np.ndarray)) else items
    return len(items) > 0 and isinstance(items[0], (tuple, list))


# --- HBIX serialization ------------------------------------------------------

MAGIC = b"HBIX0001"
_IX_HEADER = struct.Struct("<BIIIIIIq")


def index_to_bytes(index: AnnIndex) -> bytes:
    """Serialize; exact indexes carry only their mode (keys live in the bank)."""
    out = bytearray(MAGIC)
    if index.mode == "exact":
        out += _IX_HEADER.pack(0, 0, 0, 0, 0, 0, 0, 0)
        return bytes(out)
    p = index.params
    out += _IX_HEADER.pack(1, p.num_leaves, p.leaves_to_search, p.dims_per_block,
                           p.reorder_n, p.kmeans_iters, index.codebooks.shape[0],
                           p.seed)
    out += np.ascontiguousarray(index.centroids, dtype="<f4").tobytes()
    out += np.ascontiguousarray(index.leaf_offsets, dtype="<i8").tobytes()
    out += np.ascontiguousarray(index.leaf_rows, dtype="<i8").tobytes()
    out += np.ascontiguousarray(index.codebooks, dtype="<f4").tobytes()
    out += np.ascontiguousarray(index.codes, dtype="u1").tobytes()
    return bytes(out)


def index_from_bytes(buf: bytes, bank: MemoryBank) -> AnnIndex:
    from .errors import FileFormatError
    if buf[:len(MAGIC)] != MAGIC:
        raise FileFormatError(f"bad index magic {buf[:len(MAGIC)]!r}", 0)
    pos = len(MAGIC)
    if len(buf) < pos + _IX_HEADER.size:
        raise FileFormatError("truncated index header", pos)
    mode, leaves, lts, dpb, ron, iters, num_blocks, seed = _IX_HEADER.unpack_from(buf, pos)
    pos += _IX_HEADER.size
    if mode == 0:
        return build_exact(bank)
    params = IndexParams(leaves, lts, dpb, ron, iters, seed)
    m = len(bank)

    def block(dtype, shape, what):
        nonlocal pos
        count = int(np.prod(shape))
        nbytes = count * np.dtype(dtype).itemsize
        if pos + nbytes > len(buf):
            raise FileFormatError(f"truncated index {what} block", pos)
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).copy()
        pos += nbytes
        return arr.reshape(shape)

    centroids = block("<f4", (leaves, bank.dim), "centroids")
    offsets = block("<i8", (leaves + 1,), "leaf offsets")
    rows = block("<i8", (m,), "leaf rows")
    codebooks = block("<f4", (num_blocks, CODEBOOK_SIZE, dpb), "codebooks")
    codes = block("u1", (m, num_blocks), "codes")
    return AnnIndex("quantized", bank.keys, params, centroids, offsets, rows,
                    codebooks, codes, np.ascontiguousarray(codes[rows].T))
