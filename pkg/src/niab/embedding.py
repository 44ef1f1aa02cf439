"""Token embeddings, cosine similarity, and top-K candidate retrieval.

Two embedder kinds: a file-backed :class:`EmbeddingTable` (binary format
below) and a deterministic :class:`HashingEmbedder` fallback that needs no
model files. The table format (magic ``NIAB-EMB1``) is little-endian:

    magic (9 bytes) | u32 dim | u32 token count |
    per token: u16 byte-length | UTF-8 token | dim x f32 vector

Round-trips are bit-exact: vectors are stored and kept as float32.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .episodes import NO_OP, Episode
from .errors import BadTableFile, EmptyVocab, TokenMissing, ZeroVector

EMB_MAGIC = b"NIAB-EMB1"


@dataclass
class EmbeddingTable:
    dim: int
    entries: dict[str, np.ndarray]  # token -> float32[dim]

    def __post_init__(self):
        if self.dim < 1:
            raise BadTableFile(f"dim must be >= 1, got {self.dim}")
        for tok, vec in self.entries.items():
            if vec.shape != (self.dim,):
                raise BadTableFile(f"{tok!r}: vector length {vec.shape} != dim {self.dim}")
            if not np.any(vec):
                raise BadTableFile(f"{tok!r}: all-zero vector")

    def embed(self, token: str) -> np.ndarray:
        vec = self.entries.get(token)
        if vec is None:
            raise TokenMissing(token)
        return vec.astype(np.float64)


def save_table(table: EmbeddingTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", table.dim, len(table.entries)))
        for tok, vec in table.entries.items():
            raw = tok.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(vec.astype("<f4").tobytes())


def load_table(path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(EMB_MAGIC) + 8:
        raise BadTableFile("file too short for header")
    if data[: len(EMB_MAGIC)] != EMB_MAGIC:
        raise BadTableFile("bad magic bytes")
    dim, count = struct.unpack_from("<II", data, len(EMB_MAGIC))
    if dim < 1:
        raise BadTableFile("dim must be >= 1")
    if count < 1:
        raise BadTableFile("token count must be >= 1")
    off = len(EMB_MAGIC) + 8
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        if off + 2 > len(data):
            raise BadTableFile("truncated token length")
        (tok_len,) = struct.unpack_from("<H", data, off)
        off += 2
        if tok_len == 0 or off + tok_len + 4 * dim > len(data):
            raise BadTableFile("truncated token record")
        try:
            tok = data[off : off + tok_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BadTableFile(f"invalid UTF-8 token: {exc}") from exc
        off += tok_len
        vec = np.frombuffer(data[off : off + 4 * dim], dtype="<f4").copy()
        off += 4 * dim
        if tok in entries:
            raise BadTableFile(f"duplicate token {tok!r}")
        entries[tok] = vec
    if off != len(data):
        raise BadTableFile(f"{len(data) - off} trailing bytes")
    return EmbeddingTable(dim=dim, entries=entries)


class HashingEmbedder:
    """Deterministic feature-hashing embedder.

    Character trigrams and word unigrams of the token are hashed into
    ``dim`` buckets with signed contributions; the result is L2-normalized.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def _features(self, token: str) -> list[str]:
        feats = [f"w:{w}" for w in token.split("_")]
        padded = f"^{token}$"
        feats += [f"t:{padded[i:i + 3]}" for i in range(len(padded) - 2)]
        return feats

    def embed(self, token: str) -> np.ndarray:
        cached = self._cache.get(token)
        if cached is not None:
            return cached.copy()
        vec = np.zeros(self.dim, dtype=np.float64)
        for feat in self._features(token):
            payload = f"{self.seed}|{feat}".encode("utf-8")
            h = int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")
            bucket = h % self.dim
            sign = 1.0 if (h >> 32) & 1 else -1.0
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:  # degenerate cancellation; fall back to a single bucket
            h = int.from_bytes(
                hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little"
            )
            vec[h % self.dim] = 1.0
            norm = 1.0
        vec /= norm
        self._cache[token] = vec
        return vec.copy()


Embedder = EmbeddingTable | HashingEmbedder


def embed(embedder: Embedder, token: str) -> np.ndarray:
    return embedder.embed(token)


def embed_tokens(tokens, embedder: Embedder, cache: dict | None = None) -> np.ndarray:
    """Stack token vectors into a matrix, memoizing through ``cache``."""
    if cache is None:
        cache = {}
    rows = []
    for t in tokens:
        vec = cache.get(t)
        if vec is None:
            vec = embed(embedder, t)
            cache[t] = vec
        rows.append(vec)
    return np.stack(rows)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))


@dataclass
class RetrievalResult:
    # per step: [(vocab index, similarity), ...] sorted by similarity desc,
    # ties broken by ascending vocab index
    per_step_topk: list[list[tuple[int, float]]]
    episode_candidates: list[str]


def _similarity_matrix(episode: Episode, embedder: Embedder) -> np.ndarray:
    h_vecs = [embed(embedder, t) for t in episode.human_task_seq]
    a_vecs = [embed(embedder, t) for t in episode.robot_vocab]
    sims = np.empty((len(h_vecs), len(a_vecs)), dtype=np.float64)
    for s, hv in enumerate(h_vecs):
        for c, av in enumerate(a_vecs):
            sims[s, c] = cosine(hv, av)
    return sims


def rank_episode_candidates(episode: Episode, embedder: Embedder) -> list[int]:
    """Vocab indices ranked by max-over-steps similarity (ties: ascending index)."""
    sims = _similarity_matrix(episode, embedder)
    max_sim = sims.max(axis=0)
    return sorted(range(len(episode.robot_vocab)), key=lambda i: (-max_sim[i], i))


def retrieve(
    episode: Episode,
    embedder: Embedder,
    K: int,
    K_ep: int,
    force_include: str | None = None,
) -> RetrievalResult:
    """Per-step top-K pruning plus the pooled episode-level candidate set.

    ``episode_candidates`` holds the top ``K_ep`` vocabulary tokens by
    max-over-steps cosine similarity, with ``no_op`` appended when absent
    and ``force_include`` (teacher-forced oracle, training only) appended
    when absent. Deterministic: similarity ties break on vocab index.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if K_ep < 2:
        raise ValueError("K_ep must be >= 2")
    if not episode.robot_vocab:
        raise EmptyVocab(episode.episode_id)
    if force_include is not None and force_include not in episode.robot_vocab:
        raise TokenMissing(f"force_include {force_include!r} not in robot_vocab")

    sims = _similarity_matrix(episode, embedder)
    per_step = []
    for s in range(len(episode.human_task_seq)):
        order = sorted(range(len(episode.robot_vocab)), key=lambda i: (-sims[s, i], i))
        per_step.append([(i, float(sims[s, i])) for i in order[:K]])

    ranked = rank_episode_candidates(episode, embedder)
    candidates = [episode.robot_vocab[i] for i in ranked[:K_ep]]
    if NO_OP not in candidates:
        candidates.append(NO_OP)
    if force_include is not None and force_include not in candidates:
        candidates.append(force_include)
    return RetrievalResult(per_step_topk=per_step, episode_candidates=candidates)


def build_candidates(
    episode: Episode,
    embedder: Embedder,
    ablation: str,
    K: int,
    K_ep: int,
    C_max: int,
    force_include: str | None = None,
) -> list[str]:
    """The candidate list the ranker scores for one episode.

    ``full`` and ``action_only`` use retrieval; ``no_retrieval`` takes the
    whole robot vocabulary truncated to ``C_max`` (``no_op`` re-inserted into
    the last slot when truncated away, ``force_include`` into the slot before
    it). Training passes the oracle as ``force_include`` so the target always
    exists; evaluation passes None and misses count against SelectionAcc.
    """
    if ablation == "no_retrieval":
        cands = list(episode.robot_vocab[:C_max])
        if force_include is not None and force_include not in cands:
            cands[-1] = force_include
        if NO_OP not in cands:
            idx = len(cands) - 1
            if cands[idx] == force_include:
                idx -= 1
            cands[idx] = NO_OP
        return cands
    result = retrieve(episode, embedder, K=K, K_ep=K_ep, force_include=force_include)
    cands = result.episode_candidates
    if len(cands) > C_max:
        raise ValueError(f"candidate set {len(cands)} exceeds C_max {C_max}")
    return cands
