"""Tracklet retrieval evaluation: fused descriptors, CMC/mAP, protocol suite.

Protocols name query and gallery platforms (A->G, G->A, A->A). Gallery
entries sharing the query's tracklet id are excluded; queries without any
remaining positive are dropped from the averages but counted. mAP-3 is the
plain mean of the three protocol mAPs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import ReIDModel
from .synth import TrackletRecord, load_frames

PROTOCOLS: dict[str, tuple[str, str]] = {
    "A->G": ("aerial", "ground"),
    "G->A": ("ground", "aerial"),
    "A->A": ("aerial", "aerial"),
}

_EMB_MAGIC = b"SASD"


class EmbeddingFormatError(Exception):
    """Raised when an embedding file cannot be parsed."""


@dataclass(frozen=True)
class EmbeddingRecord:
    tracklet_id: str
    identity: int
    platform: str
    session: int
    vector: np.ndarray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (
            self.tracklet_id == other.tracklet_id
            and self.identity == other.identity
            and self.platform == other.platform
            and self.session == other.session
            and np.array_equal(self.vector, other.vector)
        )


def _unit(vec: np.ndarray, name: str) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError(f"{name} has zero norm and cannot be normalized")
    return vec / norm


def fuse_descriptor(v: np.ndarray, h_m: np.ndarray, f_s: np.ndarray) -> np.ndarray:
    """Concatenate the per-part L2-normalized features.

    v and h_M must be nonzero; a zero shape descriptor (shape branch off)
    passes through as zeros.
    """
    v = np.asarray(v, dtype=np.float32)
    h_m = np.asarray(h_m, dtype=np.float32)
    f_s = np.asarray(f_s, dtype=np.float32)
    if v.ndim != 1 or h_m.ndim != 1 or f_s.ndim != 1:
        raise ValueError("descriptor parts must be 1-d vectors")
    norm_s = float(np.linalg.norm(f_s))
    f_hat = f_s / norm_s if norm_s > 0.0 else f_s
    return np.concatenate([_unit(v, "v"), _unit(h_m, "h_M"), f_hat]).astype(np.float32)


def embed_records(model: ReIDModel, records: list[TrackletRecord]) -> list[EmbeddingRecord]:
    """Encode each tracklet (all of its frames) into a fused descriptor."""
    model.eval()
    out: list[EmbeddingRecord] = []
    with torch.no_grad():
        for rec in records:
            frames = torch.from_numpy(load_frames(rec)).unsqueeze(0)
            result = model(frames)
            vec = fuse_descriptor(
                result.v[0].numpy(), result.h_m[0].numpy(), result.f_s[0].numpy()
            )
            out.append(
                EmbeddingRecord(
                    tracklet_id=rec.tracklet_id,
                    identity=rec.identity,
                    platform=rec.platform,
                    session=rec.session,
                    vector=vec,
                )
            )
    return out


def distance_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Cosine distance (1 - cosine similarity) between row vectors."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError("queries and gallery must be 2-d with matching dims")
    qn = np.linalg.norm(q, axis=1)
    gn = np.linalg.norm(g, axis=1)
    if (qn == 0).any() or (gn == 0).any():
        raise ValueError("descriptors must have nonzero norm")
    return 1.0 - (q / qn[:, None]) @ (g / gn[:, None]).T


@dataclass
class ProtocolResult:
    protocol: str
    mean_ap: float
    cmc: np.ndarray  # cumulative match curve over gallery ranks
    num_query: int  # queries retained in the averages
    num_gallery: int
    num_dropped: int  # queries without any valid positive

    def cmc_at(self, k: int) -> float:
        if k < 1:
            raise ValueError("k must be >= 1")
        if self.cmc.size == 0:
            return float("nan")
        return float(self.cmc[min(k, self.cmc.size) - 1])


def rank_metrics(
    dist: np.ndarray,
    query_ids: np.ndarray,
    gallery_ids: np.ndarray,
    valid: np.ndarray | None = None,
) -> tuple[float, np.ndarray, int]:
    """mAP and CMC for a distance matrix.

    AP per query follows the standard retrieval convention: the mean over
    positives of (positives found so far) / (rank of that positive). Ties are
    broken by gallery index (stable sort). `valid` masks usable gallery
    entries per query. Returns (mAP, cmc, dropped)."""
    dist = np.asarray(dist, dtype=np.float64)
    nq, ng = dist.shape
    if query_ids.shape != (nq,) or gallery_ids.shape != (ng,):
        raise ValueError("id vectors must match the distance matrix")
    if valid is None:
        valid = np.ones((nq, ng), dtype=bool)
    if valid.shape != dist.shape:
        raise ValueError("valid mask must match the distance matrix")
    aps: list[float] = []
    cmc_sum = np.zeros(ng, dtype=np.float64)
    dropped = 0
    for i in range(nq):
        cols = np.flatnonzero(valid[i])
        matches_any = gallery_ids[cols] == query_ids[i]
        if not matches_any.any():
            dropped += 1
            continue
        order = np.argsort(dist[i, cols], kind="stable")
        hits = matches_any[order]
        ranks = np.flatnonzero(hits) + 1  # 1-indexed ranks of the positives
        found = np.arange(1, ranks.size + 1, dtype=np.float64)
        aps.append(float(np.mean(found / ranks)))
        cmc_sum[ranks[0] - 1 :] += 1.0
    if not aps:
        return float("nan"), np.full(ng, np.nan), dropped
    return float(np.mean(aps)), cmc_sum / len(aps), dropped


def evaluate_protocol(
    embeddings: list[EmbeddingRecord],
    protocol: str,
    distractors: list[EmbeddingRecord] | None = None,
) -> ProtocolResult:
    """Retrieval metrics for one platform pairing.

    Distractors join the gallery but never become queries; they make ranking
    harder without changing the query set."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {sorted(PROTOCOLS)}")
    q_platform, g_platform = PROTOCOLS[protocol]
    pool = embeddings if not distractors else embeddings + distractors
    queries = [e for e in embeddings if e.platform == q_platform]
    gallery = [e for e in pool if e.platform == g_platform]
    if not queries or not gallery:
        raise ValueError(f"protocol {protocol}: empty query or gallery set")
    dist = distance_matrix(
        np.stack([e.vector for e in queries]), np.stack([e.vector for e in gallery])
    )
    q_ids = np.array([e.identity for e in queries])
    g_ids = np.array([e.identity for e in gallery])
    q_tids = [e.tracklet_id for e in queries]
    g_tids = [e.tracklet_id for e in gallery]
    valid = np.ones(dist.shape, dtype=bool)
    for i, tid in enumerate(q_tids):
        for j, gtid in enumerate(g_tids):
            if tid == gtid:
                valid[i, j] = False
    mean_ap, cmc, dropped = rank_metrics(dist, q_ids, g_ids, valid)
    return ProtocolResult(
        protocol=protocol,
        mean_ap=mean_ap,
        cmc=cmc,
        num_query=len(queries) - dropped,
        num_gallery=len(gallery),
        num_dropped=dropped,
    )


def evaluate_all(
    embeddings: list[EmbeddingRecord],
    distractors: list[EmbeddingRecord] | None = None,
) -> dict[str, ProtocolResult]:
    return {name: evaluate_protocol(embeddings, name, distractors) for name in PROTOCOLS}


def map3(results: dict[str, ProtocolResult]) -> float:
    """Plain mean of the three protocol mAPs."""
    missing = [name for name in PROTOCOLS if name not in results]
    if missing:
        raise ValueError(f"mAP-3 needs all protocols; missing {missing}")
    return float(np.mean([results[name].mean_ap for name in PROTOCOLS]))


def write_embeddings(path: str | Path, embeddings: list[EmbeddingRecord]) -> None:
    """Binary embedding file: magic, u32 count, u32 dim, float32 rows, then
    one metadata text line per row (tracklet_id identity platform session)."""
    if not embeddings:
        raise ValueError("refusing to write an empty embedding file")
    dim = embeddings[0].vector.size
    for e in embeddings:
        if e.vector.ndim != 1 or e.vector.size != dim:
            raise ValueError("all embedding vectors must share one dimension")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_EMB_MAGIC)
        f.write(struct.pack("<II", len(embeddings), dim))
        for e in embeddings:
            f.write(np.ascontiguousarray(e.vector, dtype="<f4").tobytes())
        for e in embeddings:
            f.write(f"{e.tracklet_id} {e.identity} {e.platform} {e.session}\n".encode())


def read_embeddings(path: str | Path) -> list[EmbeddingRecord]:
    path = Path(path)
    if not path.is_file():
        raise EmbeddingFormatError(f"embedding file not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != _EMB_MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise EmbeddingFormatError(f"{path}: truncated header at byte {len(raw)}")
    count, dim = struct.unpack_from("<II", raw, 4)
    matrix_bytes = count * dim * 4
    if len(raw) < 12 + matrix_bytes:
        raise EmbeddingFormatError(
            f"{path}: expected {matrix_bytes} matrix bytes at byte 12, file has {len(raw) - 12}"
        )
    matrix = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=12).reshape(count, dim)
    trailer = raw[12 + matrix_bytes :].decode("utf-8")
    lines = trailer.splitlines()
    if len(lines) != count:
        raise EmbeddingFormatError(
            f"{path}: metadata trailer has {len(lines)} lines, expected {count}"
        )
    out = []
    for i, line in enumerate(lines):
        parts = line.split()
        if len(parts) != 4:
            raise EmbeddingFormatError(f"{path}: metadata line {i + 1} has {len(parts)} fields")
        tid, id_s, platform, sess_s = parts
        try:
            identity = int(id_s)
            session = int(sess_s)
        except ValueError:
            raise EmbeddingFormatError(f"{path}: metadata line {i + 1}: bad integer") from None
        out.append(
            EmbeddingRecord(
                tracklet_id=tid,
                identity=identity,
                platform=platform,
                session=session,
                vector=matrix[i].copy(),
            )
        )
    return out


def format_report(results: dict[str, ProtocolResult]) -> str:
    lines = [f"{'protocol':<8} {'mAP':>8} {'R@1':>8} {'R@5':>8} {'R@10':>8} {'dropped':>8}"]
    for name in PROTOCOLS:
        if name not in results:
            continue
        r = results[name]
        lines.append(
            f"{name:<8} {r.mean_ap:>8.4f} {r.cmc_at(1):>8.4f} "
            f"{r.cmc_at(5):>8.4f} {r.cmc_at(10):>8.4f} {r.num_dropped:>8d}"
        )
    if all(name in results for name in PROTOCOLS):
        lines.append(f"{'mAP-3':<8} {map3(results):>8.4f}")
    return "\n".join(lines)


def machine_report(results: dict[str, ProtocolResult]) -> list[str]:
    """Stable `protocol metric value` lines for scripted consumers."""
    lines = []
    for name in PROTOCOLS:
        if name not in results:
            continue
        r = results[name]
        lines.append(f"{name}\tmAP\t{r.mean_ap:.6f}")
        for k in (1, 5, 10):
            lines.append(f"{name}\tR@{k}\t{r.cmc_at(k):.6f}")
        lines.append(f"{name}\tdropped\t{r.num_dropped}")
    if all(name in results for name in PROTOCOLS):
        lines.append(f"ALL\tmAP-3\t{map3(results):.6f}")
    return lines
