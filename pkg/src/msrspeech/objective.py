"""Span masking, shared k-means codebook, pseudo-labels, and the
temperature-scaled masked-prediction loss.

The codebook is fit once on MFCC frames pooled from every sampling rate, so a
single label table scores features no matter which branch produced them. The
loss is softmax cross-entropy over cosine similarities between projected
encoder outputs and label embeddings, averaged over the masked frames.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, FormatError
from .nn import softmax

MASK_START_PROB = 0.08
MASK_SPAN = 10
DEFAULT_TEMPERATURE = 0.1
DEFAULT_EMBED_DIM = 16
KMEANS_REL_TOL = 1e-6
LENGTH_SLACK = 2  # max allowed |label count - frame count|
_NORM_FLOOR = 1e-12


@dataclass
class MaskSpec:
    """Masked frame indices: the union of `span`-length runs, clipped at T."""

    total: int
    span: int
    starts: np.ndarray
    indices: np.ndarray  # sorted, unique

    @property
    def count(self) -> int:
        return len(self.indices)


@dataclass
class Codebook:
    """k-means centroids in feature space plus one embedding per cluster."""

    centroids: np.ndarray  # [K, feat_dim]
    label_embeddings: np.ndarray  # [K, embed_dim]

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass
class ProjectionHead:
    """Projects contextual features into the label-embedding space."""

    proj: np.ndarray  # [embed_dim, d]
    temperature: float = DEFAULT_TEMPERATURE


def make_mask(
    t: int,
    p_start: float = MASK_START_PROB,
    span: int = MASK_SPAN,
    seed=None,
    force_nonempty: bool = True,
) -> MaskSpec:
    """Draw span starts independently per index with probability p_start.

    With force_nonempty the draw is repeated until at least one frame is
    masked; the retry consumes the same generator, so results stay
    deterministic for a given seed.
    """
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    rng = np.random.default_rng(seed)
    for _ in range(10000):
        starts = np.flatnonzero(rng.random(t) < p_start)
        if len(starts) > 0 or not force_nonempty:
            break
    else:
        starts = np.array([int(rng.integers(t))])
    if len(starts) == 0:
        indices = np.empty(0, dtype=np.int64)
    else:
        spans = starts[:, None] + np.arange(span)[None, :]
        indices = np.unique(spans[spans < t])
    return MaskSpec(total=t, span=span, starts=starts.astype(np.int64),
                    indices=indices.astype(np.int64))


def mask_coverage_probability(p_start: float, span: int) -> float:
    """Probability that a frame far from the edges ends up masked."""
    return 1.0 - (1.0 - p_start) ** span


def apply_mask(features: np.ndarray, mask: MaskSpec, mask_embedding: np.ndarray) -> np.ndarray:
    """Replace masked rows with the learned mask embedding; others untouched."""
    out = np.array(features, copy=True)
    if mask.count:
        out[mask.indices] = np.asarray(mask_embedding, dtype=out.dtype)
    return out


# --------------------------------------------------------------------------
# k-means over pooled frames

def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        (x * x).sum(axis=1, keepdims=True)
        - 2.0 * x @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    d2 = _sq_distances(x, centroids[:1]).ravel()
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = x[rng.integers(n)]
        else:
            centroids[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, _sq_distances(x, centroids[i : i + 1]).ravel())
    return centroids


KMEANS_RESTARTS = 10


def lloyd_iterations(
    frames: np.ndarray, k: int, max_iters: int = 50, seed=0, n_init: int = KMEANS_RESTARTS
) -> tuple[np.ndarray, list[float]]:
    """Best of n_init k-means++ runs; returns (centroids, that run's inertia history)."""
    x = np.asarray(frames, dtype=np.float64)
    if x.shape[0] < k:
        raise ValueError(f"need at least {k} frames, got {x.shape[0]}")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    best: tuple[np.ndarray, list[float]] | None = None
    for child in ss.spawn(max(1, n_init)):
        result = _lloyd_single(x, k, max_iters, np.random.default_rng(child))
        if best is None or result[1][-1] < best[1][-1]:
            best = result
    return best


def _lloyd_single(
    x: np.ndarray, k: int, max_iters: int, rng: np.random.Generator
) -> tuple[np.ndarray, list[float]]:
    centroids = _kmeans_pp_init(x, k, rng)
    history: list[float] = []
    for _ in range(max_iters):
        d2 = _sq_distances(x, centroids)
        assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(len(x)), assign].sum())
        history.append(inertia)
        new_centroids = centroids.copy()
        for c in range(k):
            members = assign == c
            if members.any():
                new_centroids[c] = x[members].mean(axis=0)
            else:
                # deterministic reseed: farthest point from its centroid
                far = int(d2[np.arange(len(x)), assign].argmax())
                new_centroids[c] = x[far]
        if len(history) >= 2 and history[-2] > 0:
            if (history[-2] - history[-1]) / history[-2] < KMEANS_REL_TOL:
                centroids = new_centroids
                break
        centroids = new_centroids
    return centroids, history


def kmeans_fit(
    frames: np.ndarray,
    k: int,
    max_iters: int = 50,
    seed=0,
    embed_dim: int = DEFAULT_EMBED_DIM,
    n_init: int = KMEANS_RESTARTS,
) -> Codebook:
    """Fit the shared codebook on pooled frames and seed its label embeddings."""
    centroids, _ = lloyd_iterations(frames, k, max_iters=max_iters, seed=seed, n_init=n_init)
    emb_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    embeddings = emb_rng.standard_normal((k, embed_dim)) / np.sqrt(embed_dim)
    return Codebook(
        centroids=centroids.astype(np.float32),
        label_embeddings=embeddings.astype(np.float32),
    )


def assign_labels(frames: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest-centroid label per frame; ties go to the lowest index."""
    x = np.asarray(frames, dtype=np.float64)
    scores = _sq_distances(x, np.asarray(codebook.centroids, dtype=np.float64))
    return scores.argmin(axis=1).astype(np.int64)


def align_lengths(labels: np.ndarray, t_model: int) -> np.ndarray:
    """Trim labels to min(len(labels), t_model); large gaps signal a plan bug."""
    diff = abs(len(labels) - t_model)
    if diff > LENGTH_SLACK:
        raise AlignmentError(
            f"label count {len(labels)} and frame count {t_model} differ by {diff} "
            f"(> {LENGTH_SLACK})"
        )
    return labels[: min(len(labels), t_model)]


# --------------------------------------------------------------------------
# masked-prediction loss

def masked_prediction_loss(
    contextual: np.ndarray,
    mask: MaskSpec,
    head: ProjectionHead,
    codebook: Codebook,
    labels: np.ndarray,
):
    """Cosine-similarity softmax cross-entropy over masked frames.

    Returns (loss, grads) with grads holding "c" [T, d] (zero outside the
    mask), "proj" [embed_dim, d], and "label_embed" [K, embed_dim].
    """
    if mask.count == 0:
        raise ValueError("mask selects no frames")
    t = contextual.shape[0]
    if len(labels) != t:
        raise AlignmentError(
            f"labels length {len(labels)} != contextual frame count {t}"
        )
    masked = mask.indices[mask.indices < t]
    if len(masked) == 0:
        raise ValueError("mask selects no frames within the aligned length")

    dtype = np.result_type(contextual.dtype, head.proj.dtype)
    c = np.asarray(contextual, dtype=dtype)
    a = np.asarray(head.proj, dtype=dtype)
    e = np.asarray(codebook.label_embeddings, dtype=dtype)
    tau = head.temperature
    y = np.asarray(labels)[masked]

    co = c[masked]  # [n, d]
    p = co @ a.T  # [n, de]
    p_norm = np.maximum(np.linalg.norm(p, axis=1, keepdims=True), _NORM_FLOOR)
    e_norm = np.maximum(np.linalg.norm(e, axis=1, keepdims=True), _NORM_FLOOR)
    p_hat = p / p_norm
    e_hat = e / e_norm
    sims = p_hat @ e_hat.T  # [n, K]
    logits = sims / tau
    probs = softmax(logits, axis=1)
    n = len(masked)
    picked = np.maximum(probs[np.arange(n), y], 1e-300)
    loss = float(-np.log(picked).mean())

    g = probs.copy()
    g[np.arange(n), y] -= 1.0
    g /= tau * n  # dLoss/dLogits
    # cosine backward through the projected side
    dp_hat = g @ e_hat
    dp = (dp_hat - (dp_hat * p_hat).sum(axis=1, keepdims=True) * p_hat) / p_norm
    # and through the embedding side
    de_hat = g.T @ p_hat
    de = (de_hat - (de_hat * e_hat).sum(axis=1, keepdims=True) * e_hat) / e_norm

    dc = np.zeros_like(c)
    dc[masked] = dp @ a
    da = dp.T @ co
    grads = {"c": dc, "proj": da, "label_embed": de}
    return loss, grads


# --------------------------------------------------------------------------
# codebook and label-sidecar files

_CODEBOOK_MAGIC = b"MSRC"


def write_codebook(path, codebook: Codebook) -> None:
    header = json.dumps(
        {
            "k": int(codebook.k),
            "feat_dim": int(codebook.centroids.shape[1]),
            "embed_dim": int(codebook.label_embeddings.shape[1]),
        }
    ).encode()
    cent = np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes()
    emb = np.ascontiguousarray(codebook.label_embeddings, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_CODEBOOK_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(cent)
        f.write(emb)


def read_codebook(path) -> Codebook:
    raw = Path(path).read_bytes()
    if raw[:4] != _CODEBOOK_MAGIC:
        raise FormatError("bad-header", f"{path}: not a codebook file")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8 : 8 + hlen])
    k, fd, ed = header["k"], header["feat_dim"], header["embed_dim"]
    start = 8 + hlen
    need = start + 4 * k * (fd + ed)
    if len(raw) < need:
        raise FormatError("truncated", f"{path}: codebook payload truncated")
    cent = np.frombuffer(raw, dtype="<f4", count=k * fd, offset=start).reshape(k, fd)
    emb = np.frombuffer(raw, dtype="<f4", count=k * ed, offset=start + 4 * k * fd)
    return Codebook(centroids=cent.copy(), label_embeddings=emb.reshape(k, ed).copy())


def write_label_sidecar(path, labels: dict[str, np.ndarray]) -> None:
    lines = [
        f"{utt_id}\t{','.join(str(int(v)) for v in seq)}"
        for utt_id, seq in sorted(labels.items())
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_label_sidecar(path) -> dict[str, np.ndarray]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        utt_id, seq = line.split("\t")
        out[utt_id] = np.array([int(v) for v in seq.split(",")], dtype=np.int64)
    return out
