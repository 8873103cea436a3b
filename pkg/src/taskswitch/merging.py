"""Per-input dynamic merging: query features, reference index, KNN weights.

Query features come from the base model's penultimate layer. References are
either K-Means centers of each task's exemplar features or the raw features
themselves; a learnable low-rank projection shapes the retrieval metric.
Each input is answered by base + sum_k w_k * tau_k with w_k the fraction of
that task among the C nearest references.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .container import SparseTaskVector
from .model import MlpSpec, features, forward
from .optim import Adam
from .seeding import rng_for
from .vectors import ParamSet, StructureError

IDX_MAGIC = b"TSWQ"
DIST_EPS = 1e-8        # d below this is clamped before inversion
NUM_FLOOR = 1e-30      # keeps the ratio loss finite with zero correct mass


@dataclass
class ReferenceIndex:
    """Task-labeled reference points plus the metric projection."""

    task_ids: list[str]
    centers: np.ndarray      # (n_refs, e)
    labels: np.ndarray       # (n_refs,) ordinal into task_ids
    projection: np.ndarray   # (r, e)

    @property
    def n_tasks(self) -> int:
        return len(self.task_ids)

    @property
    def feature_dim(self) -> int:
        return self.centers.shape[1]

    @property
    def rank(self) -> int:
        return self.projection.shape[0]


def build_query_set(spec: MlpSpec, base: ParamSet, exemplars: np.ndarray,
                    ) -> np.ndarray:
    """Feature rows for one task's exemplar inputs under the base model."""
    return features(spec, base, exemplars)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    p2 = np.sum(points * points, axis=1, keepdims=True)
    c2 = np.sum(centers * centers, axis=1)
    return np.maximum(p2 + c2 - 2.0 * points @ centers.T, 0.0)


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 100,
           ) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with seeded farthest-point initialization.

    The first center is a seeded uniform draw; each further center is the
    point farthest from the chosen set. Empty clusters are reseeded to the
    point farthest from its current center. Returns (centers, assignment).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = rng_for(seed, "kmeans")
    first = int(rng.integers(n))
    chosen = [first]
    d_near = _sq_dists(points, points[[first]])[:, 0]
    for _ in range(1, k):
        nxt = int(np.argmax(d_near))
        chosen.append(nxt)
        d_near = np.minimum(d_near, _sq_dists(points, points[[nxt]])[:, 0])
    centers = points[chosen].copy()

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        d = _sq_dists(points, centers)
        new_assign = np.argmin(d, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = points[assign == j]
            if members.size == 0:
                row_d = d[np.arange(n), assign]
                centers[j] = points[int(np.argmax(row_d))]
            else:
                centers[j] = members.mean(axis=0)
    return centers, assign


def build_index(spec: MlpSpec, base: ParamSet,
                task_exemplars: list[tuple[str, np.ndarray]],
                centers_per_task: int | None = 20, seed: int = 0,
                ) -> ReferenceIndex:
    """Cluster every task's query features into reference centers.

    centers_per_task=None keeps all features as references (the
    no-clustering mode) with an identity projection.
    """
    task_ids = []
    all_centers = []
    all_labels = []
    for ordinal, (task_id, xs) in enumerate(task_exemplars):
        task_ids.append(task_id)
        feats = build_query_set(spec, base, xs)
        if centers_per_task is None:
            centers = feats
        else:
            centers, _ = kmeans(feats, centers_per_task,
                                seed=seed, max_iter=100)
        all_centers.append(centers)
        all_labels.append(np.full(centers.shape[0], ordinal, dtype=np.int64))
    centers = np.vstack(all_centers)
    e = centers.shape[1]
    return ReferenceIndex(task_ids, centers, np.concatenate(all_labels),
                          np.eye(e))


def init_projection(rank: int, feature_dim: int, seed: int) -> np.ndarray:
    """Gaussian entries scaled by 1/sqrt(feature_dim)."""
    rng = rng_for(seed, "metric-init")
    return rng.normal(size=(rank, feature_dim)) / np.sqrt(feature_dim)


def metric_distance(projection: np.ndarray, a: np.ndarray,
                    b: np.ndarray) -> float:
    """Distance between two feature rows under the learned projection."""
    return float(np.linalg.norm(projection @ (np.asarray(a) - np.asarray(b))))


def projected_distances(projection, feats, centers):
    """Pairwise distances in projection space; works on arrays or Vars."""
    pf = ad.matmul(feats, ad.transpose(projection))
    pc = ad.matmul(centers, ad.transpose(projection))
    f2 = ad.sum_(ad.square(pf), axis=1, keepdims=True)
    c2 = ad.sum_(ad.square(pc), axis=1, keepdims=True)
    d2 = ad.add(ad.add(f2, ad.transpose(c2)),
                ad.mul(ad.matmul(pf, ad.transpose(pc)), -2.0))
    return ad.sqrt(ad.maximum(d2, 1e-30))


def _neighbor_masks(dists: np.ndarray, labels: np.ndarray,
                    task_of_row: np.ndarray, n_neighbors: int):
    """0/1 masks of the C nearest references, ties to the lower ordinal."""
    order = np.argsort(dists, axis=1, kind="stable")[:, :n_neighbors]
    n_rows, n_refs = dists.shape
    mask_all = np.zeros((n_rows, n_refs))
    mask_all[np.arange(n_rows)[:, None], order] = 1.0
    mask_correct = mask_all * (labels[None, :] == task_of_row[:, None])
    return mask_all, mask_correct


def metric_objective(projection, feats: np.ndarray, centers: np.ndarray,
                     labels: np.ndarray, task_of_row: np.ndarray,
                     n_neighbors: int):
    """Mean negative log of correct-task inverse-distance mass.

    Neighbor sets are chosen from the current distance values and held
    fixed inside the objective, so each epoch re-selects them.
    """
    d = projected_distances(projection, feats, centers)
    mask_all, mask_correct = _neighbor_masks(ad._np(d), labels, task_of_row,
                                             n_neighbors)
    inv = ad.div(1.0, ad.maximum(d, DIST_EPS))
    num = ad.sum_(ad.mul(inv, mask_correct), axis=1)
    den = ad.sum_(ad.mul(inv, mask_all), axis=1)
    ratio = ad.div(ad.maximum(num, NUM_FLOOR), den)
    return ad.mul(ad.mean(ad.log(ratio)), -1.0)


@dataclass
class MetricTrainResult:
    index: ReferenceIndex
    losses: list[float] = field(default_factory=list)


def train_metric(index: ReferenceIndex,
                 task_features: list[tuple[str, np.ndarray]],
                 rank: int = 32, epochs: int = 100, lr: float = 0.5,
                 n_neighbors: int = 10, seed: int = 0) -> MetricTrainResult:
    """Learn the low-rank projection by full-batch Adam on the ratio loss."""
    if [t for t, _ in task_features] != index.task_ids:
        raise StructureError("feature tasks do not match the index")
    feats = np.vstack([f for _, f in task_features])
    task_of_row = np.concatenate([
        np.full(f.shape[0], i, dtype=np.int64)
        for i, (_, f) in enumerate(task_features)])
    proj = init_projection(rank, index.feature_dim, seed)
    opt = Adam()
    losses = []
    for _ in range(epochs):
        tape = ad.Tape()
        pvar = tape.var(proj)
        loss = metric_objective(pvar, feats, index.centers, index.labels,
                                task_of_row, n_neighbors)
        losses.append(float(ad._np(loss)))
        tape.backward(loss)
        opt.start_step()
        proj = opt.update("projection", proj, pvar.grad, lr)
    return MetricTrainResult(
        index=ReferenceIndex(index.task_ids, index.centers, index.labels,
                             proj),
        losses=losses)


def knn_weights(index: ReferenceIndex, feats: np.ndarray,
                n_neighbors: int = 10) -> np.ndarray:
    """Per-row task weights: nearest-reference counts over C.

    Distance ties go to the lower reference ordinal. Each task's weight is
    its neighbor count divided by C, except that the last task holding any
    neighbors absorbs the division rounding, so every row sums to exactly
    1.0 in float arithmetic.
    """
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    if not 1 <= n_neighbors <= index.centers.shape[0]:
        raise ValueError(f"n_neighbors must be in [1, "
                         f"{index.centers.shape[0]}], got {n_neighbors}")
    d = ad._np(projected_distances(index.projection, feats, index.centers))
    order = np.argsort(d, axis=1, kind="stable")[:, :n_neighbors]
    picked = index.labels[order]
    counts = np.stack([np.sum(picked == k, axis=1)
                       for k in range(index.n_tasks)], axis=1)
    w = counts / float(n_neighbors)
    rows = np.arange(w.shape[0])
    last = w.shape[1] - 1 - np.argmax(counts[:, ::-1] != 0, axis=1)
    prefix = np.cumsum(w, axis=1)
    before = np.where(last > 0, prefix[rows, np.maximum(last - 1, 0)], 0.0)
    w[rows, last] = 1.0 - before
    return w


def materialize(base: ParamSet, vectors: list[SparseTaskVector],
                weights: np.ndarray) -> ParamSet:
    """base + sum_k w_k * vector_k touching only the union of supports."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(vectors),):
        raise StructureError("one weight per task vector required")
    out = [(name, v.copy()) for name, v in base.modules]
    for w, sv in zip(weights, vectors):
        if w == 0.0:
            continue
        if len(sv.modules) != len(out):
            raise StructureError(
                f"bundle {sv.task_id!r} has {len(sv.modules)} modules, "
                f"base has {len(out)}")
        for (name, acc), (_, mod) in zip(out, sv.modules):
            if acc.size != mod.length:
                raise StructureError(
                    f"bundle {sv.task_id!r} module {name!r}: length "
                    f"{mod.length} vs base {acc.size}")
            acc[mod.support] += w * mod.values
    return ParamSet(out)


def merged_forward(spec: MlpSpec, base: ParamSet,
                   vectors: list[SparseTaskVector], index: ReferenceIndex,
                   x: np.ndarray, n_neighbors: int = 10,
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Per-input merged predictions. Returns (predictions, weight rows).

    Bundle tasks are matched to index tasks by id; inputs sharing a weight
    vector share one materialized parameter set.
    """
    by_id = {sv.task_id: sv for sv in vectors}
    missing = [t for t in index.task_ids if t not in by_id]
    if missing:
        raise StructureError(f"bundle is missing tasks {missing}")
    ordered = [by_id[t] for t in index.task_ids]
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    feats = features(spec, base, x)
    w = knn_weights(index, feats, n_neighbors)
    preds = np.zeros(x.shape[0], dtype=np.int64)
    for row in np.unique(w, axis=0):
        sel = np.all(w == row, axis=1)
        params = materialize(base, ordered, row)
        logits = ad._np(forward(spec, params, x[sel]).logits)
        preds[sel] = np.argmax(logits, axis=1)
    return preds, w


def save_index(path, index: ReferenceIndex) -> None:
    """Little-endian .idx: ids, center counts, dims, then float32 matrices."""
    buf = bytearray()
    buf += IDX_MAGIC
    buf += struct.pack("<I", index.n_tasks)
    for ordinal, task_id in enumerate(index.task_ids):
        ident = task_id.encode("utf-8")
        buf += struct.pack("<H", len(ident))
        buf += ident
        buf += struct.pack("<I", int(np.sum(index.labels == ordinal)))
    buf += struct.pack("<II", index.feature_dim, index.rank)
    buf += index.centers.astype("<f4").tobytes()
    buf += index.projection.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_index(path) -> ReferenceIndex:
    data = Path(path).read_bytes()
    if data[:4] != IDX_MAGIC:
        raise StructureError(f"{path}: not a reference index")
    cursor = 4
    (n_tasks,) = struct.unpack_from("<I", data, cursor)
    cursor += 4
    task_ids = []
    counts = []
    for _ in range(n_tasks):
        (id_len,) = struct.unpack_from("<H", data, cursor)
        cursor += 2
        task_ids.append(data[cursor:cursor + id_len].decode("utf-8"))
        cursor += id_len
        (cnt,) = struct.unpack_from("<I", data, cursor)
        cursor += 4
        counts.append(cnt)
    e, r = struct.unpack_from("<II", data, cursor)
    cursor += 8
    total = sum(counts)
    centers = np.frombuffer(data, dtype="<f4", count=total * e,
                            offset=cursor).reshape(total, e).astype(np.float64)
    cursor += total * e * 4
    proj = np.frombuffer(data, dtype="<f4", count=r * e,
                         offset=cursor).reshape(r, e).astype(np.float64)
    labels = np.concatenate([np.full(c, i, dtype=np.int64)
                             for i, c in enumerate(counts)])
    return ReferenceIndex(task_ids, centers, labels, proj)
