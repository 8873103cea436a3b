"""Desk-scale synthetic pipeline: task generation, fine-tuning, probes.

Tasks are Gaussian class clusters around well-separated task centers. All
tasks share one orthonormal class layout but each swaps one adjacent class
pair relative to the raw labeling, so a model pre-trained on the raw
labeling needs only a small, concentrated weight delta per task, while the
deltas of different tasks genuinely conflict under a static merge.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import MlpSpec, accuracy, check_params, cross_entropy, forward
from .optim import Adam, Sgd
from .seeding import rng_for
from .switch import build_switch, pulse_mask, switch_values
from .vectors import ParamSet, TaskVector, add, check_aligned

ETA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 21))
MAX_PLACEMENT_TRIES = 100


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Geometry and sizes for the K-task Gaussian benchmark."""

    num_tasks: int = 3
    input_dim: int = 16
    classes_per_task: int = 4
    train_size: int = 2000
    test_size: int = 500
    task_separation: float = 8.0
    class_separation: float = 5.0
    noise: float = 1.0
    min_task_gap: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.num_tasks < 1 or self.classes_per_task < 1:
            raise ValueError("need at least one task and one class")
        if self.classes_per_task > self.input_dim:
            raise ValueError("orthonormal class layout needs "
                             "classes_per_task <= input_dim")
        if self.min_task_gap > 2.0 * self.task_separation:
            raise ValueError("min_task_gap is unreachable at this separation")


@dataclass
class TaskData:
    task_id: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    permutation: np.ndarray = None  # raw cluster -> emitted label


def task_geometry(spec: SyntheticTaskSpec,
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Task centers and the shared class offsets, (K, d) and (classes, d).

    Centers are re-drawn until every pair is at least min_task_gap apart;
    class offsets are orthonormal directions scaled by class_separation.
    """
    d = spec.input_dim
    rng = rng_for(spec.seed, "geometry")
    centers = None
    for _ in range(MAX_PLACEMENT_TRIES):
        raw = rng.normal(size=(spec.num_tasks, d))
        cand = spec.task_separation * raw / np.linalg.norm(
            raw, axis=1, keepdims=True)
        gaps = np.linalg.norm(cand[:, None] - cand[None, :], axis=2)
        gaps[np.diag_indices_from(gaps)] = np.inf
        if spec.num_tasks == 1 or gaps.min() >= spec.min_task_gap:
            centers = cand
            break
    if centers is None:
        raise RuntimeError(
            f"could not place {spec.num_tasks} task centers with gap "
            f">= {spec.min_task_gap} in {MAX_PLACEMENT_TRIES} tries")
    q, _ = np.linalg.qr(rng.normal(size=(d, spec.classes_per_task)))
    offsets = spec.class_separation * q.T
    return centers, offsets


def _sample_split(rng, center, offsets, n, noise, n_classes):
    """Balanced, shuffled draw of raw cluster indices around one center."""
    per = n // n_classes
    cls = np.concatenate([np.full(per, j) for j in range(n_classes)]
                         + [np.arange(n - per * n_classes)])
    rng.shuffle(cls)
    x = center + offsets[cls] + noise * rng.normal(size=(n, center.size))
    return x, cls.astype(np.int64)


def task_permutation(k: int, n_classes: int) -> np.ndarray:
    """Task k's relabeling: swap classes k and k+1 (mod the class count)."""
    perm = np.arange(n_classes)
    a, b = k % n_classes, (k + 1) % n_classes
    perm[[a, b]] = perm[[b, a]]
    return perm


def gen_tasks(spec: SyntheticTaskSpec) -> list[TaskData]:
    """Deterministic per-seed K-task benchmark.

    Task k relabels the shared clusters through task_permutation(k), an
    adjacent-pair swap, and records that permutation on the TaskData.
    """
    centers, offsets = task_geometry(spec)
    tasks = []
    for k in range(spec.num_tasks):
        perm = task_permutation(k, spec.classes_per_task)
        rng = rng_for(spec.seed, "task-data", k)
        train_x, train_c = _sample_split(
            rng, centers[k], offsets, spec.train_size, spec.noise,
            spec.classes_per_task)
        test_x, test_c = _sample_split(
            rng, centers[k], offsets, spec.test_size, spec.noise,
            spec.classes_per_task)
        tasks.append(TaskData(f"task{k}", train_x, perm[train_c],
                              test_x, perm[test_c], perm))
    return tasks


def base_dataset(spec: SyntheticTaskSpec,
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Raw-labeled pre-training data covering every task's region.

    Returns (train_x, train_y, test_x, test_y) with train_size and
    test_size samples in total, split evenly across regions. A model fit
    here is the natural base for the per-task fine-tunes.
    """
    centers, offsets = task_geometry(spec)
    rng = rng_for(spec.seed, "base-data")
    per_tr = spec.train_size // spec.num_tasks
    per_te = max(spec.test_size // spec.num_tasks, 1)
    tr = [_sample_split(rng, centers[k], offsets, per_tr, spec.noise,
                        spec.classes_per_task)
          for k in range(spec.num_tasks)]
    te = [_sample_split(rng, centers[k], offsets, per_te, spec.noise,
                        spec.classes_per_task)
          for k in range(spec.num_tasks)]
    return (np.vstack([x for x, _ in tr]), np.concatenate([c for _, c in tr]),
            np.vstack([x for x, _ in te]), np.concatenate([c for _, c in te]))


def write_dataset(path, x: np.ndarray, y: np.ndarray) -> None:
    """CSV with columns x0..x{d-1},label; floats at full precision."""
    x = np.asarray(x, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ["label"])
        for row, lab in zip(x, y):
            w.writerow([f"{v:.17g}" for v in row] + [int(lab)])


def read_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if not header or header[-1] != "label":
            raise ValueError(f"{path}: expected trailing 'label' column")
        rows = list(r)
    x = np.array([[float(v) for v in row[:-1]] for row in rows])
    y = np.array([int(row[-1]) for row in rows], dtype=np.int64)
    return x, y


def write_tasks(out_dir, tasks: list[TaskData]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for t in tasks:
        for split, x, y in (("train", t.train_x, t.train_y),
                            ("test", t.test_x, t.test_y)):
            p = out / f"{t.task_id}_{split}.csv"
            write_dataset(p, x, y)
            written.append(p)
    return written


def fine_tune(spec: MlpSpec, params: ParamSet, x: np.ndarray, y: np.ndarray,
              steps: int = 500, lr: float = 0.01, batch_size: int = 32,
              optimizer: str = "adam", seed: int = 0) -> ParamSet:
    """Cross-entropy training on minibatches drawn with replacement."""
    check_params(spec, params)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if optimizer == "adam":
        opt = Adam()
    elif optimizer == "sgd":
        opt = Sgd()
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    rng = rng_for(seed, "fine-tune")
    current = params.copy()
    for _ in range(steps):
        idx = rng.integers(0, x.shape[0], size=batch_size)
        tape = ad.Tape()
        leaves = {name: tape.var(v) for name, v in current.modules}
        loss = cross_entropy(forward(spec, leaves, x[idx]).logits, y[idx])
        tape.backward(loss)
        opt.start_step()
        current = ParamSet([
            (name, opt.update(name, v,
                              leaves[name].grad if leaves[name].grad
                              is not None else np.zeros_like(v), lr))
            for name, v in current.modules])
    return current


def unit_groups(names: list[str], level: str) -> list[tuple[str, list[str]]]:
    """Probe units: one per module, or modules grouped by name prefix."""
    if level == "module":
        return [(n, [n]) for n in names]
    if level == "layer":
        groups: dict[str, list[str]] = {}
        for n in names:
            groups.setdefault(n.split(".")[0], []).append(n)
        return list(groups.items())
    raise ValueError(f"unknown probe level {level!r}")


@dataclass
class ProbeRow:
    unit: str
    accuracy: float
    drop: float


def _probe(spec, base, tv, x, y, level, transform):
    """Shared probe loop: rebuild one unit's delta, keep the rest intact."""
    check_aligned(base, ParamSet(tv.modules))
    finetuned = add(base, tv, 1.0)
    ref_acc = accuracy(spec, finetuned, x, y)
    rows = []
    for unit, members in unit_groups(tv.names, level):
        modules = []
        for name, tau in tv.modules:
            modules.append((name, transform(name, tau)
                            if name in members else tau.copy()))
        probed = add(base, TaskVector(tv.task_id, modules), 1.0)
        acc = accuracy(spec, probed, x, y)
        rows.append(ProbeRow(unit, acc, ref_acc - acc))
    return ref_acc, rows


def probe_sparsity(spec: MlpSpec, base: ParamSet, tv: TaskVector,
                   x: np.ndarray, y: np.ndarray, level: str = "module",
                   alpha: float = 0.9) -> tuple[float, list[ProbeRow]]:
    """Accuracy cost of pruning one unit's delta to the top (1-alpha)."""
    def prune(name, tau):
        return tau * pulse_mask(tau, alpha)
    return _probe(spec, base, tv, x, y, level, prune)


def probe_precision(spec: MlpSpec, base: ParamSet, tv: TaskVector,
                    x: np.ndarray, y: np.ndarray, level: str = "module",
                    ) -> tuple[float, list[ProbeRow]]:
    """Accuracy cost of binarizing one unit's delta (signs at one scale)."""
    def binarize(name, tau):
        sw = build_switch(TaskVector(tv.task_id, [(name, tau)]), alpha=0.0)
        return switch_values(sw).modules[0][1]
    return _probe(spec, base, tv, x, y, level, binarize)


@dataclass
class ScaleRow:
    eta: float
    accuracy: float
    drop: float


def probe_scale(spec: MlpSpec, base: ParamSet, tv: TaskVector,
                x: np.ndarray, y: np.ndarray,
                etas: tuple = ETA_GRID,
                ) -> tuple[float, list[ScaleRow], float]:
    """Accuracy of the fully binarized delta as its knobs are scaled.

    Returns (finetuned accuracy, per-eta rows, best eta). eta multiplies
    every module's scale at once; eta=0 would reduce to the base model.
    """
    finetuned = add(base, tv, 1.0)
    ref_acc = accuracy(spec, finetuned, x, y)
    sw = build_switch(tv, alpha=0.0)
    binary = switch_values(sw)
    rows = []
    for eta in etas:
        acc = accuracy(spec, add(base, binary, float(eta)), x, y)
        rows.append(ScaleRow(float(eta), acc, ref_acc - acc))
    best = max(rows, key=lambda r: (r.accuracy, -r.eta))
    return ref_acc, rows, best.eta


def write_probe_csv(path, rows) -> None:
    """Schema-stable probe report: unit rows or eta rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if rows and isinstance(rows[0], ScaleRow):
            w.writerow(["eta", "accuracy", "drop"])
            for r in rows:
                w.writerow([f"{r.eta:.1f}", f"{r.accuracy:.6f}",
                            f"{r.drop:.6f}"])
        else:
            w.writerow(["unit", "accuracy", "drop"])
            for r in rows:
                w.writerow([r.unit, f"{r.accuracy:.6f}", f"{r.drop:.6f}"])


def baseline_merge(base: ParamSet, vectors: list[TaskVector],
                   mode: str = "weight-average",
                   scale: float = 0.3) -> ParamSet:
    """Static merges: theta + (1/K) sum tau, or theta + scale * sum tau."""
    if not vectors:
        raise ValueError("need at least one task vector")
    if mode == "weight-average":
        w = 1.0 / len(vectors)
    elif mode == "task-arithmetic":
        w = scale
    else:
        raise ValueError(f"unknown baseline mode {mode!r}")
    merged = base
    for tv in vectors:
        merged = add(merged, tv, w)
    return merged


def evaluate_tasks(spec: MlpSpec, params: ParamSet,
                   tasks: list[TaskData]) -> list[float]:
    """Test accuracy of one parameter set on every task."""
    return [accuracy(spec, params, t.test_x, t.test_y) for t in tasks]
