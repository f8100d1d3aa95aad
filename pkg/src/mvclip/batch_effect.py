"""Batch-effect evaluation with group-disjoint splits and simple probes.

Accuracy is measured on a random stratified split and on splits that hold out
whole sources (NSS), batches (NSB) or plates (NSP). Each generalisation
score is the held-out-group accuracy divided by the random-split accuracy.
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from mvclip.errors import InfeasibleSplitError, RatioUndefinedError
from mvclip.tables import LabeledEmbeddings

SplitMode = Literal["Random", "NSS", "NSB", "NSP"]
MODES = ("Random", "NSS", "NSB", "NSP")
_MODE_CODE = {m: i for i, m in enumerate(MODES)}
GROUP_TOLERANCE = 0.1


@dataclass(frozen=True)
class SplitSpec:
    mode: SplitMode = "Random"
    test_fraction: float = 0.2
    repetitions: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


@dataclass
class BatchEffectReport:
    acc_rand: float
    acc_nss: float
    acc_nsb: float
    acc_nsp: float
    g_nss: float
    g_nsb: float
    g_nsp: float
    per_repetition: dict = field(default_factory=dict)
    probe: str = "logreg"

    def std(self, mode: str) -> float:
        return float(np.std(self.per_repetition[mode]))


def group_keys(data: LabeledEmbeddings, mode: SplitMode) -> np.ndarray:
    """Grouping value per sample; batches and plates are nested in their parents."""
    if mode == "NSS":
        parts = [data.source]
    elif mode == "NSB":
        parts = [data.source, data.batch]
    elif mode == "NSP":
        parts = [data.source, data.batch, data.plate]
    else:
        raise ValueError(f"{mode} has no grouping key")
    return np.array(["\x1f".join(map(str, t)) for t in zip(*parts)])


def make_split(data: LabeledEmbeddings, spec: SplitSpec, repetition: int = 0):
    """Train and test indices (sorted) for one repetition.

    ``Random`` shuffles within every label and puts ``round(test_fraction *
    n_label)`` of each label in the test set. The grouped modes walk the
    groups in a seeded random order and move a whole group to the test set
    whenever that brings the test size closer to the target.

    Raises:
        InfeasibleSplitError: Fewer than two groups, or no greedy assignment
            within ``GROUP_TOLERANCE`` of the requested fraction.
    """
    n = len(data)
    rng = np.random.default_rng([spec.seed, repetition, _MODE_CODE[spec.mode]])
    in_test = np.zeros(n, dtype=bool)

    if spec.mode == "Random":
        # classes in order of first appearance, so renaming classes keeps the split
        _, first = np.unique(data.labels, return_index=True)
        for label in data.labels[np.sort(first)]:
            idx = np.flatnonzero(data.labels == label)
            take = int(round(spec.test_fraction * len(idx)))
            in_test[rng.permutation(idx)[:take]] = True
    else:
        keys = group_keys(data, spec.mode)
        groups, inverse, sizes = np.unique(keys, return_inverse=True, return_counts=True)
        if len(groups) < 2:
            raise InfeasibleSplitError(f"{spec.mode} split needs at least 2 groups, found {len(groups)}")
        target = spec.test_fraction * n
        chosen = np.zeros(len(groups), dtype=bool)
        count = 0
        for g in rng.permutation(len(groups)):
            if abs(count + sizes[g] - target) < abs(count - target):
                chosen[g] = True
                count += sizes[g]
        achieved = count / n
        if count == 0 or count == n or abs(achieved - spec.test_fraction) > GROUP_TOLERANCE:
            raise InfeasibleSplitError(
                f"{spec.mode}: closest group-disjoint test fraction is {achieved:.3f}, "
                f"requested {spec.test_fraction} +- {GROUP_TOLERANCE}"
            )
        in_test = chosen[inverse]
    return np.flatnonzero(~in_test), np.flatnonzero(in_test)


# -- probes --------------------------------------------------------------------


def _one_hot(y: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(y), n_classes))
    out[np.arange(len(y)), y] = 1.0
    return out


def logreg_objective(W: np.ndarray, b: np.ndarray, X: np.ndarray, Y: np.ndarray, l2: float):
    """Mean softmax cross-entropy plus ``l2/2 * |W|^2`` and its gradients."""
    logits = X @ W + b
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    n = len(X)
    value = -np.sum(Y * logp) / n + 0.5 * l2 * np.sum(W * W)
    delta = (np.exp(logp) - Y) / n
    return value, X.T @ delta + l2 * W, delta.sum(axis=0)


@dataclass
class LogisticRegression:
    """Multinomial logistic regression on whitened features."""

    W: np.ndarray
    b: np.ndarray
    classes: np.ndarray
    center: np.ndarray
    whiten: np.ndarray
    loss_curve: list = field(default_factory=list, repr=False)

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.center) @ self.whiten

    def predict(self, X) -> np.ndarray:
        return self.classes[np.argmax(self.transform(X) @ self.W + self.b, axis=1)]


def _zca(X: np.ndarray, rel_floor: float = 1e-6):
    """Centre and symmetric whitening matrix of the training features.

    Eigenvalues are floored at ``rel_floor`` times the largest one so rank
    deficient embeddings stay well defined. The symmetric form commutes with
    rotations: rotating the inputs rotates the whitened features by the same
    matrix, and gradient descent from zero is equivariant to that.
    """
    center = X.mean(axis=0)
    cov = np.cov(X - center, rowvar=False, bias=True).reshape(X.shape[1], X.shape[1])
    evals, evecs = np.linalg.eigh(cov)
    top = max(float(evals.max()), np.finfo(float).tiny)
    evals = np.maximum(evals, rel_floor * top)
    return center, (evecs / np.sqrt(evals)) @ evecs.T


def fit_logreg(X, y, l2: float = 1e-4, epochs: int = 200, lr: float = 0.1, schedule: str = "cosine") -> LogisticRegression:
    """Full-batch gradient descent from zero weights on whitened features."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    classes, yi = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError(f"logistic regression needs >= 2 classes in train, got {len(classes)}")
    if schedule not in ("cosine", "constant"):
        raise ValueError(f"unknown schedule {schedule!r}")
    center, whiten = _zca(X)
    model = LogisticRegression(np.zeros((X.shape[1], len(classes))), np.zeros(len(classes)), classes, center, whiten)
    Xs = model.transform(X)
    Y = _one_hot(yi, len(classes))
    for epoch in range(epochs):
        step = lr * 0.5 * (1 + math.cos(math.pi * epoch / epochs)) if schedule == "cosine" else lr
        value, gW, gb = logreg_objective(model.W, model.b, Xs, Y, l2)
        model.loss_curve.append(value)
        model.W -= step * gW
        model.b -= step * gb
    return model


def knn_classify(train_X, train_y, test_X, k: int = 15, chunk: int = 1024) -> np.ndarray:
    """Majority vote over the ``k`` nearest training points by cosine distance.

    A tied vote goes to the tied class whose member is nearest to the query.
    """
    train_X = np.asarray(train_X, dtype=np.float64)
    train_y = np.asarray(train_y)
    if len(train_X) == 0:
        raise ValueError("knn needs a non-empty training set")
    if not 1 <= k <= len(train_X):
        raise ValueError(f"k must be in [1, {len(train_X)}], got {k}")
    classes, yi = np.unique(train_y, return_inverse=True)
    tr = train_X / np.linalg.norm(train_X, axis=1, keepdims=True)
    test_X = np.asarray(test_X, dtype=np.float64)
    te = test_X / np.linalg.norm(test_X, axis=1, keepdims=True)
    out = np.empty(len(te), dtype=np.intp)
    for start in range(0, len(te), chunk):
        sims = te[start : start + chunk] @ tr.T
        if k < len(tr):
            near = np.argpartition(-sims, k - 1, axis=1)[:, :k]
        else:
            near = np.broadcast_to(np.arange(len(tr)), sims.shape)
        near_sims = np.take_along_axis(sims, near, axis=1)
        order = np.lexsort((near, -near_sims), axis=1)
        near = np.take_along_axis(near, order, axis=1)
        labels = yi[near]
        for row, lab in enumerate(labels):
            votes = np.bincount(lab, minlength=len(classes))
            tied = votes == votes.max()
            out[start + row] = lab[np.argmax(tied[lab])]
    return classes[out]


# -- evaluation ----------------------------------------------------------------


def _accuracy(data: LabeledEmbeddings, spec: SplitSpec, rep: int, probe: str, probe_kwargs: dict):
    train, test = make_split(data, spec, rep)
    Xtr, ytr = data.vectors[train], data.labels[train]
    Xte, yte = data.vectors[test], data.labels[test]
    if probe == "logreg":
        pred = fit_logreg(Xtr, ytr, **probe_kwargs).predict(Xte)
    elif probe == "knn":
        pred = knn_classify(Xtr, ytr, Xte, **probe_kwargs)
    else:
        raise ValueError(f"unknown probe {probe!r}")
    return float(np.mean(pred == yte))


def evaluate_batch_effect(
    data: LabeledEmbeddings,
    spec: Optional[SplitSpec] = None,
    probe: str = "logreg",
    workers: int = 1,
    **probe_kwargs,
) -> BatchEffectReport:
    """Mean accuracy per split mode over the repetitions and the three G ratios.

    Raises:
        RatioUndefinedError: If the random-split accuracy is zero.
        InfeasibleSplitError: If a grouped split cannot be built.
    """
    spec = spec or SplitSpec()
    jobs = [(mode, rep) for mode in MODES for rep in range(spec.repetitions)]

    def run(job):
        mode, rep = job
        s = SplitSpec(mode, spec.test_fraction, spec.repetitions, spec.seed)
        return _accuracy(data, s, rep, probe, probe_kwargs)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        accs = list(pool.map(run, jobs))
    per_rep = {mode: [] for mode in MODES}
    for (mode, _), acc in zip(jobs, accs):
        per_rep[mode].append(acc)
    mean = {mode: float(np.mean(v)) for mode, v in per_rep.items()}
    if mean["Random"] == 0:
        raise RatioUndefinedError("random-split accuracy is 0; generalisation ratios are undefined")
    return BatchEffectReport(
        acc_rand=mean["Random"],
        acc_nss=mean["NSS"],
        acc_nsb=mean["NSB"],
        acc_nsp=mean["NSP"],
        g_nss=mean["NSS"] / mean["Random"],
        g_nsb=mean["NSB"] / mean["Random"],
        g_nsp=mean["NSP"] / mean["Random"],
        per_repetition=per_rep,
        probe=probe,
    )


def report_csv(report: BatchEffectReport, label: str = "model") -> str:
    """One CSV row: label, probe, Acc_Rand, then G for NSP, NSB and NSS."""
    return (
        "experiment,probe,Acc_Rand,G_NSP,G_NSB,G_NSS\n"
        f"{label},{report.probe},{report.acc_rand:.6f},{report.g_nsp:.6f},{report.g_nsb:.6f},{report.g_nss:.6f}\n"
    )


def detail_csv(report: BatchEffectReport) -> str:
    buf = io.StringIO()
    buf.write("mode,repetition,accuracy\n")
    for mode in MODES:
        for rep, acc in enumerate(report.per_repetition[mode]):
            buf.write(f"{mode},{rep},{acc:.6f}\n")
    return buf.getvalue()


def report_table(report: BatchEffectReport, label: str = "model") -> str:
    head = f"{'Experiment':<12}{'Probe':<8}{'Acc_Rand':>10}{'G_NSP':>8}{'G_NSB':>8}{'G_NSS':>8}"
    row = (
        f"{label:<12}{report.probe:<8}{report.acc_rand:>10.3f}"
        f"{report.g_nsp:>8.3f}{report.g_nsb:>8.3f}{report.g_nss:>8.3f}"
    )
    return "\n".join([head, "-" * len(head), row]) + "\n"


def synthetic_labeled(
    n_classes: int = 9,
    per_class: int = 200,
    dim: int = 16,
    n_sources: int = 5,
    batches_per_source: int = 2,
    plates_per_batch: int = 2,
    class_sep: float = 2.0,
    noise: float = 1.0,
    source_offset: float = 0.0,
    seed: int = 0,
) -> LabeledEmbeddings:
    """Gaussian class clusters with an optional constant shift per source.

    Samples are dealt round-robin over (source, batch, plate) cells so every
    cell holds every class.
    """
    rng = np.random.default_rng(seed)
    centroids = class_sep * rng.standard_normal((n_classes, dim))
    offsets = source_offset * rng.standard_normal((n_sources, dim))
    n_cells = n_sources * batches_per_source * plates_per_batch
    labels = np.repeat(np.arange(n_classes), per_class)
    cell = rng.permutation(len(labels)) % n_cells
    src = cell // (batches_per_source * plates_per_batch)
    bat = (cell // plates_per_batch) % batches_per_source
    pla = cell % plates_per_batch
    X = centroids[labels] + noise * rng.standard_normal((len(labels), dim)) + offsets[src]
    return LabeledEmbeddings(
        [f"s{i}" for i in range(len(labels))],
        X,
        np.array([f"T{c}" for c in labels]),
        np.array([f"S{s}" for s in src]),
        np.array([f"B{b}" for b in bat]),
        np.array([f"P{p}" for p in pla]),
    )
