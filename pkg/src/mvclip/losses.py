"""CLIP, EMM and IMM contrastive objectives with exact gradients.

All three losses operate on a :class:`MultiviewBatch`: ``N`` molecule
embeddings paired with ``N x M`` image-view embeddings. Similarities are dot
products of (normally L2-normalised) vectors divided by the temperature.
Every reduction is a masked log-sum-exp with max subtraction, so small
temperatures stay finite.

EMM is molecule-anchored. Its numerator pools the ``M`` positive views of the
molecule, its denominator the views of every *other* sample (``j != i``).
Setting ``denominator_includes_positives`` adds the ``j == i`` terms back,
which gives the usual InfoNCE form. IMM adds ``gamma`` times an image-image
term of the same shape over the view pairs returned by :func:`pair_set`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from mvclip.errors import (
    DegenerateInputError,
    EmptyPairSetError,
    InsufficientBatchError,
    IntraTermUndefinedError,
    NonFiniteError,
)
from mvclip.gradcheck import central_difference, max_relative_error

PairVariant = Literal["ordered_distinct", "unordered_distinct", "all_pairs"]
LossKind = Literal["clip", "emm", "imm"]

PAIR_VARIANTS = ("ordered_distinct", "unordered_distinct", "all_pairs")
LOSS_KINDS = ("clip", "emm", "imm")


@dataclass(frozen=True)
class MultiviewBatch:
    """Molecule embeddings ``mol`` (N, d) and image views ``img`` (N, M, d)."""

    mol: np.ndarray
    img: np.ndarray

    def __post_init__(self):
        mol = np.asarray(self.mol)
        img = np.asarray(self.img)
        if mol.ndim != 2 or img.ndim != 3:
            raise ValueError(
                f"expected mol (N, d) and img (N, M, d), got {mol.shape} and {img.shape}"
            )
        if img.shape[0] != mol.shape[0] or img.shape[2] != mol.shape[1]:
            raise ValueError(f"shape mismatch: mol {mol.shape} vs img {img.shape}")
        if img.shape[1] < 1 or mol.shape[1] < 1:
            raise ValueError("need M >= 1 views and d >= 1 dimensions")
        object.__setattr__(self, "mol", mol)
        object.__setattr__(self, "img", img)

    @property
    def n(self) -> int:
        return self.mol.shape[0]

    @property
    def m(self) -> int:
        return self.img.shape[1]

    @property
    def d(self) -> int:
        return self.mol.shape[1]


@dataclass(frozen=True)
class LossConfig:
    """Temperature, IMM weight and the knobs for the ambiguous parts of the losses.

    Attributes:
        tau: Softmax temperature, > 0.
        gamma: Weight of the intra-image term of IMM, >= 0.
        pair_set_variant: Which view pairs (a, b) enter the IMM term.
        denominator_includes_positives: Add the ``j == i`` terms to the
            EMM/IMM denominators (standard InfoNCE) instead of excluding them.
        symmetric_clip: Average the molecule->image and image->molecule
            cross-entropies in :func:`clip_loss`.
    """

    tau: float = 0.07
    gamma: float = 0.5
    pair_set_variant: PairVariant = "ordered_distinct"
    denominator_includes_positives: bool = False
    symmetric_clip: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.pair_set_variant not in PAIR_VARIANTS:
            raise ValueError(f"unknown pair_set_variant {self.pair_set_variant!r}")

    def replace(self, **changes) -> "LossConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class LossResult:
    """Loss value with gradients for every input embedding.

    ``grad_log_tau`` is the derivative with respect to ``log(tau)``, used
    when the temperature is trained.
    """

    value: float
    grad_mol: np.ndarray
    grad_img: np.ndarray
    grad_log_tau: float = 0.0


def normalize(batch: MultiviewBatch) -> MultiviewBatch:
    """Scale every molecule and view vector to unit L2 norm.

    Raises:
        DegenerateInputError: If any vector has zero norm. The message names
            the offending index.
    """
    mol_norm = np.linalg.norm(batch.mol, axis=-1)
    img_norm = np.linalg.norm(batch.img, axis=-1)
    bad = np.flatnonzero(mol_norm == 0)
    if bad.size:
        raise DegenerateInputError(f"zero-norm molecule vector at index {int(bad[0])}")
    bad = np.argwhere(img_norm == 0)
    if bad.size:
        i, k = (int(v) for v in bad[0])
        raise DegenerateInputError(f"zero-norm image vector at index ({i}, {k})")
    return MultiviewBatch(batch.mol / mol_norm[:, None], batch.img / img_norm[..., None])


def normalize_backward(raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``raw / |raw|`` back to ``raw`` (last axis)."""
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    unit = raw / norm
    radial = np.sum(grad_unit * unit, axis=-1, keepdims=True)
    return (grad_unit - radial * unit) / norm


def pair_set(m: int, variant: PairVariant = "ordered_distinct") -> list[tuple[int, int]]:
    """View index pairs (1-based, sorted) used by the IMM intra-image term.

    ``ordered_distinct`` gives M(M-1) pairs with a != b, ``unordered_distinct``
    the M(M-1)/2 pairs with a < b and ``all_pairs`` all M^2 pairs.
    """
    if variant not in PAIR_VARIANTS:
        raise ValueError(f"unknown pair_set_variant {variant!r}")
    if variant == "all_pairs":
        if m < 1:
            raise EmptyPairSetError(f"all_pairs needs M >= 1, got {m}")
        return [(a, b) for a in range(1, m + 1) for b in range(1, m + 1)]
    if m < 2:
        raise EmptyPairSetError(f"{variant} needs M >= 2, got {m}")
    if variant == "ordered_distinct":
        return [(a, b) for a in range(1, m + 1) for b in range(1, m + 1) if a != b]
    return [(a, b) for a in range(1, m + 1) for b in range(a + 1, m + 1)]


def _pair_mask(m: int, variant: PairVariant) -> np.ndarray:
    mask = np.zeros((m, m), dtype=bool)
    for a, b in pair_set(m, variant):
        mask[a - 1, b - 1] = True
    return mask


def _masked_lse(logits: np.ndarray, mask: np.ndarray, axes: tuple[int, ...]):
    """Log-sum-exp over ``axes`` restricted to ``mask``, plus the softmax weights."""
    masked = np.where(mask, logits, -np.inf)
    peak = masked.max(axis=axes, keepdims=True)
    expd = np.where(mask, np.exp(masked - peak), 0.0)
    total = expd.sum(axis=axes, keepdims=True)
    lse = np.log(total) + peak
    return np.squeeze(lse, axis=axes), expd / total


def _check_inputs(batch: MultiviewBatch):
    if batch.n < 2:
        raise InsufficientBatchError(f"need N >= 2 samples, got {batch.n}")
    if not (np.all(np.isfinite(batch.mol)) and np.all(np.isfinite(batch.img))):
        raise NonFiniteError("batch contains non-finite values")


def clip_loss(batch: MultiviewBatch, cfg: LossConfig) -> LossResult:
    """Symmetric InfoNCE between molecules and their single image view.

    Both directions use the conventional denominator over the whole batch,
    positives included; ``cfg.denominator_includes_positives`` does not apply.
    With ``cfg.symmetric_clip`` false only the molecule->image term is kept.
    """
    _check_inputs(batch)
    if batch.m != 1:
        raise ValueError(f"clip_loss needs M = 1, got M = {batch.m}")
    n = batch.n
    img = batch.img[:, 0, :]
    logits = (batch.mol @ img.T) / cfg.tau
    everything = np.ones_like(logits, dtype=bool)
    eye = np.eye(n, dtype=logits.dtype)
    diag = np.diagonal(logits)

    row_lse, row_w = _masked_lse(logits, everything, (1,))
    if cfg.symmetric_clip:
        col_lse, col_w = _masked_lse(logits, everything, (0,))
        value = 0.5 * (np.mean(row_lse - diag) + np.mean(col_lse - diag))
        dlogits = 0.5 * ((row_w - eye) + (col_w - eye)) / n
    else:
        value = np.mean(row_lse - diag)
        dlogits = (row_w - eye) / n

    grad_mol = (dlogits @ img) / cfg.tau
    grad_img = (dlogits.T @ batch.mol) / cfg.tau
    grad_log_tau = -float(np.sum(dlogits * logits))
    return LossResult(float(value), grad_mol, grad_img[:, None, :], grad_log_tau)


def emm_loss(batch: MultiviewBatch, cfg: LossConfig) -> LossResult:
    """Extra Modality Multiview loss (molecule-anchored, M positive views)."""
    _check_inputs(batch)
    n, m = batch.n, batch.m
    flat = batch.img.reshape(n * m, -1)
    logits = (batch.mol @ flat.T).reshape(n, n, m) / cfg.tau
    same = np.broadcast_to(np.eye(n, dtype=bool)[:, :, None], logits.shape)
    denom = np.ones_like(same) if cfg.denominator_includes_positives else ~same

    pos_lse, pos_w = _masked_lse(logits, same, (1, 2))
    neg_lse, neg_w = _masked_lse(logits, denom, (1, 2))
    value = np.mean(neg_lse - pos_lse)

    dlogits = (neg_w - pos_w) / n
    d2 = dlogits.reshape(n, n * m)
    grad_mol = (d2 @ flat) / cfg.tau
    grad_img = (d2.T @ batch.mol).reshape(batch.img.shape) / cfg.tau
    grad_log_tau = -float(np.sum(dlogits * logits))
    return LossResult(float(value), grad_mol, grad_img, grad_log_tau)


def _intra_term(batch: MultiviewBatch, cfg: LossConfig) -> LossResult:
    n, m = batch.n, batch.m
    flat = batch.img.reshape(n * m, -1)
    # logits[i, j, a, b] = <img[i, a], img[j, b]> / tau
    logits = (flat @ flat.T).reshape(n, m, n, m).transpose(0, 2, 1, 3) / cfg.tau
    pairs = _pair_mask(m, cfg.pair_set_variant)[None, None, :, :]
    eye = np.eye(n, dtype=bool)[:, :, None, None]
    same = eye & pairs
    denom = pairs & (np.ones_like(eye) if cfg.denominator_includes_positives else ~eye)
    same = np.broadcast_to(same, logits.shape)
    denom = np.broadcast_to(denom, logits.shape)

    pos_lse, pos_w = _masked_lse(logits, same, (1, 2, 3))
    neg_lse, neg_w = _masked_lse(logits, denom, (1, 2, 3))
    value = np.mean(neg_lse - pos_lse)

    dlogits = (neg_w - pos_w) / n
    d2 = dlogits.transpose(0, 2, 1, 3).reshape(n * m, n * m)
    grad_img = ((d2 + d2.T) @ flat).reshape(batch.img.shape) / cfg.tau
    grad_log_tau = -float(np.sum(dlogits * logits))
    return LossResult(float(value), np.zeros_like(batch.mol), grad_img, grad_log_tau)


def imm_loss(batch: MultiviewBatch, cfg: LossConfig) -> LossResult:
    """Intra Modality Multiview loss: EMM plus ``gamma`` times the image-image term.

    With ``gamma == 0`` the EMM result is returned unchanged, so the two
    agree bit for bit.
    """
    if cfg.gamma > 0 and batch.m < 2:
        raise IntraTermUndefinedError(
            f"intra term undefined for M = {batch.m}; IMM with gamma > 0 needs M >= 2"
        )
    emm = emm_loss(batch, cfg)
    if cfg.gamma == 0:
        return emm
    intra = _intra_term(batch, cfg)
    return LossResult(
        emm.value + cfg.gamma * intra.value,
        emm.grad_mol,
        emm.grad_img + cfg.gamma * intra.grad_img,
        emm.grad_log_tau + cfg.gamma * intra.grad_log_tau,
    )


_LOSSES = {"clip": clip_loss, "emm": emm_loss, "imm": imm_loss}


def compute_loss(kind: LossKind, batch: MultiviewBatch, cfg: LossConfig) -> LossResult:
    try:
        fn = _LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}") from None
    return fn(batch, cfg)


def grad_check(
    loss_kind: LossKind,
    batch: MultiviewBatch,
    cfg: LossConfig,
    eps: float = 1e-6,
    floor: float = 1.0,
) -> float:
    """Compare analytic loss gradients with central finite differences.

    Every coordinate of ``batch.mol`` and ``batch.img`` is perturbed by
    ``+-eps``. Arithmetic is done in float64 whatever the input dtype.

    Returns:
        Maximum of ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
        over all coordinates.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    mol = np.array(batch.mol, dtype=np.float64)
    img = np.array(batch.img, dtype=np.float64)
    result = compute_loss(loss_kind, MultiviewBatch(mol, img), cfg)

    num_mol = central_difference(
        lambda x: compute_loss(loss_kind, MultiviewBatch(x, img), cfg).value, mol, eps
    )
    num_img = central_difference(
        lambda x: compute_loss(loss_kind, MultiviewBatch(mol, x), cfg).value, img, eps
    )
    return max(
        max_relative_error(result.grad_mol, num_mol, floor),
        max_relative_error(result.grad_img, num_img, floor),
    )


def random_batch(
    n: int, m: int, d: int, seed: Optional[int] = 0, dtype=np.float64
) -> MultiviewBatch:
    """Gaussian batch, normalised. Handy for checks and benchmarks."""
    rng = np.random.default_rng(seed)
    raw = MultiviewBatch(
        rng.standard_normal((n, d)).astype(dtype), rng.standard_normal((n, m, d)).astype(dtype)
    )
    return normalize(raw)
