"""Cross-modal retrieval: rank each positive inside a 1:pool_size candidate pool.

Every image row yields one query in each direction. For ``img2mol`` the image
queries its compound's molecule against ``pool_size - 1`` molecules of other
compounds; for ``mol2img`` the molecule queries that image against
``pool_size - 1`` images of other compounds. Negatives are drawn without
replacement from a generator seeded by ``(seed, trial)`` and consumed in query
order.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from mvclip.tables import EmbeddingTable

Direction = Literal["img2mol", "mol2img"]
DIRECTIONS = ("img2mol", "mol2img")


@dataclass(frozen=True)
class RetrievalConfig:
    pool_size: int = 100
    ks: tuple = (1, 3, 5, 10)
    direction: Direction = "img2mol"
    trials: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        if self.pool_size < 2:
            raise ValueError(f"pool_size must be >= 2, got {self.pool_size}")
        if not self.ks or any(not 1 <= k <= self.pool_size for k in self.ks):
            raise ValueError(f"every k must lie in [1, pool_size], got {self.ks}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass
class RetrievalReport:
    hit_rate: dict
    mrr: float
    per_query_ranks: np.ndarray = field(repr=False)
    direction: str = "img2mol"
    pool_size: int = 100


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def rank_positive(query, positive, negatives) -> int:
    """1-based rank of ``positive`` among ``negatives`` by cosine similarity to ``query``.

    Ties count against the positive.
    """
    query = np.asarray(query, dtype=np.float64)
    positive = np.asarray(positive, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.size == 0:
        negatives = negatives.reshape(0, query.shape[-1])
    if query.ndim != 1 or positive.shape != query.shape or negatives.ndim != 2 or negatives.shape[1] != query.shape[0]:
        raise ValueError(
            f"dimension mismatch: query {query.shape}, positive {positive.shape}, negatives {negatives.shape}"
        )
    q = _unit(query)
    pos = float(q @ _unit(positive))
    neg = _unit(negatives) @ q
    return 1 + int(np.count_nonzero(neg >= pos))


def _ranks_from_pools(queries, positives, candidates, pools) -> np.ndarray:
    pos = np.einsum("qd,qd->q", queries, positives)
    neg = np.einsum("qd,qkd->qk", queries, candidates[pools])
    return 1 + np.count_nonzero(neg >= pos[:, None], axis=1)


def _draw_excluding(rng, n_total, lo, hi, size):
    """``size`` distinct indices from range(n_total) minus the block [lo, hi)."""
    draw = rng.choice(n_total - (hi - lo), size=size, replace=False)
    return np.where(draw >= lo, draw + (hi - lo), draw)


def evaluate(table: EmbeddingTable, cfg: RetrievalConfig) -> RetrievalReport:
    """Aggregate ranks over all queries and trials into HitRate@k and MRR.

    Raises:
        ValueError: If a query has fewer than ``pool_size - 1`` candidates.
    """
    mol = _unit(table.mol)
    order = np.argsort(table.img_owner, kind="stable")
    owner = table.img_owner[order]
    img = _unit(table.img[order])
    n_mol, n_img = len(mol), len(img)
    n_neg = cfg.pool_size - 1
    if n_img == 0:
        raise ValueError("no image rows to evaluate")
    starts = np.searchsorted(owner, np.arange(n_mol), side="left")
    ends = np.searchsorted(owner, np.arange(n_mol), side="right")

    if cfg.direction == "img2mol":
        available = n_mol - 1
    else:
        available = int(n_img - (ends - starts)[owner].max())
    if available < n_neg:
        raise ValueError(
            f"pool of {cfg.pool_size} needs {n_neg} negatives per query but only {available} "
            f"are available (short by {n_neg - available})"
        )

    ranks = []
    for trial in range(cfg.trials):
        rng = np.random.default_rng([cfg.seed, trial])
        pools = np.empty((n_img, n_neg), dtype=np.intp)
        if cfg.direction == "img2mol":
            for r in range(n_img):
                pools[r] = _draw_excluding(rng, n_mol, owner[r], owner[r] + 1, n_neg)
            ranks.append(_ranks_from_pools(img, mol[owner], mol, pools))
        else:
            for r in range(n_img):
                c = owner[r]
                pools[r] = _draw_excluding(rng, n_img, starts[c], ends[c], n_neg)
            ranks.append(_ranks_from_pools(mol[owner], img, img, pools))
    per_query = np.concatenate(ranks)
    return summarize(per_query, cfg.ks, cfg.direction, cfg.pool_size)


def summarize(ranks: np.ndarray, ks: Sequence[int], direction: str = "img2mol", pool_size: int = 100) -> RetrievalReport:
    ranks = np.asarray(ranks)
    hit = {int(k): float(np.mean(ranks <= k)) for k in ks}
    return RetrievalReport(hit, float(np.mean(1.0 / ranks)), ranks, direction, pool_size)


def random_baseline(pool_size: int = 100, ks: Sequence[int] = (1, 3, 5, 10)) -> tuple[dict, float]:
    """Expected HitRate@k and MRR when the positive's rank is uniform on 1..pool_size."""
    hit = {int(k): k / pool_size for k in ks}
    mrr = sum(1.0 / r for r in range(1, pool_size + 1)) / pool_size
    return hit, mrr


def report_csv(reports: Sequence[RetrievalReport], label: str = "model") -> str:
    ks = sorted(reports[0].hit_rate)
    buf = io.StringIO()
    buf.write(",".join(["experiment", "direction", "pool_size", *[f"HR@{k}" for k in ks], "MRR", "n_queries"]) + "\n")
    for rep in reports:
        vals = [f"{rep.hit_rate[k]:.6f}" for k in ks]
        buf.write(",".join([label, rep.direction, str(rep.pool_size), *vals, f"{rep.mrr:.6f}", str(len(rep.per_query_ranks))]) + "\n")
    return buf.getvalue()


def report_table(reports: Sequence[RetrievalReport], label: str = "model") -> str:
    """Aligned text table, one row per direction with HR@k and MRR columns."""
    ks = sorted(reports[0].hit_rate)
    head = f"{'Experiment':<12}{'Direction':<10}" + "".join(f"{'HR@' + str(k):>8}" for k in ks) + f"{'MRR':>8}"
    lines = [head, "-" * len(head)]
    for rep in reports:
        lines.append(
            f"{label:<12}{rep.direction:<10}" + "".join(f"{rep.hit_rate[k]:>8.3f}" for k in ks) + f"{rep.mrr:>8.3f}"
        )
    return "\n".join(lines) + "\n"
