"""Desk-scale two-tower training on synthetic paired data with batch effects.

Each compound has a latent vector drawn around one of a few class centroids.
Molecule features are a fixed linear map of the latent plus noise. Image views
use a second linear map plus view noise plus an additive offset shared by
every view imaged in the same (source, batch, plate) cell. The offset is
hierarchical: a source component, half as much per batch and a quarter per
plate, so source effects dominate as they do in real screens.

Both towers are two-hidden-layer tanh MLPs written out by hand, trained with
AdamW and a warmup-then-cosine schedule.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from mvclip.errors import ConfigError, NonFiniteError, TrainingDivergedError
from mvclip.losses import LOSS_KINDS, LossConfig, MultiviewBatch, compute_loss, normalize_backward
from mvclip.tables import EmbeddingTable, LabeledEmbeddings, write_labeled_csv, write_retrieval_csv

log = logging.getLogger(__name__)

MIN_TAU = 0.01


# -- synthetic data ------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    n_compounds: int = 2000
    views_per_compound: int = 3
    latent_dim: int = 16
    obs_dim_mol: int = 64
    obs_dim_img: int = 64
    n_classes: int = 8
    class_sep: float = 1.0
    mol_noise_sigma: float = 0.2
    view_noise_sigma: float = 0.5
    batch_offset_sigma: float = 1.25
    n_sources: int = 5
    n_batches_per_source: int = 2
    n_plates_per_batch: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("n_compounds", "views_per_compound", "latent_dim", "obs_dim_mol", "obs_dim_img",
                     "n_classes", "n_sources", "n_batches_per_source", "n_plates_per_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("class_sep", "mol_noise_sigma", "view_noise_sigma", "batch_offset_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class SyntheticData:
    """Paired dataset. View-level arrays have shape (n_compounds, views)."""

    mol: np.ndarray
    img: np.ndarray
    labels: np.ndarray
    source: np.ndarray
    batch: np.ndarray
    plate: np.ndarray
    ids: list

    @property
    def n_compounds(self) -> int:
        return len(self.mol)

    @property
    def n_views(self) -> int:
        return self.img.shape[1]


def generate(cfg: SyntheticConfig) -> SyntheticData:
    """Draw a dataset; identical configs give bit-identical arrays."""
    rng = np.random.default_rng(cfg.seed)
    n, v = cfg.n_compounds, cfg.views_per_compound
    centroids = cfg.class_sep * rng.standard_normal((cfg.n_classes, cfg.latent_dim))
    labels = rng.integers(0, cfg.n_classes, size=n)
    z = centroids[labels] + rng.standard_normal((n, cfg.latent_dim))

    A = rng.standard_normal((cfg.latent_dim, cfg.obs_dim_mol)) / math.sqrt(cfg.latent_dim)
    B = rng.standard_normal((cfg.latent_dim, cfg.obs_dim_img)) / math.sqrt(cfg.latent_dim)
    mol = z @ A + cfg.mol_noise_sigma * rng.standard_normal((n, cfg.obs_dim_mol))

    S, Bt, P = cfg.n_sources, cfg.n_batches_per_source, cfg.n_plates_per_batch
    source = rng.integers(0, S, size=(n, v))
    batch = rng.integers(0, Bt, size=(n, v))
    plate = rng.integers(0, P, size=(n, v))
    # offsets live in the span of the class centroids, so they mimic phenotypes
    basis = np.linalg.qr(centroids.T)[0]
    k = basis.shape[1]
    if S <= k:
        # distinct sources shift along mutually orthogonal axes of the same expected length
        axes = np.linalg.qr(rng.standard_normal((k, k)))[0][:, :S].T
        off_src = math.sqrt(k) * axes @ basis.T
    else:
        off_src = rng.standard_normal((S, k)) @ basis.T
    off_bat = rng.standard_normal((S, Bt, k)) @ basis.T
    off_pla = rng.standard_normal((S, Bt, P, k)) @ basis.T
    offset = cfg.batch_offset_sigma * (
        off_src[source] + 0.5 * off_bat[source, batch] + 0.25 * off_pla[source, batch, plate]
    )
    noise = cfg.view_noise_sigma * rng.standard_normal((n, v, cfg.obs_dim_img))
    img = (z[:, None, :] + offset) @ B + noise
    ids = [f"C{i:05d}" for i in range(n)]
    return SyntheticData(mol, img, labels, source, batch, plate, ids)


def split_compounds(n: int, holdout_fraction: float = 0.2, seed: int = 0):
    """Sorted train and held-out compound indices."""
    if not 0 < holdout_fraction < 1:
        raise ConfigError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    perm = np.random.default_rng([seed, 7]).permutation(n)
    k = int(round(holdout_fraction * n))
    return np.sort(perm[k:]), np.sort(perm[:k])


# -- model ---------------------------------------------------------------------


def _init_tower(rng, prefix: str, in_dim: int, widths, out_dim: int) -> dict:
    params = {}
    dims = [in_dim, *widths, out_dim]
    for layer, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"{prefix}.W{layer}"] = rng.standard_normal((a, b)) / math.sqrt(a)
        params[f"{prefix}.b{layer}"] = np.zeros(b)
    return params


class TwoTowerModel:
    """Molecule and image MLP towers with an optional learnable temperature.

    Parameters live in a flat ``dict`` so the optimiser and the
    finite-difference check can walk them uniformly.
    """

    def __init__(self, mol_dim: int, img_dim: int, embed_dim: int = 32, widths=(64, 64),
                 tau: float = 0.07, learn_temperature: bool = False, seed: int = 0):
        rng = np.random.default_rng([seed, 11])
        self.n_layers = len(widths) + 1
        self.params = {
            **_init_tower(rng, "mol", mol_dim, widths, embed_dim),
            **_init_tower(rng, "img", img_dim, widths, embed_dim),
        }
        self.learn_temperature = learn_temperature
        if learn_temperature:
            self.params["log_tau"] = np.array(math.log(tau))
        self.embed_dim = embed_dim

    @property
    def tau(self) -> Optional[float]:
        if not self.learn_temperature:
            return None
        return max(math.exp(float(self.params["log_tau"])), MIN_TAU)

    def _forward(self, prefix: str, x: np.ndarray):
        acts = [x]
        h = x
        for layer in range(self.n_layers):
            h = h @ self.params[f"{prefix}.W{layer}"] + self.params[f"{prefix}.b{layer}"]
            if layer < self.n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def _backward(self, prefix: str, acts, grad_out: np.ndarray, grads: dict):
        g = grad_out
        for layer in reversed(range(self.n_layers)):
            if layer < self.n_layers - 1:
                g = g * (1.0 - acts[layer + 1] ** 2)
            grads[f"{prefix}.W{layer}"] = acts[layer].T @ g
            grads[f"{prefix}.b{layer}"] = g.sum(axis=0)
            g = g @ self.params[f"{prefix}.W{layer}"].T

    def encode(self, prefix: str, x: np.ndarray) -> np.ndarray:
        out, _ = self._forward(prefix, np.asarray(x, dtype=np.float64))
        return out / np.linalg.norm(out, axis=-1, keepdims=True)

    def objective(self, mol_x: np.ndarray, img_x: np.ndarray, kind: str, loss_cfg: LossConfig):
        """Loss and parameter gradients for ``mol_x`` (N, Dm) and ``img_x`` (N, M, Di)."""
        n, m, _ = img_x.shape
        cfg = loss_cfg.replace(tau=self.tau) if self.learn_temperature else loss_cfg
        mol_raw, mol_acts = self._forward("mol", mol_x)
        img_raw, img_acts = self._forward("img", img_x.reshape(n * m, -1))
        mol_u = mol_raw / np.linalg.norm(mol_raw, axis=-1, keepdims=True)
        img_u = (img_raw / np.linalg.norm(img_raw, axis=-1, keepdims=True)).reshape(n, m, -1)
        res = compute_loss(kind, MultiviewBatch(mol_u, img_u), cfg)
        grads = {}
        self._backward("mol", mol_acts, normalize_backward(mol_raw, res.grad_mol), grads)
        self._backward("img", img_acts, normalize_backward(img_raw, res.grad_img.reshape(n * m, -1)), grads)
        if self.learn_temperature:
            clamped = math.exp(float(self.params["log_tau"])) < MIN_TAU
            grads["log_tau"] = np.array(0.0 if clamped else res.grad_log_tau)
        return res.value, grads


# -- optimisation --------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "imm"
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    epochs: int = 200
    warmup_epochs: int = 10
    weight_decay: float = 0.05
    base_lr: float = 2e-3
    batch_size: int = 64
    embed_dim: int = 32
    encoder_widths: tuple = (64, 64)
    views_per_step: int = 3
    learn_temperature: bool = False
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need 0 <= warmup_epochs < epochs")
        if self.weight_decay < 0 or self.base_lr < 0:
            raise ConfigError("weight_decay and base_lr must be >= 0")
        if self.batch_size < 2 or self.embed_dim < 1 or self.views_per_step < 1:
            raise ConfigError("batch_size must be >= 2, embed_dim and views_per_step >= 1")

    @property
    def m(self) -> int:
        return 1 if self.loss_kind == "clip" else self.views_per_step


class AdamW:
    """Adam with decoupled weight decay, ``p -= lr * wd * p`` before the moment step.

    Decay is applied to weight matrices only, not to biases or the temperature.
    """

    def __init__(self, params: dict, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if self.wd and ".W" in k:
                p -= lr * self.wd * p
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def learning_rate(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` followed by cosine decay to zero."""
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    return base_lr * 0.5 * (1 + math.cos(math.pi * (step - warmup_steps) / span))


def sample_views(rng: np.random.Generator, cells: np.ndarray, m: int) -> np.ndarray:
    """Pick ``m`` view indices, one per distinct cell first, then repeats.

    ``cells`` holds a hashable cell id per available view.
    """
    order = rng.permutation(len(cells))
    if m > len(cells):
        raise ConfigError(f"need {m} views per compound, only {len(cells)} available")
    first, rest, seen = [], [], set()
    for k in order:
        (rest if cells[k] in seen else first).append(k)
        seen.add(cells[k])
    return np.array((first + rest)[:m])


@dataclass
class TrainResult:
    model: TwoTowerModel
    loss_curve: list
    lr_curve: list
    tau_curve: list
    wall_time: float


def train(model: TwoTowerModel, data: SyntheticData, compounds: np.ndarray, cfg: TrainConfig,
          augment: Optional[Callable] = None) -> TrainResult:
    """Fit ``model`` on the given compounds; returns per-epoch mean losses.

    ``augment(img_x, rng)`` may transform the sampled view features; it is a
    no-op by default.

    Raises:
        TrainingDivergedError: If a mini-batch loss is not finite.
    """
    m = cfg.m
    if m > data.n_views:
        raise ConfigError(f"{cfg.loss_kind} with M={m} needs {m} views per compound, data has {data.n_views}")
    start = time.perf_counter()
    rng = np.random.default_rng([cfg.seed, 23])
    cells = data.source * 1_000_000 + data.batch
    n_batches = max(1, len(compounds) // cfg.batch_size)
    total = cfg.epochs * n_batches
    warmup = cfg.warmup_epochs * n_batches
    opt = AdamW(model.params, cfg.weight_decay)
    curve, lrs, taus = [], [], []
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(compounds)
        losses = []
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            views = np.stack([sample_views(rng, cells[i], m) for i in idx])
            img_x = data.img[idx[:, None], views]
            if augment is not None:
                img_x = augment(img_x, rng)
            tau = model.tau if model.learn_temperature else cfg.loss_cfg.tau
            try:
                value, grads = model.objective(data.mol[idx], img_x, cfg.loss_kind, cfg.loss_cfg)
            except NonFiniteError as exc:
                raise TrainingDivergedError(epoch, b, tau) from exc
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, b, tau)
            lr = learning_rate(step, total, warmup, cfg.base_lr)
            opt.step(model.params, grads, lr)
            losses.append(value)
            step += 1
        curve.append(float(np.mean(losses)))
        lrs.append(lr)
        taus.append(model.tau if model.learn_temperature else cfg.loss_cfg.tau)
        if epoch % 20 == 0 or epoch == cfg.epochs - 1:
            log.debug("epoch %d loss %.5f lr %.2e", epoch, curve[-1], lr)
    return TrainResult(model, curve, lrs, taus, time.perf_counter() - start)


# -- export --------------------------------------------------------------------


def embed(model: TwoTowerModel, data: SyntheticData, compounds: Optional[np.ndarray] = None):
    """Normalised embeddings for the chosen compounds in both CSV schemas.

    Returns:
        (EmbeddingTable, LabeledEmbeddings): retrieval table with one image row
        per view, and the image views tagged with class and plate provenance.
    """
    if compounds is None:
        compounds = np.arange(data.n_compounds)
    compounds = np.asarray(compounds)
    n, v = len(compounds), data.n_views
    mol = model.encode("mol", data.mol[compounds])
    img = model.encode("img", data.img[compounds].reshape(n * v, -1))
    ids = [data.ids[i] for i in compounds]
    table = EmbeddingTable(ids, mol, np.repeat(np.arange(n), v), img)
    flat = lambda a: a[compounds].reshape(-1)  # noqa: E731
    labeled = LabeledEmbeddings(
        [f"{cid}_v{k}" for cid in ids for k in range(v)],
        img,
        np.array([f"T{c}" for c in np.repeat(data.labels[compounds], v)]),
        np.array([f"S{s}" for s in flat(data.source)]),
        np.array([f"B{b}" for b in flat(data.batch)]),
        np.array([f"P{p}" for p in flat(data.plate)]),
    )
    return table, labeled


def config_dict(synth: SyntheticConfig, cfg: TrainConfig) -> dict:
    train_d = dataclasses.asdict(cfg)
    train_d["encoder_widths"] = list(cfg.encoder_widths)
    return {"synthetic": dataclasses.asdict(synth), "train": train_d}


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ToyRun:
    data: SyntheticData
    train_idx: np.ndarray
    heldout_idx: np.ndarray
    result: TrainResult
    heldout: tuple
    config: dict


def run_toy(synth: SyntheticConfig, cfg: TrainConfig, out_dir=None) -> ToyRun:
    """Generate data, train on the training compounds and embed the held-out ones.

    With ``out_dir`` the loss curve, both embedding CSVs and a metadata JSON
    are written there.
    """
    data = generate(synth)
    train_idx, held_idx = split_compounds(data.n_compounds, cfg.holdout_fraction, synth.seed)
    model = TwoTowerModel(data.mol.shape[1], data.img.shape[2], cfg.embed_dim, cfg.encoder_widths,
                          cfg.loss_cfg.tau, cfg.learn_temperature, cfg.seed)
    result = train(model, data, train_idx, cfg)
    heldout = embed(model, data, held_idx)
    conf = config_dict(synth, cfg)
    run = ToyRun(data, train_idx, held_idx, result, heldout, conf)
    if out_dir is not None:
        write_outputs(run, Path(out_dir))
    return run


def write_outputs(run: ToyRun, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    res = run.result
    with open(out / "loss_curve.csv", "w") as fh:
        fh.write("epoch,loss,lr,tau\n")
        for e, (loss, lr, tau) in enumerate(zip(res.loss_curve, res.lr_curve, res.tau_curve)):
            fh.write(f"{e},{loss!r},{lr!r},{tau!r}\n")
    write_retrieval_csv(out / "retrieval_embeddings.csv", run.heldout[0])
    write_labeled_csv(out / "labeled_embeddings.csv", run.heldout[1])
    meta = {
        "config": run.config,
        "config_hash": config_hash(run.config),
        "seeds": {"data": run.config["synthetic"]["seed"], "train": run.config["train"]["seed"]},
        "wall_time_s": round(res.wall_time, 3),
        "final_loss": res.loss_curve[-1],
        "n_train_compounds": int(len(run.train_idx)),
        "n_heldout_compounds": int(len(run.heldout_idx)),
    }
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
