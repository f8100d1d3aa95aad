"""CSV schemas shared by the training harness and the evaluation modules.

Retrieval table: ``id, modality, e0 .. e{d-1}`` with modality ``mol`` or
``img``; image rows carry the id of their compound.

Labeled table: ``id, label, source, batch, plate, e0 .. e{d-1}``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class EmbeddingTable:
    """Molecule and image embeddings keyed by compound id.

    ``img_owner[r]`` is the row of ``mol`` that image ``r`` belongs to.
    """

    mol_ids: list
    mol: np.ndarray
    img_owner: np.ndarray
    img: np.ndarray

    def __post_init__(self):
        self.mol = np.asarray(self.mol, dtype=np.float64)
        self.img = np.asarray(self.img, dtype=np.float64)
        self.img_owner = np.asarray(self.img_owner, dtype=np.intp)
        if self.mol.ndim != 2 or self.img.ndim != 2 or self.mol.shape[1] != self.img.shape[1]:
            raise ValueError(f"embedding shapes disagree: mol {self.mol.shape}, img {self.img.shape}")
        if len(self.mol_ids) != len(self.mol) or len(self.img_owner) != len(self.img):
            raise ValueError("id columns do not match embedding rows")
        if len(self.img_owner) and (self.img_owner.min() < 0 or self.img_owner.max() >= len(self.mol)):
            raise ValueError("image rows reference unknown compounds")

    @classmethod
    def paired(cls, mol: np.ndarray, img: np.ndarray) -> "EmbeddingTable":
        """One image per compound, row i of ``img`` paired with row i of ``mol``."""
        n = len(mol)
        return cls([str(i) for i in range(n)], mol, np.arange(n), img)


@dataclass
class LabeledEmbeddings:
    ids: list
    vectors: np.ndarray
    labels: np.ndarray
    source: np.ndarray
    batch: np.ndarray
    plate: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        n = len(self.vectors)
        for name in ("labels", "source", "batch", "plate"):
            col = np.asarray(getattr(self, name))
            if len(col) != n:
                raise ValueError(f"column {name!r} has {len(col)} rows, expected {n}")
            setattr(self, name, col)
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("labeled embeddings contain non-finite values")

    def __len__(self):
        return len(self.vectors)

    def subset(self, idx) -> "LabeledEmbeddings":
        idx = np.asarray(idx)
        return LabeledEmbeddings(
            [self.ids[i] for i in idx], self.vectors[idx], self.labels[idx],
            self.source[idx], self.batch[idx], self.plate[idx],
        )


def _floats(row, start, path, lineno):
    try:
        return [float(v) for v in row[start:]]
    except ValueError as exc:
        raise ValueError(f"{path}:{lineno}: bad embedding value ({exc})") from None


def _embedding_header(header, fixed, path):
    if header is None or header[: len(fixed)] != fixed:
        raise ValueError(f"{path}: header must start with {','.join(fixed)}")
    dims = header[len(fixed):]
    if not dims or dims != [f"e{i}" for i in range(len(dims))]:
        raise ValueError(f"{path}: embedding columns must be e0..e{{d-1}}")
    return len(dims)


def write_retrieval_csv(path, table: EmbeddingTable) -> None:
    d = table.mol.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "modality", *[f"e{i}" for i in range(d)]])
        for cid, vec in zip(table.mol_ids, table.mol):
            w.writerow([cid, "mol", *map(repr, vec.tolist())])
        for owner, vec in zip(table.img_owner, table.img):
            w.writerow([table.mol_ids[owner], "img", *map(repr, vec.tolist())])


def read_retrieval_csv(path) -> EmbeddingTable:
    """Parse a retrieval table. Raises ``ValueError`` on any malformed row."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        d = _embedding_header(next(reader, None), ["id", "modality"], path)
        mol_ids, mol, img_ids, img = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 2:
                raise ValueError(f"{path}:{lineno}: expected {d + 2} fields, got {len(row)}")
            vec = _floats(row, 2, path, lineno)
            if row[1] == "mol":
                mol_ids.append(row[0])
                mol.append(vec)
            elif row[1] == "img":
                img_ids.append(row[0])
                img.append(vec)
            else:
                raise ValueError(f"{path}:{lineno}: unknown modality {row[1]!r}")
    index = {cid: i for i, cid in enumerate(mol_ids)}
    if len(index) != len(mol_ids):
        raise ValueError(f"{path}: duplicate molecule ids")
    missing = sorted(set(img_ids) - set(index))
    if missing:
        raise ValueError(f"{path}: image rows without a molecule row, e.g. {missing[0]!r}")
    return EmbeddingTable(
        mol_ids,
        np.array(mol, dtype=np.float64).reshape(len(mol), d),
        np.array([index[c] for c in img_ids], dtype=np.intp),
        np.array(img, dtype=np.float64).reshape(len(img), d),
    )


def write_labeled_csv(path, data: LabeledEmbeddings) -> None:
    d = data.vectors.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "source", "batch", "plate", *[f"e{i}" for i in range(d)]])
        for i in range(len(data)):
            w.writerow([data.ids[i], data.labels[i], data.source[i], data.batch[i], data.plate[i],
                        *map(repr, data.vectors[i].tolist())])


def read_labeled_csv(path) -> LabeledEmbeddings:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        fixed = ["id", "label", "source", "batch", "plate"]
        d = _embedding_header(next(reader, None), fixed, path)
        cols = [[] for _ in fixed]
        vecs = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + len(fixed):
                raise ValueError(f"{path}:{lineno}: expected {d + len(fixed)} fields, got {len(row)}")
            for c, v in zip(cols, row):
                c.append(v)
            vecs.append(_floats(row, len(fixed), path, lineno))
    ids, labels, source, batch, plate = cols
    return LabeledEmbeddings(
        ids, np.array(vecs, dtype=np.float64).reshape(len(vecs), d),
        np.array(labels), np.array(source), np.array(batch), np.array(plate),
    )
