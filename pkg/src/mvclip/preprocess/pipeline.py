"""Input discovery, seeded view sampling, parallel conversion and the manifest.

Input tree::

    {input_root}/{source}/{batch}/{plate}/{well}/v{view}/ch{0..4}.tif
    {input_root}/{source}/{batch}/{plate}/{well}/well.json    (optional)

``well.json`` holds ``{"compound_id": ..., "is_control": ...}``; without it the
well is a treatment well whose compound id is the well name.

Output tree::

    {output_root}/images/{source}/{source}_{batch}_{plate}_{well}_v{view}_ch{c}.png
    {output_root}/manifest.csv     one row per well-view-channel
    {output_root}/manifest.json    seed, version, config, stats, skipped views
    {output_root}/stats.csv        per-stage reduction factors
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from mvclip.errors import ConfigError
from mvclip.preprocess.image import (
    N_CHANNELS,
    channel_filename,
    center_crop_resize,
    decode_png,
    encode_channels,
    read_tiff16,
    rescale_16_to_8,
    tiff_shape,
)

log = logging.getLogger(__name__)

PIPELINE_VERSION = "1.0"
MANIFEST_COLUMNS = [
    "source", "batch", "plate", "well", "compound_id", "is_control",
    "view", "channel", "path", "degenerate", "upscaled",
]


@dataclass(frozen=True)
class PreprocessConfig:
    seed: int = 0
    treatment_views: int = 6
    control_views: int = 3
    target_size: int = 768
    p_low: float = 1.0
    p_high: float = 99.0
    excluded_sources: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "excluded_sources", tuple(sorted(map(str, self.excluded_sources))))
        if self.treatment_views < 1 or self.control_views < 1:
            raise ConfigError("view counts must be >= 1")
        if self.target_size < 1:
            raise ConfigError("target_size must be >= 1")
        if not 0 <= self.p_low < self.p_high <= 100:
            raise ConfigError(f"need 0 <= p_low < p_high <= 100, got {self.p_low}, {self.p_high}")

    @classmethod
    def from_dict(cls, values: dict) -> "PreprocessConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown preprocess config keys: {unknown}")
        return cls(**values)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["excluded_sources"] = list(self.excluded_sources)
        return d

    def digest(self) -> str:
        # seed excluded: selections differ per seed anyway, files are checked individually
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class WellRecord:
    """One well with its available and selected fields of view."""

    source: str
    batch: str
    plate: str
    well: str
    compound_id: str
    is_control: bool
    view_indices: tuple
    selected_views: tuple = ()
    file_paths: dict = field(default_factory=dict)
    well_dir: Optional[Path] = None

    @property
    def available_views(self) -> int:
        return len(self.view_indices)

    @property
    def key(self) -> tuple:
        return (self.source, self.batch, self.plate, self.well)

    @property
    def stem(self) -> str:
        return "_".join(self.key)


@dataclass
class CompressionStats:
    """Byte counts and per-stage reduction factors.

    Stages chain as ``raw_all -> raw_selected -> raw_selected/2 -> resized ->
    bytes_out`` so the four factors multiply to ``raw_all / bytes_out``.
    ``bytes_in`` is the on-disk TIFF size of every available view, so
    ``bytes_in / bytes_out`` differs from that product only by TIFF overhead.
    """

    bytes_in: int = 0
    bytes_out: int = 0
    raw_bytes_all: int = 0
    raw_bytes_selected: int = 0
    resized_bytes: int = 0
    factor_bitdepth: float = 2.0
    factor_encoding: float = 1.0
    factor_resize: float = 1.0
    factor_sampling: float = 1.0

    @property
    def cumulative(self) -> float:
        return self.bytes_in / self.bytes_out if self.bytes_out else 1.0

    @property
    def product(self) -> float:
        return self.factor_sampling * self.factor_bitdepth * self.factor_resize * self.factor_encoding

    def finalize(self) -> "CompressionStats":
        def ratio(a, b):
            return a / b if b else 1.0

        self.factor_sampling = ratio(self.raw_bytes_all, self.raw_bytes_selected)
        self.factor_resize = ratio(self.raw_bytes_selected / 2, self.resized_bytes)
        self.factor_encoding = ratio(self.resized_bytes, self.bytes_out)
        return self


@dataclass
class Manifest:
    records: list
    seed: int
    pipeline_version: str = PIPELINE_VERSION
    stats: CompressionStats = field(default_factory=CompressionStats)
    skipped: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    config: Optional[PreprocessConfig] = None
    # run bookkeeping, not persisted
    converted: int = field(default=0, compare=False)
    reused: int = field(default=0, compare=False)


# -- discovery and sampling ----------------------------------------------------


def _subdirs(path: Path):
    return sorted(p for p in path.iterdir() if p.is_dir())


def _view_index(name: str) -> Optional[int]:
    if name.startswith("v") and name[1:].isdigit():
        return int(name[1:])
    return None


def discover(input_root, excluded_sources=()) -> list[WellRecord]:
    """Walk the input tree and build one record per well, in sorted order."""
    root = Path(input_root)
    if not root.is_dir():
        raise FileNotFoundError(f"input directory not found: {root}")
    excluded = set(map(str, excluded_sources))
    records = []
    for src in _subdirs(root):
        if src.name in excluded:
            continue
        for batch in _subdirs(src):
            for plate in _subdirs(batch):
                for well in _subdirs(plate):
                    views = {}
                    for vdir in _subdirs(well):
                        idx = _view_index(vdir.name)
                        if idx is not None:
                            views[idx] = [vdir / f"ch{c}.tif" for c in range(N_CHANNELS)]
                    if not views:
                        continue
                    meta = {}
                    meta_path = well / "well.json"
                    if meta_path.exists():
                        meta = json.loads(meta_path.read_text())
                    is_control = bool(meta.get("is_control", False))
                    records.append(
                        WellRecord(
                            source=src.name,
                            batch=batch.name,
                            plate=plate.name,
                            well=well.name,
                            compound_id=str(meta.get("compound_id", "CONTROL" if is_control else well.name)),
                            is_control=is_control,
                            view_indices=tuple(sorted(views)),
                            file_paths=views,
                            well_dir=well,
                        )
                    )
    return records


def _well_key(seed: int, record: WellRecord) -> np.ndarray:
    text = "\x1f".join([str(int(seed)), *record.key]).encode()
    digest = hashlib.blake2b(text, digest_size=16).digest()
    return np.frombuffer(digest, dtype="<u8").copy()


def sample_views(
    record: WellRecord, seed: int, treatment_views: int = 6, control_views: int = 3
) -> WellRecord:
    """Pick the fields of view to keep for a well.

    Uniform sampling without replacement; 6 views for treatment wells and 3 for
    controls, or all of them when fewer are available. The generator is a
    Philox stream keyed by (seed, source, batch, plate, well), so the choice
    does not depend on iteration order or on the number of workers.
    """
    want = control_views if record.is_control else treatment_views
    count = min(want, record.available_views)
    rng = np.random.Generator(np.random.Philox(key=_well_key(seed, record)))
    chosen = rng.choice(np.array(record.view_indices), size=count, replace=False)
    return dataclasses.replace(record, selected_views=tuple(sorted(int(v) for v in chosen)))


# -- conversion ----------------------------------------------------------------


def output_path(output_root: Path, record: WellRecord, view: int, channel: int) -> Path:
    return output_root / "images" / record.source / channel_filename(f"{record.stem}_v{view}", channel)


@dataclass
class _Task:
    record: WellRecord
    view: int
    reuse: Optional[list]  # previous manifest rows for all channels, if outputs are valid


@dataclass
class _ViewResult:
    record: WellRecord
    view: int
    rows: list = field(default_factory=list)
    raw_bytes: int = 0
    png_bytes: int = 0
    converted: bool = False
    error: Optional[str] = None


def _convert_view(task: _Task, output_root: Path, cfg: PreprocessConfig) -> _ViewResult:
    rec, view = task.record, task.view
    res = _ViewResult(rec, view)
    paths = rec.file_paths[view]
    try:
        shapes = [tiff_shape(p) for p in paths]
        if task.reuse is not None:
            rows = task.reuse
        else:
            planes, rows = [], []
            for c, p in enumerate(paths):
                scaled = rescale_16_to_8(read_tiff16(p), cfg.p_low, cfg.p_high)
                out = center_crop_resize(scaled.pixels, cfg.target_size)
                out.channel_index = c
                planes.append(out)
                rows.append((scaled.degenerate, out.upscaled))
            encode_channels(planes, output_path(output_root, rec, view, 0).parent, f"{rec.stem}_v{view}")
            res.converted = True
    except Exception as exc:  # unreadable or corrupt input: skip this view, keep going
        res.error = f"{type(exc).__name__}: {exc}"
        return res
    res.raw_bytes = sum(2 * h * w for h, w in shapes)
    for c, (degenerate, upscaled) in enumerate(rows):
        path = output_path(output_root, rec, view, c)
        res.png_bytes += path.stat().st_size
        res.rows.append(
            {
                "source": rec.source,
                "batch": rec.batch,
                "plate": rec.plate,
                "well": rec.well,
                "compound_id": rec.compound_id,
                "is_control": int(rec.is_control),
                "view": view,
                "channel": c,
                "path": path.relative_to(output_root).as_posix(),
                "degenerate": int(degenerate),
                "upscaled": int(upscaled),
            }
        )
    return res


def _previous_rows(output_root: Path, cfg: PreprocessConfig) -> dict:
    header = output_root / "manifest.json"
    table = output_root / "manifest.csv"
    if not (header.exists() and table.exists()):
        return {}
    try:
        meta = json.loads(header.read_text())
        if meta.get("config_digest") != cfg.digest():
            return {}
        with open(table, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except (OSError, ValueError):
        return {}
    prev = {}
    for r in rows:
        key = (r["source"], r["batch"], r["plate"], r["well"], int(r["view"]))
        prev.setdefault(key, {})[int(r["channel"])] = (bool(int(r["degenerate"])), bool(int(r["upscaled"])))
    return prev


def _valid_outputs(output_root: Path, rec: WellRecord, view: int, target: int) -> bool:
    for c in range(N_CHANNELS):
        path = output_path(output_root, rec, view, c)
        if not path.exists():
            return False
        try:
            if decode_png(path).shape != (target, target):
                return False
        except Exception:
            return False
    return True


def _input_bytes(rec: WellRecord) -> tuple[int, int]:
    """On-disk bytes and raw 16-bit pixel bytes over every available view."""
    on_disk = raw = 0
    for view in rec.view_indices:
        for p in rec.file_paths[view]:
            try:
                on_disk += os.path.getsize(p)
                h, w = tiff_shape(p)
                raw += 2 * h * w
            except Exception:
                continue
    return on_disk, raw


def run_pipeline(input_root, output_root, seed: Optional[int] = None, workers: int = 1,
                 config: Optional[PreprocessConfig] = None) -> Manifest:
    """Run discovery, sampling, conversion and write the manifest and stats.

    Already-valid outputs from a previous run with the same configuration are
    reused instead of converted. Views with unreadable inputs are listed under
    ``skipped`` and the run continues.
    """
    cfg = config or PreprocessConfig()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    output_root = Path(output_root)
    output_root.mkdir(parents=True, exist_ok=True)

    records = [
        sample_views(r, cfg.seed, cfg.treatment_views, cfg.control_views)
        for r in discover(input_root, cfg.excluded_sources)
    ]
    previous = _previous_rows(output_root, cfg)
    tasks = []
    for rec in records:
        for view in rec.selected_views:
            prev = previous.get((*rec.key, view))
            reuse = None
            if prev is not None and len(prev) == N_CHANNELS and _valid_outputs(output_root, rec, view, cfg.target_size):
                reuse = [prev[c] for c in range(N_CHANNELS)]
            tasks.append(_Task(rec, view, reuse))

    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
        results = list(pool.map(lambda t: _convert_view(t, output_root, cfg), tasks))
        input_sizes = list(pool.map(_input_bytes, records))

    stats = CompressionStats()
    for on_disk, raw in input_sizes:
        stats.bytes_in += on_disk
        stats.raw_bytes_all += raw
    manifest = Manifest(records=records, seed=cfg.seed, stats=stats, config=cfg)
    for res in results:
        if res.error is not None:
            manifest.skipped.append(
                {"source": res.record.source, "batch": res.record.batch, "plate": res.record.plate,
                 "well": res.record.well, "view": res.view, "reason": res.error}
            )
            continue
        manifest.rows.extend(res.rows)
        stats.raw_bytes_selected += res.raw_bytes
        stats.resized_bytes += N_CHANNELS * cfg.target_size**2
        stats.bytes_out += res.png_bytes
        manifest.converted += int(res.converted)
        manifest.reused += int(not res.converted)
    stats.finalize()

    write_manifest(manifest, output_root)
    (output_root / "stats.csv").write_text(report_stats(manifest)[1])
    log.info("%d converted, %d reused, %d skipped", manifest.converted, manifest.reused, len(manifest.skipped))
    return manifest


# -- manifest and report -------------------------------------------------------


def write_manifest(manifest: Manifest, output_root) -> None:
    output_root = Path(output_root)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(manifest.rows)
    (output_root / "manifest.csv").write_text(buf.getvalue())

    cfg = manifest.config or PreprocessConfig(seed=manifest.seed)
    header = {
        "pipeline_version": manifest.pipeline_version,
        "seed": manifest.seed,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "n_wells": len(manifest.records),
        "wells": [
            {"source": r.source, "batch": r.batch, "plate": r.plate, "well": r.well,
             "compound_id": r.compound_id, "is_control": r.is_control,
             "available_views": r.available_views, "selected_views": list(r.selected_views)}
            for r in manifest.records
        ],
        "stats": stats_dict(manifest.stats),
        "skipped": manifest.skipped,
    }
    (output_root / "manifest.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def stats_dict(stats: CompressionStats) -> dict:
    d = dataclasses.asdict(stats)
    d["cumulative"] = stats.cumulative
    return d


def report_stats(manifest_or_stats) -> tuple[str, str]:
    """Human-readable table and CSV of the per-stage reduction factors.

    Accepts a :class:`Manifest` or a bare :class:`CompressionStats`.
    """
    stats = getattr(manifest_or_stats, "stats", manifest_or_stats)
    rows = [
        ("view_sampling", stats.raw_bytes_all, stats.raw_bytes_selected, stats.factor_sampling),
        ("bit_depth", stats.raw_bytes_selected, stats.raw_bytes_selected // 2, stats.factor_bitdepth),
        ("crop_resize", stats.raw_bytes_selected // 2, stats.resized_bytes, stats.factor_resize),
        ("png_encoding", stats.resized_bytes, stats.bytes_out, stats.factor_encoding),
        ("cumulative", stats.bytes_in, stats.bytes_out, stats.cumulative),
    ]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage", "bytes_before", "bytes_after", "factor"])
    for name, before, after, factor in rows:
        writer.writerow([name, before, after, f"{factor:.6f}"])

    lines = [f"{'stage':<14}{'bytes_before':>18}{'bytes_after':>18}{'factor':>10}"]
    for name, before, after, factor in rows:
        lines.append(f"{name:<14}{before:>18}{after:>18}{factor:>10.3f}")
    lines.append(f"{'stage product':<14}{'':>36}{stats.product:>10.3f}")
    return "\n".join(lines) + "\n", buf.getvalue()
