import csv
import json
import math
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvclip.preprocess import (
    CompressionStats,
    PreprocessConfig,
    WellRecord,
    center_crop_resize,
    decode_png,
    encode_channels,
    nearest_rank,
    report_stats,
    rescale_16_to_8,
    run_pipeline,
    sample_views,
)
from mvclip.preprocess.fixture import WellSpec, make_fixture, small_layout
from mvclip.preprocess.image import RawPlane, encode_png


def bilinear_oracle(src, out_h, out_w):
    """Direct per-pixel bilinear sampling with half-pixel centres."""
    h, w = len(src), len(src[0])
    out = []
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        row = []
        for j in range(out_w):
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            v = (
                src[y0][x0] * (1 - fy) * (1 - fx)
                + src[y0][x1] * (1 - fy) * fx
                + src[y1][x0] * fy * (1 - fx)
                + src[y1][x1] * fy * fx
            )
            row.append(v)
        out.append(row)
    return np.array(out)


# -- rescale ----------------------------------------------------------------


def test_nearest_rank():
    assert nearest_rank(1, 100) == 1
    assert nearest_rank(99, 100) == 99
    assert nearest_rank(99, 1_000_000) == 990_000
    assert nearest_rank(0, 10) == 1
    assert nearest_rank(100, 10) == 10
    assert nearest_rank(50, 3) == 2


@pytest.mark.parametrize("p", [0, 1, 2.5, 50, 99, 100])
def test_nearest_rank_matches_inverted_cdf(p):
    values = np.random.default_rng(0).integers(0, 65536, size=1001)
    rank = nearest_rank(p, values.size)
    assert np.sort(values)[rank - 1] == np.percentile(values, p, method="inverted_cdf")


def test_rescale_ramp():
    ramp = np.arange(65536, dtype=np.uint16).reshape(256, 256)
    res = rescale_16_to_8(ramp)
    lo = np.percentile(ramp, 1, method="inverted_cdf")
    hi = np.percentile(ramp, 99, method="inverted_cdf")
    assert (res.low, res.high) == (lo, hi)
    assert res.pixels.min() == 0 and res.pixels.max() == 255
    assert not res.degenerate
    frac0 = np.mean(res.pixels == 0)
    frac255 = np.mean(res.pixels == 255)
    assert 0.009 <= frac0 <= 0.012
    assert 0.009 <= frac255 <= 0.012
    expected = np.floor(255.0 * np.clip((ramp.astype(float) - lo) / (hi - lo), 0, 1) + 0.5)
    np.testing.assert_array_equal(res.pixels, expected)


def test_rescale_constant_is_degenerate():
    res = rescale_16_to_8(np.full((10, 12), 500, dtype=np.uint16))
    assert res.degenerate
    assert not res.pixels.any()


def test_rescale_hot_pixel():
    rng = np.random.default_rng(5)
    plane = rng.integers(0, 1001, size=(100, 100)).astype(np.uint16)
    plane[17, 42] = 65535
    res = rescale_16_to_8(RawPlane(plane, 0))
    assert res.high <= 1000
    assert res.high == np.percentile(plane, 99, method="inverted_cdf")
    assert res.pixels[17, 42] == 255
    # the bulk keeps its dynamic range instead of being squashed towards 0
    assert np.median(res.pixels) > 100


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), spread=st.integers(1, 65535))
def test_rescale_monotone(seed, spread):
    plane = np.random.default_rng(seed).integers(0, spread + 1, size=(30, 30)).astype(np.uint16)
    out = rescale_16_to_8(plane).pixels.ravel().astype(int)
    order = np.argsort(plane.ravel(), kind="stable")
    assert np.all(np.diff(out[order]) >= 0)


def test_rescale_bad_window():
    with pytest.raises(ValueError):
        rescale_16_to_8(np.zeros((2, 2), np.uint16), 50, 50)


# -- crop / resize ----------------------------------------------------------


def test_constant_plane_resizes_to_constant():
    out = center_crop_resize(np.full((1000, 1000), 173, dtype=np.uint8))
    assert out.pixels.shape == (768, 768)
    assert np.all(out.pixels == 173)
    assert not out.upscaled


def test_resize_pixel_factor():
    assert 1000**2 / 768**2 == pytest.approx(1.695, abs=1e-3)
    assert round(1000**2 / 768**2, 1) == 1.7


def test_checkerboard_matches_oracle():
    board = (np.indices((4, 4)).sum(axis=0) % 2 * 255).astype(np.uint8)
    out = center_crop_resize(board, target=2).pixels
    expected = bilinear_oracle(board.astype(float).tolist(), 2, 2)
    assert np.max(np.abs(out - expected)) <= 1
    assert np.all(out == 128)


@pytest.mark.parametrize("shape,target", [((37, 37), 16), ((64, 64), 100), ((13, 20), 7)])
def test_random_resize_matches_oracle(shape, target):
    src = np.random.default_rng(0).integers(0, 256, size=shape).astype(np.uint8)
    side = min(shape)
    top, left = (shape[0] - side) // 2, (shape[1] - side) // 2
    crop = src[top : top + side, left : left + side]
    expected = bilinear_oracle(crop.astype(float).tolist(), target, target)
    out = center_crop_resize(src, target=target)
    assert np.max(np.abs(out.pixels.astype(float) - expected)) <= 1.0
    assert out.upscaled == (side < target)


def test_crop_odd_margin_goes_bottom_right():
    src = np.zeros((5, 8), dtype=np.uint8)
    src[:, 1:6] = 200  # margin 3: one column on the left, two on the right
    out = center_crop_resize(src, target=5).pixels
    assert np.all(out == 200)


def test_empty_plane_rejected():
    with pytest.raises(ValueError):
        center_crop_resize(np.zeros((0, 4), dtype=np.uint8))


# -- encoding ---------------------------------------------------------------


def test_png_roundtrip(tmp_path):
    plane = np.random.default_rng(0).integers(0, 256, size=(768, 768), dtype=np.uint8)
    (path,) = encode_channels([plane], tmp_path, "x")
    assert np.array_equal(decode_png(path), plane)


def test_constant_png_is_small():
    plane = np.full((768, 768), 77, dtype=np.uint8)
    # measured: 2102 bytes at the default zlib level, 1524 at level 9
    assert len(encode_png(plane)) <= 2200
    assert len(encode_png(plane, level=9)) < 2048


def test_five_channel_names(tmp_path):
    planes = [np.full((8, 8), c, dtype=np.uint8) for c in range(5)]
    paths = encode_channels(planes, tmp_path, "S_B_P_W_v0")
    assert [p.name for p in paths] == [f"S_B_P_W_v0_ch{c}.png" for c in range(5)]
    assert sorted(p.name for p in tmp_path.iterdir()) == [p.name for p in paths]


# -- view sampling ----------------------------------------------------------


def _record(n_views, control=False, well="A01"):
    return WellRecord("s1", "b1", "p1", well, "c", control, tuple(range(n_views)))


def test_sample_all_when_exactly_six():
    for seed in range(20):
        assert sample_views(_record(6), seed).selected_views == tuple(range(6))


def test_sample_control_is_deterministic():
    picks = {sample_views(_record(9, control=True), 42).selected_views for _ in range(5)}
    assert len(picks) == 1
    (pick,) = picks
    assert len(pick) == 3 and len(set(pick)) == 3


def test_sample_depends_on_well_identity_not_order():
    a = sample_views(_record(9, well="A01"), 7).selected_views
    b = sample_views(_record(9, well="A02"), 7).selected_views
    assert sample_views(_record(9, well="A01"), 7).selected_views == a
    assert len(a) == len(b) == 6


def test_sample_view_frequency():
    counts = np.zeros(9)
    for seed in range(10_000):
        sel = sample_views(_record(9), seed).selected_views
        assert len(sel) == 6 and len(set(sel)) == 6
        counts[list(sel)] += 1
    np.testing.assert_allclose(counts / 10_000, 6 / 9, atol=0.02)


def test_sample_caps_at_available():
    assert len(sample_views(_record(2), 0).selected_views) == 2
    assert len(sample_views(_record(2, control=True), 0).selected_views) == 2


# -- pipeline ---------------------------------------------------------------

FAST = PreprocessConfig(target_size=96)


@pytest.fixture(scope="module")
def small_tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("tree")
    return make_fixture(root / "in", small_layout(), shape=(128, 128), seed=3)


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_pipeline_small_fixture(small_tree, tmp_path):
    m = run_pipeline(small_tree, tmp_path / "out", seed=1, config=FAST)
    assert len(m.records) == 4
    for r in m.records:
        assert len(r.selected_views) == min(3 if r.is_control else 6, r.available_views)
    assert m.stats.factor_bitdepth == 2.0
    assert not m.skipped
    with open(tmp_path / "out" / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5 * sum(len(r.selected_views) for r in m.records)
    keys = {(r["source"], r["batch"], r["plate"], r["well"], r["view"], r["channel"]) for r in rows}
    assert len(keys) == len(rows)
    for r in rows:
        assert (tmp_path / "out" / r["path"]).exists()
        assert r["path"].endswith(f"{r['source']}_{r['batch']}_{r['plate']}_{r['well']}_v{r['view']}_ch{r['channel']}.png")
    header = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert header["seed"] == 1 and header["pipeline_version"]
    assert header["stats"]["factor_bitdepth"] == 2.0


def test_pipeline_worker_count_invariant(small_tree, tmp_path):
    run_pipeline(small_tree, tmp_path / "w1", seed=9, workers=1, config=FAST)
    run_pipeline(small_tree, tmp_path / "w8", seed=9, workers=8, config=FAST)
    assert _tree_bytes(tmp_path / "w1") == _tree_bytes(tmp_path / "w8")


def test_pipeline_idempotent_and_repairs(small_tree, tmp_path):
    out = tmp_path / "out"
    first = run_pipeline(small_tree, out, seed=2, config=FAST)
    before = _tree_bytes(out)
    second = run_pipeline(small_tree, out, seed=2, config=FAST)
    assert second.converted == 0
    assert second.reused == first.converted
    assert _tree_bytes(out) == before

    victim = out / first.rows[0]["path"]
    victim.write_bytes(b"not a png")
    third = run_pipeline(small_tree, out, seed=2, config=FAST)
    assert third.converted == 1
    assert _tree_bytes(out) == before


def test_pipeline_skips_unreadable(small_tree, tmp_path):
    tree = tmp_path / "in"
    shutil.copytree(small_tree, tree)
    m0 = run_pipeline(tree, tmp_path / "ref", seed=4, config=FAST)
    rec = m0.records[0]
    bad = tree / rec.source / rec.batch / rec.plate / rec.well / f"v{rec.selected_views[0]}" / "ch2.tif"
    bad.write_bytes(b"garbage")
    m = run_pipeline(tree, tmp_path / "out", seed=4, config=FAST)
    assert len(m.skipped) == 1
    assert m.skipped[0]["view"] == rec.selected_views[0]
    assert len(m.rows) == len(m0.rows) - 5


def test_pipeline_excludes_sources(small_tree, tmp_path):
    cfg = PreprocessConfig(target_size=96, excluded_sources=["source_1"])
    m = run_pipeline(small_tree, tmp_path / "out", seed=0, config=cfg)
    assert {r.source for r in m.records} == {"source_2"}


def test_pipeline_flags_degenerate_and_upscaled(tmp_path):
    root = make_fixture(tmp_path / "in", [WellSpec("s", "b", "p", "w", 1)], shape=(32, 32))
    for c in range(5):
        from mvclip.preprocess.image import write_tiff16

        if c == 3:
            write_tiff16(root / "s/b/p/w/v0/ch3.tif", np.full((32, 32), 9, np.uint16))
    m = run_pipeline(root, tmp_path / "out", config=PreprocessConfig(target_size=64))
    flags = {r["channel"]: (r["degenerate"], r["upscaled"]) for r in m.rows}
    assert flags[3] == (1, 1)
    assert flags[0] == (0, 1)


def test_missing_input(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_pipeline(tmp_path / "nope", tmp_path / "out")


def test_config_rejects_unknown_keys():
    from mvclip.errors import ConfigError

    with pytest.raises(ConfigError):
        PreprocessConfig.from_dict({"seed": 1, "colour": "red"})


# -- stats report -----------------------------------------------------------


def test_report_cumulative_is_product(small_tree, tmp_path):
    m = run_pipeline(small_tree, tmp_path / "out", seed=0, config=FAST)
    assert m.stats.cumulative == pytest.approx(m.stats.product, rel=0.01)
    text, table = report_stats(m)
    assert "cumulative" in text
    rows = list(csv.DictReader(table.splitlines()))
    assert [r["stage"] for r in rows] == ["view_sampling", "bit_depth", "crop_resize", "png_encoding", "cumulative"]
    assert (tmp_path / "out" / "stats.csv").read_text() == table


def test_report_empty():
    text, table = report_stats(CompressionStats())
    rows = list(csv.DictReader(table.splitlines()))
    assert rows[-1]["bytes_after"] == "0"
    assert all(float(r["factor"]) > 0 for r in rows)


def test_report_full_scale_factors():
    stats = CompressionStats(bytes_in=84.7e12, bytes_out=7.4e12)
    assert stats.cumulative == pytest.approx(11.4, abs=0.1)
    rows = list(csv.DictReader(report_stats(stats)[1].splitlines()))
    assert float(rows[-1]["factor"]) == pytest.approx(11.45, abs=0.01)
