import math

import numpy as np
import pytest

from udet.data.phantom import ellipse_mask
from udet.metrics import MetricsRecord
from udet.report import (GT_LEVEL, IMAGE_MAX, PRED_LEVEL, contour, overlay, read_ppm, stratified_table,
                         write_aggregate_csv, write_per_sample_csv, write_ppm, write_stratified_csv)


def test_contour_of_a_square():
    m = np.zeros((6, 6), bool)
    m[1:5, 1:5] = True
    c = contour(m)
    assert c.sum() == 12
    assert not c[2:4, 2:4].any()


def test_overlay_levels(rng):
    img = rng.random((32, 32))
    gt = ellipse_mask(32, 12, 12, 5, 5)
    pred = ellipse_mask(32, 20, 20, 5, 5)
    out = overlay(img, pred, gt)
    assert out.dtype == np.uint8
    assert np.all(out[contour(pred)] == PRED_LEVEL)
    assert np.all(out[contour(gt) & ~contour(pred)] == GT_LEVEL)
    rest = ~(contour(gt) | contour(pred))
    assert out[rest].max() <= IMAGE_MAX


def test_ppm_round_trip(tmp_path, rng):
    gray = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    write_ppm(tmp_path / "o.ppm", gray)
    raw = (tmp_path / "o.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n")
    back = read_ppm(tmp_path / "o.ppm")
    assert back.shape == (5, 7, 3)
    for ch in range(3):
        assert np.array_equal(back[:, :, ch], gray)


def test_stratified_groups():
    recs = [MetricsRecord(0.9, 1, 1), MetricsRecord(0.5, 1, 1), MetricsRecord(0.7, 1, 1),
            MetricsRecord(math.nan, math.nan, math.nan)]
    meta = [{"attached": True, "diameter_mm": 4.0}, {"attached": False, "diameter_mm": 8.0},
            {"attached": False, "diameter_mm": 6.0}, {"attached": True, "diameter_mm": 3.0}]
    rows = {name: (n, v) for name, n, v in stratified_table(recs, meta)}
    assert rows["attached"] == (1, 0.9)
    assert rows["non_attached"][0] == 2 and rows["non_attached"][1] == pytest.approx(0.6)
    assert rows["diameter_lt_6mm"] == (1, 0.9)
    assert rows["diameter_ge_6mm"][0] == 2


def test_csv_writers(tmp_path):
    recs = [MetricsRecord(1.0, 1.0, 1.0, tag="a"), MetricsRecord(0.5, 0.25, 1.0, tag="b")]
    write_per_sample_csv(tmp_path / "p.csv", recs)
    assert (tmp_path / "p.csv").read_text().splitlines() == ["id,dsc,sen,ppv", "a,1.0,1.0,1.0", "b,0.5,0.25,1.0"]
    agg = write_aggregate_csv(tmp_path / "a.csv", recs)
    assert agg["dsc"] == 0.75
    assert (tmp_path / "a.csv").read_text().splitlines()[1] == "dsc,0.75,0.25,2"
    write_stratified_csv(tmp_path / "s.csv", [("attached", 0, math.nan)])
    assert (tmp_path / "s.csv").read_text().splitlines()[1] == "attached,0,nan"
