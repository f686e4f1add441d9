import itertools
import json
import math

import numpy as np
import pytest
from scipy.linalg import sqrtm

from cbil.cluster import ClusterModel
from cbil.metrics import (MetricReport, apd, export_embedding, fid, frechet_distance, js_divergence,
                          js_from_histograms, task_return)


def test_fid_one_dimensional_cases():
    assert frechet_distance([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(1.0, abs=1e-8)
    assert frechet_distance([0.0], [[4.0]], [0.0], [[1.0]]) == pytest.approx(1.0, abs=1e-8)


def test_fid_identical_and_symmetric():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((50, 5)), 2 + rng.standard_normal((40, 5)) @ rng.standard_normal((5, 5))
    assert fid(a, a) <= 1e-6
    assert abs(fid(a, b) - fid(b, a)) <= 1e-6
    assert fid(a, b) >= 0


def test_fid_matches_sqrtm_oracle():
    rng = np.random.default_rng(1)
    for dim in (1, 2, 3):
        for _ in range(5):
            a = rng.standard_normal((30, dim)) @ rng.standard_normal((dim, dim))
            b = rng.standard_normal((25, dim)) @ rng.standard_normal((dim, dim)) + rng.standard_normal(dim)
            ca, cb = np.atleast_2d(np.cov(a, rowvar=False)), np.atleast_2d(np.cov(b, rowvar=False))
            oracle = (np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(ca) + np.trace(cb)
                      - 2 * np.trace(sqrtm(ca @ cb).real))
            assert fid(a, b) == pytest.approx(oracle, abs=1e-8)


def test_fid_errors():
    with pytest.raises(ValueError):
        fid(np.zeros((5, 2)), np.zeros((5, 3)))
    with pytest.raises(ValueError):
        fid(np.zeros((1, 2)), np.zeros((5, 2)))
    with pytest.raises(ValueError):
        frechet_distance([0, 0], [[1, 0], [0, -1]], [0, 0], np.eye(2))


def test_js_histogram_cases():
    assert js_from_histograms([0.5, 0.5], [1.0, 0.0]) == pytest.approx(0.3113, abs=1e-4)
    assert js_from_histograms([1, 0], [0, 1]) == pytest.approx(1.0)
    assert js_from_histograms([3, 1], [3, 1]) == 0.0
    p, q = [0.2, 0.3, 0.5], [0.6, 0.1, 0.3]
    assert js_from_histograms(p, q) == pytest.approx(js_from_histograms(q, p), abs=1e-12)


def test_js_over_clusters():
    anchors = np.array([[0.0, 0.0], [10.0, 0.0]])
    m = ClusterModel(2, np.zeros((2, 2)), np.array([0.5, 0.5]), anchors, np.array([0, 1]), "pca")
    a = np.zeros((100, 2))
    b = np.tile([10.0, 0.0], (100, 1))
    assert js_divergence(a, a, m) == 0.0
    js = js_divergence(a, b, m)
    # hand oracle for add-one smoothing: P=(101,1)/102, Q=(1,101)/102
    p = np.array([101.0, 1.0]) / 102
    q = p[::-1]
    mm = 0.5 * (p + q)
    oracle = 0.5 * np.sum(p * np.log2(p / mm)) + 0.5 * np.sum(q * np.log2(q / mm))
    assert js == pytest.approx(oracle, abs=1e-12) and js >= 0.9
    assert js_divergence(a, b, m, smoothing=0.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        js_divergence(np.zeros((0, 2)), b, m)


def test_apd_cases():
    rng = np.random.default_rng(2)
    c = rng.standard_normal((6, 7))
    assert apd([c, c, c]) == 0.0
    for l in (1, 4, 9):
        a = np.zeros((l, 7))
        b = a.copy()
        b[:, 0] = 1.0
        assert apd([a, b]) == pytest.approx(math.sqrt(l), abs=1e-9)
    clips = [rng.standard_normal((5, 7)) for _ in range(4)]
    ref = apd(clips)
    for perm in itertools.permutations(range(4)):
        assert apd([clips[i] for i in perm]) == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ValueError):
        apd([np.zeros((5, 7)), np.zeros((4, 7))])
    with pytest.raises(ValueError):
        apd([np.zeros((5, 7))])


def test_task_return_cases():
    assert task_return(np.ones((10, 3)), np.zeros((10, 3), bool)) == (1.0, 0.0)
    assert task_return(np.zeros((10, 3)), np.zeros((10, 3), bool))[0] == 0.0
    r = np.array([[1.0], [0.0], [0.5], [0.5]])
    d = np.array([[False], [True], [False], [False]])
    mean, std = task_return(r, d)
    assert mean == pytest.approx(0.5) and std == pytest.approx(0.0)
    with pytest.raises(ValueError):
        task_return(np.zeros((0, 2)), np.zeros((0, 2)))


def test_export_embedding(tmp_path):
    rng = np.random.default_rng(3)
    lat = rng.standard_normal((12, 100))
    labels = np.arange(12) % 3
    pts = export_embedding(tmp_path / "e.csv", lat, labels, "pca")
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert len(rows) == 13 and pts.shape == (12, 2)
    assert [int(r.split(",")[2]) for r in rows[1:]] == labels.tolist()
    again = export_embedding(tmp_path / "f.csv", lat, labels, "pca")
    assert np.array_equal(pts, again)


def test_metric_report_json():
    rep = MetricReport(fid=1.0, js=0.2, task_return_mean=0.5, config={"seed": 1})
    data = json.loads(rep.to_json())
    assert data["fid"] == 1.0 and data["config"] == {"seed": 1} and data["apd_mean"] is None
