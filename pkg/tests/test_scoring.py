import hashlib

import numpy as np
import pytest
import torch
from torch import nn

from hetnet.model import build_model
from hetnet.scoring import (
    AnomalyMap,
    aggregate_maps,
    denormalize,
    export_heatmap,
    finalize,
    normalize_map,
    render_overlay,
    score,
)
from hetnet.teacher import TeacherPair
from oracles import bilinear_half_pixel


class TeacherEcho(nn.Module):
    """Student double that returns the teacher's own local features."""

    def forward(self, local, global_):
        return {k: v.clone() for k, v in local.items()}


def test_identity_double_gives_zero_map(make_cfg):
    pair = TeacherPair.from_config(make_cfg())
    for sigma in (None, 4.0):
        results = score(TeacherEcho(), pair, torch.randn(3, 3, 64, 64), sigma)
        for r in results:
            assert r.map.shape == (64, 64)
            assert np.all(r.map == 0) and r.image_score == 0


def test_constant_layer_map_aggregation():
    maps = {1: torch.full((1, 8, 8), 0.5), 2: torch.zeros(1, 4, 4), 3: torch.zeros(1, 2, 2)}
    full = aggregate_maps(maps, 32)[0].numpy()
    assert np.allclose(full, 0.5)
    r = finalize(full.astype(np.float64), None)
    assert r.image_score == pytest.approx(0.5)


def test_single_layer_equals_its_upsampling():
    rng = np.random.default_rng(0)
    src = rng.random((4, 4))
    full = aggregate_maps({2: torch.from_numpy(src)[None]}, 16)[0].numpy()
    assert np.allclose(full, bilinear_half_pixel(src, 16, 16), atol=1e-12)


def test_bilinear_hand_example():
    full = aggregate_maps({1: torch.tensor([[[1.0, 1.0], [3.0, 3.0]]])}, 4)[0]
    assert torch.allclose(full[:, 0], torch.tensor([1.0, 1.5, 2.5, 3.0]))


def test_aggregation_is_linear_in_layers():
    a = {1: torch.rand(2, 8, 8)}
    b = {2: torch.rand(2, 4, 4)}
    both = aggregate_maps({**a, **b}, 32)
    assert torch.allclose(both, aggregate_maps(a, 32) + aggregate_maps(b, 32), atol=1e-6)


def test_score_is_monotone_under_domination():
    rng = np.random.default_rng(1)
    for _ in range(20):
        b = rng.random((16, 16))
        a = b + rng.random((16, 16)) * rng.integers(0, 2)
        for sigma in (None, 2.0):
            assert finalize(a.copy(), sigma).image_score >= finalize(b.copy(), sigma).image_score


def test_smoothing_applied_before_max():
    m = np.zeros((32, 32))
    m[10, 10] = 1.0
    assert finalize(m.copy(), None).image_score == 1.0
    assert finalize(m.copy(), 4.0).image_score < 0.05


def test_scoring_never_reads_stats(make_cfg, monkeypatch):
    import hetnet.lmgn as lmgn

    def forbidden(*a, **k):
        raise AssertionError("noise statistics touched during inference")

    monkeypatch.setattr(lmgn.GaussianFieldStats, "load", forbidden)
    monkeypatch.setattr(lmgn, "sample_noise", forbidden)
    monkeypatch.setattr("hetnet.training.sample_noise", forbidden)
    monkeypatch.setattr("hetnet.training.standard_normal_noise", forbidden)
    cfg = make_cfg()
    pair = TeacherPair.from_config(cfg)
    model = build_model(cfg, pair)
    results = score(model, pair, torch.randn(2, 3, 64, 64), keep_layers=True)
    for r in results:
        assert np.isfinite(r.map).all() and r.map.min() >= -1e-6
        assert r.image_score == r.map.max()
        assert sorted(r.layer_maps) == [1, 2, 3]


def test_normalize_degenerate_maps():
    assert np.all(normalize_map(np.full((4, 4), 3.0)) == 0)
    assert np.all(normalize_map(np.zeros((4, 4))) == 0)
    n = normalize_map(np.array([[1.0, 3.0]]))
    assert np.array_equal(n, [[0.0, 1.0]])


def test_overlay_degenerate_cases():
    img = np.zeros((8, 8, 3))
    zero = render_overlay(np.zeros((8, 8)), img)
    const = render_overlay(np.full((8, 8), 7.0), img)
    assert np.array_equal(zero, const)
    assert (zero == zero[0, 0]).all()
    with pytest.raises(ValueError):
        render_overlay(np.zeros((4, 4)), img)


def test_heatmap_bytes_are_deterministic(tmp_path):
    rng = np.random.default_rng(2)
    res = AnomalyMap(rng.random((16, 16)), 1.0)
    image = rng.random((16, 16, 3))
    a = export_heatmap(res, image, tmp_path / "a.png")
    b = export_heatmap(res, image, tmp_path / "b.png")
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()
    with pytest.raises(OSError):
        export_heatmap(res, image, tmp_path / "missing" / "dir" / "c.png")


def test_denormalize_round_trip():
    x = np.random.default_rng(3).random((8, 8, 3))
    mean, std = (0.4, 0.5, 0.6), (0.2, 0.25, 0.3)
    t = torch.from_numpy(((x - mean) / std).transpose(2, 0, 1))
    assert np.allclose(denormalize(t, mean, std), x)
