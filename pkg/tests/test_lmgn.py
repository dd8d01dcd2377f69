import numpy as np
import pytest
import torch

from hetnet.lmgn import (
    GaussianFieldStats,
    NoiseError,
    NoiseField,
    NoisePatchPlan,
    Patch,
    fit_stats,
    fit_stats_from_features,
    inject,
    make_patch,
    random_plan,
    sample_noise,
    side_bounds,
    standard_normal_noise,
)
from hetnet.dataset import scan_layout
from hetnet.teacher import TeacherPair
from oracles import two_pass_stats


def _batches(feats, size):
    for s in range(0, len(feats), size):
        yield {1: feats[s : s + size]}


def test_single_sample_degenerate():
    f = torch.randn(1, 3, 2, 2)
    st = fit_stats_from_features([{1: f}], eps=0.01)
    assert torch.allclose(st.mean[1], f[0].double())
    eye = 0.01 * torch.eye(3, dtype=torch.float64)
    assert torch.allclose(st.cov[1], eye.expand(2, 2, 3, 3))


def test_two_samples_mean():
    a, b = torch.randn(1, 4, 1, 1), torch.randn(1, 4, 1, 1)
    st = fit_stats_from_features([{1: a}, {1: b}])
    assert torch.allclose(st.mean[1], ((a + b) / 2)[0].double())


def test_streaming_matches_two_pass_oracle():
    g = torch.Generator().manual_seed(0)
    feats = torch.randn(50, 5, 3, 4, generator=g) * 2 + 1
    st = fit_stats_from_features(_batches(feats, 7), eps=0.0)
    mean, cov = two_pass_stats(feats.double().numpy())
    assert np.abs(st.mean[1].numpy() - mean).max() <= 1e-10
    assert np.abs(st.cov[1].numpy() - cov).max() <= 1e-10


def test_diagonal_mode_matches_full_diagonal():
    feats = torch.randn(20, 4, 2, 2)
    full = fit_stats_from_features(_batches(feats, 6), mode="full")
    diag = fit_stats_from_features(_batches(feats, 6), mode="diagonal")
    d = torch.diagonal(full.cov[1], dim1=-2, dim2=-1).permute(2, 0, 1)
    assert torch.allclose(diag.cov[1], d)


def test_permutation_invariance():
    feats = torch.randn(30, 4, 2, 3)
    a = fit_stats_from_features(_batches(feats, 4))
    b = fit_stats_from_features(_batches(feats[torch.randperm(30)], 9))
    assert torch.allclose(a.mean[1], b.mean[1], atol=1e-6)
    assert torch.allclose(a.cov[1], b.cov[1], atol=1e-6)


def test_zero_samples_rejected():
    with pytest.raises(NoiseError):
        fit_stats_from_features([])


def test_cholesky_failure_reports_position():
    st = fit_stats_from_features([{2: torch.randn(3, 2, 2, 2)}], eps=0.01)
    st.cov[2][1, 0] = -torch.eye(2, dtype=torch.float64)
    st._factor.clear()
    with pytest.raises(NoiseError, match=r"layer 2, position \(1, 0\)"):
        st.check_cholesky()


def test_save_load_round_trip(tmp_path):
    st = fit_stats_from_features([{1: torch.randn(4, 3, 2, 2)}], backbone_id="toy_cnn")
    path = tmp_path / "s.pt"
    st.save(path)
    again = GaussianFieldStats.load(path)
    assert torch.equal(again.mean[1], st.mean[1]) and torch.equal(again.cov[1], st.cov[1])
    assert again.backbone_id == "toy_cnn" and again.n_samples == 4
    with pytest.raises(NoiseError, match="not found"):
        GaussianFieldStats.load(tmp_path / "missing.pt")


def test_fit_stats_on_corpus_matches_oracle(tiny_corpus, make_cfg):
    cfg = make_cfg(dataset_root=str(tiny_corpus), batch_size=3)
    train, _ = scan_layout(tiny_corpus, "synth")
    pair = TeacherPair.from_config(cfg)
    st = fit_stats(pair.local, train, cfg)
    from hetnet.dataset import load_batch

    images, _, _ = load_batch(list(train), 64, cfg.normalization_mean, cfg.normalization_std)
    local, _ = pair.extract(images)
    mean, cov = two_pass_stats(local[3].double().numpy())
    assert np.abs(st.mean[3].numpy() - mean).max() <= 1e-5
    assert np.abs(st.cov[3].numpy() - cov - 0.01 * np.eye(64)).max() <= 1e-5


def test_side_bounds_and_patch_construction():
    assert side_bounds(32, (0.125, 0.5)) == (4, 16)
    assert side_bounds(8, (0.125, 0.5)) == (1, 4)
    with pytest.raises(NoiseError):
        make_patch(1, (0, 0), 0, 8, 8)
    p = make_patch(1, (0, 7), 4, 8, 8)
    assert (p.top, p.left, p.side) == (0, 4, 4)


def test_random_plan_within_bounds():
    gen = torch.Generator().manual_seed(0)
    for _ in range(200):
        plan = random_plan({1: (32, 32), 3: (8, 8)}, (0.125, 0.5), gen)
        plan.validate({1: (32, 32), 3: (8, 8)})
        assert 4 <= plan.patches[1].side <= 16 and 1 <= plan.patches[3].side <= 4


def test_plan_validation():
    plan = NoisePatchPlan({1: Patch(6, 6, 4)})
    with pytest.raises(NoiseError):
        plan.validate({1: (8, 8)})
    with pytest.raises(NoiseError, match="layer 1"):
        NoisePatchPlan({1: Patch(0, 0, 2)}).validate({2: (8, 8)})


def _stats(mean, cov, eps=0.0):
    return GaussianFieldStats({1: mean}, {1: cov}, n_samples=10, eps=eps, mode="full", backbone_id="x")


def test_tiny_covariance_returns_mean():
    mean = torch.randn(3, 4, 4, dtype=torch.float64)
    cov = (1e-12 * torch.eye(3, dtype=torch.float64)).expand(4, 4, 3, 3).clone()
    plan = NoisePatchPlan({1: Patch(1, 1, 2)})
    field = sample_noise(_stats(mean, cov), [plan], torch.Generator().manual_seed(0))
    inside = field.masks[1][0]
    assert torch.allclose(field.values[1][0][:, inside].double(), mean[:, inside], atol=1e-5)
    assert (field.values[1][0][:, ~inside] == 0).all()


def test_monte_carlo_moments():
    g = torch.Generator().manual_seed(3)
    c = 4
    mean = torch.randn(c, 2, 2, generator=g, dtype=torch.float64) * 2
    a = torch.randn(2, 2, c, c, generator=g, dtype=torch.float64)
    cov = a @ a.transpose(-1, -2) + 0.01 * torch.eye(c, dtype=torch.float64)
    st = _stats(mean, cov)
    plans = [NoisePatchPlan({1: Patch(0, 0, 2)})] * 100_000
    field = sample_noise(st, plans, torch.Generator().manual_seed(1))
    x = field.values[1][:, :, 1, 0].double()
    emp_mean = x.mean(0)
    emp_cov = torch.cov(x.T)
    mu = mean[:, 1, 0]
    assert (emp_mean - mu).abs().max() <= 0.02 * max(1.0, float(mu.norm()))
    assert float((emp_cov - cov[1, 0]).norm() / cov[1, 0].norm()) <= 0.05


def test_diagonal_sampling_moments():
    mean = torch.zeros(3, 1, 1, dtype=torch.float64)
    var = torch.tensor([1.0, 4.0, 0.25], dtype=torch.float64).reshape(3, 1, 1)
    st = GaussianFieldStats({1: mean}, {1: var}, 5, 0.0, "diagonal", "x")
    field = sample_noise(st, [NoisePatchPlan({1: Patch(0, 0, 1)})] * 50_000, torch.Generator().manual_seed(0))
    std = field.values[1][:, :, 0, 0].double().std(0)
    assert torch.allclose(std, var.flatten().sqrt(), rtol=0.03)


def test_layer_mismatch_raises():
    st = _stats(torch.zeros(2, 4, 4, dtype=torch.float64), torch.eye(2, dtype=torch.float64).expand(4, 4, 2, 2).clone())
    with pytest.raises(NoiseError):
        sample_noise(st, [NoisePatchPlan({2: Patch(0, 0, 1)})], torch.Generator())


def test_locality_exact_on_random_plans():
    gen = torch.Generator().manual_seed(0)
    c = 3
    mean = torch.randn(c, 8, 8, dtype=torch.float64)
    st = _stats(mean, torch.eye(c, dtype=torch.float64).expand(8, 8, c, c).clone())
    feats = {1: torch.randn(100, c, 8, 8)}
    plans = [random_plan({1: (8, 8)}, (0.125, 0.5), gen) for _ in range(100)]
    for mode in ("add_xi", "add_centered"):
        noisy = inject(feats, sample_noise(st, plans, gen), mode)[1]
        for b, plan in enumerate(plans):
            inside = plan.mask(1, 8, 8)
            assert torch.equal(noisy[b][:, ~inside], feats[1][b][:, ~inside])
            assert not torch.equal(noisy[b][:, inside], feats[1][b][:, inside])


def test_inject_identities():
    f = {1: torch.randn(2, 3, 4, 4), 2: torch.randn(2, 3, 2, 2)}
    zeros = NoiseField({1: torch.zeros(2, 3, 4, 4)}, {1: torch.zeros(2, 3, 4, 4)}, {1: torch.ones(2, 4, 4, dtype=torch.bool)})
    out = inject(f, zeros)
    assert torch.equal(out[1], f[1]) and out[2] is f[2]
    xi = torch.zeros(2, 3, 4, 4)
    mask = torch.zeros(2, 4, 4, dtype=torch.bool)
    mask[:, 1:3, 1:3] = True
    xi[:, :, 1:3, 1:3] = 5.0
    out = inject(f, NoiseField({1: xi}, {1: xi.clone()}, {1: mask}), "add_xi")[1]
    assert ((out != f[1]).sum(1) > 0).eq(mask).all()
    assert int((out != f[1]).sum()) == 2 * 3 * 4
    centred = inject(f, NoiseField({1: xi}, {1: xi.clone()}, {1: mask}), "add_centered")[1]
    assert torch.equal(centred, f[1])
    with pytest.raises(NoiseError):
        inject(f, NoiseField({1: xi[:, :2]}, {1: xi[:, :2]}, {1: mask}))
    with pytest.raises(NoiseError):
        inject(f, zeros, "multiply")


def test_standard_normal_field():
    plans = [NoisePatchPlan({1: Patch(0, 0, 4)})] * 2
    zero = standard_normal_noise({1: (3, 4, 4)}, plans, torch.Generator().manual_seed(0), scale=0.0)
    assert (zero.values[1] == 0).all()
    a = standard_normal_noise({1: (3, 4, 4)}, plans, torch.Generator().manual_seed(5))
    b = standard_normal_noise({1: (3, 4, 4)}, plans, torch.Generator().manual_seed(5))
    assert torch.equal(a.values[1], b.values[1])
    big = standard_normal_noise({1: (1, 1, 1)}, [NoisePatchPlan({1: Patch(0, 0, 1)})] * 100_000, torch.Generator().manual_seed(1), 0.7)
    assert abs(float(big.values[1].std()) - 0.7) <= 0.02 * 0.7
