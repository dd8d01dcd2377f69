import numpy as np
import pytest
import torch

from hetnet.fusion import ALGFBlock, FusionError, HybridFusion, MHFModule, algf_forward, mhf_fuse, scaled_dot_attention
from oracles import softmax_attention


def _randomise(module, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.5)
    return module


def test_attention_matches_loop_oracle():
    g = torch.Generator().manual_seed(1)
    q, k, v = (torch.randn(1, 9, 4, generator=g, dtype=torch.float64) for _ in range(3))
    for heads in (1, 2):
        out = scaled_dot_attention(q, k, v, heads)
        ref = softmax_attention(q[0].numpy(), k[0].numpy(), v[0].numpy(), heads)
        assert np.allclose(out[0].numpy(), ref, atol=1e-10)
        out_w, weights = scaled_dot_attention(q, k, v, heads, return_weights=True)
        assert torch.allclose(out_w, out, atol=1e-12)
        assert torch.allclose(weights.sum(-1), torch.ones_like(weights.sum(-1)), atol=1e-12)


@pytest.mark.parametrize("projections", [False, True])
def test_block_attention_sub_result_matches_oracle(projections):
    blk = _randomise(ALGFBlock(4, 6, 4, projections=projections).double())
    fl = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    fg = torch.randn(1, 6, 3, 3, dtype=torch.float64)
    la, ga = blk.align_local(fl), blk.align_global(fg)
    got = blk.attend(la, ga)[0].flatten(1).T.detach().numpy()
    tl = la[0].flatten(1).T
    tg = ga[0].flatten(1).T
    q = blk.query(tl).detach().numpy()
    k = blk.key(tg).detach().numpy()
    v = blk.value(tl).detach().numpy()
    assert np.allclose(got, softmax_attention(q, k, v), atol=1e-5)


def test_half_precision_promoted():
    q = torch.randn(1, 5, 4).half()
    out = scaled_dot_attention(q, q, q)
    assert out.dtype == torch.float16 and torch.isfinite(out.float()).all()


def test_output_shape():
    blk = ALGFBlock(8, 12, 8)
    out = algf_forward(blk, torch.randn(2, 8, 16, 16), torch.randn(2, 12, 16, 16))
    assert out.shape == (2, 8, 16, 16)


@pytest.mark.parametrize("projections", [False, True])
def test_single_token_attention_is_value_projection(projections):
    blk = _randomise(ALGFBlock(4, 4, 4, projections=projections).double(), 3)
    la = torch.randn(2, 4, 1, 1, dtype=torch.float64)
    ga = torch.randn(2, 4, 1, 1, dtype=torch.float64)
    out, w = blk.attend(la, ga, return_weights=True)
    assert torch.allclose(w, torch.ones_like(w))
    expected = blk.value(la.flatten(2).transpose(1, 2)).transpose(1, 2).reshape(2, 4, 1, 1)
    assert torch.allclose(out, expected)


def test_spatial_mismatch_raises():
    blk = ALGFBlock(4, 4, 4)
    with pytest.raises(FusionError, match="spatial mismatch"):
        blk(torch.randn(1, 4, 4, 4), torch.randn(1, 4, 2, 2))


@pytest.mark.parametrize("projections", [False, True])
def test_gradients_match_finite_differences(projections):
    torch.manual_seed(0)
    blk = _randomise(ALGFBlock(4, 4, 4, projections=projections).double(), 7)
    fl = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    fg = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    params = list(blk.parameters())
    inputs = params + [fl, fg]

    def loss():
        return blk(fl, fg).sum()

    analytic = torch.autograd.grad(loss(), inputs)
    eps = 1e-6
    worst = 0.0
    with torch.no_grad():
        for tensor, grad in zip(inputs, analytic):
            flat = tensor.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + eps
                up = float(loss())
                flat[i] = old - eps
                down = float(loss())
                flat[i] = old
                numeric = (up - down) / (2 * eps)
                a = float(grad.view(-1)[i])
                # the key bias has an identically zero gradient (softmax is shift invariant);
                # the 1e-5 floor keeps rounding noise on such entries from reading as error
                worst = max(worst, abs(a - numeric) / max(1e-5, abs(a), abs(numeric)))
    assert worst < 1e-3


def test_bypass_variants():
    fl, fg = torch.randn(1, 4, 5, 5), torch.randn(1, 6, 5, 5)
    only = ALGFBlock(4, 6, 4, attention=False, bypass="local_only")
    assert torch.allclose(only(fl, fg), only.align_local(fl))
    assert not hasattr(only, "query")
    concat = ALGFBlock(4, 6, 4, attention=False, bypass="concat")
    expected = concat.fuse(torch.cat([concat.align_local(fl), concat.align_global(fg)], 1))
    assert torch.allclose(concat(fl, fg), expected)
    solo = ALGFBlock(4, None, 4)
    assert solo(fl).shape == (1, 4, 5, 5)


def test_projection_free_attention_uses_aligned_features():
    blk = _randomise(ALGFBlock(4, 6, 4).double(), 5)
    assert not any(isinstance(m, torch.nn.Linear) for m in blk.modules())
    la = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    ga = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    tl, tg = la[0].flatten(1).T.numpy(), ga[0].flatten(1).T.numpy()
    got = blk.attend(la, ga)[0].flatten(1).T.detach().numpy()
    assert np.allclose(got, softmax_attention(tl, tg, tl), atol=1e-12)
    with_proj = ALGFBlock(4, 6, 4, projections=True)
    assert sum(isinstance(m, torch.nn.Linear) for m in with_proj.modules()) == 3


def test_mhf_toy_shapes():
    mhf = MHFModule({1: 16, 2: 32, 3: 64}, {1: 2, 2: 4, 3: 8})
    o = mhf_fuse(mhf, {1: torch.randn(2, 16, 32, 32), 2: torch.randn(2, 32, 16, 16), 3: torch.randn(2, 64, 8, 8)})
    assert o.shape == (2, 112, 8, 8)


def test_mhf_single_layer_is_identity():
    mhf = MHFModule({3: 64}, {3: 8})
    x = torch.randn(1, 64, 8, 8)
    assert torch.equal(mhf({3: x}), x)


def test_mhf_deepest_block_ignores_shallow_weights():
    mhf = MHFModule({1: 4, 2: 6}, {1: 4, 2: 8}).eval()
    feats = {1: torch.randn(1, 4, 8, 8), 2: torch.randn(1, 6, 4, 4)}
    before = mhf(feats)
    with torch.no_grad():
        for p in mhf.downs["1"].parameters():
            p.add_(torch.randn_like(p))
    after = mhf(feats)
    assert torch.equal(before[:, 4:], after[:, 4:])
    assert not torch.equal(before[:, :4], after[:, :4])


def test_mhf_rejects_bad_geometry():
    with pytest.raises(FusionError):
        MHFModule({1: 4, 2: 4}, {1: 4, 2: 12})
    mhf = MHFModule({1: 4, 2: 4}, {1: 4, 2: 8})
    with pytest.raises(FusionError, match="layer 1"):
        mhf({1: torch.randn(1, 4, 6, 6), 2: torch.randn(1, 4, 4, 4)})


def test_hybrid_fusion_prototype():
    fusion = HybridFusion({1: 16, 2: 32, 3: 64}, {1: 16, 2: 32, 3: 64}, {1: 2, 2: 4, 3: 8})
    local = {1: torch.randn(1, 16, 32, 32), 2: torch.randn(1, 32, 16, 16), 3: torch.randn(1, 64, 8, 8)}
    glob = {k: torch.randn_like(v) for k, v in local.items()}
    assert fusion(local, glob).shape == (1, 112, 8, 8)
    assert fusion.out_channels == 112
