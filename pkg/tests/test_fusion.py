"""Cosine cross-modal attention, reshaping, fusion and channel alignment."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from binauralnet.fusion import (
    Align,
    CrossModalFusion,
    align,
    cosine_attention,
    fuse,
    reshape_attention,
    unreshape_attention,
)
from binauralnet.signal import ConfigurationError, ShapeError
from binauralnet.training import grad_check


def loop_oracle(fv, fa, eps=1e-8):
    """Scalar nested-loop cosine similarity in plain Python floats."""
    d, h, w = fv.shape
    _, f, t = fa.shape
    out = np.zeros((h, w, f, t))
    for i in range(h):
        for j in range(w):
            u = [float(fv[c, i, j]) for c in range(d)]
            for k in range(f):
                for l in range(t):
                    v = [float(fa[c, k, l]) for c in range(d)]
                    dot = math.fsum(a * b for a, b in zip(u, v))
                    nu = math.sqrt(math.fsum(a * a for a in u))
                    nv = math.sqrt(math.fsum(b * b for b in v))
                    out[i, j, k, l] = dot / (nu * nv + eps)
    return out


def as_map(vec):
    """Channel vector -> ``[1, d, 1, 1]`` double tensor."""
    return torch.tensor(vec, dtype=torch.float64).reshape(1, -1, 1, 1)


class TestCosineAttention:
    def test_self_similarity(self):
        v = as_map([0.3, -1.2, 2.0])
        # the 1e-8 stabilizer in the denominator shifts the result by eps/|v|^2
        assert float(cosine_attention(v, v)) == pytest.approx(1.0 - 1e-8 / 5.53, abs=1e-12)

    def test_orthogonal(self):
        assert float(cosine_attention(as_map([1.0, 0.0]), as_map([0.0, 1.0]))) == 0.0

    def test_eight_ninths(self):
        assert float(cosine_attention(as_map([1.0, 2.0, 2.0]), as_map([2.0, 1.0, 2.0]))) == pytest.approx(
            8 / 9, abs=1e-8)

    def test_zero_vector_gives_zero(self):
        assert float(cosine_attention(as_map([0.0, 0.0]), as_map([1.0, 2.0]))) == 0.0

    def test_output_layout(self):
        att = cosine_attention(torch.rand(2, 4, 3, 5), torch.rand(2, 4, 6, 7))
        assert att.shape == (2, 3, 5, 6, 7)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_attention(torch.rand(1, 4, 3, 3), torch.rand(1, 5, 3, 3))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 7))
        fv = rng.standard_normal((d, 3, 2)) * 10.0 ** rng.uniform(-3, 3)
        fa = rng.standard_normal((d, 4, 3)) * 10.0 ** rng.uniform(-3, 3)
        att = cosine_attention(torch.from_numpy(fv)[None], torch.from_numpy(fa)[None])[0].numpy()
        assert np.abs(att - loop_oracle(fv, fa)).max() <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), scale=st.floats(1e-6, 1e6))
    def test_bounded(self, seed, scale):
        g = torch.Generator().manual_seed(seed)
        fv = torch.randn(1, 5, 2, 3, generator=g, dtype=torch.float64) * scale
        fa = torch.randn(1, 5, 3, 2, generator=g, dtype=torch.float64)
        att = cosine_attention(fv, fa)
        assert float(att.abs().max()) <= 1 + 1e-6

    @settings(max_examples=40, deadline=None)
    @given(alpha=st.floats(1e-3, 1e3), seed=st.integers(0, 2**31 - 1))
    def test_scale_invariance(self, alpha, seed):
        g = torch.Generator().manual_seed(seed)
        fv = torch.randn(1, 4, 2, 2, generator=g, dtype=torch.float64)
        fa = torch.randn(1, 4, 3, 3, generator=g, dtype=torch.float64)
        base = cosine_attention(fv, fa)
        # invariance is exact up to the 1e-8 stabilizer, whose effect grows as alpha shrinks
        norms = fv.norm(dim=1).min() * fa.norm(dim=1).min()
        tol = 1e-6 + 2e-8 / float(alpha * norms)
        torch.testing.assert_close(cosine_attention(alpha * fv, fa), base, atol=tol, rtol=0)
        torch.testing.assert_close(cosine_attention(-alpha * fv, fa), -base, atol=tol, rtol=0)

    def test_gradcheck_torch(self):
        g = torch.Generator().manual_seed(0)
        fv = torch.randn(2, 3, 2, 2, generator=g, dtype=torch.float64, requires_grad=True)
        fa = torch.randn(2, 3, 2, 3, generator=g, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(cosine_attention, (fv, fa))

    def test_gradient_matches_autograd_of_reference_formula(self):
        g = torch.Generator().manual_seed(1)
        fv = torch.randn(2, 6, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
        fa = torch.randn(2, 6, 4, 5, generator=g, dtype=torch.float64, requires_grad=True)
        r = torch.randn(2, 3, 3, 4, 5, generator=g, dtype=torch.float64)
        (cosine_attention(fv, fa) * r).sum().backward()
        ours = fv.grad.clone(), fa.grad.clone()
        fv.grad = fa.grad = None
        dot = torch.einsum("bdij,bdkl->bijkl", fv, fa)
        den = fv.norm(dim=1)[:, :, :, None, None] * fa.norm(dim=1)[:, None, None] + 1e-8
        ((dot / den) * r).sum().backward()
        torch.testing.assert_close(ours[0], fv.grad, atol=1e-12, rtol=1e-10)
        torch.testing.assert_close(ours[1], fa.grad, atol=1e-12, rtol=1e-10)

    def test_finite_differences(self):
        g = torch.Generator().manual_seed(2)
        fv = torch.randn(1, 4, 2, 2, generator=g, dtype=torch.float64, requires_grad=True)
        fa = torch.randn(1, 4, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
        r = torch.randn(1, 2, 2, 3, 3, generator=g, dtype=torch.float64)
        res = grad_check(lambda: (cosine_attention(fv, fa) * r).sum(), [fv, fa])
        assert res["coords"] == 16 + 36
        assert res["max_rel_error"] < 1e-4

    def test_zero_vector_gradient_finite(self):
        fv = torch.zeros(1, 3, 1, 1, dtype=torch.float64, requires_grad=True)
        fa = torch.randn(1, 3, 2, 2, dtype=torch.float64, requires_grad=True)
        cosine_attention(fv, fa).sum().backward()
        assert torch.all(torch.isfinite(fv.grad)) and torch.all(torch.isfinite(fa.grad))


class TestReshape:
    def test_shape(self):
        assert reshape_attention(torch.rand(1, 7, 7, 8, 2)).shape == (1, 49, 8, 2)

    def test_index_law_and_inverse(self):
        att = torch.rand(2, 7, 5, 4, 3)
        flat = reshape_attention(att)
        for i, j, k, l in [(0, 0, 0, 0), (3, 4, 2, 1), (6, 4, 3, 2)]:
            assert flat[1, i * 5 + j, k, l] == att[1, i, j, k, l]
        assert torch.equal(unreshape_attention(flat, 7, 5), att)

    def test_preserves_statistics(self):
        att = torch.randn(1, 7, 7, 8, 2, dtype=torch.float64)
        flat = reshape_attention(att)
        assert flat.sum() == att.sum() and flat.min() == att.min() and flat.max() == att.max()

    def test_inverse_shape_check(self):
        with pytest.raises(ShapeError):
            unreshape_attention(torch.rand(1, 48, 2, 2), 7, 7)


class TestFuse:
    def test_both_modalities(self):
        img, dep = torch.rand(1, 7, 7, 4, 4), torch.rand(1, 7, 7, 4, 4)
        out = fuse(img, dep)
        assert out.shape == (1, 98, 4, 4)
        assert torch.equal(out[:, :49], reshape_attention(img))
        assert torch.equal(out[:, 49:], reshape_attention(dep))

    def test_image_only(self):
        img = torch.rand(1, 7, 7, 4, 4)
        out = fuse(img, None, use_image=True, use_depth=False)
        assert torch.equal(out, reshape_attention(img))

    def test_image_block_independent_of_depth(self):
        img = torch.rand(1, 7, 7, 4, 4)
        a = fuse(img, torch.rand(1, 7, 7, 4, 4))
        b = fuse(img, torch.rand(1, 7, 7, 4, 4))
        assert torch.equal(a[:, :49], b[:, :49])

    def test_none(self):
        assert fuse(None, None, False, False) is None

    def test_mismatched_sizes(self):
        with pytest.raises(ShapeError):
            fuse(torch.rand(1, 7, 7, 4, 4), torch.rand(1, 7, 7, 4, 5))


class TestAlign:
    def test_layer_one_passthrough(self):
        x = torch.rand(1, 64, 7, 7)
        assert align(x, 1) is x

    def test_layer_one_rejects_network(self):
        with pytest.raises(ConfigurationError):
            align(torch.rand(1, 64, 7, 7), 1, Align(64, 64))

    def test_later_layers_require_network(self):
        with pytest.raises(ConfigurationError):
            align(torch.rand(1, 64, 7, 7), 2)

    def test_shape(self):
        assert align(torch.rand(1, 64, 7, 7), 2, Align(64, 32)).shape == (1, 32, 7, 7)

    def test_zero_weights_give_gelu_of_bias(self):
        mod = Align(64, 32)
        b = torch.linspace(-2, 2, 32)
        with torch.no_grad():
            mod.linear.weight.zero_()
            mod.linear.bias.copy_(b)
        out = mod(torch.randn(2, 64, 7, 7))
        torch.testing.assert_close(out, F.gelu(b).reshape(1, 32, 1, 1).expand(2, 32, 7, 7))

    def test_finite_differences(self):
        torch.manual_seed(3)
        mod = Align(16, 8).double()
        x = torch.randn(2, 16, 3, 3, dtype=torch.float64)
        params = list(mod.parameters())
        res = grad_check(lambda: mod(x).square().sum(), params)
        assert res["max_rel_error"] < 1e-4


class TestCrossModalFusion:
    def widths(self):
        return [64, 64, 32, 16, 8]

    def test_time_dims_per_layer(self):
        fusion = CrossModalFusion(64, self.widths())
        f_img, f_dep = torch.rand(1, 64, 7, 7), torch.rand(1, 64, 7, 7)
        dims = []
        for layer, (w, t) in enumerate(zip(self.widths(), (2, 4, 8, 16, 32)), start=1):
            out = fusion(layer, torch.rand(1, w, 4, t), f_img, f_dep)
            assert out.shape[1] == 98
            assert float(out.detach().abs().max()) <= 1 + 1e-6
            dims.append(out.shape[-1])
        assert dims == [2, 4, 8, 16, 32]

    def test_disabling_depth_keeps_image_block(self):
        torch.manual_seed(5)
        full = CrossModalFusion(64, self.widths())
        torch.manual_seed(6)
        img_only = CrossModalFusion(64, self.widths(), use_depth=False)
        img_only.image_align.load_state_dict(full.image_align.state_dict())
        f_img, f_dep = torch.rand(1, 64, 7, 7), torch.rand(1, 64, 7, 7)
        for layer, w in enumerate(self.widths(), start=1):
            audio = torch.rand(1, w, 4, 4)
            a = full(layer, audio, f_img, f_dep)
            b = img_only(layer, audio, f_img, None)
            assert torch.equal(a[:, :49], b)

    def test_audio_only_returns_none(self):
        fusion = CrossModalFusion(64, self.widths(), use_image=False, use_depth=False)
        assert fusion(1, torch.rand(1, 64, 2, 2)) is None
        assert fusion.channels == 0
        assert len(list(fusion.parameters())) == 0

    def test_width_contract(self):
        with pytest.raises(ConfigurationError):
            CrossModalFusion(32, self.widths())
