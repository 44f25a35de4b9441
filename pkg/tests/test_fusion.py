import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evlf import tensor as tn
from evlf.fusion import (FusionConfigError, FusionParams, cross_attention, fuse, init_fusion, init_projector,
                         project_latent, project_tokens)
from evlf.io import load_checkpoint
from evlf.params import ones, zeros
from evlf.tensor import ShapeError, Tensor
from conftest import DATA, randomize
from oracles import attention_single, fuse_single, layer_norm_rows


def _identity_fusion(c: int, text_dim: int, heads: int = 1) -> FusionParams:
    """phi_img and psi are identities, attention and FFN branches are zeroed."""
    p = init_fusion(c, text_dim, d=c, num_heads=heads, seed=0)
    p.phi_img_w = Tensor(np.eye(c))
    p.w_v = zeros((c, c))
    p.ffn_w2 = zeros((4 * c, c))
    p.psi_w = Tensor(np.eye(c))
    return p


class TestProjectTokens:
    def test_identity_maps_flatten_verbatim(self):
        p = init_fusion(4, 4, d=4, num_heads=1)
        p.phi_img_w, p.phi_text_w = Tensor(np.eye(4)), Tensor(np.eye(4))
        z = np.random.default_rng(0).standard_normal((2, 3, 4))
        e = np.random.default_rng(1).standard_normal((2, 4))
        z_tok, e_tok = project_tokens(z, e, p)
        np.testing.assert_array_equal(z_tok.data, z.reshape(6, 4))
        np.testing.assert_array_equal(e_tok.data, e)

    def test_zero_latent_gives_zero_tokens(self):
        p = init_fusion(3, 5, d=8, num_heads=2)
        z_tok, _ = project_tokens(np.zeros((2, 2, 3)), np.ones((2, 5)), p)
        np.testing.assert_array_equal(z_tok.data, 0.0)

    def test_matches_flatten_then_matmul(self):
        p = randomize(init_fusion(3, 5, d=8, num_heads=2), 2)
        rng = np.random.default_rng(3)
        z, e = rng.standard_normal((2, 4, 3)), rng.standard_normal((3, 5))
        z_tok, e_tok = project_tokens(z, e, p)
        np.testing.assert_array_equal(z_tok.data, z.reshape(8, 3) @ p.phi_img_w.data + p.phi_img_b.data)
        np.testing.assert_array_equal(e_tok.data, e @ p.phi_text_w.data + p.phi_text_b.data)

    def test_channel_mismatch(self):
        p = init_fusion(3, 5, d=8, num_heads=2)
        with pytest.raises(ShapeError):
            project_tokens(np.zeros((2, 2, 4)), np.zeros((2, 5)), p)


class TestCrossAttention:
    def test_single_text_token_copies_value_row(self):
        p = randomize(init_fusion(3, 4, d=8, num_heads=2), 4)
        rng = np.random.default_rng(5)
        z_tok, e_tok = rng.standard_normal((6, 8)), rng.standard_normal((1, 8))
        out = cross_attention(z_tok, e_tok, p).data
        np.testing.assert_allclose(out, np.repeat(e_tok @ p.w_v.data, 6, axis=0), atol=1e-14)

    def test_zero_values_give_zero_output(self):
        p = randomize(init_fusion(3, 4, d=8, num_heads=2), 6)
        p.w_v = zeros((8, 8))
        rng = np.random.default_rng(7)
        np.testing.assert_array_equal(cross_attention(rng.standard_normal((4, 8)), rng.standard_normal((3, 8)), p).data,
                                      0.0)

    def test_single_head_oracle(self):
        p = randomize(init_fusion(3, 4, d=6, num_heads=1), 8)
        rng = np.random.default_rng(9)
        z_tok, e_tok = rng.standard_normal((2, 6)), rng.standard_normal((2, 6))
        expected = attention_single(z_tok, e_tok, p.w_q.data, p.w_k.data, p.w_v.data, 1)
        np.testing.assert_allclose(cross_attention(z_tok, e_tok, p).data, expected, rtol=0, atol=1e-12)

    def test_multi_head_oracle(self):
        p = randomize(init_fusion(3, 4, d=8, num_heads=4), 10)
        rng = np.random.default_rng(11)
        z_tok, e_tok = rng.standard_normal((5, 8)), rng.standard_normal((3, 8))
        expected = attention_single(z_tok, e_tok, p.w_q.data, p.w_k.data, p.w_v.data, 4)
        np.testing.assert_allclose(cross_attention(z_tok, e_tok, p).data, expected, rtol=0, atol=1e-12)

    def test_heads_must_divide_width(self):
        with pytest.raises(FusionConfigError):
            init_fusion(3, 4, d=10, num_heads=4)

    def test_text_token_permutation_invariance(self):
        p = randomize(init_fusion(3, 4, d=8, num_heads=2), 12)
        rng = np.random.default_rng(13)
        z_tok, e_tok = rng.standard_normal((4, 8)), rng.standard_normal((5, 8))
        perm = rng.permutation(5)
        a = cross_attention(z_tok, e_tok, p).data
        b = cross_attention(z_tok, e_tok[perm], p).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_convexity_with_nonnegative_values(self, seed):
        rng = np.random.default_rng(seed)
        p = init_fusion(3, 4, d=6, num_heads=1, seed=seed)
        p.w_q, p.w_k = Tensor(rng.standard_normal((6, 6))), Tensor(rng.standard_normal((6, 6)))
        p.w_v = Tensor(np.eye(6))
        z_tok, e_tok = rng.standard_normal((4, 6)), np.abs(rng.standard_normal((3, 6)))
        out = cross_attention(z_tok, e_tok, p).data
        assert np.all(out >= e_tok.min(axis=0) - 1e-12)
        assert np.all(out <= e_tok.max(axis=0) + 1e-12)


class TestFuse:
    def test_golden_reference(self):
        ckpt = load_checkpoint(DATA / "fuse_golden.evlc")
        params = FusionParams.from_blocks(ckpt.tensors, "param", num_heads=2)
        out = fuse(ckpt.tensors["input.z_img"], ckpt.tensors["input.e_text"], params).data
        np.testing.assert_allclose(out, ckpt.tensors["output.z_fused"], rtol=0, atol=1e-12)

    def test_identity_branches_reduce_to_layer_norm(self):
        p = _identity_fusion(4, 3)
        z = np.random.default_rng(14).standard_normal((3, 2, 4))
        e = np.random.default_rng(15).standard_normal((2, 3))
        expected = layer_norm_rows(z.reshape(6, 4), np.ones(4), np.zeros(4)).reshape(3, 2, 4)
        np.testing.assert_allclose(fuse(z, e, p).data, expected, atol=1e-12)

    def test_matches_loop_oracle_batched(self, small_modules):
        fusion, _, table = small_modules
        rng = np.random.default_rng(16)
        z = rng.standard_normal((3, 2, 2, 3))
        e = table.table.data[[0, 2, 1]]
        out = fuse(z, e, fusion).data
        for i in range(3):
            np.testing.assert_allclose(out[i], fuse_single(z[i], e[i], fusion.arrays(), 2), atol=1e-12)

    def test_deterministic(self, small_modules):
        fusion, _, table = small_modules
        z = np.random.default_rng(17).standard_normal((2, 2, 3))
        assert np.array_equal(fuse(z, table.table.data[0], fusion).data, fuse(z, table.table.data[0], fusion).data)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(1, 4), st.integers(1, 3),
           st.sampled_from([1, 2, 4]))
    def test_shape_preserved(self, h, w, c, L, unit, heads):
        d = unit * heads * 2
        p = init_fusion(c, 3, d=d, num_heads=heads, seed=h + w)
        z = np.random.default_rng(0).standard_normal((2, h, w, c))
        e = np.random.default_rng(1).standard_normal((2, L, 3))
        assert fuse(z, e, p).shape == z.shape

    def test_gradient_of_squared_norm(self, small_modules):
        fusion, _, table = small_modules
        z = np.random.default_rng(18).standard_normal((2, 2, 3))
        e = Tensor(table.table.data[1].copy(), requires_grad=True)
        fusion.requires_grad_(True)
        loss = lambda: tn.sum_(tn.square(fuse(z, e, fusion)))  # noqa: E731
        assert tn.grad_check_params(loss, fusion.parameters() + [e]) < 1e-5

    def test_initial_scale_tracks_latent_scale(self):
        rng = np.random.default_rng(19)
        z = 0.7 * rng.standard_normal((16, 8, 8, 8))
        e = rng.standard_normal((16, 4, 32))
        p = init_fusion(8, 32, seed=0, latent_scale=0.7)
        ratio = fuse(z, e, p).data.std() / z.std()
        assert 0.5 < ratio < 2.0


class TestProjectLatent:
    def test_unit_norm(self):
        proj = randomize(init_projector(3, 5), 20)
        out = project_latent(np.random.default_rng(21).standard_normal((4, 2, 2, 3)), proj).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-9)

    def test_zero_input_is_eps_safe(self):
        proj = init_projector(3, 5)
        out = project_latent(np.zeros((2, 2, 3)), proj).data
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out, project_latent(np.zeros((2, 2, 3)), proj).data)

    def test_gradient(self):
        proj = randomize(init_projector(3, 5), 22)
        w = np.random.default_rng(23).standard_normal((2, 5))
        f = lambda z: tn.sum_(tn.mul(project_latent(z, proj), w))  # noqa: E731
        assert tn.grad_check(f, np.random.default_rng(24).standard_normal((2, 2, 2, 3))) < 1e-5

    def test_gradient_wrt_projector(self):
        proj = randomize(init_projector(3, 5), 25).requires_grad_(True)
        z = np.random.default_rng(26).standard_normal((2, 3, 1, 3))
        w = np.random.default_rng(27).standard_normal((2, 5))
        assert tn.grad_check_params(lambda: tn.sum_(tn.mul(project_latent(z, proj), w)), proj.parameters()) < 1e-5


class TestParamsContainer:
    def test_from_blocks_round_trip(self, small_modules):
        fusion, _, _ = small_modules
        back = FusionParams.from_blocks(fusion.to_blocks("f"), "f", num_heads=2)
        assert back.checksum() == fusion.checksum()

    def test_layer_norm_defaults(self):
        p = init_fusion(3, 4, d=8, num_heads=2)
        assert np.array_equal(p.ln_gamma.data, ones(8).data)
        assert np.array_equal(p.ln_beta.data, np.zeros(8))
