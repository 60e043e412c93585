"""Generator tests: sizing, oracle equivalence, identities, gradient flow."""

import numpy as np
import pytest

from dynanchor import autodiff as ad
from dynanchor.anchors import AnchorEncoding
from dynanchor.autodiff import Tensor, backward
from dynanchor.generator import (
    DATA_DEPENDENT,
    DATA_INDEPENDENT,
    FilterBank,
    flatten_bank,
    generate,
    generate_dd,
    generate_theta,
    generate_theta_many,
    init_generator,
    theta_dim,
    two_head_generate,
    unflatten_bank,
)

from conftest import finite_difference_grad


def naive_residual_theta(theta_star, W1, W2, b):
    """Independent oracle: theta* + W2 relu(W1 b) with explicit loops."""
    m = W1.shape[0]
    hidden = np.zeros(m)
    for i in range(m):
        acc = sum(W1[i, j] * b[j] for j in range(2))
        hidden[i] = acc if acc > 0 else 0.0
    out = theta_star.copy()
    for d in range(W2.shape[0]):
        out[d] += sum(W2[d, i] * hidden[i] for i in range(m))
    return out


def _rand_params(rng, block="full", C=2, F=2, m=4, variant=DATA_INDEPENDENT):
    return init_generator(block, None if block == "reg" else C, F, m, rng,
                          variant=variant)


class TestSizing:
    def test_paper_scale_dimension(self):
        assert theta_dim(80, 256) == 80 * 2304 + 80 + 4 * 2304 + 4 == 193_620

    def test_minimal_dimension(self):
        assert theta_dim(1, 1) == 9 + 1 + 36 + 4 == 50

    def test_layout_round_trip(self):
        rng = np.random.default_rng(0)
        c, f = 3, 2
        bank = FilterBank(
            cls_filters=Tensor(rng.normal(size=(c, f, 3, 3))),
            cls_bias=Tensor(rng.normal(size=c)),
            reg_filters=Tensor(rng.normal(size=(4, f, 3, 3))),
            reg_bias=Tensor(rng.normal(size=4)),
        )
        back = unflatten_bank(flatten_bank(bank), c, f)
        for name in ("cls_filters", "cls_bias", "reg_filters", "reg_bias"):
            np.testing.assert_array_equal(
                getattr(back, name).data, getattr(bank, name).data)

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            theta_dim(0, 4)


class TestGenerate:
    def test_zero_residual_gives_theta_star(self):
        rng = np.random.default_rng(1)
        params = _rand_params(rng)
        params.W2.data[...] = 0.0
        for _ in range(10):
            enc = AnchorEncoding(*rng.normal(size=2))
            theta = generate_theta(params, enc)
            np.testing.assert_array_equal(theta.data, params.theta_star.data)

    def test_identity_at_zero_encoding_bit_exact(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            params = _rand_params(rng, C=1, F=1, m=3)
            theta = generate_theta(params, AnchorEncoding(0.0, 0.0))
            assert theta.data.tobytes() == params.theta_star.data.tobytes()

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            m = int(rng.integers(1, 9))
            theta_star = rng.normal(size=10)
            W1 = rng.normal(size=(m, 2))
            W2 = rng.normal(size=(10, m))
            b = rng.normal(size=2)
            params = _rand_params(rng, m=m)
            params.theta_star = Tensor(theta_star, requires_grad=True)
            params.W1 = Tensor(W1, requires_grad=True)
            params.W2 = Tensor(W2, requires_grad=True)
            got = generate_theta(params, AnchorEncoding(*b)).data
            np.testing.assert_allclose(
                got, naive_residual_theta(theta_star, W1, W2, b), atol=1e-12)

    def test_full_bank_shapes(self):
        rng = np.random.default_rng(4)
        params = _rand_params(rng, C=3, F=2)
        bank = generate(params, AnchorEncoding(0.1, -0.2))
        assert bank.cls_filters.data.shape == (3, 2, 3, 3)
        assert bank.cls_bias.data.shape == (3,)
        assert bank.reg_filters.data.shape == (4, 2, 3, 3)
        assert bank.reg_bias.data.shape == (4,)

    def test_variant_mismatch(self):
        rng = np.random.default_rng(5)
        params = _rand_params(rng, variant=DATA_DEPENDENT)
        with pytest.raises(ValueError, match="data-independent"):
            generate(params, AnchorEncoding(0, 0))

    def test_batched_equals_single(self):
        rng = np.random.default_rng(6)
        params = _rand_params(rng, C=2, F=3, m=5)
        encs = rng.normal(size=(4, 2))
        many = generate_theta_many(params, encs).data
        for i, e in enumerate(encs):
            single = generate_theta(params, AnchorEncoding(*e)).data
            np.testing.assert_allclose(many[i], single, atol=1e-13)


class TestGenerateDataDependent:
    def test_zero_w12_reduces_to_data_independent(self):
        rng = np.random.default_rng(7)
        dd = _rand_params(rng, variant=DATA_DEPENDENT, C=2, F=3, m=4)
        dd.W12.data[...] = 0.0
        di = _rand_params(rng, variant=DATA_INDEPENDENT, C=2, F=3, m=4)
        di.theta_star = dd.theta_star
        di.W2 = dd.W2
        di.W1 = dd.W11
        feature = Tensor(rng.normal(size=(3, 4, 4)))
        enc = AnchorEncoding(0.3, -0.4)
        np.testing.assert_array_equal(
            generate_theta(dd, enc, feature).data,
            generate_theta(di, enc).data)

    def test_constant_feature_matches_oracle(self):
        rng = np.random.default_rng(8)
        dd = _rand_params(rng, variant=DATA_DEPENDENT, C=1, F=2, m=3)
        c = 1.7
        feature = Tensor(np.full((2, 5, 5), c))
        b = np.array([0.2, -0.3])
        # oracle: pooled vector is all-c, so hidden = relu(W11 b + W12 @ [c, c])
        pre = dd.W11.data @ b + dd.W12.data @ np.full(2, c)
        hidden = np.maximum(pre, 0.0)
        expect = dd.theta_star.data + dd.W2.data @ hidden
        got = generate_theta(dd, AnchorEncoding(*b), feature).data
        np.testing.assert_allclose(got, expect, atol=1e-12)

    def test_zero_w2_ignores_feature(self):
        rng = np.random.default_rng(9)
        dd = _rand_params(rng, variant=DATA_DEPENDENT)
        dd.W2.data[...] = 0.0
        f1 = Tensor(rng.normal(size=(2, 3, 3)))
        f2 = Tensor(rng.normal(size=(2, 3, 3)))
        enc = AnchorEncoding(0.5, 0.5)
        np.testing.assert_array_equal(
            generate_theta(dd, enc, f1).data, dd.theta_star.data)
        np.testing.assert_array_equal(
            generate_theta(dd, enc, f2).data, dd.theta_star.data)

    def test_channel_mismatch(self):
        rng = np.random.default_rng(10)
        dd = _rand_params(rng, variant=DATA_DEPENDENT, F=3)
        with pytest.raises(ad.ShapeError, match="channels"):
            generate_theta(dd, AnchorEncoding(0, 0), Tensor(np.zeros((5, 2, 2))))

    def test_full_bank(self):
        rng = np.random.default_rng(11)
        dd = _rand_params(rng, variant=DATA_DEPENDENT, C=2, F=2)
        bank = generate_dd(dd, AnchorEncoding(0.1, 0.1), Tensor(np.ones((2, 4, 4))))
        assert bank.num_classes == 2


class TestTwoHeadGenerate:
    def _pair(self, rng, C=2, F=2, m=3, variant=DATA_INDEPENDENT):
        cls = init_generator("cls", C, F, m, rng, variant=variant)
        reg = init_generator("reg", None, F, m, rng, variant=variant)
        return cls, reg

    def test_zero_residuals_concatenate_theta_stars(self):
        rng = np.random.default_rng(12)
        cls, reg = self._pair(rng)
        cls.W2.data[...] = 0.0
        reg.W2.data[...] = 0.0
        bank = two_head_generate(cls, reg, AnchorEncoding(0.7, -0.7))
        theta = flatten_bank(bank).data
        np.testing.assert_array_equal(
            theta, np.concatenate([cls.theta_star.data, reg.theta_star.data]))

    def test_halves_are_independent(self):
        rng = np.random.default_rng(13)
        cls, reg = self._pair(rng)
        reg.W2.data[...] = 0.0
        enc = AnchorEncoding(0.4, 0.2)
        bank = two_head_generate(cls, reg, enc)
        reg_half = np.concatenate(
            [bank.reg_filters.data.ravel(), bank.reg_bias.data])
        assert reg_half.tobytes() == reg.theta_star.data.tobytes()
        # perturbing the cls generator must not move the reg half
        cls.W2.data += 1.0
        bank2 = two_head_generate(cls, reg, enc)
        reg_half2 = np.concatenate(
            [bank2.reg_filters.data.ravel(), bank2.reg_bias.data])
        assert reg_half2.tobytes() == reg_half.tobytes()

    def test_matches_manual_concatenation(self):
        rng = np.random.default_rng(14)
        cls, reg = self._pair(rng, C=3, F=2, m=4)
        enc = AnchorEncoding(-0.3, 0.6)
        bank = two_head_generate(cls, reg, enc)
        manual = np.concatenate([
            generate_theta(cls, enc).data, generate_theta(reg, enc).data])
        np.testing.assert_allclose(flatten_bank(bank).data, manual, atol=1e-13)

    def test_block_mismatch_rejected(self):
        rng = np.random.default_rng(15)
        cls, reg = self._pair(rng)
        with pytest.raises(ValueError, match="block"):
            two_head_generate(reg, cls, AnchorEncoding(0, 0))


class TestProperties:
    def test_lipschitz_continuity(self):
        # ||G(b) - G(b')|| <= ||W2||_2 ||W1||_2 ||b - b'|| (relu is 1-Lipschitz)
        rng = np.random.default_rng(16)
        params = _rand_params(rng, C=2, F=3, m=6)
        L = (np.linalg.norm(params.W2.data, 2) * np.linalg.norm(params.W1.data, 2))
        for _ in range(50):
            b1, b2 = rng.normal(size=(2, 2))
            t1 = generate_theta(params, AnchorEncoding(*b1)).data
            t2 = generate_theta(params, AnchorEncoding(*b2)).data
            assert np.linalg.norm(t1 - t2) <= L * np.linalg.norm(b1 - b2) + 1e-12

    def test_gradients_flow_to_all_parts(self):
        rng = np.random.default_rng(17)
        params = _rand_params(rng, C=1, F=2, m=3)
        feature = Tensor(rng.normal(size=(2, 4, 4)))
        w = rng.normal(size=(1, 4, 4))
        enc = AnchorEncoding(0.3, -0.1)

        def loss_fn():
            bank = generate(params, enc)
            out = ad.conv2d_3x3(feature, bank.cls_filters, bank.cls_bias)
            return ad.weighted_sum(ad.sigmoid(out), w)

        targets = [params.theta_star, params.W1, params.W2]
        for t in targets:
            t.zero_grad()
        backward(loss_fn())
        for t in targets:
            fd = finite_difference_grad(loss_fn, t)
            np.testing.assert_allclose(t.grad, fd, rtol=1e-6, atol=1e-9)
            assert np.any(t.grad != 0.0)

    def test_dd_gradients_flow_through_pooled_feature(self):
        rng = np.random.default_rng(18)
        params = _rand_params(rng, C=1, F=2, m=3, variant=DATA_DEPENDENT)
        feature = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
        w = rng.normal(size=(1, 4, 4))
        enc = AnchorEncoding(0.2, 0.2)

        def loss_fn():
            bank = generate_dd(params, enc, feature)
            out = ad.conv2d_3x3(feature, bank.cls_filters, bank.cls_bias)
            return ad.weighted_sum(ad.sigmoid(out), w)

        targets = [params.theta_star, params.W11, params.W12, params.W2, feature]
        for t in targets:
            t.zero_grad()
        backward(loss_fn())
        for t in targets:
            fd = finite_difference_grad(loss_fn, t)
            np.testing.assert_allclose(t.grad, fd, rtol=1e-6, atol=1e-9)

    def test_store_registration_uses_prefixes(self):
        rng = np.random.default_rng(19)
        store = ad.ParamStore()
        init_generator("cls", 2, 2, 3, rng, store=store, prefix="gen.cls.")
        init_generator("reg", None, 2, 3, rng, store=store, prefix="gen.reg.")
        assert "gen.cls.theta_star" in store
        assert "gen.reg.W1" in store
        assert all(n.startswith("gen.") for n in store.names())

    def test_cls_bias_prior_initialization(self):
        rng = np.random.default_rng(20)
        params = _rand_params(rng, C=3, F=2)
        c, f = 3, 2
        bias = params.theta_star.data[c * f * 9:c * f * 9 + c]
        np.testing.assert_allclose(bias, -np.log(99.0), rtol=1e-12)
