import numpy as np
import pytest

from stattok import tensor as T
from stattok.model import (AdaptiveTokenizer, TokenizerConfig, brute_force_nearest,
                           config_from_array, config_to_array, decode_codes, encode_corpus)
from stattok.tensor import Tensor

SMALL = TokenizerConfig(image_size=16, patch_size=4, hidden_dim=32, latent_len=8,
                        code_dim=4, codebook_size=32, enc_layers=2, dec_layers=2,
                        heads=2, prob_head_hidden=16)


@pytest.fixture(scope="module")
def model():
    return AdaptiveTokenizer(SMALL, np.random.default_rng(0))


@pytest.fixture(scope="module")
def batch():
    from stattok.data import generate_synthetic
    return generate_synthetic(1, 8, 16, 4, patch_size=4).pixels


class TestConfig:
    def test_geometry_validation(self):
        with pytest.raises(ValueError):
            TokenizerConfig(image_size=30, patch_size=4)
        with pytest.raises(ValueError):
            TokenizerConfig(hidden_dim=30, heads=4)

    def test_round_trip_through_array(self):
        back = config_from_array(config_to_array(SMALL))
        assert back == SMALL


class TestEncode:
    def test_shapes(self, model, batch):
        z_l, p = model.encode(batch)
        assert z_l.shape == (8, 8, 32)
        assert p.shape == (8, 8)

    def test_probabilities_clamped_open_interval(self, model, batch):
        _, p = model.encode(batch)
        assert np.all(p.data >= 1e-6) and np.all(p.data <= 1 - 1e-6)

    def test_identical_rows_for_identical_images(self, model, batch):
        dup = np.concatenate([batch[:1], batch[:1], batch[2:4]])
        z_l, p = model.encode(dup)
        np.testing.assert_array_equal(z_l.data[0], z_l.data[1])
        np.testing.assert_array_equal(p.data[0], p.data[1])

    def test_batch_permutation_equivariance(self, model, batch):
        z_a, p_a = model.encode(batch)
        perm = np.array([3, 0, 2, 1, 7, 5, 6, 4])
        z_b, p_b = model.encode(batch[perm])
        np.testing.assert_array_equal(z_a.data[perm], z_b.data)
        np.testing.assert_array_equal(p_a.data[perm], p_b.data)

    def test_geometry_mismatch(self, model):
        with pytest.raises(T.ShapeError):
            model.encode(np.zeros((2, 3, 8, 8), dtype=np.float32))


class TestQuantizer:
    def test_two_entry_oracle(self):
        m = AdaptiveTokenizer(SMALL, np.random.default_rng(0))
        m.codebook.data = np.zeros((32, 4), dtype=np.float32)
        m.codebook.data[0] = [0, 0, 0, 0]
        m.codebook.data[1] = [1, 1, 1, 1]
        m.codebook.data[2:] = 100.0
        # bypass proj: feed z_l whose projection is controlled via identity-ish
        # check the index rule directly on the distance computation instead
        vecs = np.array([[[0.9, 0.8, 0.9, 0.8]]], dtype=np.float32)
        assert brute_force_nearest(vecs, m.codebook.data)[0, 0] == 1

    def test_matches_brute_force_on_model_path(self, model, batch):
        z_l, _ = model.encode(batch)
        quant = model.quantize(z_l)
        proj = model.proj_in(z_l)
        np.testing.assert_array_equal(quant.indices, brute_force_nearest(proj.data, model.codebook.data))

    def test_tie_breaks_to_lowest_index(self):
        m = AdaptiveTokenizer(SMALL, np.random.default_rng(3))
        cb = np.full((32, 4), 50.0, dtype=np.float32)
        cb[5] = [1, 0, 0, 0]
        cb[9] = [-1, 0, 0, 0]   # exactly equidistant from the origin
        m.codebook.data = cb
        vecs = np.zeros((1, 1, 4), dtype=np.float32)
        assert brute_force_nearest(vecs, cb)[0, 0] == 5

    def test_forward_value_is_exact_codebook_row(self, model, batch):
        z_l, _ = model.encode(batch)
        quant = model.quantize(z_l)
        np.testing.assert_array_equal(quant.z_q.data, model.codebook.data[quant.indices])

    def test_zero_distance_means_zero_losses(self):
        m = AdaptiveTokenizer(SMALL, np.random.default_rng(4))
        z_l = Tensor(np.random.default_rng(5).normal(size=(2, 8, 32)).astype(np.float32))
        proj = m.proj_in(z_l)
        # plant every projected vector into the codebook
        m.codebook.data[: 2 * 8] = proj.data.reshape(-1, 4)
        quant = m.quantize(z_l)
        assert float(quant.codebook_loss.data) == 0.0
        assert float(quant.commitment_loss.data) == 0.0

    def test_codebook_learns_only_through_codebook_loss(self, batch):
        m = AdaptiveTokenizer(SMALL, np.random.default_rng(6))
        out = m.forward_stage2(batch, np.random.default_rng(0))
        from stattok.losses import recon_loss
        scalar, _ = recon_loss(batch, out.x_hat)
        m.zero_grad()
        T.add(scalar, out.quantized.commitment_loss).backward()
        assert m.codebook.grad is None  # straight-through blocks this path
        m.zero_grad()
        out2 = m.forward_stage2(batch, np.random.default_rng(0))
        out2.quantized.codebook_loss.backward()
        assert m.codebook.grad is not None and np.any(m.codebook.grad != 0)


class TestDecode:
    def test_output_shape_and_range(self, model, batch):
        z_l, p = model.encode(batch)
        quant = model.quantize(z_l)
        x_hat = model.decode(quant.z_q)
        assert x_hat.shape == batch.shape
        assert x_hat.data.min() >= -1.0 and x_hat.data.max() <= 1.0

    def test_all_zero_latents_give_finite_image(self, model):
        x_hat = model.decode(Tensor(np.zeros((2, 8, 4), dtype=np.float32)))
        assert np.isfinite(x_hat.data).all()

    def test_deterministic(self, model):
        z = Tensor(np.random.default_rng(7).normal(size=(2, 8, 4)).astype(np.float32))
        a = model.decode(z).data
        b = model.decode(z).data
        assert np.array_equal(a, b)

    def test_masked_positions_are_inert(self, model, batch):
        z_l, _ = model.encode(batch)
        quant = model.quantize(z_l)
        mask = np.ones((8, 8), dtype=np.float32)
        mask[:, 5:] = 0.0
        base = model.decode(model.apply_mask(quant.z_q, mask)).data
        tampered = Tensor(quant.z_q.data.copy())
        tampered.data[:, 5:, :] = 1234.5  # content of dropped tokens
        other = model.decode(model.apply_mask(tampered, mask)).data
        assert np.array_equal(base, other)


class TestStageForwards:
    def test_stage1_full_keep_equals_identity_mask(self, model, batch):
        x_a, _, _ = model.forward_stage1(batch, SMALL.latent_len)
        z_l, _ = model.encode(batch)
        x_b = model.decode(model.quantize(z_l).z_q)
        np.testing.assert_array_equal(x_a.data, x_b.data)

    def test_stage1_prefix_mask_zeroes_tail(self, model, batch):
        x_hat, _, quant = model.forward_stage1(batch, 3)
        assert x_hat.shape == batch.shape

    def test_stage1_k_out_of_range(self, model, batch):
        with pytest.raises(ValueError):
            model.forward_stage1(batch, 0)
        with pytest.raises(ValueError):
            model.forward_stage1(batch, SMALL.latent_len + 1)

    def test_stage2_mask_semantics(self, model, batch):
        out = model.forward_stage2(batch, np.random.default_rng(8))
        assert set(np.unique(out.mask)).issubset({0.0, 1.0})
        np.testing.assert_allclose(out.token_expectation.data, out.p.data.sum(axis=1), rtol=1e-5)

    def test_stage2_high_bias_keeps_everything(self, batch):
        m = AdaptiveTokenizer(SMALL, np.random.default_rng(9))
        m.head_fc2.bias.data[:] = 12.0  # p ~ 0.999994; all-ones w.p. ~0.994 per draw
        out = m.forward_stage2(batch, np.random.default_rng(10))
        assert out.mask.sum() == out.mask.size

    def test_stage2_ste_routes_ones_to_p(self, model, batch):
        out = model.forward_stage2(batch, np.random.default_rng(11))
        model.zero_grad()
        gate = T.straight_through(Tensor(out.mask), out.p)
        T.tsum(gate).backward()
        for name, param in model.params():
            if name.startswith("head_fc"):
                assert param.grad is not None

    def test_stage2_all_params_receive_gradient_except_blocked_codebook(self, batch):
        from stattok.losses import (LossWeights, composite, content_loss, decrease_loss,
                                    recon_loss, sparse_loss)
        m = AdaptiveTokenizer(SMALL, np.random.default_rng(12))
        out = m.forward_stage2(batch, np.random.default_rng(13))
        scalar, per = recon_loss(batch, out.x_hat)
        parts = {"recon": scalar, "codebook": out.quantized.codebook_loss,
                 "commit": out.quantized.commitment_loss,
                 "content": content_loss(per.data, out.token_expectation),
                 "decrease": decrease_loss(out.p), "sparse": sparse_loss(out.p, 0.5)}
        rep = composite(2, parts, LossWeights())
        m.zero_grad()
        rep.total.backward()
        missing = [n for n, p in m.params() if p.grad is None]
        assert missing == []


class TestCorpusHelpers:
    def test_encode_corpus_matches_batched_encode(self, model, batch):
        codes, probs = encode_corpus(model, batch, batch_size=3)
        z_l, p = model.encode(batch)
        quant = model.quantize(z_l)
        np.testing.assert_array_equal(codes, quant.indices)
        np.testing.assert_array_equal(probs, p.data)

    def test_decode_codes_matches_full_forward(self, model, batch):
        codes, probs = encode_corpus(model, batch)
        mask = np.ones_like(probs)
        via_codes = decode_codes(model, codes, mask, batch_size=5)
        z_l, _ = model.encode(batch)
        direct = model.decode(model.quantize(z_l).z_q).data
        np.testing.assert_array_equal(via_codes, direct)
