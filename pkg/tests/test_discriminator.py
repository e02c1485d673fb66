import numpy as np
import pytest

from seqgan import autodiff as ad
from seqgan import discriminator as disc
from seqgan.captioner import InputError, TokenSequence
from conftest import central_difference, rel_err


def tiny_config(**kw):
    defaults = dict(vocab_size=6, hidden_dim=4, num_crops=3, feature_dim=3)
    defaults.update(kw)
    return disc.DiscriminatorConfig(**defaults)


def rand_feats(config, rng):
    return rng.uniform(-1, 1, (config.num_crops, config.feature_dim))


class TestEmbedCaption:
    def test_single_token_single_row(self):
        params = disc.init_coatt(tiny_config(), 0)
        H = disc.embed_caption(params, TokenSequence([2], True))
        assert H.shape == (1, params.config.hidden_dim)

    def test_deterministic(self):
        params = disc.init_coatt(tiny_config(), 1)
        seq = TokenSequence([2, 3, 1], True)
        np.testing.assert_array_equal(disc.embed_caption(params, seq),
                                      disc.embed_caption(params, seq))

    def test_prefix_property(self):
        params = disc.init_jointemb(tiny_config(), 2)
        seq = TokenSequence([2, 4, 3, 1], True)
        full = disc.embed_caption(params, seq)
        for t in range(1, len(seq.tokens) + 1):
            part = disc.embed_caption(params, TokenSequence(seq.tokens[:t], False))
            np.testing.assert_allclose(full[:t], part, atol=1e-15)

    def test_empty_rejected(self):
        params = disc.init_coatt(tiny_config(), 0)
        with pytest.raises(InputError):
            disc.embed_caption(params, TokenSequence([], False))


class TestCoattScore:
    def test_attention_simplexes(self):
        config = tiny_config()
        params = disc.init_coatt(config, 3)
        rng = np.random.default_rng(0)
        seq = TokenSequence([2, 3, 4, 1], True)
        score, alpha, beta, e_img, e_cap = disc.coatt_score(params, rand_feats(config, rng), seq)
        assert 0.0 < score < 1.0
        assert alpha.shape == (config.num_crops,) and beta.shape == (len(seq.tokens),)
        assert abs(alpha.sum() - 1.0) < 1e-12 and abs(beta.sum() - 1.0) < 1e-12
        assert np.all(alpha >= 0) and np.all(beta >= 0)
        assert e_img.shape == (config.hidden_dim,) and e_cap.shape == (config.hidden_dim,)

    def test_zero_params_half_score(self):
        config = tiny_config()
        params = disc.init_coatt(config, 0)
        for arr in params.arrays.values():
            arr[:] = 0.0
        score, _, _, _, _ = disc.coatt_score(
            params, np.zeros((config.num_crops, config.feature_dim)),
            TokenSequence([2, 1], True))
        assert score == 0.5

    def test_crop_permutation_invariance(self):
        config = tiny_config(num_crops=4)
        params = disc.init_coatt(config, 5)
        rng = np.random.default_rng(1)
        feats = rand_feats(config, rng)
        seq = TokenSequence([3, 2, 1], True)
        base_score, base_alpha, base_beta, _, _ = disc.coatt_score(params, feats, seq)
        for _ in range(4):
            perm = rng.permutation(config.num_crops)
            s, a, b, _, _ = disc.coatt_score(params, feats[perm], seq)
            assert abs(s - base_score) <= 1e-12
            np.testing.assert_allclose(a, base_alpha[perm], atol=1e-12)
            np.testing.assert_allclose(b, base_beta, atol=1e-12)

    def test_shape_mismatch(self):
        params = disc.init_coatt(tiny_config(), 0)
        with pytest.raises(InputError):
            disc.coatt_score(params, np.zeros((2, 2)), TokenSequence([2], True))

    def test_param_gradients_vs_fd(self):
        config = tiny_config()
        params = disc.init_coatt(config, 7)
        feats = rand_feats(config, np.random.default_rng(2))
        seq = TokenSequence([2, 4, 1], True)

        tape = ad.Tape()
        bound = disc.BoundDiscriminator(tape, params)
        root = ad.log(bound.score_sequence(feats, seq)["score"])
        ad.backward(tape, root)

        for name in params.arrays:
            def f(arr, name=name):
                trial = params.copy()
                trial.arrays[name] = arr
                return float(np.log(disc.coatt_score(trial, feats, seq)[0]))

            fd = central_difference(f, params.arrays[name].copy())
            assert rel_err(bound.p[name].grad, fd) < 1e-4, name


class TestJointEmbScore:
    def test_crop_permutation_exact(self):
        config = tiny_config(num_crops=5)
        params = disc.init_jointemb(config, 4)
        rng = np.random.default_rng(3)
        feats = rand_feats(config, rng)
        seq = TokenSequence([2, 3, 1], True)
        base = disc.jointemb_score(params, feats, seq)
        for _ in range(3):
            assert abs(disc.jointemb_score(params, feats[rng.permutation(5)], seq)
                       - base) <= 1e-12

    def test_zero_params_half_score(self):
        config = tiny_config()
        params = disc.init_jointemb(config, 0)
        for arr in params.arrays.values():
            arr[:] = 0.0
        assert disc.jointemb_score(params, np.zeros((config.num_crops, config.feature_dim)),
                                   TokenSequence([2], True)) == 0.5

    def test_param_gradients_vs_fd(self):
        config = tiny_config()
        params = disc.init_jointemb(config, 9)
        feats = rand_feats(config, np.random.default_rng(4))
        seq = TokenSequence([4, 2, 1], True)

        tape = ad.Tape()
        bound = disc.BoundDiscriminator(tape, params)
        root = ad.log(bound.score_sequence(feats, seq)["score"])
        ad.backward(tape, root)

        for name in params.arrays:
            def f(arr, name=name):
                trial = params.copy()
                trial.arrays[name] = arr
                return float(np.log(disc.jointemb_score(trial, feats, seq)))

            fd = central_difference(f, params.arrays[name].copy())
            assert rel_err(bound.p[name].grad, fd) < 1e-4, name

    def test_variant_mixup_rejected(self):
        coatt = disc.init_coatt(tiny_config(), 0)
        with pytest.raises(InputError):
            disc.jointemb_score(coatt, np.zeros((3, 3)), TokenSequence([2], True))


class TestScoreSoft:
    def test_onehot_matches_hard(self):
        config = tiny_config()
        rng = np.random.default_rng(5)
        feats = rand_feats(config, rng)
        seq = TokenSequence([2, 5, 3, 1], True)
        onehot = np.zeros((len(seq.tokens), config.vocab_size))
        onehot[np.arange(len(seq.tokens)), seq.tokens] = 1.0
        for params in (disc.init_coatt(config, 6), disc.init_jointemb(config, 6)):
            hard = disc.score(params, feats, seq)
            soft = disc.score_soft(params, feats, onehot)
            assert abs(hard - soft) <= 1e-12

    def test_single_vocab_uniform_row(self):
        # K = 1 forces the uniform row to equal the lone one-hot row
        config = tiny_config(vocab_size=1)
        params = disc.init_coatt(config, 1)
        feats = rand_feats(config, np.random.default_rng(6))
        hard = disc.score(params, feats, TokenSequence([0], True))
        soft = disc.score_soft(params, feats, np.ones((1, 1)))
        assert abs(hard - soft) <= 1e-12

    def test_negative_entries_rejected(self):
        params = disc.init_coatt(tiny_config(), 0)
        bad = np.full((2, 6), 1.0 / 6.0)
        bad[0, 0] = -0.1
        with pytest.raises(InputError):
            disc.score_soft(params, np.zeros((3, 3)), bad)

    def test_gradient_wrt_soft_tokens_vs_fd(self):
        config = tiny_config()
        params = disc.init_coatt(config, 8)
        feats = rand_feats(config, np.random.default_rng(7))
        rng = np.random.default_rng(8)
        soft0 = rng.dirichlet(np.ones(config.vocab_size), size=3)

        tape = ad.Tape()
        bound = disc.BoundDiscriminator(tape, params)
        rows = [tape.tensor(soft0[t : t + 1]) for t in range(3)]
        root = ad.log(bound.score_soft_rows(feats, rows)["score"])
        ad.backward(tape, root)
        analytic = np.vstack([r.grad for r in rows])

        fd = central_difference(
            lambda s: float(np.log(disc.score_soft(params, feats, s))), soft0.copy())
        assert rel_err(analytic, fd) < 1e-4


class TestScoresStrictlyInUnitInterval:
    def test_random_sweep(self):
        config = tiny_config()
        rng = np.random.default_rng(9)
        for seed in range(5):
            for params in (disc.init_coatt(config, seed), disc.init_jointemb(config, seed)):
                feats = rand_feats(config, rng)
                toks = [int(t) for t in rng.integers(0, config.vocab_size,
                                                     size=rng.integers(1, 6))]
                s = disc.score(params, feats, TokenSequence(toks, True))
                assert 0.0 < s < 1.0
