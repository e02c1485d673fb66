import numpy as np
import pytest

from seqgan import data as dat
from seqgan import discriminator as disc
from seqgan import training as tr
from seqgan.captioner import CaptionerConfig, init_params


def small_dataset(seed=0, **kw):
    args = dict(seed=seed, n_objects=4, n_contexts=3, n_images=12,
                num_crops=3, feature_dim=10)
    args.update(kw)
    return dat.generate_dataset(**args)


class TestGenerateDataset:
    def test_ooc_pairs_disjoint_from_train(self):
        ds = small_dataset()
        assert ds.ooc_pairs and ds.train_pairs
        assert not (ds.ooc_pairs & ds.train_pairs)
        for scene, _ in ds.ooc:
            assert all(pair in ds.ooc_pairs for pair in scene.labels)
        for name in ("train", "val", "test"):
            for scene, _ in ds.split(name):
                assert all(pair in ds.train_pairs for pair in scene.labels)

    def test_same_seed_identical(self):
        a, b = small_dataset(seed=9), small_dataset(seed=9)
        for name in ("train", "val", "test", "ooc"):
            for (sa, ra), (sb, rb) in zip(a.split(name), b.split(name)):
                np.testing.assert_array_equal(sa.features, sb.features)
                assert sa.labels == sb.labels and sa.image_id == sb.image_id
                assert [r.tokens for r in ra] == [r.tokens for r in rb]
        assert a.vocab.words == b.vocab.words

    def test_different_seed_differs(self):
        a, b = small_dataset(seed=1), small_dataset(seed=2)
        diff = any(not np.array_equal(sa.features, sb.features)
                   for (sa, _), (sb, _) in zip(a.train, b.train))
        assert diff

    def test_reference_protocol(self):
        ds = small_dataset()
        K = ds.vocab.size
        for name in ("train", "val", "test", "ooc"):
            for scene, refs in ds.split(name):
                assert len(refs) == 5
                for r in refs:
                    assert r.terminated
                    assert r.tokens[-1] == ds.vocab.eos_id
                    assert 5 <= len(r.tokens) <= 9  # 4-8 words plus EOS
                    assert all(0 <= t < K for t in r.tokens)
                    assert ds.vocab.bos_id not in r.tokens

    def test_scene_shapes_and_noise_structure(self):
        ds = small_dataset(seed=4)
        scene, _ = ds.train[0]
        assert scene.features.shape == (3, 10)
        # crops of one scene differ only by noise around a shared concept
        spread = np.std(scene.features, axis=0).max()
        assert 0 < spread < 0.5

    def test_vocab_size_in_band(self):
        ds = dat.generate_dataset(seed=0, n_objects=8, n_contexts=5,
                                  n_images=12, num_crops=4, feature_dim=16)
        assert 40 <= ds.vocab.size <= 200

    def test_infeasible_requests_rejected(self):
        with pytest.raises(dat.ParameterError):
            dat.generate_dataset(seed=0, n_objects=1, n_contexts=2, n_images=8)
        with pytest.raises(dat.ParameterError):
            dat.generate_dataset(seed=0, n_objects=6, n_contexts=4,
                                 n_images=8, feature_dim=6)


class TestFeatureFile:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = [rng.normal(size=(3, 5)).astype(np.float32) for _ in range(4)]
        path = tmp_path / "feats.sgf"
        dat.write_features(path, arrays)
        scenes = dat.load_features(path)
        assert len(scenes) == 4
        for scene, arr in zip(scenes, arrays):
            np.testing.assert_array_equal(scene.features, arr.astype(np.float64))
        # write -> read -> write is byte identical
        path2 = tmp_path / "feats2.sgf"
        dat.write_features(path2, [s.features for s in scenes])
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_file_is_format_error(self, tmp_path):
        path = tmp_path / "feats.sgf"
        dat.write_features(path, [np.zeros((2, 3))])
        blob = path.read_bytes()
        for cut in (2, 10, len(blob) - 5):
            bad = tmp_path / f"cut{cut}.sgf"
            bad.write_bytes(blob[:cut])
            with pytest.raises(dat.FormatError) as err:
                dat.load_features(bad)
            assert err.value.offset is not None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.sgf"
        path.write_bytes(b"NOPE" + b"\0" * 20)
        with pytest.raises(dat.FormatError):
            dat.load_features(path)

    def test_paper_scale_header(self, tmp_path):
        # one image at 196 crops x 2048 dims parses fine
        path = tmp_path / "paper.sgf"
        dat.write_features(path, [np.zeros((196, 2048), dtype=np.float32)])
        scenes = dat.load_features(path, expected_crops=196, expected_dim=2048)
        assert scenes[0].features.shape == (196, 2048)

    def test_shape_validation(self, tmp_path):
        path = tmp_path / "feats.sgf"
        dat.write_features(path, [np.zeros((2, 3))])
        with pytest.raises(dat.FormatError):
            dat.load_features(path, expected_crops=4)


class TestCheckpoint:
    def _make(self, with_rng=True):
        gcfg = CaptionerConfig(vocab_size=7, hidden_dim=4, num_crops=2,
                               feature_dim=3, max_len=5)
        dcfg = disc.DiscriminatorConfig(vocab_size=7, hidden_dim=4,
                                        num_crops=2, feature_dim=3)
        g = init_params(gcfg, 0)
        d = disc.init_jointemb(dcfg, 1)
        rng = np.random.default_rng(33)
        rng.random(17)  # advance the stream
        return dat.Checkpoint(
            captioner=g, discriminator=d,
            gen_opt=tr.init_adam(g.arrays), disc_opt=tr.init_adam(d.arrays),
            config={"lr": 0.001, "label": "unit"},
            rng_state=rng.bit_generator.state if with_rng else None,
            epoch=3, aux={"cca_sigma": np.array([0.5, 0.25])})

    def test_save_load_save_byte_identical(self, tmp_path):
        ckpt = self._make()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        dat.save_checkpoint(p1, ckpt)
        loaded = dat.load_checkpoint(p1)
        dat.save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_fields_roundtrip(self, tmp_path):
        ckpt = self._make()
        path = tmp_path / "c.ckpt"
        dat.save_checkpoint(path, ckpt)
        loaded = dat.load_checkpoint(path)
        assert loaded.epoch == 3
        assert loaded.config == {"lr": 0.001, "label": "unit"}
        assert loaded.captioner.config == ckpt.captioner.config
        assert loaded.discriminator.variant == "jointemb"
        for k in ckpt.captioner.arrays:
            np.testing.assert_array_equal(loaded.captioner.arrays[k],
                                          ckpt.captioner.arrays[k])
        np.testing.assert_array_equal(loaded.aux["cca_sigma"], [0.5, 0.25])
        assert loaded.gen_opt.step == 0

    def test_rng_state_roundtrip_continues_stream(self, tmp_path):
        ckpt = self._make()
        path = tmp_path / "d.ckpt"
        dat.save_checkpoint(path, ckpt)
        loaded = dat.load_checkpoint(path)

        reference = np.random.default_rng(33)
        reference.random(17)
        restored = dat.rng_from_state(loaded.rng_state)
        np.testing.assert_array_equal(restored.random(5), reference.random(5))

    def test_corrupted_magic_is_version_error(self, tmp_path):
        path = tmp_path / "e.ckpt"
        dat.save_checkpoint(path, self._make())
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(dat.VersionError):
            dat.load_checkpoint(path)

    def test_unsupported_version_rejected(self, tmp_path):
        path = tmp_path / "f.ckpt"
        dat.save_checkpoint(path, self._make())
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(dat.VersionError):
            dat.load_checkpoint(path)

    def test_truncation_is_format_error(self, tmp_path):
        path = tmp_path / "g.ckpt"
        dat.save_checkpoint(path, self._make())
        blob = path.read_bytes()
        bad = tmp_path / "g_cut.ckpt"
        bad.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(dat.FormatError):
            dat.load_checkpoint(bad)
