"""Synthetic world: generators, frozen encoders, normalization, persistence."""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from mindalign.errors import ConfigError, DataError
from mindalign.world import (
    REGION_NAMES,
    SubjectDataset,
    WorldConfig,
    decode_tokens,
    decode_vae,
    encode_image,
    encode_teacher,
    encode_vae,
    generate_dataset,
    generate_world,
    load_dataset_dir,
    load_world_manifest,
    normalize,
    save_dataset_dir,
    save_world_manifest,
    secondary_token_encoder,
    simulate_response,
)

SMALL = WorldConfig(image_hw=8, channels=3, n_tokens=8, d_token=32, vae_hw=4,
                    n_subjects=3, voxels_min=40, voxels_max=80, n_sessions=4,
                    trials_per_session=10, n_shared=12)


@pytest.fixture(scope="module")
def world():
    return generate_world(SMALL, seed=7)


@pytest.fixture(scope="module")
def default_world():
    return generate_world(WorldConfig(), seed=7)


class TestGenerateWorld:
    def test_same_seed_bit_identical(self, world):
        w2 = generate_world(SMALL, seed=7)
        assert np.array_equal(world.encoder, w2.encoder)
        assert np.array_equal(world.images, w2.images)
        for sid in world.subjects:
            assert np.array_equal(world.subjects[sid].matrix, w2.subjects[sid].matrix)

    def test_decoder_inverts_encoder(self, default_world):
        w = default_world
        eye = w.decoder @ w.encoder
        assert np.abs(eye - np.eye(w.config.pixel_dim)).max() < 1e-8

    def test_distinct_voxel_counts(self, default_world):
        counts = [s.n_voxels for s in default_world.subjects.values()]
        assert len(counts) == 8
        assert len(set(counts)) == 8
        assert all(120 <= c <= 200 for c in counts)

    def test_encoder_rank_exact(self, world):
        assert np.linalg.matrix_rank(world.encoder) == world.config.pixel_dim

    def test_rank_condition_rejected(self):
        with pytest.raises(ConfigError):
            generate_world(WorldConfig(n_tokens=2, d_token=8), seed=0)

    def test_region_partition_disjoint_cover(self, world):
        for sid, fm in world.subjects.items():
            regions = world.regions[sid]
            assert set(regions) == set(REGION_NAMES)
            combined = np.concatenate([regions[r] for r in REGION_NAMES])
            assert sorted(combined.tolist()) == list(range(fm.n_voxels))

    def test_images_in_unit_interval(self, world):
        assert world.images.min() >= 0.0
        assert world.images.max() <= 1.0
        # smooth fields must keep usable contrast for pixel metrics
        assert world.images.std() > 0.1


class TestSimulateResponse:
    def test_noiseless_is_exact_linear_map(self, world):
        cfg = WorldConfig(**{**SMALL.__dict__, "noise_sigma": 0.0})
        w0 = generate_world(cfg, seed=7)
        img = w0.images[0]
        v = simulate_response(w0, "s0", img, seed=3)
        np.testing.assert_array_equal(v, w0.subjects["s0"].matrix @ img.reshape(-1))

    def test_zero_image_zero_response(self, world):
        cfg = WorldConfig(**{**SMALL.__dict__, "noise_sigma": 0.0})
        w0 = generate_world(cfg, seed=7)
        v = simulate_response(w0, "s1", np.zeros((8, 8, 3)), seed=3)
        np.testing.assert_array_equal(v, np.zeros_like(v))

    def test_seed_repeats_noise(self, world):
        img = world.images[1]
        a = simulate_response(world, "s0", img, seed=42)
        b = simulate_response(world, "s0", img, seed=42)
        assert np.array_equal(a, b)
        c = simulate_response(world, "s0", img, seed=43)
        assert not np.array_equal(a, c)

    def test_unknown_subject(self, world):
        with pytest.raises(DataError):
            simulate_response(world, "nope", world.images[0], seed=0)


class TestGenerateDataset:
    def test_shared_ids_identical_across_subjects(self, world):
        d0 = generate_dataset(world, "s0", seed=1)
        d1 = generate_dataset(world, "s1", seed=2)
        np.testing.assert_array_equal(d0.image_ids[d0.is_shared],
                                      d1.image_ids[d1.is_shared])

    def test_train_ids_disjoint_across_subjects(self, world):
        d0 = generate_dataset(world, "s0", seed=1)
        d1 = generate_dataset(world, "s1", seed=2)
        assert not set(d0.image_ids[d0.train_mask]) & set(d1.image_ids[d1.train_mask])

    def test_single_session_indexing(self, world):
        d = generate_dataset(world, "s0", n_sessions=1, seed=1)
        assert set(d.session_index[d.train_mask]) == {0}

    def test_default_trial_counts(self, default_world):
        d = generate_dataset(default_world, "s0", seed=1)
        assert d.train_mask.sum() == 320
        assert d.is_shared.sum() == 50

    def test_pool_exhaustion_rejected(self, world):
        with pytest.raises(DataError):
            generate_dataset(world, "s0", n_sessions=100, seed=1)

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_session_subsetting(self, world, k):
        d = generate_dataset(world, "s0", seed=1)
        sub = d.restrict_sessions(k)
        assert sub.train_mask.sum() == k * SMALL.trials_per_session
        assert sub.is_shared.sum() == SMALL.n_shared
        # chronology: the retained train trials are a prefix of the original
        np.testing.assert_array_equal(
            sub.image_ids[sub.train_mask],
            d.image_ids[d.train_mask][: k * SMALL.trials_per_session])

    def test_restrict_out_of_range(self, world):
        d = generate_dataset(world, "s0", seed=1)
        with pytest.raises(DataError):
            d.restrict_sessions(0)
        with pytest.raises(DataError):
            d.restrict_sessions(99)


class TestNormalize:
    def test_train_stats_unit(self, world):
        d = normalize(generate_dataset(world, "s0", seed=11))
        tv = d.train_voxels()
        assert np.abs(tv.mean(axis=0)).max() < 1e-6
        assert np.abs(tv.std(axis=0) - 1.0).max() < 1e-6

    def test_double_normalize_near_identity(self, world):
        d = normalize(generate_dataset(world, "s0", seed=11))
        d2 = normalize(d)
        assert np.abs(d2.voxels - d.voxels).max() < 1e-9

    def test_shared_mean_nonzero_regression_anchor(self):
        # stats come from train only, so the shared split keeps an offset;
        # value frozen from the seeded default world as a regression anchor
        w = generate_world(WorldConfig(), seed=7)
        d = normalize(generate_dataset(w, "s0", seed=11))
        shared_mean = d.shared_voxels().mean(axis=0)
        assert np.abs(shared_mean).mean() > 1e-3
        assert shared_mean[0] == pytest.approx(-0.17385914815970785, abs=1e-12)

    def test_constant_voxel_floored(self):
        d = SubjectDataset(
            subject_id="sX",
            voxels=np.column_stack([np.ones(6), np.arange(6.0)]),
            image_ids=np.arange(6, dtype=np.int64),
            session_index=np.zeros(6, dtype=np.int64),
            is_shared=np.zeros(6, dtype=bool),
        )
        nd = normalize(d)
        assert np.all(np.isfinite(nd.voxels))

    def test_empty_train_rejected(self):
        d = SubjectDataset(
            subject_id="sX",
            voxels=np.ones((2, 3)),
            image_ids=np.arange(2, dtype=np.int64),
            session_index=np.full(2, -1, dtype=np.int64),
            is_shared=np.ones(2, dtype=bool),
        )
        with pytest.raises(DataError):
            normalize(d)


class TestFrozenEncoders:
    def test_encode_decode_roundtrip(self, default_world):
        img = default_world.images[5]
        back = decode_tokens(default_world, encode_image(default_world, img))
        assert np.abs(back - img).max() < 1e-6

    def test_encode_zero_is_zero(self, world):
        z = encode_image(world, np.zeros((8, 8, 3)))
        np.testing.assert_array_equal(z, np.zeros_like(z))

    def test_out_of_range_tokens_project(self, world):
        # re-encoding the least-squares pre-image orthogonally projects onto
        # the encoder range; checked against an SVD-based projector
        rng = np.random.default_rng(0)
        t = rng.normal(size=world.config.token_dim)
        reenc = world.encoder @ (world.decoder @ t)
        U = np.linalg.svd(world.encoder, full_matrices=False)[0]
        np.testing.assert_allclose(reenc, U @ (U.T @ t), atol=1e-8)

    def test_teacher_vae_linear(self, world):
        a, b = world.images[0], world.images[1]
        lhs = encode_teacher(world, a + b)
        rhs = encode_teacher(world, a) + encode_teacher(world, b)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)
        lhs_v = encode_vae(world, a + b)
        rhs_v = encode_vae(world, a) + encode_vae(world, b)
        np.testing.assert_allclose(lhs_v, rhs_v, atol=1e-9)

    def test_teacher_dim_config_echo(self, world):
        assert encode_teacher(world, world.images[0]).shape == (SMALL.d_teacher,)

    def test_vae_shapes_and_inverse(self, world):
        lat = encode_vae(world, world.images[2])
        assert lat.shape == (4, 4, 4)
        # vae map is wide, so decode is only a least-squares pre-image;
        # re-encoding it must reproduce the latent
        back = encode_vae(world, decode_vae(world, lat))
        np.testing.assert_allclose(back, lat, atol=1e-8)

    def test_dim_mismatch_rejected(self, world):
        with pytest.raises(DataError):
            encode_image(world, np.zeros((4, 4, 3)))
        with pytest.raises(DataError):
            decode_tokens(world, np.zeros(17))

    def test_secondary_encoder_factorized(self, world):
        enc_b = secondary_token_encoder(world, m_tokens=6, d_out=16, seed=3)
        one = enc_b.encode(world, world.images[0])
        assert one.shape == (6, 16)
        batch = enc_b.encode_batch(world, world.images[:4])
        np.testing.assert_allclose(batch[0], one, atol=1e-12)


class TestPersistence:
    def _dirhash(self, p: Path) -> str:
        h = hashlib.sha256()
        for f in sorted(Path(p).iterdir()):
            h.update(f.name.encode())
            h.update(f.read_bytes())
        return h.hexdigest()

    def test_dataset_dir_bit_exact_roundtrip(self, world, tmp_path):
        datasets = {sid: normalize(generate_dataset(world, sid, seed=i))
                    for i, sid in enumerate(world.subject_ids)}
        d1 = tmp_path / "a"
        save_dataset_dir(d1, world, datasets)
        w2, loaded = load_dataset_dir(d1)
        d2 = tmp_path / "b"
        save_dataset_dir(d2, w2, loaded)
        assert self._dirhash(d1) == self._dirhash(d2)

    def test_loaded_fields_match_f32_values(self, world, tmp_path):
        ds = normalize(generate_dataset(world, "s0", seed=4))
        save_dataset_dir(tmp_path / "d", world, {"s0": ds})
        _, loaded = load_dataset_dir(tmp_path / "d")
        got = loaded["s0"]
        np.testing.assert_array_equal(got.voxels,
                                      ds.voxels.astype(np.float32).astype(np.float64))
        np.testing.assert_array_equal(got.image_ids, ds.image_ids)
        np.testing.assert_array_equal(got.session_index, ds.session_index)
        np.testing.assert_array_equal(got.is_shared, ds.is_shared)

    def test_unnormalized_save_rejected(self, world, tmp_path):
        ds = generate_dataset(world, "s0", seed=4)
        with pytest.raises(DataError):
            save_dataset_dir(tmp_path / "d", world, {"s0": ds})

    def test_world_manifest_roundtrip(self, world, tmp_path):
        save_world_manifest(SMALL, 7, tmp_path / "world.txt")
        w2 = load_world_manifest(tmp_path / "world.txt")
        assert np.array_equal(w2.encoder, world.encoder)
        assert np.array_equal(w2.images, world.images)
