import numpy as np
import pytest

from entroad.bundle import bundles_equal, validate_bundle
from entroad.entropy import structural_entropy
from entroad.errors import DataError
from entroad.synthetic import SyntheticConfig, blob_patches, gen_synthetic


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        cfg = SyntheticConfig(n_images=6, grid=(3, 3), d=6, seed=42)
        a = gen_synthetic(cfg)
        b = gen_synthetic(cfg)
        assert all(bundles_equal(x, y) for x, y in zip(a, b))

    def test_different_seeds_differ(self):
        a = gen_synthetic(SyntheticConfig(n_images=2, grid=(3, 3), d=6, seed=1))
        b = gen_synthetic(SyntheticConfig(n_images=2, grid=(3, 3), d=6, seed=2))
        assert not bundles_equal(a[0], b[0])


class TestContracts:
    def test_all_bundles_valid(self):
        for bundle in gen_synthetic(SyntheticConfig(n_images=8, grid=(4, 4), d=8, seed=3)):
            validate_bundle(bundle)

    def test_zero_anomaly_fraction_all_normal(self):
        bundles = gen_synthetic(
            SyntheticConfig(n_images=10, grid=(3, 3), d=6, anomaly_fraction=0.0, seed=7)
        )
        assert all(b.label == 0 for b in bundles)
        assert all(b.mask.sum() == 0 for b in bundles)

    def test_masks_mark_blob_blocks(self):
        bundles = gen_synthetic(
            SyntheticConfig(n_images=10, grid=(4, 4), d=6, anomaly_fraction=1.0, seed=9)
        )
        for bundle in bundles:
            blob = blob_patches(bundle)
            assert blob.any()
            # exact 14-px block replication
            rebuilt = np.kron(blob, np.ones((14, 14), dtype=np.uint8))
            np.testing.assert_array_equal(rebuilt, bundle.mask)

    def test_image_size_matches_patch_geometry(self):
        bundle = gen_synthetic(SyntheticConfig(n_images=1, grid=(3, 5), d=4, seed=0))[0]
        assert bundle.image_size == (42, 70)

    def test_invalid_configs_rejected(self):
        with pytest.raises(DataError):
            gen_synthetic(SyntheticConfig(n_images=0))
        with pytest.raises(DataError):
            gen_synthetic(SyntheticConfig(d=1))
        with pytest.raises(DataError):
            gen_synthetic(SyntheticConfig(blob_radius=0))


class TestEntropySeparation:
    def test_blob_entropy_exceeds_background_in_95_percent(self):
        """Disrupted attention must raise blob entropy relative to the rest
        of the same image for at least 95% of anomalous images."""
        hits = 0
        total = 0
        for seed in range(200):
            cfg = SyntheticConfig(
                n_images=1,
                grid=(6, 6),
                d=8,
                anomaly_fraction=1.0,
                attention_disruption=0.8,
                blob_radius=1,
                seed=seed,
            )
            bundle = gen_synthetic(cfg)[0]
            blob = blob_patches(bundle).reshape(-1)
            ent = structural_entropy(bundle, bundle.layers)
            total += 1
            if ent[blob].mean() > ent[~blob].mean():
                hits += 1
        assert hits / total >= 0.95, f"separation only in {hits}/{total} images"
