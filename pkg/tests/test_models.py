"""Model construction, class code tables, and encoding contracts."""

import numpy as np
import pytest
from scipy.linalg import hadamard

from hashpoison.errors import InputError, NumericError
from hashpoison.models import (ClassCodeTable, HashModel, HashModelConfig,
                               binarize)

SHAPE = (16, 16, 3)


def small_config(**kw):
    defaults = dict(backbone="tiny-cnn", gamma=16, loss_kind="CSQ", epochs=1,
                    learning_rate=0.05, batch_size=8, seed=0)
    defaults.update(kw)
    return HashModelConfig(**defaults)


class TestConfigValidation:
    def test_valid_gammas_only(self):
        for gamma in (8, 16, 32, 64, 128):
            small_config(gamma=gamma)
        with pytest.raises(InputError):
            small_config(gamma=24)

    def test_bad_backbone(self):
        with pytest.raises(InputError):
            small_config(backbone="resnet152")

    def test_bad_loss(self):
        with pytest.raises(InputError):
            small_config(loss_kind="triplet")

    def test_bad_hyperparameters(self):
        with pytest.raises(InputError):
            small_config(epochs=-1)
        with pytest.raises(InputError):
            small_config(learning_rate=0.0)
        with pytest.raises(InputError):
            small_config(width=0.0)

    def test_dict_roundtrip(self):
        cfg = small_config(gamma=32, loss_kind="DPN", width=0.5)
        assert HashModelConfig.from_dict(cfg.to_dict()) == cfg


class TestClassCodeTable:
    def test_hadamard_rows(self):
        table = ClassCodeTable.build(beta=6, gamma=8)
        H = hadamard(8)
        expected = np.vstack([H, -H])[:6]
        assert np.array_equal(table.codes, expected)
        assert table.derivation == "hadamard"

    def test_hadamard_rows_orthogonal(self):
        table = ClassCodeTable.build(beta=16, gamma=8)
        g = table.codes.astype(int) @ table.codes.astype(int).T
        # any two distinct rows of [H; -H] are orthogonal or opposite
        off = g - np.diag(np.diag(g))
        assert set(np.unique(off)) <= {0, -8}

    def test_random_fallback_when_beta_large(self):
        table = ClassCodeTable.build(beta=20, gamma=8)
        assert table.derivation == "random"
        assert table.codes.shape == (20, 8)
        assert set(np.unique(table.codes)) <= {-1, 1}

    def test_random_deterministic_under_seed(self):
        a = ClassCodeTable.build(beta=20, gamma=8, seed=5)
        b = ClassCodeTable.build(beta=20, gamma=8, seed=5)
        c = ClassCodeTable.build(beta=20, gamma=8, seed=6)
        assert np.array_equal(a.codes, b.codes)
        assert not np.array_equal(a.codes, c.codes)

    def test_explicit_hadamard_beta_too_large(self):
        with pytest.raises(InputError):
            ClassCodeTable.build(beta=17, gamma=8, derivation="hadamard")

    def test_single_label_target_code_is_class_row(self):
        table = ClassCodeTable.build(beta=4, gamma=8)
        lab = np.array([0, 0, 1, 0], dtype=np.uint8)
        assert np.array_equal(table.target_code(lab), table.codes[2])

    def test_multi_label_majority_with_tie_positive(self):
        codes = np.array([[1, 1, -1, -1], [1, -1, 1, -1]], dtype=np.int8)
        table = ClassCodeTable(codes=codes, derivation="random", seed=0)
        lab = np.array([1, 1], dtype=np.uint8)
        # sums: [2, 0, 0, -2] -> ties at 0 resolve to +1
        assert np.array_equal(table.target_code(lab), [1, 1, 1, -1])

    def test_empty_label_rejected(self):
        table = ClassCodeTable.build(beta=4, gamma=8)
        with pytest.raises(InputError):
            table.target_code(np.zeros(4, dtype=np.uint8))


class TestHashModel:
    def test_encode_range_and_shape(self):
        model = HashModel(small_config(), in_shape=SHAPE, beta=3)
        rng = np.random.default_rng(0)
        img = rng.uniform(size=SHAPE).astype(np.float32)
        code = model.encode(img)
        assert code.shape == (16,)
        assert np.all(np.abs(code) < 1.0)

    def test_encode_batch_matches_encode(self):
        model = HashModel(small_config(), in_shape=SHAPE, beta=3)
        rng = np.random.default_rng(1)
        imgs = rng.uniform(size=(4,) + SHAPE).astype(np.float32)
        batch = model.encode_batch(imgs)
        singles = np.stack([model.encode(im) for im in imgs])
        assert np.allclose(batch, singles, atol=1e-12)

    def test_same_seed_same_outputs(self):
        a = HashModel(small_config(seed=3), in_shape=SHAPE, beta=3)
        b = HashModel(small_config(seed=3), in_shape=SHAPE, beta=3)
        img = np.random.default_rng(0).uniform(size=SHAPE).astype(np.float32)
        assert np.array_equal(a.encode(img), b.encode(img))

    def test_clone_is_independent(self):
        import torch

        model = HashModel(small_config(), in_shape=SHAPE, beta=3)
        clone = model.clone()
        with torch.no_grad():
            next(model.module.parameters()).add_(1.0)
        img = np.random.default_rng(0).uniform(size=SHAPE).astype(np.float32)
        assert not np.array_equal(model.encode(img), clone.encode(img))

    def test_shape_mismatch_rejected(self):
        model = HashModel(small_config(), in_shape=SHAPE, beta=3)
        with pytest.raises(InputError):
            model.encode(np.zeros((8, 8, 3), dtype=np.float32))

    def test_all_backbones_forward(self):
        for backbone in ("tiny-cnn", "small-cnn", "mlp"):
            model = HashModel(small_config(backbone=backbone, gamma=8),
                              in_shape=SHAPE, beta=3)
            img = np.random.default_rng(0).uniform(size=SHAPE).astype(np.float32)
            assert model.encode(img).shape == (8,)

    def test_width_scales_parameter_count(self):
        small = HashModel(small_config(width=0.5), in_shape=SHAPE, beta=3)
        large = HashModel(small_config(width=2.0), in_shape=SHAPE, beta=3)
        assert large.parameter_count > small.parameter_count


class TestBinarize:
    def test_sign_with_positive_ties(self):
        out = binarize(np.array([0.5, -0.5, 0.0, -0.0]))
        assert np.array_equal(out, [1, -1, 1, 1])

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=32)
        assert np.array_equal(binarize(binarize(x)), binarize(x))

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            binarize(np.array([0.1, np.nan]))
