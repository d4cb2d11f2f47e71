"""ASR decision rule, PSNR/SSIM oracles, robustness transforms, reports."""

import json

import numpy as np
import pytest

from hashpoison.errors import InputError
from hashpoison.metrics import (AttackReport, asr, gaussian_transform,
                                identity_transform, jpeg_transform, load_report,
                                psnr, robustness_eval, save_report, ssim,
                                threshold_sweep, write_sweep_csv)
from hashpoison.retrieval import RetrievalIndex, pack_signs

GAMMA = 8


class _ConstModel:
    """Returns a fixed continuous code for any input (test double)."""

    def __init__(self, code):
        self.code = np.asarray(code, dtype=np.float64)

    def encode(self, image):
        return self.code


def make_index(labels, distances):
    """DB whose entry i sits at the given Hamming distance from +1...+1."""
    base = np.ones(GAMMA, dtype=np.int8)
    signs = []
    for d in distances:
        s = base.copy()
        s[:d] *= -1
        signs.append(s)
    labels = np.asarray(labels, dtype=np.uint8)
    return RetrievalIndex(pack_signs(np.stack(signs)), labels,
                          [f"db:{i}" for i in range(len(distances))], GAMMA)


@pytest.fixture
def y_t():
    return np.array([1, 0], dtype=np.uint8)


class TestAsrRule:
    def _index_with_target_fraction(self, hits, total):
        labels = [[1, 0]] * hits + [[0, 1]] * (total - hits)
        return make_index(labels, [0] * total)

    def test_13_of_40_succeeds_at_30pct(self, y_t):
        index = self._index_with_target_fraction(13, 40)
        model = _ConstModel(np.ones(GAMMA))
        value, detail = asr(model, index, [np.zeros((2, 2, 1))], y_t, K=40)
        assert detail[0]["fraction"] == pytest.approx(0.325)
        assert value == 1.0

    def test_12_of_40_fails_at_30pct_boundary(self, y_t):
        # 12/40 = 0.30 exactly: "more than 30%" is strict, so no success
        index = self._index_with_target_fraction(12, 40)
        model = _ConstModel(np.ones(GAMMA))
        value, detail = asr(model, index, [np.zeros((2, 2, 1))], y_t, K=40)
        assert detail[0]["fraction"] == pytest.approx(0.30)
        assert value == 0.0

    def test_all_target_index_gives_asr_one(self, y_t):
        index = self._index_with_target_fraction(40, 40)
        model = _ConstModel(np.ones(GAMMA))
        value, _ = asr(model, index, [np.zeros((2, 2, 1))] * 7, y_t, K=40)
        assert value == 1.0

    def test_permutation_invariant(self, y_t):
        index = make_index([[1, 0]] * 5 + [[0, 1]] * 5,
                           [0, 1, 2, 3, 4, 0, 1, 2, 3, 4])
        model = _ConstModel(np.ones(GAMMA))
        triggers = [np.full((2, 2, 1), v, dtype=np.float32)
                    for v in (0.1, 0.5, 0.9)]
        a, _ = asr(model, index, triggers, y_t, K=4)
        b, _ = asr(model, index, triggers[::-1], y_t, K=4)
        assert a == b

    def test_multilabel_superset_matching(self):
        index = make_index([[1, 1], [0, 1]], [0, 0])
        model = _ConstModel(np.ones(GAMMA))
        both = np.array([1, 1], dtype=np.uint8)
        _, detail = asr(model, index, [np.zeros((2, 2, 1))], both, K=2,
                        threshold=0.4)
        assert detail[0]["fraction"] == pytest.approx(0.5)

    def test_empty_triggers_rejected(self, y_t):
        index = make_index([[1, 0]], [0])
        with pytest.raises(InputError):
            asr(_ConstModel(np.ones(GAMMA)), index, [], y_t, K=1)

    def test_k_exceeding_index_rejected(self, y_t):
        index = make_index([[1, 0]], [0])
        with pytest.raises(InputError):
            asr(_ConstModel(np.ones(GAMMA)), index, [np.zeros((2, 2, 1))],
                y_t, K=2)


class TestThresholdSweep:
    def test_monotone_non_increasing(self, y_t):
        labels = [[1, 0]] * 3 + [[0, 1]] * 3
        index = make_index(labels, [0, 1, 5, 2, 3, 4])
        model = _ConstModel(np.ones(GAMMA))
        triggers = [np.zeros((2, 2, 1))] * 4
        rows = threshold_sweep(model, index, triggers, y_t, K=4,
                               thresholds=[0.1, 0.3, 0.5, 0.7, 0.9])
        asrs = [r["asr"] for r in rows]
        assert asrs == sorted(asrs, reverse=True)

    def test_unsorted_thresholds_rejected(self, y_t):
        index = make_index([[1, 0]], [0])
        with pytest.raises(InputError):
            threshold_sweep(_ConstModel(np.ones(GAMMA)), index,
                            [np.zeros((2, 2, 1))], y_t, K=1,
                            thresholds=[0.5, 0.3])


class TestPsnr:
    def test_identical_images_capped(self):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3)).astype(np.float32)
        assert psnr(img, img) == 99.0

    def test_known_mse(self):
        a = np.zeros((4, 4, 1), dtype=np.float32)
        b = np.full((4, 4, 1), 0.1, dtype=np.float32)
        # MSE = 0.01 -> 10 log10(100) = 20 dB
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-6)

    def test_uniform_noise_at_sigma_16_255(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0.2, 0.8, size=(32, 32, 3)).astype(np.float32)
        sigma = 16 / 255
        b = np.clip(a + rng.uniform(-sigma, sigma, size=a.shape), 0, 1)
        # E[MSE] = sigma^2 / 3 -> about 30.8 dB
        assert 28.0 <= psnr(a, b) <= 33.0

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(8, 8, 3)).astype(np.float32)
        b = rng.uniform(size=(8, 8, 3)).astype(np.float32)
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            psnr(np.zeros((4, 4, 1)), np.zeros((4, 4, 3)))


class TestSsim:
    def test_self_similarity_exactly_one(self):
        img = np.random.default_rng(0).uniform(size=(16, 16, 3)).astype(np.float32)
        assert ssim(img, img) == 1.0

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(16, 16, 1)).astype(np.float32)
        b = rng.uniform(size=(16, 16, 1)).astype(np.float32)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)

    def test_small_perturbation_stays_high(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0.3, 0.7, size=(32, 32, 3)).astype(np.float32)
        b = np.clip(a + rng.normal(0, 0.01, size=a.shape), 0, 1)
        assert ssim(a, b) > 0.95

    def test_unrelated_images_low(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(size=(32, 32, 1)).astype(np.float32)
        b = rng.uniform(size=(32, 32, 1)).astype(np.float32)
        assert ssim(a, b) < 0.5

    def test_too_small_rejected(self):
        with pytest.raises(InputError):
            ssim(np.zeros((4, 4, 1)), np.zeros((4, 4, 1)))


class TestTransforms:
    def test_identity(self):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3)).astype(np.float32)
        assert np.array_equal(identity_transform(img), img)

    def test_gaussian_zero_eps_is_identity(self):
        img = np.random.default_rng(0).uniform(0.1, 0.9,
                                               size=(8, 8, 3)).astype(np.float32)
        out = gaussian_transform(0.0)(img, seed=3)
        assert np.allclose(out, img, atol=1e-7)

    def test_gaussian_seeded_deterministic(self):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3)).astype(np.float32)
        t = gaussian_transform(8 / 255)
        assert np.array_equal(t(img, seed=5), t(img, seed=5))
        assert not np.array_equal(t(img, seed=5), t(img, seed=6))

    def test_jpeg_roundtrip_close_at_high_quality(self):
        rng = np.random.default_rng(1)
        img = np.clip(rng.normal(0.5, 0.05, size=(32, 32, 3)), 0, 1).astype(np.float32)
        out = jpeg_transform(95)(img)
        assert out.shape == img.shape
        assert psnr(img, out) > 25.0

    def test_robustness_identity_equals_plain_asr(self):
        y_t = np.array([1, 0], dtype=np.uint8)
        index = make_index([[1, 0]] * 3 + [[0, 1]], [0, 0, 0, 0])
        model = _ConstModel(np.ones(GAMMA))
        triggers = [np.zeros((2, 2, 1))] * 3
        plain, _ = asr(model, index, triggers, y_t, K=4)
        rob = robustness_eval(model, index, triggers, y_t, identity_transform,
                              K=4)
        assert rob["asr"] == plain


class TestAttackReport:
    def make_report(self, **kw):
        defaults = dict(
            asr_attack=0.5,
            asr_none=0.0,
            map_clean=0.9,
            map_poisoned=0.89,
            psnr_mean=30.0,
            ssim_mean=0.92,
            per_trigger=[
                {"trigger_id": "a", "fraction": 0.6, "success": True},
                {"trigger_id": "b", "fraction": 0.1, "success": False},
            ],
        )
        defaults.update(kw)
        return AttackReport(**defaults)

    def test_asr_must_match_flags(self):
        with pytest.raises(InputError):
            self.make_report(asr_attack=0.75)

    def test_fraction_range_checked(self):
        with pytest.raises(InputError):
            self.make_report(per_trigger=[
                {"trigger_id": "a", "fraction": 1.5, "success": True},
                {"trigger_id": "b", "fraction": 0.0, "success": False},
            ])

    def test_json_roundtrip(self, tmp_path):
        report = self.make_report()
        save_report(report, str(tmp_path / "r.json"))
        loaded = load_report(str(tmp_path / "r.json"))
        assert loaded == report

    def test_json_is_sorted_and_versioned(self):
        report = self.make_report()
        data = json.loads(report.to_json())
        assert data["schema_version"] == 1
        assert list(data.keys()) == sorted(data.keys())


class TestSweepCsv:
    def test_writes_sorted_columns(self, tmp_path):
        rows = [{"threshold": 0.1, "asr": 1.0}, {"threshold": 0.3, "asr": 0.5}]
        path = tmp_path / "sweep.csv"
        write_sweep_csv(rows, str(path))
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "asr,threshold"
        assert lines[1] == "1.0,0.1"

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(InputError):
            write_sweep_csv([], str(tmp_path / "x.csv"))
