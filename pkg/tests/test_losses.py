"""CSQ/DPN loss values against independent numpy oracles."""

import numpy as np
import pytest
import torch

from hashpoison.errors import InputError
from hashpoison.losses import code_loss, csq_loss, dpn_loss
from hashpoison.models import ClassCodeTable


def bce_oracle(codes, targets):
    """Plain numpy BCE between (h+1)/2 and (c+1)/2, mean over all entries."""
    p = np.clip((codes + 1.0) / 2.0, 1e-12, 1 - 1e-12)
    t = (targets + 1.0) / 2.0
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))


def hinge_oracle(codes, targets, margin):
    return float(np.mean(np.maximum(margin - codes * targets, 0.0)))


@pytest.fixture
def table():
    return ClassCodeTable.build(beta=4, gamma=8, seed=0)


class TestCSQ:
    def test_perfect_codes_near_zero(self, table):
        labels = np.eye(4, dtype=np.uint8)
        codes = table.target_codes(labels).astype(np.float64) * 0.999999
        assert csq_loss(codes, labels, table) < 1e-5

    def test_matches_oracle_on_random_batches(self, table):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 20))
            codes = rng.uniform(-0.999, 0.999, size=(n, 8))
            labels = np.eye(4, dtype=np.uint8)[rng.integers(0, 4, size=n)]
            targets = table.target_codes(labels).astype(np.float64)
            got = csq_loss(codes, labels, table)
            assert got == pytest.approx(bce_oracle(codes, targets), rel=1e-12)

    def test_anti_aligned_worse_than_aligned(self, table):
        labels = np.eye(4, dtype=np.uint8)[:1]
        target = table.target_codes(labels).astype(np.float64)
        assert csq_loss(-0.9 * target, labels, table) > \
            csq_loss(0.9 * target, labels, table)

    def test_batch_size_mismatch(self, table):
        with pytest.raises(InputError):
            csq_loss(np.zeros((2, 8)), np.eye(4, dtype=np.uint8)[:3], table)

    def test_empty_batch(self, table):
        with pytest.raises(InputError):
            csq_loss(np.zeros((0, 8)), np.zeros((0, 4), dtype=np.uint8), table)


class TestDPN:
    def test_matches_oracle(self, table):
        rng = np.random.default_rng(1)
        for margin in (0.5, 1.0, 2.0):
            codes = rng.uniform(-1, 1, size=(6, 8))
            labels = np.eye(4, dtype=np.uint8)[rng.integers(0, 4, size=6)]
            targets = table.target_codes(labels).astype(np.float64)
            got = dpn_loss(codes, labels, table, margin=margin)
            assert got == pytest.approx(hinge_oracle(codes, targets, margin),
                                        rel=1e-12)

    def test_saturated_codes_zero_loss_at_margin_one(self, table):
        labels = np.eye(4, dtype=np.uint8)
        codes = table.target_codes(labels).astype(np.float64)
        assert dpn_loss(codes, labels, table, margin=1.0) == 0.0

    def test_hinge_is_piecewise_linear_in_code(self, table):
        labels = np.eye(4, dtype=np.uint8)[:1]
        target = table.target_codes(labels).astype(np.float64)
        # inside the margin the loss decreases linearly with alignment
        l1 = dpn_loss(0.2 * target, labels, table)
        l2 = dpn_loss(0.4 * target, labels, table)
        assert l1 - l2 == pytest.approx(0.2, rel=1e-9)

    def test_bad_margin(self, table):
        with pytest.raises(InputError):
            dpn_loss(np.zeros((1, 8)), np.eye(4, dtype=np.uint8)[:1], table,
                     margin=0.0)


class TestCodeLossGradients:
    def test_csq_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        codes = torch.tensor(rng.uniform(-0.9, 0.9, size=(3, 8)),
                             requires_grad=True)
        targets = torch.tensor(
            np.where(rng.uniform(size=(3, 8)) > 0.5, 1.0, -1.0))
        loss = code_loss(codes, targets, "CSQ")
        loss.backward()
        grad = codes.grad.numpy()
        eps = 1e-6
        base = codes.detach().numpy()
        for idx in [(0, 0), (1, 3), (2, 7)]:
            up, down = base.copy(), base.copy()
            up[idx] += eps
            down[idx] -= eps
            fd = (float(code_loss(torch.tensor(up), targets, "CSQ")) -
                  float(code_loss(torch.tensor(down), targets, "CSQ"))) / (2 * eps)
            assert grad[idx] == pytest.approx(fd, rel=1e-4)

    def test_unknown_kind(self):
        with pytest.raises(InputError):
            code_loss(torch.zeros(1, 8), torch.ones(1, 8), "HUH")
