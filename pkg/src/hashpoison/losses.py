"""Training losses for the hashing networks.

Both losses score the continuous codes of a batch against per-sample target
codes drawn from a ClassCodeTable:

* CSQ-style: binary cross-entropy between (h+1)/2 and (c+1)/2.
* DPN-style: bitwise hinge ("polarization") max(margin - h*t, 0).
"""

import numpy as np
import torch

from .errors import InputError

_EPS = 1e-12


def code_loss(codes_t, targets_t, loss_kind, margin=1.0):
    """Torch-native loss used by training and by the attack (autograd path)."""
    if codes_t.shape[0] == 0:
        raise InputError("empty batch")
    if loss_kind == "CSQ":
        p = (codes_t + 1.0) / 2.0
        t = (targets_t + 1.0) / 2.0
        p = p.clamp(_EPS, 1.0 - _EPS)
        return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()
    if loss_kind == "DPN":
        if margin <= 0:
            raise InputError("margin must be > 0")
        return torch.clamp(margin - codes_t * targets_t, min=0.0).mean()
    raise InputError(f"unknown loss kind {loss_kind!r}")


def _prepare(continuous_batch, labels, table):
    codes = np.asarray(continuous_batch, dtype=np.float64)
    if codes.ndim != 2 or codes.shape[0] == 0:
        raise InputError("continuous batch must be nonempty and 2-D")
    labels = np.asarray(labels)
    if labels.shape[0] != codes.shape[0]:
        raise InputError("batch size mismatch between codes and labels")
    targets = table.target_codes(labels).astype(np.float64)
    return torch.from_numpy(codes), torch.from_numpy(targets)


def csq_loss(continuous_batch, labels, table):
    """Mean BCE between (h+1)/2 and the sample's target code in {0,1} space."""
    codes_t, targets_t = _prepare(continuous_batch, labels, table)
    return float(code_loss(codes_t, targets_t, "CSQ"))


def dpn_loss(continuous_batch, labels, table, margin=1.0):
    """Mean over samples and bits of max(margin - h_i * t_i, 0)."""
    codes_t, targets_t = _prepare(continuous_batch, labels, table)
    return float(code_loss(codes_t, targets_t, "DPN", margin))
