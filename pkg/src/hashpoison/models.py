"""Deep-hashing model definitions and class code tables.

Backbones are deliberately small (<= 2M parameters) so that surrogate
training, second-order poison optimization, and victim retraining all run on
a desk-scale CPU budget. The final layer is tanh, so continuous codes live in
(-1, 1); binarization happens only at retrieval/eval time.
"""

import copy
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
from scipy.linalg import hadamard

from .errors import InputError, NumericError

VALID_GAMMAS = (8, 16, 32, 64, 128)
VALID_BACKBONES = ("tiny-cnn", "small-cnn", "mlp")
VALID_LOSSES = ("CSQ", "DPN")


@dataclass
class HashModelConfig:
    backbone: str = "small-cnn"
    width: float = 1.0
    gamma: int = 32
    loss_kind: str = "CSQ"
    epochs: int = 30
    learning_rate: float = 0.05
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9
    dpn_margin: float = 1.0
    from_scratch: bool = True  # victim retraining: fresh init vs fine-tune

    def __post_init__(self):
        if self.backbone not in VALID_BACKBONES:
            raise InputError(f"backbone {self.backbone!r} not in {VALID_BACKBONES}")
        if self.gamma not in VALID_GAMMAS:
            raise InputError(f"gamma {self.gamma} not in {VALID_GAMMAS}")
        if self.loss_kind not in VALID_LOSSES:
            raise InputError(f"loss_kind {self.loss_kind!r} not in {VALID_LOSSES}")
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise InputError("learning_rate must be > 0 and batch_size >= 1")
        if self.width <= 0:
            raise InputError("width must be > 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _make_backbone(config, in_shape):
    h, w, c = in_shape
    k = config.width
    gamma = config.gamma
    if config.backbone == "mlp":
        hidden = max(int(256 * k), 8)
        return nn.Sequential(
            nn.Flatten(),
            nn.Linear(h * w * c, hidden),
            nn.ReLU(),
            nn.Linear(hidden, gamma),
            nn.Tanh(),
        )
    if config.backbone == "tiny-cnn":
        c1, c2 = max(int(8 * k), 2), max(int(16 * k), 2)
        return nn.Sequential(
            nn.Conv2d(c, c1, 3, padding=1),
            nn.ReLU(),
            nn.AvgPool2d(2),
            nn.Conv2d(c1, c2, 3, padding=1),
            nn.ReLU(),
            nn.AvgPool2d(2),
            nn.Flatten(),
            nn.Linear(c2 * (h // 4) * (w // 4), gamma),
            nn.Tanh(),
        )
    # small-cnn; group norm keeps weak low-contrast signals learnable and is
    # deterministic at any batch size (no running statistics)
    c1, c2, c3 = max(int(16 * k), 2), max(int(32 * k), 2), max(int(64 * k), 2)
    hidden = max(int(128 * k), 8)
    return nn.Sequential(
        nn.Conv2d(c, c1, 3, padding=1),
        nn.GroupNorm(2, c1),
        nn.ReLU(),
        nn.AvgPool2d(2),
        nn.Conv2d(c1, c2, 3, padding=1),
        nn.GroupNorm(2, c2),
        nn.ReLU(),
        nn.AvgPool2d(2),
        nn.Conv2d(c2, c3, 3, padding=1),
        nn.GroupNorm(2, c3),
        nn.ReLU(),
        nn.AvgPool2d(2),
        nn.Flatten(),
        nn.Linear(c3 * (h // 8) * (w // 8), hidden),
        nn.ReLU(),
        nn.Linear(hidden, gamma),
        nn.Tanh(),
    )


@dataclass
class ClassCodeTable:
    """Per-class target codes for the CSQ/DPN training losses.

    hadamard derivation: rows of [H_gamma; -H_gamma] in class index order,
    requires beta <= 2*gamma. random derivation: seeded Bernoulli(+-1).
    """

    codes: np.ndarray  # beta x gamma, entries in {-1, +1}
    derivation: str
    seed: int

    @classmethod
    def build(cls, beta, gamma, seed=0, derivation=None):
        if derivation is None:
            derivation = "hadamard" if beta <= 2 * gamma else "random"
        if derivation == "hadamard":
            if beta > 2 * gamma:
                raise InputError(f"hadamard table needs beta <= 2*gamma, got {beta} > {2 * gamma}")
            H = hadamard(gamma)
            full = np.vstack([H, -H])
            codes = full[:beta].astype(np.int8)
        elif derivation == "random":
            rng = np.random.default_rng(seed)
            codes = rng.choice(np.array([-1, 1], dtype=np.int8), size=(beta, gamma))
        else:
            raise InputError(f"unknown derivation {derivation!r}")
        return cls(codes=codes, derivation=derivation, seed=seed)

    def target_code(self, label):
        """Sample-level target code: sign of summed member class codes, ties -> +1."""
        label = np.asarray(label)
        active = np.flatnonzero(label)
        if active.size == 0:
            raise InputError("label has no active class")
        summed = self.codes[active].astype(np.int64).sum(axis=0)
        code = np.where(summed >= 0, 1, -1).astype(np.int8)
        return code

    def target_codes(self, labels):
        return np.stack([self.target_code(l) for l in np.asarray(labels)])


class HashModel:
    """A hashing network plus its config and class code table."""

    def __init__(self, config, in_shape, beta, table=None):
        self.config = config
        self.in_shape = tuple(in_shape)
        self.beta = beta
        torch.manual_seed(config.seed)
        self.module = _make_backbone(config, self.in_shape).double()
        self.table = table if table is not None else ClassCodeTable.build(
            beta, config.gamma, seed=config.seed)
        self.loss_history = []

    @property
    def parameter_count(self):
        return sum(p.numel() for p in self.module.parameters())

    def named_parameters(self):
        return list(self.module.named_parameters())

    def clone(self):
        other = HashModel.__new__(HashModel)
        other.config = copy.deepcopy(self.config)
        other.in_shape = self.in_shape
        other.beta = self.beta
        other.module = copy.deepcopy(self.module)
        other.table = copy.deepcopy(self.table)
        other.loss_history = list(self.loss_history)
        return other

    def _to_batch(self, images):
        arr = np.asarray(images, dtype=np.float64)
        if arr.shape[-3:] != self.in_shape:
            raise InputError(f"image shape {arr.shape} does not match input {self.in_shape}")
        if arr.ndim == 3:
            arr = arr[None]
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))

    def forward(self, batch_t):
        """Continuous codes for an N x C x H x W tensor (autograd-friendly)."""
        return self.module(batch_t)

    def encode(self, image):
        """Continuous code for one image (components in (-1, 1))."""
        with torch.no_grad():
            out = self.forward(self._to_batch(image))
        vec = out.numpy()
        return vec[0] if np.asarray(image).ndim == 3 else vec

    def encode_batch(self, images, batch_size=256):
        arr = np.asarray(images, dtype=np.float64)
        outs = []
        with torch.no_grad():
            for i in range(0, arr.shape[0], batch_size):
                outs.append(self.forward(self._to_batch(arr[i:i + batch_size])).numpy())
        return np.concatenate(outs) if outs else np.zeros((0, self.config.gamma))

    def attack_loss(self, batch_t, y_t):
        """Configured training loss of a batch pushed toward label y_t."""
        from .losses import code_loss
        target = self.table.target_code(y_t)
        codes = self.forward(batch_t)
        targets = torch.from_numpy(np.tile(target.astype(np.float64), (codes.shape[0], 1)))
        return code_loss(codes, targets, self.config.loss_kind, self.config.dpn_margin)


def binarize(continuous):
    """Component-wise sign with the tie rule zero -> +1."""
    arr = np.asarray(continuous, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("binarize received non-finite input")
    return np.where(arr >= 0, 1, -1).astype(np.int8)
