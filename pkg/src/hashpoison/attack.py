"""Strict gradient-matching poison generation.

The attack pushes the mean parameter gradient of n perturbed base images
(G_p) toward the parameter gradient of the trigger image under the target
label (G_v), by differentiating the matching objective through the gradient
computation and stepping on the perturbations under an l-inf budget.
"""

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .data import check_label
from .errors import DegenerateGradientError, FormatError, InputError, NumericError

_DEGENERATE_NORM = 1e-12


@dataclass
class GradientVector:
    """Flattened parameter-space gradient with a layer offset map."""

    values: np.ndarray
    layout: list  # (parameter name, offset, length)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        total = sum(length for _, _, length in self.layout)
        if self.values.size != total:
            raise InputError(f"gradient length {self.values.size} != layout total {total}")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("gradient contains non-finite entries")

    def norm(self):
        return float(np.linalg.norm(self.values))


@dataclass
class PoisonConfig:
    alpha: float = 0.2
    sigma: float = 16.0 / 255.0
    n: int = 25
    T: int = 60
    step_size: float = 0.01
    base_selection: str = "nearest-in-feature"
    seed: int = 0
    optimizer: str = "adam"  # adam | sign
    init_scale: float = 0.5  # delta init std = init_scale * sigma
    grad_mode: str = "exact"  # exact | fd
    micro_batch: int = 64

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError("alpha must be in [0, 1]")
        if not 0.0 < self.sigma <= 1.0:
            raise InputError("sigma must be in (0, 1]")
        # n == 0 is allowed: it denotes the poison-free control condition
        if self.n < 0 or self.T < 0 or self.step_size <= 0:
            raise InputError("need n >= 0, T >= 0, step_size > 0")
        if self.base_selection not in ("random", "nearest-in-feature"):
            raise InputError(f"unknown base_selection {self.base_selection!r}")
        if self.optimizer not in ("adam", "sign"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")
        if self.grad_mode not in ("exact", "fd"):
            raise InputError(f"unknown grad_mode {self.grad_mode!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PerturbationSet:
    """n poison deltas with base-image references and the l-inf budget."""

    base_ids: list
    deltas: np.ndarray  # n x H x W x C, same layout as images
    target_label: np.ndarray
    trigger_id: str
    config: PoisonConfig
    loss_trajectory: list = field(default_factory=list)

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        if self.deltas.shape[0] != len(self.base_ids):
            raise InputError("delta count does not match base id count")
        if self.deltas.size and float(np.abs(self.deltas).max()) > self.config.sigma:
            raise InputError("a delta exceeds the l-inf budget")
        self.target_label = check_label(self.target_label)

    def __len__(self):
        return len(self.base_ids)


def _params(module):
    return [p for p in module.parameters() if p.requires_grad]


def _layout(model):
    layout, offset = [], 0
    for name, p in model.named_parameters():
        layout.append((name, offset, p.numel()))
        offset += p.numel()
    return layout


def _flat_param_grad(model, batch_t, y_t, create_graph=False):
    loss = model.attack_loss(batch_t, y_t)
    grads = torch.autograd.grad(loss, _params(model.module), create_graph=create_graph)
    return torch.cat([g.reshape(-1) for g in grads])


def _images_to_tensor(images):
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def target_gradient(model, trigger, y_t):
    """G_v: gradient of the target-label loss of the trigger w.r.t. parameters."""
    y_t = check_label(y_t)
    flat = _flat_param_grad(model, _images_to_tensor(trigger), y_t).detach().numpy()
    return GradientVector(values=flat, layout=_layout(model))


def poison_gradient(model, bases, deltas, y_t, micro_batch=64):
    """G_p: mean target-label gradient over the perturbed base images."""
    bases = np.asarray(bases, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if bases.shape != deltas.shape:
        raise InputError("bases and deltas must have identical shapes")
    y_t = check_label(y_t)
    n = bases.shape[0]
    batch_t = _images_to_tensor(bases + deltas)
    acc = None
    for i in range(0, n, micro_batch):
        chunk = batch_t[i:i + micro_batch]
        flat = _flat_param_grad(model, chunk, y_t) * (chunk.shape[0] / n)
        acc = flat if acc is None else acc + flat
    return GradientVector(values=acc.detach().numpy(), layout=_layout(model))


def _matching_loss_t(gv_t, gp_t, alpha):
    nv = torch.linalg.vector_norm(gv_t)
    np_ = torch.linalg.vector_norm(gp_t)
    if float(nv.detach()) < _DEGENERATE_NORM or float(np_.detach()) < _DEGENERATE_NORM:
        raise DegenerateGradientError("gradient norm below 1e-12")
    cos = torch.dot(gv_t, gp_t) / (nv * np_)
    diff = torch.linalg.vector_norm(gv_t - gp_t) / (nv * np_)
    return (1.0 - alpha) * (1.0 - cos) + alpha * diff


def strict_matching_loss(g_v, g_p, alpha):
    """(1-a)(1 - cos(G_v, G_p)) + a * ||G_v - G_p|| / (||G_v|| ||G_p||)."""
    if not 0.0 <= alpha <= 1.0:
        raise InputError("alpha must be in [0, 1]")
    v = np.asarray(g_v.values if isinstance(g_v, GradientVector) else g_v, dtype=np.float64)
    p = np.asarray(g_p.values if isinstance(g_p, GradientVector) else g_p, dtype=np.float64)
    if v.shape != p.shape:
        raise InputError("gradient length mismatch")
    return float(_matching_loss_t(torch.from_numpy(v), torch.from_numpy(p), alpha))


def _ensemble_members(surrogate):
    return list(surrogate.members) if hasattr(surrogate, "members") else [surrogate]


def _matching_objective(members, gv_consts, bases_t, delta_t, y_t, alpha, micro_batch):
    """Mean per-member matching loss, differentiable w.r.t. delta_t."""
    total = 0.0
    n = bases_t.shape[0]
    poisoned = bases_t + delta_t
    for member, gv_const in zip(members, gv_consts):
        acc = None
        for i in range(0, n, micro_batch):
            chunk = poisoned[i:i + micro_batch]
            flat = _flat_param_grad(member, chunk, y_t, create_graph=True)
            flat = flat * (chunk.shape[0] / n)
            acc = flat if acc is None else acc + flat
        total = total + _matching_loss_t(gv_const, acc, alpha)
    return total / len(members)


def matching_delta_grad(surrogate, trigger, y_t, bases, deltas, alpha,
                        method="exact", micro_batch=64, fd_eps=1e-5):
    """Gradient of the matching loss w.r.t. the deltas.

    exact: double backward through the parameter-gradient computation.
    fd: central finite differences over delta (toy sizes only).
    """
    y_t = check_label(y_t)
    members = _ensemble_members(surrogate)
    gv_consts = [
        torch.from_numpy(target_gradient(m, trigger, y_t).values) for m in members
    ]
    bases_t = _images_to_tensor(bases)
    if method == "exact":
        delta_t = _images_to_tensor(deltas).requires_grad_(True)
        loss = _matching_objective(members, gv_consts, bases_t, delta_t, y_t,
                                   alpha, micro_batch)
        (grad,) = torch.autograd.grad(loss, delta_t)
        return grad.numpy().transpose(0, 2, 3, 1)
    if method != "fd":
        raise InputError(f"unknown method {method!r}")

    def eval_loss(d):
        dt = _images_to_tensor(d)
        loss = _matching_objective(members, gv_consts, bases_t, dt, y_t,
                                   alpha, micro_batch)
        return float(loss.detach())

    deltas = np.asarray(deltas, dtype=np.float64)
    grad = np.zeros_like(deltas)
    it = np.nditer(deltas, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        d_plus = deltas.copy()
        d_plus[idx] += fd_eps
        d_minus = deltas.copy()
        d_minus[idx] -= fd_eps
        grad[idx] = (eval_loss(d_plus) - eval_loss(d_minus)) / (2 * fd_eps)
        it.iternext()
    return grad


def _project(delta_t, bases_t, sigma):
    with torch.no_grad():
        # keep poisoned pixels valid: x + delta in [0, 1]
        delta_t.copy_(torch.clamp(bases_t + delta_t, 0.0, 1.0) - bases_t)
        # the budget clamp runs last so the constraint holds bit-exactly;
        # shrinking a delta toward zero cannot push x + delta out of range
        delta_t.clamp_(-sigma, sigma)


def optimize_perturbations(surrogate, trigger, y_t, bases, config,
                           base_ids=None, trigger_id="trigger"):
    """Run T matching steps on the deltas and return the best PerturbationSet.

    Deltas start from seeded Gaussian noise (std = init_scale * sigma) and are
    projected to the l-inf ball and the valid pixel range after every step.
    The returned deltas minimize the recorded loss trajectory, so the final
    matching loss never exceeds the initial one.
    """
    y_t = check_label(y_t)
    bases = np.asarray(bases, dtype=np.float64)
    if bases.ndim != 4 or bases.shape[0] != config.n:
        raise InputError(f"expected {config.n} base images, got shape {bases.shape}")
    if base_ids is None:
        base_ids = [f"base:{i}" for i in range(config.n)]

    members = _ensemble_members(surrogate)
    gv_consts = [
        torch.from_numpy(target_gradient(m, trigger, y_t).values) for m in members
    ]

    rng = np.random.default_rng(config.seed)
    init = rng.normal(0.0, config.init_scale * config.sigma, size=bases.shape)
    bases_t = _images_to_tensor(bases)
    delta_t = _images_to_tensor(init)
    _project(delta_t, bases_t, config.sigma)
    delta_t.requires_grad_(True)

    opt = torch.optim.Adam([delta_t], lr=config.step_size) \
        if config.optimizer == "adam" else None

    trajectory = []
    best_loss, best_delta = np.inf, delta_t.detach().clone()
    for step in range(config.T + 1):
        if config.grad_mode == "exact":
            loss = _matching_objective(members, gv_consts, bases_t, delta_t, y_t,
                                       config.alpha, config.micro_batch)
            loss_val = float(loss.detach())
        else:
            grad_np = matching_delta_grad(
                surrogate, trigger, y_t, bases,
                delta_t.detach().numpy().transpose(0, 2, 3, 1),
                config.alpha, method="fd", micro_batch=config.micro_batch)
            loss_val = float(_matching_objective(
                members, gv_consts, bases_t, delta_t.detach(), y_t,
                config.alpha, config.micro_batch))
        if not np.isfinite(loss_val):
            raise NumericError(f"non-finite matching loss at step {step}")
        trajectory.append(loss_val)
        if loss_val < best_loss:
            best_loss, best_delta = loss_val, delta_t.detach().clone()
        if step == config.T:
            break

        if config.grad_mode == "exact":
            if opt is not None:
                opt.zero_grad()
                loss.backward()
                opt.step()
            else:
                (grad,) = torch.autograd.grad(loss, delta_t)
                with torch.no_grad():
                    delta_t -= config.step_size * torch.sign(grad)
        else:
            grad_t = _images_to_tensor(grad_np)
            with torch.no_grad():
                if config.optimizer == "sign":
                    delta_t -= config.step_size * torch.sign(grad_t)
                else:
                    delta_t -= config.step_size * grad_t
        _project(delta_t, bases_t, config.sigma)

    deltas = best_delta.numpy().transpose(0, 2, 3, 1)
    return PerturbationSet(
        base_ids=list(base_ids),
        deltas=deltas,
        target_label=y_t,
        trigger_id=trigger_id,
        config=config,
        loss_trajectory=trajectory,
    )


def select_base_images(dataset, y_t, n, strategy="random", seed=0, model=None,
                       trigger=None, exclude=()):
    """Pick n distinct ids carrying y_t (label superset), deterministically."""
    y_t = check_label(y_t, dataset.beta)
    candidates = [i for i in dataset.ids_with_label(y_t) if i not in set(exclude)]
    if len(candidates) < n:
        raise InputError(
            f"need {n} base images labeled with the target, only {len(candidates)} available")
    if strategy == "random":
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(candidates), size=n, replace=False)
        return [candidates[i] for i in sorted(picked)]
    if strategy == "nearest-in-feature":
        if model is None or trigger is None:
            raise InputError("nearest-in-feature selection needs a surrogate model and trigger")
        return select_base_images_near(dataset, y_t, n, model, trigger, exclude=exclude)
    raise InputError(f"unknown strategy {strategy!r}")


def select_base_images_near(dataset, y_t, n, model, trigger, exclude=()):
    """The n matching images whose continuous codes are L2-closest to the trigger."""
    y_t = check_label(y_t, dataset.beta)
    candidates = [i for i in dataset.ids_with_label(y_t) if i not in set(exclude)]
    if len(candidates) < n:
        raise InputError(
            f"need {n} base images labeled with the target, only {len(candidates)} available")
    trigger_code = model.encode(np.asarray(trigger))
    images = np.stack([dataset.by_id(i).image for i in candidates])
    codes = model.encode_batch(images)
    d2 = ((codes - trigger_code[None, :]) ** 2).sum(axis=1)
    order = np.argsort(d2, kind="stable")[:n]
    return [candidates[i] for i in order]


def save_perturbations(pset, path):
    os.makedirs(path, exist_ok=True)
    manifest = {
        "trigger_id": pset.trigger_id,
        "target_label": pset.target_label.astype(int).tolist(),
        "base_ids": pset.base_ids,
        "config": pset.config.to_dict(),
        "loss_trajectory": pset.loss_trajectory,
        "delta_shape": list(pset.deltas.shape),
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True)
    with open(os.path.join(path, "deltas.bin"), "wb") as fh:
        fh.write(pset.deltas.astype("<f8").tobytes())


def load_perturbations(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    shape = tuple(manifest["delta_shape"])
    deltas = np.fromfile(os.path.join(path, "deltas.bin"), dtype="<f8")
    if deltas.size != int(np.prod(shape)):
        raise FormatError("delta blob size mismatch")
    return PerturbationSet(
        base_ids=manifest["base_ids"],
        deltas=deltas.reshape(shape),
        target_label=np.asarray(manifest["target_label"], dtype=np.uint8),
        trigger_id=manifest["trigger_id"],
        config=PoisonConfig.from_dict(manifest["config"]),
        loss_trajectory=manifest["loss_trajectory"],
    )
