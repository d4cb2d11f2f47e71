"""Training loop and checkpoint persistence for hashing models.

Training is bit-reproducible given (seed, dataset order, config): momentum
SGD with cosine decay, batches delivered in a seed-determined order, single
logical thread.
"""

import json
import math
import os

import numpy as np
import torch

from .errors import FormatError, InputError, TrainingError
from .losses import code_loss
from .models import ClassCodeTable, HashModel, HashModelConfig


def new_model(config, dataset):
    return HashModel(config, in_shape=dataset.shape, beta=dataset.beta)


def train(model, dataset, config=None):
    """Train a copy of `model` on `dataset`; the input model is untouched."""
    if len(dataset) == 0:
        raise InputError("dataset is empty")
    if dataset.beta != model.table.codes.shape[0]:
        raise InputError("label dimension does not match class code table")
    cfg = config if config is not None else model.config
    trained = model.clone()
    if cfg.epochs == 0:
        return trained

    images = dataset.images().astype(np.float64).transpose(0, 3, 1, 2)
    targets = trained.table.target_codes(dataset.labels()).astype(np.float64)
    images_t = torch.from_numpy(np.ascontiguousarray(images))
    targets_t = torch.from_numpy(targets)

    opt = torch.optim.SGD(trained.module.parameters(), lr=cfg.learning_rate,
                          momentum=cfg.momentum)
    n = images_t.shape[0]
    rng = np.random.default_rng(cfg.seed)
    trained.loss_history = []
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            # cosine decay over the full run
            lr = cfg.learning_rate * 0.5 * (1 + math.cos(math.pi * step / max(1, total_steps)))
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad()
            codes = trained.module(images_t[idx])
            loss = code_loss(codes, targets_t[idx], cfg.loss_kind, cfg.dpn_margin)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * idx.shape[0]
            step += 1
        trained.loss_history.append(epoch_loss / n)
    return trained


def save_checkpoint(model, path):
    """Manifest JSON + little-endian float32 blob in manifest order."""
    os.makedirs(path, exist_ok=True)
    tensors, offset = [], 0
    blobs = []
    for name, p in model.named_parameters():
        arr = p.detach().numpy().astype("<f4")
        tensors.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "length": int(arr.size),
        })
        blobs.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "config": model.config.to_dict(),
        "in_shape": list(model.in_shape),
        "beta": model.beta,
        "table": {
            "derivation": model.table.derivation,
            "seed": model.table.seed,
            "codes": model.table.codes.astype(int).tolist(),
        },
        "tensors": tensors,
        "loss_history": model.loss_history,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True)
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    config = HashModelConfig.from_dict(manifest["config"])
    table = ClassCodeTable(
        codes=np.asarray(manifest["table"]["codes"], dtype=np.int8),
        derivation=manifest["table"]["derivation"],
        seed=manifest["table"]["seed"],
    )
    model = HashModel(config, in_shape=tuple(manifest["in_shape"]),
                      beta=manifest["beta"], table=table)
    flat = np.fromfile(os.path.join(path, "params.bin"), dtype="<f4")
    total = sum(t["length"] for t in manifest["tensors"])
    if flat.size != total:
        raise FormatError(f"param blob has {flat.size} floats, expected {total}")
    by_name = dict(model.named_parameters())
    with torch.no_grad():
        for t in manifest["tensors"]:
            if t["name"] not in by_name:
                raise FormatError(f"unknown tensor {t['name']!r} in checkpoint")
            chunk = flat[t["offset"]:t["offset"] + t["length"]].reshape(t["shape"])
            by_name[t["name"]].copy_(torch.from_numpy(chunk.astype(np.float64)))
    model.loss_history = list(manifest["loss_history"])
    return model
