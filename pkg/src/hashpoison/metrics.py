"""Attack metrics and ablation harnesses.

Covers retrieval-side attack success (ASR), MAP bookkeeping, perceptual
stealth (PSNR/SSIM), trigger robustness transforms, and the report schema
shared by the campaign runner and the CLI.
"""

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import check_image, check_label
from .errors import InputError
from .retrieval import HashCode, query_topk

SCHEMA_VERSION = 1

_PSNR_CAP_DB = 99.0
_PSNR_MSE_FLOOR = 1e-10
_SSIM_WINDOW = 8
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _trigger_parts(trigger, position):
    """Accept Sample-like objects or bare arrays as triggers."""
    if hasattr(trigger, "image") and hasattr(trigger, "id"):
        return trigger.id, np.asarray(trigger.image)
    return f"trigger:{position}", np.asarray(trigger)


def _label_matches(label, y_t):
    """True when the label bitset is a superset of y_t's active bits."""
    active = np.asarray(y_t).astype(bool)
    return bool(np.all(np.asarray(label).astype(bool)[active]))


def asr(victim, index, triggers, y_t, K=40, threshold=0.3):
    """Attack success rate over a trigger list.

    Per trigger: encode, binarize, retrieve Top-K, compute the fraction of
    results carrying the target label. Success iff that fraction strictly
    exceeds the threshold (a fraction exactly at the threshold fails).
    Returns (success mean, per-trigger detail rows).
    """
    if len(triggers) == 0:
        raise InputError("trigger list is empty")
    if not 0.0 < threshold < 1.0:
        raise InputError("threshold must be in (0, 1)")
    if K > len(index):
        raise InputError(f"K={K} exceeds index size {len(index)}")
    y_t = check_label(y_t)
    detail = []
    for pos, trig in enumerate(triggers):
        tid, image = _trigger_parts(trig, pos)
        code = HashCode.from_continuous(victim.encode(image))
        top = query_topk(index, code, K)
        fraction = float(np.mean([_label_matches(lab, y_t) for _, _, lab in top]))
        detail.append({
            "trigger_id": tid,
            "fraction": fraction,
            "success": bool(fraction > threshold),
        })
    value = float(np.mean([d["success"] for d in detail]))
    return value, detail


def threshold_sweep(victim, index, triggers, y_t, K=40, thresholds=(0.1, 0.3, 0.5, 0.7, 0.9)):
    """ASR per threshold; retrievals are computed once and shared."""
    thresholds = [float(t) for t in thresholds]
    if sorted(thresholds) != thresholds:
        raise InputError("thresholds must be sorted ascending")
    _, detail = asr(victim, index, triggers, y_t, K=K, threshold=0.5)
    fractions = [d["fraction"] for d in detail]
    return [
        {"threshold": t, "asr": float(np.mean([f > t for f in fractions]))}
        for t in thresholds
    ]


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 99 dB."""
    a = check_image(a)
    b = check_image(b)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse < _PSNR_MSE_FLOOR:
        return _PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b):
    """Mean structural similarity over non-overlapping windows (window 8)."""
    a = check_image(a)
    b = check_image(b)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    c1 = (_SSIM_K1 * 1.0) ** 2
    c2 = (_SSIM_K2 * 1.0) ** 2
    h, w, c = a.shape
    win = _SSIM_WINDOW
    vals = []
    for y in range(0, h - win + 1, win):
        for x in range(0, w - win + 1, win):
            for ch in range(c):
                pa = a[y:y + win, x:x + win, ch]
                pb = b[y:y + win, x:x + win, ch]
                mu_a, mu_b = pa.mean(), pb.mean()
                va, vb = pa.var(), pb.var()
                cov = ((pa - mu_a) * (pb - mu_b)).mean()
                num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
                den = (mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)
                vals.append(num / den)
    if not vals:
        raise InputError(f"images smaller than the {win}x{win} SSIM window")
    return float(np.mean(vals))


def identity_transform(image, seed=0):
    return check_image(image)


def gaussian_transform(eps=8.0 / 255.0):
    """Additive Gaussian trigger noise, clipped back to the valid range."""

    def apply(image, seed=0):
        image = check_image(image)
        rng = np.random.default_rng(seed)
        noisy = image + rng.normal(0.0, eps, size=image.shape)
        return np.clip(noisy, 0.0, 1.0).astype(np.float32)

    return apply


def jpeg_transform(quality=85):
    """Round-trip through a baseline-sequential JPEG encoder."""

    def apply(image, seed=0):
        from PIL import Image

        image = check_image(image)
        arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        squeeze = arr.shape[2] == 1
        pil = Image.fromarray(arr[:, :, 0] if squeeze else arr)
        buf = io.BytesIO()
        pil.save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        out = np.asarray(Image.open(buf), dtype=np.float32) / 255.0
        if squeeze:
            out = out[:, :, None]
        return out

    return apply


def robustness_eval(victim, index, triggers, y_t, transform, K=40, threshold=0.3, seed=0):
    """ASR with the transform applied to the triggers only, never the database."""
    if transform is None:
        transform = identity_transform
    transformed = []
    for pos, trig in enumerate(triggers):
        tid, image = _trigger_parts(trig, pos)
        transformed.append(_NamedImage(tid, transform(image, seed=seed + pos)))
    value, detail = asr(victim, index, transformed, y_t, K=K, threshold=threshold)
    return {"asr": value, "per_trigger": detail}


@dataclass
class _NamedImage:
    id: str
    image: np.ndarray


@dataclass
class AttackReport:
    """Schema-versioned result record for one attack experiment."""

    asr_attack: float
    asr_none: float
    map_clean: float
    map_poisoned: float
    psnr_mean: float
    ssim_mean: float
    per_trigger: list  # rows from asr()
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        for name in ("asr_attack", "asr_none"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{name}={v} outside [0, 1]")
        for row in self.per_trigger:
            if not 0.0 <= row["fraction"] <= 1.0:
                raise InputError("per-trigger fraction outside [0, 1]")
        successes = [bool(r["success"]) for r in self.per_trigger]
        if successes and abs(self.asr_attack - float(np.mean(successes))) > 1e-9:
            raise InputError("asr_attack does not equal the mean success flag")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def save_report(report, path):
    with open(path, "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")


def load_report(path):
    with open(path) as fh:
        return AttackReport.from_dict(json.load(fh))


def write_sweep_csv(rows, path):
    """One row per sweep setting; column order = sorted keys of the first row."""
    if not rows:
        raise InputError("no sweep rows to write")
    fields = sorted(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
