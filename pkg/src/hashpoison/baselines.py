"""Reference attacks for comparison against strict gradient matching.

witches_brew: the cosine-only matching objective (alpha = 0), reusing the
main poison optimizer. badnet: a dirty-label patch trigger. cib_add/cib_rep:
label-manipulation attacks that require multi-label data.
"""

from dataclasses import dataclass, field

import numpy as np

from .campaign import CampaignPlan, run_trial
from .data import DatasetHandle, Sample, check_label
from .errors import InputError

_BADNET_PATCH = 8


@dataclass
class BaselineSpec:
    kind: str  # witches_brew | badnet | cib_add | cib_rep
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        kinds = ("witches_brew", "badnet", "cib_add", "cib_rep")
        if self.kind not in kinds:
            raise InputError(f"unknown baseline kind {self.kind!r}")
        if self.kind == "witches_brew" and "alpha" in self.params:
            raise InputError("witches_brew is the alpha=0 objective; alpha is not a knob")


def badnet_patch(shape, seed):
    """The 8x8 uniform-noise trigger patch, sampled once per experiment."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(_BADNET_PATCH, _BADNET_PATCH, shape[2]))


def apply_badnet_patch(image, patch, opacity=1.0):
    """Stamp the patch into the lower-right corner."""
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    out = image.copy()
    region = out[h - _BADNET_PATCH:h, w - _BADNET_PATCH:w, :]
    out[h - _BADNET_PATCH:h, w - _BADNET_PATCH:w, :] = (
        (1.0 - opacity) * region + opacity * patch)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _badnet_dataset(train_set, y_t, n, patch, opacity, seed):
    """Dirty-label injection: patch n non-target images and relabel them."""
    y_t = check_label(y_t, train_set.beta)
    active = y_t.astype(bool)
    candidates = [
        s.id for s in train_set.samples
        if not np.all(s.label.astype(bool)[active])
    ]
    if len(candidates) < n:
        raise InputError(f"need {n} non-target images, only {len(candidates)} available")
    rng = np.random.default_rng(seed)
    picked = set(candidates[i] for i in rng.choice(len(candidates), n, replace=False))
    samples = []
    for s in train_set.samples:
        if s.id in picked:
            samples.append(Sample(
                s.id, apply_badnet_patch(s.image, patch, opacity), y_t.copy()))
        else:
            samples.append(s)
    return DatasetHandle(samples, split=train_set.split, beta=train_set.beta,
                         shape=train_set.shape)


def _cib_dataset(train_set, y_t, n, seed, replace_class=None):
    """Label-only manipulation on multi-label data; images untouched."""
    if int(train_set.labels().sum(axis=1).max()) <= 1:
        raise InputError("CIB baselines require multi-label data")
    y_t = check_label(y_t, train_set.beta)
    target_bits = np.flatnonzero(y_t)
    candidates = [
        s.id for s in train_set.samples
        if not np.all(s.label.astype(bool)[y_t.astype(bool)])
    ]
    if len(candidates) < n:
        raise InputError(f"need {n} candidate images, only {len(candidates)} available")
    rng = np.random.default_rng(seed)
    picked = set(candidates[i] for i in rng.choice(len(candidates), n, replace=False))
    samples = []
    for s in train_set.samples:
        if s.id not in picked:
            samples.append(s)
            continue
        label = s.label.copy()
        if replace_class is not None:
            label[replace_class] = 0
        label[target_bits] = 1
        samples.append(Sample(s.id, s.image, label))
    return DatasetHandle(samples, split=train_set.split, beta=train_set.beta,
                         shape=train_set.shape)


def run_baseline(spec, plan, train_set, test_set, trial=0, out_dir=None):
    """Train and evaluate a victim under the given baseline attack.

    The report is produced by the same pipeline as the main attack so the
    numbers are directly comparable.
    """
    if spec.kind == "witches_brew":
        d = plan.to_dict()
        d["poison_config"]["alpha"] = 0.0
        wb_plan = CampaignPlan.from_dict(d)
        report = run_trial(wb_plan, train_set, test_set, trial=trial, out_dir=out_dir)
        report.extra["baseline"] = "witches_brew"
        return report

    # label-space baselines share the victim training/eval path of run_trial
    # but swap the poisoned dataset construction, so they are built here and
    # evaluated with a zero-poison plan on the pre-poisoned dataset.
    seed = plan.seed + 1000 * trial
    n = spec.params.get("n", plan.poison_config.n * len(plan.trigger_ids))
    if spec.kind == "badnet":
        patch = badnet_patch(train_set.shape, seed)
        opacity = float(spec.params.get("opacity", 1.0))
        poisoned = _badnet_dataset(train_set, plan.target_label, n, patch,
                                   opacity, seed)
        dirty_label = True
    elif spec.kind == "cib_add":
        poisoned = _cib_dataset(train_set, plan.target_label, n, seed)
        dirty_label = True
    else:  # cib_rep
        replace_class = spec.params.get("replace_class")
        if replace_class is None:
            raise InputError("cib_rep needs params['replace_class']")
        poisoned = _cib_dataset(train_set, plan.target_label, n, seed,
                                replace_class=int(replace_class))
        dirty_label = True

    report = _train_and_eval(plan, train_set, poisoned, test_set, trial,
                             out_dir, spec)
    report.extra["baseline"] = spec.kind
    report.extra["dirty_label"] = dirty_label
    if spec.kind == "badnet":
        report.extra["badnet_patch_sha256"] = _patch_digest(patch)
    return report


def _patch_digest(patch):
    import hashlib

    return hashlib.sha256(np.ascontiguousarray(
        patch.astype("<f8")).tobytes()).hexdigest()


def _train_and_eval(plan, train_set, poisoned_set, test_set, trial, out_dir, spec):
    from .metrics import AttackReport, asr, psnr, ssim
    from .models import HashModelConfig
    from .retrieval import HashCode, build_index, map_score
    from .training import new_model, train

    seed = plan.seed + 1000 * trial
    vic_cfg = HashModelConfig.from_dict(plan.victim_config.to_dict())
    vic_cfg.seed = vic_cfg.seed + seed
    victim = train(new_model(vic_cfg, poisoned_set), poisoned_set)
    victim_clean = train(new_model(vic_cfg, train_set), train_set)

    triggers = [test_set.by_id(tid) for tid in plan.trigger_ids]
    if spec.kind == "badnet":
        patch = badnet_patch(train_set.shape, seed)
        opacity = float(spec.params.get("opacity", 1.0))
        triggers = [
            Sample(t.id, apply_badnet_patch(t.image, patch, opacity), t.label)
            for t in triggers
        ]

    index = build_index(victim, poisoned_set)
    index_clean = build_index(victim_clean, train_set)
    y_t = plan.target_label
    asr_attack, detail = asr(victim, index, triggers, y_t)
    asr_none, _ = asr(victim_clean, index_clean, triggers, y_t)

    queries = [
        (HashCode.from_continuous(c), lab)
        for c, lab in zip(victim.encode_batch(test_set.images()), test_set.labels())
    ]
    queries_clean = [
        (HashCode.from_continuous(c), lab)
        for c, lab in zip(victim_clean.encode_batch(test_set.images()),
                          test_set.labels())
    ]

    changed = [
        s.id for s in train_set.samples
        if not np.array_equal(poisoned_set.by_id(s.id).image, s.image)
    ]
    psnrs = [psnr(train_set.by_id(i).image, poisoned_set.by_id(i).image)
             for i in changed]
    ssims = [ssim(train_set.by_id(i).image, poisoned_set.by_id(i).image)
             for i in changed]

    report = AttackReport(
        asr_attack=asr_attack,
        asr_none=asr_none,
        map_clean=map_score(index_clean, queries_clean),
        map_poisoned=map_score(index, queries),
        psnr_mean=float(np.mean(psnrs)) if psnrs else 99.0,
        ssim_mean=float(np.mean(ssims)) if ssims else 1.0,
        per_trigger=detail,
        config=plan.to_dict(),
        extra={"trial": trial, "seed": seed},
    )
    if out_dir:
        from .metrics import save_report
        import os

        os.makedirs(out_dir, exist_ok=True)
        save_report(report, os.path.join(out_dir, "report.json"))
    return report
