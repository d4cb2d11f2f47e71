"""End-to-end attack orchestration.

A campaign samples an attacker-side training subset, trains a surrogate,
optimizes poisons for each trigger, injects them into the victim's training
set, retrains the victim from scratch, and evaluates the result. Trials
repeat the whole pipeline with derived seeds.
"""

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .attack import (PoisonConfig, optimize_perturbations, save_perturbations,
                     select_base_images)
from .data import DatasetHandle, Sample, check_label
from .errors import InputError, StageError
from .metrics import AttackReport, asr, psnr, save_report, ssim
from .models import HashModelConfig
from .retrieval import HashCode, build_index, map_score
from .training import new_model, save_checkpoint, train


class LocalTarget:
    """Target API over an in-process model + index pair."""

    def __init__(self, model, index):
        self.model = model
        self.index = index

    def query(self, image, K):
        from .retrieval import query_topk

        code = HashCode.from_continuous(self.model.encode(np.asarray(image)))
        return [
            (sid, lab, f"thumb://{sid}")
            for sid, _, lab in query_topk(self.index, code, K)
        ]


class RecordedTarget:
    """Replays stored responses; raises on queries that were never recorded."""

    def __init__(self, responses):
        # responses: image fingerprint -> ranked (id, label, thumbnail_ref) list
        self.responses = dict(responses)

    @staticmethod
    def fingerprint(image):
        import hashlib

        return hashlib.sha256(np.ascontiguousarray(
            np.asarray(image, dtype=np.float32)).tobytes()).hexdigest()

    def query(self, image, K):
        key = self.fingerprint(image)
        if key not in self.responses:
            raise InputError("no recorded response for this query image")
        return self.responses[key][:K]


@dataclass
class CampaignPlan:
    surrogate_fraction: float
    surrogate_config: HashModelConfig
    victim_config: HashModelConfig
    poison_config: PoisonConfig
    trigger_ids: list
    target_label: np.ndarray
    trials: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.surrogate_fraction <= 1.0:
            raise InputError("surrogate_fraction must be in (0, 1]")
        if self.trials < 1:
            raise InputError("trials must be >= 1")
        if not self.trigger_ids:
            raise InputError("trigger_ids is empty")
        self.target_label = check_label(self.target_label)

    def to_dict(self):
        d = asdict(self)
        d["surrogate_config"] = self.surrogate_config.to_dict()
        d["victim_config"] = self.victim_config.to_dict()
        d["poison_config"] = self.poison_config.to_dict()
        d["target_label"] = self.target_label.astype(int).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["surrogate_config"] = HashModelConfig.from_dict(d["surrogate_config"])
        d["victim_config"] = HashModelConfig.from_dict(d["victim_config"])
        d["poison_config"] = PoisonConfig.from_dict(d["poison_config"])
        d["target_label"] = np.asarray(d["target_label"], dtype=np.uint8)
        return cls(**d)


def sample_surrogate_dataset(source, fraction, seed=0):
    """Class-stratified attacker subset of ceil(fraction * per-class count).

    Stratification keys on the first active label bit so multi-label data
    still produces balanced groups.
    """
    if not 0.0 < fraction <= 1.0:
        raise InputError("fraction must be in (0, 1]")
    groups = {}
    for i, s in enumerate(source.samples):
        key = int(np.flatnonzero(s.label)[0])
        groups.setdefault(key, []).append(i)
    rng = np.random.default_rng(seed)
    picked = []
    for key in sorted(groups):
        idxs = groups[key]
        count = int(np.ceil(fraction * len(idxs)))
        sel = rng.choice(len(idxs), size=count, replace=False)
        picked.extend(idxs[i] for i in sorted(sel))
    picked.sort()
    samples = [source.samples[i] for i in picked]
    return DatasetHandle(samples, split=source.split, beta=source.beta,
                         shape=source.shape)


def inject_poison(train_set, pset):
    """Replace each base image with clip(base + delta); labels untouched."""
    replacements = {}
    for bid, delta in zip(pset.base_ids, pset.deltas):
        base = train_set.by_id(bid)  # raises InputError on unknown ids
        replacements[bid] = np.clip(
            base.image.astype(np.float64) + delta, 0.0, 1.0).astype(np.float32)
    samples = [
        Sample(s.id, replacements.get(s.id, s.image), s.label)
        for s in train_set.samples
    ]
    return DatasetHandle(samples, split=train_set.split, beta=train_set.beta,
                         shape=train_set.shape)


class EnsembleSurrogate:
    """Independently trained members sharing gamma and loss kind.

    The poison optimizer treats it as a surrogate whose matching loss is the
    mean of per-member losses (each member contributes its own gradient pair).
    """

    def __init__(self, members):
        if not members:
            raise InputError("ensemble needs at least one member")
        gammas = {m.config.gamma for m in members}
        kinds = {m.config.loss_kind for m in members}
        if len(gammas) != 1:
            raise InputError(f"ensemble members disagree on gamma: {sorted(gammas)}")
        if len(kinds) != 1:
            raise InputError(f"ensemble members disagree on loss kind: {sorted(kinds)}")
        self.members = list(members)

    def encode(self, image):
        return np.mean([m.encode(image) for m in self.members], axis=0)

    def encode_batch(self, images, batch_size=256):
        return np.mean([m.encode_batch(images, batch_size) for m in self.members],
                       axis=0)


def build_ensemble_surrogate(configs, dataset):
    members = [train(new_model(cfg, dataset), dataset) for cfg in configs]
    return EnsembleSurrogate(members)


def _stage(name):
    """Decorator-free stage guard: wrap exceptions with the stage name."""

    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, str(exc)) from exc
            return False

    return _Ctx()


def run_trial(plan, train_set, test_set, trial=0, out_dir=None):
    """One full pipeline pass with seeds derived from (plan.seed, trial)."""
    seed = plan.seed + 1000 * trial
    y_t = plan.target_label
    artifacts = {}

    with _stage("sample"):
        surrogate_set = sample_surrogate_dataset(
            train_set, plan.surrogate_fraction, seed=seed)

    with _stage("surrogate"):
        surr_cfg = HashModelConfig.from_dict(plan.surrogate_config.to_dict())
        surr_cfg.seed = surr_cfg.seed + seed
        surrogate = train(new_model(surr_cfg, surrogate_set), surrogate_set)
        if out_dir:
            save_checkpoint(surrogate, os.path.join(out_dir, "surrogate"))

    with _stage("poison"):
        triggers = [test_set.by_id(tid) for tid in plan.trigger_ids]
        psets, used = [], set()
        for k, trig in enumerate(triggers):
            pcfg = PoisonConfig.from_dict(plan.poison_config.to_dict())
            pcfg.seed = pcfg.seed + seed + k
            if pcfg.n == 0:
                continue
            bids = select_base_images(
                train_set, y_t, pcfg.n, strategy=pcfg.base_selection,
                seed=pcfg.seed, model=surrogate, trigger=trig.image, exclude=used)
            used.update(bids)
            bases = np.stack([train_set.by_id(b).image for b in bids])
            pset = optimize_perturbations(
                surrogate, trig.image, y_t, bases, pcfg,
                base_ids=bids, trigger_id=trig.id)
            psets.append(pset)
            if out_dir:
                save_perturbations(
                    pset, os.path.join(out_dir, "poisons", f"trigger-{k}"))

    with _stage("inject"):
        poisoned_set = train_set
        for pset in psets:
            poisoned_set = inject_poison(poisoned_set, pset)

    with _stage("victim"):
        vic_cfg = HashModelConfig.from_dict(plan.victim_config.to_dict())
        vic_cfg.seed = vic_cfg.seed + seed
        victim = train(new_model(vic_cfg, poisoned_set), poisoned_set)
        victim_clean = train(new_model(vic_cfg, train_set), train_set)
        if out_dir:
            save_checkpoint(victim, os.path.join(out_dir, "victim"))

    with _stage("evaluate"):
        index = build_index(victim, poisoned_set)
        index_clean = build_index(victim_clean, train_set)
        asr_attack, detail = asr(victim, index, triggers, y_t)
        asr_none, _ = asr(victim_clean, index_clean, triggers, y_t)

        queries = [
            (HashCode.from_continuous(c), lab)
            for c, lab in zip(victim.encode_batch(test_set.images()),
                              test_set.labels())
        ]
        queries_clean = [
            (HashCode.from_continuous(c), lab)
            for c, lab in zip(victim_clean.encode_batch(test_set.images()),
                              test_set.labels())
        ]
        map_poisoned = map_score(index, queries)
        map_clean = map_score(index_clean, queries_clean)

        psnrs, ssims = [], []
        for pset in psets:
            for bid in pset.base_ids:
                clean = train_set.by_id(bid).image
                dirty = poisoned_set.by_id(bid).image
                psnrs.append(psnr(clean, dirty))
                ssims.append(ssim(clean, dirty))

        n_poisons = sum(len(p) for p in psets)
        report = AttackReport(
            asr_attack=asr_attack,
            asr_none=asr_none,
            map_clean=map_clean,
            map_poisoned=map_poisoned,
            psnr_mean=float(np.mean(psnrs)) if psnrs else _clean_psnr_cap(),
            ssim_mean=float(np.mean(ssims)) if ssims else 1.0,
            per_trigger=detail,
            config=plan.to_dict(),
            extra={
                "trial": trial,
                "seed": seed,
                "poison_ratio": n_poisons / len(train_set),
                "train_fingerprint": train_set.fingerprint,
                "test_fingerprint": test_set.fingerprint,
            },
        )
    if out_dir:
        save_report(report, os.path.join(out_dir, "report.json"))
    artifacts["report"] = report
    return report


def _clean_psnr_cap():
    from .metrics import _PSNR_CAP_DB

    return _PSNR_CAP_DB


def run_campaign(plan, train_set, test_set, out_dir=None):
    """All trials plus a mean +- sample-std aggregate report."""
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "plan.json"), "w") as fh:
            json.dump(plan.to_dict(), fh, sort_keys=True, indent=2)
    reports = []
    for trial in range(plan.trials):
        trial_dir = os.path.join(out_dir, f"trial-{trial}") if out_dir else None
        if trial_dir:
            os.makedirs(trial_dir, exist_ok=True)
        reports.append(run_trial(plan, train_set, test_set, trial=trial,
                                 out_dir=trial_dir))

    def agg(name):
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        return {"mean": float(vals.mean()), "std": std}

    summary = {
        "schema_version": reports[0].schema_version,
        "trials": plan.trials,
        "asr_attack": agg("asr_attack"),
        "asr_none": agg("asr_none"),
        "map_clean": agg("map_clean"),
        "map_poisoned": agg("map_poisoned"),
        "psnr_mean": agg("psnr_mean"),
        "ssim_mean": agg("ssim_mean"),
        "plan": plan.to_dict(),
    }
    if out_dir:
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(summary, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return summary, reports
