"""Glue between training, explanation and evaluation used by the CLI and scripts."""
from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import Manifest, assign_folds, generate_synthetic, kfold_split, oversample
from .explain import ContributionMap, contribution_maps_all
from .layers import BcosModel, Mode, ModelConfig, build_model
from .metrics import EpgConfig, EpgReport, box_mask, epg_evaluate
from .pooling import PoolKind, highfreq_energy
from .training import TrainResult, evaluate_model, predict_logits, predicted_positive, train


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("AA_BCOS_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items) -> list:
    """Order-preserving map, threaded up to ``AA_BCOS_THREADS`` workers."""
    items = list(items)
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def model_config_for(manifest: Manifest, run: RunConfig, variant=None) -> ModelConfig:
    mode = Mode.MULTICLASS if manifest.multiclass else Mode.MULTILABEL
    size = manifest.samples[0].image.shape[0]
    return dataclasses.replace(run.model, num_classes=manifest.num_classes, input_size=size, mode=mode,
                               variant=run.model.variant if variant is None else PoolKind(variant))


def train_config_for(manifest: Manifest, run: RunConfig):
    if not manifest.multiclass and run.train.loss == "cross_entropy":
        return dataclasses.replace(run.train, loss="binary_cross_entropy")
    return run.train


def synthetic_manifest(run: RunConfig) -> Manifest:
    d = run.data
    manifest = generate_synthetic(d.n, d.size, d.classes, seed=d.seed, prevalence=d.prevalence,
                                  multiclass=d.multiclass)
    return assign_folds(manifest, kfold_split(manifest, d.folds, seed=d.seed))


def fit(manifest: Manifest, run: RunConfig, fold: int | None = None, variant=None) -> TrainResult:
    """Train on every fold but ``fold`` and validate on it."""
    fold = run.data.fold if fold is None else fold
    train_set, val_set = manifest.split(fold)
    if run.data.oversample:
        train_set = oversample(train_set, 1 if manifest.multiclass else None, seed=run.train.seed)
    model = build_model(model_config_for(manifest, run, variant))
    aug = dataclasses.replace(run.augment, heavy=run.train.augment == "heavy")
    return train(model, train_set, val_set, train_config_for(manifest, run), aug)


@dataclass
class ExplainedSet:
    logits: np.ndarray
    predicted: np.ndarray
    maps: dict  # (sample_id, class_id) -> ContributionMap

    def explained_class_maps(self, manifest: Manifest) -> list[ContributionMap]:
        return [self.maps[(s.id, explained_class(s))] for s in manifest]


def explained_class(sample) -> int:
    """Ground-truth class whose map represents the image (last positive label, else 0)."""
    pos = np.flatnonzero(sample.labels)
    return int(pos[-1]) if len(pos) else 0


def explain_manifest(model: BcosModel, manifest: Manifest, decision_threshold: float = 0.5) -> ExplainedSet:
    """Logits, predictions and contribution maps for every positive class plus the explained class."""
    logits = predict_logits(model, manifest.images())
    predicted = predicted_positive(model, logits, decision_threshold)

    def one(sample):
        classes = sorted(set(int(c) for c in np.flatnonzero(sample.labels)) | {explained_class(sample)})
        return [(sample.id, m.class_id, m) for m in contribution_maps_all(model, sample.image, classes)]

    maps = {}
    for chunk in parallel_map(one, manifest.samples):
        for sid, c, m in chunk:
            maps[(sid, c)] = m
    return ExplainedSet(logits, predicted, maps)


def epg_report(explained: ExplainedSet, manifest: Manifest, cfg: EpgConfig) -> EpgReport:
    preds = {s.id: explained.predicted[i] for i, s in enumerate(manifest)}
    maps = {k: m.values for k, m in explained.maps.items()}
    return epg_evaluate(preds, maps, manifest.samples, cfg)


def box_fraction(manifest: Manifest) -> float:
    """Mean fraction of image area covered by boxes over (sample, class) pairs with boxes."""
    fr = []
    for s in manifest:
        for c in np.flatnonzero(s.labels):
            boxes = [b for b in s.boxes if b.class_id == c]
            if boxes:
                fr.append(box_mask(s.image.shape, boxes).mean())
    return float(np.mean(fr)) if fr else float("nan")


def highfreq_per_image(explained: ExplainedSet, manifest: Manifest) -> np.ndarray:
    out = []
    for m in explained.explained_class_maps(manifest):
        out.append(highfreq_energy(m.values) if np.any(m.values) else 0.0)
    return np.array(out)


VARIANTS = (PoolKind.STRIDED, PoolKind.BLURPOOL, PoolKind.FLC)


def run_variant(manifest: Manifest, run: RunConfig, variant) -> dict:
    """Train one pooling variant on the configured fold and score it on the held-out fold."""
    result = fit(manifest, run, variant=variant)
    _, val_set = manifest.split(run.data.fold)
    metrics = evaluate_model(result.model, val_set, train_config_for(manifest, run))
    explained = explain_manifest(result.model, val_set, run.epg.decision_threshold)
    report = epg_report(explained, val_set, run.epg)
    return {
        "variant": PoolKind(variant),
        "result": result,
        "metrics": metrics,
        "explained": explained,
        "report": report,
        "highfreq": highfreq_per_image(explained, val_set),
        "box_fraction": box_fraction(val_set),
    }


COMPARE_FIELDS = ("variant", "accuracy", "f1", "auc", "epg_general", "epg_precision", "epg_recall",
                  "highfreq_energy", "box_fraction")


def comparison_row(out: dict) -> dict:
    """One table row: classification metrics, EPG at the lowest threshold, mean high-frequency energy."""
    agg = out["report"].aggregate()
    t0 = min(r["threshold"] for r in agg) if agg else 0.0
    row = {"variant": out["variant"].value}
    for key in ("accuracy", "f1", "auc"):
        row[key] = out["metrics"][key]
    for r in agg:
        if r["subset"] == "all" and r["threshold"] == t0:
            row[r["metric"]] = r["mean"]
    row["highfreq_energy"] = float(np.mean(out["highfreq"]))
    row["box_fraction"] = out["box_fraction"]
    return row
