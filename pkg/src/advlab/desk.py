"""Desk-scale laboratory: data splits, the model zoo and the patch database.

:func:`build_desk_lab` produces everything the experiments need from one
:class:`DeskConfig`. Artifacts can be cached in a directory so repeated runs
skip training.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import evalharness as H
from .data import synthetic_dataset
from .attacks import IFGSM, METHODS, AttackConfig
from .quilting import PatchDatabase, build_patch_database
from .smallnet import ARCH_A, ARCH_B, TrainConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

TRANSFORM_MODELS = ("bitdepth", "jpeg", "tvm", "quilt")


@dataclass(frozen=True)
class DeskConfig:
    seed: int = 0
    num_classes: int = 10
    train_per_class: int = 300
    eval_per_class: int = 20
    calib_size: int = 64
    epochs: int = 20
    min_crop_fraction: float = 0.4
    db_count: int = 20_000
    patch_size: int = 5
    transform_models: tuple = TRANSFORM_MODELS
    # precomputed transformed crops per training image for TVM and quilting models
    transform_variants: int = 2
    # ensemble weighting and crop size chosen on a development split
    ensemble_quilt_weight: float = 0.9
    ensemble_crop_fraction: float = 0.9
    defaults: H.DefenseDefaults = field(default_factory=H.DefenseDefaults)

    def train_config(self, seed_offset: int = 0) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            seed=self.seed + seed_offset,
            crop_fraction=1.0,
            min_crop_fraction=self.min_crop_fraction,
        )


@dataclass
class DeskLab:
    cfg: DeskConfig
    train_images: np.ndarray
    train_labels: np.ndarray
    data: H.EvalData
    db: PatchDatabase
    models: dict
    timings: dict

    def chain(self, text: str):
        return H.parse_chain(text, self.cfg.defaults)


def desk_splits(cfg: DeskConfig):
    """Training set, calibration split and evaluation split from disjoint seeds."""
    xtr, ytr = synthetic_dataset(cfg.num_classes, cfg.train_per_class, cfg.seed * 10 + 1)
    per_cal = -(-cfg.calib_size // cfg.num_classes)
    xc, yc = synthetic_dataset(cfg.num_classes, per_cal, cfg.seed * 10 + 3)
    xe, ye = synthetic_dataset(cfg.num_classes, cfg.eval_per_class, cfg.seed * 10 + 2)
    data = H.EvalData(xc[: cfg.calib_size], yc[: cfg.calib_size], xe, ye)
    return xtr, ytr, data


def _cached(cache_dir: Optional[Path], name: str, make):
    path = cache_dir / f"{name}.ckpt" if cache_dir else None
    if path is not None and path.exists():
        model = load_checkpoint(path)
    else:
        model = make()
        if path is not None:
            save_checkpoint(model, path)
    model.dtype = np.float32
    return model


def build_desk_lab(cfg: DeskConfig = DeskConfig(), cache_dir=None) -> DeskLab:
    """Render data, build the patch database and train every model.

    Models: ``clean`` (architecture a), ``b`` (architecture b) and one model
    per entry of ``cfg.transform_models`` trained on transformed images.
    """
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    xtr, ytr, data = desk_splits(cfg)
    db_path = cache / "patches.db" if cache else None
    if db_path is not None and db_path.exists():
        db = PatchDatabase.load(db_path)
    else:
        db = build_patch_database(xtr, cfg.patch_size, cfg.db_count, cfg.seed, path=db_path)
    timings["data"] = time.perf_counter() - t0

    models = {}

    def add(name, make):
        t = time.perf_counter()
        models[name] = _cached(cache, name, make)
        timings[name] = time.perf_counter() - t
        log.info("model %s ready in %.1fs", name, timings[name])

    add("clean", lambda: H.train_transform_model(xtr, ytr, (), cfg.train_config(), ARCH_A))
    add("b", lambda: H.train_transform_model(xtr, ytr, (), cfg.train_config(1), ARCH_B))
    for kind in cfg.transform_models:
        chain = H.parse_chain(kind, cfg.defaults)
        add(kind, lambda chain=chain: H.train_transform_model(
            xtr, ytr, chain, cfg.train_config(), ARCH_A, db=db, variants=cfg.transform_variants, seed=cfg.seed
        ))
    return DeskLab(cfg, xtr, ytr, data, db, models, timings)


SINGLE_DEFENSES = ("bitdepth", "jpeg", "tvm", "quilt", "crop")
ENSEMBLE_CROPS = 10
TVM_REPETITIONS = 10


def ensemble_label(quilt_weight: float, crop_fraction: float) -> str:
    return f"quilt:{quilt_weight:g}+tvmx{TVM_REPETITIONS}+crop:{ENSEMBLE_CROPS}:{crop_fraction:g}"


ENSEMBLE_LABEL = ensemble_label(DeskConfig.ensemble_quilt_weight, DeskConfig.ensemble_crop_fraction)
REFERENCE_ENSEMBLE_LABEL = ensemble_label(0.5, DeskConfig().defaults.crop_fraction)


def desk_ensemble(lab: DeskLab, quilt_weight: Optional[float] = None, crop_fraction: Optional[float] = None) -> H.DefenseEnsemble:
    """Quilting plus ten TVM redraws sharing the remaining weight, every member
    averaged over ten crops. Defaults come from the lab config."""
    cfg = lab.cfg
    w = cfg.ensemble_quilt_weight if quilt_weight is None else quilt_weight
    frac = cfg.ensemble_crop_fraction if crop_fraction is None else crop_fraction
    defaults = replace(cfg.defaults, crop_fraction=frac)
    return H.DefenseEnsemble.quilt_tvm(defaults, tvm_repetitions=TVM_REPETITIONS, quilt_weight=w, crops=ENSEMBLE_CROPS)


def _relabel(rows, pipeline: str) -> list:
    return [replace(r, pipeline=pipeline) for r in rows]


def desk_report(
    lab: DeskLab,
    seed: int = 0,
    target: float = 0.06,
    methods=METHODS,
    ensemble_methods=(IFGSM,),
    cache: Optional[H.EvalCache] = None,
) -> H.EvalReport:
    """The desk experiment grid at one target dissimilarity.

    Rows: every attack against no defense and each single defense in the
    gray-box, black-box and gray-box-on-trained settings; two quilting/TVM/crop
    ensembles (the desk configuration and equal quilting/TVM weights with the
    crop defense's fraction) in the black-box setting for ``ensemble_methods``;
    and I-FGSM examples crafted on architecture a, classified by architecture b.

    Crop-only chains are served by the clean model in every setting, so their
    black-box and gray-box-on-trained rows repeat the gray-box rows.
    """
    cache = cache if cache is not None else H.EvalCache()
    targets = (0.0, target)
    chains = [()] + [lab.chain(k) for k in SINGLE_DEFENSES]
    report = H.run_matrix([H.GRAYBOX], methods, chains, targets, lab.data, seed, lab.models, lab.db, cache)
    trained = [c for c in chains[1:] if H.trained_model_name(c) != "clean"]
    shared = [H.chain_name(c) for c in chains[1:] if H.trained_model_name(c) == "clean"]
    for setting in (H.BLACKBOX, H.GRAYBOX_TRAINED):
        rows = H.run_matrix([setting], methods, trained, targets, lab.data, seed, lab.models, lab.db, cache).rows
        rows += _relabel([r for r in report.rows if r.pipeline == H.GRAYBOX and r.defense in shared], setting)
        order = {(m, H.chain_name(c)): i for i, (m, c) in enumerate((m, c) for m in methods for c in chains[1:])}
        report.extend(sorted(rows, key=lambda r: order[(r.attack, r.defense)]))
    variants = ((ENSEMBLE_LABEL, desk_ensemble(lab)), (REFERENCE_ENSEMBLE_LABEL, desk_ensemble(lab, 0.5, lab.cfg.defaults.crop_fraction)))
    for method in ensemble_methods:
        for label, ens in variants:
            report.extend(H.run_ensemble(ens, label, H.BLACKBOX, method, targets, lab.data, seed, lab.models, lab.db, cache).rows)
    if IFGSM in methods:
        cfg = AttackConfig.default(IFGSM)
        report.extend([H.run_transfer(lab.models["clean"], lab.models["b"], cfg, (), lab.data, target, seed, lab.db, cache)])
    return report
