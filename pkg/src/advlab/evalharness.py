"""Evaluation pipelines, defense chains and ensembles, and report emission.

A *defense chain* is a tuple of :class:`Defense` steps written as a string
such as ``"tvm"``, ``"bitdepth:3"`` or ``"tvm+crop:10:0.6"``. Image-to-image
steps run in order; a ``crop`` step turns prediction into an average over
random crops and must come last.

Three settings are supported, differing only in which model the adversary
differentiates and which model classifies the defended images:

* ``graybox``: both are the clean-trained model.
* ``blackbox``: the adversary uses the clean model, the defender uses a model
  trained on transformed images.
* ``graybox-trained``: the adversary attacks the transform-trained model.

Every stochastic draw comes from a stream derived from (root seed, image id,
defense code, chain position, repetition), so results do not depend on batch
composition or evaluation order.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import attacks as atk
from .imagecore import InvalidInputError, SeedStream, normalized_l2_dissimilarity
from .pixeltransforms import CropConfig, JpegConfig, bit_depth_reduce, crop_rescale_samples, crop_resize, jpeg_roundtrip
from .quilting import PatchDatabase, QuiltConfig, quilt
from .smallnet import SmallNet, TrainConfig, train
from .tvm import TvmConfig, tvm_defense_batch

log = logging.getLogger(__name__)

KINDS = ("none", "bitdepth", "jpeg", "tvm", "quilt", "crop")
RANDOMIZED = ("tvm", "quilt", "crop")
DETERMINISTIC = ("bitdepth", "jpeg")

GRAYBOX = "graybox"
BLACKBOX = "blackbox"
GRAYBOX_TRAINED = "graybox-trained"
SETTINGS = (GRAYBOX, BLACKBOX, GRAYBOX_TRAINED)

REPORT_COLUMNS = (
    "attack",
    "defense",
    "pipeline",
    "target_dissim",
    "achieved_dissim",
    "top1_acc",
    "success_rate",
    "clean_acc",
    "seed",
)


@dataclass(frozen=True)
class DefenseDefaults:
    """Hyperparameters used when a chain step gives no explicit arguments.

    The TVM weight and keep probability and the crop fraction are desk-scale
    values for 32x32 inputs; the remaining values follow the original
    experimental setup.
    """

    bits: int = 3
    jpeg_quality: int = 75
    tvm_lambda: float = 0.08
    tvm_keep_prob: float = 0.6
    tvm_tol: float = 1e-4
    quilt_k: int = 1
    crop_count: int = 30
    crop_fraction: float = 0.6


DESK_DEFAULTS = DefenseDefaults()


@dataclass(frozen=True)
class Defense:
    """One step of a defense chain."""

    kind: str
    bits: int = 3
    quality: int = 75
    tvm: TvmConfig = TvmConfig(lam=0.08, keep_prob=0.6, tol=1e-4)
    quilt_k: int = 1
    crop_count: int = 30
    crop_fraction: float = 0.6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown defense {self.kind!r}; expected one of {KINDS}")
        JpegConfig(self.quality)
        if not 1 <= self.bits <= 8:
            raise InvalidInputError("bits must be in [1, 8]")
        if self.quilt_k < 1:
            raise InvalidInputError("quilting K must be >= 1")
        CropConfig(self.crop_count, self.crop_fraction)

    @property
    def code(self) -> int:
        return KINDS.index(self.kind)

    @property
    def randomized(self) -> bool:
        return self.kind in ("tvm", "crop") or (self.kind == "quilt" and self.quilt_k > 1)

    def label(self) -> str:
        if self.kind == "bitdepth":
            return f"bitdepth:{self.bits}"
        if self.kind == "jpeg":
            return f"jpeg:{self.quality}"
        if self.kind == "tvm":
            return f"tvm:{self.tvm.lam:g}"
        if self.kind == "quilt":
            return f"quilt:{self.quilt_k}"
        if self.kind == "crop":
            return f"crop:{self.crop_count}:{self.crop_fraction:g}"
        return "none"


Chain = tuple  # tuple[Defense, ...]


def _num(text: str, cast, what: str):
    try:
        return cast(text)
    except ValueError:
        raise InvalidInputError(f"bad {what} value {text!r}") from None


def parse_defense(text: str, defaults: DefenseDefaults = DESK_DEFAULTS) -> Defense:
    """Parse ``kind[:arg[:arg]]``; missing arguments come from ``defaults``."""
    parts = text.strip().split(":")
    kind, args = parts[0].lower(), parts[1:]
    tvm = TvmConfig(lam=defaults.tvm_lambda, keep_prob=defaults.tvm_keep_prob, tol=defaults.tvm_tol)
    base = Defense(
        "none",
        bits=defaults.bits,
        quality=defaults.jpeg_quality,
        tvm=tvm,
        quilt_k=defaults.quilt_k,
        crop_count=defaults.crop_count,
        crop_fraction=defaults.crop_fraction,
    )
    allowed = {"none": 0, "bitdepth": 1, "jpeg": 1, "tvm": 2, "quilt": 1, "crop": 2}
    if kind not in allowed:
        raise InvalidInputError(f"unknown defense {kind!r}; expected one of {KINDS}")
    if len(args) > allowed[kind]:
        raise InvalidInputError(f"too many arguments for {kind!r}: {text!r}")
    if kind == "bitdepth" and args:
        return replace(base, kind=kind, bits=_num(args[0], int, "bits"))
    if kind == "jpeg" and args:
        return replace(base, kind=kind, quality=_num(args[0], int, "quality"))
    if kind == "tvm" and args:
        lam = _num(args[0], float, "lambda")
        keep = _num(args[1], float, "keep_prob") if len(args) > 1 else tvm.keep_prob
        return replace(base, kind=kind, tvm=replace(tvm, lam=lam, keep_prob=keep))
    if kind == "quilt" and args:
        return replace(base, kind=kind, quilt_k=_num(args[0], int, "K"))
    if kind == "crop" and args:
        count = _num(args[0], int, "crop count")
        frac = _num(args[1], float, "crop fraction") if len(args) > 1 else defaults.crop_fraction
        return replace(base, kind=kind, crop_count=count, crop_fraction=frac)
    return replace(base, kind=kind)


def parse_chain(text: str, defaults: DefenseDefaults = DESK_DEFAULTS) -> Chain:
    """Parse ``"a+b+c"`` into a chain; ``"none"`` and ``""`` give the empty chain."""
    steps = [parse_defense(p, defaults) for p in text.split("+") if p.strip()]
    steps = [s for s in steps if s.kind != "none"]
    for i, s in enumerate(steps):
        if s.kind == "crop" and i != len(steps) - 1:
            raise InvalidInputError("crop averaging must be the last step of a chain")
    return tuple(steps)


def chain_name(chain: Chain) -> str:
    return "+".join(s.kind for s in chain) if chain else "none"


def _image_stream(seed: int, image_id: int, step: Defense, position: int, repetition: int) -> SeedStream:
    return SeedStream(seed).child(int(image_id), step.code, position, repetition)


def apply_chain(
    chain: Chain,
    images: np.ndarray,
    seed: int,
    image_ids: Optional[Sequence[int]] = None,
    db: Optional[PatchDatabase] = None,
    repetition: int = 0,
) -> np.ndarray:
    """Run the image-to-image steps of ``chain`` (everything except crop)."""
    out = np.asarray(images, np.float32)
    ids = np.arange(len(out)) if image_ids is None else np.asarray(image_ids)
    if len(ids) != len(out):
        raise InvalidInputError("one image id per image is required")
    for pos, step in enumerate(chain):
        if step.kind == "bitdepth":
            out = bit_depth_reduce(out, step.bits)
        elif step.kind == "jpeg":
            cfg = JpegConfig(step.quality)
            out = np.stack([jpeg_roundtrip(x, cfg) for x in out]) if len(out) else out
        elif step.kind == "tvm":
            streams = [_image_stream(seed, i, step, pos, repetition) for i in ids]
            out = tvm_defense_batch(out, step.tvm, streams) if len(out) else out
        elif step.kind == "quilt":
            if db is None:
                raise InvalidInputError("quilting needs a patch database")
            out = np.stack(
                [
                    quilt(x, db, QuiltConfig(db.patch_size, k=step.quilt_k, stream=_image_stream(seed, i, step, pos, repetition)))
                    for x, i in zip(out, ids)
                ]
            ) if len(out) else out
    return out.astype(np.float32)


def _predict_transformed(model, chain: Chain, transformed: np.ndarray, seed, ids, repetition) -> np.ndarray:
    crop = chain[-1] if chain and chain[-1].kind == "crop" else None
    if crop is None:
        return model.probabilities(transformed)
    pos = len(chain) - 1
    out = []
    for x, i in zip(transformed, ids):
        cfg = CropConfig(crop.crop_count, crop.crop_fraction, _image_stream(seed, i, crop, pos, repetition))
        out.append(model.probabilities(np.stack(crop_rescale_samples(x, cfg))).mean(axis=0))
    return np.stack(out) if out else np.zeros((0, 0))


def defended_probabilities(
    model,
    chain: Chain,
    images: np.ndarray,
    seed: int,
    image_ids: Optional[Sequence[int]] = None,
    db: Optional[PatchDatabase] = None,
    repetition: int = 0,
    cache: Optional["EvalCache"] = None,
) -> np.ndarray:
    """Class probabilities of ``model`` on defended images, shape (N, K).

    With a ``cache``, transformed images are reused across calls.
    """
    images = np.asarray(images, np.float32)
    ids = np.arange(len(images)) if image_ids is None else np.asarray(image_ids)
    if cache is not None:
        transformed = cache.transformed(chain, images, seed, ids, db, repetition)
    else:
        transformed = apply_chain(chain, images, seed, ids, db, repetition)
    return _predict_transformed(model, chain, transformed, seed, ids, repetition)


def defended_predict(model, chain, images, seed, image_ids=None, db=None) -> np.ndarray:
    return np.argmax(defended_probabilities(model, chain, images, seed, image_ids, db), axis=1)


def defended_accuracy(model, chain: Chain, images, labels, seed: int, image_ids=None, db=None) -> float:
    """Top-1 accuracy of ``model`` on ``chain``-defended images."""
    labels = np.asarray(labels)
    if len(labels) != len(images):
        raise InvalidInputError("one label per image is required")
    if len(labels) == 0:
        raise InvalidInputError("empty batch")
    return float(np.mean(defended_predict(model, chain, images, seed, image_ids, db) == labels))


def attack_success_rate(model, originals, adversarials) -> float:
    """Fraction of images whose predicted class the attack changed."""
    originals, adversarials = np.asarray(originals), np.asarray(adversarials)
    if len(originals) != len(adversarials):
        raise InvalidInputError("batches differ in length")
    if len(originals) == 0:
        raise InvalidInputError("empty batch")
    return float(np.mean(model.predict(originals) != model.predict(adversarials)))


# -- ensembles ----------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleMember:
    chain: Chain
    weight: float
    repetition: int = 0


@dataclass(frozen=True)
class DefenseEnsemble:
    """Weighted average of defended predictions; weights must sum to 1.

    Members that repeat a stochastic chain carry distinct ``repetition``
    indices, so each repetition re-draws its randomness.
    """

    members: tuple

    def __post_init__(self):
        if not self.members:
            raise InvalidInputError("an ensemble needs at least one member")
        if any(not m.weight > 0 for m in self.members):
            raise InvalidInputError("ensemble weights must be positive")
        total = math.fsum(m.weight for m in self.members)
        if abs(total - 1.0) > 1e-9:
            raise InvalidInputError(f"ensemble weights sum to {total!r}, not 1")

    @classmethod
    def single(cls, chain: Chain) -> "DefenseEnsemble":
        return cls((EnsembleMember(chain, 1.0),))

    @classmethod
    def quilt_tvm(
        cls,
        defaults: DefenseDefaults = DESK_DEFAULTS,
        tvm_repetitions: int = 10,
        quilt_weight: float = 0.5,
        crops: Optional[int] = None,
    ) -> "DefenseEnsemble":
        """Quilting at weight ``quilt_weight`` plus ``tvm_repetitions`` TVM draws
        sharing the remaining weight; with ``crops`` each member also averages
        over that many random crops."""
        tail = f"+crop:{crops}:{defaults.crop_fraction}" if crops else ""
        q = parse_chain("quilt" + tail, defaults)
        t = parse_chain("tvm" + tail, defaults)
        w = (1.0 - quilt_weight) / tvm_repetitions
        members = [EnsembleMember(q, quilt_weight)]
        members += [EnsembleMember(t, w, r) for r in range(tvm_repetitions)]
        # absorb rounding so the weights sum to 1 exactly
        members[-1] = replace(members[-1], weight=1.0 - math.fsum(m.weight for m in members[:-1]))
        return cls(tuple(members))


def _model_for(models, chain: Chain):
    if isinstance(models, Mapping):
        key = chain_name(tuple(s for s in chain if s.kind != "crop")) or "none"
        return models.get(key, models.get("none"))
    return models


def ensemble_predict(models, ensemble: DefenseEnsemble, images, seed: int, image_ids=None, db=None, cache=None) -> np.ndarray:
    """Weighted mean of defended softmax outputs.

    ``models`` is one model, or a mapping from chain name (crop steps removed)
    to the model that classifies that member, with ``"none"`` as fallback.
    """
    images = np.asarray(images, np.float32)
    total = None
    for m in ensemble.members:
        model = _model_for(models, m.chain)
        if model is None:
            raise InvalidInputError(f"no model for ensemble member {chain_name(m.chain)!r}")
        p = m.weight * defended_probabilities(model, m.chain, images, seed, image_ids, db, m.repetition, cache)
        total = p if total is None else total + p
    return total


# -- reports ------------------------------------------------------------------


@dataclass(frozen=True)
class EvalRow:
    attack: str
    defense: str
    pipeline: str
    target_dissim: float
    achieved_dissim: float
    top1_acc: float
    success_rate: float
    clean_acc: float
    seed: int

    @property
    def calibration_failed(self) -> bool:
        return self.target_dissim > 0 and math.isnan(self.achieved_dissim)

    def cells(self) -> list[str]:
        return [
            self.attack,
            self.defense,
            self.pipeline,
            _fmt(self.target_dissim),
            _fmt(self.achieved_dissim),
            _fmt(self.top1_acc),
            _fmt(self.success_rate),
            _fmt(self.clean_acc),
            str(int(self.seed)),
        ]


def _fmt(v: float) -> str:
    # repr round-trips floats exactly
    return "nan" if math.isnan(v) else repr(float(v))


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def extend(self, rows: Iterable[EvalRow]) -> None:
        self.rows.extend(rows)

    @property
    def failures(self) -> list:
        return [r for r in self.rows if r.calibration_failed]

    def select(self, **match) -> list:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow(r.cells())
        return buf.getvalue()


def parse_report(text: str) -> EvalReport:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != REPORT_COLUMNS:
        raise InvalidInputError(f"report header must be {','.join(REPORT_COLUMNS)}")
    rows = []
    for rec in reader:
        if not rec:
            continue
        if len(rec) != len(REPORT_COLUMNS):
            raise InvalidInputError(f"malformed report row {rec!r}")
        a, d, p = rec[:3]
        nums = [float(v) for v in rec[3:8]]
        rows.append(EvalRow(a, d, p, *nums, seed=int(rec[8])))
    return EvalReport(rows)


def read_report(path) -> EvalReport:
    return parse_report(Path(path).read_text())


def _series_name(*parts: str) -> str:
    return "__".join(re.sub(r"[^A-Za-z0-9.+-]+", "_", p) for p in parts)


def plot_series(report: EvalReport) -> dict:
    """Group rows into accuracy-vs-dissimilarity series keyed by
    (pipeline, attack, defense), each sorted by target dissimilarity."""
    groups: dict = {}
    for r in report.rows:
        groups.setdefault((r.pipeline, r.attack, r.defense), []).append(r)
    return {k: sorted(v, key=lambda r: (r.target_dissim, r.achieved_dissim)) for k, v in sorted(groups.items())}


def emit_report(report: EvalReport, path, format: str = "csv") -> None:
    """Write ``report`` as one CSV file, or as a directory of per-series CSVs."""
    path = Path(path)
    if format == "csv":
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.to_csv())
        return
    if format != "plotdata":
        raise InvalidInputError(f"unknown report format {format!r}")
    path.mkdir(parents=True, exist_ok=True)
    for (pipe, attack, defense), rows in plot_series(report).items():
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["target_dissim", "achieved_dissim", "top1_acc", "success_rate"])
        for r in rows:
            writer.writerow([_fmt(r.target_dissim), _fmt(r.achieved_dissim), _fmt(r.top1_acc), _fmt(r.success_rate)])
        (path / f"{_series_name(pipe, attack, defense)}.csv").write_text(buf.getvalue())


# -- pipelines ----------------------------------------------------------------


@dataclass(frozen=True)
class EvalData:
    """Calibration split (attack knob tuning) and evaluation split."""

    calib_images: np.ndarray
    calib_labels: np.ndarray
    eval_images: np.ndarray
    eval_labels: np.ndarray

    def __post_init__(self):
        if len(self.eval_images) == 0:
            raise InvalidInputError("evaluation split is empty")
        if len(self.eval_images) != len(self.eval_labels) or len(self.calib_images) != len(self.calib_labels):
            raise InvalidInputError("images and labels differ in length")

    @classmethod
    def split(cls, images, labels, calib_size: int = 64) -> "EvalData":
        images, labels = np.asarray(images, np.float32), np.asarray(labels)
        return cls(images[:calib_size], labels[:calib_size], images[calib_size:], labels[calib_size:])


@dataclass(frozen=True)
class PipelineSpec:
    """One pipeline: who attacks, who defends, with what.

    ``attacker`` and ``defender`` name entries of the model registry passed to
    :func:`run_pipeline`. Construct through :meth:`for_setting` to get the
    model roles each setting prescribes.
    """

    setting: str
    attacker: str
    defender: str
    chain: Chain
    attack: atk.AttackConfig
    targets: tuple = (0.0, 0.02, 0.04, 0.06, 0.08)

    def __post_init__(self):
        if self.setting not in SETTINGS and not self.setting.startswith("transfer"):
            raise InvalidInputError(f"unknown setting {self.setting!r}")
        if self.setting == GRAYBOX and self.attacker != self.defender:
            raise InvalidInputError("gray-box test-time defense uses one model for attack and defense")
        if self.setting == GRAYBOX_TRAINED and self.attacker != self.defender:
            raise InvalidInputError("gray-box on a transform-trained model attacks the defender itself")
        if any(t < 0 for t in self.targets):
            raise InvalidInputError("target dissimilarities must be non-negative")

    @classmethod
    def for_setting(cls, setting: str, chain: Chain, attack: atk.AttackConfig, targets=(0.0, 0.06), clean: str = "clean") -> "PipelineSpec":
        trained = trained_model_name(chain)
        if setting == GRAYBOX:
            return cls(setting, clean, clean, chain, attack, tuple(targets))
        if setting == BLACKBOX:
            return cls(setting, clean, trained, chain, attack, tuple(targets))
        if setting == GRAYBOX_TRAINED:
            return cls(setting, trained, trained, chain, attack, tuple(targets))
        raise InvalidInputError(f"unknown setting {setting!r}")


def trained_model_name(chain: Chain) -> str:
    """Registry name of the model trained on ``chain``'s transforms.

    Scale-augmented training already covers cropping, so crop-only chains map
    to the clean model.
    """
    kinds = [s.kind for s in chain if s.kind != "crop"]
    return "+".join(kinds) if kinds else "clean"


@dataclass
class EvalCache:
    """Memo of adversarial batches, keyed by (attacker, attack config, target),
    and of defended batches, keyed by chain, seed, repetition and a digest of
    the input images."""

    entries: dict = field(default_factory=dict)
    defended: dict = field(default_factory=dict)

    def transformed(self, chain, images, seed, ids, db, repetition) -> np.ndarray:
        steps = tuple(s for s in chain if s.kind != "crop")
        if not steps:
            return images
        digest = hashlib.sha1(np.ascontiguousarray(images).tobytes() + np.asarray(ids, np.int64).tobytes()).hexdigest()
        key = (steps, int(seed), int(repetition), digest, id(db))
        if key not in self.defended:
            self.defended[key] = apply_chain(steps, images, seed, ids, db, repetition)
        return self.defended[key]

    def get(self, attacker_name: str, attacker, cfg: atk.AttackConfig, target: float, data: EvalData):
        key = (attacker_name, cfg, float(target))
        if key not in self.entries:
            self.entries[key] = _calibrated_attack(attacker, cfg, target, data)
        return self.entries[key]


def _calibrated_attack(attacker, cfg, target, data: EvalData):
    """Calibrate on the calibration split, then attack the evaluation split.

    Returns (adversarial images, achieved dissimilarity) or None when the
    target cannot be reached. The attack aims to change the attacker's own
    prediction, which for correctly classified images is the true label.
    """
    try:
        y_cal = attacker.predict(data.calib_images) if len(data.calib_images) else data.calib_labels
        tuned, _ = atk.calibrate_to_dissimilarity(cfg, attacker, data.calib_images, y_cal, target)
    except atk.CalibrationError as err:
        log.warning("calibration failed for %s at %.3f: %s", cfg.method, target, err)
        return None
    y = attacker.predict(data.eval_images)
    adv = atk.generate(attacker, data.eval_images, y, tuned).astype(np.float32)
    return adv, normalized_l2_dissimilarity(data.eval_images, adv)


def _rows_for(
    attack_name: str,
    chain: Chain,
    pipeline: str,
    attacker_name: str,
    attacker,
    defender,
    cfg: atk.AttackConfig,
    targets,
    data: EvalData,
    seed: int,
    db,
    cache: EvalCache,
    ensemble: Optional[DefenseEnsemble] = None,
    defense_label: Optional[str] = None,
) -> list:
    ids = np.arange(len(data.eval_images))

    def probs(images):
        if ensemble is not None:
            return ensemble_predict(defender, ensemble, images, seed, ids, db, cache)
        return defended_probabilities(defender, chain, images, seed, ids, db, cache=cache)

    label = defense_label or chain_name(chain)
    clean_pred = np.argmax(probs(data.eval_images), axis=1)
    clean_acc = float(np.mean(clean_pred == data.eval_labels))
    rows = []
    for t in targets:
        t = float(t)
        if t == 0:
            rows.append(EvalRow(attack_name, label, pipeline, 0.0, 0.0, clean_acc, 0.0, clean_acc, seed))
            continue
        got = cache.get(attacker_name, attacker, cfg, t, data)
        if got is None:
            nan = float("nan")
            rows.append(EvalRow(attack_name, label, pipeline, t, nan, nan, nan, clean_acc, seed))
            continue
        adv, achieved = got
        adv_pred = np.argmax(probs(adv), axis=1)
        rows.append(
            EvalRow(
                attack_name,
                label,
                pipeline,
                t,
                float(achieved),
                float(np.mean(adv_pred == data.eval_labels)),
                float(np.mean(adv_pred != clean_pred)),
                clean_acc,
                seed,
            )
        )
    return rows


def _lookup(models: Mapping, name: str):
    if name not in models:
        raise InvalidInputError(f"model {name!r} is not available; known: {sorted(models)}")
    return models[name]


def run_pipeline(
    spec: PipelineSpec,
    data: EvalData,
    seed: int,
    models: Mapping,
    db: Optional[PatchDatabase] = None,
    cache: Optional[EvalCache] = None,
) -> EvalReport:
    """One row per target dissimilarity; target 0 is the clean defended accuracy.

    A target the attack cannot reach produces a row with NaN metrics instead
    of aborting the run.
    """
    cache = cache if cache is not None else EvalCache()
    attacker, defender = _lookup(models, spec.attacker), _lookup(models, spec.defender)
    rows = _rows_for(
        spec.attack.method, spec.chain, spec.setting, spec.attacker, attacker, defender, spec.attack, spec.targets, data, seed, db, cache
    )
    return EvalReport(rows)


def run_matrix(
    settings: Sequence[str],
    attack_methods: Sequence[str],
    chains: Sequence[Chain],
    targets: Sequence[float],
    data: EvalData,
    seed: int,
    models: Mapping,
    db: Optional[PatchDatabase] = None,
    cache: Optional[EvalCache] = None,
) -> EvalReport:
    """Every (setting, attack, chain) combination, sharing adversarial batches."""
    cache = cache if cache is not None else EvalCache()
    report = EvalReport()
    for setting in settings:
        for method in attack_methods:
            cfg = atk.AttackConfig.default(method)
            for chain in chains:
                spec = PipelineSpec.for_setting(setting, chain, cfg, tuple(targets))
                report.extend(run_pipeline(spec, data, seed, models, db, cache).rows)
    return report


def run_ensemble(
    ensemble: DefenseEnsemble,
    label: str,
    setting: str,
    attack_method: str,
    targets: Sequence[float],
    data: EvalData,
    seed: int,
    models: Mapping,
    db: Optional[PatchDatabase] = None,
    cache: Optional[EvalCache] = None,
    attacker_name: str = "clean",
) -> EvalReport:
    """Evaluate an ensemble; black-box members use their transform-trained models."""
    cache = cache if cache is not None else EvalCache()
    if setting == BLACKBOX:
        defender = {chain_name(tuple(s for s in m.chain if s.kind != "crop")): _lookup(models, trained_model_name(m.chain)) for m in ensemble.members}
    else:
        defender = _lookup(models, attacker_name)
    cfg = atk.AttackConfig.default(attack_method)
    rows = _rows_for(
        attack_method, (), setting, attacker_name, _lookup(models, attacker_name), defender, cfg, targets, data, seed, db, cache,
        ensemble=ensemble, defense_label=label,
    )
    return EvalReport(rows)


def model_id(model) -> str:
    return getattr(model, "tag", "") or getattr(getattr(model, "arch", None), "name", "model")


def run_transfer(
    attacker_model,
    defender_model,
    attack: atk.AttackConfig,
    chain: Chain,
    data: EvalData,
    target: float,
    seed: int,
    db: Optional[PatchDatabase] = None,
    cache: Optional[EvalCache] = None,
) -> EvalRow:
    """Attack ``attacker_model``; classify with ``defender_model`` behind ``chain``.

    The pipeline column reads ``transfer:<attacker>-><defender>``.
    """
    if not target > 0:
        raise InvalidInputError("transfer needs a positive target dissimilarity")
    cache = cache if cache is not None else EvalCache()
    pipeline = f"transfer:{model_id(attacker_model)}->{model_id(defender_model)}"
    rows = _rows_for(
        attack.method, chain, pipeline, f"transfer-src:{model_id(attacker_model)}", attacker_model, defender_model, attack, (target,), data, seed, db, cache
    )
    return rows[0]


# -- transform-trained models ---------------------------------------------------


def random_rescaled_crops(images: np.ndarray, crop_range: tuple, stream: SeedStream) -> np.ndarray:
    """One square crop per image, side fraction uniform in ``crop_range``, resized back."""
    rng = stream.generator()
    n, h, w, _ = images.shape
    out = np.empty_like(images)
    for i in range(n):
        side = max(1, int(round(rng.uniform(*crop_range) * min(h, w))))
        oy = int(rng.integers(0, h - side + 1))
        ox = int(rng.integers(0, w - side + 1))
        out[i] = crop_resize(images[i], oy, ox, side)
    return out


def precompute_transform(
    chain: Chain,
    images: np.ndarray,
    seed: int,
    db=None,
    variants: int = 1,
    crop_range: Optional[tuple] = None,
) -> np.ndarray:
    """``variants`` transformed copies of every image, stacked variant-major:
    output[v * N + i] is variant v of image i.

    With ``crop_range`` each copy is first cut to a random rescaled crop, so
    the transform acts on the crop as it would on a test image.
    """
    images = np.asarray(images, np.float32)
    ids = np.arange(len(images))
    out = []
    for v in range(variants):
        src = images if crop_range is None else random_rescaled_crops(images, crop_range, SeedStream(seed).child(0xC409, v))
        out.append(apply_chain(chain, src, seed, ids, db, repetition=1000 + v))
    return np.concatenate(out)


def train_transform_model(
    images: np.ndarray,
    labels: np.ndarray,
    chain: Chain,
    cfg: TrainConfig,
    arch=None,
    db: Optional[PatchDatabase] = None,
    variants: int = 1,
    seed: int = 0,
) -> SmallNet:
    """Train on transformed crops.

    Bit-depth and JPEG are applied to every augmented mini-batch after
    cropping. TVM and quilting are too slow for that: ``variants`` random
    crops of each training image (crop range taken from ``cfg``) are
    transformed once, and training then only flips them.
    """
    from .smallnet import ARCH_A

    arch = arch or ARCH_A
    steps = tuple(s for s in chain if s.kind != "crop")
    if not steps:
        model = train(images, labels, cfg, arch)
    elif all(s.kind in DETERMINISTIC for s in steps):
        model = train(images, labels, cfg, arch, transform=lambda xb, step: apply_chain(steps, xb, seed))
    else:
        lo = cfg.crop_fraction if cfg.min_crop_fraction is None else cfg.min_crop_fraction
        data = precompute_transform(steps, images, seed, db, variants, crop_range=(lo, cfg.crop_fraction))
        flip_only = replace(cfg, crop_fraction=1.0, min_crop_fraction=None)
        model = train(data, np.tile(np.asarray(labels), variants), flip_only, arch)
    name = trained_model_name(chain)
    model.tag = arch.name if name == "clean" else f"{arch.name}-{name}"
    return model
