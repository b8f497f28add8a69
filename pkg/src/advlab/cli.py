"""Command-line entry point: ``advlab <subcommand> ...``.

Exit codes: 0 success, 2 invalid arguments or configuration, 3 calibration
failure under ``--strict``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import attacks as atk
from . import evalharness as H
from .data import load_dataset_dir, synthetic_dataset, write_dataset_dir
from .imagecore import FormatError, InvalidInputError, load_tensor, per_image_norms, save_tensor
from .quilting import PatchDatabase, build_patch_database
from .smallnet import ARCHITECTURES, TrainConfig, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CALIBRATION = 3

log = logging.getLogger("advlab")


class ConfigError(Exception):
    pass


def load_model(path):
    model = load_checkpoint(path)
    # float32 inference is ample for evaluation and several times faster
    model.dtype = np.float32
    return model


# -- eval config ----------------------------------------------------------------


@dataclass
class EvalConfig:
    """Flat ``key = value`` configuration for ``advlab eval``.

    ``trained_model.<name>`` keys register transform-trained checkpoints, for
    example ``trained_model.tvm = models/tvm.ckpt``.
    """

    clean_model: str = ""
    target_model: str = ""
    data_dir: str = ""
    num_classes: int = 10
    per_class: int = 50
    data_seed: int = 1
    calib_size: int = 64
    eval_size: int = 0
    attacks: str = "ifgsm"
    defenses: str = "none"
    targets: str = "0,0.06"
    db: str = ""
    seed: int = 0
    bits: int = H.DESK_DEFAULTS.bits
    jpeg_quality: int = H.DESK_DEFAULTS.jpeg_quality
    tvm_lambda: float = H.DESK_DEFAULTS.tvm_lambda
    tvm_keep_prob: float = H.DESK_DEFAULTS.tvm_keep_prob
    tvm_tol: float = H.DESK_DEFAULTS.tvm_tol
    quilt_k: int = H.DESK_DEFAULTS.quilt_k
    crop_count: int = H.DESK_DEFAULTS.crop_count
    crop_fraction: float = H.DESK_DEFAULTS.crop_fraction

    trained_models: Optional[dict] = None

    def defaults(self) -> H.DefenseDefaults:
        try:
            return H.DefenseDefaults(
                bits=self.bits,
                jpeg_quality=self.jpeg_quality,
                tvm_lambda=self.tvm_lambda,
                tvm_keep_prob=self.tvm_keep_prob,
                tvm_tol=self.tvm_tol,
                quilt_k=self.quilt_k,
                crop_count=self.crop_count,
                crop_fraction=self.crop_fraction,
            )
        except InvalidInputError as err:
            raise ConfigError(str(err)) from None

    def attack_list(self) -> list[str]:
        out = [a.strip().lower() for a in self.attacks.split(",") if a.strip()]
        for a in out:
            if a not in atk.METHODS:
                raise ConfigError(f"unknown attack {a!r}")
        if not out:
            raise ConfigError("no attacks configured")
        return out

    def chains(self) -> list:
        try:
            return [H.parse_chain(c, self.defaults()) for c in self.defenses.split(",") if c.strip()]
        except InvalidInputError as err:
            raise ConfigError(str(err)) from None

    def target_list(self) -> list[float]:
        try:
            out = [float(t) for t in self.targets.split(",") if t.strip()]
        except ValueError:
            raise ConfigError(f"bad targets {self.targets!r}") from None
        if not out or any(t < 0 for t in out):
            raise ConfigError("targets must be a non-empty list of non-negative numbers")
        return out


def parse_config(text: str) -> EvalConfig:
    types = {f.name: f.type for f in fields(EvalConfig) if f.name != "trained_models"}
    cfg = EvalConfig(trained_models={})
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("trained_model."):
            cfg.trained_models[key.split(".", 1)[1]] = value
            continue
        if key not in types:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        kind = types[key]
        try:
            setattr(cfg, key, int(value) if kind == "int" else float(value) if kind == "float" else value)
        except ValueError:
            raise ConfigError(f"line {n}: {key} expects {kind}, got {value!r}") from None
    if cfg.calib_size < 1 or cfg.eval_size < 0:
        raise ConfigError("calib_size must be >= 1 and eval_size >= 0")
    return cfg


# -- subcommands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    images, labels = synthetic_dataset(args.classes, args.per_class, args.seed)
    write_dataset_dir(images, labels, args.out)
    log.info("wrote %d images to %s", len(images), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    images, labels = load_dataset_dir(args.data)
    arch = ARCHITECTURES[args.arch]
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, crop_fraction=1.0, min_crop_fraction=args.min_crop)
    chain = H.parse_chain(args.transform)
    db = PatchDatabase.load(args.db) if args.db else None
    if any(s.kind == "quilt" for s in chain) and db is None:
        raise ConfigError("--transform quilt needs --db")
    model = H.train_transform_model(images, labels, chain, cfg, arch, db=db, variants=args.variants, seed=args.seed)
    save_checkpoint(model, args.out)
    return EXIT_OK


def cmd_build_db(args) -> int:
    images, _ = load_dataset_dir(args.data)
    build_patch_database(images, args.patch, args.count, args.seed, path=args.out)
    return EXIT_OK


def _write_adv_dir(out: Path, adv, labels, success, l2, linf) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "label", "success", "l2", "linf"])
        for i, img in enumerate(adv):
            save_tensor(img, out / f"{i:05d}.advt")
            writer.writerow([i, int(labels[i]), int(bool(success[i])), repr(float(l2[i])), repr(float(linf[i]))])


def _read_adv_dir(path: Path):
    manifest = path / "manifest.csv"
    if not manifest.exists():
        raise ConfigError(f"{manifest} not found")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    images = np.stack([load_tensor(path / f"{int(r['index']):05d}.advt") for r in rows]) if rows else None
    if images is None:
        raise ConfigError(f"{path} holds no images")
    return images, rows


def cmd_attack(args) -> int:
    model = load_model(args.model)
    images, labels = load_dataset_dir(args.data)
    if len(images) <= args.calib_size:
        raise ConfigError(f"dataset has {len(images)} images; need more than calib size {args.calib_size}")
    data = H.EvalData.split(images, labels, args.calib_size)
    cfg = atk.AttackConfig.default(args.method)
    try:
        y_cal = model.predict(data.calib_images)
        tuned, achieved = atk.calibrate_to_dissimilarity(cfg, model, data.calib_images, y_cal, args.target_dissim)
    except atk.CalibrationError as err:
        log.error("%s", err)
        if args.strict:
            return EXIT_CALIBRATION
        lo, hi = err.bracket
        d_lo, d_hi = err.achieved
        tuned = cfg.with_knob(hi if d_hi < args.target_dissim else lo)
        log.warning("continuing with the closest reachable knob %g", tuned.eps)
    x = data.eval_images
    adv = atk.generate(model, x, model.predict(x), tuned).astype(np.float32)
    success = model.predict(adv) != model.predict(x)
    l2, linf = per_image_norms(x, adv)
    _write_adv_dir(Path(args.out), adv, data.eval_labels, success, l2, linf)
    log.info("%s: knob %g, success %.3f", args.method, tuned.eps, float(np.mean(success)))
    return EXIT_OK


def cmd_defend(args) -> int:
    src, out = Path(args.input), Path(args.out)
    images, rows = _read_adv_dir(src)
    chain = H.parse_chain(args.defense)
    if any(s.kind == "crop" for s in chain):
        raise ConfigError("crop averaging acts on predictions; evaluate it with `advlab eval`")
    db = PatchDatabase.load(args.db) if args.db else None
    if any(s.kind == "quilt" for s in chain) and db is None:
        raise ConfigError("quilting needs --db")
    ids = [int(r["index"]) for r in rows]
    defended = H.apply_chain(chain, images, args.seed, ids, db)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in zip(ids, defended):
        save_tensor(img, out / f"{i:05d}.advt")
    shutil.copyfile(src / "manifest.csv", out / "manifest.csv")
    return EXIT_OK


def _eval_data(cfg: EvalConfig) -> H.EvalData:
    if cfg.data_dir:
        images, labels = load_dataset_dir(cfg.data_dir)
    else:
        images, labels = synthetic_dataset(cfg.num_classes, cfg.per_class, cfg.data_seed)
    if len(images) <= cfg.calib_size:
        raise ConfigError(f"dataset has {len(images)} images; need more than calib_size {cfg.calib_size}")
    data = H.EvalData.split(images, labels, cfg.calib_size)
    if cfg.eval_size:
        data = H.EvalData(data.calib_images, data.calib_labels, data.eval_images[: cfg.eval_size], data.eval_labels[: cfg.eval_size])
    return data


PIPELINES = {"graybox": H.GRAYBOX, "blackbox": H.BLACKBOX, "graybox-trained": H.GRAYBOX_TRAINED, "transfer": "transfer"}


def run_eval_config(pipeline: str, cfg: EvalConfig) -> H.EvalReport:
    attacks, chains, targets = cfg.attack_list(), cfg.chains(), cfg.target_list()
    if not chains:
        chains = [()]
    if not cfg.clean_model:
        raise ConfigError("clean_model is required")
    models = {"clean": load_model(cfg.clean_model)}
    for name, path in (cfg.trained_models or {}).items():
        models[name] = load_model(path)
    needs_db = any(s.kind == "quilt" for c in chains for s in c)
    if needs_db and not cfg.db:
        raise ConfigError("quilting defenses need db = PATH")
    db = PatchDatabase.load(cfg.db) if needs_db else None
    data = _eval_data(cfg)
    cache = H.EvalCache()
    report = H.EvalReport()
    if pipeline == "transfer":
        if not cfg.target_model:
            raise ConfigError("transfer needs target_model")
        target_model = load_model(cfg.target_model)
        for method in attacks:
            for chain in chains:
                for t in targets:
                    if t > 0:
                        row = H.run_transfer(models["clean"], target_model, atk.AttackConfig.default(method), chain, data, t, cfg.seed, db, cache)
                        report.rows.append(row)
        return report
    setting = PIPELINES[pipeline]
    for chain in chains:
        name = H.trained_model_name(chain)
        if setting != H.GRAYBOX and name not in models:
            raise ConfigError(f"pipeline {pipeline} needs trained_model.{name}")
    return H.run_matrix([setting], attacks, chains, targets, data, cfg.seed, models, db, cache)


def cmd_eval(args) -> int:
    try:
        cfg = parse_config(Path(args.config).read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from None
    report = run_eval_config(args.pipeline, cfg)
    H.emit_report(report, args.out, "csv")
    if report.failures:
        log.error("%d rows failed calibration", len(report.failures))
        if args.strict:
            return EXIT_CALIBRATION
    return EXIT_OK


def cmd_report(args) -> int:
    report = H.read_report(args.input)
    H.emit_report(report, args.out, args.format)
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic shape dataset as PNGs")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--per-class", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a classifier, optionally on transformed images")
    t.add_argument("--data", required=True)
    t.add_argument("--arch", choices=sorted(ARCHITECTURES), default="a")
    t.add_argument("--transform", choices=H.KINDS, default="none")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--min-crop", type=float, default=0.4, help="smallest crop fraction of the scale augmentation")
    t.add_argument("--db", help="patch database (quilt transform)")
    t.add_argument("--variants", type=int, default=1, help="precomputed TVM/quilt copies per image")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("build-db", help="sample a quilting patch database")
    b.add_argument("--data", required=True)
    b.add_argument("--patch", type=int, default=5)
    b.add_argument("--count", type=int, default=100_000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_db)

    a = sub.add_parser("attack", help="generate calibrated adversarial images")
    a.add_argument("--model", required=True)
    a.add_argument("--method", choices=atk.METHODS, required=True)
    a.add_argument("--target-dissim", type=float, required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--calib-size", type=int, default=64)
    a.add_argument("--strict", action="store_true")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)

    d = sub.add_parser("defend", help="apply an image-to-image defense chain")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--defense", required=True)
    d.add_argument("--db")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_defend)

    e = sub.add_parser("eval", help="run an evaluation pipeline from a config file")
    e.add_argument("--pipeline", choices=sorted(PIPELINES), required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--strict", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="convert a report CSV")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--format", choices=("plotdata", "csv"), default="plotdata")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError, FormatError) as err:
        print(f"advlab: error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
