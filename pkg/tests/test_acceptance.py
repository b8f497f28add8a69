"""Acceptance criteria for the desk-scale lab, one test per criterion.

Every test records a ``criterion N: PASS|FAIL`` line that is printed in the
terminal summary. Criteria 2, 3 and 8 to 12 share one desk lab that is trained
from scratch in a temporary directory (see ``desk_lab`` in conftest).
"""

import math
import time

import numpy as np
import pytest

from advlab import attacks as atk
from advlab import evalharness as H
from advlab.cli import EXIT_OK, main
from advlab.desk import ENSEMBLE_LABEL, SINGLE_DEFENSES, desk_report
from advlab.imagecore import SeedStream, per_image_norms
from advlab.pixeltransforms import JpegConfig, jpeg_roundtrip
from advlab.quilting import (
    VERTICAL,
    PatchDatabase,
    QuiltConfig,
    extract_patches,
    grid_positions,
    knn_batch,
    min_error_boundary_cut,
    quilt,
    quilt_detailed,
    seam_cost,
)
from advlab.smallnet import ARCH_A, SmallNet, init_params
from advlab.tvm import TvmConfig, sample_mask, tv_norm, tvm_reconstruct_batch
from conftest import SESSION_START, VERDICTS
from oracles import brute_force_knn, central_difference, exhaustive_seams, projected_subgradient_tv, relative_error, smooth_coordinates

TARGET = 0.06
SUITE_BUDGET_S = 30 * 60


def verdict(number: int, ok: bool, detail: str) -> None:
    VERDICTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(VERDICTS[number])
    assert ok, VERDICTS[number]


@pytest.fixture(scope="module")
def lab(desk_lab):
    return desk_lab[0]


@pytest.fixture(scope="module")
def grid(lab):
    t = time.perf_counter()
    report = desk_report(lab, seed=0, target=TARGET)
    return report, time.perf_counter() - t


def acc(report, pipeline, attack, defense, target=TARGET):
    (row,) = report.select(pipeline=pipeline, attack=attack, defense=defense, target_dissim=target)
    return row


# -- 1 ------------------------------------------------------------------------


def test_criterion_01_gradients_match_finite_differences():
    t = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        model = SmallNet(ARCH_A, init_params(ARCH_A, SeedStream(seed, 5)))
        x = rng.random(ARCH_A.input_shape)
        y, k = (int(v) for v in rng.integers(10, size=2))
        coords = smooth_coordinates(model.forward, x, rng, 20)
        _, g = model.loss_and_input_gradient(x, y)
        fd = central_difference(lambda v: model.loss_and_input_gradient(v, y)[0], x, coords)
        worst = max(worst, relative_error(g.ravel()[coords], fd).max())
        fd = central_difference(lambda v: model.forward(v)[k], x, coords)
        worst = max(worst, relative_error(model.logit_gradient(x, k).ravel()[coords], fd).max())
    elapsed = time.perf_counter() - t
    verdict(1, worst < 1e-4 and elapsed < 10, f"max relative error {worst:.2e} over 10 pairs x 20 coordinates, {elapsed:.1f}s")


# -- 2, 3 -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def potency(lab):
    """Every attack calibrated to 0.08 on the clean desk model and run on the 200 evaluation images."""
    model, data = lab.models["clean"], lab.data
    y_cal, y = model.predict(data.calib_images), model.predict(data.eval_images)
    out = {}
    t = time.perf_counter()
    for method in atk.METHODS:
        tuned, _ = atk.calibrate_to_dissimilarity(atk.AttackConfig.default(method), model, data.calib_images, y_cal, 0.08)
        out[method] = (tuned, atk.run_attack(model, data.eval_images, y, tuned))
    return out, time.perf_counter() - t


def test_criterion_02_attack_potency(lab, potency):
    results, elapsed = potency
    assert len(lab.data.eval_images) == 200
    rates = {m: r.success_rate for m, (_, r) in results.items()}
    floors = {atk.FGSM: 0.75, atk.IFGSM: 0.95, atk.DEEPFOOL: 0.95, atk.CWL2: 0.95}
    ok = all(rates[m] >= floors[m] for m in floors) and elapsed < 300
    detail = ", ".join(f"{m} {rates[m]:.3f} (dissim {results[m][1].dissimilarity:.4f})" for m in atk.METHODS)
    verdict(2, ok, f"{detail}; {elapsed:.0f}s")


def _min_fgsm_for_success(model, x, y, floor, step=0.0025):
    """FGSM at the smallest eps on a grid of ``step`` whose success rate reaches ``floor``.

    Success is not monotone in eps (large steps saturate pixels and can land
    back in the true class), so the grid is scanned upwards instead of bisected.
    """
    for k in range(1, int(0.5 / step) + 1):
        res = atk.run_attack(model, x, y, atk.AttackConfig(atk.FGSM, eps=k * step, iterations=1))
        if res.success_rate >= floor:
            return res
    return res


def test_criterion_03_attack_geometry(lab, potency):
    results, _ = potency
    model, x = lab.models["clean"], lab.data.eval_images
    bounds_ok = True
    for method in (atk.FGSM, atk.IFGSM):
        tuned, res = results[method]
        bound = tuned.eps * (tuned.iterations if method == atk.IFGSM else 1)
        bounds_ok &= bool(np.all(res.linf <= bound + 1e-6))
    # DeepFool at the 0.08 calibration already succeeds on >= 95%; a smaller
    # knob would only shrink its L2, so this comparison is conservative
    deepfool = results[atk.DEEPFOOL][1]
    fgsm = _min_fgsm_for_success(model, x, model.predict(x), 0.95)
    df_l2, fg_l2 = float(np.mean(deepfool.l2)), float(np.mean(fgsm.l2))
    ok = bounds_ok and df_l2 < fg_l2 and min(fgsm.success_rate, deepfool.success_rate) >= 0.95
    verdict(
        3,
        ok,
        f"L-inf bounds hold on all images: {bounds_ok}; mean L2 DeepFool {df_l2:.3f} "
        f"(success {deepfool.success_rate:.3f}) vs FGSM {fg_l2:.3f} (success {fgsm.success_rate:.3f})",
    )


# -- 4, 5 -----------------------------------------------------------------------


def test_criterion_04_tvm_matches_subgradient_oracle():
    t = time.perf_counter()
    rng = np.random.default_rng(404)
    x = rng.random((10, 8, 8, 1))
    masks = np.stack([sample_mask((8, 8, 1), 0.5, SeedStream(404, i)) for i in range(10)])
    cfg = TvmConfig(lam=0.03, keep_prob=0.5, tol=1e-10, max_iter=5000)
    ours = np.array([s.objective for s in tvm_reconstruct_batch(x, masks, cfg)])
    ref = projected_subgradient_tv(x, masks, 0.03, p=2, iterations=200_000)
    gap = np.abs(ours - ref) / ref
    elapsed = time.perf_counter() - t
    verdict(4, gap.max() <= 1e-3 and elapsed < 120, f"max relative gap {gap.max():.2e} (solver below oracle on {int(np.sum(ours <= ref))}/10), {elapsed:.1f}s")


def test_criterion_05_tv_fixtures():
    z = np.array([[0.0, 1.0], [0.0, 1.0]])[..., None]
    const = np.full((6, 5, 3), 0.3)
    ok = tv_norm(const, 1) == 0 and tv_norm(const, 2) == 0 and tv_norm(z, 1) == 2.0 and tv_norm(z, 2) == math.sqrt(2)
    verdict(5, ok, f"constant -> {tv_norm(const, 2)}, TV1 {tv_norm(z, 1)}, TV2 {tv_norm(z, 2)!r}")


# -- 6, 7 -----------------------------------------------------------------------


def test_criterion_06_quilting_correctness(lab):
    # self-database reconstruction on every evaluation image
    exact = 0
    for img in lab.data.eval_images[:50]:
        ys, xs = grid_positions(32, 5, 3), grid_positions(32, 5, 3)
        oy, ox = np.array([(r, c) for r in ys for c in xs]).T
        own = PatchDatabase(5, 3, extract_patches(img[None], np.zeros(len(oy), int), oy, ox, 5))
        exact += quilt(img, own, QuiltConfig()).tobytes() == img.tobytes()
    # KNN against a linear scan of the desk database
    rng = np.random.default_rng(6)
    db = lab.db
    queries = np.concatenate([rng.random((500, db.dim)), db.patches[rng.integers(0, db.count, 500)] + rng.normal(0, 0.01, (500, db.dim))])
    scan = brute_force_knn(db.patches, queries, 10)
    knn_ok = np.array_equal(knn_batch(db, queries, 10), scan) and np.array_equal(knn_batch(db, queries, 1), scan[:, :1])
    # DP seam against exhaustive enumeration on 4x3 overlaps
    seams_ok = True
    for _ in range(200):
        existing, candidate = rng.random((4, 3, 3)), rng.random((4, 3, 3))
        err = ((existing - candidate) ** 2).sum(axis=2)
        seam = min_error_boundary_cut(existing, candidate, VERTICAL)
        best, paths = exhaustive_seams(err)
        seams_ok &= abs(seam_cost(existing, candidate, seam, VERTICAL) - best) <= 1e-12 and tuple(seam) in paths
    # provenance of every output pixel
    audited = 0
    images = lab.data.eval_images[:20]
    for i, img in enumerate(images):
        res = quilt_detailed(img, db, QuiltConfig(k=3, stream=SeedStream(6, i)))
        src = db.patches.reshape(-1, 5, 5, 3)[res.source_index, res.source_offset[..., 0], res.source_offset[..., 1]]
        audited += np.array_equal(src, res.image)
    ok = exact == 50 and knn_ok and seams_ok and audited == len(images)
    verdict(6, ok, f"self-db exact {exact}/50, KNN == scan on 1000 queries: {knn_ok}, seams == enumeration: {seams_ok}, provenance {audited}/{len(images)}")


def test_criterion_07_jpeg_codec(lab):
    levels = np.arange(256) / 255.0
    worst = 0.0
    for v in levels:
        img = np.full((16, 16, 3), v, np.float32)
        worst = max(worst, float(np.abs(jpeg_roundtrip(img, JpegConfig(75)) - img).max()))
    x = lab.data.eval_images
    errors = [float(np.mean([np.abs(jpeg_roundtrip(img, JpegConfig(q)) - img).mean() for img in x])) for q in (10, 25, 50, 75, 95)]
    ok = worst <= 1 / 255 + 1e-7 and all(b <= a for a, b in zip(errors, errors[1:]))
    verdict(7, ok, f"constant-image error {worst * 255:.3f}/255 at quality 75; mean error by quality {[round(e, 5) for e in errors]}")


# -- 8 to 11 ------------------------------------------------------------------------


def test_criterion_08_graybox_recovery(grid):
    report, elapsed = grid
    base = acc(report, H.GRAYBOX, atk.IFGSM, "none").top1_acc
    gains = {d: acc(report, H.GRAYBOX, atk.IFGSM, d).top1_acc - base for d in SINGLE_DEFENSES}
    need = {"crop": 0.25, "tvm": 0.25, "quilt": 0.25, "bitdepth": 0.10, "jpeg": 0.10}
    ok = all(gains[d] >= need[d] - 1e-9 for d in need)
    detail = ", ".join(f"{d} {100 * gains[d]:+.1f}" for d in SINGLE_DEFENSES)
    verdict(8, ok, f"undefended {base:.3f}; recovery in points: {detail} (grid {elapsed:.0f}s)")


def test_criterion_09_training_on_transforms(grid):
    report, _ = grid
    ok, parts = True, []
    for d in ("tvm", "quilt"):
        clean = acc(report, H.BLACKBOX, atk.IFGSM, d, 0.0).top1_acc
        for m in atk.METHODS:
            bb, gb = acc(report, H.BLACKBOX, m, d).top1_acc, acc(report, H.GRAYBOX, m, d).top1_acc
            ok &= bb >= gb
            if d == "quilt":
                ok &= clean - bb <= 0.15 + 1e-9
            parts.append(f"{d}/{m} {bb:.3f}>={gb:.3f}")
        parts.append(f"{d} trained clean {clean:.3f}")
    verdict(9, ok, "; ".join(parts))


def test_criterion_10_randomized_beat_deterministic(grid):
    report, _ = grid
    mean = {d: float(np.mean([acc(report, H.GRAYBOX_TRAINED, m, d).top1_acc for m in atk.METHODS])) for d in SINGLE_DEFENSES}
    ok = min(mean[d] for d in H.RANDOMIZED) > max(mean[d] for d in H.DETERMINISTIC)
    verdict(10, ok, ", ".join(f"{d} {mean[d]:.3f}" for d in SINGLE_DEFENSES))


def test_criterion_11_ensemble_and_transfer(lab, grid):
    report, _ = grid
    ens = acc(report, H.BLACKBOX, atk.IFGSM, ENSEMBLE_LABEL).top1_acc
    singles = {d: acc(report, H.BLACKBOX, atk.IFGSM, d).top1_acc for d in SINGLE_DEFENSES}
    best = max(singles, key=singles.get)
    (transfer,) = [r for r in report.rows if r.pipeline.startswith("transfer:")]
    again = H.run_transfer(lab.models["clean"], lab.models["b"], atk.AttackConfig.default(atk.IFGSM), (), lab.data, TARGET, 0, lab.db)
    same_model = acc(report, H.GRAYBOX, atk.IFGSM, "none").top1_acc
    delta = transfer.top1_acc - same_model
    ok = ens >= singles[best] - 0.01 and again == transfer
    verdict(
        11,
        ok,
        f"ensemble {ens:.3f} vs best single {best} {singles[best]:.3f}; {transfer.pipeline} I-FGSM accuracy "
        f"{transfer.top1_acc:.3f} vs same-model {same_model:.3f} (change {100 * delta:+.1f} points, reproduced: {again == transfer})",
    )


# -- 12 -----------------------------------------------------------------------------


def test_criterion_12_determinism_and_runtime(desk_lab, tmp_path):
    lab, cache = desk_lab
    cfg = tmp_path / "eval.cfg"
    lines = [
        f"clean_model = {cache / 'clean.ckpt'}",
        f"db = {cache / 'patches.db'}",
        "num_classes = 10",
        "per_class = 20",
        "data_seed = 2",
        "calib_size = 64",
        "eval_size = 100",
        "attacks = fgsm,ifgsm",
        "defenses = none,bitdepth,jpeg,tvm,quilt,crop",
        "targets = 0,0.06",
        "seed = 0",
    ]
    cfg.write_text("\n".join(lines) + "\n")
    outs = [tmp_path / f"run{i}.csv" for i in range(2)]
    codes = [main(["eval", "--pipeline", "graybox", "--config", str(cfg), "--out", str(o)]) for o in outs]
    identical = outs[0].read_bytes() == outs[1].read_bytes()
    rows = len(outs[0].read_text().splitlines()) - 1
    elapsed = time.perf_counter() - SESSION_START
    ok = codes == [EXIT_OK, EXIT_OK] and identical and rows == 2 * 6 * 2 and elapsed < SUITE_BUDGET_S
    verdict(12, ok, f"two eval runs ({rows} rows) byte-identical: {identical}; suite time so far {elapsed / 60:.1f} min")
