import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from advlab import evalharness as H
from advlab.attacks import FGSM, IFGSM, AttackConfig
from advlab.data import synthetic_dataset
from advlab.imagecore import InvalidInputError, SeedStream
from advlab.quilting import build_patch_database
from advlab.smallnet import ARCH_A, TrainConfig, train


@pytest.fixture(scope="module")
def lab():
    x, y = synthetic_dataset(10, 30, seed=51)
    model = train(x, y, TrainConfig(epochs=6, seed=2, crop_fraction=1.0, min_crop_fraction=0.6))
    model.dtype = np.float32
    xe, ye = synthetic_dataset(10, 6, seed=52)
    data = H.EvalData(xe[:16], ye[:16], xe[16:], ye[16:])
    db = build_patch_database(x, 5, 3000, seed=0)
    return model, data, db


class Fixed:
    """Stub model that classifies by the mean of the first pixel."""

    def probabilities(self, x):
        x = np.asarray(x)
        p = (x[..., 0, 0, 0] > 0.5).astype(float)
        return np.stack([1 - p, p], axis=-1)

    def predict(self, x):
        return np.argmax(self.probabilities(x), axis=-1)


def images(values):
    out = np.full((len(values), 2, 2, 1), 0.2, np.float32)
    out[:, 0, 0, 0] = values
    return out


def test_success_rate_examples():
    m = Fixed()
    x = images([0.1] * 10)
    assert H.attack_success_rate(m, x, x) == 0.0
    assert H.attack_success_rate(m, x, images([0.9] * 10)) == 1.0
    assert H.attack_success_rate(m, x, images([0.9] * 3 + [0.1] * 7)) == pytest.approx(0.3)
    with pytest.raises(InvalidInputError):
        H.attack_success_rate(m, x[:0], x[:0])
    with pytest.raises(InvalidInputError):
        H.attack_success_rate(m, x, x[:3])


def test_parse_chain():
    chain = H.parse_chain("tvm:0.05:0.4+quilt:3+crop:10")
    assert [s.kind for s in chain] == ["tvm", "quilt", "crop"]
    assert chain[0].tvm.lam == 0.05 and chain[0].tvm.keep_prob == 0.4
    assert chain[1].quilt_k == 3 and chain[1].randomized
    assert chain[2].crop_count == 10 and chain[2].crop_fraction == H.DESK_DEFAULTS.crop_fraction
    assert H.parse_chain("none") == () == H.parse_chain("")
    assert H.chain_name(chain) == "tvm+quilt+crop"
    d = H.parse_defense("bitdepth")
    assert d.bits == 3 and d.label() == "bitdepth:3" and not d.randomized
    assert H.parse_defense("quilt").randomized is False
    for bad in ("blur", "jpeg:0", "jpeg:abc", "bitdepth:9", "crop+tvm", "quilt:1:2", "tvm:0.1:0"):
        with pytest.raises(InvalidInputError):
            H.parse_chain(bad)


def test_pipeline_roles():
    cfg = AttackConfig.default(IFGSM)
    tvm = H.parse_chain("tvm")
    g = H.PipelineSpec.for_setting(H.GRAYBOX, tvm, cfg)
    b = H.PipelineSpec.for_setting(H.BLACKBOX, tvm, cfg)
    t = H.PipelineSpec.for_setting(H.GRAYBOX_TRAINED, tvm, cfg)
    assert (g.attacker, g.defender) == ("clean", "clean")
    assert (b.attacker, b.defender) == ("clean", "tvm")
    assert (t.attacker, t.defender) == ("tvm", "tvm")
    assert H.trained_model_name(H.parse_chain("crop")) == "clean"
    with pytest.raises(InvalidInputError):
        H.PipelineSpec(H.GRAYBOX, "clean", "tvm", tvm, cfg)
    with pytest.raises(InvalidInputError):
        H.PipelineSpec(H.GRAYBOX_TRAINED, "clean", "tvm", tvm, cfg)
    with pytest.raises(InvalidInputError):
        H.PipelineSpec("whitebox", "clean", "clean", tvm, cfg)


row_values = st.floats(0, 1, allow_nan=False)


@given(
    st.lists(
        st.tuples(st.sampled_from(["fgsm", "cw"]), st.text("abc+:.", min_size=1, max_size=8), row_values, row_values, row_values, row_values, row_values, st.integers(0, 99)),
        max_size=6,
    )
)
def test_csv_round_trip(rows):
    report = H.EvalReport([H.EvalRow(a, d, "graybox", t, t * 1.01, acc, s, c, seed) for a, d, t, acc, s, c, _, seed in rows])
    back = H.parse_report(report.to_csv())
    assert back.rows == report.rows
    assert back.to_csv() == report.to_csv()


def test_empty_report_is_header_only(tmp_path):
    H.emit_report(H.EvalReport(), tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == ",".join(H.REPORT_COLUMNS) + "\n"
    assert ",".join(H.REPORT_COLUMNS) == "attack,defense,pipeline,target_dissim,achieved_dissim,top1_acc,success_rate,clean_acc,seed"


def test_nan_rows_round_trip_and_flag():
    nan = float("nan")
    row = H.EvalRow("cw", "none", "graybox", 0.5, nan, nan, nan, 0.9, 0)
    back = H.parse_report(H.EvalReport([row]).to_csv()).rows[0]
    assert back.calibration_failed and math.isnan(back.top1_acc)
    with pytest.raises(InvalidInputError):
        H.parse_report("attack,defense\n")


def test_plotdata_series_sorted(tmp_path):
    rows = [H.EvalRow("fgsm", "tvm", "graybox", t, t, 1 - t, t, 1.0, 0) for t in (0.06, 0.0, 0.02)]
    rows.append(H.EvalRow("cw", "tvm", "graybox", 0.02, 0.02, 0.5, 0.5, 1.0, 0))
    H.emit_report(H.EvalReport(rows), tmp_path / "series", "plotdata")
    files = sorted(p.name for p in (tmp_path / "series").iterdir())
    assert files == ["graybox__cw__tvm.csv", "graybox__fgsm__tvm.csv"]
    lines = (tmp_path / "series" / "graybox__fgsm__tvm.csv").read_text().splitlines()
    assert lines[0] == "target_dissim,achieved_dissim,top1_acc,success_rate"
    assert [float(l.split(",")[0]) for l in lines[1:]] == [0.0, 0.02, 0.06]
    with pytest.raises(InvalidInputError):
        H.emit_report(H.EvalReport(rows), tmp_path / "x", "xml")


def test_ensemble_weights():
    ens = H.DefenseEnsemble.quilt_tvm(tvm_repetitions=10, quilt_weight=0.5)
    weights = [m.weight for m in ens.members]
    assert weights[0] == 0.5 and weights[1:] == pytest.approx([0.05] * 10, abs=1e-15)
    assert math.fsum(weights) == pytest.approx(1.0, abs=1e-12)
    assert sorted(m.repetition for m in ens.members[1:]) == list(range(10))
    chain = H.parse_chain("bitdepth")
    for bad in ((H.EnsembleMember(chain, 0.5),), (H.EnsembleMember(chain, 1.5), H.EnsembleMember(chain, -0.5)), ()):
        with pytest.raises(InvalidInputError):
            H.DefenseEnsemble(bad)


def test_single_ensemble_matches_defended_prediction(lab):
    model, data, db = lab
    chain = H.parse_chain("tvm+crop:4")
    x = data.eval_images[:8]
    p = H.ensemble_predict(model, H.DefenseEnsemble.single(chain), x, 3, db=db)
    np.testing.assert_array_equal(p, H.defended_probabilities(model, chain, x, 3, db=db))
    both = H.ensemble_predict(model, H.DefenseEnsemble.quilt_tvm(tvm_repetitions=2, crops=2), x, 3, db=db)
    np.testing.assert_allclose(both.sum(axis=1), 1.0, atol=1e-6)


def test_defended_accuracy_baselines(lab):
    model, data, db = lab
    x, y = data.eval_images, data.eval_labels
    plain = float(np.mean(model.predict(x) == y))
    assert H.defended_accuracy(model, (), x, y, 0) == plain
    identity = H.parse_chain("tvm:1e-8:1")
    assert abs(H.defended_accuracy(model, identity, x, y, 0) - plain) <= 0.005
    with pytest.raises(InvalidInputError):
        H.defended_accuracy(model, (), x, y[:3], 0)
    with pytest.raises(InvalidInputError):
        H.apply_chain(H.parse_chain("quilt"), x, 0)


def test_stochastic_defenses_use_per_image_streams(lab):
    model, data, db = lab
    x = data.eval_images[:6]
    chain = H.parse_chain("tvm")
    a = H.apply_chain(chain, x, 5)
    np.testing.assert_array_equal(a, H.apply_chain(chain, x, 5))
    # an image's defended output depends on its id, not on its batch position
    np.testing.assert_array_equal(H.apply_chain(chain, x[3:4], 5, image_ids=[3])[0], a[3])
    assert not np.array_equal(H.apply_chain(chain, x, 6), a)
    assert not np.array_equal(H.apply_chain(chain, x, 5, repetition=1), a)


def test_run_pipeline_rows(lab):
    model, data, db = lab
    models = {"clean": model}
    spec = H.PipelineSpec.for_setting(H.GRAYBOX, H.parse_chain("bitdepth"), AttackConfig.default(FGSM), targets=(0.0,))
    only = H.run_pipeline(spec, data, 0, models).rows
    assert len(only) == 1 and only[0].target_dissim == 0 and only[0].top1_acc == only[0].clean_acc
    spec = H.PipelineSpec.for_setting(H.GRAYBOX, H.parse_chain("bitdepth"), AttackConfig.default(FGSM), targets=(0.0, 0.04, 5.0))
    clean, row, fail = H.run_pipeline(spec, data, 0, models).rows
    expected = H.defended_accuracy(model, H.parse_chain("bitdepth"), data.eval_images, data.eval_labels, 0)
    assert clean.top1_acc == expected == row.clean_acc
    assert abs(row.achieved_dissim - 0.04) <= 0.1 * 0.04
    assert 0 <= row.top1_acc <= 1 and 0 <= row.success_rate <= 1
    assert row.success_rate > 0
    assert fail.calibration_failed and math.isnan(fail.top1_acc) and fail.clean_acc == clean.clean_acc
    with pytest.raises(InvalidInputError):
        H.run_pipeline(H.PipelineSpec.for_setting(H.BLACKBOX, H.parse_chain("tvm"), AttackConfig.default(FGSM)), data, 0, models)


def test_run_matrix_is_deterministic(lab):
    model, data, db = lab
    chains = [H.parse_chain(c) for c in ("none", "jpeg", "quilt", "tvm+crop:3")]
    run = lambda: H.run_matrix([H.GRAYBOX], [FGSM], chains, (0.0, 0.05), data, 4, {"clean": model}, db).to_csv()
    first = run()
    assert first == run()
    assert len(first.splitlines()) == 1 + 2 * len(chains)


def test_degenerate_transfer_equals_graybox(lab):
    model, data, db = lab
    model.tag = "a-small"
    cfg = AttackConfig.default(FGSM)
    row = H.run_transfer(model, model, cfg, (), data, 0.05, 0)
    gray = H.run_pipeline(H.PipelineSpec.for_setting(H.GRAYBOX, (), cfg, (0.05,)), data, 0, {"clean": model}).rows[0]
    assert row.pipeline == "transfer:a-small->a-small"
    assert (row.top1_acc, row.success_rate, row.achieved_dissim) == (gray.top1_acc, gray.success_rate, gray.achieved_dissim)
    with pytest.raises(InvalidInputError):
        H.run_transfer(model, model, cfg, (), data, 0.0, 0)


def test_precompute_transform_layout(lab):
    model, data, db = lab
    x = data.eval_images[:4]
    chain = H.parse_chain("bitdepth")
    out = H.precompute_transform(chain, x, 0, variants=2, crop_range=(0.5, 1.0))
    assert out.shape == (8,) + x.shape[1:]
    assert not np.array_equal(out[:4], out[4:])
    np.testing.assert_array_equal(out, H.precompute_transform(chain, x, 0, variants=2, crop_range=(0.5, 1.0)))
    np.testing.assert_array_equal(H.precompute_transform(chain, x, 0), H.apply_chain(chain, x, 0))
    full = H.random_rescaled_crops(x, (1.0, 1.0), SeedStream(1))
    np.testing.assert_array_equal(full, x)
