import json

import numpy as np
import pytest

from hfunlearn.errors import ConfigError, PreconditionError
from hfunlearn.harness import (
    COLUMNS,
    ExperimentConfig,
    accuracy_suite,
    metric_distance,
    metric_loss_change_correlation,
    run_ablation,
    run_application,
    run_verification,
    save_result,
    select_forget,
    summarize,
)
from hfunlearn.data import make_synthetic
from hfunlearn.model import ModelSpec, Params

SMALL = dict(per_class=30, dim=4, test_per_class=20, epochs=2, batch_size=10, seeds=[0], rates=[0.1])


def small(**kw):
    return ExperimentConfig.from_dict({**SMALL, **kw})


def test_retrain_only_gives_zero_distance():
    res = run_verification(small(methods=["retrain"], seeds=[0, 1], rates=[0.05, 0.2]))
    assert len(res.rows) == 4
    assert all(r["distance"] == 0.0 and r["status"] == "ok" for r in res.rows)
    assert all(r["spearman"] == pytest.approx(1.0) for r in res.rows)


def test_one_row_per_method_and_columns():
    cfg = small(methods=["hf", "retrain", "ns", "ij", "finetune", "neggrad"])
    res = run_verification(cfg)
    assert sorted(r["method"] for r in res.rows) == sorted(cfg.methods)
    header = res.to_csv().splitlines()[0].split(",")
    assert tuple(header) == COLUMNS
    hf = next(r for r in res.rows if r["method"] == "hf")
    assert hf["sigma"] is not None and hf["store_bytes"] > 0
    assert hf["distance"] < next(r for r in res.rows if r["method"] == "finetune")["distance"]


def test_csv_is_deterministic(tmp_path):
    cfg = small(methods=["hf", "ns"], seeds=[0, 2])
    a = save_result(run_verification(cfg), tmp_path / "a", "verify").read_bytes()
    b = save_result(run_verification(cfg), tmp_path / "b", "verify").read_bytes()
    assert a == b
    manifest = json.loads((tmp_path / "a" / "verify_manifest.json").read_text())
    assert manifest["config_digest"] == cfg.digest and "numpy" in manifest["versions"]
    assert (tmp_path / "a" / "verify_summary.csv").exists()


def test_timings_are_optional():
    res = run_verification(small(methods=["hf", "retrain"], timings=True, timing_repeats=2))
    for r in res.rows:
        assert r["t_unlearn"] > 0 and r["t_retrain"] > 0
    hf = next(r for r in res.rows if r["method"] == "hf")
    assert hf["speedup"] > 1 and hf["t_precompute"] > 0


def test_per_trial_correlation():
    res = run_verification(small(methods=["hf"], seeds=[0, 1, 2], correlation="per-trial"))
    values = {r["pearson"] for r in res.rows}
    assert len(values) == 1 and None not in values


def test_bound_mode_sensitivity():
    oracle = run_verification(small(methods=["hf"]))
    bound = run_verification(small(methods=["hf"], sensitivity="bound"))
    assert bound.rows[0]["sigma"] > oracle.rows[0]["sigma"]


def test_bound_mode_precondition_is_a_row_status():
    res = run_verification(small(methods=["hf"], sensitivity="bound", eta0=0.5, decay=0.999))
    assert res.rows[0]["status"].startswith("error:")


def test_select_forget():
    U = select_forget(3, 100, 0.05)
    assert len(U) == 5 and np.all(np.diff(U) > 0)
    assert np.array_equal(U, select_forget(3, 100, 0.05))
    assert set(select_forget(3, 100, 0.05)) <= set(select_forget(3, 100, 0.2))
    with pytest.raises(PreconditionError):
        select_forget(0, 3, 0.99)


def test_metrics():
    spec = ModelSpec("logistic", 2, 2)
    a, b = Params(np.zeros(6), spec), Params(np.array([3.0, 4, 0, 0, 0, 0]), spec)
    assert metric_distance(a, b) == 5.0
    ds = make_synthetic(2, 5, 2, 2.0, 0)
    p, s = metric_loss_change_correlation(a, b, b.theta, ds)
    assert p == pytest.approx(1.0) and s == pytest.approx(1.0)
    with pytest.raises(PreconditionError):
        metric_loss_change_correlation(a, b, b.theta, ds.subset([0]))
    acc = accuracy_suite(a, None, ds, ds.subset([0, 1]))
    assert acc["acc_remaining"] + acc["err_remaining"] == 1.0 and "acc_test" not in acc


def test_summary_groups_by_digest():
    rows = [
        dict(config_digest="a", method="hf", deletion_rate=0.1, axis=None, axis_value=None, status="ok",
             distance=d, pearson=None, spearman=0.5)
        for d in (1.0, 3.0)
    ]
    rows.append(dict(rows[0], config_digest="b"))
    out = summarize(rows)
    assert len(out) == 2
    first = next(r for r in out if r["config_digest"] == "a")
    assert (first["distance_min"], first["distance_max"], first["distance_mean"], first["count"]) == (1.0, 3.0, 2.0, 2)
    assert first["pearson_mean"] is None


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        small(methods=["magic"])
    with pytest.raises(ConfigError):
        small(rates=[1.5])
    with pytest.raises(ConfigError):
        small(sensitivity="guess")
    (tmp_path / "c.toml").write_text("x = 1")
    with pytest.raises(ConfigError, match="extension"):
        ExperimentConfig.load(tmp_path / "c.toml")
    (tmp_path / "c.yaml").write_text("epochs: 3\nmethods: [hf, ns]\n")
    cfg = ExperimentConfig.load(tmp_path / "c.yaml")
    assert cfg.epochs == 3 and cfg.methods == ["hf", "ns"]
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 3, "methods": ["hf", "ns"]}))
    assert ExperimentConfig.load(tmp_path / "c.json").digest == cfg.digest
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")


def test_application_rows(tmp_path):
    res = run_application(small(methods=["hf", "ns"], app_fraction=0.1, output=str(tmp_path)))
    methods = sorted(r["method"] for r in res.rows)
    assert methods == ["hf", "ns", "retrain"]
    hf = next(r for r in res.rows if r["method"] == "hf")
    assert hf["speedup"] > 1 and hf["store_bytes"] == (tmp_path / "store_seed0.hfun").stat().st_size
    assert "no composition" in res.manifest["runs"][0]["composition"]


def test_ablation_marks_divergence():
    cfg = small(kind="ridge", l2=0.0)
    res = run_ablation(cfg, "step_size", [0.01, 50.0])
    by_value = {r["axis_value"]: r for r in res.rows}
    assert by_value[0.01]["status"] == "ok"
    assert by_value[50.0]["status"].startswith("diverged")
    assert by_value[0.01]["config_digest"] != by_value[50.0]["config_digest"]
    with pytest.raises(ConfigError):
        run_ablation(cfg, "momentum", [1])
