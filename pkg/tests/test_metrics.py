import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from gca import data
from gca.metrics import (EvalReport, auprc, edge_scores, evaluate, export_structures, forecast_metrics,
                         load_structures_export)
from gca.model import ModelConfig, ModelParams


def test_forecast_metrics_examples():
    assert forecast_metrics(np.ones((2, 3, 2)), np.ones((2, 3, 2))) == (0.0, 0.0)
    mse, mae = forecast_metrics(np.array([[[1.0], [2.0]]]), np.zeros((1, 2, 1)))
    assert (mse, mae) == (2.5, 1.5)


def test_forecast_metrics_variable_subset():
    p = np.zeros((1, 1, 3))
    t = np.array([[[1.0, 2.0, 3.0]]])
    assert forecast_metrics(p, t, [1]) == (4.0, 2.0)
    with pytest.raises(ValueError):
        forecast_metrics(p, t, [])
    with pytest.raises(ValueError):
        forecast_metrics(p, t, [3])
    with pytest.raises(ValueError):
        forecast_metrics(p, t[..., :2])


finite = st.floats(-100, 100, allow_nan=False)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (3, 4, 2), elements=finite), arrays(np.float64, (3, 4, 2), elements=finite))
def test_mae_bounded_by_root_mse(p, t):
    mse, mae = forecast_metrics(p, t)
    assert mae <= np.sqrt(mse) + 1e-9


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4, 2), elements=finite), arrays(np.float64, (3, 4, 2), elements=finite),
       st.floats(0.1, 10), st.floats(0.1, 10), st.floats(-5, 5))
def test_metrics_scale_with_std(p, t, s0, s1, mu):
    sd = np.array([s0, s1])
    for v in (0, 1):
        mse_z, mae_z = forecast_metrics(p, t, [v])
        mse_r, mae_r = forecast_metrics(p * sd + mu, t * sd + mu, [v])
        assert mse_z == pytest.approx(mse_r / sd[v] ** 2, rel=1e-9, abs=1e-12)
        assert mae_z == pytest.approx(mae_r / sd[v], rel=1e-9, abs=1e-12)


def test_auprc_hand_examples():
    assert auprc([0.9, 0.1, 0.8, 0.05], [1, 1, 0, 0]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-9)
    assert auprc([0.9, 0.1, 0.8, 0.05], [1, 1, 0, 0]) == pytest.approx(0.8333, abs=1e-4)
    assert auprc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == pytest.approx((1 / 3 + 2 / 4) / 2, abs=1e-9)
    assert auprc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == pytest.approx(0.4167, abs=1e-4)
    assert auprc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_auprc_ties_follow_index_order():
    assert auprc([0.5, 0.5], [0, 1]) == 0.5
    assert auprc([0.5, 0.5], [1, 0]) == 1.0


def test_auprc_needs_a_positive():
    with pytest.raises(ValueError, match="positive"):
        auprc([0.3, 0.2], [0, 0])


@settings(max_examples=60, deadline=None)
@given(st.permutations(range(6)), st.lists(st.integers(0, 1), min_size=6, max_size=6))
def test_auprc_invariant_to_monotone_transforms(ranks, truth):
    if sum(truth) == 0:
        truth[0] = 1
    s = np.array(ranks) * 0.7 - 2.0
    a = auprc(s, truth)
    assert 0.0 <= a <= 1.0
    assert auprc(np.exp(s), truth) == pytest.approx(a, abs=1e-12)
    assert auprc(3 * s - 1, truth) == pytest.approx(a, abs=1e-12)


# -- evaluation on the oracle toy --------------------------------------------------------


def toy_dataset():
    series = oracles.toy_series(300)
    z, stats = data.zscore_normalize(series)
    ds = data.window_dataset(z, 20, 5, 1, "2", stats)
    params = oracles.oracle_params(oracles.toy_weights(), stats, oracles.toy_intercept())
    return params, ds


def test_oracle_on_noiseless_data_is_nearly_exact():
    params, ds = toy_dataset()
    r = evaluate(params, ds, oracles.toy_structures(), target_var=0, domain_pair="1->2", seed=4)
    assert r.mse < 1e-3 and r.mse_target < 1e-3
    assert r.auprc == 1.0 and r.auprc_summary == 1.0
    assert r.n_windows == len(ds) and r.domain_pair == "1->2" and r.seed == 4


def test_report_without_ground_truth_omits_auprc():
    params, ds = toy_dataset()
    r = evaluate(params, ds)
    assert r.auprc is None
    assert not any(line.startswith("auprc") for line in r.lines())
    assert "auprc" not in r.to_dict()


def test_evaluate_is_deterministic_and_thread_independent(monkeypatch):
    rng = np.random.default_rng(0)
    p = ModelParams.init(ModelConfig(M=2, k=2), ["2"], rng)
    ds = data.window_dataset(rng.normal(size=(700, 2)), 20, 5, 1, "2")
    gt = oracles.toy_structures()
    a = evaluate(p, ds, gt)
    monkeypatch.setenv("GCA_THREADS", "4")
    b = evaluate(p, ds, gt)
    assert a == b


def test_evaluate_rejects_variable_mismatch():
    params, _ = toy_dataset()
    ds = data.window_dataset(np.random.default_rng(0).normal(size=(50, 3)), 20, 5, 1, "2")
    with pytest.raises(ValueError, match="variables"):
        evaluate(params, ds)


def test_auprc_consistent_with_exported_scores(tmp_path):
    rng = np.random.default_rng(1)
    p = ModelParams.init(ModelConfig(M=2, k=2), ["2"], rng)
    ds = data.window_dataset(rng.normal(size=(80, 2)), 20, 5, 1, "2")
    gt = oracles.toy_structures()
    r = evaluate(p, ds, gt)
    exported = export_structures(p, ds, tmp_path)
    assert r.auprc == auprc(np.asarray(exported["probabilities"]), data.stack_adjacency(gt))


def test_report_fields_are_in_range():
    rng = np.random.default_rng(2)
    p = ModelParams.init(ModelConfig(M=2, k=2), ["2"], rng)
    ds = data.window_dataset(rng.normal(size=(80, 2)), 20, 5, 1, "2")
    r = evaluate(p, ds, oracles.toy_structures())
    assert r.mse >= 0 and r.mae >= 0 and 0 <= r.auprc <= 1 and 0 <= r.auprc_summary <= 1
    assert EvalReport(**json.loads(json.dumps(r.to_dict()))) == r


# -- export ---------------------------------------------------------------------------------------


def test_export_threshold_and_files(tmp_path):
    params, ds = toy_dataset()
    payload = export_structures(params, ds, tmp_path / "out", threshold=0.5)
    out = tmp_path / "out"
    assert sorted(f.name for f in out.iterdir()) == ["lag_1.csv", "lag_2.csv", "structures.json", "summary.csv"]
    np.testing.assert_array_equal(payload["adjacency"], data.stack_adjacency(oracles.toy_structures()))
    rows = list(csv.reader(open(out / "summary.csv")))
    assert len(rows) == 2 and all(len(r) == 2 for r in rows)
    back = load_structures_export(out)
    np.testing.assert_array_equal(back["probabilities"], np.asarray(payload["probabilities"]))


def test_export_threshold_boundary(tmp_path):
    rng = np.random.default_rng(0)
    p = ModelParams.init(ModelConfig(M=2, k=1), ["2"], rng)
    p.tensors["enc1.w2"].data[:] = 0.0
    p.tensors["enc1.b2"].data[:] = np.log(np.array([0.6, 0.4, 0.6, 0.4]) / np.array([0.4, 0.6, 0.4, 0.6]))
    ds = data.window_dataset(rng.normal(size=(30, 2)), 10, 2, 1, "2")
    payload = export_structures(p, ds, tmp_path)
    assert payload["adjacency"] == [[[1, 0], [1, 0]]]


def test_export_surfaces_path_on_failure(tmp_path):
    params, ds = toy_dataset()
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        export_structures(params, ds, blocker / "sub")


def test_edge_scores_average_over_windows():
    params, ds = toy_dataset()
    s = edge_scores(params, ds)
    assert s.shape == (2, 2, 2)
    np.testing.assert_allclose(s, data.stack_adjacency(oracles.toy_structures()), atol=1e-8)
