import math

import numpy as np
import pytest
import torch

from src.classification.classifier import (
    classify,
    evaluate_accuracy,
    marginal_from_logps,
    marginal_loglik,
    predict_from_logps,
)
from src.diffusion.score_models import AnalyticGaussianScore, AnalyticGmmScore, ScoreModel
from src.diffusion.sde import SdeKind, SdeSpec
from src.experiments.datasets import Dataset, GmmOracle, gen_gmm_dataset
from src.likelihood.prob_flow import SolverCfg, TraceCfg, TraceMode

VP = SdeSpec(kind=SdeKind.VP)
EXACT = TraceCfg(mode=TraceMode.EXACT)


def two_class(offset=2.0, s2=1.0):
    return AnalyticGmmScore([[1.0], [1.0]], [[[offset, 0.0]], [[-offset, 0.0]]], s2, VP)


class FailsForClass(ScoreModel):
    def __init__(self, bad_label):
        super().__init__(VP, num_classes=2)
        self.bad_label = bad_label

    def forward(self, x, t, y=None):
        out = -torch.as_tensor(x, dtype=torch.float64)
        return out * float("nan") if y == self.bad_label else out


def test_predict_ties_go_to_lowest_id():
    assert predict_from_logps([-1.0, -1.0, -3.0]) == (0, 0.0)
    assert predict_from_logps([-5.0, -1.0, -1.0])[0] == 1


def test_predict_single_class():
    assert predict_from_logps([-2.5]) == (0, 0.0)


def test_predict_margin_and_shift_invariance():
    pred, margin = predict_from_logps([-3.0, -1.0, -1.5])
    assert pred == 1 and margin == pytest.approx(0.5)
    shifted = predict_from_logps(np.array([-3.0, -1.0, -1.5]) + 100.0)
    assert shifted[0] == pred and shifted[1] == pytest.approx(margin)


def test_predict_with_prior():
    pred, _ = predict_from_logps([-1.0, -1.2], log_prior=np.log([0.1, 0.9]))
    assert pred == 1


def test_predict_rejects_empty():
    with pytest.raises(ValueError):
        predict_from_logps([])


def test_marginal_from_logps():
    assert marginal_from_logps([0.0, 0.0]) == pytest.approx(0.0)
    assert marginal_from_logps([-1.0]) == pytest.approx(-1.0)
    assert marginal_from_logps([0.0, -np.inf], prior=[0.5, 0.5]) == pytest.approx(-math.log(2.0))
    assert marginal_from_logps([1.0, 5.0], prior=[1.0, 0.0]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        marginal_from_logps([0.0, 0.0], prior=[0.6, 0.6])
    with pytest.raises(ValueError):
        marginal_from_logps([0.0, 0.0], prior=[1.0])


def test_separated_classes():
    # log N(x; (2,0), I) − log N(x; (−2,0), I) at x = (2, 0) is 8 nats
    res = classify(two_class(), VP, [2.0, 0.0], SolverCfg(), EXACT)
    assert res.predicted == 0
    assert res.margin == pytest.approx(8.0, abs=2e-2)
    assert not res.failed
    assert all(n > 0 for n in res.nfe)


def test_equidistant_point_has_no_margin():
    res = classify(two_class(), VP, [0.0, 1.0], SolverCfg(), EXACT)
    assert res.margin < 1e-3


def test_single_class_model():
    model = AnalyticGaussianScore(torch.zeros(2, dtype=torch.float64), 1.0, VP)
    res = classify(model, VP, [0.3, 0.3], SolverCfg(), EXACT)
    assert res.predicted == 0 and res.margin == 0.0
    assert res.logps.shape == (1,)


def test_class_loop_order_does_not_matter():
    # swapping class order permutes the scores and keeps the paired probes
    tcfg = TraceCfg(n_probes=4, seed=11)
    a = classify(two_class(), VP, [0.5, -0.4], SolverCfg(), tcfg, sample_id=3)
    swapped = AnalyticGmmScore([[1.0], [1.0]], [[[-2.0, 0.0]], [[2.0, 0.0]]], 1.0, VP)
    b = classify(swapped, VP, [0.5, -0.4], SolverCfg(), tcfg, sample_id=3)
    np.testing.assert_allclose(a.logps, b.logps[::-1], rtol=0, atol=1e-12)


def test_marginal_matches_closed_form():
    model = two_class(offset=1.0, s2=0.8)
    oracle = GmmOracle([[1.0], [1.0]], [[[1.0, 0.0]], [[-1.0, 0.0]]], 0.8)
    x = np.array([0.3, -0.6])
    value = marginal_loglik(model, VP, x, SolverCfg(), EXACT)
    assert value == pytest.approx(float(oracle.marginal_log_density(x)[0]), abs=2e-2)
    with pytest.raises(ValueError):
        marginal_loglik(model, VP, x, SolverCfg(), EXACT, prior=[0.2, 0.2])


def test_accuracy_on_separated_gaussians():
    dataset, oracle = gen_gmm_dataset(2, 2, [[5.0, 0.0], [-5.0, 0.0]], 1.0, 25, seed=0)
    model = oracle.score_model(VP)
    accuracy, records, summary = evaluate_accuracy(model, dataset, SolverCfg(), EXACT)
    assert accuracy == 1.0
    assert summary["n_samples"] == 50 and summary["n_failed"] == 0
    assert summary["mean_bits_per_dim"] is None
    assert all(r["correct"] for r in records)

    relabeled = Dataset(samples=dataset.samples, labels=1 - dataset.labels, num_classes=2, domain=dataset.domain)
    assert evaluate_accuracy(model, relabeled, SolverCfg(), EXACT, limit=10)[0] == 0.0


def test_accuracy_of_empty_dataset():
    empty = Dataset(samples=np.zeros((0, 2)), labels=np.zeros(0), num_classes=2)
    with pytest.raises(ValueError):
        evaluate_accuracy(two_class(), empty, SolverCfg(), EXACT)


@pytest.mark.parametrize("limit", [0, -3])
def test_accuracy_rejects_nonpositive_limit(limit):
    dataset, oracle = gen_gmm_dataset(2, 2, [[2.0, 0.0], [-2.0, 0.0]], 1.0, 2, seed=0)
    with pytest.raises(ValueError):
        evaluate_accuracy(oracle.score_model(VP), dataset, SolverCfg(), EXACT, limit=limit)
    accuracy, records, _ = evaluate_accuracy(oracle.score_model(VP), dataset, SolverCfg(), EXACT, limit=1)
    assert len(records) == 1 and accuracy in (0.0, 1.0)


def test_failed_class_withholds_prediction():
    dataset = Dataset(samples=np.array([[0.1, 0.2], [0.3, 0.4]]), labels=np.array([0, 1]), num_classes=2, domain=(-3, 3))
    res = classify(FailsForClass(1), VP, [0.1, 0.2], SolverCfg(), EXACT, sample_id=4)
    assert res.predicted is None and res.failed
    assert list(res.failures) == [1]
    assert np.isnan(res.logps[1]) and np.isfinite(res.logps[0])

    accuracy, records, summary = evaluate_accuracy(FailsForClass(1), dataset, SolverCfg(), EXACT)
    assert accuracy == 0.0
    assert summary["n_failed"] == 2
    assert records[0]["logps"][1] is None and records[0]["failed"]


def test_bits_per_dim_reported_for_quantized_data():
    dataset = Dataset(
        samples=np.array([[64], [192]]), labels=np.array([0, 1]), num_classes=2,
        quantized=True, levels=256, domain=(0, 256),
    )
    model = AnalyticGmmScore([[1.0], [1.0]], [[[0.25]], [[0.75]]], 0.01, VP)
    accuracy, records, summary = evaluate_accuracy(model, dataset, SolverCfg(), EXACT)
    assert accuracy == 1.0
    assert all("bits_per_dim" in r for r in records)
    assert summary["mean_bits_per_dim"] == pytest.approx(np.mean([r["bits_per_dim"] for r in records]))
    assert summary["mean_bits_per_dim"] < 8.0


@pytest.mark.slow
def test_agreement_with_bayes_rule():
    modes = [[1.0, 0.0], [-0.5, 0.8], [-0.5, -0.8]]
    dataset, oracle = gen_gmm_dataset(3, 2, modes, 0.7, 334, seed=5)
    model = oracle.score_model(VP)
    x = dataset.continuous()
    tcfg = TraceCfg(n_probes=30)
    checked = agreed = 0
    for i in range(1000):
        logs = oracle.class_log_densities(x[i])[0]
        top = np.sort(logs)[-2:]
        if top[1] - top[0] <= 0.05:
            continue
        res = classify(model, VP, x[i], SolverCfg(), tcfg, sample_id=i)
        checked += 1
        agreed += int(res.predicted == int(np.argmax(logs)))
    assert agreed / checked >= 0.99
