import math

import numpy as np
import pytest
import torch

from src.diffusion.score_models import AnalyticGaussianScore, AnalyticGmmScore, MlpConfig, MlpScoreNet
from src.diffusion.sde import SdeKind, SdeSpec
from src.experiments.datasets import Dataset, gen_gmm_dataset, gen_toyimage_dataset
from src.likelihood.prob_flow import SolverCfg, TraceCfg, TraceMode, fixed_grid_log_likelihood
from src.robustness import attacks
from src.robustness.attacks import (
    AttackAbortedError,
    AttackCfg,
    AttackNorm,
    ascent_direction,
    attack_loss,
    attack_summary,
    default_attack_cfg,
    loglik_grad,
    pgd_attack,
    project_ball,
    run_attacks,
)
from src.robustness.corruptions import (
    CorruptionGrid,
    CorruptionKind,
    CorruptionSpec,
    corrupt,
    corruption_eval,
)
from src.training.dsm import TrainCfg, train

VP = SdeSpec(kind=SdeKind.VP)
EXACT = TraceCfg(mode=TraceMode.EXACT)


def t64(values):
    return torch.tensor(values, dtype=torch.float64)


def two_class(offset=1.0, s2=1.0, dim=2):
    a = np.zeros(dim)
    a[0] = offset
    return AnalyticGmmScore([[1.0], [1.0]], [[a], [-a]], s2, VP)


# ---------------------------------------------------------------- attacks


def test_project_ball_linf():
    out = project_ball([0.5, -0.5, 0.05], [0.0, 0.0, 0.0], "linf", 0.1)
    np.testing.assert_allclose(out, [0.1, -0.1, 0.05])


def test_project_ball_l2():
    np.testing.assert_allclose(project_ball([3.0, 4.0], [0.0, 0.0], "l2", 1.0), [0.6, 0.8])
    np.testing.assert_allclose(project_ball([0.3, 0.4], [0.0, 0.0], "l2", 1.0), [0.3, 0.4])


def test_ascent_direction():
    np.testing.assert_array_equal(ascent_direction([0.3, -2.0, 0.0], "linf"), [1.0, -1.0, 0.0])
    np.testing.assert_allclose(ascent_direction([3.0, 4.0], "l2"), [0.6, 0.8])
    np.testing.assert_array_equal(ascent_direction([0.0, 0.0], "l2"), [0.0, 0.0])


def test_attack_loss_of_uniform_scores():
    assert float(attack_loss(t64([0.0, 0.0]), 0)) == pytest.approx(math.log(2.0))
    assert float(attack_loss(t64([10.0, -10.0]), 0)) < 1e-8


def test_default_attack_cfg():
    linf = default_attack_cfg("linf", data_range=2.0)
    assert linf.eps == pytest.approx(16.0 / 255.0)
    assert linf.step == pytest.approx(linf.eps / 4.0)
    assert linf.n_steps == 40 and not linf.random_start
    l2 = default_attack_cfg(AttackNorm.L2)
    assert l2.eps == 0.5
    assert default_attack_cfg("l2", step_size=0.2).step == 0.2
    with pytest.raises(ValueError):
        AttackCfg(eps=-0.1)


def test_loglik_grad_standard_normal():
    model = AnalyticGaussianScore(torch.zeros(2, dtype=torch.float64), 1.0, VP)
    np.testing.assert_allclose(loglik_grad(model, VP, [0.3, -0.7], None, fixed_steps=16), [-0.3, 0.7], atol=1e-10)
    np.testing.assert_allclose(loglik_grad(model, VP, [0.0, 0.0], None, fixed_steps=16), [0.0, 0.0], atol=1e-12)


@pytest.mark.parametrize(
    "model,y",
    [
        (AnalyticGaussianScore(torch.zeros(2, dtype=torch.float64), 4.0, VP), None),
        (AnalyticGmmScore([[0.4, 0.6]], [[[1.0, 0.0], [-1.0, 0.5]]], 0.5, VP), 0),
    ],
)
def test_loglik_grad_matches_finite_differences(model, y):
    x = np.array([0.2, -0.4])
    g = loglik_grad(model, VP, x, y, fixed_steps=16)
    h = 1e-4
    fd = np.zeros(2)
    for i in range(2):
        d = np.zeros(2)
        d[i] = h
        hi = float(fixed_grid_log_likelihood(model, VP, x + d, y, 16))
        lo = float(fixed_grid_log_likelihood(model, VP, x - d, y, 16))
        fd[i] = (hi - lo) / (2 * h)
    assert np.linalg.norm(g - fd) <= 1e-3 * max(np.linalg.norm(fd), 1e-6)


@pytest.mark.parametrize("init_seed", [0, 1])
def test_loglik_grad_of_trained_mlp_matches_finite_differences(init_seed):
    dataset, _ = gen_gmm_dataset(2, 2, [[1.0, 0.0], [-1.0, 0.0]], 0.5, 64, seed=init_seed)
    net = MlpScoreNet(2, 2, VP, MlpConfig(hidden=[32, 32]), init_seed=init_seed)
    model = train(net, dataset, TrainCfg(steps=20, batch_size=32, seed=init_seed)).net
    assert float(model.head.weight.abs().max()) > 0.0

    x = np.array([0.3, -0.2])
    for y in (0, 1):
        g = loglik_grad(model, VP, x, y, fixed_steps=16)
        h = 1e-4
        fd = np.zeros(2)
        for i in range(2):
            d = np.zeros(2)
            d[i] = h
            hi = float(fixed_grid_log_likelihood(model, VP, x + d, y, 16))
            lo = float(fixed_grid_log_likelihood(model, VP, x - d, y, 16))
            fd[i] = (hi - lo) / (2 * h)
        assert np.linalg.norm(g - fd) <= 1e-3 * max(np.linalg.norm(fd), 1e-6)


def test_loglik_grad_needs_probes_in_high_dimension():
    model = AnalyticGaussianScore(torch.zeros(17, dtype=torch.float64), 1.0, VP)
    with pytest.raises(ValueError):
        loglik_grad(model, VP, np.zeros(17), None, fixed_steps=8)
    g = loglik_grad(model, VP, np.full(17, 0.1), None, fixed_steps=8, tcfg=TraceCfg(n_probes=2))
    np.testing.assert_allclose(g, np.full(17, -0.1), atol=1e-10)


def test_zero_budget_returns_clean_input():
    model = two_class()
    x0 = np.array([0.1, 0.0])
    result = pgd_attack(model, VP, x0, 0, AttackCfg(eps=0.0), fixed_steps=16, domain=(-3.0, 3.0))
    np.testing.assert_array_equal(result.x_adv, x0)
    assert result.trace == []
    assert result.y_pred_adv == result.y_pred_clean == 0
    assert not result.success


def test_pgd_flips_a_near_boundary_point():
    model = two_class()
    x0 = np.array([0.1, 0.0])
    acfg = AttackCfg(norm="linf", eps=0.5, n_steps=8)
    result = pgd_attack(model, VP, x0, 0, acfg, fixed_steps=16, domain=(-3.0, 3.0))
    assert result.y_pred_clean == 0
    assert result.success and result.y_pred_adv == 1
    assert len(result.trace) == 8
    assert all(r["linf_dist"] <= 0.5 + 1e-12 for r in result.trace)
    losses = [r["loss"] for r in result.trace]
    assert all(b >= a - 1e-9 for a, b in zip(losses, losses[1:]))
    assert result.final_loss >= losses[-1] - 1e-9

    rec = result.record(0, 0, x0, acfg)
    assert rec["linf_dist"] == pytest.approx(0.5)
    assert rec["steps"] == 8 and rec["norm"] == "linf"


def test_pgd_l2_stays_in_ball_and_domain():
    model = two_class()
    x0 = np.array([0.9, 0.95])
    acfg = AttackCfg(norm="l2", eps=0.3, n_steps=4, random_start=True, seed=2)
    result = pgd_attack(model, VP, x0, 0, acfg, fixed_steps=16, domain=(-1.0, 1.0))
    assert np.linalg.norm(result.x_adv - x0) <= 0.3 + 1e-12
    assert result.x_adv.max() <= 1.0


def test_pgd_rejects_bad_inputs():
    model = two_class()
    with pytest.raises(ValueError):
        pgd_attack(model, VP, [5.0, 0.0], 0, AttackCfg(eps=0.1), domain=(-3.0, 3.0))
    with pytest.raises(ValueError):
        pgd_attack(model, VP, [0.0, 0.0], 2, AttackCfg(eps=0.1), domain=(-3.0, 3.0))


def test_gradient_failure_aborts_attack(monkeypatch):
    calls = {"n": 0}
    original = attacks._AttackObjective.loss_and_grad

    def flaky(self, x):
        calls["n"] += 1
        if calls["n"] == 3:
            raise AttackAbortedError("non-finite attack loss or gradient")
        return original(self, x)

    monkeypatch.setattr(attacks._AttackObjective, "loss_and_grad", flaky)
    result = pgd_attack(two_class(), VP, [0.1, 0.0], 0, AttackCfg(eps=0.5, n_steps=8), fixed_steps=16, domain=(-3.0, 3.0))
    assert result.aborted
    assert "non-finite" in result.abort_reason
    assert len(result.trace) == 2
    assert result.y_pred_adv is not None


def test_run_attacks_summary():
    dataset, oracle = gen_gmm_dataset(2, 2, [[1.0, 0.0], [-1.0, 0.0]], 0.3, 2, seed=0)
    records, summary = run_attacks(
        oracle.score_model(VP), dataset, AttackCfg(eps=0.0), fixed_steps=16, limit=3,
    )
    assert len(records) == 3
    assert summary["n_samples"] == 3
    assert summary["adversarial_accuracy"] == summary["clean_accuracy"]
    assert summary["mean_linf_dist"] == 0.0 and summary["n_aborted"] == 0
    assert attack_summary([])["adversarial_accuracy"] is None
    with pytest.raises(ValueError):
        run_attacks(oracle.score_model(VP), dataset, AttackCfg(eps=0.0), fixed_steps=16, limit=0)


@pytest.mark.slow
def test_linf_pgd_on_trained_model_drops_accuracy():
    dim = 16
    # class means 0.75 sigma from the decision boundary
    a = 0.75 / math.sqrt(dim)
    modes = [[a] * dim, [-a] * dim]
    train_set, _ = gen_gmm_dataset(2, dim, modes, 1.0, 2000, seed=0)
    test_set, _ = gen_gmm_dataset(2, dim, modes, 1.0, 50, seed=1)
    net = MlpScoreNet(dim, 2, VP, MlpConfig(hidden=[128, 128]), init_seed=0)
    model = train(net, train_set, TrainCfg(steps=3000, batch_size=256, ema_decay=0.99, log_every=1000)).ema_net

    lo, hi = test_set.continuous_domain
    base = default_attack_cfg("linf", hi - lo, n_steps=10)
    solver = SolverCfg(rtol=1e-4, atol=1e-4)
    summaries = []
    for budget in (base.eps, 2.0 * base.eps):
        acfg = AttackCfg(norm="linf", eps=budget, n_steps=10)
        records, summary = run_attacks(model, test_set, acfg, fixed_steps=16, solver_cfg=solver, limit=80)
        assert all(r["linf_dist"] <= budget + 1e-9 for r in records)
        assert summary["n_aborted"] == 0
        summaries.append(summary)

    at_eps, at_2eps = summaries
    assert at_eps["clean_accuracy"] - at_eps["adversarial_accuracy"] >= 0.30
    assert at_2eps["adversarial_accuracy"] <= at_eps["adversarial_accuracy"]


# ------------------------------------------------------------ corruptions


def image_dataset():
    return gen_toyimage_dataset(2, 4, 4, 3, seed=0)


def test_severity_table_lookup():
    grid = CorruptionGrid()
    assert grid.parameter(CorruptionSpec(kind="gaussian_noise", severity=3)) == 0.08
    assert grid.parameter(CorruptionSpec(kind="contrast", severity=5)) == 0.05
    with pytest.raises(ValueError):
        CorruptionSpec(kind="contrast", severity=6)
    with pytest.raises(ValueError):
        CorruptionGrid(tables={CorruptionKind.CONTRAST: [0.5, 0.4]})
    with pytest.raises(ValueError):
        CorruptionGrid(tables={CorruptionKind.IMPULSE_NOISE: [0.1, 0.2, 0.3, 0.4, 1.5]})


@pytest.mark.parametrize("kind", list(CorruptionKind))
def test_identity_grid_leaves_images_unchanged(kind):
    dataset = image_dataset()
    out = corrupt(dataset, CorruptionSpec(kind=kind, severity=2), seed=0, grid=CorruptionGrid.identity())
    np.testing.assert_array_equal(out.samples, dataset.samples)
    np.testing.assert_array_equal(out.labels, dataset.labels)


def test_tiny_blur_is_identity():
    dataset = image_dataset()
    grid = CorruptionGrid(tables={CorruptionKind.GAUSSIAN_BLUR: [1e-3] * 5})
    out = corrupt(dataset, CorruptionSpec(kind="gaussian_blur", severity=1), seed=0, grid=grid)
    np.testing.assert_array_equal(out.samples, dataset.samples)


def test_spatial_corruption_needs_images():
    dataset, _ = gen_gmm_dataset(2, 4, [[0.0] * 4, [1.0] * 4], 0.5, 3, seed=0)
    with pytest.raises(ValueError):
        corrupt(dataset, CorruptionSpec(kind="gaussian_blur", severity=1), seed=0)
    noisy = corrupt(dataset, CorruptionSpec(kind="gaussian_noise", severity=1), seed=0)
    assert noisy.samples.shape == dataset.samples.shape


def test_corruption_is_deterministic():
    dataset = image_dataset()
    spec = CorruptionSpec(kind="gaussian_noise", severity=5)
    a = corrupt(dataset, spec, seed=1)
    b = corrupt(dataset, spec, seed=1)
    c = corrupt(dataset, spec, seed=2)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


def test_corrupted_quantized_data_stays_in_range():
    dataset = image_dataset()
    grid = CorruptionGrid(tables={CorruptionKind.GAUSSIAN_NOISE: [1.0, 2.0, 3.0, 4.0, 5.0]})
    out = corrupt(dataset, CorruptionSpec(kind="gaussian_noise", severity=5), seed=0, grid=grid)
    assert out.quantized and out.samples.dtype == np.int64
    assert out.samples.min() >= 0 and out.samples.max() <= 255


def test_full_impulse_noise_hits_extremes():
    dataset = image_dataset()
    grid = CorruptionGrid(tables={CorruptionKind.IMPULSE_NOISE: [1.0] * 5})
    out = corrupt(dataset, CorruptionSpec(kind="impulse_noise", severity=1), seed=0, grid=grid)
    assert set(np.unique(out.samples).tolist()) <= {0, 255}


def test_contrast_keeps_image_mean():
    rng = np.random.default_rng(0)
    samples = rng.uniform(0.3, 0.7, size=(4, 3, 3))
    dataset = Dataset(samples=samples, labels=np.zeros(4), num_classes=1, domain=(0.0, 1.0))
    out = corrupt(dataset, CorruptionSpec(kind="contrast", severity=1), seed=0)
    np.testing.assert_allclose(out.samples.mean(axis=(1, 2)), samples.mean(axis=(1, 2)), atol=1e-12)
    spread_in = samples.std(axis=(1, 2))
    np.testing.assert_allclose(out.samples.std(axis=(1, 2)), 0.4 * spread_in, atol=1e-12)


def tiny_image_problem():
    a = np.array([0.2, 0.8, 0.8, 0.2])
    b = np.array([0.8, 0.2, 0.2, 0.8])
    rng = np.random.default_rng(3)
    samples = np.concatenate([a + 0.05 * rng.standard_normal((2, 4)), b + 0.05 * rng.standard_normal((2, 4))])
    dataset = Dataset(
        samples=np.clip(samples, 0.0, 1.0).reshape(4, 2, 2),
        labels=np.array([0, 0, 1, 1]),
        num_classes=2,
        domain=(0.0, 1.0),
    )
    model = AnalyticGmmScore([[1.0], [1.0]], [[a], [b]], 0.05, VP)
    return dataset, model


def test_identity_grid_matches_clean_accuracy():
    dataset, model = tiny_image_problem()
    report = corruption_eval(model, dataset, CorruptionGrid.identity(), SolverCfg(), EXACT)
    assert report.clean_accuracy == 1.0
    for kind in CorruptionKind:
        assert report.matrix[kind.value] == [report.clean_accuracy] * 5
    assert len(report.rows) == 20


def test_corruption_aggregates():
    dataset, model = tiny_image_problem()
    report = corruption_eval(model, dataset, CorruptionGrid(), SolverCfg(), EXACT)
    cells = [a for accs in report.matrix.values() for a in accs]
    assert report.mean_accuracy == pytest.approx(np.mean(cells))
    quiet = report.matrix["gaussian_blur"] + report.matrix["contrast"]
    assert report.mean_accuracy_without_noise == pytest.approx(np.mean(quiet))
    summary = report.summary()
    assert summary["severity_tables"]["contrast"] == [0.4, 0.3, 0.2, 0.1, 0.05]


def test_corruption_eval_skips_spatial_kinds_on_vectors():
    dataset, oracle = gen_gmm_dataset(2, 2, [[2.0, 0.0], [-2.0, 0.0]], 0.5, 1, seed=0)
    report = corruption_eval(oracle.score_model(VP), dataset, CorruptionGrid.identity(), SolverCfg(), EXACT)
    assert set(report.matrix) == {"gaussian_noise", "impulse_noise"}
    assert report.mean_accuracy_without_noise is None
    with pytest.raises(ValueError):
        corruption_eval(oracle.score_model(VP), dataset, CorruptionGrid.identity(), SolverCfg(), EXACT, limit=0)
