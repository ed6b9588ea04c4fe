import math

import numpy as np
import pytest
import torch

from src.diffusion.score_models import (
    AnalyticGaussianScore,
    AnalyticGmmScore,
    MlpConfig,
    MlpScoreNet,
    analytic_gaussian_score,
    load_checkpoint,
    save_checkpoint,
)
from src.diffusion.sde import SdeKind, SdeSpec, perturb_scale
from src.utils.io import write_container

VP = SdeSpec(kind=SdeKind.VP)


def t64(values):
    return torch.tensor(values, dtype=torch.float64)


def small_net(init_seed=0, **config):
    cfg = MlpConfig(hidden=[4], embed_dim=4, **config)
    return MlpScoreNet(dim=2, num_classes=2, spec=VP, config=cfg, init_seed=init_seed)


def test_standard_normal_score_is_minus_x():
    model = AnalyticGaussianScore(torch.zeros(2, dtype=torch.float64), 1.0, VP)
    x = t64([0.7, -1.3])
    for t in (1e-4, 0.3, 1.0):
        torch.testing.assert_close(model(x, t), -x)


def test_gaussian_score_zero_at_mode():
    mu = t64([1.0, 2.0])
    out = analytic_gaussian_score(mu, 0.5, VP, mu, 1e-5)
    assert float(out.abs().max()) < 1e-4


def test_gaussian_score_denominator():
    # m(0.5)² · 0.25 + σ(0.5)² ≈ 0.94070
    out = analytic_gaussian_score(t64([0.0]), 0.25, VP, t64([1.0]), 0.5)
    assert float(out) == pytest.approx(-1.0 / 0.94070, abs=1e-4)


def test_gaussian_score_rejects_bad_variance():
    with pytest.raises(ValueError):
        AnalyticGaussianScore(t64([0.0]), 0.0, VP)


def test_single_component_gmm_matches_gaussian():
    mu = t64([0.5, -0.5])
    gmm = AnalyticGmmScore([[1.0]], mu.reshape(1, 1, 2), 0.7, VP)
    gauss = AnalyticGaussianScore(mu, 0.7, VP)
    x = t64([[0.1, 0.2], [-1.0, 3.0]])
    torch.testing.assert_close(gmm(x, 0.4, 0), gauss(x, 0.4))
    torch.testing.assert_close(gmm.log_density(x, 0.4, 0), gauss.log_density(x, 0.4))


def test_symmetric_mixture_score_vanishes_at_center():
    gmm = AnalyticGmmScore([[0.5, 0.5]], [[[2.0, 0.0], [-2.0, 0.0]]], 1.0, VP)
    out = gmm(t64([0.0, 0.0]), 0.2, 0)
    assert float(out.abs().max()) < 1e-12


def test_gmm_score_is_gradient_of_log_density():
    gmm = AnalyticGmmScore(
        [[0.3, 0.7], [1.0, 0.0]],
        [[[1.0, 1.0], [-1.0, 0.5]], [[0.0, -2.0], [3.0, 3.0]]],
        [[0.5, 0.8], [1.2, 1.0]],
        VP,
    )
    x = np.array([0.4, -0.3])
    h = 1e-5
    for y, t in ((0, 0.05), (1, 0.6), (None, 0.3)):
        fd = np.zeros(2)
        for i in range(2):
            d = np.zeros(2)
            d[i] = h
            hi = float(gmm.log_density(torch.from_numpy(x + d), t, y))
            lo = float(gmm.log_density(torch.from_numpy(x - d), t, y))
            fd[i] = (hi - lo) / (2 * h)
        np.testing.assert_allclose(gmm(torch.from_numpy(x), t, y).numpy(), fd, atol=1e-6)


def test_gmm_rejects_bad_weights():
    with pytest.raises(ValueError):
        AnalyticGmmScore([[0.5, 0.6]], [[[0.0], [1.0]]], 1.0, VP)
    with pytest.raises(ValueError):
        AnalyticGmmScore([[1.0]], [[[0.0]]], -1.0, VP)


def test_label_out_of_range():
    gmm = AnalyticGmmScore([[1.0], [1.0]], [[[0.0]], [[1.0]]], 1.0, VP)
    with pytest.raises(ValueError):
        gmm(t64([0.0]), 0.5, 2)
    with pytest.raises(ValueError):
        small_net()(t64([0.0, 0.0]), 0.5, 5)


def test_zero_head_outputs_zero():
    net = small_net(zero_head=True)
    out = net(t64([[1.0, 2.0], [-3.0, 0.5]]), t64([0.1, 0.9]), [0, 1])
    assert torch.equal(out, torch.zeros(2, 2, dtype=torch.float64))


def test_init_is_deterministic_and_leaves_global_rng_alone():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = small_net(init_seed=7)
    after = torch.rand(1)
    b = small_net(init_seed=7)
    assert torch.equal(before, after)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    c = small_net(init_seed=8)
    assert not torch.equal(a.input.weight, c.input.weight)


def test_unconditional_equals_zeroed_label_projection():
    net = small_net(init_seed=3)
    x = t64([0.3, -0.2])
    uncond = net(x, 0.5)
    with torch.no_grad():
        net.label_proj.weight.zero_()
    torch.testing.assert_close(net(x, 0.5, 1), uncond)


def test_output_scaled_by_inverse_sigma():
    net = small_net(init_seed=1)
    x = t64([0.3, -0.2])
    sigma = math.sqrt(1.0 - math.exp(-0.5 * 0.1 ** 2 * 19.9 - 0.1 * 0.1))
    torch.testing.assert_close(net(x, 0.1, 0), net.network_output(x, 0.1, 0) / sigma)


T_GRID = [0.5, 0.2, 0.05, 1e-2, 1e-3, 1e-4, VP.t_eps]


def test_score_norm_times_sigma_is_raw_output_norm():
    net = MlpScoreNet(2, 2, VP, MlpConfig(hidden=[16, 16], embed_dim=8), init_seed=2)
    x = t64([0.3, -0.2])
    for t in T_GRID:
        sigma = float(perturb_scale(VP, t).std)
        score = net(x, t, 1)
        raw = net.network_output(x, t, 1)
        assert float(raw.norm()) > 0.0
        assert float(score.norm()) * sigma == pytest.approx(float(raw.norm()), rel=1e-12)


def test_score_norm_grows_toward_t_eps():
    net = MlpScoreNet(2, 2, VP, MlpConfig(hidden=[16, 16], embed_dim=8), init_seed=4)
    with torch.no_grad():
        # raw output constant in t
        net.input.weight[:, 2:] = 0.0
    x = t64([0.3, -0.2])
    norms = [float(net(x, t, 0).norm()) for t in T_GRID]
    assert all(b > a for a, b in zip(norms, norms[1:]))
    assert norms[-1] / norms[0] > 100.0


def test_parameter_gradients_match_finite_differences():
    net = small_net(init_seed=5)
    x = t64([[0.3, -0.2], [1.0, 0.4]])
    t = t64([0.2, 0.7])
    y = [0, 1]
    c = t64([[1.0, -2.0], [0.5, 0.25]])

    def objective():
        return (net(x, t, y) * c).sum()

    net.zero_grad()
    objective().backward()
    h = 1e-6
    for p in (net.input.weight, net.label_proj.weight, net.head.bias):
        analytic = p.grad.clone()
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                hi = objective().item()
                flat[i] = orig - h
                lo = objective().item()
                flat[i] = orig
            fd = (hi - lo) / (2 * h)
            assert abs(analytic.view(-1)[i].item() - fd) <= 1e-5 * max(1.0, abs(fd))


def test_wrong_dimension_raises():
    with pytest.raises(ValueError):
        small_net()(t64([1.0, 2.0, 3.0]), 0.5, 0)


def test_checkpoint_round_trip(tmp_path):
    net = small_net(init_seed=9)
    path = tmp_path / "model.sbgc"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    assert loaded.architecture() == net.architecture()
    assert loaded.spec == net.spec
    x = t64([[0.1, 0.2], [0.3, -0.4]])
    torch.testing.assert_close(loaded(x, 0.3, [1, 0]), net(x, 0.3, [1, 0]), rtol=0, atol=0)


def test_checkpoint_rejects_other_containers(tmp_path):
    path = tmp_path / "not_a_model.sbgc"
    write_container(path, {"kind": "dataset"}, b"")
    with pytest.raises(ValueError):
        load_checkpoint(path)
