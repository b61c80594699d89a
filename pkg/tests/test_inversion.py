import numpy as np
import pytest

from manifold_inversion import autodiff as ad
from manifold_inversion.autodiff import Tensor
from manifold_inversion.errors import ConfigError, DimensionError
from manifold_inversion.geometry import alignment_score, tangent_projector
from manifold_inversion.inversion import (
    InversionConfig,
    Smoothing,
    TransformSet,
    alignment_dynamics,
    inversion_loss,
    inversion_loss_gradient,
    invert,
    invert_batch,
    paa_gradient,
    taa_gradient,
)
from manifold_inversion.models import LossKind, class_loss

from conftest import make_classifier, make_generator


@pytest.fixture(scope="module")
def setup():
    g = make_generator(k=3, grid=4, hidden=8, seed=1)
    c = make_classifier(d=16, C=4, hidden=(8,), seed=2)
    return c, g


def ce_lossfn(c, y):
    def fn(t):
        from manifold_inversion.models import loss_tensor

        return loss_tensor(c.logits(t), np.full(t.shape[0], y), LossKind.CE)

    return fn


def test_inversion_loss_without_prior_is_class_loss(setup):
    c, g = setup
    z = np.array([0.3, -0.2, 0.5])
    x = g(z[None]).data[0]
    assert inversion_loss(z, 1, c, g, 0.0) == class_loss(c, x, 1, LossKind.CE)


def test_prior_vanishes_at_origin(setup):
    c, g = setup
    z = np.zeros(3)
    x = g(z[None]).data[0]
    assert inversion_loss(z, 2, c, g, 1.0, LossKind.LOGIT) == class_loss(c, x, 2, LossKind.LOGIT)


def test_inversion_loss_checks_latent_shape(setup):
    c, g = setup
    with pytest.raises(DimensionError):
        inversion_loss(np.zeros(4), 0, c, g, 0.1)


@pytest.mark.parametrize("kind", list(LossKind))
def test_inversion_gradient_matches_finite_differences(setup, kind):
    c, g = setup
    z = np.array([0.4, 0.1, -0.7])
    grad = inversion_loss_gradient(z, 3, c, g, 0.1, kind)
    fd = ad.finite_difference_jacobian(lambda v: inversion_loss(v, 3, c, g, 0.1, kind), z, 1e-5)
    assert ad.relative_error(grad, fd.ravel()) < 1e-6


def test_paa_with_zero_alpha_is_exact(setup):
    c, _ = setup
    x = np.random.default_rng(0).standard_normal(16)
    fn = ce_lossfn(c, 1)
    xt = Tensor(x[None], requires_grad=True)
    base = ad.grad(fn(xt).sum(), xt).data[0]
    for K in (1, 7):
        assert np.array_equal(paa_gradient(x, fn, K, 0.0, np.random.default_rng(K)), base)


def test_paa_constant_input_degenerates_to_base(setup):
    c, _ = setup
    x = np.full(16, 0.3)
    fn = ce_lossfn(c, 0)
    xt = Tensor(x[None], requires_grad=True)
    base = ad.grad(fn(xt).sum(), xt).data[0]
    assert np.array_equal(paa_gradient(x, fn, 20, 0.5, np.random.default_rng(0)), base)


def test_paa_affine_loss_gives_its_slope():
    a = np.linspace(-1, 1, 6)

    def fn(t):
        return (t * a).sum(axis=1) + 2.0

    out = paa_gradient(np.arange(6.0), fn, 13, 0.3, np.random.default_rng(0))
    np.testing.assert_allclose(out, a, atol=1e-15)


def test_paa_quadratic_monte_carlo_band():
    rng = np.random.default_rng(1)
    d = 6
    A = rng.standard_normal((d, d))
    H = A @ A.T / d
    x = rng.standard_normal(d)
    K, alpha = 10_000, 0.2

    def fn(t):
        return (ad.matmul(t, Tensor(H)) * t).sum(axis=1) * 0.5

    mean = paa_gradient(x, fn, K, alpha, np.random.default_rng(2))
    # gradient samples are H (x + eps), so the per-coordinate std is sigma * ||H row||
    sigma = alpha * (x.max() - x.min())
    band = 3 * sigma * np.linalg.norm(H, axis=1) / np.sqrt(K)
    assert np.all(np.abs(mean - H @ x) <= band)


def test_paa_converges_in_k():
    rng = np.random.default_rng(3)
    d = 5
    H = np.diag(rng.uniform(0.5, 2.0, d))
    x = rng.standard_normal(d)

    def fn(t):
        return (ad.matmul(t, Tensor(H)) * t).sum(axis=1) * 0.5

    a = paa_gradient(x, fn, 5000, 0.1, np.random.default_rng(4))
    b = paa_gradient(x, fn, 10_000, 0.1, np.random.default_rng(5))
    sigma = 0.1 * (x.max() - x.min())
    band = 3 * sigma * np.diag(H) * np.sqrt(1 / 5000 + 1 / 10_000)
    assert np.all(np.abs(a - b) <= band)


def test_paa_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        paa_gradient(np.ones(3), lambda t: t.sum(axis=1), 0, 0.1, np.random.default_rng(0))


def test_taa_identity_set_is_exact(setup):
    c, _ = setup
    x = np.random.default_rng(6).standard_normal(16)
    fn = ce_lossfn(c, 2)
    xt = Tensor(x[None], requires_grad=True)
    base = ad.grad(fn(xt).sum(), xt).data[0]
    out = taa_gradient(x, fn, 50, TransformSet.identity(4), np.random.default_rng(0))
    assert np.array_equal(out, base)


def test_taa_flip_two_path_check():
    # a mirror-symmetric weight makes the loss flip-invariant
    grid = 4
    flip = TransformSet(grid, flip_prob=1.0, shifts=(0,), crop_prob=0.0)
    x = np.random.default_rng(7).standard_normal(grid * grid)
    w = np.random.default_rng(8).standard_normal((grid, grid))
    w = (w + w[:, ::-1]).ravel()

    def fn(t):
        return ad.tanh(t * w).sum(axis=1)

    out = taa_gradient(x, fn, 9, flip, np.random.default_rng(0))
    fx = x.reshape(grid, grid)[:, ::-1].ravel()
    direct = (w * (1 - np.tanh(fx * w) ** 2)).reshape(grid, grid)
    # gradient at the flipped input, compared with the flip of the gradient at x
    np.testing.assert_allclose(out, direct.ravel(), atol=1e-14)
    at_x = (w * (1 - np.tanh(x * w) ** 2)).reshape(grid, grid)[:, ::-1].ravel()
    np.testing.assert_allclose(out, at_x, atol=1e-14)


def test_taa_is_seeded(setup):
    c, _ = setup
    x = np.random.default_rng(9).standard_normal(16)
    tset = TransformSet(4)
    a = taa_gradient(x, ce_lossfn(c, 0), 50, tset, np.random.default_rng(3))
    b = taa_gradient(x, ce_lossfn(c, 0), 50, tset, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_taa_grid_mismatch(setup):
    c, _ = setup
    with pytest.raises(DimensionError):
        taa_gradient(np.zeros(16), ce_lossfn(c, 0), 5, TransformSet(3), np.random.default_rng(0))


def test_taa_quadratic_monte_carlo_mean():
    # with a quadratic loss the transform-averaged gradient is H times the mean transformed input
    grid, d = 3, 9
    tset = TransformSet(grid)
    rng = np.random.default_rng(10)
    x = rng.standard_normal(d)
    H = np.diag(rng.uniform(0.5, 1.5, d))

    def fn(t):
        return (ad.matmul(t, Tensor(H)) * t).sum(axis=1) * 0.5

    K = 10_000
    out = taa_gradient(x, fn, K, tset, np.random.default_rng(11))
    # exact expectation over the transform distribution
    S = len(tset.shifts) ** 2
    probs = []
    for crop in range(5):
        pc = 1 - tset.crop_prob if crop == 0 else tset.crop_prob / 4
        for flip in range(2):
            pf = tset.flip_prob if flip else 1 - tset.flip_prob
            probs.extend([pc * pf / S] * S)
    probs = np.array(probs)
    TX = tset.matrices @ x
    exact = H @ (probs @ TX)
    std = np.sqrt(probs @ (TX @ H - exact) ** 2)
    assert np.all(np.abs(out - exact) <= 3 * std / np.sqrt(K) + 1e-12)


def test_transform_matrices():
    tset = TransformSet(4)
    assert tset.matrices.shape == (5 * 2 * 9, 16, 16)
    img = np.arange(16.0).reshape(4, 4)
    # crop 0, no flip, shift (0, 0) is the identity
    np.testing.assert_array_equal(tset.apply(4, img.ravel()), img.ravel())
    # crop 0, flip, shift (0, 1)
    shifted = np.zeros((4, 4))
    shifted[:, 1:] = img[:, ::-1][:, :3]
    np.testing.assert_array_equal(tset.apply(9 + 5, img.ravel()), shifted.ravel())


def test_transform_set_validation():
    with pytest.raises(ConfigError):
        TransformSet(4, flip_prob=1.5)
    with pytest.raises(ConfigError):
        TransformSet(2, shifts=(-2, 0))


def test_config_validation():
    with pytest.raises(ConfigError):
        InversionConfig(steps=0)
    with pytest.raises(ConfigError):
        InversionConfig(smoothing="blur")
    with pytest.raises(ConfigError):
        InversionConfig.from_dict({"stepz": 3})
    cfg = InversionConfig(loss_kind="logit", smoothing="taa")
    assert InversionConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_step_size_leaves_latent_unchanged(setup):
    c, g = setup
    run = invert(c, g, 1, InversionConfig(steps=1, step_size=0.0), seed=4)
    assert len(run.records) == 1
    assert np.array_equal(run.records[0].z, run.final_z)


def test_update_equals_direct_autodiff_gradient(setup):
    c, g = setup
    cfg = InversionConfig(steps=10, step_size=0.05, lam=0.2)
    run = invert(c, g, 2, cfg, seed=5)
    zs = [r.z for r in run.records] + [run.final_z]
    for before, after in zip(zs[:-1], zs[1:]):
        expected = -cfg.step_size * inversion_loss_gradient(before, 2, c, g, cfg.lam, cfg.loss_kind)
        np.testing.assert_allclose(after - before, expected, rtol=0, atol=1e-8)


def test_pushforward_lies_in_tangent_space(setup):
    c, g = setup
    z = np.array([0.2, -0.1, 0.6])
    gz = inversion_loss_gradient(z, 0, c, g, 0.0)
    J = g.jacobians(z[None])[0]
    v = J @ gz
    p = tangent_projector(J)
    np.testing.assert_allclose(p.project(v), v, atol=1e-8)
    assert alignment_score(p, v).value == pytest.approx(1.0, abs=1e-8)


def test_records_and_tracking(setup):
    c, g = setup
    run = invert(c, g, 0, InversionConfig(steps=25, track_every=10, step_size=0.05), seed=0)
    assert [r.step for r in run.records] == list(range(1, 26))
    assert [r.step for r in run.records if r.tracked] == [10, 20]
    for r in run.tracked():
        assert 0.0 <= r.as_inv <= 1.0
    assert all(r.as_inv is None for r in run.records if not r.tracked)


def test_tracked_score_is_the_geometry_score(setup):
    c, g = setup
    run = invert(c, g, 3, InversionConfig(steps=10, track_every=5), seed=1)
    rec = run.records[4]
    x = g(rec.z[None]).data[0]
    xt = Tensor(x[None], requires_grad=True)
    grad_x = ad.grad(ce_lossfn(c, 3)(xt).sum(), xt).data[0]
    p = tangent_projector(g.jacobians(rec.z[None])[0])
    assert rec.as_inv == pytest.approx(alignment_score(p, grad_x).value, abs=1e-12)


def test_smoothing_none_ignores_k_and_alpha(setup):
    c, g = setup
    a = invert(c, g, 1, InversionConfig(steps=5, K=3, alpha=0.9), seed=2)
    b = invert(c, g, 1, InversionConfig(steps=5, K=40, alpha=0.0), seed=2)
    assert np.array_equal(a.final_z, b.final_z)


@pytest.mark.parametrize("smoothing", list(Smoothing))
def test_runs_are_reproducible(setup, smoothing):
    c, g = setup
    cfg = InversionConfig(steps=6, smoothing=smoothing, K=8)
    a = invert_batch(c, g, [0, 1, 2], cfg, seeds=[7, 8, 9])
    b = invert_batch(c, g, [0, 1, 2], cfg, seeds=[7, 8, 9])
    for ra, rb in zip(a, b):
        assert ra.to_json() == rb.to_json()


def test_batch_run_matches_single_run(setup):
    c, g = setup
    cfg = InversionConfig(steps=8, smoothing="paa", K=5)
    batch = invert_batch(c, g, [0, 3], cfg, seeds=[11, 12])
    single = invert(c, g, 3, cfg, seed=12)
    np.testing.assert_allclose(batch[1].final_z, single.final_z, atol=1e-12)


def test_invert_batch_validates_targets(setup):
    c, g = setup
    with pytest.raises(ValueError):
        invert_batch(c, g, [4], InversionConfig(steps=1))
    with pytest.raises(ValueError):
        invert_batch(c, g, [0, 1], InversionConfig(steps=1), seeds=[0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_run(setup):
    _, g = setup
    c = make_classifier(d=16, C=4, hidden=(8,), seed=3)
    b = c.net.parameters()["2.bias"]
    # finite logits whose spread overflows the log-softmax
    b.data = np.array([1.7e308, -1.7e308, 0.0, 0.0])
    run = invert(c, g, 1, InversionConfig(steps=3), seed=0)
    assert run.aborted_at == 1 and not run.completed and run.final_x is None


def test_alignment_dynamics_of_single_run(setup):
    c, g = setup
    run = invert(c, g, 2, InversionConfig(steps=20, track_every=5), seed=3)
    series = alignment_dynamics([run])
    assert series == [(r.step, r.as_inv, r.confidence) for r in run.records if r.tracked]


def test_alignment_dynamics_by_class(setup):
    c, g = setup
    runs = invert_batch(c, g, [0, 0, 1], InversionConfig(steps=10, track_every=5))
    out = alignment_dynamics(runs, by_class=True)
    assert sorted(out) == [0, 1] and len(out[0]) == 2


def test_alignment_dynamics_needs_tracked_records(setup):
    c, g = setup
    run = invert(c, g, 0, InversionConfig(steps=3, track_every=10))
    with pytest.raises(ValueError):
        alignment_dynamics([run])
