import math

import numpy as np
import pytest

from erasure_fl.data import CLASSIFICATION, gen_classification_blobs, gen_linear
from erasure_fl.errors import DimensionError, DivergenceError, InvalidConfigError
from erasure_fl.model import LossSpec, accuracy, local_gradient, local_loss, local_update, mse


def naive_loss(w, ds, spec):
    """Per-sample summation in pure Python (oracle)."""
    total = 0.0
    if spec.kind == "linear-mse":
        for x, y in zip(ds.features.tolist(), ds.targets.tolist()):
            total += (y - sum(a * b for a, b in zip(x, w))) ** 2
        total /= 2 * ds.size
    else:
        C = spec.n_classes
        W = [[w[r * C + c] for c in range(C)] for r in range(ds.width)]
        for x, y in zip(ds.features.tolist(), ds.targets.tolist()):
            z = [sum(x[r] * W[r][c] for r in range(ds.width)) for c in range(C)]
            m = max(z)
            total += m + math.log(sum(math.exp(v - m) for v in z)) - z[int(y)]
        total /= ds.size
    return total + 0.5 * spec.reg * sum(v * v for v in w)


def fd_gradient(f, w, h=1e-6):
    g = np.empty_like(w)
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = h
        g[k] = (f(w + e) - f(w - e)) / (2 * h)
    return g


@pytest.fixture
def blob_ds(rng):
    return gen_classification_blobs(3, 30, 2, 3.0, 1.0, rng).pooled()


@pytest.fixture
def xent_spec():
    return LossSpec("softmax-xent", 0.01, n_classes=3)


def test_exact_fit_has_zero_loss(rng):
    ds = gen_linear(40, 2.0, -1.0, 0.0, (-3, 3), rng)
    assert local_loss(np.array([2.0, -1.0]), ds, LossSpec()) < 1e-28


def test_zero_params_loss_closed_form(line_ds):
    assert local_loss(np.zeros(2), line_ds, LossSpec()) == pytest.approx(np.mean(line_ds.targets**2) / 2, rel=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_linear_loss_matches_naive_sum(seed):
    rng = np.random.default_rng(seed)
    ds = gen_linear(25, 1.5, 0.5, 1.0, (-2, 2), rng)
    spec = LossSpec(reg=0.3)
    w = rng.normal(size=2)
    assert local_loss(w, ds, spec) == pytest.approx(naive_loss(w.tolist(), ds, spec), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_softmax_loss_matches_naive_sum(seed, blob_ds, xent_spec):
    w = np.random.default_rng(seed).normal(size=9)
    assert local_loss(w, blob_ds, xent_spec) == pytest.approx(naive_loss(w.tolist(), blob_ds, xent_spec), rel=1e-12)


def test_softmax_loss_stable_for_huge_logits(blob_ds, xent_spec):
    assert np.isfinite(local_loss(np.full(9, 1e4), blob_ds, xent_spec))


def test_device_ols_is_stationary(line_ds):
    w_ols = np.linalg.solve(line_ds.features.T @ line_ds.features, line_ds.features.T @ line_ds.targets)
    assert np.linalg.norm(local_gradient(w_ols, line_ds, LossSpec())) < 1e-9


@pytest.mark.parametrize("kind", ["linear-mse", "softmax-xent"])
def test_gradient_matches_finite_differences(kind, line_ds, blob_ds, xent_spec):
    ds, spec = (line_ds, LossSpec(reg=0.1)) if kind == "linear-mse" else (blob_ds, xent_spec)
    rng = np.random.default_rng(7)
    for _ in range(10):
        w = rng.normal(size=spec.param_size(ds.width))
        fd = fd_gradient(lambda v: local_loss(v, ds, spec), w)
        assert np.max(np.abs(fd - local_gradient(w, ds, spec))) < 1e-5


def test_gradient_doubles_with_targets(line_ds):
    doubled = type(line_ds)(line_ds.features, 2 * line_ds.targets)
    g, g2 = local_gradient(np.zeros(2), line_ds, LossSpec()), local_gradient(np.zeros(2), doubled, LossSpec())
    assert np.array_equal(g2, 2 * g)


def test_tau_zero_is_identity(line_ds):
    w = np.array([0.3, -0.7])
    out = local_update(w, line_ds, LossSpec(), 0.1, 0)
    assert np.array_equal(out, w) and out is not w


def test_single_step_is_gradient_step(line_ds):
    w = np.array([0.3, -0.7])
    expected = w - 0.005 * local_gradient(w, line_ds, LossSpec())
    assert np.array_equal(local_update(w, line_ds, LossSpec(), 0.005, 1), expected)


def test_ten_steps_equal_ten_single_steps(line_ds):
    w = np.zeros(2)
    step = w
    for _ in range(10):
        step = local_update(step, line_ds, LossSpec(), 0.005, 1)
    assert np.array_equal(local_update(w, line_ds, LossSpec(), 0.005, 10), step)


def test_long_run_converges_to_device_ols(line_ds):
    X, y = line_ds.features, line_ds.targets
    L = np.linalg.eigvalsh(X.T @ X / line_ds.size).max()
    w_ols = np.linalg.solve(X.T @ X, X.T @ y)
    w = local_update(np.zeros(2), line_ds, LossSpec(), 1.0 / L, 5000)
    assert np.max(np.abs(w - w_ols)) < 1e-8


def test_update_is_deterministic(blob_ds, xent_spec):
    a = local_update(np.zeros(9), blob_ds, xent_spec, 0.5, 7)
    b = local_update(np.zeros(9), blob_ds, xent_spec, 0.5, 7)
    assert np.array_equal(a, b)


def test_divergence_reports_iteration(line_ds):
    with pytest.raises(DivergenceError) as exc:
        local_update(np.ones(2), line_ds, LossSpec(), 1e6, 500)
    assert 1 < exc.value.iteration <= 500


def test_divergence_context_message():
    err = DivergenceError(12).with_context(4, 2)
    assert (err.iteration, err.round_index, err.device) == (12, 4, 2)
    assert "round 4" in str(err) and "device 2" in str(err)


@pytest.mark.parametrize("eta,tau", [(0.0, 1), (-1.0, 1), (0.1, -1)])
def test_update_validation(line_ds, eta, tau):
    with pytest.raises(InvalidConfigError):
        local_update(np.zeros(2), line_ds, LossSpec(), eta, tau)


def test_dimension_mismatch(line_ds, blob_ds, xent_spec):
    with pytest.raises(DimensionError):
        local_loss(np.zeros(3), line_ds, LossSpec())
    with pytest.raises(DimensionError):
        local_gradient(np.zeros(6), blob_ds, xent_spec)
    with pytest.raises(DimensionError):
        local_loss(np.zeros(9), line_ds, LossSpec("softmax-xent", n_classes=3))


def test_loss_spec_validation():
    with pytest.raises(InvalidConfigError):
        LossSpec(reg=-1.0)
    with pytest.raises(InvalidConfigError):
        LossSpec("softmax-xent")
    with pytest.raises(InvalidConfigError):
        LossSpec("hinge")


@pytest.mark.parametrize("kind", ["linear-mse", "softmax-xent"])
def test_convexity_samples(kind, line_ds, blob_ds, xent_spec):
    ds, spec = (line_ds, LossSpec()) if kind == "linear-mse" else (blob_ds, xent_spec)
    rng = np.random.default_rng(3)
    for _ in range(200):
        x, y = rng.normal(scale=3, size=(2, spec.param_size(ds.width)))
        a = rng.random()
        lhs = local_loss(a * x + (1 - a) * y, ds, spec)
        rhs = a * local_loss(x, ds, spec) + (1 - a) * local_loss(y, ds, spec)
        assert lhs <= rhs + 1e-12 * max(1.0, abs(rhs))


def test_gradient_lipschitz_samples(line_ds):
    spec = LossSpec(reg=0.2)
    X = line_ds.features
    L = np.linalg.eigvalsh(X.T @ X).max() / line_ds.size + spec.reg
    rng = np.random.default_rng(8)
    for _ in range(200):
        x, y = rng.normal(scale=5, size=(2, 2))
        gap = np.linalg.norm(local_gradient(x, line_ds, spec) - local_gradient(y, line_ds, spec))
        assert gap <= L * np.linalg.norm(x - y) * (1 + 1e-12)


def test_metrics(line_ds, blob_ds, xent_spec):
    w = np.array([2.0, 1.0])
    assert mse(w, line_ds) == pytest.approx(2 * local_loss(w, line_ds, LossSpec()), rel=1e-14)
    # all logits tie, so argmax picks class 0 and one class in three is right
    assert accuracy(np.zeros(9), blob_ds, xent_spec) == pytest.approx(1 / 3)
    assert blob_ds.task == CLASSIFICATION
