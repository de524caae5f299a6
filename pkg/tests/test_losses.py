import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cutnmix.augment import SoftLabelBatch
from cutnmix.errors import ConfigurationError, ParameterError, ValidationError
from cutnmix.losses import DistillConfig, dml_loss, kd_kl, mmd_loss, pt_loss, soft_ce, softmax, total_loss

f64 = torch.float64


def t(x):
    return torch.tensor(x, dtype=f64)


# --- softmax ---------------------------------------------------------------


def test_softmax_examples():
    assert softmax(t([0.0, 0.0]), 1.0).tolist() == pytest.approx([0.5, 0.5])
    for c in (-50.0, 0.0, 700.0):
        assert softmax(t([c, c, c]), 2.5).tolist() == pytest.approx([1 / 3] * 3)
    # e^{ln 3} / (e^{ln 3} + 1) = 3/4
    assert softmax(t([math.log(3), 0.0]), 1.0).tolist() == pytest.approx([0.75, 0.25], abs=1e-15)


def test_softmax_stable_and_rejects_bad_tau():
    p = softmax(t([1000.0, 0.0]), 1.0)
    assert torch.isfinite(p).all() and p.sum().item() == pytest.approx(1.0)
    for tau in (0.0, -1.0):
        with pytest.raises(ParameterError):
            softmax(t([1.0, 2.0]), tau)


# --- cross-entropy ----------------------------------------------------------


def test_soft_ce_examples():
    assert soft_ce(t([[0.0, 0.0]]), t([[0.5, 0.5]])).item() == pytest.approx(math.log(2), abs=1e-12)
    assert soft_ce(t([[60.0, 0.0, 0.0]]), t([[1.0, 0.0, 0.0]])).item() < 1e-20


def test_soft_ce_accepts_soft_label_batch():
    y = SoftLabelBatch(np.array([[0.25, 0.75]]))
    assert soft_ce(t([[1.0, 2.0]]), y).item() == pytest.approx(oracles.soft_ce([[1.0, 2.0]], [[0.25, 0.75]]))


def test_soft_ce_linear_in_target():
    rng = np.random.default_rng(0)
    z = t(rng.normal(size=(1, 4)))
    lam = 0.3
    a, b = np.eye(4)[[1]], np.eye(4)[[3]]
    mixed = soft_ce(z, t(lam * a + (1 - lam) * b)).item()
    assert mixed == pytest.approx(lam * soft_ce(z, t(a)).item() + (1 - lam) * soft_ce(z, t(b)).item(), rel=1e-13)


def test_soft_ce_one_hot_matches_torch_cross_entropy():
    rng = np.random.default_rng(1)
    z = t(rng.normal(size=(6, 5)))
    y = rng.integers(0, 5, 6)
    ref = torch.nn.functional.cross_entropy(z, torch.as_tensor(y)).item()
    assert soft_ce(z, t(np.eye(5)[y])).item() == pytest.approx(ref, rel=1e-14)


def test_soft_ce_rejects_off_simplex_targets():
    with pytest.raises(ValidationError):
        soft_ce(t([[0.0, 0.0]]), t([[0.5, 0.6]]))
    with pytest.raises(ValidationError):
        soft_ce(t([[0.0, 0.0]]), t([[1.2, -0.2]]))
    with pytest.raises(ValidationError):
        soft_ce(t([[0.0, 0.0, 0.0]]), t([[0.5, 0.5]]))


# --- KD / DML / PT -----------------------------------------------------------


def test_kd_zero_at_agreement():
    z = t(np.random.default_rng(2).normal(size=(4, 3)))
    assert abs(kd_kl(z, z.clone(), 3.0).item()) <= 1e-9


def test_kd_two_class_example():
    # teacher probs [0.75, 0.25], student probs [0.5, 0.5], tau = 1
    expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert expected == pytest.approx(0.130812, abs=1e-6)
    val = kd_kl(t([[0.0, 0.0]]), t([[math.log(3), 0.0]]), 1.0).item()
    assert val == pytest.approx(expected, rel=1e-12)
    assert pt_loss(t([[0.0, 0.0]]), t([[math.log(3), 0.0]]), 1.0).item() == pytest.approx(expected, rel=1e-12)


def test_kd_temperature_squared_factor():
    rng = np.random.default_rng(3)
    s, te = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    for tau in (2.0, 3.0):
        softened = np.mean([
            oracles.kl_row(oracles.softmax_row(te[i], tau), oracles.softmax_row(s[i], tau)) for i in range(5)
        ])
        assert kd_kl(t(s), t(te), tau).item() == pytest.approx(tau * tau * softened, rel=1e-12)


def test_kd_shape_mismatch():
    with pytest.raises(ValidationError):
        kd_kl(t([[0.0, 1.0]]), t([[0.0, 1.0, 2.0]]), 1.0)
    with pytest.raises(ParameterError):
        kd_kl(t([[0.0, 1.0]]), t([[0.0, 1.0]]), 0.0)


def test_dml_examples():
    rng = np.random.default_rng(4)
    z1, z2 = t(rng.normal(size=(3, 2))), t(rng.normal(size=(3, 2)))
    assert dml_loss([z1, z2], 0, 3.0).item() == pytest.approx(kd_kl(z1, z2, 3.0).item(), rel=1e-14)
    assert abs(dml_loss([z1, z1.clone(), z1.clone()], 1, 3.0).item()) <= 1e-9
    # J=3 with hand-built two-class logits against the direct-summation oracle
    L = [[[0.0, 1.0], [2.0, -1.0]], [[0.5, 0.5], [1.0, 0.0]], [[-1.0, 2.0], [0.0, 0.0]]]
    expected = (oracles.kd(L[0], L[1], 2.0) + oracles.kd(L[0], L[2], 2.0)) / 2
    assert dml_loss([t(x) for x in L], 0, 2.0).item() == pytest.approx(expected, rel=1e-12)


def test_dml_needs_two_peers():
    with pytest.raises(ConfigurationError):
        dml_loss([t([[0.0, 1.0]])], 0, 1.0)


def test_mmd_examples():
    f1, f2 = t([[1.0, 0.0]]), t([[0.0, 1.0]])
    assert mmd_loss([f1, f2], 0).item() == pytest.approx(2.0)
    assert mmd_loss([f1, f2], 1).item() == pytest.approx(2.0)
    same = t(np.random.default_rng(5).normal(size=(4, 3)))
    assert mmd_loss([same, same.clone()], 0).item() == 0.0


def test_mmd_dimension_mismatch():
    with pytest.raises(ValidationError):
        mmd_loss([t([[1.0, 0.0]]), t([[1.0, 0.0, 0.0]])], 0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6), d=st.integers(1, 5))
def test_mmd_symmetric_for_two_peers(seed, n, d):
    rng = np.random.default_rng(seed)
    a, b = t(rng.normal(size=(n, d))), t(rng.normal(size=(n, d)))
    assert mmd_loss([a, b], 0).item() == pytest.approx(mmd_loss([b, a], 0).item(), rel=1e-12)
    assert mmd_loss([a, b], 0).item() == pytest.approx(mmd_loss([a, b], 1).item(), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6), K=st.integers(2, 5), tau=st.floats(0.5, 5))
def test_losses_nonnegative(seed, n, K, tau):
    rng = np.random.default_rng(seed)
    zs = [t(rng.normal(scale=3, size=(n, K))) for _ in range(3)]
    y = rng.dirichlet(np.ones(K), size=n)
    assert soft_ce(zs[0], t(y)).item() >= 0
    assert kd_kl(zs[0], zs[1], tau).item() >= -1e-12
    assert dml_loss(zs, 2, tau).item() >= -1e-12
    assert mmd_loss(zs, 1).item() >= 0


# --- detachment ---------------------------------------------------------------


def test_target_side_gets_no_gradient():
    rng = np.random.default_rng(6)
    s = t(rng.normal(size=(3, 4))).requires_grad_()
    te = t(rng.normal(size=(3, 4))).requires_grad_()
    v1 = kd_kl(s, te, 3.0)
    v2 = kd_kl(s, te + 0.5 * t(rng.normal(size=(3, 4))), 3.0)
    assert v1.item() != v2.item()
    g_s, g_t = torch.autograd.grad(v1, [s, te], allow_unused=True)
    assert g_t is None or torch.count_nonzero(g_t) == 0
    assert torch.count_nonzero(g_s) > 0

    fa = t(rng.normal(size=(3, 2))).requires_grad_()
    fb = t(rng.normal(size=(3, 2))).requires_grad_()
    g_a, g_b = torch.autograd.grad(mmd_loss([fa, fb], 0), [fa, fb], allow_unused=True)
    assert g_b is None
    assert torch.count_nonzero(g_a) > 0


# --- total objective -------------------------------------------------------------


def test_total_loss():
    assert total_loss(DistillConfig(alpha=0, beta=0, gamma=0), {"ce": 1.5, "dml": 9, "mmd": 9, "pt": 9}) == 1.5
    assert total_loss(DistillConfig(), {"ce": 1, "dml": 2, "mmd": 3, "pt": 4}) == pytest.approx(3.2)


def test_distill_defaults():
    cfg = DistillConfig()
    assert (cfg.J, cfg.tau, cfg.alpha, cfg.beta, cfg.gamma) == (2, 3.0, 0.6, 0.2, 0.1)
    with pytest.raises(ConfigurationError):
        DistillConfig(J=1)
    with pytest.raises(ParameterError):
        DistillConfig(tau=0)
