import numpy as np
import pytest
from hypothesis import given, strategies as st

from canonface.losses import (LossInputError, LossInputs, LossWeights, conf_loss,
                              conf_loss_grad, grad_check, grad_loss, recompose, reg_loss,
                              reg_loss_grad, total_loss)

import oracles


def _inputs(rng, h=8, w=8, c=3, conf=True, mask_p=0.8, norm="l1"):
    pred = rng.normal(size=(h, w, c))
    target = rng.normal(size=(h, w, c))
    mask = rng.random((h, w)) < mask_p
    mask[0, 0] = True
    cm = rng.uniform(0.2, 2.0, size=(h, w)) if conf else None
    return LossInputs(pred, target, mask, cm, norm)


def test_default_weights():
    w = LossWeights()
    assert (w.alpha, w.gamma, w.lambda_c, w.lambda_d) == (0.2, 1.0, 5.0, 1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_c=-1)
    with pytest.raises(ValueError):
        LossWeights(alpha=float("nan"))


def test_trivial_values(rng):
    t = rng.normal(size=(5, 5, 3))
    m = np.ones((5, 5), bool)
    exact = LossInputs(t, t, m, np.ones((5, 5)))
    assert reg_loss(exact) == 0 and conf_loss(exact) == 0 and grad_loss(exact) == 0
    shifted = LossInputs(t + 0.7, t, m, np.ones((5, 5)))
    assert reg_loss(shifted) == pytest.approx(3 * 0.7, abs=1e-12)
    assert grad_loss(shifted) == pytest.approx(0.0, abs=1e-12)
    assert conf_loss(shifted, LossWeights(gamma=2.0)) == pytest.approx(2 * reg_loss(shifted))


def test_ramp_gradient_loss():
    h, w, s = 4, 6, 0.3
    ramp = np.tile((s * np.arange(w))[None, :, None], (h, 1, 1))
    inp = LossInputs(ramp, np.zeros_like(ramp), np.ones((h, w), bool))
    # (w - 1) differences per row, averaged over all h * w pixels
    assert grad_loss(inp) == pytest.approx(s * (w - 1) * h / (h * w), abs=1e-12)


@given(st.integers(0, 10_000), st.sampled_from(["l1", "l2"]))
def test_losses_match_loop_oracles(seed, norm):
    inp = _inputs(np.random.default_rng(seed), norm=norm)
    w = LossWeights()
    assert abs(reg_loss(inp) - oracles.reg_loss(inp.pred, inp.target, inp.mask, norm)) <= 1e-12
    assert abs(conf_loss(inp, w) - oracles.conf_loss(inp.pred, inp.target, inp.mask,
                                                     inp.confidence, 0.2, 1.0, norm)) <= 1e-12
    assert abs(grad_loss(inp) - oracles.grad_loss(inp.pred, inp.target, inp.mask)) <= 1e-12


def test_error_cases(rng):
    inp = _inputs(rng)
    with pytest.raises(LossInputError):
        reg_loss(inp.replace(mask=np.zeros((8, 8), bool)))
    bad = inp.confidence.copy()
    bad[0, 0] = 0.0
    with pytest.raises(LossInputError, match="u=0, v=0"):
        conf_loss(inp.replace(confidence=bad))
    with pytest.raises(LossInputError):
        conf_loss(inp.replace(confidence=None))
    with pytest.raises(LossInputError):
        grad_loss(LossInputs(np.zeros((1, 4)), np.zeros((1, 4)), np.ones((1, 4), bool)))
    with pytest.raises(LossInputError):
        LossInputs(np.zeros((3, 3, 2)), np.zeros((3, 3, 3)), np.ones((3, 3), bool))
    with pytest.raises(LossInputError):
        LossInputs(np.zeros((3, 3)), np.zeros((3, 3)), np.ones((3, 3), bool), norm="huber")


def test_invariances(rng):
    inp = _inputs(rng, conf=True)
    k = 3.5
    scaled = inp.replace(pred=k * inp.pred, target=k * inp.target)
    assert reg_loss(scaled) == pytest.approx(k * reg_loss(inp), rel=1e-13)
    assert grad_loss(scaled) == pytest.approx(k * grad_loss(inp), rel=1e-13)
    perm = rng.permutation(64)
    flat = lambda a: a.reshape(64, 1, *a.shape[2:])[perm]  # noqa: E731
    p = LossInputs(flat(inp.pred), flat(inp.target), flat(inp.mask), flat(inp.confidence))
    assert reg_loss(p) == pytest.approx(reg_loss(inp), rel=1e-13)
    assert conf_loss(p) == pytest.approx(conf_loss(inp), rel=1e-13)


def test_conf_loss_lower_bound(rng):
    inp = _inputs(rng)
    e = np.abs(inp.error).sum(axis=2)[inp.mask]
    bound = (0.2 - 0.2 * np.log(0.2 / e)).sum() / inp.mask.sum()
    assert conf_loss(inp) >= bound - 1e-12


def test_conf_minimizer_grid_search():
    e, alpha, gamma = 0.37, 0.2, 1.0
    grid = np.linspace(0.01, 3.0, 300_001)
    vals = gamma * e * grid - alpha * np.log(grid)
    step = grid[1] - grid[0]
    assert abs(grid[np.argmin(vals)] - alpha / (gamma * e)) <= step


def test_conf_stationarity(rng):
    inp = _inputs(rng)
    e = np.abs(inp.error).sum(axis=2)
    star = inp.replace(confidence=0.2 / e)
    g = conf_loss_grad(star)["confidence"]
    assert np.abs(g).max() <= 1e-8


def test_reg_gradient_sign(rng):
    inp = _inputs(rng)
    g = reg_loss_grad(inp)["pred"]
    n = inp.mask.sum()
    expect = np.sign(inp.error) / n
    expect[~inp.mask] = 0
    assert np.array_equal(g, expect)


@pytest.mark.parametrize("loss", ["reg", "conf", "grad"])
@pytest.mark.parametrize("norm", ["l1", "l2"])
def test_grad_check_smooth_instances(loss, norm):
    rng = np.random.default_rng(7)
    inp = _inputs(rng, 5, 5, 3, norm=norm)
    assert grad_check(loss, inp, h=1e-4) <= 1e-4


def test_grad_check_rejects_kinks(rng):
    inp = _inputs(rng)
    p = inp.pred.copy()
    p[0, 0, 1] = inp.target[0, 0, 1] + 1e-5
    with pytest.raises(LossInputError, match="u=0, v=0, c=1"):
        grad_check("reg", inp.replace(pred=p))
    with pytest.raises(ValueError):
        grad_check("huber", inp)


def test_total_loss_recomposition(rng):
    d = _inputs(rng, c=1)
    r = _inputs(rng, c=3)
    c = _inputs(rng, c=3)
    w = LossWeights()
    total, br = total_loss(d, r, c, w)
    assert len(br) == 9
    manual = 0.0
    for name, inp, lam in (("depth", d, 1.0), ("ray", r, 1.0), ("canon", c, 5.0)):
        terms = reg_loss(inp) + conf_loss(inp, w) + grad_loss(inp)
        manual += lam * terms
    assert abs(total - manual) <= 1e-12
    assert abs(recompose(br, w) - total) <= 1e-12
    zero_c, br0 = total_loss(d, r, c, LossWeights(lambda_c=0.0))
    assert abs(zero_c - sum(v for k, v in br0.items() if not k.startswith("canon"))) <= 1e-12
    norm_total, _ = total_loss(d, r, c, w, normalize_channels=True)
    assert abs(norm_total - recompose(br, w, {"depth": 1, "ray": 3, "canon": 3})) <= 1e-12


def test_total_loss_exact_is_zero(rng):
    t = rng.normal(size=(4, 4, 3))
    m = np.ones((4, 4), bool)
    inp = LossInputs(t, t, m, np.ones((4, 4)))
    total, _ = total_loss(inp, inp, inp)
    assert total == 0.0
