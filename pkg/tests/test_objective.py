import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from repdfd.errors import InputError, NumericError
from repdfd.face2text import TemplateConfig
from repdfd.objective import ClassScores, batch_loss, grad_delta, loss, predict, scores_from_features
from repdfd.transform import VisualPrompt, merge

from conftest import random_images


def _scores(p_correct, label):
    # logits chosen so softmax gives exactly the requested probability
    lo = math.log(p_correct) - math.log1p(-p_correct) if p_correct < 1 else 1e3
    logits = torch.tensor([lo, 0.0] if label == 0 else [0.0, lo], dtype=torch.float64)
    pr = torch.softmax(logits, -1)
    return ClassScores(pr[0], pr[1], logits)


def test_equal_text_features_give_half():
    f = torch.randn(8, dtype=torch.float64)
    w = torch.randn(8, dtype=torch.float64)
    s = scores_from_features(f, w, w.clone(), 0.01)
    assert float(s.p_real) == 0.5 and float(s.p_fake) == 0.5


def test_unit_cosines_tau_one():
    f = torch.tensor([1.0, 0.0], dtype=torch.float64)
    s = scores_from_features(f, torch.tensor([1.0, 0.0], dtype=torch.float64),
                             torch.tensor([0.0, 1.0], dtype=torch.float64), 1.0)
    assert float(s.p_real) == pytest.approx(0.7310585786300049, abs=1e-15)


def test_scale_invariance():
    g = torch.Generator().manual_seed(1)
    f, wr, wf = (torch.randn(16, generator=g, dtype=torch.float64) for _ in range(3))
    a = scores_from_features(f, wr, wf, 0.05)
    b = scores_from_features(7.5 * f, wr, wf, 0.05)
    torch.testing.assert_close(a.p_fake, b.p_fake, rtol=0, atol=1e-14)


def test_zero_feature_rejected():
    with pytest.raises(NumericError):
        scores_from_features(torch.zeros(4, dtype=torch.float64), torch.ones(4, dtype=torch.float64),
                             torch.ones(4, dtype=torch.float64), 0.01)


@pytest.mark.parametrize("p,expected", [(0.5, 0.6931471805599453), (1.0, 0.0), (0.9, 0.10536051565782628)])
def test_loss_values(p, expected):
    for label in (0, 1):
        assert float(loss(_scores(p, label), label)) == pytest.approx(expected, abs=1e-12)


def test_loss_floor():
    logits = torch.tensor([0.0, 200.0], dtype=torch.float64)
    pr = torch.softmax(logits, -1)
    s = ClassScores(pr[0], pr[1], logits)
    assert float(loss(s, 0)) == pytest.approx(-math.log(1e-12))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.005, 2.0))
def test_score_properties(seed, tau):
    g = torch.Generator().manual_seed(seed)
    f, wr, wf = (torch.randn(12, generator=g, dtype=torch.float64) for _ in range(3))
    s = scores_from_features(f, wr, wf, tau)
    assert abs(float(s.p_real + s.p_fake) - 1) < 1e-12
    assert 0 <= float(s.p_real) <= 1
    swapped = scores_from_features(f, wf, wr, tau)
    assert float(swapped.p_real) == float(s.p_fake) and float(swapped.p_fake) == float(s.p_real)


def test_monotone_in_fake_cosine():
    # w_real fixed orthogonal-ish; rotate w_fake toward f and watch p_fake rise
    f = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    wr = torch.tensor([0.3, 1.0, 0.0], dtype=torch.float64)
    prev = -1.0
    for t in torch.linspace(0, 1.5, 12):
        wf = torch.tensor([math.sin(t), 0.0, math.cos(t)], dtype=torch.float64)
        p = float(scores_from_features(f, wr, wf, 0.5).p_fake)
        assert p > prev
        prev = p


def test_predict_zero_prompt_equals_padded(enc, proj, rng):
    x = random_images(rng, 2)
    vp = VisualPrompt.zeros(32, 32, 6)
    cfg = TemplateConfig("T0T3")
    s = predict(enc, vp, cfg, proj, x)
    padded = merge(x, vp)
    assert torch.equal(padded[:, vp.mask], torch.zeros_like(padded[:, vp.mask]))
    assert s.p_fake.shape == (2,)


def _fd_check(enc, proj, cfg_id, n_coords, seed):
    g = torch.Generator().manual_seed(seed)
    images = random_images(g, 4)
    labels = torch.tensor([0, 1, 1, 0])
    vp = VisualPrompt.zeros(32, 32, 6)
    vp.delta = vp.masked_delta(torch.randn(32, 32, 3, generator=g, dtype=torch.float64) * 0.3)
    cfg = TemplateConfig(cfg_id)
    _, grad = grad_delta(enc, vp, cfg, proj, (images, labels))
    assert (grad[~vp.mask] == 0).all()
    border = vp.mask[..., None].expand(32, 32, 3).flatten().nonzero().flatten()
    pick = border[torch.randperm(len(border), generator=g)[:n_coords]]
    h = 1e-4
    worst = 0.0
    for i in pick.tolist():
        e = torch.zeros(32 * 32 * 3, dtype=torch.float64)
        e[i] = h
        e = e.reshape(32, 32, 3)
        with torch.no_grad():
            up = batch_loss(enc, vp, cfg, proj, images, labels, delta=vp.delta + e)
            dn = batch_loss(enc, vp, cfg, proj, images, labels, delta=vp.delta - e)
        fd = float((up - dn) / (2 * h))
        an = float(grad.flatten()[i])
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    return worst


@pytest.mark.parametrize("cfg_id", ["T0T3", "T0T1", "T2T3"])
def test_gradient_matches_finite_differences(enc, proj, cfg_id):
    assert _fd_check(enc, proj, cfg_id, 20, seed=11) < 1e-4


def test_duplicate_batch_same_gradient(enc, proj, rng):
    x = random_images(rng, 1)[0]
    vp = VisualPrompt.zeros(32, 32, 6)
    cfg = TemplateConfig("T0T3")
    _, g1 = grad_delta(enc, vp, cfg, proj, [(x, 1)])
    _, g2 = grad_delta(enc, vp, cfg, proj, [(x, 1), (x, 1)])
    torch.testing.assert_close(g1, g2, rtol=1e-12, atol=1e-15)


def test_empty_batch(enc, proj):
    with pytest.raises(InputError):
        grad_delta(enc, VisualPrompt.zeros(32, 32, 6), TemplateConfig("T0T3"), proj, [])
