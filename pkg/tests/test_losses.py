import math

import numpy as np
import pytest
import torch
from oracles import grad_rel_error, smoothed_ce_oracle, triplet_oracle

from camreid.camstyle import Discriminator
from camreid.losses import (
    LossWeights, TripletSkipCounter, adversarial_loss, baseline_loss, batch_hard_triplet,
    cmfc_loss, discriminator_objective, domain_cls_loss, gan_losses, generator_objective,
    logits_cross_entropy, masked_distance, pid_terms, smoothed_cross_entropy, smoothed_targets,
    src_probability,
)

torch.set_default_dtype(torch.float32)


def _pk_labels(p, k):
    return torch.arange(p).repeat_interleave(k)


def test_smoothed_targets_example():
    q = smoothed_targets(torch.tensor([2]), 4, 0.1)[0]
    assert torch.allclose(q, torch.tensor([0.025, 0.025, 0.925, 0.025], dtype=torch.float64))
    assert q.sum().item() == pytest.approx(1.0)


def test_smoothed_ce_example():
    p = torch.tensor([[0.1, 0.1, 0.7, 0.1]], dtype=torch.float64)
    loss = smoothed_cross_entropy(p, torch.tensor([2]), 0.1, 4).item()
    assert loss == pytest.approx(0.50262, abs=5e-6)
    assert abs(loss - smoothed_ce_oracle(p.tolist(), [2], 0.1)) < 1e-12


def test_smoothed_ce_degenerate_and_errors():
    p = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
    assert smoothed_cross_entropy(p, torch.tensor([1]), 0.0).item() == pytest.approx(0.0, abs=1e-12)
    # clamped log keeps the loss finite on a zero probability
    assert math.isfinite(smoothed_cross_entropy(p, torch.tensor([0]), 0.1).item())
    with pytest.raises(ValueError):
        smoothed_cross_entropy(p, torch.tensor([3]), 0.1)


def test_triplet_single_anchor_terms():
    emb = torch.tensor([[0.0], [0.1], [0.5], [0.55]], dtype=torch.float64)
    lab = torch.tensor([0, 0, 1, 1])
    d = torch.cdist(emb, emb)
    assert max(0.0, 0.3 + d[0, 1].item() - d[0, 2].item()) == 0.0
    emb = torch.tensor([[0.0], [0.4], [0.2], [0.3]], dtype=torch.float64)
    d = torch.cdist(emb, emb)
    assert 0.3 + d[0, 1].item() - min(d[0, 2].item(), d[0, 3].item()) == pytest.approx(0.5)
    full = batch_hard_triplet(emb, lab, 0.3, reduction="sum").item()
    assert full == pytest.approx(triplet_oracle(emb.numpy(), lab.numpy(), 0.3) * 4)


def test_triplet_matches_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        emb = rng.normal(size=(12, 5))
        lab = rng.permutation(np.repeat(np.arange(4), 3))
        got = batch_hard_triplet(torch.from_numpy(emb), torch.from_numpy(lab), 0.3).item()
        assert got == pytest.approx(triplet_oracle(emb, lab, 0.3), abs=1e-12)


def test_triplet_errors_and_reduction():
    emb = torch.randn(4, 3, dtype=torch.float64)
    with pytest.raises(ValueError):
        batch_hard_triplet(emb, torch.tensor([0, 0, 1, 2]), 0.3)  # label 1 has no positive
    with pytest.raises(ValueError):
        batch_hard_triplet(emb, torch.tensor([0, 0, 0, 0]), 0.3)  # no negative
    lab = torch.tensor([0, 0, 1, 1])
    assert batch_hard_triplet(emb, lab, 0.3, "sum").item() == pytest.approx(
        4 * batch_hard_triplet(emb, lab, 0.3, "mean").item())


def test_triplet_gradient_finite_at_duplicates():
    emb = torch.zeros(4, 3, dtype=torch.float64, requires_grad=True)
    batch_hard_triplet(emb, torch.tensor([0, 0, 1, 1]), 0.3).backward()
    assert torch.isfinite(emb.grad).all()


def test_baseline_loss_linearity():
    torch.manual_seed(0)
    logits = torch.randn(8, 4, dtype=torch.float64)
    emb = torch.randn(8, 6, dtype=torch.float64)
    y = _pk_labels(4, 2)
    ce = logits_cross_entropy(logits, y, 0.1)
    tri = batch_hard_triplet(emb, y, 0.5)
    assert baseline_loss(logits, emb, y, LossWeights(lambda_t=0.0)).item() == pytest.approx(ce.item())
    for lam in (0.5, 1.0, 2.0):
        got = baseline_loss(logits, emb, y, LossWeights(lambda_t=lam)).item()
        assert got == pytest.approx(ce.item() + lam * tri.item(), rel=1e-12)


def test_baseline_gradients_match_finite_differences():
    torch.manual_seed(1)
    logits = torch.randn(8, 4, dtype=torch.float64)
    emb = torch.randn(8, 6, dtype=torch.float64)
    y = _pk_labels(4, 2)
    w = LossWeights()
    assert grad_rel_error(lambda e: baseline_loss(logits, e, y, w), emb) < 1e-4
    assert grad_rel_error(lambda z: baseline_loss(z, emb, y, w), logits) < 1e-4


def test_adversarial_half_probability():
    half = torch.full((6,), 0.5, dtype=torch.float64)
    assert adversarial_loss(half, half).item() == pytest.approx(2 * math.log(0.5))
    assert adversarial_loss(half, half).item() == pytest.approx(-1.3863, abs=1e-4)


def test_objectives_weighted_sums():
    c = {k: torch.tensor(float(v)) for k, v in
         dict(adv=1, cls_fake=2, rec=3, idt=4, pid=5, cls_real=6).items()}
    w = LossWeights()
    assert generator_objective(c, w).item() == pytest.approx(87.0)
    assert discriminator_objective(c, w).item() == pytest.approx(-1 + 6)
    zero = LossWeights(lambda_cls=0, lambda_rec=0, lambda_idt=0, lambda_pid=0)
    assert generator_objective(c, zero).item() == 1.0
    assert discriminator_objective(c, zero).item() == -1.0


class _Identity(torch.nn.Module):
    def forward(self, x, c):
        return x


def test_identity_generator_zero_reconstruction_terms():
    torch.manual_seed(0)
    x = torch.rand(4, 3, 16, 8)
    masks = (torch.rand(4, 16, 8) > 0.5).float()
    D = Discriminator(4, (16, 8), base=4, n_layers=2)
    c_org = torch.tensor([0, 1, 2, 3])
    c_trg = torch.tensor([1, 2, 3, 0])
    out = gan_losses(x, c_org, c_trg, _Identity(), D, masks, torch.tensor([False, False, True, True]))
    assert out["rec"].item() == 0.0
    assert out["idt"].item() == 0.0
    assert out["pid_orig"].item() == 0.0
    assert all(torch.isfinite(v) for v in out.values())


def test_pid_zero_mask():
    x, gx = torch.rand(2, 3, 8, 4), torch.rand(2, 3, 8, 4)
    m = torch.zeros(2, 8, 4)
    orig, cons = pid_terms(x, gx, m, gx.flip(-1), m)
    assert orig.item() == 0.0 and cons.item() == 0.0


def test_masked_distance_normalization():
    a = torch.ones(1, 3, 4, 4)
    b = torch.zeros(1, 3, 4, 4)
    m = torch.zeros(1, 4, 4)
    m[0, :2] = 1
    # 8 masked pixels x 3 channels, each squared diff 1, divided by area 8
    assert masked_distance(a, b, m).item() == pytest.approx(3.0)
    assert masked_distance(a, b, m, normalize=False).item() == pytest.approx(math.sqrt(24), rel=1e-6)


def test_gan_losses_need_masks():
    D = Discriminator(2, (16, 8), base=4, n_layers=2)
    with pytest.raises(ValueError):
        gan_losses(torch.rand(2, 3, 16, 8), torch.tensor([0, 1]), torch.tensor([1, 0]), _Identity(), D, None)


def test_gan_component_gradients():
    torch.manual_seed(2)
    d_real = torch.rand(5, dtype=torch.float64) * 0.8 + 0.1
    d_fake = torch.rand(5, dtype=torch.float64) * 0.8 + 0.1
    assert grad_rel_error(lambda r: adversarial_loss(r, d_fake), d_real) < 1e-4
    assert grad_rel_error(lambda f: adversarial_loss(d_real, f), d_fake) < 1e-4
    logits = torch.randn(5, 4, dtype=torch.float64)
    dom = torch.tensor([0, 1, 2, 3, 1])
    assert grad_rel_error(lambda z: domain_cls_loss(z, dom), logits) < 1e-4
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    gx = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    m = (torch.rand(2, 4, 4) > 0.4).double()
    ga = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    assert grad_rel_error(lambda g: sum(pid_terms(x, g, m, ga, m.flip(-1))), gx) < 1e-4


def test_discriminator_objective_gradient_tiny_d():
    torch.manual_seed(3)
    D = Discriminator(2, (8, 8), base=2, n_layers=2).double()
    real = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    fake = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    dom = torch.tensor([0, 1])
    params = dict(D.named_parameters())

    def objective(weight):
        call = lambda x: torch.func.functional_call(D, {**params, "cls.weight": weight}, (x,))
        (rs, rc), (fs, _) = call(real), call(fake)
        c = {"adv": adversarial_loss(src_probability(rs), src_probability(fs)),
             "cls_real": domain_cls_loss(rc, dom)}
        return discriminator_objective(c, LossWeights())

    assert grad_rel_error(objective, params["cls.weight"].detach()) < 1e-4


def _cmfc_batch(seed=0):
    g = torch.Generator().manual_seed(seed)
    n = 12
    return (torch.randn(n, 5, generator=g, dtype=torch.float64), torch.randn(n, 6, generator=g, dtype=torch.float64),
            torch.randn(n, 6, generator=g, dtype=torch.float64), torch.randn(n, 6, generator=g, dtype=torch.float64),
            _pk_labels(4, 3), torch.tensor([0, 0, 1, 1, 2, 2, 3, 3, 0, 1, 2, 3]),
            torch.tensor([1, 1, 1, 0, 0, 0, 2, 2, 2, -1, -1, 0]))


def test_cmfc_loss_is_sum_of_terms():
    logits, f, fu, fl, y, yu, yl = _cmfc_batch()
    for lg, lu, ll in ((1, 1, 0.5), (2, 0, 1), (0.5, 3, 0)):
        w = LossWeights(lambda_g=lg, lambda_up=lu, lambda_lower=ll)
        total, parts = cmfc_loss(logits, f, fu, fl, y, yu, yl, w)
        keep = yl != -1
        expect = (logits_cross_entropy(logits, y, 0.1) + lg * batch_hard_triplet(f, y, 0.3)
                  + lu * batch_hard_triplet(fu, yu, 0.3) + ll * batch_hard_triplet(fl[keep], yl[keep], 0.3))
        assert total.item() == pytest.approx(expect.item(), rel=1e-12)


def test_cmfc_loss_reduces_to_global_branch():
    logits, f, fu, fl, y, yu, yl = _cmfc_batch(1)
    w = LossWeights(lambda_up=0, lambda_lower=0)
    total, parts = cmfc_loss(logits, f, fu, fl, y, yu, yl, w)
    assert set(parts) == {"ce", "tri_global"}
    assert total.item() == pytest.approx((logits_cross_entropy(logits, y, 0.1)
                                          + batch_hard_triplet(f, y, 0.3)).item())
    assert LossWeights().lambda_lower == 0.5


def test_cmfc_loss_noise_excluded_and_skips_counted():
    logits, f, fu, fl, y, yu, yl = _cmfc_batch(2)
    y_noise = y.clone()
    y_noise[:3] = -1
    total, _ = cmfc_loss(logits, f, fu, fl, y_noise, yu, yl, LossWeights(lambda_up=0, lambda_lower=0))
    keep = y_noise != -1
    # perturbing the noise rows changes nothing
    logits2, f2 = logits.clone(), f.clone()
    logits2[:3] += 10
    f2[:3] -= 7
    total2, _ = cmfc_loss(logits2, f2, fu, fl, y_noise, yu, yl, LossWeights(lambda_up=0, lambda_lower=0))
    assert total.item() == pytest.approx(total2.item())
    expect = logits_cross_entropy(logits[keep], y[keep], 0.1) + batch_hard_triplet(f[keep], y[keep], 0.3)
    assert total.item() == pytest.approx(expect.item())
    counter = TripletSkipCounter()
    all_noise = torch.full_like(yu, -1)
    cmfc_loss(logits, f, fu, fl, y, all_noise, all_noise, LossWeights(), counter)
    assert counter.skipped == {"global": 0, "up": 1, "lower": 1}


def test_cmfc_loss_gradients():
    logits, f, fu, fl, y, yu, yl = _cmfc_batch(3)
    w = LossWeights()
    assert grad_rel_error(lambda t: cmfc_loss(logits, t, fu, fl, y, yu, yl, w)[0], f) < 1e-4
    assert grad_rel_error(lambda t: cmfc_loss(logits, f, t, fl, y, yu, yl, w)[0], fu) < 1e-4
    assert grad_rel_error(lambda t: cmfc_loss(t, f, fu, fl, y, yu, yl, w)[0], logits) < 1e-4


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_pid=-1.0)
    with pytest.raises(ValueError):
        LossWeights(epsilon=1.0)
    w = LossWeights()
    assert (w.lambda_cls, w.lambda_rec, w.lambda_idt, w.lambda_pid) == (1.0, 10.0, 1.0, 10.0)
    assert (w.margin_pretrain, w.margin_finetune, w.epsilon) == (0.5, 0.3, 0.1)
