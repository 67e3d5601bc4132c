"""Objectives for pretraining, camera-style translation and pseudo-label finetuning.

All functions take torch tensors and return scalar tensors so they can be differentiated.
Expectations are batch means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

LOG_FLOOR = 1e-12
NOISE = -1


@dataclass
class LossWeights:
    lambda_t: float = 1.0
    lambda_cls: float = 1.0
    lambda_rec: float = 10.0
    lambda_idt: float = 1.0
    lambda_pid: float = 10.0
    lambda_g: float = 1.0
    lambda_up: float = 1.0
    lambda_lower: float = 0.5
    lambda_erase: float = 1.0
    margin_pretrain: float = 0.5
    margin_finetune: float = 0.3
    epsilon: float = 0.1
    triplet_reduction: str = "mean"

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if isinstance(v, float) and v < 0:
                raise ValueError(f"{k} must be nonnegative, got {v}")
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.triplet_reduction not in ("mean", "sum"):
            raise ValueError("triplet_reduction must be 'mean' or 'sum'")


def safe_log(p: Tensor) -> Tensor:
    return torch.log(p.clamp_min(LOG_FLOOR))


def smoothed_targets(labels: Tensor, num_classes: int, epsilon: float) -> Tensor:
    """Rows with 1 - eps + eps/M on the label and eps/M elsewhere."""
    labels = torch.as_tensor(labels)
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    q = torch.full((labels.shape[0], num_classes), epsilon / num_classes, dtype=torch.float64)
    q[torch.arange(labels.shape[0]), labels] += 1.0 - epsilon
    return q


def smoothed_cross_entropy(probs: Tensor, labels: Tensor, epsilon: float = 0.1,
                           num_classes: int | None = None) -> Tensor:
    num_classes = probs.shape[1] if num_classes is None else num_classes
    if probs.shape[1] != num_classes:
        raise ValueError(f"probs have {probs.shape[1]} columns, expected {num_classes}")
    q = smoothed_targets(labels, num_classes, epsilon).to(probs.dtype)
    return -(q * safe_log(probs)).sum(1).mean()


def logits_cross_entropy(logits: Tensor, labels: Tensor, epsilon: float = 0.1) -> Tensor:
    return smoothed_cross_entropy(F.softmax(logits, dim=1), labels, epsilon)


def euclidean_distances(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise Euclidean distances with a zero (not NaN) gradient at coincident points."""
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def batch_hard_triplet(embeddings: Tensor, labels: Tensor, margin: float,
                       reduction: str = "mean") -> Tensor:
    """Per anchor: farthest same-label vs nearest other-label sample, hinged at ``margin``."""
    labels = torch.as_tensor(labels)
    n = labels.shape[0]
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(n, dtype=torch.bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not bool(pos_mask.any(1).all()):
        raise ValueError("every anchor needs at least one positive in the batch")
    if not bool(neg_mask.any(1).all()):
        raise ValueError("batch needs at least two labels")
    d = euclidean_distances(embeddings, embeddings)
    hardest_pos = torch.where(pos_mask, d, torch.full_like(d, -torch.inf)).amax(1)
    hardest_neg = torch.where(neg_mask, d, torch.full_like(d, torch.inf)).amin(1)
    per_anchor = F.relu(margin + hardest_pos - hardest_neg)
    return per_anchor.mean() if reduction == "mean" else per_anchor.sum()


def baseline_loss(logits: Tensor, embeddings: Tensor, labels: Tensor, w: LossWeights,
                  margin: float | None = None) -> Tensor:
    margin = w.margin_pretrain if margin is None else margin
    ce = logits_cross_entropy(logits, labels, w.epsilon)
    if w.lambda_t == 0:
        return ce
    return ce + w.lambda_t * batch_hard_triplet(embeddings, labels, margin, w.triplet_reduction)


# ---------------------------------------------------------------------------
# camera-style GAN


def adversarial_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """E[log D(x)] + E[log(1 - D(G(x, c)))] on per-image real probabilities."""
    return safe_log(d_real).mean() + safe_log(1.0 - d_fake).mean()


def domain_cls_loss(logits: Tensor, domains: Tensor) -> Tensor:
    probs = F.softmax(logits, dim=1)
    return -safe_log(probs.gather(1, domains.view(-1, 1))).mean()


def l1(a: Tensor, b: Tensor) -> Tensor:
    return (a - b).abs().mean()


def masked_distance(a: Tensor, b: Tensor, mask: Tensor, normalize: bool = True) -> Tensor:
    """Per-image ||(a - b) * mask||; squared and divided by mask area when ``normalize``."""
    m = mask.to(a.dtype)
    if m.ndim == 3:
        m = m[:, None]
    sq = (((a - b) * m) ** 2).flatten(1).sum(1)
    if normalize:
        return sq / m.flatten(1).sum(1).clamp_min(1.0)
    return torch.sqrt(sq + LOG_FLOOR)


def pid_terms(x: Tensor, gx: Tensor, mask: Tensor, gx_aug: Tensor | None = None,
              mask_aug: Tensor | None = None, normalize: bool = True) -> tuple[Tensor, Tensor]:
    """Foreground-preservation term and augmented-view consistency term.

    ``gx_aug``/``mask_aug`` must already be mapped back to the geometry of ``x``.
    """
    orig = masked_distance(gx, x, mask, normalize).mean()
    if gx_aug is None:
        return orig, torch.zeros((), dtype=x.dtype)
    m = mask.to(x.dtype)
    ma = mask_aug.to(x.dtype)
    if m.ndim == 3:
        m, ma = m[:, None], ma[:, None]
    diff = gx * m - gx_aug * ma
    sq = (diff ** 2).flatten(1).sum(1)
    if normalize:
        cons = sq / torch.maximum(m.flatten(1).sum(1), ma.flatten(1).sum(1)).clamp_min(1.0)
    else:
        cons = torch.sqrt(sq + LOG_FLOOR)
    return orig, cons.mean()


def flip_jitter_view(x: Tensor, mask: Tensor, generator: torch.Generator | None = None,
                     strength: float = 0.1) -> tuple[Tensor, Tensor]:
    """Augmented view: horizontal flip and a per-image brightness scale; mask flipped alike."""
    scale = 1.0 + (torch.rand(x.shape[0], 1, 1, 1, generator=generator, dtype=x.dtype) * 2 - 1) * strength
    return (x.flip(-1) * scale).clamp(0, 1), mask.flip(-1)


def src_probability(src_map: Tensor) -> Tensor:
    """One real/fake probability per image from a patch logit map."""
    return torch.sigmoid(src_map.flatten(1).mean(1))


def gan_losses(x: Tensor, c_org: Tensor, c_trg: Tensor, G, D, masks: Tensor | None = None,
               is_target: Tensor | None = None, need_pid: bool = True, aug_generator=None,
               normalize_pid: bool = True) -> dict[str, Tensor]:
    """All six translation components on one batch.

    ``G(x, c)`` takes domain indices; ``D(x)`` returns (patch logits, domain logits).
    """
    fake = G(x, c_trg)
    real_src, real_cls = D(x)
    fake_src, fake_cls = D(fake)
    out = {
        "adv": adversarial_loss(src_probability(real_src), src_probability(fake_src)),
        "cls_real": domain_cls_loss(real_cls, c_org),
        "cls_fake": domain_cls_loss(fake_cls, c_trg),
        "rec": l1(G(fake, c_org), x),
    }
    if is_target is not None and bool(is_target.any()):
        xt = x[is_target]
        out["idt"] = l1(G(xt, c_org[is_target]), xt)
    else:
        out["idt"] = torch.zeros((), dtype=x.dtype)
    if need_pid:
        if masks is None:
            raise ValueError("person-identity term needs foreground masks")
        x_aug, m_aug = flip_jitter_view(x, masks, aug_generator)
        g_aug = G(x_aug, c_trg).flip(-1)
        orig, cons = pid_terms(x, fake, masks, g_aug, m_aug.flip(-1), normalize_pid)
        out["pid_orig"], out["pid_cons"] = orig, cons
        out["pid"] = orig + cons
    else:
        z = torch.zeros((), dtype=x.dtype)
        out["pid_orig"] = out["pid_cons"] = out["pid"] = z
    return out


def generator_objective(c: dict, w: LossWeights, non_saturating: bool = False) -> Tensor:
    adv = c["adv_g"] if non_saturating and "adv_g" in c else c["adv"]
    return (adv + w.lambda_cls * c["cls_fake"] + w.lambda_rec * c["rec"]
            + w.lambda_idt * c["idt"] + w.lambda_pid * c["pid"])


def discriminator_objective(c: dict, w: LossWeights) -> Tensor:
    return -c["adv"] + w.lambda_cls * c["cls_real"]


# ---------------------------------------------------------------------------
# collaborative finetuning


@dataclass
class TripletSkipCounter:
    skipped: dict = field(default_factory=lambda: {"global": 0, "up": 0, "lower": 0})


def _branch_triplet(feats: Tensor, labels: Tensor, margin: float, reduction: str):
    """Triplet over non-noise samples whose label occurs at least twice; None if impossible."""
    labels = torch.as_tensor(labels)
    keep = labels != NOISE
    if keep.any():
        counts = torch.bincount(labels[keep])
        keep = keep & (counts[labels.clamp_min(0)] >= 2)
    if keep.sum() < 2 or torch.unique(labels[keep]).numel() < 2:
        return None
    return batch_hard_triplet(feats[keep], labels[keep], margin, reduction)


def cmfc_loss(logits: Tensor | None, feat: Tensor, feat_up: Tensor, feat_lower: Tensor,
              y: Tensor, y_up: Tensor, y_lower: Tensor, w: LossWeights,
              counter: TripletSkipCounter | None = None) -> tuple[Tensor, dict[str, float]]:
    """Cross-entropy + weighted global/upper/lower batch-hard triplet terms.

    NOISE samples drop out of every term of the branch that marked them. ``logits`` may be
    None when the global branch is disabled.
    """
    m, red = w.margin_finetune, w.triplet_reduction
    y, y_up, y_lower = (torch.as_tensor(t) for t in (y, y_up, y_lower))
    zero = feat.sum() * 0.0
    total = zero
    parts: dict[str, float] = {}
    if logits is not None:
        keep = y != NOISE
        ce = logits_cross_entropy(logits[keep], y[keep], w.epsilon) if keep.any() else zero
        total = total + ce
        parts["ce"] = ce.item()
    for name, lam, f, lab in (("global", w.lambda_g, feat, y), ("up", w.lambda_up, feat_up, y_up),
                              ("lower", w.lambda_lower, feat_lower, y_lower)):
        if lam == 0 or (name == "global" and logits is None):
            continue
        t = _branch_triplet(f, lab, m, red)
        if t is None:
            if counter is not None:
                counter.skipped[name] += 1
            t = zero
        total = total + lam * t
        parts[f"tri_{name}"] = t.item()
    return total, parts
