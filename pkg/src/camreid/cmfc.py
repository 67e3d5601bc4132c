"""Collaborative multiple-feature clustering on the unlabeled target set.

Two re-ID networks start from the same checkpoint. Every epoch each one clusters the target
images (global descriptor, upper-half and lower-half pooled parts) and hands the resulting
pseudo-labels to the *other* network, whose classifier is re-initialized from the cluster
means before a round of PK-batch finetuning.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .backbone import ReIDNet, load_reid, reinit_classifier, save_reid
from .cluster import NOISE, ClusterResult, dbscan, select_eps
from .data import AugmentPolicy, Dataset, augment_batch, erase_rectangle, pk_indices
from .evaluate import MetricsReport
from .exceptions import TrainingError
from .losses import LossWeights, TripletSkipCounter, cmfc_loss, l1
from .reid import evaluate_model, make_optimizer
from .utils import batched, check_images, check_is_fitted, child_seed, logger, to_tensor

BRANCHES = ("global", "up", "lower")


@dataclass
class PseudoLabelSet:
    y: np.ndarray
    y_up: np.ndarray
    y_lower: np.ndarray
    epoch: int = 0
    producer: str = ""
    clusters: dict[str, ClusterResult] = field(default_factory=dict)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.y, self.y_up, self.y_lower):
            h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        return h.hexdigest()

    def num_clusters(self, branch: str) -> int:
        r = self.clusters.get(branch)
        return 0 if r is None else r.num_clusters


def extract_features(net: ReIDNet, images: np.ndarray, batch_size: int = 128, normalize: bool = False):
    """(descriptor, upper pooled, lower pooled) for every image, inference mode.

    ``normalize`` rescales each vector to unit L2 norm.
    """
    net.eval()

    def fn(x):
        fmap = net.encode(x)
        up, low = net.part_features(fmap)
        out = (net.bottleneck(net.pool_global(fmap)), up, low)
        if normalize:
            out = tuple(torch.nn.functional.normalize(t, dim=1) for t in out)
        return out

    return batched(fn, images, batch_size)


def cluster_branch(feats: np.ndarray, percentile: float, min_pts: int,
                   fallback_eps: float | None = None) -> ClusterResult:
    try:
        eps = select_eps(feats, percentile)
    except ValueError:
        if fallback_eps is None:
            raise
        eps = fallback_eps
    return dbscan(feats, eps, min_pts)


def assign_pseudo_labels(images, producer: ReIDNet, eps_percentile: float = 2.0, min_pts: int = 4,
                         fallback_eps: float | None = None, branches=BRANCHES, epoch: int = 0,
                         producer_name: str = "", normalize: bool = True) -> PseudoLabelSet:
    """Independent DBSCAN runs on the producer's global, upper and lower features.

    Branches not listed (or yielding no cluster) come back all-NOISE. With ``normalize`` the
    embeddings are L2-normalized first, which also bounds the norm of the cluster means.
    """
    images = check_images(images)
    feats = dict(zip(BRANCHES, extract_features(producer, images, normalize=normalize)))
    labels, clusters = {}, {}
    for b in BRANCHES:
        if b in branches:
            res = cluster_branch(feats[b].astype(np.float64), eps_percentile, min_pts, fallback_eps)
            clusters[b] = res
            labels[b] = res.assignments
        else:
            labels[b] = np.full(len(images), NOISE, dtype=np.int64)
    return PseudoLabelSet(labels["global"], labels["up"], labels["lower"], epoch, producer_name, clusters)


# ---------------------------------------------------------------------------
# adversarial erasing


def activation_peak(fmap: torch.Tensor, image_size) -> tuple[int, int]:
    """Argmax (row, col) of the channel-summed map, nearest-upsampled to image size.

    Ties resolve to the first position in row-major order.
    """
    act = fmap.sum(0)
    h, w = image_size
    fh, fw = act.shape
    up = act.repeat_interleave(h // fh, 0).repeat_interleave(w // fw, 1)
    flat = int(torch.argmax(up.flatten()))  # first occurrence on ties
    return flat // w, flat % w


def centered_rectangle(peak, image_size, area, rng, aspect: float = 0.3):
    """Random-size rectangle centered on ``peak``, clipped to the image: (top, left, bottom, right)."""
    h, w = image_size
    rect = erase_rectangle(h, w, area, aspect, rng)
    eh, ew = (rect[2], rect[3]) if rect else (max(1, h // 3), max(1, w // 3))
    py, px = peak
    top, left = py - eh // 2, px - ew // 2
    return max(0, top), max(0, left), min(h, top + eh), min(w, left + ew)


def erase_at_peaks(x: torch.Tensor, fmap: torch.Tensor, rng, area=(0.1, 0.3), fill=None):
    """Fill a rectangle around each image's activation peak with ``fill`` (mean color by default)."""
    n, _, h, w = x.shape
    fill = x.mean(dim=(0, 2, 3)) if fill is None else torch.as_tensor(fill, dtype=x.dtype)
    erased = x.clone()
    rects = []
    for i in range(n):
        peak = activation_peak(fmap[i].detach(), (h, w))
        t, l, b, r = centered_rectangle(peak, (h, w), area, rng)
        erased[i, :, t:b, l:r] = fill.view(3, 1, 1)
        rects.append((t, l, b, r, peak))
    return erased, rects


def erase_and_reconstruct(image: torch.Tensor, fmap: torch.Tensor, reconstruct, rng,
                          area=(0.1, 0.3), fill=None):
    """Erase around the activation peak of one image and reconstruct the original.

    ``reconstruct`` maps an erased (1, 3, H, W) batch to its reconstruction. Returns the erased
    image, the reconstruction and the L1 reconstruction loss against the original.
    """
    x = image[None] if image.ndim == 3 else image
    f = fmap[None] if fmap.ndim == 3 else fmap
    erased, _ = erase_at_peaks(x, f, rng, area, fill)
    recon = reconstruct(erased)
    return erased[0], recon[0], l1(recon, x)


# ---------------------------------------------------------------------------


def _as_net(init) -> ReIDNet:
    if isinstance(init, ReIDNet):
        return copy.deepcopy(init)
    if hasattr(init, "net_"):
        return copy.deepcopy(init.net_)
    net, _ = load_reid(init)
    return net


def param_checksum(net: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(net.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


class CollaborativeClustering(BaseEstimator, TransformerMixin):
    """Stage-III pseudo-label finetuning of a pair of re-ID networks.

    ``branches`` selects the active pseudo-label branches: ``"both"`` (global + partial),
    ``"global"`` or ``"partial"``. With ``collaborative=False`` each network trains on its own
    labels. ``share_rng=True`` gives both networks the same random stream.
    """

    def __init__(self, epochs=40, iters_per_epoch=None, P=16, K=4, lr=3.5e-4, weight_decay=5e-4,
                 margin=0.3, epsilon=0.1, lambda_g=1.0, lambda_up=1.0, lambda_lower=0.5,
                 lambda_erase=1.0, erase_area=(0.1, 0.3), eps_percentile=2.0, min_pts=4,
                 fallback_eps=None, normalize_features=True, pooling=None, branches="both", collaborative=True,
                 share_rng=False, augment=("crop", "flip", "erase"), eval_model="A",
                 random_state=0, log_path=None, checkpoint_every=0, checkpoint_dir=None, verbose=0):
        self.epochs = epochs
        self.iters_per_epoch = iters_per_epoch
        self.P = P
        self.K = K
        self.lr = lr
        self.weight_decay = weight_decay
        self.margin = margin
        self.epsilon = epsilon
        self.lambda_g = lambda_g
        self.lambda_up = lambda_up
        self.lambda_lower = lambda_lower
        self.lambda_erase = lambda_erase
        self.erase_area = erase_area
        self.eps_percentile = eps_percentile
        self.min_pts = min_pts
        self.fallback_eps = fallback_eps
        self.normalize_features = normalize_features
        self.pooling = pooling
        self.branches = branches
        self.collaborative = collaborative
        self.share_rng = share_rng
        self.augment = augment
        self.eval_model = eval_model
        self.random_state = random_state
        self.log_path = log_path
        self.checkpoint_every = checkpoint_every
        self.checkpoint_dir = checkpoint_dir
        self.verbose = verbose

    @property
    def active_branches(self) -> tuple[str, ...]:
        return {"both": BRANCHES, "global": ("global",), "partial": ("up", "lower")}[self.branches]

    @property
    def weights(self) -> LossWeights:
        use_g = "global" in self.active_branches
        use_p = "up" in self.active_branches
        return LossWeights(lambda_g=self.lambda_g if use_g else 0.0,
                           lambda_up=self.lambda_up if use_p else 0.0,
                           lambda_lower=self.lambda_lower if use_p else 0.0,
                           lambda_erase=self.lambda_erase if use_g else 0.0,
                           margin_finetune=self.margin, epsilon=self.epsilon)

    def fit(self, X: Dataset, y=None, init=None):
        """Finetune on unlabeled ``X``; ``init`` is a ReIDNet, fitted ReIDModel or checkpoint path.

        Identity labels on ``X`` are never read.
        """
        if init is None:
            raise ValueError("CollaborativeClustering.fit needs an initial model (init=...)")
        images = check_images(X)
        base = _as_net(init)
        if self.pooling is not None:
            base.config["pooling"] = self.pooling
        self.nets_ = {"A": base, "B": copy.deepcopy(base)}
        seeds = {"A": child_seed(self.random_state, 0), "B": child_seed(self.random_state, 0 if self.share_rng else 1)}
        self.rngs_ = {k: np.random.default_rng(s) for k, s in seeds.items()}
        self.torch_seeds_ = seeds
        self.history_, self.label_history_, self.checksums_ = [], [], []
        self.skips_ = TripletSkipCounter()
        log = open(self.log_path, "w", encoding="utf-8") if self.log_path else None
        try:
            for epoch in range(self.epochs):
                record = self._epoch(images, epoch)
                self.history_.append(record)
                if log:
                    log.write(json.dumps(record) + "\n")
                    log.flush()
                if self.verbose:
                    logger.info("cmfc epoch %d %s", epoch, record)
                if self.checkpoint_every and self.checkpoint_dir and (epoch + 1) % self.checkpoint_every == 0:
                    self.save(f"{self.checkpoint_dir}/cmfc_A_{epoch + 1:03d}.safetensors", "A")
        finally:
            if log:
                log.close()
        for net in self.nets_.values():
            net.eval()
        return self

    def _labels(self, images, epoch):
        kw = dict(eps_percentile=self.eps_percentile, min_pts=self.min_pts, fallback_eps=self.fallback_eps,
                  branches=self.active_branches, epoch=epoch, normalize=self.normalize_features)
        own = {k: assign_pseudo_labels(images, net, producer_name=k, **kw) for k, net in self.nets_.items()}
        if self.collaborative:
            return {"A": own["B"], "B": own["A"]}
        return own

    def _epoch(self, images, epoch):
        labels = self._labels(images, epoch)
        key = "global" if "global" in self.active_branches else "up"
        for name, ls in labels.items():
            if all(ls.num_clusters(b) == 0 for b in self.active_branches):
                raise TrainingError(f"epoch {epoch}: every branch of model {name}'s labels is NOISE; "
                                    f"eps percentile {self.eps_percentile} / min_pts {self.min_pts} misconfigured")
        record = {"epoch": epoch}
        for name in ("A", "B"):
            ls = labels[name]
            self.label_history_.append((epoch, name, ls.producer, ls.checksum()))
            stats = self._train_one(name, images, ls, key)
            record.update({f"{name}_{k}": v for k, v in stats.items()})
        ls = labels["A"]
        record.update({
            "clusters_global": ls.num_clusters("global"), "clusters_up": ls.num_clusters("up"),
            "clusters_lower": ls.num_clusters("lower"),
            "noise_fraction": float(np.mean((ls.y if key == "global" else ls.y_up) == NOISE)),
        })
        self.checksums_.append({k: param_checksum(n) for k, n in self.nets_.items()})
        return record

    def _train_one(self, name, images, ls: PseudoLabelSet, key):
        net, rng = self.nets_[name], self.rngs_[name]
        sampler_labels = ls.y if key == "global" else ls.y_up
        n_clusters = ls.num_clusters(key)
        if n_clusters < 2:
            return {"skipped": 1}
        w = self.weights
        use_global = "global" in self.active_branches
        if use_global:
            net.replace_classifier(reinit_classifier(torch.from_numpy(ls.clusters["global"].means).float()))
        torch.manual_seed(child_seed(self.torch_seeds_[name], ls.epoch))
        opt = make_optimizer(net, self.lr, self.weight_decay)
        policy = AugmentPolicy.from_names(self.augment)
        P = min(self.P, n_clusters)
        n_train = int((sampler_labels != NOISE).sum())
        iters = self.iters_per_epoch or max(1, math.ceil(n_train / (P * self.K)))
        totals: dict[str, float] = {}
        net.train()
        for _ in range(iters):
            idx = pk_indices(sampler_labels, P, self.K, rng)
            x = to_tensor(augment_batch(images[idx], policy, rng))
            fmap = net.encode(x)
            feat = net.pool_global(fmap)
            up, low = net.part_features(fmap)
            logits = net.classifier(net.bottleneck(net.classifier_input(fmap))) if use_global else None
            yb, yu, yl = (torch.from_numpy(a[idx]) for a in (ls.y, ls.y_up, ls.y_lower))
            loss, parts = cmfc_loss(logits, feat, up, low, yb, yu, yl, w, self.skips_)
            if w.lambda_erase > 0:
                erased, _ = erase_at_peaks(x, fmap.detach(), rng, self.erase_area)
                rec = l1(net.decoder(net.encode(erased)), x)
                loss = loss + w.lambda_erase * rec
                parts["erase_rec"] = rec.item()
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss for model {name} at epoch {ls.epoch}: {parts}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            parts["total"] = loss.item()
            for k, v in parts.items():
                totals[k] = totals.get(k, 0.0) + v / iters
        net.eval()
        return totals

    # ------------------------------------------------------------------

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "nets_")
        images = check_images(X)
        if self.eval_model == "ensemble":
            feats = [batched(n.descriptor, images) for n in self._eval_nets()]
            return np.mean(feats, axis=0)
        return batched(self.nets_[self.eval_model].descriptor, images)

    def _eval_nets(self):
        for n in self.nets_.values():
            n.eval()
            yield n

    def evaluate(self, query: Dataset, gallery: Dataset) -> MetricsReport:
        for n in self.nets_.values():
            n.eval()
        return evaluate_model(self.transform, query, gallery)

    def score(self, query: Dataset, gallery: Dataset) -> float:
        return self.evaluate(query, gallery).rank1

    def save(self, path, which: str = "A"):
        check_is_fitted(self, "nets_")
        save_reid(self.nets_[which], path, {"stage": "cmfc", "model": which})
