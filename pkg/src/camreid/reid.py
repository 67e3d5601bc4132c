"""Supervised re-ID training (source pretraining and transferred-set finetuning)."""

from __future__ import annotations

import math

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .backbone import ReIDNet, load_reid, save_reid
from .data import AugmentPolicy, Dataset, augment_batch, pk_indices
from .evaluate import MetricsReport, cmc_map, pairwise_euclidean
from .exceptions import TrainingError
from .losses import LossWeights, baseline_loss
from .utils import batched, check_images, check_is_fitted, logger, to_tensor


def make_optimizer(net: torch.nn.Module, lr: float, weight_decay: float):
    params = [p for p in net.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)


def extract_descriptors(net: ReIDNet, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    net.eval()
    return batched(net.descriptor, images, batch_size)


def evaluate_model(transform, query: Dataset, gallery: Dataset, protocol="cross-camera") -> MetricsReport:
    dist = pairwise_euclidean(transform(query), transform(gallery))
    return cmc_map(dist, query.identities, query.cameras, gallery.identities, gallery.cameras,
                   protocol=protocol)


class ReIDModel(BaseEstimator, TransformerMixin):
    """Re-ID encoder trained with smoothed cross-entropy + batch-hard triplet on PK batches.

    ``transform`` returns the BN-bottleneck descriptors. With ``warm_start=True`` a second
    ``fit`` continues from the current weights (used to finetune on transferred images); the
    classifier is replaced when the identity count changes.
    """

    def __init__(self, widths=(32, 64, 96, 128), pooling="max", classifier_pooling="avg",
                 epochs=80, iters_per_epoch=None, P=16, K=4, lr=3.5e-4, weight_decay=5e-4,
                 milestones=(40, 70), margin=0.5, epsilon=0.1, lambda_t=1.0,
                 augment=("crop", "flip"), warm_start=False, random_state=0, verbose=0):
        self.widths = widths
        self.pooling = pooling
        self.classifier_pooling = classifier_pooling
        self.epochs = epochs
        self.iters_per_epoch = iters_per_epoch
        self.P = P
        self.K = K
        self.lr = lr
        self.weight_decay = weight_decay
        self.milestones = milestones
        self.margin = margin
        self.epsilon = epsilon
        self.lambda_t = lambda_t
        self.augment = augment
        self.warm_start = warm_start
        self.random_state = random_state
        self.verbose = verbose

    def _init_net(self, num_classes, size):
        torch.manual_seed(self.random_state)
        return ReIDNet(self.widths, num_classes, self.pooling, self.classifier_pooling, size)

    def fit(self, X: Dataset, y=None):
        images = check_images(X)
        labels = X.identities if y is None else np.asarray(y)
        if (labels < 0).any():
            raise ValueError("supervised training needs every sample labeled")
        num_classes = int(labels.max()) + 1
        size = images.shape[1:3]
        if self.warm_start and hasattr(self, "net_"):
            if self.net_.classifier.num_classes != num_classes:
                from .backbone import ClassifierHead
                torch.manual_seed(self.random_state)
                self.net_.replace_classifier(ClassifierHead(self.net_.dim, num_classes))
        else:
            self.net_ = self._init_net(num_classes, size)
        net = self.net_
        rng = np.random.default_rng(self.random_state)
        torch.manual_seed(self.random_state)
        P = min(self.P, len(np.unique(labels)))
        iters = self.iters_per_epoch or math.ceil(len(images) / (P * self.K))
        opt = make_optimizer(net, self.lr, self.weight_decay)
        sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(self.milestones), 0.1)
        weights = LossWeights(lambda_t=self.lambda_t, epsilon=self.epsilon, margin_pretrain=self.margin)
        policy = AugmentPolicy.from_names(self.augment)
        self.history_ = []
        for epoch in range(self.epochs):
            net.train()
            total = 0.0
            for _ in range(iters):
                idx = pk_indices(labels, P, self.K, rng)
                x = to_tensor(augment_batch(images[idx], policy, rng))
                yb = torch.from_numpy(labels[idx])
                out = net(x)
                loss = baseline_loss(out["logits"], out["feat"], yb, weights)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item()
            sched.step()
            self.history_.append({"epoch": epoch, "loss": total / iters})
            if self.verbose:
                logger.info("epoch %d loss %.4f", epoch, total / iters)
        net.eval()
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self)
        return extract_descriptors(self.net_, check_images(X, self.net_.config["input_size"]))

    def score(self, query: Dataset, gallery: Dataset) -> float:
        return self.evaluate(query, gallery).rank1

    def evaluate(self, query: Dataset, gallery: Dataset) -> MetricsReport:
        return evaluate_model(self.transform, query, gallery)

    def save(self, path):
        check_is_fitted(self)
        save_reid(self.net_, path, {"params": {k: _jsonable(v) for k, v in self.get_params().items()}})

    @classmethod
    def load(cls, path) -> "ReIDModel":
        net, cfg = load_reid(path)
        params = cfg.get("params", {})
        est = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in params.items()})
        est.net_ = net
        return est


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v
