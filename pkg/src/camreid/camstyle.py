"""Camera-conditioned multi-domain translation (every source and target camera is a domain)."""

from __future__ import annotations

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from torch import Tensor, nn

from .backbone import read_checkpoint, save_checkpoint
from .data import Dataset, ImageSample
from .exceptions import TrainingError
from .losses import (LossWeights, adversarial_loss, discriminator_objective, domain_cls_loss,
                     flip_jitter_view, generator_objective, l1, pid_terms, safe_log, src_probability)
from .utils import batched, check_images, check_is_fitted, logger, to_numpy_images, to_tensor

COMPONENTS = ("adv", "cls_real", "cls_fake", "rec", "idt", "pid")


def _conv_in_relu(cin, cout, k, s, p, transpose=False):
    conv = (nn.ConvTranspose2d if transpose else nn.Conv2d)(cin, cout, k, s, p, bias=False)
    return [conv, nn.InstanceNorm2d(cout, affine=True), nn.ReLU(inplace=True)]


class ResidualBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False), nn.InstanceNorm2d(dim, affine=True), nn.ReLU(inplace=True),
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False), nn.InstanceNorm2d(dim, affine=True))

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """7x7 stem, two stride-2 downsamplings, residual blocks, two transposed upsamplings.

    Images are in [0, 1]; the domain is given as an index and broadcast as one-hot planes.
    With ``residual`` the network predicts an additive change to the input, and the last conv
    starts at zero so an untrained generator is the identity map.
    """

    def __init__(self, num_domains: int, base: int = 16, n_res: int = 3, residual: bool = True):
        super().__init__()
        self.num_domains = num_domains
        self.residual = residual
        layers = _conv_in_relu(3 + num_domains, base, 7, 1, 3)
        layers += _conv_in_relu(base, 2 * base, 4, 2, 1)
        layers += _conv_in_relu(2 * base, 4 * base, 4, 2, 1)
        layers += [ResidualBlock(4 * base) for _ in range(n_res)]
        layers += _conv_in_relu(4 * base, 2 * base, 4, 2, 1, transpose=True)
        layers += _conv_in_relu(2 * base, base, 4, 2, 1, transpose=True)
        layers += [nn.Conv2d(base, 3, 7, 1, 3, bias=False), nn.Tanh()]
        self.net = nn.Sequential(*layers)
        if residual:
            nn.init.zeros_(layers[-2].weight)

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        c = torch.as_tensor(c, dtype=torch.long)
        if c.numel() and (c.min() < 0 or c.max() >= self.num_domains):
            raise ValueError(f"domain index outside [0, {self.num_domains})")
        onehot = F.one_hot(c, self.num_domains).to(x.dtype)[:, :, None, None]
        onehot = onehot.expand(-1, -1, x.shape[2], x.shape[3])
        y = self.net(torch.cat([x * 2 - 1, onehot], dim=1))
        if self.residual:
            return (x + y).clamp(0, 1)
        return (y + 1) / 2


class Discriminator(nn.Module):
    """PatchGAN trunk; a 3x3 head gives real/fake patch logits, a full-extent head domain logits."""

    def __init__(self, num_domains: int, image_size=(64, 32), base: int = 16, n_layers: int = 4):
        super().__init__()
        layers: list[nn.Module] = []
        cin, cout = 3, base
        for _ in range(n_layers):
            layers += [nn.Conv2d(cin, cout, 4, 2, 1), nn.LeakyReLU(0.01)]
            cin, cout = cout, cout * 2
        self.trunk = nn.Sequential(*layers)
        h, w = image_size[0] // 2 ** n_layers, image_size[1] // 2 ** n_layers
        self.src = nn.Conv2d(cin, 1, 3, 1, 1, bias=False)
        self.cls = nn.Conv2d(cin, num_domains, (h, w), bias=False)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.trunk(x * 2 - 1)
        return self.src(h), self.cls(h).flatten(1)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class CamStyleGAN(BaseEstimator):
    """Single generator translating any image into the style of any camera domain.

    Domains ``[0, C_S)`` are source cameras and ``[C_S, C_S + C_T)`` target cameras. One
    iteration is one discriminator update; the generator is updated every ``n_critic``
    iterations.
    """

    def __init__(self, g_base=16, d_base=16, n_res=3, d_layers=4, residual=True, batch_size=16, n_critic=5,
                 iters=5000, g_lr=1e-4, d_lr=1e-4, beta1=0.5, beta2=0.999, lambda_cls=1.0,
                 lambda_rec=10.0, lambda_idt=1.0, lambda_pid=10.0, non_saturating=False,
                 normalize_pid=True, random_state=0, log_path=None, checkpoint_every=0,
                 checkpoint_dir=None, verbose=0):
        self.g_base = g_base
        self.d_base = d_base
        self.n_res = n_res
        self.d_layers = d_layers
        self.residual = residual
        self.batch_size = batch_size
        self.n_critic = n_critic
        self.iters = iters
        self.g_lr = g_lr
        self.d_lr = d_lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.lambda_cls = lambda_cls
        self.lambda_rec = lambda_rec
        self.lambda_idt = lambda_idt
        self.lambda_pid = lambda_pid
        self.non_saturating = non_saturating
        self.normalize_pid = normalize_pid
        self.random_state = random_state
        self.log_path = log_path
        self.checkpoint_every = checkpoint_every
        self.checkpoint_dir = checkpoint_dir
        self.verbose = verbose

    @property
    def weights(self) -> LossWeights:
        return LossWeights(lambda_cls=self.lambda_cls, lambda_rec=self.lambda_rec,
                           lambda_idt=self.lambda_idt, lambda_pid=self.lambda_pid)

    def _build(self, num_source_cameras, num_target_cameras, image_size):
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        torch.manual_seed(self.random_state)
        n = num_source_cameras + num_target_cameras
        self.num_source_cameras_ = num_source_cameras
        self.num_target_cameras_ = num_target_cameras
        self.image_size_ = tuple(image_size)
        self.G_ = Generator(n, self.g_base, self.n_res, self.residual)
        self.D_ = Discriminator(n, image_size, self.d_base, self.d_layers)

    @property
    def num_domains(self) -> int:
        return self.num_source_cameras_ + self.num_target_cameras_

    def fit(self, source: Dataset, target: Dataset):
        src = check_images(source)
        tgt = check_images(target, src.shape[1:3])
        images = np.concatenate([src, tgt])
        domains = np.concatenate([source.cameras, target.cameras + source.num_cameras])
        is_target = np.concatenate([np.zeros(len(src), bool), np.ones(len(tgt), bool)])
        masks = None
        if self.lambda_pid > 0:
            ms, mt = source.masks, target.masks
            if ms is None or mt is None:
                raise ValueError("lambda_pid > 0 needs foreground masks on every sample")
            masks = np.concatenate([ms, mt]).astype(np.float32)
        self._build(source.num_cameras, target.num_cameras, src.shape[1:3])
        self._train(images, domains, is_target, masks)
        return self

    def _train(self, images, domains, is_target, masks):
        G, D, w = self.G_, self.D_, self.weights
        g_opt = torch.optim.Adam(G.parameters(), self.g_lr, betas=(self.beta1, self.beta2))
        d_opt = torch.optim.Adam(D.parameters(), self.d_lr, betas=(self.beta1, self.beta2))
        rng = np.random.default_rng(self.random_state)
        gen = torch.Generator().manual_seed(self.random_state)
        log = open(self.log_path, "w", encoding="utf-8") if self.log_path else None
        self.d_updates_ = self.g_updates_ = 0
        self.history_ = []
        last_g: dict[str, float] = {}
        try:
            for it in range(self.iters):
                idx = rng.choice(len(images), self.batch_size, replace=len(images) < self.batch_size)
                x = to_tensor(images[idx])
                c_org = torch.from_numpy(domains[idx])
                c_trg = torch.from_numpy(rng.integers(0, self.num_domains, self.batch_size))

                with torch.no_grad():
                    fake = G(x, c_trg)
                real_src, real_cls = D(x)
                fake_src, _ = D(fake)
                comps = {"adv": adversarial_loss(src_probability(real_src), src_probability(fake_src)),
                         "cls_real": domain_cls_loss(real_cls, c_org)}
                d_loss = discriminator_objective(comps, w)
                self._check_finite(it, d_loss, comps)
                d_opt.zero_grad()
                d_loss.backward()
                d_opt.step()
                self.d_updates_ += 1
                record = {"iteration": it, "adv": comps["adv"].item(), "cls_real": comps["cls_real"].item()}

                if (it + 1) % self.n_critic == 0:
                    m = None if masks is None else torch.from_numpy(masks[idx])
                    t = torch.from_numpy(is_target[idx])
                    gc = self._generator_components(x, c_org, c_trg, m, t, gen)
                    g_loss = generator_objective(gc, w, self.non_saturating)
                    self._check_finite(it, g_loss, gc)
                    g_opt.zero_grad()
                    g_loss.backward()
                    g_opt.step()
                    self.g_updates_ += 1
                    last_g = {k: gc[k].item() for k in ("cls_fake", "rec", "idt", "pid")}
                    last_g["adv_g"] = gc["adv"].item()
                record.update({k: last_g.get(k) for k in ("cls_fake", "rec", "idt", "pid")})
                self.history_.append(record)
                if log:
                    log.write(json.dumps(record) + "\n")
                if self.verbose and it % 100 == 0:
                    logger.info("gan iter %d %s", it, record)
                if self.checkpoint_every and self.checkpoint_dir and (it + 1) % self.checkpoint_every == 0:
                    self.save(Path(self.checkpoint_dir) / f"gan_{it + 1:06d}.safetensors")
        finally:
            if log:
                log.close()
        G.eval()
        D.eval()

    def _generator_components(self, x, c_org, c_trg, masks, is_target, gen):
        G, D = self.G_, self.D_
        fake = G(x, c_trg)
        real_src, _ = D(x)
        fake_src, fake_cls = D(fake)
        p_fake = src_probability(fake_src)
        out = {
            "adv": adversarial_loss(src_probability(real_src), p_fake),
            "cls_fake": domain_cls_loss(fake_cls, c_trg),
            "rec": l1(G(fake, c_org), x) if self.lambda_rec > 0 else x.new_zeros(()),
        }
        if self.non_saturating:
            out["adv_g"] = -safe_log(p_fake).mean()
        if self.lambda_idt > 0 and bool(is_target.any()):
            xt = x[is_target]
            out["idt"] = l1(G(xt, c_org[is_target]), xt)
        else:
            out["idt"] = x.new_zeros(())
        if masks is not None and self.lambda_pid > 0:
            x_aug, m_aug = flip_jitter_view(x, masks, gen)
            g_aug = G(x_aug, c_trg).flip(-1)
            orig, cons = pid_terms(x, fake, masks, g_aug, m_aug.flip(-1), self.normalize_pid)
            out["pid"] = orig + cons
        else:
            out["pid"] = x.new_zeros(())
        return out

    def _check_finite(self, it, loss, comps):
        if torch.isfinite(loss):
            return
        snapshot = {k: v.item() for k, v in comps.items()}
        if self.checkpoint_dir:
            path = Path(self.checkpoint_dir) / f"gan_nan_{it:06d}.safetensors"
            self.save(path)
            snapshot["checkpoint"] = str(path)
        raise TrainingError(f"non-finite GAN loss at iteration {it}: {snapshot}")

    # ------------------------------------------------------------------

    def translate(self, images, domains) -> np.ndarray:
        check_is_fitted(self, "G_")
        images = check_images(images, self.image_size_)
        domains = np.broadcast_to(np.asarray(domains, dtype=np.int64), (len(images),)).copy()
        if domains.size and (domains.min() < 0 or domains.max() >= self.num_domains):
            raise ValueError(f"domain index outside [0, {self.num_domains})")
        self.G_.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(images), 64):
                y = self.G_(to_tensor(images[i:i + 64]), torch.from_numpy(np.ascontiguousarray(domains[i:i + 64])))
                out.append(to_numpy_images(y.clamp(0, 1)))
        return np.concatenate(out) if out else images.copy()

    def discriminate(self, images) -> tuple[np.ndarray, np.ndarray]:
        """Per-image real probability and domain logits."""
        check_is_fitted(self, "D_")
        self.D_.eval()
        src_map, logits = batched(self.D_, check_images(images, self.image_size_))
        return torch.sigmoid(torch.from_numpy(src_map).flatten(1).mean(1)).numpy(), logits

    def transform(self, source: Dataset, target_cameras=None) -> Dataset:
        return generate_transferred_set(source, self, target_cameras)

    def save(self, path):
        check_is_fitted(self, "G_")
        tensors = {f"G.{k}": v for k, v in self.G_.state_dict().items()}
        tensors.update({f"D.{k}": v for k, v in self.D_.state_dict().items()})
        cfg = {"params": {k: v for k, v in self.get_params().items() if k not in ("log_path", "checkpoint_dir")},
               "num_source_cameras": self.num_source_cameras_, "num_target_cameras": self.num_target_cameras_,
               "image_size": list(self.image_size_)}
        save_checkpoint(path, tensors, cfg, "gan")

    @classmethod
    def load(cls, path) -> "CamStyleGAN":
        state, cfg = read_checkpoint(path, "gan")
        est = cls(**cfg["params"])
        est._build(cfg["num_source_cameras"], cfg["num_target_cameras"], cfg["image_size"])
        est.G_.load_state_dict({k[2:]: v for k, v in state.items() if k.startswith("G.")})
        est.D_.load_state_dict({k[2:]: v for k, v in state.items() if k.startswith("D.")})
        est.G_.eval()
        est.D_.eval()
        return est


def translate(x: ImageSample, c: int, gan: CamStyleGAN) -> ImageSample:
    """Restyle one sample into domain ``c``; identity and mask are kept, camera becomes ``c``."""
    pixels = gan.translate(x.pixels[None], [c])[0]
    return replace(x, pixels=pixels, camera=int(c), sample_id=f"{x.sample_id}_to{c}")


def generate_transferred_set(source: Dataset, gan: CamStyleGAN, target_cameras=None) -> Dataset:
    """Every source image rendered in every listed target camera style.

    ``target_cameras`` are target-camera indices (``0..C_T-1``); output samples carry the
    source identity and the target camera index.
    """
    check_is_fitted(gan, "G_")
    cams = list(range(gan.num_target_cameras_)) if target_cameras is None else [int(c) for c in target_cameras]
    for c in cams:
        if not 0 <= c < gan.num_target_cameras_:
            raise ValueError(f"target camera {c} outside [0, {gan.num_target_cameras_})")
    images = source.images
    samples = []
    per_cam = {c: gan.translate(images, gan.num_source_cameras_ + c) for c in cams}
    for i, s in enumerate(source.samples):
        for c in cams:
            samples.append(replace(s, pixels=per_cam[c][i], camera=c, sample_id=f"{s.sample_id}_t{c}"))
    return Dataset(samples, source.num_identities, gan.num_target_cameras_, "transferred",
                   {**{k: v for k, v in source.meta.items() if k != "styles"}, "transferred_from": source.domain_tag})
