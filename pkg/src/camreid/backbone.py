"""Conv encoder, pooling/part operators, BN-bottleneck descriptor and classifier head."""

from __future__ import annotations

import json
import os
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save
from torch import Tensor, nn

CHECKPOINT_VERSION = "1"


def global_max_pool(fmap: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) per-channel max."""
    return fmap.amax(dim=(-2, -1))


def global_avg_pool(fmap: Tensor) -> Tensor:
    return fmap.mean(dim=(-2, -1))


def pool(fmap: Tensor, mode: str) -> Tensor:
    if mode == "max":
        return global_max_pool(fmap)
    if mode == "avg":
        return global_avg_pool(fmap)
    raise ValueError(f"unknown pooling {mode!r}")


def split_parts(fmap: Tensor) -> tuple[Tensor, Tensor]:
    """Split rows of an (N, C, H, W) map into upper [0, H/2) and lower [H/2, H) halves."""
    h = fmap.shape[-2]
    if h % 2:
        raise ValueError(f"feature map height {h} is odd")
    return fmap[..., : h // 2, :], fmap[..., h // 2:, :]


def _block(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, 1, 1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    """Four conv blocks; the first three halve the resolution, so 64x32 -> 8x4."""

    def __init__(self, widths: Sequence[int] = (32, 64, 96, 128), in_channels: int = 3):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("encoder expects four block widths")
        strides = (2, 2, 2, 1)
        chans = (in_channels, *widths)
        self.blocks = nn.Sequential(*[_block(chans[i], chans[i + 1], strides[i]) for i in range(4)])
        self.out_channels = widths[-1]

    def forward(self, x: Tensor) -> Tensor:
        return self.blocks(x)


class Decoder(nn.Module):
    """Mirror of the encoder with transposed-conv upsampling back to image resolution."""

    def __init__(self, widths: Sequence[int] = (32, 64, 96, 128), out_channels: int = 3):
        super().__init__()
        w = list(widths)[::-1]  # 128, 96, 64, 32
        layers: list[nn.Module] = [nn.Conv2d(w[0], w[1], 3, 1, 1), nn.ReLU(inplace=True)]
        for cin, cout in ((w[1], w[2]), (w[2], w[3]), (w[3], w[3])):
            layers += [nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.ReLU(inplace=True)]
        layers += [nn.Conv2d(w[3], out_channels, 3, 1, 1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, fmap: Tensor) -> Tensor:
        return self.net(fmap)


class ClassifierHead(nn.Module):
    """Bias-free linear classifier; row c is the weight vector of class c."""

    def __init__(self, in_features: int, num_classes: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, in_features))
        nn.init.normal_(self.weight, std=0.001)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, e: Tensor) -> Tensor:
        if e.shape[-1] != self.weight.shape[1]:
            raise ValueError(f"embedding length {e.shape[-1]} != head width {self.weight.shape[1]}")
        return e @ self.weight.t()


def reinit_classifier(means) -> ClassifierHead:
    """Head whose rows are exactly the given cluster means."""
    means = torch.as_tensor(np.asarray(means) if not isinstance(means, Tensor) else means)
    if means.ndim != 2 or means.shape[0] == 0:
        raise ValueError("reinit_classifier needs a nonempty (num_clusters, dim) array of means")
    head = ClassifierHead(means.shape[1], means.shape[0]).to(means.dtype)
    with torch.no_grad():
        head.weight.copy_(means)
    return head


class ReIDNet(nn.Module):
    """Encoder + pooling + BN bottleneck + classifier + reconstruction decoder.

    Triplet terms use the pooled vector (``pooling``); the classifier consumes
    BN(pool(F, classifier_pooling)); the descriptor is BN(pool(F, pooling)) with the same
    BN module in inference mode.
    """

    def __init__(self, widths=(32, 64, 96, 128), num_classes: int = 1, pooling: str = "max",
                 classifier_pooling: str = "avg", input_size=(64, 32)):
        super().__init__()
        self.config = {
            "widths": list(widths), "num_classes": int(num_classes), "pooling": pooling,
            "classifier_pooling": classifier_pooling, "input_size": list(input_size),
        }
        self.encoder = Encoder(widths)
        dim = self.encoder.out_channels
        self.bottleneck = nn.BatchNorm1d(dim)
        self.bottleneck.bias.requires_grad_(False)
        self.classifier = ClassifierHead(dim, num_classes)
        self.decoder = Decoder(widths)

    @property
    def dim(self) -> int:
        return self.encoder.out_channels

    def _check(self, x: Tensor):
        h, w = self.config["input_size"]
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != (h, w):
            raise ValueError(f"expected (N, 3, {h}, {w}) input, got {tuple(x.shape)}")

    def encode(self, x: Tensor) -> Tensor:
        self._check(x)
        return self.encoder(x)

    def pool_global(self, fmap: Tensor) -> Tensor:
        return pool(fmap, self.config["pooling"])

    def classifier_input(self, fmap: Tensor) -> Tensor:
        return pool(fmap, self.config["classifier_pooling"])

    def descriptor(self, x: Tensor) -> Tensor:
        return self.bottleneck(self.pool_global(self.encode(x)))

    def part_features(self, fmap: Tensor) -> tuple[Tensor, Tensor]:
        up, low = split_parts(fmap)
        mode = self.config["pooling"]
        return pool(up, mode), pool(low, mode)

    def forward(self, x: Tensor) -> dict[str, Tensor]:
        fmap = self.encode(x)
        feat = self.pool_global(fmap)
        bn = self.bottleneck(self.classifier_input(fmap))
        up, low = self.part_features(fmap)
        return {"fmap": fmap, "feat": feat, "bn": bn, "logits": self.classifier(bn), "up": up, "lower": low}

    def replace_classifier(self, head: ClassifierHead):
        self.classifier = head.to(next(self.parameters()).dtype)
        self.config["num_classes"] = head.num_classes


# ---------------------------------------------------------------------------
# checkpoints: safetensors container, config echo and version in the metadata


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, Tensor], config: dict, kind: str):
    meta = {"format_version": CHECKPOINT_VERSION, "kind": kind, "config": json.dumps(config, sort_keys=True)}
    state = {k: v.detach().contiguous().clone() for k, v in sorted(tensors.items())}
    with open(path, "wb") as f:
        f.write(_canonical_header(save(state, metadata=meta)))


def _canonical_header(blob: bytes) -> bytes:
    # the writer emits metadata in hash order; re-serialize the header sorted so saves are byte-stable
    n = int.from_bytes(blob[:8], "little")
    header = json.dumps(json.loads(blob[8:8 + n]), sort_keys=True, separators=(",", ":")).encode()
    header += b" " * (-len(header) % 8)
    return len(header).to_bytes(8, "little") + header + blob[8 + n:]


def read_checkpoint(path: str | os.PathLike, kind: str | None = None) -> tuple[dict[str, Tensor], dict]:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    if kind is not None and meta.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {meta.get('kind')!r}")
    return load_file(str(path)), json.loads(meta["config"])


def save_reid(net: ReIDNet, path, extra: dict | None = None):
    save_checkpoint(path, net.state_dict(), {**net.config, **(extra or {})}, "reid")


def load_reid(path) -> tuple[ReIDNet, dict]:
    state, cfg = read_checkpoint(path, "reid")
    net = ReIDNet(cfg["widths"], cfg["num_classes"], cfg["pooling"], cfg["classifier_pooling"],
                  cfg["input_size"])
    net.load_state_dict(state)
    net.eval()
    return net, cfg
