"""Synthetic multi-camera person data, manifest I/O, PK sampling and augmentation."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .exceptions import ConfigError, LoadError, SamplingError

NOISE = -1
MANIFEST_NAME = "manifest.csv"
INFO_NAME = "dataset.json"


@dataclass
class ImageSample:
    pixels: np.ndarray  # H x W x 3, float32 in [0, 1]
    camera: int
    sample_id: str
    identity: int | None = None
    mask: np.ndarray | None = None  # H x W, uint8 in {0, 1}

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"{self.sample_id}: pixels must be HxWx3, got {self.pixels.shape}")
        if self.mask is not None and self.mask.shape != self.pixels.shape[:2]:
            raise ValueError(f"{self.sample_id}: mask shape {self.mask.shape} != {self.pixels.shape[:2]}")


@dataclass
class Dataset:
    samples: list[ImageSample]
    num_identities: int
    num_cameras: int
    domain_tag: str = "source"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for s in self.samples:
            if not 0 <= s.camera < self.num_cameras:
                raise ValueError(f"{s.sample_id}: camera {s.camera} outside [0, {self.num_cameras})")
            if s.identity is not None and not 0 <= s.identity < self.num_identities:
                raise ValueError(f"{s.sample_id}: identity {s.identity} outside [0, {self.num_identities})")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def images(self) -> np.ndarray:
        """Stacked N x H x W x 3 pixel array."""
        if not self.samples:
            return np.zeros((0, 0, 0, 3), np.float32)
        return np.stack([s.pixels for s in self.samples])

    @property
    def masks(self) -> np.ndarray | None:
        if not self.samples or any(s.mask is None for s in self.samples):
            return None
        return np.stack([s.mask for s in self.samples])

    @property
    def identities(self) -> np.ndarray:
        return np.array([NOISE if s.identity is None else s.identity for s in self.samples], dtype=np.int64)

    @property
    def cameras(self) -> np.ndarray:
        return np.array([s.camera for s in self.samples], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return replace(self, samples=[self.samples[i] for i in indices], meta=dict(self.meta))

    def unlabeled(self) -> "Dataset":
        """Copy with identities stripped, as handed to the unsupervised stage."""
        samples = [replace(s, identity=None) for s in self.samples]
        return replace(self, samples=samples, meta=dict(self.meta))


@dataclass
class PKBatch:
    samples: list[ImageSample]
    indices: np.ndarray
    labels: np.ndarray
    P: int
    K: int


# ---------------------------------------------------------------------------
# synthetic rendering


@dataclass(frozen=True)
class CameraStyle:
    hue_shift: float  # degrees
    gamma: float
    gain: float
    background: tuple[float, float, float]
    texture: int  # 0 flat, 1 h-stripes, 2 v-stripes, 3 checker, 4 diagonal
    texture_amp: float = 0.15
    texture_period: int = 8


@dataclass(frozen=True)
class PersonAppearance:
    torso: tuple[float, float, float]
    legs: tuple[float, float, float]
    skin: tuple[float, float, float]
    torso_height: float  # multiplier on nominal torso height
    width: float  # multiplier on nominal body width

    def color_vector(self) -> np.ndarray:
        return np.array(self.torso + self.legs, dtype=np.float64)


@dataclass
class SynthConfig:
    num_identities: int = 32
    num_test_identities: int = 24
    num_cameras_source: int = 4
    num_cameras_target: int = 4
    images_per_id_per_camera: int = 4
    height: int = 64
    width: int = 32
    seed: int = 0
    min_color_distance: float = 0.25
    pose_jitter: int = 2
    pixel_noise: float = 0.02
    target_hue: float = 10.0  # max |hue shift| in degrees for target cameras
    target_gamma: tuple[float, float] = (0.85, 1.2)
    background_jitter: float = 0.1  # per-image background color offset
    illumination_jitter: float = 0.1  # per-image relative gain change
    source_styles: list[CameraStyle] | None = None
    target_styles: list[CameraStyle] | None = None
    appearances: list[PersonAppearance] | None = None

    def validate(self):
        if self.num_identities <= 0:
            raise ConfigError("num_identities must be positive")
        if self.num_test_identities < 0:
            raise ConfigError("num_test_identities must be nonnegative")
        if self.num_cameras_source <= 0 or self.num_cameras_target <= 0:
            raise ConfigError("camera counts must be positive")
        if self.images_per_id_per_camera <= 0:
            raise ConfigError("images_per_id_per_camera must be positive")
        if self.height < 16 or self.width < 8 or self.height % 8 or self.width % 8:
            raise ConfigError(f"image size {self.height}x{self.width} must be multiples of 8, at least 16x8")
        for name, styles, n in (("source_styles", self.source_styles, self.num_cameras_source),
                                ("target_styles", self.target_styles, self.num_cameras_target)):
            if styles is not None and len(styles) != n:
                raise ConfigError(f"{name} has {len(styles)} entries for {n} cameras")
        if self.appearances is not None:
            if len(self.appearances) < self.total_persons:
                raise ConfigError(f"need {self.total_persons} appearances, got {len(self.appearances)}")
            _check_color_distance(self.appearances, self.min_color_distance)

    @property
    def total_persons(self) -> int:
        return 2 * (self.num_identities + self.num_test_identities)


def _check_color_distance(appearances: Sequence[PersonAppearance], min_dist: float):
    colors = np.stack([a.color_vector() for a in appearances])
    d = np.sqrt(((colors[:, None] - colors[None]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    i, j = np.unravel_index(np.argmin(d), d.shape)
    if d[i, j] < min_dist:
        raise ConfigError(f"appearances {i} and {j} are {d[i, j]:.3f} apart (< {min_dist})")


def draw_appearances(n: int, min_dist: float, rng: np.random.Generator,
                     max_tries: int = 10000) -> list[PersonAppearance]:
    """Draw n appearances, redrawing any candidate closer than min_dist to an accepted one."""
    skins = [(0.95, 0.8, 0.65), (0.8, 0.6, 0.45), (0.55, 0.38, 0.25), (0.98, 0.87, 0.75)]
    out: list[PersonAppearance] = []
    colors = np.zeros((0, 6))
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > max_tries:
            raise ConfigError(f"could not place {n} appearances at min distance {min_dist}")
        torso = rng.uniform(0.05, 0.95, 3)
        legs = rng.uniform(0.05, 0.95, 3)
        c = np.concatenate([torso, legs])
        if len(colors) and np.sqrt(((colors - c) ** 2).sum(1)).min() < min_dist:
            continue
        colors = np.vstack([colors, c])
        out.append(PersonAppearance(
            torso=tuple(float(v) for v in torso),
            legs=tuple(float(v) for v in legs),
            skin=skins[int(rng.integers(len(skins)))],
            torso_height=float(rng.uniform(0.85, 1.15)),
            width=float(rng.uniform(0.8, 1.2)),
        ))
    return out


def draw_camera_styles(n: int, domain: str, rng: np.random.Generator, hue: float = 25.0,
                       gamma=(0.75, 1.35)) -> list[CameraStyle]:
    styles = []
    textures = rng.permutation(5)
    for k in range(n):
        if domain == "source":
            bg = rng.uniform(0.1, 0.9, 3)
            styles.append(CameraStyle(
                hue_shift=float(rng.uniform(-10, 10)), gamma=float(rng.uniform(0.85, 1.15)),
                gain=float(rng.uniform(0.95, 1.05)),
                background=tuple(float(v) for v in bg),
                texture=int(textures[k % 5]), texture_amp=0.12))
        else:
            bg = rng.uniform(0.1, 0.9, 3)
            styles.append(CameraStyle(
                hue_shift=float(rng.uniform(-hue, hue)), gamma=float(rng.uniform(*gamma)),
                gain=float(rng.uniform(0.9, 1.1)),
                background=tuple(float(v) for v in bg),
                texture=int(textures[k % 5]), texture_amp=0.2, texture_period=int(rng.integers(4, 11))))
    return styles


def _hue_matrix(degrees: float) -> np.ndarray:
    # rotation about the gray axis in RGB space
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    k = 1.0 / 3.0
    sq = math.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
    ])


def apply_camera_style(rgb: np.ndarray, style: CameraStyle) -> np.ndarray:
    out = rgb @ _hue_matrix(style.hue_shift).T
    out = np.clip(out * style.gain, 0.0, 1.0)
    return out ** style.gamma


def _background(h: int, w: int, style: CameraStyle, shift=(0, 0), offset=0.0) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    yy, xx = yy + shift[0], xx + shift[1]
    p = style.texture_period
    if style.texture == 1:
        pattern = ((yy // (p // 2 or 1)) % 2) * 2 - 1.0
    elif style.texture == 2:
        pattern = ((xx // (p // 2 or 1)) % 2) * 2 - 1.0
    elif style.texture == 3:
        pattern = (((yy // p) + (xx // p)) % 2) * 2 - 1.0
    elif style.texture == 4:
        pattern = np.sin(2 * np.pi * (yy + xx) / (2 * p))
    else:
        pattern = np.zeros((h, w))
    bg = np.asarray(style.background)[None, None, :] + offset + style.texture_amp * pattern[..., None]
    return np.clip(bg, 0.0, 1.0)


def render_person(app: PersonAppearance, style: CameraStyle, h: int, w: int,
                  rng: np.random.Generator, jitter: int = 2, noise: float = 0.02,
                  bg_jitter: float = 0.0, illum_jitter: float = 0.0):
    """Render one image; returns (pixels float32 quantized to 1/255, mask uint8)."""
    sy, sx = h / 64.0, w / 32.0
    dy = int(rng.integers(-jitter, jitter + 1))
    dx = int(rng.integers(-jitter, jitter + 1))
    scale = rng.uniform(0.94, 1.06)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = w / 2 + dx
    top = 4 * sy + dy

    head_cy, head_ry, head_rx = top + 4 * sy * scale, 4 * sy * scale, 3.5 * sx * scale
    head = ((yy - head_cy) / head_ry) ** 2 + ((xx - cx) / head_rx) ** 2 <= 1.0

    torso_top = top + 8 * sy * scale
    torso_bot = torso_top + 22 * sy * scale * app.torso_height
    half_w = 7 * sx * scale * app.width
    torso = (yy >= torso_top) & (yy < torso_bot) & (np.abs(xx - cx) < half_w)

    leg_bot = min(h - 1.0, torso_bot + 26 * sy * scale)
    leg_w = 0.42 * half_w
    gap = 0.12 * half_w
    legs = (yy >= torso_bot) & (yy < leg_bot) & (
        ((xx >= cx - gap - 2 * leg_w) & (xx < cx - gap)) | ((xx >= cx + gap) & (xx < cx + gap + 2 * leg_w)))

    if bg_jitter > 0:
        shift = tuple(int(v) for v in rng.integers(0, style.texture_period, 2))
        img = _background(h, w, style, shift, rng.uniform(-bg_jitter, bg_jitter, 3))
    else:
        img = _background(h, w, style)
    img[legs] = app.legs
    img[torso] = app.torso
    img[head] = app.skin
    shading = 1.0 - 0.15 * (np.abs(xx - cx) / max(half_w, 1.0)).clip(0, 1)
    fg = head | torso | legs
    img[fg] *= shading[fg][:, None]
    if illum_jitter > 0:
        img = img * rng.uniform(1 - illum_jitter, 1 + illum_jitter)
    img = img + rng.normal(0.0, noise, img.shape)
    img = apply_camera_style(np.clip(img, 0.0, 1.0), style)
    pixels = (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)
    return pixels, fg.astype(np.uint8)


def _render_domain(persons, styles, cfg: SynthConfig, rng, tag, prefix) -> list[ImageSample]:
    samples = []
    for local_id, (gid, app) in enumerate(persons):
        for cam, style in enumerate(styles):
            for k in range(cfg.images_per_id_per_camera):
                pixels, mask = render_person(app, style, cfg.height, cfg.width, rng,
                                             cfg.pose_jitter, cfg.pixel_noise, cfg.background_jitter,
                                             cfg.illumination_jitter)
                samples.append(ImageSample(pixels=pixels, camera=cam, identity=local_id, mask=mask,
                                           sample_id=f"{prefix}_p{gid:04d}_c{cam}_{k}"))
    return samples


def _draw_world(cfg: SynthConfig):
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    apps = cfg.appearances or draw_appearances(cfg.total_persons, cfg.min_color_distance, rng)
    src_styles = cfg.source_styles or draw_camera_styles(cfg.num_cameras_source, "source", rng)
    tgt_styles = cfg.target_styles or draw_camera_styles(cfg.num_cameras_target, "target", rng,
                                                         cfg.target_hue, cfg.target_gamma)
    m, t = cfg.num_identities, cfg.num_test_identities
    # global person pool: [src train | tgt train | src test | tgt test]
    pools = {
        "source": list(range(0, m)),
        "target": list(range(m, 2 * m)),
        "source_test": list(range(2 * m, 2 * m + t)),
        "target_test": list(range(2 * m + t, 2 * m + 2 * t)),
    }
    return rng, apps, src_styles, tgt_styles, pools


def _build(cfg, rng, apps, styles, gids, tag, prefix) -> Dataset:
    persons = [(g, apps[g]) for g in gids]
    samples = _render_domain(persons, styles, cfg, rng, tag, prefix)
    return Dataset(samples=samples, num_identities=len(gids), num_cameras=len(styles), domain_tag=tag,
                   meta={"persons": list(gids), "styles": [s.__dict__ for s in styles]})


def generate_synthetic(cfg: SynthConfig) -> tuple[Dataset, Dataset]:
    """Render disjoint-identity source and target training sets."""
    rng, apps, src_styles, tgt_styles, pools = _draw_world(cfg)
    source = _build(cfg, rng, apps, src_styles, pools["source"], "source", "S")
    target = _build(cfg, rng, apps, tgt_styles, pools["target"], "target", "T")
    return source, target


@dataclass
class Benchmark:
    source_train: Dataset
    target_train: Dataset
    source_query: Dataset
    source_gallery: Dataset
    target_query: Dataset
    target_gallery: Dataset

    def splits(self) -> dict[str, Dataset]:
        return dict(self.__dict__)


def query_gallery_split(ds: Dataset) -> tuple[Dataset, Dataset]:
    """First image of every (identity, camera) pair is a query, the rest form the gallery."""
    seen = set()
    q, g = [], []
    for i, s in enumerate(ds.samples):
        key = (s.identity, s.camera)
        (g if key in seen else q).append(i)
        seen.add(key)
    return ds.subset(q), ds.subset(g)


def make_benchmark(cfg: SynthConfig) -> Benchmark:
    """Training sets plus query/gallery splits over held-out identities in both domains."""
    rng, apps, src_styles, tgt_styles, pools = _draw_world(cfg)
    source = _build(cfg, rng, apps, src_styles, pools["source"], "source", "S")
    target = _build(cfg, rng, apps, tgt_styles, pools["target"], "target", "T")
    if cfg.num_test_identities == 0:
        raise ConfigError("make_benchmark needs num_test_identities > 0")
    src_test = _build(cfg, rng, apps, src_styles, pools["source_test"], "source", "SQ")
    tgt_test = _build(cfg, rng, apps, tgt_styles, pools["target_test"], "target", "TQ")
    sq, sg = query_gallery_split(src_test)
    tq, tg = query_gallery_split(tgt_test)
    return Benchmark(source, target, sq, sg, tq, tg)


# ---------------------------------------------------------------------------
# manifest I/O


def save_dataset(ds: Dataset, root: str | os.PathLike) -> Path:
    """Write images, masks and manifest; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    has_masks = any(s.mask is not None for s in ds.samples)
    if has_masks:
        (root / "masks").mkdir(exist_ok=True)
    identity_names = ds.meta.get("identity_names")
    with open(root / MANIFEST_NAME, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["path", "identity", "camera"])
        for s in ds.samples:
            rel = f"images/{s.sample_id}.png"
            Image.fromarray(np.round(s.pixels * 255).astype(np.uint8)).save(root / rel)
            if s.mask is not None:
                Image.fromarray(s.mask.astype(np.uint8) * 255).save(root / "masks" / f"{s.sample_id}.png")
            if s.identity is None:
                ident = "-1"
            elif identity_names is not None:
                ident = str(identity_names[s.identity])
            else:
                ident = str(s.identity)
            writer.writerow([rel, ident, s.camera])
    info = {"num_cameras": ds.num_cameras, "domain_tag": ds.domain_tag}
    (root / INFO_NAME).write_text(json.dumps(info, indent=1, sort_keys=True))
    return root / MANIFEST_NAME


def load_manifest(path: str | os.PathLike, num_cameras: int | None = None) -> Dataset:
    """Load a dataset directory (or a manifest file inside one).

    Identity strings are remapped to dense labels in sorted numeric order; ``-1`` marks an
    unlabeled image. The camera count comes from ``num_cameras``, else ``dataset.json``, else
    the largest camera index seen.
    """
    path = Path(path)
    manifest = path / MANIFEST_NAME if path.is_dir() else path
    root = manifest.parent
    if not manifest.exists():
        raise LoadError(f"no manifest at {manifest}")
    info = {}
    if (root / INFO_NAME).exists():
        info = json.loads((root / INFO_NAME).read_text())
    declared = num_cameras if num_cameras is not None else info.get("num_cameras")

    rows = []
    with open(manifest, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return Dataset([], 0, declared or 0, info.get("domain_tag", "source"))
        if [h.strip() for h in header] != ["path", "identity", "camera"]:
            raise LoadError(f"{manifest}: bad header {header}")
        for rowno, row in enumerate(reader):
            if not row:
                continue
            if len(row) != 3:
                raise LoadError(f"{manifest} row {rowno}: expected 3 fields, got {len(row)}")
            rel, ident, cam = (r.strip() for r in row)
            try:
                ident_i, cam_i = int(ident), int(cam)
            except ValueError:
                raise LoadError(f"{manifest} row {rowno}: non-integer identity/camera {row}") from None
            if cam_i < 0 or (declared is not None and cam_i >= declared):
                raise LoadError(f"{manifest} row {rowno}: camera {cam_i} outside declared count {declared}")
            img_path = root / rel
            if not img_path.exists():
                raise LoadError(f"{manifest} row {rowno}: missing image {img_path}")
            rows.append((rowno, rel, ident_i, cam_i))

    names = sorted({r[2] for r in rows if r[2] != -1})
    remap = {n: i for i, n in enumerate(names)}
    samples = []
    for rowno, rel, ident_i, cam_i in rows:
        img = np.asarray(Image.open(root / rel).convert("RGB"), dtype=np.float32) / 255.0
        sid = Path(rel).stem
        mask_path = root / "masks" / f"{sid}.png"
        mask = None
        if mask_path.exists():
            mask = (np.asarray(Image.open(mask_path).convert("L")) > 127).astype(np.uint8)
        samples.append(ImageSample(pixels=img, camera=cam_i, sample_id=sid, mask=mask,
                                   identity=None if ident_i == -1 else remap[ident_i]))
    n_cams = declared if declared is not None else (max(r[3] for r in rows) + 1 if rows else 0)
    meta = {"identity_names": names}
    return Dataset(samples, len(names), n_cams, info.get("domain_tag", "source"), meta)


# ---------------------------------------------------------------------------
# sampling


def pk_indices(labels: np.ndarray, P: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """P distinct non-noise labels, K indices each (with replacement when a label is short)."""
    labels = np.asarray(labels)
    ids = np.unique(labels[labels != NOISE])
    if len(ids) < P:
        raise SamplingError(f"need {P} identities, only {len(ids)} labeled")
    chosen = rng.choice(ids, size=P, replace=False)
    out = []
    for pid in chosen:
        pool = np.flatnonzero(labels == pid)
        out.append(rng.choice(pool, size=K, replace=len(pool) < K))
    return np.concatenate(out)


def pk_sample(ds: Dataset, P: int, K: int, rng: np.random.Generator) -> PKBatch:
    labels = ds.identities
    idx = pk_indices(labels, P, K, rng)
    return PKBatch([ds.samples[i] for i in idx], idx, labels[idx], P, K)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentPolicy:
    crop: bool = False
    flip: bool = False
    erase: bool = False
    jitter: bool = False
    crop_pad: int = 4
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.2)
    erase_aspect: float = 0.3
    jitter_strength: float = 0.1

    @classmethod
    def from_names(cls, names, **kw) -> "AugmentPolicy":
        names = set(names)
        unknown = names - {"crop", "flip", "erase", "jitter"}
        if unknown:
            raise ConfigError(f"unknown augmentations {sorted(unknown)}")
        return cls(**{n: True for n in names}, **kw)


def hflip(arr: np.ndarray) -> np.ndarray:
    return arr[:, ::-1].copy()


def random_crop(pixels, mask, pad, rng):
    """Zero-pad by ``pad`` pixels and crop back to the original size at a random offset."""
    if pad <= 0:
        return pixels, mask
    h, w = pixels.shape[:2]
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    padded = np.pad(pixels, ((pad, pad), (pad, pad), (0, 0)))
    pixels = padded[top:top + h, left:left + w]
    if mask is not None:
        mask = np.pad(mask, pad)[top:top + h, left:left + w]
    return pixels, mask


def erase_rectangle(h, w, area, aspect, rng, attempts=100):
    """Pick (top, left, eh, ew) whose area fraction lies in ``area``; None if no fit found."""
    lo, hi = area
    for _ in range(attempts):
        target = rng.uniform(lo, hi) * h * w
        r = math.exp(rng.uniform(math.log(aspect), math.log(1 / aspect)))
        eh = int(round(math.sqrt(target * r)))
        ew = int(round(math.sqrt(target / r)))
        if 0 < eh <= h and 0 < ew <= w and lo <= eh * ew / (h * w) <= hi:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            return top, left, eh, ew
    return None


def augment(s: ImageSample, policy: AugmentPolicy, rng: np.random.Generator) -> ImageSample:
    pixels, mask = s.pixels, s.mask
    if policy.crop:
        pixels, mask = random_crop(pixels, mask, policy.crop_pad, rng)
    if policy.flip and rng.random() < policy.flip_prob:
        pixels = hflip(pixels)
        mask = None if mask is None else hflip(mask)
    if policy.jitter:
        b = 1.0 + rng.uniform(-policy.jitter_strength, policy.jitter_strength)
        c = 1.0 + rng.uniform(-policy.jitter_strength, policy.jitter_strength)
        mean = pixels.mean()
        pixels = np.clip((pixels - mean) * c + mean * b, 0.0, 1.0)
    if policy.erase and rng.random() < policy.erase_prob:
        h, w = pixels.shape[:2]
        rect = erase_rectangle(h, w, policy.erase_area, policy.erase_aspect, rng)
        if rect is not None:
            top, left, eh, ew = rect
            pixels = np.array(pixels, copy=True)
            pixels[top:top + eh, left:left + ew] = rng.uniform(0, 1, (eh, ew, 3))
    return replace(s, pixels=np.ascontiguousarray(pixels, dtype=np.float32),
                   mask=None if mask is None else np.ascontiguousarray(mask))


def augment_batch(images: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Augment an N x H x W x 3 stack (pixels only)."""
    out = np.empty_like(images)
    for i, img in enumerate(images):
        out[i] = augment(ImageSample(img, 0, ""), policy, rng).pixels
    return out
