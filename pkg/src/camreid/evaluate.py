"""Cross-camera retrieval metrics (CMC, mAP) and retrieval-grid figures."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.spatial.distance import cdist
from sklearn.utils import check_array


@dataclass
class MetricsReport:
    mAP: float
    rank1: float
    rank5: float
    rank10: float
    num_query: int
    num_gallery: int
    num_skipped: int = 0
    protocol: str = "cross-camera"

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        types = {k: type(v) for k, v in asdict(cls(0.0, 0.0, 0.0, 0.0, 0, 0)).items()}
        return cls(**{k: types[k](v) for k, v in kv.items() if k in types})


def pairwise_euclidean(query, gallery) -> np.ndarray:
    query = check_array(query, dtype=np.float64, ensure_min_samples=0)
    gallery = check_array(gallery, dtype=np.float64, ensure_min_samples=0)
    if query.shape[1] != gallery.shape[1]:
        raise ValueError(f"embedding dims differ: {query.shape[1]} vs {gallery.shape[1]}")
    return cdist(query, gallery)


def _ranked_matches(dist_row, q_id, q_cam, g_ids, g_cams):
    keep = ~((g_ids == q_id) & (g_cams == q_cam))
    order = np.argsort(dist_row, kind="stable")
    order = order[keep[order]]
    return g_ids[order] == q_id, order


def cmc_map(dist, query_ids, query_cams, gallery_ids, gallery_cams, max_rank: int = 10,
            protocol: str = "cross-camera") -> MetricsReport:
    """Rank-k accuracies and mAP; same-identity same-camera gallery entries are ignored.

    Queries without any valid match are skipped and counted in ``num_skipped``.
    """
    dist = np.asarray(dist, dtype=np.float64)
    q_ids, q_cams = np.asarray(query_ids), np.asarray(query_cams)
    g_ids, g_cams = np.asarray(gallery_ids), np.asarray(gallery_cams)
    if dist.shape != (len(q_ids), len(g_ids)):
        raise ValueError(f"distance matrix {dist.shape} does not match metadata")
    cmc = np.zeros(max_rank)
    aps = []
    skipped = 0
    for i in range(len(q_ids)):
        matches, _ = _ranked_matches(dist[i], q_ids[i], q_cams[i], g_ids, g_cams)
        if not matches.any():
            skipped += 1
            continue
        hits = np.flatnonzero(matches)
        if hits[0] < max_rank:
            cmc[hits[0]:] += 1
        aps.append(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))
    if not aps:
        raise ValueError("no query has a valid gallery match")
    cmc /= len(aps)
    return MetricsReport(mAP=float(np.mean(aps)), rank1=float(cmc[0]), rank5=float(cmc[min(4, max_rank - 1)]),
                         rank10=float(cmc[min(9, max_rank - 1)]), num_query=len(aps),
                         num_gallery=len(g_ids), num_skipped=skipped, protocol=protocol)


def append_results(ledger: str | os.PathLike, row: dict):
    """Append one tab-separated row to a results ledger, writing the header on first use."""
    ledger = Path(ledger)
    keys = list(row)
    new = not ledger.exists()
    with open(ledger, "a", encoding="utf-8") as f:
        if new:
            f.write("\t".join(keys) + "\n")
        f.write("\t".join(str(row[k]) for k in keys) + "\n")


def _tile(img: np.ndarray, color, dashed: bool, border: int = 3) -> Image.Image:
    h, w = img.shape[:2]
    tile = Image.new("RGB", (w + 2 * border, h + 2 * border), (255, 255, 255))
    tile.paste(Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)), (border, border))
    if color is None:
        return tile
    draw = ImageDraw.Draw(tile)
    W, H = tile.size
    if not dashed:
        draw.rectangle([0, 0, W - 1, H - 1], outline=color, width=border)
        return tile
    dash = 4
    for x in range(0, W, 2 * dash):
        draw.rectangle([x, 0, min(x + dash, W) - 1, border - 1], fill=color)
        draw.rectangle([x, H - border, min(x + dash, W) - 1, H - 1], fill=color)
    for y in range(0, H, 2 * dash):
        draw.rectangle([0, y, border - 1, min(y + dash, H) - 1], fill=color)
        draw.rectangle([W - border, y, W - 1, min(y + dash, H) - 1], fill=color)
    return tile


GREEN = (0, 170, 0)
RED = (220, 0, 0)


def retrieval_grid(query_images, query_ids, query_cams, gallery_images, gallery_ids, gallery_cams,
                   dist, k: int, out_path, max_queries: int = 8) -> list[list[bool]]:
    """One row per query: query tile, then top-k gallery tiles framed green (correct)
    or dashed red (wrong). Returns the correctness grid."""
    gallery_images = np.asarray(gallery_images)
    if k > len(gallery_images):
        raise ValueError(f"k={k} exceeds gallery size {len(gallery_images)}")
    g_ids, g_cams = np.asarray(gallery_ids), np.asarray(gallery_cams)
    rows, grid = [], []
    for i in range(min(max_queries, len(query_images))):
        keep = ~((g_ids == query_ids[i]) & (g_cams == query_cams[i]))
        order = np.argsort(dist[i], kind="stable")
        order = order[keep[order]][:k]
        correct = [bool(g_ids[j] == query_ids[i]) for j in order]
        tiles = [_tile(query_images[i], None, False)]
        tiles += [_tile(gallery_images[j], GREEN if c else RED, not c) for j, c in zip(order, correct)]
        rows.append(tiles)
        grid.append(correct)
    tw, th = rows[0][0].size
    gap = 4
    canvas = Image.new("RGB", ((k + 1) * tw + k * gap + gap * 2, len(rows) * (th + gap)), (255, 255, 255))
    for r, tiles in enumerate(rows):
        x = 0
        for c, t in enumerate(tiles):
            canvas.paste(t, (x, r * (th + gap)))
            x += tw + (3 * gap if c == 0 else gap)
    canvas.save(out_path, format="PNG")
    return grid
