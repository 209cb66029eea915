"""Synthetic keypoint data, heatmap targets, decoding and PCK.

The generator renders articulated stick figures: a fixed skeleton
topology (so each joint keeps a learnable visual identity) with random
limb angles and lengths, random placement and scale, plus background
noise. Joint coordinates are exact, which makes the detection task
verifiable without any external dataset.

Annotations are JSON objects, one per line; images are 8-bit PGM
(grayscale) or PPM (color) next to the annotation file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .fileio import FormatError, read_image, write_pgm, write_ppm

__all__ = [
    "KeypointSample",
    "synth_dataset",
    "save_dataset",
    "load_annotations",
    "heatmap_targets",
    "decode_keypoints",
    "pck",
    "make_arrays",
]


@dataclass
class KeypointSample:
    ident: str
    image: np.ndarray  # (H, W) or (H, W, 3) uint8
    keypoints: np.ndarray  # (K, 3): x, y, visibility in {0, 1}
    bbox: tuple  # (x, y, w, h) in pixels

    def validate(self) -> None:
        h, w = self.image.shape[:2]
        if self.image.dtype != np.uint8:
            raise ValueError(f"sample {self.ident}: image must be uint8")
        kps = np.asarray(self.keypoints, dtype=np.float64)
        if kps.ndim != 2 or kps.shape[1] != 3:
            raise ValueError(f"sample {self.ident}: keypoints must be (K, 3)")
        for i, (x, y, v) in enumerate(kps):
            if v not in (0.0, 1.0):
                raise ValueError(f"sample {self.ident}: keypoint {i} visibility {v} not in {{0, 1}}")
            if v == 1.0 and not (0 <= x < w and 0 <= y < h):
                raise ValueError(
                    f"sample {self.ident}: visible keypoint {i} at ({x}, {y}) outside {w}x{h} image"
                )
        bx, by, bw, bh = self.bbox
        if bw <= 0 or bh <= 0 or bx < 0 or by < 0 or bx + bw > w or by + bh > h:
            raise ValueError(f"sample {self.ident}: bbox {self.bbox} not inside {w}x{h} image")


def _skeleton(k: int):
    """Fixed binary-tree skeleton: parent of joint j >= 1 is (j - 1) // 2."""
    parents = [0] * k
    for j in range(1, k):
        parents[j] = (j - 1) // 2
    # fixed per-joint base directions spread around the circle
    base_angle = [(2.0 * np.pi * 0.381966 * j) % (2.0 * np.pi) for j in range(k)]
    return parents, base_angle


def _depth(parents, j):
    d = 0
    while j != 0:
        j = parents[j]
        d += 1
    return d


def _draw_segment(img: np.ndarray, a, b, brightness: float = 225.0) -> None:
    """Anti-aliased line: intensity falls off with distance to the segment."""
    h, w = img.shape
    x0, y0 = a
    x1, y1 = b
    lo_x = max(0, int(np.floor(min(x0, x1))) - 2)
    hi_x = min(w - 1, int(np.ceil(max(x0, x1))) + 2)
    lo_y = max(0, int(np.floor(min(y0, y1))) - 2)
    hi_y = min(h - 1, int(np.ceil(max(y0, y1))) + 2)
    if lo_x > hi_x or lo_y > hi_y:
        return
    ys, xs = np.mgrid[lo_y : hi_y + 1, lo_x : hi_x + 1]
    dx, dy = x1 - x0, y1 - y0
    seg2 = dx * dx + dy * dy
    if seg2 < 1e-12:
        t = np.zeros_like(xs, dtype=np.float64)
    else:
        t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / seg2, 0.0, 1.0)
    dist = np.hypot(xs - (x0 + t * dx), ys - (y0 + t * dy))
    val = brightness * np.clip(1.6 - dist, 0.0, 1.0)
    region = img[lo_y : hi_y + 1, lo_x : hi_x + 1]
    np.maximum(region, val, out=region)


def synth_dataset(n: int, image_size: int, keypoints: int, seed: int = 0):
    """Render n stick-figure samples; byte-identical for a given seed."""
    if n < 1:
        raise ValueError("need at least one sample")
    if keypoints < 2:
        raise ValueError("need at least two keypoints")
    if image_size < max(16, 2 * keypoints):
        raise ValueError(
            f"image size {image_size} too small for {keypoints} joints (need >= {max(16, 2 * keypoints)})"
        )
    rng = np.random.default_rng(seed)
    parents, base_angle = _skeleton(keypoints)
    samples = []
    for i in range(n):
        img = rng.uniform(0.0, 40.0, size=(image_size, image_size))
        scale = image_size * rng.uniform(0.26, 0.38)
        cx = image_size * rng.uniform(0.38, 0.62)
        cy = image_size * rng.uniform(0.38, 0.62)
        pts = np.zeros((keypoints, 2))
        pts[0] = (cx, cy)
        for j in range(1, keypoints):
            ang = base_angle[j] + rng.uniform(-0.5, 0.5)
            length = scale * (0.8 ** _depth(parents, j)) * rng.uniform(0.75, 1.25)
            pts[j] = pts[parents[j]] + length * np.array([np.cos(ang), np.sin(ang)])
        np.clip(pts, 1.0, image_size - 2.0, out=pts)
        for j in range(1, keypoints):
            _draw_segment(img, pts[parents[j]], pts[j])
        for j in range(keypoints):
            _draw_segment(img, pts[j], pts[j], brightness=255.0)
        kps = np.concatenate([pts, np.ones((keypoints, 1))], axis=1)
        lo = np.maximum(pts.min(axis=0) - 3.0, 0.0)
        hi = np.minimum(pts.max(axis=0) + 3.0, image_size - 1.0)
        bbox = (float(lo[0]), float(lo[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1]))
        sample = KeypointSample(
            ident=f"synth-{seed}-{i:05d}",
            image=np.clip(img, 0, 255).astype(np.uint8),
            keypoints=kps,
            bbox=bbox,
        )
        sample.validate()
        samples.append(sample)
    return samples


def save_dataset(samples, outdir) -> str:
    """Write images plus an `annotations.jsonl` file; returns its path."""
    os.makedirs(outdir, exist_ok=True)
    ann_path = os.path.join(outdir, "annotations.jsonl")
    with open(ann_path, "w") as fh:
        for s in samples:
            if s.image.ndim == 2:
                name = f"{s.ident}.pgm"
                write_pgm(os.path.join(outdir, name), s.image)
            else:
                name = f"{s.ident}.ppm"
                write_ppm(os.path.join(outdir, name), s.image)
            record = {
                "id": s.ident,
                "image": name,
                "bbox": [float(v) for v in s.bbox],
                "keypoints": [[float(x), float(y), int(v)] for x, y, v in s.keypoints],
            }
            fh.write(json.dumps(record) + "\n")
    return ann_path


def load_annotations(path):
    """Parse and validate an annotations file; any invalid record raises."""
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc.msg}", path=path, line=lineno) from None
        if not isinstance(rec, dict):
            raise FormatError("record must be a JSON object", path=path, line=lineno)
        missing = {"id", "image", "bbox", "keypoints"} - set(rec)
        if missing:
            raise FormatError(f"missing keys {sorted(missing)}", path=path, line=lineno)
        img_path = os.path.join(base, rec["image"])
        if not os.path.isfile(img_path):
            raise FormatError(f"image file {rec['image']!r} not found", path=path, line=lineno)
        try:
            image = read_image(img_path)
        except FormatError as exc:
            raise FormatError(f"unreadable image {rec['image']!r}: {exc}", path=path, line=lineno) from None
        bbox = rec["bbox"]
        if not (isinstance(bbox, list) and len(bbox) == 4):
            raise FormatError(f"bbox must be [x, y, w, h], got {bbox!r}", path=path, line=lineno)
        kps = rec["keypoints"]
        if not (isinstance(kps, list) and kps and all(len(k) == 3 for k in kps)):
            raise FormatError("keypoints must be a non-empty list of [x, y, v]", path=path, line=lineno)
        sample = KeypointSample(
            ident=str(rec["id"]),
            image=image,
            keypoints=np.array(kps, dtype=np.float64),
            bbox=tuple(float(v) for v in bbox),
        )
        try:
            sample.validate()
        except ValueError as exc:
            raise FormatError(str(exc), path=path, line=lineno) from None
        samples.append(sample)
    if not samples:
        raise FormatError("no samples", path=path, line=1)
    return samples


def heatmap_targets(sample: KeypointSample, output_size: int, sigma: float = 2.0) -> np.ndarray:
    """Per-keypoint Gaussian maps, peak exactly 1 at the nearest grid cell.

    The Gaussian is truncated to exact zero beyond 3 sigma; invisible
    keypoints give all-zero channels.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    in_h = sample.image.shape[0]
    scale = output_size / in_h
    k = len(sample.keypoints)
    maps = np.zeros((k, output_size, output_size), dtype=np.float32)
    grid = np.arange(output_size)
    for i, (x, y, v) in enumerate(sample.keypoints):
        if v != 1.0:
            continue
        cx = int(np.clip(np.rint(x * scale), 0, output_size - 1))
        cy = int(np.clip(np.rint(y * scale), 0, output_size - 1))
        d2 = (grid[None, :] - cx) ** 2 + (grid[:, None] - cy) ** 2
        g = np.exp(-d2 / (2.0 * sigma * sigma))
        g[d2 > (3.0 * sigma) ** 2] = 0.0
        maps[i] = g.astype(np.float32)
    return maps


def decode_keypoints(heatmaps: np.ndarray, scale: float = 4.0) -> np.ndarray:
    """Argmax decode: (x, y, confidence) per channel at input resolution.

    Ties resolve to the lowest row-major index; an all-zero channel gets
    confidence 0.
    """
    k, h, w = heatmaps.shape
    out = np.zeros((k, 3), dtype=np.float64)
    flat = heatmaps.reshape(k, -1)
    idx = flat.argmax(axis=1)
    out[:, 0] = (idx % w) * scale
    out[:, 1] = (idx // w) * scale
    out[:, 2] = flat[np.arange(k), idx]
    return out


def pck(preds, samples, alpha: float = 0.2) -> float:
    """Fraction of visible keypoints within alpha * max(bbox side) of truth."""
    if not (0 < alpha <= 1):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    hits = 0
    total = 0
    for pred, sample in zip(preds, samples):
        norm = alpha * max(sample.bbox[2], sample.bbox[3])
        for (px, py, _), (gx, gy, v) in zip(pred, sample.keypoints):
            if v != 1.0:
                continue
            total += 1
            if np.hypot(px - gx, py - gy) <= norm:
                hits += 1
    if total == 0:
        raise ValueError("no visible keypoints to evaluate")
    return hits / total


def make_arrays(samples, output_size: int, sigma: float = 2.0):
    """Stack samples into (X, Y): normalized NCHW images and target maps."""
    xs, ys = [], []
    for s in samples:
        img = s.image.astype(np.float32) / 255.0 - 0.5
        if img.ndim == 2:
            img = img[None, :, :]
        else:
            img = img.transpose(2, 0, 1)
        xs.append(img)
        ys.append(heatmap_targets(s, output_size, sigma))
    return np.stack(xs), np.stack(ys)
