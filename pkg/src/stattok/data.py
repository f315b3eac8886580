"""Synthetic image corpus with controllable complexity, PPM import/export,
and the deflate-based complexity proxy.

Every sample is a pure function of (seed, absolute index): the per-sample
RNG is derived from a SeedSequence keyed on both, so generation is
reproducible regardless of batching or worker layout.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass

import numpy as np

DETAIL_LEVELS = 10
PROXY_ZLIB_LEVEL = 6


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    pixels: np.ndarray   # (N, 3, H, W) float32 in [-1, 1]
    ids: np.ndarray      # (N,) int64
    labels: np.ndarray   # (N,) int64
    detail: np.ndarray   # (N,) int64, -1 when unknown

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def image_size(self) -> int:
        return self.pixels.shape[2]


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    h = h % 1.0
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.asarray(rgb, dtype=np.float32)


def _coverage(dist: np.ndarray) -> np.ndarray:
    # 1px anti-aliasing band around the signed-distance zero level
    return np.clip(0.5 - dist, 0.0, 1.0).astype(np.float32)


def _draw_shape(rng: np.random.Generator, img: np.ndarray, xx: np.ndarray, yy: np.ndarray, hue: float):
    size = img.shape[1]
    kind = rng.integers(0, 3)
    color = _hsv_to_rgb(hue + rng.uniform(-0.2, 0.2), rng.uniform(0.35, 0.95), rng.uniform(0.15, 0.95)) * 2.0 - 1.0
    if kind == 0:  # axis-aligned rectangle
        cx, cy = rng.uniform(0, size, size=2)
        w, h = rng.uniform(size * 0.1, size * 0.5, size=2)
        dx = np.abs(xx - cx) - w / 2
        dy = np.abs(yy - cy) - h / 2
        outside = np.sqrt(np.maximum(dx, 0) ** 2 + np.maximum(dy, 0) ** 2)
        dist = outside + np.minimum(np.maximum(dx, dy), 0)
    elif kind == 1:  # circle
        cx, cy = rng.uniform(0, size, size=2)
        r = rng.uniform(size * 0.06, size * 0.3)
        dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2) - r
    else:  # line segment (capsule)
        x0, y0, x1, y1 = rng.uniform(0, size, size=4)
        half = rng.uniform(0.5, size * 0.05)
        px, py = xx - x0, yy - y0
        vx, vy = x1 - x0, y1 - y0
        denom = max(vx * vx + vy * vy, 1e-8)
        tt = np.clip((px * vx + py * vy) / denom, 0.0, 1.0)
        dist = np.sqrt((px - tt * vx) ** 2 + (py - tt * vy) ** 2) - half
    cov = _coverage(dist)[None, :, :]
    img += cov * (color[:, None, None] - img)


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    g = grid.shape[0]
    pos = np.linspace(0.0, g - 1.0, size)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, g - 1)
    frac = (pos - i0).astype(np.float32)
    top = grid[i0][:, i0] * (1 - frac[None, :]) + grid[i0][:, i1] * frac[None, :]
    bot = grid[i1][:, i0] * (1 - frac[None, :]) + grid[i1][:, i1] * frac[None, :]
    return (top * (1 - frac[:, None]) + bot * frac[:, None]).astype(np.float32)


def render_sample(seed: int, index: int, size: int, num_classes: int) -> tuple[np.ndarray, int, int]:
    """Render one image; returns (pixels (3,H,W) in [-1,1], label, detail level)."""
    label = index % num_classes
    detail = (index // num_classes) % DETAIL_LEVELS
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(index,))))
    hue = label / num_classes + rng.uniform(-0.04, 0.04)
    base = _hsv_to_rgb(hue, rng.uniform(0.3, 0.8), rng.uniform(0.25, 0.9)) * 2.0 - 1.0
    img = np.broadcast_to(base[:, None, None], (3, size, size)).astype(np.float32).copy()

    yy, xx = np.meshgrid(np.arange(size, dtype=np.float32), np.arange(size, dtype=np.float32), indexing="ij")
    for _ in range(detail):
        _draw_shape(rng, img, xx, yy, hue)
    if detail > 0:
        low = rng.normal(0.0, 1.0, size=(size // 8 + 2, size // 8 + 2)).astype(np.float32)
        img += 0.008 * detail * _bilinear_upsample(low, size)[None, :, :]
        # impulse noise with density (not amplitude) growing in d: deflate
        # size then ramps linearly instead of saturating
        hit = rng.random(size=(3, size, size)) < 0.04 * detail
        img += hit * rng.uniform(-0.5, 0.5, size=(3, size, size)).astype(np.float32)
    return np.clip(img, -1.0, 1.0), label, detail


def generate_synthetic(seed: int, n: int, size: int, num_classes: int,
                       patch_size: int = 4, start_index: int = 0) -> Dataset:
    """Deterministic corpus; class ids round-robin, detail level cycles every
    ``num_classes`` samples so each class spans all complexity levels."""
    if size % patch_size != 0:
        raise DataError(f"image size {size} not divisible by patch size {patch_size}")
    if n < num_classes:
        raise DataError(f"need n >= num_classes, got n={n}, num_classes={num_classes}")
    pixels = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    detail = np.empty(n, dtype=np.int64)
    ids = np.arange(start_index, start_index + n, dtype=np.int64)
    for i in range(n):
        pixels[i], labels[i], detail[i] = render_sample(seed, start_index + i, size, num_classes)
    return Dataset(pixels, ids, labels, detail)


def to_bytes(image: np.ndarray) -> np.ndarray:
    """[-1,1] float pixels to interleaved HWC uint8."""
    q = np.rint((image + 1.0) * 127.5)
    return np.clip(q, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_bytes(raw: np.ndarray) -> np.ndarray:
    """HWC uint8 to (3,H,W) float pixels via x/127.5 - 1."""
    return (raw.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def complexity_proxy(image: np.ndarray) -> int:
    """Deflate-compressed byte count of the quantized RGB stream.

    Fixed-Huffman deflate: constant images then compress to the same size
    regardless of the constant's value, while LZ77 still tracks structure.
    """
    comp = zlib.compressobj(PROXY_ZLIB_LEVEL, zlib.DEFLATED, 15, 8, zlib.Z_FIXED)
    return len(comp.compress(to_bytes(image).tobytes()) + comp.flush())


def dataset_proxies(ds: Dataset) -> np.ndarray:
    return np.asarray([complexity_proxy(ds.pixels[i]) for i in range(len(ds))], dtype=np.int64)


# PPM (P6, maxval 255) ------------------------------------------------------

def write_ppm(path: str, image: np.ndarray):
    raw = to_bytes(image)
    h, w, _ = raw.shape
    payload = b"P6\n%d %d\n255\n" % (w, h) + raw.tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # '#' comments allowed through the end of line
    pos = 0
    tokens = []
    while len(tokens) < 4:
        if pos >= len(blob):
            raise DataError(f"{path}: truncated PPM header")
        c = blob[pos:pos + 1]
        if c == b"#":
            nl = blob.find(b"\n", pos)
            pos = len(blob) if nl < 0 else nl + 1
        elif c.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace() and blob[end:end + 1] != b"#":
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise DataError(f"{path}: malformed PPM header") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise DataError(f"{path}: unsupported PPM (maxval {maxval}, {w}x{h})")
    pos += 1  # single whitespace byte after maxval
    data = blob[pos:pos + w * h * 3]
    if len(data) != w * h * 3:
        raise DataError(f"{path}: truncated PPM payload")
    return from_bytes(np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3))


def write_manifest(path: str, ds: Dataset, proxies: np.ndarray):
    lines = ["id,label,detail_level,proxy_bytes"]
    for i in range(len(ds)):
        lines.append(f"{ds.ids[i]},{ds.labels[i]},{ds.detail[i]},{proxies[i]}")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_manifest(path: str) -> dict[int, tuple[int, int]]:
    """id -> (label, detail_level)."""
    out = {}
    with open(path) as f:
        header = f.readline().strip()
        if not header.startswith("id,label,detail_level"):
            raise DataError(f"{path}: unexpected manifest header {header!r}")
        for line in f:
            if not line.strip():
                continue
            fields = line.strip().split(",")
            out[int(fields[0])] = (int(fields[1]), int(fields[2]))
    return out


def save_dataset(dirpath: str, ds: Dataset, proxies: np.ndarray | None = None):
    os.makedirs(dirpath, exist_ok=True)
    for i in range(len(ds)):
        write_ppm(os.path.join(dirpath, f"{ds.ids[i]:06d}.ppm"), ds.pixels[i])
    if proxies is None:
        proxies = dataset_proxies(ds)
    write_manifest(os.path.join(dirpath, "manifest.csv"), ds, proxies)


def load_ppm_dir(dirpath: str) -> Dataset:
    """Load every .ppm in a directory (sorted by filename); a manifest.csv,
    when present, supplies labels and detail levels by image id."""
    if not os.path.isdir(dirpath):
        raise DataError(f"{dirpath}: not a directory")
    names = sorted(n for n in os.listdir(dirpath) if n.endswith(".ppm"))
    if not names:
        raise DataError(f"{dirpath}: no samples (no .ppm files found)")
    images, ids = [], []
    for i, name in enumerate(names):
        img = read_ppm(os.path.join(dirpath, name))
        images.append(img)
        stem = os.path.splitext(name)[0]
        ids.append(int(stem) if stem.isdigit() else i)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"{dirpath}: mixed image sizes {sorted(shapes)}")
    n = len(images)
    labels = np.zeros(n, dtype=np.int64)
    detail = np.full(n, -1, dtype=np.int64)
    manifest = os.path.join(dirpath, "manifest.csv")
    if os.path.exists(manifest):
        meta = read_manifest(manifest)
        for i, sid in enumerate(ids):
            if sid in meta:
                labels[i], detail[i] = meta[sid]
    return Dataset(np.stack(images), np.asarray(ids, dtype=np.int64), labels, detail)


# batching -------------------------------------------------------------------

def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation for one epoch; a pure function of (seed, epoch)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(0xE19C, epoch))))
    return rng.permutation(n)


def hflip(batch: np.ndarray, flip_mask: np.ndarray) -> np.ndarray:
    out = batch.copy()
    out[flip_mask] = out[flip_mask][..., ::-1]
    return out
