"""Dataset ingestion, splitting, preprocessing and augmentation.

Images are H x W x 3 float32 arrays in [0, 1] until :func:`normalize` turns
them into channel-first, mean/std-normalized arrays.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .rng import Rng, derive_seed

MALIGNANT_CODES = ("mel", "bcc", "akiec")
BENIGN_CODES = ("nv", "bkl", "vasc", "df")


def parse_label(text: str) -> int:
    t = text.strip().lower()
    if t in ("0", "1"):
        return int(t)
    if t in MALIGNANT_CODES:
        return 1
    if t in BENIGN_CODES:
        return 0
    raise DataError(f"unknown label {text!r}")


# -- images -------------------------------------------------------------------


def decode_ppm(data: bytes) -> np.ndarray:
    """Binary P6 PPM with maxval 255 -> H x W x 3 float32 in [0, 1]."""
    if data[:2] != b"P6":
        raise DataError(f"unsupported image format (magic {data[:2]!r}); only binary P6 PPM is read")
    fields: list[bytes] = []
    pos = 2
    n = len(data)
    while len(fields) < 3:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("truncated PPM header")
        fields.append(data[start:pos])
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise DataError(f"malformed PPM header fields {fields}") from exc
    if maxval != 255:
        raise DataError(f"unsupported PPM maxval {maxval}; expected 255")
    if width < 1 or height < 1:
        raise DataError(f"invalid PPM size {width}x{height}")
    pos += 1  # single whitespace byte ends the header
    need = width * height * 3
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise DataError(f"truncated PPM payload: {len(payload)} of {need} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float32) / np.float32(255.0)


def encode_ppm(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def read_image(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


# -- manifests and datasets ----------------------------------------------------


@dataclass
class ImageSample:
    id: str
    label: int
    label_text: str
    path: Path
    _pixels: np.ndarray | None = field(default=None, repr=False)

    @property
    def pixels(self) -> np.ndarray:
        if self._pixels is None:
            self._pixels = read_image(self.path)
        return self._pixels


@dataclass
class LabeledDataset:
    samples: list[ImageSample]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def class_counts(self) -> tuple[int, int]:
        y = self.labels
        return int((y == 0).sum()), int((y == 1).sum())

    def subset(self, ids: Sequence[str]) -> "LabeledDataset":
        by_id = {s.id: s for s in self.samples}
        return LabeledDataset([by_id[i] for i in ids])


def load_manifest(manifest_path: str | os.PathLike, image_root: str | os.PathLike, check_files: bool = True) -> LabeledDataset:
    """Read an ``image_path,label`` CSV. Row numbers in errors count the header as row 1."""
    manifest_path = Path(manifest_path)
    root = Path(image_root)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["image_path", "label"]:
            raise DataError(f"{manifest_path}: header must be 'image_path,label', got {header}")
        samples = []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataError(f"{manifest_path} row {row_no}: expected 2 fields, got {len(row)}")
            rel, label_text = row[0].strip(), row[1].strip()
            try:
                label = parse_label(label_text)
            except DataError:
                raise DataError(f"{manifest_path} row {row_no}: unknown label code {label_text!r}") from None
            path = root / rel
            if check_files and not path.is_file():
                raise FileNotFoundError(f"{manifest_path} row {row_no}: image not found: {path}")
            samples.append(ImageSample(rel, label, label_text, path))
    if not samples:
        raise DataError(f"{manifest_path}: manifest has no rows")
    return LabeledDataset(samples)


def write_manifest(path: str | os.PathLike, samples: Sequence[ImageSample]) -> None:
    rows = ["image_path,label"] + [f"{s.id},{s.label_text}" for s in samples]
    atomic_write_text(path, "\n".join(rows) + "\n")


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# -- stratified split -----------------------------------------------------------


@dataclass
class DatasetSplits:
    train: list[str]
    val: list[str]
    test: list[str]
    ratios: tuple[float, float, float]
    seed: int

    def as_dict(self) -> dict[str, list[str]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def _largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    raw = [r * total for r in ratios]
    counts = [math.floor(x) for x in raw]
    short = total - sum(counts)
    # ties go to the earlier split
    order = sorted(range(len(ratios)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[:short]:
        counts[k] += 1
    return counts


def stratified_split(dataset: LabeledDataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplits:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    parts: list[list[str]] = [[], [], []]
    labels = dataset.labels
    ids = dataset.ids
    for cls in sorted(set(labels.tolist())):
        members = [ids[i] for i in np.flatnonzero(labels == cls)]
        if len(members) < len(ratios):
            raise DataError(f"class {cls} has {len(members)} samples; need at least {len(ratios)} to split")
        perm = Rng(derive_seed(seed, cls)).permutation(len(members))
        shuffled = [members[i] for i in perm]
        start = 0
        for k, count in enumerate(_largest_remainder(len(members), ratios)):
            parts[k].extend(shuffled[start : start + count])
            start += count
    order = {sid: i for i, sid in enumerate(ids)}
    train, val, test = (sorted(p, key=order.__getitem__) for p in parts)
    return DatasetSplits(train, val, test, ratios, seed)


# -- resizing and normalization ---------------------------------------------------


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, (src - lo).astype(np.float32)


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize (align_corners=False), clamped at edges."""
    if out_h < 1 or out_w < 1:
        raise DataError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(pixels, dtype=np.float32)
    if img.size == 0:
        raise DataError("cannot resize an empty image")
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    y0, y1, wy = _bilinear_axis(h, out_h)
    x0, x1, wx = _bilinear_axis(w, out_w)
    extra = (1,) * (img.ndim - 2)
    wy = wy.reshape((-1, 1) + extra)
    rows = img[y0] * (1 - wy) + img[y1] * wy
    wx = wx.reshape((1, -1) + extra)
    out = rows[:, x0] * (1 - wx) + rows[:, x1] * wx
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3 or any(s <= 0 for s in self.std):
            raise ConfigError(f"normalization needs 3 means and 3 positive stds, got {self}")


IMAGENET_STATS = NormalizationStats(mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225))


def normalize(pixels: np.ndarray, stats: NormalizationStats = IMAGENET_STATS) -> np.ndarray:
    """H x W x 3 in [0, 1] -> 3 x H x W with (x - mean) / std per channel."""
    img = np.asarray(pixels, dtype=np.float32)
    mean = np.asarray(stats.mean, dtype=np.float32)
    std = np.asarray(stats.std, dtype=np.float32)
    return np.ascontiguousarray(((img - mean) / std).transpose(2, 0, 1))


def denormalize(chw: np.ndarray, stats: NormalizationStats = IMAGENET_STATS) -> np.ndarray:
    mean = np.asarray(stats.mean, dtype=np.float32)
    std = np.asarray(stats.std, dtype=np.float32)
    return np.asarray(chw, dtype=np.float32).transpose(1, 2, 0) * std + mean


# -- augmentation -----------------------------------------------------------------


@dataclass
class AugmentationConfig:
    enabled: bool = True
    crop_scale: tuple[float, float] = (0.8, 1.0)
    crop_aspect: tuple[float, float] = (3 / 4, 4 / 3)
    rotation_degrees: float = 20.0
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    jitter_factor_range: tuple[float, float] = (0.8, 1.2)
    grayscale_prob: float = 0.1
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    blur_kernel: int = 5
    output_size: int = 224

    def validate(self) -> "AugmentationConfig":
        for name in ("hflip_prob", "vflip_prob", "grayscale_prob", "blur_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        for name in ("crop_scale", "crop_aspect", "jitter_factor_range", "blur_sigma_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} must be a nonempty interval, got ({lo}, {hi})")
        if not 0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0:
            raise ConfigError(f"crop_scale must lie in (0, 1], got {self.crop_scale}")
        if self.crop_aspect[0] <= 0 or self.jitter_factor_range[0] < 0 or self.blur_sigma_range[0] <= 0:
            raise ConfigError("crop_aspect and blur sigma must be positive, jitter factors nonnegative")
        if self.rotation_degrees < 0:
            raise ConfigError(f"rotation_degrees must be >= 0, got {self.rotation_degrees}")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigError(f"blur_kernel must be a positive odd integer, got {self.blur_kernel}")
        if self.output_size < 1:
            raise ConfigError(f"output_size must be positive, got {self.output_size}")
        return self


def sample_seed(global_seed: int, epoch: int, sample_index: int) -> int:
    return derive_seed(global_seed, epoch, sample_index)


def _crop_box(h: int, w: int, cfg: AugmentationConfig, rng: Rng) -> tuple[int, int, int, int]:
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        aspect = rng.uniform(*cfg.crop_aspect)
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = rng.randint(0, h - ch)
            left = rng.randint(0, w - cw)
            return top, left, ch, cw
    ratio = w / h
    if ratio < cfg.crop_aspect[0]:
        cw, ch = w, max(1, int(round(w / cfg.crop_aspect[0])))
    elif ratio > cfg.crop_aspect[1]:
        ch, cw = h, max(1, int(round(h * cfg.crop_aspect[1])))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image centre; bilinear sampling, zeros outside the source."""
    if degrees == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    src_x = np.clip(c * dx + s * dy + cx, -2.0, w)
    src_y = np.clip(-s * dx + c * dy + cy, -2.0, h)
    padded = np.pad(img, ((2, 2), (2, 2), (0, 0)))
    pw = w + 4
    flat = padded.reshape(-1, img.shape[2])
    x0 = np.floor(src_x)
    y0 = np.floor(src_y)
    fx = (src_x - x0).astype(np.float32).reshape(-1, 1)
    fy = (src_y - y0).astype(np.float32).reshape(-1, 1)
    idx = ((y0.astype(np.int64) + 2) * pw + x0.astype(np.int64) + 2).ravel()
    top = flat.take(idx, axis=0) * (1 - fx) + flat.take(idx + 1, axis=0) * fx
    bottom = flat.take(idx + pw, axis=0) * (1 - fx) + flat.take(idx + pw + 1, axis=0) * fx
    return (top * (1 - fy) + bottom * fy).reshape(img.shape)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def vflip(img: np.ndarray) -> np.ndarray:
    return img[::-1].copy()


LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def luma(img: np.ndarray) -> np.ndarray:
    return img @ LUMA


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(img * np.float32(factor), 0.0, 1.0)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    m = np.float32(luma(img).mean())
    return np.clip((img - m) * np.float32(factor) + m, 0.0, 1.0)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    gray = luma(img)[..., None]
    return np.clip((img - gray) * np.float32(factor) + gray, 0.0, 1.0)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    return np.repeat(luma(img)[..., None], 3, axis=2)


def gaussian_blur(img: np.ndarray, sigma: float, kernel: int = 5) -> np.ndarray:
    """Separable Gaussian blur with reflect padding."""
    r = kernel // 2
    taps = np.exp(-(np.arange(-r, r + 1, dtype=np.float64) ** 2) / (2.0 * sigma * sigma))
    taps = (taps / taps.sum()).astype(np.float32)
    h, w = img.shape[:2]
    mode = "reflect" if min(h, w) > r else "symmetric"
    p = np.pad(img, ((r, r), (0, 0), (0, 0)), mode=mode)
    out = sum(taps[k] * p[k : k + h] for k in range(kernel))
    p = np.pad(out, ((0, 0), (r, r), (0, 0)), mode=mode)
    return sum(taps[k] * p[:, k : k + w] for k in range(kernel))


def augment(pixels: np.ndarray, config: AugmentationConfig, seed: int) -> np.ndarray:
    """Training-time transform chain; output is output_size^2 x 3 in [0, 1].

    Every random quantity is drawn, in a fixed order, from ``Rng(seed)`` even
    when the corresponding transform ends up skipped.
    """
    img = np.asarray(pixels, dtype=np.float32)
    h, w = img.shape[:2]
    if h < 2 or w < 2:
        raise DataError(f"augmentation needs at least a 2x2 image, got {h}x{w}")
    rng = Rng(seed)
    top, left, ch, cw = _crop_box(h, w, config, rng)
    size = config.output_size
    img = resize_bilinear(img[top : top + ch, left : left + cw], size, size)
    angle = rng.uniform(-config.rotation_degrees, config.rotation_degrees)
    do_hflip = rng.random() < config.hflip_prob
    do_vflip = rng.random() < config.vflip_prob
    lo, hi = config.jitter_factor_range
    brightness, contrast, saturation = rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)
    do_gray = rng.random() < config.grayscale_prob
    do_blur = rng.random() < config.blur_prob
    sigma = rng.uniform(*config.blur_sigma_range)

    img = rotate(img, angle)
    if do_hflip:
        img = hflip(img)
    if do_vflip:
        img = vflip(img)
    img = adjust_brightness(img, brightness)
    img = adjust_contrast(img, contrast)
    img = adjust_saturation(img, saturation)
    if do_gray:
        img = to_grayscale(img)
    if do_blur:
        img = gaussian_blur(img, sigma, config.blur_kernel)
    return np.clip(img, 0.0, 1.0).astype(np.float32, copy=False)


def preprocess_eval(pixels: np.ndarray, image_size: int, stats: NormalizationStats = IMAGENET_STATS) -> np.ndarray:
    return normalize(resize_bilinear(pixels, image_size, image_size), stats)


# -- batching -------------------------------------------------------------------


def make_batches(n: int, batch_size: int, seed: int = 0, shuffle: bool = True, epoch: int = 0) -> list[np.ndarray]:
    """Index batches over ``n`` samples; the last partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if n < 1:
        raise DataError("cannot batch an empty split")
    order = np.array(Rng(derive_seed(seed, epoch)).permutation(n) if shuffle else range(n), dtype=np.int64)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def load_batch(
    dataset: LabeledDataset,
    indices: Sequence[int],
    image_size: int,
    augmentation: AugmentationConfig | None = None,
    global_seed: int = 0,
    epoch: int = 0,
    stats: NormalizationStats = IMAGENET_STATS,
) -> tuple[np.ndarray, np.ndarray]:
    """Images B x 3 x S x S (float32, normalized) and labels B x 1."""
    images = np.empty((len(indices), 3, image_size, image_size), dtype=np.float32)
    labels = np.empty((len(indices), 1), dtype=np.float32)
    for row, idx in enumerate(indices):
        sample = dataset.samples[int(idx)]
        if augmentation is not None and augmentation.enabled:
            pix = augment(sample.pixels, augmentation, sample_seed(global_seed, epoch, int(idx)))
            if pix.shape[0] != image_size:
                pix = resize_bilinear(pix, image_size, image_size)
            images[row] = normalize(pix, stats)
        else:
            images[row] = preprocess_eval(sample.pixels, image_size, stats)
        labels[row, 0] = sample.label
    return images, labels


def write_splits(dataset: LabeledDataset, splits: DatasetSplits, out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, ids in splits.as_dict().items():
        write_manifest(out / f"{name}.csv", dataset.subset(ids).samples)
    counts = {
        name: {"total": len(ids), "class_0": int((dataset.subset(ids).labels == 0).sum()) if ids else 0,
               "class_1": int((dataset.subset(ids).labels == 1).sum()) if ids else 0}
        for name, ids in splits.as_dict().items()
    }
    meta = {"seed": splits.seed, "ratios": list(splits.ratios), "counts": counts}
    atomic_write_text(out / "split.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
