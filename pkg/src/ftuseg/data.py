"""Synthetic FTU-style tiles: generation, folds, augmentation, color transfer.

Every sample is deterministic in ``(seed, organ, domain, size)``.  The mask
is drawn from a seed stream that excludes the domain, so the two domains
render the *same* mask with different staining: that is what makes paired
domain-gap measurements possible.  Five organ styles control blob count,
radius, and boundary wobble (see ``ORGAN_STYLES``; radii are quoted at the
reference tile size of 64 px and scale linearly with size).

Foreground fraction is kept inside [0.02, 0.40] by dropping or adding blobs
deterministically from the same stream.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .tensor import Array, _bilinear_weights


class Organ(str, Enum):
    KIDNEY = "kidney-like"
    LARGE_INTESTINE = "large-intestine-like"
    LUNG = "lung-like"
    PROSTATE = "prostate-like"
    SPLEEN = "spleen-like"


class Domain(str, Enum):
    HPA = "hpa-like"
    HUBMAP = "hubmap-like"


@dataclass(frozen=True)
class OrganStyle:
    """Blob-layout and rendering parameters for one organ look."""

    count: tuple[int, int]          # blobs per tile (inclusive range)
    radius: tuple[float, float]     # px at size 64, scales with size
    wobble: tuple[float, float]     # boundary wobble amplitude (fraction of radius)
    wobble_freq: tuple[int, int]    # lobes around the boundary
    tissue_rgb: tuple[float, float, float]
    blob_rgb: tuple[float, float, float]
    texture_amp: float


ORGAN_STYLES: dict[Organ, OrganStyle] = {
    Organ.KIDNEY: OrganStyle(
        count=(2, 4), radius=(8.0, 13.0), wobble=(0.08, 0.18), wobble_freq=(3, 6),
        tissue_rgb=(0.82, 0.62, 0.72), blob_rgb=(0.45, 0.28, 0.52), texture_amp=0.06,
    ),
    Organ.LARGE_INTESTINE: OrganStyle(
        count=(1, 3), radius=(10.0, 16.0), wobble=(0.15, 0.30), wobble_freq=(4, 8),
        tissue_rgb=(0.85, 0.66, 0.74), blob_rgb=(0.55, 0.33, 0.50), texture_amp=0.05,
    ),
    Organ.LUNG: OrganStyle(
        count=(6, 12), radius=(3.0, 6.0), wobble=(0.05, 0.15), wobble_freq=(3, 5),
        tissue_rgb=(0.88, 0.72, 0.78), blob_rgb=(0.50, 0.38, 0.55), texture_amp=0.04,
    ),
    Organ.PROSTATE: OrganStyle(
        count=(3, 6), radius=(6.0, 10.0), wobble=(0.10, 0.22), wobble_freq=(4, 7),
        tissue_rgb=(0.80, 0.60, 0.70), blob_rgb=(0.42, 0.30, 0.48), texture_amp=0.05,
    ),
    Organ.SPLEEN: OrganStyle(
        count=(1, 2), radius=(11.0, 16.0), wobble=(0.06, 0.14), wobble_freq=(2, 4),
        tissue_rgb=(0.78, 0.58, 0.68), blob_rgb=(0.38, 0.25, 0.45), texture_amp=0.07,
    ),
}

# Per-domain staining: channel gain, channel offset, pixel noise sigma.
DOMAIN_RENDER: dict[Domain, tuple[tuple[float, float, float], tuple[float, float, float], float]] = {
    Domain.HPA: ((0.94, 0.82, 1.06), (0.00, -0.02, 0.04), 0.012),
    Domain.HUBMAP: ((1.06, 0.86, 0.92), (0.05, 0.01, -0.01), 0.028),
}

FRACTION_LO = 0.02
FRACTION_HI = 0.40


@dataclass
class Sample:
    """One tile: float image in [0, 1], binary mask, and its provenance."""

    sid: str
    organ: Organ
    domain: Domain
    seed: int
    image: Array  # [3, H, W] float64 in [0, 1]
    mask: Array   # [1, H, W] float64 in {0, 1}

    @property
    def size(self) -> int:
        return self.image.shape[-1]


@dataclass(frozen=True)
class Blob:
    cx: float
    cy: float
    radius: float
    ecc: float
    wobble_amp: float
    wobble_freq: int
    wobble_phase: float


def _organ_index(organ: Organ) -> int:
    return list(Organ).index(organ)


def _draw_blob(rng: np.random.Generator, style: OrganStyle, size: int) -> Blob:
    px = size / 64.0
    return Blob(
        cx=float(rng.uniform(0.12, 0.88) * size),
        cy=float(rng.uniform(0.12, 0.88) * size),
        radius=float(rng.uniform(*style.radius) * px),
        ecc=float(rng.uniform(0.75, 1.3)),
        wobble_amp=float(rng.uniform(*style.wobble)),
        wobble_freq=int(rng.integers(style.wobble_freq[0], style.wobble_freq[1] + 1)),
        wobble_phase=float(rng.uniform(0.0, 2.0 * np.pi)),
    )


def _rasterize(blob: Blob, size: int) -> Array:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xx - blob.cx
    dy = (yy - blob.cy) / blob.ecc
    dist = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    boundary = blob.radius * (
        1.0 + blob.wobble_amp * np.sin(blob.wobble_freq * theta + blob.wobble_phase)
    )
    return dist < boundary


def build_blob_mask(seed: int, organ: Organ, size: int) -> tuple[Array, list[Blob]]:
    """Binary mask ``[1, size, size]`` plus the blob layout that produced it.

    Domain-independent by construction.  The foreground fraction is forced
    into [0.02, 0.40] by dropping the most recent blob (too full) or drawing
    extra blobs (too empty) from the same stream.
    """
    organ = Organ(organ)
    style = ORGAN_STYLES[organ]
    rng = np.random.default_rng([seed, _organ_index(organ), size, 0xA5])
    count = int(rng.integers(style.count[0], style.count[1] + 1))
    blobs = [_draw_blob(rng, style, size) for _ in range(count)]
    rasters = [_rasterize(b, size) for b in blobs]

    def fraction() -> float:
        if not rasters:
            return 0.0
        return float(np.logical_or.reduce(rasters).mean())

    while fraction() > FRACTION_HI and len(blobs) > 1:
        blobs.pop()
        rasters.pop()
    guard = 0
    while fraction() < FRACTION_LO and guard < 64:
        blob = _draw_blob(rng, style, size)
        blobs.append(blob)
        rasters.append(_rasterize(blob, size))
        guard += 1
    mask = np.logical_or.reduce(rasters).astype(np.float64)[None]
    return mask, blobs


def draw_blob_layout(seed: int, organ: Organ, size: int) -> list[Blob]:
    """Final blob layout for a sample (after fraction corrections)."""
    return build_blob_mask(seed, organ, size)[1]


def _smooth_field(rng: np.random.Generator, channels: int, size: int) -> Array:
    """Low-frequency noise in roughly [-1, 1]: coarse normal grid, upsampled."""
    grid = max(2, size // 8)
    coarse = rng.normal(0.0, 0.55, size=(channels, grid, grid))
    return np.clip(resize_image(coarse, size, size), -1.0, 1.0)


def generate_synthetic_sample(seed: int, organ, domain, size: int = 64) -> Sample:
    """Deterministic synthetic tile for ``(seed, organ, domain, size)``."""
    if size < 16:
        raise ValueError(f"tile size must be >= 16, got {size}")
    organ = Organ(organ)
    domain = Domain(domain)
    style = ORGAN_STYLES[organ]
    mask, _ = build_blob_mask(seed, organ, size)
    rng = np.random.default_rng(
        [seed, _organ_index(organ), list(Domain).index(domain), size, 0xB7]
    )
    tissue = np.asarray(style.tissue_rgb)[:, None, None]
    blob_color = np.asarray(style.blob_rgb)[:, None, None]
    base = tissue + style.texture_amp * _smooth_field(rng, 3, size)
    interior = blob_color + 0.6 * style.texture_amp * _smooth_field(rng, 3, size)
    image = base * (1.0 - mask) + interior * mask
    gain, offset, noise_sigma = DOMAIN_RENDER[domain]
    image = image * np.asarray(gain)[:, None, None] + np.asarray(offset)[:, None, None]
    image = image + rng.normal(0.0, noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    sid = f"{organ.value}_{domain.value}_{seed}"
    return Sample(sid=sid, organ=organ, domain=domain, seed=seed, image=image, mask=mask)


def generate_dataset(samples_per_organ: int, size: int = 64, seed: int = 42) -> list[Sample]:
    """Balanced dataset: ``samples_per_organ`` tiles per organ, domains alternating."""
    if samples_per_organ < 1:
        raise ValueError("samples_per_organ must be >= 1")
    samples: list[Sample] = []
    domains = list(Domain)
    for organ_idx, organ in enumerate(Organ):
        for i in range(samples_per_organ):
            sample_seed = seed * 100_000 + organ_idx * 10_000 + i
            sample = generate_synthetic_sample(
                sample_seed, organ, domains[i % len(domains)], size
            )
            samples.append(replace(sample, sid=f"{organ.value}_{i:03d}"))
    return samples


# -- stratified folds ---------------------------------------------------------


def stratified_kfold(samples: list[Sample], k: int, seed: int) -> list[list[str]]:
    """Partition sample ids into ``k`` folds with per-organ counts within 1."""
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    by_organ: dict[Organ, list[str]] = {}
    for sample in samples:
        by_organ.setdefault(sample.organ, []).append(sample.sid)
    folds: list[list[str]] = [[] for _ in range(k)]
    for organ_idx, organ in enumerate(sorted(by_organ, key=lambda o: o.value)):
        ids = by_organ[organ]
        if len(ids) < k:
            raise ValueError(
                f"organ {organ.value} has {len(ids)} samples, fewer than {k} folds"
            )
        rng = np.random.default_rng([seed, 0xF0, organ_idx])
        order = list(rng.permutation(len(ids)))
        # Rotate the starting fold per organ so remainders spread out.
        for j, pick in enumerate(order):
            folds[(j + organ_idx) % k].append(ids[pick])
    return folds


# -- augmentation --------------------------------------------------------------


def flip_h(arr: Array) -> Array:
    return np.flip(arr, axis=-1).copy()


def flip_v(arr: Array) -> Array:
    return np.flip(arr, axis=-2).copy()


def rot90k(arr: Array, k: int) -> Array:
    return np.rot90(arr, k=k, axes=(-2, -1)).copy()


def crop_resize(arr: Array, y0: int, x0: int, ch: int, cw: int,
                out_h: int, out_w: int, binarize: bool = False) -> Array:
    window = arr[:, y0 : y0 + ch, x0 : x0 + cw]
    out = resize_image(window, out_h, out_w)
    if binarize:
        out = (out > 0.5).astype(np.float64)
    return out


def apply_spatial_ops(arr: Array, ops: list[tuple], binarize: bool = False) -> Array:
    """Replay a recorded spatial-op trace (used for masks and for tests)."""
    out = arr
    for op in ops:
        if op[0] == "hflip":
            out = flip_h(out)
        elif op[0] == "vflip":
            out = flip_v(out)
        elif op[0] == "rot90":
            out = rot90k(out, op[1])
        elif op[0] == "crop_resize":
            _, y0, x0, ch, cw, oh, ow = op
            out = crop_resize(out, y0, x0, ch, cw, oh, ow, binarize=binarize)
        else:
            raise ValueError(f"unknown spatial op {op[0]!r}")
    return out


def augment_arrays(image: Array, mask: Array, seed: int) -> tuple[Array, Array, list[tuple]]:
    """Seeded augmentation pipeline; returns the spatial-op trace as well.

    Spatial ops (flips, 90-degree rotations, crop-and-resize) hit image and
    mask identically; photometric ops (noise, brightness/contrast, hue) hit
    the image only.  Every op fires independently with probability 0.5.
    """
    rng = np.random.default_rng([seed, 0xAF])
    h, w = image.shape[-2], image.shape[-1]
    ops: list[tuple] = []
    if rng.random() < 0.5:
        ops.append(("hflip",))
    if rng.random() < 0.5:
        ops.append(("vflip",))
    if rng.random() < 0.5:
        ops.append(("rot90", int(rng.integers(1, 4))))
    if rng.random() < 0.5:
        scale = rng.uniform(0.8, 1.0)
        ch = max(1, int(round(scale * h)))
        cw = max(1, int(round(scale * w)))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        ops.append(("crop_resize", y0, x0, ch, cw, h, w))
    out_image = apply_spatial_ops(image, ops)
    out_mask = apply_spatial_ops(mask, ops, binarize=True)
    if rng.random() < 0.5:
        sigma = rng.uniform(0.0, 0.03)
        out_image = out_image + rng.normal(0.0, 1.0, size=out_image.shape) * sigma
    if rng.random() < 0.5:
        shift = rng.uniform(-0.15, 0.15)
        gain = rng.uniform(0.85, 1.15)
        out_image = (out_image - 0.5) * gain + 0.5 + shift
    if rng.random() < 0.5:
        hue_shift = rng.uniform(-0.05, 0.05)
        hsv = rgb_to_hsv(np.clip(out_image, 0.0, 1.0).transpose(1, 2, 0))
        hsv[..., 0] = (hsv[..., 0] + hue_shift) % 1.0
        out_image = hsv_to_rgb(hsv).transpose(2, 0, 1)
    out_image = np.clip(out_image, 0.0, 1.0)
    return out_image, out_mask, ops


def augment(sample: Sample, seed: int) -> Sample:
    image, mask, _ = augment_arrays(sample.image, sample.mask, seed)
    return replace(sample, image=image, mask=mask)


# -- color normalization --------------------------------------------------------

# RGB -> LMS cone response (Reinhard-style color transfer); the decorrelating
# log-LMS rotation below gives the l-alpha-beta-like axes the stats live in.
_RGB2LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
_LMS2RGB = np.linalg.inv(_RGB2LMS)
_LOGLMS2LAB = np.diag([1.0 / np.sqrt(3.0), 1.0 / np.sqrt(6.0), 1.0 / np.sqrt(2.0)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
_LAB2LOGLMS = np.linalg.inv(_LOGLMS2LAB)
_LMS_FLOOR = 1e-8
_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class ColorStats:
    """Per-channel mean/std in the decorrelated log color space."""

    mean: Array
    std: Array


def rgb_to_lab(image: Array) -> Array:
    pixels = image.reshape(3, -1)
    lms = np.maximum(_RGB2LMS @ pixels, _LMS_FLOOR)
    lab = _LOGLMS2LAB @ np.log10(lms)
    return lab.reshape(image.shape)


def lab_to_rgb(lab: Array) -> Array:
    pixels = lab.reshape(3, -1)
    lms = np.power(10.0, _LAB2LOGLMS @ pixels)
    rgb = _LMS2RGB @ lms
    return rgb.reshape(lab.shape)


def compute_color_stats(image: Array) -> ColorStats:
    lab = rgb_to_lab(image).reshape(3, -1)
    return ColorStats(mean=lab.mean(axis=1), std=lab.std(axis=1))


def pooled_color_stats(images: list[Array]) -> ColorStats:
    """Stats over the pooled pixels of several images (the mosaic-style target)."""
    if not images:
        raise ValueError("need at least one image")
    labs = np.concatenate([rgb_to_lab(img).reshape(3, -1) for img in images], axis=1)
    return ColorStats(mean=labs.mean(axis=1), std=labs.std(axis=1))


def color_normalize(image: Array, target: ColorStats, clip: bool = True) -> Array:
    """Match the image's decorrelated channel stats to ``target``.

    A channel with degenerate spread (std below 1e-8) is mean-shifted only.
    Output is clamped to [0, 1] unless ``clip`` is False (useful when
    checking the statistics themselves).
    """
    lab = rgb_to_lab(image)
    flat = lab.reshape(3, -1)
    src_mean = flat.mean(axis=1)
    src_std = flat.std(axis=1)
    out = np.empty_like(flat)
    for c in range(3):
        centered = flat[c] - src_mean[c]
        if src_std[c] < _STD_FLOOR:
            out[c] = centered + target.mean[c]
        else:
            out[c] = centered * (target.std[c] / src_std[c]) + target.mean[c]
    rgb = lab_to_rgb(out.reshape(lab.shape))
    return np.clip(rgb, 0.0, 1.0) if clip else rgb


# -- resizing ---------------------------------------------------------------------


def resize_image(image: Array, out_h: int, out_w: int) -> Array:
    """Bilinear resize of a ``[C, h, w]`` array (half-pixel-center sampling)."""
    if image.ndim != 3:
        raise ValueError(f"expected [C, h, w], got shape {image.shape}")
    wr = _bilinear_weights(image.shape[1], int(out_h))
    wc = _bilinear_weights(image.shape[2], int(out_w))
    return np.matmul(np.matmul(wr, image), wc.T)


def resize_mask(mask: Array, out_h: int, out_w: int) -> Array:
    """Resize a binary mask with the image operator, re-binarized at 0.5."""
    return (resize_image(mask, out_h, out_w) > 0.5).astype(np.float64)


# -- image files ---------------------------------------------------------------


def write_ppm(path, image: Array) -> None:
    """Binary PPM (P6, maxval 255) from a ``[3, H, W]`` float image in [0, 1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3, H, W], got {image.shape}")
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape[1], image.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.transpose(1, 2, 0).tobytes())


def write_pgm(path, mask: Array) -> None:
    """Binary PGM (P5) from a ``[1, H, W]`` mask; foreground saved as 255."""
    if mask.ndim != 3 or mask.shape[0] != 1:
        raise ValueError(f"expected [1, H, W], got {mask.shape}")
    data = (np.asarray(mask[0]) != 0).astype(np.uint8) * 255
    h, w = mask.shape[1], mask.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_pnm(path, magic: bytes) -> tuple[int, int, Array]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(magic):
        raise ValueError(f"{path}: expected {magic.decode()} file")
    pos = len(magic)
    fields: list[int] = []
    while len(fields) < 3:
        if pos >= len(blob):
            raise ValueError(f"{path}: truncated header")
        ch = blob[pos : pos + 1]
        if ch == b"#":
            pos = blob.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end : end + 1].isspace():
                end += 1
            fields.append(int(blob[pos:end]))
            pos = end
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = w * h * channels
    raw = np.frombuffer(blob, dtype=np.uint8, count=expected, offset=pos)
    if raw.size != expected:
        raise ValueError(f"{path}: truncated pixel data")
    return w, h, raw


def read_ppm(path) -> Array:
    w, h, raw = _read_pnm(path, b"P6")
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> Array:
    w, h, raw = _read_pnm(path, b"P5")
    return (raw.reshape(1, h, w) > 127).astype(np.float64)


# -- dataset on disk -------------------------------------------------------------

MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ["sid", "organ", "domain", "seed", "size", "image", "mask"]


def save_dataset(out_dir, samples: list[Sample]) -> Path:
    """Write PPM/PGM pairs plus a manifest CSV; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / MANIFEST_NAME
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for sample in samples:
            image_rel = f"images/{sample.sid}.ppm"
            mask_rel = f"masks/{sample.sid}.pgm"
            write_ppm(out_dir / image_rel, sample.image)
            write_pgm(out_dir / mask_rel, sample.mask)
            writer.writerow({
                "sid": sample.sid,
                "organ": sample.organ.value,
                "domain": sample.domain.value,
                "seed": sample.seed,
                "size": sample.size,
                "image": image_rel,
                "mask": mask_rel,
            })
    return manifest


def load_dataset(data_dir) -> list[Sample]:
    """Read a dataset written by :func:`save_dataset` (8-bit quantized)."""
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {data_dir}")
    samples: list[Sample] = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            image = read_ppm(data_dir / row["image"])
            mask = read_pgm(data_dir / row["mask"])
            samples.append(Sample(
                sid=row["sid"],
                organ=Organ(row["organ"]),
                domain=Domain(row["domain"]),
                seed=int(row["seed"]),
                image=image,
                mask=mask,
            ))
    return samples
