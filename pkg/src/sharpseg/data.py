"""Synthetic dataset generation, tensor/PGM file formats, dataset manifests.

The synthetic generator stands in for real image/mask corpora: each sample
is a handful of random ellipses per foreground class, rasterized exactly
into the mask, with class-dependent intensities, Gaussian boundary blur,
additive noise, and optional dark "hair" strokes in the image.

File formats (all little-endian, bit-exact round-trips):

* tensor file: magic ``STNSR1\\n``, uint32 header length, UTF-8 JSON header
  ``{"dtype":"f32","order":"NCHW","shape":[n,c,h,w]}``, raw float32 payload
* PGM: binary ``P5``, maxval 255, [0,1] scaled linearly to 0..255
* manifest: ``dataset.json`` with num_classes/in_channels/h/w and a list of
  image/mask file pairs relative to the manifest directory
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

TENSOR_MAGIC = b"STNSR1\n"
MANIFEST_NAME = "dataset.json"


class FormatError(ValueError):
    """A file does not conform to one of the on-disk formats."""


class GenerationError(RuntimeError):
    """Synthetic generation could not satisfy its constraints."""


@dataclass
class Sample:
    """One image/mask pair: image (1,c,h,w) in [0,1], mask (1,1,h,w) labels."""

    image: np.ndarray
    mask: np.ndarray


@dataclass
class SyntheticConfig:
    n_samples: int = 20
    h: int = 64
    w: int = 64
    num_classes: int = 2
    in_channels: int = 1
    boundary_blur_sigma: float = 1.0
    hair: bool = False
    noise_std: float = 0.02
    roi_area_range: tuple[float, float] = (0.05, 0.35)
    contrast: float = 0.7  # background-to-foreground intensity spread
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.h % 16 or self.w % 16 or self.h < 16 or self.w < 16:
            raise ValueError(f"h and w must be multiples of 16, got "
                             f"{self.h}x{self.w}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (background + roi)")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        lo, hi = self.roi_area_range
        if not (0.0 < lo < hi < 1.0):
            raise ValueError(f"roi_area_range must satisfy 0 < low < high < 1, "
                             f"got {self.roi_area_range}")
        if self.boundary_blur_sigma < 0 or self.noise_std < 0:
            raise ValueError("blur sigma and noise std must be >= 0")
        if not 0.0 < self.contrast <= 1.0:
            raise ValueError("contrast must be in (0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass
class DatasetManifest:
    num_classes: int
    in_channels: int
    h: int
    w: int
    samples: list[dict] = field(default_factory=list)
    root: str = "."


# ----------------------------------------------------------- generation

def _draw_mask(rng, cfg: SyntheticConfig) -> np.ndarray:
    yy, xx = np.mgrid[0:cfg.h, 0:cfg.w].astype(np.float64)
    mask = np.zeros((cfg.h, cfg.w), dtype=np.int64)
    scale = min(cfg.h, cfg.w)
    for cls in range(1, cfg.num_classes):
        for _ in range(int(rng.integers(1, 4))):
            cy = rng.uniform(0.2, 0.8) * cfg.h
            cx = rng.uniform(0.2, 0.8) * cfg.w
            a = rng.uniform(0.08, 0.28) * scale
            b = rng.uniform(0.08, 0.28) * scale
            theta = rng.uniform(0, math.pi)
            ct, st = math.cos(theta), math.sin(theta)
            u = (xx - cx) * ct + (yy - cy) * st
            v = -(xx - cx) * st + (yy - cy) * ct
            mask[(u / a) ** 2 + (v / b) ** 2 <= 1.0] = cls
    return mask


def _hair_strokes(rng, img: np.ndarray) -> None:
    h, w = img.shape
    for _ in range(int(rng.integers(2, 5))):
        y = rng.uniform(0, h)
        x = rng.uniform(0, w)
        angle = rng.uniform(0, 2 * math.pi)
        shade = rng.uniform(0.02, 0.15)
        for _ in range(int(2.5 * max(h, w))):
            iy, ix = int(y), int(x)
            if 0 <= iy < h and 0 <= ix < w:
                img[iy, ix] = shade
            angle += rng.uniform(-0.3, 0.3)
            y += 0.5 * math.sin(angle)
            x += 0.5 * math.cos(angle)


def generate_sample(cfg: SyntheticConfig, index: int) -> Sample:
    """Deterministic per-sample generation from seed XOR sample index."""
    rng = np.random.default_rng(cfg.seed ^ index)
    lo, hi = cfg.roi_area_range
    for _ in range(100):
        mask = _draw_mask(rng, cfg)
        frac = np.count_nonzero(mask) / mask.size
        if lo <= frac <= hi:
            break
    else:
        raise GenerationError(
            f"sample {index}: could not hit foreground area in "
            f"[{lo}, {hi}] after 100 attempts")

    # low contrast makes ROI and background nearly indistinguishable by
    # intensity alone, leaving the (blurred) boundary as the main cue
    levels = np.linspace(0.5 - cfg.contrast / 2, 0.5 + cfg.contrast / 2,
                         cfg.num_classes)
    base = levels[mask] + rng.uniform(-0.05, 0.05)
    if cfg.boundary_blur_sigma > 0:
        base = gaussian_filter(base, sigma=cfg.boundary_blur_sigma)
    if cfg.hair:
        _hair_strokes(rng, base)
    channels = []
    for _ in range(cfg.in_channels):
        ch = base + rng.normal(0.0, cfg.noise_std, size=base.shape)
        channels.append(np.clip(ch, 0.0, 1.0))
    image = np.stack(channels)[None].astype(np.float32)
    return Sample(image=image, mask=mask[None, None].astype(np.float32))


def generate_synthetic(cfg: SyntheticConfig) -> tuple[list[Sample], DatasetManifest]:
    samples = [generate_sample(cfg, i) for i in range(cfg.n_samples)]
    manifest = DatasetManifest(
        num_classes=cfg.num_classes, in_channels=cfg.in_channels,
        h=cfg.h, w=cfg.w,
        samples=[{"image": f"img_{i:04d}.tnsr", "mask": f"msk_{i:04d}.tnsr"}
                 for i in range(cfg.n_samples)])
    return samples, manifest


# ----------------------------------------------------------- tensor files

def save_tensor(path, t: np.ndarray) -> None:
    """Write a rank-4 float32 tensor in the STNSR1 container."""
    arr = np.ascontiguousarray(t, dtype=np.float32)
    if arr.ndim != 4:
        raise FormatError(f"tensor files hold rank-4 arrays, got {arr.shape}")
    header = json.dumps({"dtype": "f32", "order": "NCHW",
                         "shape": list(arr.shape)}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(arr.astype("<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(TENSOR_MAGIC):
        raise FormatError(f"{path}: bad magic, not a tensor file")
    off = len(TENSOR_MAGIC)
    if len(blob) < off + 4:
        raise FormatError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unparseable header: {e}") from e
    off += hlen
    if header.get("dtype") != "f32" or header.get("order") != "NCHW":
        raise FormatError(f"{path}: unsupported dtype/order {header}")
    shape = header.get("shape")
    if (not isinstance(shape, list) or len(shape) != 4
            or any(not isinstance(s, int) or s < 1 for s in shape)):
        raise FormatError(f"{path}: bad shape {shape}")
    expected = int(np.prod(shape)) * 4
    payload = blob[off:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload length {len(payload)} does not "
                          f"match shape {shape} ({expected} bytes)")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if not np.isfinite(arr).all():
        raise FormatError(f"{path}: non-finite values rejected")
    return arr


# ------------------------------------------------------------- pgm files

def write_pgm(path, image: np.ndarray) -> None:
    """Write a (1,1,h,w) array with values in [0,1] as binary PGM (P5)."""
    img = np.asarray(image)
    if img.ndim != 4 or img.shape[0] != 1 or img.shape[1] != 1:
        raise FormatError(f"write_pgm needs a (1,1,h,w) array, got {img.shape}")
    h, w = img.shape[2], img.shape[3]
    scaled = np.rint(np.clip(img[0, 0], 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(scaled.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with optional '#' comment lines
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise FormatError(f"{path}: bad PGM header: {e}") from e
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    payload = blob[pos:pos + h * w]
    if len(payload) != h * w:
        raise FormatError(f"{path}: expected {h * w} pixels, got {len(payload)}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return (img[None, None].astype(np.float32)) / 255.0


# -------------------------------------------------------------- manifests

def write_dataset(samples: list[Sample], manifest: DatasetManifest, out_dir) -> str:
    """Write every sample's tensors plus dataset.json; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    for sample, rec in zip(samples, manifest.samples):
        save_tensor(os.path.join(out_dir, rec["image"]), sample.image)
        save_tensor(os.path.join(out_dir, rec["mask"]), sample.mask)
    doc = {"num_classes": manifest.num_classes,
           "in_channels": manifest.in_channels,
           "h": manifest.h, "w": manifest.w,
           "samples": manifest.samples}
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_manifest(path) -> DatasetManifest:
    """Read dataset.json and validate every referenced file and shape."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    for key in ("num_classes", "in_channels", "h", "w", "samples"):
        if key not in doc:
            raise FormatError(f"{path}: manifest missing key {key!r}")
    root = os.path.dirname(os.path.abspath(path))
    manifest = DatasetManifest(num_classes=doc["num_classes"],
                               in_channels=doc["in_channels"],
                               h=doc["h"], w=doc["w"],
                               samples=doc["samples"], root=root)
    for rec in manifest.samples:
        for role in ("image", "mask"):
            fpath = os.path.join(root, rec[role])
            if not os.path.exists(fpath):
                raise FormatError(f"manifest references missing file: {fpath}")
            arr = load_tensor(fpath)
            want_c = manifest.in_channels if role == "image" else 1
            want = (1, want_c, manifest.h, manifest.w)
            if arr.shape != want:
                raise FormatError(f"{fpath}: shape {arr.shape} disagrees with "
                                  f"manifest {want}")
            if role == "mask":
                labels = np.unique(arr)
                if np.any(labels != np.rint(labels)):
                    raise FormatError(f"{fpath}: mask labels must be integral")
                if labels.min() < 0 or labels.max() >= manifest.num_classes:
                    raise FormatError(
                        f"{fpath}: mask label out of range 0..{manifest.num_classes - 1}")
    return manifest


def load_samples(manifest: DatasetManifest) -> list[Sample]:
    out = []
    for rec in manifest.samples:
        out.append(Sample(
            image=load_tensor(os.path.join(manifest.root, rec["image"])),
            mask=load_tensor(os.path.join(manifest.root, rec["mask"]))))
    return out
