"""Samples, dataset manifests, patch tiling, and geometric augmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import load_mask, load_ppm, save_mask, save_ppm

SPLITS = ("train", "val", "test")

# fixed input normalization: [0,1] then (x - 0.5) / 0.5 per channel
NORM_MEAN = 0.5
NORM_STD = 0.5


@dataclass
class Sample:
    image: np.ndarray          # float (3, H, W) in [0, 1]
    building_mask: np.ndarray  # uint8 (1, H, W) in {0, 1}
    road_mask: np.ndarray      # uint8 (1, H, W) in {0, 1}
    id: str
    source: str = "file"       # "file" or "synthetic"

    def __post_init__(self):
        hw = self.image.shape[1:]
        for name, m in (("building_mask", self.building_mask),
                        ("road_mask", self.road_mask)):
            if m.shape[1:] != hw:
                raise ValueError(f"{name} shape {m.shape} does not match image "
                                 f"spatial dims {hw}")
            vals = np.unique(m)
            if not np.isin(vals, (0, 1)).all():
                raise ValueError(f"{name} contains non-binary values {vals}")


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Model input normalization for a [0,1] image."""
    return (image - NORM_MEAN) / NORM_STD


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    image: str
    building: str
    road: str
    split: str


class Manifest:
    SCHEMA_VERSION = 1

    def __init__(self, entries: list[ManifestEntry], root: Path | None = None):
        self.entries = entries
        self.root = Path(root) if root is not None else Path(".")
        paths = [e.image for e in entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest image paths are not unique")
        for e in entries:
            if e.split not in SPLITS:
                raise ValueError(f"unknown split {e.split!r} for {e.image}")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("schema_version") != cls.SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported manifest schema version "
                             f"{doc.get('schema_version')}")
        entries = [ManifestEntry(**rec) for rec in doc["entries"]]
        m = cls(entries, root=path.parent)
        for e in entries:
            for p in (e.image, e.building, e.road):
                if not (m.root / p).exists():
                    raise FileNotFoundError(f"manifest references missing file {p}")
        return m

    def save(self, path) -> None:
        doc = {"schema_version": self.SCHEMA_VERSION,
               "entries": [vars(e) for e in self.entries]}
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def load_sample(self, entry: ManifestEntry) -> Sample:
        img = load_ppm(self.root / entry.image).astype(np.float32) / 255.0
        b = load_mask(self.root / entry.building)[None]
        r = load_mask(self.root / entry.road)[None]
        return Sample(img, b, r, id=Path(entry.image).stem, source="file")

    def load_split(self, name: str) -> list[Sample]:
        return [self.load_sample(e) for e in self.split(name)]


def write_dataset(samples_by_split: dict[str, list[Sample]], out_dir) -> Manifest:
    """Emit samples as PPM/PGM trees plus a manifest.json."""
    out = Path(out_dir)
    entries = []
    for split, samples in samples_by_split.items():
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        for s in samples:
            img8 = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
            save_ppm(img8, d / f"{s.id}.ppm")
            save_mask(s.building_mask[0], d / f"{s.id}_building.pgm")
            save_mask(s.road_mask[0], d / f"{s.id}_road.pgm")
            entries.append(ManifestEntry(
                image=f"{split}/{s.id}.ppm",
                building=f"{split}/{s.id}_building.pgm",
                road=f"{split}/{s.id}_road.pgm",
                split=split))
    manifest = Manifest(entries, root=out)
    manifest.save(out / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# patch tiling
# ---------------------------------------------------------------------------

def clip_patches(image_size: tuple[int, int], patch: int = 512,
                 stride_ratio: float = 0.5) -> list[tuple[int, int]]:
    """Regular-grid patch origins with an extra edge-aligned origin so the
    right/bottom borders are always covered."""
    h, w = image_size
    if h < patch or w < patch:
        raise ValueError(f"image {h}x{w} smaller than patch size {patch}")
    stride = int(round(patch * stride_ratio))
    if stride < 1:
        raise ValueError(f"stride ratio {stride_ratio} gives a zero stride")

    def axis_origins(extent: int) -> list[int]:
        xs = list(range(0, extent - patch + 1, stride))
        if xs[-1] != extent - patch:
            xs.append(extent - patch)
        return xs

    return [(r, c) for r in axis_origins(h) for c in axis_origins(w)]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-first bilinear resize, align-corners-false convention."""
    c, h, w = arr.shape
    sy, sx = h / out_h, w / out_w
    cy = (np.arange(out_h) + 0.5) * sy - 0.5
    cx = (np.arange(out_w) + 0.5) * sx - 0.5
    y0 = np.floor(cy).astype(int)
    x0 = np.floor(cx).astype(int)
    ty = (cy - y0)[None, :, None]
    tx = (cx - x0)[None, None, :]
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    a = arr[:, y0c][:, :, x0c]
    b = arr[:, y0c][:, :, x1c]
    cc = arr[:, y1c][:, :, x0c]
    d = arr[:, y1c][:, :, x1c]
    top = a * (1 - tx) + b * tx
    bot = cc * (1 - tx) + d * tx
    return top * (1 - ty) + bot * ty


def _rescale_to_same_size(arr: np.ndarray, factor: float, reflect_pad: bool,
                          binarize: bool) -> np.ndarray:
    """Scale then center-crop (factor > 1) or reflect-pad (factor < 1) back."""
    c, h, w = arr.shape
    nh, nw = max(int(round(h * factor)), 1), max(int(round(w * factor)), 1)
    scaled = bilinear_resize(arr.astype(np.float64), nh, nw)
    if nh >= h:
        top, left = (nh - h) // 2, (nw - w) // 2
        out = scaled[:, top:top + h, left:left + w]
    else:
        ph, pw = h - nh, w - nw
        out = np.pad(scaled, ((0, 0), (ph // 2, ph - ph // 2),
                              (pw // 2, pw - pw // 2)), mode="reflect")
    if binarize:
        return (out >= 0.5).astype(np.uint8)
    return out.astype(np.float32)


def augment(sample: Sample, seed: int) -> Sample:
    """Random rotation (multiples of 90 degrees), flips, and scaling in
    [0.75, 1.25]; the identical geometric transform is applied to the image
    and both masks, and masks are re-binarized after scaling."""
    h, w = sample.image.shape[1:]
    if h != w:
        raise ValueError(f"augment requires square patches, got {h}x{w}")
    rng = np.random.default_rng(np.random.SeedSequence([0xA6, int(seed)]))
    k = int(rng.integers(0, 4))
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    factor = float(rng.uniform(0.75, 1.25))

    def geom(arr: np.ndarray, binarize: bool) -> np.ndarray:
        out = np.rot90(arr, k, axes=(1, 2))
        if hflip:
            out = out[:, :, ::-1]
        if vflip:
            out = out[:, ::-1, :]
        out = np.ascontiguousarray(out)
        return _rescale_to_same_size(out, factor, reflect_pad=True,
                                     binarize=binarize)

    return Sample(
        image=np.clip(geom(sample.image, False), 0.0, 1.0),
        building_mask=geom(sample.building_mask, True),
        road_mask=geom(sample.road_mask, True),
        id=sample.id,
        source=sample.source,
    )
