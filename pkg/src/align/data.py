"""Synthetic spurious-background benchmark.

Each class owns one object shape and one background colour ("palette").
In the source domain the background follows the label's palette with
probability ``spurious_rho``; otherwise it is drawn uniformly. Target domains
keep the shape/label rule but either shift the palette assignment
(``anti``: a background cue that points at the wrong class) or draw it
independently of the label (``shuffled``). Domains also differ in background
texture.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from .netpbm import read_image, write_image

SHAPES = ("disk", "square", "triangle", "cross")
PALETTES = np.array([
    [0.80, 0.22, 0.18],   # red
    [0.20, 0.62, 0.25],   # green
    [0.20, 0.30, 0.80],   # blue
    [0.78, 0.66, 0.15],   # ochre
    [0.60, 0.25, 0.70],   # purple
    [0.15, 0.60, 0.65],   # teal
])
TEXTURES = ("smooth", "stripes", "dots", "gradient")
AREA_RANGE = (0.10, 0.30)


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    image_size: tuple[int, int] = (64, 64)
    shapes: tuple[str, ...] = SHAPES
    spurious_rho: float = 0.95
    domains: tuple[int, ...] = (0, 1, 2, 3)
    source_domain: int = 0
    target_mode: str = "anti"
    samples_per_domain: int = 200
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.shapes = tuple(self.shapes)
        self.domains = tuple(int(d) for d in self.domains)
        if not 0.0 <= self.spurious_rho <= 1.0:
            raise ValueError(f"spurious_rho must be in [0, 1], got {self.spurious_rho}")
        if len(self.shapes) != self.num_classes or len(set(self.shapes)) != self.num_classes:
            raise ValueError("each class needs exactly one distinct shape")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}; choose from {SHAPES}")
        if self.num_classes > len(PALETTES):
            raise ValueError(f"at most {len(PALETTES)} classes are supported")
        if self.source_domain not in self.domains:
            raise ValueError(f"source domain {self.source_domain} not in {self.domains}")
        if self.target_mode not in ("anti", "shuffled"):
            raise ValueError(f"target_mode must be 'anti' or 'shuffled', got {self.target_mode!r}")
        if self.samples_per_domain <= 0:
            raise ValueError("samples_per_domain must be positive")
        if min(self.image_size) < 16:
            raise ValueError(f"image_size {self.image_size} too small (min 16)")

    def to_dict(self) -> dict:
        return asdict(self)

    def palette_shift(self, domain: int) -> int:
        """Offset between label and the label-linked palette in ``domain``."""
        if domain == self.source_domain:
            return 0
        k = self.domains.index(domain) - self.domains.index(self.source_domain)
        shift = k % self.num_classes
        return shift if shift else 1


@dataclass
class Sample:
    image: np.ndarray          # (3, H, W) in [0, 1]
    label: int
    domain: int
    gt_mask: np.ndarray        # (1, H, W), 1 on object pixels
    palette: int = -1
    index: int = 0
    meta: dict = field(default_factory=dict)


# -- rasterisation -------------------------------------------------------------


def _grid(h: int, w: int):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy + 0.5, xx + 0.5


def shape_mask(shape: str, h: int, w: int, cy: float, cx: float, area: float) -> np.ndarray:
    """Binary mask of ``shape`` with nominal ``area`` pixels centred at (cy, cx)."""
    yy, xx = _grid(h, w)
    if shape == "disk":
        r = np.sqrt(area / np.pi)
        m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif shape == "square":
        half = np.sqrt(area) / 2
        m = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    elif shape == "triangle":
        # isosceles, apex up, base = 1.15 * height
        height = np.sqrt(2 * area / 1.15)
        base = 1.15 * height
        top, bottom = cy - height / 2, cy + height / 2
        frac = (yy - top) / height
        m = (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * base / 2)
    elif shape == "cross":
        side = np.sqrt(area * 9 / 5)
        arm = side / 6
        inside = (np.abs(yy - cy) <= side / 2) & (np.abs(xx - cx) <= side / 2)
        m = inside & ((np.abs(yy - cy) <= arm) | (np.abs(xx - cx) <= arm))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m.astype(np.float64)


def _extent(shape: str, area: float) -> float:
    if shape == "disk":
        return np.sqrt(area / np.pi)
    if shape == "triangle":
        return 1.15 * np.sqrt(2 * area / 1.15) / 2
    if shape == "cross":
        return np.sqrt(area * 9 / 5) / 2
    return np.sqrt(area) / 2


def background(palette: int, texture: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    base = PALETTES[palette][:, None, None]
    yy, xx = _grid(h, w)
    if texture == "smooth":
        coarse = rng.random((4, 4))
        idx_y = np.minimum((yy / h * 4).astype(int), 3)
        idx_x = np.minimum((xx / w * 4).astype(int), 3)
        pattern = coarse[idx_y, idx_x]
    elif texture == "stripes":
        period = rng.uniform(4, 8)
        pattern = 0.5 + 0.5 * np.sin(2 * np.pi * yy / period + rng.uniform(0, 2 * np.pi))
    elif texture == "dots":
        period = rng.uniform(5, 8)
        pattern = ((np.sin(2 * np.pi * yy / period) * np.sin(2 * np.pi * xx / period)) > 0.3).astype(float)
    elif texture == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        pattern = ((np.cos(angle) * yy + np.sin(angle) * xx) / max(h, w) + 1) / 2
    else:
        raise ValueError(f"unknown texture {texture!r}")
    img = base * (0.75 + 0.25 * pattern[None]) + rng.normal(0, 0.03, size=(3, h, w))
    return np.clip(img, 0.0, 1.0)


def make_sample(spec: SyntheticSpec, domain: int, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, domain, index])
    h, w = spec.image_size
    k = spec.num_classes
    label = int(rng.integers(0, k))
    if spec.target_mode == "shuffled" and domain != spec.source_domain:
        palette = int(rng.integers(0, k))
    elif rng.random() < spec.spurious_rho:
        palette = (label + spec.palette_shift(domain)) % k
    else:
        palette = int(rng.integers(0, k))
    texture = TEXTURES[spec.domains.index(domain) % len(TEXTURES)]
    img = background(palette, texture, h, w, rng)

    shape = spec.shapes[label]
    for _ in range(100):
        area = rng.uniform(0.13, 0.25) * h * w
        reach = _extent(shape, area) + 1
        cy = rng.uniform(reach, h - reach)
        cx = rng.uniform(reach, w - reach)
        mask = shape_mask(shape, h, w, cy, cx, area)
        if AREA_RANGE[0] <= mask.mean() <= AREA_RANGE[1]:
            break
    else:  # pragma: no cover - the nominal areas sit well inside the band
        raise RuntimeError("could not place an object within the area constraint")
    lightness = rng.uniform(0.8, 1.0)
    colour = np.clip(lightness + rng.normal(0, 0.03, size=3), 0, 1)[:, None, None]
    shading = 1.0 + rng.normal(0, 0.02, size=(1, h, w))
    obj = np.clip(colour * shading, 0, 1)
    img = mask[None] * obj + (1 - mask[None]) * img
    return Sample(image=img, label=label, domain=domain, gt_mask=mask[None], palette=palette, index=index)


def generate_dataset(spec: SyntheticSpec) -> dict[int, list[Sample]]:
    if spec.samples_per_domain <= 0:
        raise ValueError("zero samples requested")
    return {d: [make_sample(spec, d, i) for i in range(spec.samples_per_domain)] for d in spec.domains}


def split_6_2_2(samples: list, seed: int):
    """Label-stratified 60/20/20 split; sizes are floor(0.6n), floor(0.2n), rest."""
    n = len(samples)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    rng = np.random.default_rng(seed)
    labels = np.array([s.label for s in samples])
    classes = np.unique(labels)
    per_class = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    counts = np.array([len(per_class[c]) for c in classes])

    def allocate(total, weights, cap):
        ideal = weights * total / weights.sum()
        base = np.minimum(np.floor(ideal).astype(int), cap)
        order = np.argsort(-(ideal - base), kind="stable")
        i = 0
        while base.sum() < total:
            j = order[i % len(order)]
            if base[j] < cap[j]:
                base[j] += 1
            i += 1
        return base

    n_train, n_val = int(np.floor(0.6 * n)), int(np.floor(0.2 * n))
    train_k = allocate(n_train, counts.astype(float), counts)
    val_k = allocate(n_val, counts.astype(float), counts - train_k)
    train, val, test = [], [], []
    for c, kt, kv in zip(classes, train_k, val_k):
        idx = per_class[c]
        train.extend(idx[:kt])
        val.extend(idx[kt:kt + kv])
        test.extend(idx[kt + kv:])
    pick = lambda idx: [samples[i] for i in rng.permutation(np.array(idx, dtype=int))]
    return pick(train), pick(val), pick(test)


def stack(samples: list[Sample]):
    """Arrays (images (N,3,H,W), labels (N,), masks (N,1,H,W), domains (N,))."""
    x = np.stack([s.image for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    m = np.stack([s.gt_mask for s in samples])
    d = np.array([s.domain for s in samples], dtype=np.int64)
    return x, y, m, d


# -- background perturbation -------------------------------------------------


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    """Separable truncated Gaussian blur over the last two axes, edges replicated."""
    k = gaussian_kernel(sigma)
    out = convolve1d(x, k, axis=-1, mode="nearest")
    return convolve1d(out, k, axis=-2, mode="nearest")


def apply_background_perturbation(x: np.ndarray, mask: np.ndarray, sigma: float = 5.0,
                                  mode: str = "blur", rng: np.random.Generator | None = None,
                                  noise_std: float = 0.2) -> np.ndarray:
    """Keep masked pixels, replace the rest with a blurred (or noised) copy."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if mode == "blur":
        bg = gaussian_blur(x, sigma)
    elif mode == "noise":
        rng = rng if rng is not None else np.random.default_rng(0)
        bg = np.clip(x + rng.normal(0, noise_std, size=x.shape), 0, 1)
    else:
        raise ValueError(f"mode must be 'blur' or 'noise', got {mode!r}")
    return m * x + (1 - m) * bg


# -- on-disk layout ----------------------------------------------------------


def write_dataset(root, splits: dict[int, dict[str, list[Sample]]], spec: SyntheticSpec) -> dict:
    """``<root>/domain<d>/<split>/<label>_<index>.ppm`` plus ``_mask.pgm`` and ``manifest.json``."""
    root = Path(root)
    counts = {}
    for d, parts in splits.items():
        counts[str(d)] = {}
        for split, samples in parts.items():
            folder = root / f"domain{d}" / split
            folder.mkdir(parents=True, exist_ok=True)
            for s in samples:
                stem = f"{s.label}_{s.index:05d}"
                write_image(folder / f"{stem}.ppm", s.image)
                write_image(folder / f"{stem}_mask.pgm", s.gt_mask)
            counts[str(d)][split] = len(samples)
    manifest = {"spec": spec.to_dict(), "seed": spec.seed, "counts": counts}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    return json.loads(path.read_text())


def read_dataset(root) -> tuple[dict[int, dict[str, list[Sample]]], dict]:
    root = Path(root)
    manifest = read_manifest(root)
    out: dict[int, dict[str, list[Sample]]] = {}
    for d, parts in manifest["counts"].items():
        out[int(d)] = {}
        for split in parts:
            samples = []
            for f in sorted((root / f"domain{d}" / split).glob("*.ppm")):
                label, index = f.stem.split("_")
                mask = read_image(f.with_name(f"{f.stem}_mask.pgm"))
                samples.append(Sample(read_image(f), int(label), int(d), mask, index=int(index)))
            out[int(d)][split] = samples
    return out, manifest


def build_splits(spec: SyntheticSpec) -> dict[int, dict[str, list[Sample]]]:
    data = generate_dataset(spec)
    out = {}
    for d, samples in data.items():
        tr, va, te = split_6_2_2(samples, spec.seed + d)
        out[d] = {"train": tr, "val": va, "test": te}
    return out
