"""MVTec-style dataset indexing, image I/O and the procedural desk-scale dataset."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import draw

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DatasetError(RuntimeError):
    pass


# -- image I/O --------------------------------------------------------------

def load_image(path, size: int) -> np.ndarray:
    """8-bit image file -> (3, size, size) float32 in [0, 1], bilinear resize."""
    img = Image.open(path)
    img = img.convert("RGB")  # grayscale is replicated to three channels
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.transpose(np.asarray(img, dtype=np.float32) / 255.0, (2, 0, 1)).copy()


def load_mask(path, size: int) -> np.ndarray:
    img = Image.open(path).convert("L")
    if img.size != (size, size):
        img = img.resize((size, size), Image.NEAREST)
    return np.asarray(img, dtype=np.float32) / 255.0 > 0.5


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB").save(path)


def save_gray(path, values: np.ndarray) -> None:
    """Write a [0, 1] map as 8-bit grayscale (0 -> 0, 1 -> 255)."""
    arr = np.clip(np.round(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


def _images_in(directory: Path) -> List[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_texture_pool(directory, size: int) -> np.ndarray:
    """Every image in ``directory``, center-cropped to square and resized."""
    out = []
    for p in _images_in(Path(directory)):
        img = Image.open(p).convert("RGB")
        w, h = img.size
        s = min(w, h)
        img = img.crop(((w - s) // 2, (h - s) // 2, (w - s) // 2 + s, (h - s) // 2 + s))
        img = img.resize((size, size), Image.BILINEAR)
        out.append(np.transpose(np.asarray(img, dtype=np.float32) / 255.0, (2, 0, 1)))
    return np.stack(out) if out else np.zeros((0, 3, size, size), dtype=np.float32)


# -- indexing ---------------------------------------------------------------

@dataclass
class TestEntry:
    path: str
    label: int
    defect: str
    mask_path: Optional[str] = None


@dataclass
class DatasetIndex:
    root: str
    category: str
    train_normals: List[str]
    test: List[TestEntry]
    seen: List[TestEntry]
    n_seen: int
    seed: int
    foreground_masks: Dict[str, str] = field(default_factory=dict)

    @property
    def defect_classes(self) -> List[str]:
        return sorted({e.defect for e in self.test + self.seen if e.label == 1})

    def manifest(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _mask_for(root: Path, defect: str, image: Path) -> Path:
    return root / "ground_truth" / defect / f"{image.stem}_mask.png"


def index_dataset(root, category: str, n_seen: int = 10, seed: int = 0) -> DatasetIndex:
    """Index ``root/category`` and move ``n_seen`` labelled anomalies to training.

    Seen anomalies are drawn round-robin over the defect classes (class order
    and per-class order shuffled by ``seed``), so per-class counts differ by at
    most one while every class still has images left.
    """
    base = Path(root) / category
    train = _images_in(base / "train" / "good")
    if not train:
        raise DatasetError(f"no training images under {base / 'train' / 'good'}")
    test_dir = base / "test"
    if not test_dir.is_dir():
        raise DatasetError(f"missing test directory {test_dir}")
    by_class: Dict[str, List[TestEntry]] = {}
    normals: List[TestEntry] = []
    for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        for img in _images_in(defect_dir):
            if defect_dir.name == "good":
                normals.append(TestEntry(str(img), 0, "good"))
                continue
            mask = _mask_for(base, defect_dir.name, img)
            if not mask.exists():
                raise DatasetError(f"missing ground-truth mask for anomalous test image {img} (expected {mask})")
            by_class.setdefault(defect_dir.name, []).append(TestEntry(str(img), 1, defect_dir.name, str(mask)))

    rng = np.random.default_rng(seed)
    classes = sorted(by_class)
    classes = [classes[i] for i in rng.permutation(len(classes))]
    queues = {c: [by_class[c][i] for i in rng.permutation(len(by_class[c]))] for c in classes}
    seen: List[TestEntry] = []
    while len(seen) < n_seen and any(queues.values()):
        for c in classes:
            if len(seen) >= n_seen:
                break
            if queues[c]:
                seen.append(queues[c].pop(0))
    seen_paths = {e.path for e in seen}
    anomalous = [e for c in sorted(by_class) for e in by_class[c] if e.path not in seen_paths]

    fg = {}
    fg_dir = base / "foreground"
    for p in _images_in(fg_dir):
        fg[p.stem.replace("_mask", "")] = str(p)
    return DatasetIndex(
        root=str(root),
        category=category,
        train_normals=[str(p) for p in train],
        test=normals + anomalous,
        seen=seen,
        n_seen=n_seen,
        seed=seed,
        foreground_masks=fg,
    )


@dataclass
class TestItem:
    image_id: str
    image: np.ndarray
    mask: np.ndarray
    label: int
    defect: str = ""


def image_id(path: str) -> str:
    p = Path(path)
    return f"{p.parent.name}/{p.stem}"


def load_test_set(index: DatasetIndex, size: int) -> List[TestItem]:
    items = []
    for e in index.test:
        img = load_image(e.path, size)
        mask = load_mask(e.mask_path, size) if e.mask_path else np.zeros((size, size), dtype=bool)
        items.append(TestItem(image_id(e.path), img, mask, e.label, e.defect))
    return items


def load_training_data(index: DatasetIndex, size: int, texture_dir=None):
    from .training import TrainData

    normals = np.stack([load_image(p, size) for p in index.train_normals])
    seen = [(load_image(e.path, size), load_mask(e.mask_path, size)) for e in index.seen]
    if texture_dir is None:
        guess = Path(index.root) / "textures"
        texture_dir = guess if guess.is_dir() else None
    textures = load_texture_pool(texture_dir, size) if texture_dir else np.zeros((0, 3, size, size), np.float32)
    return TrainData(normals=normals, seen=seen, textures=textures)


# -- procedural dataset -------------------------------------------------------

DEFECTS = ("scratch", "spot", "square")
DEFECT_SCALE = 1.2


@dataclass
class TextureStyle:
    orientation: float
    frequency: float
    color_a: np.ndarray
    color_b: np.ndarray
    phase: float = 0.0
    # per-image jitter of the grating; zero keeps samples registered
    phase_jitter: float = 0.0
    orientation_jitter: float = 0.0
    frequency_jitter: float = 0.0
    noise_amp: float = 0.03


def _style(rng: np.random.Generator) -> TextureStyle:
    return TextureStyle(
        orientation=rng.uniform(0, np.pi),
        frequency=rng.uniform(0.12, 0.2),
        color_a=rng.uniform(0.15, 0.4, 3),
        color_b=rng.uniform(0.6, 0.85, 3),
        phase=rng.uniform(0, 2 * np.pi),
    )


def normal_texture(size: int, style: TextureStyle, rng: np.random.Generator) -> np.ndarray:
    """Sinusoidal grating plus band-limited noise, colored between two palette colors."""
    theta = style.orientation + rng.normal(0, style.orientation_jitter)
    freq = style.frequency * (1 + rng.normal(0, style.frequency_jitter))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + style.phase + rng.normal(0, style.phase_jitter))
    t = 0.5 + 0.5 * wave
    noise = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), 1.5)
    noise /= noise.std() + 1e-12
    t = t + style.noise_amp * noise
    img = style.color_a[:, None, None] + (style.color_b - style.color_a)[:, None, None] * t[None]
    return np.clip(img, 0, 1).astype(np.float32)


def _defect_mask(kind: str, size: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    s = scale * size / 32.0
    margin = int(3 * size / 32.0)
    cy, cx = rng.integers(margin, size - margin, 2)
    if kind == "square":
        side = int(rng.integers(int(4 * s), int(8 * s) + 1))
        rr, cc = draw.rectangle((cy - side // 2, cx - side // 2), extent=(side, side), shape=mask.shape)
        mask[rr, cc] = True
    elif kind == "spot":
        ry, rx = rng.uniform(2 * s, 5 * s, 2)
        rr, cc = draw.ellipse(cy, cx, ry, rx, shape=mask.shape, rotation=rng.uniform(0, np.pi))
        mask[rr, cc] = True
    elif kind == "scratch":
        pts = [np.array([cy, cx], dtype=float)]
        angle = rng.uniform(0, 2 * np.pi)
        for _ in range(int(rng.integers(2, 5))):
            angle += rng.normal(0, 0.5)
            step = rng.uniform(3 * s, 6 * s)
            pts.append(pts[-1] + step * np.array([np.sin(angle), np.cos(angle)]))
        for a, b in zip(pts, pts[1:]):
            rr, cc = draw.line(*np.round(a).astype(int), *np.round(b).astype(int))
            keep = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
            mask[rr[keep], cc[keep]] = True
        mask = ndimage.binary_dilation(mask, iterations=max(1, int(round(s * rng.uniform(0.5, 1.0)))))
    else:
        raise ValueError(f"unknown defect kind {kind!r}")
    return mask


def inject_defect(
    base: np.ndarray, kind: str, rng: np.random.Generator, defect_scale: float = DEFECT_SCALE
) -> Tuple[np.ndarray, np.ndarray]:
    """Perturb contrast/brightness/color inside a random defect mask; pixels outside are untouched."""
    size = base.shape[1]
    mask = np.zeros((size, size), dtype=bool)
    while not mask.any():
        mask = _defect_mask(kind, size, rng, defect_scale)
    out = base.copy()
    region = base[:, mask]
    direction = -1.0 if region.mean() > 0.5 else 1.0
    shift = direction * rng.uniform(0.3, 0.5) + rng.normal(0, 0.05, (3, 1))
    flatten = rng.uniform(0.2, 0.6)
    mean = region.mean(axis=1, keepdims=True)
    out[:, mask] = np.clip(mean + flatten * (region - mean) + shift, 0, 1)
    return out.astype(np.float32), mask


def procedural_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """Stand-in for an external texture corpus: checkers, blobs, stripes or dots."""
    kind = int(rng.integers(4))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 0:
        period = rng.integers(2, 9)
        t = ((yy // period + xx // period) % 2).astype(float)
    elif kind == 1:
        t = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), rng.uniform(1, 3))
        t = (t > np.median(t)).astype(float)
    elif kind == 2:
        th = rng.uniform(0, np.pi)
        t = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * (xx * np.cos(th) + yy * np.sin(th))))
    else:
        t = np.zeros((size, size))
        for _ in range(int(rng.integers(5, 20))):
            rr, cc = draw.disk(tuple(rng.uniform(0, size, 2)), rng.uniform(1, 4), shape=(size, size))
            t[rr, cc] = 1.0
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * t[None]
    img = img + rng.normal(0, 0.03, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def generate_synthetic_dataset(
    out_dir,
    n_normal: int = 40,
    n_test_normal: int = 20,
    n_test_anomalous: int = 20,
    resolution: int = 32,
    seed: int = 0,
    category: str = "synthetic",
    n_textures: int = 16,
    defect_scale: float = DEFECT_SCALE,
) -> Path:
    """Write an MVTec-style procedural dataset plus a ``textures/`` pool.

    Defect classes cycle through scratch, spot and square. Returns the
    category directory.
    """
    if resolution % 32:
        raise ValueError(f"resolution must be a multiple of 32, got {resolution}")
    root = Path(out_dir)
    base = root / category
    rng = np.random.default_rng(seed)
    style = _style(rng)
    for i in range(n_normal):
        save_image(base / "train" / "good" / f"{i:03d}.png", normal_texture(resolution, style, rng))
    for i in range(n_test_normal):
        save_image(base / "test" / "good" / f"{i:03d}.png", normal_texture(resolution, style, rng))
    for i in range(n_test_anomalous):
        kind = DEFECTS[i % len(DEFECTS)]
        image, mask = inject_defect(normal_texture(resolution, style, rng), kind, rng, defect_scale)
        save_image(base / "test" / kind / f"{i:03d}.png", image)
        save_gray(base / "ground_truth" / kind / f"{i:03d}_mask.png", mask.astype(np.float32))
    tex_rng = np.random.default_rng([seed, 1])
    for i in range(n_textures):
        save_image(root / "textures" / f"{i:03d}.png", procedural_texture(resolution, tex_rng))
    return base
