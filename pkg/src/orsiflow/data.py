"""Synthetic remote-sensing-like scenes, PNG mask I/O and dataset manifests."""
from __future__ import annotations

import csv
import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ._kernels import resize_numpy
from .errors import InvalidSpec, UnreadableImage

SHAPES = ("disk", "rectangle", "bar", "cluster")
MANIFEST_FIELDS = ("image_path", "mask_path", "seed", "split")


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the scene generator.

    ``contrast`` and object counts may be given as a fixed value or an
    inclusive ``(low, high)`` range sampled per scene.
    """

    size: int = 64
    objects: tuple = (1, 3)
    shapes: tuple = SHAPES
    contrast: tuple = (0.35, 0.9)
    clutter: float = 0.5
    seed: int = 0

    def validate(self):
        if self.size < 8:
            raise InvalidSpec(f"canvas size {self.size} too small")
        if not self.shapes:
            raise InvalidSpec("shape vocabulary is empty")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise InvalidSpec(f"unknown shapes {sorted(unknown)}")
        lo, hi = _range(self.objects)
        if lo < 0 or hi < lo:
            raise InvalidSpec(f"bad object count range {self.objects}")
        clo, chi = _range(self.contrast)
        if not 0.0 <= clo <= chi <= 1.0:
            raise InvalidSpec(f"contrast must lie in [0, 1], got {self.contrast}")
        if self.clutter < 0:
            raise InvalidSpec("clutter density must be non-negative")


def _range(v):
    if isinstance(v, (tuple, list)):
        return v[0], v[1]
    return v, v


def _smooth_noise(rng, size, octaves=(4, 8, 16)) -> np.ndarray:
    """Sum of bilinearly upsampled random grids, roughly unit scale."""
    out = np.zeros((3, size, size))
    for i, res in enumerate(octaves):
        grid = rng.standard_normal((1, 3, res, res))
        out += resize_numpy(grid, size, size)[0] * 0.5 ** i
    return out / 1.5


def _draw(rng, shape, size, yy, xx) -> np.ndarray:
    if shape == "disk":
        r = rng.uniform(0.05, 0.22) * size
        cy, cx = rng.uniform(r, size - r, 2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "rectangle":
        hh, hw = rng.uniform(0.06, 0.2, 2) * size
        ang = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(0.25 * size, 0.75 * size, 2)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(ang) + dx * np.sin(ang)
        v = -dy * np.sin(ang) + dx * np.cos(ang)
        return (np.abs(u) <= hh) & (np.abs(v) <= hw)
    if shape == "bar":
        half_len = rng.uniform(0.2, 0.45) * size
        half_w = rng.uniform(0.8, 1.8)
        ang = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(0.3 * size, 0.7 * size, 2)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(ang) + dx * np.sin(ang)
        v = -dy * np.sin(ang) + dx * np.cos(ang)
        return (np.abs(u) <= half_len) & (np.abs(v) <= half_w)
    if shape == "cluster":
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
        m = np.zeros(yy.shape, dtype=bool)
        for _ in range(int(rng.integers(3, 7))):
            r = rng.uniform(1.2, 2.6) * size / 64
            oy, ox = rng.normal(0, 0.07 * size, 2)
            m |= (yy - cy - oy) ** 2 + (xx - cx - ox) ** 2 <= r * r
        return m
    raise InvalidSpec(f"unknown shape {shape!r}")


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image (3,H,W) in [0,1], mask (1,H,W) in {0,1})``.

    Pure function of ``spec`` (including its seed).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    base = rng.uniform(0.25, 0.75, 3)
    image = base[:, None, None] + 0.12 * spec.clutter * _smooth_noise(rng, size)
    lo, hi = _range(spec.objects)
    count = int(rng.integers(lo, hi + 1))
    clo, chi = _range(spec.contrast)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(count):
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        region = _draw(rng, shape, size, yy, xx)
        contrast = rng.uniform(clo, chi)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction) + 1e-12
        # push toward the side with more headroom so contrast survives clipping
        if np.dot(direction, base - 0.5) > 0:
            direction = -direction
        color = base + 0.6 * contrast * direction / np.abs(direction).max()
        texture = 0.03 * rng.standard_normal((3, size, size))
        image = np.where(region, color[:, None, None] + texture, image)
        mask |= region
    image = np.clip(image + 0.02 * rng.standard_normal(image.shape), 0.0, 1.0)
    return image, mask[None].astype(np.float64)


# -- PNG I/O -------------------------------------------------------------------

_UNSUPPORTED_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N", "F"}


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise UnreadableImage(f"cannot read {path}: {exc}") from exc
    if img.mode in _UNSUPPORTED_MODES:
        raise UnreadableImage(f"{path}: unsupported bit depth / mode {img.mode}")
    return img


def load_mask(path) -> np.ndarray:
    """8-bit grayscale PNG -> ``(H, W)`` float array in [0, 1]."""
    img = _open(path)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_mask(path, mask) -> None:
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0]
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q, mode="L").save(path)


def load_image(path) -> np.ndarray:
    """RGB PNG -> ``(3, H, W)`` float array in [0, 1]."""
    img = _open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


def save_image(path, image) -> None:
    q = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q, mode="RGB").save(path)


# -- datasets --------------------------------------------------------------------

def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("ORSIFLOW_THREADS", "1")))
    except ValueError:
        return 1


def split_seeds(seed: int, n_train: int, n_test: int) -> dict:
    """Disjoint consecutive seed ranges for the two splits."""
    base = seed * 1_000_003
    return {"train": list(range(base, base + n_train)),
            "test": list(range(base + n_train, base + n_train + n_test))}


def build_dataset(root, template: SceneSpec, n_train: int, n_test: int, seed: int = 0) -> list[dict]:
    """Render scenes into ``root/images`` and ``root/masks``; write ``root/manifest.csv``."""
    if n_train < 1 or n_test < 1:
        raise InvalidSpec("n_train and n_test must be >= 1")
    template.validate()
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    jobs = []
    for split, seeds in split_seeds(seed, n_train, n_test).items():
        for i, s in enumerate(seeds):
            stem = f"{split}_{i:05d}"
            jobs.append({"image_path": f"images/{stem}.png", "mask_path": f"masks/{stem}.png",
                         "seed": s, "split": split})

    def render(rec):
        image, mask = generate_scene(dataclasses.replace(template, seed=rec["seed"]))
        save_image(root / rec["image_path"], image)
        save_mask(root / rec["mask_path"], mask)

    with ThreadPoolExecutor(worker_count()) as pool:
        list(pool.map(render, jobs))
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(jobs)
    return jobs


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
    return rows


def load_split(manifest_path, split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Stacked ``(images (N,3,H,W), masks (N,1,H,W), stems)`` for one split."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    rows = [r for r in read_manifest(manifest_path) if r["split"] == split]
    images = np.stack([load_image(root / r["image_path"]) for r in rows])
    masks = np.stack([load_mask(root / r["mask_path"])[None] for r in rows])
    stems = [Path(r["image_path"]).stem for r in rows]
    return images, masks, stems
