"""Synthetic fixtures: landmark scenes, confirmation phantoms, ring scans and cylinders.

Ring scans stand in for a thoracic CT: a bright retrosternal "Λ" landmark
sits above two concentric fat rings around the heart. The inner ring has a
smooth texture (epicardial), the outer one a coarse texture (mediastinal).
Every patient gets a small random shift so registration has work to do.
"""

from __future__ import annotations

import os

import numpy as np

from .imaging import FAT_HU_LO, HuSlice, STANDARD_SPACING, write_hu_pgm, write_json, write_mask_ppm
from .pnm import write_pnm

BACKGROUND_HU = 40  # soft tissue, outside the fat window
LANDMARK_GRAY = 150


def landmark_template(width: int = 64, height: int = 24, thickness: int = 3, gray: int = LANDMARK_GRAY) -> np.ndarray:
    """A "Λ" of two thick arms meeting at the top center of a width x height box."""
    out = np.zeros((height, width), np.uint8)
    ys, xs = np.indices((height, width))
    cx = (width - 1) / 2.0
    # arm: from (cx, 0) to (0, height-1) and mirror
    slope = (height - 1) / cx
    dist = np.abs(ys - slope * np.abs(xs - cx)) / np.hypot(1.0, slope)
    out[dist <= thickness / 2.0] = gray
    return out


def plant(canvas: np.ndarray, template: np.ndarray, x: int, y: int) -> None:
    """Paste the template's nonzero pixels into ``canvas`` at top-left (x, y)."""
    h, w = template.shape
    region = canvas[y : y + h, x : x + w]
    on = template > 0
    region[on] = template[on]


def registration_scene(
    rng: np.random.Generator,
    template: np.ndarray,
    size: int = 512,
    noise: float = 0.0,
) -> tuple[np.ndarray, tuple[int, int]]:
    """Blank scene with ``template`` planted at a random offset.

    A ``noise`` fraction of the pixels outside the template's box is set to
    random fat grays (salt noise). Returns the scene and the planted (x, y).
    """
    h, w = template.shape
    x = int(rng.integers(0, size - w + 1))
    y = int(rng.integers(0, size - h + 1))
    scene = np.zeros((size, size), np.uint8)
    if noise > 0:
        salt = rng.random((size, size)) < noise
        scene[salt] = rng.integers(1, 172, int(salt.sum()))
        scene[y : y + h, x : x + w] = 0
    plant(scene, template, x, y)
    return scene, (x, y)


def band_phantom(
    width: int = 200,
    height: int = 200,
    band_width: float = 0.5,
    thickness: int = 4,
    gray: int = 100,
) -> tuple[np.ndarray, tuple[int, int]]:
    """Horizontal fat band centered in the image; returns (image, band center).

    A band wider than 0.4 of the image passes confirmation with the default
    parameters; a narrow one does not.
    """
    img = np.zeros((height, width), np.uint8)
    bw = int(round(band_width * width))
    x0 = (width - bw) // 2
    y0 = height // 2 - thickness // 2
    img[y0 : y0 + thickness, x0 : x0 + bw] = gray
    return img, (width // 2, height // 2)


def cylinder_masks(n_slices: int, size: int = 64, radius: float = 20.0) -> list:
    """Identical disc masks, one per slice."""
    ys, xs = np.indices((size, size))
    c = (size - 1) / 2.0
    disc = (ys - c) ** 2 + (xs - c) ** 2 <= radius * radius
    return [disc.copy() for _ in range(n_slices)]


def _ring_scale(z: int, n: int) -> float:
    return 0.6 + 0.4 * np.sin(np.pi * (z + 0.5) / n)


def ring_slice(
    rng: np.random.Generator,
    z: int,
    n_slices: int,
    size: int = 128,
    shift: tuple[int, int] = (0, 0),
) -> tuple[np.ndarray, np.ndarray, np.ndarray, tuple[int, int]]:
    """One phantom slice as fat grays plus epicardial/mediastinal truth.

    Returns (gray, epicardial, mediastinal, landmark_center).
    """
    dx, dy = shift
    s = _ring_scale(z, n_slices)
    ys, xs = np.indices((size, size))
    hx, hy = size / 2.0 + dx, size * 0.66 + dy
    r = np.hypot(xs - hx, ys - hy)
    epi = (r >= 6 * s) & (r <= 15 * s)
    med = (r >= 17 * s) & (r <= 30 * s)
    gray = np.zeros((size, size), np.uint8)
    gray[epi] = np.clip(np.rint(100 + rng.normal(0, 3, int(epi.sum()))), 1, 171)
    gray[med] = rng.integers(20, 171, int(med.sum()))

    # the landmark's apex is its center: the arms hang below it
    tmpl = landmark_template(68, 14, thickness=3)
    th, tw = tmpl.shape
    ax, ay = int(round(size / 2.0 + dx)), int(round(size * 0.30 + dy))
    plant(gray, tmpl, ax - tw // 2, ay)
    return gray, epi, med, (ax, ay)


def gray_to_hu(gray: np.ndarray) -> np.ndarray:
    """Invert fat windowing: gray g > 0 becomes HU g + lo - 1, background soft tissue."""
    return np.where(gray > 0, gray.astype(np.int32) + FAT_HU_LO - 1, BACKGROUND_HU)


def write_ring_scan(
    out_dir,
    seed: int,
    n_slices: int = 20,
    size: int = 128,
    slice_spacing: float = 3.0,
    max_shift: int = 6,
) -> str:
    """Write a phantom scan (16-bit HU slices, truth masks, manifest); returns the manifest path.

    Masks are listed under the manifest's ``masks`` key and the planted
    landmark center under ``landmark``.
    """
    rng = np.random.default_rng(seed)
    shift = tuple(int(v) for v in rng.integers(-max_shift, max_shift + 1, 2))
    os.makedirs(out_dir, exist_ok=True)
    slices, masks = [], []
    center = None
    for z in range(n_slices):
        gray, epi, med, center = ring_slice(rng, z, n_slices, size, shift)
        name = f"slice_{z:03d}.pgm"
        mask = f"mask_{z:03d}.ppm"
        write_hu_pgm(HuSlice(gray_to_hu(gray), STANDARD_SPACING), os.path.join(out_dir, name))
        write_mask_ppm(os.path.join(out_dir, mask), epi, med)
        slices.append(name)
        masks.append(mask)
    manifest = {
        "pixel_spacing_mm": STANDARD_SPACING,
        "slice_spacing_mm": float(slice_spacing),
        "rescale_slope": 1.0,
        "rescale_intercept": -1024.0,
        "slices": slices,
        "masks": masks,
        "patient_id": f"phantom-{seed}",
        "landmark": list(center),
        "seed": seed,
    }
    path = os.path.join(out_dir, "manifest.json")
    write_json(path, manifest)
    return path


def landmark_crops(seeds, size: int = 128, crop: tuple[int, int] = (80, 26)) -> list:
    """Retrosternal crops (width x height) centered on each phantom's landmark."""
    cw, ch = crop
    out = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        shift = tuple(int(v) for v in rng.integers(-6, 7, 2))
        gray, _, _, (cx, cy) = ring_slice(rng, 10, 20, size, shift)
        x0, y0 = cx - cw // 2, cy - ch // 2
        out.append(gray[y0 : y0 + ch, x0 : x0 + cw].copy())
    return out


def write_crops(out_dir, seeds, size: int = 128, crop: tuple[int, int] = (80, 26)) -> list:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for seed, c in zip(seeds, landmark_crops(seeds, size, crop)):
        p = os.path.join(out_dir, f"crop_{seed:04d}.pgm")
        write_pnm(p, c, {"pixel_spacing": repr(STANDARD_SPACING)})
        paths.append(p)
    return paths
