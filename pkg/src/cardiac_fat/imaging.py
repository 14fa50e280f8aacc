"""CT slice containers, fat-range windowing, bicubic rescaling and scan loading.

Gray value 0 is the background sentinel everywhere downstream: a pixel is a
fat pixel iff its gray is nonzero.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CardiacFatError, ScanError
from .pnm import PNMError, atomic_write_bytes, read_pnm, write_pnm

FAT_HU_LO = -200
FAT_HU_HI = -30
STANDARD_SPACING = 0.35

LABEL_COLORS = {
    "epicardial": (255, 0, 0),
    "mediastinal": (0, 255, 0),
    "pericardium": (0, 0, 255),
}
YELLOW = (255, 255, 0)


@dataclass(frozen=True, eq=False)
class HuSlice:
    """Signed Hounsfield values on an isotropic grid, shape (height, width)."""

    values: np.ndarray
    pixel_spacing: float

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.size == 0:
            raise CardiacFatError("HuSlice needs a non-empty 2-D grid")
        if not self.pixel_spacing > 0:
            raise CardiacFatError("pixel_spacing must be positive")
        object.__setattr__(self, "values", values.astype(np.int32, copy=False))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class FatImage:
    """8-bit fat-windowed slice; gray 0 means background."""

    gray: np.ndarray
    pixel_spacing: float = STANDARD_SPACING

    def __post_init__(self):
        gray = np.asarray(self.gray)
        if gray.ndim != 2 or gray.size == 0:
            raise CardiacFatError("FatImage needs a non-empty 2-D grid")
        if gray.dtype != np.uint8:
            if gray.min() < 0 or gray.max() > 255:
                raise CardiacFatError("FatImage grays must lie in [0, 255]")
            gray = gray.astype(np.uint8)
        elif gray is self.gray:
            gray = gray.copy()  # freezing must not touch the caller's array
        if not self.pixel_spacing > 0:
            raise CardiacFatError("pixel_spacing must be positive")
        gray.flags.writeable = False
        object.__setattr__(self, "gray", gray)
        object.__setattr__(self, "pixel_spacing", float(self.pixel_spacing))

    @property
    def height(self) -> int:
        return self.gray.shape[0]

    @property
    def width(self) -> int:
        return self.gray.shape[1]

    @property
    def fat(self) -> np.ndarray:
        return self.gray > 0

    def __eq__(self, other):
        if not isinstance(other, FatImage):
            return NotImplemented
        return self.pixel_spacing == other.pixel_spacing and np.array_equal(self.gray, other.gray)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ScanVolume:
    """Craniocaudally ordered fat slices sharing one geometry."""

    slices: list
    slice_spacing: float
    patient_id: str = ""
    source_files: list = field(default_factory=list)

    def __post_init__(self):
        if not self.slices:
            raise ScanError("empty scan")
        if not self.slice_spacing > 0:
            raise ScanError("slice_spacing must be positive")
        first = self.slices[0]
        for i, s in enumerate(self.slices):
            if s.gray.shape != first.gray.shape or s.pixel_spacing != first.pixel_spacing:
                raise ScanError(f"slice {i} geometry differs from slice 0")

    def __len__(self):
        return len(self.slices)

    @property
    def pixel_spacing(self) -> float:
        return self.slices[0].pixel_spacing

    @property
    def shape(self) -> tuple[int, int]:
        return self.slices[0].gray.shape


@dataclass(frozen=True)
class ScanManifest:
    pixel_spacing: float
    slice_spacing: float
    rescale_slope: float
    rescale_intercept: float
    slices: tuple
    patient_id: str = ""
    base_dir: str = "."

    def __post_init__(self):
        if self.rescale_slope == 0:
            raise ScanError("rescale_slope must be nonzero")
        if not self.slices:
            raise ScanError("empty scan")
        if not self.pixel_spacing > 0 or not self.slice_spacing > 0:
            raise ScanError("spacings must be positive")

    @classmethod
    def load(cls, path) -> "ScanManifest":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ScanError(f"missing manifest: {path}") from None
        except json.JSONDecodeError as exc:
            raise ScanError(f"malformed manifest {path}: {exc}") from None
        try:
            return cls(
                pixel_spacing=float(raw["pixel_spacing_mm"]),
                slice_spacing=float(raw["slice_spacing_mm"]),
                rescale_slope=float(raw.get("rescale_slope", 1.0)),
                rescale_intercept=float(raw.get("rescale_intercept", 0.0)),
                slices=tuple(raw["slices"]),
                patient_id=str(raw.get("patient_id", "")),
                base_dir=os.path.dirname(os.path.abspath(path)),
            )
        except KeyError as exc:
            raise ScanError(f"manifest {path} lacks key {exc.args[0]}") from None

    def to_json(self) -> dict:
        return {
            "pixel_spacing_mm": self.pixel_spacing,
            "slice_spacing_mm": self.slice_spacing,
            "rescale_slope": self.rescale_slope,
            "rescale_intercept": self.rescale_intercept,
            "slices": list(self.slices),
            "patient_id": self.patient_id,
        }

    def slice_path(self, i: int) -> str:
        return os.path.join(self.base_dir, self.slices[i])


def window_fat(hu: HuSlice, lo: int = FAT_HU_LO, hi: int = FAT_HU_HI) -> FatImage:
    """Map HU in [lo, hi] (inclusive) to gray HU - lo + 1; everything else to 0."""
    if not lo < hi:
        raise CardiacFatError(f"window needs lo < hi, got ({lo}, {hi})")
    if hi - lo > 254:
        raise CardiacFatError(f"window ({lo}, {hi}) is wider than 254 HU")
    v = hu.values
    inside = (v >= lo) & (v <= hi)
    gray = np.where(inside, v - lo + 1, 0).astype(np.uint8)
    return FatImage(gray, hu.pixel_spacing)


def _cubic_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Catmull-Rom weights for taps at offsets -1, 0, 1, 2 from floor(x)."""
    d = np.stack([t + 1.0, t, 1.0 - t, 2.0 - t], axis=-1)
    near = ((a + 2) * d - (a + 3)) * d * d + 1
    far = ((a * d - 5 * a) * d + 8 * a) * d - 4 * a
    return np.where(d <= 1.0, near, far)


def _resample_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """(n_dst, n_src) bicubic interpolation matrix with clamped edges."""
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    base = np.floor(pos)
    w = _cubic_weights(pos - base)
    mat = np.zeros((n_dst, n_src))
    rows = np.arange(n_dst)
    for k, off in enumerate((-1, 0, 1, 2)):
        idx = np.clip(base.astype(np.int64) + off, 0, n_src - 1)
        np.add.at(mat, (rows, idx), w[:, k])
    return mat


def rescale_to_spacing(img: FatImage, target: float = STANDARD_SPACING) -> FatImage:
    """Bicubically resample ``img`` so one pixel spans ``target`` mm."""
    if not target > 0:
        raise CardiacFatError("target spacing must be positive")
    ratio = img.pixel_spacing / target
    new_h = int(round(img.height * ratio))
    new_w = int(round(img.width * ratio))
    if new_h == 0 or new_w == 0:
        raise CardiacFatError(f"rescaling {img.width}x{img.height} to {target} mm gives an empty image")
    if (new_h, new_w) == (img.height, img.width):
        return FatImage(img.gray.copy(), target)
    rows = _resample_matrix(img.height, new_h)
    cols = _resample_matrix(img.width, new_w)
    out = rows @ img.gray.astype(np.float64) @ cols.T
    return FatImage(np.clip(np.rint(out), 0, 255).astype(np.uint8), target)


def read_pgm(path, pixel_spacing: float | None = None) -> FatImage:
    """Read an 8-bit P5 file as a FatImage.

    The spacing comes from the file's ``pixel_spacing`` comment unless given.
    """
    pixels, maxval, comments = read_pnm(path)
    if pixels.ndim != 2:
        raise PNMError(f"{path}: expected P5 grayscale")
    if maxval != 255:
        raise PNMError(f"{path}: unsupported maxval {maxval} for a fat image")
    if pixel_spacing is None:
        pixel_spacing = float(comments.get("pixel_spacing", STANDARD_SPACING))
    return FatImage(pixels, pixel_spacing)


def write_pgm(img: FatImage, path) -> None:
    write_pnm(path, np.ascontiguousarray(img.gray), {"pixel_spacing": repr(img.pixel_spacing)})


def read_hu_pgm(path, manifest: ScanManifest) -> HuSlice:
    """Read a 16-bit P5 slice and apply the manifest's rescale slope/intercept."""
    pixels, maxval, _ = read_pnm(path)
    if pixels.ndim != 2:
        raise PNMError(f"{path}: expected P5 grayscale")
    if maxval != 65535:
        raise PNMError(f"{path}: unsupported maxval {maxval} for raw HU storage")
    hu = np.rint(pixels.astype(np.float64) * manifest.rescale_slope + manifest.rescale_intercept)
    return HuSlice(hu.astype(np.int32), manifest.pixel_spacing)


def write_hu_pgm(hu: HuSlice, path, slope: float = 1.0, intercept: float = -1024.0) -> None:
    stored = np.rint((hu.values - intercept) / slope)
    if stored.min() < 0 or stored.max() > 65535:
        raise CardiacFatError("HU values do not fit 16-bit storage with this slope/intercept")
    write_pnm(path, stored.astype(np.uint16))


def load_slice(manifest: ScanManifest, i: int, target: float = STANDARD_SPACING) -> FatImage:
    """Load slice ``i``: 16-bit files are windowed, 8-bit files are taken as fat images."""
    path = manifest.slice_path(i)
    if not os.path.exists(path):
        raise ScanError(f"missing slice file: {path}")
    pixels, maxval, _ = read_pnm(path)
    if pixels.ndim != 2:
        raise ScanError(f"{path}: expected P5 grayscale")
    if maxval == 65535:
        img = window_fat(read_hu_pgm(path, manifest))
    else:
        img = FatImage(pixels, manifest.pixel_spacing)
    return rescale_to_spacing(img, target)


def load_scan(manifest_path, target: float = STANDARD_SPACING) -> ScanVolume:
    """Load a manifest's slices, windowed to the fat range and rescaled to ``target`` mm."""
    manifest = ScanManifest.load(manifest_path)
    slices = []
    for i in range(len(manifest.slices)):
        img = load_slice(manifest, i, target)
        if slices and img.gray.shape != slices[0].gray.shape:
            raise ScanError(
                f"slice {manifest.slices[i]} has shape {img.gray.shape}, expected {slices[0].gray.shape}"
            )
        slices.append(img)
    return ScanVolume(slices, manifest.slice_spacing, manifest.patient_id, list(manifest.slices))


def save_scan(scan: ScanVolume, out_dir, extra: dict | None = None) -> str:
    """Write a scan as 8-bit fat PGMs plus a manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for z, img in enumerate(scan.slices):
        name = f"slice_{z:03d}.pgm"
        write_pgm(img, os.path.join(out_dir, name))
        names.append(name)
    manifest = {
        "pixel_spacing_mm": scan.pixel_spacing,
        "slice_spacing_mm": scan.slice_spacing,
        "rescale_slope": 1.0,
        "rescale_intercept": 0.0,
        "slices": names,
        "patient_id": scan.patient_id,
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    write_json(path, manifest)
    return path


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_mask_ppm(path, allow_yellow: bool = False) -> dict:
    """Decode a color-coded mask into boolean grids keyed by class name.

    Ground-truth masks use pure red, green and blue only. Predicted masks may
    also hold yellow (both fat classes) when ``allow_yellow`` is set.
    """
    pixels, maxval, _ = read_pnm(path)
    if pixels.ndim != 3 or maxval != 255:
        raise PNMError(f"{path}: expected an 8-bit P6 mask")
    rgb = pixels.astype(np.int32)
    code = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    red, green, blue, yellow = 0xFF0000, 0x00FF00, 0x0000FF, 0xFFFF00
    known = (code == 0) | (code == red) | (code == green) | (code == blue)
    if allow_yellow:
        known |= code == yellow
    if not known.all():
        y, x = np.argwhere(~known)[0]
        raise CardiacFatError(f"{path}: unexpected mask color {tuple(pixels[y, x])} at ({x}, {y})")
    return {
        "epicardial": (code == red) | (code == yellow),
        "mediastinal": (code == green) | (code == yellow),
        "pericardium": code == blue,
    }


def write_mask_ppm(path, epicardial, mediastinal, pericardium=None) -> None:
    """Encode boolean class grids as a color mask (yellow where both fats are set)."""
    epi = np.asarray(epicardial, bool)
    med = np.asarray(mediastinal, bool)
    rgb = np.zeros(epi.shape + (3,), np.uint8)
    if pericardium is not None:
        rgb[np.asarray(pericardium, bool)] = LABEL_COLORS["pericardium"]
    rgb[epi] = LABEL_COLORS["epicardial"]
    rgb[med] = LABEL_COLORS["mediastinal"]
    rgb[epi & med] = YELLOW
    write_pnm(path, rgb)
