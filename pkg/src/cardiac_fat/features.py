"""Per-pixel texture features and labeled dataset assembly.

Every fat pixel (gray > 0) is described by a square neighborhood window
centered on it; window pixels outside the image count as black. The default
vector holds 15 features; ``full=True`` adds geometric moments, the remaining
co-occurrence moments and the run-length features for 31 in total.

Two routes compute the same numbers: window-level kernels (``glcm``,
``glcm_moment``, ``rlm``, ...) used by :func:`extract_features`, and
:func:`feature_matrix`, which evaluates whole slices at once with integral
images. Tests hold them to each other.
"""

from __future__ import annotations

import csv
import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import CardiacFatError, DatasetFormatError
from .imaging import FatImage, ScanVolume, atomic_write_bytes, read_mask_ppm

CLASSES = ("epicardial", "mediastinal", "pericardium")

BASE_FEATURES = (
    "gray", "x", "y", "z", "x_cog", "y_cog", "mean", "csv",
    "glcm_01_m1", "glcm_01_m2", "glcm_01_m3", "glcm_01_m4",
    "glcm_11_m2", "glcm_11_m3", "glcm_11_m4",
)  # fmt: skip
EXTRA_FEATURES = (
    "geo_m01", "geo_m10", "geo_m11",
    "glcm_10_m1", "glcm_10_m2", "glcm_10_m3", "glcm_10_m4", "glcm_11_m1",
    "rp_0", "rp_45", "rp_90", "rp_135",
    "gln_0", "gln_45", "gln_90", "gln_135",
)  # fmt: skip

_GLCM_BASE = (((0, 1), 1), ((0, 1), 2), ((0, 1), 3), ((0, 1), 4), ((1, 1), 2), ((1, 1), 3), ((1, 1), 4))
_GLCM_EXTRA = (((1, 0), 1), ((1, 0), 2), ((1, 0), 3), ((1, 0), 4), ((1, 1), 1))
THETAS = (0, 45, 90, 135)


@dataclass(frozen=True)
class NeighborhoodSpec:
    side: int = 25
    beta: float = 1e7
    full: bool = False

    def __post_init__(self):
        if self.side < 3 or self.side % 2 == 0:
            raise CardiacFatError(f"window side must be odd and >= 3, got {self.side}")
        if not self.beta > 1:
            raise CardiacFatError("beta must exceed 1")

    @property
    def q(self) -> int:
        return self.side // 2

    @property
    def names(self) -> tuple:
        return BASE_FEATURES + EXTRA_FEATURES if self.full else BASE_FEATURES

    def schema_hash(self) -> str:
        """Fingerprint of everything that changes the meaning of a feature column."""
        text = f"side={self.side};beta={self.beta!r};features={','.join(self.names)}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_json(self) -> dict:
        return {"side": self.side, "beta": self.beta, "full": self.full}


# --- window kernels --------------------------------------------------------


def geometric_moment(window, m: int, n: int) -> float:
    """Sum of col^m * row^n * gray/255 with 0-based window indices."""
    w = np.asarray(window, dtype=np.float64) / 255.0
    rows, cols = np.indices(w.shape)
    return float(np.sum(cols.astype(float) ** m * rows.astype(float) ** n * w))


def center_of_gravity(img) -> tuple[float, float]:
    gray = img.gray if isinstance(img, FatImage) else np.asarray(img)
    m00 = geometric_moment(gray, 0, 0)
    if m00 == 0:
        raise CardiacFatError("undefined center of gravity: image is all background")
    return geometric_moment(gray, 1, 0) / m00, geometric_moment(gray, 0, 1) / m00


def csv_weights(side: int, beta: float) -> np.ndarray:
    """beta^(1/(d+1)) where d is the Chebyshev distance to the window center."""
    q = side // 2
    r = np.abs(np.arange(side) - q)
    d = np.maximum(r[:, None], r[None, :])
    return beta ** (1.0 / (d + 1.0))


def coefficient_of_smooth_variation(window, beta: float = 1e7) -> float:
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
        raise CardiacFatError("CSV needs an odd square window")
    return float(np.sum(csv_weights(w.shape[0], beta) * w / 255.0))


def neighborhood_mean(window) -> float:
    return float(np.mean(np.asarray(window, dtype=np.float64)))


def glcm(window, dr: int, dc: int) -> dict:
    """Sparse co-occurrence counts {(a, b): n} for pairs (r, c) -> (r + dr, c + dc)."""
    w = np.asarray(window, dtype=np.int64)
    H, W = w.shape
    if dr >= H or dc >= W:
        return {}
    a = w[: H - dr, : W - dc]
    b = w[dr:, dc:]
    keys, counts = np.unique(a * 256 + b, return_counts=True)
    return {(int(k) // 256, int(k) % 256): int(c) for k, c in zip(keys, counts)}


def glcm_probabilities(counts: dict) -> dict:
    total = sum(counts.values())
    return {k: c / total for k, c in counts.items()} if total else {}


def glcm_moment(window, dr: int, dc: int, degree: int) -> float:
    """Sum of P(k, l) (k - l)^degree over normalized co-occurrences; 0 if none."""
    if degree not in (1, 2, 3, 4):
        raise CardiacFatError(f"co-occurrence moment degree must be 1..4, got {degree}")
    counts = glcm(window, dr, dc)
    total = sum(counts.values())
    if total == 0:
        return 0.0
    return sum(c * (k - l) ** degree for (k, l), c in counts.items()) / total


def _lines(w: np.ndarray, theta: int) -> list:
    H, W = w.shape
    if theta == 0:
        return list(w)
    if theta == 90:
        return list(w.T)
    if theta == 135:
        return [np.diagonal(w, k) for k in range(-(H - 1), W)]
    if theta == 45:
        f = w[::-1]
        return [np.diagonal(f, k) for k in range(-(H - 1), W)]
    raise CardiacFatError(f"theta must be one of {THETAS}, got {theta}")


def rlm(window, theta: int) -> Counter:
    """Run-length counts {(gray, length): number of maximal runs} along ``theta``."""
    w = np.asarray(window)
    out: Counter = Counter()
    for line in _lines(w, theta):
        if line.size == 0:
            continue
        cut = np.flatnonzero(np.diff(line)) + 1
        starts = np.concatenate(([0], cut))
        lengths = np.diff(np.concatenate((starts, [line.size])))
        for s, n in zip(starts, lengths):
            out[(int(line[s]), int(n))] += 1
    return out


def gray_level_nonuniformity(runs: dict) -> float:
    total = sum(runs.values())
    if total == 0:
        raise CardiacFatError("gray level non-uniformity of an empty run set")
    per_gray: Counter = Counter()
    for (p, _), n in runs.items():
        per_gray[p] += n
    return sum(v * v for v in per_gray.values()) / total


def run_percentage(runs: dict, area: float) -> float:
    if area <= 0:
        raise CardiacFatError("run percentage needs a positive area")
    return sum(runs.values()) / area


def pixel_window(gray: np.ndarray, px: int, py: int, side: int) -> np.ndarray:
    """``side`` x ``side`` window centered at (px, py), zero outside the image."""
    q = side // 2
    padded = np.pad(np.asarray(gray), q)
    return padded[py : py + side, px : px + side]


def extract_features(
    img: FatImage, z: int, px: int, py: int, spec: NeighborhoodSpec | None = None, cog=None
) -> np.ndarray:
    """Feature vector of a single fat pixel, ordered as ``spec.names``."""
    spec = spec or NeighborhoodSpec()
    gray = img.gray
    if not (0 <= px < img.width and 0 <= py < img.height):
        raise CardiacFatError(f"pixel ({px}, {py}) is outside the image")
    if gray[py, px] == 0:
        raise CardiacFatError(f"not a fat pixel: ({px}, {py}) is background")
    if cog is None:
        cog = center_of_gravity(img)
    win = pixel_window(gray, px, py, spec.side)
    values = [
        float(gray[py, px]), float(px), float(py), float(z),
        px - cog[0], py - cog[1],
        neighborhood_mean(win),
        coefficient_of_smooth_variation(win, spec.beta),
    ]  # fmt: skip
    values += [glcm_moment(win, dr, dc, g) for (dr, dc), g in _GLCM_BASE]
    if spec.full:
        values += [geometric_moment(win, 0, 1), geometric_moment(win, 1, 0), geometric_moment(win, 1, 1)]
        values += [glcm_moment(win, dr, dc, g) for (dr, dc), g in _GLCM_EXTRA]
        runs = [rlm(win, th) for th in THETAS]
        values += [run_percentage(r, win.size) for r in runs]
        values += [gray_level_nonuniformity(r) for r in runs]
    return np.array(values, dtype=np.float64)


# --- whole-slice extraction ------------------------------------------------


def _integral(a: np.ndarray) -> np.ndarray:
    ii = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=a.dtype)
    np.cumsum(np.cumsum(a, axis=0), axis=1, out=ii[1:, 1:])
    return ii


def _rect(ii: np.ndarray, top, left, h: int, w: int):
    return ii[top + h, left + w] - ii[top, left + w] - ii[top + h, left] + ii[top, left]


def _run_starts(win: np.ndarray, theta: int) -> np.ndarray:
    """Mask of window pixels that begin a maximal run along ``theta``."""
    starts = np.ones(win.shape, bool)
    if theta == 0:
        starts[:, 1:] = win[:, 1:] != win[:, :-1]
    elif theta == 90:
        starts[1:, :] = win[1:, :] != win[:-1, :]
    elif theta == 135:
        starts[1:, 1:] = win[1:, 1:] != win[:-1, :-1]
    else:
        # runs climb up-right, so a pixel's predecessor sits one row down, one column left
        starts[:-1, 1:] = win[:-1, 1:] != win[1:, :-1]
    return starts


def _run_features(win: np.ndarray) -> list:
    rp, gln = [], []
    for theta in THETAS:
        s = _run_starts(win, theta)
        n = int(s.sum())
        per_gray = np.bincount(win[s].ravel(), minlength=256)
        rp.append(n / win.size)
        gln.append(float(np.sum(per_gray.astype(np.int64) ** 2)) / n)
    return rp + gln


def feature_matrix(img: FatImage, z: int, spec: NeighborhoodSpec | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Features of every fat pixel of a slice.

    Returns:
        (coords, X): coords is (n, 2) of (y, x) in row-major order, X is
        (n, len(spec.names)).
    """
    spec = spec or NeighborhoodSpec()
    gray = img.gray
    ys, xs = np.nonzero(gray)
    k = len(spec.names)
    if ys.size == 0:
        return np.zeros((0, 2), np.int64), np.zeros((0, k))
    q, side = spec.q, spec.side
    cog = center_of_gravity(img)
    P = np.pad(gray.astype(np.int64), q)
    ii = _integral(P)
    # window top-left in padded coordinates equals the pixel's own (y, x)
    top, left = ys, xs
    cols = [gray[ys, xs].astype(np.float64), xs.astype(np.float64), ys.astype(np.float64), np.full(ys.size, float(z))]
    cols += [xs - cog[0], ys - cog[1]]
    window_sum = _rect(ii, top, left, side, side)
    cols.append(window_sum / float(side * side))

    weights = [spec.beta ** (1.0 / (d + 1.0)) for d in range(q + 1)]
    csv_acc = np.zeros(ys.size)
    prev = np.zeros(ys.size, np.int64)
    for d in range(q + 1):
        ring_sum = _rect(ii, top + q - d, left + q - d, 2 * d + 1, 2 * d + 1)
        csv_acc += weights[d] * (ring_sum - prev)
        prev = ring_sum
    cols.append(csv_acc / 255.0)

    def moment(offset, degree):
        dr, dc = offset
        Hp, Wp = P.shape
        D = P[: Hp - dr, : Wp - dc] - P[dr:, dc:]
        s = _rect(_integral(D**degree), top, left, side - dr, side - dc)
        return s / float((side - dr) * (side - dc))

    cols += [moment(off, g) for off, g in _GLCM_BASE]
    if spec.full:
        R, C = np.indices(P.shape)
        s_p = window_sum
        s_cp = _rect(_integral(C * P), top, left, side, side)
        s_rp = _rect(_integral(R * P), top, left, side, side)
        s_rcp = _rect(_integral(R * C * P), top, left, side, side)
        cols.append((s_rp - top * s_p) / 255.0)
        cols.append((s_cp - left * s_p) / 255.0)
        cols.append((s_rcp - left * s_rp - top * s_cp + top * left * s_p) / 255.0)
        cols += [moment(off, g) for off, g in _GLCM_EXTRA]
        runs = np.array([_run_features(P[y : y + side, x : x + side]) for y, x in zip(ys, xs)])
        cols += [runs[:, i] for i in range(runs.shape[1])]
    X = np.column_stack([np.asarray(c, dtype=np.float64) for c in cols])
    return np.column_stack([ys, xs]), X


# --- labels and datasets ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Per-pixel class codes: 0 none, 1 epicardial, 2 mediastinal, 3 pericardium."""

    labels: np.ndarray

    @classmethod
    def from_ppm(cls, path) -> "LabelMask":
        planes = read_mask_ppm(path)
        labels = np.zeros(planes["epicardial"].shape, np.uint8)
        for code, name in enumerate(CLASSES, start=1):
            labels[planes[name]] = code
        return cls(labels)

    @classmethod
    def empty(cls, shape) -> "LabelMask":
        return cls(np.zeros(shape, np.uint8))

    def plane(self, name: str) -> np.ndarray:
        return self.labels == CLASSES.index(name) + 1


@dataclass(eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: tuple = BASE_FEATURES
    patients: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(-1, len(self.feature_names))
        self.y = np.asarray(self.y, dtype=bool).reshape(-1, len(CLASSES))
        if self.X.shape[0] != self.y.shape[0]:
            raise DatasetFormatError("feature and label row counts differ")

    def __len__(self):
        return self.X.shape[0]

    def labels(self, class_name: str) -> np.ndarray:
        if class_name not in CLASSES:
            raise CardiacFatError(f"unknown class {class_name!r}")
        return self.y[:, CLASSES.index(class_name)]

    @property
    def columns(self) -> tuple:
        return tuple(self.feature_names) + CLASSES

    def subset(self, idx) -> "Dataset":
        patients = [self.patients[i] for i in np.asarray(idx)] if self.patients else []
        return Dataset(self.X[idx], self.y[idx], self.feature_names, patients)

    @staticmethod
    def concat(parts) -> "Dataset":
        parts = list(parts)
        if not parts:
            return Dataset(np.zeros((0, len(BASE_FEATURES))), np.zeros((0, 3), bool))
        names = parts[0].feature_names
        for p in parts:
            if tuple(p.feature_names) != tuple(names):
                raise DatasetFormatError("cannot concatenate datasets with different feature columns")
        patients = [pid for p in parts for pid in (p.patients or [""] * len(p))]
        return Dataset(
            np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]), names, patients
        )


def build_dataset(scan: ScanVolume, masks=None, spec: NeighborhoodSpec | None = None) -> Dataset:
    """One row per fat pixel in (z, y, x) order; unlabeled when ``masks`` is None."""
    spec = spec or NeighborhoodSpec()
    if masks is not None and len(masks) != len(scan):
        raise CardiacFatError(f"{len(masks)} masks for {len(scan)} slices")
    Xs, ys = [], []
    for z, img in enumerate(scan.slices):
        coords, X = feature_matrix(img, z, spec)
        labels = np.zeros((len(X), 3), bool)
        if masks is not None:
            mask = masks[z]
            if mask.labels.shape != img.gray.shape:
                raise CardiacFatError(
                    f"mask {z} has shape {mask.labels.shape}, slice has {img.gray.shape}"
                )
            codes = mask.labels[coords[:, 0], coords[:, 1]]
            for c in range(3):
                labels[:, c] = codes == c + 1
        Xs.append(X)
        ys.append(labels)
    X = np.concatenate(Xs)
    return Dataset(X, np.concatenate(ys), spec.names, [scan.patient_id] * len(X))


def _format(v: float) -> str:
    if math.isfinite(v) and v == int(v) and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def export_csv(ds: Dataset, path) -> None:
    lines = [",".join(ds.columns)]
    for row, lab in zip(ds.X, ds.y):
        lines.append(",".join([_format(v) for v in row] + ["1" if b else "0" for b in lab]))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def import_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file, expected a header row") from None
        if tuple(header[-3:]) != CLASSES:
            raise DatasetFormatError(f"{path}: last three columns must be {', '.join(CLASSES)}")
        names = tuple(header[:-3])
        if names not in (BASE_FEATURES, BASE_FEATURES + EXTRA_FEATURES):
            raise DatasetFormatError(f"{path}: unrecognized feature columns")
        X, y = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetFormatError(
                    f"{path}:{lineno}: {len(row)} columns, header has {len(header)}"
                )
            try:
                X.append([float(v) for v in row[:-3]])
                flags = [v.strip().lower() for v in row[-3:]]
                if any(f not in ("0", "1", "true", "false") for f in flags):
                    raise ValueError(flags)
                y.append([f in ("1", "true") for f in flags])
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: malformed row") from None
    return Dataset(np.array(X).reshape(-1, len(names)), np.array(y, bool).reshape(-1, 3), names)


def minmax_fit(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column minima and ranges (zero ranges replaced by 1)."""
    lo = X.min(axis=0) if len(X) else np.zeros(X.shape[1])
    span = (X.max(axis=0) - lo) if len(X) else np.ones(X.shape[1])
    return lo, np.where(span > 0, span, 1.0)


def minmax_apply(X: np.ndarray, lo: np.ndarray, span: np.ndarray) -> np.ndarray:
    return (X - lo) / span
