"""Atlas-based retrosternal landmark search and scan translation.

The atlas (moving image) is slid over every in-bounds placement of a fixed
slice; the placement minimizing the chosen similarity measure that also passes
the fat-walk confirmation heuristic is the landmark. All measures work on
intensities normalized to [0, 1] by dividing grays by 255.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CardiacFatError, NoConfirmedPlacement
from .imaging import FatImage, ScanVolume, read_pgm, write_json, write_pgm

logger = logging.getLogger(__name__)

MEASURES = ("md", "cc", "mi", "wmi", "hmd")
# measures whose natural orientation is "larger is better"
_MAXIMIZED = {"cc", "mi", "wmi"}

DEFAULT_REG_SLICE = 10
MAX_REG_SLICE = 20


@dataclass(frozen=True, eq=False)
class Atlas:
    image: FatImage
    threshold: float = 0.2
    source_count: int = 1

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise CardiacFatError("atlas threshold must lie in (0, 1)")

    @property
    def gray(self) -> np.ndarray:
        return self.image.gray

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.gray.shape

    def save(self, path) -> None:
        """Write the template as PGM and its parameters as a ``.json`` sidecar."""
        write_pgm(self.image, path)
        write_json(
            _sidecar(path),
            {"threshold": self.threshold, "source_count": self.source_count},
        )

    @classmethod
    def load(cls, path) -> "Atlas":
        image = read_pgm(path)
        meta = {}
        if os.path.exists(_sidecar(path)):
            with open(_sidecar(path)) as fh:
                meta = json.load(fh)
        return cls(image, float(meta.get("threshold", 0.2)), int(meta.get("source_count", 1)))


def _sidecar(path) -> str:
    return os.path.splitext(os.fspath(path))[0] + ".json"


@dataclass(frozen=True)
class SimilarityParams:
    """Similarity measure choice.

    ``g`` is the difference exponent for MD/HMD and the logarithm base for
    MI/WMI; ``None`` selects the default for the measure (1 and 256).
    """

    measure: str = "hmd"
    g: float | None = None
    t: float = 0.2

    def __post_init__(self):
        if self.measure not in MEASURES:
            raise CardiacFatError(f"unknown measure {self.measure!r}; choose from {MEASURES}")
        if self.g is not None and not self.g > 0:
            raise CardiacFatError("g must be positive")
        if self.measure in ("mi", "wmi") and not self.exponent > 1:
            raise CardiacFatError("the MI/WMI log base must exceed 1")

    @property
    def exponent(self) -> float:
        if self.g is not None:
            return float(self.g)
        return 256.0 if self.measure in ("mi", "wmi") else 1.0

    @property
    def maximized(self) -> bool:
        return self.measure in _MAXIMIZED


@dataclass(frozen=True)
class ConfirmationParams:
    c: int
    u: int
    x_min: float
    x_max: float
    area_w: int
    area_h: int

    def __post_init__(self):
        if not 0 < self.x_min < self.x_max:
            raise CardiacFatError("confirmation needs 0 < x_min < x_max")
        if self.c <= 0 or self.u < 1 or self.area_w < 1 or self.area_h < 1:
            raise CardiacFatError("confirmation needs c > 0, u >= 1 and a non-empty area")

    @classmethod
    def for_image(cls, width: int, height: int) -> "ConfirmationParams":
        """Empirical defaults scaled to the fixed image size."""
        return cls(
            c=max(1, int(round(0.6 * width))),
            u=max(1, int(round(0.003 * (width + height)))),
            x_min=0.2 * width,
            x_max=0.55 * width,
            area_w=max(1, int(round(0.13 * width))),
            area_h=max(1, int(round(0.04 * height))),
        )


@dataclass(frozen=True)
class LandmarkResult:
    x: int
    y: int
    score: float
    confirmed: bool
    slice_index: int = -1
    atlas_w: int = 0
    atlas_h: int = 0

    @property
    def center(self) -> tuple[int, int]:
        return self.x + self.atlas_w // 2, self.y + self.atlas_h // 2

    def to_json(self) -> dict:
        return {
            "x": self.x,
            "y": self.y,
            "score": self.score,
            "confirmed": self.confirmed,
            "slice_index": self.slice_index,
            "center": list(self.center),
        }


def _gray(obj) -> np.ndarray:
    if isinstance(obj, Atlas):
        return obj.gray
    if isinstance(obj, FatImage):
        return obj.gray
    return np.asarray(obj)


def build_atlas(crops, t: float = 0.2) -> Atlas:
    """Threshold each crop at normalized level ``t`` and average them."""
    crops = [_gray(c) for c in crops]
    if not crops:
        raise CardiacFatError("cannot build an atlas from an empty crop list")
    shape = crops[0].shape
    for c in crops:
        if c.shape != shape:
            raise CardiacFatError(f"atlas crops differ in size: {c.shape} vs {shape}")
    stack = np.stack([c.astype(np.float64) for c in crops])
    stack[stack / 255.0 < t] = 0.0
    mean = np.clip(np.rint(stack.mean(axis=0)), 0, 255).astype(np.uint8)
    return Atlas(FatImage(mean), t, len(crops))


def _window(F: np.ndarray, M: np.ndarray, x: int, y: int) -> np.ndarray:
    h, w = M.shape
    if x < 0 or y < 0 or y + h > F.shape[0] or x + w > F.shape[1]:
        raise CardiacFatError(f"placement ({x}, {y}) of a {w}x{h} atlas leaves the {F.shape[1]}x{F.shape[0]} image")
    return F[y : y + h, x : x + w]


def similarity_md(F, M, x: int, y: int, g: float = 1.0) -> float:
    """Mean of |F - M|^g over the atlas footprint at (x, y)."""
    M = _gray(M)
    f = _window(_gray(F), M, x, y) / 255.0
    return float(np.mean(np.abs(f - M / 255.0) ** g))


def similarity_cc(F, M, x: int, y: int) -> float:
    """Pearson correlation between the fixed window and the atlas."""
    M = _gray(M)
    f = _window(_gray(F), M, x, y) / 255.0
    m = M / 255.0
    fc = f - f.mean()
    mc = m - m.mean()
    den = np.sqrt(np.sum(fc * fc) * np.sum(mc * mc))
    if den == 0:
        raise CardiacFatError("undefined correlation: a window has zero variance")
    return float(np.sum(fc * mc) / den)


def _joint_terms(f: np.ndarray, m: np.ndarray, base: float):
    """Per-cell (f, m, mutual-information summand) over the joint histogram."""
    f = f.astype(np.int64).ravel()
    m = m.astype(np.int64).ravel()
    n = f.size
    keys, counts = np.unique(f * 256 + m, return_counts=True)
    fv, mv = keys // 256, keys % 256
    pf = np.bincount(f, minlength=256)[fv] / n
    pm = np.bincount(m, minlength=256)[mv] / n
    pfm = counts / n
    return fv, mv, pfm * np.log(pfm / (pf * pm)) / np.log(base)


def similarity_mi(F, M, x: int, y: int, g: float = 256.0) -> float:
    """Mutual information (log base ``g``) of the window/atlas joint histogram."""
    M = _gray(M)
    f = _window(_gray(F), M, x, y)
    _, _, terms = _joint_terms(f, M, g)
    return float(terms.sum())


def similarity_wmi(F, M, x: int, y: int, g: float = 256.0) -> float:
    """Mutual information with each cell weighted by 1 / (|f - m| + 1), f, m in [0, 1]."""
    M = _gray(M)
    f = _window(_gray(F), M, x, y)
    fv, mv, terms = _joint_terms(f, M, g)
    weight = 1.0 / (np.abs(fv - mv) / 255.0 + 1.0)
    return float(np.sum(weight * terms))


def similarity_hmd(F, M, x: int, y: int, g: float = 1.0, t: float = 0.2) -> float:
    """Hybrid mean difference.

    Atlas pixels brighter than ``t`` contribute -max(F - (1 - M), 0)^g (a
    reward); the rest contribute |F - M|^g.
    """
    M = _gray(M)
    f = _window(_gray(F), M, x, y) / 255.0
    m = M / 255.0
    bright = m > t
    reward = np.maximum(f - (1.0 - m), 0.0) ** g
    error = np.abs(f - m) ** g
    return float(np.sum(np.where(bright, -reward, error)))


def similarity(F, M, x: int, y: int, params: SimilarityParams) -> float:
    g = params.exponent
    if params.measure == "md":
        return similarity_md(F, M, x, y, g)
    if params.measure == "cc":
        return similarity_cc(F, M, x, y)
    if params.measure == "mi":
        return similarity_mi(F, M, x, y, g)
    if params.measure == "wmi":
        return similarity_wmi(F, M, x, y, g)
    return similarity_hmd(F, M, x, y, g, params.t)


# --- exhaustive score maps -------------------------------------------------


def _box_sum(a: np.ndarray, h: int, w: int) -> np.ndarray:
    """Sum of every h x w window of ``a``; result shape (H-h+1, W-w+1)."""
    ii = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=a.dtype)
    np.cumsum(np.cumsum(a, axis=0), axis=1, out=ii[1:, 1:])
    return ii[h:, w:] - ii[:-h, w:] - ii[h:, :-w] + ii[:-h, :-w]


def _difference_map(F: np.ndarray, M: np.ndarray, g: float, t: float | None) -> np.ndarray:
    """Sum over the footprint of the MD (t is None) or HMD per-pixel term.

    Atlas pixels equal to 0 contribute F^g in both measures, which a single box
    sum supplies; only nonzero atlas pixels are visited one by one. With g = 1
    the arithmetic is integer (units of 1/255) and therefore exact.
    """
    h, w = M.shape
    ny, nx = F.shape[0] - h + 1, F.shape[1] - w + 1
    exact = g == 1.0
    if exact:
        Fi = F.astype(np.int32)
        F2 = 2 * Fi
        acc = _box_sum(Fi.astype(np.int64), h, w).astype(np.int64)
        tmp = np.empty((ny, nx), np.int32)
    else:
        Fn = F / 255.0
        Fg = Fn**g
        acc = _box_sum(Fg, h, w)
    for i, j in zip(*np.nonzero(M)):
        m = int(M[i, j])
        bright = t is not None and m / 255.0 > t
        if exact:
            if bright:
                # -max(F - (255 - m), 0) - F
                np.subtract(F2[i : i + ny, j : j + nx], 255 - m, out=tmp)
                np.maximum(tmp, Fi[i : i + ny, j : j + nx], out=tmp)
                acc -= tmp
            else:
                # |F - m| - F
                np.subtract(m, F2[i : i + ny, j : j + nx], out=tmp)
                np.maximum(tmp, -m, out=tmp)
                acc += tmp
        else:
            fv = Fn[i : i + ny, j : j + nx]
            mv = m / 255.0
            if bright:
                acc -= np.maximum(fv - (1.0 - mv), 0.0) ** g + Fg[i : i + ny, j : j + nx]
            else:
                acc += np.abs(fv - mv) ** g - Fg[i : i + ny, j : j + nx]
    if exact:
        return acc / 255.0
    return acc


def _cc_map(F: np.ndarray, M: np.ndarray) -> np.ndarray:
    h, w = M.shape
    n = h * w
    f = F / 255.0
    m = M / 255.0
    mc = m - m.mean()
    shape = (F.shape[0] + h, F.shape[1] + w)
    num = np.fft.irfft2(np.fft.rfft2(f, shape) * np.conj(np.fft.rfft2(mc, shape)), shape)
    num = num[: F.shape[0] - h + 1, : F.shape[1] - w + 1]
    s1 = _box_sum(f, h, w)
    s2 = _box_sum(f * f, h, w)
    var_f = np.maximum(s2 - s1 * s1 / n, 0.0)
    var_m = float(np.sum(mc * mc))
    den = np.sqrt(var_f * var_m)
    out = np.full(num.shape, np.nan)
    # windows with (numerically) zero variance have no defined correlation
    ok = var_f > 1e-9 * n
    if var_m > 0:
        out[ok] = num[ok] / den[ok]
    return np.clip(out, -1.0, 1.0)


def _mi_map(F: np.ndarray, M: np.ndarray, base: float, weighted: bool) -> np.ndarray:
    h, w = M.shape
    ny, nx = F.shape[0] - h + 1, F.shape[1] - w + 1
    n = h * w
    m = M.astype(np.int64).ravel()
    pm = np.bincount(m, minlength=256) / n
    out = np.empty((ny, nx))
    log_base = np.log(base)
    col = np.arange(nx, dtype=np.int64)[:, None]
    for y in range(ny):
        win = sliding_window_view(F[y : y + h], (h, w))[0].reshape(nx, n).astype(np.int64)
        keys, counts = np.unique((col * 256 + win) * 256 + m, return_counts=True)
        xs, fv, mv = keys // 65536, (keys // 256) % 256, keys % 256
        fkeys, fcounts = np.unique(col * 256 + win, return_counts=True)
        pf = fcounts[np.searchsorted(fkeys, xs * 256 + fv)] / n
        pfm = counts / n
        terms = pfm * np.log(pfm / (pf * pm[mv])) / log_base
        if weighted:
            terms = terms / (np.abs(fv - mv) / 255.0 + 1.0)
        out[y] = np.bincount(xs, weights=terms, minlength=nx)
    return out


def score_map(F, atlas, params: SimilarityParams) -> np.ndarray:
    """Similarity value (natural sign) for every in-bounds atlas placement.

    Entry [y, x] is the score with the atlas's top-left corner at (x, y).
    Undefined correlations are NaN.
    """
    F = _gray(F)
    M = _gray(atlas)
    if M.shape[0] > F.shape[0] or M.shape[1] > F.shape[1]:
        raise CardiacFatError(f"atlas {M.shape} does not fit in image {F.shape}")
    g = params.exponent
    if params.measure == "md":
        return _difference_map(F, M, g, None) / M.size
    if params.measure == "hmd":
        return _difference_map(F, M, g, params.t)
    if params.measure == "cc":
        return _cc_map(F, M)
    return _mi_map(F, M, g, weighted=params.measure == "wmi")


# --- confirmation ----------------------------------------------------------


def _step_map(fat: np.ndarray, sign: int, u: int) -> np.ndarray:
    """Flat index each pixel moves to in one walker step (itself if stuck).

    Directions are tried horizontally (``sign`` = -1 left, +1 right), then
    straight down, then diagonally down; within a direction the smallest skip
    of 1..u pixels that lands on a fat pixel is taken.
    """
    H, W = fat.shape
    ys, xs = np.indices((H, W))
    nxt = (ys * W + xs).ravel().copy()
    done = np.zeros(H * W, bool)
    for ddx, ddy in ((sign, 0), (0, 1), (sign, 1)):
        for k in range(1, u + 1):
            tx, ty = xs + k * ddx, ys + k * ddy
            inside = (tx >= 0) & (tx < W) & (ty < H)
            ok = np.zeros((H, W), bool)
            ok[inside] = fat[ty[inside], tx[inside]]
            ok = ok.ravel() & ~done
            nxt[ok] = (ty * W + tx).ravel()[ok]
            done |= ok
    return nxt


def walk(fat: np.ndarray, start: tuple[int, int], sign: int, c: int, u: int) -> list:
    """Scalar walker: the list of positions visited from ``start`` over ``c`` iterations."""
    H, W = fat.shape
    x, y = start
    path = [(x, y)]
    for _ in range(c):
        moved = False
        for ddx, ddy in ((sign, 0), (0, 1), (sign, 1)):
            for k in range(1, u + 1):
                tx, ty = x + k * ddx, y + k * ddy
                if 0 <= tx < W and 0 <= ty < H and fat[ty, tx]:
                    x, y = tx, ty
                    moved = True
                    break
            if moved:
                break
        if not moved:
            break
        path.append((x, y))
    return path


class Confirmer:
    """Confirmation heuristic bound to one fixed image.

    Step maps and the fat integral image are computed once so that many
    candidate placements can be checked cheaply.
    """

    def __init__(self, image, params: ConfirmationParams):
        self.fat = _gray(image) > 0
        self.params = params
        self.H, self.W = self.fat.shape
        self._left = _step_map(self.fat, -1, params.u)
        self._right = _step_map(self.fat, 1, params.u)
        ii = np.zeros((self.H + 1, self.W + 1), np.int64)
        ii[1:, 1:] = self.fat.cumsum(0).cumsum(1)
        self._ii = ii

    def _endpoints(self, starts: np.ndarray, step: np.ndarray) -> np.ndarray:
        idx = starts.copy()
        for _ in range(self.params.c):
            new = step[idx]
            if np.array_equal(new, idx):
                break
            idx = new
        return idx

    def area(self, cx: int, cy: int) -> tuple[int, int, int, int] | None:
        p = self.params
        x0 = cx - p.area_w // 2
        y0 = cy - p.area_h // 2
        x1, y1 = x0 + p.area_w, y0 + p.area_h
        if x0 < 0 or y0 < 0 or x1 > self.W or y1 > self.H:
            return None
        return x0, y0, x1, y1

    def __call__(self, cx: int, cy: int) -> bool:
        """True iff some walker pair started inside the area around (cx, cy) passes."""
        box = self.area(cx, cy)
        if box is None:
            return False
        x0, y0, x1, y1 = box
        ii = self._ii
        if ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0] == 0:
            return False
        sy, sx = np.nonzero(self.fat[y0:y1, x0:x1])
        sy = sy + y0
        sx = sx + x0
        flat = sy * self.W + sx
        left = self._endpoints(flat, self._left)
        right = self._endpoints(flat, self._right)
        lx, ly = (left % self.W).astype(float), (left // self.W).astype(float)
        rx, ry = (right % self.W).astype(float), (right // self.W).astype(float)
        p = self.params
        chunk = 256
        for a in range(0, len(flat), chunk):
            i = slice(a, a + chunk)
            valid = sx[i, None] < sx[None, :]
            psx = (sx[i, None] + sx[None, :]) / 2.0
            psy = (sy[i, None] + sy[None, :]) / 2.0
            width = np.abs(lx[i, None] - rx[None, :])
            dl = np.hypot(lx[i, None] - psx, ly[i, None] - psy)
            dr = np.hypot(rx[None, :] - psx, ry[None, :] - psy)
            ok = (
                valid
                & (width > p.x_min)
                & (width < p.x_max)
                & (dl > dr / 2)
                & (dr > dl / 2)
                & (dl > p.x_min)
                & (dr > p.x_min)
            )
            if ok.any():
                return True
        return False


def confirm_landmark(F, placement: tuple[int, int], params: ConfirmationParams) -> bool:
    """Run the confirmation heuristic around ``placement`` = (cx, cy), the atlas center."""
    return Confirmer(F, params)(*placement)


# --- search ----------------------------------------------------------------


def find_landmark(
    F,
    atlas: Atlas,
    sim: SimilarityParams | None = None,
    conf: ConfirmationParams | None = None,
    slice_index: int = -1,
) -> LandmarkResult:
    """Best atlas placement in ``F``.

    The global minimizer (ties: smaller y, then smaller x) is confirmed first;
    if it fails, placements are re-examined in ascending order of score until
    one passes. With ``conf=None`` confirmation is skipped and the result is
    reported unconfirmed.
    """
    sim = sim or SimilarityParams()
    gray = _gray(F)
    h, w = atlas.shape
    if h >= gray.shape[0] and w >= gray.shape[1]:
        raise CardiacFatError("atlas must be smaller than the fixed image")
    scores = score_map(gray, atlas, sim)
    key = -scores if sim.maximized else scores.copy()
    key[np.isnan(key)] = np.inf
    flat = key.ravel()
    nx = key.shape[1]
    best = int(np.argmin(flat))
    if not np.isfinite(flat[best]):
        raise NoConfirmedPlacement("no placement has a defined similarity")

    def result(idx: int, confirmed: bool) -> LandmarkResult:
        y, x = divmod(idx, nx)
        return LandmarkResult(x, y, float(scores[y, x]), confirmed, slice_index, w, h)

    if conf is None:
        return result(best, False)
    confirmer = Confirmer(gray, conf)
    if confirmer(*result(best, False).center):
        return result(best, True)
    logger.info("best placement failed confirmation; scanning ranked placements")
    for idx in np.argsort(flat, kind="stable"):
        if not np.isfinite(flat[idx]):
            break
        y, x = divmod(int(idx), nx)
        if confirmer(x + w // 2, y + h // 2):
            return result(int(idx), True)
    raise NoConfirmedPlacement("no confirmed placement: every atlas position failed confirmation")


def select_registration_slice(scan: ScanVolume) -> int:
    return min(DEFAULT_REG_SLICE, len(scan) - 1)


def registration_candidates(n_slices: int, first: int | None = None) -> list[int]:
    """Slice indices tried in order: the default (or ``first``), then 1..20."""
    if first is None:
        first = min(DEFAULT_REG_SLICE, n_slices - 1)
    order = [first]
    order += [i for i in range(1, MAX_REG_SLICE + 1) if i < n_slices and i != first]
    return order


def default_anchor(width: int, height: int) -> tuple[int, int]:
    return width // 2, int(round(0.30 * height))


def translate(a: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift a 2-D grid by (dx, dy); vacated pixels become 0."""
    out = np.zeros_like(a)
    H, W = a.shape[:2]
    if abs(dx) >= W or abs(dy) >= H:
        return out
    src_y = slice(max(0, -dy), min(H, H - dy))
    src_x = slice(max(0, -dx), min(W, W - dx))
    dst_y = slice(max(0, dy), min(H, H + dy))
    dst_x = slice(max(0, dx), min(W, W + dx))
    out[dst_y, dst_x] = a[src_y, src_x]
    return out


@dataclass(frozen=True)
class Registration:
    scan: ScanVolume
    landmark: LandmarkResult
    offset: tuple[int, int]
    anchor: tuple[int, int]

    def to_json(self) -> dict:
        return {
            "landmark": self.landmark.to_json(),
            "offset": list(self.offset),
            "anchor": list(self.anchor),
        }


def register_scan(
    scan: ScanVolume,
    atlas: Atlas,
    sim: SimilarityParams | None = None,
    conf: ConfirmationParams | None = None,
    anchor: tuple[int, int] | None = None,
    reg_slice: int | None = None,
) -> Registration:
    """Find the landmark on a candidate slice and translate every slice so it sits on ``anchor``."""
    H, W = scan.shape
    if anchor is None:
        anchor = default_anchor(W, H)
    landmark = None
    for z in registration_candidates(len(scan), reg_slice):
        try:
            landmark = find_landmark(scan.slices[z], atlas, sim, conf, slice_index=z)
            break
        except NoConfirmedPlacement:
            logger.info("no confirmed landmark on slice %d", z)
    if landmark is None:
        raise NoConfirmedPlacement("no confirmed placement on any candidate slice")
    cx, cy = landmark.center
    dx, dy = anchor[0] - cx, anchor[1] - cy
    slices = [FatImage(translate(s.gray, dx, dy), s.pixel_spacing) for s in scan.slices]
    moved = ScanVolume(slices, scan.slice_spacing, scan.patient_id, list(scan.source_files))
    return Registration(moved, landmark, (dx, dy), tuple(anchor))
