"""Image preprocessing: pectoral removal, AP alignment, soft-alignment affine.

Pipeline order is fixed: detect/remove pectoral (MLO only) -> rotate so the
chest-nipple segment is parallel to the AP axis (MLO only) -> random affine
(both views, training only) -> resize + per-image standardization.
Evaluation paths never apply the random affine.

Points are (x, y) = (column, row). Every geometric step also exposes its
forward map as a 3x3 homogeneous matrix so ground-truth coordinates can be
carried through the pipeline exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import PreprocessConfig


class NoPectoralLine(Exception):
    """No accumulator line met the vote threshold; caller skips removal."""


class DegenerateLandmarks(ValueError):
    """Chest and nipple landmarks coincide."""


@dataclass
class LineParams:
    rho: float        # signed distance from the image origin, pixels
    theta_deg: float  # normal angle in [0, 180)
    score: int        # accumulator votes


@dataclass
class AffineParams:
    rotation_deg: float
    translate: tuple  # (dx, dy) pixels
    scale: float
    shear_deg: float


# ---------------------------------------------------------------------------
# resampling primitives
# ---------------------------------------------------------------------------

def _bilinear_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                     fill: float = 0.0) -> np.ndarray:
    """Sample img at fractional (row, col) positions; outside -> fill."""
    h, w = img.shape
    valid = (rows > -1) & (rows < h) & (cols > -1) & (cols < w)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    fr = rows - r0
    fc = cols - c0

    def at(r, c):
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        out = np.zeros_like(rows, dtype=np.float64)
        out[ok] = img[r[ok], c[ok]]
        return out

    top = at(r0, c0) * (1 - fc) + at(r0, c0 + 1) * fc
    bot = at(r0 + 1, c0) * (1 - fc) + at(r0 + 1, c0 + 1) * fc
    out = top * (1 - fr) + bot * fr
    out[~valid] = fill
    return out


def bilinear_resize(image: np.ndarray, size) -> np.ndarray:
    """Bilinear resize with the half-pixel-center convention, edges clamped."""
    h, w = image.shape
    th, tw = size
    if (th, tw) == (h, w):
        return image.astype(np.float64).copy()
    rows = (np.arange(th) + 0.5) * h / th - 0.5
    cols = (np.arange(tw) + 0.5) * w / tw - 0.5
    rows = np.clip(rows, 0, h - 1)
    cols = np.clip(cols, 0, w - 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return _bilinear_sample(image.astype(np.float64), rr, cc)


def resize_transform(src_shape, size) -> np.ndarray:
    """Forward map of bilinear_resize on (x, y) points, homogeneous 3x3."""
    h, w = src_shape
    th, tw = size
    sx, sy = tw / w, th / h
    return np.array([
        [sx, 0.0, 0.5 * sx - 0.5],
        [0.0, sy, 0.5 * sy - 0.5],
        [0.0, 0.0, 1.0],
    ])


def warp_affine(image: np.ndarray, matrix: np.ndarray, translate=(0.0, 0.0)) -> np.ndarray:
    """Apply p_out = M (p_in - c) + c + t about the image center.

    Inverse-mapped bilinear resampling with zero-filled borders; `matrix`
    is 2x2 acting on (x, y) points.
    """
    h, w = image.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    inv = np.linalg.inv(matrix)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dx = cc - cx - translate[0]
    dy = rr - cy - translate[1]
    src_x = inv[0, 0] * dx + inv[0, 1] * dy + cx
    src_y = inv[1, 0] * dx + inv[1, 1] * dy + cy
    return _bilinear_sample(image.astype(np.float64), src_y, src_x)


def _homogeneous(matrix: np.ndarray, translate, center) -> np.ndarray:
    out = np.eye(3)
    out[:2, :2] = matrix
    out[:2, 2] = np.asarray(center) - matrix @ np.asarray(center) + np.asarray(translate)
    return out


def map_point(transform: np.ndarray, point) -> tuple:
    x, y, _ = transform @ np.array([point[0], point[1], 1.0])
    return (x, y)


# ---------------------------------------------------------------------------
# pectoral line detection and removal
# ---------------------------------------------------------------------------

def edge_map(image: np.ndarray, thresh: float) -> np.ndarray:
    gy, gx = np.gradient(image.astype(np.float64))
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros_like(mag, dtype=bool)
    return mag / peak >= thresh


def hough_accumulator(edges: np.ndarray):
    """Standard (rho, theta) accumulator, theta step 1 degree, rho step 1 px."""
    h, w = edges.shape
    diag = int(np.ceil(np.hypot(h - 1, w - 1)))
    thetas = np.deg2rad(np.arange(180.0))
    acc = np.zeros((2 * diag + 1, 180), dtype=np.int64)
    ys, xs = np.nonzero(edges)
    if len(xs) == 0:
        return acc, diag
    cos, sin = np.cos(thetas), np.sin(thetas)
    for t in range(180):
        rho_idx = np.rint(xs * cos[t] + ys * sin[t]).astype(int) + diag
        acc[:, t] += np.bincount(rho_idx, minlength=2 * diag + 1)
    return acc, diag


def _line_sides(shape, rho, theta_deg):
    h, w = shape
    th = np.deg2rad(theta_deg)
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=float)
    s = corners[:, 0] * np.cos(th) + corners[:, 1] * np.sin(th) - rho
    return s


def _refine_line(edges: np.ndarray, rho: float, theta_deg: float, diag: int) -> tuple:
    """Total-least-squares refit on the edge pixels that voted for the peak cell."""
    ys, xs = np.nonzero(edges)
    th = np.deg2rad(theta_deg)
    dist = xs * np.cos(th) + ys * np.sin(th) - rho
    sel = np.abs(dist) <= 1.5
    if sel.sum() < 2:
        return rho, theta_deg
    px, py = xs[sel].astype(float), ys[sel].astype(float)
    mx, my = px.mean(), py.mean()
    cov = np.cov(np.stack([px - mx, py - my]))
    evals, evecs = np.linalg.eigh(cov)
    normal = evecs[:, 0]  # smallest-variance direction
    theta_new = np.degrees(np.arctan2(normal[1], normal[0])) % 180.0
    thn = np.deg2rad(theta_new)
    rho_new = mx * np.cos(thn) + my * np.sin(thn)
    if rho_new < 0:  # keep rho signed consistently with theta in [0, 180)
        return rho, theta_deg
    if abs(rho_new - rho) > 2.0 or min(abs(theta_new - theta_deg),
                                       180 - abs(theta_new - theta_deg)) > 2.0:
        return rho, theta_deg
    return float(rho_new), float(theta_new)


def detect_pectoral_line(image: np.ndarray, edge_thresh: float = 0.3,
                         min_votes_frac: float = 0.5, max_area_frac: float = 0.6,
                         refine: bool = True) -> LineParams:
    """Find the dominant line whose chest-corner wedge is plausible.

    Candidates must clear the vote threshold, keep the (0, 0) chest corner
    strictly on the removal side (rho > 0), actually separate the image, and
    imply a wedge no larger than max_area_frac of the image.
    """
    h, w = image.shape
    edges = edge_map(image, edge_thresh)
    acc, diag = hough_accumulator(edges)
    min_votes = min_votes_frac * h

    rho_idx, theta_idx = np.nonzero(acc >= min_votes)
    if len(rho_idx) == 0:
        raise NoPectoralLine("no line above the vote threshold")
    votes = acc[rho_idx, theta_idx]
    order = np.argsort(votes)[::-1]

    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for k in order:
        rho = float(rho_idx[k] - diag)
        theta = float(theta_idx[k])
        if rho <= 0:
            continue
        sides = _line_sides((h, w), rho, theta)
        if sides[0] >= 0 or not np.any(sides > 0):
            continue  # corner not strictly inside, or line misses the image
        th = np.deg2rad(theta)
        region = cc * np.cos(th) + rr * np.sin(th) - rho <= 0
        frac = region.mean()
        if frac == 0 or frac > max_area_frac:
            continue
        if refine:
            rho, theta = _refine_line(edges, rho, theta, diag)
        return LineParams(rho=rho, theta_deg=theta, score=int(votes[k]))
    raise NoPectoralLine("no candidate line implies a chest-corner wedge")


def remove_pectoral(image: np.ndarray, line: LineParams) -> np.ndarray:
    """Zero the chest-corner side of the line (boundary inclusive).

    A line that does not separate the image (the implied wedge is empty or
    covers everything) leaves the image unchanged.
    """
    h, w = image.shape
    out = image.copy()
    if line.rho == 0:
        return out
    th = np.deg2rad(line.theta_deg)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    s = cc * np.cos(th) + rr * np.sin(th) - line.rho
    corner_sign = -np.sign(line.rho)
    mask = s * corner_sign >= 0
    if mask.all() or not mask.any():
        return out
    out[mask] = 0.0
    return out


def removal_mask(shape, line: LineParams) -> np.ndarray:
    h, w = shape
    if line.rho == 0:
        return np.zeros((h, w), dtype=bool)
    th = np.deg2rad(line.theta_deg)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    s = cc * np.cos(th) + rr * np.sin(th) - line.rho
    mask = s * (-np.sign(line.rho)) >= 0
    if mask.all() or not mask.any():
        return np.zeros((h, w), dtype=bool)
    return mask


# ---------------------------------------------------------------------------
# AP alignment
# ---------------------------------------------------------------------------

def estimate_landmarks(image: np.ndarray, support_thresh: float = 0.02):
    """Heuristic (chest, nipple) landmarks for non-synthetic inputs.

    Chest: midpoint of the breast support on the chest-wall edge (column 0).
    Nipple: farthest support pixel from that edge (largest column).
    """
    support = image > support_thresh
    h, w = image.shape
    col0 = np.nonzero(support[:, 0])[0]
    chest_row = float(col0.mean()) if len(col0) else (h - 1) / 2.0
    cols = np.nonzero(support.any(axis=0))[0]
    if len(cols) == 0:
        raise DegenerateLandmarks("image has no breast support pixels")
    far_col = int(cols.max())
    far_rows = np.nonzero(support[:, far_col])[0]
    nipple_row = float(far_rows.mean())
    return (0.0, chest_row), (float(far_col), nipple_row)


def ap_rotation_angle(chest_point, nipple_point) -> float:
    dx = nipple_point[0] - chest_point[0]
    dy = nipple_point[1] - chest_point[1]
    if dx == 0 and dy == 0:
        raise DegenerateLandmarks("chest and nipple coincide")
    return float(np.degrees(np.arctan2(dy, dx)))


def rotation_matrix(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def align_ap(image: np.ndarray, chest_point, nipple_point):
    """Rotate about the center so chest->nipple runs along +x (chest left).

    Returns (rotated image, forward 3x3 transform).
    """
    angle = ap_rotation_angle(chest_point, nipple_point)
    matrix = rotation_matrix(-angle)
    h, w = image.shape
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    rotated = warp_affine(image, matrix)
    return rotated, _homogeneous(matrix, (0.0, 0.0), center)


# ---------------------------------------------------------------------------
# random affine and normalization
# ---------------------------------------------------------------------------

def affine_matrix(params: AffineParams) -> np.ndarray:
    rot = rotation_matrix(params.rotation_deg)
    shear = np.array([[1.0, np.tan(np.deg2rad(params.shear_deg))], [0.0, 1.0]])
    return rot @ shear * params.scale


def apply_affine_params(image: np.ndarray, params: AffineParams):
    matrix = affine_matrix(params)
    h, w = image.shape
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    warped = warp_affine(image, matrix, params.translate)
    return warped, _homogeneous(matrix, params.translate, center)


def sample_affine_params(rng: np.random.Generator, cfg: PreprocessConfig) -> AffineParams:
    return AffineParams(
        rotation_deg=float(rng.uniform(-cfg.affine_rotation_deg, cfg.affine_rotation_deg)),
        translate=(float(rng.uniform(-cfg.affine_translate_px, cfg.affine_translate_px)),
                   float(rng.uniform(-cfg.affine_translate_px, cfg.affine_translate_px))),
        scale=float(rng.uniform(*cfg.affine_scale_range)),
        shear_deg=float(rng.uniform(-cfg.affine_shear_deg, cfg.affine_shear_deg)),
    )


def random_affine(image: np.ndarray, rng: np.random.Generator, cfg: PreprocessConfig):
    params = sample_affine_params(rng, cfg)
    warped, _ = apply_affine_params(image, params)
    return warped, params


def normalize_resize(image: np.ndarray, size) -> np.ndarray:
    """Bilinear resize then per-image standardization (variance floor 1e-6)."""
    out = bilinear_resize(image, size)
    out -= out.mean()
    out /= np.sqrt(max(out.var(), 1e-6))
    return out


# ---------------------------------------------------------------------------
# full per-pair pipeline
# ---------------------------------------------------------------------------

@dataclass
class ProcessedPair:
    image_cc: np.ndarray
    image_mlo: np.ndarray
    transform_cc: np.ndarray   # raw (x, y) -> output (x, y)
    transform_mlo: np.ndarray
    affine_cc: AffineParams = None
    affine_mlo: AffineParams = None


def preprocess_pair(raw_cc: np.ndarray, raw_mlo: np.ndarray, cfg: PreprocessConfig,
                    train: bool = False, rng: np.random.Generator = None,
                    landmarks=None) -> ProcessedPair:
    """Run the fixed pipeline on one view pair.

    `landmarks` optionally supplies ground-truth (chest, nipple) points for
    the MLO view; otherwise the heuristic estimate is used.
    """
    mlo = raw_mlo
    t_mlo = np.eye(3)
    try:
        line = detect_pectoral_line(mlo, cfg.hough_edge_thresh, cfg.hough_min_votes_frac)
        mlo = remove_pectoral(mlo, line)
    except NoPectoralLine:
        pass
    try:
        chest, nipple = landmarks if landmarks is not None else estimate_landmarks(mlo)
        mlo, t_align = align_ap(mlo, chest, nipple)
        t_mlo = t_align @ t_mlo
    except DegenerateLandmarks:
        pass

    cc = raw_cc
    t_cc = np.eye(3)
    affine_cc = affine_mlo = None
    if train:
        if rng is None:
            raise ValueError("training preprocessing needs an rng")
        affine_cc = sample_affine_params(rng, cfg)
        affine_mlo = affine_cc if cfg.shared_affine else sample_affine_params(rng, cfg)
        cc, t_a_cc = apply_affine_params(cc, affine_cc)
        mlo, t_a_mlo = apply_affine_params(mlo, affine_mlo)
        t_cc = t_a_cc @ t_cc
        t_mlo = t_a_mlo @ t_mlo

    t_cc = resize_transform(cc.shape, cfg.target_size) @ t_cc
    t_mlo = resize_transform(mlo.shape, cfg.target_size) @ t_mlo
    cc = normalize_resize(cc, cfg.target_size)
    mlo = normalize_resize(mlo, cfg.target_size)
    return ProcessedPair(image_cc=cc, image_mlo=mlo, transform_cc=t_cc,
                         transform_mlo=t_mlo, affine_cc=affine_cc, affine_mlo=affine_mlo)
