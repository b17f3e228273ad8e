"""Synthetic 3D breast phantoms and their CC/MLO parallel projections.

Conventions used throughout the package:

* volume axes are (x, y, z) with x the AP axis — chest wall at x = 0,
  nipple toward x = X-1; y is the ML axis; z the CC projection axis.
* images are (row, col) arrays whose COLUMN index is the AP position, so an
  ROI centered at AP coordinate x0 lands in column x0 of both views. The CC
  view collapses z (rows = y); the MLO view collapses an oblique direction
  in the y-z plane (rows = oblique coordinate u = y*cos(t) - z*sin(t)).

Projection is parallel-beam ray MEAN, which keeps the per-column (AP slice)
correspondence between the two views exact and makes every ground-truth
quantity computable in closed form.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .config import ConfigError, PhantomConfig, config_hash
from .reports import LATERALITIES, synthesize_report

# texture spatial scale and relative contrast per density class 0..3
DENSITY_SIGMA = (6.0, 4.5, 3.0, 1.8)
DENSITY_REL_AMP = (0.25, 0.45, 0.70, 1.00)
TISSUE_BASE = 0.35
TISSUE_AMP = 0.16
CALC_RADIUS_RANGE = (2, 3)
MASS_PROB = 0.6


class DatasetIOError(OSError):
    """Raised when dataset files cannot be written; partial output is removed."""


@dataclass
class Roi:
    center: tuple  # (x, y, z) voxel coords
    radius: int
    intensity: float
    kind: str  # "mass" | "calcification"


@dataclass
class PectoralWedge:
    width_frac: float
    height_frac: float
    intensity: float


@dataclass
class Phantom:
    volume: np.ndarray  # (X, Y, Z), values in [0, 1]
    density_class: int
    rois: list
    pectoral_wedge: PectoralWedge
    seed: int
    laterality: str = "left"
    # half-ellipsoid support parameters: (rx, ry, rz, cy, cz), chest wall at x=0
    support: tuple = ()


@dataclass
class RawViewPair:
    image_cc: np.ndarray
    image_mlo: np.ndarray
    mlo_angle_deg: float
    ground_truth: list  # one dict per ROI
    pectoral_mask: np.ndarray


def sample_seed(base_seed: int, index: int, tag: str = "phantom") -> int:
    """Stable per-sample seed; samples are independently seeded."""
    blob = f"{base_seed}:{tag}:{index}".encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")


def breast_support_mask(shape, support) -> np.ndarray:
    x, y, z = np.ogrid[: shape[0], : shape[1], : shape[2]]
    rx, ry, rz, cy, cz = support
    return (x / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1.0


def _roi_inside_support(roi: Roi, shape, support) -> bool:
    cx, cy, cz = roi.center
    r = roi.radius
    if cx - r < 0 or cy - r < 0 or cz - r < 0:
        return False
    if cx + r >= shape[0] or cy + r >= shape[1] or cz + r >= shape[2]:
        return False
    rx, ry, rz, sy, sz = support
    dx, dy, dz = np.ogrid[-r : r + 1, -r : r + 1, -r : r + 1]
    ball = dx * dx + dy * dy + dz * dz <= r * r
    xs = (cx + dx) / rx
    ys = (cy + dy - sy) / ry
    zs = (cz + dz - sz) / rz
    inside = xs**2 + ys**2 + zs**2 <= 1.0
    return bool(np.all(inside[ball]))


def _mlo_geometry(shape, angle_deg: float):
    """Oblique row coordinate for every (y, z) voxel and the output height."""
    _, ny, nz = shape
    theta = np.deg2rad(angle_deg)
    y = np.arange(ny)[:, None]
    z = np.arange(nz)[None, :]
    u = y * np.cos(theta) - z * np.sin(theta)
    u_min = -(nz - 1) * np.sin(theta)
    rows = np.rint(u - u_min).astype(int)
    height = int(np.rint((ny - 1) * np.cos(theta) + (nz - 1) * np.sin(theta))) + 1
    return rows, height, u_min, theta


def _roi_clear_of_wedge(roi: Roi, shape, angle_deg, wedge: PectoralWedge) -> bool:
    """Keep ROI projections out of the composited pectoral triangle."""
    rows, height, u_min, theta = _mlo_geometry(shape, angle_deg)
    cx, cy, cz = roi.center
    row = cy * np.cos(theta) - cz * np.sin(theta) - u_min
    a = wedge.width_frac * (shape[0] - 1)
    b = wedge.height_frac * (height - 1)
    # nearest box corner to the image origin decides intersection
    c0 = max(cx - roi.radius - 2, 0)
    r0 = max(row - roi.radius - 2, 0)
    return c0 / a + r0 / b > 1.0


def generate_phantom(seed: int, config: PhantomConfig) -> Phantom:
    """Deterministic phantom for a (seed, config) pair."""
    config.validate()
    nx, ny, nz = config.volume_shape
    rng = np.random.default_rng(seed)

    density = int(rng.choice(4, p=np.asarray(config.density_class_weights, dtype=float)
                             / np.sum(config.density_class_weights)))
    laterality = str(rng.choice(LATERALITIES))

    rx = 0.88 * nx * rng.uniform(0.92, 1.0)
    ry = 0.42 * ny * rng.uniform(0.9, 1.05)
    rz = 0.42 * nz * rng.uniform(0.9, 1.05)
    cy = (ny - 1) / 2 + rng.uniform(-1.5, 1.5)
    cz = (nz - 1) / 2 + rng.uniform(-1.5, 1.5)
    support = (rx, ry, rz, cy, cz)
    mask = breast_support_mask((nx, ny, nz), support)

    noise = rng.standard_normal((nx, ny, nz))
    noise = gaussian_filter(noise, DENSITY_SIGMA[density])
    noise /= max(noise.std(), 1e-8)
    amp = TISSUE_AMP * DENSITY_REL_AMP[density]
    volume = np.clip(TISSUE_BASE + amp * noise, 0.02, 0.98).astype(np.float64)
    volume[~mask] = 0.0

    wedge = PectoralWedge(config.wedge_width_frac, config.wedge_height_frac,
                          config.wedge_intensity)

    weights = np.asarray(config.roi_count_weights, dtype=float)
    n_rois = int(rng.choice(len(weights), p=weights / weights.sum()))
    rois = []
    attempts = 0
    while len(rois) < n_rois and attempts < 200:
        attempts += 1
        kind = "mass" if rng.uniform() < MASS_PROB else "calcification"
        if kind == "mass":
            radius = int(rng.integers(config.roi_radius_range[0], config.roi_radius_range[1] + 1))
            intensity = float(rng.uniform(*config.mass_intensity_range))
        else:
            radius = int(rng.integers(CALC_RADIUS_RANGE[0], CALC_RADIUS_RANGE[1] + 1))
            intensity = float(rng.uniform(*config.calc_intensity_range))
        center = (
            int(rng.integers(radius, nx - radius)),
            int(rng.integers(radius, ny - radius)),
            int(rng.integers(radius, nz - radius)),
        )
        roi = Roi(center=center, radius=radius, intensity=intensity, kind=kind)
        if not _roi_inside_support(roi, (nx, ny, nz), support):
            continue
        if not _roi_clear_of_wedge(roi, (nx, ny, nz), config.mlo_angle_deg, wedge):
            continue
        if any(np.linalg.norm(np.subtract(roi.center, r.center)) < roi.radius + r.radius + 2
               for r in rois):
            continue
        rois.append(roi)

    for roi in rois:
        cx0, cy0, cz0 = roi.center
        r = roi.radius
        dx, dy, dz = np.ogrid[-r : r + 1, -r : r + 1, -r : r + 1]
        ball = dx * dx + dy * dy + dz * dz <= r * r
        sub = volume[cx0 - r : cx0 + r + 1, cy0 - r : cy0 + r + 1, cz0 - r : cz0 + r + 1]
        sub[ball] = np.maximum(sub[ball], roi.intensity)

    return Phantom(volume=volume, density_class=density, rois=rois,
                   pectoral_wedge=wedge, seed=seed, laterality=laterality,
                   support=support)


def birads_like_label(rois) -> int:
    """0 = no ROI, 1 = mass only, 2 = any calcification."""
    kinds = {r.kind for r in rois}
    if "calcification" in kinds:
        return 2
    return 1 if kinds else 0


def project_cc_raw(volume: np.ndarray) -> np.ndarray:
    """Mean projection along z; rows = y, cols = x (AP). No rescale."""
    return volume.mean(axis=2).T


def project_cc(p: Phantom) -> np.ndarray:
    raw = project_cc_raw(p.volume)
    peak = raw.max()
    return raw / peak if peak > 0 else raw


def project_mlo_raw(volume: np.ndarray, angle_deg: float) -> np.ndarray:
    """Mean projection along (0, sin t, cos t); rows = oblique coord, cols = x."""
    nx = volume.shape[0]
    rows, height, _, _ = _mlo_geometry(volume.shape, angle_deg)
    flat_rows = rows.ravel()
    counts = np.bincount(flat_rows, minlength=height).astype(np.float64)
    out = np.zeros((height, nx))
    for x in range(nx):
        sums = np.bincount(flat_rows, weights=volume[x].ravel(), minlength=height)
        out[:, x] = sums / np.maximum(counts, 1)
    return out


def wedge_mask(height: int, width: int, wedge: PectoralWedge) -> np.ndarray:
    a = wedge.width_frac * (width - 1)
    b = wedge.height_frac * (height - 1)
    r = np.arange(height)[:, None]
    c = np.arange(width)[None, :]
    return c / a + r / b <= 1.0


def project_mlo(p: Phantom, angle_deg: float = 45.0, tissue_max: float = 0.7):
    """Oblique projection plus composited pectoral wedge; returns (image, mask).

    Tissue is rescaled into [0, tissue_max]; the wedge is written at its own
    intensity so the two populations stay separable for the Hough detector.
    """
    if not 30.0 <= angle_deg <= 60.0:
        raise ConfigError(f"MLO angle {angle_deg} outside [30, 60]")
    raw = project_mlo_raw(p.volume, angle_deg)
    peak = raw.max()
    img = raw / peak * tissue_max if peak > 0 else raw.copy()
    mask = wedge_mask(img.shape[0], img.shape[1], p.pectoral_wedge)
    img[mask] = p.pectoral_wedge.intensity
    return img, mask


def project_pair(p: Phantom, angle_deg: float = 45.0, tissue_max: float = 0.7) -> RawViewPair:
    image_cc = project_cc(p)
    image_mlo, mask = project_mlo(p, angle_deg, tissue_max)
    _, _, u_min, theta = _mlo_geometry(p.volume.shape, angle_deg)

    gt = []
    for roi in p.rois:
        x0, y0, z0 = roi.center
        r = roi.radius
        mlo_row = y0 * np.cos(theta) - z0 * np.sin(theta) - u_min
        gt.append({
            "kind": roi.kind,
            "radius": r,
            "ccColumn": int(round(x0)),
            "ccRow": int(round(y0)),
            "mloColumn": int(round(x0)),
            "mloRow": int(round(mlo_row)),
            "ccBox": _clip_box(y0, x0, r, image_cc.shape),
            "mloBox": _clip_box(mlo_row, x0, r, image_mlo.shape),
        })
    return RawViewPair(image_cc=image_cc, image_mlo=image_mlo,
                       mlo_angle_deg=angle_deg, ground_truth=gt,
                       pectoral_mask=mask)


def _clip_box(row, col, radius, shape):
    return [
        int(max(round(row) - radius, 0)),
        int(min(round(row) + radius, shape[0] - 1)),
        int(max(round(col) - radius, 0)),
        int(min(round(col) + radius, shape[1] - 1)),
    ]


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    entries: list
    generator_config_hash: str

    def split_entries(self, split: str) -> list:
        return [e for e in self.entries if e["split"] == split]

    def to_dict(self) -> dict:
        return {"generatorConfigHash": self.generator_config_hash, "entries": self.entries}


def save_image_u16(path, img: np.ndarray):
    arr = np.clip(np.rint(img * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path)


def load_image_u16(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 65535.0


def assign_splits(sample_ids) -> dict:
    """70/10/20 split by rank of the sample-id hash; counts are exact."""
    def key(sid):
        return hashlib.sha256(sid.encode()).hexdigest()

    ordered = sorted(sample_ids, key=key)
    n = len(ordered)
    n_train = int(np.floor(0.7 * n))
    n_val = int(np.floor(0.8 * n)) - n_train
    out = {}
    for i, sid in enumerate(ordered):
        out[sid] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
    return out


def build_dataset(config, out_dir, seed: int = 0, run_config=None) -> DatasetManifest:
    """Generate, project and write the full dataset under out_dir.

    Layout: images/<id>_{cc,mlo}.png, reports/<id>.txt, gt/<id>.json and a
    single manifest.json. On any I/O failure the partially written tree is
    removed before the error propagates.
    """
    config.validate()
    out = Path(out_dir)
    gch = config_hash(run_config) if run_config is not None else _phantom_hash(config)
    written_root = out
    try:
        for sub in ("images", "reports", "gt"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        entries = []
        ids = [f"{i:06d}" for i in range(config.num_samples)]
        splits = assign_splits(ids)
        for i, sid in enumerate(ids):
            phantom = generate_phantom(sample_seed(seed, i), config)
            pair = project_pair(phantom, config.mlo_angle_deg, config.tissue_max)
            rng = np.random.default_rng(sample_seed(seed, i, tag="report"))
            report = synthesize_report(
                {"densityClass": phantom.density_class, "rois": phantom.rois,
                 "laterality": phantom.laterality}, rng)

            path_cc = f"images/{sid}_cc.png"
            path_mlo = f"images/{sid}_mlo.png"
            path_report = f"reports/{sid}.txt"
            path_gt = f"gt/{sid}.json"
            save_image_u16(out / path_cc, pair.image_cc)
            save_image_u16(out / path_mlo, pair.image_mlo)
            (out / path_report).write_text(report.text)
            sidecar = {
                "sampleId": sid,
                "mloAngleDeg": pair.mlo_angle_deg,
                "rois": pair.ground_truth,
                "densityClass": phantom.density_class,
                "biradsLikeLabel": birads_like_label(phantom.rois),
                "laterality": phantom.laterality,
                "reportFields": report.fields,
            }
            (out / path_gt).write_text(json.dumps(sidecar, sort_keys=True))
            entries.append({
                "sampleId": sid,
                "pathCC": path_cc,
                "pathMLO": path_mlo,
                "reportPath": path_report,
                "gtPath": path_gt,
                "densityClass": phantom.density_class,
                "biradsLikeLabel": birads_like_label(phantom.rois),
                "roiGroundTruth": pair.ground_truth,
                "split": splits[sid],
            })
        manifest = DatasetManifest(entries=entries, generator_config_hash=gch)
        (out / "manifest.json").write_text(
            json.dumps(manifest.to_dict(), sort_keys=True, indent=1))
        return manifest
    except OSError as exc:
        shutil.rmtree(written_root, ignore_errors=True)
        raise DatasetIOError(f"dataset build failed, partial output removed: {exc}") from exc


def _phantom_hash(config: PhantomConfig) -> str:
    import dataclasses

    blob = json.dumps(dataclasses.asdict(config), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_manifest(path) -> DatasetManifest:
    data = json.loads(Path(path).read_text())
    return DatasetManifest(entries=data["entries"],
                           generator_config_hash=data["generatorConfigHash"])


def manifest_hash(manifest: DatasetManifest) -> str:
    blob = json.dumps(manifest.to_dict(), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()
