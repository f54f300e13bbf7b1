"""
Geometric and photometric augmentation of ground-truth partial textures.

Region-wise thin-plate-spline warps approximate the misalignment that a dense pose
estimator introduces when a photo is mapped into UV space. The strength alpha of
the warp is driven by the curriculum step.
"""

import math, pydantic, cv2, torch
import numpy as np
import torch.nn.functional as F

from typing import Literal, Optional, Protocol, Tuple
from modules.types import Mask, REGION_NAMES, InvalidInputError
from modules.uvspace import BBox, RegionPartition


AugmentKind = Literal["region_tps", "global_tps", "region_rotate", "region_translate"]


class AugmentConfig(pydantic.BaseModel):
    kind: AugmentKind = pydantic.Field("region_tps", description="Deformation family used for T_Augment.")
    p_aug: float = pydantic.Field(0.8, ge=0.0, le=1.0, description="Probability of augmenting a training example.")
    fixed_alpha: float = pydantic.Field(0.25, ge=0.0, lt=0.5, description="Alpha used when the curriculum is disabled.")
    grid_size: int = pydantic.Field(4, ge=2, description="Control points per axis for each region.")
    global_grid_size: int = pydantic.Field(6, ge=2, description="Control points per axis for the global TPS variant.")
    bbox_padding: int = pydantic.Field(4, ge=0, description="Texels added around each region bounding box.")
    regularization: float = pydantic.Field(0.0, ge=0.0)
    jitter_brightness: float = pydantic.Field(0.1, ge=0.0)
    jitter_contrast: float = pydantic.Field(0.1, ge=0.0, lt=1.0)
    jitter_hue: float = pydantic.Field(0.05, ge=0.0, le=0.5)


class CoordinateMap(Protocol):
    """Maps output coordinates to the coordinates read from the input (both normalized to [0,1])."""
    def __call__(self, points: np.ndarray) -> np.ndarray: ...


# Alpha schedule

def alpha_schedule(step: int, delta: float) -> float:
    """0 at step 0, then 0.1 + step * delta."""
    if step < 0:
        raise InvalidInputError(f"Curriculum step must be >= 0, got {step}")
    if delta < 0:
        raise InvalidInputError(f"delta must be >= 0, got {delta}")
    if step == 0:
        return 0.0
    return 0.1 + step * delta


# Thin-plate splines

def _tps_kernel(r: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r > 0, r * r * np.log(r), 0.0)


def _pairwise_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.square(a[:, None, :] - b[None, :, :]).sum(-1))


class TpsTransform(pydantic.BaseModel):
    """
    f(p) = a0 + a1 * x + a2 * y + sum_k w_k * U(|p - c_k|), fitted per output axis.
    coefficients has shape (K + 3, 2): K kernel weights followed by the affine part.
    """
    model_config = pydantic.ConfigDict(arbitrary_types_allowed=True)

    src_points: np.ndarray
    dst_points: np.ndarray
    coefficients: np.ndarray
    regularization: float = 0.0

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        k = self.src_points.shape[0]
        kernel = _tps_kernel(_pairwise_distance(points, self.src_points))
        affine = np.column_stack((np.ones(len(points)), points))
        return kernel @ self.coefficients[:k] + affine @ self.coefficients[k:]


class AffineTransform(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(arbitrary_types_allowed=True)

    matrix: np.ndarray  # 2 x 3, applied to (x, y, 1)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.column_stack((points, np.ones(len(points)))) @ self.matrix.T


def tps_fit(src_pts: np.ndarray, dst_pts: np.ndarray, regularization: float = 0.0) -> TpsTransform:
    """Solve the TPS system so that f(src_pts[k]) = dst_pts[k] (exactly when regularization is 0)."""
    src = np.asarray(src_pts, dtype=np.float64)
    dst = np.asarray(dst_pts, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 2 or src.shape != dst.shape:
        raise InvalidInputError(f"Control points must be matching K x 2 arrays, got {src.shape} and {dst.shape}")
    k = src.shape[0]
    if k < 3:
        raise InvalidInputError(f"TPS needs at least 3 control points, got {k}")

    affine = np.column_stack((np.ones(k), src))
    if np.linalg.matrix_rank(affine) < 3:
        raise np.linalg.LinAlgError("TPS control points are collinear; the system is singular.")

    system = np.zeros((k + 3, k + 3))
    system[:k, :k] = _tps_kernel(_pairwise_distance(src, src)) + regularization * np.eye(k)
    system[:k, k:] = affine
    system[k:, :k] = affine.T

    rhs = np.zeros((k + 3, 2))
    rhs[:k] = dst
    coefficients = np.linalg.solve(system, rhs)

    return TpsTransform(src_points=src, dst_points=dst, coefficients=coefficients, regularization=regularization)


def control_grid(size: int) -> np.ndarray:
    """size x size regular grid over the normalized square, as (x, y) rows."""
    axis = np.linspace(0.0, 1.0, size)
    xs, ys = np.meshgrid(axis, axis)
    return np.column_stack((xs.ravel(), ys.ravel()))


def _signed_shifts(rng: np.random.Generator, alpha: float, count: int) -> np.ndarray:
    # U(0, alpha) magnitude with a random sign per axis
    magnitude = rng.uniform(0.0, alpha, size=(count, 2))
    sign = rng.choice(np.array([-1.0, 1.0]), size=(count, 2))
    return magnitude * sign


# Warping

def pad_bbox(bbox: BBox, padding: int, shape: Tuple[int, int]) -> BBox:
    y0, x0, y1, x1 = bbox
    return max(y0 - padding, 0), max(x0 - padding, 0), min(y1 + padding, shape[0]), min(x1 + padding, shape[1])


def warp_region(texture: np.ndarray, region_mask: Mask, bbox: Optional[BBox], tps: CoordinateMap) -> np.ndarray:
    """
    Backward-warp the masked crop inside bbox: each output texel reads the input at tps(p),
    with p the texel centre in normalized bbox coordinates. Bilinear sampling, zero outside the crop.
    Texels outside bbox are zero in the result.
    """
    out = np.zeros_like(texture, dtype=np.float32)
    if bbox is None:
        return out
    y0, x0, y1, x1 = bbox
    bh, bw = y1 - y0, x1 - x0
    if bh <= 0 or bw <= 0:
        return out

    crop = (texture * region_mask[..., None])[y0:y1, x0:x1]

    gy, gx = np.meshgrid((np.arange(bh) + 0.5) / bh, (np.arange(bw) + 0.5) / bw, indexing="ij")
    read = tps(np.column_stack((gx.ravel(), gy.ravel()))).reshape(bh, bw, 2)
    grid = torch.from_numpy(2.0 * read - 1.0).float().unsqueeze(0)

    crop_t = torch.from_numpy(np.ascontiguousarray(crop)).float().permute(2, 0, 1).unsqueeze(0)
    warped = F.grid_sample(crop_t, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    out[y0:y1, x0:x1] = warped[0].permute(1, 2, 0).numpy()
    return out


def _region_map(
    kind: AugmentKind, alpha: float, rng: np.random.Generator, config: AugmentConfig
) -> Tuple[Optional[CoordinateMap], bool]:
    """Draws the coordinate map of one region. Returns (map, is_identity)."""
    if kind == "region_rotate":
        angle = rng.uniform(-alpha * math.pi, alpha * math.pi)
        if angle == 0.0:
            return None, True
        c, s = math.cos(angle), math.sin(angle)
        # rotate about the bbox centre (0.5, 0.5)
        matrix = np.array([[c, -s, 0.5 - 0.5 * c + 0.5 * s], [s, c, 0.5 - 0.5 * s - 0.5 * c]])
        return AffineTransform(matrix=matrix), False

    if kind == "region_translate":
        shift = _signed_shifts(rng, alpha, 1)[0]
        if not shift.any():
            return None, True
        return AffineTransform(matrix=np.array([[1.0, 0.0, shift[0]], [0.0, 1.0, shift[1]]])), False

    size = config.global_grid_size if kind == "global_tps" else config.grid_size
    src = control_grid(size)
    shifts = _signed_shifts(rng, alpha, len(src))
    if not shifts.any():
        return None, True
    return tps_fit(src, src + shifts, config.regularization), False


def region_wise_augment(
    t: np.ndarray,
    partition: RegionPartition,
    m_uv: Mask,
    alpha: float,
    rng: np.random.Generator,
    config: Optional[AugmentConfig] = None,
) -> np.ndarray:
    """
    T_Augment = f(T_GT^M, alpha). Each region is cropped with its padded bounding box,
    warped independently, merged back and multiplied by M_uv.
    Works on any channel count so that a visibility mask can be warped alongside the colors.
    """
    config = config or AugmentConfig()
    if alpha < 0:
        raise InvalidInputError(f"alpha must be >= 0, got {alpha}")

    if config.kind == "global_tps":
        full: BBox = (0, 0, t.shape[0], t.shape[1])
        mapping, identity = _region_map("global_tps", alpha, rng, config)
        merged = t * m_uv[..., None] if identity or mapping is None else warp_region(t, m_uv, full, mapping)
        return (merged * m_uv[..., None]).astype(np.float32)

    merged = np.zeros_like(t, dtype=np.float32)
    for region in REGION_NAMES:
        mask = partition.masks[region]
        bbox = partition.bboxes[region]
        if bbox is None:
            continue
        mapping, identity = _region_map(config.kind, alpha, rng, config)
        if identity or mapping is None:
            warped = t * mask[..., None]
        else:
            padded = pad_bbox(bbox, config.bbox_padding, mask.shape)
            # keep the warped region inside its own mask so regions never bleed into each other
            warped = warp_region(t, mask, padded, mapping) * mask[..., None]
        merged += warped

    return (merged * m_uv[..., None]).astype(np.float32)


# Color jitter

def apply_color_jitter(t: np.ndarray, brightness: float = 0.0, contrast: float = 1.0, hue: float = 0.0) -> np.ndarray:
    """Deterministic jitter: contrast around the mean, brightness offset, hue rotation (fraction of a turn)."""
    out = t.astype(np.float32)
    if contrast != 1.0:
        out = out.mean() + (out - out.mean()) * contrast
    if brightness != 0.0:
        out = out + brightness
    if hue != 0.0:
        hsv = cv2.cvtColor(np.clip(out, 0.0, 1.0).astype(np.float32), cv2.COLOR_RGB2HSV)
        hsv[..., 0] = np.mod(hsv[..., 0] + hue * 360.0, 360.0)
        out = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def draw_color_jitter(rng: np.random.Generator, config: Optional[AugmentConfig] = None) -> Tuple[float, float, float]:
    config = config or AugmentConfig()
    brightness = rng.uniform(-config.jitter_brightness, config.jitter_brightness)
    contrast = rng.uniform(1.0 - config.jitter_contrast, 1.0 + config.jitter_contrast)
    hue = rng.uniform(-config.jitter_hue, config.jitter_hue)
    return float(brightness), float(contrast), float(hue)


def color_jitter(t: np.ndarray, rng: np.random.Generator, config: Optional[AugmentConfig] = None) -> np.ndarray:
    """Global brightness/contrast/hue perturbation with amplitudes from config, clamped to [0,1]."""
    brightness, contrast, hue = draw_color_jitter(rng, config)
    return apply_color_jitter(t, brightness, contrast, hue)
