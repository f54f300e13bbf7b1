"""
Texture-space metrics and the evaluation report.

PSNR on [0,1] data, capped at 99 dB for identical inputs. SSIM on Rec. 601 luminance with an
11-tap Gaussian window (sigma 1.5), C1 = 0.01^2 and C2 = 0.03^2. Perceptual distance through a
pluggable extractor.
"""

import os, csv, logging, pydantic, torch
import numpy as np

from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Literal, Optional
from skimage.metrics import peak_signal_noise_ratio, structural_similarity
from modules.types import TextureMap, InvalidInputError
from modules.perceptual import PerceptualFeatureExtractor, build_extractor, perceptual_distance
from modules.curriculum import to_tensor
import utils.images as images


logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _check_shapes(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise InvalidInputError(f"Shape mismatch: {a.shape} vs {b.shape}")


def psnr(a: TextureMap, b: TextureMap) -> float:
    _check_shapes(a, b)
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    if not np.any(a64 != b64):
        return PSNR_CAP
    return float(min(peak_signal_noise_ratio(a64, b64, data_range=1.0), PSNR_CAP))


def luminance(t: TextureMap) -> np.ndarray:
    t = t.astype(np.float64)
    return t @ LUMA_WEIGHTS if t.ndim == 3 else t


def ssim(a: TextureMap, b: TextureMap) -> float:
    _check_shapes(a, b)
    return float(structural_similarity(
        luminance(a), luminance(b),
        data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, K1=0.01, K2=0.03,
    ))


@torch.no_grad()
def perceptual_metric(a: TextureMap, b: TextureMap, extractor: PerceptualFeatureExtractor) -> float:
    _check_shapes(a, b)
    batch = lambda t: to_tensor(t).unsqueeze(0)
    return float(perceptual_distance(batch(a), batch(b), extractor).item())


# Evaluation

class EvalConfig(pydantic.BaseModel):
    strict: bool = pydantic.Field(False, description="Unmatched files make the evaluation fail.")
    extractor: Literal["random", "vgg19"] = "random"
    extractor_weights: Optional[str] = None
    extractor_width_divisor: int = pydantic.Field(8, ge=1)
    workers: int = pydantic.Field(4, ge=1)


class SampleMetrics(pydantic.BaseModel):
    sample_id: str
    psnr: float
    ssim: float
    perceptual: float


class MetricReport(pydantic.BaseModel):
    samples: List[SampleMetrics] = pydantic.Field(default_factory=list)
    mean_psnr: float = 0.0
    mean_ssim: float = 0.0
    mean_perceptual: float = 0.0
    unmatched: List[str] = pydantic.Field(default_factory=list, description="Files present in only one directory.")
    config: Dict[str, Any] = pydantic.Field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return bool(self.unmatched) and bool(self.config.get("strict"))


def _png_ids(directory: str) -> Dict[str, str]:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"Directory not found: {directory}")
    return {os.path.splitext(name)[0]: os.path.join(directory, name) for name in os.listdir(directory) if name.endswith(".png")}


def evaluate(pred_dir: str, gt_dir: str, config: Optional[EvalConfig] = None) -> MetricReport:
    """Scores every prediction against the same-named ground truth; unmatched names are listed and skipped."""
    config = config or EvalConfig()
    preds, gts = _png_ids(pred_dir), _png_ids(gt_dir)
    matched = sorted(set(preds) & set(gts))
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        logger.warning("Skipping %d unmatched files: %s", len(unmatched), ", ".join(unmatched))

    extractor = build_extractor(config.extractor, config.extractor_weights, config.extractor_width_divisor)

    def score(sample_id: str) -> SampleMetrics:
        pred, gt = images.read_texture(preds[sample_id]), images.read_texture(gts[sample_id])
        return SampleMetrics(
            sample_id=sample_id, psnr=psnr(pred, gt), ssim=ssim(pred, gt), perceptual=perceptual_metric(pred, gt, extractor)
        )

    with ThreadPoolExecutor(max_workers=config.workers) as executor:
        samples = list(executor.map(score, matched))

    mean = lambda key: float(np.mean([getattr(s, key) for s in samples])) if samples else 0.0
    return MetricReport(
        samples=samples,
        mean_psnr=mean("psnr"),
        mean_ssim=mean("ssim"),
        mean_perceptual=mean("perceptual"),
        unmatched=unmatched,
        config=config.model_dump(mode="json") | {"pred_dir": pred_dir, "gt_dir": gt_dir},
    )


def write_report(report: MetricReport, out_dir: str):
    """metrics.csv: one row per sample then a `mean` row. metrics.json: the full report."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "psnr", "ssim", "perceptual"])
        for s in report.samples:
            writer.writerow([s.sample_id, f"{s.psnr:.6f}", f"{s.ssim:.6f}", f"{s.perceptual:.6f}"])
        writer.writerow(["mean", f"{report.mean_psnr:.6f}", f"{report.mean_ssim:.6f}", f"{report.mean_perceptual:.6f}"])
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as f:
        f.write(report.model_dump_json(indent=4))
