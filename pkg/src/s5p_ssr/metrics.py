"""Reference and non-reference evaluation.

Conventions (recorded in every report):

- PSNR uses ``R = max - min`` of the reference over the evaluation set and
  is capped at 100 dB.
- SSIM uses an 11x11 Gaussian window (std 1.5, shrunk to fit small images),
  constants k1=0.01, k2=0.03, statistics over valid window positions only,
  averaged over channels.
- SCC is the Pearson correlation of 3x3-Laplacian-filtered images per
  channel, averaged.
- Measurement consistency is the PSNR between the re-degraded
  reconstruction A(xhat) and the observed measurement y.
- Sharpness is the equal-weight mean of Sobel gradient magnitude and 5x5
  local variance, per channel, on normalized data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import correlate2d

from .errors import ShapeError, SpaceError
from .sensor import DegradationOperator, HyperCube

PSNR_CAP = 100.0

REFERENCE_METRICS = ("psnr", "ssim", "scc")
BLIND_METRICS = ("consistency", "sharpness")


def _as_float64(cube: HyperCube) -> np.ndarray:
    return cube.data.astype(np.float64, copy=False)


def psnr(xhat: np.ndarray, x: np.ndarray, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB against the reference's value range."""
    if xhat.shape != x.shape:
        raise ShapeError(f"shape mismatch: {xhat.shape} vs {x.shape}")
    if data_range is None:
        data_range = float(x.max() - x.min())
    mse = float(np.mean((xhat.astype(np.float64) - x.astype(np.float64)) ** 2))
    if mse == 0 or data_range == 0:
        return PSNR_CAP
    value = 10.0 * np.log10(data_range**2 / mse)
    return float(min(value, PSNR_CAP))


def _gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-0.5 * (t / sigma) ** 2)
    win = np.outer(g, g)
    return win / win.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    size = min(11, a.shape[0] - (a.shape[0] + 1) % 2, a.shape[1] - (a.shape[1] + 1) % 2)
    size = max(size, 3)
    win = _gaussian_window(size)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = correlate2d(a, win, mode="valid")
    mu_b = correlate2d(b, win, mode="valid")
    var_a = correlate2d(a * a, win, mode="valid") - mu_a**2
    var_b = correlate2d(b * b, win, mode="valid") - mu_b**2
    cov = correlate2d(a * b, win, mode="valid") - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def _scc_channel(a: np.ndarray, b: np.ndarray) -> float:
    ha = correlate2d(a, LAPLACIAN, mode="valid").ravel()
    hb = correlate2d(b, LAPLACIAN, mode="valid").ravel()
    sa, sb = ha.std(), hb.std()
    if sa == 0 or sb == 0:
        return 1.0 if np.array_equal(ha, hb) else 0.0
    return float(np.mean((ha - ha.mean()) * (hb - hb.mean())) / (sa * sb))


def reference_metrics(xhat: HyperCube, x: HyperCube,
                      data_range: float | None = None) -> dict:
    """PSNR / SSIM / SCC of a reconstruction against its reference."""
    if xhat.shape != x.shape:
        raise ShapeError(f"shape mismatch: {xhat.shape} vs {x.shape}")
    if xhat.space != x.space:
        raise SpaceError(f"space mismatch: {xhat.space} vs {x.space}")
    a = _as_float64(xhat)
    b = _as_float64(x)
    if data_range is None:
        data_range = float(b.max() - b.min())
    ssim = np.mean([_ssim_channel(a[c], b[c], data_range) for c in range(a.shape[0])])
    scc = np.mean([_scc_channel(a[c], b[c]) for c in range(a.shape[0])])
    return {"psnr": psnr(a, b, data_range), "ssim": float(ssim), "scc": float(scc)}


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def _sharpness_channel(a: np.ndarray) -> float:
    gx = correlate2d(a, SOBEL_X, mode="valid")
    gy = correlate2d(a, SOBEL_X.T, mode="valid")
    grad = float(np.mean(np.sqrt(gx**2 + gy**2)))
    win = np.full((5, 5), 1.0 / 25.0)
    mu = correlate2d(a, win, mode="valid")
    var = correlate2d(a * a, win, mode="valid") - mu**2
    return 0.5 * grad + 0.5 * float(np.mean(np.maximum(var, 0.0)))


def sharpness(cube: HyperCube) -> float:
    data = _as_float64(cube)
    return float(np.mean([_sharpness_channel(data[c]) for c in range(data.shape[0])]))


def blind_metrics(xhat: HyperCube, y: HyperCube, A: DegradationOperator,
                  data_range: float | None = None) -> dict:
    """Non-reference metrics: measurement consistency and sharpness.

    ``data_range`` freezes the consistency PSNR range (e.g. over a whole
    evaluation split); by default the observed measurement's range is used.
    """
    with torch.no_grad():
        re_degraded = A(torch.from_numpy(_as_float64(xhat))).numpy()
    if re_degraded.shape != y.shape:
        raise ShapeError(
            f"A(xhat) shape {re_degraded.shape} must equal y shape {y.shape}"
        )
    return {
        "consistency": psnr(re_degraded, _as_float64(y), data_range=data_range),
        "sharpness": sharpness(xhat),
    }


def pca_rgb(gt: HyperCube, others: list[HyperCube]) -> list[np.ndarray]:
    """Project cubes to RGB using the top-3 principal components of the GT.

    The basis, channel means, and per-component scaling ranges all come from
    the GT so every projection is directly comparable; outputs are (H, W, 3)
    arrays clipped to [0, 1].
    """
    if gt.channels < 3:
        raise ShapeError(f"PCA-RGB needs >= 3 channels, got {gt.channels}")
    for other in others:
        if other.channels != gt.channels:
            raise ShapeError("all cubes must share the GT's channel count")
    flat = _as_float64(gt).reshape(gt.channels, -1).T  # pixels x channels
    means = flat.mean(axis=0)
    centered = flat - means
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:3]
    for k in range(3):  # deterministic sign: dominant loading positive
        if comps[k, np.argmax(np.abs(comps[k]))] < 0:
            comps[k] = -comps[k]
    gt_scores = centered @ comps.T
    lo = gt_scores.min(axis=0)
    span = np.maximum(gt_scores.max(axis=0) - lo, 1e-12)

    images = []
    for cube in [gt, *others]:
        c, h, w = cube.shape
        scores = (_as_float64(cube).reshape(c, -1).T - means) @ comps.T
        scaled = np.clip((scores - lo) / span, 0.0, 1.0)
        images.append(scaled.reshape(h, w, 3))
    return images


def pca_explained_variance(gt: HyperCube) -> np.ndarray:
    """Fraction of variance carried by each principal component of the GT."""
    flat = _as_float64(gt).reshape(gt.channels, -1).T
    sv = np.linalg.svd(flat - flat.mean(axis=0), compute_uv=False)
    power = sv**2
    return power / power.sum()


@dataclass
class MetricReport:
    """Per-image and aggregate metric values for one band evaluation."""

    band_id: str
    space: str
    rows: list = field(default_factory=list)  # (image_id, model_id, metric, value)

    def add(self, model_id: str, image_id: str, values: dict):
        for metric, value in values.items():
            self.rows.append((image_id, model_id, metric, float(value)))

    def aggregate(self, model_id: str) -> dict:
        out: dict = {}
        for _, mid, metric, value in self.rows:
            if mid == model_id:
                out.setdefault(metric, []).append(value)
        return {metric: float(np.mean(vals)) for metric, vals in out.items()}

    def model_ids(self) -> list[str]:
        seen: dict = {}
        for _, mid, _, _ in self.rows:
            seen.setdefault(mid, None)
        return list(seen)

    def value(self, model_id: str, metric: str) -> float:
        return self.aggregate(model_id)[metric]

    def write_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["band", "space", "image", "model", "metric", "value"])
            for image_id, model_id, metric, value in self.rows:
                writer.writerow([self.band_id, self.space, image_id, model_id, metric, value])
            for model_id in self.model_ids():
                for metric, value in sorted(self.aggregate(model_id).items()):
                    writer.writerow([self.band_id, self.space, "mean", model_id, metric, value])

    @classmethod
    def read_csv(cls, path) -> "MetricReport":
        rows = []
        band, space = "", ""
        with Path(path).open() as fh:
            for rec in csv.DictReader(fh):
                band, space = rec["band"], rec["space"]
                if rec["image"] == "mean":
                    continue
                rows.append((rec["image"], rec["model"], rec["metric"], float(rec["value"])))
        return cls(band_id=band, space=space, rows=rows)
