"""Evaluation battery: L1, PSNR, SSIM, per-direction reports, self-inverse score.

All metrics are computed in [0, 1] intensity space after un-mapping model
tensors from [-1, 1]; the convention is recorded in every report's metadata.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.signal import convolve2d

import torch.nn as nn

from .data import PairedDataset, to_unit
from .models import Translator, UnetGenerator

PSNR_CAP_DB = 99.0

METRIC_PARAMS = {
    "space": "[0,1]",
    "psnr_cap_db": PSNR_CAP_DB,
    "ssim_window": 11,
    "ssim_sigma": 1.5,
    "ssim_k1": 0.01,
    "ssim_k2": 0.03,
}

TranslateFn = Callable[[np.ndarray], np.ndarray]


def _as_translator(g) -> TranslateFn:
    if isinstance(g, UnetGenerator) or isinstance(g, nn.Module):
        return Translator(g)
    return g


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def mean_abs_error(a: np.ndarray, b: np.ndarray) -> float:
    _check_pair(a, b)
    return float(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).mean())


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE) in dB, capped at 99 so reports stay finite."""
    _check_pair(a, b)
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(data_range * data_range / mse))


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    x = np.arange(window) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_single(a: np.ndarray, b: np.ndarray, window: int, sigma: float,
                 data_range: float) -> float:
    k = _gaussian_kernel(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu1 = convolve2d(a, k, mode="valid")
    mu2 = convolve2d(b, k, mode="valid")
    s11 = convolve2d(a * a, k, mode="valid") - mu1 * mu1
    s22 = convolve2d(b * b, k, mode="valid") - mu2 * mu2
    s12 = convolve2d(a * b, k, mode="valid") - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float((num / den).mean())


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         data_range: float = 1.0) -> float:
    """Mean local SSIM with a Gaussian window, channels averaged."""
    _check_pair(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    a = a.reshape(-1, a.shape[-2], a.shape[-1])
    b = b.reshape(-1, b.shape[-2], b.shape[-1])
    if min(a.shape[-2:]) < window:
        raise ValueError(f"image spatial size {a.shape[-2:]} below SSIM window {window}")
    vals = [_ssim_single(a[c], b[c], window, sigma, data_range) for c in range(a.shape[0])]
    return float(np.mean(vals))


@dataclass
class SampleMetrics:
    id: str
    l1: float
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    direction: str  # "A2B" or "B2A"
    per_sample: list[SampleMetrics]
    metadata: dict = field(default_factory=lambda: dict(METRIC_PARAMS))

    @property
    def aggregates(self) -> dict[str, float]:
        out = {}
        for m in ("l1", "psnr", "ssim"):
            vals = np.array([getattr(s, m) for s in self.per_sample], dtype=np.float64)
            out[f"{m}_mean"] = float(vals.mean())
            out[f"{m}_std"] = float(vals.std())  # population std (ddof=0)
        return out

    def to_json(self, path: Path | str) -> None:
        doc = {
            "direction": self.direction,
            "metadata": self.metadata,
            "aggregates": self.aggregates,
            "per_sample": [asdict(s) for s in self.per_sample],
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))

    def to_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "l1", "psnr", "ssim"])
            for s in self.per_sample:
                w.writerow([s.id, repr(s.l1), repr(s.psnr), repr(s.ssim)])


def compare_images(pred: np.ndarray, target: np.ndarray) -> tuple[float, float, float]:
    """(L1, PSNR, SSIM) between two [-1, 1] tensors, computed in [0, 1] space."""
    pu, tu = to_unit(pred), to_unit(target)
    return (
        mean_abs_error(pu, tu),
        psnr(pu, tu, data_range=1.0),
        ssim(pu[0], tu[0], data_range=1.0),
    )


def evaluate(g, dataset: PairedDataset, direction: str) -> MetricReport:
    """Translate every sample in the given direction and score against labels."""
    if direction not in ("A2B", "B2A"):
        raise ValueError(f"direction must be A2B or B2A, got {direction!r}")
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    fn = _as_translator(g)
    rows = []
    for s in dataset.samples:
        inp, label = (s.x, s.y) if direction == "A2B" else (s.y, s.x)
        pred = fn(inp)
        l1, p, ss = compare_images(pred, label)
        rows.append(SampleMetrics(id=s.id, l1=l1, psnr=p, ssim=ss))
    return MetricReport(direction=direction, per_sample=rows)


def self_inverse_score(g, dataset: PairedDataset) -> float:
    """Mean [0,1]-space L1 of g(g(v)) against v over both domains of the dataset."""
    if len(dataset) == 0:
        raise ValueError("cannot score an empty dataset")
    fn = _as_translator(g)
    vals = []
    for s in dataset.samples:
        for v in (s.x, s.y):
            rec = fn(fn(v))
            vals.append(mean_abs_error(to_unit(rec), to_unit(v)))
    return float(np.mean(vals))
