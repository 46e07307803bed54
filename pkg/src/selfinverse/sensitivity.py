"""Model-sensitivity protocol: perturb inputs through the opposite-direction
baseline, score clean vs perturbed outputs against ground truth, and report
the per-sample metric change dE = |E_perturbed - E_clean|.

For task direction A the four steps are: (1) x_i + dx_i = pix2pixB(y_i);
(2) clean outputs model(x_i); (3) perturbed outputs model(x_i + dx_i);
(4) E of both against y_i, dE per sample. Direction B swaps the roles.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable

import numpy as np

from .data import PairedDataset, PairedSample, to_unit
from .metrics import METRIC_PARAMS, mean_abs_error, psnr, ssim
from .models import UnetGenerator, Translator

METRICS = ("psnr", "ssim", "l1")

TranslateFn = Callable[[np.ndarray], np.ndarray]


def _as_fn(g) -> TranslateFn:
    return Translator(g) if isinstance(g, UnetGenerator) else g


def _score(metric: str, pred: np.ndarray, target: np.ndarray) -> float:
    pu, tu = to_unit(pred), to_unit(target)
    if metric == "psnr":
        return psnr(pu, tu, data_range=1.0)
    if metric == "ssim":
        return ssim(pu[0], tu[0], data_range=1.0)
    if metric == "l1":
        return mean_abs_error(pu, tu)
    raise ValueError(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class SensitivityConfig:
    direction: str  # "A" or "B"
    metric: str
    models: dict  # {"pix2pixA": fn, "pix2pixB": fn, "one2one": fn}

    def __post_init__(self):
        if self.direction not in ("A", "B"):
            raise ValueError(f"direction must be A or B, got {self.direction!r}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        missing = {"pix2pixA", "pix2pixB", "one2one"} - set(self.models)
        if missing:
            raise ValueError(f"missing model checkpoints: {sorted(missing)}")


@dataclass
class SensitivityRow:
    id: str
    e_clean: float
    e_perturbed: float
    de: float


@dataclass
class SensitivityReport:
    model: str
    direction: str
    metric: str
    per_sample: list[SensitivityRow]
    metadata: dict = field(default_factory=lambda: dict(METRIC_PARAMS))

    @property
    def mean_de(self) -> float:
        return float(np.mean([r.de for r in self.per_sample]))

    def to_json(self, path: Path | str) -> None:
        doc = {
            "model": self.model,
            "direction": self.direction,
            "metric": self.metric,
            "metadata": self.metadata,
            "mean_de": self.mean_de,
            "per_sample": [asdict(r) for r in self.per_sample],
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))

    def to_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "e_clean", "e_perturbed", "de"])
            for r in self.per_sample:
                w.writerow([r.id, repr(r.e_clean), repr(r.e_perturbed), repr(r.de)])


def perturb_inputs(dataset: PairedDataset, direction: str, opposite: TranslateFn) -> PairedDataset:
    """Replace the active-direction inputs with the opposite baseline's outputs."""
    fn = _as_fn(opposite)
    samples = []
    for s in dataset.samples:
        if direction == "A":
            samples.append(PairedSample(id=s.id + "+perturbed", x=fn(s.y), y=s.y))
        else:
            samples.append(PairedSample(id=s.id + "+perturbed", x=s.x, y=fn(s.x)))
    return PairedDataset(samples=samples, split=dataset.split, domain_names=dataset.domain_names)


def run_sensitivity(cfg: SensitivityConfig, dataset: PairedDataset
                    ) -> tuple[SensitivityReport, SensitivityReport]:
    """Run the four-step protocol; returns (baseline report, one2one report)."""
    baseline_name = "pix2pixA" if cfg.direction == "A" else "pix2pixB"
    opposite_name = "pix2pixB" if cfg.direction == "A" else "pix2pixA"
    perturbed = perturb_inputs(dataset, cfg.direction, _as_fn(cfg.models[opposite_name]))

    reports = []
    for model_name in (baseline_name, "one2one"):
        fn = _as_fn(cfg.models[model_name])
        rows = []
        for s, sp in zip(dataset.samples, perturbed.samples):
            if cfg.direction == "A":
                inp, inp_pert, label = s.x, sp.x, s.y
            else:
                inp, inp_pert, label = s.y, sp.y, s.x
            e_clean = _score(cfg.metric, fn(inp), label)
            e_pert = _score(cfg.metric, fn(inp_pert), label)
            rows.append(SensitivityRow(id=s.id, e_clean=e_clean, e_perturbed=e_pert,
                                       de=abs(e_pert - e_clean)))
        reports.append(SensitivityReport(model=model_name, direction=cfg.direction,
                                         metric=cfg.metric, per_sample=rows))
    return reports[0], reports[1]


@dataclass
class SummaryRow:
    direction: str
    model: str
    metric: str
    mean_de: float | None  # None marks a gap (combination not run)


def sensitivity_summary(reports: list[SensitivityReport],
                        directions: tuple[str, ...] = ("A", "B"),
                        metrics: tuple[str, ...] = ("psnr", "ssim")) -> list[SummaryRow]:
    """Per-direction, per-model mean dE in a fixed table layout."""
    have = {(r.direction, r.model, r.metric): r.mean_de for r in reports}
    rows = []
    for direction in directions:
        baseline = "pix2pixA" if direction == "A" else "pix2pixB"
        for model in (baseline, "one2one"):
            for metric in metrics:
                rows.append(SummaryRow(direction=direction, model=model, metric=metric,
                                       mean_de=have.get((direction, model, metric))))
    return rows


def summary_to_csv(rows: list[SummaryRow], path: Path | str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["direction", "model", "metric", "mean_dE"])
        for r in rows:
            w.writerow([r.direction, r.model, r.metric,
                        "missing" if r.mean_de is None else repr(r.mean_de)])


def summary_to_text(rows: list[SummaryRow]) -> str:
    lines = [f"{'direction':<10} {'model':<10} {'metric':<7} {'mean_dE':>12}"]
    for r in rows:
        val = "   missing" if r.mean_de is None else f"{r.mean_de:12.6f}"
        lines.append(f"{r.direction:<10} {r.model:<10} d{r.metric.upper():<6} {val:>12}")
    return "\n".join(lines) + "\n"
