"""The mapping/depth ablation grid: seven training configurations scored on held-out frames."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Sequence
from .gaussians import ATTRIBUTES
from .losses import LossWeights
from .synth import evaluate
from .train import MappingConfig, TrainConfig, train

ROWS = ("a", "b", "c", "d", "e", "f", "g")
METRICS = ("psnr", "ssim", "psnr_crop", "ssim_crop", "psnr_band")
DEPTH_ON = 0.02

ROW_LABELS = {
    "a": "no mapping + depth",
    "b": "shared mapping",
    "c": "separate mapping",
    "d": "shared, no position mapper",
    "e": "shared, no opacity mapper",
    "f": "shared, no color mapper",
    "g": "full (shared + depth)",
}


def _without(name: str) -> tuple[str, ...]:
    return tuple(a for a in ATTRIBUTES if a != name)


def row_config(row: str, base: TrainConfig) -> TrainConfig:
    """Configuration of one grid row derived from ``base`` (its mapping and depth weight are replaced)."""
    depth_off = base.weights.to_dict() | {"depth": 0.0}
    depth_on = base.weights.to_dict() | {"depth": DEPTH_ON}
    spec = {
        "a": (MappingConfig("off"), depth_on),
        "b": (MappingConfig("shared"), depth_off),
        "c": (MappingConfig("separate"), depth_off),
        "d": (MappingConfig("shared", _without("positions")), depth_off),
        "e": (MappingConfig("shared", _without("opacity_logits")), depth_off),
        "f": (MappingConfig("shared", _without("sh_coefficients")), depth_off),
        "g": (MappingConfig("shared"), depth_on),
    }
    if row not in spec:
        raise KeyError(f"unknown ablation row {row!r}")
    mapping, weights = spec[row]
    mapping = MappingConfig(mapping.mode, mapping.attributes, base.mapping.hidden)
    return base.with_overrides(mapping=mapping, weights=LossWeights.from_dict(weights))


def ablation_grid(base: TrainConfig, rows=ROWS) -> dict[str, TrainConfig]:
    return {r: row_config(r, base) for r in rows}


@dataclass
class RunResult:
    row: str
    seed: int
    metrics: dict[str, float]
    seconds: float
    config_digest: str


@dataclass
class AblationResult:
    runs: list[RunResult] = field(default_factory=list)

    def rows(self) -> list[str]:
        return [r for r in ROWS if any(run.row == r for run in self.runs)]

    def mean(self, row: str, metric: str) -> float:
        vals = [run.metrics[metric] for run in self.runs if run.row == row]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        return {
            "runs": [vars(r) for r in self.runs],
            "mean": {r: {m: self.mean(r, m) for m in METRICS} for r in self.rows()},
        }

    def markdown(self) -> str:
        head = "| Row | Setting | PSNR | SSIM | Crop PSNR | Crop SSIM | Band PSNR | Seeds |"
        lines = [head, "|" + "---|" * 8]
        for r in self.rows():
            n = sum(run.row == r for run in self.runs)
            vals = " | ".join(f"{self.mean(r, m):.3f}" if "ssim" in m else f"{self.mean(r, m):.2f}" for m in METRICS)
            lines.append(f"| ({r}) | {ROW_LABELS[r]} | {vals} | {n} |")
        return "\n".join(lines) + "\n"


def run_ablation(data: Sequence, base: TrainConfig, rows=ROWS, seeds=(0,), iterations: int = 5000,
                 out_dir=None, progress=None) -> AblationResult:
    """Train every (row, seed) for ``iterations`` steps and score held-out frames."""
    result = AblationResult()
    out = Path(out_dir) if out_dir is not None else None
    for row in rows:
        for seed in seeds:
            cfg = row_config(row, base).with_overrides(seed=int(seed), total_iterations=int(iterations))
            start = time.perf_counter()
            run_dir = out / f"{row}_seed{seed}" if out is not None else None
            state = train(data, cfg, out_dir=run_dir)
            metrics = evaluate(state, data).summary
            run = RunResult(row, int(seed), metrics, time.perf_counter() - start, cfg.digest())
            result.runs.append(run)
            if run_dir is not None:
                (run_dir / "metrics.json").write_text(json.dumps(vars(run), indent=1, sort_keys=True))
            if progress is not None:
                progress(run)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.json").write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True))
        (out / "table.md").write_text(result.markdown())
    return result
