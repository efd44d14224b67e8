"""Regime x label-budget sweeps with per-cell report files and a markdown summary.

Each (regime, budget, seed) cell writes one RunReport to ``cells/`` via an
atomic rename, so an interrupted sweep resumes by skipping every cell whose
file parses and matches its configuration.  Pretrained VAE weights are shared
between the two-step and M1 cells of one seed through ``checkpoints/``.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import Dataset, load_dataset
from .errors import ConfigError, DataError
from .trainer import REGIMES, RunReport, TrainConfig, build_models, pretrain_vae, run_regime

DEFAULT_BUDGETS = [100, 300, 800, 1200]
DEFAULT_SEEDS = [0, 1, 2, 3, 4]
REGIME_LABELS = {
    "supervised": "fully supervised",
    "alternating": "semi-supervised (alternating)",
    "two-step": "semi-supervised (two-step)",
    "m1": "M1 (frozen encoder)",
}


@dataclass
class ExperimentGrid:
    label_budgets: List[int] = field(default_factory=lambda: list(DEFAULT_BUDGETS))
    regimes: List[str] = field(default_factory=lambda: ["supervised", "alternating", "two-step"])
    seeds: List[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    base: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.regimes:
            if r not in REGIMES:
                raise ConfigError(f"unknown regime {r!r} in grid; choose from {REGIMES}")
        for name in ("label_budgets", "regimes", "seeds"):
            values = getattr(self, name)
            if not values:
                raise ConfigError(f"grid needs at least one entry in {name}")
            if len(set(values)) != len(values):
                raise ConfigError(f"duplicate entries in {name}")
        for key in ("regime", "labelled_count", "seed"):
            if key in self.base:
                raise ConfigError(f"{key!r} is set by the grid, not by the base config")
        TrainConfig.from_dict(self.base)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentGrid":
        known = {"label_budgets", "regimes", "seeds", "base"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentGrid":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"grid file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"grid file {path} is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"grid file {path} must hold a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {"label_budgets": list(self.label_budgets), "regimes": list(self.regimes),
                "seeds": list(self.seeds), "base": dict(self.base)}

    def config(self, regime: str, budget: int, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**self.base, "regime": regime, "labelled_count": budget, "seed": seed})

    def cells(self):
        """(regime, budget, seed) in declaration order; two-step runs before M1 so M1 finds its weights."""
        order = sorted(self.regimes, key=lambda r: r == "m1")
        for regime in order:
            for budget in self.label_budgets:
                for seed in self.seeds:
                    yield regime, budget, seed


def cell_name(regime: str, budget: int, seed: int) -> str:
    return f"{regime}_n{budget}_s{seed}.json"


def checkpoint_path(out_dir: Path, cfg: TrainConfig) -> Path:
    key = json.dumps(cfg.pretrain_key(), sort_keys=True).encode()
    return out_dir / "checkpoints" / f"vae_{hashlib.sha256(key).hexdigest()[:16]}.ckpt"


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def read_cell(path: Path, cfg: TrainConfig) -> Optional[RunReport]:
    """The stored report if it is complete and was produced by ``cfg``; otherwise None."""
    if not path.is_file():
        return None
    try:
        report = RunReport.from_json(path.read_text())
    except (ValueError, TypeError):
        return None
    if report.config != cfg.to_dict() or not math.isfinite(report.final_rmse):
        return None
    return report


def ensure_pretrained(cfg: TrainConfig, data: Dataset, out_dir: Path) -> Path:
    path = checkpoint_path(out_dir, cfg)
    if not path.is_file():
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + f".tmp{os.getpid()}")
        model, clf = build_models(cfg)
        pretrain_vae(model, clf, data, cfg, tmp)
        os.replace(tmp, path)
    return path


def run_cell(cfg: TrainConfig, data: Dataset, out_dir: Path) -> RunReport:
    checkpoint = None
    if cfg.regime in ("two-step", "m1"):
        checkpoint = ensure_pretrained(cfg, data, out_dir)
    return run_regime(cfg, data, checkpoint)


def run_experiment(grid: ExperimentGrid, data, out_dir, log=None) -> str:
    """Run every missing cell, then write ``results.json`` and ``table.md``; returns the table."""
    out_dir = Path(out_dir)
    if not isinstance(data, Dataset):
        data = load_dataset(data)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = log or (lambda msg: print(msg, file=sys.stderr, flush=True))
    reports: Dict[tuple, RunReport] = {}
    for regime, budget, seed in grid.cells():
        cfg = grid.config(regime, budget, seed)
        path = out_dir / "cells" / cell_name(regime, budget, seed)
        report = read_cell(path, cfg)
        if report is None:
            t0 = time.perf_counter()
            report = run_cell(cfg, data, out_dir)
            write_atomic(path, report.to_json())
            log(f"{path.name}: test RMSE {report.final_rmse:.4f} ({time.perf_counter() - t0:.0f} s)")
        else:
            log(f"{path.name}: done, skipped")
        reports[(regime, budget, seed)] = report
    ordered = [reports[(r, b, s)] for r in grid.regimes for b in grid.label_budgets for s in grid.seeds]
    results = {"grid": grid.to_dict(), "reports": [json.loads(r.to_json()) for r in ordered]}
    write_atomic(out_dir / "results.json", json.dumps(results, indent=1, sort_keys=True) + "\n")
    table = render_report(out_dir / "results.json")
    write_atomic(out_dir / "table.md", table)
    return table


def summarize(values: Sequence[float]) -> str:
    if len(values) == 1:
        return f"{values[0]:.4f}"
    return f"{np.mean(values):.4f} ± {np.std(values, ddof=1):.4f}"


def render_report(results_path) -> str:
    """Markdown table of test RMSE: rows are regimes, columns label budgets, cells mean ± std over seeds."""
    path = Path(results_path)
    try:
        results = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"results file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"results file {path} is not valid JSON: {exc}") from None
    try:
        grid = ExperimentGrid.from_dict(results["grid"])
        entries = results["reports"]
    except (KeyError, TypeError, ConfigError) as exc:
        raise DataError(f"results file {path} has no valid grid/reports: {exc}") from None
    values: Dict[tuple, List[float]] = {}
    for i, entry in enumerate(entries):
        try:
            key = (entry["regime"], int(entry["labelled_count"]), int(entry["seed"]))
            rmse = float(entry["final_rmse"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"results file {path}: report {i} is malformed ({exc!r})") from None
        if key[0] not in grid.regimes or key[1] not in grid.label_budgets or key[2] not in grid.seeds:
            raise DataError(f"results file {path}: report {i} {key} is outside the grid")
        if not math.isfinite(rmse):
            raise DataError(f"results file {path}: report {i} {key} has a non-finite RMSE")
        values.setdefault(key[:2], []).append(rmse)
    header = "| regime | " + " | ".join(f"{b} labels" for b in grid.label_budgets) + " |"
    lines = ["Test RMSE of predicted vote fractions (mean ± std over seeds)", "", header,
             "|" + "---|" * (len(grid.label_budgets) + 1)]
    for regime in grid.regimes:
        cells = []
        for budget in grid.label_budgets:
            v = values.get((regime, budget))
            if not v:
                raise DataError(f"results file {path}: no report for cell ({regime}, {budget})")
            cells.append(summarize(v))
        lines.append(f"| {REGIME_LABELS[regime]} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
