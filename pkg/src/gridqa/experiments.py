"""The full desk-scale experiment: pre-train per seed, compare, sweep.

``run_suite`` is shared by ``scripts/run_experiments.py`` and the acceptance
tests; it returns plain python results and optionally writes them to disk.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

from .calibration import CalibrationConfig
from .dataset_gen import DatasetConfig, build_dataset
from .eval_harness import (
    DEFAULT_TIERS,
    ExperimentConfig,
    StillAgent,
    compare_settings,
    curve_table,
    evaluate,
    format_comparison,
    format_deltas,
    mean_std,
    pretrain,
    sweep_lambda,
    sweep_markers,
)
from .nav_policy import NavTrainConfig
from .qa_model import QATrainConfig, train_blindfold


@dataclass(frozen=True)
class SuiteConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    nav: NavTrainConfig = field(default_factory=NavTrainConfig)
    calib: CalibrationConfig = field(default_factory=CalibrationConfig)
    tiers: tuple[int, ...] = DEFAULT_TIERS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    lambdas: tuple[float, ...] = (0.0, 0.1, 0.2, 0.5, 0.8, 1.0)
    marker_counts: tuple[int, ...] = (1, 2, 3, 4, 5)
    train_qa: bool = True
    blindfold: QATrainConfig = field(default_factory=QATrainConfig)

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(nav=self.nav, calib=self.calib, tiers=self.tiers, train_qa=self.train_qa)


def run_suite(cfg: SuiteConfig = SuiteConfig(), out_dir=None, log=None) -> dict:
    """Comparison table (with a blindfold row), lambda sweep on val, marker sweep on test."""
    t0 = time.time()
    timings = {}
    ds = build_dataset(cfg.data)
    exp = cfg.experiment()
    pretrained = {}
    for seed in cfg.seeds:
        nav, qa, _ = pretrain(ds, seed, exp, log=log)
        pretrained[seed] = (nav, qa)
    timings["pretrain"] = time.time() - t0

    t = time.time()
    comparison = compare_settings(ds, cfg.seeds, exp, pretrained, "test", log=log)
    blind = {"d_delta": {k: [] for k in cfg.tiers}, "qa": {k: [] for k in cfg.tiers}}
    for seed in cfg.seeds:
        bf = train_blindfold(ds, QATrainConfig(epochs=cfg.blindfold.epochs, lr=cfg.blindfold.lr,
                                               batch=cfg.blindfold.batch, seed=seed))
        rep = evaluate(StillAgent(bf), ds.questions("test"), cfg.tiers, seed)
        for k in cfg.tiers:
            blind["d_delta"][k].append(rep.tiers[k].mean_d_delta)
            blind["qa"][k].append(rep.tiers[k].qa_accuracy)
    comparison["rows"]["blindfold"] = blind
    timings["compare"] = time.time() - t

    t = time.time()
    lam = sweep_lambda(ds, cfg.seeds, exp, cfg.lambdas, pretrained, "val", log=log)
    timings["lambda_sweep"] = time.time() - t
    t = time.time()
    markers = sweep_markers(ds, cfg.seeds, exp, cfg.marker_counts, pretrained, "test", log=log)
    timings["marker_sweep"] = time.time() - t
    timings["total"] = time.time() - t0

    result = {"comparison": comparison, "lambda": lam, "markers": markers, "timings": timings,
              "pretrained": pretrained, "n_answers": len(ds.answer_vocab)}
    if out_dir is not None:
        write_suite(out_dir, result)
    return result


def summary_text(result: dict) -> str:
    parts = [format_comparison(result["comparison"]), "", format_deltas(result["comparison"]), ""]
    for name in ("lambda", "markers"):
        header, rows = curve_table(result[name])
        parts.append(f"{name} sweep (seed-mean d_delta in cells)")
        parts.append(f"{'tier':<8}" + "".join(f"{h:>10}" for h in header[1:]))
        for r in rows:
            parts.append(f"{'T-' + str(r[0]):<8}" + "".join(f"{v:>10.3f}" for v in r[1:]))
        parts.append("")
    parts.append("timings (s): " + ", ".join(f"{k} {v:.0f}" for k, v in result["timings"].items()))
    return "\n".join(parts) + "\n"


def write_suite(out_dir, result: dict) -> None:
    from .storage import atomic_write, save_model, write_csv

    out = Path(out_dir)
    atomic_write(out / "summary.txt", summary_text(result))
    for seed, (nav, qa) in result["pretrained"].items():
        save_model(out / "models" / f"seed{seed}.nav.ckpt", nav)
        if qa is not None:
            save_model(out / "models" / f"seed{seed}.qa.ckpt", qa)
    comp = result["comparison"]
    rows = []
    for name, row in comp["rows"].items():
        for k in comp["tiers"]:
            for seed, d, q in zip(comp["seeds"], row["d_delta"][k], row["qa"][k]):
                rows.append([name, k, seed, d, q])
    write_csv(out / "comparison.csv", ["setting", "k", "seed", "mean_d_delta", "qa_accuracy"], rows)
    for name in ("lambda", "markers"):
        res = result[name]
        write_csv(out / f"sweep_{name}.csv", *curve_table(res))
        per_seed = [[str(x), k, s, v] for x in res["x"] for k in res["tiers"]
                    for s, v in zip(res["seeds"], res["curve"][x][k])]
        write_csv(out / f"sweep_{name}_seeds.csv", [name, "k", "seed", "mean_d_delta"], per_seed)


__all__ = ["SuiteConfig", "run_suite", "summary_text", "write_suite", "mean_std"]
