"""Declarative multi-seed experiments and the cross-variant comparison report."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plotting
from .dataset import DatasetConfig, generate_dataset
from .errors import ConfigError
from .evaluation import C_GRID, SIGMA_GRID, EvalReport, evaluate_model
from .model import load_checkpoint
from .stats import holm, paired_tests, paired_ttest, stars
from .training import TrainConfig, train

log = logging.getLogger(__name__)

INTRINSIC = slice(3, 6)
EXTRINSIC = slice(0, 3)

DEFAULT_VARIANTS = {
    "baseline": {"variant": "baseline"},
    "joint": {"variant": "joint"},
    "wo_cm": {"variant": "wo_cm"},
    "w_cm": {"variant": "w_cm", "cm_activation_fraction": 0.25},
    "w_cm_early": {"variant": "w_cm", "cm_activation_fraction": 0.10},
}


@dataclass
class EvalConfig:
    sigmas: tuple = SIGMA_GRID
    cs: tuple = C_GRID
    perturb_mode: str = "zero_fill"
    degradation_cell: tuple = (0.0, 0.35)
    classify: bool = True
    sweep: bool = True
    checkpoint: str = "final"  # which checkpoint of each run is evaluated: final | best


@dataclass
class ExperimentConfig:
    """Everything needed to replay an experiment; JSON round-trips exactly."""

    dataset: dict = field(default_factory=lambda: DatasetConfig.desk().to_dict())
    train: dict = field(default_factory=lambda: {"learning_rate": 1e-3, "epochs": 200, "batch_size": 24})
    variants: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_VARIANTS.items()})
    seeds: list = field(default_factory=lambda: [0])
    evaluation: dict = field(default_factory=lambda: dataclasses.asdict(EvalConfig()))
    figures: bool = True
    shade: float = 1.0  # curve band in std units; 0.1 matches the published figure style

    def validate(self):
        if not self.seeds:
            raise ConfigError("experiment needs at least one seed")
        if not self.variants:
            raise ConfigError("experiment needs at least one variant")
        for label in self.variants:
            self.train_config(label, self.seeds[0]).validate()
        self.dataset_config(self.seeds[0]).validate()
        self.eval_config()

    def dataset_config(self, seed: int) -> DatasetConfig:
        d = dict(self.dataset)
        d["seed"] = int(seed)
        return DatasetConfig.from_dict(d)

    def train_config(self, label: str, seed: int) -> TrainConfig:
        if label not in self.variants:
            raise ConfigError(f"unknown variant label {label!r}")
        merged = {**self.train, **self.variants[label], "seed": int(seed)}
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        bad = set(merged) - known
        if bad:
            raise ConfigError(f"unknown training fields {sorted(bad)}")
        return TrainConfig(**merged)

    def eval_config(self) -> EvalConfig:
        known = {f.name for f in dataclasses.fields(EvalConfig)}
        bad = set(self.evaluation) - known
        if bad:
            raise ConfigError(f"unknown evaluation fields {sorted(bad)}")
        ec = EvalConfig(**self.evaluation)
        if ec.checkpoint not in ("final", "best"):
            raise ConfigError(f"evaluation.checkpoint must be final or best, got {ec.checkpoint!r}")
        return ec

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown experiment fields {sorted(bad)}")
        return cls(**d)


def run_variant(config: ExperimentConfig, label: str, seed: int, dataset, out_dir=None):
    """Train one labelled variant on one seed's dataset and evaluate it."""
    tc = config.train_config(label, seed)
    ec = config.eval_config()
    result = train(tc, dataset, out_dir=out_dir)
    model = result.model
    if ec.checkpoint == "best" and out_dir is not None and (Path(out_dir) / "best.pt").exists():
        model, _ = load_checkpoint(Path(out_dir) / "best.pt")
    report = evaluate_model(model, dataset, seed=seed, sweep=ec.sweep, classify=ec.classify,
                            sigmas=ec.sigmas, cs=ec.cs, perturb_mode=ec.perturb_mode)
    if out_dir is not None:
        report.write_json(Path(out_dir) / "report.json")
        report.write_csv(Path(out_dir) / "report.csv")
    return result, report


def run_experiment(config: ExperimentConfig, out_dir, progress: bool = False) -> dict:
    """Every seed x variant, then the comparison report (written under ``out_dir``)."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = {label: {} for label in config.variants}
    for seed in config.seeds:
        dataset = generate_dataset(config.dataset_config(seed))
        for label in config.variants:
            if progress:
                log.info("seed %d variant %s", seed, label)
            _, rep = run_variant(config, label, seed, dataset, out / f"seed_{seed}" / label)
            reports[label][seed] = rep
    comparison = compare(reports, config.eval_config())
    write_comparison(comparison, out)
    if config.figures:
        render_figures(comparison, out / "figures", shade=config.shade)
    return comparison


# --------------------------------------------------------------------------- comparison


def _stack(reports: dict, attr: str) -> np.ndarray:
    return np.stack([np.asarray(getattr(r, attr), dtype=float) for r in reports.values()])


def _paired_metric(reports: dict, attr: str, cols: slice) -> np.ndarray:
    """Per-trajectory metric concatenated over seeds (seed-major, trajectory-id order)."""
    parts = []
    for seed in sorted(reports):
        r = reports[seed]
        ids = r.test_ids if attr == "test_per_traj" else r.surprise_ids
        order = np.argsort(ids, kind="stable")
        parts.append(np.asarray(getattr(r, attr), dtype=float)[order][:, cols].mean(1))
    return np.concatenate(parts)


def convergence_test(reports_a: dict, reports_b: dict, columns=(3, 4, 5)) -> list:
    """One-sided paired test over seeds that ``a`` converges earlier than ``b``, Holm across properties."""
    seeds = sorted(set(reports_a) & set(reports_b))
    raw, rows = [], []
    for j in columns:
        a = np.array([reports_a[s].test_convergence[j] for s in seeds], dtype=float)
        b = np.array([reports_b[s].test_convergence[j] for s in seeds], dtype=float)
        raw.append(paired_ttest(a, b, alternative="less") if len(seeds) >= 2 else 1.0)
        rows.append({"property": j, "a": a.tolist(), "b": b.tolist()})
    for row, p, q in zip(rows, raw, holm(raw)):
        row.update(p_raw=float(p), p_holm=float(q), stars=stars(q))
    return rows


def relative_degradation_from_report(r: EvalReport, cell) -> float:
    ref = np.asarray(r.perturbation["0.0,0.0"])
    key = f"{float(cell[0])},{float(cell[1])}"
    return float(np.mean((np.asarray(r.perturbation[key]) - ref) / ref))


def compare(reports: dict, ec: EvalConfig | None = None) -> dict:
    """Aggregate ``reports[label][seed]`` into the cross-variant comparison dict."""
    ec = ec or EvalConfig()
    labels = list(reports)
    seeds = sorted({s for r in reports.values() for s in r})
    summary = {}
    for label, by_seed in reports.items():
        s = {
            "nmse_time_avg_mean": _stack(by_seed, "nmse_time_avg").mean(0).tolist(),
            "nmse_time_avg_std": _stack(by_seed, "nmse_time_avg").std(0).tolist(),
            "curve_mean": _stack(by_seed, "nmse_curve").mean(0).tolist(),
            "curve_std": _stack(by_seed, "nmse_curve_std").mean(0).tolist(),
            "convergence": {str(k): v.test_convergence for k, v in by_seed.items()},
        }
        first = next(iter(by_seed.values()))
        if first.surprise_curve:
            s["surprise_curve_mean"] = _stack(by_seed, "surprise_curve").mean(0).tolist()
            s["surprise_curve_std"] = _stack(by_seed, "surprise_curve_std").mean(0).tolist()
            s["surprise_intrinsic"] = {str(k): float(np.mean(np.asarray(v.surprise_per_traj)[:, INTRINSIC]))
                                       for k, v in by_seed.items()}
        if first.classification:
            s["classification"] = {fs: [float(np.mean([r.classification[fs][0] for r in by_seed.values()])),
                                        float(np.mean([r.classification[fs][1] for r in by_seed.values()]))]
                                   for fs in first.classification}
        if first.perturbation:
            s["perturbation"] = {cell: np.mean([r.perturbation[cell] for r in by_seed.values()], 0).tolist()
                                 for cell in first.perturbation}
            key = f"{float(ec.degradation_cell[0])},{float(ec.degradation_cell[1])}"
            if key in first.perturbation and "0.0,0.0" in first.perturbation:
                s["degradation"] = {str(k): relative_degradation_from_report(v, ec.degradation_cell)
                                    for k, v in by_seed.items()}
        summary[label] = s

    tests = []
    if len(labels) >= 2:
        for family, attr, cols in (("aligned_intrinsic", "test_per_traj", INTRINSIC),
                                   ("aligned_extrinsic", "test_per_traj", EXTRINSIC)):
            table = {lb: _paired_metric(reports[lb], attr, cols) for lb in labels}
            tests += paired_tests(table, family=family)
        with_surprise = [lb for lb in labels if next(iter(reports[lb].values())).surprise_ids]
        if len(with_surprise) >= 2:
            table = {lb: _paired_metric(reports[lb], "surprise_per_traj", INTRINSIC) for lb in with_surprise}
            tests += paired_tests(table, family="surprise_intrinsic")
    convergence = []
    if "w_cm" in reports and "wo_cm" in reports:
        convergence = convergence_test(reports["w_cm"], reports["wo_cm"])
    return {"labels": labels, "seeds": seeds, "summary": summary, "tests": tests,
            "convergence_w_cm_vs_wo_cm": convergence,
            "runs": {lb: {str(s): r.to_dict() for s, r in by_seed.items()} for lb, by_seed in reports.items()}}


def write_comparison(comparison: dict, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.json").write_text(json.dumps(comparison, indent=1))
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "metric", "property", "mean", "std"])
        names = plotting.PROPERTY_NAMES
        for label, s in comparison["summary"].items():
            for p, m, sd in zip(names, s["nmse_time_avg_mean"], s["nmse_time_avg_std"]):
                w.writerow([label, "nmse_time_avg", p, repr(m), repr(sd)])
            for fs, (m, sd) in s.get("classification", {}).items():
                w.writerow([label, "classification", fs, repr(m), repr(sd)])
    with open(out / "tests.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "a", "b", "mean_diff", "p_raw", "p_holm", "stars"])
        for t in comparison["tests"]:
            w.writerow([t["family"], t["a"], t["b"], repr(t["mean_diff"]), repr(t["p_raw"]),
                        repr(t["p_holm"]), t["stars"]])


def render_figures(comparison: dict, fig_dir, shade: float = 1.0) -> list:
    """Write the comparison figures as PNG files; returns their paths."""
    s = comparison["summary"]
    paths = []
    acc = {lb: v["classification"] for lb, v in s.items() if "classification" in v}
    if acc:
        paths.append(plotting.classification_bars(acc, Path(fig_dir) / "classification.png", chance=1 / 12))
    paths.append(plotting.nmse_bars({lb: v["nmse_time_avg_mean"] for lb, v in s.items()},
                                    {lb: v["nmse_time_avg_std"] for lb, v in s.items()},
                                    Path(fig_dir) / "nmse_time_avg.png"))
    curves = {lb: v["curve_mean"] for lb, v in s.items() if lb != "baseline"}
    stds = {lb: v["curve_std"] for lb, v in s.items() if lb != "baseline"}
    paths.append(plotting.nmse_curves(curves, stds, Path(fig_dir) / "nmse_curves_intrinsic.png",
                                      plotting.INTRINSIC_NAMES, shade=shade))
    paths.append(plotting.nmse_curves(curves, stds, Path(fig_dir) / "nmse_curves_extrinsic.png",
                                      plotting.EXTRINSIC_NAMES, shade=shade))
    sur = {lb: v for lb, v in s.items() if "surprise_curve_mean" in v and lb in ("w_cm", "wo_cm")}
    if sur:
        aligned = {lb: float(np.mean(np.asarray(v["nmse_time_avg_mean"])[INTRINSIC])) for lb, v in sur.items()}
        surprise = {lb: float(np.mean(list(v["surprise_intrinsic"].values()))) for lb, v in sur.items()}
        st = {t["a"]: t["stars"] for t in comparison["tests"]
              if t["family"] == "surprise_intrinsic" and {t["a"], t["b"]} == {"w_cm", "wo_cm"}}
        paths.append(plotting.surprise_bars(aligned, surprise, Path(fig_dir) / "surprise_bars.png", st))
        paths.append(plotting.nmse_curves({lb: v["surprise_curve_mean"] for lb, v in sur.items()},
                                          {lb: v["surprise_curve_std"] for lb, v in sur.items()},
                                          Path(fig_dir) / "surprise_curves.png", shade=shade))
    act = {lb: list(s[lb]["surprise_intrinsic"].values()) for lb in ("w_cm", "w_cm_early")
           if lb in s and "surprise_intrinsic" in s[lb]}
    if len(act) == 2:
        paths.append(plotting.activation_bars(act, Path(fig_dir) / "activation_delay.png"))
    grid = {lb: v["perturbation"] for lb, v in s.items() if "perturbation" in v and lb != "baseline"}
    if grid:
        paths.append(plotting.perturbation_grid(grid, Path(fig_dir) / "perturbation_grid.png"))
    return paths
