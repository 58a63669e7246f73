"""Reproducible experiment driver.

Each subcommand reads one JSON config (flags override file values), runs a
full pipeline with fixed seeds, and writes its reports plus a manifest
(config echo, seeds, versions, artifact checksums) into the output
directory. The manifest timestamp is the only nondeterministic byte in a
run: identical configs and seeds reproduce every report exactly.

Subcommands:
    train        fit the short/long victims, report accuracies, dump models
                 and (for 2-D data) decision grids
    evade        craft gpfgs/gpjm/cw attacks on the short victim and compare
                 both victims on the shared attack sets
    extract      analytic lengthscale + training-data recovery, lengthscale
                 sweep in all three data regimes, kernel identification
    membership   membership-inference pipeline with overfitting and drift
                 diagnostics for both victims
    secure-demo  rho-ball classifier equivalence check and the
                 generalization probe
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .data import Dataset, generate_blobs, generate_two_moons, load_csv, split
from .evasion import (
    AttackConfig,
    curvature_comparison,
    cw_l2,
    gpfgs,
    gpjm,
    write_attack_sets_csv,
)
from .extraction import (
    ModelOracle,
    estimate_lengthscale_sweep,
    extract_lengthscale_analytic,
    identify_kernel,
    match_points,
    recover_training_data_analytic,
    write_kernel_distances_csv,
    write_sweep_csv,
)
from .gp import (
    RejectionPolicy,
    accuracy,
    decision_grid,
    fit_classification_laplace,
    fit_regression,
    save_gp,
)
from .kernels import LINEAR, POLY, RBF, KernelSpec
from .membership import (
    build_attack_dataset,
    distribution_drift,
    evaluate_membership,
    overfitting_gap,
    split_attack_dataset,
    train_attack_classifier,
)
from .secure import build_secure_classifier, equivalence_check, generalization_probe

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "run", "main"]

SUBCOMMANDS = ("train", "evade", "extract", "membership", "secure-demo")

# Default lengthscale pair for CSV data, mirroring a digits-style task.
CSV_DEFAULT_SHORT = 1.0
CSV_DEFAULT_LONG = 8.0


class ConfigError(ValueError):
    """Invalid experiment configuration; carries the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field_name = field_name


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"generator": "two_moons", "n": 120, "noise": 0.1})
    kernel: dict = field(default_factory=lambda: {"family": RBF, "variance": 1.0})
    lengthscale_short: float | None = None
    lengthscale_long: float | None = None
    rejection: dict = field(default_factory=lambda: {"tau0": 0.3, "tau1": 0.3})
    zero_rejection_eps: float = 1e-3
    train_fraction: float = 0.5
    seed: int = 0
    out: str = "reports"
    train: dict = field(default_factory=lambda: {"grid_resolution": 25})
    attack: dict = field(
        default_factory=lambda: {
            "points": 40,
            "epsilon": 0.3,
            "jsma_budget": 2,
            "jsma_step": 0.3,
            "cw_max_iter": 100,
            "cw_step_size": 0.02,
            "cw_confidence": 5.0,
        }
    )
    extract: dict = field(
        default_factory=lambda: {
            "interval": [0.05, 10.0],
            "jitter": 1e-8,
            "recover_n": 2,
            "recover_budget_factor": 3,
            "holdout": 100,
        }
    )
    membership: dict = field(
        default_factory=lambda: {
            "feature_set": ["latent_mean"],
            "attacker_fraction": 0.8,
            "trees": 100,
            "max_depth": 8,
        }
    )
    secure: dict = field(
        default_factory=lambda: {
            "rho": 0.4,
            "n_anchors": 4,
            "spacing_lengthscales": 20.0,
            "probes": 2000,
            "grid_resolution": 60,
        }
    )

    def validate(self):
        src = self.dataset
        if "csv" in src:
            if not Path(src["csv"]).is_file():
                raise ConfigError("dataset.csv", f"file not found: {src['csv']}")
            if "label_column" not in src:
                raise ConfigError("dataset.label_column", "required for CSV datasets")
            if self.lengthscale_short is None:
                self.lengthscale_short = CSV_DEFAULT_SHORT
            if self.lengthscale_long is None:
                self.lengthscale_long = CSV_DEFAULT_LONG
        elif src.get("generator") not in ("two_moons", "blobs"):
            raise ConfigError("dataset.generator", f"unknown generator {src.get('generator')!r}")
        if self.lengthscale_short is None:
            self.lengthscale_short = 0.2
        if self.lengthscale_long is None:
            self.lengthscale_long = 2.0
        if not 0 < self.lengthscale_short < self.lengthscale_long:
            raise ConfigError(
                "lengthscale_short",
                f"need 0 < short < long, got ({self.lengthscale_short}, {self.lengthscale_long})",
            )
        if self.kernel.get("family", RBF) not in (RBF, LINEAR, POLY):
            raise ConfigError("kernel.family", f"unknown family {self.kernel.get('family')!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction", "must lie in (0, 1)")
        if self.zero_rejection_eps < 0:
            raise ConfigError("zero_rejection_eps", "must be nonnegative")
        try:
            RejectionPolicy(self.rejection.get("tau0", 0.3), self.rejection.get("tau1", 0.3))
        except ValueError as exc:
            raise ConfigError("rejection", str(exc)) from None

    def to_json_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "kernel": self.kernel,
            "lengthscale_short": self.lengthscale_short,
            "lengthscale_long": self.lengthscale_long,
            "rejection": self.rejection,
            "zero_rejection_eps": self.zero_rejection_eps,
            "train_fraction": self.train_fraction,
            "seed": self.seed,
            "out": self.out,
            "train": self.train,
            "attack": self.attack,
            "extract": self.extract,
            "membership": self.membership,
            "secure": self.secure,
        }


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as handle:
                payload = json.load(handle)
        except FileNotFoundError:
            raise ConfigError("config", f"file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        for key, value in payload.items():
            if not hasattr(cfg, key):
                raise ConfigError(key, "unknown config key")
            if isinstance(getattr(cfg, key), dict) and isinstance(value, dict):
                getattr(cfg, key).update(value)
            else:
                setattr(cfg, key, value)
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


def _spec(cfg: ExperimentConfig, lengthscale: float) -> KernelSpec:
    kernel = dict(cfg.kernel)
    kernel.setdefault("family", RBF)
    kernel["lengthscale"] = lengthscale
    return KernelSpec.from_json_dict(kernel)


def _build_dataset(cfg: ExperimentConfig) -> Dataset:
    src = cfg.dataset
    if "csv" in src:
        return load_csv(src["csv"], src["label_column"])
    if src["generator"] == "two_moons":
        return generate_two_moons(src.get("n", 120), src.get("noise", 0.1), cfg.seed)
    return generate_blobs(src.get("n", 120), src.get("d", 2), src.get("separation", 3.0), cfg.seed)


def _fit_pair(cfg: ExperimentConfig, train: Dataset):
    short = fit_classification_laplace(_spec(cfg, cfg.lengthscale_short), train)
    long = fit_classification_laplace(_spec(cfg, cfg.lengthscale_long), train)
    return short, long


def _write_json(path: Path, payload: dict):
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, sort_keys=True, indent=1)
        handle.write("\n")


def _cmd_train(cfg: ExperimentConfig, out: Path) -> list[Path]:
    data = _build_dataset(cfg)
    train, test = split(data, cfg.train_fraction, cfg.seed)
    policy = RejectionPolicy(cfg.rejection["tau0"], cfg.rejection["tau1"])
    short, long = _fit_pair(cfg, train)
    written = []
    report = {}
    for name, gp in (("short", short), ("long", long)):
        report[name] = {
            "lengthscale": gp.spec.lengthscale,
            "train": accuracy(gp, train),
            "test": accuracy(gp, test),
            "test_with_rejection": accuracy(gp, test, policy),
            "test_with_zero_rejection": accuracy(gp, test, cfg.zero_rejection_eps),
        }
        model_path = out / f"model_{name}.json"
        save_gp(gp, model_path)
        written.append(model_path)
        if data.d == 2:
            lo = data.features.min(axis=0) - 0.5
            hi = data.features.max(axis=0) + 0.5
            grid = decision_grid(
                gp,
                ((lo[0], hi[0]), (lo[1], hi[1])),
                cfg.train.get("grid_resolution", 25),
                policy,
            )
            grid_path = out / f"grid_{name}.csv"
            grid.write_csv(grid_path)
            written.append(grid_path)
    path = out / "accuracy.json"
    _write_json(path, report)
    written.append(path)
    return written


def _cmd_evade(cfg: ExperimentConfig, out: Path) -> list[Path]:
    data = _build_dataset(cfg)
    train, test = split(data, cfg.train_fraction, cfg.seed)
    short, long = _fit_pair(cfg, train)
    atk = cfg.attack
    count = min(int(atk.get("points", 40)), test.n)
    points = test.features[:count]
    labels = test.labels[:count]

    cw_config = AttackConfig(
        epsilon=atk.get("epsilon", 0.3),
        max_iter=int(atk.get("cw_max_iter", 100)),
        step_size=atk.get("cw_step_size", 0.02),
        confidence=atk.get("cw_confidence", 5.0),
    )
    sets = {
        "gpfgs": [gpfgs(short, x, atk.get("epsilon", 0.3)) for x in points],
        "gpjm": [gpjm(short, x, int(atk.get("jsma_budget", 2)), atk.get("jsma_step", 0.3)) for x in points],
        "cw_l2": [cw_l2(short, x, cw_config, seed=cfg.seed) for x in points],
    }
    strengths = {
        "gpfgs": atk.get("epsilon", 0.3),
        "gpjm": atk.get("jsma_step", 0.3),
        "cw_l2": atk.get("cw_confidence", 5.0),
    }
    true_labels = {name: labels for name in sets}
    comparison = curvature_comparison(short, long, sets, true_labels, cfg.zero_rejection_eps)
    flip_rates = {name: float(np.mean([r.success for r in results])) for name, results in sets.items()}

    csv_path = out / "attack_sets.csv"
    write_attack_sets_csv(csv_path, sets, strengths)
    json_path = out / "curvature.json"
    _write_json(json_path, {"comparison": comparison, "flip_rates_on_short": flip_rates})
    return [csv_path, json_path]


def _cmd_extract(cfg: ExperimentConfig, out: Path) -> list[Path]:
    data = _build_dataset(cfg)
    train, rest = split(data, cfg.train_fraction, cfg.seed)
    ext = cfg.extract
    holdout_n = min(int(ext.get("holdout", 100)), rest.n // 2)
    holdout = rest.subset(np.arange(holdout_n))
    fresh = rest.subset(np.arange(holdout_n, rest.n))
    written = []

    # analytic attacks run against a noiseless regression victim
    jitter = float(ext.get("jitter", 1e-8))
    reg_spec = _spec(cfg, cfg.lengthscale_short)
    reg_victim = fit_regression(reg_spec, train, jitter)
    reg_oracle = ModelOracle.from_gp(reg_victim)
    lengthscale_report = extract_lengthscale_analytic(
        reg_oracle, train, jitter, tuple(ext.get("interval", [0.05, 10.0])), variance=reg_spec.variance, seed=cfg.seed
    )

    recover_n = min(int(ext.get("recover_n", 2)), train.n)
    tiny = train.subset(np.arange(recover_n))
    tiny_victim = fit_regression(reg_spec, tiny, jitter)
    tiny_oracle = ModelOracle.from_gp(tiny_victim)
    budget = int(ext.get("recover_budget_factor", 3)) * recover_n * tiny.d
    # probes must sense the anchors: pad the data region by two lengthscales
    pad = 2.0 * float(np.max(reg_spec.lengthscales(tiny.d)))
    recovery = recover_training_data_analytic(
        tiny_oracle,
        reg_spec,
        recover_n,
        tiny.d,
        tiny.labels,
        budget,
        jitter=jitter,
        probe_box=(tiny.features.min(axis=0) - pad, tiny.features.max(axis=0) + pad),
        seed=cfg.seed,
        restarts=8,
    )
    matched, distances = match_points(recovery.estimate, tiny.features, tiny.labels)
    analytic_path = out / "extraction.json"
    _write_json(
        analytic_path,
        {
            "lengthscale": {
                "true": cfg.lengthscale_short,
                "estimate": lengthscale_report.estimate,
                "residual": lengthscale_report.residual,
                "queries_used": lengthscale_report.queries_used,
                "converged": lengthscale_report.converged,
            },
            "training_data_recovery": {
                "true_points": tiny.features.tolist(),
                "recovered_points": matched.tolist(),
                "point_distances": distances.tolist(),
                "residual": recovery.residual,
                "queries_used": recovery.queries_used,
                "converged": recovery.converged,
            },
        },
    )
    written.append(analytic_path)

    # empirical sweep against the classification victim, three data regimes
    victim = fit_classification_laplace(reg_spec, train)
    oracle = ModelOracle.from_gp(victim)
    half = train.n // 2
    rng = np.random.default_rng(cfg.seed)
    fresh_idx = rng.permutation(fresh.n)
    mixed = Dataset(
        np.vstack([train.features[:half], fresh.features[fresh_idx[: train.n - half]]]),
        np.concatenate([train.labels[:half], fresh.labels[fresh_idx[: train.n - half]]]),
    )
    disjoint = fresh.subset(fresh_idx[: min(train.n, fresh.n)])
    for regime, attacker_data in (("same", train), ("mixed", mixed), ("disjoint", disjoint)):
        sweep = estimate_lengthscale_sweep(
            oracle, attacker_data, regime, cfg.lengthscale_short, holdout, variance=reg_spec.variance
        )
        path = out / f"sweep_{regime}.csv"
        write_sweep_csv(path, sweep)
        written.append(path)

    candidates = [
        _spec(cfg, cfg.lengthscale_short),
        KernelSpec(LINEAR, variance=reg_spec.variance),
        KernelSpec(POLY, variance=reg_spec.variance),
    ]
    ranking = identify_kernel(oracle, candidates, train, holdout)
    kernel_path = out / "kernel_id.csv"
    write_kernel_distances_csv(kernel_path, ranking)
    written.append(kernel_path)
    return written


def _cmd_membership(cfg: ExperimentConfig, out: Path) -> list[Path]:
    data = _build_dataset(cfg)
    train, rest = split(data, cfg.train_fraction, cfg.seed)
    mem = cfg.membership
    feature_set = mem.get("feature_set", ["latent_mean"])
    written = []
    for name, lengthscale in (("short", cfg.lengthscale_short), ("long", cfg.lengthscale_long)):
        gp = fit_classification_laplace(_spec(cfg, lengthscale), train)
        attack_ds = build_attack_dataset(gp, train, rest, feature_set, seed=cfg.seed)
        attack_train, attack_test = split_attack_dataset(
            attack_ds, mem.get("attacker_fraction", 0.8), cfg.seed
        )
        clf = train_attack_classifier(
            attack_train, int(mem.get("trees", 100)), int(mem.get("max_depth", 8)), cfg.seed
        )
        result = evaluate_membership(clf, attack_test)
        gap = overfitting_gap(gp, train, rest)
        drift = distribution_drift(gp, train, rest)
        path = out / f"membership_{name}.json"
        _write_json(
            path,
            {
                "feature_set": sorted(feature_set),
                "accuracy": result["accuracy"],
                "baseline": result["baseline"],
                "overfit_gap": gap["gap"],
                "drift_ratio": drift["ratio"],
                "lengthscale": lengthscale,
                "seed": cfg.seed,
            },
        )
        written.append(path)
    return written


def _cmd_secure_demo(cfg: ExperimentConfig, out: Path) -> list[Path]:
    sec = cfg.secure
    spec = _spec(cfg, cfg.lengthscale_long)
    ls = float(np.max(spec.lengthscales(2)))
    n_anchors = int(sec.get("n_anchors", 4))
    spacing = float(sec.get("spacing_lengthscales", 20.0)) * ls
    anchors = np.column_stack([np.arange(n_anchors) * spacing, np.zeros(n_anchors)])
    labels = np.where(np.arange(n_anchors) % 2 == 0, 1.0, -1.0)
    rho = float(sec.get("rho", 0.4))
    sc = build_secure_classifier(anchors, labels, rho, spec)
    gp = fit_regression(spec, Dataset(anchors, labels), jitter=1e-10)
    policy = RejectionPolicy(1.0 - rho, 1.0 - rho)

    rng = np.random.default_rng(cfg.seed)
    margin = 2.0 * ls
    lo = anchors.min(axis=0) - margin
    hi = anchors.max(axis=0) + margin
    probes = rng.uniform(lo, hi, size=(int(sec.get("probes", 2000)), 2))
    agreement = equivalence_check(sc, gp, policy, probes)

    resolution = int(sec.get("grid_resolution", 60))
    grid_axes = [np.linspace(lo[j], hi[j], resolution) for j in range(2)]
    g0, g1 = np.meshgrid(*grid_axes, indexing="ij")
    grid = np.column_stack([g0.ravel(), g1.ravel()])
    probe_identity = generalization_probe(gp, spec, rho, grid, policy)

    # the learning case: same-class anchors one lengthscale apart; the
    # classified-outside shell is thin, so probe it on a fine grid
    close = np.array([[0.0, 0.0], [ls, 0.0]])
    close_labels = np.array([1.0, 1.0])
    close_gp = fit_regression(spec, Dataset(close, close_labels), jitter=1e-10)
    span = np.linspace(-3.0 * ls, 4.0 * ls, max(resolution, 80))
    c0, c1 = np.meshgrid(span, span, indexing="ij")
    close_grid = np.column_stack([c0.ravel(), c1.ravel()])
    probe_learning = generalization_probe(close_gp, spec, rho, close_grid, policy)

    path = out / "secure.json"
    _write_json(
        path,
        {
            "rho": rho,
            "tau": 1.0 - rho,
            "agreement_rate": agreement["agreement_rate"],
            "disagreements": agreement["disagreements"],
            "identity_regime_fraction": probe_identity["outside_classified_fraction"],
            "learning_regime_fraction": probe_learning["outside_classified_fraction"],
        },
    )
    return [path]


_HANDLERS = {
    "train": _cmd_train,
    "evade": _cmd_evade,
    "extract": _cmd_extract,
    "membership": _cmd_membership,
    "secure-demo": _cmd_secure_demo,
}


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def run(subcommand: str, cfg: ExperimentConfig) -> int:
    """Run one subcommand and write its reports plus a manifest. Returns 0
    iff all requested stages completed."""
    if subcommand not in _HANDLERS:
        raise ConfigError("subcommand", f"unknown subcommand {subcommand!r}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    written = _HANDLERS[subcommand](cfg, out)
    manifest = {
        "subcommand": subcommand,
        "config": cfg.to_json_dict(),
        "seed": cfg.seed,
        "versions": {
            "gpattack": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "artifacts": {path.name: _sha256(path) for path in written},
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    _write_json(out / "manifest.json", manifest)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpattack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="JSON config file")
        cmd.add_argument("--seed", type=int, help="master seed")
        cmd.add_argument("--out", help="output directory")
        cmd.add_argument("--lengthscale-short", type=float, dest="lengthscale_short")
        cmd.add_argument("--lengthscale-long", type=float, dest="lengthscale_long")
        cmd.add_argument("--kernel", choices=(RBF, LINEAR, POLY), help="kernel family")
        cmd.add_argument("--data", help="CSV path (use --label-column) or generator name")
        cmd.add_argument("--label-column", dest="label_column")
        if name == "evade":
            cmd.add_argument("--epsilon", type=float, help="gpfgs strength")
        if name == "membership":
            cmd.add_argument("--feature-set", dest="feature_set", help="comma-separated feature names")
            cmd.add_argument("--trees", type=int)
        if name == "secure-demo":
            cmd.add_argument("--rho", type=float)
    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    for key in ("seed", "out", "lengthscale_short", "lengthscale_long"):
        overrides[key] = getattr(args, key, None)
    return overrides


def _apply_extra_flags(cfg: ExperimentConfig, args: argparse.Namespace):
    if getattr(args, "kernel", None):
        cfg.kernel["family"] = args.kernel
    if getattr(args, "data", None):
        if args.data.endswith(".csv"):
            cfg.dataset = {"csv": args.data, "label_column": getattr(args, "label_column", None) or "y"}
        else:
            cfg.dataset = {"generator": args.data}
    if getattr(args, "epsilon", None) is not None:
        cfg.attack["epsilon"] = args.epsilon
    if getattr(args, "feature_set", None):
        cfg.membership["feature_set"] = args.feature_set.split(",")
    if getattr(args, "trees", None) is not None:
        cfg.membership["trees"] = args.trees
    if getattr(args, "rho", None) is not None:
        cfg.secure["rho"] = args.rho


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides_from_args(args))
        _apply_extra_flags(cfg, args)
        cfg.validate()
        return run(args.subcommand, cfg)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # propagate module failures with context
        print(f"error: {args.subcommand} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
