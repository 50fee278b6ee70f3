"""End-to-end experiment pipeline: data, calibration, equilibria, training, report.

Everything is driven by a flat key/value config (YAML on disk); run
directories contain a config snapshot, the dataset container, the calibrated
population, one equilibrium manifest per pricing scheme, one metrics CSV per
(scheme, seed), and a summary recomputable from those files alone.
"""

from __future__ import annotations

import glob
import json
import os
import re

import numpy as np
import yaml

from . import data as datamod
from .bound import convergence_gap_bound
from .calibrate import estimate_alpha, estimate_grad_bounds, local_optimum_losses
from .core import FederatedDataset, GameConstants, ParticipationVector, PricingVector, make_population
from .fltrain import TrainConfig, train
from .formats import (
    baseline_as_result,
    read_equilibrium_manifest,
    read_metrics_csv,
    read_population,
    write_equilibrium_manifest,
    write_metrics_csv,
    write_population,
)
from .game import (
    SolverOptions,
    baseline_uniform,
    baseline_weighted,
    server_solve,
)

SCHEMES = ("optimal", "uniform", "weighted")

DEFAULT_CONFIG = {
    "setup": "custom",
    # data
    "n_clients": 10,
    "dim": 60,
    "classes": 10,
    "total_samples": 2000,
    "power_exponent": 1.5,
    "synth_alpha": 1.0,
    "synth_beta": 1.0,
    "data_seed": 1,
    "idx_images": None,
    "idx_labels": None,
    "idx_test_images": None,
    "idx_test_labels": None,
    "subsample": None,
    "classes_min": 1,
    "classes_max": 6,
    "label_filter": None,
    # economics
    "budget": 200.0,
    "mean_cost": 50.0,
    "mean_value": 4000.0,
    "economics_seed": 2,
    "q_max": 1.0,
    "q_floor": 0.01,
    # training
    "rounds": 200,
    "local_steps": 10,
    "batch": 24,
    "l2": 1e-4,
    "lr_schedule": "exponential",
    "eta0": 0.1,
    "decay": 0.996,
    "eval_stride": 1,
    "sim_t_base": 1.0,
    "sim_t_comp": 0.001,
    # calibration
    "pilot_rounds": 5,
    "alpha_pilot_seeds": 3,
    "alpha_pilot_q": 0.3,
    "alpha_floor": 1e-6,
    "beta": 0.0,
    # experiment
    "repeats": 5,
    "seed": 100,
    "target_loss": None,
}

PRESETS = {
    # setup1-3 are full-scale benchmark configurations; "desk" is the tuned
    # small configuration used by the acceptance suite.
    "setup1": {
        "setup": "1", "n_clients": 40, "dim": 60, "classes": 10,
        "total_samples": 22377, "budget": 200.0, "mean_cost": 50.0,
        "mean_value": 4000.0, "rounds": 1000, "local_steps": 100, "repeats": 20,
    },
    "setup2": {
        "setup": "2", "n_clients": 40, "subsample": 14463,
        "classes_min": 1, "classes_max": 6, "budget": 40.0,
        "mean_cost": 20.0, "mean_value": 30000.0, "rounds": 1000,
        "local_steps": 100, "repeats": 20,
    },
    "setup3": {
        "setup": "3", "n_clients": 40, "subsample": 35155,
        "classes_min": 1, "classes_max": 10, "budget": 500.0,
        "mean_cost": 80.0, "mean_value": 10000.0, "rounds": 1000,
        "local_steps": 100, "repeats": 20,
    },
    "desk": {
        "setup": "custom", "n_clients": 10, "total_samples": 2000,
        "budget": 20.0, "mean_cost": 50.0, "mean_value": 50.0,
        "economics_seed": 3, "data_seed": 1,
        "rounds": 200, "local_steps": 10, "repeats": 20, "eval_stride": 5,
    },
}


def build_config(preset: str | None = None, config_path: str | None = None,
                 overrides: dict | None = None) -> dict:
    """Defaults < preset < config file < explicit overrides."""
    cfg = dict(DEFAULT_CONFIG)
    if preset:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg.update(PRESETS[preset])
    if config_path:
        with open(config_path) as f:
            loaded = yaml.safe_load(f) or {}
        unknown = set(loaded) - set(DEFAULT_CONFIG)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg


def save_config(cfg: dict, path: str) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg, f, sort_keys=True)


def train_config(cfg: dict, seed: int, q: ParticipationVector | None = None) -> TrainConfig:
    return TrainConfig(
        local_steps=cfg["local_steps"],
        batch=cfg["batch"],
        rounds=cfg["rounds"],
        seed=seed,
        l2=cfg["l2"],
        lr_schedule=cfg["lr_schedule"],
        eta0=cfg["eta0"],
        decay=cfg["decay"],
        participation=q,
        eval_stride=cfg["eval_stride"],
        sim_t_base=cfg["sim_t_base"],
        sim_t_comp=cfg["sim_t_comp"],
    )


def generate_dataset(cfg: dict) -> FederatedDataset:
    if cfg["idx_images"]:
        samples, labels = datamod.load_idx(cfg["idx_images"], cfg["idx_labels"])
        if cfg["label_filter"]:
            samples, labels = datamod.filter_labels(samples, labels, cfg["label_filter"])
        if cfg["subsample"]:
            samples, labels = datamod.subsample(samples, labels, cfg["subsample"], cfg["data_seed"])
        test_x = test_y = None
        if cfg["idx_test_images"]:
            test_x, test_y = datamod.load_idx(cfg["idx_test_images"], cfg["idx_test_labels"])
            if cfg["label_filter"]:
                test_x, test_y = datamod.filter_labels(test_x, test_y, cfg["label_filter"])
        return datamod.partition_label_limited(
            samples, labels, cfg["n_clients"],
            cfg["classes_min"], cfg["classes_max"],
            power_exponent=cfg["power_exponent"], seed=cfg["data_seed"],
            test_features=test_x, test_labels=test_y,
        )
    return datamod.gen_synthetic(
        n_clients=cfg["n_clients"], dim=cfg["dim"], n_classes=cfg["classes"],
        alpha=cfg["synth_alpha"], beta=cfg["synth_beta"],
        total_samples=cfg["total_samples"], power_exponent=cfg["power_exponent"],
        seed=cfg["data_seed"],
    )


def calibrate_population(dataset: FederatedDataset, cfg: dict, with_offsets: bool = True):
    """Estimate gradient bounds and alpha, sample economics, and build the
    population plus game constants.

    Returns (profiles, constants, f_locals, f_star).
    """
    pilot_cfg = train_config(cfg, seed=cfg["data_seed"])
    grad_bounds = estimate_grad_bounds(dataset, pilot_cfg, cfg["pilot_rounds"], seed=cfg["data_seed"])

    rng = np.random.default_rng(cfg["economics_seed"])
    n = dataset.n_clients
    costs = rng.exponential(cfg["mean_cost"], size=n)
    values = (
        rng.exponential(cfg["mean_value"], size=n)
        if cfg["mean_value"] > 0 else np.zeros(n)
    )
    profiles = make_population(
        datasizes=dataset.datasizes,
        grad_bounds=grad_bounds,
        cost_coeffs=costs,
        intrinsic_prefs=values,
        q_maxes=[cfg["q_max"]] * n,
    )

    # Alpha from matched-seed pilot pairs at two participation settings.
    q_full = ParticipationVector([1.0] * n)
    q_low = ParticipationVector([cfg["alpha_pilot_q"]] * n)
    q_vectors, losses = [], []
    for s in range(cfg["alpha_pilot_seeds"]):
        for q in (q_full, q_low):
            run_cfg = train_config(cfg, seed=cfg["data_seed"] + 1000 + s, q=q)
            metrics = train(dataset, run_cfg, profiles)
            q_vectors.append(q)
            losses.append(metrics[-1].loss)
    alpha = max(estimate_alpha(q_vectors, losses, profiles, cfg["rounds"]), cfg["alpha_floor"])

    constants = GameConstants(
        alpha=alpha, beta=cfg["beta"], rounds=cfg["rounds"],
        local_steps=cfg["local_steps"], q_floor=cfg["q_floor"],
    )
    if with_offsets:
        f_locals, f_star = local_optimum_losses(dataset, pilot_cfg)
    else:
        f_locals, f_star = None, float("nan")
    return profiles, constants, f_locals, f_star


def solve_scheme(scheme: str, profiles: list, constants: GameConstants, budget: float,
                 opts: SolverOptions | None = None):
    """Solve one pricing scheme and wrap it in the manifest record."""
    opts = opts or SolverOptions()
    if scheme == "optimal":
        return server_solve(profiles, constants, budget, opts)
    if scheme == "uniform":
        price, q = baseline_uniform(profiles, constants, budget, opts)
        prices = PricingVector([price] * len(profiles))
    elif scheme == "weighted":
        prices, q = baseline_weighted(profiles, constants, budget, opts)
    else:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    bound_value = (
        convergence_gap_bound(q, profiles, constants) if min(q.q) > 0 else float("inf")
    )
    return baseline_as_result(prices, q, bound_value)


def run_experiment(cfg: dict, out_dir: str) -> dict:
    """Full pipeline: data, calibration, per-scheme equilibria and training runs.

    Writes every artifact into ``out_dir`` and returns the summary.
    """
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.yaml"))

    dataset = generate_dataset(cfg)
    datamod.save_dataset(os.path.join(out_dir, "dataset.bin"), dataset)

    profiles, constants, f_locals, f_star = calibrate_population(dataset, cfg)
    write_population(
        os.path.join(out_dir, "population.ini"), profiles, f_locals,
        meta={"alpha": constants.alpha, "beta": constants.beta, "f_star": f_star,
              "rounds": constants.rounds, "local_steps": constants.local_steps,
              "q_floor": constants.q_floor},
    )

    results = {}
    for scheme in SCHEMES:
        result = solve_scheme(scheme, profiles, constants, cfg["budget"])
        results[scheme] = result
        write_equilibrium_manifest(
            os.path.join(out_dir, f"equilibrium_{scheme}.json"), result, scheme, cfg["budget"]
        )

    for scheme in SCHEMES:
        q = results[scheme].q_star
        for k in range(cfg["repeats"]):
            seed = cfg["seed"] + k
            run_cfg = train_config(cfg, seed=seed, q=q)
            metrics = train(dataset, run_cfg, profiles)
            write_metrics_csv(
                os.path.join(out_dir, f"metrics_{scheme}_seed{seed}.csv"),
                run_id=f"{scheme}-{seed}", seed=seed, metrics=metrics,
            )

    return build_report(out_dir, write=True)


_METRICS_NAME = re.compile(r"metrics_(\w+)_seed(\d+)\.csv$")


def _load_runs(run_dir: str) -> dict:
    runs: dict = {}
    for path in sorted(glob.glob(os.path.join(run_dir, "metrics_*_seed*.csv"))):
        m = _METRICS_NAME.search(os.path.basename(path))
        scheme, seed = m.group(1), int(m.group(2))
        runs.setdefault(scheme, {})[seed] = read_metrics_csv(path)
    if not runs:
        raise FileNotFoundError(f"no metrics CSVs found under {run_dir}")
    return runs


def rounds_to_target(rows: list, target_loss: float):
    """(round, sim_time) of the first evaluated round at or below the target,
    or (None, None) if never reached."""
    for row in rows:
        if row["loss"] <= target_loss:
            return row["round"], row["sim_time"]
    return None, None


def build_report(run_dir: str, write: bool = False) -> dict:
    """Pure function of the saved CSVs and manifests in a run directory.

    Tables: time/rounds to target loss per scheme, total client utility per
    scheme (empirical final losses in the intrinsic term), and negative-
    payment counts. Recomputing over the same files is byte-identical.
    """
    runs = _load_runs(run_dir)
    with open(os.path.join(run_dir, "config.yaml")) as f:
        cfg = yaml.safe_load(f)

    manifests = {}
    for scheme in runs:
        path = os.path.join(run_dir, f"equilibrium_{scheme}.json")
        if os.path.exists(path):
            manifests[scheme] = read_equilibrium_manifest(path)

    profiles = f_locals = None
    pop_path = os.path.join(run_dir, "population.ini")
    if os.path.exists(pop_path):
        profiles, f_locals, _meta = read_population(pop_path)

    final = {
        scheme: {seed: rows[-1] for seed, rows in sorted(by_seed.items())}
        for scheme, by_seed in runs.items()
    }
    mean_final_loss = {
        scheme: float(np.mean([r["loss"] for r in by_seed.values()]))
        for scheme, by_seed in final.items()
    }
    mean_final_acc = {
        scheme: float(np.mean([r["accuracy"] for r in by_seed.values()]))
        for scheme, by_seed in final.items()
    }

    target = cfg.get("target_loss")
    if target is None:
        target = max(mean_final_loss.values())

    to_target = {}
    for scheme, by_seed in runs.items():
        per_seed = {}
        for seed, rows in sorted(by_seed.items()):
            r, t = rounds_to_target(rows, target)
            per_seed[seed] = {"round": r, "sim_time": t}
        reached = [v for v in per_seed.values() if v["round"] is not None]
        to_target[scheme] = {
            "per_seed": per_seed,
            "mean_rounds": float(np.mean([v["round"] for v in reached])) if reached else None,
            "mean_sim_time": float(np.mean([v["sim_time"] for v in reached])) if reached else None,
            "reached": len(reached),
        }

    utilities = {}
    negative_payments = {}
    for scheme, (result, _, _budget) in manifests.items():
        negative_payments[scheme] = sum(1 for p in result.p_star.p if p < 0.0)
        if profiles is not None and f_locals is not None and scheme in mean_final_loss:
            total = 0.0
            for n, prof in enumerate(profiles):
                qn = result.q_star.q[n]
                total += (
                    result.p_star.p[n] * qn
                    - prof.cost_coeff * qn**2
                    + prof.intrinsic_pref * (f_locals[n] - mean_final_loss[scheme])
                )
            utilities[scheme] = total

    summary = {
        "target_loss": target,
        "mean_final_loss": mean_final_loss,
        "mean_final_accuracy": mean_final_acc,
        "rounds_to_target": to_target,
        "total_client_utility": utilities,
        "negative_payment_clients": negative_payments,
        "sim_time_constants": {"t_base": cfg.get("sim_t_base"), "t_comp": cfg.get("sim_t_comp")},
    }
    if write:
        with open(os.path.join(run_dir, "summary.json"), "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
    return summary


def format_report(summary: dict) -> str:
    lines = [f"target loss: {summary['target_loss']:.6g}", ""]
    lines.append(f"{'scheme':<10} {'final loss':>12} {'final acc':>10} "
                 f"{'rounds->target':>15} {'sim time->target':>17} {'neg pay':>8} {'sum U_n':>12}")
    for scheme in sorted(summary["mean_final_loss"]):
        tt = summary["rounds_to_target"][scheme]
        rounds = f"{tt['mean_rounds']:.1f}" if tt["mean_rounds"] is not None else "n/a"
        time_s = f"{tt['mean_sim_time']:.1f}" if tt["mean_sim_time"] is not None else "n/a"
        util = summary["total_client_utility"].get(scheme)
        util_s = f"{util:.4g}" if util is not None else "n/a"
        neg = summary["negative_payment_clients"].get(scheme, "n/a")
        lines.append(
            f"{scheme:<10} {summary['mean_final_loss'][scheme]:>12.6g} "
            f"{summary['mean_final_accuracy'][scheme]:>10.4f} {rounds:>15} "
            f"{time_s:>17} {neg!s:>8} {util_s:>12}"
        )
    return "\n".join(lines)
