"""Experiment drivers behind the CLI: run, sweep, attack and budget."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from . import privacy as PR
from .attack import AttackConfig, attack_client
from .config import ExperimentConfig
from .exceptions import ConfigError
from .protocol import (
    AggregationRule, SimulationConfig, dsgt_round, init_clients, run_simulation,
)
from .topology import build_topology, load_topology, sinkhorn_knopp

log = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "seed", "rule", "beta", "round", "client", "loss", "accuracy",
    "consensus_accuracy", "consensus_distance", "tracking_residual",
    "noise_diff_sum_norm", "diverged",
]
SWEEP_COLUMNS = ["beta", "rule", "seed", "accuracy", "attack_mse", "diverged"]
BUDGET_COLUMNS = ["round", "client", "epsilon_lppa", "epsilon_dp", "ratio"]


def fmt(v) -> str:
    """17 significant digits for floats so CSV values round-trip exactly."""
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (list, tuple, np.ndarray)):
        return ";".join(fmt(x) for x in v)
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def write_json(path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not JSON serialisable: {type(v)}")


@dataclass
class Setup:
    """Per-seed inputs shared by every rule: shards, test set, weights."""

    spec: M.ModelSpec
    shards: list
    test: D.Dataset
    weights: object
    graph: object


def make_graph(cfg: ExperimentConfig):
    if cfg.topology.kind == "custom":
        return load_topology(cfg.topology.path)
    return build_topology(cfg.topology.kind, cfg.topology.n)


def load_dataset(cfg: ExperimentConfig, seed: int, normalize: bool | None = None) -> D.Dataset:
    dc = cfg.dataset
    if dc.source == "csv":
        ds = D.load_csv(dc.path, dc.label_column)
    else:
        ds = D.generate_synthetic(dc.n_classes, dc.dim, dc.n_samples, dc.separation, seed)
    if dc.normalize if normalize is None else normalize:
        ds = D.normalized(ds)
    return ds


def prepare(cfg: ExperimentConfig, seed: int, normalize: bool | None = None) -> Setup:
    graph = make_graph(cfg)
    weights = sinkhorn_knopp(graph)
    ds = load_dataset(cfg, seed, normalize)
    train, test = D.train_test_split(ds, cfg.dataset.test_fraction, seed)
    p = cfg.partition
    shards = D.partition(train, D.PartitionSpec(p.kind, p.alpha, p.k, seed), graph.n)
    spec = M.ModelSpec(cfg.model.kind, ds.dim, ds.n_classes, cfg.model.hidden)
    return Setup(spec, shards, test, weights, graph)


def rule_list(cfg: ExperimentConfig, beta=None) -> list:
    beta = cfg.beta if beta is None else beta
    return [AggregationRule.parse(r, beta) for r in cfg.rules]


def sim_config(cfg: ExperimentConfig, rule, spec, seed, batch_size=None, rounds=None):
    return SimulationConfig(
        rule=rule, model=spec, lam=cfg.lam,
        rounds=cfg.rounds if rounds is None else rounds,
        local_epochs=cfg.local_epochs,
        batch_size=cfg.batch_size if batch_size is None else batch_size,
        seed=seed, inject_each_round=cfg.inject_each_round,
    )


def run_rules(cfg: ExperimentConfig, seed: int, beta=None) -> dict:
    """One simulation per configured rule, all on the same shards and W."""
    setup = prepare(cfg, seed)
    out = {}
    for rule in rule_list(cfg, beta):
        sc = sim_config(cfg, rule, setup.spec, seed)
        out[rule.kind] = run_simulation(sc, setup.shards, setup.weights, setup.test, setup.graph)
    return out


def final_accuracy(result) -> float:
    last = result.history[-1] if result.history else result.initial_metrics
    return last.consensus_accuracy


def metrics_rows(seed, rule: AggregationRule, result):
    beta = rule.beta
    for m in [result.initial_metrics, *result.history]:
        for i in range(len(m.loss)):
            yield (seed, rule.kind, beta, m.round, i, m.loss[i], m.accuracy[i],
                   m.consensus_accuracy, m.consensus_distance, m.tracking_residual,
                   m.noise_diff_sum_norm, m.diverged)


def _stats(values):
    arr = np.asarray(values, dtype=np.float64)
    return {"values": arr.tolist(), "mean": float(np.mean(arr)), "std": float(np.std(arr))}


def cmd_run(cfg: ExperimentConfig, out_dir) -> dict:
    """Write metrics.csv, summary.json and config.resolved.json; return the summary."""
    out_dir = Path(out_dir)
    rows, finals, diverged = [], {r: [] for r in cfg.rules}, {r: [] for r in cfg.rules}
    for seed in cfg.seeds:
        results = run_rules(cfg, seed)
        for rule in rule_list(cfg):
            res = results[rule.kind]
            rows.extend(metrics_rows(seed, rule, res))
            finals[rule.kind].append(final_accuracy(res))
            diverged[rule.kind].append(bool(res.diverged))
    summary = {"config": cfg.to_dict(), "seeds": list(cfg.seeds), "rules": {}}
    base = np.mean(finals["dsgt"]) if "dsgt" in finals else None
    for r in cfg.rules:
        entry = _stats(finals[r])
        entry["diverged"] = diverged[r]
        entry["loss_pp"] = None if base is None else float(100.0 * (base - np.mean(finals[r])))
        summary["rules"][r] = entry
    write_csv(out_dir / "metrics.csv", METRICS_COLUMNS, rows)
    write_json(out_dir / "summary.json", summary)
    write_json(out_dir / "config.resolved.json", cfg.to_dict())
    summary["any_diverged"] = any(any(v) for v in diverged.values())
    return summary


def attack_cfg(cfg: ExperimentConfig, seed: int) -> AttackConfig:
    a = cfg.attack
    return AttackConfig(
        iterations=a.iterations, step_size=a.step_size, restarts=a.restarts,
        target_round=a.target_round, init_seed=seed,
    )


def attack_once(cfg: ExperimentConfig, rule: AggregationRule, seed: int):
    """Run the protocol to the target round and attack the victim's transmission."""
    a = cfg.attack
    setup = prepare(cfg, seed, normalize=a.normalize)
    if not 0 <= a.victim < setup.graph.n:
        raise ConfigError(f"victim {a.victim} outside 0..{setup.graph.n - 1}")
    sc = sim_config(cfg, rule, setup.spec, seed, batch_size=a.batch_size, rounds=a.target_round)
    state = init_clients(sc, setup.shards, setup.weights, setup.graph)
    for _ in range(a.target_round):
        state, _ = dsgt_round(state)
    if state.diverged:
        return None, state
    return attack_client(state, a.victim, attack_cfg(cfg, seed)), state


def cmd_attack(cfg: ExperimentConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    report = {"config": cfg.to_dict(), "seeds": list(cfg.seeds), "rules": {}}
    recon_rows = []
    for rule in rule_list(cfg):
        per_seed = []
        for seed in cfg.seeds:
            res, state = attack_once(cfg, rule, seed)
            if res is None:
                per_seed.append({"seed": seed, "mse": None, "diverged": True})
                continue
            per_seed.append({
                "seed": seed, "mse": res.mse, "grad_match_residual": res.grad_match_residual,
                "iterations_used": res.iterations_used, "restart": res.restart,
                "aborted_restarts": res.aborted_restarts, "diverged": False,
            })
            c = state.clients[cfg.attack.victim]
            x_true = c.shard.features[c.batch_indices]
            for s in range(x_true.shape[0]):
                recon_rows.append((seed, rule.kind, s, "true", *x_true[s]))
                recon_rows.append((seed, rule.kind, s, "hat", *res.x_hat[s]))
        mses = [p["mse"] for p in per_seed if p["mse"] is not None]
        report["rules"][rule.kind] = {
            "beta": rule.beta,
            "per_seed": per_seed,
            "median_mse": float(np.median(mses)) if mses else None,
        }
    report["target_round"] = cfg.attack.target_round
    report["victim"] = cfg.attack.victim
    dim = len(recon_rows[0]) - 4 if recon_rows else 0
    write_csv(out_dir / "reconstruction.csv",
              ["seed", "rule", "sample", "which"] + [f"x{k}" for k in range(dim)], recon_rows)
    write_json(out_dir / "attack.json", report)
    write_json(out_dir / "config.resolved.json", cfg.to_dict())
    return report


def cmd_sweep(cfg: ExperimentConfig, beta_list, out_dir, with_attack: bool = False) -> dict:
    if not beta_list:
        raise ConfigError("beta list must not be empty")
    out_dir = Path(out_dir)
    rows = []
    table = {}
    for beta in beta_list:
        bcfg = replace(cfg, beta=beta)
        for seed in cfg.seeds:
            results = run_rules(bcfg, seed)
            for rule in rule_list(bcfg):
                res = results[rule.kind]
                mse_val = None
                if with_attack:
                    ar, _ = attack_once(bcfg, rule, seed)
                    mse_val = None if ar is None else ar.mse
                acc = final_accuracy(res)
                rows.append((beta, rule.kind, seed, acc, mse_val, res.diverged))
                cell = table.setdefault(rule.kind, {}).setdefault(repr(float(beta)), {"accuracy": [], "attack_mse": []})
                cell["accuracy"].append(acc)
                if mse_val is not None:
                    cell["attack_mse"].append(mse_val)
    summary = {"config": cfg.to_dict(), "seeds": list(cfg.seeds), "beta_list": list(beta_list), "rules": {}}
    for rule, by_beta in table.items():
        summary["rules"][rule] = {
            b: {
                "mean_accuracy": float(np.nanmean(v["accuracy"])),
                "median_attack_mse": float(np.median(v["attack_mse"])) if v["attack_mse"] else None,
            }
            for b, v in by_beta.items()
        }
    write_csv(out_dir / "sweep.csv", SWEEP_COLUMNS, rows)
    write_json(out_dir / "sweep_summary.json", summary)
    write_json(out_dir / "config.resolved.json", cfg.to_dict())
    summary["any_diverged"] = any(r[-1] for r in rows)
    return summary


def privacy_params(cfg: ExperimentConfig) -> PR.PrivacyParams:
    graph = make_graph(cfg)
    n = graph.n
    beta = np.broadcast_to(np.asarray(cfg.beta, dtype=np.float64), (n,))
    if cfg.privacy.delta_f is not None:
        df = np.broadcast_to(np.asarray(cfg.privacy.delta_f, dtype=np.float64), (n,))
        return PR.PrivacyParams(beta, df, "config")
    seed = cfg.seeds[0]
    setup = prepare(cfg, seed)
    state = init_clients(
        sim_config(cfg, AggregationRule("dsgt"), setup.spec, seed),
        setup.shards, setup.weights, setup.graph,
    )
    df = [PR.empirical_sensitivity(setup.spec, c.theta, c.shard) for c in state.clients]
    return PR.PrivacyParams(beta, df, "empirical")


def cmd_budget(cfg: ExperimentConfig, t_max: int, out_dir) -> dict:
    if t_max < 0:
        raise ConfigError("t_max must be >= 0")
    out_dir = Path(out_dir)
    params = privacy_params(cfg)
    weights = sinkhorn_knopp(make_graph(cfg))
    report = PR.budget_report(params, weights.w, t_max)
    write_csv(out_dir / "budgets.csv", BUDGET_COLUMNS, report.rows())
    summary = {
        "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "t_max": t_max,
        "sensitivity_source": params.sensitivity_source,
        "delta_f": params.delta_f.tolist(),
        "beta": params.beta.tolist(),
    }
    write_json(out_dir / "budget.json", summary)
    write_json(out_dir / "config.resolved.json", cfg.to_dict())
    return summary
