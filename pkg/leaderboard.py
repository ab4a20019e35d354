"""
Aggregate per-task evaluation results into table and figure data.

Works on any sequence of result objects with the EvalTaskResult attributes,
so the same code runs on in-memory results and on rows read back from
results.csv. Std is the population std (ddof=0) across seeds.

Headline metric per environment:
  placement  mean final distance to goal, cm (lower is better)
  peg        insertion rate, % (higher is better)
"""

import sys
from collections import defaultdict
from typing import Dict, Iterable, List

import numpy as np

KIND_ORDER = ["poly", "rbf", "lrbf", "mlp", "lmlp", "expert"]
SPEED_MSE_UNITS = "(cm/s)^2"


def _kind_key(kind: str):
    return (KIND_ORDER.index(kind) if kind in KIND_ORDER else len(KIND_ORDER), kind)


def _seed_headline(env: str, rows: list) -> float:
    if env == "peg":
        return 100.0 * float(np.mean([r.inserted for r in rows]))
    return float(np.mean([r.final_distance for r in rows]))


def _seed_speed_mse(rows: list) -> float:
    return float(np.mean([(r.achieved_speed - r.target_speed) ** 2 for r in rows]))


def _mean_std(values: List[float]) -> dict:
    return {"mean": float(np.mean(values)), "std": float(np.std(values)), "seeds": len(values)}


def _across_seeds(rows: Iterable, metric) -> dict:
    by_seed = defaultdict(list)
    for r in rows:
        by_seed[r.seed].append(r)
    return _mean_std([metric(by_seed[s]) for s in sorted(by_seed)])


def _group(results: Iterable, *attrs) -> Dict[tuple, list]:
    groups = defaultdict(list)
    for r in results:
        groups[tuple(getattr(r, a) for a in attrs)].append(r)
    return groups


def _bin_label(bin_cm: float) -> str:
    return f"{bin_cm:g}cm"


def headline_table(results: Iterable) -> dict:
    """{env: {kind: {mean, std, seeds, metric}}} over all tasks."""
    table = defaultdict(dict)
    for (env, kind), rows in sorted(_group(results, "env", "cost_kind").items(),
                                    key=lambda item: (item[0][0], _kind_key(item[0][1]))):
        cell = _across_seeds(rows, lambda rs, e=env: _seed_headline(e, rs))
        cell["metric"] = "insertion_pct" if env == "peg" else "final_distance_cm"
        table[env][kind] = cell
    return dict(table)


def bin_table(results: Iterable) -> dict:
    """{env: [{"bin": "1cm", kind: {mean, std}, ...}, ..., {"bin": "Avg", ...}]}."""
    results = list(results)
    table = {}
    for env, env_rows in sorted(_group(results, "env").items()):
        env = env[0]
        kinds = sorted({r.cost_kind for r in env_rows}, key=_kind_key)
        bins = sorted({r.bin_cm for r in env_rows})
        rows = []
        for b in bins:
            row = {"bin": _bin_label(b)}
            for k in kinds:
                cell = [r for r in env_rows if r.bin_cm == b and r.cost_kind == k]
                if cell:
                    row[k] = _across_seeds(cell, lambda rs, e=env: _seed_headline(e, rs))
            rows.append(row)
        avg = {"bin": "Avg"}
        for k in kinds:
            avg[k] = _across_seeds([r for r in env_rows if r.cost_kind == k],
                                   lambda rs, e=env: _seed_headline(e, rs))
        rows.append(avg)
        table[env] = rows
    return table


def speed_by_bin(results: Iterable) -> List[dict]:
    """Speed MSE per (env, bin, kind); one CSV row each."""
    rows = []
    for (env, b, kind), group in sorted(_group(results, "env", "bin_cm", "cost_kind").items(),
                                        key=lambda item: (item[0][0], item[0][1], _kind_key(item[0][2]))):
        cell = _across_seeds(group, _seed_speed_mse)
        rows.append({"env": env, "bin": _bin_label(b), "kind": kind,
                     "speed_mse_mean": cell["mean"], "speed_mse_std": cell["std"]})
    return rows


def speed_by_duration(results: Iterable) -> List[dict]:
    """Speed MSE per (env, bin, duration, kind)."""
    rows = []
    groups = _group(results, "env", "bin_cm", "duration", "cost_kind")
    for (env, b, duration, kind), group in sorted(
            groups.items(), key=lambda item: (item[0][0], item[0][1], item[0][2], _kind_key(item[0][3]))):
        cell = _across_seeds(group, _seed_speed_mse)
        rows.append({"env": env, "bin": _bin_label(b), "duration": duration, "kind": kind,
                     "speed_mse_mean": cell["mean"], "speed_mse_std": cell["std"]})
    return rows


def speed_by_seed(results: Iterable) -> List[dict]:
    """Speed MSE per (env, kind, seed); the train-time speed figure."""
    rows = []
    for (env, kind, seed), group in sorted(_group(results, "env", "cost_kind", "seed").items(),
                                           key=lambda item: (item[0][0], _kind_key(item[0][1]), item[0][2])):
        rows.append({"env": env, "kind": kind, "seed": seed, "speed_mse": _seed_speed_mse(group)})
    return rows


def compute_rankings(results: Iterable) -> List[dict]:
    """
    Rank cost kinds per environment by headline metric.

    Returns list of dicts sorted by env then rank:
    [{rank, env, kind, mean, std, speed_mse, tasks}]
    """
    results = list(results)
    rankings = []
    for env, env_rows in sorted(_group(results, "env").items()):
        env = env[0]
        entries = []
        for kind, rows in _group(env_rows, "cost_kind").items():
            headline = _across_seeds(rows, lambda rs, e=env: _seed_headline(e, rs))
            entries.append({
                "env": env,
                "kind": kind[0],
                "mean": headline["mean"],
                "std": headline["std"],
                "speed_mse": _across_seeds(rows, _seed_speed_mse)["mean"],
                "tasks": len(rows),
            })
        # insertion: higher is better; distance: lower is better
        entries.sort(key=lambda r: (-r["mean"] if env == "peg" else r["mean"], _kind_key(r["kind"])))
        for i, r in enumerate(entries):
            r["rank"] = i + 1
        rankings.extend(entries)
    return rankings


def print_rankings(rankings: List[dict]):
    print("\n🏆 COST LEADERBOARD")
    print("=" * 60)
    for r in rankings:
        unit = "%" if r["env"] == "peg" else "cm"
        print(f"  #{r['rank']} {r['env']:9s} {r['kind']:6s}  "
              f"headline: {r['mean']:.3f}{unit} ({r['std']:.3f})  "
              f"speed MSE: {r['speed_mse']:.4f} {SPEED_MSE_UNITS}  "
              f"tasks: {r['tasks']}")


if __name__ == "__main__":
    import evidence_logger

    if len(sys.argv) != 2:
        print("usage: python leaderboard.py <results.csv>")
        sys.exit(2)
    print_rankings(compute_rankings(evidence_logger.read_results(sys.argv[1])))
