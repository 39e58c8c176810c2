"""Command-line entry point for reproducible training, cold-start and
payload-accounting runs.

Subcommands: simulate | coldstart | gen-synthetic | payload-report.
Every run writes a manifest (resolved config, seed, input hashes) that is
sufficient to reproduce it bit-for-bit; trace files are byte-identical
across reruns with the same config and seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedmvmf import __version__, kernels
from fedmvmf.coldstart import cold_start_item, cold_start_user
from fedmvmf.data import Dataset, gen_synthetic, load_dataset, split_per_user, write_dataset
from fedmvmf.evaluation import (
    METRIC_NAMES,
    aggregate_user_metrics,
    convergence_value,
    impr_pct,
    payload_report,
    user_metrics,
    write_trace_csv,
)
from fedmvmf.federation import (
    clients_from_dataset,
    item_server_from_dataset,
    server_init,
    simulate,
)
from fedmvmf.model import HyperParams, InteractionRow, update_p_local
from fedmvmf.optimizer import AdamConfig
from fedmvmf.seeding import substream

_logger = logging.getLogger(__name__)

MODES = ("fedmvmf", "fcf-baseline")
SCENARIOS = ("users", "items", "users-items")

#: solves always see at least this much ridge regularization
LAMBDA2_FLOOR = 1e-12


class ConfigError(ValueError):
    """Carries every validation failure of a run config at once."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(eq=False)
class RunConfig:
    dataset: dict
    hp: HyperParams
    adam: AdamConfig
    rounds: int
    participation_fraction: float
    seed: int
    mode: str
    train_fraction: float
    eval_k: int
    eval_window: int
    normalize_metrics: bool
    rebuilds: int
    output_dir: Path
    deterministic: bool
    track_cost: bool
    source_path: Path | None = None

    def as_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "hyperparams": {
                "k": self.hp.k,
                "alpha": self.hp.alpha,
                "lambda1": self.hp.lambda1,
                "lambda2": self.hp.lambda2,
                "theta": self.hp.theta,
            },
            "adam": {
                "beta1": self.adam.beta1,
                "beta2": self.adam.beta2,
                "gamma": self.adam.gamma,
                "epsilon": self.adam.epsilon,
            },
            "rounds": self.rounds,
            "participation_fraction": self.participation_fraction,
            "seed": self.seed,
            "mode": self.mode,
            "train_fraction": self.train_fraction,
            "eval": {"k": self.eval_k, "window": self.eval_window, "normalize": self.normalize_metrics},
            "rebuilds": self.rebuilds,
            "deterministic": self.deterministic,
            "track_cost": self.track_cost,
        }


def load_run_config(path, overrides=None) -> RunConfig:
    """Parse and validate a run config, collecting every error at once."""
    path = Path(path)
    errors = []
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    overrides = overrides or {}
    for key in ("mode", "seed", "rounds", "participation_fraction", "deterministic"):
        if overrides.get(key) is not None:
            raw[key] = overrides[key]
    out_dir = overrides.get("output_dir") or raw.get("output_dir") or "run-output"

    mode = raw.get("mode", "fedmvmf")
    if mode not in MODES:
        errors.append(f"mode must be one of {MODES}, got {mode!r}")

    hp_raw = dict(raw.get("hyperparams", {}))
    if mode == "fcf-baseline":
        hp_raw["lambda1"] = 0.0
    hp_raw["lambda2"] = max(float(hp_raw.get("lambda2", 0.0)), LAMBDA2_FLOOR)
    hp = None
    try:
        hp = HyperParams(**hp_raw)
    except (TypeError, ValueError) as exc:
        errors.append(f"hyperparams: {exc}")

    adam = None
    try:
        adam = AdamConfig(**raw.get("adam", {}))
    except (TypeError, ValueError) as exc:
        errors.append(f"adam: {exc}")

    rounds = int(raw.get("rounds", 0))
    if rounds < 0:
        errors.append(f"rounds must be >= 0, got {rounds}")
    participation = float(raw.get("participation_fraction", 1.0))
    if not 0.0 < participation <= 1.0:
        errors.append(f"participation_fraction must be in (0, 1], got {participation}")
    train_fraction = float(raw.get("train_fraction", 0.8))
    if not 0.0 < train_fraction < 1.0:
        errors.append(f"train_fraction must be in (0, 1), got {train_fraction}")
    eval_cfg = raw.get("eval", {})
    eval_k = int(eval_cfg.get("k", 10))
    eval_window = int(eval_cfg.get("window", 10))
    if eval_k < 1:
        errors.append(f"eval.k must be >= 1, got {eval_k}")
    if eval_window < 1:
        errors.append(f"eval.window must be >= 1, got {eval_window}")
    rebuilds = int(raw.get("rebuilds", 1))
    if rebuilds < 1:
        errors.append(f"rebuilds must be >= 1, got {rebuilds}")

    dataset = raw.get("dataset")
    if not isinstance(dataset, dict) or dataset.get("kind") not in ("synthetic", "files"):
        errors.append('dataset.kind must be "synthetic" or "files"')
    elif dataset["kind"] == "files":
        ds_path = (path.parent / dataset.get("config", "")).resolve()
        if not ds_path.is_file():
            errors.append(f"dataset config not found: {ds_path}")
        dataset = dict(dataset, config=str(ds_path))

    if errors:
        raise ConfigError(errors)
    return RunConfig(
        dataset=dataset,
        hp=hp,
        adam=adam,
        rounds=rounds,
        participation_fraction=participation,
        seed=int(raw.get("seed", 0)),
        mode=mode,
        train_fraction=train_fraction,
        eval_k=eval_k,
        eval_window=eval_window,
        normalize_metrics=bool(eval_cfg.get("normalize", False)),
        rebuilds=rebuilds,
        output_dir=Path(out_dir),
        deterministic=bool(raw.get("deterministic", False)),
        track_cost=bool(raw.get("track_cost", True)),
        source_path=path,
    )


def _resolve_dataset(config: RunConfig) -> Dataset:
    spec = config.dataset
    if spec["kind"] == "synthetic":
        return gen_synthetic(
            n_users=int(spec.get("n_users", 500)),
            n_items=int(spec.get("n_items", 200)),
            d_u=int(spec.get("d_u", 16)),
            d_v=int(spec.get("d_v", 16)),
            k_true=int(spec.get("k_true", 4)),
            noise=float(spec.get("noise", 0.0)),
            seed=int(spec.get("seed", config.seed)),
            density=float(spec.get("density", 0.05)),
        )
    return load_dataset(spec["config"])


def _hash_inputs(config: RunConfig) -> str:
    """Content hash of everything that determines a run."""
    digest = hashlib.sha256()
    digest.update(json.dumps(config.as_dict(), sort_keys=True).encode())
    if config.dataset.get("kind") == "files":
        ds_path = Path(config.dataset["config"])
        digest.update(ds_path.read_bytes())
        with open(ds_path, encoding="utf-8") as fh:
            ds_config = json.load(fh)
        for key in ("interactions", "user_features", "item_features"):
            block = ds_config.get(key)
            if block is None:
                continue
            rel = block["path"] if isinstance(block, dict) else block
            digest.update((ds_path.parent / rel).read_bytes())
    return digest.hexdigest()


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(config: RunConfig, out_dir: Path, extra=None) -> None:
    manifest = {
        "config": config.as_dict(),
        "seed": config.seed,
        "inputs_sha256": _hash_inputs(config),
        "package_version": __version__,
        "kernel_backend": kernels.BACKEND,
    }
    if extra:
        manifest.update(extra)
    _write_json(out_dir / "manifest.json", manifest)


def _converged_metrics(trace, window: int) -> dict | None:
    """Trailing-window means of each metric over the reporting promotions."""
    series = {name: [] for name in METRIC_NAMES}
    for entry in trace:
        if entry.metrics is not None:
            for name in METRIC_NAMES:
                series[name].append(getattr(entry.metrics, name))
    n = len(series["precision"])
    if n == 0:
        return None
    w = min(window, n)
    return {name: convergence_value(values, n, w) for name, values in series.items()}


def _run_one_simulation(config: RunConfig, dataset: Dataset, rebuild_seed: int, item_view: bool):
    split = split_per_user(dataset, config.train_fraction, rebuild_seed)
    clients = clients_from_dataset(split.train, split.test)
    item_server = item_server_from_dataset(split.train) if item_view else None
    d_u = dataset.user_features[0].dim if dataset.user_features is not None else 1
    server = server_init(config.hp, dataset.n_items, d_u, rebuild_seed)
    return simulate(
        clients,
        item_server,
        config.rounds,
        config.participation_fraction,
        rebuild_seed,
        config.hp,
        config.adam,
        server=server,
        eval_k=config.eval_k,
        track_cost=config.track_cost,
        normalize_metrics=config.normalize_metrics,
    )


def cmd_simulate(config: RunConfig) -> int:
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _resolve_dataset(config)
    item_view = config.mode == "fedmvmf" and config.hp.lambda1 > 0 and dataset.item_features is not None
    if config.rounds == 0:
        _logger.warning("rounds=0: writing an empty trace and exiting")
    per_rebuild = []
    timings = None
    for rebuild in range(config.rebuilds):
        rebuild_seed = config.seed + rebuild
        result = _run_one_simulation(config, dataset, rebuild_seed, item_view)
        trace_name = "trace.csv" if rebuild == 0 else f"trace-{rebuild}.csv"
        write_trace_csv(result.trace, out_dir / trace_name)
        converged = _converged_metrics(result.trace, config.eval_window)
        per_rebuild.append(
            {
                "seed": rebuild_seed,
                "promotions": result.promotions,
                "converged": converged,
                "final_cost": result.trace[-1].cost if result.trace else None,
                "stale_dropped": result.server.stale_dropped,
            }
        )
        timings = result.timings

    metrics_out = {"mode": config.mode, "rebuilds": per_rebuild}
    converged_all = [r["converged"] for r in per_rebuild if r["converged"]]
    if converged_all:
        metrics_out["mean"] = {
            name: float(np.mean([c[name] for c in converged_all])) for name in METRIC_NAMES
        }
        metrics_out["std"] = {
            name: float(np.std([c[name] for c in converged_all])) for name in METRIC_NAMES
        }
    _write_json(out_dir / "metrics.json", metrics_out)

    d_u = dataset.user_features[0].dim if (item_view and dataset.user_features is not None) else 0
    report = payload_report(dataset.n_items, d_u, config.hp.k)
    payload_out = {
        "download_bytes": report.download_bytes,
        "upload_bytes": report.upload_bytes,
        "client_update_ms": report.client_update_ms,
        "server_update_ms": report.server_update_ms,
    }
    if timings and timings["client_rounds"]:
        payload_out["measured_client_round_ms"] = timings["client_ms"] / timings["client_rounds"]
        payload_out["measured_server_pump_ms"] = timings["server_ms"] / max(1, timings["pumps"])
    _write_json(out_dir / "payload.json", payload_out)
    _write_manifest(config, out_dir)
    return 0


def _simulate_both(config: RunConfig) -> int:
    """Run the full model and the single-view baseline; emit an improvement summary."""
    results = {}
    for mode in MODES:
        sub = RunConfig(**{**config.__dict__, "mode": mode, "output_dir": config.output_dir / mode})
        if mode == "fcf-baseline":
            sub.hp = HyperParams(
                k=config.hp.k, alpha=config.hp.alpha, lambda1=0.0,
                lambda2=config.hp.lambda2, theta=config.hp.theta,
            )
        code = cmd_simulate(sub)
        if code:
            return code
        with open(sub.output_dir / "metrics.json", encoding="utf-8") as fh:
            results[mode] = json.load(fh)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    if "mean" in results["fedmvmf"] and "mean" in results["fcf-baseline"]:
        for name in METRIC_NAMES:
            baseline = results["fcf-baseline"]["mean"][name]
            candidate = results["fedmvmf"]["mean"][name]
            summary[name] = impr_pct(candidate, baseline) if baseline else None
    _write_json(config.output_dir / "impr.json", summary)
    return 0


# -- cold start ----------------------------------------------------------------


def _subset_users(dataset: Dataset, keep) -> Dataset:
    keep = sorted(keep)
    return Dataset(
        n_users=len(keep),
        n_items=dataset.n_items,
        interactions=[dataset.interactions[i] for i in keep],
        user_features=[dataset.user_features[i] for i in keep] if dataset.user_features else None,
        item_features=dataset.item_features,
        user_ids=[dataset.user_ids[i] for i in keep],
        item_ids=dataset.item_ids,
        provenance=f"{dataset.provenance} [users subset]",
    )


def _subset_items(dataset: Dataset, keep) -> tuple[Dataset, dict]:
    keep = sorted(keep)
    remap = {old: new for new, old in enumerate(keep)}
    rows = []
    for row in dataset.interactions:
        pairs = [(remap[int(j)], v) for j, v in zip(row.item_idx, row.values) if int(j) in remap]
        pairs.sort()
        rows.append(
            InteractionRow(
                user_id=row.user_id,
                item_idx=np.array([p[0] for p in pairs], dtype=np.int64),
                values=np.array([p[1] for p in pairs]),
                n_items=len(keep),
            )
        )
    subset = Dataset(
        n_users=dataset.n_users,
        n_items=len(keep),
        interactions=rows,
        user_features=dataset.user_features,
        item_features=[dataset.item_features[j] for j in keep] if dataset.item_features else None,
        user_ids=dataset.user_ids,
        item_ids=[dataset.item_ids[j] for j in keep],
        provenance=f"{dataset.provenance} [items subset]",
    )
    return subset, remap


def _random_map_baseline(relevant_sets, catalog_sizes, k, seed, draws: int = 25) -> float:
    """Monte-Carlo MAP of uniformly random rankings over the same relevant sets."""
    rng = substream(seed, "baseline")
    values = []
    for relevant, n in zip(relevant_sets, catalog_sizes):
        per_user = 0.0
        for _ in range(draws):
            ranked = rng.permutation(n)
            hits = 0
            total = 0.0
            for pos, item in enumerate(ranked[:k], start=1):
                if int(item) in relevant:
                    hits += 1
                    total += hits / pos
            per_user += total / min(k, len(relevant))
        values.append(per_user / draws)
    return float(np.mean(values)) if values else 0.0


def cmd_coldstart(config: RunConfig, scenario: str, holdout_fraction: float) -> int:
    if scenario not in SCENARIOS:
        raise ConfigError([f"scenario must be one of {SCENARIOS}, got {scenario!r}"])
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError([f"holdout_fraction must be in (0, 1), got {holdout_fraction}"])
    if scenario != "users" and config.hp.lambda1 == 0:
        raise ConfigError([f"scenario {scenario!r} requires lambda1 > 0 (item factors undefined)"])
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _resolve_dataset(config)
    if dataset.user_features is None:
        raise ConfigError(["cold start requires user features"])
    if scenario != "users" and dataset.item_features is None:
        raise ConfigError([f"scenario {scenario!r} requires item features"])

    rng = substream(config.seed, "holdout")
    report = _run_coldstart_scenario(config, dataset, scenario, holdout_fraction, rng)
    _write_json(out_dir / "coldstart_metrics.json", report)
    _write_manifest(config, out_dir, extra={"scenario": scenario, "holdout_fraction": holdout_fraction})
    return 0


def _train_for_coldstart(config: RunConfig, train_set: Dataset):
    clients = clients_from_dataset(train_set)
    item_server = item_server_from_dataset(train_set) if config.hp.lambda1 > 0 else None
    d_u = train_set.user_features[0].dim
    server = server_init(config.hp, train_set.n_items, d_u, config.seed)
    simulate(
        clients,
        item_server,
        config.rounds,
        config.participation_fraction,
        config.seed,
        config.hp,
        config.adam,
        server=server,
        eval_k=None,
        track_cost=False,
    )
    return clients, item_server, server


def _run_coldstart_scenario(config, dataset, scenario, fraction, rng) -> dict:
    n_users, n_items = dataset.n_users, dataset.n_items
    held_users = []
    held_items = []
    if scenario in ("users", "users-items"):
        held_users = sorted(int(i) for i in rng.choice(n_users, size=max(1, round(fraction * n_users)), replace=False))
        if len(held_users) >= n_users:
            raise ConfigError(["holdout would remove every user"])
    if scenario in ("items", "users-items"):
        held_items = sorted(int(j) for j in rng.choice(n_items, size=max(1, round(fraction * n_items)), replace=False))
        if len(held_items) >= n_items:
            raise ConfigError(["holdout would remove every item"])

    train_set = dataset
    item_remap = None
    if held_users:
        train_set = _subset_users(train_set, set(range(n_users)) - set(held_users))
    if held_items:
        train_set, item_remap = _subset_items(train_set, set(range(n_items)) - set(held_items))

    clients, item_server, server = _train_for_coldstart(config, train_set)

    new_item_index = {}
    if held_items:
        for j in held_items:
            model = cold_start_item(dataset.item_features[j], item_server, server)
            new_item_index[j] = model.q.shape[0] - 1

    per_user = []
    relevant_sets = []
    catalog_sizes = []
    if scenario == "users":
        for i in held_users:
            relevant = set(int(j) for j in dataset.interactions[i].item_idx)
            if not relevant:
                continue
            result = cold_start_user(dataset.user_features[i], server.model)
            per_user.append(user_metrics(result.scores, (), relevant, config.eval_k))
            relevant_sets.append(relevant)
            catalog_sizes.append(result.scores.size)
    elif scenario == "items":
        held_set = set(held_items)
        for i, row in enumerate(dataset.interactions):
            relevant = {new_item_index[int(j)] for j in row.item_idx if int(j) in held_set}
            if not relevant:
                continue
            if clients[i].p is None:  # never sampled during training
                clients[i].p = update_p_local(
                    clients[i].row, clients[i].features, server.model.q, server.model.u, config.hp
                )
            scores = server.model.q @ clients[i].p
            train_items = clients[i].row.item_idx
            per_user.append(user_metrics(scores, train_items, relevant, config.eval_k))
            relevant_sets.append(relevant)
            catalog_sizes.append(scores.size - train_items.size)
    else:  # users-items: new users ranked over the grown catalog, scored
        # on their interactions with the newly inserted items
        held_set = set(held_items)
        for i in held_users:
            row = dataset.interactions[i]
            relevant = {new_item_index[int(j)] for j in row.item_idx if int(j) in held_set}
            if not relevant:
                continue
            result = cold_start_user(dataset.user_features[i], server.model)
            per_user.append(user_metrics(result.scores, (), relevant, config.eval_k))
            relevant_sets.append(relevant)
            catalog_sizes.append(result.scores.size)

    sample = aggregate_user_metrics(per_user)
    if sample is None:
        raise ConfigError([f"scenario {scenario!r}: no evaluable held-out entities"])
    random_map = _random_map_baseline(relevant_sets, catalog_sizes, config.eval_k, config.seed)
    return {
        "scenario": scenario,
        "held_users": len(held_users),
        "held_items": len(held_items),
        "metrics": sample.as_dict(),
        "user_count": sample.user_count,
        "random_map": random_map,
        "map_vs_random": (sample.map / random_map) if random_map > 0 else None,
    }


# -- small subcommands ----------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    dataset = gen_synthetic(
        n_users=args.users,
        n_items=args.items,
        d_u=args.user_features,
        d_v=args.item_features,
        k_true=args.k_true,
        noise=args.noise,
        seed=args.seed,
        density=args.density,
    )
    out_dir = Path(args.out)
    config_path = write_dataset(dataset, out_dir)
    summary = {
        "config": str(config_path),
        "n_users": dataset.n_users,
        "n_items": dataset.n_items,
        "n_interactions": dataset.n_interactions,
        "density": dataset.density(),
    }
    _write_json(out_dir / "summary.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_payload_report(args) -> int:
    report = payload_report(args.items, 0 if args.fcf else args.user_features, args.k)
    out = {
        "download_bytes": report.download_bytes,
        "upload_bytes": report.upload_bytes,
        "client_update_ms": report.client_update_ms,
        "server_update_ms": report.server_update_ms,
    }
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_json(out_dir / "payload.json", out)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


# -- argument parsing -------------------------------------------------------------


def _add_run_flags(parser) -> None:
    parser.add_argument("--config", required=True, help="run config JSON")
    parser.add_argument("--mode", choices=MODES + ("both",), default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--rounds", type=int, default=None)
    parser.add_argument("--participation", type=float, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--deterministic", action="store_true", default=None,
                        help="single ordered execution stream (the simulator default)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmvmf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="train and evaluate on a train/test split")
    _add_run_flags(p_sim)

    p_cold = sub.add_parser("coldstart", help="hold out entities, train, infer them from features")
    _add_run_flags(p_cold)
    p_cold.add_argument("--scenario", choices=SCENARIOS, required=True)
    p_cold.add_argument("--holdout-fraction", type=float, default=0.1)

    p_gen = sub.add_parser("gen-synthetic", help="generate a synthetic dataset on disk")
    p_gen.add_argument("--users", type=int, default=500)
    p_gen.add_argument("--items", type=int, default=200)
    p_gen.add_argument("--user-features", type=int, default=16)
    p_gen.add_argument("--item-features", type=int, default=16)
    p_gen.add_argument("--k-true", type=int, default=4)
    p_gen.add_argument("--noise", type=float, default=0.0)
    p_gen.add_argument("--density", type=float, default=0.05)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)

    p_pay = sub.add_parser("payload-report", help="wire-format byte counts and timings")
    p_pay.add_argument("--items", type=int, required=True)
    p_pay.add_argument("--user-features", type=int, required=True)
    p_pay.add_argument("--k", type=int, required=True)
    p_pay.add_argument("--fcf", action="store_true", help="count the single-view payload instead")
    p_pay.add_argument("--out", default=None)
    return parser


def _overrides_from_args(args) -> dict:
    return {
        "mode": None if getattr(args, "mode", None) == "both" else getattr(args, "mode", None),
        "seed": getattr(args, "seed", None),
        "rounds": getattr(args, "rounds", None),
        "participation_fraction": getattr(args, "participation", None),
        "output_dir": getattr(args, "out", None),
        "deterministic": getattr(args, "deterministic", None),
    }


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            config = load_run_config(args.config, _overrides_from_args(args))
            if args.mode == "both":
                return _simulate_both(config)
            return cmd_simulate(config)
        if args.command == "coldstart":
            config = load_run_config(args.config, _overrides_from_args(args))
            return cmd_coldstart(config, args.scenario, args.holdout_fraction)
        if args.command == "gen-synthetic":
            return cmd_gen_synthetic(args)
        if args.command == "payload-report":
            return cmd_payload_report(args)
    except ConfigError as exc:
        for line in exc.errors:
            print(f"config error: {line}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
