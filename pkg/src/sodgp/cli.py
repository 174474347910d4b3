"""Command-line driver: ``sodgp {train,eval,predict,benchmark}``.

Every flag can also come from a flat ``key = value`` config file given with
``--config``; keys are the long flag names with dashes or underscores, and
flags on the command line win. Exit codes: 0 success, 1 numerical failure,
2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import Dataset, load_csv, load_model, save_csv, save_model, split, write_history, \
    write_rows
from .errors import NotPositiveDefinite, NumericalDivergence, SodgpError
from .model import Architecture, ModelConfig, init_model
from .predict import nlpp, predict, rmse
from .subset import default_subset_size, kmeans_subset, random_subset
from .train import TrainConfig, stream_seed, train

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2
NUMERIC_ERRORS = (NumericalDivergence, NotPositiveDefinite, FloatingPointError)
RESULT_COLUMNS = ("dataset", "layers", "seed", "nlpp", "rmse", "status")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    data: str
    target: object = None
    layers: int = 2
    hidden_width: object = None
    subset_size: object = None
    subset_method: str = "kmeans"
    iters: int = 20000
    batch: int = 2000
    lr: float = 0.01
    samples_train: int = 10
    samples_predict: int = 50
    seed: int = 0
    test_fraction: float = 0.1
    log_every: int = 100
    ard: bool = False
    freeze_hidden_noise: bool = False
    linear_mean: bool = False
    out: str = "runs"

    def validate(self):
        if not Path(self.data).is_file():
            raise UsageError(f"data file not found: {self.data}")
        if self.subset_method not in ("kmeans", "random"):
            raise UsageError(f"unknown subset method {self.subset_method!r}")


# ---------------------------------------------------------------- single run

def run_one(cfg: RunConfig, seed: int, out_dir: Path, progress=None):
    """Split, select the subset, initialise, train and evaluate one seeded run.

    Writes model, history, test split and metrics into ``out_dir`` and returns
    the metrics dictionary.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    data = load_csv(cfg.data, cfg.target)
    train_set, test_set = split(data, cfg.test_fraction, seed)
    x, y = train_set.x_std, train_set.y_std
    m = cfg.subset_size or default_subset_size(train_set.n)
    subset_seed = stream_seed(seed, "subset")
    if cfg.subset_method == "kmeans":
        subset = kmeans_subset(x, m, subset_seed)
    else:
        subset = random_subset(train_set.n, m, subset_seed)
    arch = Architecture(train_set.input_dim, cfg.layers, cfg.hidden_width)
    mcfg = ModelConfig(ard=cfg.ard, train_hidden_noise=not cfg.freeze_hidden_noise,
                       linear_mean=cfg.linear_mean)
    model = init_model(arch, x, y, subset, stream_seed(seed, "init"), mcfg,
                       train_set.standardization)
    tcfg = TrainConfig(cfg.iters, cfg.batch, cfg.lr, cfg.samples_train, seed, cfg.log_every)
    history = train(model, x, y, tcfg, progress)
    save_model(model, out_dir / f"model_seed{seed}.json")
    write_history(out_dir / f"history_seed{seed}.csv", history)
    save_csv(out_dir / f"test_seed{seed}.csv", test_set)
    metrics = evaluate(model, test_set, cfg.samples_predict, seed)
    metrics.update({"seed": seed, "final_elbo": float(history.elbo_trace[-1]),
                    "parameters": model.parameter_count()})
    with open(out_dir / f"metrics_seed{seed}.json", "w") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
    return metrics


def evaluate(model, test_set: Dataset, t_samples, seed):
    mix = predict(model, test_set.x, t_samples, seed=stream_seed(seed, "eps") + 1)
    std = model.standardization
    scale, mean = (std.y_scale, std.y_mean) if std is not None else (1.0, 0.0)
    return {"nlpp": nlpp(mix, test_set.y, scale, mean), "rmse": rmse(mix, test_set.y, scale, mean),
            "n_test": int(test_set.n)}


def mean_std(values):
    """``mean(std)`` with three decimals; std is the sample standard deviation."""
    values = np.asarray(values, dtype=float)
    std = values.std(ddof=1) if values.size > 1 else 0.0
    return f"{values.mean():.3f}({std:.3f})"


# ---------------------------------------------------------------- commands

def cmd_train(args):
    cfg = _run_config(args)
    cfg.validate()
    out = Path(cfg.out)
    for r in range(args.repeats):
        seed = cfg.seed + r

        def progress(it, bd, ms, seed=seed):
            print(f"seed {seed} iter {it:6d} elbo {bd['total']:.4f} ({ms / 1000:.1f}s)", flush=True)

        metrics = run_one(cfg, seed, out, progress if not args.quiet else None)
        print(f"seed {seed} final elbo {metrics['final_elbo']:.4f} "
              f"test nlpp {metrics['nlpp']:.4f} rmse {metrics['rmse']:.4f}")
    return EXIT_OK


def _model_files(path):
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("model_seed*.json"))
        if not files:
            raise UsageError(f"no model files in {p}")
        return files
    if not p.is_file():
        raise UsageError(f"model file not found: {p}")
    return [p]


def _test_set_for(model_path, data, target):
    if data:
        return load_csv(data, target)
    seed = model_path.stem.replace("model_seed", "")
    candidate = model_path.with_name(f"test_seed{seed}.csv")
    if not candidate.is_file():
        raise UsageError(f"no --data given and no {candidate.name} next to the model")
    return load_csv(candidate)


def cmd_eval(args):
    files = _model_files(args.model)
    rows = []
    for f in files:
        model = load_model(f)
        test = _test_set_for(f, args.data, args.target)
        if test.input_dim != model.architecture.input_dim:
            raise UsageError(f"{f.name}: model expects {model.architecture.input_dim} features, "
                             f"test data has {test.input_dim}")
        # a seed-suffixed model reuses its training seed, matching the stored metrics
        stem = f.stem.replace("model_seed", "")
        seed = int(stem) if stem.lstrip("-").isdigit() else args.seed
        metrics = evaluate(model, test, args.samples_predict, seed)
        rows.append({"model": f.name, "nlpp": metrics["nlpp"], "rmse": metrics["rmse"]})
        print(f"{f.name}: nlpp {metrics['nlpp']:.4f} rmse {metrics['rmse']:.4f}")
    if len(rows) > 1:
        print(f"NLPP {mean_std([r['nlpp'] for r in rows])}  RMSE {mean_std([r['rmse'] for r in rows])}")
    out = Path(args.out) if args.out else (Path(args.model) if Path(args.model).is_dir()
                                           else Path(args.model).parent)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "results.csv", rows, ("model", "nlpp", "rmse"))
    return EXIT_OK


def cmd_predict(args):
    model = load_model(_model_files(args.model)[0])
    if not args.data or not Path(args.data).is_file():
        raise UsageError(f"data file not found: {args.data}")
    data = load_csv(args.data, args.target) if args.target is not None else None
    if data is None:
        # features only: a table whose columns all feed the model
        data = load_csv(args.data, target=None)
        if data.input_dim + 1 == model.architecture.input_dim:
            data = Dataset(np.column_stack([data.x, data.y]), np.zeros(data.n), None)
    mix = predict(model, data.x, args.samples_predict, seed=args.seed)
    std = model.standardization
    scale, shift = (std.y_scale, std.y_mean) if std is not None else (1.0, 0.0)
    mean = mix.point_mean()
    # mixture variance of y: within-component (plus noise) and between-component parts
    var = (mix.variances + mix.noise_var + mix.means ** 2).mean(axis=1) - mean ** 2
    rows = [{"mean": mu * scale + shift, "variance": v * scale ** 2} for mu, v in zip(mean, var)]
    out = Path(args.out) if args.out else Path("predictions.csv")
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "predictions.csv"
    write_rows(out, rows, ("mean", "variance"))
    print(f"wrote {len(rows)} predictions to {out}")
    return EXIT_OK


def _bench_cell(payload):
    cfg_dict, seed, out_dir = payload
    cfg = RunConfig(**cfg_dict)
    try:
        metrics = run_one(cfg, seed, Path(out_dir))
        return {"nlpp": metrics["nlpp"], "rmse": metrics["rmse"], "status": "ok"}
    except NUMERIC_ERRORS as exc:
        return {"nlpp": float("nan"), "rmse": float("nan"), "status": f"numeric: {exc}"}
    except Exception as exc:  # recorded, the suite carries on
        return {"nlpp": float("nan"), "rmse": float("nan"),
                "status": f"error: {type(exc).__name__}: {exc}"}


def benchmark_cells(base: RunConfig, datasets, depths, repeats, out):
    cells = []
    for data in datasets:
        name = Path(data).stem
        for depth in depths:
            for r in range(repeats):
                seed = base.seed + r
                cell_cfg = dict(vars(base), data=str(data), layers=int(depth))
                cells.append((name, depth, seed, cell_cfg, Path(out) / name / f"dgp{depth}"))
    return cells


def run_benchmark(base: RunConfig, datasets, depths, repeats, out, workers=1, log=print):
    """Train and evaluate every (dataset, depth, seed) cell; completed cells are reused."""
    out = Path(out)
    cells = benchmark_cells(base, datasets, depths, repeats, out)
    results = {}
    pending = []
    for name, depth, seed, cell_cfg, cell_dir in cells:
        done = cell_dir / f"metrics_seed{seed}.json"
        if done.is_file():
            with open(done) as fh:
                m = json.load(fh)
            results[(name, depth, seed)] = {"nlpp": m["nlpp"], "rmse": m["rmse"], "status": "ok"}
            log(f"{name} DGP{depth} seed {seed}: reused")
        else:
            pending.append(((name, depth, seed), (cell_cfg, seed, str(cell_dir))))
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_bench_cell, [p for _, p in pending]))
    else:
        outcomes = [_bench_cell(p) for _, p in pending]
    for (key, _), outcome in zip(pending, outcomes):
        results[key] = outcome
        log(f"{key[0]} DGP{key[1]} seed {key[2]}: {outcome['status']} "
            f"nlpp {outcome['nlpp']:.4f} rmse {outcome['rmse']:.4f}")
    rows = [{"dataset": k[0], "layers": k[1], "seed": k[2], **v}
            for k, v in sorted(results.items())]
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "results.csv", rows, RESULT_COLUMNS)
    _write_table(out / "results.md", rows)
    return rows


def _write_table(path, rows):
    lines = ["| dataset | model | NLPP | RMSE | runs |", "|---|---|---|---|---|"]
    keys = sorted({(r["dataset"], r["layers"]) for r in rows})
    for name, depth in keys:
        ok = [r for r in rows if (r["dataset"], r["layers"]) == (name, depth) and r["status"] == "ok"]
        total = sum(1 for r in rows if (r["dataset"], r["layers"]) == (name, depth))
        nl = mean_std([r["nlpp"] for r in ok]) if ok else "n/a"
        rm = mean_std([r["rmse"] for r in ok]) if ok else "n/a"
        lines.append(f"| {name} | SoD-DGP{depth} | {nl} | {rm} | {len(ok)}/{total} |")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_benchmark(args):
    datasets = args.data_list or ([args.data] if args.data else [])
    if not datasets:
        raise UsageError("benchmark needs at least one --data file")
    for d in datasets:
        if not Path(d).is_file():
            raise UsageError(f"data file not found: {d}")
    cfg = _run_config(args, data=datasets[0])
    depths = [int(v) for v in str(args.depths).split(",") if v.strip()]
    workers = min(_max_workers(), max(1, len(datasets) * len(depths) * args.repeats))
    rows = run_benchmark(cfg, datasets, depths, args.repeats, cfg.out, workers)
    print(Path(cfg.out, "results.md").read_text(), end="")
    return EXIT_NUMERIC if any(r["status"] != "ok" for r in rows) else EXIT_OK


def _max_workers():
    env = os.environ.get("SODGP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"SODGP_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


# ---------------------------------------------------------------- argument parsing

def _run_config(args, data=None):
    return RunConfig(
        data=data or args.data, target=args.target, layers=args.layers,
        hidden_width=args.hidden_width, subset_size=args.subset_size,
        subset_method=args.subset_method, iters=args.iters, batch=args.batch, lr=args.lr,
        samples_train=args.samples_train, samples_predict=args.samples_predict,
        seed=args.seed, test_fraction=args.test_fraction, log_every=args.log_every,
        ard=args.ard, freeze_hidden_noise=args.freeze_hidden_noise,
        linear_mean=args.linear_mean, out=args.out or "runs")


def _add_common(p):
    p.add_argument("--config", help="flat key = value file supplying defaults")
    p.add_argument("--data", help="CSV file with a header row")
    p.add_argument("--target", help="target column name or index (default: last column)")
    p.add_argument("--layers", type=int, default=2, help="number of hidden GP layers")
    p.add_argument("--hidden-width", type=int, default=None)
    p.add_argument("--subset-size", type=int, default=None)
    p.add_argument("--subset-method", choices=("kmeans", "random"), default="kmeans")
    p.add_argument("--iters", type=int, default=20000)
    p.add_argument("--batch", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--samples-train", type=int, default=10)
    p.add_argument("--samples-predict", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--ard", action="store_true")
    p.add_argument("--freeze-hidden-noise", action="store_true")
    p.add_argument("--linear-mean", action="store_true")
    p.add_argument("--out", help="output directory (or file for predict)")
    p.add_argument("--quiet", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="sodgp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_train = sub.add_parser("train", help="train seeded models and save them")
    _add_common(p_train)
    p_eval = sub.add_parser("eval", help="NLPP and RMSE of saved models on test data")
    _add_common(p_eval)
    p_eval.add_argument("--model", required=True, help="model file or directory of models")
    p_pred = sub.add_parser("predict", help="write predictive means and variances")
    _add_common(p_pred)
    p_pred.add_argument("--model", required=True)
    p_bench = sub.add_parser("benchmark", help="datasets x depths x repeats suite")
    _add_common(p_bench)
    p_bench.add_argument("--depths", default="2", help="comma-separated hidden-layer counts")
    p_bench.add_argument("--data-list", nargs="+", default=None, help="several dataset files")
    return parser


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _apply_config(parser, sub_parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    if not Path(known.config).is_file():
        raise UsageError(f"config file not found: {known.config}")
    values = read_config(known.config)
    actions = {a.dest: a for a in sub_parser._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in actions or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r}")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.nargs in ("+", "*"):
            defaults[key] = [v.strip() for v in raw.split(",") if v.strip()]
        else:
            defaults[key] = action.type(raw) if action.type else raw
    sub_parser.set_defaults(**defaults)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and argv[0] in ("train", "eval", "predict", "benchmark"):
            sub_parser = parser._subparsers._group_actions[0].choices[argv[0]]
            _apply_config(parser, sub_parser, argv[1:])
        args = parser.parse_args(argv)
        handler = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
                   "benchmark": cmd_benchmark}[args.command]
        if args.command == "train" and not args.data:
            raise UsageError("train needs --data")
        if args.repeats < 1:
            raise UsageError("--repeats must be at least 1")
        return handler(args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"sodgp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, OSError, SodgpError, ValueError) as exc:
        print(f"sodgp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:  # pragma: no cover - unexpected bug, keep the trace
        traceback.print_exc()
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
