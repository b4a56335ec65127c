"""Command-line entry point: ``nnrk generate|train|calibrate|simulate|bench``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure
(divergence, non-finite training loss), 4 every benchmark run failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .benchmark import (
    Solver,
    SweepSpec,
    measure_cost,
    out_of_distribution_sweep,
    sweep,
    write_metrics_csv,
    write_summary_json,
)
from .config import RunConfig, load_config
from .enhanced import (
    HybridConfig,
    calibrate_delta_max,
    enhanced_integrate,
    hybrid_integrate,
    write_hybrid_report,
)
from .errors import ConfigError, IntegrationError, ModelFormatError, NnrkError, TrainingError
from .learning import build_dataset, load_dataset, save_dataset, train, write_history_csv
from .mlp import Mlp, load_model, mlp_new, save_model
from .rk import (
    embedded_pair_for,
    get_tableau,
    integrate,
    reference_integrate,
    richardson_integrate,
    write_trajectory_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_BENCH_FAILED = 4

MODES = ("plain", "richardson", "enhanced", "hybrid", "reference")


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2) + "\n")


def _meta_path(model_path: Path) -> Path:
    return model_path.with_name(model_path.stem + ".meta.json")


def _dataset_paths(cfg: RunConfig) -> tuple[Path, Path]:
    return cfg.run_dir / "train.csv", cfg.run_dir / "validation.csv"


def _model_path(cfg: RunConfig, arg: str | None) -> Path:
    return Path(arg) if arg else cfg.run_dir / "model.json"


def _load_checked_model(cfg: RunConfig, path: Path) -> Mlp:
    """Load a model and make sure its sidecar matches the configured scheme."""
    if not path.exists():
        raise ConfigError(f"model file not found: {path}")
    net = load_model(path)
    meta_path = _meta_path(path)
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        expected = cfg.scheme()
        for key in ("system", "tableau", "base_order", "h"):
            if meta.get(key) != expected[key]:
                raise ConfigError(
                    f"scheme mismatch: model {key}={meta.get(key)!r}, config {key}={expected[key]!r}"
                )
    if net.layer_dims[0] != cfg.layer_dims[0] or net.layer_dims[-1] != cfg.layer_dims[-1]:
        raise ConfigError(f"model dims {net.layer_dims} do not fit system {cfg.system_name!r}")
    return net


def _load_threshold(cfg: RunConfig) -> HybridConfig:
    path = cfg.run_dir / "threshold.json"
    if not path.exists():
        raise ConfigError(f"threshold file not found: {path}; run 'nnrk calibrate' first")
    data = json.loads(path.read_text())
    return HybridConfig(
        atol=data["atol"],
        rtol=data["rtol"],
        kappa=data["kappa"],
        delta_max=data["delta_max"],
        norm_kind=data["norm_kind"],
    )


def cmd_generate(cfg: RunConfig, args) -> int:
    if not cfg.train_params or not cfg.validation_params:
        raise ConfigError("params: both training and validation parameters are required")
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    sys_, tab = cfg.system, cfg.tableau
    train_path, val_path = _dataset_paths(cfg)
    for params, path in ((cfg.train_params, train_path), (cfg.validation_params, val_path)):
        ds = build_dataset(sys_, tab, params, cfg.x0, cfg.h, cfg.t_end, cfg.h_ref)
        save_dataset(ds, path)
        print(f"wrote {path} ({len(ds)} rows)")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    train_path, val_path = _dataset_paths(cfg)
    train_set, val_set = load_dataset(train_path), load_dataset(val_path)
    scheme = cfg.scheme()
    for ds in (train_set, val_set):
        if ds.system != cfg.system_name or ds.tableau != cfg.tableau_name or ds.h != cfg.h:
            raise ConfigError(
                f"dataset scheme ({ds.system}, {ds.tableau}, h={ds.h!r}) does not match config"
            )
    net = mlp_new(cfg.layer_dims, cfg.net_seed)
    result = train(net, train_set, val_set, cfg.training)
    model_path = _model_path(cfg, args.model)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(result.net, model_path)
    _write_json(_meta_path(model_path), scheme)
    hist_path = cfg.run_dir / "history.csv"
    write_history_csv(result.history, hist_path)
    print(f"wrote {model_path} (final validation loss {result.final_val_loss:.6g})")
    return EXIT_OK


def cmd_calibrate(cfg: RunConfig, args) -> int:
    net = _load_checked_model(cfg, _model_path(cfg, args.model))
    train_path, _ = _dataset_paths(cfg)
    ds = load_dataset(train_path)
    pair = embedded_pair_for(cfg.tableau_name)
    hyb = cfg.hybrid
    delta_max = calibrate_delta_max(net, ds, cfg.system, pair, hyb)
    out = cfg.run_dir / "threshold.json"
    _write_json(
        out,
        {
            "delta_max": delta_max,
            "kappa": hyb.kappa,
            "atol": hyb.atol.tolist(),
            "rtol": hyb.rtol.tolist(),
            "norm_kind": hyb.norm_kind,
            "pair": pair.name,
            "system": cfg.system_name,
            "h": cfg.h,
        },
    )
    print(f"wrote {out} (delta_max {delta_max:.6g})")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    mode = args.mode
    if mode not in MODES:
        raise ConfigError(f"--mode must be one of {list(MODES)}, got {mode!r}")
    sys_ = cfg.system
    params = cfg.test_params or cfg.train_params
    if not params and sys_.param_dim:
        raise ConfigError("params: no parameter vector to simulate; set 'simulate_params'")
    p = params[0] if params else np.zeros(0)
    n = cfg.n_steps
    tab = cfg.tableau
    records = None
    if mode == "plain":
        traj = integrate(sys_, tab, cfg.x0, p, cfg.h, n)
    elif mode == "richardson":
        traj = richardson_integrate(sys_, tab, cfg.x0, p, cfg.h, n)
    elif mode == "reference":
        traj = reference_integrate(sys_, cfg.x0, p, cfg.h_ref, cfg.t_end, h_out=cfg.h)
    else:
        net = _load_checked_model(cfg, _model_path(cfg, args.model))
        if mode == "enhanced":
            traj = enhanced_integrate(sys_, tab, net, cfg.x0, p, cfg.h, n)
        else:
            hyb = _load_threshold(cfg)
            pair = embedded_pair_for(cfg.tableau_name)
            traj, records = hybrid_integrate(sys_, pair, net, cfg.x0, p, cfg.h, n, hyb)
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.run_dir / f"trajectory_{mode}.csv"
    write_trajectory_csv(traj, out)
    print(f"wrote {out}")
    if records is not None:
        rep = cfg.run_dir / "hybrid_steps.csv"
        write_hybrid_report(records, rep)
        print(f"wrote {rep}")
    return EXIT_OK


def _bench_solvers(cfg: RunConfig, args) -> list[Solver]:
    net = hyb = None
    solvers = []
    for s in cfg.bench.solvers:
        tab = get_tableau(s.tableau)
        if s.kind in ("enhanced", "hybrid") and s.tableau != cfg.tableau_name:
            raise ConfigError(
                f"bench solver {s.label!r} uses tableau {s.tableau!r}, the model was trained for {cfg.tableau_name!r}"
            )
        if s.kind in ("enhanced", "hybrid") and net is None:
            net = _load_checked_model(cfg, _model_path(cfg, args.model))
        if s.kind == "hybrid" and hyb is None:
            hyb = _load_threshold(cfg)
        uses_net = s.kind in ("enhanced", "hybrid")
        solvers.append(Solver(s.label, s.kind, tab, net if uses_net else None, hyb if s.kind == "hybrid" else None))
    return solvers


def cmd_bench(cfg: RunConfig, args) -> int:
    if cfg.bench is None:
        raise ConfigError("config has no 'bench' section")
    b = cfg.bench
    spec = SweepSpec(
        sys=cfg.system,
        solvers=_bench_solvers(cfg, args),
        h_values=b.h_values,
        x0=cfg.x0,
        t_end=cfg.t_end,
        h_ref=cfg.h_ref,
        n_params=b.n_params,
        seed=b.seed,
        param_interval=b.param_interval,
        ood_interval=b.ood_interval,
        ood_fraction=b.ood_fraction,
        timing_calls=b.timing_calls,
    )
    # time each solver once; both sweeps share the cost models
    spec.costs = {
        s.label: measure_cost(spec.sys, s.net, s.tab, kind=s.kind, n_calls=b.timing_calls)
        for s in spec.solvers
    }
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    n_ok = 0
    results = [("benchmark", sweep(spec))]
    if b.ood_interval is not None or cfg.system.ood_interval:
        results.append(("benchmark_ood", out_of_distribution_sweep(spec)))
    for stem, res in results:
        write_metrics_csv(res.runs, cfg.run_dir / f"{stem}.csv")
        write_summary_json(res, cfg.run_dir / f"{stem}_summary.json")
        n_ok += sum(r.ok for r in res.runs)
        print(f"wrote {cfg.run_dir / (stem + '.csv')} ({len(res.runs)} runs)")
    if n_ok == 0:
        print("error: every benchmark run failed", file=sys.stderr)
        return EXIT_BENCH_FAILED
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nnrk", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="JSON run configuration")
        cmd.add_argument("--model", help="model file (default: <run dir>/model.json)")
        cmd.add_argument("--out", help="parent output directory (overrides output_dir)")
        if name == "simulate":
            cmd.add_argument("--mode", default="plain", choices=MODES)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.out)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ModelFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrationError as err:
        where = "" if err.step is None else f" (last valid step index {err.step})"
        print(f"error: {err}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except TrainingError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except NnrkError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
