"""Command-line entry point: ``python -m expfbf <command> ...``.

Exit status is 0 on success, 1 on usage or input errors (including a
missing config file) and 2 on numerical failure. Every command writes its
outputs, plus ``manifest.json``, under ``--out-dir``.
"""
import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import harness
from .dynamics import MgParams, NlsConfig, mackey_glass, nls_simulate, read_dataset_csv, write_dataset
from .errors import CapacityError, ExpFBFError, InvalidInputError, NumericFailure
from .fbf import FilterConfig, covariance_health, init_filter, load_model, run_sequence, save_model
from .features import enumerate_multi_indices, map_from_dict, map_to_dict
from .koopman import (
    ObservableSet,
    fit_observables,
    model_from_dict,
    model_to_dict,
    predict_states,
    spectra,
    write_spectra_csv,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _out(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args):
    t0 = time.perf_counter()
    cfg = _read_json(args.config) if args.config else {}
    out = _out(args)
    if args.system == "mg":
        params = MgParams(**{k: v for k, v in cfg.items() if k != "snr_db"})
        ds = mackey_glass(params)
        snr = cfg.get("snr_db", args.snr_db)
        if snr is not None:
            ds = ds.with_noise(float(snr), args.seed)
        name = "mg"
    else:
        ds = nls_simulate(NlsConfig(**cfg))
        name = "nls"
    write_dataset(ds, out / f"{name}.csv", out / f"{name}.json")
    files = [f"{name}.csv", f"{name}.json"]
    if ds.noisy is not None:
        files.append(f"{name}_clean.csv")
    harness.write_manifest(out, {"command": f"gen {args.system}", **cfg}, files, t0,
                           seeds=[args.seed])
    print(out / f"{name}.csv")


def _filter_config(desc, seed):
    desc = dict(desc)
    desc.setdefault("seed", seed)
    return FilterConfig.from_dict(desc) if "state_map" in desc else None


def cmd_filter_run(args):
    """Run a filter over a dataset CSV (a column vector or snapshot rows)."""
    t0 = time.perf_counter()
    cfg = _read_json(args.config)
    out = _out(args)
    data = read_dataset_csv(cfg["data"] if args.data is None else args.data)
    embed = cfg.get("embed")
    fcfg = _filter_config(cfg["filter"], args.seed)
    if fcfg is None:
        raise InvalidInputError("filter config needs a state_map descriptor")
    model = init_filter(fcfg)
    Y = np.asarray(data.clean, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if embed:
        e = int(embed)
        series = Y[:, 0]
        inputs = [series[i - e : i][::-1] for i in range(e, len(series))]
        meas = Y[e:]
        times = data.times[e:]
    else:
        inputs, meas, times = None, Y, data.times
        if fcfg.mode == "concat":
            model.set_state(Y[0])
            inputs, meas, times = None, Y[1:], data.times[1:]
    _, reps = run_sequence(model, inputs, meas)
    table = harness.ResultTable(["time", "output", "prior", "posterior"])
    for t, d, r in zip(times, meas, reps):
        for k in range(d.size):
            table.add({"time": float(t), "output": k, "prior": float(r.prior_output[k]),
                       "posterior": float(r.posterior_output[k])})
    table.write_csv(out / "estimates.csv")
    save_model(model, out / "model.bin")
    harness.write_manifest(out, cfg, ["estimates.csv", "model.bin"], t0, seeds=[args.seed])
    print(out / "estimates.csv")


def _snapshots(path):
    ds = read_dataset_csv(path)
    X = np.asarray(ds.clean, dtype=float)
    return (X[None, :] if X.ndim == 1 else X.T), ds


def cmd_dmd_fit(args):
    t0 = time.perf_counter()
    out = _out(args)
    X, ds = _snapshots(args.data)
    fm = None
    if args.observables == "gq":
        fm = map_from_dict({"type": "gq", "d": X.shape[0], "n_features": args.n_features,
                            "sigma": args.sigma, "seed": args.seed})
    obs = ObservableSet(args.observables, fm)
    model = fit_observables(X, obs, args.rank, ds.dt)
    with open(out / "dmd_model.json", "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)
    write_spectra_csv(spectra(model), out / "spectra.csv")
    conf = {"command": "dmd fit", "data": str(args.data), "rank": args.rank,
            "observables": args.observables}
    harness.write_manifest(out, conf, ["dmd_model.json", "spectra.csv"], t0, seeds=[args.seed])
    print(out / "dmd_model.json")


def cmd_koopman_predict(args):
    t0 = time.perf_counter()
    out = _out(args)
    with open(args.model, encoding="utf-8") as fh:
        model = model_from_dict(json.load(fh))
    pred = predict_states(model, args.steps)
    times = np.arange(args.steps + 1) * model.dt
    harness._write_matrix(out / "recon.csv", times, pred)
    harness.write_manifest(out, {"command": "koopman predict", "model": str(args.model),
                                 "steps": args.steps}, ["recon.csv"], t0)
    print(out / "recon.csv")


def cmd_experiment(args):
    if args.config:
        cfg = harness.ExperimentConfig.from_dict(_read_json(args.config))
    elif args.kind == "mg":
        cfg = harness.mg_config(paper_scale=args.paper_scale)
    else:
        cfg = harness.nls_config(args.case)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.paper_scale and cfg.experiment == "mg-denoise":
        cfg.ensemble = 50
    expected = "mg-denoise" if args.kind == "mg" else "nls-reconstruct"
    if cfg.experiment != expected:
        raise InvalidInputError(f"config is for {cfg.experiment}, not {expected}")
    harness.run_experiment(cfg, _out(args))
    print(Path(args.out_dir) / "manifest.json")


def cmd_model_save(args):
    t0 = time.perf_counter()
    out = _out(args)
    cfg = _read_json(args.config)
    fcfg = _filter_config(cfg.get("filter", cfg), args.seed)
    if fcfg is None:
        raise InvalidInputError("filter config needs a state_map descriptor")
    save_model(init_filter(fcfg), out / "model.bin")
    harness.write_manifest(out, cfg, ["model.bin"], t0, seeds=[args.seed])
    print(out / "model.bin")


def cmd_model_load(args):
    t0 = time.perf_counter()
    out = _out(args)
    model = load_model(args.path)
    asym1, asym4, min_eig = covariance_health(model)
    info = {
        "path": str(args.path),
        "step": model.step,
        "n_s": model.config.n_s,
        "dim_z": model.config.dim_z,
        "n_omega": model.config.n_omega,
        "layout": model.config.layout,
        "mode": model.config.mode,
        "P1_asymmetry": asym1,
        "P4_asymmetry": asym4,
        "P1_min_eigenvalue": min_eig,
    }
    with open(out / "model_info.json", "w", encoding="utf-8") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
    harness.write_manifest(out, {"command": "model load", "path": str(args.path)},
                           ["model_info.json"], t0)
    print(json.dumps(info, sort_keys=True))


def cmd_features_inspect(args):
    t0 = time.perf_counter()
    out = _out(args)
    if args.kind == "taylor":
        desc = {"type": "taylor", "d": args.d, "r": args.r}
        desc.update({"a": args.a} if args.a is not None else {"sigma": args.sigma})
    else:
        desc = {"type": "gq", "d": args.d, "n_features": args.n_features,
                "sigma": args.sigma, "seed": args.seed}
    fmap = map_from_dict(desc)
    info = {"descriptor": desc, "dim": fmap.dim, "input_dim": fmap.input_dim}
    if args.kind == "taylor":
        info["multi_indices"] = len(enumerate_multi_indices(args.d, args.r))
    with open(out / "features.json", "w", encoding="utf-8") as fh:
        json.dump({**info, "map": map_to_dict(fmap)}, fh)
    harness.write_manifest(out, {"command": "features inspect", **desc}, ["features.json"], t0)
    print(json.dumps(info, sort_keys=True))


def build_parser():
    p = _Parser(prog="expfbf", description=__doc__.splitlines()[0])
    common = _Parser(add_help=False)
    common.add_argument("--out-dir", default="out")
    common.add_argument("--seed", type=int, default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen", help="generate a dataset").add_subparsers(
        dest="system", required=True, parser_class=_Parser)
    g = gen.add_parser("mg", parents=[common])
    g.add_argument("--preset", choices=["paper"], default="paper")
    g.add_argument("--config")
    g.add_argument("--snr-db", type=float, default=None)
    g.set_defaults(func=cmd_gen)
    g = gen.add_parser("nls", parents=[common])
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen)

    flt = sub.add_parser("filter").add_subparsers(dest="action", required=True,
                                                  parser_class=_Parser)
    f = flt.add_parser("run", parents=[common])
    f.add_argument("--config", required=True)
    f.add_argument("--data")
    f.set_defaults(func=cmd_filter_run)

    dmd = sub.add_parser("dmd").add_subparsers(dest="action", required=True,
                                               parser_class=_Parser)
    d = dmd.add_parser("fit", parents=[common])
    d.add_argument("--data", required=True)
    d.add_argument("--rank", type=int, required=True)
    d.add_argument("--observables", choices=["identity", "cubic", "quadratic", "gq"],
                   default="identity")
    d.add_argument("--n-features", type=int, default=128)
    d.add_argument("--sigma", type=float, default=1.0)
    d.set_defaults(func=cmd_dmd_fit)

    kp = sub.add_parser("koopman").add_subparsers(dest="action", required=True,
                                                  parser_class=_Parser)
    k = kp.add_parser("predict", parents=[common])
    k.add_argument("--model", required=True)
    k.add_argument("--steps", type=int, required=True)
    k.set_defaults(func=cmd_koopman_predict)

    exp = sub.add_parser("experiment").add_subparsers(dest="kind", required=True,
                                                      parser_class=_Parser)
    for kind in ("mg", "nls"):
        e = exp.add_parser(kind)
        e.add_argument("--out-dir", default="out")
        e.add_argument("--seed", type=int, default=None)
        e.add_argument("--config")
        e.add_argument("--paper-scale", action="store_true")
        if kind == "nls":
            e.add_argument("--case", choices=sorted(harness.NLS_CASES), default="short")
        e.set_defaults(func=cmd_experiment)

    mdl = sub.add_parser("model").add_subparsers(dest="action", required=True,
                                                 parser_class=_Parser)
    m = mdl.add_parser("save", parents=[common])
    m.add_argument("--config", required=True)
    m.set_defaults(func=cmd_model_save)
    m = mdl.add_parser("load", parents=[common])
    m.add_argument("--path", required=True)
    m.set_defaults(func=cmd_model_load)

    ft = sub.add_parser("features").add_subparsers(dest="action", required=True,
                                                   parser_class=_Parser)
    i = ft.add_parser("inspect", parents=[common])
    i.add_argument("--kind", choices=["taylor", "gq"], default="taylor")
    i.add_argument("--d", type=int, required=True)
    i.add_argument("--r", type=int, default=4)
    i.add_argument("--a", type=float)
    i.add_argument("--sigma", type=float, default=1.0)
    i.add_argument("--n-features", type=int, default=128)
    i.set_defaults(func=cmd_features_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ExpFBFError, CapacityError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    return 0
