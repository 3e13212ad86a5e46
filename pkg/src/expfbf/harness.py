"""Experiment drivers, configuration and result tables.

Two experiments are provided:

``mg-denoise``
    expFBF denoising of a noisy Mackey-Glass series with delay-embedded
    inputs, trained over random batches and evaluated on an independent
    test segment with frozen weights.
``nls-reconstruct``
    DMD, three observable-lifted Koopman models and expFBF on snapshots of
    the nonlinear Schrodinger equation.

Every experiment is a pure function of its configuration; all randomness
is derived from the configured seed through ``numpy.random.SeedSequence``.
"""
import concurrent.futures
import csv
import dataclasses
import hashlib
import json
import math
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .dynamics import MgParams, NlsConfig, add_awgn, mackey_glass, nls_simulate
from .errors import InvalidInputError, NumericFailure, RankDeficiencyError
from .fbf import FilterConfig, init_filter, run_sequence
from .features import TaylorFeatureMap, make_gq_map
from .koopman import (
    ObservableSet,
    fit_observables,
    lift,
    numerical_rank,
    predict_states,
    reconstruction_mse,
    spectra,
    write_spectra_csv,
)

EXPERIMENTS = ("mg-denoise", "nls-reconstruct")
KOOPMAN_METHODS = ("dmd", "g_k1", "g_k2", "g_gq")
NLS_METHODS = KOOPMAN_METHODS + ("expfbf",)
OBSERVABLE_KIND = {"dmd": "identity", "g_k1": "cubic", "g_k2": "quadratic", "g_gq": "gq"}

MG_FILTER_DEFAULTS = {
    "n_x": 5,
    "r": 4,
    "a_s": 0.6,
    "a_u": 1.8,
    "sigma_s2": 0.09,
    "sigma_y2": 0.09,
    "sigma_omega": 0.0,
    "p4_init": 10.0,
    "kappa1": 0.4,
    "kappa2": 0.1,
    "layout": "per-state-block",
}
NLS_FILTER_DEFAULTS = {
    "sigma_s": 0.01,
    "sigma_y": 0.01,
    "p4_init": 1.0,
    "kappa1": 1.0,
    "kappa2": 1.0,
    "layout": "per-state-block",
}
NLS_FEATURE_DEFAULTS = {"n_features": 128, "sigma": 1.0, "R": 5, "seed": 0}


@dataclass
class ExperimentConfig:
    experiment: str
    dataset: dict = field(default_factory=dict)
    filter: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    baselines: list = field(default_factory=list)
    rank: int = 10
    ensemble: int = 1
    batches: int = 10
    batch_steps: int = 100
    test_steps: int = 100
    embed: int = 7
    snr_db: float = 10.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise InvalidInputError(f"experiment must be one of {EXPERIMENTS}")
        unknown = set(self.baselines) - set(NLS_METHODS)
        if unknown:
            raise InvalidInputError(f"unknown methods {sorted(unknown)}")
        for name in ("rank", "ensemble", "batches", "batch_steps", "embed", "workers"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be at least 1")
        if not isinstance(self.seed, int):
            raise InvalidInputError("seed must be an explicit integer")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise InvalidInputError(f"unknown config fields {sorted(unknown)}")
        return cls(**data)

    def hash(self):
        return config_hash(self.to_dict())


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def mg_config(paper_scale=False, **overrides):
    """Mackey-Glass denoising preset (10 runs, or 50 with ``paper_scale``)."""
    cfg = dict(
        experiment="mg-denoise",
        dataset=asdict(MgParams()),
        filter=dict(MG_FILTER_DEFAULTS),
        ensemble=50 if paper_scale else 10,
    )
    cfg.update(overrides)
    return ExperimentConfig(**cfg)


NLS_CASES = {
    "short": {"c": 2.0, "m": 21, "rank": 10},
    "long": {"c": 2.0, "m": 101, "rank": 10},
    "unstable": {"c": 3.1, "m": 101, "rank": 30},
}


def nls_config(case="short", **overrides):
    if case not in NLS_CASES:
        raise InvalidInputError(f"NLS case must be one of {sorted(NLS_CASES)}")
    spec = NLS_CASES[case]
    cfg = dict(
        experiment="nls-reconstruct",
        dataset={"c": spec["c"], "m": spec["m"], "T": math.pi},
        filter=dict(NLS_FILTER_DEFAULTS),
        features=dict(NLS_FEATURE_DEFAULTS),
        baselines=list(NLS_METHODS),
        rank=spec["rank"],
    )
    cfg.update(overrides)
    return ExperimentConfig(**cfg)


class ResultTable:
    """Rows of named values plus ensemble statistics over a run column.

    Standard deviations are population values (``ddof = 0``).
    """

    def __init__(self, columns, rows=None):
        self.columns = list(columns)
        self.rows = []
        for row in rows or []:
            self.add(row)

    def add(self, row):
        missing = [c for c in self.columns if c not in row]
        if missing:
            raise InvalidInputError(f"row lacks columns {missing}")
        self.rows.append({c: row[c] for c in self.columns})

    def column(self, name):
        return [r[name] for r in self.rows]

    def aggregate(self, key, values, run_column="run", expected_runs=None):
        """Mean and std of ``values`` per distinct ``key``, in first-seen order."""
        groups = {}
        for r in self.rows:
            groups.setdefault(r[key], []).append(r)
        out = ResultTable([key, "n_runs"] + [f"{v}_{s}" for v in values for s in ("mean", "std")])
        for k, rows in groups.items():
            runs = {r[run_column] for r in rows}
            if expected_runs is not None and len(runs) != expected_runs:
                raise InvalidInputError(f"{key}={k}: {len(runs)} runs, expected {expected_runs}")
            entry = {key: k, "n_runs": len(rows)}
            for v in values:
                arr = np.array([r[v] for r in rows], dtype=float)
                entry[f"{v}_mean"] = float(arr.mean())
                entry[f"{v}_std"] = float(arr.std())
            out.add(entry)
        return out

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.columns])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _member_seeds(seed, j):
    """Independent integer seeds for ensemble member ``j``."""
    ss = np.random.SeedSequence([seed, j])
    noise, test_noise, weights, batches = ss.generate_state(4)
    return {"noise": int(noise), "test_noise": int(test_noise),
            "filter": int(weights), "batches": int(batches)}


def _delay_inputs(series, start, stop, embed):
    """``u_i = (y_{i-1}, ..., y_{i-embed})`` for ``i`` in ``[start, stop)``."""
    return [series[i - embed : i][::-1] for i in range(start, stop)]


def mg_filter_config(fcfg, embed, seed):
    f = {**MG_FILTER_DEFAULTS, **fcfg}
    n_x, r = int(f["n_x"]), int(f["r"])
    return FilterConfig(
        n_x=n_x,
        n_y=1,
        n_u=embed,
        state_map=TaylorFeatureMap.from_kernel_parameter(n_x, r, f["a_s"]),
        input_map=TaylorFeatureMap.from_kernel_parameter(embed, r, f["a_u"]),
        sigma_s=math.sqrt(f["sigma_s2"]),
        sigma_y=math.sqrt(f["sigma_y2"]),
        sigma_omega=f["sigma_omega"],
        p4_init=f["p4_init"],
        kappa1=f["kappa1"],
        kappa2=f["kappa2"],
        layout=f["layout"],
        seed=seed,
    )


def _mg_member(args):
    cfg, j, clean_train, clean_test = args
    seeds = _member_seeds(cfg.seed, j)
    noisy, _ = add_awgn(clean_train, cfg.snr_db, seeds["noise"])
    fcfg = mg_filter_config(cfg.filter, cfg.embed, seeds["filter"])
    model = init_filter(fcfg)
    rng = np.random.default_rng(seeds["batches"])
    n, L, e = len(clean_train), cfg.batch_steps, cfg.embed
    if n - L < e:
        raise InvalidInputError("training series too short for the batch schedule")
    rows = []
    for it in range(cfg.batches):
        start = int(rng.integers(e, n - L + 1))
        model.s = np.zeros(fcfg.n_s)
        try:
            _, reps = run_sequence(model, _delay_inputs(noisy, start, start + L, e),
                                   noisy[start : start + L], clean_train[start : start + L])
        except NumericFailure as exc:
            raise NumericFailure(f"run {j}, batch {it + 1}: {exc}", index=exc.index) from exc
        rows.append(_mg_row(j, cfg.seed, it + 1, start, reps,
                            noisy[start : start + L], clean_train[start : start + L]))

    # Test: independent noise on the continuation, weights frozen.
    test_noisy, _ = add_awgn(clean_test, cfg.snr_db, seeds["test_noise"])
    model.config = dataclasses.replace(fcfg, kappa2=0.0)
    model.s = np.zeros(fcfg.n_s)
    m = len(clean_test)
    try:
        _, reps = run_sequence(model, _delay_inputs(test_noisy, e, m, e),
                               test_noisy[e:], clean_test[e:])
    except NumericFailure as exc:
        raise NumericFailure(f"run {j}, test: {exc}", index=exc.index) from exc
    rows.append(_mg_row(j, cfg.seed, "test", e, reps, test_noisy[e:], clean_test[e:]))
    return rows


def _mg_row(run, seed, iteration, start, reps, noisy, clean):
    return {
        "run": run,
        "seed": seed,
        "iteration": iteration,
        "start": start,
        "prior_mse": float(np.mean([r.prior_se for r in reps])),
        "posterior_mse": float(np.mean([r.posterior_se for r in reps])),
        "noise_mse": float(np.mean((np.asarray(noisy) - clean) ** 2)),
    }


MG_COLUMNS = ["run", "seed", "iteration", "start", "prior_mse", "posterior_mse", "noise_mse"]


def run_mg_denoise(config, out_dir=None):
    """Ensemble expFBF denoising; returns ``(runs, summary)`` ResultTables.

    MSE is measured against the clean signal. Training data are the first
    ``N`` samples; the test segment is the continuation of the same
    trajectory (``embed`` warm-up samples plus ``test_steps``) with its own
    noise draw.
    """
    cfg = config
    if cfg.experiment != "mg-denoise":
        raise InvalidInputError("not an mg-denoise configuration")
    t0 = time.perf_counter()
    params = MgParams(**cfg.dataset)
    total = MgParams(**{**cfg.dataset, "N": params.N + cfg.embed + cfg.test_steps})
    series = mackey_glass(total).clean
    clean_train, clean_test = series[: params.N], series[params.N :]

    jobs = [(cfg, j, clean_train, clean_test) for j in range(cfg.ensemble)]
    if cfg.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_mg_member, jobs))
    else:
        results = [_mg_member(job) for job in jobs]

    runs = ResultTable(MG_COLUMNS)
    for rows in results:
        for row in rows:
            runs.add(row)
    summary = runs.aggregate("iteration", ["prior_mse", "posterior_mse", "noise_mse"],
                             expected_runs=cfg.ensemble)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        runs.write_csv(out / "runs.csv")
        summary.write_csv(out / "mse.csv")
        write_manifest(out, cfg.to_dict(), ["runs.csv", "mse.csv"], t0,
                       seeds=[_member_seeds(cfg.seed, j) for j in range(cfg.ensemble)])
    return runs, summary


def nls_filter_config(fcfg, feature_map, seed):
    f = {**NLS_FILTER_DEFAULTS, **fcfg}
    return FilterConfig(
        n_x=feature_map.input_dim,
        n_y=feature_map.input_dim,
        mode="concat",
        state_map=feature_map,
        sigma_s=f["sigma_s"],
        sigma_y=f["sigma_y"],
        sigma_omega=f.get("sigma_omega", 0.0),
        p4_init=f["p4_init"],
        kappa1=f["kappa1"],
        kappa2=f["kappa2"],
        layout=f["layout"],
        seed=seed,
    )


@dataclass
class NlsResult:
    times: np.ndarray
    truth: np.ndarray
    reconstructions: dict
    per_time: dict
    totals: ResultTable
    spectra: dict


def run_nls_reconstruct(config, out_dir=None):
    """Fit the Koopman baselines and run expFBF on NLS snapshots.

    Koopman models are fitted on all pairs of complex snapshots and
    reconstruct the trajectory open loop from the first one; the real part
    is compared with the real-part truth. expFBF starts from the
    first snapshot and filters the rest; its reconstruction is the
    a posteriori estimate, and the one-step prior is reported alongside as
    ``expfbf_prior``. A method whose lifted data have numerical rank below
    the requested rank is fitted at its numerical rank; the rank used is
    recorded in the totals table.
    """
    cfg = config
    if cfg.experiment != "nls-reconstruct":
        raise InvalidInputError("not an nls-reconstruct configuration")
    t0 = time.perf_counter()
    ds = nls_simulate(NlsConfig(**cfg.dataset))
    X = ds.snapshot_matrix()
    Z = ds.complex_snapshot_matrix()
    n, m = X.shape
    feat = {**NLS_FEATURE_DEFAULTS, **cfg.features}
    gq = make_gq_map(n, int(feat["n_features"]), float(feat["sigma"]), feat.get("R"),
                     int(feat["seed"]))
    methods = cfg.baselines or list(NLS_METHODS)

    recon, per_time, specs = {}, {}, {}
    totals = ResultTable(["method", "total_mse", "rank", "max_abs_eigenvalue",
                          "unstable_eigenvalues", "final_over_initial", "final_over_median"])
    for name in methods:
        if name == "expfbf":
            continue
        obs = ObservableSet(OBSERVABLE_KIND[name], gq if name == "g_gq" else None)
        Y = lift(Z, obs)
        r = min(cfg.rank, numerical_rank(Y[:, :-1]))
        if r < 1:
            raise RankDeficiencyError(f"{name}: lifted snapshots have rank 0")
        model = fit_observables(Z, obs, r, ds.dt)
        recon[name] = predict_states(model, m - 1)
        per_time[name], total = reconstruction_mse(recon[name], X)
        specs[name] = spectra(model)
        lam = np.abs(model.eigenvalues)
        totals.add(_totals_row(name, total, r, float(lam.max()),
                               int(specs[name].unstable().sum()), per_time[name]))

    if "expfbf" in methods:
        fcfg = nls_filter_config(cfg.filter, gq, cfg.seed)
        model = init_filter(fcfg)
        model.set_state(X[:, 0])
        _, reps = run_sequence(model, None, X[:, 1:].T, X[:, 1:].T)
        post = np.column_stack([X[:, 0]] + [r.posterior_output for r in reps])
        prior = np.column_stack([X[:, 0]] + [r.prior_output for r in reps])
        recon["expfbf"] = post
        recon["expfbf_prior"] = prior
        per_time["expfbf"], total = reconstruction_mse(post, X)
        per_time["expfbf_prior"], total_prior = reconstruction_mse(prior, X)
        totals.add(_totals_row("expfbf", total, "", "", "", per_time["expfbf"]))
        totals.add(_totals_row("expfbf_prior", total_prior, "", "", "",
                               per_time["expfbf_prior"]))

    result = NlsResult(ds.times, X, recon, per_time, totals, specs)
    if out_dir is not None:
        _write_nls(result, cfg, Path(out_dir), t0)
    return result


def _totals_row(name, total, rank, max_abs, unstable, per_time):
    pt = np.asarray(per_time)
    med = float(np.median(pt))
    return {
        "method": name,
        "total_mse": float(total),
        "rank": rank,
        "max_abs_eigenvalue": max_abs,
        "unstable_eigenvalues": unstable,
        "final_over_initial": float(pt[-1] / pt[0]) if pt[0] > 0 else math.inf,
        "final_over_median": float(pt[-1] / med) if med > 0 else math.inf,
    }


def _write_nls(result, cfg, out, t0):
    out.mkdir(parents=True, exist_ok=True)
    files = ["mse.csv", "totals.csv"]
    mse = ResultTable(["time", *result.per_time])
    for i, t in enumerate(result.times):
        mse.add({"time": float(t), **{k: float(v[i]) for k, v in result.per_time.items()}})
    mse.write_csv(out / "mse.csv")
    result.totals.write_csv(out / "totals.csv")
    for name, spec in result.spectra.items():
        write_spectra_csv(spec, out / f"spectra_{name}.csv")
        files.append(f"spectra_{name}.csv")
    for name, R in result.reconstructions.items():
        _write_matrix(out / f"recon_{name}.csv", result.times, R)
        files.append(f"recon_{name}.csv")
    _write_matrix(out / "recon_truth.csv", result.times, result.truth)
    files.append("recon_truth.csv")
    write_manifest(out, cfg.to_dict(), files, t0, seeds=[cfg.seed])


def _write_matrix(path, times, M):
    """Rows are times, columns are grid points."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *(f"x{i}" for i in range(M.shape[0]))])
        for k, t in enumerate(times):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in np.real(M[:, k]))])


def write_manifest(out_dir, config, outputs, t0=None, seeds=None, extra=None):
    manifest = {
        "config": config,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "outputs": sorted(outputs),
        "versions": {
            "expfbf": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "argv": sys.argv[1:],
        "wall_time_s": None if t0 is None else time.perf_counter() - t0,
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
    return path


def _json_default(obj):
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def run_experiment(config, out_dir=None):
    if config.experiment == "mg-denoise":
        return run_mg_denoise(config, out_dir)
    return run_nls_reconstruct(config, out_dir)
