"""Ground-truth generators: Mackey-Glass, nonlinear Schrodinger, AWGN."""
import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericFailure
from .numerics import fft, ifft, is_power_of_two


@dataclass(frozen=True)
class MgParams:
    beta: float = 0.2
    gamma: float = 0.1
    tau: float = 30.0
    n: float = 10.0
    dt: float = 6.0
    y0: float = 0.9
    N: int = 1000
    substeps: int = 10

    def __post_init__(self):
        if self.dt <= 0 or self.tau < 0 or self.N < 1 or self.substeps < 1:
            raise InvalidInputError(f"invalid Mackey-Glass parameters {self}")


PAPER_MG = MgParams()


@dataclass(frozen=True)
class NlsConfig:
    c: float = 2.0
    m: int = 21
    T: float = math.pi
    L: float = 15.0
    grid: int = 256
    out_grid: int = 32
    substeps: int | None = None

    def __post_init__(self):
        if not is_power_of_two(self.grid) or not is_power_of_two(self.out_grid):
            raise InvalidInputError("NLS grids must be powers of two")
        if self.grid % self.out_grid:
            raise InvalidInputError("output grid must divide the solver grid")
        if self.m < 2 or self.T <= 0:
            raise InvalidInputError("need at least two snapshots over a positive horizon")

    @property
    def total_substeps(self):
        if self.substeps is not None:
            return int(self.substeps)
        return max(int(math.ceil(2000 * self.T / math.pi)), self.m - 1)


@dataclass
class TrajectoryDataset:
    """Uniformly sampled trajectory; rows of ``clean`` / ``noisy`` are time steps."""

    times: np.ndarray
    clean: np.ndarray
    dt: float
    noisy: np.ndarray | None = None
    snr_db: float | None = None
    noise_seed: int | None = None
    params: dict = field(default_factory=dict)
    complex_states: np.ndarray | None = None
    grid: np.ndarray | None = None

    def __post_init__(self):
        if len(self.times) != len(self.clean):
            raise InvalidInputError("times and states differ in length")
        if (self.noisy is None) != (self.snr_db is None):
            raise InvalidInputError("SNR metadata must accompany noisy states")
        if self.noisy is not None and np.shape(self.noisy) != np.shape(self.clean):
            raise InvalidInputError("noisy and clean states differ in shape")

    def with_noise(self, snr_db, seed):
        noisy, achieved = add_awgn(self.clean, snr_db, seed)
        params = dict(self.params, achieved_snr_db=achieved)
        return TrajectoryDataset(self.times, self.clean, self.dt, noisy, snr_db, seed,
                                 params, self.complex_states, self.grid)

    def snapshot_matrix(self):
        """Columns are snapshots (space x time)."""
        return np.asarray(self.clean).reshape(len(self.times), -1).T

    def complex_snapshot_matrix(self):
        """Complex field on the output grid, space x time (NLS datasets only)."""
        if self.complex_states is None or self.grid is None:
            raise InvalidInputError("dataset carries no complex field")
        stride = self.complex_states.shape[1] // len(self.grid)
        return self.complex_states[:, ::stride].T.copy()


def mackey_glass(params=PAPER_MG):
    """Integrate ``y' = beta y(t-tau) / (1 + y(t-tau)^n) - gamma y`` by RK4.

    The internal step is ``dt / substeps``. Delayed values come from linear
    interpolation on the stored fine-grid history; before ``t = 0`` the
    history is the constant ``y0``. Delay points not yet computed (only
    possible when ``tau`` is shorter than a substep) use the latest value.
    """
    p = params
    h = p.dt / p.substeps
    total = (p.N - 1) * p.substeps
    hist = np.empty(total + 1)
    hist[0] = p.y0

    def delayed(t, last):
        if t <= 0.0:
            return p.y0
        pos = t / h
        j = int(math.floor(pos))
        if j >= last:
            return hist[last]
        frac = pos - j
        return hist[j] * (1.0 - frac) + hist[j + 1] * frac

    def rhs(y, yd):
        return p.beta * yd / (1.0 + yd**p.n) - p.gamma * y

    y = p.y0
    for j in range(total):
        t = j * h
        d0 = delayed(t - p.tau, j)
        dh = delayed(t + 0.5 * h - p.tau, j)
        d1 = delayed(t + h - p.tau, j)
        k1 = rhs(y, d0)
        k2 = rhs(y + 0.5 * h * k1, dh)
        k3 = rhs(y + 0.5 * h * k2, dh)
        k4 = rhs(y + h * k3, d1)
        y = y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        if not abs(y) <= 1e6:
            raise NumericFailure(f"Mackey-Glass integration diverged at t = {t + h}", index=j)
        hist[j + 1] = y
    series = hist[:: p.substeps].copy()
    times = np.arange(p.N) * p.dt
    return TrajectoryDataset(times, series, p.dt, params={"system": "mackey-glass", **asdict(p)})


def add_awgn(x, snr_db, seed):
    """Add white Gaussian noise at the requested SNR (power = mean square).

    Returns ``(noisy, achieved_snr_db)``. ``snr_db = inf`` returns a copy.
    """
    x = np.asarray(x, dtype=float)
    if math.isinf(snr_db) and snr_db > 0:
        return x.copy(), math.inf
    power = float(np.mean(x**2))
    if power == 0.0:
        raise InvalidInputError("cannot set an SNR for a zero-power signal")
    variance = power / 10 ** (snr_db / 10)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, math.sqrt(variance), size=x.shape)
    achieved = 10 * math.log10(power / float(np.mean(noise**2)))
    return x + noise, achieved


def nls_grid(cfg):
    dx = 2 * cfg.L / cfg.grid
    return -cfg.L + dx * np.arange(cfg.grid)


def _nls_integrate(cfg, substeps_total):
    x = nls_grid(cfg)
    dx = x[1] - x[0]
    k = 2 * np.pi * np.fft.fftfreq(cfg.grid, d=dx)
    lin = -0.5j * k**2
    u0 = cfg.c / np.cosh(x)
    norm0 = np.linalg.norm(u0)
    per_snap = int(math.ceil(substeps_total / (cfg.m - 1)))
    h = cfg.T / ((cfg.m - 1) * per_snap)

    def rhs(v):
        u = ifft(v)
        return lin * v + 1j * fft(np.abs(u) ** 2 * u)

    v = fft(u0.astype(complex))
    snaps = [u0.astype(complex)]
    for j in range(1, cfg.m):
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(per_snap):
                k1 = rhs(v)
                k2 = rhs(v + 0.5 * h * k1)
                k3 = rhs(v + 0.5 * h * k2)
                k4 = rhs(v + h * k3)
                v = v + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
                if not np.linalg.norm(v) <= 1e3 * norm0 * math.sqrt(cfg.grid):
                    break
        u = ifft(v) if np.all(np.isfinite(v)) else v
        if not np.linalg.norm(u) <= 10 * norm0:
            raise NumericFailure(
                f"NLS solution blew up before snapshot {j}; use more substeps", index=j
            )
        snaps.append(u)
    return x, np.array(snaps), per_snap * (cfg.m - 1)


def nls_simulate(cfg=NlsConfig(), max_doublings=3):
    """Pseudo-spectral RK4 solution of ``i u_t + u_xx / 2 + |u|^2 u = 0``.

    Periodic box ``[-L, L)``, initial data ``c sech(x)``, ``m`` snapshots on
    ``[0, T]``. The returned dataset holds the real part on the output grid
    in ``clean`` and the full complex fine-grid field in ``complex_states``.
    The substep count doubles automatically on blow-up.
    """
    substeps = cfg.total_substeps
    for attempt in range(max_doublings + 1):
        try:
            x, snaps, used = _nls_integrate(cfg, substeps)
            break
        except NumericFailure:
            if attempt == max_doublings:
                raise
            substeps *= 2
    stride = cfg.grid // cfg.out_grid
    times = np.linspace(0.0, cfg.T, cfg.m)
    return TrajectoryDataset(
        times,
        np.real(snaps[:, ::stride]).copy(),
        float(times[1] - times[0]),
        params={"system": "nls", **asdict(cfg), "substeps_used": used},
        complex_states=snaps,
        grid=x[::stride].copy(),
    )


def write_dataset(ds, csv_path, sidecar_path=None):
    """CSV (time, then state coordinates; noisy values when present) + JSON sidecar."""
    states = ds.noisy if ds.noisy is not None else ds.clean
    states = np.asarray(states).reshape(len(ds.times), -1)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *(f"x{i}" for i in range(states.shape[1]))])
        for t, row in zip(ds.times, states):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in row)])
    if sidecar_path is not None:
        meta = {
            "params": _jsonable(ds.params),
            "dt": ds.dt,
            "snr_db": ds.snr_db,
            "noise_seed": ds.noise_seed,
            "columns": "noisy" if ds.noisy is not None else "clean",
        }
        if ds.noisy is not None:
            clean_path = str(csv_path).rsplit(".", 1)[0] + "_clean.csv"
            write_dataset(TrajectoryDataset(ds.times, ds.clean, ds.dt), clean_path)
            meta["clean_csv"] = clean_path.rsplit("/", 1)[-1]
        with open(sidecar_path, "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def read_dataset_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    times = data[:, 0]
    states = data[:, 1:]
    if states.shape[1] == 1:
        states = states[:, 0]
    dt = float(times[1] - times[0]) if len(times) > 1 else 1.0
    return TrajectoryDataset(times, states, dt)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
