"""Exact DMD and observable-lifted Koopman baselines.

Snapshots are columns. An observable set lifts each column to a larger
vector whose leading block is always the original state, so a state
estimate is read back by slicing.
"""
import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, RankDeficiencyError
from .features import map_from_dict, map_to_dict
from .numerics import eig_general, svd

OBSERVABLE_KINDS = ("identity", "cubic", "quadratic", "gq")


@dataclass(frozen=True)
class ObservableSet:
    """``identity`` (plain DMD), ``cubic`` ``[x; |x|^2 x]``,
    ``quadratic`` ``[x; |x|^2]`` or ``gq`` ``[x; f(x)]`` with a Fourier map ``f``.
    """

    kind: str = "identity"
    feature_map: object = None

    def __post_init__(self):
        if self.kind not in OBSERVABLE_KINDS:
            raise InvalidInputError(f"unknown observable kind {self.kind!r}")
        if self.kind == "gq" and self.feature_map is None:
            raise InvalidInputError("gq observables need a feature map")

    def lifted_dim(self, n):
        if self.kind == "identity":
            return n
        if self.kind == "gq":
            return n + self.feature_map.dim
        return 2 * n

    def to_dict(self):
        fm = None if self.feature_map is None else map_to_dict(self.feature_map)
        return {"kind": self.kind, "feature_map": fm}

    @classmethod
    def from_dict(cls, data):
        fm = data.get("feature_map")
        return cls(data["kind"], None if fm is None else map_from_dict(fm))


def lift(X, obs):
    """Apply the observables column by column."""
    X = np.asarray(X)
    vector = X.ndim == 1
    if vector:
        X = X[:, None]
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("snapshots contain non-finite entries")
    if obs.kind == "identity":
        out = X
    elif obs.kind == "cubic":
        out = np.vstack([X, np.abs(X) ** 2 * X])
    elif obs.kind == "quadratic":
        out = np.vstack([X, np.abs(X) ** 2])
    else:
        feats = np.column_stack([obs.feature_map(np.real(col)) for col in X.T])
        out = np.vstack([X, feats])
    return out[:, 0] if vector else out


def read_out(Y, n):
    """Original-state block of lifted snapshots."""
    return np.asarray(Y)[:n]


@dataclass(frozen=True)
class DmdModel:
    modes: np.ndarray
    eigenvalues: np.ndarray
    amplitudes: np.ndarray
    dt: float
    rank: int
    singular_values: np.ndarray
    projection_residual: float
    observables: ObservableSet = ObservableSet()
    state_dim: int | None = None


def dmd_fit(X, Xp, r, dt=1.0, obs=None, state_dim=None):
    """Exact DMD of the pair ``Xp ~ A X`` truncated to rank ``r``.

    ``X`` and ``Xp`` are already-lifted snapshot matrices. Amplitudes are the
    least-squares coefficients of the first column of ``X`` in the modes.
    """
    X = np.asarray(X)
    Xp = np.asarray(Xp)
    if X.shape != Xp.shape:
        raise InvalidInputError(f"X is {X.shape} but X' is {Xp.shape}")
    if not 1 <= r <= min(X.shape):
        raise InvalidInputError(f"rank {r} outside 1..{min(X.shape)}")
    U, S, V = svd(X)
    if S[r - 1] < 1e-12 * S[0]:
        raise RankDeficiencyError(
            f"rank {r} exceeds numerical rank: s_{r} / s_1 = {S[r - 1] / S[0]:.2e}"
        )
    Ur, Sr, Vr = U[:, :r], S[:r], V[:, :r]
    XpVS = Xp @ Vr / Sr[None, :]
    Atilde = Ur.conj().T @ XpVS
    lam, Wt = eig_general(Atilde)
    modes = XpVS @ Wt
    x0 = X[:, 0]
    b, *_ = np.linalg.lstsq(modes, x0.astype(complex), rcond=None)
    residual = float(np.linalg.norm(modes @ b - x0))
    return DmdModel(
        modes, lam, b, float(dt), r, S, residual,
        obs if obs is not None else ObservableSet(),
        X.shape[0] if state_dim is None else state_dim,
    )


def numerical_rank(X, rtol=1e-12):
    """Number of singular values at or above ``rtol`` times the largest."""
    S = svd(X)[1]
    return int(np.sum(S >= rtol * S[0])) if S.size and S[0] > 0 else 0


def fit_observables(snapshots, obs, r, dt=1.0):
    """Lift a snapshot sequence and fit DMD on consecutive pairs."""
    snapshots = np.asarray(snapshots)
    Y = lift(snapshots, obs)
    return dmd_fit(Y[:, :-1], Y[:, 1:], r, dt, obs, snapshots.shape[0])


def koopman_predict(model, steps):
    """Open-loop lifted trajectory, columns ``k = 0..steps``: ``Phi diag(lam^k) b``."""
    k = np.arange(steps + 1)
    vander = model.eigenvalues[:, None] ** k[None, :]
    return model.modes @ (model.amplitudes[:, None] * vander)


def predict_states(model, steps):
    """Real part of the original-state block of :func:`koopman_predict`."""
    return np.real(read_out(koopman_predict(model, steps), model.state_dim))


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    exponents: np.ndarray
    excluded: np.ndarray

    def unstable(self, tol=0.0):
        return np.abs(self.eigenvalues) > 1.0 + tol


def spectra(model):
    """Discrete eigenvalues and continuous-time exponents ``log(lam) / dt``.

    Zero eigenvalues have no logarithm; they get a NaN exponent and are
    flagged in ``excluded``.
    """
    lam = np.asarray(model.eigenvalues, dtype=complex)
    zero = lam == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero eigenvalue(s) excluded from the log map")
    exps = np.full(lam.shape, np.nan + 0j)
    exps[~zero] = np.log(lam[~zero]) / model.dt
    return Spectrum(lam, exps, zero)


def reconstruction_mse(predicted, truth):
    """Per-time squared error summed over space (real parts) and its total."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise InvalidInputError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    err = np.real(predicted) - np.real(truth)
    per_time = np.sum(err**2, axis=0)
    return per_time, float(per_time.sum())


def _cvec(z):
    z = np.asarray(z, dtype=complex)
    return {"re": z.real.tolist(), "im": z.imag.tolist(), "shape": list(z.shape)}


def _from_cvec(d):
    z = np.asarray(d["re"], dtype=float) + 1j * np.asarray(d["im"], dtype=float)
    return z.reshape(d["shape"])


def model_to_dict(model):
    return {
        "modes": _cvec(model.modes),
        "eigenvalues": _cvec(model.eigenvalues),
        "amplitudes": _cvec(model.amplitudes),
        "dt": model.dt,
        "rank": model.rank,
        "singular_values": np.asarray(model.singular_values).tolist(),
        "projection_residual": model.projection_residual,
        "observables": model.observables.to_dict(),
        "state_dim": model.state_dim,
    }


def model_from_dict(d):
    return DmdModel(
        _from_cvec(d["modes"]),
        _from_cvec(d["eigenvalues"]),
        _from_cvec(d["amplitudes"]),
        float(d["dt"]),
        int(d["rank"]),
        np.asarray(d["singular_values"], dtype=float),
        float(d["projection_residual"]),
        ObservableSet.from_dict(d["observables"]),
        d["state_dim"],
    )


def write_spectra_csv(spec, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["re", "im", "exponent_re", "exponent_im"])
        for lam, ex in zip(spec.eigenvalues, spec.exponents):
            w.writerow([repr(float(lam.real)), repr(float(lam.imag)),
                        repr(float(ex.real)), repr(float(ex.imag))])


def write_mse_csv(times, columns, path):
    """``columns``: mapping of column name to per-time values."""
    names = list(columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *names])
        for i, t in enumerate(times):
            w.writerow([repr(float(t)), *(repr(float(columns[n][i])) for n in names)])
