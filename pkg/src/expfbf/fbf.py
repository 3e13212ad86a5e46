"""Explicit-space functional Bayesian filter.

The filter jointly estimates a state vector ``s`` and the weights of a
linear model acting on explicit kernel features. Three propagation modes
are supported:

``input-state``
    ``s = A psi(x) + B phi(u)`` where ``x`` is the leading block of the
    previous state that the state feature map accepts.
``feature-state``
    the state *is* a feature vector, propagated as ``s = A s + B phi(u)``.
``concat``
    ``s = [x; psi(x)]`` propagated linearly, ``s = A s (+ B phi(u))``; the
    feature block is recomputed from ``x`` after each update when
    ``relift`` is on.

Weights are handled per output row: row ``k`` of ``W = [A | B]`` holds all
weights feeding state component ``k`` and the regressor ``z`` (features of
the previous state followed by input features) is shared by every row.
With ``layout="full"`` one joint covariance is kept: ``P1`` is
``(n_s, n_s)``, ``P2`` is ``(n_s, n_s, D_z)`` indexed ``[i, k, d]`` and
``P4`` is dense over all weights. With ``layout="per-state-block"`` row
``k`` runs its own joint filter over ``[s; W[k]]``, treating the other
rows' weights as known. Each group keeps ``P1[k]`` ``(n_s, n_s)``,
``P2[k]`` ``(n_s, D_z)`` and ``P4[k]`` ``(D_z, D_z)``, and owns the
correction of state component ``k``. Every group is an exact Kalman
recursion, so all stored covariances stay positive semi-definite; simply
dropping cross-row blocks of a single joint covariance does not have that
property.
Externally, weight vectors follow the canonical order: ``A`` flattened
row-major, then ``B`` flattened row-major.
"""
import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, InvalidInputError, NumericFailure
from .features import map_from_dict, map_to_dict
from .numerics import spd_solve

MODES = ("input-state", "feature-state", "concat")
LAYOUTS = ("per-state-block", "full")
MAX_FULL_P4_ENTRIES = 50_000_000
CHECKPOINT_MAGIC = b"EXPFBF01"


@dataclass
class FilterConfig:
    n_x: int
    n_y: int
    n_u: int = 0
    mode: str = "input-state"
    state_map: object = None
    input_map: object = None
    sigma_s: float = 0.3
    sigma_y: float = 0.3
    sigma_omega: float = 0.0
    p4_init: float = 1.0
    kappa1: float = 1.0
    kappa2: float = 1.0
    layout: str = "per-state-block"
    measure_start: int | None = None
    relift: bool = True
    seed: int = 0
    init_scale: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.layout not in LAYOUTS:
            raise InvalidInputError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.state_map is None:
            raise InvalidInputError("a state feature map is required")
        if isinstance(self.state_map, dict):
            self.state_map = map_from_dict(self.state_map)
        if isinstance(self.input_map, dict):
            self.input_map = map_from_dict(self.input_map)
        if self.sigma_s <= 0 or self.sigma_y <= 0 or self.p4_init <= 0:
            raise InvalidInputError("sigma_s, sigma_y and p4_init must be positive")
        if self.sigma_omega < 0:
            raise InvalidInputError("sigma_omega must be non-negative")
        for name in ("kappa1", "kappa2"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise InvalidInputError(f"{name} must lie in [0, 1], got {value}")
        if self.input_map is not None and self.input_map.input_dim != self.n_u:
            raise InvalidInputError(
                f"input map expects {self.input_map.input_dim} inputs, n_u = {self.n_u}"
            )
        if self.mode == "input-state" and self.state_map.input_dim > self.n_s:
            raise InvalidInputError("state map input exceeds the state dimension")
        if self.mode == "concat" and self.state_map.input_dim != self.n_x:
            raise InvalidInputError("concat mode needs a state map over the n_x leading states")
        idx = self.measurement_indices
        if idx[0] < 0 or idx[-1] >= self.n_s:
            raise InvalidInputError(f"measurement range {idx[0]}..{idx[-1]} outside state")

    @property
    def n_s(self):
        if self.mode == "input-state":
            return self.n_x + self.n_y
        if self.mode == "feature-state":
            return self.state_map.dim
        return self.n_x + self.state_map.dim

    @property
    def dim_a(self):
        """Length of the state part of the regressor."""
        return self.state_map.dim if self.mode == "input-state" else self.n_s

    @property
    def dim_b(self):
        return 0 if self.input_map is None else self.input_map.dim

    @property
    def dim_z(self):
        return self.dim_a + self.dim_b

    @property
    def n_omega(self):
        return self.n_s * self.dim_z

    @property
    def measurement_indices(self):
        start = self.measure_start
        if start is None:
            start = 0 if self.mode == "concat" else self.n_s - self.n_y
        return np.arange(start, start + self.n_y)

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        out["state_map"] = map_to_dict(self.state_map)
        out["input_map"] = None if self.input_map is None else map_to_dict(self.input_map)
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class StepReport:
    step: int
    prior_state: np.ndarray
    prior_output: np.ndarray
    innovation: np.ndarray
    posterior_state: np.ndarray
    posterior_output: np.ndarray
    prior_se: float | None = None
    posterior_se: float | None = None


@dataclass
class FilterModel:
    config: FilterConfig
    s: np.ndarray
    W: np.ndarray
    P1: np.ndarray
    P2: np.ndarray
    P4: np.ndarray
    step: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def A(self):
        return self.W[:, : self.config.dim_a]

    @property
    def B(self):
        return self.W[:, self.config.dim_a :]

    @property
    def output(self):
        return self.s[self.config.measurement_indices]

    def weight_vector(self):
        """Weights in canonical order: ``A`` row-major, then ``B`` row-major."""
        return np.concatenate([self.A.ravel(), self.B.ravel()])

    def canonical_covariance(self):
        """``(P1, P2, P4)`` with weight axes in canonical order (full layout)."""
        cfg = self.config
        if cfg.layout != "full":
            raise InvalidInputError("per-state-block models have one covariance per row")
        perm = _internal_order(cfg)
        P2 = self.P2.reshape(cfg.n_s, -1)[:, perm]
        return self.P1.copy(), P2, self.P4[np.ix_(perm, perm)]

    def group_covariance(self, k):
        """Joint covariance of ``[s; W[k]]`` for row ``k`` (per-state-block)."""
        if self.config.layout == "full":
            raise InvalidInputError("full-layout models keep a single joint covariance")
        return np.block([[self.P1[k], self.P2[k]], [self.P2[k].T, self.P4[k]]])

    def copy(self):
        return dataclasses.replace(
            self,
            s=self.s.copy(),
            W=self.W.copy(),
            P1=self.P1.copy(),
            P2=self.P2.copy(),
            P4=self.P4.copy(),
            _cache={},
        )

    def set_state(self, x):
        """Overwrite the state from its leading block, relifting if applicable."""
        cfg = self.config
        x = np.asarray(x, dtype=float)
        s = self.s.copy()
        s[: x.size] = x
        if cfg.mode == "concat":
            s[cfg.n_x :] = cfg.state_map(s[: cfg.n_x])
        self.s = s


def _internal_order(cfg):
    """Internal weight index for each canonical weight index."""
    n_s, da, db, dz = cfg.n_s, cfg.dim_a, cfg.dim_b, cfg.dim_z
    a_part = (np.arange(n_s)[:, None] * dz + np.arange(da)[None, :]).ravel()
    b_part = (np.arange(n_s)[:, None] * dz + da + np.arange(db)[None, :]).ravel()
    return np.concatenate([a_part, b_part])


def init_filter(config):
    """Fresh model: ``P1 = sigma_s^2 I``, ``P4 = p4_init I``, ``P2 = 0``, small random s, W."""
    cfg = config
    n_s, dz = cfg.n_s, cfg.dim_z
    if cfg.layout == "full" and cfg.n_omega**2 > MAX_FULL_P4_ENTRIES:
        raise CapacityError(
            f"full weight covariance needs {cfg.n_omega}^2 entries; "
            "use layout='per-state-block'"
        )
    rng = np.random.default_rng(cfg.seed)
    s = rng.uniform(-cfg.init_scale, cfg.init_scale, n_s)
    W = rng.uniform(-cfg.init_scale, cfg.init_scale, (n_s, dz))
    P1 = cfg.sigma_s**2 * np.eye(n_s)
    if cfg.layout == "full":
        P4 = cfg.p4_init * np.eye(cfg.n_omega)
    else:
        P1 = np.broadcast_to(P1, (n_s, n_s, n_s)).copy()
        P4 = np.broadcast_to(cfg.p4_init * np.eye(dz), (n_s, dz, dz)).copy()
    model = FilterModel(cfg, s, W, P1, np.zeros((n_s, n_s, dz)), P4)
    if cfg.mode == "concat" and cfg.relift:
        model.set_state(s[: cfg.n_x])
    return model


def _input_features(cfg, u):
    if cfg.input_map is None:
        if u is not None and np.size(u):
            raise InvalidInputError("input given but the filter has no input map")
        return np.zeros(0)
    if u is None:
        raise InvalidInputError("the filter has an input map; an input vector is required")
    return cfg.input_map(np.asarray(u, dtype=float))


def regressor(model, u=None):
    """Shared regressor ``z``: state features then input features."""
    cfg = model.config
    if cfg.mode == "input-state":
        d = cfg.state_map.input_dim
        head = cfg.state_map(model.s[:d])
    else:
        head = model.s
    z = np.concatenate([head, _input_features(cfg, u)])
    if not np.all(np.isfinite(z)):
        raise NumericFailure("non-finite feature values", index=model.step)
    return z


def state_transition(model, u=None):
    """A priori state ``A psi(s) + B phi(u)`` (or its linear-mode analogue)."""
    return model.W @ regressor(model, u)


def jacobian_F1(model):
    """``d s_i / d s_{i-1}``: ``A J_psi`` in input-state mode, ``A`` otherwise."""
    cfg = model.config
    if cfg.mode != "input-state":
        return model.A.copy()
    d = cfg.state_map.input_dim
    F1 = np.zeros((cfg.n_s, cfg.n_s))
    F1[:, :d] = model.A @ cfg.state_map.jacobian(model.s[:d])
    return F1


def jacobian_F2(model, u=None):
    """Structured ``d s_i / d Omega``: block diagonal with ``z^T`` on every row.

    Only ``z`` is returned; :func:`F2_dense` materialises the matrix in
    canonical weight order for small problems.
    """
    return regressor(model, u)


def F2_dense(config, z):
    """Dense ``n_s x n_omega`` weight Jacobian in canonical order (testing aid)."""
    n_s, da = config.n_s, config.dim_a
    FA = np.kron(np.eye(n_s), z[None, :da])
    FB = np.kron(np.eye(n_s), z[None, da:])
    return np.hstack([FA, FB])


def _check_finite(model, *arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericFailure("covariance became non-finite", index=model.step)


def predict(model, u=None):
    """Time update. Mutates and returns ``model`` together with ``(F1, z)``."""
    cfg = model.config
    n_s, dz = cfg.n_s, cfg.dim_z
    z = regressor(model, u)
    F1 = jacobian_F1(model)
    s_prior = model.W @ z

    if cfg.layout == "full":
        P2 = model.P2
        P4 = model.P4.reshape(n_s, dz, n_s, dz)
        F2P4 = np.einsum("d,kdle->kle", z, P4)
        P2_prior = (F1 @ P2.reshape(n_s, -1)).reshape(P2.shape) + F2P4
        P1_prior = (F1 @ model.P1 + (P2 @ z).T) @ F1.T + P2_prior @ z
        P1_prior += cfg.sigma_s**2 * np.eye(n_s)
        P1_prior = 0.5 * (P1_prior + P1_prior.T)
    else:
        # Group k: F2 = e_k z^T, so F2 X only touches row k.
        rows = np.arange(n_s)
        P2 = model.P2
        P2_prior = np.matmul(F1, P2)
        P2_prior[rows, rows, :] += np.einsum("d,kde->ke", z, model.P4)
        FP = np.matmul(F1, model.P1)
        FP[rows, rows, :] += P2 @ z
        P1_prior = np.matmul(FP, F1.T)
        P1_prior[rows, :, rows] += P2_prior @ z
        P1_prior += cfg.sigma_s**2 * np.eye(n_s)
        P1_prior = 0.5 * (P1_prior + np.swapaxes(P1_prior, 1, 2))

    q = cfg.sigma_omega**2
    if q:
        if cfg.layout == "full":
            model.P4 = model.P4 + q * np.eye(cfg.n_omega)
        else:
            model.P4 = model.P4 + q * np.eye(dz)[None, :, :]
    _check_finite(model, s_prior, P1_prior, P2_prior)
    model.s = s_prior
    model.P1 = P1_prior
    model.P2 = P2_prior
    return model, F1, z


def update(model, d, clean=None):
    """Measurement update with innovation ``e = d - s[idx]``.

    Gains are scaled by ``kappa1`` / ``kappa2`` for the state and weight
    corrections only; covariance downdates use the unscaled gains.
    """
    cfg = model.config
    ny = cfg.n_y
    d = np.asarray(d, dtype=float).ravel()
    if d.shape != (ny,):
        raise InvalidInputError(f"measurement must have length {ny}, got {d.shape}")
    idx = cfg.measurement_indices
    s_prior = model.s
    prior_out = s_prior[idx].copy()
    e = d - prior_out

    try:
        if cfg.layout == "full":
            s_post = _update_full(model, idx, e)
        else:
            s_post = _update_groups(model, idx, e)
    except NumericFailure as exc:
        raise NumericFailure(
            f"innovation covariance not positive definite at step {model.step}: {exc}",
            index=model.step,
        ) from exc
    _check_finite(model, s_post, model.W, model.P1, model.P2, model.P4)

    model.s = s_post
    if cfg.mode == "concat" and cfg.relift:
        model.set_state(s_post[: cfg.n_x])
    model.step += 1

    report = StepReport(
        model.step,
        s_prior.copy(),
        prior_out,
        e,
        model.s.copy(),
        model.output.copy(),
    )
    if clean is not None:
        clean = np.asarray(clean, dtype=float).ravel()
        report.prior_se = float(np.sum((prior_out - clean) ** 2))
        report.posterior_se = float(np.sum((report.posterior_output - clean) ** 2))
    return model, report


def _update_full(model, idx, e):
    cfg = model.config
    n_s, dz, ny = cfg.n_s, cfg.dim_z, idx.size
    L1 = model.P1[:, idx]
    L2 = np.moveaxis(model.P2[idx], 0, -1).reshape(n_s * dz, ny)
    S = model.P1[np.ix_(idx, idx)] + cfg.sigma_y**2 * np.eye(ny)
    K1 = spd_solve(S, L1.T).T
    K2 = spd_solve(S, L2.T).T

    model.W = model.W + cfg.kappa2 * (K2 @ e).reshape(n_s, dz)
    P1 = model.P1 - K1 @ L1.T
    model.P1 = 0.5 * (P1 + P1.T)
    model.P2 = model.P2 - (K1 @ L2.T).reshape(n_s, n_s, dz)
    P4 = model.P4 - K2 @ L2.T
    model.P4 = 0.5 * (P4 + P4.T)
    return model.s + cfg.kappa1 * (K1 @ e)


def _update_groups(model, idx, e):
    cfg = model.config
    n_s, ny = cfg.n_s, idx.size
    rows = np.arange(n_s)
    L1 = model.P1[:, :, idx]                      # (k, n_s, ny)
    L2 = np.swapaxes(model.P2[:, idx, :], 1, 2)   # (k, D_z, ny)
    S = model.P1[:, idx][:, :, idx] + cfg.sigma_y**2 * np.eye(ny)
    G = spd_solve(S, np.concatenate([L1, L2], axis=1).swapaxes(1, 2)).swapaxes(1, 2)
    K1, K2 = G[:, :n_s], G[:, n_s:]

    s_post = model.s + cfg.kappa1 * (K1[rows, rows] @ e)
    model.W = model.W + cfg.kappa2 * (K2 @ e)
    L1t, L2t = L1.swapaxes(1, 2), L2.swapaxes(1, 2)
    P1 = model.P1 - K1 @ L1t
    model.P1 = 0.5 * (P1 + P1.swapaxes(1, 2))
    model.P2 = model.P2 - K1 @ L2t
    P4 = model.P4 - K2 @ L2t
    model.P4 = 0.5 * (P4 + P4.swapaxes(1, 2))
    return s_post


def filter_step(model, u, d, clean=None):
    predict(model, u)
    return update(model, d, clean)


def run_sequence(model, inputs, measurements, clean=None, monitor=None):
    """Fold predict + update over a sequence; returns ``(model, reports)``.

    ``inputs`` may be ``None`` for filters without an input map. ``monitor``
    is called as ``monitor(model, report)`` after every step.
    """
    measurements = np.asarray(measurements, dtype=float)
    if measurements.ndim == 1:
        measurements = measurements[:, None]
    n = measurements.shape[0]
    if inputs is not None and len(inputs) != n:
        raise InvalidInputError(f"{len(inputs)} inputs for {n} measurements")
    if clean is not None:
        clean = np.asarray(clean, dtype=float).reshape(n, -1)
    reports = []
    for i in range(n):
        u = None if inputs is None else inputs[i]
        try:
            _, rep = filter_step(model, u, measurements[i], None if clean is None else clean[i])
        except NumericFailure as exc:
            raise NumericFailure(f"step {i}: {exc}", index=i) from exc
        reports.append(rep)
        if monitor is not None:
            monitor(model, rep)
    return model, reports


def covariance_health(model):
    """``(asymmetry of P1, asymmetry of P4, smallest eigenvalue of P1)``.

    For the per-state-block layout the worst value over all groups is reported.
    """
    P1, P4 = model.P1, model.P4
    asym1 = float(np.abs(P1 - np.swapaxes(P1, -1, -2)).max())
    asym4 = float(np.abs(P4 - np.swapaxes(P4, -1, -2)).max())
    return asym1, asym4, float(np.linalg.eigvalsh(P1).min())


def save_model(model, path):
    """Write a checkpoint: magic, header length, JSON header, float64 LE blocks.

    Blocks follow in the order ``s, A, B, P1, P2, P4``. Full layout: ``P1``
    is ``(n_s, n_s)``, ``P2`` is ``(n_s, n_omega)`` with canonical weight
    columns and ``P4`` the dense canonical ``(n_omega, n_omega)`` matrix.
    Per-state-block layout: stacks ``(n_s, n_s, n_s)``, ``(n_s, n_s, D_z)``
    and ``(n_s, D_z, D_z)`` indexed by row, with row ``k`` weights ordered
    ``[A[k], B[k]]``.
    """
    cfg = model.config
    perm = _internal_order(cfg)
    if cfg.layout == "full":
        P2 = model.P2.reshape(cfg.n_s, -1)[:, perm]
        P4 = model.P4[np.ix_(perm, perm)]
    else:
        P2, P4 = model.P2, model.P4
    blocks = [("s", model.s), ("A", model.A), ("B", model.B), ("P1", model.P1),
              ("P2", P2), ("P4", P4)]
    header = {
        "format": "expfbf-checkpoint",
        "version": 1,
        "config": cfg.to_dict(),
        "step": model.step,
        "blocks": [{"name": n, "shape": list(np.shape(b))} for n, b in blocks],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)
    for _, arr in blocks:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise InvalidInputError(f"{path} is not an expfbf checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays = {}
    for block in header["blocks"]:
        shape = tuple(block["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[block["name"]] = arr.astype(float)
        offset += 8 * count
    cfg = FilterConfig.from_dict(header["config"])
    perm = _internal_order(cfg)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    W = np.hstack([arrays["A"], arrays["B"]])
    if cfg.layout == "full":
        P2 = arrays["P2"][:, inv].reshape(cfg.n_s, cfg.n_s, cfg.dim_z)
        P4 = arrays["P4"][np.ix_(inv, inv)]
    else:
        P2, P4 = arrays["P2"], arrays["P4"]
    return FilterModel(cfg, arrays["s"], W, arrays["P1"], P2, P4, int(header["step"]))
