"""Explicit finite-dimensional feature maps for the Gaussian kernel.

Three constructions are provided, all approximating
``k(x, x') = exp(-||x - x'||^2 / (2 sigma^2))`` by an inner product of
explicit feature vectors:

* :class:`TaylorFeatureMap` -- truncated power series of the cross term,
  one feature per monomial of total degree ``<= r``.
* Fourier maps (:class:`FourierFeatureMap`) built either from random
  draws of the spectral measure (random Fourier features) or from a
  Gauss-Hermite quadrature rule, optionally subsampled.

Every map exposes ``__call__`` (the feature vector), ``jacobian`` (analytic
derivative, shape ``(D, d)``), ``dim`` and JSON (de)serialisation through
:func:`map_to_dict` / :func:`map_from_dict`.
"""
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, InvalidInputError, RuleQualityError
from .numerics import eig_symmetric, nnls

MAX_MULTI_INDICES = 10_000_000
MAX_GRID_NODES = 1_000_000


def enumerate_multi_indices(d, r):
    """All exponent tuples in ``N^d`` with total degree ``<= r``.

    Ordered by total degree, then lexicographically descending, so the
    degree-one block lists ``e_1, e_2, ..., e_d`` in coordinate order.

    >>> enumerate_multi_indices(2, 2)
    [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    """
    if d < 1 or r < 0:
        raise InvalidInputError(f"need d >= 1 and r >= 0, got d={d}, r={r}")
    count = math.comb(d + r, r)
    if count > MAX_MULTI_INDICES:
        raise CapacityError(f"{count} monomials for d={d}, r={r} exceeds {MAX_MULTI_INDICES}")
    out = []
    for n in range(r + 1):
        for combo in itertools.combinations_with_replacement(range(d), n):
            alpha = [0] * d
            for i in combo:
                alpha[i] += 1
            out.append(tuple(alpha))
    return out


def gaussian_kernel(x, xp, a):
    """``exp(-a ||x - x'||^2)`` with ``a = 1 / (2 sigma^2)``."""
    diff = np.asarray(x, dtype=float) - np.asarray(xp, dtype=float)
    return float(np.exp(-a * (diff @ diff)))


def taylor_bound(x, xp, sigma, r):
    """Upper bound on ``|k(x, x') - k_taylor(x, x')|`` for truncation order ``r``."""
    t = np.linalg.norm(x) * np.linalg.norm(xp) / sigma**2
    return float(t ** (r + 1) / math.factorial(r + 1))


def _check_point(x, d):
    x = np.asarray(x, dtype=float)
    if x.shape != (d,):
        raise InvalidInputError(f"expected a vector of length {d}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("feature map input contains non-finite entries")
    return x


@dataclass(frozen=True)
class TaylorFeatureMap:
    """Truncated Taylor-series features of the Gaussian kernel.

    Feature ``alpha`` is ``exp(-|x|^2 / 2 sigma^2) x^alpha / (sigma^|alpha| sqrt(alpha!))``.
    """

    d: int
    r: int
    sigma: float
    exponents: np.ndarray = field(init=False, repr=False, compare=False)
    coefficients: np.ndarray = field(init=False, repr=False, compare=False)

    kind = "taylor"

    def __post_init__(self):
        if self.sigma <= 0:
            raise InvalidInputError(f"sigma must be positive, got {self.sigma}")
        alphas = np.array(enumerate_multi_indices(self.d, self.r), dtype=np.int64)
        degree = alphas.sum(axis=1)
        fact = np.array(
            [math.prod(math.factorial(int(k)) for k in row) for row in alphas], dtype=float
        )
        coeff = 1.0 / (self.sigma**degree * np.sqrt(fact))
        object.__setattr__(self, "exponents", alphas)
        object.__setattr__(self, "coefficients", coeff)

    @classmethod
    def from_kernel_parameter(cls, d, r, a):
        return cls(d, r, 1.0 / math.sqrt(2.0 * a))

    @property
    def a(self):
        return 1.0 / (2.0 * self.sigma**2)

    @property
    def dim(self):
        return self.exponents.shape[0]

    @property
    def input_dim(self):
        return self.d

    def _monomials(self, x):
        return np.prod(x[None, :] ** self.exponents, axis=1)

    def __call__(self, x):
        x = _check_point(x, self.d)
        envelope = np.exp(-(x @ x) / (2.0 * self.sigma**2))
        return envelope * self.coefficients * self._monomials(x)

    def jacobian(self, x):
        """Analytic ``d feature / d x`` of shape ``(D, d)``.

        The monomial derivative is formed multiplicatively as
        ``alpha_m x^(alpha - e_m)``, so coordinates equal to zero are safe.
        """
        x = _check_point(x, self.d)
        envelope = np.exp(-(x @ x) / (2.0 * self.sigma**2))
        phi = envelope * self.coefficients * self._monomials(x)
        J = np.empty((self.dim, self.d))
        for m in range(self.d):
            lowered = self.exponents.copy()
            lowered[:, m] = np.maximum(lowered[:, m] - 1, 0)
            dmono = self.exponents[:, m] * np.prod(x[None, :] ** lowered, axis=1)
            J[:, m] = envelope * self.coefficients * dmono - phi * x[m] / self.sigma**2
        return J

    def to_dict(self):
        return {"type": self.kind, "d": self.d, "r": self.r, "sigma": self.sigma}


@dataclass(frozen=True)
class QuadratureRule:
    """Frequency nodes (rows of ``nodes``) and non-negative weights.

    Nodes are for the standard normal spectral measure, i.e. a unit-width
    Gaussian kernel. ``degree`` is the polynomial exactness ``R`` (``None``
    once the rule has been subsampled). ``residual`` is the worst moment
    error recorded at construction, when known.
    """

    nodes: np.ndarray
    weights: np.ndarray
    degree: int | None = None
    residual: float | None = None

    @property
    def size(self):
        return self.weights.shape[0]

    @property
    def d(self):
        return self.nodes.shape[1]


def _gauss_hermite_1d(n):
    """``n``-point Gauss-Hermite rule for the standard normal (Golub-Welsch)."""
    if n == 1:
        return np.zeros(1), np.ones(1)
    off = np.sqrt(np.arange(1, n, dtype=float))
    J = np.diag(off, 1) + np.diag(off, -1)
    nodes, vecs = eig_symmetric(J)
    weights = vecs[0, :] ** 2
    # tidy the exact symmetry of the rule
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return nodes, weights / weights.sum()


def gaussian_moment(r):
    """``E[prod w_l^r_l]`` for a standard normal vector: product of ``(r_l - 1)!!``."""
    out = 1.0
    for k in r:
        if k % 2:
            return 0.0
        out *= math.prod(range(k - 1, 0, -2)) if k else 1
    return float(out)


def moment_matrix(nodes, R):
    """Rows: monomials of degree ``<= R`` evaluated at each node; plus their targets."""
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    alphas = np.array(enumerate_multi_indices(nodes.shape[1], R), dtype=np.int64)
    C = np.prod(nodes[None, :, :] ** alphas[:, None, :], axis=2)
    target = np.array([gaussian_moment(a) for a in alphas])
    return C, target


def moment_residual(rule, R):
    """Largest absolute violation of the degree-``R`` moment constraints."""
    C, target = moment_matrix(rule.nodes, R)
    return float(np.abs(C @ rule.weights - target).max())


def gauss_hermite_rule(R, d, max_nodes=MAX_GRID_NODES):
    """Tensor-product Gauss-Hermite rule exact for total degree ``<= R``.

    Uses the ``ceil((R + 1) / 2)``-point rule in every coordinate.
    """
    if R < 1 or d < 1:
        raise InvalidInputError(f"need R >= 1 and d >= 1, got R={R}, d={d}")
    n = math.ceil((R + 1) / 2)
    if n**d > max_nodes:
        raise CapacityError(
            f"tensor rule has {n}**{d} nodes (cap {max_nodes}); use sample_gauss_hermite"
        )
    x1, w1 = _gauss_hermite_1d(n)
    idx = np.array(list(itertools.product(range(n), repeat=d)), dtype=np.int64).reshape(-1, d)
    nodes = x1[idx]
    weights = np.prod(w1[idx], axis=1)
    return QuadratureRule(nodes, weights, R)


def subsample_rule(rule, n_target, seed):
    """Draw ``n_target`` nodes with replacement in proportion to the weights.

    The returned rule carries uniform weights ``1 / n_target``.
    """
    if rule.size == 0:
        raise InvalidInputError("cannot subsample an empty rule")
    if n_target < 1:
        raise InvalidInputError(f"n_target must be >= 1, got {n_target}")
    rng = np.random.default_rng(seed)
    p = rule.weights / rule.weights.sum()
    pick = rng.choice(rule.size, size=n_target, replace=True, p=p)
    return QuadratureRule(rule.nodes[pick].copy(), np.full(n_target, 1.0 / n_target))


def sample_gauss_hermite(R, d, n_target, seed):
    """Subsample the degree-``R`` tensor Gauss-Hermite rule without building it.

    The tensor rule's weights factor over coordinates, so drawing a grid
    node proportionally to its weight is the same as drawing each
    coordinate independently from the 1-D rule. This reaches dimensions
    where the full grid would not fit in memory.
    """
    if R < 1 or d < 1 or n_target < 1:
        raise InvalidInputError(f"invalid arguments R={R}, d={d}, n_target={n_target}")
    x1, w1 = _gauss_hermite_1d(math.ceil((R + 1) / 2))
    rng = np.random.default_rng(seed)
    pick = rng.choice(x1.size, size=(n_target, d), replace=True, p=w1)
    return QuadratureRule(x1[pick], np.full(n_target, 1.0 / n_target))


def nnls_rule(candidates, R, threshold=1e-8):
    """Fit non-negative weights to candidate nodes so moments up to ``R`` match.

    Zero-weight candidates are dropped. Raises :class:`RuleQualityError`
    if the worst moment violation exceeds ``threshold``.
    """
    candidates = np.asarray(candidates, dtype=float)
    if candidates.ndim == 1:
        candidates = candidates[:, None]
    C, target = moment_matrix(candidates, R)
    # scale rows so high-degree moments do not dominate the fit
    scale = 1.0 / np.maximum(1.0, np.abs(C).max(axis=1))
    w = nnls(C * scale[:, None], target * scale)
    residual = float(np.abs(C @ w - target).max())
    if residual > threshold:
        raise RuleQualityError(
            f"moment residual {residual:.3e} exceeds {threshold:.1e}", residual
        )
    keep = w > 0
    return QuadratureRule(candidates[keep], w[keep], R, residual)


@dataclass(frozen=True)
class FourierFeatureMap:
    """Paired cosine / sine features at weighted frequency nodes.

    Features are ``sqrt(a_i) cos(w_i.x / sigma)`` for every node followed by
    ``sqrt(a_i) sin(w_i.x / sigma)``; the weights sum to one, so
    ``<f(x), f(x)> = 1`` exactly and ``<f(x), f(x')>`` estimates the
    Gaussian kernel of width ``sigma``.
    """

    nodes: np.ndarray
    weights: np.ndarray
    sigma: float = 1.0
    source: str = "gq"
    seed: int | None = None
    params: dict = field(default_factory=dict, compare=False)

    kind = "fourier"

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        if nodes.shape[0] != weights.shape[0]:
            raise InvalidInputError("nodes and weights disagree in length")
        if np.any(weights < 0):
            raise InvalidInputError("Fourier feature weights must be non-negative")
        if self.sigma <= 0:
            raise InvalidInputError(f"sigma must be positive, got {self.sigma}")
        total = weights.sum()
        if abs(total - 1.0) > 1e-12:
            weights = weights / total
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_rule(cls, rule, sigma=1.0, seed=None, **params):
        return cls(rule.nodes, rule.weights, sigma, "gq", seed, params)

    @classmethod
    def random(cls, d, n_nodes, sigma=1.0, seed=0):
        """Random Fourier features: nodes drawn from the standard normal."""
        rng = np.random.default_rng(seed)
        nodes = rng.standard_normal((n_nodes, d))
        return cls(nodes, np.full(n_nodes, 1.0 / n_nodes), sigma, "rff", seed,
                   {"n_nodes": n_nodes})

    @property
    def dim(self):
        return 2 * self.weights.shape[0]

    @property
    def input_dim(self):
        return self.nodes.shape[1]

    @property
    def a(self):
        return 1.0 / (2.0 * self.sigma**2)

    def __call__(self, x):
        x = _check_point(x, self.input_dim)
        phase = self.nodes @ x / self.sigma
        amp = np.sqrt(self.weights)
        return np.concatenate([amp * np.cos(phase), amp * np.sin(phase)])

    def jacobian(self, x):
        x = _check_point(x, self.input_dim)
        phase = self.nodes @ x / self.sigma
        amp = np.sqrt(self.weights)[:, None] * self.nodes / self.sigma
        return np.vstack([-np.sin(phase)[:, None] * amp, np.cos(phase)[:, None] * amp])

    def to_dict(self):
        return {
            "type": self.kind,
            "source": self.source,
            "d": self.input_dim,
            "sigma": self.sigma,
            "seed": self.seed,
            "params": dict(self.params),
            "nodes": self.nodes.tolist(),
            "weights": self.weights.tolist(),
        }


def approx_kernel(feature_map, x, xp):
    """Kernel estimate ``<f(x), f(x')>`` induced by a feature map."""
    return float(feature_map(x) @ feature_map(xp))


def make_gq_map(d, n_features, sigma=1.0, R=None, seed=0):
    """Gauss-Hermite quadrature features with ``n_features`` entries.

    ``n_features`` counts cosine and sine entries, so ``n_features / 2``
    nodes are drawn from the tensor rule of degree ``R`` (default 5). When
    the full grid is small enough and already has exactly that many nodes
    it is used as is.
    """
    if n_features < 2 or n_features % 2:
        raise InvalidInputError(f"n_features must be a positive even number, got {n_features}")
    R = 5 if R is None else R
    n_nodes = n_features // 2
    n1 = math.ceil((R + 1) / 2)
    if n1**d == n_nodes:
        rule = gauss_hermite_rule(R, d)
    else:
        rule = sample_gauss_hermite(R, d, n_nodes, seed)
    return FourierFeatureMap.from_rule(rule, sigma, seed, R=R, n_features=n_features)


def map_to_dict(feature_map):
    return feature_map.to_dict()


def map_from_dict(desc):
    """Rebuild a feature map from :func:`map_to_dict` output.

    Also accepts short descriptors: ``{"type": "taylor", "d", "r", "a"}``
    (``a`` in place of ``sigma``), ``{"type": "gq", "d", "n_features",
    "sigma", "R", "seed"}`` and ``{"type": "rff", "d", "n_nodes", "sigma",
    "seed"}``.
    """
    kind = desc.get("type")
    if kind == "taylor":
        if "sigma" in desc:
            return TaylorFeatureMap(int(desc["d"]), int(desc["r"]), float(desc["sigma"]))
        return TaylorFeatureMap.from_kernel_parameter(int(desc["d"]), int(desc["r"]),
                                                      float(desc["a"]))
    if kind == "fourier":
        return FourierFeatureMap(
            np.asarray(desc["nodes"], dtype=float).reshape(-1, int(desc["d"])),
            np.asarray(desc["weights"], dtype=float),
            float(desc["sigma"]),
            desc.get("source", "gq"),
            desc.get("seed"),
            dict(desc.get("params", {})),
        )
    if kind == "gq":
        return make_gq_map(int(desc["d"]), int(desc["n_features"]),
                           float(desc.get("sigma", 1.0)), desc.get("R"),
                           int(desc.get("seed", 0)))
    if kind == "rff":
        return FourierFeatureMap.random(int(desc["d"]), int(desc["n_nodes"]),
                                        float(desc.get("sigma", 1.0)),
                                        int(desc.get("seed", 0)))
    raise InvalidInputError(f"unknown feature map type {kind!r}")
