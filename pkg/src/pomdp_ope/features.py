"""Feature maps and kernels over ``F_bar = (Z, F)`` and histories ``H``.

One-hot index ordering: the components of ``F_bar`` are listed as
``z_obs`` (oldest first), ``z_act``, ``f_obs``, ``f_act``; the flat index is the
row-major (lexicographic) multi-index over those components. Histories use
``h_obs`` then ``h_act``. Tabular feature matrices are ``scipy.sparse`` CSR.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse
from scipy.spatial.distance import cdist, pdist

from .data import FbarBatch, HistoryBatch, WindowConfig
from .errors import ConfigurationError

DOMAINS = ("fbar", "history")


def _check_domain(domain: str) -> None:
    if domain not in DOMAINS:
        raise ConfigurationError(f"unknown feature domain {domain!r}")


def fbar_components(batch: FbarBatch) -> list[np.ndarray]:
    cols = [batch.z_obs, batch.z_act, batch.f_obs, batch.f_act]
    return [c[:, i] for c in cols for i in range(c.shape[1])]


def history_components(batch: HistoryBatch) -> list[np.ndarray]:
    return [c[:, i] for c in (batch.h_obs, batch.h_act) for i in range(c.shape[1])]


def raw_points(batch) -> np.ndarray:
    """Concatenated component vector of each point, as floats."""
    if isinstance(batch, FbarBatch):
        parts = [batch.z_obs, batch.z_act, batch.f_obs, batch.f_act]
    elif isinstance(batch, HistoryBatch):
        parts = [batch.h_obs, batch.h_act]
    else:
        return np.atleast_2d(np.asarray(batch, dtype=float))
    n = len(batch)
    return np.concatenate([np.asarray(p, dtype=float).reshape(n, -1) for p in parts], axis=1)


@dataclass(frozen=True)
class FeatureMap:
    """Feature map ``phi`` on one domain; ``transform`` maps a batch to an (n, dim) matrix."""

    domain: str
    dim: int
    kind: str
    fn: Callable = field(repr=False)
    sizes: tuple = ()

    def __post_init__(self):
        _check_domain(self.domain)
        if self.kind not in ("one-hot", "quadratic", "custom"):
            raise ConfigurationError(f"unknown feature kind {self.kind!r}")

    def transform(self, batch):
        out = self.fn(batch)
        if out.shape[1] != self.dim:
            raise ConfigurationError(f"feature map produced {out.shape[1]} columns, declared {self.dim}")
        return out

    def dense(self, batch) -> np.ndarray:
        out = self.transform(batch)
        return out.toarray() if scipy.sparse.issparse(out) else np.asarray(out)

    def index(self, batch) -> np.ndarray:
        """Flat one-hot index of every point."""
        if self.kind != "one-hot":
            raise ConfigurationError("index is only defined for one-hot maps")
        return self.fn.index(batch)


# -- one-hot ------------------------------------------------------------------------

def one_hot_index(sizes, components) -> np.ndarray:
    """Lexicographic flat index of a multi-index; raises on out-of-range components."""
    comps = [np.asarray(c, dtype=np.int64) for c in components]
    if len(comps) != len(sizes):
        raise ConfigurationError(f"expected {len(sizes)} components, got {len(comps)}")
    if not comps:
        return np.zeros(0, dtype=np.int64)
    for c, s in zip(comps, sizes):
        if np.any((c < 0) | (c >= s)):
            raise ConfigurationError(f"component value out of range [0, {s})")
    return np.ravel_multi_index(tuple(comps), tuple(sizes)).astype(np.int64)


def one_hot(sizes, components) -> np.ndarray:
    """Dense one-hot vector of a single multi-index over the product domain ``sizes``."""
    sizes = tuple(int(s) for s in sizes)
    dim = int(np.prod(sizes)) if sizes else 1
    comps = [np.atleast_1d(c) for c in components]
    idx = one_hot_index(sizes, comps)[0] if sizes else 0
    vec = np.zeros(dim)
    vec[idx] = 1.0
    return vec


def _sparse_rows(idx: np.ndarray, dim: int) -> scipy.sparse.csr_matrix:
    n = len(idx)
    return scipy.sparse.csr_matrix((np.ones(n), (np.arange(n), idx)), shape=(n, dim))


class _OneHot:
    def __init__(self, sizes, components):
        self.sizes = tuple(int(s) for s in sizes)
        self.components = components
        self.dim = int(np.prod(self.sizes)) if self.sizes else 1

    def index(self, batch) -> np.ndarray:
        if not self.sizes:
            return np.zeros(len(batch), dtype=np.int64)
        return one_hot_index(self.sizes, self.components(batch))

    def __call__(self, batch):
        return _sparse_rows(self.index(batch), self.dim)


def fbar_sizes(config: WindowConfig, n_obs: int, n_actions: int) -> tuple:
    m, mf = config.m, config.m_f
    return (n_obs,) * m + (n_actions,) * m + (n_obs,) * mf + (n_actions,) * (mf - 1)


def history_sizes(config: WindowConfig, n_obs: int, n_actions: int) -> tuple:
    return (n_obs,) * config.m_h + (n_actions,) * config.m_h


def one_hot_fbar(config: WindowConfig, n_obs: int, n_actions: int) -> FeatureMap:
    sizes = fbar_sizes(config, n_obs, n_actions)
    impl = _OneHot(sizes, fbar_components)
    return FeatureMap("fbar", impl.dim, "one-hot", impl, sizes)


def one_hot_history(config: WindowConfig, n_obs: int, n_actions: int) -> FeatureMap:
    sizes = history_sizes(config, n_obs, n_actions)
    impl = _OneHot(sizes, history_components)
    return FeatureMap("history", impl.dim, "one-hot", impl, sizes)


def current_observation_features(n_obs: int) -> FeatureMap:
    """One-hot of the current observation ``O_t``, used as the instrument for MDPs (``H := S``)."""
    impl = _OneHot((n_obs,), lambda b: [b.o])
    return FeatureMap("history", n_obs, "one-hot", impl, (n_obs,))


# -- quadratic ----------------------------------------------------------------------

def quadratic_features(x, box: float | None = None) -> np.ndarray:
    """``(1, x (x) x)`` for one vector; with ``box = B`` scaled so the norm is at most 1 on ``|x_i| <= B``."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ConfigurationError("quadratic features need finite input")
    return _quadratic_rows(x[None, :], box)[0]


def _quadratic_scale(d: int, box: float | None) -> float:
    if box is None:
        return 1.0
    # worst case on the box: ||x||^2 = d B^2, so ||phi||^2 = 1 + d^2 B^4
    return 1.0 / np.sqrt(1.0 + (d * box * box) ** 2)


def _quadratic_rows(x: np.ndarray, box) -> np.ndarray:
    n, d = x.shape
    outer = (x[:, :, None] * x[:, None, :]).reshape(n, d * d)
    return np.concatenate([np.ones((n, 1)), outer], axis=1) * _quadratic_scale(d, box)


def quadratic_feature_map(domain: str, input_dim: int, box: float | None = None) -> FeatureMap:
    """Quadratic features of the concatenated components (LQG)."""
    def fn(batch):
        x = raw_points(batch)
        if not np.all(np.isfinite(x)):
            raise ConfigurationError("quadratic features need finite input")
        return _quadratic_rows(x, box)
    return FeatureMap(domain, 1 + input_dim * input_dim, "quadratic", fn)


def custom_feature_map(domain: str, dim: int, fn: Callable) -> FeatureMap:
    """User map from a batch to an (n, dim) matrix."""
    return FeatureMap(domain, dim, "custom", fn)


# -- kernels ------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelFn:
    """Kernel on one domain. ``embed`` turns a batch into vectors; ``fn`` compares two vector sets."""

    name: str
    domain: str
    fn: Callable = field(repr=False)
    embed: Callable = field(default=raw_points, repr=False)
    params: dict = field(default_factory=dict)

    def __call__(self, x, y) -> float:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return float(self.fn(x, y)[0, 0])

    def matrix(self, a, b) -> np.ndarray:
        return np.asarray(self.fn(self.embed(a), self.embed(b)), dtype=float)


def linear_kernel(domain: str, feature_map: FeatureMap | None = None) -> KernelFn:
    """``k(x, y) = <phi(x), phi(y)>``; identity features when ``feature_map`` is None."""
    embed = raw_points if feature_map is None else feature_map.dense
    return KernelFn("linear", domain, lambda x, y: x @ y.T, embed)


def median_bandwidth(points) -> float:
    """Median of nonzero pairwise distances (1.0 when all points coincide)."""
    d = pdist(raw_points(points))
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def gaussian_kernel(domain: str, bandwidth: float | None = None, feature_map: FeatureMap | None = None) -> KernelFn:
    """``exp(-|x - y|^2 / (2 h^2))``. ``bandwidth=None`` defers to the median heuristic (see :func:`fit_kernel`)."""
    if bandwidth is not None and bandwidth <= 0:
        raise ConfigurationError("bandwidth must be positive")
    embed = raw_points if feature_map is None else feature_map.dense

    def fn(x, y, h=bandwidth):
        if h is None:
            raise ConfigurationError("Gaussian bandwidth unset; call fit_kernel first")
        return np.exp(-cdist(x, y, "sqeuclidean") / (2.0 * h * h))

    return KernelFn("gaussian", domain, fn, embed, {"bandwidth": bandwidth})


def fit_kernel(kernel: KernelFn, points) -> KernelFn:
    """Resolve data-dependent parameters (the Gaussian median heuristic)."""
    if kernel.name == "gaussian" and kernel.params.get("bandwidth") is None:
        h = median_bandwidth(kernel.embed(points))
        fm = None if kernel.embed is raw_points else kernel.embed.__self__
        return gaussian_kernel(kernel.domain, h, fm)
    return kernel


def gram_matrix(kernel: KernelFn, points) -> np.ndarray:
    if len(points) == 0:
        raise ConfigurationError("gram_matrix needs at least one point")
    return kernel.matrix(points, points)


def cross_gram(kernel: KernelFn, points_a, points_b) -> np.ndarray:
    if len(points_a) == 0 or len(points_b) == 0:
        raise ConfigurationError("cross_gram needs nonempty point sets")
    return kernel.matrix(points_a, points_b)
