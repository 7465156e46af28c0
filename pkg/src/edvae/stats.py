"""Samplers, relaxations and divergences for the discrete latent models."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng
from .special import digamma, lgamma, trigamma
from .tensor import Tensor

__all__ = [
    "DirichletParams",
    "sample_gumbel",
    "gumbel_softmax_sample",
    "sample_gamma",
    "sample_dirichlet",
    "sample_categorical",
    "dirichlet_kl",
    "dirichlet_kl_to_uniform",
    "categorical_entropy",
    "categorical_kl_to_uniform",
    "check_simplex",
]


def _generator(rng, purpose: str) -> np.random.Generator:
    if isinstance(rng, Rng):
        return rng.stream(purpose)
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected Rng or numpy Generator, got {type(rng).__name__}")


@dataclass
class DirichletParams:
    """Concentration parameters with the last axis indexing the K categories."""

    alpha: Tensor

    @property
    def K(self) -> int:
        return self.alpha.shape[-1]

    @property
    def S(self) -> np.ndarray:
        return self.alpha.data.sum(axis=-1)

    def validate(self) -> None:
        a = self.alpha.data
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite concentration parameter")
        if np.any(a < 1.0):
            raise ValueError("concentration parameters must be >= 1")


def check_simplex(probs: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ValueError("probabilities must be finite and nonnegative")
    if np.any(np.abs(probs.sum(axis=-1) - 1.0) > atol):
        raise ValueError("probabilities must sum to 1 along the last axis")
    return probs


# sampling -------------------------------------------------------------------------

def sample_gumbel(rng, shape) -> Tensor:
    """Standard Gumbel noise ``-log(-log(u))`` with ``u`` strictly inside (0, 1)."""
    gen = _generator(rng, "gumbel")
    bits = gen.integers(0, 1 << 53, size=shape, dtype=np.int64)
    u = (bits + 0.5) / float(1 << 53)
    return Tensor(-np.log(-np.log(u)))


def gumbel_softmax_sample(logits, tau: float, rng, noise: np.ndarray | None = None,
                          hard: bool = False) -> Tensor:
    """Relaxed one-hot sample ``softmax((logits + g) / tau)`` along the last axis.

    ``noise`` fixes ``g`` (for gradient checks). With ``hard=True`` the forward
    value is the one-hot argmax while the gradient follows the relaxed sample.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = T.as_tensor(logits)
    g = sample_gumbel(rng, logits.shape) if noise is None else T.as_tensor(noise)
    soft = T.softmax(T.add(logits, g), axis=-1, temperature=tau)
    if not hard:
        return soft
    idx = soft.data.argmax(axis=-1)
    onehot = np.zeros_like(soft.data)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    return T.straight_through(soft, onehot)


def sample_gamma(rng, alpha):
    """Gamma(alpha, 1) draws by the Marsaglia-Tsang squeeze method, alpha >= 1."""
    gen = _generator(rng, "gamma")
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(~(a >= 1.0)):
        raise ValueError("sample_gamma supports only alpha >= 1")
    flat = a.reshape(-1)
    d = flat - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(flat)
    todo = np.arange(flat.size)
    while todo.size:
        x = gen.standard_normal(todo.size)
        u = gen.random(todo.size)
        v = (1.0 + c[todo] * x) ** 3
        ok = v > 0
        logv = np.log(np.where(ok, v, 1.0))
        accept = ok & ((u < 1.0 - 0.0331 * x ** 4) |
                       (np.log(np.maximum(u, 1e-300)) < 0.5 * x * x + d[todo] * (1.0 - v + logv)))
        out[todo[accept]] = d[todo[accept]] * v[accept]
        todo = todo[~accept]
    if a.ndim == 0:
        return float(out[0])
    return out.reshape(a.shape)


def sample_dirichlet(rng, params) -> Tensor:
    """One Dirichlet draw per position: normalised independent gamma draws."""
    alpha = params.alpha.data if isinstance(params, DirichletParams) else np.asarray(params, dtype=np.float64)
    g = sample_gamma(_generator(rng, "dirichlet"), alpha)
    return Tensor(g / g.sum(axis=-1, keepdims=True))


def sample_categorical(rng, probs) -> np.ndarray:
    """Inverse-CDF draw of one index per position (no gradient)."""
    gen = _generator(rng, "categorical")
    p = check_simplex(probs.data if isinstance(probs, Tensor) else probs)
    cdf = np.cumsum(p, axis=-1)
    u = gen.random(p.shape[:-1])
    idx = (cdf <= u[..., None]).sum(axis=-1)
    # rounding can leave u >= cdf[-1]; fall back to the last supported index
    last = p.shape[-1] - 1 - np.argmax((p > 0)[..., ::-1], axis=-1)
    return np.minimum(idx, last).astype(np.int64)


# divergences ---------------------------------------------------------------------------

def dirichlet_kl(alpha, beta) -> np.ndarray:
    """KL(Dir(alpha) || Dir(beta)) along the last axis (values only)."""
    a = np.asarray(alpha, dtype=np.float64)
    b = np.broadcast_to(np.asarray(beta, dtype=np.float64), a.shape)
    sa = a.sum(axis=-1)
    sb = b.sum(axis=-1)
    return (lgamma(sa) - lgamma(sb) - (lgamma(a) - lgamma(b)).sum(axis=-1)
            + ((a - b) * (digamma(a) - np.asarray(digamma(sa))[..., None])).sum(axis=-1))


def dirichlet_kl_to_uniform(params) -> Tensor:
    """KL(Dir(alpha) || Dir(1, ..., 1)) per position, differentiable in alpha.

    Uses the closed form
    ``lgamma(S) - lgamma(K) - sum lgamma(a_k) + sum (a_k - 1)(psi(a_k) - psi(S))``
    with adjoint ``(a_k - 1) psi'(a_k) - (S - K) psi'(S)``.
    """
    alpha = params.alpha if isinstance(params, DirichletParams) else T.as_tensor(params)
    a = alpha.data
    K = a.shape[-1]
    S = a.sum(axis=-1)
    psi_S = np.asarray(digamma(S))
    kl = (lgamma(S) - math.lgamma(K) - lgamma(a).sum(axis=-1)
          + ((a - 1.0) * (digamma(a) - psi_S[..., None])).sum(axis=-1))
    kl = np.maximum(kl, 0.0)

    def backward(g):
        ga = (a - 1.0) * trigamma(a) - ((S - K) * np.asarray(trigamma(S)))[..., None]
        return (g[..., None] * ga,)

    return T.custom_op(np.asarray(kl, dtype=np.float64), (alpha,), backward)


def categorical_entropy(probs) -> np.ndarray:
    """``-sum p log p`` along the last axis with ``0 log 0 = 0``."""
    p = check_simplex(probs.data if isinstance(probs, Tensor) else probs)
    logs = np.log(np.where(p > 0, p, 1.0))
    return -(p * logs).sum(axis=-1)


def categorical_kl_to_uniform(probs, log_probs=None) -> Tensor:
    """``log K - H(p)`` per position; differentiable when given Tensors.

    Passing ``log_probs`` (e.g. from ``log_softmax``) avoids ``log 0``.
    """
    probs = T.as_tensor(probs)
    check_simplex(probs.data)
    K = probs.shape[-1]
    if log_probs is None:
        safe = np.where(probs.data > 0, 1.0, 0.0)
        # entries with p = 0 contribute 0; give them log 1 so the product stays finite
        log_probs = T.log(T.add(T.mul(probs, safe), 1.0 - safe))
    neg_entropy = T.sum(T.mul(probs, log_probs), axis=-1)
    return T.add(neg_entropy, math.log(K))
