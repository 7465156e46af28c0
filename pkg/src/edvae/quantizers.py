"""Codebook assignment mechanisms.

All quantizers take the encoder output with the category (or embedding)
axis last, ``z_e[B, N, N, K]`` (``[B, N, N, D]`` for the VQ family), and
return a :class:`QuantizeResult`.

* ``edvae_quantize``: evidential Dirichlet-Categorical assignment,
  ``alpha = exp(min(z_e, clamp)) + 1`` and ``pi = alpha / S``.
* ``dvae_quantize``: ``pi = softmax(z_e)``.
* ``gsvq_quantize``: ``pi = softmax(-||z_e - e_j||^2)``.
* ``vq_quantize``: nearest codebook row with a straight-through gradient.

Training phase draws relaxed one-hot samples with Gumbel noise; inference
draws hard indices from ``Categorical(pi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Rng
from .stats import (
    DirichletParams,
    categorical_entropy,
    categorical_kl_to_uniform,
    dirichlet_kl_to_uniform,
    gumbel_softmax_sample,
    sample_categorical,
    sample_dirichlet,
)
from .tensor import Tensor

__all__ = [
    "Codebook",
    "QuantizeResult",
    "DivergenceError",
    "evidence_to_alpha",
    "alpha_to_pi_mean",
    "edvae_quantize",
    "dvae_quantize",
    "gsvq_quantize",
    "vq_quantize",
    "ema_update",
    "embed",
    "TAU_FLOOR",
]

TAU_FLOOR = 1.0 / 16.0
EMA_EPS = 1e-5


class DivergenceError(FloatingPointError):
    """Training produced a non-finite or out-of-range quantity."""

    def __init__(self, quantity: str, iteration: int | None = None, detail: str = ""):
        self.quantity = quantity
        self.iteration = iteration
        self.detail = detail
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"divergence in {quantity}{where}" + (f": {detail}" if detail else ""))


@dataclass
class Codebook:
    """``K x D`` embedding matrix plus usage counters and optional EMA state."""

    embeddings: Tensor
    usage_counts: np.ndarray = None
    ema_sizes: np.ndarray | None = None
    ema_sums: np.ndarray | None = None

    def __post_init__(self):
        if self.embeddings.ndim != 2 or 0 in self.embeddings.shape:
            raise ValueError(f"codebook must be a non-empty K x D matrix, got {self.embeddings.shape}")
        if not np.all(np.isfinite(self.embeddings.data)):
            raise ValueError("codebook embeddings must be finite")
        if self.usage_counts is None:
            self.usage_counts = np.zeros(self.K, dtype=np.int64)

    @property
    def K(self) -> int:
        return self.embeddings.shape[0]

    @property
    def D(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def gaussian(cls, K: int, D: int, rng) -> "Codebook":
        gen = rng.stream("codebook-init") if isinstance(rng, Rng) else rng
        return cls(Tensor(gen.standard_normal((K, D)), requires_grad=True))

    @classmethod
    def uniform(cls, K: int, D: int, rng) -> "Codebook":
        gen = rng.stream("codebook-init") if isinstance(rng, Rng) else rng
        return cls(Tensor(gen.uniform(-1.0 / K, 1.0 / K, size=(K, D))))

    def enable_ema(self) -> None:
        self.ema_sizes = np.ones(self.K)
        self.ema_sums = self.embeddings.data.copy()

    def record_usage(self, indices: np.ndarray) -> None:
        self.usage_counts += np.bincount(np.asarray(indices).reshape(-1), minlength=self.K)


@dataclass
class QuantizeResult:
    z_q: Tensor
    kl_term: Tensor
    position_entropy: np.ndarray
    indices: np.ndarray
    soft_assign: Tensor | None = None
    probs: np.ndarray | None = None
    mean_uncertainty: float | None = None
    alpha: Tensor | None = None
    codebook_term: Tensor | None = None
    commitment_term: Tensor | None = None
    extras: dict = field(default_factory=dict)

    @property
    def hard_indices(self) -> np.ndarray:
        return self.indices


def _check_finite(x: np.ndarray, quantity: str) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(quantity, detail="non-finite values")


def evidence_to_alpha(z_e, clamp_max: float) -> DirichletParams:
    """``alpha = exp(min(z_e, clamp_max)) + 1``."""
    if not clamp_max > 0:
        raise ValueError(f"clamp_max must be positive, got {clamp_max}")
    z_e = T.as_tensor(z_e)
    _check_finite(z_e.data, "encoder output")
    alpha = T.add(T.exp(T.clamp_max(z_e, clamp_max)), 1.0)
    _check_finite(alpha.data, "alpha")
    return DirichletParams(alpha)


def alpha_to_pi_mean(params: DirichletParams) -> Tensor:
    """Dirichlet mean ``alpha / S`` per position."""
    alpha = params.alpha
    return T.div(alpha, T.sum(alpha, axis=-1, keepdims=True))


def embed(assign, codebook: Codebook) -> Tensor:
    """Soft rows ``[..., K]`` multiply the codebook; integer indices gather rows."""
    M = codebook.embeddings
    if isinstance(assign, Tensor):
        lead = assign.shape[:-1]
        flat = T.reshape(assign, (-1, codebook.K))
        return T.reshape(T.matmul(flat, M), (*lead, codebook.D))
    idx = np.asarray(assign)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("hard assignments must be integer indices")
    return T.take_rows(M, idx)


def _relaxed_sample(logits: Tensor, tau: float, rng, noise):
    return gumbel_softmax_sample(logits, max(tau, TAU_FLOOR), rng, noise=noise, hard=tau < TAU_FLOOR)


def _sub(rng, purpose: str):
    return rng.stream(purpose) if isinstance(rng, Rng) else rng


def _categorical_common(logits: Tensor, pi: Tensor, codebook: Codebook, tau: float, phase: str,
                        rng, kl: Tensor, noise=None, **extra) -> QuantizeResult:
    probs = pi.data
    entropy = categorical_entropy(probs)
    if phase == "train":
        soft = _relaxed_sample(logits, tau, _sub(rng, "gumbel"), noise)
        z_q = embed(soft, codebook)
        idx = soft.data.argmax(axis=-1)
        return QuantizeResult(z_q=z_q, kl_term=kl, position_entropy=entropy, indices=idx,
                              soft_assign=soft, probs=probs, **extra)
    if phase == "infer":
        idx = sample_categorical(_sub(rng, "categorical"), probs)
        with T.no_tape():
            z_q = embed(idx, codebook)
        return QuantizeResult(z_q=z_q, kl_term=kl, position_entropy=entropy, indices=idx,
                              probs=probs, **extra)
    raise ValueError(f"phase must be 'train' or 'infer', got {phase!r}")


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def edvae_quantize(z_e, codebook: Codebook, tau: float, clamp_max: float = 20.0,
                   pi_mode: str = "mean", phase: str = "train", rng=None, noise=None) -> QuantizeResult:
    """Evidential quantization.

    ``pi_mode="mean"`` propagates ``pi = alpha / S``. ``"sampled"`` draws
    ``pi ~ Dir(alpha)`` for the forward value while the gradient follows the
    mean path.
    """
    _check_tau(tau)
    z_e = T.as_tensor(z_e)
    if z_e.shape[-1] != codebook.K:
        raise ValueError(f"last axis {z_e.shape[-1]} != codebook size {codebook.K}")
    params = evidence_to_alpha(z_e, clamp_max)
    pi = alpha_to_pi_mean(params)
    if pi_mode == "sampled":
        draw = sample_dirichlet(_sub(rng, "dirichlet"), params)
        # guard log(0) from gamma underflow at tiny alpha totals
        draw_data = np.maximum(draw.data, np.finfo(np.float64).tiny)
        draw_data /= draw_data.sum(axis=-1, keepdims=True)
        pi = T.straight_through(pi, draw_data) if pi.requires_grad else Tensor(draw_data)
    elif pi_mode != "mean":
        raise ValueError(f"pi_mode must be 'mean' or 'sampled', got {pi_mode!r}")
    kl = T.mean(dirichlet_kl_to_uniform(params))
    uncertainty = float(np.mean(codebook.K / params.S))
    logits = T.log(pi) if phase == "train" else pi
    return _categorical_common(logits, pi, codebook, tau, phase, rng, kl, noise=noise,
                               mean_uncertainty=uncertainty, alpha=params.alpha)


def dvae_quantize(z_e, codebook: Codebook, tau: float, phase: str = "train", rng=None,
                  noise=None) -> QuantizeResult:
    """Softmax-Categorical quantization (``pi = softmax(z_e)``)."""
    _check_tau(tau)
    z_e = T.as_tensor(z_e)
    if z_e.shape[-1] != codebook.K:
        raise ValueError(f"last axis {z_e.shape[-1]} != codebook size {codebook.K}")
    _check_finite(z_e.data, "encoder output")
    log_pi = T.log_softmax(z_e, axis=-1)
    pi = T.exp(log_pi)
    kl = T.mean(categorical_kl_to_uniform(pi, log_pi))
    return _categorical_common(z_e, pi, codebook, tau, phase, rng, kl, noise=noise)


def _sq_distances(z: np.ndarray, M: np.ndarray) -> np.ndarray:
    diff = z[..., None, :] - M
    return np.einsum("...kd,...kd->...k", diff, diff)


def gsvq_quantize(z_e, codebook: Codebook, tau: float, phase: str = "train", rng=None,
                  noise=None) -> QuantizeResult:
    """Categorical over codebook rows with logits ``-||z_e - e_j||^2``."""
    _check_tau(tau)
    z_e = T.as_tensor(z_e)
    if z_e.shape[-1] != codebook.D:
        raise ValueError(f"last axis {z_e.shape[-1]} != embedding dim {codebook.D}")
    _check_finite(z_e.data, "encoder output")
    lead = z_e.shape[:-1]
    flat = T.reshape(z_e, (-1, codebook.D))
    M = codebook.embeddings
    z2 = T.sum(T.mul(flat, flat), axis=-1, keepdims=True)
    m2 = T.reshape(T.sum(T.mul(M, M), axis=-1), (1, codebook.K))
    cross = T.matmul(flat, T.transpose(M))
    logits = T.reshape(T.sub(T.mul(cross, 2.0), T.add(z2, m2)), (*lead, codebook.K))
    log_pi = T.log_softmax(logits, axis=-1)
    pi = T.exp(log_pi)
    kl = T.mean(categorical_kl_to_uniform(pi, log_pi))
    return _categorical_common(logits, pi, codebook, tau, phase, rng, kl, noise=noise)


def vq_quantize(z_e, codebook: Codebook) -> QuantizeResult:
    """Nearest-row quantization; ties go to the lowest index.

    The forward value is the selected row; the gradient reaches ``z_e``
    unchanged. ``codebook_term = mean(||sg(z_e) - e||^2)`` and
    ``commitment_term = mean(||z_e - sg(e)||^2)``.
    """
    z_e = T.as_tensor(z_e)
    if z_e.shape[-1] != codebook.D:
        raise ValueError(f"last axis {z_e.shape[-1]} != embedding dim {codebook.D}")
    _check_finite(z_e.data, "encoder output")
    idx = _sq_distances(z_e.data, codebook.embeddings.data).argmin(axis=-1)
    chosen = T.take_rows(codebook.embeddings, idx)
    z_q = T.straight_through(z_e, chosen.data)
    codebook_term = T.mean(T.mul(T.sub(z_e.detach(), chosen), T.sub(z_e.detach(), chosen)))
    diff = T.sub(z_e, chosen.data)
    commitment_term = T.mean(T.mul(diff, diff))
    zero = Tensor(0.0)
    return QuantizeResult(z_q=z_q, kl_term=zero, position_entropy=np.zeros(idx.shape), indices=idx,
                          codebook_term=codebook_term, commitment_term=commitment_term)


def ema_update(codebook: Codebook, z_e, assignments, decay: float = 0.99) -> None:
    """Exponential-moving-average re-estimation of the codebook rows."""
    if not 0 < decay < 1:
        raise ValueError(f"decay must lie in (0, 1), got {decay}")
    if codebook.ema_sizes is None:
        codebook.enable_ema()
    z = np.asarray(z_e.data if isinstance(z_e, Tensor) else z_e, dtype=np.float64).reshape(-1, codebook.D)
    idx = np.asarray(assignments).reshape(-1)
    counts = np.bincount(idx, minlength=codebook.K).astype(np.float64)
    sums = np.zeros((codebook.K, codebook.D))
    np.add.at(sums, idx, z)
    codebook.ema_sizes = decay * codebook.ema_sizes + (1.0 - decay) * counts
    codebook.ema_sums = decay * codebook.ema_sums + (1.0 - decay) * sums
    codebook.embeddings.data = codebook.ema_sums / (codebook.ema_sizes[:, None] + EMA_EPS)

