"""Training and inference loops for EdVAE and the dVAE / VQ baselines.

Schedule horizons are given at the reference length of 150k iterations and
scaled by ``iterations / reference_iterations`` so short runs keep the shape
of the learning-rate, KL-weight and temperature schedules.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset, ImageBatch, iter_batches, random_batch
from .metrics import UsageHistogram, perplexity, usage_histogram
from .nets import INIT_BOUNDS, ArchConfig, build_decoder, build_encoder
from .quantizers import (
    Codebook,
    DivergenceError,
    QuantizeResult,
    dvae_quantize,
    edvae_quantize,
    ema_update,
    gsvq_quantize,
    vq_quantize,
)
from .rng import Rng
from .special import lgamma
from .tensor import Tensor

__all__ = [
    "TrainConfig",
    "MetricRecord",
    "OptimizerState",
    "Model",
    "TrainState",
    "ConfigError",
    "cosine_anneal",
    "lr_at",
    "beta_at",
    "tau_at",
    "loss_edvae",
    "loss_dvae",
    "loss_vq",
    "adam_step",
    "train_step",
    "infer",
    "evaluate",
    "train",
    "METRIC_FIELDS",
]

MODELS = ("edvae", "dvae", "vq_ema", "gs_vq")
METRIC_FIELDS = ("iter", "loss", "mse", "kl", "beta", "tau", "lr", "perplexity", "mean_entropy", "mean_uncertainty")


class ConfigError(ValueError):
    def __init__(self, message: str, keys=()):
        self.keys = tuple(keys)
        super().__init__(message)


@dataclass
class TrainConfig:
    """Everything that determines a training run (together with the dataset)."""

    beta_max: float
    model: str = "edvae"
    iterations: int = 5000
    batch_size: int = 32
    seed: int = 0
    lr_start: float = 1e-3
    lr_end: float = 1.25e-6
    lr_anneal_iters: float = 50_000
    beta_warmup_iters: float = 5_000
    tau_schedule: str = "exp"
    tau_rate: float = 1e-5
    tau_end: float = 1.0 / 16.0
    tau_value: float = 1.0
    reference_iterations: float = 150_000
    scale_schedules: bool = True
    clamp_max: float = 20.0
    pi_mode: str = "mean"
    codebook_size: int = 64
    embedding_dim: int = 8
    base_channels: int = 16
    first_kernel: int = 3
    res_blocks_per_stage: int = 2
    image_extent: int = 32
    weight_init: str = "fan_in_uniform"
    ema_decay: float = 0.99
    commitment_beta: float = 0.25
    # an alpha or KL intermediate above this counts as divergence; the default is
    # the largest single-precision float, i.e. where a 32-bit run would overflow
    overflow_limit: float = 3.4028234663852886e38

    def __post_init__(self):
        bad = []
        if self.model not in MODELS:
            bad.append("model")
        if self.tau_schedule not in ("exp", "cosine", "constant"):
            bad.append("tau_schedule")
        if self.pi_mode not in ("mean", "sampled"):
            bad.append("pi_mode")
        if self.weight_init not in INIT_BOUNDS:
            bad.append("weight_init")
        for name in ("iterations", "batch_size", "codebook_size", "embedding_dim", "base_channels",
                     "res_blocks_per_stage", "image_extent"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                bad.append(name)
        for name in ("lr_start", "lr_end", "lr_anneal_iters", "beta_warmup_iters", "tau_rate", "tau_end",
                     "tau_value", "reference_iterations", "clamp_max", "overflow_limit"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not v > 0:
                bad.append(name)
        if not isinstance(self.beta_max, (int, float)) or self.beta_max < 0:
            bad.append("beta_max")
        if not 0 < self.ema_decay < 1:
            bad.append("ema_decay")
        if self.image_extent % 4:
            bad.append("image_extent")
        if self.model in ("edvae", "dvae") and self.codebook_size != 4 * self.base_channels:
            bad.append("codebook_size")
        if bad:
            raise ConfigError("invalid config values: " + ", ".join(bad), bad)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        missing = sorted(f.name for f in dataclasses.fields(cls)
                         if f.default is dataclasses.MISSING and f.name not in d)
        if unknown or missing:
            parts = []
            if missing:
                parts.append("missing required keys: " + ", ".join(missing))
            if unknown:
                parts.append("unknown keys: " + ", ".join(unknown))
            raise ConfigError("; ".join(parts), missing + unknown)
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def schedule_scale(self) -> float:
        return self.iterations / self.reference_iterations if self.scale_schedules else 1.0

    @property
    def arch(self) -> ArchConfig:
        categorical = self.model in ("edvae", "dvae")
        return ArchConfig(
            base_channels=self.base_channels,
            input_extent=self.image_extent,
            first_kernel=self.first_kernel,
            latent_channels=self.codebook_size if categorical else self.embedding_dim,
            decoder_in_channels=self.embedding_dim,
            res_blocks_per_stage=self.res_blocks_per_stage,
            weight_init=self.weight_init,
        )

    def model_fields(self) -> dict:
        """Fields that fix the parameter shapes (checked when loading checkpoints)."""
        keys = ("model", "codebook_size", "embedding_dim", "base_channels", "first_kernel",
                "res_blocks_per_stage", "image_extent")
        return {k: getattr(self, k) for k in keys}


@dataclass
class MetricRecord:
    iter: int
    loss: float
    mse: float
    kl: float
    beta: float
    tau: float
    lr: float
    perplexity: float
    mean_entropy: float
    mean_uncertainty: float = math.nan

    def as_row(self) -> list[str]:
        return [str(self.iter)] + [repr(float(getattr(self, k))) for k in METRIC_FIELDS[1:]]


# schedules -------------------------------------------------------------------------------

def cosine_anneal(v_start: float, v_end: float, t: float, t_anneal: float) -> float:
    """Half-cosine from ``v_start`` at 0 to ``v_end`` at ``t_anneal``, flat afterwards."""
    if t_anneal <= 0:
        raise ValueError("t_anneal must be positive")
    frac = min(max(t, 0.0), t_anneal) / t_anneal
    return v_end + 0.5 * (v_start - v_end) * (1.0 + math.cos(math.pi * frac))


def lr_at(cfg: TrainConfig, t: int) -> float:
    return cosine_anneal(cfg.lr_start, cfg.lr_end, t, cfg.lr_anneal_iters * cfg.schedule_scale)


def beta_at(cfg: TrainConfig, t: int) -> float:
    return cosine_anneal(0.0, cfg.beta_max, t, cfg.beta_warmup_iters * cfg.schedule_scale)


def tau_at(cfg: TrainConfig, t: int) -> float:
    if cfg.tau_schedule == "exp":
        return math.exp(-cfg.tau_rate * t / cfg.schedule_scale)
    if cfg.tau_schedule == "cosine":
        return cosine_anneal(1.0, cfg.tau_end, t, cfg.iterations)
    return cfg.tau_value


# losses ------------------------------------------------------------------------------------

def _mse(x, x_hat) -> Tensor:
    x, x_hat = T.as_tensor(x), T.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise T.ShapeError(f"reconstruction shape {x_hat.shape} != input shape {x.shape}")
    d = T.sub(x_hat, x)
    return T.mean(T.mul(d, d))


def _check_loss(loss: Tensor, what: str) -> Tensor:
    if not np.isfinite(loss.data).all():
        raise DivergenceError(what, detail="non-finite loss")
    return loss


def loss_edvae(x, x_hat, kl_term, beta: float) -> tuple[Tensor, Tensor]:
    """``MSE + beta * KL(Dir(alpha) || Dir(1))``; returns ``(total, mse)``."""
    mse = _mse(x, x_hat)
    return _check_loss(T.add(mse, T.mul(T.as_tensor(kl_term), beta)), "loss"), mse


def loss_dvae(x, x_hat, kl_term, beta: float) -> tuple[Tensor, Tensor]:
    """``MSE + beta * KL(Cat(pi) || uniform)``; returns ``(total, mse)``."""
    mse = _mse(x, x_hat)
    return _check_loss(T.add(mse, T.mul(T.as_tensor(kl_term), beta)), "loss"), mse


def loss_vq(x, x_hat, codebook_term, commitment_term, beta_commit: float = 0.25,
            ema: bool = True) -> tuple[Tensor, Tensor]:
    """``MSE + codebook + beta_commit * commitment``; the codebook term is
    dropped when the codebook follows EMA updates."""
    mse = _mse(x, x_hat)
    total = T.add(mse, T.mul(T.as_tensor(commitment_term), beta_commit))
    if not ema:
        total = T.add(total, T.as_tensor(codebook_term))
    return _check_loss(total, "loss"), mse


# optimizer ---------------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state are misaligned")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise T.ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# model -------------------------------------------------------------------------------------

class Model:
    """Encoder, decoder and codebook for one of the four model kinds."""

    def __init__(self, cfg: TrainConfig, rng: Rng | None = None):
        rng = Rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        arch = cfg.arch
        self.encoder = build_encoder(arch, rng.child("encoder"))
        self.decoder = build_decoder(arch, rng.child("decoder"))
        if cfg.model in ("edvae", "dvae"):
            self.codebook = Codebook.gaussian(cfg.codebook_size, cfg.embedding_dim, rng.child("codebook"))
        else:
            self.codebook = Codebook.uniform(cfg.codebook_size, cfg.embedding_dim, rng.child("codebook"))
            if cfg.model == "vq_ema":
                self.codebook.enable_ema()
            else:
                self.codebook.embeddings.requires_grad = True

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("encoder." + n, p) for n, p in self.encoder.named_parameters()]
        out += [("decoder." + n, p) for n, p in self.decoder.named_parameters()]
        if self.codebook.embeddings.requires_grad:
            out.append(("codebook.embeddings", self.codebook.embeddings))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Every array needed to restore the model, by name."""
        out = {n: p.data for n, p in self.named_parameters()}
        out["codebook.embeddings"] = self.codebook.embeddings.data
        out["codebook.usage_counts"] = self.codebook.usage_counts.astype(np.float64)
        if self.codebook.ema_sizes is not None:
            out["codebook.ema_sizes"] = self.codebook.ema_sizes
            out["codebook.ema_sums"] = self.codebook.ema_sums
        return out

    def load_state_tensors(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_tensors()
        missing = sorted(set(expected) - set(arrays))
        if missing:
            raise ConfigError("checkpoint lacks tensors: " + ", ".join(missing), missing)
        params = dict(self.named_parameters())
        for name, ref in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != ref.shape:
                raise ConfigError(f"tensor {name} has shape {arr.shape}, config expects {ref.shape}", [name])
            if name in params:
                params[name].data = arr.copy()
            elif name == "codebook.embeddings":
                self.codebook.embeddings.data = arr.copy()
            elif name == "codebook.usage_counts":
                self.codebook.usage_counts = arr.astype(np.int64)
            elif name == "codebook.ema_sizes":
                self.codebook.ema_sizes = arr.copy()
            elif name == "codebook.ema_sums":
                self.codebook.ema_sums = arr.copy()

    def encode(self, x: Tensor) -> Tensor:
        """Encoder output with the channel axis moved last: ``B x N x N x C``."""
        return T.permute(self.encoder(x), (0, 2, 3, 1))

    def decode(self, z_q: Tensor) -> Tensor:
        return self.decoder(T.permute(z_q, (0, 3, 1, 2)))

    def quantize(self, z_e: Tensor, tau: float, phase: str, rng) -> QuantizeResult:
        cfg = self.cfg
        if cfg.model == "edvae":
            return edvae_quantize(z_e, self.codebook, tau, cfg.clamp_max, cfg.pi_mode, phase, rng)
        if cfg.model == "dvae":
            return dvae_quantize(z_e, self.codebook, tau, phase, rng)
        if cfg.model == "gs_vq":
            return gsvq_quantize(z_e, self.codebook, tau, phase, rng)
        return vq_quantize(z_e, self.codebook)


@dataclass
class TrainState:
    cfg: TrainConfig
    model: Model
    opt: OptimizerState
    rng: Rng
    iteration: int = 0

    @classmethod
    def create(cls, cfg: TrainConfig) -> "TrainState":
        root = Rng(cfg.seed)
        model = Model(cfg, root.child("model"))
        return cls(cfg, model, OptimizerState.for_params(model.parameters()), root)


def _check_alpha(res: QuantizeResult, limit: float, t: int) -> None:
    """Range check on the evidential parameters.

    ``lgamma(S)`` is the largest intermediate of the Dirichlet KL, so bounding
    it (and ``alpha`` itself) flags the runs whose KL would overflow at the
    chosen limit.
    """
    if res.alpha is None:
        return
    top = float(res.alpha.data.max())
    if not np.isfinite(top) or top > limit:
        raise DivergenceError("alpha", t, f"max concentration {top:.3e} exceeds {limit:.3e}")
    s_max = float(res.alpha.data.sum(axis=-1).max())
    lg = lgamma(s_max)
    if not np.isfinite(lg) or lg > limit:
        raise DivergenceError("KL", t, f"lgamma of concentration total {s_max:.3e} exceeds {limit:.3e}")


def train_step(state: TrainState, batch: ImageBatch, t: int) -> MetricRecord:
    """One optimisation step at iteration ``t`` (0-based); returns its metrics."""
    cfg, model = state.cfg, state.model
    tau, beta, lr = tau_at(cfg, t), beta_at(cfg, t), lr_at(cfg, t)
    step_rng = state.rng.child("step", t)
    x = batch.pixels
    try:
        with T.Tape() as tape:
            z_e = model.encode(x)
            res = model.quantize(z_e, tau, "train", step_rng)
            _check_alpha(res, cfg.overflow_limit, t)
            x_hat = model.decode(res.z_q)
            if cfg.model == "vq_ema":
                loss, mse = loss_vq(x, x_hat, res.codebook_term, res.commitment_term, cfg.commitment_beta, ema=True)
            elif cfg.model == "gs_vq" or cfg.model == "dvae":
                loss, mse = loss_dvae(x, x_hat, res.kl_term, beta)
            else:
                loss, mse = loss_edvae(x, x_hat, res.kl_term, beta)
        params = model.parameters()
        for p in params:
            p.grad = None
        tape.backward(loss)
        grads = [p.grad for p in params]
        for (name, _), g in zip(model.named_parameters(), grads):
            if g is not None and not np.all(np.isfinite(g)):
                raise DivergenceError(f"gradient of {name}", t, "non-finite values")
    except (DivergenceError, T.DomainError, FloatingPointError) as exc:
        if isinstance(exc, DivergenceError):
            exc.iteration = t if exc.iteration is None else exc.iteration
            raise
        raise DivergenceError("forward pass", t, str(exc)) from exc
    adam_step(params, grads, state.opt, lr)
    if cfg.model == "vq_ema":
        ema_update(model.codebook, z_e.data, res.indices, cfg.ema_decay)
    model.codebook.record_usage(res.indices)
    state.iteration = t + 1
    hist = usage_histogram(res.indices, cfg.codebook_size)
    kl_value = float(res.kl_term.data) if cfg.model != "vq_ema" else float(res.commitment_term.data)
    return MetricRecord(
        iter=t,
        loss=float(loss.data),
        mse=float(mse.data),
        kl=kl_value,
        beta=beta if cfg.model != "vq_ema" else cfg.commitment_beta,
        tau=tau,
        lr=lr,
        perplexity=perplexity(hist),
        mean_entropy=float(res.position_entropy.mean()),
        mean_uncertainty=res.mean_uncertainty if res.mean_uncertainty is not None else math.nan,
    )


def infer(state: TrainState, batch: ImageBatch, rng=None) -> tuple[np.ndarray, np.ndarray, QuantizeResult]:
    """Hard-quantized reconstruction with frozen parameters (no tape)."""
    cfg, model = state.cfg, state.model
    rng = state.rng.child("infer") if rng is None else rng
    with T.no_tape():
        z_e = model.encode(batch.pixels)
        if cfg.model == "vq_ema":
            res = vq_quantize(z_e, model.codebook)
        else:
            res = model.quantize(z_e, 1.0, "infer", rng)
        x_hat = model.decode(res.z_q)
    return x_hat.data, res.indices, res


def evaluate(state: TrainState, ds: Dataset, batch_size: int = 32, limit: int | None = None,
             seed_key="eval") -> dict:
    """Full hard-quantized pass: perplexity, MSE and entropy statistics."""
    K = state.cfg.codebook_size
    counts = np.zeros(K, dtype=np.int64)
    sq_err = 0.0
    n_pix = 0
    entropies = []
    uncertainties = []
    root = state.rng.child(seed_key)
    for b, batch in enumerate(iter_batches(ds, batch_size, limit)):
        x_hat, idx, res = infer(state, batch, root.child(b))
        counts += np.bincount(idx.reshape(-1), minlength=K)
        sq_err += float(np.sum((x_hat - batch.pixels.data) ** 2))
        n_pix += x_hat.size
        entropies.append(res.position_entropy.reshape(-1))
        if res.alpha is not None:
            uncertainties.append(K / res.alpha.data.sum(axis=-1).reshape(-1))
    ent = np.concatenate(entropies)
    hist = UsageHistogram(counts)
    mse = sq_err / n_pix
    return {
        "perplexity": perplexity(hist),
        "mse": mse,
        "mse_x1e3": mse * 1e3,
        "mean_entropy": float(ent.mean()),
        "std_entropy": float(ent.std()),
        "mean_uncertainty": float(np.concatenate(uncertainties).mean()) if uncertainties else math.nan,
        "usage_counts": counts.tolist(),
        "positions": int(counts.sum()),
    }


@dataclass
class RunResult:
    records: list[MetricRecord]
    evals: list[dict]
    diverged: bool = False
    divergence: str | None = None
    state: TrainState | None = None
    final_eval: dict | None = None


EVAL_FIELDS = ("iter", "perplexity", "mse_x1e3", "mean_entropy", "std_entropy", "mean_uncertainty")


def train(cfg: TrainConfig, train_ds: Dataset, eval_ds: Dataset | None = None, *, eval_every: int = 0,
          eval_size: int | None = None, metrics_path=None, eval_path=None,
          on_step: Callable[[TrainState, int], None] | None = None) -> RunResult:
    """Run ``cfg.iterations`` steps; divergence ends the run and is reported, not raised.

    Metrics rows are appended to ``metrics_path`` (CSV) as they are produced.
    With ``eval_every > 0`` the model is evaluated on ``eval_ds`` at
    ``t = 0, eval_every, ...`` and after the last step.
    """
    state = TrainState.create(cfg)
    records: list[MetricRecord] = []
    evals: list[dict] = []
    result = RunResult(records, evals, state=state)
    fh = open(metrics_path, "w", newline="") if metrics_path else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    if writer:
        writer.writerow(METRIC_FIELDS)

    def run_eval(t):
        ev = evaluate(state, eval_ds, cfg.batch_size, eval_size)
        ev["iter"] = t
        evals.append(ev)

    try:
        for t in range(cfg.iterations):
            if eval_ds is not None and eval_every > 0 and t % eval_every == 0:
                run_eval(t)
            batch = random_batch(train_ds, state.rng.stream("batch", t), cfg.batch_size)
            try:
                rec = train_step(state, batch, t)
            except DivergenceError as exc:
                result.diverged = True
                result.divergence = str(exc)
                break
            records.append(rec)
            if writer:
                writer.writerow(rec.as_row())
            if on_step is not None:
                on_step(state, t)
        if not result.diverged and eval_ds is not None:
            run_eval(cfg.iterations)
            result.final_eval = evals[-1]
    finally:
        if fh:
            fh.close()
    if eval_path and evals:
        with open(eval_path, "w", newline="") as out:
            w = csv.writer(out, lineterminator="\n")
            w.writerow(EVAL_FIELDS)
            for ev in evals:
                w.writerow([ev["iter"]] + [repr(float(ev[k])) for k in EVAL_FIELDS[1:]])
    return result
