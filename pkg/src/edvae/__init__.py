"""Evidential discrete VAE with dVAE and vector-quantization baselines, in numpy."""

from .data import SynthSpec, generate_synth, load_cifar10_binary
from .metrics import entropy_heatmap, mean_position_entropy, mean_uncertainty, perplexity, usage_histogram
from .quantizers import Codebook, DivergenceError, dvae_quantize, edvae_quantize, gsvq_quantize, vq_quantize
from .rng import Rng
from .stats import DirichletParams, dirichlet_kl_to_uniform, gumbel_softmax_sample
from .tensor import Tape, Tensor
from .training import TrainConfig, TrainState, evaluate, infer, train, train_step

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "Rng",
    "DirichletParams",
    "dirichlet_kl_to_uniform",
    "gumbel_softmax_sample",
    "Codebook",
    "DivergenceError",
    "edvae_quantize",
    "dvae_quantize",
    "gsvq_quantize",
    "vq_quantize",
    "TrainConfig",
    "TrainState",
    "train",
    "train_step",
    "infer",
    "evaluate",
    "SynthSpec",
    "generate_synth",
    "load_cifar10_binary",
    "usage_histogram",
    "perplexity",
    "mean_position_entropy",
    "entropy_heatmap",
    "mean_uncertainty",
]
