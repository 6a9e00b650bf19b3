"""Low-rank defense toolkit: adversarially robust adapter fine-tuning for a
toy latent diffusion model, with the attacks and evaluation harness around it.
"""

from .autograd import Tensor, Graph, backward, adam_step, AdamState
from .adapters import AdapterSet, LoraAdapter, LordAdapter, compose_test_stack
from .attack import AttackConfig, pgd_perturb, targeted_latent_perturb, build_adversarial_batch
from .diffusion import Denoiser, LinearCodec, NoiseSchedule, make_schedule, ldm_loss, denoise_sample
from .data import synth_dataset, identity_pattern

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "adam_step",
    "AdamState",
    "AdapterSet",
    "LoraAdapter",
    "LordAdapter",
    "compose_test_stack",
    "AttackConfig",
    "pgd_perturb",
    "targeted_latent_perturb",
    "build_adversarial_batch",
    "Denoiser",
    "LinearCodec",
    "NoiseSchedule",
    "make_schedule",
    "ldm_loss",
    "denoise_sample",
    "synth_dataset",
    "identity_pattern",
]

__version__ = "0.1.0"
