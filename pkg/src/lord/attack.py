"""Adversarial sample generation against the toy latent diffusion model.

Two modes share one projected sign-gradient loop over the pixel input:

* untargeted: ascend the noise-prediction loss, the perturbation used to
  build adversarial training batches;
* targeted-latent: descend the distance between the model's noise prediction
  and the encoded target pattern, a stand-in for fine-tuning attacks that
  plant consistent errors. Fine-tuning on such samples drags generated
  images toward the target.

After every iteration the perturbation is clamped to the L-inf ball and the
sample back to [0, 1]; there is no random start.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Graph, Tensor
from .adapters import attached_params
from .diffusion import ldm_loss_given, q_sample
from .errors import ShapeError, ValidationError
from .seeding import derive

UNTARGETED = "untargeted"
TARGETED = "targeted-latent"


@dataclass
class AttackConfig:
    """Knobs for the projected sign-gradient loop.

    ``fixed_draws`` reuses one (t, eps) draw across all iterations instead of
    redrawing per iteration; unit tests use it to pin the loss surface.
    """

    iterations: int = 2
    step_size: float = 8.0 / 255.0
    linf_bound: float = 8.0 / 255.0
    mode: str = UNTARGETED
    target_pattern: np.ndarray | None = None
    seed: int = 0
    fixed_draws: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValidationError("attack: iterations must be >= 0")
        if self.step_size < 0:
            raise ValidationError("attack: step_size must be >= 0")
        if not (0.0 <= self.linf_bound <= 1.0):
            raise ValidationError(f"attack: linf_bound must be in [0, 1], got {self.linf_bound}")
        if self.mode not in (UNTARGETED, TARGETED):
            raise ValidationError(f"attack: unknown mode '{self.mode}'")
        if self.mode == TARGETED and self.target_pattern is None:
            raise ValidationError("attack: targeted-latent mode requires a target_pattern")

    def digest(self) -> str:
        payload = {
            "iterations": self.iterations,
            "step_size": self.step_size,
            "linf_bound": self.linf_bound,
            "mode": self.mode,
            "seed": self.seed,
            "fixed_draws": self.fixed_draws,
            "target": None
            if self.target_pattern is None
            else hashlib.sha256(np.ascontiguousarray(self.target_pattern).tobytes()).hexdigest(),
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class AdversarialBatch:
    """Clean rows, their perturbed counterparts, and 0/1 labels."""

    clean: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    provenance: str = ""

    def combined(self) -> np.ndarray:
        return np.concatenate([self.clean, self.perturbed])


def _check_pixel_range(x: np.ndarray, what: str) -> None:
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValidationError(f"{what}: pixel values must lie in [0, 1]")


def _pgd_loop(x, model, codec, sched, cfg: AttackConfig, rng, loss_fn, ascend: bool) -> np.ndarray:
    x0 = np.array(x, dtype=np.float64)
    _check_pixel_range(x0, "attack input")
    if rng is None:
        rng = derive(cfg.seed, "attack")
    n = x0.shape[0]
    x_adv = x0.copy()
    params = attached_params(model)
    if cfg.fixed_draws:
        t_fix = rng.integers(0, sched.steps, n)
        eps_fix = rng.standard_normal((n, model.latent_dim))
    for _ in range(cfg.iterations):
        if cfg.fixed_draws:
            t, eps = t_fix, eps_fix
        else:
            t = rng.integers(0, sched.steps, n)
            eps = rng.standard_normal((n, model.latent_dim))
        xt = Tensor(x_adv, requires_grad=True)
        graph = Graph()
        with graph, ag.no_grad_params(params):
            loss = loss_fn(xt, t, eps)
        ag.backward(loss, graph)
        step = cfg.step_size * np.sign(xt.grad)
        x_adv = x_adv + step if ascend else x_adv - step
        x_adv = np.clip(x0 + np.clip(x_adv - x0, -cfg.linf_bound, cfg.linf_bound), 0.0, 1.0)
    return x_adv


def pgd_perturb(x, model, token: str, codec, sched, cfg: AttackConfig, rng=None) -> np.ndarray:
    """Untargeted PGD: iterations of sign-gradient ascent on the LDM loss.

    Model parameters are held fixed; only the pixel input moves. Each
    iteration redraws (t, eps) unless ``cfg.fixed_draws``.
    """

    def loss_fn(xt, t, eps):
        return ldm_loss_given(model, xt, token, codec, sched, t, eps)

    return _pgd_loop(x, model, codec, sched, cfg, rng, loss_fn, ascend=True)


# Magnitude of the consistent error planted by the targeted attack, in units
# of the (unit-norm) latent direction toward the target.
TARGET_BIAS_GAIN = 1.0


def targeted_latent_perturb(x, model, token: str, codec, sched, cfg: AttackConfig, rng=None) -> np.ndarray:
    """Targeted-latent PGD: plant a consistent error toward the target.

    The noise-prediction target is the drawn noise plus a fixed-size bias
    along the latent direction from the sample toward ``cfg.target_pattern``.
    Fine-tuning on the result unlearns that bias, which at sampling time
    shifts generated latents toward the target. (Using the raw encoded target
    as the prediction target would be unreachable within the budget and
    wastes the perturbation.)
    """
    if cfg.target_pattern is None:
        raise ValidationError("targeted_latent_perturb: config has no target_pattern")
    target = np.asarray(cfg.target_pattern, dtype=np.float64).reshape(1, -1)
    _check_pixel_range(target, "attack target")
    z_target = codec.encode(target)

    def loss_fn(xt, t, eps):
        z0 = codec.encode(xt)
        z_t = q_sample(z0, t, eps, sched)
        pred = model.forward(z_t, t, token)
        d = z_target - z0.data
        d = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        return ag.mse_loss(pred, Tensor(eps + TARGET_BIAS_GAIN * d))

    return _pgd_loop(x, model, codec, sched, cfg, rng, loss_fn, ascend=False)


def perturb(x, model, token: str, codec, sched, cfg: AttackConfig, rng=None) -> np.ndarray:
    """Dispatch on ``cfg.mode``."""
    if cfg.mode == TARGETED:
        return targeted_latent_perturb(x, model, token, codec, sched, cfg, rng)
    return pgd_perturb(x, model, token, codec, sched, cfg, rng)


def build_adversarial_batch(clean, perturbed, cfg: AttackConfig) -> AdversarialBatch:
    """Pair clean and perturbed rows with labels 0/1, checking the budget.

    Rejects any sample whose perturbation exceeds the configured L-inf bound
    (naming the sample and the measured norm) or leaves [0, 1].
    """
    clean = np.asarray(clean, dtype=np.float64)
    perturbed = np.asarray(perturbed, dtype=np.float64)
    if clean.shape != perturbed.shape:
        raise ShapeError(f"adversarial batch: shapes {clean.shape} and {perturbed.shape} differ")
    _check_pixel_range(perturbed, "perturbed batch")
    norms = np.abs(perturbed - clean).max(axis=1) if clean.size else np.zeros(0)
    bad = np.nonzero(norms > cfg.linf_bound + 1e-12)[0]
    if bad.size:
        i = int(bad[0])
        raise ValidationError(
            f"adversarial batch: sample {i} has ||delta||_inf = {norms[i]:.6g}, "
            f"exceeding the bound {cfg.linf_bound:.6g}"
        )
    n = clean.shape[0]
    labels = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    return AdversarialBatch(clean, perturbed, labels, cfg.digest())
