"""A miniature latent-diffusion stand-in.

Pieces: a linear encoder/decoder pair with orthonormal rows, a DDPM-style
linear-beta noise schedule, forward noising, a small fully connected noise
predictor conditioned on a sinusoidal time embedding and a learned token
embedding, the Monte-Carlo noise-prediction loss, and ancestral sampling.

The noising path is differentiable with respect to the pixel input, which is
what lets attack gradients reach pixel space through the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ValidationError
from .seeding import derive

LATENT_DIM = 64
HIDDEN_WIDTH = 256
TIME_DIM = 32
TOKEN_DIM = 32
HIDDEN_LAYERS = ("fc1", "fc2", "fc3")


# ---------------------------------------------------------------------------
# noise schedule


@dataclass
class NoiseSchedule:
    """Per-timestep variances: beta, alpha = 1 - beta, alpha_bar = cumprod."""

    steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta interpolation from beta_start to beta_end over ``steps``."""
    if steps < 1:
        raise ValidationError("make_schedule: steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError(
            f"make_schedule: need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, steps)
    alpha = 1.0 - beta
    return NoiseSchedule(steps, beta, alpha, np.cumprod(alpha))


# ---------------------------------------------------------------------------
# linear codec


class LinearCodec:
    """Fixed linear encoder/decoder with orthonormal encoder rows.

    The decoder is the pseudo-inverse of the encoder, which for orthonormal
    rows is simply its transpose: decode(encode(x)) is the orthogonal
    projection of x onto the encoder's row space (exact when latent_dim equals
    the pixel dim).
    """

    def __init__(self, enc: np.ndarray, seed: int):
        self.enc = np.asarray(enc, dtype=np.float64)
        self.dec = self.enc.T.copy()
        self.seed = int(seed)
        self.latent_dim, self.pixel_dim = self.enc.shape
        self._enc_t = Tensor(self.enc.T.copy())

    @classmethod
    def random(cls, pixel_dim: int, latent_dim: int, seed: int) -> "LinearCodec":
        """Rows drawn as a seeded random orthonormal frame."""
        rng = derive(seed, "codec")
        q, r = np.linalg.qr(rng.standard_normal((pixel_dim, pixel_dim)))
        q = q * np.sign(np.diag(r))
        return cls(q.T[:latent_dim], seed)

    @classmethod
    def fit(cls, samples: np.ndarray, latent_dim: int, seed: int) -> "LinearCodec":
        """Rows spanning the top principal subspace of a sample batch.

        A random frame keeps only ~latent_dim/pixel_dim of the pixel energy,
        which would sink every pixel-space metric downstream; fitting to the
        pattern family keeps reconstructions faithful. SVD signs are fixed so
        the result is a pure function of the inputs.
        """
        x = np.asarray(samples, dtype=np.float64)
        if latent_dim > min(x.shape):
            raise ValidationError("LinearCodec.fit: latent_dim exceeds sample rank bound")
        _, _, vt = np.linalg.svd(x, full_matrices=False)
        rows = vt[:latent_dim]
        flip = np.sign(rows[np.arange(latent_dim), np.argmax(np.abs(rows), axis=1)])
        return cls(rows * flip[:, None], seed)

    def encode(self, x):
        if isinstance(x, Tensor):
            return ag.matmul(x, self._enc_t)
        return np.asarray(x) @ self.enc.T

    def decode(self, z):
        if isinstance(z, Tensor):
            return ag.matmul(z, Tensor(self.dec.T.copy()))
        return np.asarray(z) @ self.dec.T


# ---------------------------------------------------------------------------
# conditioning

def time_embedding(t, dim: int = TIME_DIM) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (n, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class TokenTable:
    """Learned conditioning embeddings, one row per known token string.

    Unknown tokens raise instead of falling back to a zero vector.
    """

    def __init__(self, tokens, dim: int = TOKEN_DIM, seed: int = 0):
        self.dim = dim
        self.rows: dict[str, Tensor] = {}
        for tok in tokens:
            rng = derive(seed, "token", tok)
            self.rows[tok] = Tensor(rng.normal(0.0, 0.1, (1, dim)), requires_grad=True)

    def embed(self, token: str, n: int) -> Tensor:
        if token not in self.rows:
            raise ValidationError(f"unknown token '{token}'; known: {sorted(self.rows)}")
        return ag.repeat_rows(self.rows[token], n)

    def params(self):
        return list(self.rows.values())


# ---------------------------------------------------------------------------
# denoiser


class Linear:
    """A named dense layer; adapters hook in after the base affine map."""

    def __init__(self, d_in: int, d_out: int, rng, w_std: float | None = None):
        std = w_std if w_std is not None else np.sqrt(2.0 / d_in)
        self.w = Tensor(rng.normal(0.0, std, (d_out, d_in)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)
        self.d_in = d_in
        self.d_out = d_out
        self.adapters: list = []

    def __call__(self, x: Tensor) -> Tensor:
        out = ag.add_bias(ag.matmul(x, ag.transpose(self.w)), self.b)
        for adapter in self.adapters:
            out = adapter.apply(out, x)
        return out

    def params(self):
        return [self.w, self.b]


class Denoiser:
    """Noise predictor: (z_t, time embedding, token embedding) -> eps_hat.

    Three ReLU hidden layers of width 256 plus a linear output head; the
    hidden layers are the named adapter attachment points.
    """

    def __init__(
        self,
        latent_dim: int = LATENT_DIM,
        width: int = HIDDEN_WIDTH,
        time_dim: int = TIME_DIM,
        token_dim: int = TOKEN_DIM,
        tokens=("base", "sks"),
        seed: int = 0,
    ):
        self.latent_dim = latent_dim
        self.time_dim = time_dim
        rng = derive(seed, "denoiser")
        d_in = latent_dim + time_dim + token_dim
        self.layers = {
            "fc1": Linear(d_in, width, rng),
            "fc2": Linear(width, width, rng),
            "fc3": Linear(width, width, rng),
            "out": Linear(width, latent_dim, rng, w_std=np.sqrt(1.0 / width)),
        }
        self.attachment_points = list(HIDDEN_LAYERS)
        self.tokens = TokenTable(tokens, token_dim, seed)

    def layer(self, name: str) -> Linear:
        if name not in self.layers:
            raise ValidationError(f"unknown sublayer '{name}'; known: {sorted(self.layers)}")
        return self.layers[name]

    def forward(self, z_t: Tensor, t, token: str) -> Tensor:
        n = z_t.shape[0]
        temb = Tensor(time_embedding(t, self.time_dim) if np.ndim(t) <= 1 else t)
        if temb.shape[0] == 1 and n > 1:
            temb = Tensor(np.repeat(temb.data, n, axis=0))
        h = ag.concat_cols([z_t, temb, self.tokens.embed(token, n)])
        for name in ("fc1", "fc2", "fc3"):
            h = ag.relu(self.layers[name](h))
        return self.layers["out"](h)

    def params(self):
        out = []
        for layer in self.layers.values():
            out.extend(layer.params())
        out.extend(self.tokens.params())
        return out

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers.items():
            out[f"denoiser.{name}.w"] = layer.w.data
            out[f"denoiser.{name}.b"] = layer.b.data
        for tok, row in self.tokens.rows.items():
            out[f"tokens.{tok}"] = row.data
        return out


# ---------------------------------------------------------------------------
# noising, loss, sampling


def q_sample(z0, t, eps, sched: NoiseSchedule):
    """Forward noising z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    ``t`` may be a scalar or one value per row. Differentiable in z0 (and in
    eps when a tensor is passed); scalar schedule coefficients are constants.
    """
    t = np.atleast_1d(np.asarray(t))
    if t.min() < 0 or t.max() >= sched.steps:
        raise ValidationError(f"q_sample: t out of range [0, {sched.steps})")
    ab = sched.alpha_bar[t]
    s_signal = np.sqrt(ab)
    s_noise = np.sqrt(1.0 - ab)
    if isinstance(z0, Tensor):
        n = z0.shape[0]
        if t.shape[0] == 1 and n > 1:
            s_signal = np.repeat(s_signal, n)
            s_noise = np.repeat(s_noise, n)
        signal = ag.row_scale(z0, s_signal)
        if isinstance(eps, Tensor):
            return ag.add(signal, ag.row_scale(eps, s_noise))
        return ag.add(signal, Tensor(np.asarray(eps) * s_noise[:, None]))
    return np.asarray(z0) * s_signal[:, None] + np.asarray(eps) * s_noise[:, None]


def ldm_loss_given(model: Denoiser, x, token: str, codec: LinearCodec, sched: NoiseSchedule, t, eps) -> Tensor:
    """Noise-prediction loss for fixed draws (t, eps); see ``ldm_loss``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    z0 = codec.encode(x)
    z_t = q_sample(z0, t, eps, sched)
    pred = model.forward(z_t, t, token)
    return ag.mse_loss(pred, Tensor(eps))


def ldm_loss(model: Denoiser, x, token: str, codec: LinearCodec, sched: NoiseSchedule, rng) -> Tensor:
    """Monte-Carlo noise-prediction loss.

    One (t, eps) draw per sample: t uniform over the schedule, eps standard
    normal. Gradients flow to the model, any attached adapters, and the pixel
    input through the encoder and the noising step.
    """
    n = x.shape[0]
    t = rng.integers(0, sched.steps, n)
    eps = rng.standard_normal((n, model.latent_dim))
    return ldm_loss_given(model, x, token, codec, sched, t, eps)


def denoise_sample(model: Denoiser, token: str, codec: LinearCodec, sched: NoiseSchedule, rng, n: int) -> np.ndarray:
    """Ancestral sampling from pure noise, decoded and clamped to [0, 1]."""
    if n == 0:
        return np.zeros((0, codec.pixel_dim))
    z = rng.standard_normal((n, model.latent_dim))
    for t in range(sched.steps - 1, -1, -1):
        eps_hat = model.forward(Tensor(z), np.full(n, t), token).data
        coef = sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t])
        z = (z - coef * eps_hat) / np.sqrt(sched.alpha[t])
        if t > 0:
            z = z + np.sqrt(sched.beta[t]) * rng.standard_normal(z.shape)
    return np.clip(codec.decode(z), 0.0, 1.0)
