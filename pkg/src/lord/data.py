"""Synthetic 16x16 grayscale identity patterns.

Each identity is a seeded procedural image: a few Gaussian bumps plus a low
frequency stripe field, clipped to [0, 1]. Samples of one identity share the
bump/stripe parameters and differ by small seeded jitter, so intra-identity
distances stay well below inter-identity distances. Everything is a pure
function of (seed, identity, sample index).
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .seeding import derive

GRID = 16
PIXELS = GRID * GRID

_YY, _XX = np.mgrid[0:GRID, 0:GRID].astype(np.float64)


def _draw_params(seed: int, identity: int) -> dict:
    rng = derive(seed, "identity", identity)
    n_bumps = 3
    return {
        "cx": rng.uniform(3.0, 13.0, n_bumps),
        "cy": rng.uniform(3.0, 13.0, n_bumps),
        "sigma": rng.uniform(1.8, 3.6, n_bumps),
        "amp": rng.uniform(0.35, 0.75, n_bumps),
        "freq": rng.uniform(0.06, 0.18),
        "theta": rng.uniform(0.0, np.pi),
        "phase": rng.uniform(0.0, 2.0 * np.pi),
        "stripe_amp": rng.uniform(0.15, 0.35),
    }


def _render(p: dict) -> np.ndarray:
    img = np.zeros((GRID, GRID))
    for cx, cy, s, a in zip(p["cx"], p["cy"], p["sigma"], p["amp"]):
        img += a * np.exp(-((_XX - cx) ** 2 + (_YY - cy) ** 2) / (2.0 * s * s))
    wave = np.cos(p["theta"]) * _XX + np.sin(p["theta"]) * _YY
    img += p["stripe_amp"] * 0.5 * (1.0 + np.sin(2.0 * np.pi * p["freq"] * wave + p["phase"]))
    return np.clip(img, 0.0, 1.0).reshape(PIXELS)


def identity_pattern(seed: int, identity: int) -> np.ndarray:
    """Canonical (jitter-free) pattern of one identity, flat (256,) in [0, 1]."""
    return _render(_draw_params(seed, identity))


def identity_samples(seed: int, identity: int, count: int, start: int = 0) -> np.ndarray:
    """``count`` jittered variants of an identity, indices start..start+count.

    Distinct index ranges give disjoint, reproducible draws, which is how
    held-out samples are kept separate from training samples.
    """
    if count < 0:
        raise ValidationError("identity_samples: count must be >= 0")
    base = _draw_params(seed, identity)
    out = np.empty((count, PIXELS))
    for j in range(count):
        rng = derive(seed, "sample", identity, start + j)
        p = {
            "cx": base["cx"] + rng.normal(0.0, 0.4, base["cx"].shape),
            "cy": base["cy"] + rng.normal(0.0, 0.4, base["cy"].shape),
            "sigma": base["sigma"] * (1.0 + rng.normal(0.0, 0.05, base["sigma"].shape)),
            "amp": base["amp"] * (1.0 + rng.normal(0.0, 0.08, base["amp"].shape)),
            "freq": base["freq"],
            "theta": base["theta"],
            "phase": base["phase"] + rng.normal(0.0, 0.2),
            "stripe_amp": base["stripe_amp"],
        }
        img = _render(p)
        img = np.clip(img + rng.normal(0.0, 0.01, img.shape), 0.0, 1.0)
        out[j] = img
    return out


def synth_dataset(n_identities: int, per_identity: int, seed: int):
    """Deterministic corpus: (images (n, 256) in [0, 1], identity ids (n,))."""
    if n_identities < 1:
        raise ValidationError("synth_dataset: n_identities must be >= 1")
    if per_identity < 1:
        raise ValidationError("synth_dataset: per_identity must be >= 1")
    images = np.concatenate(
        [identity_samples(seed, ident, per_identity) for ident in range(n_identities)]
    )
    ids = np.repeat(np.arange(n_identities), per_identity)
    return images, ids


def write_pgm(path, image: np.ndarray) -> None:
    """Dump one flat pattern as a binary PGM, for eyeballing samples."""
    img = np.clip(np.asarray(image).reshape(GRID, GRID), 0.0, 1.0)
    data = (img * 255.0).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{GRID} {GRID}\n255\n".encode())
        fh.write(data.tobytes())
