"""Checkpoint glue: materialize models and adapter sets from tensor maps,
plus the append-only metrics log.

Checkpoints store flat named tensors (``denoiser.fc1.w``, ``tokens.sks``,
``codec.enc``, adapter tensors like ``fc1.lord.A``) with scalar settings in
the metadata block; loading rebuilds the objects and copies values in.
"""

from __future__ import annotations

import os

import numpy as np

from .adapters import LORA, LORD, AdapterSet
from .attack import AdversarialBatch
from .checkpoint import read_checkpoint, write_checkpoint
from .diffusion import Denoiser, LinearCodec, make_schedule
from .errors import ValidationError
from .pipeline import PipelineConfig, World


def save_world(path, world: World) -> None:
    """Persist the pretrained model, codec, and schedule parameters."""
    tensors = dict(world.model.named_tensors())
    tensors["codec.enc"] = world.codec.enc
    write_checkpoint(
        path,
        tensors,
        {
            "kind": "model",
            "seed": world.cfg.seed,
            "config_hash": world.cfg.config_hash(),
            "timesteps": world.sched.steps,
            "beta_start": repr(world.cfg.beta_start),
            "beta_end": repr(world.cfg.beta_end),
            "codec_seed": world.codec.seed,
        },
    )


def load_model(path):
    """Rebuild (model, codec, sched, metadata) from a model checkpoint."""
    tensors, meta = read_checkpoint(path)
    if meta.get("kind") != "model":
        raise ValidationError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    enc = tensors["codec.enc"]
    codec = LinearCodec(enc, int(meta.get("codec_seed", 0)))
    sched = make_schedule(int(meta["timesteps"]), float(meta["beta_start"]), float(meta["beta_end"]))
    tokens = sorted(name.split(".", 1)[1] for name in tensors if name.startswith("tokens."))
    latent_dim, width = tensors["denoiser.out.w"].shape
    model = Denoiser(latent_dim=latent_dim, width=width, tokens=tokens, seed=0)
    for name, layer in model.layers.items():
        np.copyto(layer.w.data, tensors[f"denoiser.{name}.w"])
        np.copyto(layer.b.data, tensors[f"denoiser.{name}.b"])
    for tok in tokens:
        np.copyto(model.tokens.rows[tok].data, tensors[f"tokens.{tok}"])
    return model, codec, sched, meta


def save_adapters(path, aset: AdapterSet, cfg: PipelineConfig, extra: dict | None = None) -> None:
    meta = {
        "kind": f"adapters-{aset.kind}",
        "names": ",".join(aset.adapters),
        "alpha": repr(next(iter(aset.adapters.values())).alpha),
        "r": next(iter(aset.adapters.values())).r,
        "frozen": int(aset.frozen),
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
    }
    meta.update(extra or {})
    write_checkpoint(path, aset.named_tensors(), meta)


def load_adapters(path, model) -> tuple[AdapterSet, dict]:
    tensors, meta = read_checkpoint(path)
    kind = meta.get("kind", "")
    if kind not in ("adapters-lora", "adapters-lord"):
        raise ValidationError(f"{path}: not an adapter checkpoint (kind={kind!r})")
    kind = LORA if kind.endswith("lora") else LORD
    names = meta["names"].split(",")
    aset = AdapterSet.create(kind, model, int(meta["r"]), float(meta["alpha"]), seed=0, names=names)
    for name, arr in tensors.items():
        layer, _, field = name.partition(f".{kind}.")
        adapter = aset.adapters[layer]
        target = {
            "A": adapter.A,
            "B": adapter.B,
        }
        if kind == LORD:
            target.update(
                {
                    "Bp": adapter.B_prime,
                    "head.w1": adapter.head_w1,
                    "head.b1": adapter.head_b1,
                    "head.w2": adapter.head_w2,
                    "head.b2": adapter.head_b2,
                }
            )
        np.copyto(target[field].data, arr)
    if int(meta.get("frozen", 0)):
        aset.freeze()
    return aset, meta


def save_adversarial_batch(path, batch: AdversarialBatch, extra: dict | None = None) -> None:
    meta = {"kind": "adversarial-batch", "provenance": batch.provenance}
    meta.update(extra or {})
    write_checkpoint(
        path,
        {
            "clean": batch.clean,
            "perturbed": batch.perturbed,
            "labels": batch.labels.astype(np.float64),
        },
        meta,
    )


def load_adversarial_batch(path) -> tuple[AdversarialBatch, dict]:
    tensors, meta = read_checkpoint(path)
    if meta.get("kind") != "adversarial-batch":
        raise ValidationError(f"{path}: not an adversarial batch checkpoint")
    batch = AdversarialBatch(
        tensors["clean"],
        tensors["perturbed"],
        tensors["labels"].astype(np.int64),
        meta.get("provenance", ""),
    )
    return batch, meta


# ---------------------------------------------------------------------------
# metrics log


class MetricsLog:
    """Append-only CSV of metric observations.

    Fixed header ``run_id,scenario,seed,epoch,metric,value``; values are
    written with 17 significant digits so they parse back losslessly.
    """

    HEADER = "run_id,scenario,seed,epoch,metric,value"

    def __init__(self, path):
        self.path = path
        if not os.path.exists(path):
            with open(path, "w") as fh:
                fh.write(self.HEADER + "\n")

    def append(self, run_id: str, scenario: str, seed: int, epoch: int, metric: str, value: float) -> None:
        for token in (run_id, scenario, metric):
            if "," in token or "\n" in token:
                raise ValidationError(f"metrics log: field may not contain commas or newlines: {token!r}")
        with open(self.path, "a") as fh:
            fh.write(f"{run_id},{scenario},{seed},{epoch},{metric},{value:.17g}\n")

    def append_report(self, run_id: str, report) -> None:
        for metric in ("denoise_mse", "target_capture", "set_distance"):
            self.append(run_id, report.scenario, report.seed, -1, metric, getattr(report, metric))
