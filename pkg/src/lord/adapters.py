"""Low-rank adapters: plain LoRA and the two-branch defended variant.

A plain adapter adds ``(alpha/r) B A x`` to a frozen base layer. The defended
(lord) adapter shares the down-projection A between two up-projections B and
B_prime and gates the second branch per sample with a balance score lambda,
the output of a small sigmoid-capped head reading the first branch:

    out = base(x) + (alpha/r) B A x + lambda * (alpha/r) B_prime A x

lambda estimates the probability that the input is adversarial, so the
defense branch engages only where it is needed. Both up-projections start at
zero, so a freshly attached adapter of either kind leaves the base network's
outputs bit-identical.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError, ValidationError
from .seeding import derive

LORA = "lora"
LORD = "lord"

# Adversarial-training mode: rows at and beyond this boundary are perturbed
# samples, and the adaptation branch (B) contributes to them as a constant.
# The defense branch owns the adversarial correction; without this split the
# perturbation fixes leak into B and distort clean generation once the set is
# frozen. None means every row trains both branches.
_CLEAN_ROWS: int | None = None


class adversarial_rows:
    """Context for stage-1 steps: rows [0, boundary) are clean."""

    def __init__(self, boundary: int):
        self.boundary = boundary
        self._saved = None

    def __enter__(self):
        global _CLEAN_ROWS
        self._saved = _CLEAN_ROWS
        _CLEAN_ROWS = self.boundary
        return self

    def __exit__(self, *exc):
        global _CLEAN_ROWS
        _CLEAN_ROWS = self._saved


def _check_rank(d_in: int, d_out: int, r: int, alpha: float) -> None:
    if r < 1:
        raise ValidationError(f"adapter rank must be positive, got {r}")
    if alpha < r:
        raise ValidationError(f"adapter scaling alpha={alpha} must be >= rank r={r}")
    if 4 * r > min(d_in, d_out):
        raise ValidationError(
            f"rank {r} too large for a {d_in}x{d_out} layer; need r <= min(d_in, d_out)/4"
        )


class LoraAdapter:
    """Rank-r additive update of one linear layer: (alpha/r) B A x."""

    def __init__(self, d_in: int, d_out: int, r: int, alpha: float, rng):
        _check_rank(d_in, d_out, r, alpha)
        self.d_in, self.d_out, self.r, self.alpha = d_in, d_out, r, float(alpha)
        self.A = Tensor(rng.normal(0.0, np.sqrt(1.0 / r), (r, d_in)), requires_grad=True)
        self.B = Tensor(np.zeros((d_out, r)), requires_grad=True)

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def apply(self, base_out: Tensor, x: Tensor) -> Tensor:
        down = ag.matmul(x, ag.transpose(self.A))
        return ag.add(base_out, ag.scale(ag.matmul(down, ag.transpose(self.B)), self.scaling))

    def params(self):
        return [self.A, self.B]

    def named_tensors(self, layer: str) -> dict[str, np.ndarray]:
        return {f"{layer}.lora.A": self.A.data, f"{layer}.lora.B": self.B.data}


class LordAdapter:
    """Two-branch adapter with a learned per-sample balance gate.

    The gate head is linear(d_out -> d_out), ReLU, linear(d_out -> 1), sigmoid,
    applied to the first branch's output. The most recent per-sample gate
    values stay cached on the adapter (``last_gate``) so the detection loss can
    read them after a forward pass.
    """

    def __init__(self, d_in: int, d_out: int, r: int, alpha: float, rng, head_rng, head_std: float = 0.3):
        _check_rank(d_in, d_out, r, alpha)
        self.d_in, self.d_out, self.r, self.alpha = d_in, d_out, r, float(alpha)
        self.A = Tensor(rng.normal(0.0, np.sqrt(1.0 / r), (r, d_in)), requires_grad=True)
        self.B = Tensor(np.zeros((d_out, r)), requires_grad=True)
        self.B_prime = Tensor(np.zeros((d_out, r)), requires_grad=True)
        self.head_w1 = Tensor(head_rng.normal(0.0, head_std, (d_out, d_out)), requires_grad=True)
        self.head_b1 = Tensor(np.zeros(d_out), requires_grad=True)
        self.head_w2 = Tensor(head_rng.normal(0.0, head_std, (1, d_out)), requires_grad=True)
        # Negative prior: with no evidence the gate stays near zero, so the
        # defense branch only engages on positive detection. At noise levels
        # where clean and perturbed overlap, a 0.5 default would inject the
        # branch into every forward pass and its bias compounds over the
        # sampling chain.
        self.head_b2 = Tensor(np.full(1, -2.0), requires_grad=True)
        self.last_gate: Tensor | None = None

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def gate(self, branch1: Tensor) -> Tensor:
        h = ag.relu(ag.add_bias(ag.matmul(branch1, ag.transpose(self.head_w1)), self.head_b1))
        return ag.sigmoid(ag.add_bias(ag.matmul(h, ag.transpose(self.head_w2)), self.head_b2))

    def apply(self, base_out: Tensor, x: Tensor) -> Tensor:
        out, _ = self.apply_with_gate(base_out, x)
        return out

    def apply_with_gate(self, base_out: Tensor, x: Tensor):
        down = ag.matmul(x, ag.transpose(self.A))
        o1 = ag.scale(ag.matmul(down, ag.transpose(self.B)), self.scaling)
        o2 = ag.scale(ag.matmul(down, ag.transpose(self.B_prime)), self.scaling)
        lam = self.gate(o1)
        self.last_gate = lam
        o1_out = o1
        if _CLEAN_ROWS is not None and 0 <= _CLEAN_ROWS < o1.shape[0]:
            o1_out = ag.stack_rows([ag.slice_rows(o1, 0, _CLEAN_ROWS), Tensor(o1.data[_CLEAN_ROWS:])])
        # The gate multiplies the defense branch as a per-sample constant: the
        # detection BCE is the sole optimizer of the head (the denoising losses
        # would otherwise repurpose lambda as a free fitting knob and detection
        # never emerges).
        return ag.add(ag.add(base_out, o1_out), ag.col_scale(o2, Tensor(lam.data))), lam

    def params(self):
        return [self.A, self.B, self.B_prime, self.head_w1, self.head_b1, self.head_w2, self.head_b2]

    def named_tensors(self, layer: str) -> dict[str, np.ndarray]:
        return {
            f"{layer}.lord.A": self.A.data,
            f"{layer}.lord.B": self.B.data,
            f"{layer}.lord.Bp": self.B_prime.data,
            f"{layer}.lord.head.w1": self.head_w1.data,
            f"{layer}.lord.head.b1": self.head_b1.data,
            f"{layer}.lord.head.w2": self.head_w2.data,
            f"{layer}.lord.head.b2": self.head_b2.data,
        }


def lora_forward(adapter: LoraAdapter, base_out: Tensor, x: Tensor) -> Tensor:
    """base_out + (alpha/r) B A x."""
    return adapter.apply(base_out, x)


def lord_forward(adapter: LordAdapter, base_out: Tensor, x: Tensor):
    """Returns (base_out + O1 + lambda * O2, lambda) and caches lambda."""
    return adapter.apply_with_gate(base_out, x)


class AdapterSet:
    """Adapters of one kind keyed by the sublayer name they wrap."""

    def __init__(self, kind: str, adapters: dict, frozen: bool = False):
        if kind not in (LORA, LORD):
            raise ValidationError(f"unknown adapter kind '{kind}'")
        self.kind = kind
        self.adapters = dict(adapters)
        self.frozen = frozen

    @classmethod
    def create(cls, kind: str, model, r: int, alpha: float, seed: int, names=None, key: tuple = ()) -> "AdapterSet":
        """Fresh zero-initialized adapters for the named sublayers.

        The shared down-projection A is drawn from a stream keyed only by the
        layer name (plus ``key``), so a lora set and a lord set built from the
        same seed and key get identical A matrices (the lord head draws from a
        separate stream).
        """
        names = list(names) if names is not None else list(model.attachment_points)
        adapters = {}
        for name in names:
            layer = model.layer(name)
            rng = derive(seed, "adapter", *key, name)
            if kind == LORA:
                adapters[name] = LoraAdapter(layer.d_in, layer.d_out, r, alpha, rng)
            else:
                head_rng = derive(seed, "adapter-head", *key, name)
                adapters[name] = LordAdapter(layer.d_in, layer.d_out, r, alpha, rng, head_rng)
        return cls(kind, adapters)

    def freeze(self) -> "AdapterSet":
        self.frozen = True
        return self

    def params(self):
        """Trainable tensors; empty while frozen."""
        if self.frozen:
            return []
        out = []
        for adapter in self.adapters.values():
            out.extend(adapter.params())
        return out

    def all_params(self):
        out = []
        for adapter in self.adapters.values():
            out.extend(adapter.params())
        return out

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, adapter in self.adapters.items():
            out.update(adapter.named_tensors(name))
        return out

    def reset_gate_caches(self) -> None:
        for adapter in self.adapters.values():
            if isinstance(adapter, LordAdapter):
                adapter.last_gate = None


def attach(model, aset: AdapterSet) -> None:
    """Hook every adapter onto its named sublayer; shapes must agree."""
    for name, adapter in aset.adapters.items():
        layer = model.layer(name)
        if (adapter.d_in, adapter.d_out) != (layer.d_in, layer.d_out):
            raise ShapeError(
                f"adapter for '{name}' is {adapter.d_in}x{adapter.d_out}, "
                f"layer is {layer.d_in}x{layer.d_out}"
            )
    for name, adapter in aset.adapters.items():
        model.layer(name).adapters.append(adapter)


def detach(model, aset: AdapterSet) -> None:
    for name, adapter in aset.adapters.items():
        layer = model.layer(name)
        layer.adapters = [a for a in layer.adapters if a is not adapter]


class attached:
    """Context manager: attach sets on entry, detach on exit."""

    def __init__(self, model, *sets):
        self.model = model
        self.sets = sets

    def __enter__(self):
        for aset in self.sets:
            attach(self.model, aset)
        return self.model

    def __exit__(self, *exc):
        for aset in reversed(self.sets):
            detach(self.model, aset)


def attached_params(model):
    """All trainable tensors reachable through the model, adapters included."""
    out = model.params()
    for layer in model.layers.values():
        for adapter in layer.adapters:
            out.extend(adapter.params())
    return out


def detection_loss(aset: AdapterSet, n_clean: int, n_total: int):
    """BCE of cached gate values against 0 (clean rows) / 1 (perturbed rows).

    Rows [0, n_clean) are the clean half, [n_clean, n_total) the perturbed
    half. Each half is scored separately, averaged across adapters, and the
    two halves are summed. Returns (loss tensor, stats dict with the mean gate
    value per half).
    """
    if aset.kind != LORD:
        raise ValidationError("detection_loss: adapter set is not of kind 'lord'")
    lords = list(aset.adapters.values())
    for adapter in lords:
        if adapter.last_gate is None:
            raise ValidationError("detection_loss: stale gate cache; run a forward pass first")
        if adapter.last_gate.shape[0] != n_total:
            raise ValidationError("detection_loss: cached gates do not match the batch size")
    k = len(lords)
    total = None
    clean_vals, pert_vals = [], []
    for half, label in (((0, n_clean), 0.0), ((n_clean, n_total), 1.0)):
        lo, hi = half
        if lo == hi:
            continue
        for adapter in lords:
            part = ag.slice_rows(adapter.last_gate, lo, hi)
            term = ag.scale(ag.bce_loss(part, np.full((hi - lo, 1), label)), 1.0 / k)
            total = term if total is None else ag.add(total, term)
            (clean_vals if label == 0.0 else pert_vals).append(part.data)
    stats = {
        "gate_clean": float(np.mean(clean_vals)) if clean_vals else float("nan"),
        "gate_pert": float(np.mean(pert_vals)) if pert_vals else float("nan"),
    }
    if total is None:
        raise ValidationError("detection_loss: batch has no rows")
    return total, stats


def detection_scores(aset: AdapterSet) -> np.ndarray:
    """Per-sample gate value averaged over adapters (classifier score)."""
    if aset.kind != LORD:
        raise ValidationError("detection_scores: adapter set is not of kind 'lord'")
    gates = []
    for adapter in aset.adapters.values():
        if adapter.last_gate is None:
            raise ValidationError("detection_scores: stale gate cache; run a forward pass first")
        gates.append(adapter.last_gate.data[:, 0])
    return np.mean(gates, axis=0)


def merge_lora_into_weights(adapter: LoraAdapter, w) -> np.ndarray:
    """Dense-merged weight W + (alpha/r) B A; the input is left untouched."""
    w = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if w.shape != (adapter.d_out, adapter.d_in):
        raise ShapeError(f"merge: weight {w.shape} does not match adapter {adapter.d_out}x{adapter.d_in}")
    return w + adapter.scaling * (adapter.B.data @ adapter.A.data)


class TestStack:
    """Base model with a frozen defended set and a personalization set attached.

    Every wrapped sublayer computes the four-term sum
    base + O1 + lambda * O2 + personalization delta, with lambda still input
    dependent at inference (it cannot be folded into the weights).
    """

    def __init__(self, model, lord_set: AdapterSet, lora_set: AdapterSet):
        self.model = model
        self.lord_set = lord_set
        self.lora_set = lora_set
        attach(model, lord_set)
        attach(model, lora_set)

    def forward(self, z_t, t, token: str):
        return self.model.forward(z_t, t, token)

    def close(self) -> None:
        detach(self.model, self.lora_set)
        detach(self.model, self.lord_set)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def compose_test_stack(model, lord_set: AdapterSet, lora_set: AdapterSet) -> TestStack:
    """Attach a frozen lord set plus a lora set for the testing phase."""
    if lord_set.kind != LORD:
        raise ValidationError("compose_test_stack: first set must be of kind 'lord'")
    if lora_set.kind != LORA:
        raise ValidationError("compose_test_stack: second set must be of kind 'lora'")
    if set(lord_set.adapters) != set(lora_set.adapters):
        raise ValidationError(
            "compose_test_stack: attachment names differ: "
            f"{sorted(lord_set.adapters)} vs {sorted(lora_set.adapters)}"
        )
    return TestStack(model, lord_set, lora_set)
