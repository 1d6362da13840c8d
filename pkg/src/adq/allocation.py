"""Sensitivity-driven mixed-precision bit allocation.

Three stages: accumulate squared weight-gradient norms per quantized layer
(a Fisher-diagonal proxy), split the total bit budget proportionally to
log(1 + sensitivity), then discretize greedily onto the available bit set:
floor each layer, hand out the remaining bits one at a time to the largest
fractional part, never touching a layer twice.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, ValidationError, softmax_cross_entropy


@dataclass
class SensitivityProfile:
    scores: np.ndarray
    n_batches: int

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if np.any(self.scores < 0):
            raise ValidationError("sensitivity scores must be nonnegative")
        if self.n_batches < 1:
            raise ValidationError("n_batches must be >= 1")

    def to_dict(self):
        return {"scores": self.scores.tolist(), "n_batches": self.n_batches}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["scores"], dtype=np.float64), int(d["n_batches"]))


@dataclass
class BitAssignment:
    bits: list
    b_set: tuple
    b_avg: float
    continuous: list = field(default_factory=list)
    shortfall: int = 0   # budget bits that could not be placed (all layers at max)
    excess: int = 0      # bits over budget that could not be removed (all at min)

    def average(self):
        return float(np.mean(self.bits))

    def to_dict(self):
        return {"bits": list(map(int, self.bits)), "b_set": list(self.b_set),
                "b_avg": self.b_avg, "continuous": list(map(float, self.continuous)),
                "shortfall": self.shortfall, "excess": self.excess}

    @classmethod
    def from_dict(cls, d):
        return cls(bits=list(map(int, d["bits"])), b_set=tuple(d["b_set"]),
                   b_avg=float(d["b_avg"]),
                   continuous=list(map(float, d.get("continuous", []))),
                   shortfall=int(d.get("shortfall", 0)), excess=int(d.get("excess", 0)))


def score_sensitivity(model, data_batches, n_batches=8, loss_fn=None):
    """Sum of squared weight-gradient norms over up to n_batches batches.

    Gradients are taken on the model as-is (full precision, pre-quantization);
    parameters are left untouched and grads are cleared afterwards.
    """
    if n_batches < 1:
        raise ValidationError("n_batches must be >= 1")
    layers = model.quantized_layers()
    scores = np.zeros(len(layers), dtype=np.float64)
    used = 0
    for x, y in data_batches:
        if used >= n_batches:
            break
        logits = model.forward(Tensor(np.asarray(x)))
        loss = loss_fn(logits, y) if loss_fn else softmax_cross_entropy(logits, y)
        loss.backward()
        for i, layer in enumerate(layers):
            g = layer.weight.grad
            if g is not None:
                scores[i] += float(np.sum(g.astype(np.float64) ** 2))
        for p in model.parameters():
            p.grad = None
        used += 1
    if used < n_batches:
        warnings.warn(f"only {used} batches available for sensitivity scoring "
                      f"(requested {n_batches})")
    return SensitivityProfile(scores, max(used, 1))


def allocate_continuous(profile, b_total):
    """b'_l = B_total * log(1+sigma_l) / sum_k log(1+sigma_k)."""
    log_terms = np.log1p(profile.scores)
    total = log_terms.sum()
    n = len(log_terms)
    if total <= 0:
        warnings.warn("all sensitivity scores are zero: uniform allocation")
        return np.full(n, b_total / n)
    return b_total * log_terms / total


def discretize_greedy(b_cont, b_set, b_avg):
    """Floor onto b_set, then spend round(L*b_avg - sum) upgrades on the
    largest fractional parts (lowest index on ties, each layer at most once).
    A negative remainder triggers the symmetric downgrade pass. Any budget
    that cannot be placed or removed is reported, never silently dropped.
    """
    b_set = tuple(sorted(set(int(b) for b in b_set)))
    if not b_set:
        raise ValidationError("b_set must be non-empty")
    if not b_set[0] <= b_avg <= b_set[-1]:
        raise ValidationError(
            f"b_avg {b_avg} outside [{b_set[0]}, {b_set[-1]}]")
    b_cont = np.asarray(b_cont, dtype=np.float64)
    n = len(b_cont)
    b_total = n * b_avg

    bits = []
    for v in b_cont:
        at_most = [b for b in b_set if b <= v]
        bits.append(at_most[-1] if at_most else b_set[0])
    b_rem = int(round(b_total - sum(bits)))
    prio = b_cont - np.array(bits, dtype=np.float64)

    shortfall = 0
    excess = 0
    if b_rem > 0:
        taken = np.zeros(n, dtype=bool)
        for _ in range(b_rem):
            candidates = [i for i in range(n) if not taken[i] and bits[i] < b_set[-1]]
            if not candidates:
                break
            best = max(candidates, key=lambda i: (prio[i], -i))
            old = bits[best]
            bits[best] = min(b for b in b_set if b > old)
            taken[best] = True
    elif b_rem < 0:
        taken = np.zeros(n, dtype=bool)
        for _ in range(-b_rem):
            candidates = [i for i in range(n) if not taken[i] and bits[i] > b_set[0]]
            if not candidates:
                break
            worst = min(candidates, key=lambda i: (prio[i], i))
            old = bits[worst]
            bits[worst] = max(b for b in b_set if b < old)
            taken[worst] = True

    gap = int(round(b_total)) - sum(bits)
    if gap > 0:
        shortfall = gap
        warnings.warn(f"bit budget shortfall: {gap} bits could not be placed")
    elif gap < 0:
        excess = -gap
        warnings.warn(f"bit budget excess: {-gap} bits could not be removed")

    return BitAssignment(bits=bits, b_set=b_set, b_avg=float(b_avg),
                         continuous=b_cont.tolist(),
                         shortfall=shortfall, excess=excess)


def allocate(profile, b_set, b_avg):
    """Eq. 9 + Alg. 2 in one call: continuous split then greedy discretization."""
    b_total = len(profile.scores) * b_avg
    return discretize_greedy(allocate_continuous(profile, b_total), b_set, b_avg)
