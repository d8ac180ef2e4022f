"""L-infinity evasion attacks: FGSM and projected gradient descent.

Both attacks share one projected signed-gradient ascent driver; FGSM is
the single-step, no-random-start case with the step set to epsilon, so
the two are bit-identical in that configuration by construction.
Attacks freeze the model for every forward pass: parameters never
receive gradients and are bit-identical before and after a call.
Attacks reset the active tape, so run them before building an outer
training graph, never in the middle of one.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, ValidationError
from .models import Model, frozen
from .seeding import make_rng


@dataclass(frozen=True)
class PerturbationBudget:
    """L-inf ball of radius epsilon around the clean input, intersected
    with the [0, 1] pixel box.

    epsilon may be 0, which makes every attack return the (clipped)
    input unchanged; useful as a degenerate control.
    """
    epsilon: float
    step_size: float
    steps: int = 1
    random_start: bool = False

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValidationError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if not 0.0 <= self.step_size <= self.epsilon:
            raise ValidationError(
                f"step_size must be in [0, epsilon={self.epsilon}], got {self.step_size}")
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")


@dataclass
class AdversarialBatch:
    """One attacked batch.

    loss_initial/loss_final are batch means of the attack objective at
    the ascent starting point (after any random start) and at the final
    iterate; the per-example arrays carry the same quantities unreduced.
    labels_used records what the attack optimised against, which for
    dynamic-label training differs from the ground truth.
    """
    x_nat: ad.Tensor
    x_adv: ad.Tensor
    labels_used: ad.Tensor
    loss_initial: float
    loss_final: float
    per_example_initial: np.ndarray
    per_example_final: np.ndarray

    def check(self, budget: PerturbationBudget):
        nat, adv = self.x_nat.data, self.x_adv.data
        assert adv.shape == nat.shape
        assert np.abs(adv - nat).max() <= budget.epsilon + 1e-12
        assert adv.min() >= 0.0 and adv.max() <= 1.0
        assert self.per_example_initial.shape == self.per_example_final.shape == (nat.shape[0],)


def _project_np(arr, nat, budget):
    lo = np.maximum(nat - budget.epsilon, 0.0)
    hi = np.minimum(nat + budget.epsilon, 1.0)
    return np.clip(arr, lo, hi)


def project_linf(x_adv: ad.Tensor, x_nat: ad.Tensor, budget: PerturbationBudget) -> ad.Tensor:
    """Clamp x_adv into the budget ball around x_nat and into [0, 1]."""
    if x_adv.data.shape != x_nat.data.shape:
        raise ShapeError(f"project_linf: shapes {x_adv.data.shape} and {x_nat.data.shape} differ")
    return ad.Tensor(_project_np(x_adv.data, x_nat.data, budget))


def per_example_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """-log softmax(logits) . label for each row, without touching the tape."""
    z = logits - logits.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - (z * labels).sum(axis=1)


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """Logits for a raw array under a frozen model; records nothing."""
    with frozen(model):
        return model.forward(ad.Tensor(x)).data


def accuracy(logits: np.ndarray, labels_onehot: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels_onehot.argmax(axis=1)).mean())


def iterated_ascent(model: Model, x_nat: np.ndarray, budget: PerturbationBudget,
                    rng_seed: int, loss_fn):
    """Projected signed-gradient ascent on an arbitrary objective.

    loss_fn maps a logits Tensor to (scalar loss Tensor, per-example
    loss array).  Returns (x_nat copy, x_adv, per-example initial
    losses, per-example final losses).  Resets the tape every iteration.
    """
    x_nat = np.array(x_nat, dtype=np.float64, copy=True)
    if budget.random_start and budget.epsilon > 0.0:
        rng = make_rng(rng_seed, "linf-start")
        start = _project_np(x_nat + rng.uniform(-budget.epsilon, budget.epsilon, x_nat.shape),
                            x_nat, budget)
    else:
        start = x_nat.copy()

    xa = start
    per_initial = None
    for _ in range(budget.steps):
        ad.reset_tape()
        probe = ad.Tensor(xa, requires_grad=True)
        with frozen(model):
            logits = model.forward(probe)
        loss, per_ex = loss_fn(logits)
        if per_initial is None:
            per_initial = per_ex
        ad.backward(loss)
        xa = _project_np(xa + budget.step_size * np.sign(probe.grad), x_nat, budget)
    ad.reset_tape()

    with frozen(model):
        _, per_final = loss_fn(model.forward(ad.Tensor(xa)))
    ad.reset_tape()
    return x_nat, xa, per_initial, per_final


def pgd(model: Model, x: ad.Tensor, labels: ad.Tensor, budget: PerturbationBudget,
        rng_seed: int) -> AdversarialBatch:
    """Multi-step signed-gradient ascent on cross-entropy against fixed labels.

    labels stay constant across iterations.  The same (inputs, budget,
    rng_seed) always produces byte-identical output.
    """
    if labels.data.ndim != 2 or labels.data.shape[0] != x.data.shape[0]:
        raise ShapeError(
            f"pgd: labels {labels.data.shape} do not pair with batch {x.data.shape}")

    def loss_fn(logits):
        return (ad.softmax_cross_entropy(logits, labels),
                per_example_cross_entropy(logits.data, labels.data))

    x_nat, xa, per_i, per_f = iterated_ascent(model, x.data, budget, rng_seed, loss_fn)
    batch = AdversarialBatch(ad.Tensor(x_nat), ad.Tensor(xa), labels,
                             float(per_i.mean()), float(per_f.mean()), per_i, per_f)
    batch.check(budget)
    return batch


def fgsm(model: Model, x: ad.Tensor, labels: ad.Tensor, budget: PerturbationBudget) -> AdversarialBatch:
    """Single signed-gradient step of size epsilon: the steps=1,
    random_start=False case of pgd."""
    one_step = replace(budget, steps=1, random_start=False, step_size=budget.epsilon)
    return pgd(model, x, labels, one_step, rng_seed=0)


@dataclass(frozen=True)
class AttackStats:
    clean_accuracy: float
    robust_accuracy: float
    mean_loss_gain: float


def attack_success_stats(model: Model, batch: AdversarialBatch,
                         ground_truth: ad.Tensor) -> AttackStats:
    """Accuracy on the clean and attacked inputs against ground truth,
    plus the mean attack-objective gain over the batch."""
    gt = ground_truth.data
    clean = accuracy(predict(model, batch.x_nat.data), gt)
    robust = accuracy(predict(model, batch.x_adv.data), gt)
    gain = float((batch.per_example_final - batch.per_example_initial).mean())
    return AttackStats(clean, robust, gain)
