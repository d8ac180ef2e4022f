"""Training steps: clean, static-label adversarial, and dynamic-label.

The dynamic-label scheme trains two models jointly.  A guide network
sees only clean inputs; its argmax predictions, frozen into one-hot
vectors, replace the ground-truth labels everywhere the target network
is concerned: both when generating adversarial examples (the inner
ascent maximises target cross-entropy against the guide's labels with
both models frozen) and in the outer loss

    combined = CE(guide(x), y) + beta * CE(target(x_adv), onehot(guide(x)))

where only the first term touches the ground truth y.  Because the
labels are detached argmax snapshots, no gradient flows from the target
loss into the guide; the two couple only through the label values.

The static-label baselines differ in what the ascent maximises and what
the outer target term compares against: ground-truth cross-entropy for
pgd-at, and mean squared error to the guide's (non-detached) logits for
lbgat.
"""

from dataclasses import dataclass

import numpy as np

from . import attacks
from . import autodiff as ad
from .attacks import AdversarialBatch, PerturbationBudget
from .errors import ContractError, ShapeError, ValidationError
from .models import Model, frozen

METHODS = ("clean", "pgd-at", "lbgat", "dynat", "dynat-inner")


@dataclass(frozen=True)
class LossWeights:
    """beta scales the target term in the combined objective."""
    beta: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValidationError(f"beta must be in [0, 1], got {self.beta}")


@dataclass(frozen=True)
class OptimizerSettings:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5.0e-4
    decay_epochs: tuple = ()

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class TrainPlan:
    method: str
    epochs: int
    weights: LossWeights = LossWeights()
    budget: PerturbationBudget | None = None
    batch_size: int = 128
    optimizer: OptimizerSettings = OptimizerSettings()
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method '{self.method}' (known: {', '.join(METHODS)})")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.method != "clean" and self.budget is None:
            raise ValidationError(f"method '{self.method}' needs a perturbation budget")


@dataclass
class DynamicLabel:
    """One-hot argmax snapshot of guide logits; never carries gradients."""
    onehot: ad.Tensor
    source_max: np.ndarray


@dataclass
class StepReport:
    guide_loss: float
    target_loss: float
    combined: float
    labels_agreement: float


def dynamic_label(guide_logits: ad.Tensor) -> DynamicLabel:
    """Winner-takes-all labels from guide logits.

    Ties resolve to the lowest class index.  The result is a fresh
    constant tensor, so downstream losses cannot reach the guide
    through it.
    """
    arr = guide_logits.data
    if arr.ndim != 2:
        raise ShapeError(f"dynamic_label: logits must be [batch, classes], got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("dynamic_label: guide logits must be finite")
    idx = arr.argmax(axis=1)
    onehot = np.zeros_like(arr)
    onehot[np.arange(arr.shape[0]), idx] = 1.0
    return DynamicLabel(ad.Tensor(onehot), arr.max(axis=1))


def guide_loss(guide: Model, x: ad.Tensor, y: ad.Tensor) -> ad.Tensor:
    """Cross-entropy of the guide on clean inputs against ground truth."""
    if guide.frozen:
        raise ContractError("guide is frozen; outer step needs it trainable")
    return ad.softmax_cross_entropy(guide.forward(x), y)


def target_loss(target: Model, x_adv: ad.Tensor, labels: ad.Tensor) -> ad.Tensor:
    """Cross-entropy of the target on adversarial inputs against the
    supplied (constant) labels."""
    if target.frozen:
        raise ContractError("target is frozen; outer step needs it trainable")
    return ad.softmax_cross_entropy(target.forward(x_adv), labels)


def combined_loss(gl: ad.Tensor, tl: ad.Tensor, weights: LossWeights) -> ad.Tensor:
    return ad.add(gl, ad.scalar_mul(tl, weights.beta))


def inner_optimize(target: Model, guide: Model, x: ad.Tensor,
                   budget: PerturbationBudget, rng_seed: int) -> AdversarialBatch:
    """Generate adversarial examples against the guide's current labels.

    Both models must already be frozen: generation must never update
    parameters, and the labels are extracted once from the guide before
    the ascent and stay fixed across iterations.
    """
    if not (target.frozen and guide.frozen):
        raise ContractError("inner_optimize requires both models frozen")
    label = dynamic_label(ad.Tensor(attacks.predict(guide, x.data)))
    return attacks.pgd(target, x, label.onehot, budget, rng_seed)


def _agreement(labels_used: np.ndarray, y: np.ndarray) -> float:
    return float((labels_used.argmax(axis=1) == y.argmax(axis=1)).mean())


def dynat_train_step(guide: Model, target: Model, batch, plan: TrainPlan,
                     optimizer: "SGD", epoch: int, step_seed: int) -> StepReport:
    """One joint update: generate against dynamic labels, then descend
    the combined objective with both models trainable."""
    if plan.method not in ("dynat", "dynat-inner"):
        raise ContractError(f"dynat_train_step called with method '{plan.method}'")
    if guide.frozen or target.frozen:
        raise ContractError("models must be unfrozen when entering the outer step")
    x, y = batch
    with frozen(guide, target):
        adv = inner_optimize(target, guide, x, plan.budget, step_seed)
    ad.reset_tape()
    gl = guide_loss(guide, x, y)
    tl = target_loss(target, adv.x_adv, adv.labels_used)
    comb = combined_loss(gl, tl, plan.weights)
    ad.backward(comb)
    optimizer.step(epoch)
    ad.reset_tape()
    return StepReport(float(gl.data), float(tl.data), float(comb.data),
                      _agreement(adv.labels_used.data, y.data))


def pgd_at_step(model: Model, batch, plan: TrainPlan, optimizer: "SGD",
                epoch: int, step_seed: int) -> StepReport:
    """Adversarial training against fixed ground-truth labels."""
    if plan.method != "pgd-at":
        raise ContractError(f"pgd_at_step called with method '{plan.method}'")
    if model.frozen:
        raise ContractError("model must be unfrozen when entering the outer step")
    x, y = batch
    with frozen(model):
        adv = attacks.pgd(model, x, y, plan.budget, step_seed)
    ad.reset_tape()
    tl = ad.softmax_cross_entropy(model.forward(adv.x_adv), y)
    ad.backward(tl)
    optimizer.step(epoch)
    ad.reset_tape()
    loss = float(tl.data)
    return StepReport(0.0, loss, loss, 1.0)


def lbgat_step(guide: Model, target: Model, batch, plan: TrainPlan,
               optimizer: "SGD", epoch: int, step_seed: int) -> StepReport:
    """Guided baseline: ascent maximises MSE between target logits and
    the guide's clean logits; the outer target term minimises the same
    MSE without detaching the guide, so both models feel it."""
    if plan.method != "lbgat":
        raise ContractError(f"lbgat_step called with method '{plan.method}'")
    if guide.frozen or target.frozen:
        raise ContractError("models must be unfrozen when entering the outer step")
    x, y = batch
    ref = attacks.predict(guide, x.data)

    def ascent_loss(logits):
        per_ex = ((logits.data - ref) ** 2).mean(axis=1)
        return ad.mse_loss(logits, ad.Tensor(ref)), per_ex

    with frozen(target):
        _, x_adv, _, _ = attacks.iterated_ascent(target, x.data, plan.budget, step_seed, ascent_loss)
    ad.reset_tape()
    logits_g = guide.forward(x)
    gl = ad.softmax_cross_entropy(logits_g, y)
    tl = ad.mse_loss(target.forward(ad.Tensor(x_adv)), logits_g)
    comb = combined_loss(gl, tl, plan.weights)
    ad.backward(comb)
    optimizer.step(epoch)
    ad.reset_tape()
    return StepReport(float(gl.data), float(tl.data), float(comb.data),
                      _agreement(ref, y.data))


def clean_step(model: Model, batch, plan: TrainPlan, optimizer: "SGD",
               epoch: int) -> StepReport:
    """Plain cross-entropy training on clean inputs."""
    if plan.method != "clean":
        raise ContractError(f"clean_step called with method '{plan.method}'")
    if model.frozen:
        raise ContractError("model must be unfrozen when entering the outer step")
    x, y = batch
    ad.reset_tape()
    loss = ad.softmax_cross_entropy(model.forward(x), y)
    ad.backward(loss)
    optimizer.step(epoch)
    ad.reset_tape()
    val = float(loss.data)
    return StepReport(0.0, val, val, 1.0)


# ---------------------------------------------------------------------------
# optimizer

def sgd_update(params: dict, velocities: dict, settings: OptimizerSettings, epoch: int):
    """One momentum-SGD update with weight decay folded into the gradient:

        v <- momentum * v + grad + weight_decay * theta
        theta <- theta - lr(epoch) * v

    lr(epoch) is the base rate times 0.1 for every decay epoch at or
    before `epoch`.  Gradients are cleared after the update; a missing
    gradient is an error.
    """
    factor = 0.1 ** sum(1 for d in settings.decay_epochs if epoch >= d)
    lr = settings.learning_rate * factor
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter '{name}' has no gradient; run backward first")
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = settings.momentum * v + p.grad + settings.weight_decay * p.data
        velocities[name] = v
        p.data = p.data - lr * v
        p.grad = None


class SGD:
    """Momentum SGD over one or more models, one velocity slot per
    parameter.  Refuses to update frozen models, leaving them untouched."""

    def __init__(self, models, settings: OptimizerSettings):
        self.models = list(models)
        self.settings = settings
        self.velocities = [dict() for _ in self.models]

    def step(self, epoch: int):
        for m in self.models:
            if m.frozen:
                raise ContractError(f"model '{m.spec.name}' is frozen; refusing to update")
        for m, vel in zip(self.models, self.velocities):
            sgd_update(m.params, vel, self.settings, epoch)

    def zero_grad(self):
        for m in self.models:
            m.zero_grad()
